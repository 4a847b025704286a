//! Argument parsing and subcommand dispatch.
//!
//! Exit codes: 0 success, 1 runtime or data error, 2 usage error. Every
//! error is printed on stderr behind an `error:` prefix.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use tomnet_core::analysis::{embed_fleet, emit_scatter, pca3, Tag};
use tomnet_core::datagen::{write_dataset, Split};
use tomnet_core::model::{gradcheck_window, load_model, HeadInputs};
use tomnet_core::trainer::evaluate;

use crate::config::RunConfig;
use crate::pipeline::{self, GRADCHECK_SEED};
use crate::seeds;

/// Central-difference step and pass threshold of `gradcheck`.
pub const GRADCHECK_EPS: f64 = 1e-5;
pub const GRADCHECK_TOL: f64 = 1e-5;

#[derive(Parser, Debug)]
#[command(name = "tomnet", version, about = "Learn machine embeddings from input/output traces")]
struct Cli {
    /// Run configuration file; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for parallel stages; outputs do not depend on it.
    #[arg(long, global = true, value_parser = clap::value_parser!(u16).range(1..))]
    threads: Option<u16>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Spawn the configured fleet and write its dataset.
    Gen {
        /// Dataset directory [default: <run.out>/dataset].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train on a dataset; writes model.json and metrics.json.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory [default: <run.out>/model].
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        stride: Option<usize>,
        /// Metrics file; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sample windows and record their stateful embeddings.
    Embed {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        samples_per_machine: Option<usize>,
        /// [default: <run.out>/embeddings.json]
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Project embedding records onto their top three components.
    Pca {
        /// Embeddings file [default: <run.out>/embeddings.json].
        #[arg(long)]
        data: Option<PathBuf>,
        /// [default: <run.out>/projections.json]
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Scatter plot and coordinate table of projections, coloured by tag.
    Plot {
        /// Projections file [default: <run.out>/projections.json].
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        tag: Option<Tag>,
        /// SVG path [default: <run.out>/plots/pca_<tag>.svg]; the table goes
        /// next to it as .csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic and finite-difference gradients of the window loss.
    Gradcheck {
        #[arg(long, default_value_t = 4)]
        embed_dim: usize,
        #[arg(long, default_value_t = 8)]
        seq_len: usize,
    },
    /// Run the full pipeline twice and judge every acceptance criterion.
    Repro {
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
}

#[derive(Args, Debug, Default)]
struct TrainOverrides {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seq_len: Option<usize>,
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
}

impl TrainOverrides {
    fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        let t = &mut cfg.train;
        t.epochs = self.epochs.unwrap_or(t.epochs);
        t.seq_len = self.seq_len.unwrap_or(t.seq_len);
        t.stride = self.stride.unwrap_or(t.stride);
        t.embed_dim = self.embed_dim.unwrap_or(t.embed_dim);
        t.learning_rate = self.lr.unwrap_or(t.learning_rate);
        t.batch_size = self.batch_size.unwrap_or(t.batch_size);
        cfg.validate()
    }
}

/// Parse `argv` (program name first), run the subcommand and return the
/// process exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn run(cli: Cli) -> Result<i32> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        pool = pool.num_threads(n as usize);
    }
    let pool = pool.build().context("cannot start worker threads")?;
    let explicit_seed = cli.seed;
    pool.install(|| execute(cli.command, cfg, explicit_seed))
}

fn or_out(path: Option<PathBuf>, cfg: &RunConfig, default: &str) -> PathBuf {
    path.unwrap_or_else(|| cfg.out.join(default))
}

fn model_path(path: Option<PathBuf>, cfg: &RunConfig) -> PathBuf {
    path.unwrap_or_else(|| cfg.out.join("model").join(pipeline::MODEL_FILE))
}

fn execute(command: Command, mut cfg: RunConfig, explicit_seed: Option<u64>) -> Result<i32> {
    match command {
        Command::Gen { out } => {
            let out = or_out(out, &cfg, "dataset");
            let data = pipeline::build_dataset(&cfg)?;
            write_dataset(&data, &out)?;
            println!("wrote {} machines to {}", data.trajectories.len(), out.display());
        }
        Command::Train { data, out, overrides } => {
            overrides.apply(&mut cfg)?;
            let dataset = pipeline::load_dataset(&or_out(data, &cfg, "dataset"))?;
            let out = or_out(out, &cfg, "model");
            let (_, metrics) =
                pipeline::train_to_dir(&pipeline::train_config(&cfg, HeadInputs::Full), &dataset, &out)?;
            for s in &metrics.splits {
                println!("{} mse {:.6e} over {} windows", s.split, s.aggregate, s.windows);
            }
            println!("wrote {}", out.display());
        }
        Command::Eval { model, data, split, stride, out } => {
            let model = load_checkpoint(&model_path(model, &cfg))?;
            let dataset = pipeline::load_dataset(&or_out(data, &cfg, "dataset"))?;
            let metrics = evaluate(&model, &dataset, split, stride.unwrap_or(cfg.train.stride))?;
            match out {
                Some(path) => {
                    pipeline::write_json(&metrics, &path)?;
                    println!("{split} mse {:.6e}; wrote {}", metrics.aggregate, path.display());
                }
                None => println!("{}", tomnet_core::jsonfmt::to_string_pretty(&metrics)?),
            }
        }
        Command::Embed { model, data, samples_per_machine, out } => {
            let model = load_checkpoint(&model_path(model, &cfg))?;
            let dataset = pipeline::load_dataset(&or_out(data, &cfg, "dataset"))?;
            let k = samples_per_machine.unwrap_or(cfg.samples_per_machine);
            if k == 0 {
                bail!("--samples-per-machine must be at least 1");
            }
            let records = embed_fleet(&model, &dataset, k, seeds::embed(cfg.seed))?;
            let out = or_out(out, &cfg, "embeddings.json");
            pipeline::write_embeddings(&records, k, &out)?;
            println!("wrote {} embeddings to {}", records.len(), out.display());
        }
        Command::Pca { data, out } => {
            let records = pipeline::read_embeddings(&or_out(data, &cfg, "embeddings.json"))?;
            let pca = pca3(&records)?;
            let out = or_out(out, &cfg, "projections.json");
            pipeline::write_projections(&pca, &records, &out)?;
            let ev = pca.explained_variance;
            println!("explained variance {:.4} {:.4} {:.4}; wrote {}", ev[0], ev[1], ev[2], out.display());
        }
        Command::Plot { data, tag, out } => {
            let file = pipeline::read_projections(&or_out(data, &cfg, "projections.json"))?;
            let tag = match tag {
                Some(tag) => tag,
                None => cfg.tag.parse()?,
            };
            let out = out.unwrap_or_else(|| cfg.out.join("plots").join(format!("pca_{}.svg", tag.as_str())));
            emit_scatter(&file.projections, &file.records, tag, &out)?;
            println!("wrote {}", out.display());
        }
        Command::Gradcheck { embed_dim, seq_len } => {
            let seed = explicit_seed.unwrap_or(GRADCHECK_SEED);
            let check = gradcheck_window(seed, embed_dim, seq_len, GRADCHECK_EPS)?;
            println!("max rel err {:.3e} over {} coordinates", check.max_rel_err, check.coords);
            if check.max_rel_err >= GRADCHECK_TOL {
                eprintln!("error: max rel err {:.3e} is not below {GRADCHECK_TOL:e}", check.max_rel_err);
                return Ok(1);
            }
        }
        Command::Repro { out, overrides } => {
            overrides.apply(&mut cfg)?;
            let out = out.unwrap_or_else(|| cfg.out.clone());
            let report = pipeline::repro(&cfg, &out)?;
            for c in &report.criteria {
                println!("{c}");
            }
            if !report.all_passed() {
                let failed: Vec<String> = report.criteria.iter().filter(|c| !c.passed).map(|c| c.id.to_string()).collect();
                eprintln!("error: criteria {} failed", failed.join(", "));
                return Ok(1);
            }
        }
    }
    Ok(0)
}

fn load_checkpoint(path: &Path) -> Result<tomnet_core::model::ModelParams> {
    load_model(path).with_context(|| format!("cannot load model from {}", path.display()))
}
