//! Pipeline stages shared by the subcommands, and the end-to-end `repro`
//! run that checks every acceptance criterion.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use tomnet_core::analysis::{self, embed_fleet, pca3, silhouette, EmbeddingRecord, Pca, Projection, Tag};
use tomnet_core::datagen::{generate, read_dataset, split_fleet, write_dataset, Dataset, ExcitationConfig, Split, SplitSpec};
use tomnet_core::jsonfmt;
use tomnet_core::machines::{spawn_fleet, Activation, MachineClass, MachineParams, MachineSpec};
use tomnet_core::model::{gradcheck_window, save_model, HeadInputs, ModelParams};
use tomnet_core::rng::{mix, SplitMix64};
use tomnet_core::trainer::{target_variance, train, write_metrics, Metrics, TrainConfig};

use crate::config::RunConfig;
use crate::seeds;

pub const MODEL_FILE: &str = "model.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const EMBEDDINGS_FORMAT: &str = "TOME-1";
pub const PROJECTIONS_FORMAT: &str = "TOMP-1";
pub const SUMMARY_FILE: &str = "acceptance.txt";
/// The gradient check runs on a fixed model, independent of the master seed.
pub const GRADCHECK_SEED: u64 = 7;

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("cannot create {}", parent.display()))?;
    }
    let text = jsonfmt::to_string_pretty(value)?;
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("{} is not a valid file of this kind", path.display()))
}

/// Stratified dataset for the configured fleet.
pub fn build_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let fleet_seed = seeds::fleet(cfg.seed);
    let fleet = spawn_fleet(fleet_seed, &cfg.fleet);
    if fleet.is_empty() {
        bail!("fleet is empty");
    }
    let split = split_fleet(&fleet, fleet.len() - cfg.n_test, cfg.n_test, seeds::split(cfg.seed))?;
    Ok(generate(&fleet, fleet_seed, cfg.excitation, split)?)
}

pub fn train_config(cfg: &RunConfig, head_inputs: HeadInputs) -> TrainConfig {
    TrainConfig { seed: seeds::train(cfg.seed), head_inputs, ..cfg.train }
}

/// Train and write `model.json` and `metrics.json` into `dir`.
pub fn train_to_dir(config: &TrainConfig, data: &Dataset, dir: &Path) -> Result<(ModelParams, Metrics)> {
    let (model, metrics) = train(config, data)?;
    save_model(&model, &dir.join(MODEL_FILE))?;
    write_metrics(&metrics, Some(config), &dir.join(METRICS_FILE))?;
    Ok((model, metrics))
}

#[derive(Serialize, Deserialize)]
pub struct EmbeddingsFile {
    pub format: String,
    pub samples_per_machine: usize,
    pub records: Vec<EmbeddingRecord>,
}

pub fn write_embeddings(records: &[EmbeddingRecord], k: usize, path: &Path) -> Result<()> {
    let file = EmbeddingsFile { format: EMBEDDINGS_FORMAT.into(), samples_per_machine: k, records: records.to_vec() };
    write_json(&file, path)
}

pub fn read_embeddings(path: &Path) -> Result<Vec<EmbeddingRecord>> {
    let file: EmbeddingsFile = read_json(path)?;
    if file.format != EMBEDDINGS_FORMAT {
        bail!("{}: unsupported embeddings format `{}`", path.display(), file.format);
    }
    Ok(file.records)
}

#[derive(Serialize, Deserialize)]
pub struct ProjectionsFile {
    pub format: String,
    pub explained_variance: [f64; 3],
    pub basis: [Vec<f64>; 3],
    pub projections: Vec<Projection>,
    /// Source records, aligned with `projections`.
    pub records: Vec<EmbeddingRecord>,
}

pub fn write_projections(pca: &Pca, records: &[EmbeddingRecord], path: &Path) -> Result<()> {
    let file = ProjectionsFile {
        format: PROJECTIONS_FORMAT.into(),
        explained_variance: pca.explained_variance,
        basis: pca.basis.clone(),
        projections: pca.projections.clone(),
        records: records.to_vec(),
    };
    write_json(&file, path)
}

pub fn read_projections(path: &Path) -> Result<ProjectionsFile> {
    let file: ProjectionsFile = read_json(path)?;
    if file.format != PROJECTIONS_FORMAT {
        bail!("{}: unsupported projections format `{}`", path.display(), file.format);
    }
    Ok(file)
}

/// Largest deviation of `basis` from orthonormality.
pub fn orthonormality_error(basis: &[Vec<f64>; 3]) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..3 {
        for j in 0..=i {
            let d: f64 = basis[i].iter().zip(&basis[j]).map(|(a, b)| a * b).sum();
            worst = worst.max((d - if i == j { 1.0 } else { 0.0 }).abs());
        }
    }
    worst
}

fn stateless_fleet(seed: u64, n: usize, activation: Activation, shared: bool) -> Vec<MachineSpec> {
    let mut fleet = spawn_fleet(seed, &BTreeMap::from([(MachineClass::Stateless, n)]));
    let first = fleet[0].params.clone();
    for spec in fleet.iter_mut() {
        if shared {
            spec.params = first.clone();
        }
        if let MachineParams::Stateless(p) = &mut spec.params {
            p.activation = activation;
        }
    }
    fleet
}

fn all_train(fleet: &[MachineSpec]) -> SplitSpec {
    SplitSpec { train_ids: fleet.iter().map(|s| s.machine_id).collect(), test_ids: vec![] }
}

fn split_mse(metrics: &Metrics, split: Split) -> f64 {
    metrics.split(split).map_or(f64::NAN, |s| s.aggregate)
}

/// Timing-free numbers from one pipeline pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Measurements {
    pub gradcheck_max_rel_err: f64,
    pub oracle_epochs: usize,
    pub oracle_train_mse: f64,
    pub linear_full_train_mse: f64,
    pub linear_baseline_train_mse: f64,
    pub vehicle_train_mse: f64,
    pub vehicle_test_mse: f64,
    pub vehicle_test_variance: f64,
    pub vehicle_baseline_test_mse: f64,
    pub silhouette_suv_track: f64,
    pub silhouette_classes: f64,
    pub silhouette_year: f64,
    pub silhouette_mass: f64,
    pub stateless_full_test_mse: f64,
    pub stateless_baseline_test_mse: f64,
    pub vehicle_pca_orthonormality: f64,
    pub vehicle_explained_variance: [f64; 3],
    pub rank_one_direction_error: f64,
    pub rank_one_first_fraction: f64,
    pub rank_one_orthonormality: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Timings {
    pub gradcheck: f64,
    pub oracle: f64,
    pub vehicles: f64,
}

fn secs(t: Instant) -> f64 {
    t.elapsed().as_secs_f64()
}

/// Rank-one synthetic PCA check: error of the recovered direction and the
/// first explained-variance fraction.
fn rank_one_check(seed: u64) -> Result<(f64, f64, f64)> {
    let dim = 16;
    let mut rng = SplitMix64::new(mix(&[seed, 0x9A2C_0001]));
    let mut v: Vec<f64> = (0..dim).map(|_| rng.symmetric()).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    let mean: Vec<f64> = (0..dim).map(|_| 5.0 * rng.symmetric()).collect();
    let records: Vec<EmbeddingRecord> = (0..32)
        .map(|k| {
            let t = 4.0 * rng.symmetric();
            EmbeddingRecord {
                machine_id: k,
                class: MachineClass::Stateless,
                mass_bucket: None,
                year_bucket: None,
                s: mean.iter().zip(&v).map(|(m, d)| m + t * d).collect(),
            }
        })
        .collect();
    let pca = pca3(&records)?;
    let sign = pca.basis[0].iter().zip(&v).map(|(a, b)| a * b).sum::<f64>().signum();
    let err = pca.basis[0].iter().zip(&v).map(|(a, b)| (a - sign * b).abs()).fold(0.0, f64::max);
    Ok((err, pca.explained_variance[0], orthonormality_error(&pca.basis)))
}

/// One full pass: every experiment, every artifact under `dir`.
pub fn run_pass(cfg: &RunConfig, dir: &Path) -> Result<(Measurements, Timings)> {
    cfg.validate()?;
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let mut timings = Timings::default();

    log::info!("gradient check");
    let t = Instant::now();
    let grad = gradcheck_window(GRADCHECK_SEED, 4, 8, 1e-5)?;
    timings.gradcheck = secs(t);

    log::info!("linear oracle");
    let t = Instant::now();
    let oracle_dir = dir.join("oracle");
    let fleet = stateless_fleet(seeds::oracle(cfg.seed), 1, Activation::Identity, false);
    let data = generate(&fleet, seeds::oracle(cfg.seed), cfg.excitation, all_train(&fleet))?;
    write_dataset(&data, &oracle_dir.join("dataset"))?;
    let oracle_cfg = TrainConfig {
        epochs: cfg.oracle.max_epochs,
        stride: cfg.oracle.stride,
        stop_below: Some(cfg.oracle.target_mse),
        ..train_config(cfg, HeadInputs::Full)
    };
    let (_, oracle) = train_to_dir(&oracle_cfg, &data, &oracle_dir)?;
    timings.oracle = secs(t);

    log::info!("linear fleet ablation");
    let linear_dir = dir.join("linear");
    let fleet = stateless_fleet(seeds::linear(cfg.seed), cfg.ablation.machines, Activation::Identity, false);
    let data = generate(&fleet, seeds::linear(cfg.seed), cfg.excitation, all_train(&fleet))?;
    write_dataset(&data, &linear_dir.join("dataset"))?;
    let (_, linear_full) = train_to_dir(&train_config(cfg, HeadInputs::Full), &data, &linear_dir.join("full"))?;
    let (_, linear_base) = train_to_dir(&train_config(cfg, HeadInputs::InputOnly), &data, &linear_dir.join("baseline"))?;

    log::info!("stateless fleet ablation");
    let stateless_dir = dir.join("stateless");
    let fleet = stateless_fleet(seeds::stateless(cfg.seed), cfg.ablation.machines, Activation::Tanh, true);
    let split = split_fleet(&fleet, fleet.len() - 1, 1, seeds::split(cfg.seed))?;
    let excitation = ExcitationConfig { alpha: cfg.ablation.alpha, ..cfg.excitation };
    let data = generate(&fleet, seeds::stateless(cfg.seed), excitation, split)?;
    write_dataset(&data, &stateless_dir.join("dataset"))?;
    let (_, stateless_full) = train_to_dir(&train_config(cfg, HeadInputs::Full), &data, &stateless_dir.join("full"))?;
    let (_, stateless_base) =
        train_to_dir(&train_config(cfg, HeadInputs::InputOnly), &data, &stateless_dir.join("baseline"))?;

    log::info!("vehicle fleet");
    let t = Instant::now();
    let vehicle_dir = dir.join("vehicles");
    let data = build_dataset(cfg)?;
    write_dataset(&data, &vehicle_dir.join("dataset"))?;
    let (model, vehicle) = train_to_dir(&train_config(cfg, HeadInputs::Full), &data, &vehicle_dir.join("full"))?;
    let test_variance = target_variance(&data, Split::Test, cfg.train.seq_len, cfg.train.stride)?;
    timings.vehicles = secs(t);
    let (_, vehicle_base) = train_to_dir(&train_config(cfg, HeadInputs::InputOnly), &data, &vehicle_dir.join("baseline"))?;

    log::info!("embedding analysis");
    let records = embed_fleet(&model, &data, cfg.samples_per_machine, seeds::embed(cfg.seed))?;
    write_embeddings(&records, cfg.samples_per_machine, &vehicle_dir.join("embeddings.json"))?;
    let pca = pca3(&records)?;
    write_projections(&pca, &records, &vehicle_dir.join("projections.json"))?;
    for tag in [Tag::Class, Tag::MassBucket, Tag::YearBucket] {
        let path = vehicle_dir.join("plots").join(format!("pca_{}.svg", tag.as_str()));
        analysis::emit_scatter(&pca.projections, &records, tag, &path)?;
    }
    let suv_track = silhouette(&records, |r| {
        matches!(r.class, MachineClass::Suv | MachineClass::Track).then(|| r.class.to_string())
    })?;
    let classes = silhouette(&records, |r| Some(r.class.to_string()))?;
    let year = silhouette(&records, |r| r.year_bucket.clone())?;
    let mass = silhouette(&records, |r| r.mass_bucket.clone())?;
    let (rank_err, rank_fraction, rank_ortho) = rank_one_check(cfg.seed)?;

    let m = Measurements {
        gradcheck_max_rel_err: grad.max_rel_err,
        oracle_epochs: oracle.epochs.len(),
        oracle_train_mse: split_mse(&oracle, Split::Train),
        linear_full_train_mse: split_mse(&linear_full, Split::Train),
        linear_baseline_train_mse: split_mse(&linear_base, Split::Train),
        vehicle_train_mse: split_mse(&vehicle, Split::Train),
        vehicle_test_mse: split_mse(&vehicle, Split::Test),
        vehicle_test_variance: test_variance,
        vehicle_baseline_test_mse: split_mse(&vehicle_base, Split::Test),
        silhouette_suv_track: suv_track,
        silhouette_classes: classes,
        silhouette_year: year,
        silhouette_mass: mass,
        stateless_full_test_mse: split_mse(&stateless_full, Split::Test),
        stateless_baseline_test_mse: split_mse(&stateless_base, Split::Test),
        vehicle_pca_orthonormality: orthonormality_error(&pca.basis),
        vehicle_explained_variance: pca.explained_variance,
        rank_one_direction_error: rank_err,
        rank_one_first_fraction: rank_fraction,
        rank_one_orthonormality: rank_ortho,
    };
    write_json(&m, &dir.join("measurements.json"))?;
    Ok((m, timings))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CriterionResult {
    pub id: u8,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl std::fmt::Display for CriterionResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{verdict} [{}] {}: {}", self.id, self.name, self.detail)
    }
}

/// Relative gap between a model and its embeddings-zeroed baseline.
pub fn relative_gain(full: f64, baseline: f64) -> f64 {
    (baseline - full) / baseline
}

/// Judge every criterion from one pass plus the determinism comparison.
pub fn judge(m: &Measurements, t: &Timings, determinism: (bool, String)) -> Vec<CriterionResult> {
    let c = |id, name, passed, detail: String| CriterionResult { id, name, passed, detail };
    let normalized = m.vehicle_test_mse / m.vehicle_test_variance;
    let ratio = m.vehicle_test_mse / m.vehicle_train_mse;
    let linear_gain = relative_gain(m.linear_full_train_mse, m.linear_baseline_train_mse);
    let vehicle_gain = relative_gain(m.vehicle_test_mse, m.vehicle_baseline_test_mse);
    let stateless_gap = relative_gain(m.stateless_full_test_mse, m.stateless_baseline_test_mse).abs();
    vec![
        c(
            1,
            "gradient fidelity",
            m.gradcheck_max_rel_err < 1e-5 && t.gradcheck < 60.0,
            format!("max rel err {:.3e} (< 1e-5), {:.1} s", m.gradcheck_max_rel_err, t.gradcheck),
        ),
        c(
            2,
            "linear oracle",
            m.oracle_train_mse <= 1e-5 && m.oracle_epochs <= 500 && t.oracle < 120.0,
            format!("train mse {:.3e} (<= 1e-5) after {} epochs, {:.1} s", m.oracle_train_mse, m.oracle_epochs, t.oracle),
        ),
        c(
            3,
            "embedding necessity",
            linear_gain >= 0.2,
            format!(
                "train mse {:.3e} vs baseline {:.3e}: {:.1}% lower (>= 20%)",
                m.linear_full_train_mse,
                m.linear_baseline_train_mse,
                100.0 * linear_gain
            ),
        ),
        c(
            4,
            "vehicle generalization",
            normalized < 0.05 && ratio <= 3.0 && t.vehicles < 1800.0,
            format!(
                "normalized test mse {normalized:.4} (< 0.05), test/train {ratio:.2} (<= 3), train {:.3e} test {:.3e}, {:.1} s",
                m.vehicle_train_mse, m.vehicle_test_mse, t.vehicles
            ),
        ),
        c(
            5,
            "embedding structure",
            m.silhouette_suv_track >= 0.2 && m.silhouette_classes >= 0.05,
            format!(
                "silhouette SUV/TRACK {:.3} (>= 0.2), four classes {:.3} (>= 0.05)",
                m.silhouette_suv_track, m.silhouette_classes
            ),
        ),
        c(
            6,
            "nuisance rejection",
            (-0.1..=0.1).contains(&m.silhouette_year),
            format!("year-bucket silhouette {:.3} (in [-0.1, 0.1])", m.silhouette_year),
        ),
        c(
            7,
            "stateful ablation",
            vehicle_gain >= 0.2 && stateless_gap < 0.05,
            format!(
                "vehicles {:.1}% lower than baseline (>= 20%), stateless gap {:.1}% (< 5%)",
                100.0 * vehicle_gain,
                100.0 * stateless_gap
            ),
        ),
        c(8, "determinism", determinism.0, determinism.1),
        c(
            9,
            "pca properties",
            m.vehicle_pca_orthonormality < 1e-9
                && m.rank_one_orthonormality < 1e-9
                && m.rank_one_direction_error < 1e-6
                && m.rank_one_first_fraction > 0.999,
            format!(
                "orthonormality err {:.1e} / {:.1e} (< 1e-9), rank-one direction err {:.1e} (< 1e-6), first fraction {:.6} (> 0.999)",
                m.vehicle_pca_orthonormality,
                m.rank_one_orthonormality,
                m.rank_one_direction_error,
                m.rank_one_first_fraction
            ),
        ),
    ]
}

fn tree(dir: &Path) -> Result<BTreeMap<PathBuf, Vec<u8>>> {
    let mut files = BTreeMap::new();
    for entry in walkdir::WalkDir::new(dir).sort_by_file_name() {
        let entry = entry?;
        if entry.file_type().is_file() {
            let rel = entry.path().strip_prefix(dir)?.to_path_buf();
            files.insert(rel, fs::read(entry.path())?);
        }
    }
    Ok(files)
}

/// Compare two artifact trees byte for byte.
pub fn compare_trees(a: &Path, b: &Path) -> Result<(bool, String)> {
    let (ta, tb) = (tree(a)?, tree(b)?);
    let mut differing: Vec<String> = ta
        .iter()
        .filter(|(path, bytes)| tb.get(*path) != Some(bytes))
        .map(|(path, _)| path.display().to_string())
        .collect();
    differing.extend(tb.keys().filter(|p| !ta.contains_key(*p)).map(|p| p.display().to_string()));
    let total: usize = ta.values().map(Vec::len).sum();
    Ok(if differing.is_empty() {
        (true, format!("{} files ({total} bytes) identical across two runs", ta.len()))
    } else {
        (false, format!("{} of {} files differ, first: {}", differing.len(), ta.len(), differing[0]))
    })
}

#[derive(Debug, Clone)]
pub struct ReproReport {
    pub criteria: Vec<CriterionResult>,
    pub measurements: Measurements,
    pub timings: Timings,
}

impl ReproReport {
    pub fn all_passed(&self) -> bool {
        self.criteria.iter().all(|c| c.passed)
    }

    pub fn criterion(&self, id: u8) -> &CriterionResult {
        &self.criteria[id as usize - 1]
    }
}

/// Run the pipeline twice under `out` (`run_a`, `run_b`), compare the
/// artifacts and judge every criterion. The verdict lines are written to
/// `out/acceptance.txt`.
pub fn repro(cfg: &RunConfig, out: &Path) -> Result<ReproReport> {
    let (a, b) = (out.join("run_a"), out.join("run_b"));
    for dir in [&a, &b] {
        if dir.exists() {
            fs::remove_dir_all(dir).with_context(|| format!("cannot clear {}", dir.display()))?;
        }
    }
    log::info!("pass 1 of 2");
    let (measurements, timings) = run_pass(cfg, &a)?;
    log::info!("pass 2 of 2");
    run_pass(cfg, &b)?;
    let determinism = compare_trees(&a, &b)?;
    let criteria = judge(&measurements, &timings, determinism);
    let summary: String = criteria.iter().map(|c| format!("{c}\n")).collect();
    fs::write(out.join(SUMMARY_FILE), summary).with_context(|| format!("cannot write {}", out.display()))?;
    Ok(ReproReport { criteria, measurements, timings })
}

/// Load a dataset, naming the directory in errors.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    read_dataset(dir).with_context(|| format!("cannot load dataset from {}", dir.display()))
}
