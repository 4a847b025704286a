//! Run configuration: flat `section.key = value` text.
//!
//! Blank lines and anything after `#` are ignored. Every key must be one
//! of [`KEYS`]; unknown or repeated keys are errors. Keys not present keep
//! their defaults, so an empty file is a valid config.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use tomnet_core::datagen::ExcitationConfig;
use tomnet_core::machines::MachineClass;
use tomnet_core::trainer::TrainConfig;

/// Every accepted key, in the order the default config file lists them.
pub const KEYS: &[&str] = &[
    "run.seed",
    "run.out",
    "fleet.suv",
    "fleet.hatch",
    "fleet.sport",
    "fleet.gt",
    "fleet.track",
    "fleet.lti",
    "fleet.stateless",
    "fleet.test",
    "excitation.length",
    "excitation.alpha",
    "excitation.sigma",
    "train.epochs",
    "train.seq_len",
    "train.stride",
    "train.embed_dim",
    "train.lr",
    "train.beta1",
    "train.beta2",
    "train.eps",
    "train.batch_size",
    "analysis.samples_per_machine",
    "analysis.tag",
    "oracle.stride",
    "oracle.max_epochs",
    "oracle.target_mse",
    "ablation.machines",
    "ablation.alpha",
];

#[derive(Debug, Clone, PartialEq)]
pub struct OracleConfig {
    /// Window stride for the linear-oracle run.
    pub stride: usize,
    pub max_epochs: usize,
    pub target_mse: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationConfig {
    /// Machines in each stateless ablation fleet.
    pub machines: usize,
    /// Excitation smoothing for the shared-weight stateless fleet.
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Master seed; every component seed is derived from it.
    pub seed: u64,
    pub out: PathBuf,
    pub fleet: BTreeMap<MachineClass, usize>,
    /// Machines held out for the test split.
    pub n_test: usize,
    pub excitation: ExcitationConfig,
    /// `seed` here is ignored; see [`crate::seeds`].
    pub train: TrainConfig,
    pub samples_per_machine: usize,
    pub tag: String,
    pub oracle: OracleConfig,
    pub ablation: AblationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            out: PathBuf::from("out"),
            fleet: BTreeMap::from([
                (MachineClass::Suv, 4),
                (MachineClass::Sport, 4),
                (MachineClass::Gt, 4),
                (MachineClass::Track, 4),
            ]),
            n_test: 4,
            excitation: ExcitationConfig::default(),
            train: TrainConfig::default(),
            samples_per_machine: 8,
            tag: "class".into(),
            oracle: OracleConfig { stride: 1, max_epochs: 500, target_mse: 1e-5 },
            ablation: AblationConfig { machines: 4, alpha: 1.0 },
        }
    }
}

impl RunConfig {
    pub fn fleet_size(&self) -> usize {
        self.fleet.values().sum()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| anyhow!("line {}: expected `section.key = value`", lineno + 1))?;
            if !KEYS.contains(&key) {
                bail!("line {}: unknown key `{key}`", lineno + 1);
            }
            if let Some(prev) = seen.insert(key.to_string(), lineno + 1) {
                bail!("line {}: `{key}` already set on line {prev}", lineno + 1);
            }
            cfg.set(key, value).with_context(|| format!("line {}: bad value for `{key}`", lineno + 1))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(v: &str) -> Result<T>
        where
            T::Err: std::error::Error + Send + Sync + 'static,
        {
            Ok(v.parse::<T>()?)
        }
        let class = |name: &str| name.parse::<MachineClass>().map_err(|e| anyhow!(e));
        match key {
            "run.seed" => self.seed = num(value)?,
            "run.out" => self.out = PathBuf::from(value),
            "fleet.test" => self.n_test = num(value)?,
            k if k.starts_with("fleet.") => {
                let c = class(&k["fleet.".len()..].to_uppercase())?;
                let n: usize = num(value)?;
                if n == 0 {
                    self.fleet.remove(&c);
                } else {
                    self.fleet.insert(c, n);
                }
            }
            "excitation.length" => self.excitation.length = num(value)?,
            "excitation.alpha" => self.excitation.alpha = num(value)?,
            "excitation.sigma" => self.excitation.sigma = num(value)?,
            "train.epochs" => self.train.epochs = num(value)?,
            "train.seq_len" => self.train.seq_len = num(value)?,
            "train.stride" => self.train.stride = num(value)?,
            "train.embed_dim" => self.train.embed_dim = num(value)?,
            "train.lr" => self.train.learning_rate = num(value)?,
            "train.beta1" => self.train.adam_beta1 = num(value)?,
            "train.beta2" => self.train.adam_beta2 = num(value)?,
            "train.eps" => self.train.adam_eps = num(value)?,
            "train.batch_size" => self.train.batch_size = num(value)?,
            "analysis.samples_per_machine" => self.samples_per_machine = num(value)?,
            "analysis.tag" => {
                value.parse::<tomnet_core::analysis::Tag>()?;
                self.tag = value.to_string();
            }
            "oracle.stride" => self.oracle.stride = num(value)?,
            "oracle.max_epochs" => self.oracle.max_epochs = num(value)?,
            "oracle.target_mse" => self.oracle.target_mse = num(value)?,
            "ablation.machines" => self.ablation.machines = num(value)?,
            "ablation.alpha" => self.ablation.alpha = num(value)?,
            other => bail!("unhandled key `{other}`"),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.n_test > self.fleet_size() {
            bail!("fleet.test = {} exceeds fleet size {}", self.n_test, self.fleet_size());
        }
        if self.excitation.length == 0 {
            bail!("excitation.length must be at least 1");
        }
        if !(self.excitation.alpha > 0.0 && self.excitation.alpha <= 1.0) {
            bail!("excitation.alpha must lie in (0, 1]");
        }
        if self.samples_per_machine == 0 || self.oracle.stride == 0 || self.ablation.machines < 2 {
            bail!("analysis.samples_per_machine and oracle.stride must be positive, ablation.machines at least 2");
        }
        Ok(())
    }

    /// The file form of this config, parseable by [`RunConfig::parse`].
    pub fn render(&self) -> String {
        let count = |c: MachineClass| self.fleet.get(&c).copied().unwrap_or(0);
        let t = &self.train;
        let values: Vec<String> = vec![
            self.seed.to_string(),
            self.out.display().to_string(),
            count(MachineClass::Suv).to_string(),
            count(MachineClass::Hatch).to_string(),
            count(MachineClass::Sport).to_string(),
            count(MachineClass::Gt).to_string(),
            count(MachineClass::Track).to_string(),
            count(MachineClass::Lti).to_string(),
            count(MachineClass::Stateless).to_string(),
            self.n_test.to_string(),
            self.excitation.length.to_string(),
            self.excitation.alpha.to_string(),
            self.excitation.sigma.to_string(),
            t.epochs.to_string(),
            t.seq_len.to_string(),
            t.stride.to_string(),
            t.embed_dim.to_string(),
            t.learning_rate.to_string(),
            t.adam_beta1.to_string(),
            t.adam_beta2.to_string(),
            t.adam_eps.to_string(),
            t.batch_size.to_string(),
            self.samples_per_machine.to_string(),
            self.tag.clone(),
            self.oracle.stride.to_string(),
            self.oracle.max_epochs.to_string(),
            self.oracle.target_mse.to_string(),
            self.ablation.machines.to_string(),
            self.ablation.alpha.to_string(),
        ];
        KEYS.iter().zip(values).map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_is_default() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
        assert_eq!(RunConfig::parse("# only a comment\n\n").unwrap(), RunConfig::default());
    }

    #[test]
    fn render_round_trips() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::parse(&cfg.render()).unwrap(), cfg);
    }

    #[test]
    fn shipped_default_matches_code() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.conf");
        assert_eq!(RunConfig::load(&path).unwrap(), RunConfig::default());
    }

    #[test]
    fn values_override_defaults() {
        let cfg = RunConfig::parse("train.epochs = 3 # short\nfleet.suv = 0\nfleet.hatch = 2\nrun.seed=9").unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.seed, 9);
        assert!(!cfg.fleet.contains_key(&MachineClass::Suv));
        assert_eq!(cfg.fleet[&MachineClass::Hatch], 2);
    }

    #[test]
    fn rejects_bad_input() {
        let err = |t: &str| format!("{:#}", RunConfig::parse(t).unwrap_err());
        assert!(err("train.epoch = 3").contains("unknown key `train.epoch`"));
        assert!(err("train.epochs = 3\ntrain.epochs = 4").contains("already set on line 1"));
        assert!(err("train.epochs 3").contains("line 1"));
        assert!(err("train.lr = fast").contains("bad value"));
        assert!(err("fleet.test = 99").contains("exceeds fleet size"));
        assert!(err("analysis.tag = colour").contains("valid tags"));
    }
}
