//! Excitation, rollout, windowing, fleet splitting and dataset persistence.
//!
//! On disk a dataset is a directory holding `manifest.json` plus one
//! `traj_<machine_id>.jsonl` per machine, one record per tick:
//!
//! ```text
//! {"t":0,"i":[d_throttle,d_brake,d_steer],"o":[dx,dy,dz]}
//! ```
//!
//! Floats are written with 17 significant digits so reads are bit-exact.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::jsonfmt::{self, float17};
use crate::machines::{ControlDelta, Machine, MachineClass, MachineError, MachineSpec, MotionDelta, CONTROL_LIMIT};
use crate::rng::{mix, SplitMix64};

pub const DATASET_FORMAT: &str = "TOMD-1";
pub const MANIFEST_FILE: &str = "manifest.json";
/// Added to the throttle channel before clamping so vehicles get moving.
pub const THROTTLE_BIAS: f64 = 0.05;
/// Domain tag for per-trajectory excitation seeds.
pub const EXCITATION_TAG: u64 = 0xE5C17A;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("excitation length must be at least 1")]
    EmptyExcitation,
    #[error("alpha must lie in (0, 1], got {0}")]
    BadAlpha(f64),
    #[error("{0} must be at least 1")]
    ZeroParameter(&'static str),
    #[error("split sizes {n_train} + {n_test} do not match fleet size {fleet}")]
    SplitMismatch { n_train: usize, n_test: usize, fleet: usize },
    #[error(transparent)]
    Machine(#[from] MachineError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: missing file")]
    MissingFile { path: PathBuf },
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("{path}: unsupported dataset format `{found}` (expected {DATASET_FORMAT})")]
    UnsupportedVersion { path: PathBuf, found: String },
    #[error("{path}: {msg}")]
    Invalid { path: PathBuf, msg: String },
}

impl DataError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        if source.kind() == std::io::ErrorKind::NotFound {
            DataError::MissingFile { path: path.to_path_buf() }
        } else {
            DataError::Io { path: path.to_path_buf(), source }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IoPair {
    pub t: u64,
    pub input: ControlDelta,
    pub output: MotionDelta,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub machine_id: u32,
    pub pairs: Vec<IoPair>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// `n` consecutive pairs plus the pair that follows them.
#[derive(Debug, Clone, Copy)]
pub struct Window<'a> {
    pub machine_id: u32,
    /// Tick of the first pair.
    pub start: usize,
    pub pairs: &'a [IoPair],
    pub next_input: ControlDelta,
    pub next_output: MotionDelta,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExcitationConfig {
    /// Ticks per trajectory.
    pub length: usize,
    pub alpha: f64,
    pub sigma: f64,
}

impl Default for ExcitationConfig {
    fn default() -> Self {
        Self { length: 4000, alpha: 0.1, sigma: 0.05 }
    }
}

/// Filtered-noise control sequence.
///
/// Per channel: `u_0 = 0`, `u_{k+1} = (1 - alpha) u_k + sigma * eps_k` with
/// `eps_k` uniform in `[-1, 1)`. Sample `k` is `clamp(u_k + bias, ±0.2)`
/// where the bias is [`THROTTLE_BIAS`] on throttle and zero elsewhere.
/// Each tick draws throttle, brake, steer noise in that order.
pub fn excite(seed: u64, length: usize, alpha: f64, sigma: f64) -> Result<Vec<ControlDelta>, DataError> {
    if length == 0 {
        return Err(DataError::EmptyExcitation);
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(DataError::BadAlpha(alpha));
    }
    let bias = [THROTTLE_BIAS, 0.0, 0.0];
    let mut rng = SplitMix64::new(seed);
    let mut u = [0.0f64; 3];
    let mut out = Vec::with_capacity(length);
    for _ in 0..length {
        let mut sample = [0.0; 3];
        for c in 0..3 {
            sample[c] = (u[c] + bias[c]).clamp(-CONTROL_LIMIT, CONTROL_LIMIT);
        }
        out.push(ControlDelta::from_array(sample));
        for uc in u.iter_mut() {
            *uc = (1.0 - alpha) * *uc + sigma * rng.symmetric();
        }
    }
    Ok(out)
}

/// Drive a freshly initialized machine through `controls`.
pub fn roll(machine: &mut Machine, controls: &[ControlDelta]) -> Result<Trajectory, DataError> {
    let pairs = controls
        .iter()
        .enumerate()
        .map(|(t, &input)| {
            let output = machine.step(input)?;
            Ok(IoPair { t: t as u64, input, output })
        })
        .collect::<Result<Vec<_>, DataError>>()?;
    Ok(Trajectory { machine_id: machine.spec().machine_id, pairs })
}

/// Windows start at `0, stride, 2*stride, ...` while a target tick remains.
pub fn make_windows(traj: &Trajectory, n: usize, stride: usize) -> Result<Vec<Window<'_>>, DataError> {
    if n == 0 {
        return Err(DataError::ZeroParameter("window length"));
    }
    if stride == 0 {
        return Err(DataError::ZeroParameter("stride"));
    }
    let len = traj.len();
    let mut windows = Vec::new();
    let mut start = 0;
    while start + n < len {
        windows.push(window_at(traj, start, n));
        start += stride;
    }
    Ok(windows)
}

/// The window starting at `start`. Caller guarantees `start + n < len`.
pub fn window_at(traj: &Trajectory, start: usize, n: usize) -> Window<'_> {
    let next = traj.pairs[start + n];
    Window {
        machine_id: traj.machine_id,
        start,
        pairs: &traj.pairs[start..start + n],
        next_input: next.input,
        next_output: next.output,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_ids: Vec<u32>,
    pub test_ids: Vec<u32>,
}

impl SplitSpec {
    pub fn ids(&self, split: Split) -> &[u32] {
        match split {
            Split::Train => &self.train_ids,
            Split::Test => &self.test_ids,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}` (expected train or test)")),
        }
    }
}

/// Stratified split by machine.
///
/// Test seats are allocated to classes proportionally (largest remainder,
/// ties broken by class order), then moved so that every class with at
/// least two machines lands on both sides whenever the requested sizes
/// permit it. Within a class, machines are shuffled with
/// `SplitMix64(mix([seed]))` and the first `k` go to test.
pub fn split_fleet(specs: &[MachineSpec], n_train: usize, n_test: usize, seed: u64) -> Result<SplitSpec, DataError> {
    let total = specs.len();
    if n_train + n_test != total {
        return Err(DataError::SplitMismatch { n_train, n_test, fleet: total });
    }
    let mut by_class: BTreeMap<MachineClass, Vec<u32>> = BTreeMap::new();
    for s in specs {
        by_class.entry(s.class).or_default().push(s.machine_id);
    }
    let classes: Vec<MachineClass> = by_class.keys().copied().collect();
    let sizes: Vec<usize> = classes.iter().map(|c| by_class[c].len()).collect();

    let mut alloc: Vec<usize> = sizes.iter().map(|&s| s * n_test / total.max(1)).collect();
    let mut remaining = n_test - alloc.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..classes.len()).collect();
    // Largest fractional remainder first; stable sort keeps class order on ties.
    order.sort_by_key(|&c| std::cmp::Reverse((sizes[c] * n_test) % total.max(1)));
    for &c in order.iter().cycle().take(order.len() * 2) {
        if remaining == 0 {
            break;
        }
        if alloc[c] < sizes[c] {
            alloc[c] += 1;
            remaining -= 1;
        }
    }

    // Give every multi-member class a seat on each side where possible.
    for c in 0..classes.len() {
        if sizes[c] < 2 {
            continue;
        }
        if alloc[c] == 0 {
            if let Some(donor) = (0..classes.len())
                .filter(|&d| alloc[d] > 1 || (alloc[d] == 1 && sizes[d] < 2))
                .max_by_key(|&d| (alloc[d], std::cmp::Reverse(d)))
            {
                alloc[donor] -= 1;
                alloc[c] += 1;
            }
        } else if alloc[c] == sizes[c] {
            if let Some(taker) = (0..classes.len())
                .filter(|&d| alloc[d] < sizes[d] && (sizes[d] - alloc[d] > 1 || sizes[d] < 2))
                .min_by_key(|&d| (alloc[d], d))
            {
                alloc[c] -= 1;
                alloc[taker] += 1;
            }
        }
    }

    let mut rng = SplitMix64::new(mix(&[seed]));
    let mut train_ids = Vec::with_capacity(n_train);
    let mut test_ids = Vec::with_capacity(n_test);
    for (c, class) in classes.iter().enumerate() {
        let mut ids = by_class[class].clone();
        rng.shuffle(&mut ids);
        test_ids.extend_from_slice(&ids[..alloc[c]]);
        train_ids.extend_from_slice(&ids[alloc[c]..]);
    }
    train_ids.sort_unstable();
    test_ids.sort_unstable();
    Ok(SplitSpec { train_ids, test_ids })
}

/// Metadata tags carried alongside each spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MachineTags {
    pub class: MachineClass,
    pub mass: Option<f64>,
    pub year: Option<i32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FleetEntry {
    pub spec: MachineSpec,
    pub tags: MachineTags,
    /// File name relative to the dataset directory.
    pub trajectory: String,
    pub ticks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub fleet_seed: u64,
    pub excitation: ExcitationConfig,
    pub split: SplitSpec,
    pub machines: Vec<FleetEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    /// Same order as `manifest.machines`.
    pub trajectories: Vec<Trajectory>,
}

impl Dataset {
    pub fn entry(&self, machine_id: u32) -> Option<&FleetEntry> {
        self.manifest.machines.iter().find(|e| e.spec.machine_id == machine_id)
    }

    pub fn trajectory(&self, machine_id: u32) -> Option<&Trajectory> {
        self.trajectories.iter().find(|t| t.machine_id == machine_id)
    }

    /// Trajectories of one split, ascending machine id.
    pub fn split_trajectories(&self, split: Split) -> Vec<&Trajectory> {
        let ids: BTreeSet<u32> = self.manifest.split.ids(split).iter().copied().collect();
        let mut out: Vec<&Trajectory> = self.trajectories.iter().filter(|t| ids.contains(&t.machine_id)).collect();
        out.sort_by_key(|t| t.machine_id);
        out
    }
}

pub fn trajectory_file(machine_id: u32) -> String {
    format!("traj_{machine_id}.jsonl")
}

/// Excitation seed for one machine: `mix([fleet_seed, machine_id, EXCITATION_TAG])`.
pub fn excitation_seed(fleet_seed: u64, machine_id: u32) -> u64 {
    mix(&[fleet_seed, machine_id as u64, EXCITATION_TAG])
}

/// Roll every machine of `fleet` under its own excitation.
///
/// Machines are simulated in parallel; results are ordered by position in
/// `fleet`, so output is independent of scheduling.
pub fn generate(
    fleet: &[MachineSpec],
    fleet_seed: u64,
    excitation: ExcitationConfig,
    split: SplitSpec,
) -> Result<Dataset, DataError> {
    let trajectories = fleet
        .par_iter()
        .map(|spec| {
            let controls = excite(
                excitation_seed(fleet_seed, spec.machine_id),
                excitation.length,
                excitation.alpha,
                excitation.sigma,
            )?;
            let mut machine = Machine::init(spec.clone())?;
            roll(&mut machine, &controls)
        })
        .collect::<Result<Vec<_>, DataError>>()?;

    let machines = fleet
        .iter()
        .map(|spec| FleetEntry {
            tags: MachineTags {
                class: spec.class,
                mass: spec.vehicle().map(|v| v.mass),
                year: spec.vehicle().map(|v| v.year),
            },
            trajectory: trajectory_file(spec.machine_id),
            ticks: excitation.length,
            spec: spec.clone(),
        })
        .collect();
    Ok(Dataset {
        manifest: DatasetManifest {
            format: DATASET_FORMAT.to_string(),
            fleet_seed,
            excitation,
            split,
            machines,
        },
        trajectories,
    })
}

pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<(), DataError> {
    fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = jsonfmt::to_string_pretty(&dataset.manifest).map_err(|e| DataError::Invalid {
        path: manifest_path.clone(),
        msg: e.to_string(),
    })?;
    fs::write(&manifest_path, text).map_err(|e| DataError::io(&manifest_path, e))?;

    for (entry, traj) in dataset.manifest.machines.iter().zip(&dataset.trajectories) {
        let path = dir.join(&entry.trajectory);
        let file = fs::File::create(&path).map_err(|e| DataError::io(&path, e))?;
        let mut w = BufWriter::new(file);
        for p in &traj.pairs {
            let i = p.input.to_array();
            let o = p.output.to_array();
            writeln!(
                w,
                "{{\"t\":{},\"i\":[{},{},{}],\"o\":[{},{},{}]}}",
                p.t,
                float17(i[0]),
                float17(i[1]),
                float17(i[2]),
                float17(o[0]),
                float17(o[1]),
                float17(o[2]),
            )
            .map_err(|e| DataError::io(&path, e))?;
        }
        w.flush().map_err(|e| DataError::io(&path, e))?;
    }
    Ok(())
}

#[derive(Deserialize)]
struct TickRecord {
    t: u64,
    i: [f64; 3],
    o: [f64; 3],
}

pub fn read_dataset(dir: &Path) -> Result<Dataset, DataError> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| DataError::io(&manifest_path, e))?;

    #[derive(Deserialize)]
    struct VersionProbe {
        format: String,
    }
    let probe: VersionProbe = serde_json::from_str(&text).map_err(|e| DataError::Parse {
        path: manifest_path.clone(),
        line: e.line(),
        msg: e.to_string(),
    })?;
    if probe.format != DATASET_FORMAT {
        return Err(DataError::UnsupportedVersion { path: manifest_path, found: probe.format });
    }
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| DataError::Parse {
        path: manifest_path.clone(),
        line: e.line(),
        msg: e.to_string(),
    })?;

    let invalid = |msg: String| DataError::Invalid { path: manifest_path.clone(), msg };
    let mut seen = BTreeSet::new();
    for entry in &manifest.machines {
        if !seen.insert(entry.spec.machine_id) {
            return Err(invalid(format!("duplicate machine id {}", entry.spec.machine_id)));
        }
        entry.spec.validate()?;
    }
    let split_ids: Vec<u32> = manifest.split.train_ids.iter().chain(&manifest.split.test_ids).copied().collect();
    let split_set: BTreeSet<u32> = split_ids.iter().copied().collect();
    if split_set.len() != split_ids.len() || split_set != seen {
        return Err(invalid("split must partition the fleet".into()));
    }

    let trajectories = manifest
        .machines
        .iter()
        .map(|entry| read_trajectory(&dir.join(&entry.trajectory), entry))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Dataset { manifest, trajectories })
}

fn read_trajectory(path: &Path, entry: &FleetEntry) -> Result<Trajectory, DataError> {
    let file = fs::File::open(path).map_err(|e| DataError::io(path, e))?;
    let mut pairs = Vec::with_capacity(entry.ticks);
    for (k, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| DataError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| DataError::Parse { path: path.to_path_buf(), line: k + 1, msg };
        let rec: TickRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if rec.t != pairs.len() as u64 {
            return Err(parse_err(format!("expected tick {}, found {}", pairs.len(), rec.t)));
        }
        pairs.push(IoPair {
            t: rec.t,
            input: ControlDelta::from_array(rec.i),
            output: MotionDelta::from_array(rec.o),
        });
    }
    if pairs.len() != entry.ticks {
        return Err(DataError::Invalid {
            path: path.to_path_buf(),
            msg: format!("expected {} ticks, found {}", entry.ticks, pairs.len()),
        });
    }
    Ok(Trajectory { machine_id: entry.spec.machine_id, pairs })
}
