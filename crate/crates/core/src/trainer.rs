//! Adam training over windowed trajectories, evaluation, metrics reports.
//!
//! Windows form one stream per epoch: train machines in ascending id, each
//! machine's windows in start-tick order, with `m` reset to zero at every
//! machine boundary. The stream is cut into batches of `batch_size`
//! consecutive windows; one Adam step follows each batch using the mean
//! gradient of its windows.
//!
//! Within a batch the parameters are fixed, so encoder passes and backward
//! passes run in parallel. Only the `m` chain is sequential, and gradient
//! reduction always runs in stream order, which keeps results independent
//! of the thread count.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::{make_windows, DataError, Dataset, Split, Trajectory, Window};
use crate::jsonfmt;
use crate::model::{
    init_model, update_stateless, window_backward, window_eval, window_tape, HeadInputs, ModelDims, ModelError,
    ModelParams,
};
use crate::netcore::Parameterized;

pub const METRICS_FORMAT: &str = "TOMX-1";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("{0} split has no machines")]
    EmptySplit(Split),
    #[error("{0} split has machines but no windows of length {1}")]
    NoWindows(Split, usize),
    #[error("non-finite loss at epoch {epoch}, machine {machine_id}, window start {start}")]
    NonFiniteLoss { epoch: usize, machine_id: u32, start: usize },
    #[error("non-finite gradient at Adam step {0}")]
    NonFiniteGradient(u64),
    #[error("optimizer state has {state} coordinates, parameters have {params}")]
    StateShape { state: usize, params: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub seq_len: usize,
    pub stride: usize,
    pub embed_dim: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Windows per gradient step.
    pub batch_size: usize,
    pub seed: u64,
    pub head_inputs: HeadInputs,
    /// Stop after the first epoch whose mean train loss is at or below
    /// this. `None` always runs every epoch.
    pub stop_below: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            seq_len: 100,
            stride: 25,
            embed_dim: 16,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 32,
            seed: 0,
            head_inputs: HeadInputs::Full,
            stop_below: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.seq_len == 0 || self.stride == 0 || self.embed_dim == 0 || self.batch_size == 0 {
            return bad("seq_len, stride, embed_dim and batch_size must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) || !(self.adam_eps > 0.0) {
            return bad("learning rate and adam eps must be positive");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamHyper {
        AdamHyper { lr: self.learning_rate, beta1: self.adam_beta1, beta2: self.adam_beta2, eps: self.adam_eps }
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims::new(self.embed_dim, self.seq_len)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// First and second moments over flat coordinates, plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(coords: usize) -> Self {
        Self { m: vec![0.0; coords], v: vec![0.0; coords], step: 0 }
    }
}

/// One bias-corrected Adam update from the gradients stored in `params`.
/// Nothing is modified if any gradient is non-finite.
pub fn adam_step<P: Parameterized>(params: &mut P, state: &mut AdamState, hyper: &AdamHyper) -> Result<(), TrainError> {
    let n = params.num_coords();
    if state.m.len() != n || state.v.len() != n {
        return Err(TrainError::StateShape { state: state.m.len(), params: n });
    }
    let step = state.step + 1;
    if params.blocks().iter().any(|b| b.grads().iter().any(|g| !g.is_finite())) {
        return Err(TrainError::NonFiniteGradient(step));
    }
    state.step = step;
    let c1 = 1.0 - hyper.beta1.powi(step as i32);
    let c2 = 1.0 - hyper.beta2.powi(step as i32);
    let mut k = 0;
    for block in params.blocks_mut() {
        let (values, grads) = block.update_view();
        for (value, grad) in values.iter_mut().zip(grads) {
            for (p, &g) in value.as_mut_slice().iter_mut().zip(grad.as_slice()) {
                let m = hyper.beta1 * state.m[k] + (1.0 - hyper.beta1) * g;
                let v = hyper.beta2 * state.v[k] + (1.0 - hyper.beta2) * g * g;
                state.m[k] = m;
                state.v[k] = v;
                *p -= hyper.lr * (m / c1) / ((v / c2).sqrt() + hyper.eps);
                k += 1;
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MachineMse {
    pub machine_id: u32,
    pub windows: usize,
    pub mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub split: Split,
    pub per_machine: Vec<MachineMse>,
    /// Window-weighted mean of `per_machine`.
    pub aggregate: f64,
    pub windows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub epochs: Vec<EpochRecord>,
    pub splits: Vec<SplitMetrics>,
    /// Excluded from reports so they stay byte-reproducible.
    #[serde(skip)]
    pub wall_time_secs: f64,
}

impl Metrics {
    pub fn split(&self, split: Split) -> Option<&SplitMetrics> {
        self.splits.iter().find(|s| s.split == split)
    }
}

fn split_windows<'a>(
    dataset: &'a Dataset,
    split: Split,
    seq_len: usize,
    stride: usize,
) -> Result<Vec<(&'a Trajectory, Vec<Window<'a>>)>, TrainError> {
    let trajs = dataset.split_trajectories(split);
    if trajs.is_empty() {
        return Err(TrainError::EmptySplit(split));
    }
    let out = trajs
        .into_iter()
        .map(|t| Ok((t, make_windows(t, seq_len, stride)?)))
        .collect::<Result<Vec<_>, DataError>>()?;
    if out.iter().all(|(_, w)| w.is_empty()) {
        return Err(TrainError::NoWindows(split, seq_len));
    }
    Ok(out)
}

/// Run one epoch in place; returns the mean window loss.
fn run_epoch(
    model: &mut ModelParams,
    adam: &mut AdamState,
    hyper: &AdamHyper,
    stream: &[Window<'_>],
    batch_size: usize,
    epoch: usize,
) -> Result<f64, TrainError> {
    let e = model.embed_dim();
    let mut m = vec![0.0; e];
    let mut current: Option<u32> = None;
    let mut loss_sum = 0.0;

    for batch in stream.chunks(batch_size) {
        let frozen: &ModelParams = model;
        let tapes = batch.par_iter().map(|w| window_tape(frozen, w)).collect::<Result<Vec<_>, _>>()?;

        let mut m_prev = Vec::with_capacity(batch.len());
        for (w, tape) in batch.iter().zip(&tapes) {
            if current != Some(w.machine_id) {
                current = Some(w.machine_id);
                m.iter_mut().for_each(|v| *v = 0.0);
            }
            m_prev.push(m.clone());
            if let Some(t) = tape {
                m = update_stateless(frozen, &m, &t.s)?;
            }
        }

        let results = batch
            .par_iter()
            .zip(&tapes)
            .zip(&m_prev)
            .map(|((w, tape), mp)| {
                let mut g = frozen.zero_grad_buffers();
                let out = window_backward(frozen, tape.as_ref(), w, mp, &mut g)?;
                Ok((out.loss, g))
            })
            .collect::<Result<Vec<_>, ModelError>>()?;

        let mut total = frozen.zero_grad_buffers();
        for ((loss, g), w) in results.iter().zip(batch) {
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, machine_id: w.machine_id, start: w.start });
            }
            loss_sum += loss;
            total.add(g);
        }
        total.scale(1.0 / batch.len() as f64);
        model.zero_grads();
        model.add_grads(&total);
        adam_step(model, adam, hyper)?;
    }
    Ok(loss_sum / stream.len() as f64)
}

/// Train from a fresh initialization. Deterministic in `config` and `dataset`.
pub fn train(config: &TrainConfig, dataset: &Dataset) -> Result<(ModelParams, Metrics), TrainError> {
    config.validate()?;
    let clock = Instant::now();
    let per_machine = split_windows(dataset, Split::Train, config.seq_len, config.stride)?;
    let stream: Vec<Window<'_>> = per_machine.iter().flat_map(|(_, w)| w.iter().copied()).collect();

    let mut model = init_model(config.dims(), config.seed)?.with_head_inputs(config.head_inputs);
    let mut adam = AdamState::new(model.num_coords());
    let hyper = config.adam();
    let mut epochs = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let train_mse = run_epoch(&mut model, &mut adam, &hyper, &stream, config.batch_size, epoch)?;
        log::info!("epoch {epoch}/{}: train mse {train_mse:.6e}", config.epochs);
        epochs.push(EpochRecord { epoch, train_mse });
        if config.stop_below.is_some_and(|t| train_mse <= t) {
            break;
        }
    }
    model.zero_grads();

    let mut splits = vec![evaluate(&model, dataset, Split::Train, config.stride)?];
    if !dataset.manifest.split.test_ids.is_empty() {
        splits.push(evaluate(&model, dataset, Split::Test, config.stride)?);
    }
    let wall_time_secs = clock.elapsed().as_secs_f64();
    Ok((model, Metrics { epochs, splits, wall_time_secs }))
}

/// Per-machine and aggregate MSE on one split, carrying `m` per machine
/// exactly as in training. Parameters are not touched.
pub fn evaluate(model: &ModelParams, dataset: &Dataset, split: Split, stride: usize) -> Result<SplitMetrics, TrainError> {
    if stride == 0 {
        return Err(TrainError::Config("stride must be at least 1".into()));
    }
    let per_machine = split_windows(dataset, split, model.dims.seq_len, stride)?;
    let rows = per_machine
        .par_iter()
        .map(|(traj, windows)| {
            let mut m = vec![0.0; model.embed_dim()];
            let mut sum = 0.0;
            for w in windows {
                let out = window_eval(model, w, &m)?;
                sum += out.loss;
                m = out.m_new;
            }
            let mse = if windows.is_empty() { 0.0 } else { sum / windows.len() as f64 };
            Ok(MachineMse { machine_id: traj.machine_id, windows: windows.len(), mse })
        })
        .collect::<Result<Vec<_>, ModelError>>()?;
    let windows: usize = rows.iter().map(|r| r.windows).sum();
    let aggregate = rows.iter().map(|r| r.mse * r.windows as f64).sum::<f64>() / windows as f64;
    Ok(SplitMetrics { split, per_machine: rows, aggregate, windows })
}

/// Mean over output components of the variance of window targets.
pub fn target_variance(dataset: &Dataset, split: Split, seq_len: usize, stride: usize) -> Result<f64, TrainError> {
    let per_machine = split_windows(dataset, split, seq_len, stride)?;
    let targets: Vec<[f64; 3]> =
        per_machine.iter().flat_map(|(_, w)| w.iter().map(|w| w.next_output.to_array())).collect();
    let n = targets.len() as f64;
    let mut total = 0.0;
    for k in 0..3 {
        let mean = targets.iter().map(|t| t[k]).sum::<f64>() / n;
        total += targets.iter().map(|t| (t[k] - mean).powi(2)).sum::<f64>() / n;
    }
    Ok(total / 3.0)
}

#[derive(Serialize)]
struct Report<'a> {
    format: &'a str,
    config: Option<&'a TrainConfig>,
    epochs: &'a [EpochRecord],
    splits: &'a [SplitMetrics],
}

/// Write metrics as JSON: one record per epoch, then per-split tables.
pub fn write_metrics(metrics: &Metrics, config: Option<&TrainConfig>, path: &Path) -> Result<(), TrainError> {
    let report = Report { format: METRICS_FORMAT, config, epochs: &metrics.epochs, splits: &metrics.splits };
    let text = jsonfmt::to_string_pretty(&report).map_err(|e| TrainError::Config(e.to_string()))?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|source| TrainError::Io { path: parent.to_path_buf(), source })?;
    }
    fs::write(path, text).map_err(|source| TrainError::Io { path: path.to_path_buf(), source })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, ExcitationConfig, SplitSpec};
    use crate::machines::{Activation, MachineClass, MachineParams, MachineSpec, StatelessParams};
    use crate::netcore::{Array, ParamBlock};

    fn block(values: &[f64], grads: &[f64]) -> ParamBlock {
        let mut b = ParamBlock::new();
        b.push("p", Array::vector(values.to_vec()));
        let (_, g) = b.split_mut();
        g[0].as_mut_slice().copy_from_slice(grads);
        b
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let hyper = TrainConfig::default().adam();
        let mut p = block(&[1.0, -2.0], &[0.0, 0.0]);
        let mut s = AdamState { m: vec![0.5, -0.5], v: vec![0.25, 0.25], step: 3 };
        let before = s.clone();
        // Moments decay; the update uses the decayed moments, so values move
        // unless the moments were zero to begin with.
        adam_step(&mut p, &mut s, &hyper).unwrap();
        assert_eq!(s.m, vec![0.45, -0.45]);
        assert_eq!(s.v[0], 0.999 * before.v[0]);

        let mut p = block(&[1.0, -2.0], &[0.0, 0.0]);
        let mut s = AdamState::new(2);
        adam_step(&mut p, &mut s, &hyper).unwrap();
        assert_eq!(p.value(0).as_slice(), &[1.0, -2.0]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let hyper = TrainConfig::default().adam();
        let g = [3.0, -0.02, 1e-3];
        let mut p = block(&[0.0; 3], &g);
        let mut s = AdamState::new(3);
        adam_step(&mut p, &mut s, &hyper).unwrap();
        for (x, gi) in p.value(0).as_slice().iter().zip(g) {
            assert!((x + 1e-3 * gi.signum()).abs() < 1e-8, "{x}");
        }
    }

    #[test]
    fn matches_written_out_recurrence() {
        let hyper = AdamHyper { lr: 0.01, beta1: 0.8, beta2: 0.95, eps: 1e-6 };
        let mut rng = crate::rng::SplitMix64::new(5);
        let mut p = block(&[0.0; 5], &[0.0; 5]);
        for v in p.value_mut(0).as_mut_slice() {
            *v = rng.symmetric();
        }
        let mut x: Vec<f64> = p.value(0).as_slice().to_vec();
        let (mut m, mut v) = ([0.0f64; 5], [0.0f64; 5]);
        let mut s = AdamState::new(5);
        for t in 1..=4 {
            let g: Vec<f64> = (0..5).map(|_| rng.symmetric()).collect();
            let (_, grads) = p.split_mut();
            grads[0].as_mut_slice().copy_from_slice(&g);
            adam_step(&mut p, &mut s, &hyper).unwrap();
            for i in 0..5 {
                m[i] = 0.8 * m[i] + 0.2 * g[i];
                v[i] = 0.95 * v[i] + 0.05 * g[i] * g[i];
                let mh = m[i] / (1.0 - 0.8f64.powi(t));
                let vh = v[i] / (1.0 - 0.95f64.powi(t));
                x[i] -= 0.01 * mh / (vh.sqrt() + 1e-6);
            }
            for (a, b) in p.value(0).as_slice().iter().zip(&x) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn non_finite_gradient_aborts_without_update() {
        let hyper = TrainConfig::default().adam();
        let mut p = block(&[1.0], &[f64::NAN]);
        let mut s = AdamState::new(1);
        assert!(matches!(adam_step(&mut p, &mut s, &hyper), Err(TrainError::NonFiniteGradient(1))));
        assert_eq!(s.step, 0);
        assert_eq!(p.value(0).as_slice(), &[1.0]);
    }

    fn linear_fleet(n: usize) -> Vec<MachineSpec> {
        let mut rng = crate::rng::SplitMix64::new(11);
        (0..n as u32)
            .map(|id| {
                let mut w = [[0.0; 3]; 3];
                w.iter_mut().flatten().for_each(|v| *v = rng.symmetric());
                MachineSpec {
                    machine_id: id,
                    class: MachineClass::Stateless,
                    params: MachineParams::Stateless(StatelessParams { weights: w, activation: Activation::Identity }),
                    seed: id as u64,
                }
            })
            .collect()
    }

    fn small_dataset() -> Dataset {
        let fleet = linear_fleet(3);
        let split = SplitSpec { train_ids: vec![0, 2], test_ids: vec![1] };
        generate(&fleet, 3, ExcitationConfig { length: 120, ..Default::default() }, split).unwrap()
    }

    fn small_config() -> TrainConfig {
        TrainConfig { epochs: 2, seq_len: 10, stride: 7, embed_dim: 4, batch_size: 5, seed: 1, ..Default::default() }
    }

    #[test]
    fn stop_below_ends_training_early() {
        let data = small_dataset();
        let cfg = TrainConfig { epochs: 5, stop_below: Some(f64::INFINITY), ..small_config() };
        let (_, metrics) = train(&cfg, &data).unwrap();
        assert_eq!(metrics.epochs.len(), 1);
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let data = small_dataset();
        let cfg = TrainConfig { epochs: 0, ..small_config() };
        let (model, metrics) = train(&cfg, &data).unwrap();
        assert_eq!(model, init_model(cfg.dims(), cfg.seed).unwrap());
        assert!(metrics.epochs.is_empty());
    }

    #[test]
    fn training_is_deterministic_and_thread_independent() {
        let data = small_dataset();
        let cfg = small_config();
        let (a, ma) = train(&cfg, &data).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let (b, mb) = pool.install(|| train(&cfg, &data)).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_eq!((&ma.epochs, &ma.splits), (&mb.epochs, &mb.splits));
        assert_eq!(ma.epochs.len(), 2);
        assert!(ma.split(Split::Test).is_some());
    }

    #[test]
    fn aggregate_is_window_weighted_and_eval_is_pure() {
        let data = small_dataset();
        let cfg = small_config();
        let (model, _) = train(&cfg, &data).unwrap();
        let hash = model.fingerprint();
        let a = evaluate(&model, &data, Split::Train, 3).unwrap();
        let b = evaluate(&model, &data, Split::Train, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(model.fingerprint(), hash);
        let weighted: f64 = a.per_machine.iter().map(|r| r.mse * r.windows as f64).sum::<f64>() / a.windows as f64;
        assert!((weighted - a.aggregate).abs() < 1e-12);
        assert!(a.per_machine.iter().all(|r| r.mse >= 0.0));
    }

    #[test]
    fn empty_split_is_an_error() {
        let mut data = small_dataset();
        data.manifest.split = SplitSpec { train_ids: vec![], test_ids: vec![0, 1, 2] };
        assert!(matches!(train(&small_config(), &data), Err(TrainError::EmptySplit(Split::Train))));
        let model = init_model(ModelDims::new(4, 10), 0).unwrap();
        assert!(matches!(evaluate(&model, &data, Split::Train, 1), Err(TrainError::EmptySplit(Split::Train))));
    }

    #[test]
    fn exact_predictor_on_linear_machine() {
        let fleet = linear_fleet(1);
        let split = SplitSpec { train_ids: vec![0], test_ids: vec![] };
        let data = generate(&fleet, 3, ExcitationConfig { length: 60, ..Default::default() }, split).unwrap();
        let MachineParams::Stateless(sp) = &fleet[0].params else { unreachable!() };
        let mut model = init_model(ModelDims::new(4, 10), 0).unwrap();
        model.theory.value_mut(0).fill(0.0);
        model.theory.value_mut(1).fill(0.0);
        for r in 0..3 {
            for c in 0..3 {
                model.theory.value_mut(0).set(r, 8 + c, 2.0 * sp.weights[r][c]);
            }
        }
        let metrics = evaluate(&model, &data, Split::Train, 1).unwrap();
        assert!(metrics.aggregate < 1e-20, "{}", metrics.aggregate);
    }

    #[test]
    fn metrics_report_is_reproducible() {
        let data = small_dataset();
        let cfg = small_config();
        let dir = tempfile::tempdir().unwrap();
        let (_, m1) = train(&cfg, &data).unwrap();
        let (_, m2) = train(&cfg, &data).unwrap();
        write_metrics(&m1, Some(&cfg), &dir.path().join("a.json")).unwrap();
        write_metrics(&m2, Some(&cfg), &dir.path().join("b.json")).unwrap();
        let a = fs::read(dir.path().join("a.json")).unwrap();
        assert_eq!(a, fs::read(dir.path().join("b.json")).unwrap());
        let text = String::from_utf8(a).unwrap();
        assert!(text.contains("\"format\": \"TOMX-1\""));
        assert!(!text.contains("wall"));
    }
}
