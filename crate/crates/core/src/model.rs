//! The machine-theory network.
//!
//! A window of `n` observed (input, output) pairs is run through a GRU and
//! an affine projection to give the stateful embedding `s`. A per-machine
//! accumulator folds successive `s` into the stateless embedding
//!
//! ```text
//! m_t = σ(beta_raw) ∘ m_{t-1} + gamma ∘ s_t,     m_0 = 0
//! ```
//!
//! and an affine head maps `[s; m; next_input]` to the next output.
//! Gradients stop at `m_{t-1}`: each window backpropagates only through
//! its own encoder pass and accumulator step.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::{IoPair, Window};
use crate::jsonfmt;
use crate::machines::{ControlDelta, MotionDelta};
use crate::netcore::{
    self, affine_backward, affine_forward, gru_cell, gru_dims, mse, mse_backward, sigmoid, Array, GradCheck, GruTrace, NetError,
    ParamBlock, Parameterized,
};
use crate::rng::{mix, SplitMix64};

pub const CHECKPOINT_FORMAT: &str = "TOMM-1";
pub const INPUT_DIM: usize = 3;
pub const OUTPUT_DIM: usize = 3;
pub const PAIR_DIM: usize = INPUT_DIM + OUTPUT_DIM;
pub const BETA_RAW_INIT: f64 = 2.0;
pub const GAMMA_INIT: f64 = 0.1;

const INIT_TAG: u64 = 0x1417_0DE1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("window has {found} pairs, model expects {expected}")]
    WindowLength { expected: usize, found: usize },
    #[error("invalid model dims: {0}")]
    Dims(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {msg}")]
    Parse { path: PathBuf, msg: String },
    #[error("{path}: unsupported checkpoint format `{found}` (expected {CHECKPOINT_FORMAT})")]
    UnsupportedVersion { path: PathBuf, found: String },
    #[error("{path}: {msg}")]
    Inconsistent { path: PathBuf, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub input_dim: usize,
    pub output_dim: usize,
    pub pair_dim: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    /// Window length the encoder consumes.
    pub seq_len: usize,
}

impl ModelDims {
    pub fn new(embed_dim: usize, seq_len: usize) -> Self {
        Self {
            input_dim: INPUT_DIM,
            output_dim: OUTPUT_DIM,
            pair_dim: PAIR_DIM,
            embed_dim,
            hidden_dim: embed_dim,
            seq_len,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.input_dim != INPUT_DIM || self.output_dim != OUTPUT_DIM {
            return Err(ModelError::Dims(format!(
                "input/output dims must be {INPUT_DIM}/{OUTPUT_DIM}, got {}/{}",
                self.input_dim, self.output_dim
            )));
        }
        if self.pair_dim != self.input_dim + self.output_dim {
            return Err(ModelError::Dims("pair_dim must equal input_dim + output_dim".into()));
        }
        if self.embed_dim == 0 || self.seq_len == 0 || self.hidden_dim != self.embed_dim {
            return Err(ModelError::Dims("embed_dim and seq_len must be positive, hidden_dim = embed_dim".into()));
        }
        Ok(())
    }

    /// Width of the head's input `[s; m; next_input]`.
    pub fn head_width(&self) -> usize {
        2 * self.embed_dim + self.input_dim
    }
}

/// What the theory head is allowed to see.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadInputs {
    /// `[s; m; next_input]`
    Full,
    /// `[0; 0; next_input]`: the embeddings-zeroed baseline.
    InputOnly,
}

const PROJ_W: usize = 0;
const PROJ_B: usize = 1;
const BETA_RAW: usize = 0;
const GAMMA: usize = 1;
const THEORY_W: usize = 0;
const THEORY_B: usize = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub dims: ModelDims,
    /// Seed the parameters were initialized from.
    pub seed: u64,
    pub head_inputs: HeadInputs,
    /// GRU over `pair_dim` inputs with hidden size `embed_dim`.
    pub encoder: ParamBlock,
    /// `w` (e×e), `b` (e).
    pub projection: ParamBlock,
    /// `beta_raw` (e), `gamma` (e).
    pub memory: ParamBlock,
    /// `w` (3×(2e+3)), `b` (3).
    pub theory: ParamBlock,
}

impl Parameterized for ModelParams {
    fn blocks(&self) -> Vec<&ParamBlock> {
        vec![&self.encoder, &self.projection, &self.memory, &self.theory]
    }

    fn blocks_mut(&mut self) -> Vec<&mut ParamBlock> {
        vec![&mut self.encoder, &mut self.projection, &mut self.memory, &mut self.theory]
    }
}

fn empty_layout(dims: &ModelDims) -> (ParamBlock, ParamBlock, ParamBlock, ParamBlock) {
    let e = dims.embed_dim;
    let encoder = gru_cell(dims.pair_dim, e);
    let mut projection = ParamBlock::new();
    projection.push("w", Array::zeros(e, e));
    projection.push("b", Array::zeros(e, 1));
    let mut memory = ParamBlock::new();
    memory.push("beta_raw", Array::zeros(e, 1));
    memory.push("gamma", Array::zeros(e, 1));
    let mut theory = ParamBlock::new();
    theory.push("w", Array::zeros(dims.output_dim, dims.head_width()));
    theory.push("b", Array::zeros(dims.output_dim, 1));
    (encoder, projection, memory, theory)
}

/// Deterministic initialization.
///
/// Draws come from `SplitMix64(mix([seed, INIT_TAG]))` in this order: the
/// nine GRU arrays (bound `1/√(pair_dim + e)`), projection `w`, `b`
/// (bound `1/√e`), theory `w`, `b` (bound `1/√(2e+3)`). `beta_raw` is set
/// to 2.0 and `gamma` to 0.1 without consuming draws.
pub fn init_model(dims: ModelDims, seed: u64) -> Result<ModelParams, ModelError> {
    dims.validate()?;
    let (mut encoder, mut projection, mut memory, mut theory) = empty_layout(&dims);
    let mut rng = SplitMix64::new(mix(&[seed, INIT_TAG]));
    let e = dims.embed_dim as f64;

    let gru_bound = 1.0 / (dims.pair_dim as f64 + e).sqrt();
    for i in 0..encoder.len() {
        encoder.value_mut(i).fill_uniform(&mut rng, gru_bound);
    }
    let proj_bound = 1.0 / e.sqrt();
    projection.value_mut(PROJ_W).fill_uniform(&mut rng, proj_bound);
    projection.value_mut(PROJ_B).fill_uniform(&mut rng, proj_bound);
    let head_bound = 1.0 / (dims.head_width() as f64).sqrt();
    theory.value_mut(THEORY_W).fill_uniform(&mut rng, head_bound);
    theory.value_mut(THEORY_B).fill_uniform(&mut rng, head_bound);
    memory.value_mut(BETA_RAW).fill(BETA_RAW_INIT);
    memory.value_mut(GAMMA).fill(GAMMA_INIT);

    Ok(ModelParams {
        dims,
        seed,
        head_inputs: HeadInputs::Full,
        encoder,
        projection,
        memory,
        theory,
    })
}

impl ModelParams {
    pub fn with_head_inputs(mut self, head_inputs: HeadInputs) -> Self {
        self.head_inputs = head_inputs;
        self
    }

    pub fn embed_dim(&self) -> usize {
        self.dims.embed_dim
    }

    /// Effective decay `σ(beta_raw)`, elementwise.
    pub fn decay(&self) -> Vec<f64> {
        self.memory.value(BETA_RAW).as_slice().iter().map(|&b| sigmoid(b)).collect()
    }

    pub fn gamma(&self) -> &[f64] {
        self.memory.value(GAMMA).as_slice()
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.values().iter().all(Array::is_finite))
    }

    /// Order-sensitive digest of all parameter bits.
    pub fn fingerprint(&self) -> u64 {
        self.flat_values().iter().fold(mix(&[self.dims.embed_dim as u64]), |h, v| mix(&[h, v.to_bits()]))
    }

    pub fn zero_grad_buffers(&self) -> ModelGrads {
        ModelGrads { blocks: self.blocks().iter().map(|b| b.zeros_like()).collect() }
    }

    pub fn add_grads(&mut self, grads: &ModelGrads) {
        for (block, g) in self.blocks_mut().into_iter().zip(&grads.blocks) {
            block.add_grads(g);
        }
    }
}

/// Gradient buffers mirroring [`ModelParams`] block by block.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    blocks: Vec<Vec<Array>>,
}

impl ModelGrads {
    pub fn add(&mut self, other: &ModelGrads) {
        for (mine, theirs) in self.blocks.iter_mut().zip(&other.blocks) {
            for (a, b) in mine.iter_mut().zip(theirs) {
                netcore::add_into(a.as_mut_slice(), b.as_slice());
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for a in self.blocks.iter_mut().flatten() {
            a.as_mut_slice().iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.blocks.iter().flatten().all(Array::is_finite)
    }
}

/// Stateful and stateless embeddings of one machine at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingPair {
    pub s: Vec<f64>,
    pub m: Vec<f64>,
}

/// Forward record of one encoder pass.
#[derive(Debug, Clone)]
pub struct EncoderTape {
    traces: Vec<GruTrace>,
    h_final: Vec<f64>,
    pub s: Vec<f64>,
}

fn pair_features(p: &IoPair) -> [f64; PAIR_DIM] {
    let i = p.input.to_array();
    let o = p.output.to_array();
    [i[0], i[1], i[2], o[0], o[1], o[2]]
}

fn check_window(model: &ModelParams, pairs: &[IoPair]) -> Result<(), ModelError> {
    if pairs.len() != model.dims.seq_len {
        return Err(ModelError::WindowLength { expected: model.dims.seq_len, found: pairs.len() });
    }
    Ok(())
}

/// Run the encoder over `pairs` in tick order, keeping the per-step traces.
pub fn encode_tape(model: &ModelParams, pairs: &[IoPair]) -> Result<EncoderTape, ModelError> {
    check_window(model, pairs)?;
    gru_dims(&model.encoder)?;
    let e = model.embed_dim();
    let mut h = vec![0.0; e];
    let mut traces = Vec::with_capacity(pairs.len());
    for p in pairs {
        let t = netcore::gru_step_unchecked(&model.encoder, &h, &pair_features(p));
        h.clone_from(&t.h);
        traces.push(t);
    }
    let s = affine_forward(model.projection.value(PROJ_W), model.projection.value(PROJ_B), &h)?;
    Ok(EncoderTape { traces, h_final: h, s })
}

/// Stateful embedding `s` of a window: GRU from `h_0 = 0`, then projection.
pub fn encode_window(model: &ModelParams, window: &Window<'_>) -> Result<Vec<f64>, ModelError> {
    encode_pairs(model, window.pairs)
}

pub fn encode_pairs(model: &ModelParams, pairs: &[IoPair]) -> Result<Vec<f64>, ModelError> {
    check_window(model, pairs)?;
    gru_dims(&model.encoder)?;
    let mut h = vec![0.0; model.embed_dim()];
    for p in pairs {
        h = netcore::gru_step_unchecked(&model.encoder, &h, &pair_features(p)).h;
    }
    Ok(affine_forward(model.projection.value(PROJ_W), model.projection.value(PROJ_B), &h)?)
}

/// `m = σ(beta_raw) ∘ m_prev + gamma ∘ s`.
pub fn update_stateless(model: &ModelParams, m_prev: &[f64], s: &[f64]) -> Result<Vec<f64>, ModelError> {
    let e = model.embed_dim();
    if m_prev.len() != e || s.len() != e {
        return Err(NetError::ShapeMismatch { op: "update_stateless", left: (m_prev.len(), 1), right: (s.len(), 1) }.into());
    }
    let beta = model.memory.value(BETA_RAW).as_slice();
    let gamma = model.gamma();
    Ok((0..e).map(|j| sigmoid(beta[j]) * m_prev[j] + gamma[j] * s[j]).collect())
}

fn head_input(model: &ModelParams, s: &[f64], m: &[f64], next_input: ControlDelta) -> Vec<f64> {
    let mut c = Vec::with_capacity(model.dims.head_width());
    match model.head_inputs {
        HeadInputs::Full => {
            c.extend_from_slice(s);
            c.extend_from_slice(m);
        }
        HeadInputs::InputOnly => c.resize(2 * model.embed_dim(), 0.0),
    }
    c.extend_from_slice(&next_input.to_array());
    c
}

/// `ô = W [s; m; next_input] + b`.
pub fn predict_next(model: &ModelParams, s: &[f64], m: &[f64], next_input: ControlDelta) -> Result<MotionDelta, ModelError> {
    let e = model.embed_dim();
    if s.len() != e || m.len() != e {
        return Err(NetError::ShapeMismatch { op: "predict_next", left: (e, 1), right: (s.len(), m.len()) }.into());
    }
    let c = head_input(model, s, m, next_input);
    let y = affine_forward(model.theory.value(THEORY_W), model.theory.value(THEORY_B), &c)?;
    Ok(MotionDelta::from_array([y[0], y[1], y[2]]))
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowLoss {
    pub loss: f64,
    pub m_new: Vec<f64>,
    pub prediction: MotionDelta,
}

/// Forward-only window evaluation; no gradients.
pub fn window_eval(model: &ModelParams, window: &Window<'_>, m_prev: &[f64]) -> Result<WindowLoss, ModelError> {
    let e = model.embed_dim();
    let (s, m_new) = match model.head_inputs {
        HeadInputs::Full => {
            let s = encode_window(model, window)?;
            let m = update_stateless(model, m_prev, &s)?;
            (s, m)
        }
        HeadInputs::InputOnly => {
            check_window(model, window.pairs)?;
            (vec![0.0; e], vec![0.0; e])
        }
    };
    let prediction = predict_next(model, &s, &m_new, window.next_input)?;
    let loss = mse(&prediction.to_array(), &window.next_output.to_array())?;
    Ok(WindowLoss { loss, m_new, prediction })
}

/// Encoder tape for a window, or `None` when the head ignores embeddings.
pub fn window_tape(model: &ModelParams, window: &Window<'_>) -> Result<Option<EncoderTape>, ModelError> {
    match model.head_inputs {
        HeadInputs::Full => encode_tape(model, window.pairs).map(Some),
        HeadInputs::InputOnly => {
            check_window(model, window.pairs)?;
            Ok(None)
        }
    }
}

/// Loss and full backward pass for one window given its encoder tape.
/// Gradients are added into `grads`.
pub fn window_backward(
    model: &ModelParams,
    tape: Option<&EncoderTape>,
    window: &Window<'_>,
    m_prev: &[f64],
    grads: &mut ModelGrads,
) -> Result<WindowLoss, ModelError> {
    let e = model.embed_dim();
    let zeros = vec![0.0; e];
    let (s, m_new) = match tape {
        Some(t) => (t.s.as_slice(), update_stateless(model, m_prev, &t.s)?),
        None => (zeros.as_slice(), zeros.clone()),
    };
    let c = head_input(model, s, &m_new, window.next_input);
    let y = affine_forward(model.theory.value(THEORY_W), model.theory.value(THEORY_B), &c)?;
    let target = window.next_output.to_array();
    let loss = mse(&y, &target)?;
    let dy = mse_backward(&y, &target)?;

    let [g_enc, g_proj, g_mem, g_theory] = grads.blocks.as_mut_slice() else {
        unreachable!("model has four parameter blocks")
    };
    let (tw, tb) = g_theory.split_at_mut(1);
    let dc = affine_backward(model.theory.value(THEORY_W), &c, &dy, &mut tw[0], &mut tb[0])?;

    if let Some(tape) = tape {
        let beta = model.memory.value(BETA_RAW).as_slice();
        let gamma = model.gamma();
        let mut ds = dc[..e].to_vec();
        let dm = &dc[e..2 * e];
        for j in 0..e {
            let sig = sigmoid(beta[j]);
            g_mem[BETA_RAW].as_mut_slice()[j] += dm[j] * m_prev[j] * sig * (1.0 - sig);
            g_mem[GAMMA].as_mut_slice()[j] += dm[j] * tape.s[j];
            ds[j] += dm[j] * gamma[j];
        }
        let (pw, pb) = g_proj.split_at_mut(1);
        let mut dh = affine_backward(model.projection.value(PROJ_W), &tape.h_final, &ds, &mut pw[0], &mut pb[0])?;
        for trace in tape.traces.iter().rev() {
            dh = netcore::gru_step_backward_into(model.encoder.values(), g_enc, trace, &dh).0;
        }
    }

    let prediction = MotionDelta::from_array([y[0], y[1], y[2]]);
    Ok(WindowLoss { loss, m_new, prediction })
}

/// Loss on one window, accumulating gradients into `model`'s blocks.
/// No gradient flows into `m_prev`.
pub fn window_loss(model: &mut ModelParams, window: &Window<'_>, m_prev: &[f64]) -> Result<WindowLoss, ModelError> {
    let tape = window_tape(model, window)?;
    let mut grads = model.zero_grad_buffers();
    let out = window_backward(model, tape.as_ref(), window, m_prev, &mut grads)?;
    model.add_grads(&grads);
    Ok(out)
}

const GRADCHECK_TAG: u64 = 0x6BAD_C4EC;

/// Central-difference check of [`window_loss`] over every parameter
/// coordinate, on a model initialized from `seed` and a random window.
///
/// Window pairs, the next pair and `m_prev` are drawn from
/// `SplitMix64(mix([seed, GRADCHECK_TAG]))`: inputs uniform within the
/// control bounds, outputs and `m_prev` uniform in `[-1, 1)`.
pub fn gradcheck_window(seed: u64, embed_dim: usize, seq_len: usize, eps: f64) -> Result<GradCheck, ModelError> {
    let mut model = init_model(ModelDims::new(embed_dim, seq_len), seed)?;
    let mut rng = SplitMix64::new(mix(&[seed, GRADCHECK_TAG]));
    let limit = crate::machines::CONTROL_LIMIT;
    let pairs: Vec<IoPair> = (0..=seq_len as u64)
        .map(|t| IoPair {
            t,
            input: ControlDelta::new(limit * rng.symmetric(), limit * rng.symmetric(), limit * rng.symmetric()),
            output: MotionDelta::new(rng.symmetric(), rng.symmetric(), rng.symmetric()),
        })
        .collect();
    let m_prev: Vec<f64> = (0..embed_dim).map(|_| rng.symmetric()).collect();
    let last = pairs[seq_len];
    let window = Window {
        machine_id: 0,
        start: 0,
        pairs: &pairs[..seq_len],
        next_input: last.input,
        next_output: last.output,
    };
    model.zero_grads();
    window_loss(&mut model, &window, &m_prev)?;
    Ok(netcore::finite_diff_check(
        &mut model,
        |m| window_eval(m, &window, &m_prev).map_or(f64::NAN, |w| w.loss),
        eps,
    )?)
}

#[derive(Serialize, Deserialize)]
struct NamedArray {
    name: String,
    shape: [usize; 2],
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    dims: ModelDims,
    seed: u64,
    head_inputs: HeadInputs,
    encoder: Vec<NamedArray>,
    projection: Vec<NamedArray>,
    memory: Vec<NamedArray>,
    theory: Vec<NamedArray>,
}

fn export(block: &ParamBlock) -> Vec<NamedArray> {
    block
        .names()
        .iter()
        .zip(block.values())
        .map(|(name, a)| NamedArray {
            name: name.clone(),
            shape: [a.rows(), a.cols()],
            data: a.as_slice().to_vec(),
        })
        .collect()
}

fn import(path: &Path, label: &str, template: ParamBlock, arrays: Vec<NamedArray>) -> Result<ParamBlock, ModelError> {
    let bad = |msg: String| ModelError::Inconsistent { path: path.to_path_buf(), msg: format!("{label}: {msg}") };
    if arrays.len() != template.len() {
        return Err(bad(format!("expected {} arrays, found {}", template.len(), arrays.len())));
    }
    let mut block = ParamBlock::new();
    for (k, arr) in arrays.into_iter().enumerate() {
        let expect_name = &template.names()[k];
        let expect_shape = template.value(k).shape();
        if &arr.name != expect_name {
            return Err(bad(format!("array {k} is `{}`, expected `{expect_name}`", arr.name)));
        }
        if (arr.shape[0], arr.shape[1]) != expect_shape {
            return Err(bad(format!("`{}` has shape {:?}, dims imply {:?}", arr.name, arr.shape, expect_shape)));
        }
        let value = Array::from_vec(arr.shape[0], arr.shape[1], arr.data)
            .map_err(|_| bad(format!("`{expect_name}` data length does not match its shape")))?;
        if !value.is_finite() {
            return Err(bad(format!("`{expect_name}` holds non-finite values")));
        }
        block.push(expect_name.clone(), value);
    }
    Ok(block)
}

pub fn save_model(model: &ModelParams, path: &Path) -> Result<(), ModelError> {
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.to_string(),
        dims: model.dims,
        seed: model.seed,
        head_inputs: model.head_inputs,
        encoder: export(&model.encoder),
        projection: export(&model.projection),
        memory: export(&model.memory),
        theory: export(&model.theory),
    };
    let text = jsonfmt::to_string_pretty(&file).map_err(|e| ModelError::Parse { path: path.to_path_buf(), msg: e.to_string() })?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|source| ModelError::Io { path: parent.to_path_buf(), source })?;
    }
    fs::write(path, text).map_err(|source| ModelError::Io { path: path.to_path_buf(), source })
}

pub fn load_model(path: &Path) -> Result<ModelParams, ModelError> {
    let text = fs::read_to_string(path).map_err(|source| ModelError::Io { path: path.to_path_buf(), source })?;
    let parse = |e: serde_json::Error| ModelError::Parse { path: path.to_path_buf(), msg: e.to_string() };

    #[derive(Deserialize)]
    struct Probe {
        format: String,
    }
    let probe: Probe = serde_json::from_str(&text).map_err(parse)?;
    if probe.format != CHECKPOINT_FORMAT {
        return Err(ModelError::UnsupportedVersion { path: path.to_path_buf(), found: probe.format });
    }
    let file: CheckpointFile = serde_json::from_str(&text).map_err(parse)?;
    file.dims.validate().map_err(|e| ModelError::Inconsistent { path: path.to_path_buf(), msg: e.to_string() })?;
    let (encoder, projection, memory, theory) = empty_layout(&file.dims);
    Ok(ModelParams {
        dims: file.dims,
        seed: file.seed,
        head_inputs: file.head_inputs,
        encoder: import(path, "encoder", encoder, file.encoder)?,
        projection: import(path, "projection", projection, file.projection)?,
        memory: import(path, "memory", memory, file.memory)?,
        theory: import(path, "theory", theory, file.theory)?,
    })
}
