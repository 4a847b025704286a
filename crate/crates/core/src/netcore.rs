//! Dense f64 arrays, parameter blocks, and explicit forward/backward
//! passes for the three primitives the model is built from: the affine
//! map, a gated recurrent cell, and mean-squared error.
//!
//! Accumulation order is fixed everywhere: matrix-vector products are
//! row-major with a left-to-right sum, and the bias is added last.

use thiserror::Error;

use crate::rng::SplitMix64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("parameter block layout: {0}")]
    Layout(String),
}

/// Row-major matrix; vectors are `n × 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Array {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self { rows: data.len(), cols: 1, data }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NetError> {
        if data.len() != rows * cols {
            return Err(NetError::ShapeMismatch {
                op: "from_vec",
                left: (rows, cols),
                right: (data.len(), 1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut a = Self::zeros(n, n);
        for i in 0..n {
            a.data[i * n + i] = 1.0;
        }
        a
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Uniform in `[-bound, bound)`, drawn in storage order.
    pub fn fill_uniform(&mut self, rng: &mut SplitMix64, bound: f64) {
        self.data.iter_mut().for_each(|v| *v = bound * rng.symmetric());
    }
}

/// Named parameter arrays with gradient arrays of identical shape.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamBlock {
    names: Vec<String>,
    values: Vec<Array>,
    grads: Vec<Array>,
}

impl ParamBlock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Array) -> usize {
        let (r, c) = value.shape();
        self.names.push(name.into());
        self.values.push(value);
        self.grads.push(Array::zeros(r, c));
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.index_of(name).map(|i| &self.values[i])
    }

    pub fn value(&self, i: usize) -> &Array {
        &self.values[i]
    }

    pub fn value_mut(&mut self, i: usize) -> &mut Array {
        &mut self.values[i]
    }

    pub fn values(&self) -> &[Array] {
        &self.values
    }

    pub fn grad(&self, i: usize) -> &Array {
        &self.grads[i]
    }

    pub fn grads(&self) -> &[Array] {
        &self.grads
    }

    /// Values read-only, gradients writable.
    pub fn split_mut(&mut self) -> (&[Array], &mut [Array]) {
        (&self.values, &mut self.grads)
    }

    /// Values writable, gradients read-only (for optimizer updates).
    pub fn update_view(&mut self) -> (&mut [Array], &[Array]) {
        (&mut self.values, &self.grads)
    }

    /// Zeroed arrays shaped like this block's values.
    pub fn zeros_like(&self) -> Vec<Array> {
        self.values.iter().map(|a| Array::zeros(a.rows, a.cols)).collect()
    }

    /// Add externally computed gradients into ours. Layouts must agree.
    pub fn add_grads(&mut self, other: &[Array]) {
        for (g, o) in self.grads.iter_mut().zip(other) {
            add_into(&mut g.data, &o.data);
        }
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| g.fill(0.0));
    }

    pub fn num_coords(&self) -> usize {
        self.values.iter().map(Array::len).sum()
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for g in &mut self.grads {
            g.data.iter_mut().for_each(|v| *v *= factor);
        }
    }
}

/// Anything exposing its parameters as an ordered list of blocks. Flat
/// coordinates enumerate blocks in order, arrays in order, then storage
/// order within each array.
pub trait Parameterized {
    fn blocks(&self) -> Vec<&ParamBlock>;
    fn blocks_mut(&mut self) -> Vec<&mut ParamBlock>;

    fn num_coords(&self) -> usize {
        self.blocks().iter().map(|b| b.num_coords()).sum()
    }

    fn zero_grads(&mut self) {
        self.blocks_mut().into_iter().for_each(ParamBlock::zero_grads);
    }

    fn flat_values(&self) -> Vec<f64> {
        self.blocks()
            .iter()
            .flat_map(|b| b.values.iter().flat_map(|a| a.data.iter().copied()))
            .collect()
    }

    fn flat_grads(&self) -> Vec<f64> {
        self.blocks()
            .iter()
            .flat_map(|b| b.grads.iter().flat_map(|a| a.data.iter().copied()))
            .collect()
    }

    /// Mutable handle to one flat coordinate's value.
    fn coord_mut(&mut self, mut index: usize) -> Option<&mut f64> {
        for block in self.blocks_mut() {
            for a in block.values.iter_mut() {
                if index < a.data.len() {
                    return Some(&mut a.data[index]);
                }
                index -= a.data.len();
            }
        }
        None
    }
}

impl Parameterized for ParamBlock {
    fn blocks(&self) -> Vec<&ParamBlock> {
        vec![self]
    }

    fn blocks_mut(&mut self) -> Vec<&mut ParamBlock> {
        vec![self]
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `y += W x`, no shape checks.
#[inline]
pub(crate) fn matvec_acc(w: &Array, x: &[f64], y: &mut [f64]) {
    for (r, yr) in y.iter_mut().enumerate() {
        let row = &w.data[r * w.cols..(r + 1) * w.cols];
        let mut acc = 0.0;
        for (a, b) in row.iter().zip(x) {
            acc += a * b;
        }
        *yr += acc;
    }
}

/// `dx += Wᵀ g`, no shape checks.
#[inline]
pub(crate) fn matvec_t_acc(w: &Array, g: &[f64], dx: &mut [f64]) {
    for (r, gr) in g.iter().enumerate() {
        let row = &w.data[r * w.cols..(r + 1) * w.cols];
        for (d, a) in dx.iter_mut().zip(row) {
            *d += a * gr;
        }
    }
}

/// `dW += g xᵀ`, no shape checks.
#[inline]
pub(crate) fn outer_acc(dw: &mut Array, g: &[f64], x: &[f64]) {
    let cols = dw.cols;
    for (r, gr) in g.iter().enumerate() {
        let row = &mut dw.data[r * cols..(r + 1) * cols];
        for (d, xc) in row.iter_mut().zip(x) {
            *d += gr * xc;
        }
    }
}

fn check_affine(w: &Array, b: &Array, x_len: usize) -> Result<(), NetError> {
    if w.cols != x_len {
        return Err(NetError::ShapeMismatch { op: "affine", left: w.shape(), right: (x_len, 1) });
    }
    if b.len() != w.rows {
        return Err(NetError::ShapeMismatch { op: "affine", left: w.shape(), right: b.shape() });
    }
    Ok(())
}

/// `y = W x + b`: each row's dot product summed left to right, then `+ b`.
pub fn affine_forward(w: &Array, b: &Array, x: &[f64]) -> Result<Vec<f64>, NetError> {
    check_affine(w, b, x.len())?;
    let mut y = vec![0.0; w.rows];
    matvec_acc(w, x, &mut y);
    for (yi, bi) in y.iter_mut().zip(&b.data) {
        *yi += bi;
    }
    Ok(y)
}

/// Accumulates `dW += g xᵀ`, `db += g`; returns `dx = Wᵀ g`.
pub fn affine_backward(
    w: &Array,
    x: &[f64],
    g: &[f64],
    dw: &mut Array,
    db: &mut Array,
) -> Result<Vec<f64>, NetError> {
    if g.len() != w.rows || x.len() != w.cols {
        return Err(NetError::ShapeMismatch { op: "affine_backward", left: w.shape(), right: (g.len(), x.len()) });
    }
    if dw.shape() != w.shape() || db.len() != w.rows {
        return Err(NetError::ShapeMismatch { op: "affine_backward", left: w.shape(), right: dw.shape() });
    }
    outer_acc(dw, g, x);
    for (d, gi) in db.data.iter_mut().zip(g) {
        *d += gi;
    }
    let mut dx = vec![0.0; w.cols];
    matvec_t_acc(w, g, &mut dx);
    Ok(dx)
}

/// Array order inside a GRU cell block.
pub const GRU_PARAM_NAMES: [&str; 9] = ["w_z", "u_z", "b_z", "w_r", "u_r", "b_r", "w_h", "u_h", "b_h"];
const WZ: usize = 0;
const UZ: usize = 1;
const BZ: usize = 2;
const WR: usize = 3;
const UR: usize = 4;
const BR: usize = 5;
const WH: usize = 6;
const UH: usize = 7;
const BH: usize = 8;

/// Zero-initialized GRU cell block for `input_dim → hidden_dim`.
pub fn gru_cell(input_dim: usize, hidden_dim: usize) -> ParamBlock {
    let mut block = ParamBlock::new();
    for gate in ["z", "r", "h"] {
        block.push(format!("w_{gate}"), Array::zeros(hidden_dim, input_dim));
        block.push(format!("u_{gate}"), Array::zeros(hidden_dim, hidden_dim));
        block.push(format!("b_{gate}"), Array::zeros(hidden_dim, 1));
    }
    block
}

/// `(input_dim, hidden_dim)` of a GRU block, validating its layout.
pub fn gru_dims(cell: &ParamBlock) -> Result<(usize, usize), NetError> {
    if cell.len() != 9 || cell.names.iter().zip(GRU_PARAM_NAMES).any(|(a, b)| a != b) {
        return Err(NetError::Layout(format!("expected GRU arrays {GRU_PARAM_NAMES:?}, found {:?}", cell.names)));
    }
    let (e, d) = cell.values[WZ].shape();
    for gate in [0, 3, 6] {
        let ok = cell.values[gate].shape() == (e, d)
            && cell.values[gate + 1].shape() == (e, e)
            && cell.values[gate + 2].shape() == (e, 1);
        if !ok {
            return Err(NetError::Layout(format!("inconsistent shapes in gate `{}`", cell.names[gate])));
        }
    }
    Ok((d, e))
}

/// Everything the backward pass of one GRU step needs.
#[derive(Debug, Clone)]
pub struct GruTrace {
    pub h_prev: Vec<f64>,
    pub x: Vec<f64>,
    pub z: Vec<f64>,
    pub r: Vec<f64>,
    /// `r ∘ h_prev`
    pub rh: Vec<f64>,
    /// Candidate `tanh(W_h x + U_h (r ∘ h) + b_h)`.
    pub cand: Vec<f64>,
    pub h: Vec<f64>,
}

/// One GRU step:
///
/// ```text
/// z  = σ(W_z x + U_z h + b_z)
/// r  = σ(W_r x + U_r h + b_r)
/// h̃  = tanh(W_h x + U_h (r ∘ h) + b_h)
/// h' = (1 − z) ∘ h + z ∘ h̃
/// ```
pub fn gru_step(cell: &ParamBlock, h: &[f64], x: &[f64]) -> Result<GruTrace, NetError> {
    let (d, e) = gru_dims(cell)?;
    if h.len() != e || x.len() != d {
        return Err(NetError::ShapeMismatch { op: "gru_step", left: (e, d), right: (h.len(), x.len()) });
    }
    Ok(gru_step_unchecked(cell, h, x))
}

pub(crate) fn gru_step_unchecked(cell: &ParamBlock, h: &[f64], x: &[f64]) -> GruTrace {
    let v = &cell.values;
    let e = h.len();
    let gate = |w: usize, u: usize, b: usize, hin: &[f64]| {
        let mut a = vec![0.0; e];
        matvec_acc(&v[w], x, &mut a);
        matvec_acc(&v[u], hin, &mut a);
        for (ai, bi) in a.iter_mut().zip(&v[b].data) {
            *ai += bi;
        }
        a
    };
    let z: Vec<f64> = gate(WZ, UZ, BZ, h).into_iter().map(sigmoid).collect();
    let r: Vec<f64> = gate(WR, UR, BR, h).into_iter().map(sigmoid).collect();
    let rh: Vec<f64> = r.iter().zip(h).map(|(a, b)| a * b).collect();
    let cand: Vec<f64> = gate(WH, UH, BH, &rh).into_iter().map(f64::tanh).collect();
    let h_new = (0..e).map(|j| (1.0 - z[j]) * h[j] + z[j] * cand[j]).collect();
    GruTrace { h_prev: h.to_vec(), x: x.to_vec(), z, r, rh, cand, h: h_new }
}

/// Backward through one GRU step. Accumulates gradients for all nine
/// arrays of `cell`; returns `(∂/∂h_prev, ∂/∂x)`.
pub fn gru_step_backward(cell: &mut ParamBlock, trace: &GruTrace, dh_out: &[f64]) -> Result<(Vec<f64>, Vec<f64>), NetError> {
    let (d, e) = gru_dims(cell)?;
    if dh_out.len() != e || trace.h_prev.len() != e || trace.x.len() != d {
        return Err(NetError::ShapeMismatch { op: "gru_step_backward", left: (e, d), right: (dh_out.len(), trace.x.len()) });
    }
    let (v, g) = cell.split_mut();
    Ok(gru_step_backward_into(v, g, trace, dh_out))
}

/// Backward with values and gradient sinks passed separately, so several
/// windows can backpropagate against shared values into private buffers.
pub(crate) fn gru_step_backward_into(v: &[Array], g: &mut [Array], t: &GruTrace, dh_out: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let e = dh_out.len();
    let mut dh = vec![0.0; e];
    let mut dx = vec![0.0; t.x.len()];

    let mut da_z = vec![0.0; e];
    let mut da_c = vec![0.0; e];
    for j in 0..e {
        dh[j] = dh_out[j] * (1.0 - t.z[j]);
        let dz = dh_out[j] * (t.cand[j] - t.h_prev[j]);
        da_z[j] = dz * t.z[j] * (1.0 - t.z[j]);
        let dc = dh_out[j] * t.z[j];
        da_c[j] = dc * (1.0 - t.cand[j] * t.cand[j]);
    }

    // Candidate path.
    outer_acc(&mut g[WH], &da_c, &t.x);
    outer_acc(&mut g[UH], &da_c, &t.rh);
    add_into(&mut g[BH].data, &da_c);
    matvec_t_acc(&v[WH], &da_c, &mut dx);
    let mut drh = vec![0.0; e];
    matvec_t_acc(&v[UH], &da_c, &mut drh);

    let mut da_r = vec![0.0; e];
    for j in 0..e {
        let dr = drh[j] * t.h_prev[j];
        dh[j] += drh[j] * t.r[j];
        da_r[j] = dr * t.r[j] * (1.0 - t.r[j]);
    }

    // Update gate.
    outer_acc(&mut g[WZ], &da_z, &t.x);
    outer_acc(&mut g[UZ], &da_z, &t.h_prev);
    add_into(&mut g[BZ].data, &da_z);
    matvec_t_acc(&v[WZ], &da_z, &mut dx);
    matvec_t_acc(&v[UZ], &da_z, &mut dh);

    // Reset gate.
    outer_acc(&mut g[WR], &da_r, &t.x);
    outer_acc(&mut g[UR], &da_r, &t.h_prev);
    add_into(&mut g[BR].data, &da_r);
    matvec_t_acc(&v[WR], &da_r, &mut dx);
    matvec_t_acc(&v[UR], &da_r, &mut dh);

    (dh, dx)
}

#[inline]
pub(crate) fn add_into(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

/// Mean of squared differences.
pub fn mse(pred: &[f64], target: &[f64]) -> Result<f64, NetError> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(NetError::ShapeMismatch { op: "mse", left: (pred.len(), 1), right: (target.len(), 1) });
    }
    let sum: f64 = pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(sum / pred.len() as f64)
}

/// `∂ mse / ∂ pred = 2 (pred − target) / k`.
pub fn mse_backward(pred: &[f64], target: &[f64]) -> Result<Vec<f64>, NetError> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(NetError::ShapeMismatch { op: "mse_backward", left: (pred.len(), 1), right: (target.len(), 1) });
    }
    let k = pred.len() as f64;
    Ok(pred.iter().zip(target).map(|(p, t)| 2.0 * (p - t) / k).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    /// Flat coordinate with the largest error.
    pub worst_coord: usize,
    pub coords: usize,
}

/// Compare the analytic gradients stored in `params` to central
/// differences of `loss`, coordinate by coordinate.
///
/// Relative error is `|a − n| / max(|a|, |n|, 1e-8)`. Each perturbed
/// coordinate is restored bit-exactly before moving on.
pub fn finite_diff_check<P, F>(params: &mut P, mut loss: F, eps: f64) -> Result<GradCheck, NetError>
where
    P: Parameterized,
    F: FnMut(&P) -> f64,
{
    let analytic = params.flat_grads();
    let mut report = GradCheck { max_rel_err: 0.0, worst_coord: 0, coords: analytic.len() };
    for (i, &a) in analytic.iter().enumerate() {
        let original = *params.coord_mut(i).expect("coordinate in range");
        *params.coord_mut(i).expect("coordinate in range") = original + eps;
        let plus = loss(params);
        *params.coord_mut(i).expect("coordinate in range") = original - eps;
        let minus = loss(params);
        *params.coord_mut(i).expect("coordinate in range") = original;
        if !(plus.is_finite() && minus.is_finite()) {
            return Err(NetError::NonFinite(format!("loss at coordinate {i}")));
        }
        let numeric = (plus - minus) / (2.0 * eps);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_coord = i;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn random_array(rng: &mut SplitMix64, r: usize, c: usize) -> Array {
        let mut a = Array::zeros(r, c);
        a.fill_uniform(rng, 1.0);
        a
    }

    #[test]
    fn affine_zero_and_identity() {
        let y = affine_forward(&Array::zeros(2, 3), &Array::zeros(2, 1), &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(y, vec![0.0, 0.0]);
        let y = affine_forward(&Array::identity(3), &Array::zeros(3, 1), &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(y, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn affine_shape_errors_name_both_shapes() {
        let err = affine_forward(&Array::zeros(2, 3), &Array::zeros(2, 1), &[1.0]).unwrap_err();
        assert_eq!(err, NetError::ShapeMismatch { op: "affine", left: (2, 3), right: (1, 1) });
        assert!(affine_forward(&Array::zeros(2, 3), &Array::zeros(3, 1), &[0.0; 3]).is_err());
    }

    #[test]
    fn affine_backward_matches_central_differences() {
        let mut rng = SplitMix64::new(21);
        let mut block = ParamBlock::new();
        block.push("w", random_array(&mut rng, 4, 3));
        block.push("b", random_array(&mut rng, 4, 1));
        let x = [0.3, -0.7, 1.1];
        let target = [0.5, -0.2, 0.1, 0.9];
        let loss = |p: &ParamBlock| {
            let y = affine_forward(p.value(0), p.value(1), &x).unwrap();
            mse(&y, &target).unwrap()
        };

        let y = affine_forward(block.value(0), block.value(1), &x).unwrap();
        let g = mse_backward(&y, &target).unwrap();
        let (v, gr) = block.split_mut();
        let (dw, db) = gr.split_at_mut(1);
        affine_backward(&v[0], &x, &g, &mut dw[0], &mut db[0]).unwrap();

        let report = finite_diff_check(&mut block, loss, 1e-6).unwrap();
        assert!(report.max_rel_err < 1e-7, "{report:?}");
    }

    #[test]
    fn affine_input_gradient() {
        let mut rng = SplitMix64::new(4);
        let w = random_array(&mut rng, 4, 3);
        let b = random_array(&mut rng, 4, 1);
        let x = [0.2, 0.4, -0.6];
        let g = [1.0, -1.0, 0.5, 0.25];
        let mut dw = Array::zeros(4, 3);
        let mut db = Array::zeros(4, 1);
        let dx = affine_backward(&w, &x, &g, &mut dw, &mut db).unwrap();
        let f = |x: &[f64]| -> f64 {
            let y = affine_forward(&w, &b, x).unwrap();
            y.iter().zip(&g).map(|(a, b)| a * b).sum()
        };
        for i in 0..3 {
            let mut xp = x;
            let mut xm = x;
            xp[i] += 1e-6;
            xm[i] -= 1e-6;
            let numeric = (f(&xp) - f(&xm)) / 2e-6;
            assert!((numeric - dx[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn gru_origin_is_fixed_point() {
        let cell = gru_cell(6, 4);
        let t = gru_step(&cell, &[0.0; 4], &[0.0; 6]).unwrap();
        assert!(t.z.iter().all(|&z| z == 0.5));
        assert!(t.cand.iter().all(|&c| c == 0.0));
        assert_eq!(t.h, vec![0.0; 4]);
    }

    #[test]
    fn gru_closed_update_gate_holds_state() {
        let mut cell = gru_cell(6, 4);
        cell.value_mut(BZ).fill(-30.0);
        let h = [0.3, -0.8, 0.5, 0.9];
        let t = gru_step(&cell, &h, &[1.0, -2.0, 0.5, 0.1, 0.0, 3.0]).unwrap();
        for (a, b) in t.h.iter().zip(&h) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gru_rejects_bad_shapes() {
        let cell = gru_cell(6, 4);
        assert!(gru_step(&cell, &[0.0; 3], &[0.0; 6]).is_err());
        assert!(gru_step(&cell, &[0.0; 4], &[0.0; 5]).is_err());
        let mut bad = ParamBlock::new();
        bad.push("w", Array::zeros(1, 1));
        assert!(matches!(gru_step(&bad, &[0.0], &[0.0]), Err(NetError::Layout(_))));
    }

    #[test]
    fn gru_backward_matches_central_differences() {
        let mut rng = SplitMix64::new(77);
        let mut cell = gru_cell(6, 4);
        for i in 0..9 {
            cell.value_mut(i).fill_uniform(&mut rng, 0.8);
        }
        let h: Vec<f64> = (0..4).map(|_| rng.symmetric()).collect();
        let x: Vec<f64> = (0..6).map(|_| rng.symmetric()).collect();
        let target = [0.1, -0.3, 0.2, 0.4];
        let loss = |c: &ParamBlock| mse(&gru_step(c, &h, &x).unwrap().h, &target).unwrap();

        let trace = gru_step(&cell, &h, &x).unwrap();
        let g = mse_backward(&trace.h, &target).unwrap();
        let (dh, dx) = gru_step_backward(&mut cell, &trace, &g).unwrap();
        let report = finite_diff_check(&mut cell, loss, 1e-4).unwrap();
        assert!(report.max_rel_err < 1e-6, "{report:?}");
        assert_eq!(report.coords, 3 * (4 * 6 + 4 * 4 + 4));

        // Input-side gradients.
        let eps = 1e-6;
        for i in 0..4 {
            let (mut hp, mut hm) = (h.clone(), h.clone());
            hp[i] += eps;
            hm[i] -= eps;
            let n = (mse(&gru_step(&cell, &hp, &x).unwrap().h, &target).unwrap()
                - mse(&gru_step(&cell, &hm, &x).unwrap().h, &target).unwrap())
                / (2.0 * eps);
            assert!((n - dh[i]).abs() / n.abs().max(dh[i].abs()).max(1e-8) < 1e-6);
        }
        for i in 0..6 {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[i] += eps;
            xm[i] -= eps;
            let n = (mse(&gru_step(&cell, &h, &xp).unwrap().h, &target).unwrap()
                - mse(&gru_step(&cell, &h, &xm).unwrap().h, &target).unwrap())
                / (2.0 * eps);
            assert!((n - dx[i]).abs() / n.abs().max(dx[i].abs()).max(1e-8) < 1e-6);
        }
    }

    #[test]
    fn mse_examples() {
        assert_eq!(mse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mse(&[1.0, 1.0, 1.0], &[0.0; 3]).unwrap(), 1.0);
        let v = mse(&[0.1, 0.2, 0.3], &[0.0; 3]).unwrap();
        assert!((v - (0.01 + 0.04 + 0.09) / 3.0).abs() < 1e-16);
        assert!(mse(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn finite_diff_on_quadratic_and_constant() {
        let mut block = ParamBlock::new();
        block.push("p", Array::vector(vec![1.0, 2.0]));
        block.grads[0].as_mut_slice().copy_from_slice(&[2.0, 4.0]);
        let r = finite_diff_check(&mut block, |b| b.value(0).as_slice().iter().map(|p| p * p).sum(), 1e-5).unwrap();
        assert!(r.max_rel_err < 1e-10, "{r:?}");
        assert_eq!(block.value(0).as_slice(), &[1.0, 2.0]);

        block.zero_grads();
        let r = finite_diff_check(&mut block, |_| 3.0, 1e-5).unwrap();
        assert_eq!(r.max_rel_err, 0.0);

        assert!(finite_diff_check(&mut block, |_| f64::NAN, 1e-5).is_err());
    }

    proptest! {
        #[test]
        fn gru_output_is_gated_convex_combination(
            seed in any::<u64>(),
            scale in 0.1f64..5.0,
        ) {
            let mut rng = SplitMix64::new(seed);
            let mut cell = gru_cell(6, 4);
            for i in 0..9 {
                cell.value_mut(i).fill_uniform(&mut rng, scale);
            }
            let h: Vec<f64> = (0..4).map(|_| 3.0 * rng.symmetric()).collect();
            let x: Vec<f64> = (0..6).map(|_| 10.0 * rng.symmetric()).collect();
            let t = gru_step(&cell, &h, &x).unwrap();
            for j in 0..4 {
                prop_assert!(t.h[j].abs() <= h[j].abs().max(1.0) + 1e-15);
            }
            let again = gru_step(&cell, &h, &x).unwrap();
            prop_assert_eq!(t.h, again.h);
        }
    }
}
