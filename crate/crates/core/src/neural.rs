//! Small dense/LSTM building blocks with hand-written backward passes.
//!
//! Everything here works on `f64` vectors and a row-major [`Matrix`]. The
//! networks in this crate are tiny (a few hundred units at most), so plain
//! loops are fast enough and keep the gradient code easy to audit.

use std::path::Path;

use rand::Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{dim_check, Error, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MatrixRepr")]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Deserialize)]
struct MatrixRepr {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<MatrixRepr> for Matrix {
    type Error = Error;

    fn try_from(r: MatrixRepr) -> Result<Self> {
        Matrix::from_vec(r.rows, r.cols, r.data)
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        dim_check("matrix data length", rows * cols, data.len())?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("matrix contains non-finite values".into()));
        }
        Ok(Self { rows, cols, data })
    }

    /// Uniform in `[-1/sqrt(cols), 1/sqrt(cols)]`, i.e. scaled by fan-in.
    pub fn uniform_fan_in<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (cols.max(1) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `out += self · x`
    pub fn matvec_acc(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (o, row) in out.iter_mut().zip(self.data.chunks_exact(self.cols)) {
            *o += dot(row, x);
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.rows];
        self.matvec_acc(x, &mut out);
        out
    }

    /// `out += selfᵀ · g`
    pub fn transpose_matvec_acc(&self, g: &[f64], out: &mut [f64]) {
        debug_assert_eq!(g.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        for (&gr, row) in g.iter().zip(self.data.chunks_exact(self.cols)) {
            if gr == 0.0 {
                continue;
            }
            for (o, &w) in out.iter_mut().zip(row) {
                *o += gr * w;
            }
        }
    }

    /// `self += scale · a bᵀ`
    pub fn add_outer(&mut self, a: &[f64], b: &[f64], scale: f64) {
        debug_assert_eq!(a.len(), self.rows);
        debug_assert_eq!(b.len(), self.cols);
        for (&ar, row) in a.iter().zip(self.data.chunks_exact_mut(self.cols)) {
            let s = ar * scale;
            if s == 0.0 {
                continue;
            }
            for (w, &bc) in row.iter_mut().zip(b) {
                *w += s * bc;
            }
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Sigmoid,
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Sigmoid => sigmoid(z),
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the activation's output `y`.
    #[inline]
    pub fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Anything that exposes its trainable parameters as flat slices, in a fixed
/// order. Gradients use the same type as the model they belong to.
pub trait Parameters {
    fn param_slices(&self) -> Vec<&[f64]>;
    fn param_slices_mut(&mut self) -> Vec<&mut [f64]>;

    fn param_count(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }

    fn flat_params(&self) -> Vec<f64> {
        self.param_slices().concat()
    }

    fn zero_params(&mut self) {
        for s in self.param_slices_mut() {
            s.fill(0.0);
        }
    }

    fn scale_params(&mut self, factor: f64) {
        for s in self.param_slices_mut() {
            s.iter_mut().for_each(|v| *v *= factor);
        }
    }

    /// `self += other`; shapes must agree.
    fn add_params(&mut self, other: &Self)
    where
        Self: Sized,
    {
        for (a, b) in self.param_slices_mut().into_iter().zip(other.param_slices()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    fn squared_norm(&self) -> f64 {
        self.param_slices()
            .iter()
            .flat_map(|s| s.iter())
            .map(|v| v * v)
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

/// Gradients of a dense layer for one input.
#[derive(Debug, Clone)]
pub struct DenseGrads {
    pub input: Vec<f64>,
    pub layer: DenseLayer,
}

impl DenseLayer {
    pub fn new<R: Rng + ?Sized>(
        input_dim: usize,
        output_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (input_dim.max(1) as f64).sqrt();
        let weights = Matrix::uniform_fan_in(output_dim, input_dim, rng);
        let bias = (0..output_dim)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        Self {
            weights,
            bias,
            activation,
        }
    }

    pub fn zeros(input_dim: usize, output_dim: usize, activation: Activation) -> Self {
        Self {
            weights: Matrix::zeros(output_dim, input_dim),
            bias: vec![0.0; output_dim],
            activation,
        }
    }

    pub fn from_parts(weights: Matrix, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        dim_check("dense bias length", weights.rows(), bias.len())?;
        Ok(Self {
            weights,
            bias,
            activation,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.input_dim(), self.output_dim(), self.activation)
    }

    /// `activation(W·x + b)`
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        dim_check("dense input", self.input_dim(), input.len())?;
        Ok(self.forward_unchecked(input))
    }

    pub(crate) fn forward_unchecked(&self, input: &[f64]) -> Vec<f64> {
        let mut z = self.bias.clone();
        self.weights.matvec_acc(input, &mut z);
        z.iter_mut().for_each(|v| *v = self.activation.apply(*v));
        z
    }

    pub fn backward(&self, input: &[f64], upstream: &[f64]) -> Result<DenseGrads> {
        dim_check("dense input", self.input_dim(), input.len())?;
        dim_check("dense upstream gradient", self.output_dim(), upstream.len())?;
        let output = self.forward_unchecked(input);
        let mut grads = self.zeros_like();
        let input_grad = self.backward_acc(input, &output, upstream, &mut grads);
        Ok(DenseGrads {
            input: input_grad,
            layer: grads,
        })
    }

    /// Backward pass given the cached forward output; parameter gradients are
    /// accumulated into `acc` and the input gradient is returned.
    pub fn backward_acc(
        &self,
        input: &[f64],
        output: &[f64],
        upstream: &[f64],
        acc: &mut DenseLayer,
    ) -> Vec<f64> {
        let dz: Vec<f64> = upstream
            .iter()
            .zip(output)
            .map(|(g, &y)| g * self.activation.derivative_from_output(y))
            .collect();
        acc.weights.add_outer(&dz, input, 1.0);
        for (b, d) in acc.bias.iter_mut().zip(&dz) {
            *b += d;
        }
        let mut input_grad = vec![0.0; self.input_dim()];
        self.weights.transpose_matvec_acc(&dz, &mut input_grad);
        input_grad
    }
}

impl Parameters for DenseLayer {
    fn param_slices(&self) -> Vec<&[f64]> {
        vec![self.weights.data(), &self.bias]
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.weights.data.as_mut_slice(), self.bias.as_mut_slice()]
    }
}

/// Single-layer LSTM. Gate rows are stacked in the order input, forget,
/// output, candidate: rows `[0,H)`, `[H,2H)`, `[2H,3H)`, `[3H,4H)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmCell {
    pub input_weights: Matrix,
    pub hidden_weights: Matrix,
    pub bias: Vec<f64>,
    pub hidden_size: usize,
}

/// Intermediates of one LSTM step, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct LstmCache {
    pub x: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub c_prev: Vec<f64>,
    pub input_gate: Vec<f64>,
    pub forget_gate: Vec<f64>,
    pub output_gate: Vec<f64>,
    pub candidate: Vec<f64>,
    pub c: Vec<f64>,
    pub tanh_c: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct LstmStepGrads {
    pub x: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub c_prev: Vec<f64>,
}

impl LstmCell {
    pub fn new<R: Rng + ?Sized>(input_size: usize, hidden_size: usize, rng: &mut R) -> Self {
        let fan_in = input_size + hidden_size;
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let mut sample = |rows: usize, cols: usize| {
            let data = (0..rows * cols)
                .map(|_| rng.random_range(-bound..=bound))
                .collect();
            Matrix { rows, cols, data }
        };
        let input_weights = sample(4 * hidden_size, input_size);
        let hidden_weights = sample(4 * hidden_size, hidden_size);
        let bias = sample(4 * hidden_size, 1).data;
        Self {
            input_weights,
            hidden_weights,
            bias,
            hidden_size,
        }
    }

    pub fn zeros(input_size: usize, hidden_size: usize) -> Self {
        Self {
            input_weights: Matrix::zeros(4 * hidden_size, input_size),
            hidden_weights: Matrix::zeros(4 * hidden_size, hidden_size),
            bias: vec![0.0; 4 * hidden_size],
            hidden_size,
        }
    }

    pub fn input_size(&self) -> usize {
        self.input_weights.cols()
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.input_size(), self.hidden_size)
    }

    pub fn step(&self, x: &[f64], h_prev: &[f64], c_prev: &[f64]) -> Result<LstmCache> {
        dim_check("lstm input", self.input_size(), x.len())?;
        dim_check("lstm hidden state", self.hidden_size, h_prev.len())?;
        dim_check("lstm cell state", self.hidden_size, c_prev.len())?;
        Ok(self.step_unchecked(x, h_prev, c_prev))
    }

    pub(crate) fn step_unchecked(&self, x: &[f64], h_prev: &[f64], c_prev: &[f64]) -> LstmCache {
        let h = self.hidden_size;
        let mut z = self.bias.clone();
        sparse_matvec_acc(&self.input_weights, x, &mut z);
        self.hidden_weights.matvec_acc(h_prev, &mut z);
        let input_gate: Vec<f64> = z[..h].iter().map(|&v| sigmoid(v)).collect();
        let forget_gate: Vec<f64> = z[h..2 * h].iter().map(|&v| sigmoid(v)).collect();
        let output_gate: Vec<f64> = z[2 * h..3 * h].iter().map(|&v| sigmoid(v)).collect();
        let candidate: Vec<f64> = z[3 * h..].iter().map(|v| v.tanh()).collect();
        let c: Vec<f64> = (0..h)
            .map(|j| forget_gate[j] * c_prev[j] + input_gate[j] * candidate[j])
            .collect();
        let tanh_c: Vec<f64> = c.iter().map(|v| v.tanh()).collect();
        LstmCache {
            x: x.to_vec(),
            h_prev: h_prev.to_vec(),
            c_prev: c_prev.to_vec(),
            input_gate,
            forget_gate,
            output_gate,
            candidate,
            c,
            tanh_c,
        }
    }

    /// Backward through one step. `dh`/`dc` are the gradients flowing into
    /// this step's outputs; parameter gradients accumulate into `acc`.
    pub fn step_backward(
        &self,
        cache: &LstmCache,
        dh: &[f64],
        dc: &[f64],
        acc: &mut LstmCell,
    ) -> LstmStepGrads {
        let h = self.hidden_size;
        let mut dz = vec![0.0; 4 * h];
        let mut dc_prev = vec![0.0; h];
        for j in 0..h {
            let o = cache.output_gate[j];
            let tc = cache.tanh_c[j];
            let dcj = dc[j] + dh[j] * o * (1.0 - tc * tc);
            let i = cache.input_gate[j];
            let f = cache.forget_gate[j];
            let g = cache.candidate[j];
            dz[j] = dcj * g * i * (1.0 - i);
            dz[h + j] = dcj * cache.c_prev[j] * f * (1.0 - f);
            dz[2 * h + j] = dh[j] * tc * o * (1.0 - o);
            dz[3 * h + j] = dcj * i * (1.0 - g * g);
            dc_prev[j] = dcj * f;
        }
        sparse_add_outer(&mut acc.input_weights, &dz, &cache.x);
        acc.hidden_weights.add_outer(&dz, &cache.h_prev, 1.0);
        for (b, d) in acc.bias.iter_mut().zip(&dz) {
            *b += d;
        }
        let mut dx = vec![0.0; self.input_size()];
        self.input_weights.transpose_matvec_acc(&dz, &mut dx);
        let mut dh_prev = vec![0.0; h];
        self.hidden_weights.transpose_matvec_acc(&dz, &mut dh_prev);
        LstmStepGrads {
            x: dx,
            h_prev: dh_prev,
            c_prev: dc_prev,
        }
    }
}

impl LstmCache {
    pub fn h(&self) -> Vec<f64> {
        self.output_gate
            .iter()
            .zip(&self.tanh_c)
            .map(|(o, t)| o * t)
            .collect()
    }
}

impl Parameters for LstmCell {
    fn param_slices(&self) -> Vec<&[f64]> {
        vec![
            self.input_weights.data(),
            self.hidden_weights.data(),
            &self.bias,
        ]
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.input_weights.data.as_mut_slice(),
            self.hidden_weights.data.as_mut_slice(),
            self.bias.as_mut_slice(),
        ]
    }
}

// Encoded exercise inputs are multi-hot, so skipping zero columns is a big win.
fn sparse_matvec_acc(m: &Matrix, x: &[f64], out: &mut [f64]) {
    for (c, &xv) in x.iter().enumerate() {
        if xv == 0.0 {
            continue;
        }
        for (r, o) in out.iter_mut().enumerate() {
            *o += m.data[r * m.cols + c] * xv;
        }
    }
}

fn sparse_add_outer(m: &mut Matrix, a: &[f64], b: &[f64]) {
    let cols = m.cols;
    for (c, &bv) in b.iter().enumerate() {
        if bv == 0.0 {
            continue;
        }
        for (r, &av) in a.iter().enumerate() {
            m.data[r * cols + c] += av * bv;
        }
    }
}

/// Supervision for one step of a sequence: the mean of the readout over
/// `outputs` is compared against `label` with binary cross-entropy.
#[derive(Debug, Clone, PartialEq)]
pub struct StepTarget {
    pub outputs: Vec<usize>,
    pub label: bool,
}

#[derive(Debug, Clone)]
pub struct SequenceGrads {
    pub loss: f64,
    pub scored_steps: usize,
    pub cell: LstmCell,
    pub readout: DenseLayer,
}

const PROB_FLOOR: f64 = 1e-12;

/// Binary cross-entropy of probability `p` against `label`, and `dL/dp`.
pub fn bce(p: f64, label: bool) -> (f64, f64) {
    let p = p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
    if label {
        (-p.ln(), -1.0 / p)
    } else {
        (-(1.0 - p).ln(), 1.0 / (1.0 - p))
    }
}

/// Runs the LSTM over `inputs` from a zero state, applies `readout` at every
/// step and sums the masked cross-entropy; `targets[t] == None` masks step
/// `t`. Returns the summed loss and full gradients by backpropagation through
/// time.
pub fn lstm_bptt(
    cell: &LstmCell,
    readout: &DenseLayer,
    inputs: &[Vec<f64>],
    targets: &[Option<StepTarget>],
) -> Result<SequenceGrads> {
    if inputs.is_empty() {
        return Err(Error::InsufficientData("empty input sequence".into()));
    }
    dim_check("target count", inputs.len(), targets.len())?;
    dim_check("readout input", cell.hidden_size, readout.input_dim())?;
    for t in targets.iter().flatten() {
        if t.outputs.is_empty() || t.outputs.iter().any(|&k| k >= readout.output_dim()) {
            return Err(Error::Dimension(format!(
                "target outputs {:?} outside readout of size {}",
                t.outputs,
                readout.output_dim()
            )));
        }
    }
    let hs = cell.hidden_size;
    let mut caches = Vec::with_capacity(inputs.len());
    let mut hiddens = Vec::with_capacity(inputs.len());
    let mut outputs: Vec<Option<Vec<f64>>> = Vec::with_capacity(inputs.len());
    let mut h = vec![0.0; hs];
    let mut c = vec![0.0; hs];
    let mut loss = 0.0;
    let mut scored = 0;
    for (x, target) in inputs.iter().zip(targets) {
        let cache = cell.step(x, &h, &c)?;
        h = cache.h();
        c = cache.c.clone();
        let out = target.as_ref().map(|t| {
            let y = readout.forward_unchecked(&h);
            let p = t.outputs.iter().map(|&k| y[k]).sum::<f64>() / t.outputs.len() as f64;
            loss += bce(p, t.label).0;
            scored += 1;
            y
        });
        caches.push(cache);
        hiddens.push(h.clone());
        outputs.push(out);
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("sequence loss {loss}")));
    }

    let mut cell_grads = cell.zeros_like();
    let mut readout_grads = readout.zeros_like();
    let mut dh_next = vec![0.0; hs];
    let mut dc_next = vec![0.0; hs];
    for t in (0..inputs.len()).rev() {
        let mut dh = dh_next.clone();
        if let (Some(target), Some(y)) = (&targets[t], &outputs[t]) {
            let n = target.outputs.len() as f64;
            let p = target.outputs.iter().map(|&k| y[k]).sum::<f64>() / n;
            let (_, dp) = bce(p, target.label);
            let mut dy = vec![0.0; y.len()];
            for &k in &target.outputs {
                dy[k] += dp / n;
            }
            let dh_out = readout.backward_acc(&hiddens[t], y, &dy, &mut readout_grads);
            for (a, b) in dh.iter_mut().zip(&dh_out) {
                *a += b;
            }
        }
        let step = cell.step_backward(&caches[t], &dh, &dc_next, &mut cell_grads);
        dh_next = step.h_prev;
        dc_next = step.c_prev;
    }
    Ok(SequenceGrads {
        loss,
        scored_steps: scored,
        cell: cell_grads,
        readout: readout_grads,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub dropout_rate: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            dropout_rate: 0.3,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Invalid(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Invalid(format!(
                "dropout rate must be in [0,1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// `θ ← θ + η∇`
    Ascent,
    /// `θ ← θ − η∇`
    Descent,
}

pub fn sgd_update<P: Parameters>(params: &mut P, grads: &P, learning_rate: f64, dir: Direction) {
    let step = match dir {
        Direction::Ascent => learning_rate,
        Direction::Descent => -learning_rate,
    };
    if step == 0.0 {
        return;
    }
    for (p, g) in params
        .param_slices_mut()
        .into_iter()
        .zip(grads.param_slices())
    {
        for (x, d) in p.iter_mut().zip(g) {
            *x += step * d;
        }
    }
}

/// Rescales every gradient in `grads` so their joint L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [&mut dyn ClipTarget], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.sq_norm()).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let f = max_norm / norm;
        for g in grads.iter_mut() {
            g.scale(f);
        }
    }
    norm
}

/// Object-safe view of [`Parameters`] used for clipping across heterogeneous
/// gradient containers.
pub trait ClipTarget {
    fn sq_norm(&self) -> f64;
    fn scale(&mut self, f: f64);
}

impl<P: Parameters> ClipTarget for P {
    fn sq_norm(&self) -> f64 {
        self.squared_norm()
    }

    fn scale(&mut self, f: f64) {
        self.scale_params(f);
    }
}

/// Inverted-dropout mask: each entry is `0` with probability `rate`, else
/// `1/(1-rate)`. Rate 0 gives all ones.
pub fn dropout_mask<R: Rng + ?Sized>(len: usize, rate: f64, rng: &mut R) -> Vec<f64> {
    if rate <= 0.0 {
        return vec![1.0; len];
    }
    let keep = 1.0 / (1.0 - rate);
    (0..len)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect()
}

/// Writes any model as pretty JSON. Floats round-trip exactly.
pub fn save_checkpoint<T: Serialize>(path: &Path, model: &T) -> Result<()> {
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer_pretty(file, model)?;
    Ok(())
}

pub fn load_checkpoint<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    Ok(serde_json::from_reader(file)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let layer =
            DenseLayer::from_parts(Matrix::identity(3), vec![0.0; 3], Activation::Identity)
                .unwrap();
        assert_eq!(layer.forward(&[1.0, -2.0, 3.5]).unwrap(), vec![1.0, -2.0, 3.5]);
    }

    #[test]
    fn zero_sigmoid_layer_outputs_half() {
        let layer = DenseLayer::zeros(4, 3, Activation::Sigmoid);
        assert_eq!(layer.forward(&[1.0, 2.0, 3.0, 4.0]).unwrap(), vec![0.5; 3]);
    }

    #[test]
    fn dense_forward_matches_naive_loops() {
        let mut r = rng();
        let layer = DenseLayer::new(4, 3, Activation::Identity, &mut r);
        let x = [0.3, -1.2, 0.7, 2.0];
        let got = layer.forward(&x).unwrap();
        for i in 0..3 {
            let mut acc = layer.bias[i];
            for j in 0..4 {
                acc += layer.weights.get(i, j) * x[j];
            }
            assert!((got[i] - acc).abs() < 1e-12);
        }
    }

    #[test]
    fn dense_dimension_mismatch_is_an_error() {
        let layer = DenseLayer::zeros(4, 3, Activation::Tanh);
        assert!(matches!(layer.forward(&[1.0]), Err(Error::Dimension(_))));
        assert!(layer.backward(&[0.0; 4], &[1.0]).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut r = rng();
        let layer = DenseLayer::new(3, 2, Activation::Sigmoid, &mut r);
        let g = layer.backward(&[0.1, 0.2, 0.3], &[0.0, 0.0]).unwrap();
        assert!(g.input.iter().all(|&v| v == 0.0));
        assert_eq!(g.layer.squared_norm(), 0.0);
    }

    #[test]
    fn scalar_sigmoid_gradient_is_closed_form() {
        let layer = DenseLayer::from_parts(
            Matrix::from_vec(1, 1, vec![0.8]).unwrap(),
            vec![-0.1],
            Activation::Sigmoid,
        )
        .unwrap();
        let x = 1.5;
        let s = sigmoid(0.8 * x - 0.1);
        let g = layer.backward(&[x], &[1.0]).unwrap();
        assert!((g.layer.bias[0] - s * (1.0 - s)).abs() < 1e-15);
        assert!((g.layer.weights.get(0, 0) - s * (1.0 - s) * x).abs() < 1e-15);
        assert!((g.input[0] - s * (1.0 - s) * 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_lstm_has_zero_fixed_point() {
        let cell = LstmCell::zeros(3, 4);
        let cache = cell.step(&[1.0, 0.0, 1.0], &[0.0; 4], &[0.0; 4]).unwrap();
        assert!(cache.c.iter().all(|&v| v == 0.0));
        assert!(cache.h().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn first_step_ignores_forget_gate() {
        let mut r = rng();
        let mut cell = LstmCell::new(2, 3, &mut r);
        let x = [0.5, -0.5];
        let a = cell.step(&x, &[0.0; 3], &[0.0; 3]).unwrap();
        // perturb forget-gate bias only
        for j in 3..6 {
            cell.bias[j] += 10.0;
        }
        let b = cell.step(&x, &[0.0; 3], &[0.0; 3]).unwrap();
        assert_eq!(a.c, b.c);
        assert_eq!(a.h(), b.h());
    }

    #[test]
    fn bptt_on_all_masked_sequence_is_zero() {
        let mut r = rng();
        let cell = LstmCell::new(4, 3, &mut r);
        let readout = DenseLayer::new(3, 2, Activation::Sigmoid, &mut r);
        let inputs = vec![vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 0.0, 1.0, 0.0]];
        let g = lstm_bptt(&cell, &readout, &inputs, &[None, None]).unwrap();
        assert_eq!(g.loss, 0.0);
        assert_eq!(g.cell.squared_norm(), 0.0);
        assert_eq!(g.readout.squared_norm(), 0.0);
    }

    #[test]
    fn bptt_rejects_empty_sequence() {
        let cell = LstmCell::zeros(2, 2);
        let readout = DenseLayer::zeros(2, 2, Activation::Sigmoid);
        assert!(lstm_bptt(&cell, &readout, &[], &[]).is_err());
    }

    #[test]
    fn sgd_arithmetic() {
        let mut p = DenseLayer::from_parts(
            Matrix::from_vec(1, 1, vec![1.0]).unwrap(),
            vec![0.0],
            Activation::Identity,
        )
        .unwrap();
        let mut g = p.zeros_like();
        g.weights.set(0, 0, 2.0);
        sgd_update(&mut p, &g, 0.001, Direction::Ascent);
        assert!((p.weights.get(0, 0) - 1.002).abs() < 1e-15);
        sgd_update(&mut p, &g, 0.0, Direction::Descent);
        assert!((p.weights.get(0, 0) - 1.002).abs() < 1e-15);
        let before = p.clone();
        let zero = p.zeros_like();
        sgd_update(&mut p, &zero, 0.1, Direction::Descent);
        assert_eq!(p, before);
    }

    #[test]
    fn clipping_bounds_joint_norm() {
        let mut a = DenseLayer::zeros(2, 2, Activation::Identity);
        a.bias = vec![3.0, 4.0];
        let mut b = LstmCell::zeros(1, 1);
        b.bias[0] = 12.0;
        let norm = clip_global_norm(&mut [&mut a, &mut b], 5.0);
        assert!((norm - 13.0).abs() < 1e-12);
        let after = (a.squared_norm() + b.squared_norm()).sqrt();
        assert!((after - 5.0).abs() < 1e-12);
    }

    #[test]
    fn dropout_rate_zero_is_identity_and_seeded_mask_repeats() {
        let mut r = rng();
        assert_eq!(dropout_mask(5, 0.0, &mut r), vec![1.0; 5]);
        let a = dropout_mask(64, 0.3, &mut ChaCha8Rng::seed_from_u64(3));
        let b = dropout_mask(64, 0.3, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
        assert!(a.iter().all(|&v| v == 0.0 || (v - 1.0 / 0.7).abs() < 1e-12));
    }

    #[test]
    fn matrix_rejects_bad_shapes_in_checkpoints() {
        let bad = r#"{"rows":2,"cols":2,"data":[1.0,2.0,3.0]}"#;
        assert!(serde_json::from_str::<Matrix>(bad).is_err());
    }

    #[test]
    fn sgd_config_validation() {
        assert!(SgdConfig::default().validate().is_ok());
        assert!(SgdConfig {
            learning_rate: 0.0,
            dropout_rate: 0.0
        }
        .validate()
        .is_err());
        assert!(SgdConfig {
            learning_rate: 0.1,
            dropout_rate: 1.0
        }
        .validate()
        .is_err());
    }
}
