//! Fully-connected classifier with exact first- and second-order products.
//!
//! Parameters live in one flat vector. Each linear layer contributes its
//! weight matrix `W` (`n_out × n_in`) stacked column by column
//! (`W[o, i]` at `offset + i·n_out + o`), followed by its bias. The column
//! stacking matches the `vec` convention of [`crate::linalg::kron_matvec`],
//! so a K-FAC block `A ⊗ B` acts directly on a layer's weight slice.
//!
//! All batch quantities are sample means; per-sample work is reduced in
//! index order, which keeps every result bitwise reproducible.

mod data;
mod kfac;

pub use data::{one_hot, Batch, Dataset};
pub use kfac::{average_blocks, FisherMode, KfacBlock, FACTOR_EIG_TOL};

use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::linalg::{axpy, dot, Matrix, Rng};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn eval(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// First derivative; relu'(0) is taken as 0.
    fn d1(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }

    fn d2(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = z.tanh();
                -2.0 * t * (1.0 - t * t)
            }
            Activation::Relu | Activation::Identity => 0.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        }
    }
}

impl FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::validation(format!("unknown activation '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Softmax cross-entropy on raw logits.
    CrossEntropy,
    /// `‖f − y‖²` summed over outputs (loss Hessian `2I`).
    Mse,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::CrossEntropy => "cross_entropy",
            LossKind::Mse => "mse",
        }
    }
}

impl FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cross_entropy" => Ok(LossKind::CrossEntropy),
            "mse" => Ok(LossKind::Mse),
            other => Err(Error::validation(format!("unknown loss '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpArchitecture {
    /// `[D, h_1, …, C]`; at least two entries.
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub loss: LossKind,
}

impl MlpArchitecture {
    pub fn new(layer_sizes: Vec<usize>, activation: Activation, loss: LossKind) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::validation("an MLP needs at least one linear layer"));
        }
        if layer_sizes.contains(&0) {
            return Err(Error::validation("layer sizes must be positive"));
        }
        Ok(Self {
            layer_sizes,
            activation,
            loss,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().expect("validated non-empty")
    }

    pub fn n_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn n_params(&self) -> usize {
        self.layer_sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    Weight,
    Bias,
}

/// One contiguous tensor inside the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub layer: usize,
    pub role: ParamRole,
    /// `(n_out, n_in)` for weights, `(n_out, 1)` for biases.
    pub shape: (usize, usize),
    pub offset: usize,
}

impl ParamBlock {
    pub fn len(&self) -> usize {
        self.shape.0 * self.shape.1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    blocks: Vec<ParamBlock>,
    len: usize,
    weight_mask: Vec<bool>,
}

impl ParamLayout {
    pub fn for_architecture(arch: &MlpArchitecture) -> Self {
        let mut blocks = Vec::new();
        let mut offset = 0;
        for (layer, w) in arch.layer_sizes.windows(2).enumerate() {
            let (n_in, n_out) = (w[0], w[1]);
            blocks.push(ParamBlock {
                layer,
                role: ParamRole::Weight,
                shape: (n_out, n_in),
                offset,
            });
            offset += n_in * n_out;
            blocks.push(ParamBlock {
                layer,
                role: ParamRole::Bias,
                shape: (n_out, 1),
                offset,
            });
            offset += n_out;
        }
        let mut weight_mask = vec![false; offset];
        for b in blocks.iter().filter(|b| b.role == ParamRole::Weight) {
            weight_mask[b.range()].iter_mut().for_each(|m| *m = true);
        }
        Self {
            blocks,
            len: offset,
            weight_mask,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn blocks(&self) -> &[ParamBlock] {
        &self.blocks
    }

    /// True exactly for weight entries.
    pub fn weight_mask(&self) -> &[bool] {
        &self.weight_mask
    }

    pub fn weight_block(&self, layer: usize) -> &ParamBlock {
        &self.blocks[2 * layer]
    }

    pub fn bias_block(&self, layer: usize) -> &ParamBlock {
        &self.blocks[2 * layer + 1]
    }

    pub fn n_layers(&self) -> usize {
        self.blocks.len() / 2
    }
}

/// Flat parameter vector tied to its layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Arc<ParamLayout>,
}

impl ParamVector {
    pub fn new(layout: Arc<ParamLayout>, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::validation(format!(
                "{} parameter values for a layout of {}",
                values.len(),
                layout.len()
            )));
        }
        Ok(Self { values, layout })
    }

    pub fn zeros(layout: Arc<ParamLayout>) -> Self {
        Self {
            values: vec![0.0; layout.len()],
            layout,
        }
    }

    /// Same layout, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::new(self.layout.clone(), values)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Which coordinates the ℓ² regularizer `β/2 ‖θ‖²` acts on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegularizerMask {
    /// Weights only; biases are not decayed.
    WeightsOnly,
    All,
}

/// Softmax of one logit row.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln()
}

/// Per-sample activations cached by the forward pass.
struct Trace {
    /// Inputs of each linear layer: `a_0 = x, …, a_{L−1}`.
    inputs: Vec<Vec<f64>>,
    /// Pre-activations `z_1, …, z_L`; the last entry holds the logits.
    pre: Vec<Vec<f64>>,
}

impl Trace {
    fn logits(&self) -> &[f64] {
        self.pre.last().expect("at least one layer")
    }
}

/// The network together with its regularizer mask; the "model context" every
/// curvature computation runs against.
#[derive(Clone, Debug)]
pub struct Mlp {
    arch: MlpArchitecture,
    layout: Arc<ParamLayout>,
    reg_mask: RegularizerMask,
    mask: Vec<f64>,
}

impl Mlp {
    pub fn new(arch: MlpArchitecture, reg_mask: RegularizerMask) -> Self {
        let layout = Arc::new(ParamLayout::for_architecture(&arch));
        let mask = match reg_mask {
            RegularizerMask::WeightsOnly => layout
                .weight_mask()
                .iter()
                .map(|&w| if w { 1.0 } else { 0.0 })
                .collect(),
            RegularizerMask::All => vec![1.0; layout.len()],
        };
        Self {
            arch,
            layout,
            reg_mask,
            mask,
        }
    }

    pub fn architecture(&self) -> &MlpArchitecture {
        &self.arch
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn regularizer_mask(&self) -> RegularizerMask {
        self.reg_mask
    }

    /// 1.0 on regularized coordinates, 0.0 elsewhere.
    pub fn mask(&self) -> &[f64] {
        &self.mask
    }

    pub fn n_params(&self) -> usize {
        self.layout.len()
    }

    pub fn zero_params(&self) -> ParamVector {
        ParamVector::zeros(self.layout.clone())
    }

    pub fn params(&self, values: Vec<f64>) -> Result<ParamVector> {
        ParamVector::new(self.layout.clone(), values)
    }

    /// Gaussian weights with variance `gain / n_in` (gain 2 for relu), zero biases.
    pub fn init_params(&self, rng: &mut Rng) -> ParamVector {
        let gain = match self.arch.activation {
            Activation::Relu => 2.0,
            _ => 1.0,
        };
        let mut p = self.zero_params();
        for l in 0..self.arch.n_layers() {
            let block = self.layout.weight_block(l).clone();
            let sd = (gain / block.shape.1 as f64).sqrt();
            for v in &mut p.values[block.range()] {
                *v = sd * rng.normal();
            }
        }
        p
    }

    fn check_params(&self, params: &ParamVector) -> Result<()> {
        if params.layout.as_ref() != self.layout.as_ref() {
            return Err(Error::validation("parameter layout does not match the model"));
        }
        Ok(())
    }

    fn check_vector(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.n_params() {
            return Err(Error::validation(format!(
                "vector of length {} for a model with {} parameters",
                v.len(),
                self.n_params()
            )));
        }
        Ok(())
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.inputs().cols() != self.arch.input_dim() {
            return Err(Error::validation(format!(
                "inputs have width {}, model expects {}",
                batch.inputs().cols(),
                self.arch.input_dim()
            )));
        }
        if batch.targets().cols() != self.arch.output_dim() {
            return Err(Error::validation(format!(
                "targets have {} classes, model outputs {}",
                batch.targets().cols(),
                self.arch.output_dim()
            )));
        }
        if batch.is_empty() {
            return Err(Error::validation("empty batch"));
        }
        Ok(())
    }

    fn dims(&self, l: usize) -> (usize, usize) {
        (self.arch.layer_sizes[l], self.arch.layer_sizes[l + 1])
    }

    /// `W_l a (+ b_l)` with the weights/biases read from `theta`.
    fn affine(&self, theta: &[f64], l: usize, a: &[f64], with_bias: bool) -> Vec<f64> {
        let (n_in, n_out) = self.dims(l);
        let w = &theta[self.layout.weight_block(l).range()];
        let mut z = if with_bias {
            theta[self.layout.bias_block(l).range()].to_vec()
        } else {
            vec![0.0; n_out]
        };
        for (i, ai) in a.iter().enumerate().take(n_in) {
            if *ai != 0.0 {
                axpy(*ai, &w[i * n_out..(i + 1) * n_out], &mut z);
            }
        }
        z
    }

    /// `W_lᵀ δ` with the weights read from `theta`.
    fn affine_tr(&self, theta: &[f64], l: usize, delta: &[f64]) -> Vec<f64> {
        let (n_in, n_out) = self.dims(l);
        let w = &theta[self.layout.weight_block(l).range()];
        (0..n_in).map(|i| dot(&w[i * n_out..(i + 1) * n_out], delta)).collect()
    }

    /// Accumulates `scale · δ aᵀ` and `scale · δ` into the layer's slots of `out`.
    fn accumulate_outer(&self, out: &mut [f64], l: usize, delta: &[f64], a: &[f64], scale: f64, with_bias: bool) {
        let (_, n_out) = self.dims(l);
        let w_off = self.layout.weight_block(l).offset;
        for (i, ai) in a.iter().enumerate() {
            let c = scale * ai;
            if c != 0.0 {
                axpy(c, delta, &mut out[w_off + i * n_out..w_off + (i + 1) * n_out]);
            }
        }
        if with_bias {
            let b = self.layout.bias_block(l).range();
            axpy(scale, delta, &mut out[b]);
        }
    }

    fn forward_sample(&self, theta: &[f64], x: &[f64]) -> Trace {
        let n_layers = self.arch.n_layers();
        let mut inputs = Vec::with_capacity(n_layers);
        let mut pre = Vec::with_capacity(n_layers);
        let mut a = x.to_vec();
        for l in 0..n_layers {
            let z = self.affine(theta, l, &a, true);
            let next = if l + 1 < n_layers {
                z.iter().map(|v| self.arch.activation.eval(*v)).collect()
            } else {
                Vec::new()
            };
            inputs.push(std::mem::replace(&mut a, next));
            pre.push(z);
        }
        Trace { inputs, pre }
    }

    /// Forward-mode directional derivatives `(Rz_l, Ra_l)` along `v`.
    fn r_forward(&self, theta: &[f64], v: &[f64], tr: &Trace) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let n_layers = self.arch.n_layers();
        let mut rz = Vec::with_capacity(n_layers);
        let mut ra = Vec::with_capacity(n_layers);
        ra.push(vec![0.0; self.arch.input_dim()]);
        for l in 0..n_layers {
            // R(W a + b) = V_W a + W R(a) + V_b
            let mut r = self.affine(v, l, &tr.inputs[l], true);
            if l > 0 {
                let wr = self.affine(theta, l, &ra[l], false);
                axpy(1.0, &wr, &mut r);
            }
            if l + 1 < n_layers {
                let next = r
                    .iter()
                    .zip(&tr.pre[l])
                    .map(|(rv, z)| self.arch.activation.d1(*z) * rv)
                    .collect();
                ra.push(next);
            }
            rz.push(r);
        }
        (rz, ra)
    }

    /// Back-propagates `delta_out` (gradient w.r.t. the logits) and returns the
    /// gradient w.r.t. every layer's pre-activation, first layer first.
    fn backward_deltas(&self, theta: &[f64], tr: &Trace, delta_out: Vec<f64>) -> Vec<Vec<f64>> {
        let n_layers = self.arch.n_layers();
        let mut deltas = vec![Vec::new(); n_layers];
        let mut delta = delta_out;
        for l in (0..n_layers).rev() {
            if l > 0 {
                let s = self.affine_tr(theta, l, &delta);
                let prev = s
                    .iter()
                    .zip(&tr.pre[l - 1])
                    .map(|(sv, z)| self.arch.activation.d1(*z) * sv)
                    .collect();
                deltas[l] = std::mem::replace(&mut delta, prev);
            } else {
                deltas[0] = std::mem::take(&mut delta);
            }
        }
        deltas
    }

    fn loss_value(&self, f: &[f64], y: &[f64]) -> f64 {
        match self.arch.loss {
            LossKind::CrossEntropy => log_sum_exp(f) - dot(y, f),
            LossKind::Mse => f.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum(),
        }
    }

    fn loss_grad(&self, f: &[f64], y: &[f64]) -> Vec<f64> {
        match self.arch.loss {
            LossKind::CrossEntropy => softmax(f).iter().zip(y).map(|(p, t)| p - t).collect(),
            LossKind::Mse => f.iter().zip(y).map(|(a, b)| 2.0 * (a - b)).collect(),
        }
    }

    /// Loss Hessian w.r.t. the logits times `u`.
    fn loss_hess_vp(&self, f: &[f64], u: &[f64]) -> Vec<f64> {
        match self.arch.loss {
            LossKind::CrossEntropy => {
                let p = softmax(f);
                let pu = dot(&p, u);
                p.iter().zip(u).map(|(pi, ui)| pi * (ui - pu)).collect()
            }
            LossKind::Mse => u.iter().map(|v| 2.0 * v).collect(),
        }
    }

    /// Raw logits, one row per input.
    pub fn forward(&self, params: &ParamVector, inputs: &Matrix) -> Result<Matrix> {
        self.check_params(params)?;
        if inputs.cols() != self.arch.input_dim() {
            return Err(Error::validation(format!(
                "inputs have width {}, model expects {}",
                inputs.cols(),
                self.arch.input_dim()
            )));
        }
        let c = self.arch.output_dim();
        let mut out = Vec::with_capacity(inputs.rows() * c);
        for r in 0..inputs.rows() {
            let tr = self.forward_sample(params.values(), inputs.row(r));
            out.extend_from_slice(tr.logits());
        }
        Matrix::from_vec(inputs.rows(), c, out)
    }

    /// Softmax class probabilities, one row per input.
    pub fn predict_proba(&self, params: &ParamVector, inputs: &Matrix) -> Result<Matrix> {
        let logits = self.forward(params, inputs)?;
        let c = logits.cols();
        let mut data = Vec::with_capacity(logits.rows() * c);
        for r in 0..logits.rows() {
            data.extend(softmax(logits.row(r)));
        }
        Matrix::from_vec(logits.rows(), c, data)
    }

    /// `β/2 Σ mask·θ²`
    pub fn regularizer(&self, theta: &[f64], beta: f64) -> f64 {
        0.5 * beta * theta.iter().zip(&self.mask).map(|(t, m)| m * t * t).sum::<f64>()
    }

    /// Regularized batch loss without the gradient.
    pub fn loss(&self, params: &ParamVector, batch: &Batch, beta: f64) -> Result<f64> {
        self.check_params(params)?;
        self.check_batch(batch)?;
        check_beta(beta)?;
        let theta = params.values();
        let mut total = 0.0;
        for r in 0..batch.len() {
            let tr = self.forward_sample(theta, batch.inputs().row(r));
            total += self.loss_value(tr.logits(), batch.targets().row(r));
        }
        Ok(total / batch.len() as f64 + self.regularizer(theta, beta))
    }

    /// `L_reg = (1/N) Σ ℓ + β/2 ‖mask ⊙ θ‖²` and its exact gradient.
    pub fn loss_and_grad(&self, params: &ParamVector, batch: &Batch, beta: f64) -> Result<(f64, Vec<f64>)> {
        self.check_params(params)?;
        self.check_batch(batch)?;
        check_beta(beta)?;
        let theta = params.values();
        let n = batch.len() as f64;
        let mut total = 0.0;
        let mut grad = vec![0.0; self.n_params()];
        for r in 0..batch.len() {
            let tr = self.forward_sample(theta, batch.inputs().row(r));
            let y = batch.targets().row(r);
            total += self.loss_value(tr.logits(), y);
            let deltas = self.backward_deltas(theta, &tr, self.loss_grad(tr.logits(), y));
            for (l, d) in deltas.iter().enumerate() {
                self.accumulate_outer(&mut grad, l, d, &tr.inputs[l], 1.0, true);
            }
        }
        grad.iter_mut().for_each(|g| *g /= n);
        for ((g, t), m) in grad.iter_mut().zip(theta).zip(&self.mask) {
            *g += beta * m * t;
        }
        Ok((total / n + self.regularizer(theta, beta), grad))
    }

    /// Exact Hessian-vector product of `L_reg` (reverse-over-forward).
    pub fn hvp(&self, params: &ParamVector, batch: &Batch, beta: f64, v: &[f64]) -> Result<Vec<f64>> {
        self.check_params(params)?;
        self.check_batch(batch)?;
        self.check_vector(v)?;
        check_beta(beta)?;
        let theta = params.values();
        let act = self.arch.activation;
        let n = batch.len() as f64;
        let mut out = vec![0.0; self.n_params()];
        for r in 0..batch.len() {
            let tr = self.forward_sample(theta, batch.inputs().row(r));
            let y = batch.targets().row(r);
            let (rz, ra) = self.r_forward(theta, v, &tr);
            let deltas = self.backward_deltas(theta, &tr, self.loss_grad(tr.logits(), y));
            let mut rdelta = self.loss_hess_vp(tr.logits(), rz.last().expect("layers"));
            for l in (0..self.arch.n_layers()).rev() {
                self.accumulate_outer(&mut out, l, &rdelta, &tr.inputs[l], 1.0, true);
                self.accumulate_outer(&mut out, l, &deltas[l], &ra[l], 1.0, false);
                if l > 0 {
                    let s = self.affine_tr(theta, l, &deltas[l]);
                    let mut rs = self.affine_tr(v, l, &deltas[l]);
                    axpy(1.0, &self.affine_tr(theta, l, &rdelta), &mut rs);
                    rdelta = (0..s.len())
                        .map(|i| {
                            let z = tr.pre[l - 1][i];
                            act.d2(z) * rz[l - 1][i] * s[i] + act.d1(z) * rs[i]
                        })
                        .collect();
                }
            }
        }
        out.iter_mut().for_each(|o| *o /= n);
        for ((o, vi), m) in out.iter_mut().zip(v).zip(&self.mask) {
            *o += beta * m * vi;
        }
        Ok(out)
    }

    /// `(G_B + β·diag(mask)) v` with `G_B = (1/N) Σ Jₙᵀ H_ℓ Jₙ`, computed as
    /// Jacobian-vector, loss-Hessian and transposed-Jacobian products.
    pub fn ggn_vp(&self, params: &ParamVector, batch: &Batch, beta: f64, v: &[f64]) -> Result<Vec<f64>> {
        self.check_params(params)?;
        self.check_batch(batch)?;
        self.check_vector(v)?;
        check_beta(beta)?;
        let theta = params.values();
        let n = batch.len() as f64;
        let mut out = vec![0.0; self.n_params()];
        for r in 0..batch.len() {
            let tr = self.forward_sample(theta, batch.inputs().row(r));
            let (rz, _) = self.r_forward(theta, v, &tr);
            let u = self.loss_hess_vp(tr.logits(), rz.last().expect("layers"));
            let deltas = self.backward_deltas(theta, &tr, u);
            for (l, d) in deltas.iter().enumerate() {
                self.accumulate_outer(&mut out, l, d, &tr.inputs[l], 1.0, true);
            }
        }
        out.iter_mut().for_each(|o| *o /= n);
        for ((o, vi), m) in out.iter_mut().zip(v).zip(&self.mask) {
            *o += beta * m * vi;
        }
        Ok(out)
    }

    /// `∇_θ f(x) · v`, a length-`C` vector, by forward-mode differentiation.
    pub fn jacobian_vp(&self, params: &ParamVector, x: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        self.check_params(params)?;
        self.check_vector(v)?;
        if x.len() != self.arch.input_dim() {
            return Err(Error::validation(format!(
                "input of width {}, model expects {}",
                x.len(),
                self.arch.input_dim()
            )));
        }
        let tr = self.forward_sample(params.values(), x);
        let (mut rz, _) = self.r_forward(params.values(), v, &tr);
        Ok(rz.pop().expect("layers"))
    }

    /// Logits `f(x)` and `∇_θ f(x) · v` for each `v` in `directions`, sharing one forward pass.
    pub fn linearized_logits(
        &self,
        params: &ParamVector,
        x: &[f64],
        directions: &[&[f64]],
    ) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        self.check_params(params)?;
        for v in directions {
            self.check_vector(v)?;
        }
        if x.len() != self.arch.input_dim() {
            return Err(Error::validation("input width does not match the model"));
        }
        let tr = self.forward_sample(params.values(), x);
        let jvps = directions
            .iter()
            .map(|v| {
                let (mut rz, _) = self.r_forward(params.values(), v, &tr);
                rz.pop().expect("layers")
            })
            .collect();
        Ok((tr.logits().to_vec(), jvps))
    }

    /// Per-layer K-FAC factors of the batch Fisher (weights only).
    ///
    /// `A = (1/N) Σ a aᵀ` over each layer's inputs and `B = (1/N) Σ g gᵀ`
    /// over the loss gradients w.r.t. its pre-activations. In
    /// [`FisherMode::McSample`] the targets are drawn once per sample from
    /// the model's predictive distribution (categorical for cross-entropy,
    /// `N(f, ½I)` for MSE, so that `E[g gᵀ]` equals the loss Hessian); in
    /// [`FisherMode::Empirical`] the batch labels are used.
    pub fn kfac_factors(
        &self,
        params: &ParamVector,
        batch: &Batch,
        mode: FisherMode,
        rng: &mut Rng,
    ) -> Result<Vec<KfacBlock>> {
        self.check_params(params)?;
        self.check_batch(batch)?;
        let theta = params.values();
        let n_layers = self.arch.n_layers();
        let mut a_sums: Vec<Matrix> = (0..n_layers)
            .map(|l| Matrix::zeros(self.dims(l).0, self.dims(l).0))
            .collect();
        let mut b_sums: Vec<Matrix> = (0..n_layers)
            .map(|l| Matrix::zeros(self.dims(l).1, self.dims(l).1))
            .collect();
        let c = self.arch.output_dim();
        for r in 0..batch.len() {
            let tr = self.forward_sample(theta, batch.inputs().row(r));
            let f = tr.logits();
            let target: Vec<f64> = match mode {
                FisherMode::Empirical => batch.targets().row(r).to_vec(),
                FisherMode::McSample => match self.arch.loss {
                    LossKind::CrossEntropy => {
                        let k = rng.categorical(&softmax(f));
                        let mut t = vec![0.0; c];
                        t[k] = 1.0;
                        t
                    }
                    LossKind::Mse => f
                        .iter()
                        .map(|fi| fi + std::f64::consts::FRAC_1_SQRT_2 * rng.normal())
                        .collect(),
                },
            };
            let deltas = self.backward_deltas(theta, &tr, self.loss_grad(f, &target));
            for l in 0..n_layers {
                add_outer(&mut a_sums[l], &tr.inputs[l]);
                add_outer(&mut b_sums[l], &deltas[l]);
            }
        }
        let inv_n = 1.0 / batch.len() as f64;
        a_sums
            .into_iter()
            .zip(b_sums)
            .enumerate()
            .map(|(l, (a, b))| KfacBlock::from_factors(l, a.scaled(inv_n), b.scaled(inv_n)))
            .collect()
    }
}

fn add_outer(m: &mut Matrix, v: &[f64]) {
    let n = v.len();
    for i in 0..n {
        if v[i] == 0.0 {
            continue;
        }
        for j in 0..n {
            m[(i, j)] += v[i] * v[j];
        }
    }
}

fn check_beta(beta: f64) -> Result<()> {
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(Error::validation(format!(
            "regularizer β = {beta} must be finite and ≥ 0"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests;
