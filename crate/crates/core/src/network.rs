//! Random finite-width networks and their per-sample signals.
//!
//! Matrices hold one sample per column. Backward signals for all outputs are
//! stacked side by side: column `k * N + n` of `delta[l]` is `δ_k^l(n)`.

use faer::Mat;

use crate::error::{Error, Result};
use crate::linalg;
use crate::meanfield::NetworkConfig;
use crate::rng::{self, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Parameterization {
    /// `W ~ N(0, σ_w²/M_{l-1})`, `b ~ N(0, σ_b²)`, gradients taken in `W, b`.
    #[default]
    Standard,
    /// `W = (σ_w/√M_{l-1}) ω`, `b = σ_b β`, gradients taken in `ω, β`.
    Ntk,
}

impl Parameterization {
    /// Factor between `∂f/∂ω` and `∂f/∂W` for layer `l`.
    pub fn weight_grad_scale(self, cfg: &NetworkConfig, l: usize) -> f64 {
        match self {
            Parameterization::Standard => 1.0,
            Parameterization::Ntk => (cfg.sigma_w2 / cfg.layer_width(l - 1) as f64).sqrt(),
        }
    }

    /// Factor between `∂f/∂β` and `∂f/∂b`.
    pub fn bias_grad_scale(self, cfg: &NetworkConfig) -> f64 {
        match self {
            Parameterization::Standard => 1.0,
            Parameterization::Ntk => cfg.sigma_b2.sqrt(),
        }
    }
}

/// Weights and biases of a network. Both parameterizations draw the same
/// standard normals, so the function computed for a given seed does not
/// depend on the parameterization; only gradients differ.
#[derive(Debug, Clone)]
pub struct NetworkInstance {
    cfg: NetworkConfig,
    param: Parameterization,
    seed: u64,
    trial: u64,
    /// `W^l` at index `l - 1`, shape `M_l × M_{l-1}`.
    weights: Vec<Mat<f64>>,
    biases: Vec<Vec<f64>>,
}

/// Gradient of a scalar with respect to every `W^l` and `b^l`.
#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub weights: Vec<Mat<f64>>,
    pub biases: Vec<Vec<f64>>,
}

/// Activations of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// `h^l` for `l = 0..L-1`; `h^0` is the input.
    pub h: Vec<Mat<f64>>,
    /// `u^l` for `l = 1..L` at index `l - 1`; `u^L = f`.
    pub u: Vec<Mat<f64>>,
}

impl ForwardPass {
    pub fn output(&self) -> &Mat<f64> {
        self.u.last().expect("network has at least one layer")
    }
}

/// All per-sample signals needed to assemble dual Gram matrices.
#[derive(Debug, Clone)]
pub struct SignalPack {
    pub h: Vec<Mat<f64>>,
    pub u: Vec<Mat<f64>>,
    /// `δ^l` for `l = 1..L` at index `l - 1`, shape `M_l × CN`.
    pub delta: Vec<Mat<f64>>,
    /// Outputs, `C × N`.
    pub f: Mat<f64>,
    /// Softmax of the outputs, `C × N`.
    pub g: Mat<f64>,
}

impl SignalPack {
    pub fn n_samples(&self) -> usize {
        self.f.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.f.nrows()
    }

    /// `g` as a flat column-major slice, `g[k + C n]`.
    pub fn softmax_flat(&self) -> Vec<f64> {
        mat_to_col_major(&self.g)
    }
}

pub(crate) fn mat_to_col_major(m: &Mat<f64>) -> Vec<f64> {
    (0..m.ncols()).flat_map(|j| m.col_as_slice(j).iter().copied()).collect()
}

/// `N` i.i.d. standard normal inputs of dimension `dim`, one per column.
pub fn sample_inputs(n_samples: usize, dim: usize, seed: u64, trial: u64) -> Mat<f64> {
    let z = rng::standard_normals(seed, trial, 0, Tensor::Inputs, n_samples * dim);
    Mat::from_fn(dim, n_samples, |i, j| z[j * dim + i])
}

/// Column-wise softmax with max subtraction.
pub fn softmax(f: &Mat<f64>) -> Mat<f64> {
    let mut g = Mat::zeros(f.nrows(), f.ncols());
    for j in 0..f.ncols() {
        let col = f.col_as_slice(j);
        let mx = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let out = g.col_as_slice_mut(j);
        let mut s = 0.0;
        for (o, v) in out.iter_mut().zip(col) {
            *o = (v - mx).exp();
            s += *o;
        }
        out.iter_mut().for_each(|o| *o /= s);
    }
    g
}

impl NetworkInstance {
    /// Draws a network for `(seed, trial)`.
    pub fn random(cfg: &NetworkConfig, param: Parameterization, seed: u64, trial: u64) -> Result<Self> {
        cfg.validate()?;
        let sw = cfg.sigma_w2.sqrt();
        let sb = cfg.sigma_b2.sqrt();
        let mut weights = Vec::with_capacity(cfg.depth);
        let mut biases = Vec::with_capacity(cfg.depth);
        for l in 1..=cfg.depth {
            let (rows, cols) = (cfg.layer_width(l), cfg.layer_width(l - 1));
            let scale = sw / (cols as f64).sqrt();
            let z = rng::standard_normals(seed, trial, l as u32, Tensor::Weights, rows * cols);
            weights.push(Mat::from_fn(rows, cols, |i, j| scale * z[i * cols + j]));
            let zb = rng::standard_normals(seed, trial, l as u32, Tensor::Biases, rows);
            biases.push(zb.into_iter().map(|v| sb * v).collect());
        }
        Ok(NetworkInstance { cfg: cfg.clone(), param, seed, trial, weights, biases })
    }

    /// Builds a network from explicit parameters, checking shapes.
    pub fn from_parts(
        cfg: &NetworkConfig,
        param: Parameterization,
        weights: Vec<Mat<f64>>,
        biases: Vec<Vec<f64>>,
    ) -> Result<Self> {
        cfg.validate()?;
        if weights.len() != cfg.depth || biases.len() != cfg.depth {
            return Err(Error::shape(format!("expected {} layers of parameters", cfg.depth)));
        }
        for l in 1..=cfg.depth {
            let (r, c) = (cfg.layer_width(l), cfg.layer_width(l - 1));
            let w = &weights[l - 1];
            if w.nrows() != r || w.ncols() != c || biases[l - 1].len() != r {
                return Err(Error::shape(format!(
                    "layer {l}: expected {r}x{c} weights and {r} biases, got {}x{} and {}",
                    w.nrows(),
                    w.ncols(),
                    biases[l - 1].len()
                )));
            }
        }
        Ok(NetworkInstance { cfg: cfg.clone(), param, seed: 0, trial: 0, weights, biases })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    pub fn parameterization(&self) -> Parameterization {
        self.param
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn trial(&self) -> u64 {
        self.trial
    }

    /// `W^l` for `1 <= l <= L`.
    pub fn weight(&self, l: usize) -> &Mat<f64> {
        &self.weights[l - 1]
    }

    pub fn bias(&self, l: usize) -> &[f64] {
        &self.biases[l - 1]
    }

    pub fn weight_mut(&mut self, l: usize) -> &mut Mat<f64> {
        &mut self.weights[l - 1]
    }

    pub fn bias_mut(&mut self, l: usize) -> &mut [f64] {
        &mut self.biases[l - 1]
    }

    /// Same parameters viewed under another parameterization.
    pub fn with_parameterization(&self, param: Parameterization) -> Self {
        NetworkInstance { param, ..self.clone() }
    }

    pub fn forward(&self, x: &Mat<f64>) -> Result<ForwardPass> {
        let m0 = self.cfg.input_dim();
        if x.nrows() != m0 {
            return Err(Error::shape(format!("input has {} rows, network expects {m0}", x.nrows())));
        }
        let depth = self.cfg.depth;
        let mut h = Vec::with_capacity(depth);
        let mut u = Vec::with_capacity(depth);
        h.push(x.clone());
        for l in 1..=depth {
            let mut ul = linalg::mul(self.weights[l - 1].as_ref(), h[l - 1].as_ref());
            let b = &self.biases[l - 1];
            for j in 0..ul.ncols() {
                ul.col_as_slice_mut(j).iter_mut().zip(b).for_each(|(v, bi)| *v += bi);
            }
            if l < depth {
                let act = self.cfg.activation(l);
                let mut hl = ul.clone();
                for j in 0..hl.ncols() {
                    hl.col_as_slice_mut(j).iter_mut().for_each(|v| *v = act.eval(*v));
                }
                h.push(hl);
            }
            u.push(ul);
        }
        Ok(ForwardPass { h, u })
    }

    /// `φ'(u^l)` for a hidden layer.
    fn act_deriv(&self, fwd: &ForwardPass, l: usize) -> Mat<f64> {
        let act = self.cfg.activation(l);
        let ul = &fwd.u[l - 1];
        Mat::from_fn(ul.nrows(), ul.ncols(), |i, j| act.deriv(ul[(i, j)]))
    }

    /// Backpropagates `δ_k^l(n)` for every output `k` and sample `n`.
    pub fn backward(&self, fwd: ForwardPass) -> Result<SignalPack> {
        let depth = self.cfg.depth;
        let c = self.cfg.outputs;
        let n = fwd.h[0].ncols();
        if fwd.h.len() != depth || fwd.u.len() != depth {
            return Err(Error::shape("forward pass does not match network depth"));
        }
        let mut delta: Vec<Mat<f64>> = Vec::with_capacity(depth);
        delta.push(Mat::from_fn(c, c * n, |i, j| if j / n == i { 1.0 } else { 0.0 }));
        for l in (1..depth).rev() {
            let upper = delta.last().expect("output layer present");
            let mut d = linalg::mul_tn(self.weights[l].as_ref(), upper.as_ref());
            let dphi = self.act_deriv(&fwd, l);
            for j in 0..c * n {
                let src = dphi.col_as_slice(j % n);
                d.col_as_slice_mut(j).iter_mut().zip(src).for_each(|(v, s)| *v *= s);
            }
            delta.push(d);
        }
        delta.reverse();
        let f = fwd.output().clone();
        let g = softmax(&f);
        Ok(SignalPack { h: fwd.h, u: fwd.u, delta, f, g })
    }

    /// Forward and backward in one call.
    pub fn signals(&self, x: &Mat<f64>) -> Result<SignalPack> {
        self.backward(self.forward(x)?)
    }

    /// Gradient of `Σ_n e(n)·f(n)` in `W, b`, where `e` is `C × N`.
    pub fn vjp(&self, fwd: &ForwardPass, e: &Mat<f64>) -> Result<ParamGrads> {
        let depth = self.cfg.depth;
        let out = fwd.output();
        if e.nrows() != out.nrows() || e.ncols() != out.ncols() {
            return Err(Error::shape("cotangent must match the output shape"));
        }
        let mut wg = Vec::with_capacity(depth);
        let mut bg = Vec::with_capacity(depth);
        let mut err = e.clone();
        for l in (1..=depth).rev() {
            wg.push(linalg::mul(err.as_ref(), fwd.h[l - 1].transpose()));
            bg.push((0..err.nrows()).map(|i| (0..err.ncols()).map(|j| err[(i, j)]).sum()).collect());
            if l > 1 {
                let mut next = linalg::mul_tn(self.weights[l - 1].as_ref(), err.as_ref());
                let dphi = self.act_deriv(fwd, l - 1);
                for j in 0..next.ncols() {
                    next.col_as_slice_mut(j).iter_mut().zip(dphi.col_as_slice(j)).for_each(|(v, s)| *v *= s);
                }
                err = next;
            }
        }
        wg.reverse();
        bg.reverse();
        Ok(ParamGrads { weights: wg, biases: bg })
    }

    /// `θ ← θ − η ∇θ` in the standard parameterization.
    pub fn apply_step(&mut self, grads: &ParamGrads, eta: f64) {
        for (w, g) in self.weights.iter_mut().zip(&grads.weights) {
            for j in 0..w.ncols() {
                w.col_as_slice_mut(j).iter_mut().zip(g.col_as_slice(j)).for_each(|(a, b)| *a -= eta * b);
            }
        }
        for (b, g) in self.biases.iter_mut().zip(&grads.biases) {
            b.iter_mut().zip(g).for_each(|(a, d)| *a -= eta * d);
        }
    }
}
