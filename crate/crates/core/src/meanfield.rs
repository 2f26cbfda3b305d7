//! Order-parameter recursions for wide random networks.
//!
//! Layers are indexed `0..=L`: layer 0 is the input, layers `1..L` are hidden
//! and layer `L` is the linear output.

use std::fmt::Write as _;

use crate::activation::Activation;
use crate::error::{Error, Result};
use crate::gauss::{self, QuadratureRule};

/// Architecture and initialization variances of a feedforward network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    /// Number of weight layers `L`.
    pub depth: usize,
    /// Width scale `M`.
    pub width: usize,
    /// `α_0..α_{L-1}`, so that `M_l = α_l M`.
    pub width_ratios: Vec<f64>,
    /// Output dimension `C`.
    pub outputs: usize,
    pub sigma_w2: f64,
    pub sigma_b2: f64,
    /// Activation of hidden layers `1..L`, one entry per layer.
    pub activations: Vec<Activation>,
}

impl NetworkConfig {
    /// All hidden layers and the input share width `M`.
    pub fn uniform(depth: usize, width: usize, outputs: usize, sigma_w2: f64, sigma_b2: f64, act: Activation) -> Self {
        NetworkConfig {
            depth,
            width,
            width_ratios: vec![1.0; depth],
            outputs,
            sigma_w2,
            sigma_b2,
            activations: vec![act; depth.saturating_sub(1)],
        }
    }

    /// Same architecture at a different width scale.
    pub fn with_width(&self, width: usize) -> Self {
        NetworkConfig { width, ..self.clone() }
    }

    /// `M_l`; the output layer has `C` units.
    pub fn layer_width(&self, l: usize) -> usize {
        if l >= self.depth {
            self.outputs
        } else {
            (self.width_ratios[l] * self.width as f64).round().max(1.0) as usize
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layer_width(0)
    }

    /// Activation applied after layer `l`, for `1 <= l < L`.
    pub fn activation(&self, l: usize) -> &Activation {
        &self.activations[l - 1]
    }

    /// Number of weights and biases in layer `l`.
    pub fn layer_params(&self, l: usize) -> usize {
        self.layer_width(l) * (self.layer_width(l - 1) + 1)
    }

    /// Total parameter count `P`.
    pub fn param_count(&self) -> usize {
        (1..=self.depth).map(|l| self.layer_params(l)).sum()
    }

    /// `M_h = Σ_{l<L} M_l`, the dimension of the stacked input and hidden features.
    pub fn feature_dim(&self) -> usize {
        (0..self.depth).map(|l| self.layer_width(l)).sum()
    }

    /// `α = Σ_{l=1}^{L-1} α_l α_{l-1}`.
    pub fn alpha(&self) -> f64 {
        (1..self.depth).map(|l| self.width_ratios[l] * self.width_ratios[l - 1]).sum()
    }

    /// `α̃ = Σ_{l=0}^{L-1} α_l`.
    pub fn alpha_tilde(&self) -> f64 {
        self.width_ratios.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::domain(format!("depth must be at least 2, got {}", self.depth)));
        }
        if self.width == 0 || self.outputs == 0 {
            return Err(Error::domain("width and outputs must be positive"));
        }
        if self.width_ratios.len() != self.depth {
            return Err(Error::shape(format!(
                "expected {} width ratios, got {}",
                self.depth,
                self.width_ratios.len()
            )));
        }
        if self.width_ratios.iter().any(|a| !(a.is_finite() && *a > 0.0)) {
            return Err(Error::domain("width ratios must be positive and finite"));
        }
        if self.activations.len() != self.depth - 1 {
            return Err(Error::shape(format!(
                "expected {} hidden activations, got {}",
                self.depth - 1,
                self.activations.len()
            )));
        }
        if !(self.sigma_w2.is_finite() && self.sigma_w2 > 0.0) {
            return Err(Error::domain(format!("sigma_w2 must be positive, got {}", self.sigma_w2)));
        }
        if !(self.sigma_b2.is_finite() && self.sigma_b2 >= 0.0) {
            return Err(Error::domain(format!("sigma_b2 must be non-negative, got {}", self.sigma_b2)));
        }
        Ok(())
    }

    /// Whether `σ_b² > 0` or every hidden activation has a nonzero Gaussian
    /// mean. Centered networks are allowed, but their `κ₂` may vanish and the
    /// outlier predictions then degenerate.
    pub fn is_non_centered(&self, rule: &QuadratureRule) -> Result<bool> {
        if self.sigma_b2 > 0.0 {
            return Ok(true);
        }
        for act in &self.activations {
            if !act.has_nonzero_gaussian_mean(rule)? {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

/// How Gaussian moments of an activation are evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MomentSource {
    /// Always integrate numerically.
    Quadrature,
    /// Use analytic moments for identity and ReLU, quadrature otherwise.
    #[default]
    ClosedFormWhenAvailable,
}

/// Per-layer order parameters and derived constants.
#[derive(Debug, Clone, PartialEq)]
pub struct OrderParams {
    /// `q̂₁^l` for `l = 0..L-1`.
    pub qhat1: Vec<f64>,
    /// `q̂₂^l` for `l = 0..L-1`.
    pub qhat2: Vec<f64>,
    /// `q̃₁^l` for `l = 1..L`, stored at index `l - 1`.
    pub qtil1: Vec<f64>,
    /// `q̃₂^l` for `l = 1..L`, stored at index `l - 1`.
    pub qtil2: Vec<f64>,
    pub kappa1: f64,
    pub kappa2: f64,
    pub kappa1p: f64,
    pub kappa2p: f64,
    pub kappat1: f64,
    pub kappat2: f64,
    pub alpha: f64,
    pub alphat: f64,
}

impl OrderParams {
    pub fn depth(&self) -> usize {
        self.qhat1.len()
    }

    /// `(q̃₁^l, q̃₂^l)` for `1 <= l <= L`.
    pub fn qtil(&self, l: usize) -> (f64, f64) {
        (self.qtil1[l - 1], self.qtil2[l - 1])
    }

    /// `(q̂₁^l, q̂₂^l)` for `0 <= l < L`.
    pub fn qhat(&self, l: usize) -> (f64, f64) {
        (self.qhat1[l], self.qhat2[l])
    }

    /// Table with columns `layer, qhat1, qhat2, qtil1, qtil2`. Entries that
    /// do not exist at a layer (no `q̃` at the input, no `q̂` at the output)
    /// are left empty.
    pub fn to_csv(&self) -> String {
        let l_max = self.depth();
        let mut out = String::from("layer,qhat1,qhat2,qtil1,qtil2\n");
        for l in 0..=l_max {
            let (h1, h2) = if l < l_max {
                (fmt_f(self.qhat1[l]), fmt_f(self.qhat2[l]))
            } else {
                (String::new(), String::new())
            };
            let (t1, t2) = if l >= 1 {
                (fmt_f(self.qtil1[l - 1]), fmt_f(self.qtil2[l - 1]))
            } else {
                (String::new(), String::new())
            };
            let _ = writeln!(out, "{l},{h1},{h2},{t1},{t2}");
        }
        out
    }

    /// Table with columns `name, value` for the derived constants.
    pub fn kappas_csv(&self) -> String {
        let mut out = String::from("name,value\n");
        for (name, v) in [
            ("alpha", self.alpha),
            ("alpha_tilde", self.alphat),
            ("kappa1", self.kappa1),
            ("kappa2", self.kappa2),
            ("kappa1_ntk", self.kappa1p),
            ("kappa2_ntk", self.kappa2p),
            ("kappa1_tilde", self.kappat1),
            ("kappa2_tilde", self.kappat2),
        ] {
            let _ = writeln!(out, "{name},{}", fmt_f(v));
        }
        out
    }
}

fn fmt_f(v: f64) -> String {
    format!("{v:.17e}")
}

/// Result of the forward pass: `q̂` for layers `0..L-1` and the preactivation
/// variances `q^l` for layers `1..L`.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOrder {
    pub qhat1: Vec<f64>,
    pub qhat2: Vec<f64>,
    /// `q₁^l` for `l = 1..L`, stored at index `l - 1`.
    pub q1: Vec<f64>,
    /// `q₂^l` for `l = 1..L`, stored at index `l - 1`.
    pub q2: Vec<f64>,
}

fn check_finite(v: f64, context: &'static str, layer: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { context, at: layer as f64 })
    }
}

/// `(∫Du φ(√a u)², I_φ[a, b])`.
fn act_moments(act: &Activation, a: f64, b: f64, rule: &QuadratureRule, src: MomentSource) -> Result<(f64, f64)> {
    if src == MomentSource::ClosedFormWhenAvailable {
        if let (Some(diag), Some(off)) = (act.closed_form_moments(a, a)?, act.closed_form_moments(a, b)?) {
            return Ok((diag.i_phi, off.i_phi));
        }
    }
    let kinks = act.kinks();
    let off = gauss::gauss2d_iphi_panel(|x| act.eval(x), &kinks, a, b, rule)?;
    let diag = if a > 0.0 {
        let scaled: Vec<f64> = kinks.iter().map(|k| k / a.sqrt()).collect();
        gauss::gauss1d_panel(|u| act.eval(a.sqrt() * u).powi(2), &scaled, rule)?
    } else {
        act.eval(0.0).powi(2)
    };
    Ok((diag, off))
}

/// `(∫Du φ'(√a u)², I_φ'[a, b])`.
fn deriv_moments(act: &Activation, a: f64, b: f64, rule: &QuadratureRule, src: MomentSource) -> Result<(f64, f64)> {
    if src == MomentSource::ClosedFormWhenAvailable {
        if let (Some(diag), Some(off)) = (act.closed_form_moments(a, a)?, act.closed_form_moments(a, b)?) {
            return Ok((diag.i_phi_deriv, off.i_phi_deriv));
        }
    }
    let kinks = act.kinks();
    let off = gauss::gauss2d_iphi_panel(|x| act.deriv(x), &kinks, a, b, rule)?;
    let diag = if a > 0.0 {
        let scaled: Vec<f64> = kinks.iter().map(|k| k / a.sqrt()).collect();
        gauss::gauss1d_panel(|u| act.deriv(a.sqrt() * u).powi(2), &scaled, rule)?
    } else {
        act.deriv(0.0).powi(2)
    };
    Ok((diag, off))
}

pub fn forward_recursion(cfg: &NetworkConfig, rule: &QuadratureRule, src: MomentSource) -> Result<ForwardOrder> {
    cfg.validate()?;
    let l_max = cfg.depth;
    let mut fwd = ForwardOrder {
        qhat1: vec![1.0],
        qhat2: vec![0.0],
        q1: Vec::with_capacity(l_max),
        q2: Vec::with_capacity(l_max),
    };
    for l in 1..=l_max {
        let q1 = check_finite(cfg.sigma_w2 * fwd.qhat1[l - 1] + cfg.sigma_b2, "forward recursion", l)?;
        let q2 = check_finite(cfg.sigma_w2 * fwd.qhat2[l - 1] + cfg.sigma_b2, "forward recursion", l)?;
        fwd.q1.push(q1);
        fwd.q2.push(q2);
        if l < l_max {
            let (h1, h2) = act_moments(cfg.activation(l), q1, q2, rule, src)?;
            fwd.qhat1.push(check_finite(h1, "forward recursion", l)?);
            fwd.qhat2.push(check_finite(h2, "forward recursion", l)?);
        }
    }
    Ok(fwd)
}

/// Returns `(q̃₁, q̃₂)` for layers `1..L`.
pub fn backward_recursion(
    cfg: &NetworkConfig,
    fwd: &ForwardOrder,
    rule: &QuadratureRule,
    src: MomentSource,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let l_max = cfg.depth;
    if fwd.q1.len() != l_max {
        return Err(Error::shape("forward order parameters do not match the config depth"));
    }
    let mut t1 = vec![0.0; l_max];
    let mut t2 = vec![0.0; l_max];
    t1[l_max - 1] = 1.0;
    t2[l_max - 1] = 1.0;
    for l in (1..l_max).rev() {
        let (d1, d2) = deriv_moments(cfg.activation(l), fwd.q1[l - 1], fwd.q2[l - 1], rule, src)?;
        t1[l - 1] = check_finite(cfg.sigma_w2 * t1[l] * d1, "backward recursion", l)?;
        t2[l - 1] = check_finite(cfg.sigma_w2 * t2[l] * d2, "backward recursion", l)?;
    }
    Ok((t1, t2))
}

/// Assembles the derived constants from the layerwise order parameters.
pub fn kappas(cfg: &NetworkConfig, qhat1: Vec<f64>, qhat2: Vec<f64>, qtil1: Vec<f64>, qtil2: Vec<f64>) -> OrderParams {
    let alpha = cfg.alpha();
    let alphat = cfg.alpha_tilde();
    let (sw, sb) = (cfg.sigma_w2, cfg.sigma_b2);
    let (mut k1, mut k2, mut k1p, mut k2p, mut kt1, mut kt2) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for l in 1..=cfg.depth {
        let a_prev = cfg.width_ratios[l - 1];
        let (t1, t2) = (qtil1[l - 1], qtil2[l - 1]);
        let (h1, h2) = (qhat1[l - 1], qhat2[l - 1]);
        k1 += a_prev * t1 * h1;
        k2 += a_prev * t2 * h2;
        k1p += sw * t1 * h1 + sb * t1;
        k2p += sw * t2 * h2 + sb * t2;
        kt1 += t1;
        kt2 += t2;
    }
    OrderParams {
        qhat1,
        qhat2,
        qtil1,
        qtil2,
        kappa1: k1 / alpha,
        kappa2: k2 / alpha,
        kappa1p: k1p / alpha,
        kappa2p: k2p / alpha,
        kappat1: sw * kt1 / alphat,
        kappat2: sw * kt2 / alphat,
        alpha,
        alphat,
    }
}

/// Runs both recursions and derives all constants.
pub fn order_params(cfg: &NetworkConfig, rule: &QuadratureRule, src: MomentSource) -> Result<OrderParams> {
    let fwd = forward_recursion(cfg, rule, src)?;
    let (t1, t2) = backward_recursion(cfg, &fwd, rule, src)?;
    Ok(kappas(cfg, fwd.qhat1, fwd.qhat2, t1, t2))
}
