//! Activation functions with weak derivatives.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::gauss::{self, QuadratureRule};

/// Default negative-side slope for `leaky_relu` without an explicit value.
pub const DEFAULT_LEAKY_SLOPE: f64 = 0.2;

const FRAC_2_SQRT_PI: f64 = std::f64::consts::FRAC_2_SQRT_PI;

/// A user-supplied activation. The derivative must be a weak derivative with
/// polynomial growth.
pub trait ActivationFn: Send + Sync + fmt::Debug {
    fn eval(&self, x: f64) -> f64;
    fn deriv(&self, x: f64) -> f64;
    fn name(&self) -> &str;
    /// Points where `eval` or `deriv` is not smooth.
    fn kinks(&self) -> Vec<f64> {
        Vec::new()
    }
}

#[derive(Debug, Clone)]
pub enum Activation {
    Tanh,
    Relu,
    LeakyRelu(f64),
    Identity,
    Erf,
    Custom(Arc<dyn ActivationFn>),
}

/// Closed-form Gaussian moments of an activation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClosedFormMoments {
    /// `I_φ[a, b]`
    pub i_phi: f64,
    /// `I_φ'[a, b]`
    pub i_phi_deriv: f64,
    /// `(∫Du φ(√a u))²`
    pub m1sq: f64,
}

impl Activation {
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu(s) => {
                if x > 0.0 {
                    x
                } else {
                    s * x
                }
            }
            Activation::Identity => x,
            Activation::Erf => libm::erf(x),
            Activation::Custom(f) => f.eval(x),
        }
    }

    /// Weak derivative. Kinks take the left-hand value, so `relu'(0) = 0`.
    pub fn deriv(&self, x: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu(s) => {
                if x > 0.0 {
                    1.0
                } else {
                    *s
                }
            }
            Activation::Identity => 1.0,
            Activation::Erf => FRAC_2_SQRT_PI * (-x * x).exp(),
            Activation::Custom(f) => f.deriv(x),
        }
    }

    /// Points where `φ` or `φ'` is not smooth; integrals are split there.
    pub fn kinks(&self) -> Vec<f64> {
        match self {
            Activation::Relu | Activation::LeakyRelu(_) => vec![0.0],
            Activation::Custom(f) => f.kinks(),
            _ => Vec::new(),
        }
    }

    /// `∫Du φ(u)`.
    pub fn gaussian_mean(&self, rule: &QuadratureRule) -> Result<f64> {
        let inv_sqrt_2pi = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
        Ok(match self {
            Activation::Tanh | Activation::Identity | Activation::Erf => 0.0,
            Activation::Relu => inv_sqrt_2pi,
            Activation::LeakyRelu(s) => (1.0 - s) * inv_sqrt_2pi,
            Activation::Custom(f) => gauss::gauss1d_panel(|u| f.eval(u), &f.kinks(), rule)?,
        })
    }

    /// Whether `∫Du φ(u) ≠ 0`.
    pub fn has_nonzero_gaussian_mean(&self, rule: &QuadratureRule) -> Result<bool> {
        Ok(self.gaussian_mean(rule)?.abs() > 1e-12)
    }

    /// Analytic `I_φ`, `I_φ'` and squared Gaussian mean, when known.
    pub fn closed_form_moments(&self, a: f64, b: f64) -> Result<Option<ClosedFormMoments>> {
        if !(a >= 0.0) {
            return Err(Error::domain(format!("variance must be non-negative, got {a}")));
        }
        let c = if a > 0.0 { (b / a).clamp(-1.0, 1.0) } else { 0.0 };
        Ok(match self {
            Activation::Identity => Some(ClosedFormMoments { i_phi: c * a, i_phi_deriv: 1.0, m1sq: 0.0 }),
            Activation::Relu => {
                let pi = std::f64::consts::PI;
                if a == 0.0 {
                    return Ok(Some(ClosedFormMoments { i_phi: 0.0, i_phi_deriv: 0.0, m1sq: 0.0 }));
                }
                // arc-cosine kernels of degree one and zero
                let theta = c.acos();
                Some(ClosedFormMoments {
                    i_phi: a / (2.0 * pi) * (theta.sin() + (pi - theta) * c),
                    i_phi_deriv: (pi - theta) / (2.0 * pi),
                    m1sq: a / (2.0 * pi),
                })
            }
            _ => None,
        })
    }
}

impl PartialEq for Activation {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (Activation::LeakyRelu(a), Activation::LeakyRelu(b)) => a == b,
            (Activation::Custom(a), Activation::Custom(b)) => Arc::ptr_eq(a, b),
            _ => std::mem::discriminant(self) == std::mem::discriminant(other),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Activation::Tanh => f.write_str("tanh"),
            Activation::Relu => f.write_str("relu"),
            Activation::LeakyRelu(s) => write!(f, "leaky_relu:{s}"),
            Activation::Identity => f.write_str("identity"),
            Activation::Erf => f.write_str("erf"),
            Activation::Custom(c) => write!(f, "custom:{}", c.name()),
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (tag, arg) = match s.split_once(':') {
            Some((t, a)) => (t.trim(), Some(a.trim())),
            None => (s, None),
        };
        let act = match (tag.to_ascii_lowercase().as_str(), arg) {
            ("tanh", None) => Activation::Tanh,
            ("relu", None) => Activation::Relu,
            ("identity" | "linear", None) => Activation::Identity,
            ("erf", None) => Activation::Erf,
            ("leaky_relu", None) => Activation::LeakyRelu(DEFAULT_LEAKY_SLOPE),
            ("leaky_relu", Some(a)) => {
                let slope: f64 = a
                    .parse()
                    .map_err(|_| Error::domain(format!("bad leaky_relu slope {a:?}")))?;
                if !slope.is_finite() {
                    return Err(Error::domain("leaky_relu slope must be finite"));
                }
                Activation::LeakyRelu(slope)
            }
            _ => return Err(Error::domain(format!("unknown activation {s:?}"))),
        };
        Ok(act)
    }
}
