//! Gauss–Hermite integration against the standard Gaussian measure.
//!
//! All integrals here are of the form `∫Du f(u)` with
//! `Du = exp(-u²/2) du / √(2π)`. Rules are generated once with Newton
//! iteration on the orthonormal Hermite recurrence, seeded by the
//! eigenvalues of the Jacobi matrix, and rescaled from the
//! physicists' weight `exp(-x²)` to the probabilists' normalization, so that
//! the weights sum to one.

use crate::error::{Error, Result};

/// Default node count. Odd so that `u = 0` is a node.
pub const DEFAULT_ORDER: usize = 101;

const NEWTON_TOL: f64 = 3e-15;
const NEWTON_MAX_ITER: usize = 100;

/// Nodes and weights of a probabilists' Gauss–Hermite rule.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    nodes: Vec<f64>,
    weights: Vec<f64>,
    // Gauss-Legendre rule of the same order on [-1, 1], used piecewise for
    // integrands with kinks.
    legendre: Vec<(f64, f64)>,
}

impl QuadratureRule {
    /// Builds the `order`-point rule.
    pub fn gauss_hermite(order: usize) -> Result<Self> {
        if order == 0 {
            return Err(Error::domain("quadrature order must be positive"));
        }
        let n = order;
        let mut x = vec![0.0; n];
        let mut w = vec![0.0; n];
        let pim4 = std::f64::consts::PI.powf(-0.25);
        // Initial roots from the eigenvalues of the symmetric Jacobi matrix,
        // then Newton polishing for full precision and accurate weights.
        let jacobi = faer::Mat::from_fn(n, n, |i, j| {
            if i + 1 == j || j + 1 == i {
                (i.max(j) as f64 / 2.0).sqrt()
            } else {
                0.0
            }
        });
        let guesses = jacobi
            .self_adjoint_eigenvalues(faer::Side::Lower)
            .map_err(|e| Error::Eigensolver(format!("Jacobi matrix: {e:?}")))?;
        let half = n.div_ceil(2);
        for i in 0..half {
            // largest roots first
            let mut z = guesses[n - 1 - i];
            let mut pp = 0.0;
            let mut converged = false;
            for _ in 0..NEWTON_MAX_ITER {
                let (p1, dp) = hermite_orthonormal(n, z, pim4);
                pp = dp;
                let z1 = z;
                z = z1 - p1 / pp;
                if (z - z1).abs() <= NEWTON_TOL * z.abs().max(1.0) {
                    converged = true;
                    break;
                }
            }
            if !converged || !z.is_finite() {
                return Err(Error::NonFinite { context: "Gauss-Hermite root search", at: i as f64 });
            }
            x[i] = z;
            x[n - 1 - i] = -z;
            w[i] = 2.0 / (pp * pp);
            w[n - 1 - i] = w[i];
        }
        if n % 2 == 1 {
            x[n / 2] = 0.0;
        }
        let sqrt_pi = std::f64::consts::PI.sqrt();
        let sqrt2 = std::f64::consts::SQRT_2;
        // Roots were found largest-first; store ascending.
        let mut nodes: Vec<f64> = x.iter().rev().map(|v| v * sqrt2).collect();
        let mut weights: Vec<f64> = w.iter().rev().map(|v| v / sqrt_pi).collect();
        // Renormalize the tiny residual so ∫Du 1 = 1 to rounding.
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|v| *v /= total);
        // Enforce exact mirror symmetry.
        for i in 0..n / 2 {
            let j = n - 1 - i;
            let m = 0.5 * (nodes[j] - nodes[i]);
            nodes[i] = -m;
            nodes[j] = m;
            let wm = 0.5 * (weights[i] + weights[j]);
            weights[i] = wm;
            weights[j] = wm;
        }
        Ok(Self { nodes, weights, legendre: gauss_legendre(n)? })
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn order(&self) -> usize {
        self.nodes.len()
    }

    fn pairs(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.nodes.iter().copied().zip(self.weights.iter().copied())
    }
}

impl Default for QuadratureRule {
    fn default() -> Self {
        Self::gauss_hermite(DEFAULT_ORDER).expect("default Gauss-Hermite rule")
    }
}

/// Gauss-Legendre nodes and weights on `[-1, 1]`.
fn gauss_legendre(n: usize) -> Result<Vec<(f64, f64)>> {
    let mut out = vec![(0.0, 0.0); n];
    let nf = n as f64;
    for i in 0..n.div_ceil(2) {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut dp = 0.0;
        let mut converged = false;
        for _ in 0..NEWTON_MAX_ITER {
            let (mut p1, mut p2) = (1.0, 0.0);
            for j in 1..=n {
                let jf = j as f64;
                let p3 = p2;
                p2 = p1;
                p1 = ((2.0 * jf - 1.0) * z * p2 - (jf - 1.0) * p3) / jf;
            }
            dp = nf * (z * p1 - p2) / (z * z - 1.0);
            let z1 = z;
            z = z1 - p1 / dp;
            if (z - z1).abs() <= NEWTON_TOL {
                converged = true;
                break;
            }
        }
        if !converged || !z.is_finite() {
            return Err(Error::NonFinite { context: "Gauss-Legendre root search", at: i as f64 });
        }
        let w = 2.0 / ((1.0 - z * z) * dp * dp);
        out[i] = (-z, w);
        out[n - 1 - i] = (z, w);
    }
    if n % 2 == 1 {
        out[n / 2].0 = 0.0;
    }
    Ok(out)
}

/// Orthonormal Hermite polynomial `p_n(z)` and its derivative, physicists' weight.
fn hermite_orthonormal(n: usize, z: f64, pim4: f64) -> (f64, f64) {
    let mut p1 = pim4;
    let mut p2 = 0.0;
    for j in 1..=n {
        let jf = j as f64;
        let p3 = p2;
        p2 = p1;
        p1 = z * (2.0 / jf).sqrt() * p2 - ((jf - 1.0) / jf).sqrt() * p3;
    }
    (p1, (2.0 * n as f64).sqrt() * p2)
}

/// `∫Du f(u)`.
pub fn gauss1d<F: Fn(f64) -> f64>(f: F, rule: &QuadratureRule) -> Result<f64> {
    let mut acc = 0.0;
    for (x, w) in rule.pairs() {
        let v = f(x);
        if !v.is_finite() {
            return Err(Error::NonFinite { context: "gauss1d integrand", at: x });
        }
        acc += w * v;
    }
    Ok(acc)
}

/// Two-dimensional Gaussian integral
/// `I_φ[a, b] = E[φ(X) φ(Y)]` for centered `(X, Y)` with variances `a` and
/// covariance `b`.
///
/// The correlation `b / a` is clamped into `[-1, 1]`, and `I_φ[0, 0] = φ(0)²`.
pub fn gauss2d_iphi<F: Fn(f64) -> f64>(phi: F, a: f64, b: f64, rule: &QuadratureRule) -> Result<f64> {
    if !(a >= 0.0) {
        return Err(Error::domain(format!("I_phi variance must be non-negative, got {a}")));
    }
    if !b.is_finite() {
        return Err(Error::NonFinite { context: "I_phi covariance", at: b });
    }
    if a == 0.0 {
        let v = phi(0.0);
        return finite(v * v, "I_phi at zero variance", 0.0);
    }
    let c = (b / a).clamp(-1.0, 1.0);
    let value = if c >= 0.0 {
        // ∫Dy (∫Dx φ(√(a−b) x + √b y))²
        let b = c * a;
        let s_ind = (a - b).max(0.0).sqrt();
        let s_com = b.sqrt();
        let mut outer = 0.0;
        for (y, wy) in rule.pairs() {
            let shift = s_com * y;
            let mut inner = 0.0;
            for (x, wx) in rule.pairs() {
                inner += wx * phi(s_ind * x + shift);
            }
            outer += wy * inner * inner;
        }
        outer
    } else {
        // Direct form with the Cholesky substitution (x, c x + √(1−c²) y).
        let sa = a.sqrt();
        let sc = (1.0 - c * c).max(0.0).sqrt();
        let mut acc = 0.0;
        for (x, wx) in rule.pairs() {
            let px = phi(sa * x);
            let mut inner = 0.0;
            for (y, wy) in rule.pairs() {
                inner += wy * phi(sa * (c * x + sc * y));
            }
            acc += wx * px * inner;
        }
        acc
    };
    finite(value, "I_phi", b)
}

/// Truncation of the real line for panel integration; the Gaussian mass
/// beyond it is below 1e-40.
const TAIL: f64 = 13.5;
/// Width of the fixed panels.
const PANEL: f64 = 3.0;

/// `∫Du f(u)` over `[-TAIL, TAIL]`, split into fixed panels and at `breaks`,
/// each piece integrated with the Legendre rule.
fn piecewise<F: FnMut(f64) -> f64>(mut f: F, breaks: &mut Vec<f64>, rule: &QuadratureRule) -> Result<f64> {
    breaks.retain(|b| b.is_finite() && b.abs() < TAIL);
    let panels = (2.0 * TAIL / PANEL).round() as usize;
    breaks.extend((1..panels).map(|i| -TAIL + PANEL * i as f64));
    breaks.sort_by(f64::total_cmp);
    breaks.dedup();
    let norm = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
    let mut acc = 0.0;
    let mut lo = -TAIL;
    for hi in breaks.iter().copied().chain(std::iter::once(TAIL)) {
        let (mid, half) = (0.5 * (hi + lo), 0.5 * (hi - lo));
        if half > 0.0 {
            for &(t, w) in &rule.legendre {
                let u = mid + half * t;
                let v = f(u);
                if !v.is_finite() {
                    return Err(Error::NonFinite { context: "piecewise integrand", at: u });
                }
                acc += half * w * v * (-0.5 * u * u).exp() * norm;
            }
        }
        lo = hi;
    }
    Ok(acc)
}

/// `∫Du f(u)` by composite Legendre panels, with extra breaks at `kinks`
/// where `f` may have a kink or a jump. Unlike [`gauss1d`] this stays
/// accurate for steep or piecewise-smooth integrands.
pub fn gauss1d_panel<F: Fn(f64) -> f64>(f: F, kinks: &[f64], rule: &QuadratureRule) -> Result<f64> {
    piecewise(f, &mut kinks.to_vec(), rule)
}

/// [`gauss2d_iphi`] by composite Legendre panels, for a `φ` that is smooth
/// except at the points `kinks`. Every one-dimensional integral is split
/// where its integrand is not smooth, so piecewise-linear activations
/// integrate to near machine precision.
pub fn gauss2d_iphi_panel<F: Fn(f64) -> f64>(
    phi: F,
    kinks: &[f64],
    a: f64,
    b: f64,
    rule: &QuadratureRule,
) -> Result<f64> {
    if !(a >= 0.0) {
        return Err(Error::domain(format!("I_phi variance must be non-negative, got {a}")));
    }
    if !b.is_finite() {
        return Err(Error::NonFinite { context: "I_phi covariance", at: b });
    }
    if a == 0.0 {
        let v = phi(0.0);
        return finite(v * v, "I_phi at zero variance", 0.0);
    }
    let c = (b / a).clamp(-1.0, 1.0);
    let value = if c >= 0.0 {
        let b = c * a;
        let s_ind = (a - b).max(0.0).sqrt();
        let s_com = b.sqrt();
        let inner = |y: f64| -> Result<f64> {
            let shift = s_com * y;
            if s_ind == 0.0 {
                return Ok(phi(shift));
            }
            let mut br: Vec<f64> = kinks.iter().map(|k| (k - shift) / s_ind).collect();
            piecewise(|x| phi(s_ind * x + shift), &mut br, rule)
        };
        if s_com == 0.0 {
            inner(0.0)?.powi(2)
        } else {
            let mut br: Vec<f64> = kinks.iter().map(|k| k / s_com).collect();
            let mut err = None;
            let v = piecewise(
                |y| match inner(y) {
                    Ok(v) => v * v,
                    Err(e) => {
                        err.get_or_insert(e);
                        0.0
                    }
                },
                &mut br,
                rule,
            )?;
            if let Some(e) = err {
                return Err(e);
            }
            v
        }
    } else {
        let sa = a.sqrt();
        let sc = (1.0 - c * c).max(0.0).sqrt();
        let mut br: Vec<f64> = kinks.iter().flat_map(|k| [k / sa, k / (sa * c)]).collect();
        let mut err = None;
        let v = piecewise(
            |x| {
                let inner = if sc == 0.0 {
                    Ok(phi(sa * c * x))
                } else {
                    let mut ib: Vec<f64> = kinks.iter().map(|k| (k / sa - c * x) / sc).collect();
                    piecewise(|y| phi(sa * (c * x + sc * y)), &mut ib, rule)
                };
                match inner {
                    Ok(v) => phi(sa * x) * v,
                    Err(e) => {
                        err.get_or_insert(e);
                        0.0
                    }
                }
            },
            &mut br,
            rule,
        )?;
        if let Some(e) = err {
            return Err(e);
        }
        v
    };
    finite(value, "I_phi", b)
}

fn finite(v: f64, context: &'static str, at: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { context, at })
    }
}
