//! Asymptotic eigenvalue statistics for every Gram kind.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::meanfield::{NetworkConfig, OrderParams};

/// Which metric tensor (or block of one) a spectrum belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GramKind {
    FimMse,
    /// Diagonal block of layer `l` in `1..=L`.
    FimMseBlock(usize),
    FimCross,
    FimCrossBlock(usize),
    Ntk,
    NtkMeanSub,
    FimMseMeanSub,
    /// Input/feature metric. `per_output` selects a single `A_k` instead of
    /// the sum over outputs.
    MetricA { per_output: bool },
    /// Diagonal block of feature layer `layer` in `0..L`.
    MetricABlock { layer: usize, per_output: bool },
}

impl GramKind {
    pub fn is_mean_subtracted(self) -> bool {
        matches!(self, GramKind::NtkMeanSub | GramKind::FimMseMeanSub)
    }

    pub fn is_cross(self) -> bool {
        matches!(self, GramKind::FimCross | GramKind::FimCrossBlock(_))
    }

    pub fn is_metric_a(self) -> bool {
        matches!(self, GramKind::MetricA { .. } | GramKind::MetricABlock { .. })
    }

    /// Checks block indices against the network depth.
    pub fn validate(self, depth: usize) -> Result<()> {
        match self {
            GramKind::FimMseBlock(l) | GramKind::FimCrossBlock(l) if !(1..=depth).contains(&l) => {
                Err(Error::domain(format!("parameter block {l} outside 1..={depth}")))
            }
            GramKind::MetricABlock { layer, .. } if layer >= depth => {
                Err(Error::domain(format!("feature block {layer} outside 0..{depth}")))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for GramKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GramKind::FimMse => f.write_str("fim_mse"),
            GramKind::FimMseBlock(l) => write!(f, "fim_mse_block:{l}"),
            GramKind::FimCross => f.write_str("fim_cross"),
            GramKind::FimCrossBlock(l) => write!(f, "fim_cross_block:{l}"),
            GramKind::Ntk => f.write_str("ntk"),
            GramKind::NtkMeanSub => f.write_str("ntk_mean_sub"),
            GramKind::FimMseMeanSub => f.write_str("fim_mse_mean_sub"),
            GramKind::MetricA { per_output: false } => f.write_str("metric_a"),
            GramKind::MetricA { per_output: true } => f.write_str("metric_a_k"),
            GramKind::MetricABlock { layer, per_output: false } => write!(f, "metric_a_block:{layer}"),
            GramKind::MetricABlock { layer, per_output: true } => write!(f, "metric_a_k_block:{layer}"),
        }
    }
}

impl FromStr for GramKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (tag, arg) = match s.split_once(':') {
            Some((t, a)) => (t, Some(a)),
            None => (s, None),
        };
        let idx = || -> Result<usize> {
            arg.ok_or_else(|| Error::domain(format!("{tag} needs a layer index, e.g. {tag}:1")))?
                .trim()
                .parse()
                .map_err(|_| Error::domain(format!("bad layer index in {s:?}")))
        };
        Ok(match (tag, arg.is_some()) {
            ("fim_mse", false) => GramKind::FimMse,
            ("fim_cross", false) => GramKind::FimCross,
            ("ntk", false) => GramKind::Ntk,
            ("ntk_mean_sub", false) => GramKind::NtkMeanSub,
            ("fim_mse_mean_sub", false) => GramKind::FimMseMeanSub,
            ("metric_a", false) => GramKind::MetricA { per_output: false },
            ("metric_a_k", false) => GramKind::MetricA { per_output: true },
            ("fim_mse_block", _) => GramKind::FimMseBlock(idx()?),
            ("fim_cross_block", _) => GramKind::FimCrossBlock(idx()?),
            ("metric_a_block", _) => GramKind::MetricABlock { layer: idx()?, per_output: false },
            ("metric_a_k_block", _) => GramKind::MetricABlock { layer: idx()?, per_output: true },
            _ => return Err(Error::domain(format!("unknown gram kind {s:?}"))),
        })
    }
}

/// Predicted mean, second moment and largest eigenvalue of a spectrum.
#[derive(Debug, Clone, PartialEq)]
pub struct EigStatsPrediction {
    pub kind: GramKind,
    pub mean: Option<f64>,
    pub second_moment: Option<f64>,
    pub lambda_max_point: Option<f64>,
    pub lambda_max_lower: Option<f64>,
    pub lambda_max_upper: Option<f64>,
    /// Number of eigenvalues expected to separate from the bulk.
    pub outlier_count: usize,
    pub note: Option<String>,
}

/// Flat serializable form of a prediction.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PredictionRecord {
    pub kind: String,
    pub mean: Option<f64>,
    pub second_moment: Option<f64>,
    pub lambda_max: Option<f64>,
    pub bounds: Option<[f64; 2]>,
    pub outlier_count: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl EigStatsPrediction {
    fn point(kind: GramKind, mean: f64, s: f64, lmax: f64, outliers: usize) -> Self {
        EigStatsPrediction {
            kind,
            mean: Some(mean),
            second_moment: Some(s),
            lambda_max_point: Some(lmax),
            lambda_max_lower: None,
            lambda_max_upper: None,
            outlier_count: outliers,
            note: None,
        }
    }

    /// Point value if available, otherwise the upper bound.
    pub fn lambda_max(&self) -> Option<f64> {
        self.lambda_max_point.or(self.lambda_max_upper)
    }

    /// `(lower, upper)` for reporting: a point prediction gives a degenerate interval.
    pub fn lambda_max_range(&self) -> Option<(f64, f64)> {
        match (self.lambda_max_point, self.lambda_max_lower, self.lambda_max_upper) {
            (Some(p), _, _) => Some((p, p)),
            (None, Some(lo), Some(hi)) => Some((lo, hi)),
            _ => None,
        }
    }

    pub fn record(&self) -> PredictionRecord {
        PredictionRecord {
            kind: self.kind.to_string(),
            mean: self.mean,
            second_moment: self.second_moment,
            lambda_max: self.lambda_max_point,
            bounds: match (self.lambda_max_lower, self.lambda_max_upper) {
                (Some(lo), Some(hi)) => Some([lo, hi]),
                _ => None,
            },
            outlier_count: self.outlier_count,
            note: self.note.clone(),
        }
    }
}

/// Softmax-dependent coefficients of the cross-entropy FIM.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoftmaxCoeffs {
    pub beta1: f64,
    pub beta2: f64,
    pub beta3: f64,
    pub beta4: f64,
}

impl SoftmaxCoeffs {
    /// `g` is column-major with `c` rows and `n` columns: `g[k + c * n]`.
    pub fn from_softmax(g: &[f64], c: usize, n: usize) -> Result<Self> {
        check_simplex(g, c, n)?;
        let col = |i: usize| &g[i * c..(i + 1) * c];
        let nf = n as f64;
        let sq: Vec<f64> = (0..n).map(|i| col(i).iter().map(|v| v * v).sum()).collect();

        let beta1 = 1.0 - sq.iter().sum::<f64>() / nf;

        // Σ_{n≠m} <Q_n, Q_m>, with <Q_n, Q_m> = Σg_n g_m − Σg_n g_m² − Σg_n² g_m + (g_n·g_m)².
        let mut b2 = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let (gi, gj) = (col(i), col(j));
                let dot: f64 = gi.iter().zip(gj).map(|(a, b)| a * b).sum();
                let cross: f64 = gi.iter().zip(gj).map(|(a, b)| a * b * b + a * a * b).sum();
                b2 += dot - cross + dot * dot;
            }
        }
        let beta2 = b2 / (nf * nf);

        let beta3 = (0..n)
            .map(|i| {
                let s: f64 = col(i).iter().map(|v| (1.0 - 2.0 * v) * v * v).sum();
                s + sq[i] * sq[i]
            })
            .sum::<f64>()
            / nf;

        let beta4 = (0..c)
            .map(|k| (0..n).map(|i| col(i)[k] * (1.0 - col(i)[k])).sum::<f64>() / nf)
            .fold(0.0, f64::max);

        Ok(SoftmaxCoeffs { beta1, beta2, beta3, beta4 })
    }
}

pub(crate) fn check_simplex(g: &[f64], c: usize, n: usize) -> Result<()> {
    if g.len() != c * n {
        return Err(Error::shape(format!("softmax array has {} entries, expected {}x{}", g.len(), c, n)));
    }
    for i in 0..n {
        let column = &g[i * c..(i + 1) * c];
        if column.iter().any(|v| !(-1e-12..=1.0 + 1e-12).contains(v)) {
            return Err(Error::domain(format!("softmax column {i} has entries outside [0, 1]")));
        }
        let s: f64 = column.iter().sum();
        if (s - 1.0).abs() > 1e-8 {
            return Err(Error::domain(format!("softmax column {i} sums to {s}")));
        }
    }
    Ok(())
}

fn ratio(n: usize) -> (f64, f64) {
    let nf = n as f64;
    ((nf - 1.0) / nf, 1.0 / nf)
}

/// `α_l`, with `α_L = C/M` for the output layer.
fn block_ratio(cfg: &NetworkConfig, l: usize) -> f64 {
    if l == cfg.depth {
        cfg.outputs as f64 / cfg.width as f64
    } else {
        cfg.width_ratios[l]
    }
}

pub fn predict_fim_mse(op: &OrderParams, cfg: &NetworkConfig, n: usize) -> EigStatsPrediction {
    let (c, m) = (cfg.outputs as f64, cfg.width as f64);
    let (r, inv) = ratio(n);
    let (k1, k2, a) = (op.kappa1, op.kappa2, op.alpha);
    EigStatsPrediction::point(
        GramKind::FimMse,
        k1 * c / m,
        a * c * (r * k2 * k2 + k1 * k1 * inv),
        a * m * (r * k2 + k1 * inv),
        cfg.outputs,
    )
}

/// Diagonal block `F^{ll}` for `1 <= l <= L`.
pub fn predict_fim_block(op: &OrderParams, cfg: &NetworkConfig, n: usize, l: usize) -> Result<EigStatsPrediction> {
    GramKind::FimMseBlock(l).validate(cfg.depth)?;
    let (c, m) = (cfg.outputs as f64, cfg.width as f64);
    let (r, inv) = ratio(n);
    let (a_l, a_prev) = (block_ratio(cfg, l), cfg.width_ratios[l - 1]);
    let (t1, t2) = op.qtil(l);
    let (h1, h2) = op.qhat(l - 1);
    let (d, o) = (t1 * h1, t2 * h2);
    Ok(EigStatsPrediction::point(
        GramKind::FimMseBlock(l),
        d / a_l * c / m,
        a_prev / a_l * (r * o * o + d * d * inv) * c,
        a_prev * (r * o + d * inv) * m,
        cfg.outputs,
    ))
}

pub fn predict_fim_cross(op: &OrderParams, cfg: &NetworkConfig, n: usize, b: &SoftmaxCoeffs) -> EigStatsPrediction {
    let m = cfg.width as f64;
    let (r, inv) = ratio(n);
    let (k1, k2, a) = (op.kappa1, op.kappa2, op.alpha);
    let s = a * (b.beta2 * k2 * k2 + b.beta3 * k1 * k1 * inv);
    EigStatsPrediction {
        kind: GramKind::FimCross,
        mean: Some(b.beta1 * k1 / m),
        second_moment: Some(s),
        lambda_max_point: None,
        lambda_max_lower: Some(b.beta4 * a * m * (r * k2 + k1 * inv)),
        lambda_max_upper: Some((a * s).sqrt() * m),
        outlier_count: cfg.outputs,
        note: None,
    }
}

/// Cross-entropy analogue of the diagonal block `F^{ll}`, obtained from the
/// block's order parameters exactly as the full-matrix statistics are
/// obtained from `κ₁, κ₂`.
pub fn predict_fim_cross_block(
    op: &OrderParams,
    cfg: &NetworkConfig,
    n: usize,
    l: usize,
    b: &SoftmaxCoeffs,
) -> Result<EigStatsPrediction> {
    GramKind::FimCrossBlock(l).validate(cfg.depth)?;
    let m = cfg.width as f64;
    let (r, inv) = ratio(n);
    let (a_l, a_prev) = (block_ratio(cfg, l), cfg.width_ratios[l - 1]);
    let (t1, t2) = op.qtil(l);
    let (h1, h2) = op.qhat(l - 1);
    let (d, o) = (t1 * h1, t2 * h2);
    let s = a_prev / a_l * (b.beta2 * o * o + b.beta3 * d * d * inv);
    Ok(EigStatsPrediction {
        kind: GramKind::FimCrossBlock(l),
        mean: Some(b.beta1 * d / (a_l * m)),
        second_moment: Some(s),
        lambda_max_point: None,
        lambda_max_lower: Some(b.beta4 * a_prev * (r * o + d * inv) * m),
        lambda_max_upper: Some((s * a_l * a_prev).sqrt() * m),
        outlier_count: cfg.outputs,
        note: None,
    })
}

/// NTK statistics under the NTK parameterization; independent of `M`.
pub fn predict_ntk(op: &OrderParams, cfg: &NetworkConfig, n: usize) -> EigStatsPrediction {
    let (c, nf) = (cfg.outputs as f64, n as f64);
    let (k1, k2, a) = (op.kappa1p, op.kappa2p, op.alpha);
    EigStatsPrediction::point(
        GramKind::Ntk,
        a * k1 * c,
        a * a * c * ((nf - 1.0) * k2 * k2 + k1 * k1),
        a * ((nf - 1.0) * k2 + k1),
        cfg.outputs,
    )
}

fn qualitative(kind: GramKind) -> EigStatsPrediction {
    EigStatsPrediction {
        kind,
        mean: None,
        second_moment: None,
        lambda_max_point: None,
        lambda_max_lower: None,
        lambda_max_upper: None,
        outlier_count: 0,
        note: Some("O(1), no closed form".to_string()),
    }
}

/// Statistics of `A_k` or, with `per_output = false`, of `A = Σ_k A_k`.
pub fn predict_metric_a(op: &OrderParams, cfg: &NetworkConfig, n: usize, per_output: bool) -> EigStatsPrediction {
    let m = cfg.width as f64;
    let (r, inv) = ratio(n);
    let (k1, k2, at) = (op.kappat1, op.kappat2, op.alphat);
    let scale = if per_output { 1.0 } else { cfg.outputs as f64 };
    EigStatsPrediction::point(
        GramKind::MetricA { per_output },
        scale * k1 / m,
        scale * at / m * (r * k2 * k2 + k1 * k1 * inv),
        at * (r * k2 + k1 * inv),
        if per_output { 1 } else { cfg.outputs },
    )
}

/// Diagonal block `A^{ll}` for `0 <= l < L`.
pub fn predict_metric_a_block(
    op: &OrderParams,
    cfg: &NetworkConfig,
    n: usize,
    l: usize,
    per_output: bool,
) -> Result<EigStatsPrediction> {
    let kind = GramKind::MetricABlock { layer: l, per_output };
    kind.validate(cfg.depth)?;
    let m_l = cfg.layer_width(l) as f64;
    let (r, inv) = ratio(n);
    let sw = cfg.sigma_w2;
    let (t1, t2) = op.qtil(l + 1);
    let scale = if per_output { 1.0 } else { cfg.outputs as f64 };
    Ok(EigStatsPrediction::point(
        kind,
        scale * sw * t1 / m_l,
        scale * sw * sw * (r * t2 * t2 + t1 * t1 * inv) / m_l,
        sw * (r * t2 + t1 * inv),
        if per_output { 1 } else { cfg.outputs },
    ))
}

/// Largest stable learning rate `2 / λ_max` for gradient descent.
pub fn critical_learning_rate(pred: &EigStatsPrediction) -> Result<f64> {
    let lmax = pred
        .lambda_max()
        .ok_or_else(|| Error::domain(format!("{} has no largest-eigenvalue prediction", pred.kind)))?;
    if !(lmax > 0.0) {
        return Err(Error::domain(format!("largest eigenvalue must be positive, got {lmax}")));
    }
    Ok(2.0 / lmax)
}

/// Dispatches to the prediction for `kind`. Cross-entropy kinds need softmax coefficients.
pub fn predict(
    kind: GramKind,
    op: &OrderParams,
    cfg: &NetworkConfig,
    n: usize,
    coeffs: Option<&SoftmaxCoeffs>,
) -> Result<EigStatsPrediction> {
    kind.validate(cfg.depth)?;
    let need = || coeffs.ok_or_else(|| Error::domain(format!("{kind} needs softmax coefficients")));
    Ok(match kind {
        GramKind::FimMse => predict_fim_mse(op, cfg, n),
        GramKind::FimMseBlock(l) => predict_fim_block(op, cfg, n, l)?,
        GramKind::FimCross => predict_fim_cross(op, cfg, n, need()?),
        GramKind::FimCrossBlock(l) => predict_fim_cross_block(op, cfg, n, l, need()?)?,
        GramKind::Ntk => predict_ntk(op, cfg, n),
        GramKind::NtkMeanSub | GramKind::FimMseMeanSub => qualitative(kind),
        GramKind::MetricA { per_output } => predict_metric_a(op, cfg, n, per_output),
        GramKind::MetricABlock { layer, per_output } => predict_metric_a_block(op, cfg, n, layer, per_output)?,
    })
}
