//! Dual Gram matrices, their spectra and ensemble statistics.
//!
//! Every metric tensor here is `R Rᵀ` (possibly with a weighting between the
//! factors) for a tall `P × CN` matrix `R` of per-sample gradients. The dual
//! `Rᵀ R` shares its nonzero eigenvalues and is assembled layer by layer from
//! backward signals and activations, so `R` itself is never formed.
//!
//! Dual rows and columns are indexed output-major: index `k * N + n` refers
//! to output `k` and sample `n`.

use std::fmt::Write as _;

use faer::Mat;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gauss::QuadratureRule;
use crate::lanczos;
use crate::linalg;
use crate::meanfield::{order_params, MomentSource, NetworkConfig, OrderParams};
use crate::network::{sample_inputs, NetworkInstance, Parameterization, SignalPack};
use crate::theory::{self, check_simplex, EigStatsPrediction, GramKind, SoftmaxCoeffs};

/// Whether a Gram matrix is the dual `RᵀR` or the primal `RRᵀ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GramSpace {
    Dual,
    Primal,
}

#[derive(Debug, Clone)]
pub struct DualGram {
    pub kind: GramKind,
    pub matrix: Mat<f64>,
    pub n_samples: usize,
    pub outputs: usize,
    pub space: GramSpace,
    /// Sum of squared gradient norms gathered independently of the matrix
    /// product; equals the trace up to rounding.
    pub trace_accumulated: f64,
}

impl DualGram {
    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn trace(&self) -> f64 {
        linalg::trace(self.matrix.as_ref())
    }

    /// Number of output blocks along each axis of a dual matrix.
    fn blocks(&self) -> usize {
        self.dim() / self.n_samples
    }
}

fn check_pack(pack: &SignalPack, net: &NetworkInstance) -> Result<()> {
    let cfg = net.config();
    if pack.delta.len() != cfg.depth || pack.h.len() != cfg.depth || pack.outputs() != cfg.outputs {
        return Err(Error::shape("signal pack does not match the network"));
    }
    Ok(())
}

/// `G_l ∘ (w·HᵀH + b)` for layer `l`, where `G_l = δ^lᵀδ^l` and the
/// `N × N` feature Gram is tiled over output blocks. Also returns the sum of
/// the diagonal computed directly from column norms.
fn layer_term(pack: &SignalPack, l: usize, w: f64, b: f64) -> (Mat<f64>, f64) {
    let d = &pack.delta[l - 1];
    let h = &pack.h[l - 1];
    let n = pack.n_samples();
    let mut g = linalg::mul_tn(d.as_ref(), d.as_ref());
    let hh = linalg::mul_tn(h.as_ref(), h.as_ref());
    let cn = g.nrows();
    for j in 0..cn {
        let col = g.col_as_slice_mut(j);
        let hcol = hh.col_as_slice(j % n);
        for (i, v) in col.iter_mut().enumerate() {
            *v *= w * hcol[i % n] + b;
        }
    }
    let mut diag = 0.0;
    for j in 0..cn {
        let dn: f64 = d.col_as_slice(j).iter().map(|x| x * x).sum();
        let hn: f64 = h.col_as_slice(j % n).iter().map(|x| x * x).sum();
        diag += dn * (w * hn + b);
    }
    (g, diag)
}

fn accumulate_layers<I: IntoIterator<Item = (usize, f64, f64)>>(pack: &SignalPack, terms: I, scale: f64) -> (Mat<f64>, f64) {
    let cn = pack.outputs() * pack.n_samples();
    let mut out = Mat::zeros(cn, cn);
    let mut tr = 0.0;
    for (l, w, b) in terms {
        let (g, d) = layer_term(pack, l, w, b);
        for j in 0..cn {
            out.col_as_slice_mut(j).iter_mut().zip(g.col_as_slice(j)).for_each(|(o, v)| *o += scale * v);
        }
        tr += scale * d;
    }
    linalg::symmetrize(&mut out);
    (out, tr)
}

/// `F*` for the squared loss: gradients with respect to weights and biases
/// of the standard parameterization, normalized by `1/N`.
pub fn build_dual_fim(pack: &SignalPack, net: &NetworkInstance) -> Result<DualGram> {
    check_pack(pack, net)?;
    let depth = net.config().depth;
    let n = pack.n_samples();
    let (matrix, tr) = accumulate_layers(pack, (1..=depth).map(|l| (l, 1.0, 1.0)), 1.0 / n as f64);
    Ok(DualGram {
        kind: GramKind::FimMse,
        matrix,
        n_samples: n,
        outputs: pack.outputs(),
        space: GramSpace::Dual,
        trace_accumulated: tr,
    })
}

/// Dual of the diagonal block `F^{ll}`, `1 <= l <= L`.
pub fn build_dual_block(pack: &SignalPack, net: &NetworkInstance, l: usize) -> Result<DualGram> {
    check_pack(pack, net)?;
    GramKind::FimMseBlock(l).validate(net.config().depth)?;
    let n = pack.n_samples();
    let (matrix, tr) = accumulate_layers(pack, [(l, 1.0, 1.0)], 1.0 / n as f64);
    Ok(DualGram {
        kind: GramKind::FimMseBlock(l),
        matrix,
        n_samples: n,
        outputs: pack.outputs(),
        space: GramSpace::Dual,
        trace_accumulated: tr,
    })
}

/// Orthonormal basis of the complement of the all-ones vector in `R^c`
/// (Helmert contrasts), as `c × (c−1)`.
fn helmert(c: usize) -> Mat<f64> {
    Mat::from_fn(c, c.saturating_sub(1), |i, j| {
        let m = (j + 1) as f64;
        let norm = (m * (m + 1.0)).sqrt();
        if i <= j {
            1.0 / norm
        } else if i == j + 1 {
            -m / norm
        } else {
            0.0
        }
    })
}

/// `Q_n^{1/2}` for every sample, each `C × C` and stored row-major.
///
/// `Q_n` annihilates the all-ones vector exactly, so the root is taken on the
/// complement: `Q^{1/2} = B (BᵀQB)^{1/2} Bᵀ`. This keeps rounding noise in
/// the null direction from being amplified by the square root.
fn softmax_q_sqrt(g: &Mat<f64>) -> Result<Vec<Vec<f64>>> {
    let (c, n) = (g.nrows(), g.ncols());
    let flat = crate::network::mat_to_col_major(g);
    check_simplex(&flat, c, n)?;
    let b = helmert(c);
    (0..n)
        .map(|s| {
            let mut out = vec![0.0; c * c];
            if c < 2 {
                return Ok(out);
            }
            let col = g.col_as_slice(s);
            let q = Mat::from_fn(c, c, |i, j| if i == j { col[i] - col[i] * col[j] } else { -col[i] * col[j] });
            let qb = linalg::mul(q.as_ref(), b.as_ref());
            let reduced = linalg::mul_tn(b.as_ref(), qb.as_ref());
            let (vals, vecs) = linalg::sym_eigen(reduced.as_ref())?;
            let roots: Vec<f64> = vals.iter().map(|v| v.max(0.0).sqrt()).collect();
            let r = c - 1;
            let half = Mat::from_fn(r, r, |i, j| (0..r).map(|t| vecs[(i, t)] * roots[t] * vecs[(j, t)]).sum());
            let full = linalg::mul(linalg::mul(b.as_ref(), half.as_ref()).as_ref(), b.transpose());
            for i in 0..c {
                for j in 0..c {
                    out[i * c + j] = 0.5 * (full[(i, j)] + full[(j, i)]);
                }
            }
            Ok(out)
        })
        .collect()
}

/// Converts an MSE dual into the cross-entropy dual `Q^{1/2} F* Q^{1/2}`,
/// which has the eigenvalues of `Q F*`. `g` is the `C × N` softmax output.
pub fn apply_softmax_q(dual: &DualGram, g: &Mat<f64>) -> Result<DualGram> {
    let kind = match dual.kind {
        GramKind::FimMse => GramKind::FimCross,
        GramKind::FimMseBlock(l) => GramKind::FimCrossBlock(l),
        other => return Err(Error::domain(format!("softmax weighting applies to MSE FIM duals, not {other}"))),
    };
    let (c, n) = (dual.outputs, dual.n_samples);
    if g.nrows() != c || g.ncols() != n {
        return Err(Error::shape(format!("softmax array must be {c}x{n}")));
    }
    let roots = softmax_q_sqrt(g)?;
    let cn = c * n;
    let apply_left = |m: &Mat<f64>| {
        Mat::from_fn(cn, cn, |row, col| {
            let (k, s) = (row / n, row % n);
            let r = &roots[s][k * c..(k + 1) * c];
            (0..c).map(|kk| r[kk] * m[(kk * n + s, col)]).sum()
        })
    };
    let left = apply_left(&dual.matrix);
    // S F S = S (S F)ᵀ because both S and F are symmetric.
    let mut matrix = apply_left(&left.transpose().to_owned());
    linalg::symmetrize(&mut matrix);
    let trace_accumulated = linalg::trace(matrix.as_ref());
    Ok(DualGram { kind, matrix, n_samples: n, outputs: c, space: GramSpace::Dual, trace_accumulated })
}

/// NTK `Θ = ∇fᵀ∇f` with gradients in the NTK parameterization. A network
/// built in the standard parameterization is only accepted with
/// `allow_rescale`, in which case its gradients are rescaled accordingly.
pub fn build_dual_ntk(pack: &SignalPack, net: &NetworkInstance, allow_rescale: bool) -> Result<DualGram> {
    if net.parameterization() == Parameterization::Standard && !allow_rescale {
        return Err(Error::Parameterization(
            "the NTK needs an NTK-parameterized network or explicit rescaling".into(),
        ));
    }
    tangent_kernel(pack, net, Parameterization::Ntk)
}

/// `∇fᵀ∇f` in the network's own parameterization. For the standard
/// parameterization this is `N F*`.
pub fn build_tangent_kernel(pack: &SignalPack, net: &NetworkInstance) -> Result<DualGram> {
    tangent_kernel(pack, net, net.parameterization())
}

fn tangent_kernel(pack: &SignalPack, net: &NetworkInstance, param: Parameterization) -> Result<DualGram> {
    check_pack(pack, net)?;
    let cfg = net.config();
    let bs = param.bias_grad_scale(cfg).powi(2);
    let terms = (1..=cfg.depth).map(|l| (l, param.weight_grad_scale(cfg, l).powi(2), bs));
    let (matrix, tr) = accumulate_layers(pack, terms, 1.0);
    Ok(DualGram {
        kind: GramKind::Ntk,
        matrix,
        n_samples: pack.n_samples(),
        outputs: pack.outputs(),
        space: GramSpace::Dual,
        trace_accumulated: tr,
    })
}

/// Input-gradient factors `V_l = W^{l+1}ᵀ δ^{l+1}` restricted to output `k`
/// when given; column `j` is `∇_{h^l} f_k(n)`.
fn feature_grads(pack: &SignalPack, net: &NetworkInstance, l: usize, k: Option<usize>) -> Mat<f64> {
    let d = &pack.delta[l];
    let w = net.weight(l + 1);
    match k {
        Some(k) => {
            let n = pack.n_samples();
            linalg::mul_tn(w.as_ref(), d.as_ref().subcols(k * n, n))
        }
        None => linalg::mul_tn(w.as_ref(), d.as_ref()),
    }
}

fn metric_a(pack: &SignalPack, net: &NetworkInstance, layers: &[usize], k: Option<usize>, kind: GramKind) -> Result<DualGram> {
    check_pack(pack, net)?;
    let c = net.config().outputs;
    if let Some(k) = k {
        if k >= c {
            return Err(Error::domain(format!("output index {k} outside 0..{c}")));
        }
    }
    let n = pack.n_samples();
    let cols = if k.is_some() { n } else { c * n };
    let rows: usize = layers.iter().map(|&l| net.config().layer_width(l)).sum();
    let factors: Vec<Mat<f64>> = layers.iter().map(|&l| feature_grads(pack, net, l, k)).collect();
    let scale = 1.0 / n as f64;
    let tr: f64 = factors.iter().map(|v| linalg::frobenius_sq(v.as_ref())).sum::<f64>() * scale;

    let (mut matrix, space) = if cols <= rows {
        let mut m = Mat::zeros(cols, cols);
        for v in &factors {
            linalg::add_gram(&mut m, v.as_ref(), scale);
        }
        (m, GramSpace::Dual)
    } else {
        // Fewer stacked features than gradient columns: the primal is smaller.
        let mut stacked = Mat::zeros(rows, cols);
        let mut r0 = 0;
        for v in &factors {
            stacked.as_mut().subrows_mut(r0, v.nrows()).copy_from(v.as_ref());
            r0 += v.nrows();
        }
        let mut m = Mat::zeros(rows, rows);
        linalg::add_gram(&mut m, stacked.transpose(), scale);
        (m, GramSpace::Primal)
    };
    linalg::symmetrize(&mut matrix);
    Ok(DualGram { kind, matrix, n_samples: n, outputs: if k.is_some() { 1 } else { c }, space, trace_accumulated: tr })
}

/// Gram of input and feature gradients over layers `0..L`: `A_k` when `k`
/// is given, otherwise `A = Σ_k A_k`. The smaller of the dual and primal
/// forms is returned.
pub fn build_dual_metric_a(pack: &SignalPack, net: &NetworkInstance, k: Option<usize>) -> Result<DualGram> {
    let layers: Vec<usize> = (0..net.config().depth).collect();
    metric_a(pack, net, &layers, k, GramKind::MetricA { per_output: k.is_some() })
}

/// Diagonal block `A^{ll}` (or `A_k^{ll}`), `0 <= l < L`.
pub fn build_dual_metric_a_block(pack: &SignalPack, net: &NetworkInstance, l: usize, k: Option<usize>) -> Result<DualGram> {
    let kind = GramKind::MetricABlock { layer: l, per_output: k.is_some() };
    kind.validate(net.config().depth)?;
    metric_a(pack, net, &[l], k, kind)
}

/// Projects out the per-output sample mean: `(I − Π) G (I − Π)` with `Π`
/// averaging over the `N` samples of each output block.
pub fn mean_subtract(dual: &DualGram) -> Result<DualGram> {
    if dual.space != GramSpace::Dual {
        return Err(Error::domain("mean subtraction needs the dual form"));
    }
    let kind = match dual.kind {
        GramKind::FimMse | GramKind::FimMseMeanSub => GramKind::FimMseMeanSub,
        GramKind::Ntk | GramKind::NtkMeanSub => GramKind::NtkMeanSub,
        other => other,
    };
    let n = dual.n_samples;
    let dim = dual.dim();
    let mut m = dual.matrix.clone();
    // centre columns within each row block, then rows within each column block
    for j in 0..dim {
        let col = m.col_as_slice_mut(j);
        for blk in col.chunks_mut(n) {
            let mean = blk.iter().sum::<f64>() / n as f64;
            blk.iter_mut().for_each(|v| *v -= mean);
        }
    }
    for i in 0..dim {
        for b in 0..dim / n {
            let mean = (0..n).map(|t| m[(i, b * n + t)]).sum::<f64>() / n as f64;
            (0..n).for_each(|t| m[(i, b * n + t)] -= mean);
        }
    }
    linalg::symmetrize(&mut m);
    let trace_accumulated = linalg::trace(m.as_ref());
    Ok(DualGram { kind, matrix: m, trace_accumulated, ..dual.clone() })
}

/// Primal dimension used to normalize spectral moments.
///
/// Parameter-space kinds use the actual parameter count including biases.
/// The NTK is normalized by `N`, which makes its mean width independent.
/// Feature-space kinds use the number of stacked features.
pub fn primal_dim(kind: GramKind, cfg: &NetworkConfig, n: usize) -> usize {
    match kind {
        GramKind::FimMse | GramKind::FimCross | GramKind::FimMseMeanSub => cfg.param_count(),
        GramKind::FimMseBlock(l) | GramKind::FimCrossBlock(l) => cfg.layer_params(l),
        GramKind::Ntk | GramKind::NtkMeanSub => n,
        GramKind::MetricA { .. } => cfg.feature_dim(),
        GramKind::MetricABlock { layer, .. } => cfg.layer_width(layer),
    }
}

/// Number of bins in the logarithmic histogram.
pub const HIST_BINS: usize = 100;
/// Lower histogram edge relative to the largest eigenvalue.
pub const HIST_FLOOR: f64 = 1e-12;

/// Counts of eigenvalues on logarithmic bins over `[1e-12 λ_max, λ_max]`.
/// Eigenvalues below the lower edge, including the implicit zeros of the
/// primal matrix, go to `zero_count`.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub zero_count: u64,
}

impl Histogram {
    pub fn log_binned(values: &[f64], implicit_zeros: usize, lambda_max: f64) -> Self {
        let hi = lambda_max.max(f64::MIN_POSITIVE);
        let lo = hi * HIST_FLOOR;
        let (llo, lhi) = (lo.ln(), hi.ln());
        let edges: Vec<f64> = (0..=HIST_BINS)
            .map(|i| (llo + (lhi - llo) * i as f64 / HIST_BINS as f64).exp())
            .collect();
        let mut counts = vec![0u64; HIST_BINS];
        let mut zero_count = implicit_zeros as u64;
        for &v in values {
            if !(v >= lo) {
                zero_count += 1;
                continue;
            }
            let t = ((v.ln() - llo) / (lhi - llo) * HIST_BINS as f64).floor() as usize;
            counts[t.min(HIST_BINS - 1)] += 1;
        }
        Histogram { edges, counts, zero_count }
    }

    /// Adds the counts of another histogram with the same binning.
    pub fn merge(&mut self, other: &Histogram) {
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        self.zero_count += other.zero_count;
    }

    /// Rows `bin_lo, bin_hi, count`; the zero bucket is the row `0, lo`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,count\n");
        let _ = writeln!(out, "0,{:e},{}", self.edges[0], self.zero_count);
        for i in 0..self.counts.len() {
            let _ = writeln!(out, "{:e},{:e},{}", self.edges[i], self.edges[i + 1], self.counts[i]);
        }
        out
    }
}

/// How many eigenpairs to compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EigenMethod {
    /// Full dense decomposition.
    #[default]
    Full,
    /// Lanczos for the top `k` pairs; moments come from trace and Frobenius
    /// norm. The histogram then covers only the computed eigenvalues.
    Partial { k: usize },
}

/// Dual dimension above which `Auto` switches to a partial solve.
pub const FULL_EIGEN_LIMIT: usize = 4000;

#[derive(Debug, Clone)]
pub struct SpectrumReport {
    pub kind: GramKind,
    /// Computed eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
    pub primal_dim: usize,
    pub mean: f64,
    pub second_moment: f64,
    pub lambda_max: f64,
    pub min_eigenvalue: Option<f64>,
    /// Largest `outliers + 1` eigenvalues.
    pub top: Vec<f64>,
    /// Expected number of outliers for this kind.
    pub outliers: usize,
    /// `λ_C / λ_{C+1}`.
    pub outlier_gap: f64,
    /// Overlap of the top eigenvectors with the mean-gradient directions, when
    /// the matrix is in dual form.
    pub alignment: Option<f64>,
    pub histogram: Histogram,
    pub trials: usize,
}

/// Number of outliers expected for a kind.
pub fn expected_outliers(kind: GramKind, outputs: usize) -> usize {
    match kind {
        GramKind::MetricA { per_output: true } | GramKind::MetricABlock { per_output: true, .. } => 1,
        _ => outputs,
    }
}

/// Mean squared cosine between the span of the `c` columns of `vecs` and
/// the block indicators `ν_k` (entries `1/√N` on block `k`).
fn block_alignment(vecs: &Mat<f64>, c: usize, n: usize) -> f64 {
    let blocks = vecs.nrows() / n;
    let inv = 1.0 / (n as f64).sqrt();
    let mut total = 0.0;
    for i in 0..c {
        for k in 0..blocks {
            let proj: f64 = (0..n).map(|t| vecs[(k * n + t, i)]).sum::<f64>() * inv;
            total += proj * proj;
        }
    }
    total / c as f64
}

/// Alignment of the top eigenvectors of a dual with the mean-gradient
/// subspace; see [`SpectrumReport::alignment`].
pub fn top_eigvec_alignment(dual: &DualGram) -> Result<f64> {
    if dual.space != GramSpace::Dual {
        return Err(Error::domain("eigenvector alignment needs the dual form"));
    }
    let c = dual.blocks();
    let (_, vecs) = linalg::sym_eigen(dual.matrix.as_ref())?;
    Ok(block_alignment(&vecs, c, dual.n_samples))
}

pub fn eigen_stats(dual: &DualGram, primal_dim: usize) -> Result<SpectrumReport> {
    eigen_stats_with(dual, primal_dim, EigenMethod::Full)
}

/// Chooses a full solve for small matrices and Lanczos otherwise.
pub fn auto_method(dual: &DualGram) -> EigenMethod {
    if dual.dim() <= FULL_EIGEN_LIMIT {
        EigenMethod::Full
    } else {
        EigenMethod::Partial { k: (dual.outputs + 1).min(dual.dim()) + 10 }
    }
}

pub fn eigen_stats_with(dual: &DualGram, primal_dim: usize, method: EigenMethod) -> Result<SpectrumReport> {
    if primal_dim == 0 {
        return Err(Error::domain("primal dimension must be positive"));
    }
    let dim = dual.dim();
    let outliers = expected_outliers(dual.kind, dual.outputs).min(dim);
    let align_c = if dual.space == GramSpace::Dual { Some(dual.blocks()) } else { None };
    let p = primal_dim as f64;

    let (eigenvalues, vecs, mean, second_moment, min_eigenvalue) = match method {
        EigenMethod::Full => {
            let (vals, vecs) = if align_c.is_some() {
                let (v, u) = linalg::sym_eigen(dual.matrix.as_ref())?;
                (v, Some(u))
            } else {
                (linalg::sym_eigenvalues(dual.matrix.as_ref())?, None)
            };
            let mean = vals.iter().sum::<f64>() / p;
            let s = vals.iter().map(|v| v * v).sum::<f64>() / p;
            let min = vals.last().copied();
            (vals, vecs, mean, s, min)
        }
        EigenMethod::Partial { k } => {
            let k = k.max(outliers + 1).min(dim);
            let top = lanczos::top_eigenpairs_dense(&dual.matrix, k, 1e-10, 0x5eed)?;
            let mean = dual.trace() / p;
            let s = linalg::frobenius_sq(dual.matrix.as_ref()) / p;
            (top.values, Some(top.vectors), mean, s, None)
        }
    };

    let lambda_max = eigenvalues.first().copied().unwrap_or(0.0);
    let top: Vec<f64> = eigenvalues.iter().take(outliers + 1).copied().collect();
    let outlier_gap = if top.len() > outliers && outliers > 0 {
        top[outliers - 1] / top[outliers]
    } else {
        f64::INFINITY
    };
    let alignment = match (align_c, vecs) {
        (Some(c), Some(u)) => Some(block_alignment(&u, c.min(u.ncols()), dual.n_samples)),
        _ => None,
    };
    let implicit = match method {
        EigenMethod::Full => primal_dim.saturating_sub(eigenvalues.len()),
        EigenMethod::Partial { .. } => 0,
    };
    let histogram = Histogram::log_binned(&eigenvalues, implicit, lambda_max);
    Ok(SpectrumReport {
        kind: dual.kind,
        eigenvalues,
        primal_dim,
        mean,
        second_moment,
        lambda_max,
        min_eigenvalue,
        top,
        outliers,
        outlier_gap,
        alignment,
        histogram,
        trials: 1,
    })
}

/// Whether `a[i] <= b[i] + tol * b[0]` for all sorted eigenvalues.
pub fn dominated_by(a: &[f64], b: &[f64], tol: f64) -> bool {
    let scale = b.first().copied().unwrap_or(0.0).abs();
    a.iter().zip(b).all(|(x, y)| *x <= *y + tol * scale)
}

/// Builds the Gram matrix of `kind` from one network's signals. `net` may be
/// in either parameterization.
pub fn build(kind: GramKind, pack: &SignalPack, net: &NetworkInstance) -> Result<DualGram> {
    kind.validate(net.config().depth)?;
    match kind {
        GramKind::FimMse => build_dual_fim(pack, net),
        GramKind::FimMseBlock(l) => build_dual_block(pack, net, l),
        GramKind::FimCross => apply_softmax_q(&build_dual_fim(pack, net)?, &pack.g),
        GramKind::FimCrossBlock(l) => apply_softmax_q(&build_dual_block(pack, net, l)?, &pack.g),
        GramKind::Ntk => build_dual_ntk(pack, net, true),
        GramKind::NtkMeanSub => mean_subtract(&build_dual_ntk(pack, net, true)?),
        GramKind::FimMseMeanSub => mean_subtract(&build_dual_fim(pack, net)?),
        GramKind::MetricA { per_output } => build_dual_metric_a(pack, net, per_output.then_some(0)),
        GramKind::MetricABlock { layer, per_output } => {
            build_dual_metric_a_block(pack, net, layer, per_output.then_some(0))
        }
    }
}

/// Settings shared by all trials of an ensemble.
#[derive(Debug, Clone)]
pub struct EnsembleSpec {
    pub cfg: NetworkConfig,
    pub n_samples: usize,
    pub kinds: Vec<GramKind>,
    pub trials: usize,
    pub seed: u64,
    pub quadrature_order: usize,
    pub method: Option<EigenMethod>,
}

/// Result of one kind in one trial.
#[derive(Debug, Clone)]
pub struct TrialRecord {
    pub trial: usize,
    pub report: SpectrumReport,
    pub prediction: EigStatsPrediction,
}

fn run_trial(spec: &EnsembleSpec, op: &OrderParams, trial: usize) -> Result<Vec<TrialRecord>> {
    let cfg = &spec.cfg;
    let t = trial as u64;
    let net = NetworkInstance::random(cfg, Parameterization::Standard, spec.seed, t)?;
    let x = sample_inputs(spec.n_samples, cfg.input_dim(), spec.seed, t);
    let pack = net.signals(&x)?;
    let coeffs = if spec.kinds.iter().any(|k| k.is_cross()) {
        Some(SoftmaxCoeffs::from_softmax(&pack.softmax_flat(), cfg.outputs, spec.n_samples)?)
    } else {
        None
    };
    spec.kinds
        .iter()
        .map(|&kind| {
            let dual = build(kind, &pack, &net)?;
            let method = spec.method.unwrap_or_else(|| auto_method(&dual));
            let report = eigen_stats_with(&dual, primal_dim(kind, cfg, spec.n_samples), method)?;
            let prediction = theory::predict(kind, op, cfg, spec.n_samples, coeffs.as_ref())?;
            Ok(TrialRecord { trial, report, prediction })
        })
        .collect()
}

/// Runs every trial (in parallel over trials) and returns records ordered by
/// trial, then by kind.
pub fn run_ensemble(spec: &EnsembleSpec) -> Result<Vec<TrialRecord>> {
    for k in &spec.kinds {
        k.validate(spec.cfg.depth)?;
    }
    let rule = QuadratureRule::gauss_hermite(spec.quadrature_order)?;
    let op = order_params(&spec.cfg, &rule, MomentSource::ClosedFormWhenAvailable)?;
    let per_trial: Vec<Result<Vec<TrialRecord>>> =
        (0..spec.trials).into_par_iter().map(|t| run_trial(spec, &op, t)).collect();
    let mut out = Vec::with_capacity(spec.trials * spec.kinds.len());
    for r in per_trial {
        out.extend(r?);
    }
    Ok(out)
}

/// Theory-versus-empirics summary for one kind across trials.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub kind: GramKind,
    pub width: usize,
    pub n_samples: usize,
    pub outputs: usize,
    pub depth: usize,
    pub mean_emp: f64,
    pub mean_theory: Option<f64>,
    pub s_emp: f64,
    pub s_theory: Option<f64>,
    pub lmax_emp: f64,
    pub lmax_theory_lo: Option<f64>,
    pub lmax_theory_hi: Option<f64>,
    pub alignment: Option<f64>,
    pub outlier_gap: f64,
    pub mean_emp_sd: f64,
    pub s_emp_sd: f64,
    pub lmax_emp_sd: f64,
    pub trials: usize,
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (m, 0.0);
    }
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

fn mean_opt(xs: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Option<Vec<f64>> = xs.collect();
    v.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / v.len() as f64)
}

impl SummaryRow {
    pub const CSV_HEADER: &'static str = "kind,M,N,C,L,mean_emp,mean_theory,s_emp,s_theory,lmax_emp,\
lmax_theory_lo,lmax_theory_hi,alignment,outlier_gap,mean_emp_sd,s_emp_sd,lmax_emp_sd,trials";

    /// Aggregates the records of one kind. Predictions that depend on the
    /// trial (cross-entropy kinds) are averaged.
    pub fn from_records(cfg: &NetworkConfig, n: usize, kind: GramKind, records: &[TrialRecord]) -> Result<Self> {
        let rs: Vec<&TrialRecord> = records.iter().filter(|r| r.report.kind == kind).collect();
        if rs.is_empty() {
            return Err(Error::domain(format!("no trials recorded for {kind}")));
        }
        let pick = |f: fn(&SpectrumReport) -> f64| rs.iter().map(|r| f(&r.report)).collect::<Vec<_>>();
        let (mean_emp, mean_emp_sd) = mean_sd(&pick(|r| r.mean));
        let (s_emp, s_emp_sd) = mean_sd(&pick(|r| r.second_moment));
        let (lmax_emp, lmax_emp_sd) = mean_sd(&pick(|r| r.lambda_max));
        let (outlier_gap, _) = mean_sd(&pick(|r| r.outlier_gap));
        let alignment = mean_opt(rs.iter().map(|r| r.report.alignment));
        let ranges: Vec<Option<(f64, f64)>> = rs.iter().map(|r| r.prediction.lambda_max_range()).collect();
        Ok(SummaryRow {
            kind,
            width: cfg.width,
            n_samples: n,
            outputs: cfg.outputs,
            depth: cfg.depth,
            mean_emp,
            mean_theory: mean_opt(rs.iter().map(|r| r.prediction.mean)),
            s_emp,
            s_theory: mean_opt(rs.iter().map(|r| r.prediction.second_moment)),
            lmax_emp,
            lmax_theory_lo: mean_opt(ranges.iter().map(|r| r.map(|x| x.0))),
            lmax_theory_hi: mean_opt(ranges.iter().map(|r| r.map(|x| x.1))),
            alignment,
            outlier_gap,
            mean_emp_sd,
            s_emp_sd,
            lmax_emp_sd,
            trials: rs.len(),
        })
    }

    pub fn to_csv_line(&self) -> String {
        let o = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
        format!(
            "{},{},{},{},{},{:e},{},{:e},{},{:e},{},{},{},{:e},{:e},{:e},{:e},{}",
            self.kind,
            self.width,
            self.n_samples,
            self.outputs,
            self.depth,
            self.mean_emp,
            o(self.mean_theory),
            self.s_emp,
            o(self.s_theory),
            self.lmax_emp,
            o(self.lmax_theory_lo),
            o(self.lmax_theory_hi),
            o(self.alignment),
            self.outlier_gap,
            self.mean_emp_sd,
            self.s_emp_sd,
            self.lmax_emp_sd,
            self.trials
        )
    }
}

/// Rows `trial, index, eigenvalue` for every record of `kind`.
pub fn spectrum_csv(records: &[TrialRecord], kind: GramKind) -> String {
    let mut out = String::from("trial,index,eigenvalue\n");
    for r in records.iter().filter(|r| r.report.kind == kind) {
        for (i, v) in r.report.eigenvalues.iter().enumerate() {
            let _ = writeln!(out, "{},{},{:e}", r.trial, i, v);
        }
    }
    out
}

/// Pooled histogram over trials, binned relative to the largest eigenvalue
/// seen in any trial. With `drop_top` the largest eigenvalues of each trial
/// are left out, which exposes the bulk.
pub fn pooled_histogram(records: &[TrialRecord], kind: GramKind, drop_top: usize) -> Option<Histogram> {
    let rs: Vec<&TrialRecord> = records.iter().filter(|r| r.report.kind == kind).collect();
    let lmax = rs
        .iter()
        .filter_map(|r| r.report.eigenvalues.get(drop_top).copied())
        .fold(f64::NEG_INFINITY, f64::max);
    if !lmax.is_finite() {
        return None;
    }
    let mut pooled: Option<Histogram> = None;
    for r in rs {
        let vals = &r.report.eigenvalues[drop_top.min(r.report.eigenvalues.len())..];
        let implicit = r.report.histogram.zero_count as usize
            - r.report.eigenvalues.iter().filter(|v| !(**v >= r.report.lambda_max * HIST_FLOOR)).count();
        let h = Histogram::log_binned(vals, implicit, lmax);
        match pooled.as_mut() {
            Some(p) => p.merge(&h),
            None => pooled = Some(h),
        }
    }
    pooled
}
