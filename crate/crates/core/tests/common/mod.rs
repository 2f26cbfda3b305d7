//! Brute-force oracles shared by the integration tests. Everything here
//! recomputes derivatives by forward-mode propagation of tangents through an
//! independent forward pass, never through the library's backpropagation.

#![allow(dead_code)]

use faer::Mat;
use fimspec::activation::Activation;
use fimspec::meanfield::NetworkConfig;
use fimspec::network::{NetworkInstance, Parameterization};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Which perturbation a tangent propagation starts from.
#[derive(Clone, Copy)]
enum Seed {
    Weight { l: usize, i: usize, j: usize },
    Bias { l: usize, i: usize },
    /// Feature `i` of `h^l` for one sample, `0 <= l < L`.
    Feature { l: usize, i: usize },
}

/// Outputs and their tangents for one input column.
fn jvp(net: &NetworkInstance, x: &[f64], seed: Seed) -> (Vec<f64>, Vec<f64>) {
    let cfg = net.config();
    let depth = cfg.depth;
    let mut h = x.to_vec();
    let mut dh = vec![0.0; h.len()];
    if let Seed::Feature { l: 0, i } = seed {
        dh[i] = 1.0;
    }
    for l in 1..=depth {
        let w = net.weight(l);
        let b = net.bias(l);
        let rows = w.nrows();
        let mut u = vec![0.0; rows];
        let mut du = vec![0.0; rows];
        for r in 0..rows {
            let mut acc = b[r];
            let mut dacc = 0.0;
            for c in 0..h.len() {
                acc += w[(r, c)] * h[c];
                dacc += w[(r, c)] * dh[c];
            }
            u[r] = acc;
            du[r] = dacc;
        }
        match seed {
            Seed::Weight { l: sl, i, j } if sl == l => du[i] += h[j],
            Seed::Bias { l: sl, i } if sl == l => du[i] += 1.0,
            _ => {}
        }
        if l == depth {
            return (u, du);
        }
        let act = cfg.activation(l);
        h = u.iter().map(|v| act.eval(*v)).collect();
        dh = u.iter().zip(&du).map(|(v, d)| act.deriv(*v) * d).collect();
        if let Seed::Feature { l: sl, i } = seed {
            if sl == l {
                dh = vec![0.0; h.len()];
                dh[i] = 1.0;
            }
        }
    }
    unreachable!("depth is at least one")
}

/// Explicit parameter Jacobian, rows `k·N + n`, columns ordered layer by
/// layer as `W^l` row-major followed by `b^l`. Columns are scaled to the
/// network's parameterization.
pub fn param_jacobian(net: &NetworkInstance, x: &Mat<f64>) -> Mat<f64> {
    let cfg = net.config();
    let (c, n) = (cfg.outputs, x.ncols());
    let mut seeds = Vec::new();
    let mut scales = Vec::new();
    let p = net.parameterization();
    for l in 1..=cfg.depth {
        let (rows, cols) = (cfg.layer_width(l), cfg.layer_width(l - 1));
        for i in 0..rows {
            for j in 0..cols {
                seeds.push(Seed::Weight { l, i, j });
                scales.push(p.weight_grad_scale(cfg, l));
            }
        }
        for i in 0..rows {
            seeds.push(Seed::Bias { l, i });
            scales.push(p.bias_grad_scale(cfg));
        }
    }
    let mut jac = Mat::zeros(c * n, seeds.len());
    for s in 0..n {
        let col: Vec<f64> = (0..x.nrows()).map(|r| x[(r, s)]).collect();
        for (pi, seed) in seeds.iter().enumerate() {
            let (_, d) = jvp(net, &col, *seed);
            for k in 0..c {
                jac[(k * n + s, pi)] = scales[pi] * d[k];
            }
        }
    }
    jac
}

/// Column range of layer `l`'s parameters in [`param_jacobian`].
pub fn layer_columns(cfg: &NetworkConfig, l: usize) -> std::ops::Range<usize> {
    let start: usize = (1..l).map(|m| cfg.layer_params(m)).sum();
    start..start + cfg.layer_params(l)
}

/// Explicit feature Jacobian: for each sample, `∇_{h^l} f_k` for
/// `l = 0..L-1` stacked layer by layer. Rows `k·N + n`.
pub fn feature_jacobian(net: &NetworkInstance, x: &Mat<f64>, layers: &[usize]) -> Mat<f64> {
    let cfg = net.config();
    let (c, n) = (cfg.outputs, x.ncols());
    let seeds: Vec<Seed> =
        layers.iter().flat_map(|&l| (0..cfg.layer_width(l)).map(move |i| Seed::Feature { l, i })).collect();
    let mut jac = Mat::zeros(c * n, seeds.len());
    for s in 0..n {
        let col: Vec<f64> = (0..x.nrows()).map(|r| x[(r, s)]).collect();
        for (pi, seed) in seeds.iter().enumerate() {
            let (_, d) = jvp(net, &col, *seed);
            for k in 0..c {
                jac[(k * n + s, pi)] = d[k];
            }
        }
    }
    jac
}

/// Outputs recomputed by the independent forward pass, `C × N`.
pub fn outputs(net: &NetworkInstance, x: &Mat<f64>) -> Mat<f64> {
    let c = net.config().outputs;
    let mut f = Mat::zeros(c, x.ncols());
    for s in 0..x.ncols() {
        let col: Vec<f64> = (0..x.nrows()).map(|r| x[(r, s)]).collect();
        let (u, _) = jvp(net, &col, Seed::Bias { l: 0, i: 0 });
        for k in 0..c {
            f[(k, s)] = u[k];
        }
    }
    f
}

/// `a aᵀ · s`.
pub fn gram_rows(a: &Mat<f64>, s: f64) -> Mat<f64> {
    Mat::from_fn(a.nrows(), a.nrows(), |i, j| s * (0..a.ncols()).map(|t| a[(i, t)] * a[(j, t)]).sum::<f64>())
}

/// `aᵀ a · s`.
pub fn gram_cols(a: &Mat<f64>, s: f64) -> Mat<f64> {
    Mat::from_fn(a.ncols(), a.ncols(), |i, j| s * (0..a.nrows()).map(|t| a[(t, i)] * a[(t, j)]).sum::<f64>())
}

pub fn max_abs_diff(a: &Mat<f64>, b: &Mat<f64>) -> f64 {
    assert_eq!((a.nrows(), a.ncols()), (b.nrows(), b.ncols()));
    let mut m: f64 = 0.0;
    for j in 0..a.ncols() {
        for i in 0..a.nrows() {
            m = m.max((a[(i, j)] - b[(i, j)]).abs());
        }
    }
    m
}

/// Random tiny configuration: depth 2 or 3, widths up to 8, up to 3
/// outputs, random ratios and activations, biases always present.
pub fn tiny_config(seed: u64) -> NetworkConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let depth = rng.random_range(2..=3);
    let width = rng.random_range(3..=6);
    let outputs = rng.random_range(1..=3);
    let acts = [Activation::Tanh, Activation::Relu, Activation::LeakyRelu(0.2), Activation::Identity, Activation::Erf];
    let act = acts[rng.random_range(0..acts.len())].clone();
    let mut cfg = NetworkConfig::uniform(
        depth,
        width,
        outputs,
        rng.random_range(0.5..3.0),
        rng.random_range(0.05..1.0),
        act,
    );
    cfg.width_ratios = (0..depth).map(|_| [0.5, 1.0, 4.0 / 3.0][rng.random_range(0..3)]).collect();
    for a in cfg.activations.iter_mut() {
        *a = acts[rng.random_range(0..acts.len())].clone();
    }
    cfg
}

/// Depth-3, all-ones-ratio network of a given width, standard
/// parameterization, plus inputs.
pub fn wide(cfg: &NetworkConfig, n: usize, seed: u64, trial: u64) -> (NetworkInstance, Mat<f64>) {
    let net = NetworkInstance::random(cfg, Parameterization::Standard, seed, trial).unwrap();
    let x = fimspec::network::sample_inputs(n, cfg.input_dim(), seed, trial);
    (net, x)
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

pub fn rel_err(emp: f64, theory: f64) -> f64 {
    (emp - theory).abs() / theory.abs()
}

fn centred_rows(j: &Mat<f64>, c: usize, n: usize) -> Mat<f64> {
    let mut out = j.clone();
    for col in 0..j.ncols() {
        for k in 0..c {
            let mean = (0..n).map(|s| j[(k * n + s, col)]).sum::<f64>() / n as f64;
            for s in 0..n {
                out[(k * n + s, col)] -= mean;
            }
        }
    }
    out
}

fn select_cols(j: &Mat<f64>, r: std::ops::Range<usize>) -> Mat<f64> {
    Mat::from_fn(j.nrows(), r.len(), |i, t| j[(i, r.start + t)])
}

/// `Q = blockdiag_n(diag(g_n) − g_n g_nᵀ)` in output-major `(k, n)` order.
pub fn q_full(g: &Mat<f64>) -> Mat<f64> {
    let (c, n) = (g.nrows(), g.ncols());
    let mut q = Mat::zeros(c * n, c * n);
    for t in 0..n {
        for i in 0..c {
            for j in 0..c {
                q[(i * n + t, j * n + t)] = if i == j { g[(i, t)] * (1.0 - g[(i, t)]) } else { -g[(i, t)] * g[(j, t)] };
            }
        }
    }
    q
}

/// Explicit-Jacobian Gram matrix of `kind` in the layout the library uses.
/// Cross-entropy kinds return the nonsymmetric `Q F*`, whose spectrum equals
/// that of the symmetrized dual. Metric kinds return the Gram over samples.
pub fn oracle_dual(kind: fimspec::theory::GramKind, net: &NetworkInstance, x: &Mat<f64>) -> Mat<f64> {
    use fimspec::theory::GramKind as K;
    let cfg = net.config();
    let (c, n) = (cfg.outputs, x.ncols());
    let js = || param_jacobian(&net.with_parameterization(Parameterization::Standard), x);
    let jn = || param_jacobian(&net.with_parameterization(Parameterization::Ntk), x);
    let q = || {
        let f = outputs(net, x);
        q_full(&fimspec::network::softmax(&f))
    };
    let inv = 1.0 / n as f64;
    let per_output = |j: Mat<f64>, one: bool| if one { Mat::from_fn(n, j.ncols(), |i, t| j[(i, t)]) } else { j };
    match kind {
        K::FimMse => gram_rows(&js(), inv),
        K::FimMseBlock(l) => gram_rows(&select_cols(&js(), layer_columns(cfg, l)), inv),
        K::FimCross => fimspec::linalg::mul(q().as_ref(), gram_rows(&js(), inv).as_ref()),
        K::FimCrossBlock(l) => {
            let f = gram_rows(&select_cols(&js(), layer_columns(cfg, l)), inv);
            fimspec::linalg::mul(q().as_ref(), f.as_ref())
        }
        K::Ntk => gram_rows(&jn(), 1.0),
        K::NtkMeanSub => gram_rows(&centred_rows(&jn(), c, n), 1.0),
        K::FimMseMeanSub => gram_rows(&centred_rows(&js(), c, n), inv),
        K::MetricA { per_output: one } => {
            let layers: Vec<usize> = (0..cfg.depth).collect();
            gram_rows(&per_output(feature_jacobian(net, x, &layers), one), inv)
        }
        K::MetricABlock { layer, per_output: one } => gram_rows(&per_output(feature_jacobian(net, x, &[layer]), one), inv),
    }
}
