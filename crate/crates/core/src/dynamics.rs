//! Function-space training under a frozen tangent kernel, and a reference
//! full-batch gradient-descent trainer.
//!
//! Both use the loss averaged over samples, so a parameter step
//! `θ ← θ − η ∇L` moves the outputs by `(η/N) Θ (y − ∂ℓ/∂f)` to first order,
//! with `Θ = ∇fᵀ∇f` taken in the trainer's parameterization.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use faer::Mat;

use crate::error::{Error, Result};
use crate::linalg;
use crate::meanfield::{NetworkConfig, OrderParams};
use crate::network::{softmax, NetworkInstance, Parameterization};
use crate::spectra::{self, DualGram};
use crate::theory::{predict_fim_cross, predict_fim_mse, SoftmaxCoeffs};

/// Loss above which a run is declared divergent.
pub const DIVERGENCE_LOSS: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Mse,
    CrossEntropy,
}

/// Steps `0, 1, 2, 5, 10, 20, 50, …` up to and including `max`.
pub fn log_steps(max: usize) -> Vec<usize> {
    let mut out = vec![0];
    let mut decade = 1;
    'outer: loop {
        for m in [1, 2, 5] {
            let s = m * decade;
            if s > max {
                break 'outer;
            }
            out.push(s);
        }
        decade *= 10;
    }
    if *out.last().expect("non-empty") != max {
        out.push(max);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub eta: f64,
    pub steps: usize,
    /// Stop once the loss drops to this value; the stopping step is logged.
    pub stop_loss: Option<f64>,
}

/// Logged quantities of one training run. Series that a run does not
/// produce are left empty.
#[derive(Debug, Clone, Default)]
pub struct TrainingTrace {
    pub steps: Vec<usize>,
    pub loss: Vec<f64>,
    /// `λ_max(F)`: the constant prediction for simulations, measured for the
    /// reference trainer.
    pub lambda_max_f: Vec<f64>,
    /// Measured `λ_max(F_cross)` (reference trainer only).
    pub lambda_max_fcross_emp: Vec<f64>,
    /// Bounds on `λ_max(F_cross)` from the instantaneous softmax outputs.
    pub lambda_max_fcross_lo: Vec<f64>,
    pub lambda_max_fcross_hi: Vec<f64>,
    /// Outputs after the last step, `C × N`.
    pub f_t: Option<Mat<f64>>,
    pub g_t: Option<Mat<f64>>,
}

fn mse_loss(f: &Mat<f64>, y: &Mat<f64>) -> f64 {
    let n = f.ncols() as f64;
    let mut s = 0.0;
    for j in 0..f.ncols() {
        for i in 0..f.nrows() {
            s += (y[(i, j)] - f[(i, j)]).powi(2);
        }
    }
    s / (2.0 * n)
}

/// Mean cross-entropy with log-softmax for stability.
pub fn cross_entropy(f: &Mat<f64>, y: &Mat<f64>) -> f64 {
    let n = f.ncols() as f64;
    let mut s = 0.0;
    for j in 0..f.ncols() {
        let col = f.col_as_slice(j);
        let mx = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + col.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        for (i, v) in col.iter().enumerate() {
            s -= y[(i, j)] * (v - lse);
        }
    }
    s / n
}

pub fn loss(kind: LossKind, f: &Mat<f64>, y: &Mat<f64>) -> f64 {
    match kind {
        LossKind::Mse => mse_loss(f, y),
        LossKind::CrossEntropy => cross_entropy(f, y),
    }
}

fn check_loss(step: usize, l: f64) -> Result<()> {
    if !l.is_finite() || l > DIVERGENCE_LOSS {
        return Err(Error::Divergence { step, loss: l });
    }
    Ok(())
}

fn check_shapes(theta: &DualGram, f0: &Mat<f64>, y: &Mat<f64>) -> Result<()> {
    let (c, n) = (f0.nrows(), f0.ncols());
    if y.nrows() != c || y.ncols() != n || theta.dim() != c * n || theta.n_samples != n {
        return Err(Error::shape(format!(
            "kernel of size {} does not match outputs {c}x{n} and targets {}x{}",
            theta.dim(),
            y.nrows(),
            y.ncols()
        )));
    }
    Ok(())
}

/// `f += (η/N) Θ r`, with `r` a `C × N` residual in output-major order.
fn kernel_step(theta: &Mat<f64>, f: &mut Mat<f64>, r: &Mat<f64>, eta: f64) {
    let (c, n) = (f.nrows(), f.ncols());
    let v = Mat::from_fn(c * n, 1, |i, _| r[(i / n, i % n)]);
    let dv = linalg::mul(theta.as_ref(), v.as_ref());
    let s = eta / n as f64;
    for i in 0..c * n {
        f[(i / n, i % n)] += s * dv[(i, 0)];
    }
}

/// Euler steps `f ← f + (η/N) Θ (y − f)` for the squared loss.
pub fn simulate_ntk_mse(theta: &DualGram, f0: &Mat<f64>, y: &Mat<f64>, opts: &TrainOptions) -> Result<TrainingTrace> {
    check_shapes(theta, f0, y)?;
    let logged = log_steps(opts.steps);
    let mut trace = TrainingTrace::default();
    let mut f = f0.clone();
    for step in 0..=opts.steps {
        let l = mse_loss(&f, y);
        check_loss(step, l)?;
        let stop = opts.stop_loss.is_some_and(|s| l <= s);
        if logged.binary_search(&step).is_ok() || stop {
            trace.steps.push(step);
            trace.loss.push(l);
        }
        if stop || step == opts.steps {
            break;
        }
        let r = Mat::from_fn(f.nrows(), f.ncols(), |i, j| y[(i, j)] - f[(i, j)]);
        kernel_step(&theta.matrix, &mut f, &r, opts.eta);
    }
    trace.g_t = Some(softmax(&f));
    trace.f_t = Some(f);
    Ok(trace)
}

/// Euler steps `f ← f + (η/N) Θ (y − softmax(f))` for the cross-entropy
/// loss. At every logged step the largest-eigenvalue bounds of the
/// cross-entropy FIM are evaluated from the current softmax outputs.
pub fn simulate_ntk_cross(
    theta: &DualGram,
    f0: &Mat<f64>,
    y_onehot: &Mat<f64>,
    opts: &TrainOptions,
    op: &OrderParams,
    cfg: &NetworkConfig,
) -> Result<TrainingTrace> {
    check_shapes(theta, f0, y_onehot)?;
    let (c, n) = (f0.nrows(), f0.ncols());
    let lmax_f = predict_fim_mse(op, cfg, n).lambda_max_point.expect("point prediction");
    let logged = log_steps(opts.steps);
    let mut trace = TrainingTrace::default();
    let mut f = f0.clone();
    for step in 0..=opts.steps {
        let l = cross_entropy(&f, y_onehot);
        check_loss(step, l)?;
        let g = softmax(&f);
        let stop = opts.stop_loss.is_some_and(|s| l <= s);
        if logged.binary_search(&step).is_ok() || stop {
            let flat = crate::network::mat_to_col_major(&g);
            let b = SoftmaxCoeffs::from_softmax(&flat, c, n)?;
            let p = predict_fim_cross(op, cfg, n, &b);
            trace.steps.push(step);
            trace.loss.push(l);
            trace.lambda_max_f.push(lmax_f);
            trace.lambda_max_fcross_lo.push(p.lambda_max_lower.unwrap_or(f64::NAN));
            trace.lambda_max_fcross_hi.push(p.lambda_max_upper.unwrap_or(f64::NAN));
        }
        if stop || step == opts.steps {
            break;
        }
        let r = Mat::from_fn(c, n, |i, j| y_onehot[(i, j)] - g[(i, j)]);
        kernel_step(&theta.matrix, &mut f, &r, opts.eta);
    }
    trace.g_t = Some(softmax(&f));
    trace.f_t = Some(f);
    Ok(trace)
}

/// Full-batch gradient descent on the weights and biases of `net` (standard
/// parameterization). With `checkpoint_spectra`, the largest eigenvalues of
/// the MSE and cross-entropy FIMs are measured at every logged step.
pub fn train_reference(
    net: &NetworkInstance,
    x: &Mat<f64>,
    y: &Mat<f64>,
    loss_kind: LossKind,
    opts: &TrainOptions,
    checkpoint_spectra: bool,
) -> Result<(TrainingTrace, NetworkInstance)> {
    if net.parameterization() != Parameterization::Standard {
        return Err(Error::Parameterization("the reference trainer updates W and b directly".into()));
    }
    let logged = log_steps(opts.steps);
    let mut net = net.clone();
    let mut trace = TrainingTrace::default();
    let n = x.ncols() as f64;
    for step in 0..=opts.steps {
        let fwd = net.forward(x)?;
        let f = fwd.output();
        if f.nrows() != y.nrows() || f.ncols() != y.ncols() {
            return Err(Error::shape("targets do not match network outputs"));
        }
        let l = loss(loss_kind, f, y);
        check_loss(step, l)?;
        let stop = opts.stop_loss.is_some_and(|s| l <= s);
        if logged.binary_search(&step).is_ok() || stop {
            trace.steps.push(step);
            trace.loss.push(l);
            if checkpoint_spectra {
                let pack = net.signals(x)?;
                let fim = spectra::build_dual_fim(&pack, &net)?;
                let cross = spectra::apply_softmax_q(&fim, &pack.g)?;
                trace.lambda_max_f.push(linalg::sym_eigenvalues(fim.matrix.as_ref())?[0]);
                trace.lambda_max_fcross_emp.push(linalg::sym_eigenvalues(cross.matrix.as_ref())?[0]);
            }
        }
        if stop || step == opts.steps {
            trace.g_t = Some(softmax(f));
            trace.f_t = Some(f.clone());
            break;
        }
        let e = match loss_kind {
            LossKind::Mse => Mat::from_fn(f.nrows(), f.ncols(), |i, j| (f[(i, j)] - y[(i, j)]) / n),
            LossKind::CrossEntropy => {
                let g = softmax(f);
                Mat::from_fn(f.nrows(), f.ncols(), |i, j| (g[(i, j)] - y[(i, j)]) / n)
            }
        };
        let grads = net.vjp(&fwd, &e)?;
        net.apply_step(&grads, opts.eta);
    }
    Ok((trace, net))
}

/// One-hot labels from the arg-max of each column.
pub fn one_hot_argmax(f: &Mat<f64>) -> Mat<f64> {
    let mut y = Mat::zeros(f.nrows(), f.ncols());
    for j in 0..f.ncols() {
        let col = f.col_as_slice(j);
        let k = (0..col.len()).fold(0, |best, i| if col[i] > col[best] { i } else { best });
        y[(k, j)] = 1.0;
    }
    y
}

/// Rows `step, loss_sim, loss_reference, lmax_F, lmax_Fcross_emp, lmax_lo,
/// lmax_hi`, joined on step. `lmax_F` is the measured value when a reference
/// run with spectra is supplied, otherwise the prediction.
pub fn trace_csv(sim: &TrainingTrace, reference: Option<&TrainingTrace>) -> String {
    #[derive(Default)]
    struct Row {
        loss_sim: Option<f64>,
        loss_ref: Option<f64>,
        lmax_f: Option<f64>,
        lmax_emp: Option<f64>,
        lo: Option<f64>,
        hi: Option<f64>,
    }
    let mut rows: BTreeMap<usize, Row> = BTreeMap::new();
    for (i, s) in sim.steps.iter().enumerate() {
        let r = rows.entry(*s).or_default();
        r.loss_sim = Some(sim.loss[i]);
        r.lmax_f = sim.lambda_max_f.get(i).copied();
        r.lo = sim.lambda_max_fcross_lo.get(i).copied();
        r.hi = sim.lambda_max_fcross_hi.get(i).copied();
    }
    if let Some(rt) = reference {
        for (i, s) in rt.steps.iter().enumerate() {
            let r = rows.entry(*s).or_default();
            r.loss_ref = Some(rt.loss[i]);
            if let Some(v) = rt.lambda_max_f.get(i) {
                r.lmax_f = Some(*v);
            }
            r.lmax_emp = rt.lambda_max_fcross_emp.get(i).copied();
        }
    }
    let o = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
    let mut out = String::from("step,loss_sim,loss_reference,lmax_F,lmax_Fcross_emp,lmax_lo,lmax_hi\n");
    for (s, r) in rows {
        let _ = writeln!(
            out,
            "{s},{},{},{},{},{},{}",
            o(r.loss_sim),
            o(r.loss_ref),
            o(r.lmax_f),
            o(r.lmax_emp),
            o(r.lo),
            o(r.hi)
        );
    }
    out
}
