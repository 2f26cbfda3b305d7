//! The subcommands. Each one computes everything first and then writes its
//! files, so output order never depends on scheduling.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use fimspec::dynamics::{self, LossKind, TrainOptions};
use fimspec::gauss::QuadratureRule;
use fimspec::linalg;
use fimspec::meanfield::{order_params, MomentSource, NetworkConfig, OrderParams};
use fimspec::network::{sample_inputs, NetworkInstance, Parameterization};
use fimspec::spectra::{self, EnsembleSpec, Histogram, SummaryRow, TrialRecord, HIST_FLOOR};
use fimspec::theory::{self, GramKind, SoftmaxCoeffs};
use serde_json::json;

use crate::config::ExperimentConfig;
use crate::error::CliError;

type Result<T> = std::result::Result<T, CliError>;

/// Output directory of one run; records every file it writes.
pub struct Output {
    dir: PathBuf,
    written: Vec<String>,
}

impl Output {
    pub fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        Ok(Output { dir: dir.to_path_buf(), written: Vec::new() })
    }

    pub fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        let path = self.dir.join(name);
        std::fs::write(&path, contents).map_err(|e| CliError::io(&path, e))?;
        self.written.push(name.to_string());
        Ok(())
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn files(&self) -> &[String] {
        &self.written
    }
}

fn stem(kind: GramKind) -> String {
    kind.to_string().replace(':', "-")
}

fn theory_params(cfg: &ExperimentConfig, net: &NetworkConfig) -> Result<OrderParams> {
    let rule = QuadratureRule::gauss_hermite(cfg.quadrature_order)?;
    Ok(order_params(net, &rule, MomentSource::ClosedFormWhenAvailable)?)
}

fn pretty(v: &serde_json::Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("json serializes");
    s.push('\n');
    s
}

pub fn orderparams(cfg: &ExperimentConfig, out: &mut Output) -> Result<()> {
    let op = theory_params(cfg, &cfg.network()?)?;
    out.write("orderparams.csv", &op.to_csv())?;
    out.write("kappas.csv", &op.kappas_csv())
}

pub fn predict(cfg: &ExperimentConfig, out: &mut Output) -> Result<()> {
    let net = cfg.network()?;
    let kinds = cfg.gram_kinds()?;
    let op = theory_params(cfg, &net)?;
    // cross-entropy predictions use the softmax outputs of network `seed`, trial 0
    let coeffs = if kinds.iter().any(|k| k.is_cross()) {
        let inst = NetworkInstance::random(&net, Parameterization::Standard, cfg.seed, 0)?;
        let x = sample_inputs(cfg.samples, net.input_dim(), cfg.seed, 0);
        let pack = inst.signals(&x)?;
        Some(SoftmaxCoeffs::from_softmax(&pack.softmax_flat(), net.outputs, cfg.samples)?)
    } else {
        None
    };
    let mut records = Vec::with_capacity(kinds.len());
    for &kind in &kinds {
        let p = theory::predict(kind, &op, &net, cfg.samples, coeffs.as_ref())?;
        let mut r = serde_json::to_value(p.record()).expect("record serializes");
        if let Ok(eta) = theory::critical_learning_rate(&p) {
            r["critical_learning_rate"] = json!(eta);
        }
        records.push(r);
    }
    let mut doc = json!({
        "depth": net.depth,
        "width": net.width,
        "outputs": net.outputs,
        "samples": cfg.samples,
        "kappa1": op.kappa1,
        "kappa2": op.kappa2,
        "predictions": records,
    });
    if let Some(b) = coeffs {
        doc["softmax_coefficients"] = json!({
            "seed": cfg.seed,
            "trial": 0,
            "beta1": b.beta1,
            "beta2": b.beta2,
            "beta3": b.beta3,
            "beta4": b.beta4,
        });
    }
    out.write("predictions.json", &pretty(&doc))
}

fn ensemble(cfg: &ExperimentConfig, net: NetworkConfig, n: usize, kinds: Vec<GramKind>) -> Result<Vec<TrialRecord>> {
    let spec = EnsembleSpec {
        cfg: net,
        n_samples: n,
        kinds,
        trials: cfg.trials,
        seed: cfg.seed,
        quadrature_order: cfg.quadrature_order,
        method: None,
    };
    Ok(spectra::run_ensemble(&spec)?)
}

pub fn spectrum(cfg: &ExperimentConfig, out: &mut Output) -> Result<()> {
    let net = cfg.network()?;
    let kinds = cfg.gram_kinds()?;
    let records = ensemble(cfg, net.clone(), cfg.samples, kinds.clone())?;
    let mut summary = format!("{}\n", SummaryRow::CSV_HEADER);
    for &kind in &kinds {
        let name = stem(kind);
        out.write(&format!("spectrum_{name}.csv"), &spectra::spectrum_csv(&records, kind))?;
        if let Some(h) = spectra::pooled_histogram(&records, kind, 0) {
            out.write(&format!("histogram_{name}.csv"), &h.to_csv())?;
        }
        // leaving out the expected outliers of every trial exposes the bulk
        let drop = spectra::expected_outliers(kind, net.outputs);
        if let Some(h) = spectra::pooled_histogram(&records, kind, drop) {
            out.write(&format!("histogram_{name}_bulk.csv"), &h.to_csv())?;
        }
        summary.push_str(&SummaryRow::from_records(&net, cfg.samples, kind, &records)?.to_csv_line());
        summary.push('\n');
    }
    out.write("summary.csv", &summary)
}

pub fn compare(cfg: &ExperimentConfig, out: &mut Output) -> Result<()> {
    let base = cfg.network()?;
    let kinds = cfg.gram_kinds()?;
    let widths = cfg.widths.clone().unwrap_or_else(|| vec![base.width]);
    let mut csv = format!("{}\n", SummaryRow::CSV_HEADER);
    for m in widths {
        let net = base.with_width(m);
        net.validate()?;
        let records = ensemble(cfg, net.clone(), cfg.samples, kinds.clone())?;
        for &kind in &kinds {
            csv.push_str(&SummaryRow::from_records(&net, cfg.samples, kind, &records)?.to_csv_line());
            csv.push('\n');
        }
    }
    out.write("compare.csv", &csv)
}

/// Smallest eigenvalue that is not numerically zero.
fn smallest_nonzero(eigs: &[f64]) -> Option<f64> {
    let lmax = eigs.first().copied()?;
    eigs.iter().rev().copied().find(|v| *v > lmax * HIST_FLOOR)
}

/// Pooled histogram of `eigenvalues / N`.
fn normalized_histogram(records: &[TrialRecord], kind: GramKind, n: usize) -> Option<Histogram> {
    let scale = 1.0 / n as f64;
    let rs: Vec<&TrialRecord> = records.iter().filter(|r| r.report.kind == kind).collect();
    let top = rs.iter().map(|r| r.report.lambda_max).fold(f64::NEG_INFINITY, f64::max) * scale;
    if !top.is_finite() {
        return None;
    }
    let mut pooled: Option<Histogram> = None;
    for r in rs {
        let vals: Vec<f64> = r.report.eigenvalues.iter().map(|v| v * scale).collect();
        let h = Histogram::log_binned(&vals, 0, top);
        match pooled.as_mut() {
            Some(p) => p.merge(&h),
            None => pooled = Some(h),
        }
    }
    pooled
}

pub fn ntk_scaling(cfg: &ExperimentConfig, out: &mut Output) -> Result<()> {
    let base = cfg.network()?;
    let kinds = cfg.gram_kinds()?;
    let mut points: Vec<(&str, usize, usize)> = Vec::new();
    for &n in cfg.sample_sizes.as_deref().unwrap_or(&[cfg.samples]) {
        points.push(("samples", base.width, n));
    }
    for &m in cfg.widths.as_deref().unwrap_or(&[]) {
        points.push(("proportional", m, m));
    }
    let mut csv = format!("sweep,{},lmin_emp,condition\n", SummaryRow::CSV_HEADER);
    for (sweep, m, n) in points {
        if n == 0 {
            return Err(CliError::Usage("sample sizes must be positive".into()));
        }
        let net = base.with_width(m);
        net.validate()?;
        let records = ensemble(cfg, net.clone(), n, kinds.clone())?;
        for &kind in &kinds {
            let row = SummaryRow::from_records(&net, n, kind, &records)?;
            let mins: Vec<f64> =
                records.iter().filter(|r| r.report.kind == kind).filter_map(|r| smallest_nonzero(&r.report.eigenvalues)).collect();
            let (lmin, cond) = if mins.is_empty() {
                (String::new(), String::new())
            } else {
                let k = mins.len() as f64;
                let lmin = mins.iter().sum::<f64>() / k;
                let cond = records
                    .iter()
                    .filter(|r| r.report.kind == kind)
                    .filter_map(|r| smallest_nonzero(&r.report.eigenvalues).map(|v| r.report.lambda_max / v))
                    .sum::<f64>()
                    / k;
                (format!("{lmin:e}"), format!("{cond:e}"))
            };
            let _ = writeln!(csv, "{sweep},{},{lmin},{cond}", row.to_csv_line());
            if let Some(h) = normalized_histogram(&records, kind, n) {
                out.write(&format!("histogram_{}_M{m}_N{n}.csv", stem(kind)), &h.to_csv())?;
            }
        }
    }
    out.write("ntk_scaling.csv", &csv)
}

pub fn train(cfg: &ExperimentConfig, out: &mut Output) -> Result<()> {
    let net = cfg.network()?;
    let loss_kind = cfg.loss_kind().map_err(CliError::Usage)?;
    let op = theory_params(cfg, &net)?;
    let n = cfg.samples;
    let student = NetworkInstance::random(&net, Parameterization::Standard, cfg.seed, 0)?;
    let teacher = NetworkInstance::random(&net, Parameterization::Standard, cfg.teacher_seed(), 0)?;
    let x = sample_inputs(n, net.input_dim(), cfg.seed, 0);
    let y = dynamics::one_hot_argmax(&teacher.signals(&x)?.f);
    let pack = student.signals(&x)?;
    let theta = spectra::build_tangent_kernel(&pack, &student)?;
    let lmax_f = linalg::sym_eigenvalues(spectra::build_dual_fim(&pack, &student)?.matrix.as_ref())?[0];
    let eta = cfg.eta.unwrap_or_else(|| cfg.eta_scale.unwrap_or(1.0) / lmax_f);
    let opts = TrainOptions { eta, steps: cfg.steps, stop_loss: cfg.stop_loss };

    let sim = match loss_kind {
        LossKind::CrossEntropy => dynamics::simulate_ntk_cross(&theta, &pack.f, &y, &opts, &op, &net)?,
        LossKind::Mse => dynamics::simulate_ntk_mse(&theta, &pack.f, &y, &opts)?,
    };
    let reference = if cfg.reference {
        Some(dynamics::train_reference(&student, &x, &y, loss_kind, &opts, true)?.0)
    } else {
        None
    };
    out.write("trace.csv", &dynamics::trace_csv(&sim, reference.as_ref()))?;

    let eta_critical = theory::critical_learning_rate(&theory::predict_fim_mse(&op, &net, n))?;
    let mut doc = json!({
        "loss": cfg.loss,
        "eta": eta,
        "lambda_max_f_initial": lmax_f,
        "eta_critical_theory": eta_critical,
        "teacher_seed": cfg.teacher_seed(),
        "last_step_simulation": sim.steps.last(),
        "final_loss_simulation": sim.loss.last(),
    });
    if let Some(r) = &reference {
        doc["last_step_reference"] = json!(r.steps.last());
        doc["final_loss_reference"] = json!(r.loss.last());
    }
    out.write("train.json", &pretty(&doc))
}
