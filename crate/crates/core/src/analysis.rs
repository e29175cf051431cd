//! Diagnostics: the gradient bound for the distillation regularizer on a
//! sigmoid teacher, prediction consistency over training, and margin probing.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::must::Snapshot;
use crate::nn::{argmax_rows, sigmoid, HeadKind, Network};
use crate::numerics::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct SigmoidIdentityReport {
    pub points: usize,
    /// Largest |σ(g)σ(-g) - 1/(2 + e^-g + e^g)|.
    pub max_identity_error: f64,
    /// Largest σ'(g) - e^-|g|; never positive when the bound holds.
    pub max_bound_excess: f64,
    pub passed: bool,
}

pub const SIGMOID_IDENTITY_TOL: f64 = 1e-12;

pub fn sigmoid_derivative(g: f64) -> f64 {
    sigmoid(g) * sigmoid(-g)
}

pub fn check_sigmoid_derivative_identity(g_values: &[f64]) -> SigmoidIdentityReport {
    let mut max_identity_error = 0.0_f64;
    let mut max_bound_excess = f64::NEG_INFINITY;
    let mut finite = true;
    for &g in g_values {
        if !g.is_finite() {
            finite = false;
            continue;
        }
        let d = sigmoid_derivative(g);
        let closed = 1.0 / (2.0 + (-g).exp() + g.exp());
        max_identity_error = max_identity_error.max((d - closed).abs());
        max_bound_excess = max_bound_excess.max(d - (-g.abs()).exp());
    }
    SigmoidIdentityReport {
        points: g_values.len(),
        max_identity_error,
        max_bound_excess,
        passed: finite && max_identity_error <= SIGMOID_IDENTITY_TOL && max_bound_excess <= 0.0,
    }
}

/// Per-parameter comparison of the measured regularizer gradient with its bound.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundReport {
    pub param_names: Vec<String>,
    pub lambda: f64,
    /// max over samples of |dg/dθ_j|.
    pub a: Vec<f64>,
    /// min over samples of |g|.
    pub rho: f64,
    pub mean_residual: f64,
    pub mean_abs_residual: f64,
    /// |d(λ·mean (f_θ - f_φ)²)/dθ_j|.
    pub lhs: Vec<f64>,
    /// 2λ·mean|f_θ - f_φ|·A_j·e^-ρ.
    pub rhs: Vec<f64>,
    /// Same with the signed mean residual; may be negative.
    pub rhs_signed: Vec<f64>,
    pub slack: Vec<f64>,
    /// Largest |df/dθ_j(z)| - |dg/dθ_j(z)|·e^-|g(z)| over samples and parameters.
    pub per_sample_max_excess: f64,
}

pub const BOUND_SLACK_TOL: f64 = 1e-9;

impl BoundReport {
    pub fn min_slack(&self) -> f64 {
        self.slack.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn passed(&self) -> bool {
        self.min_slack() >= -BOUND_SLACK_TOL && self.per_sample_max_excess <= BOUND_SLACK_TOL
    }
}

/// Bound check for the L2 distillation term on a binary sigmoid teacher. Both
/// networks run in eval mode: the teacher with batch-norm entry
/// `teacher_domain`, the student with its only entry.
pub fn lemma_bound_report(
    teacher: &Network,
    student: &Network,
    target: &Matrix,
    teacher_domain: usize,
    lambda: f64,
) -> Result<BoundReport> {
    if teacher.head() != HeadKind::Sigmoid || student.num_classes() != 2 {
        return Err(Error::invalid("bound analysis needs a sigmoid-head teacher and a binary student"));
    }
    if target.rows() == 0 {
        return Err(Error::invalid("bound analysis needs at least one target sample"));
    }
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::invalid(format!("lambda must be >= 0, got {lambda}")));
    }
    let n = target.rows();
    let (p_teacher, trace) = teacher.forward_eval(target, teacher_domain)?;
    let p_student = student.predict_proba(target, 0)?;
    let residual: Vec<f64> = (0..n).map(|r| p_teacher.get(r, 1) - p_student.get(r, 1)).collect();
    let mean_residual = residual.iter().sum::<f64>() / n as f64;
    let mean_abs_residual = residual.iter().map(|r| r.abs()).sum::<f64>() / n as f64;

    let mut d_probs = Matrix::zeros(n, 2);
    for (r, res) in residual.iter().enumerate() {
        d_probs.set(r, 1, lambda * 2.0 * res / n as f64);
    }
    let lhs: Vec<f64> = teacher.backward(&trace, &d_probs)?.to_vector(teacher).iter().map(|v| v.abs()).collect();

    let m = teacher.num_params();
    let mut a = vec![0.0_f64; m];
    let mut rho = f64::INFINITY;
    let mut per_sample_max_excess = f64::NEG_INFINITY;
    let up_f = Matrix::row_vector(vec![0.0, 1.0])?;
    let up_g = Matrix::filled(1, 1, 1.0);
    for r in 0..n {
        let z = target.select_rows(&[r])?;
        let (_, tr) = teacher.forward_eval(&z, teacher_domain)?;
        let g = tr.logits().get(0, 0);
        rho = rho.min(g.abs());
        let df = teacher.backward(&tr, &up_f)?.to_vector(teacher);
        let dg = teacher.backward_from_logits(&tr, &up_g)?.to_vector(teacher);
        let decay = (-g.abs()).exp();
        for j in 0..m {
            a[j] = a[j].max(dg[j].abs());
            per_sample_max_excess = per_sample_max_excess.max(df[j].abs() - dg[j].abs() * decay);
        }
    }
    let scale = 2.0 * lambda * (-rho).exp();
    let rhs: Vec<f64> = a.iter().map(|aj| scale * mean_abs_residual * aj).collect();
    let rhs_signed: Vec<f64> = a.iter().map(|aj| scale * mean_residual * aj).collect();
    let slack = rhs.iter().zip(&lhs).map(|(r, l)| r - l).collect();
    Ok(BoundReport {
        param_names: teacher.param_names(),
        lambda,
        a,
        rho,
        mean_residual,
        mean_abs_residual,
        lhs,
        rhs,
        rhs_signed,
        slack,
        per_sample_max_excess,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConsistencyReport {
    pub snapshot_steps: Vec<usize>,
    pub window: usize,
    /// `per_sample_std[w][i]`: std of sample `i` over snapshots `w..w + window`.
    pub per_sample_std: Vec<Vec<f64>>,
    pub mean_std: Vec<f64>,
}

impl ConsistencyReport {
    pub fn time_averaged_mean_std(&self) -> f64 {
        self.mean_std.iter().sum::<f64>() / self.mean_std.len() as f64
    }
}

/// Class-0 probability for binary outputs, max-class probability otherwise.
fn tracked_statistic(probs: &Matrix, row: usize) -> f64 {
    if probs.cols() == 2 {
        probs.get(row, 0)
    } else {
        probs.row(row).iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

pub fn consistency_track(snapshots: &[Snapshot], window: usize) -> Result<ConsistencyReport> {
    if window == 0 {
        return Err(Error::invalid("consistency window must be positive"));
    }
    if window > snapshots.len() {
        return Err(Error::invalid(format!(
            "consistency window {window} exceeds the {} available snapshots",
            snapshots.len()
        )));
    }
    let shape = snapshots[0].teacher_probs.shape();
    if let Some(s) = snapshots.iter().find(|s| s.teacher_probs.shape() != shape) {
        return Err(Error::shape("consistency_track", shape, s.teacher_probs.shape()));
    }
    let n = shape.0;
    let series: Vec<Vec<f64>> = (0..n)
        .map(|i| snapshots.iter().map(|s| tracked_statistic(&s.teacher_probs, i)).collect())
        .collect();
    let positions = snapshots.len() - window + 1;
    let mut per_sample_std = Vec::with_capacity(positions);
    let mut mean_std = Vec::with_capacity(positions);
    for w in 0..positions {
        let stds: Vec<f64> = series
            .iter()
            .map(|s| {
                let block = &s[w..w + window];
                let mean = block.iter().sum::<f64>() / window as f64;
                (block.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / window as f64).sqrt()
            })
            .collect();
        mean_std.push(stds.iter().sum::<f64>() / n as f64);
        per_sample_std.push(stds);
    }
    Ok(ConsistencyReport {
        snapshot_steps: snapshots.iter().map(|s| s.step).collect(),
        window,
        per_sample_std,
        mean_std,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MarginCurve {
    pub epsilons: Vec<f64>,
    /// Samples flipped at or before each radius.
    pub flip_counts: Vec<usize>,
    /// Smallest grid radius that flips each sample.
    pub flip_eps: Vec<Option<f64>>,
    /// Samples whose input gradient vanished; they never flip.
    pub zero_gradient: Vec<usize>,
}

impl MarginCurve {
    pub fn count_at(&self, eps: f64) -> Option<usize> {
        self.epsilons.iter().position(|e| *e == eps).map(|i| self.flip_counts[i])
    }

    /// Count at the middle grid point (lower middle for even lengths).
    pub fn median_count(&self) -> (f64, usize) {
        let i = (self.epsilons.len() - 1) / 2;
        (self.epsilons[i], self.flip_counts[i])
    }
}

/// Parses `start:step:stop` (inclusive) or a comma-separated list.
pub fn parse_eps_grid(text: &str) -> Result<Vec<f64>> {
    let bad = |m: String| Error::Config(format!("eps grid {text:?}: {m}"));
    let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad(format!("bad number {s:?}")));
    let grid = if text.contains(':') {
        let parts: Vec<&str> = text.split(':').collect();
        if parts.len() != 3 {
            return Err(bad("expected start:step:stop".into()));
        }
        let (start, step, stop) = (num(parts[0])?, num(parts[1])?, num(parts[2])?);
        if !(step > 0.0) || stop < start {
            return Err(bad("step must be positive and stop >= start".into()));
        }
        let count = ((stop - start) / step + 1e-9).floor() as usize + 1;
        (0..count).map(|i| start + i as f64 * step).collect()
    } else {
        text.split(',').map(num).collect::<Result<Vec<_>>>()?
    };
    validate_eps_grid(&grid)?;
    Ok(grid)
}

fn validate_eps_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::invalid("eps grid is empty"));
    }
    if grid.iter().any(|e| !e.is_finite() || *e < 0.0) {
        return Err(Error::invalid("eps grid values must be finite and non-negative"));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("eps grid must be strictly increasing"));
    }
    Ok(())
}

/// Moves every sample against the normalized input gradient of its predicted
/// class probability (eval mode) and records the first radius that changes
/// the prediction.
pub fn margin_probe(net: &Network, features: &Matrix, domain: usize, eps_grid: &[f64]) -> Result<MarginCurve> {
    validate_eps_grid(eps_grid)?;
    let (n, d) = features.shape();
    let (probs, trace) = net.forward_eval(features, domain)?;
    let predicted = argmax_rows(&probs);
    let mut upstream = Matrix::zeros(n, probs.cols());
    for (r, &c) in predicted.iter().enumerate() {
        upstream.set(r, c, 1.0);
    }
    let grads = net.backward(&trace, &upstream)?;
    let mut direction = grads.input().clone();
    let mut zero_gradient = Vec::new();
    for r in 0..n {
        let norm = direction.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        let row = direction.row_mut(r);
        if norm > 0.0 && norm.is_finite() {
            row.iter_mut().for_each(|v| *v /= norm);
        } else {
            row.iter_mut().for_each(|v| *v = 0.0);
            zero_gradient.push(r);
        }
    }
    let mut flip_eps: Vec<Option<f64>> = vec![None; n];
    let mut flip_counts = Vec::with_capacity(eps_grid.len());
    let mut flipped = 0;
    for &eps in eps_grid {
        let moved = features.sub(&direction.scale(eps))?;
        let now = argmax_rows(&net.predict_proba(&moved, domain)?);
        for r in 0..n {
            if flip_eps[r].is_none() && d > 0 && !zero_gradient.contains(&r) && now[r] != predicted[r] {
                flip_eps[r] = Some(eps);
                flipped += 1;
            }
        }
        flip_counts.push(flipped);
    }
    Ok(MarginCurve {
        epsilons: eps_grid.to_vec(),
        flip_counts,
        flip_eps,
        zero_gradient,
    })
}

/// `key = value` lines.
pub fn render_summary(pairs: &[(&str, String)]) -> String {
    let mut out = String::new();
    for (k, v) in pairs {
        let _ = writeln!(out, "{k} = {v}");
    }
    out
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_bound_csv(report: &BoundReport, path: &Path) -> Result<()> {
    let mut out = String::from("param,a,lhs,rhs,rhs_signed,slack\n");
    for j in 0..report.a.len() {
        let _ = writeln!(
            out,
            "{},{:e},{:e},{:e},{:e},{:e}",
            report.param_names[j], report.a[j], report.lhs[j], report.rhs[j], report.rhs_signed[j], report.slack[j]
        );
    }
    write_text(path, &out)
}

pub fn bound_summary(report: &BoundReport, identity: &SigmoidIdentityReport) -> String {
    render_summary(&[
        ("status", if report.passed() && identity.passed { "pass" } else { "fail" }.into()),
        ("lambda", format!("{:e}", report.lambda)),
        ("rho", format!("{:e}", report.rho)),
        ("mean_residual", format!("{:e}", report.mean_residual)),
        ("mean_abs_residual", format!("{:e}", report.mean_abs_residual)),
        ("min_slack", format!("{:e}", report.min_slack())),
        ("per_sample_max_excess", format!("{:e}", report.per_sample_max_excess)),
        ("identity_points", identity.points.to_string()),
        ("identity_max_error", format!("{:e}", identity.max_identity_error)),
        ("identity_max_bound_excess", format!("{:e}", identity.max_bound_excess)),
    ])
}

pub fn write_consistency_csv(report: &ConsistencyReport, path: &Path) -> Result<()> {
    let mut out = String::from("window_index,first_step,last_step,mean_std\n");
    for (w, m) in report.mean_std.iter().enumerate() {
        let _ = writeln!(
            out,
            "{w},{},{},{m:e}",
            report.snapshot_steps[w],
            report.snapshot_steps[w + report.window - 1]
        );
    }
    write_text(path, &out)
}

/// Long format: `window_index,sample,std`.
pub fn write_consistency_samples_csv(report: &ConsistencyReport, path: &Path) -> Result<()> {
    let mut out = String::from("window_index,sample,std\n");
    for (w, stds) in report.per_sample_std.iter().enumerate() {
        for (i, s) in stds.iter().enumerate() {
            let _ = writeln!(out, "{w},{i},{s:e}");
        }
    }
    write_text(path, &out)
}

pub fn consistency_summary(report: &ConsistencyReport) -> String {
    render_summary(&[
        ("status", "pass".into()),
        ("snapshots", report.snapshot_steps.len().to_string()),
        ("window", report.window.to_string()),
        ("positions", report.mean_std.len().to_string()),
        ("time_averaged_mean_std", format!("{:e}", report.time_averaged_mean_std())),
    ])
}

pub fn write_margin_csv(curve: &MarginCurve, path: &Path) -> Result<()> {
    let mut out = String::from("epsilon,flip_count\n");
    for (e, c) in curve.epsilons.iter().zip(&curve.flip_counts) {
        let _ = writeln!(out, "{e:e},{c}");
    }
    write_text(path, &out)
}

pub fn margin_summary(curve: &MarginCurve) -> String {
    let (eps, count) = curve.median_count();
    render_summary(&[
        ("status", "pass".into()),
        ("samples", curve.flip_eps.len().to_string()),
        ("grid_points", curve.epsilons.len().to_string()),
        ("median_eps", format!("{eps:e}")),
        ("flips_at_median_eps", count.to_string()),
        ("flips_total", curve.flip_counts.last().copied().unwrap_or(0).to_string()),
        ("zero_gradient_samples", curve.zero_gradient.len().to_string()),
    ])
}
