//! Joint teacher/student training with confidence-gated distillation.
//!
//! One step, in order:
//! 1. teacher forward on a source batch, cross-entropy on source labels;
//! 2. teacher forward on a target batch through its target batch-norm entry,
//!    giving soft pseudo-labels;
//! 3. confidence gate on the pseudo-labels;
//! 4. student forward on the confident target rows, L1 distillation loss,
//!    student update;
//! 5. teacher update on `clf + lambda * student_loss`, where the distillation
//!    term reaches the teacher through its target probabilities and the
//!    student outputs are those computed in 4 (before the student moved).

use std::fmt;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::datasets::{EvalSet, SourceDomain, TargetDomain};
use crate::error::{Error, Result};
use crate::nn::{
    argmax_rows, cross_entropy, l1_distill_loss, sgd_momentum_step, ArchSpec, Mode, Network,
};
use crate::numerics::{Matrix, Rng};

const STREAM_TEACHER_INIT: u64 = 0;
const STREAM_STUDENT_INIT: u64 = 1;
const STREAM_SOURCE_BATCHES: u64 = 2;
const STREAM_TARGET_BATCHES: u64 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Teacher and student trained jointly.
    Must,
    /// Teacher alone, one batch-norm entry per domain (sources plus target).
    OnlyBn,
    /// Teacher alone, one shared batch-norm entry, never sees target data.
    SourceOnly,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Must => "must",
            Variant::OnlyBn => "only-bn",
            Variant::SourceOnly => "source-only",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "must" => Ok(Variant::Must),
            "only-bn" => Ok(Variant::OnlyBn),
            "source-only" => Ok(Variant::SourceOnly),
            other => Err(Error::Config(format!(
                "unknown variant {other:?} (expected must, only-bn or source-only)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub lambda: f64,
    pub confidence_threshold: f64,
    pub lr: f64,
    pub momentum: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub record_every: usize,
    pub teacher_arch: ArchSpec,
    pub student_arch: ArchSpec,
    pub variant: Variant,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            lambda: 0.5,
            confidence_threshold: 0.6,
            lr: 0.001,
            momentum: 0.9,
            steps: 2000,
            batch_size: 32,
            seed: 0,
            record_every: 10,
            teacher_arch: ArchSpec::default(),
            student_arch: ArchSpec::default(),
            variant: Variant::Must,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if !(0.0..=1.0).contains(&self.confidence_threshold) {
            return bad(format!(
                "confidence_threshold must lie in [0, 1], got {}",
                self.confidence_threshold
            ));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if self.record_every == 0 {
            return bad("record_every must be positive".into());
        }
        Ok(())
    }
}

/// Telemetry for one step. Losses are those computed before the updates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub source_domain: usize,
    pub loss_teacher_clf: f64,
    pub loss_student: f64,
    pub loss_teacher_total: f64,
    pub pct_confident: f64,
    pub teacher_src_acc: f64,
    pub teacher_tgt_acc: Option<f64>,
    pub student_tgt_acc: Option<f64>,
}

/// Rows whose largest class probability reaches `c_th`.
pub fn confidence_mask(teacher_probs: &Matrix, c_th: f64) -> Result<Vec<bool>> {
    if !(0.0..=1.0).contains(&c_th) {
        return Err(Error::invalid(format!("confidence threshold must lie in [0, 1], got {c_th}")));
    }
    Ok((0..teacher_probs.rows())
        .map(|r| teacher_probs.row(r).iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v)) >= c_th)
        .collect())
}

/// Inputs of a single step.
#[derive(Clone, Copy, Debug)]
pub struct StepBatch<'a> {
    pub source_x: &'a Matrix,
    pub source_y: &'a [usize],
    /// Teacher batch-norm entry for the source batch.
    pub source_domain: usize,
    /// Target batch and the teacher's target entry; `None` for source-only training.
    pub target: Option<(&'a Matrix, usize)>,
}

pub fn accuracy(predicted: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    predicted.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / labels.len() as f64
}

/// One teacher/student step. The student is updated only for [`Variant::Must`].
pub fn train_step(
    teacher: &mut Network,
    student: &mut Network,
    batch: &StepBatch<'_>,
    cfg: &TrainerConfig,
) -> Result<StepRecord> {
    if batch.source_x.rows() == 0 || batch.source_y.len() != batch.source_x.rows() {
        return Err(Error::invalid("source batch must be non-empty and fully labeled"));
    }
    let (p_src, trace_src) = teacher.forward(batch.source_x, batch.source_domain, Mode::Train)?;
    let (loss_clf, d_clf) = cross_entropy(&p_src, batch.source_y)?;
    let mut grads = teacher.backward(&trace_src, &d_clf)?;
    let teacher_src_acc = accuracy(&argmax_rows(&p_src), batch.source_y);

    let mut loss_student = 0.0;
    let mut pct_confident = 0.0;
    if let Some((target_x, target_domain)) = batch.target {
        let (p_tgt, trace_tgt) = teacher.forward(target_x, target_domain, Mode::Train)?;
        let mask = confidence_mask(&p_tgt, cfg.confidence_threshold)?;
        let confident: Vec<usize> = mask.iter().enumerate().filter(|(_, m)| **m).map(|(i, _)| i).collect();
        pct_confident = confident.len() as f64 / mask.len() as f64;

        // Train-mode batch norm cannot normalize a single row.
        let min_rows = if student.has_batch_norm() { 2 } else { 1 };
        if cfg.variant == Variant::Must && confident.len() >= min_rows {
            let z = target_x.select_rows(&confident)?;
            let pseudo = p_tgt.select_rows(&confident)?;
            let (q, trace_student) = student.forward(&z, 0, Mode::Train)?;
            let (loss, d_q) = l1_distill_loss(&q, &pseudo)?;
            let student_grads = student.backward(&trace_student, &d_q)?;
            sgd_momentum_step(student, &student_grads, cfg.lr, cfg.momentum)?;
            loss_student = loss;

            if cfg.lambda > 0.0 {
                // d|q - p|/dp = -d|q - p|/dq, with q held at its pre-update value.
                let mut d_p = Matrix::zeros(p_tgt.rows(), p_tgt.cols());
                for (row, &i) in confident.iter().enumerate() {
                    for c in 0..p_tgt.cols() {
                        d_p.set(i, c, -cfg.lambda * d_q.get(row, c));
                    }
                }
                grads = grads.add(&teacher.backward(&trace_tgt, &d_p)?)?;
            }
        }
    }
    sgd_momentum_step(teacher, &grads, cfg.lr, cfg.momentum)?;

    Ok(StepRecord {
        step: 0,
        source_domain: batch.source_domain,
        loss_teacher_clf: loss_clf,
        loss_student,
        loss_teacher_total: loss_clf + cfg.lambda * loss_student,
        pct_confident,
        teacher_src_acc,
        teacher_tgt_acc: None,
        student_tgt_acc: None,
    })
}

/// The data a training run may see.
#[derive(Clone, Copy, Debug)]
pub struct Domains<'a> {
    pub sources: &'a [SourceDomain],
    pub target: &'a TargetDomain,
    pub num_classes: usize,
}

impl Domains<'_> {
    fn validate(&self) -> Result<usize> {
        if self.sources.is_empty() {
            return Err(Error::invalid("at least one source domain is required"));
        }
        let dim = self.target.features.cols();
        for s in self.sources {
            if s.features.cols() != dim {
                return Err(Error::invalid(format!(
                    "source {} has {} features, target has {dim}",
                    s.name,
                    s.features.cols()
                )));
            }
            if s.is_empty() || s.labels.len() != s.features.rows() {
                return Err(Error::invalid(format!("source {} is empty or mislabeled", s.name)));
            }
            if let Some(l) = s.labels.iter().find(|l| **l >= self.num_classes) {
                return Err(Error::invalid(format!("source {} has label {l} >= {}", s.name, self.num_classes)));
            }
        }
        if self.target.is_empty() {
            return Err(Error::invalid("target domain is empty"));
        }
        Ok(dim)
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct TrainOptions<'a> {
    /// Labelled target copy, read only to fill the accuracy columns of the log.
    pub eval: Option<&'a EvalSet>,
    /// Capture teacher eval-mode target probabilities every this many steps (0 = never).
    pub snapshot_every: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    /// Number of completed steps when captured.
    pub step: usize,
    pub teacher_probs: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedPair {
    pub teacher: Network,
    pub student: Network,
    pub log: Vec<StepRecord>,
    pub snapshots: Vec<Snapshot>,
    pub variant: Variant,
}

impl TrainedPair {
    /// Teacher batch-norm entry used for target data.
    pub fn teacher_target_domain(&self) -> usize {
        self.teacher.num_domains() - 1
    }
}

pub fn teacher_domain_count(variant: Variant, num_sources: usize) -> usize {
    match variant {
        Variant::SourceOnly => 1,
        Variant::Must | Variant::OnlyBn => num_sources + 1,
    }
}

/// Fresh teacher and student for a run, drawn from the config seed.
pub fn init_networks(cfg: &TrainerConfig, input_dim: usize, num_classes: usize, num_sources: usize) -> Result<(Network, Network)> {
    let teacher = Network::new(
        cfg.teacher_arch.layers(input_dim, num_classes)?,
        teacher_domain_count(cfg.variant, num_sources),
        &mut Rng::with_stream(cfg.seed, STREAM_TEACHER_INIT),
    )?;
    let student = Network::new(
        cfg.student_arch.layers(input_dim, num_classes)?,
        1,
        &mut Rng::with_stream(cfg.seed, STREAM_STUDENT_INIT),
    )?;
    Ok((teacher, student))
}

pub fn train(cfg: &TrainerConfig, domains: &Domains<'_>, eval: Option<&EvalSet>) -> Result<TrainedPair> {
    train_with(
        cfg,
        domains,
        TrainOptions {
            eval,
            snapshot_every: 0,
        },
    )
}

pub fn train_with(cfg: &TrainerConfig, domains: &Domains<'_>, opts: TrainOptions<'_>) -> Result<TrainedPair> {
    cfg.validate()?;
    let dim = domains.validate()?;
    let k = domains.sources.len();
    let (mut teacher, mut student) = init_networks(cfg, dim, domains.num_classes, k)?;
    let target_domain = teacher.num_domains() - 1;
    let mut source_rng = Rng::with_stream(cfg.seed, STREAM_SOURCE_BATCHES);
    let mut target_rng = Rng::with_stream(cfg.seed, STREAM_TARGET_BATCHES);

    let mut log = Vec::with_capacity(cfg.steps.div_ceil(cfg.record_every));
    let mut snapshots = Vec::new();
    for step in 0..cfg.steps {
        let src = source_rng.below(k);
        let source = &domains.sources[src];
        let idx = source_rng.sample_indices(source.len(), cfg.batch_size);
        let source_x = source.features.select_rows(&idx)?;
        let source_y: Vec<usize> = idx.iter().map(|&i| source.labels[i]).collect();

        let target_x = match cfg.variant {
            Variant::SourceOnly => None,
            Variant::Must | Variant::OnlyBn => {
                let idx = target_rng.sample_indices(domains.target.len(), cfg.batch_size);
                Some(domains.target.features.select_rows(&idx)?)
            }
        };
        let batch = StepBatch {
            source_x: &source_x,
            source_y: &source_y,
            source_domain: if cfg.variant == Variant::SourceOnly { 0 } else { src },
            target: target_x.as_ref().map(|x| (x, target_domain)),
        };
        let mut record = train_step(&mut teacher, &mut student, &batch, cfg)?;
        record.step = step;

        if step % cfg.record_every == 0 {
            if let Some(eval) = opts.eval {
                record.teacher_tgt_acc = Some(accuracy(&predict(&teacher, &eval.features, target_domain)?, &eval.labels));
                if cfg.variant == Variant::Must {
                    record.student_tgt_acc = Some(accuracy(&predict(&student, &eval.features, 0)?, &eval.labels));
                }
            }
            log.push(record);
        }
        if opts.snapshot_every > 0 && (step + 1) % opts.snapshot_every == 0 {
            snapshots.push(Snapshot {
                step: step + 1,
                teacher_probs: teacher.predict_proba(&domains.target.features, target_domain)?,
            });
        }
    }
    Ok(TrainedPair {
        teacher,
        student,
        log,
        snapshots,
        variant: cfg.variant,
    })
}

/// Eval-mode argmax, ties to the lowest class index.
pub fn predict(net: &Network, x: &Matrix, domain: usize) -> Result<Vec<usize>> {
    Ok(argmax_rows(&net.predict_proba(x, domain)?))
}

pub const LOG_COLUMNS: [&str; 9] = [
    "step",
    "source_domain",
    "loss_teacher_clf",
    "loss_student",
    "loss_teacher_total",
    "pct_confident",
    "teacher_src_acc",
    "teacher_tgt_acc",
    "student_tgt_acc",
];

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:e}")).unwrap_or_default()
}

pub fn write_log_csv(log: &[StepRecord], path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str(&LOG_COLUMNS.join(","));
    out.push('\n');
    for r in log {
        out.push_str(&format!(
            "{},{},{:e},{:e},{:e},{:e},{:e},{},{}\n",
            r.step,
            r.source_domain,
            r.loss_teacher_clf,
            r.loss_student,
            r.loss_teacher_total,
            r.pct_confident,
            r.teacher_src_acc,
            opt(r.teacher_tgt_acc),
            opt(r.student_tgt_acc)
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_log_csv(path: &Path) -> Result<Vec<StepRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line: line as u64,
        msg,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == LOG_COLUMNS.join(",") => {}
        _ => return Err(err(1, "unexpected training-log header".into())),
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != LOG_COLUMNS.len() {
            return Err(err(i + 1, format!("expected {} fields, got {}", LOG_COLUMNS.len(), f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| err(i + 1, format!("bad number {s:?}")));
        let opt_num = |s: &str| if s.is_empty() { Ok(None) } else { num(s).map(Some) };
        out.push(StepRecord {
            step: f[0].parse().map_err(|_| err(i + 1, "bad step".into()))?,
            source_domain: f[1].parse().map_err(|_| err(i + 1, "bad source_domain".into()))?,
            loss_teacher_clf: num(f[2])?,
            loss_student: num(f[3])?,
            loss_teacher_total: num(f[4])?,
            pct_confident: num(f[5])?,
            teacher_src_acc: num(f[6])?,
            teacher_tgt_acc: opt_num(f[7])?,
            student_tgt_acc: opt_num(f[8])?,
        });
    }
    Ok(out)
}

/// Long format: `step,sample,p0,...,p{C-1}`.
pub fn write_snapshots_csv(snapshots: &[Snapshot], path: &Path) -> Result<()> {
    let classes = snapshots.first().map_or(0, |s| s.teacher_probs.cols());
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let mut header = String::from("step,sample");
    for c in 0..classes {
        header.push_str(&format!(",p{c}"));
    }
    writeln!(w, "{header}").map_err(|e| Error::io(path, e))?;
    for s in snapshots {
        for r in 0..s.teacher_probs.rows() {
            let mut line = format!("{},{}", s.step, r);
            for v in s.teacher_probs.row(r) {
                line.push_str(&format!(",{v:e}"));
            }
            writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_snapshots_csv(path: &Path) -> Result<Vec<Snapshot>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line: line as u64,
        msg,
    };
    let mut lines = text.lines().enumerate();
    let header = lines.next().map(|(_, h)| h).unwrap_or_default();
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 3 || cols[0] != "step" || cols[1] != "sample" {
        return Err(err(1, "snapshot header must be step,sample,p0,...".into()));
    }
    let classes = cols.len() - 2;
    let mut out: Vec<(usize, Vec<f64>)> = Vec::new();
    for (i, line) in lines {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != cols.len() {
            return Err(err(i + 1, format!("expected {} fields, got {}", cols.len(), f.len())));
        }
        let step: usize = f[0].parse().map_err(|_| err(i + 1, "bad step".into()))?;
        let sample: usize = f[1].parse().map_err(|_| err(i + 1, "bad sample".into()))?;
        if out.last().is_none_or(|(s, _)| *s != step) {
            out.push((step, Vec::new()));
        }
        let (_, data) = out.last_mut().expect("pushed above");
        if sample * classes != data.len() {
            return Err(err(i + 1, format!("sample {sample} out of order")));
        }
        for v in &f[2..] {
            data.push(v.parse().map_err(|_| err(i + 1, format!("bad probability {v:?}")))?);
        }
    }
    out.into_iter()
        .map(|(step, data)| {
            let rows = data.len() / classes;
            Ok(Snapshot {
                step,
                teacher_probs: Matrix::new(rows, classes, data)?,
            })
        })
        .collect()
}
