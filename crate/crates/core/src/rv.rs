//! Hyperparameter selection without target labels.
//!
//! Reverse validation trains forward (sources to target), pseudo-labels held-out
//! target rows with the forward student, then trains the same method backwards
//! (pseudo-labeled target as the only source, source features as the target) and
//! scores the reverse student on held-out source labels.

use std::fmt;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;

use crate::datasets::{Dataset, SourceDomain, TargetDomain};
use crate::error::{Error, Result};
use crate::must::{accuracy, init_networks, predict, train, Domains, StepRecord, TrainedPair, TrainerConfig};
use crate::nn::cross_entropy;
use crate::numerics::{Matrix, Rng};

pub const DEFAULT_TRAIN_FRACTION: f64 = 0.8;

/// Stream offset for split shuffles, kept apart from the training streams.
const SPLIT_STREAM: u64 = 1 << 32;

/// Label-stratified split; unlabeled rows (`-1`) form one stratum of their own.
/// Both parts keep the original row order.
pub fn split(ds: &Dataset, frac: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    split_stream(ds, frac, seed, 0)
}

fn split_stream(ds: &Dataset, frac: f64, seed: u64, stream: u64) -> Result<(Dataset, Dataset)> {
    if !(frac > 0.0 && frac < 1.0) {
        return Err(Error::invalid(format!("split fraction must lie in (0, 1), got {frac}")));
    }
    let mut strata: Vec<i64> = ds.labels.clone();
    strata.sort_unstable();
    strata.dedup();
    let mut rng = Rng::with_stream(seed, SPLIT_STREAM + stream);
    let mut train_idx = Vec::new();
    let mut val_idx = Vec::new();
    for label in strata {
        let mut members: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == label).collect();
        let n_train = (frac * members.len() as f64).round() as usize;
        if n_train == 0 || n_train == members.len() {
            return Err(Error::invalid(format!(
                "{}: splitting {} samples of label {label} at {frac} leaves a side empty",
                ds.name,
                members.len()
            )));
        }
        rng.shuffle(&mut members);
        train_idx.extend_from_slice(&members[..n_train]);
        val_idx.extend_from_slice(&members[n_train..]);
    }
    train_idx.sort_unstable();
    val_idx.sort_unstable();
    let part = |idx: &[usize], suffix: &str| -> Result<Dataset> {
        Dataset::new(
            format!("{}-{suffix}", ds.name),
            ds.features.select_rows(idx)?,
            idx.iter().map(|&i| ds.labels[i]).collect(),
        )
    };
    Ok((part(&train_idx, "train")?, part(&val_idx, "val")?))
}

fn target_dataset(t: &TargetDomain) -> Result<Dataset> {
    Dataset::new(t.name.clone(), t.features.clone(), vec![-1; t.len()])
}

/// End-of-run telemetry of one training run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub final_loss_teacher_clf: f64,
    pub final_loss_student: f64,
    pub final_pct_confident: f64,
    pub mean_pct_confident: f64,
}

impl RunSummary {
    fn from_log(log: &[StepRecord]) -> Self {
        let last = log.last();
        RunSummary {
            final_loss_teacher_clf: last.map_or(f64::NAN, |r| r.loss_teacher_clf),
            final_loss_student: last.map_or(f64::NAN, |r| r.loss_student),
            final_pct_confident: last.map_or(f64::NAN, |r| r.pct_confident),
            mean_pct_confident: if log.is_empty() {
                f64::NAN
            } else {
                log.iter().map(|r| r.pct_confident).sum::<f64>() / log.len() as f64
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RVResult {
    pub candidate: TrainerConfig,
    pub rv_loss: f64,
    pub forward: RunSummary,
    pub reverse: RunSummary,
}

fn ensure_rows(ds: &Dataset, min: usize) -> Result<()> {
    if ds.len() < min {
        return Err(Error::invalid(format!("{}: split has {} rows, need at least {min}", ds.name, ds.len())));
    }
    Ok(())
}

pub fn reverse_validate(candidate: &TrainerConfig, domains: &Domains<'_>, seed: u64) -> Result<RVResult> {
    candidate.validate()?;
    let c = domains.num_classes;
    let k = domains.sources.len();
    let mut src_train = Vec::with_capacity(k);
    let mut src_val = Vec::with_capacity(k);
    for (i, s) in domains.sources.iter().enumerate() {
        let (tr, va) = split_stream(&s.to_dataset(), DEFAULT_TRAIN_FRACTION, seed, i as u64)?;
        ensure_rows(&tr, 2)?;
        ensure_rows(&va, 2)?;
        src_train.push(tr.to_source(c)?);
        src_val.push(va.to_source(c)?);
    }
    let (tgt_train, tgt_val) = split_stream(&target_dataset(domains.target)?, DEFAULT_TRAIN_FRACTION, seed, k as u64)?;
    ensure_rows(&tgt_train, 2)?;
    ensure_rows(&tgt_val, 2)?;
    let tgt_train = tgt_train.to_target()?;

    let forward = train(
        candidate,
        &Domains {
            sources: &src_train,
            target: &tgt_train,
            num_classes: c,
        },
        None,
    )?;
    let pseudo = predict(&forward.student, &tgt_val.features, 0)?;
    let reverse_source = SourceDomain {
        name: format!("{}-pseudo", domains.target.name),
        features: tgt_val.features.clone(),
        labels: pseudo,
    };
    let union: Vec<&Matrix> = src_train.iter().map(|s| &s.features).collect();
    let reverse_target = TargetDomain {
        name: "sources-train".into(),
        features: Matrix::vstack(&union)?,
    };
    let reverse = train(
        candidate,
        &Domains {
            sources: std::slice::from_ref(&reverse_source),
            target: &reverse_target,
            num_classes: c,
        },
        None,
    )?;

    let rv_loss = source_val_loss(&reverse, &src_val)?;
    if !rv_loss.is_finite() || rv_loss < 0.0 {
        return Err(Error::NonFinite(format!("reverse-validation loss {rv_loss}")));
    }
    Ok(RVResult {
        candidate: candidate.clone(),
        rv_loss,
        forward: RunSummary::from_log(&forward.log),
        reverse: RunSummary::from_log(&reverse.log),
    })
}

/// Reverse student's cross-entropy over the pooled source validation rows.
fn source_val_loss(reverse: &TrainedPair, src_val: &[SourceDomain]) -> Result<f64> {
    let x: Vec<&Matrix> = src_val.iter().map(|s| &s.features).collect();
    let y: Vec<usize> = src_val.iter().flat_map(|s| s.labels.iter().copied()).collect();
    let probs = reverse.student.predict_proba(&Matrix::vstack(&x)?, 0)?;
    Ok(cross_entropy(&probs, &y)?.0)
}

/// Loss of an untrained reverse student on the given validation rows; the
/// value reverse validation reports for `steps = 0`.
pub fn untrained_reverse_loss(candidate: &TrainerConfig, src_val: &[SourceDomain], num_classes: usize) -> Result<f64> {
    let dim = src_val
        .first()
        .map(|s| s.features.cols())
        .ok_or_else(|| Error::invalid("no validation sources"))?;
    let (teacher, student) = init_networks(candidate, dim, num_classes, 1)?;
    let pair = TrainedPair {
        teacher,
        student,
        log: Vec::new(),
        snapshots: Vec::new(),
        variant: candidate.variant,
    };
    source_val_loss(&pair, src_val)
}

/// Mean accuracy over source domains of the student trained on all data.
pub fn student_source_accuracy(candidate: &TrainerConfig, domains: &Domains<'_>) -> Result<f64> {
    let pair = train(candidate, domains, None)?;
    student_source_accuracy_of(&pair, domains.sources)
}

pub fn student_source_accuracy_of(pair: &TrainedPair, sources: &[SourceDomain]) -> Result<f64> {
    let mut total = 0.0;
    for s in sources {
        total += accuracy(&predict(&pair.student, &s.features, 0)?, &s.labels);
    }
    Ok(total / sources.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Criterion {
    Rv,
    StudentSrcAcc,
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Criterion::Rv => "rv",
            Criterion::StudentSrcAcc => "student-src-acc",
        })
    }
}

impl FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rv" => Ok(Criterion::Rv),
            "student-src-acc" => Ok(Criterion::StudentSrcAcc),
            other => Err(Error::Config(format!(
                "unknown criterion {other:?} (expected rv or student-src-acc)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CandidateResult {
    pub index: usize,
    pub rv: RVResult,
    pub student_src_acc: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub criterion: Criterion,
    pub best_index: usize,
    pub results: Vec<CandidateResult>,
}

impl Selection {
    pub fn best(&self) -> &TrainerConfig {
        &self.results[self.best_index].rv.candidate
    }
}

/// Scores every candidate under both metrics (in parallel) and picks one by
/// `criterion`. Ties go to the earliest grid entry.
pub fn select(grid: &[TrainerConfig], domains: &Domains<'_>, seed: u64, criterion: Criterion) -> Result<Selection> {
    if grid.is_empty() {
        return Err(Error::invalid("selection grid is empty"));
    }
    let results = grid
        .par_iter()
        .enumerate()
        .map(|(index, cand)| {
            Ok(CandidateResult {
                index,
                rv: reverse_validate(cand, domains, seed)?,
                student_src_acc: student_source_accuracy(cand, domains)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut best_index = 0;
    for (i, r) in results.iter().enumerate().skip(1) {
        let b = &results[best_index];
        let better = match criterion {
            Criterion::Rv => r.rv.rv_loss < b.rv.rv_loss,
            Criterion::StudentSrcAcc => r.student_src_acc > b.student_src_acc,
        };
        if better {
            best_index = i;
        }
    }
    Ok(Selection {
        criterion,
        best_index,
        results,
    })
}

pub fn format_hidden(hidden: &[usize]) -> String {
    hidden.iter().map(|h| h.to_string()).collect::<Vec<_>>().join(";")
}

pub const RESULTS_COLUMNS: &str = "index,lambda,confidence_threshold,lr,momentum,steps,batch_size,seed,record_every,variant,\
teacher_hidden,teacher_input_bn,teacher_hidden_bn,student_hidden,student_input_bn,student_hidden_bn,\
rv_loss,student_src_acc,forward_final_pct_confident,reverse_final_pct_confident,selected";

pub fn write_results_csv(selection: &Selection, path: &Path) -> Result<()> {
    let mut out = String::from(RESULTS_COLUMNS);
    out.push('\n');
    for r in &selection.results {
        let c = &r.rv.candidate;
        let _ = writeln!(
            out,
            "{},{:e},{:e},{:e},{:e},{},{},{},{},{},{},{},{},{},{},{},{:e},{:e},{:e},{:e},{}",
            r.index,
            c.lambda,
            c.confidence_threshold,
            c.lr,
            c.momentum,
            c.steps,
            c.batch_size,
            c.seed,
            c.record_every,
            c.variant,
            format_hidden(&c.teacher_arch.hidden),
            c.teacher_arch.input_bn,
            c.teacher_arch.hidden_bn,
            format_hidden(&c.student_arch.hidden),
            c.student_arch.input_bn,
            c.student_arch.hidden_bn,
            r.rv.rv_loss,
            r.student_src_acc,
            r.rv.forward.final_pct_confident,
            r.rv.reverse.final_pct_confident,
            r.index == selection.best_index
        );
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
