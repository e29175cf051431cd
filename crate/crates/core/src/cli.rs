//! Run configuration and the experiment commands behind the `must-lab` binary.
//!
//! A run config is a flat `key = value` file (`#` starts a comment). Values
//! given on the command line with `--set key=value` override the file, which
//! overrides the defaults. Unknown keys are rejected.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::analysis::{
    bound_summary, check_sigmoid_derivative_identity, consistency_summary, consistency_track, lemma_bound_report,
    margin_probe, margin_summary, parse_eps_grid, write_bound_csv, write_consistency_csv,
    write_consistency_samples_csv, write_margin_csv,
};
use crate::datasets::{generate, write_domains, DomainManifest, Scenario, SyntheticSpec};
use crate::error::{Error, Result};
use crate::must::{
    accuracy, predict, read_snapshots_csv, train_with, write_log_csv, write_snapshots_csv, Domains, TrainOptions,
    TrainerConfig, Variant,
};
use crate::nn::Network;
use crate::rv::{select, write_results_csv, Criterion};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "MUST_LAB_OUT";
pub const DEFAULT_OUT: &str = "must-lab-out";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub out_dir: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    /// Empty: one run with `trainer.seed`. Otherwise one run per seed.
    pub seeds: Vec<u64>,
    pub data: SyntheticSpec,
    pub trainer: TrainerConfig,
    pub snapshot_every: usize,
    pub window: usize,
    pub eps_grid: String,
    pub identity_points: usize,
    pub grid_lambda: Vec<f64>,
    pub grid_confidence_threshold: Vec<f64>,
    pub criterion: Criterion,
    pub rv_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            out_dir: None,
            manifest: None,
            seeds: Vec::new(),
            data: SyntheticSpec::default(),
            trainer: TrainerConfig::default(),
            snapshot_every: 10,
            window: 50,
            eps_grid: "0:0.05:2".into(),
            identity_points: 10_000,
            grid_lambda: vec![0.25, 0.5, 1.0],
            grid_confidence_threshold: vec![0.6, 0.9],
            criterion: Criterion::Rv,
            rv_seed: 0,
        }
    }
}

pub const KEYS: [&str; 34] = [
    "out_dir",
    "manifest",
    "seeds",
    "scenario",
    "n_per_class",
    "num_sources",
    "num_classes",
    "shift",
    "separation",
    "noise_std",
    "data_seed",
    "variant",
    "lambda",
    "confidence_threshold",
    "lr",
    "momentum",
    "steps",
    "batch_size",
    "seed",
    "record_every",
    "teacher_hidden",
    "teacher_input_bn",
    "teacher_hidden_bn",
    "student_hidden",
    "student_input_bn",
    "student_hidden_bn",
    "snapshot_every",
    "window",
    "eps_grid",
    "identity_points",
    "grid_lambda",
    "grid_confidence_threshold",
    "criterion",
    "rv_seed",
];

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_num(key, s))
        .collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {value:?}"))),
    }
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn opt_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let path = |v: &str| if v.is_empty() { None } else { Some(PathBuf::from(v)) };
        match key {
            "out_dir" => self.out_dir = path(v),
            "manifest" => self.manifest = path(v),
            "seeds" => self.seeds = parse_list(key, v)?,
            "scenario" => self.data.scenario = v.parse::<Scenario>()?,
            "n_per_class" => self.data.n_per_class = parse_num(key, v)?,
            "num_sources" => self.data.num_sources = parse_num(key, v)?,
            "num_classes" => self.data.num_classes = parse_num(key, v)?,
            "shift" => self.data.shift = parse_num(key, v)?,
            "separation" => self.data.separation = parse_num(key, v)?,
            "noise_std" => self.data.noise_std = parse_num(key, v)?,
            "data_seed" => self.data.seed = parse_num(key, v)?,
            "variant" => self.trainer.variant = v.parse::<Variant>()?,
            "lambda" => self.trainer.lambda = parse_num(key, v)?,
            "confidence_threshold" => self.trainer.confidence_threshold = parse_num(key, v)?,
            "lr" => self.trainer.lr = parse_num(key, v)?,
            "momentum" => self.trainer.momentum = parse_num(key, v)?,
            "steps" => self.trainer.steps = parse_num(key, v)?,
            "batch_size" => self.trainer.batch_size = parse_num(key, v)?,
            "seed" => self.trainer.seed = parse_num(key, v)?,
            "record_every" => self.trainer.record_every = parse_num(key, v)?,
            "teacher_hidden" => self.trainer.teacher_arch.hidden = parse_list(key, v)?,
            "teacher_input_bn" => self.trainer.teacher_arch.input_bn = parse_bool(key, v)?,
            "teacher_hidden_bn" => self.trainer.teacher_arch.hidden_bn = parse_bool(key, v)?,
            "student_hidden" => self.trainer.student_arch.hidden = parse_list(key, v)?,
            "student_input_bn" => self.trainer.student_arch.input_bn = parse_bool(key, v)?,
            "student_hidden_bn" => self.trainer.student_arch.hidden_bn = parse_bool(key, v)?,
            "snapshot_every" => self.snapshot_every = parse_num(key, v)?,
            "window" => self.window = parse_num(key, v)?,
            "eps_grid" => self.eps_grid = v.to_string(),
            "identity_points" => self.identity_points = parse_num(key, v)?,
            "grid_lambda" => self.grid_lambda = parse_list(key, v)?,
            "grid_confidence_threshold" => self.grid_confidence_threshold = parse_list(key, v)?,
            "criterion" => self.criterion = v.parse()?,
            "rv_seed" => self.rv_seed = parse_num(key, v)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let t = &self.trainer;
        let d = &self.data;
        Some(match key {
            "out_dir" => opt_path(&self.out_dir),
            "manifest" => opt_path(&self.manifest),
            "seeds" => join(&self.seeds),
            "scenario" => d.scenario.to_string(),
            "n_per_class" => d.n_per_class.to_string(),
            "num_sources" => d.num_sources.to_string(),
            "num_classes" => d.num_classes.to_string(),
            "shift" => d.shift.to_string(),
            "separation" => d.separation.to_string(),
            "noise_std" => d.noise_std.to_string(),
            "data_seed" => d.seed.to_string(),
            "variant" => t.variant.to_string(),
            "lambda" => t.lambda.to_string(),
            "confidence_threshold" => t.confidence_threshold.to_string(),
            "lr" => t.lr.to_string(),
            "momentum" => t.momentum.to_string(),
            "steps" => t.steps.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "seed" => t.seed.to_string(),
            "record_every" => t.record_every.to_string(),
            "teacher_hidden" => join(&t.teacher_arch.hidden),
            "teacher_input_bn" => t.teacher_arch.input_bn.to_string(),
            "teacher_hidden_bn" => t.teacher_arch.hidden_bn.to_string(),
            "student_hidden" => join(&t.student_arch.hidden),
            "student_input_bn" => t.student_arch.input_bn.to_string(),
            "student_hidden_bn" => t.student_arch.hidden_bn.to_string(),
            "snapshot_every" => self.snapshot_every.to_string(),
            "window" => self.window.to_string(),
            "eps_grid" => self.eps_grid.clone(),
            "identity_points" => self.identity_points.to_string(),
            "grid_lambda" => join(&self.grid_lambda),
            "grid_confidence_threshold" => join(&self.grid_confidence_threshold),
            "criterion" => self.criterion.to_string(),
            "rv_seed" => self.rv_seed.to_string(),
            _ => return None,
        })
    }

    /// Applies `key = value` lines; errors carry the line number.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: origin.to_path_buf(),
                line: i as u64 + 1,
                msg,
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
            self.set(k.trim(), v).map_err(|e| err(e.to_string()))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text, path)?;
        Ok(cfg)
    }

    /// Defaults, then the optional file, then `key=value` overrides.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = match file {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            cfg.set(k.trim(), v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.trainer.validate()?;
        if self.window == 0 {
            return Err(Error::Config("window must be positive".into()));
        }
        if self.identity_points == 0 {
            return Err(Error::Config("identity_points must be positive".into()));
        }
        parse_eps_grid(&self.eps_grid)?;
        let mut probe = self.trainer.clone();
        for &l in &self.grid_lambda {
            for &c in &self.grid_confidence_threshold {
                probe.lambda = l;
                probe.confidence_threshold = c;
                probe.validate()?;
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key).unwrap_or_default());
        }
        out
    }

    pub fn out_root(&self) -> PathBuf {
        self.out_dir.clone().unwrap_or_else(|| {
            std::env::var_os(OUT_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
        })
    }

    pub fn data_dir(&self) -> PathBuf {
        self.out_root().join("data")
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.manifest.clone().unwrap_or_else(|| self.data_dir().join("manifest.toml"))
    }

    /// `(seed, train dir, analysis dir)` per run.
    pub fn runs(&self) -> Vec<(u64, PathBuf, PathBuf)> {
        let root = self.out_root();
        if self.seeds.is_empty() {
            vec![(self.trainer.seed, root.join("train"), root.join("analysis"))]
        } else {
            self.seeds
                .iter()
                .map(|s| {
                    let sub = format!("seed-{s}");
                    (*s, root.join("train").join(&sub), root.join("analysis").join(&sub))
                })
                .collect()
        }
    }

    /// λ-major grid over the configured trainer.
    pub fn sweep_grid(&self) -> Vec<TrainerConfig> {
        let mut grid = Vec::new();
        for &lambda in &self.grid_lambda {
            for &confidence_threshold in &self.grid_confidence_threshold {
                grid.push(TrainerConfig {
                    lambda,
                    confidence_threshold,
                    ..self.trainer.clone()
                });
            }
        }
        grid
    }
}

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, text: &str) -> Result<PathBuf> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(path.to_path_buf())
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!("missing {what}: {} (run the producing command first)", path.display())))
    }
}

fn load_manifest(cfg: &RunConfig) -> Result<DomainManifest> {
    let path = cfg.manifest_path();
    require(&path, "domain manifest")?;
    DomainManifest::load(&path)
}

pub fn cmd_gen_data(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let domains = generate(&cfg.data)?;
    write_domains(&domains, &cfg.data_dir())
}

pub fn cmd_train(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let manifest = load_manifest(cfg)?;
    let (sources, target) = manifest.load_training_domains()?;
    let eval = manifest.load_target_eval()?;
    let domains = Domains {
        sources: &sources,
        target: &target,
        num_classes: manifest.num_classes,
    };
    let runs = cfg.runs();
    let written = runs
        .par_iter()
        .map(|(seed, dir, _)| {
            let trainer = TrainerConfig {
                seed: *seed,
                ..cfg.trainer.clone()
            };
            let pair = train_with(
                &trainer,
                &domains,
                TrainOptions {
                    eval: eval.as_ref(),
                    snapshot_every: cfg.snapshot_every,
                },
            )?;
            mkdir(dir)?;
            let mut out = Vec::new();
            let effective = RunConfig {
                trainer,
                ..cfg.clone()
            };
            out.push(write(&dir.join("config.conf"), &effective.to_text())?);
            let teacher = dir.join("teacher.json");
            pair.teacher.save_checkpoint(&teacher)?;
            out.push(teacher);
            if pair.variant == Variant::Must {
                let student = dir.join("student.json");
                pair.student.save_checkpoint(&student)?;
                out.push(student);
            }
            let log = dir.join("log.csv");
            write_log_csv(&pair.log, &log)?;
            out.push(log);
            if !pair.snapshots.is_empty() {
                let snaps = dir.join("snapshots.csv");
                write_snapshots_csv(&pair.snapshots, &snaps)?;
                out.push(snaps);
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(written.concat())
}

pub fn cmd_sweep(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let manifest = load_manifest(cfg)?;
    let (sources, target) = manifest.load_training_domains()?;
    let domains = Domains {
        sources: &sources,
        target: &target,
        num_classes: manifest.num_classes,
    };
    let grid = cfg.sweep_grid();
    let selection = select(&grid, &domains, cfg.rv_seed, cfg.criterion)?;
    let dir = cfg.out_root().join("sweep");
    mkdir(&dir)?;
    let results = dir.join("results.csv");
    write_results_csv(&selection, &results)?;
    let best = RunConfig {
        trainer: selection.best().clone(),
        ..cfg.clone()
    };
    let best_path = write(&dir.join("best.conf"), &best.to_text())?;
    Ok(vec![results, best_path])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Analysis {
    Bound,
    Consistency,
    Margin,
}

impl std::str::FromStr for Analysis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bound" => Ok(Analysis::Bound),
            "consistency" => Ok(Analysis::Consistency),
            "margin" => Ok(Analysis::Margin),
            other => Err(Error::Config(format!(
                "unknown analysis {other:?} (expected bound, consistency or margin)"
            ))),
        }
    }
}

fn load_net(path: &Path, what: &str) -> Result<Network> {
    require(path, what)?;
    Network::load_checkpoint(path)
}

pub fn identity_grid(points: usize) -> Vec<f64> {
    if points == 1 {
        return vec![0.0];
    }
    (0..points).map(|i| -10.0 + 20.0 * i as f64 / (points - 1) as f64).collect()
}

pub fn cmd_analyze(cfg: &RunConfig, which: Analysis) -> Result<Vec<PathBuf>> {
    let runs = cfg.runs();
    let target = match which {
        Analysis::Consistency => None,
        Analysis::Bound | Analysis::Margin => Some(load_manifest(cfg)?.load_training_domains()?.1),
    };
    let written = runs
        .par_iter()
        .map(|(_, train_dir, dir)| -> Result<Vec<PathBuf>> {
            let mut out = Vec::new();
            match which {
                Analysis::Bound => {
                    let teacher = load_net(&train_dir.join("teacher.json"), "teacher checkpoint")?;
                    let student = load_net(&train_dir.join("student.json"), "student checkpoint")?;
                    let target = target.as_ref().expect("loaded above");
                    let report = lemma_bound_report(
                        &teacher,
                        &student,
                        &target.features,
                        teacher.num_domains() - 1,
                        cfg.trainer.lambda,
                    )?;
                    let identity = check_sigmoid_derivative_identity(&identity_grid(cfg.identity_points));
                    mkdir(dir)?;
                    let csv = dir.join("bound.csv");
                    write_bound_csv(&report, &csv)?;
                    out.push(csv);
                    out.push(write(&dir.join("bound_summary.txt"), &bound_summary(&report, &identity))?);
                }
                Analysis::Consistency => {
                    let path = train_dir.join("snapshots.csv");
                    require(&path, "teacher snapshots")?;
                    let report = consistency_track(&read_snapshots_csv(&path)?, cfg.window)?;
                    mkdir(dir)?;
                    let csv = dir.join("consistency.csv");
                    write_consistency_csv(&report, &csv)?;
                    out.push(csv);
                    let samples = dir.join("consistency_samples.csv");
                    write_consistency_samples_csv(&report, &samples)?;
                    out.push(samples);
                    out.push(write(&dir.join("consistency_summary.txt"), &consistency_summary(&report))?);
                }
                Analysis::Margin => {
                    let teacher = load_net(&train_dir.join("teacher.json"), "teacher checkpoint")?;
                    let target = target.as_ref().expect("loaded above");
                    let grid = parse_eps_grid(&cfg.eps_grid)?;
                    let curve = margin_probe(&teacher, &target.features, teacher.num_domains() - 1, &grid)?;
                    mkdir(dir)?;
                    let csv = dir.join("margin.csv");
                    write_margin_csv(&curve, &csv)?;
                    out.push(csv);
                    out.push(write(&dir.join("margin_summary.txt"), &margin_summary(&curve))?);
                }
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(written.concat())
}

pub const ABLATION_COLUMNS: &str = "seed,variant,teacher_tgt_acc,student_tgt_acc,flips_at_median_eps";

/// Source-only, only-bn and MUST on the same data and seeds, scored on the
/// manifest's target-eval labels.
pub fn cmd_ablate(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let manifest = load_manifest(cfg)?;
    let (sources, target) = manifest.load_training_domains()?;
    let eval = manifest
        .load_target_eval()?
        .ok_or_else(|| Error::Config("ablation needs a target-eval entry in the manifest".into()))?;
    let domains = Domains {
        sources: &sources,
        target: &target,
        num_classes: manifest.num_classes,
    };
    let grid = parse_eps_grid(&cfg.eps_grid)?;
    let seeds: Vec<u64> = cfg.runs().iter().map(|r| r.0).collect();
    let jobs: Vec<(u64, Variant)> = seeds
        .iter()
        .flat_map(|s| [Variant::SourceOnly, Variant::OnlyBn, Variant::Must].map(|v| (*s, v)))
        .collect();
    let rows = jobs
        .par_iter()
        .map(|&(seed, variant)| -> Result<String> {
            let trainer = TrainerConfig {
                seed,
                variant,
                ..cfg.trainer.clone()
            };
            let pair = train_with(&trainer, &domains, TrainOptions::default())?;
            let td = pair.teacher_target_domain();
            let t_acc = accuracy(&predict(&pair.teacher, &eval.features, td)?, &eval.labels);
            let s_acc = match variant {
                Variant::Must => format!("{:e}", accuracy(&predict(&pair.student, &eval.features, 0)?, &eval.labels)),
                _ => String::new(),
            };
            let flips = margin_probe(&pair.teacher, &target.features, td, &grid)?.median_count().1;
            Ok(format!("{seed},{variant},{t_acc:e},{s_acc},{flips}\n"))
        })
        .collect::<Result<Vec<_>>>()?;
    let dir = cfg.out_root().join("ablation");
    mkdir(&dir)?;
    let mut text = String::from(ABLATION_COLUMNS);
    text.push('\n');
    text.extend(rows);
    Ok(vec![write(&dir.join("ablation.csv"), &text)?])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.set("seeds", "1, 2,3").unwrap();
        cfg.set("teacher_hidden", "8,4").unwrap();
        cfg.set("out_dir", "/tmp/x").unwrap();
        cfg.set("lambda", "0.1").unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&cfg.to_text(), Path::new("cfg")).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.to_text().lines().count(), KEYS.len());
    }

    #[test]
    fn unknown_keys_and_bad_values_name_the_line() {
        let mut cfg = RunConfig::default();
        let e = cfg.apply_text("lambda = 0.5\n\nbogus = 1\n", Path::new("run.conf")).unwrap_err();
        assert!(e.to_string().starts_with("run.conf:3:"), "{e}");
        let e = cfg.apply_text("# comment\nsteps = many", Path::new("run.conf")).unwrap_err();
        assert!(e.to_string().starts_with("run.conf:2:"), "{e}");
    }

    #[test]
    fn flags_beat_file_beat_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("run.conf");
        std::fs::write(&file, "lambda = 0.25\nsteps = 7\n").unwrap();
        let cfg = RunConfig::resolve(Some(&file), &["lambda=1.0".into()]).unwrap();
        assert_eq!(cfg.trainer.lambda, 1.0);
        assert_eq!(cfg.trainer.steps, 7);
        assert_eq!(cfg.trainer.lr, TrainerConfig::default().lr);
        assert!(RunConfig::resolve(None, &["confidence_threshold=2".into()]).is_err());
    }

    #[test]
    fn default_sweep_grid_has_six_points() {
        let grid = RunConfig::default().sweep_grid();
        assert_eq!(grid.len(), 6);
        assert_eq!((grid[1].lambda, grid[1].confidence_threshold), (0.25, 0.9));
    }

    #[test]
    fn identity_grid_endpoints() {
        let g = identity_grid(10_000);
        assert_eq!((g[0], g[9999], g.len()), (-10.0, 10.0, 10_000));
    }
}
