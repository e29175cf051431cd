#![allow(dead_code)]

use must_core::datasets::{generate, EvalSet, Scenario, SourceDomain, SyntheticSpec, TargetDomain};
use must_core::must::{confidence_mask, TrainerConfig};
use must_core::nn::{cross_entropy, l1_distill_loss, ArchSpec, HeadKind, Network};
use must_core::numerics::{finite_diff_gradient, rng_normal, Matrix, Rng};

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-5;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Largest relative error and its index.
pub fn worst(analytic: &[f64], numeric: &[f64]) -> (f64, usize) {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| rel_err(*a, *b))
        .enumerate()
        .fold((0.0, 0), |acc, (i, e)| if e > acc.0 { (e, i) } else { acc })
}

pub fn as_row(v: &[f64]) -> Matrix {
    Matrix::row_vector(v.to_vec()).unwrap()
}

/// Absolute agreement accepted below the rounding noise of a central
/// difference at `FD_STEP` on an O(1) loss.
pub const FD_NOISE_FLOOR: f64 = 1e-10;

/// Pre-activations closer than this to a ReLU kink make central differences
/// meaningless; such instances are redrawn.
pub const KINK_MARGIN: f64 = 1e-3;

pub fn agrees(a: f64, b: f64) -> bool {
    rel_err(a, b) <= FD_REL_TOL || (a - b).abs() <= FD_NOISE_FLOOR
}

/// Index of the first component that disagrees, if any.
pub fn first_disagreement(analytic: &[f64], numeric: &[f64]) -> Option<usize> {
    assert_eq!(analytic.len(), numeric.len());
    analytic.iter().zip(numeric).position(|(a, b)| !agrees(*a, *b))
}

/// Random architecture: up to 3 hidden layers of up to 16 units.
pub fn random_arch(rng: &mut Rng, softmax: bool) -> ArchSpec {
    let depth = rng.below(4);
    ArchSpec {
        hidden: (0..depth).map(|_| 1 + rng.below(16)).collect(),
        input_bn: rng.uniform() < 0.5,
        hidden_bn: rng.uniform() < 0.5,
        head: Some(if softmax { HeadKind::Softmax } else { HeadKind::Sigmoid }),
    }
}

/// Fresh network whose parameters (BN scales and shifts included) are
/// jittered away from their symmetric initial values.
pub fn random_net(arch: &ArchSpec, input_dim: usize, classes: usize, domains: usize, rng: &mut Rng) -> Network {
    let mut net = Network::new(arch.layers(input_dim, classes).unwrap(), domains, rng).unwrap();
    let jitter: Vec<f64> = net
        .param_vector()
        .iter()
        .map(|p| p + 0.3 * rng.standard_normal())
        .collect();
    net.set_param_vector(&jitter).unwrap();
    net
}

/// One teacher/student step's worth of random inputs.
pub struct StepInstance {
    pub teacher: Network,
    pub student: Network,
    pub source_x: Matrix,
    pub source_y: Vec<usize>,
    pub source_domain: usize,
    pub target_x: Matrix,
    pub target_domain: usize,
    pub cfg: TrainerConfig,
}

/// Random step inputs whose forward passes all stay clear of ReLU kinks.
pub fn random_step_instance(seed: u64) -> StepInstance {
    let mut rng = Rng::with_stream(seed, 77);
    loop {
        let inst = draw_step_instance(&mut rng);
        if inst.kink_margin() >= KINK_MARGIN {
            return inst;
        }
    }
}

fn draw_step_instance(rng: &mut Rng) -> StepInstance {
    let rng = &mut *rng;
    let softmax = rng.uniform() < 0.5;
    let classes = if softmax { 2 + rng.below(3) } else { 2 };
    let dim = 2 + rng.below(4);
    let k = 1 + rng.below(3);
    let t_arch = random_arch(rng, softmax);
    let s_arch = random_arch(rng, softmax);
    let teacher = random_net(&t_arch, dim, classes, k + 1, rng);
    let student = random_net(&s_arch, dim, classes, 1, rng);
    let n_src = 4 + rng.below(7);
    let n_tgt = 4 + rng.below(7);
    let source_x = rng_normal(rng, n_src, dim, 0.5, 1.5).unwrap();
    let source_y = (0..n_src).map(|_| rng.below(classes)).collect();
    let target_x = rng_normal(rng, n_tgt, dim, -0.5, 1.0).unwrap();
    let cfg = TrainerConfig {
        lambda: 0.1 + 0.9 * rng.uniform(),
        confidence_threshold: 0.0,
        lr: 1.0,
        momentum: 0.0,
        teacher_arch: t_arch,
        student_arch: s_arch,
        ..TrainerConfig::default()
    };
    StepInstance {
        teacher,
        student,
        source_x,
        source_y,
        source_domain: rng.below(k),
        target_x,
        target_domain: k,
        cfg,
    }
}

impl StepInstance {
    /// Distance to the nearest ReLU kink over every forward pass of the step.
    pub fn kink_margin(&self) -> f64 {
        let rows = self.confident_rows();
        let z = self.target_x.select_rows(&rows).unwrap();
        [
            self.teacher.forward_batch_stats(&self.source_x, self.source_domain).unwrap().1,
            self.teacher.forward_batch_stats(&self.target_x, self.target_domain).unwrap().1,
            self.student.forward_batch_stats(&z, 0).unwrap().1,
        ]
        .iter()
        .filter_map(|t| t.min_relu_margin())
        .fold(f64::INFINITY, f64::min)
    }

    /// Confident target rows under the current teacher.
    pub fn confident_rows(&self) -> Vec<usize> {
        let (p, _) = self.teacher.forward_batch_stats(&self.target_x, self.target_domain).unwrap();
        let mask = confidence_mask(&p, self.cfg.confidence_threshold).unwrap();
        mask.iter().enumerate().filter(|(_, m)| **m).map(|(i, _)| i).collect()
    }

    /// Student outputs on the confident rows before any update.
    pub fn student_outputs(&self, rows: &[usize]) -> Matrix {
        let z = self.target_x.select_rows(rows).unwrap();
        self.student.forward_batch_stats(&z, 0).unwrap().0
    }

    pub fn teacher_clf_loss(&self, params: &[f64]) -> f64 {
        let mut t = self.teacher.clone();
        t.set_param_vector(params).unwrap();
        let (p, _) = t.forward_batch_stats(&self.source_x, self.source_domain).unwrap();
        cross_entropy(&p, &self.source_y).unwrap().0
    }

    /// Composite teacher objective with the student outputs frozen.
    pub fn teacher_total_loss(&self, params: &[f64], rows: &[usize], q: &Matrix) -> f64 {
        let mut t = self.teacher.clone();
        t.set_param_vector(params).unwrap();
        let (p_src, _) = t.forward_batch_stats(&self.source_x, self.source_domain).unwrap();
        let (p_tgt, _) = t.forward_batch_stats(&self.target_x, self.target_domain).unwrap();
        let pseudo = p_tgt.select_rows(rows).unwrap();
        cross_entropy(&p_src, &self.source_y).unwrap().0 + self.cfg.lambda * l1_distill_loss(q, &pseudo).unwrap().0
    }

    /// Student objective with the teacher's pseudo-labels frozen.
    pub fn student_loss(&self, params: &[f64], rows: &[usize]) -> f64 {
        let (p_tgt, _) = self.teacher.forward_batch_stats(&self.target_x, self.target_domain).unwrap();
        let pseudo = p_tgt.select_rows(rows).unwrap();
        let mut s = self.student.clone();
        s.set_param_vector(params).unwrap();
        let z = self.target_x.select_rows(rows).unwrap();
        let (q, _) = s.forward_batch_stats(&z, 0).unwrap();
        l1_distill_loss(&q, &pseudo).unwrap().0
    }
}

pub fn fd(loss: impl Fn(&[f64]) -> f64, at: &[f64]) -> Vec<f64> {
    finite_diff_gradient(|m| loss(m.data()), &as_row(at), FD_STEP).unwrap().into_data()
}

pub struct Problem {
    pub sources: Vec<SourceDomain>,
    pub target: TargetDomain,
    pub eval: EvalSet,
    pub num_classes: usize,
}

pub fn problem(scenario: Scenario, seed: u64) -> Problem {
    let d = generate(&SyntheticSpec {
        scenario,
        seed,
        ..SyntheticSpec::default()
    })
    .unwrap();
    Problem {
        sources: d.source_domains().unwrap(),
        target: d.target_domain().unwrap(),
        eval: d.eval_set().unwrap(),
        num_classes: d.num_classes,
    }
}

impl Problem {
    pub fn domains(&self) -> must_core::must::Domains<'_> {
        must_core::must::Domains {
            sources: &self.sources,
            target: &self.target,
            num_classes: self.num_classes,
        }
    }
}

/// Six-point λ × C_th grid on clusters2d, scored by reverse validation, plus
/// each candidate's true target error (its student trained on all data and
/// scored on the held-out target labels).
pub fn rv_grid_outcome(seed: u64) -> (must_core::rv::Selection, Vec<f64>) {
    use must_core::must::{accuracy, predict, train};
    let p = problem(Scenario::Clusters2d, seed);
    let grid: Vec<TrainerConfig> = [0.25, 0.5, 1.0]
        .iter()
        .flat_map(|&lambda| {
            [0.6, 0.9].map(|confidence_threshold| TrainerConfig {
                seed,
                lambda,
                confidence_threshold,
                ..TrainerConfig::default()
            })
        })
        .collect();
    let selection = must_core::rv::select(&grid, &p.domains(), seed, must_core::rv::Criterion::Rv).unwrap();
    let errors = grid
        .iter()
        .map(|c| {
            let pair = train(c, &p.domains(), None).unwrap();
            1.0 - accuracy(&predict(&pair.student, &p.eval.features, 0).unwrap(), &p.eval.labels)
        })
        .collect();
    (selection, errors)
}

/// Average ranks, ties sharing the mean of their positions.
pub fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|a, b| v[*a].total_cmp(&v[*b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        for k in i..=j {
            out[idx[k]] = (i + j) as f64 / 2.0;
        }
        i = j + 1;
    }
    out
}

/// Spearman correlation; 0 when either side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}

/// Random sigmoid-head teacher with a bank of `k + 1` entries, a random
/// binary student and 50 target points; returns the teacher's target entry.
pub fn binary_pair(seed: u64) -> (Network, Network, Matrix, usize) {
    let mut rng = Rng::with_stream(seed, 31);
    let dim = 2 + rng.below(3);
    let t_arch = random_arch(&mut rng, false);
    let s_arch = random_arch(&mut rng, false);
    let k = 1 + rng.below(3);
    let teacher = random_net(&t_arch, dim, 2, k + 1, &mut rng);
    let student = random_net(&s_arch, dim, 2, 1, &mut rng);
    let target = rng_normal(&mut rng, 50, dim, 0.0, 1.5).unwrap();
    (teacher, student, target, k)
}
