//! The three-stage training procedure: a single large gradient step, a convex
//! refit of the second layer with an l1-type penalty followed by norm
//! balancing, and epochs of full gradient descent with halving weight decay.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::gauss::{sigma_ge2_from_angle, NORM_FLOOR, SIGMA_GE2_ENERGY};
use crate::network::{init_student, NetworkError, Student, Teacher};
use crate::numeric::{dot, norm, unit_angle, NeumaierSum};
use crate::objective::{evaluate, optimal_head, Gradient};

/// Smallest step size accepted by Stage-2 backtracking.
pub const MIN_STAGE2_STEP: f64 = 1e-12;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TrainError {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("stage-2 backtracking shrank the step to {0:e}, below the 1e-12 floor")]
    StepSizeCollapse(f64),
    #[error("stage-3 epoch {epoch} diverged at iteration {iter}: loss {loss:e} exceeds 10x the epoch-start value {start:e}")]
    Divergence {
        epoch: usize,
        iter: usize,
        loss: f64,
        start: f64,
    },
    #[error("non-finite parameters in stage {stage} at iteration {iter}")]
    NonFinite { stage: u8, iter: usize },
    #[error(transparent)]
    Network(#[from] NetworkError),
}

/// All step sizes, decay levels and budgets of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub eta0: f64,
    pub lambda0: f64,
    pub eps0: f64,
    pub lambda_stage2: f64,
    pub eta2: f64,
    pub t2_max: usize,
    pub tol2: f64,
    pub lambda30: f64,
    /// Number of Stage-3 epochs `K`; epoch `k` uses `lambda30 / 2^k`.
    pub halvings: usize,
    pub eta3: f64,
    pub per_epoch_cap: usize,
    pub c_stop: f64,
    /// Stage-3 trace cadence; the first and last step of each epoch are
    /// always logged.
    pub log_every: usize,
}

/// Default Stage-2 decay `s2 * eps0^(3/2)` with `s2` the second moment of
/// `sigma_{>=2}`. Larger values prune every neuron of a low-mass teacher
/// whose correlation `h_j` is dominated by a heavier neighbor, and a pruned
/// neuron never comes back.
pub fn default_lambda_stage2(eps0: f64) -> f64 {
    SIGMA_GE2_ENERGY * eps0.powf(1.5)
}

/// `0.05 / (1 + d/32)`.
pub fn default_eta3(d: usize) -> f64 {
    0.05 / (1.0 + d as f64 / 32.0)
}

/// `ceil(log2(lambda30^2 / eps_target))`, at least 1.
pub fn halvings_for_target(lambda30: f64, eps_target: f64) -> usize {
    ((lambda30 * lambda30 / eps_target).log2().ceil().max(1.0)) as usize
}

impl Schedule {
    pub fn with_defaults(d: usize, eps0: f64) -> Schedule {
        let lambda_stage2 = default_lambda_stage2(eps0);
        Schedule {
            eta0: 1.0,
            lambda0: 1.0,
            eps0,
            lambda_stage2,
            eta2: 1.0,
            t2_max: 20_000,
            tol2: 1e-13,
            lambda30: lambda_stage2,
            halvings: halvings_for_target(lambda_stage2, 1e-6),
            eta3: default_eta3(d),
            per_epoch_cap: 200_000,
            c_stop: 1.0,
            log_every: 10,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let positive = [
            ("eta0", self.eta0),
            ("lambda0", self.lambda0),
            ("eps0", self.eps0),
            ("lambda_stage2", self.lambda_stage2),
            ("eta2", self.eta2),
            ("tol2", self.tol2),
            ("lambda30", self.lambda30),
            ("eta3", self.eta3),
            ("c_stop", self.c_stop),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(TrainError::InvalidSchedule(format!("{name} must be positive, got {v}")));
            }
        }
        if self.log_every == 0 {
            return Err(TrainError::InvalidSchedule("log_every must be at least 1".into()));
        }
        Ok(())
    }

    /// Decay level of Stage-3 epoch `k` (0-based).
    pub fn lambda3(&self, k: usize) -> f64 {
        self.lambda30 / 2f64.powi(k as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub stage: u8,
    pub epoch: usize,
    pub iter: usize,
    pub lambda: f64,
    pub reg_loss: f64,
    pub sq_loss: f64,
    pub gap: f64,
    pub grad_norm: f64,
    /// `max_j (|a_j| - ||w_j||) / max(1, ||w_j||)`
    pub balance_violation: f64,
    /// `||a||^2 + ||W||_F^2`
    pub param_norm_sq: f64,
    pub wall_time: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub records: Vec<TraceRecord>,
}

impl TrainTrace {
    pub fn extend(&mut self, other: TrainTrace) {
        self.records.extend(other.records);
    }

    /// CSV with a header row; the wall-time column is included on request
    /// since it is the only non-reproducible field.
    pub fn write_csv<W: std::io::Write>(&self, mut out: W, with_wall_time: bool) -> std::io::Result<()> {
        let mut header = String::from(
            "stage,epoch,iter,lambda,reg_loss,sq_loss,gap,grad_norm,balance_violation,param_norm_sq",
        );
        if with_wall_time {
            header.push_str(",wall_time");
        }
        writeln!(out, "{header}")?;
        for r in &self.records {
            write!(
                out,
                "{},{},{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}",
                r.stage,
                r.epoch,
                r.iter,
                r.lambda,
                r.reg_loss,
                r.sq_loss,
                r.gap,
                r.grad_norm,
                r.balance_violation,
                r.param_norm_sq
            )?;
            if with_wall_time {
                write!(out, ",{:.6e}", r.wall_time)?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

/// `max_j (|a_j| - ||w_j||) / max(1, ||w_j||)`; `-inf` for an empty student.
pub fn balance_violation(student: &Student) -> f64 {
    student
        .a
        .iter()
        .zip(&student.w)
        .map(|(a, w)| {
            let nw = norm(w);
            (a.abs() - nw) / nw.max(1.0)
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

fn gap(reg_loss: f64, teacher: &Teacher, lambda: f64) -> f64 {
    reg_loss - lambda * teacher.a_l1()
}

/// `theta^1 = theta^0 - eta0 * grad L_{lambda0}(theta^0)`.
pub fn stage1_one_step(student: &Student, teacher: &Teacher, eta0: f64, lambda0: f64) -> Student {
    let g = evaluate(student, teacher, lambda0, true)
        .gradient
        .expect("gradient requested");
    apply_step(student, &g, eta0)
}

fn apply_step(student: &Student, g: &Gradient, eta: f64) -> Student {
    let mut next = student.clone();
    for (a, ga) in next.a.iter_mut().zip(&g.g_a) {
        *a -= eta * ga;
    }
    for (w, gw) in next.w.iter_mut().zip(&g.g_w) {
        for (x, gx) in w.iter_mut().zip(gw) {
            *x -= eta * gx;
        }
    }
    next.alpha -= eta * g.g_alpha;
    for (b, gb) in next.beta.iter_mut().zip(&g.g_beta) {
        *b -= eta * gb;
    }
    next
}

pub fn soft_threshold(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

/// The Stage-2 objective over second-layer weights with first-layer
/// weights frozen:
/// `F(a) = a^T G a - 2 h^T a + C + lambda sum_j ||w_j|| |a_j|`
/// where `G_jk = ||w_j|| ||w_k|| s(w_j, w_k)`, `h_j = sum_i a_i* ||w_j|| s(w_j, w_i*)`
/// and `s` is the `sigma_{>=2}` kernel. With the optimal head this is exactly
/// the regularized high-order loss.
#[derive(Debug, Clone)]
pub struct Stage2Problem {
    pub gram: Vec<Vec<f64>>,
    pub h: Vec<f64>,
    pub constant: f64,
    pub norms: Vec<f64>,
    pub lambda: f64,
}

impl Stage2Problem {
    pub fn new(student: &Student, teacher: &Teacher, lambda: f64) -> Stage2Problem {
        let m = student.width();
        let norms: Vec<f64> = student.w.iter().map(|w| norm(w)).collect();
        let units: Vec<Option<Vec<f64>>> = student
            .w
            .iter()
            .zip(&norms)
            .map(|(w, n)| (*n >= NORM_FLOOR).then(|| w.iter().map(|x| x / n).collect()))
            .collect();
        let s = |u: &[f64], v: &[f64]| {
            let c = dot(u, v).clamp(-1.0, 1.0);
            sigma_ge2_from_angle(unit_angle(u, v), c)
        };
        let mut gram = vec![vec![0.0; m]; m];
        let mut h = vec![0.0; m];
        for j in 0..m {
            let Some(uj) = &units[j] else { continue };
            gram[j][j] = norms[j] * norms[j] * SIGMA_GE2_ENERGY;
            for k in j + 1..m {
                if let Some(uk) = &units[k] {
                    let v = norms[j] * norms[k] * s(uj, uk);
                    gram[j][k] = v;
                    gram[k][j] = v;
                }
            }
            h[j] = teacher
                .a
                .iter()
                .zip(&teacher.w)
                .map(|(a, w)| a * norms[j] * s(uj, w))
                .sum();
        }
        let mut constant = NeumaierSum::default();
        for (i, (ai, wi)) in teacher.a.iter().zip(&teacher.w).enumerate() {
            constant.add(ai * ai * SIGMA_GE2_ENERGY);
            for (ak, wk) in teacher.a.iter().zip(&teacher.w).skip(i + 1) {
                constant.add(2.0 * ai * ak * s(wi, wk));
            }
        }
        Stage2Problem {
            gram,
            h,
            constant: constant.total(),
            norms,
            lambda,
        }
    }

    /// Smooth part `a^T G a - 2 h^T a + C`.
    pub fn smooth(&self, a: &[f64]) -> f64 {
        let mut acc = NeumaierSum::default();
        for (j, row) in self.gram.iter().enumerate() {
            acc.add(a[j] * dot(row, a));
            acc.add(-2.0 * self.h[j] * a[j]);
        }
        acc.add(self.constant);
        acc.total()
    }

    pub fn smooth_grad(&self, a: &[f64]) -> Vec<f64> {
        self.gram
            .iter()
            .zip(&self.h)
            .map(|(row, h)| 2.0 * (dot(row, a) - h))
            .collect()
    }

    pub fn penalty(&self, a: &[f64]) -> f64 {
        self.lambda * a.iter().zip(&self.norms).map(|(x, n)| x.abs() * n).sum::<f64>()
    }

    pub fn objective(&self, a: &[f64]) -> f64 {
        self.smooth(a) + self.penalty(a)
    }

    fn summarize(&self, a: &[f64], smooth: f64, grad: &[f64]) -> Stage2Iterate {
        let w_norm_sq: f64 = self.norms.iter().map(|n| n * n).sum();
        let balance = a
            .iter()
            .zip(&self.norms)
            .map(|(x, n)| (x.abs() - n) / n.max(1.0))
            .fold(f64::NEG_INFINITY, f64::max);
        Stage2Iterate {
            objective: smooth + self.penalty(a),
            smooth,
            grad_norm: norm(grad),
            a_norm_sq: dot(a, a) + w_norm_sq,
            balance_violation: balance,
        }
    }

    /// One proximal-gradient step of size `eta` from `a`.
    pub fn prox_step(&self, a: &[f64], grad: &[f64], eta: f64) -> Vec<f64> {
        a.iter()
            .zip(grad)
            .zip(&self.norms)
            .map(|((x, g), n)| soft_threshold(x - eta * g, eta * self.lambda * n))
            .collect()
    }
}

/// Summary of one accepted Stage-2 iterate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Iterate {
    pub objective: f64,
    /// Smooth part, equal to the square loss once the head is refit.
    pub smooth: f64,
    /// Norm of the gradient of the smooth part.
    pub grad_norm: f64,
    pub a_norm_sq: f64,
    pub balance_violation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Report {
    /// Every accepted iterate, starting point first.
    pub iterates: Vec<Stage2Iterate>,
    pub final_eta: f64,
    pub iterations: usize,
}

impl Stage2Report {
    pub fn objective(&self) -> Vec<f64> {
        self.iterates.iter().map(|it| it.objective).collect()
    }
}

/// Proximal gradient on the second layer with the first layer frozen.
/// Backtracking halves the step until the sufficient-decrease condition
/// holds, so accepted objective values never increase. The head is set to
/// its optimum for the final neurons.
pub fn stage2_fit(
    student: &Student,
    teacher: &Teacher,
    lambda: f64,
    eta2: f64,
    t2_max: usize,
    tol: f64,
) -> Result<(Student, Stage2Report), TrainError> {
    let problem = Stage2Problem::new(student, teacher, lambda);
    let mut a: Vec<f64> = student
        .a
        .iter()
        .zip(&problem.norms)
        .map(|(x, n)| if *n >= NORM_FLOOR { *x } else { 0.0 })
        .collect();
    let mut eta = eta2;
    let mut smooth = problem.smooth(&a);
    let mut grad = problem.smooth_grad(&a);
    let mut history = vec![problem.summarize(&a, smooth, &grad)];
    let mut iterations = 0;
    while iterations < t2_max {
        let (next, next_smooth) = loop {
            let cand = problem.prox_step(&a, &grad, eta);
            let diff: Vec<f64> = cand.iter().zip(&a).map(|(c, x)| c - x).collect();
            let bound = smooth + dot(&grad, &diff) + dot(&diff, &diff) / (2.0 * eta);
            let cand_smooth = problem.smooth(&cand);
            if cand_smooth <= bound + 1e-15 * bound.abs().max(1.0) {
                break (cand, cand_smooth);
            }
            eta *= 0.5;
            if eta < MIN_STAGE2_STEP {
                return Err(TrainError::StepSizeCollapse(eta));
            }
        };
        iterations += 1;
        let prev = history.last().expect("nonempty").objective;
        let value = next_smooth + problem.penalty(&next);
        if !value.is_finite() {
            return Err(TrainError::NonFinite { stage: 2, iter: iterations });
        }
        // Guard against a rounding-level uptick: keep the better iterate.
        if value > prev {
            break;
        }
        a = next;
        smooth = next_smooth;
        grad = problem.smooth_grad(&a);
        history.push(problem.summarize(&a, smooth, &grad));
        if prev - value < tol {
            break;
        }
    }
    let mut out = student.clone();
    out.a = a;
    let (alpha, beta) = optimal_head(&out);
    out.alpha = alpha;
    out.beta = beta;
    Ok((
        out,
        Stage2Report {
            iterates: history,
            final_eta: eta,
            iterations,
        },
    ))
}

/// Rescales every neuron to `|a_j| = ||w_j||` keeping `a_j ||w_j||` and the
/// direction fixed, then refits the head.
pub fn balance_norms(student: &Student) -> Student {
    let mut out = student.clone();
    for (a, w) in out.a.iter_mut().zip(out.w.iter_mut()) {
        let nw = norm(w);
        if *a == 0.0 || nw < NORM_FLOOR {
            *a = 0.0;
            w.iter_mut().for_each(|x| *x = 0.0);
            continue;
        }
        let target = (a.abs() * nw).sqrt();
        if (a.abs() - nw).abs() <= f64::EPSILON * nw {
            continue;
        }
        *a = a.signum() * target;
        let s = target / nw;
        w.iter_mut().for_each(|x| *x *= s);
    }
    let (alpha, beta) = optimal_head(&out);
    out.alpha = alpha;
    out.beta = beta;
    out
}

/// Stage-3 inner-loop settings shared by all epochs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochSettings {
    pub eta: f64,
    pub cap: usize,
    pub c_stop: f64,
    pub log_every: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochOutcome {
    pub student: Student,
    pub trace: TrainTrace,
    pub iterations: usize,
    /// True when the gap criterion (rather than the cap) ended the epoch.
    pub converged: bool,
    /// Largest balance violation seen at the periodic checks.
    pub max_balance_violation: f64,
}

/// Gradient descent at fixed decay `lambda` until the gap surrogate drops
/// to `c_stop * lambda^2` or the iteration cap is reached.
pub fn stage3_epoch(
    student: &Student,
    teacher: &Teacher,
    lambda: f64,
    epoch: usize,
    settings: EpochSettings,
    clock: Option<Instant>,
) -> Result<EpochOutcome, TrainError> {
    let threshold = settings.c_stop * lambda * lambda;
    let mut s = student.clone();
    let mut eval = evaluate(&s, teacher, lambda, true);
    let start = eval.regularized_loss;
    let mut trace = TrainTrace::default();
    let mut max_violation = balance_violation(&s);
    let mut iter = 0;
    let converged = loop {
        let g = eval.gradient.take().expect("gradient requested");
        let zeta = gap(eval.regularized_loss, teacher, lambda);
        let done = zeta.max(0.0) <= threshold;
        let stop = done || iter >= settings.cap;
        if iter % 100 == 0 {
            max_violation = max_violation.max(balance_violation(&s));
        }
        if iter % settings.log_every == 0 || stop {
            trace.records.push(TraceRecord {
                stage: 3,
                epoch,
                iter,
                lambda,
                reg_loss: eval.regularized_loss,
                sq_loss: eval.square_loss,
                gap: zeta,
                grad_norm: g.norm(),
                balance_violation: balance_violation(&s),
                param_norm_sq: s.param_norm_sq(),
                wall_time: clock.map_or(0.0, |c| c.elapsed().as_secs_f64()),
            });
        }
        if stop {
            break done;
        }
        s = apply_step(&s, &g, settings.eta);
        iter += 1;
        eval = evaluate(&s, teacher, lambda, true);
        if !eval.regularized_loss.is_finite() {
            return Err(TrainError::NonFinite { stage: 3, iter });
        }
        if eval.regularized_loss > 10.0 * start {
            return Err(TrainError::Divergence {
                epoch,
                iter,
                loss: eval.regularized_loss,
                start,
            });
        }
    };
    Ok(EpochOutcome {
        student: s,
        trace,
        iterations: iter,
        converged,
        max_balance_violation: max_violation,
    })
}

/// Milestones reported to a pipeline observer.
#[derive(Debug)]
pub enum PipelineEvent<'a> {
    Initialized(&'a Student),
    Stage1(&'a Student),
    Stage2 { student: &'a Student, report: &'a Stage2Report },
    Balanced(&'a Student),
    EpochEnd { epoch: usize, lambda: f64, outcome: &'a EpochOutcome },
}

/// Options that affect only what is recorded, never the iterates.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RunOptions {
    pub record_wall_time: bool,
}

/// Full pipeline with an observer called at every milestone.
pub fn run_pipeline_with<F>(
    teacher: &Teacher,
    schedule: &Schedule,
    m: usize,
    seed: u64,
    options: RunOptions,
    mut observer: F,
) -> Result<(Student, TrainTrace), TrainError>
where
    F: FnMut(&PipelineEvent<'_>),
{
    schedule.validate()?;
    let clock = options.record_wall_time.then(Instant::now);
    let elapsed = || clock.map_or(0.0, |c| c.elapsed().as_secs_f64());
    let mut trace = TrainTrace::default();

    let s0 = init_student(m, teacher.dim(), seed)?;
    observer(&PipelineEvent::Initialized(&s0));

    let s1 = stage1_one_step(&s0, teacher, schedule.eta0, schedule.lambda0);
    if !s1.a.iter().chain(s1.w.iter().flatten()).all(|v| v.is_finite()) {
        return Err(TrainError::NonFinite { stage: 1, iter: 0 });
    }
    trace.records.push(summary_record(1, 0, 0, schedule.lambda0, &s1, teacher, elapsed()));
    observer(&PipelineEvent::Stage1(&s1));

    let (s2, report) = stage2_fit(
        &s1,
        teacher,
        schedule.lambda_stage2,
        schedule.eta2,
        schedule.t2_max,
        schedule.tol2,
    )?;
    for (iter, it) in report.iterates.iter().enumerate() {
        let last = iter + 1 == report.iterates.len();
        if iter % schedule.log_every == 0 || last {
            trace.records.push(TraceRecord {
                stage: 2,
                epoch: 0,
                iter,
                lambda: schedule.lambda_stage2,
                reg_loss: it.objective,
                sq_loss: it.smooth,
                gap: gap(it.objective, teacher, schedule.lambda_stage2),
                grad_norm: it.grad_norm,
                balance_violation: it.balance_violation,
                param_norm_sq: it.a_norm_sq,
                wall_time: elapsed(),
            });
        }
    }
    observer(&PipelineEvent::Stage2 { student: &s2, report: &report });

    let mut s = balance_norms(&s2);
    trace
        .records
        .push(summary_record(2, 0, report.iterations + 1, schedule.lambda30, &s, teacher, elapsed()));
    observer(&PipelineEvent::Balanced(&s));

    let settings = EpochSettings {
        eta: schedule.eta3,
        cap: schedule.per_epoch_cap,
        c_stop: schedule.c_stop,
        log_every: schedule.log_every,
    };
    for k in 0..schedule.halvings {
        let lambda = schedule.lambda3(k);
        let outcome = stage3_epoch(&s, teacher, lambda, k + 1, settings, clock)?;
        observer(&PipelineEvent::EpochEnd { epoch: k + 1, lambda, outcome: &outcome });
        trace.records.extend(outcome.trace.records);
        s = outcome.student;
    }
    Ok((s, trace))
}

/// [`run_pipeline_with`] without an observer.
pub fn run_pipeline(
    teacher: &Teacher,
    schedule: &Schedule,
    m: usize,
    seed: u64,
) -> Result<(Student, TrainTrace), TrainError> {
    run_pipeline_with(teacher, schedule, m, seed, RunOptions::default(), |_| {})
}

fn summary_record(
    stage: u8,
    epoch: usize,
    iter: usize,
    lambda: f64,
    s: &Student,
    teacher: &Teacher,
    wall_time: f64,
) -> TraceRecord {
    let eval = evaluate(s, teacher, lambda, true);
    TraceRecord {
        stage,
        epoch,
        iter,
        lambda,
        reg_loss: eval.regularized_loss,
        sq_loss: eval.square_loss,
        gap: gap(eval.regularized_loss, teacher, lambda),
        grad_norm: eval.gradient.map_or(f64::NAN, |g| g.norm()),
        balance_violation: balance_violation(s),
        param_norm_sq: s.param_norm_sq(),
        wall_time,
    }
}
