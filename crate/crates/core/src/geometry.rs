//! Structure diagnostics for a student relative to the teacher: nearest-teacher
//! partition, cluster averages, residual decomposition, gap surrogate and the
//! descent-direction audit.
//!
//! Angles are unsigned throughout (`angle(w, v)` is taken up to the sign of
//! either vector), so they lie in `[0, pi/2]`. Teacher indices are 0-based.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::gauss::{mc_expectation, NORM_FLOOR};
use crate::network::{Student, Teacher};
use crate::numeric::{dot, norm, unit_angle, unsigned_angle};
use crate::objective::{evaluate, optimal_head};

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionReport {
    /// Nearest teacher of each student neuron.
    pub assign: Vec<usize>,
    /// Unsigned angle to the assigned teacher; 0 for dead neurons.
    pub delta: Vec<f64>,
    /// Per-teacher signed mass `sum_{j in T_i} a_j ||w_j||`.
    pub mass: Vec<f64>,
    /// Per-teacher average neuron `v_i = sum_{j in T_i} a_j w_j`.
    pub avg_neuron: Vec<Vec<f64>>,
    /// `||v_i - a_i* w_i*||`.
    pub avg_dist: Vec<f64>,
    /// `sum_i sum_{j in T_i} |a_j| ||w_j|| delta_j^2`.
    pub weighted_far: f64,
    /// Smallest angle among live neurons of `T_i`, if any.
    pub min_close: Vec<Option<f64>>,
    /// Smallest angle among live neurons of `T_i` whose `a_j` has the sign
    /// of `a_i*`.
    pub min_close_aligned: Vec<Option<f64>>,
    /// Neurons with `||w_j|| < 1e-14` or `a_j = 0`.
    pub dead: usize,
    /// Per-neuron `|a_j| ||w_j||`.
    #[serde(skip)]
    pub neuron_mass: Vec<f64>,
}

impl PartitionReport {
    /// Signed mass of `T_i(delta) = {j in T_i : delta_j <= delta}`.
    pub fn mass_within(&self, student: &Student, i: usize, delta: f64) -> f64 {
        (0..student.width())
            .filter(|&j| self.assign[j] == i && self.delta[j] <= delta)
            .map(|j| student.a[j] * norm(&student.w[j]))
            .sum()
    }

    /// Largest angle among neurons with `|a_j| ||w_j|| > threshold`; 0 if none.
    pub fn max_angle_above_mass(&self, threshold: f64) -> f64 {
        self.delta
            .iter()
            .zip(&self.neuron_mass)
            .filter(|(_, m)| **m > threshold)
            .map(|(d, _)| *d)
            .fold(0.0, f64::max)
    }
}

/// Nearest-teacher partition with ties broken towards the lower index.
pub fn partition(student: &Student, teacher: &Teacher) -> PartitionReport {
    let m = student.width();
    let k = teacher.width();
    let d = teacher.dim();
    let mut assign = vec![0; m];
    let mut delta = vec![0.0; m];
    let mut neuron_mass = vec![0.0; m];
    let mut mass = vec![0.0; k];
    let mut avg_neuron = vec![vec![0.0; d]; k];
    let mut weighted_far = 0.0;
    let mut min_close: Vec<Option<f64>> = vec![None; k];
    let mut min_close_aligned: Vec<Option<f64>> = vec![None; k];
    let mut dead = 0;
    for j in 0..m {
        let w = &student.w[j];
        let a = student.a[j];
        let nw = norm(w);
        if nw < NORM_FLOOR {
            dead += 1;
            continue;
        }
        let (best, angle) = teacher
            .w
            .iter()
            .map(|v| unsigned_angle(w, v))
            .enumerate()
            .fold((0, f64::INFINITY), |acc, (i, t)| if t < acc.1 { (i, t) } else { acc });
        assign[j] = best;
        delta[j] = angle;
        neuron_mass[j] = a.abs() * nw;
        mass[best] += a * nw;
        for (v, x) in avg_neuron[best].iter_mut().zip(w) {
            *v += a * x;
        }
        weighted_far += a.abs() * nw * angle * angle;
        if a == 0.0 {
            dead += 1;
            continue;
        }
        let upd = |slot: &mut Option<f64>| *slot = Some(slot.map_or(angle, |s: f64| s.min(angle)));
        upd(&mut min_close[best]);
        if a.signum() == teacher.a[best].signum() {
            upd(&mut min_close_aligned[best]);
        }
    }
    let avg_dist = (0..k)
        .map(|i| {
            avg_neuron[i]
                .iter()
                .zip(&teacher.w[i])
                .map(|(v, w)| (v - teacher.a[i] * w).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    PartitionReport {
        assign,
        delta,
        mass,
        avg_neuron,
        avg_dist,
        weighted_far,
        min_close,
        min_close_aligned,
        dead,
        neuron_mass,
    }
}

/// Flips every neuron pointing away from its nearest teacher and moves the
/// difference into the linear head. Uses `a relu(z) = a relu(-z) + a z`, so
/// the network function is unchanged pointwise.
pub fn canonicalize_signs(student: &Student, teacher: &Teacher) -> Student {
    let report = partition(student, teacher);
    let mut out = student.clone();
    for j in 0..out.width() {
        let w_star = &teacher.w[report.assign[j]];
        if dot(&out.w[j], w_star) < 0.0 {
            let a = out.a[j];
            for (b, x) in out.beta.iter_mut().zip(&out.w[j]) {
                *b += a * x;
            }
            out.w[j].iter_mut().for_each(|x| *x = -*x);
        }
    }
    out
}

/// `zeta_hat = L_lambda(theta) - lambda ||a*||_1`.
pub fn gap_surrogate(student: &Student, teacher: &Teacher, lambda: f64) -> f64 {
    evaluate(student, teacher, lambda, false).regularized_loss - lambda * teacher.a_l1()
}

/// Interval containing the true optimality gap given the surrogate and a
/// bound on the dual pre-image norm: `[zeta_hat, zeta_hat + lambda^2 ||p||^2]`.
/// The upper end is absent when no pre-image norm is available.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapBounds {
    pub surrogate: f64,
    pub lower: f64,
    pub upper: Option<f64>,
}

pub fn gap_bounds(surrogate: f64, lambda: f64, p_norm: Option<f64>) -> GapBounds {
    GapBounds {
        surrogate,
        lower: surrogate,
        upper: p_norm.map(|p| surrogate + lambda * lambda * p * p),
    }
}

/// `E[x x^T sign(a.x) sign(b.x)]` for unit `a, b`.
pub fn sign_product_second_moment(a: &[f64], b: &[f64]) -> Vec<Vec<f64>> {
    let d = a.len();
    let theta = unit_angle(a, b);
    let c = dot(a, b).clamp(-1.0, 1.0);
    let s = theta.sin();
    let mut out = vec![vec![0.0; d]; d];
    let iso = 1.0 - 2.0 * theta / PI;
    for (i, row) in out.iter_mut().enumerate() {
        row[i] = iso;
    }
    if s > 1e-12 {
        let e: Vec<f64> = b.iter().zip(a).map(|(bi, ai)| (bi - c * ai) / s).collect();
        let scale = 2.0 * s / PI;
        for i in 0..d {
            for k in 0..d {
                out[i][k] += scale * (c * a[i] * a[k] + s * (a[i] * e[k] + e[i] * a[k]) - c * e[i] * e[k]);
            }
        }
    }
    out
}

/// Pointwise residual and its three parts at `x`.
///
/// With `v_i` the average neuron of `T_i` and the effective teacher vector
/// `a_i* w_i*`:
/// `R1 = (1/2) sum_i (v_i - a_i* w_i*).x sign(w_i*.x)`,
/// `R2 = (1/2) sum_i sum_{j in T_i} a_j w_j.x (sign(w_j.x) - sign(w_i*.x))`,
/// `R3 = c + (beta - beta_hat).x` with
/// `c = alpha - alpha_hat + (sum_i a_i* - sum_j a_j ||w_j||) / sqrt(2 pi)`.
#[derive(Debug, Clone)]
pub struct ResidualModel {
    assign: Vec<usize>,
    u: Vec<Vec<f64>>,
    constant: f64,
    linear: Vec<f64>,
}

fn sign(z: f64) -> f64 {
    if z > 0.0 {
        1.0
    } else if z < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl ResidualModel {
    pub fn new(student: &Student, teacher: &Teacher) -> ResidualModel {
        let report = partition(student, teacher);
        let u = report
            .avg_neuron
            .iter()
            .zip(teacher.a.iter().zip(&teacher.w))
            .map(|(v, (a, w))| v.iter().zip(w).map(|(vi, wi)| vi - a * wi).collect())
            .collect();
        let (alpha_hat, beta_hat) = optimal_head(student);
        let student_mass: f64 = student.a.iter().zip(&student.w).map(|(a, w)| a * norm(w)).sum();
        let teacher_mass: f64 = teacher.a.iter().sum();
        ResidualModel {
            assign: report.assign,
            u,
            constant: student.alpha - alpha_hat + (teacher_mass - student_mass) * INV_SQRT_2PI,
            linear: student.beta.iter().zip(&beta_hat).map(|(b, h)| b - h).collect(),
        }
    }

    /// `(R, R1, R2, R3)` at `x`.
    pub fn parts(&self, student: &Student, teacher: &Teacher, x: &[f64]) -> (f64, f64, f64, f64) {
        let teacher_signs: Vec<f64> = teacher.w.iter().map(|w| sign(dot(w, x))).collect();
        let r1 = 0.5
            * self
                .u
                .iter()
                .zip(&teacher_signs)
                .map(|(u, s)| dot(u, x) * s)
                .sum::<f64>();
        let r2 = 0.5
            * student
                .a
                .iter()
                .zip(&student.w)
                .zip(&self.assign)
                .map(|((a, w), i)| {
                    let z = dot(w, x);
                    a * z * (sign(z) - teacher_signs[*i])
                })
                .sum::<f64>();
        let r3 = self.constant + dot(&self.linear, x);
        let r = student.output(x) - teacher.target(x);
        (r, r1, r2, r3)
    }

    /// `E[R1^2]` in closed form.
    pub fn r1_sq(&self, teacher: &Teacher) -> f64 {
        let k = teacher.width();
        let mut acc = 0.0;
        for i in 0..k {
            acc += dot(&self.u[i], &self.u[i]);
            for l in i + 1..k {
                let m = sign_product_second_moment(&teacher.w[i], &teacher.w[l]);
                let mu: f64 = m
                    .iter()
                    .zip(&self.u[i])
                    .map(|(row, ui)| ui * dot(row, &self.u[l]))
                    .sum();
                acc += 2.0 * mu;
            }
        }
        0.25 * acc
    }

    /// `E[R3^2]` in closed form.
    pub fn r3_sq(&self) -> f64 {
        self.constant * self.constant + dot(&self.linear, &self.linear)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McSettings {
    pub n: usize,
    pub seed: u64,
}

impl Default for McSettings {
    fn default() -> Self {
        McSettings { n: 200_000, seed: 0 }
    }
}

/// Norms of the residual and its parts; `r2` is a Monte Carlo estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualNorms {
    pub r: f64,
    pub r1: f64,
    pub r2: f64,
    pub r3: f64,
    /// Standard error of the Monte Carlo estimate of `E[R2^2]`.
    pub r2_sq_stderr: f64,
}

/// Residual norms. Best read after [`canonicalize_signs`], where `R2` only
/// collects activation-pattern mismatches of nearby neurons.
pub fn residual_norms(student: &Student, teacher: &Teacher, mc: McSettings) -> ResidualNorms {
    let model = ResidualModel::new(student, teacher);
    let r_sq = evaluate(student, teacher, 0.0, false).square_loss;
    let est = mc_expectation(
        |x| {
            let (_, _, r2, _) = model.parts(student, teacher, x);
            r2 * r2
        },
        teacher.dim(),
        mc.n,
        mc.seed,
    );
    ResidualNorms {
        r: r_sq.sqrt(),
        r1: model.r1_sq(teacher).max(0.0).sqrt(),
        r2: est.mean.max(0.0).sqrt(),
        r3: model.r3_sq().sqrt(),
        r2_sq_stderr: est.stderr,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub delta_close: f64,
    pub delta_sign: f64,
    /// `lambda sum_j |a_j^2 - ||w_j||^2|`
    pub balance_term: f64,
    /// Per teacher, `sum |a_j| ||w_j||` over `T_{i,-}(delta_sign)`.
    pub cancellation_mass: Vec<f64>,
    /// `q_ij` for each neuron `j` and its assigned teacher `i`.
    pub q: Vec<f64>,
    /// Per teacher, `sum_j q_ij^2`.
    pub q_sq_sum: Vec<f64>,
    /// `<grad L_lambda, D>` for the composite direction `D`.
    pub inner_product: f64,
    /// Teachers whose `T_{i,+}(delta_close)` carries no second-layer weight
    /// and were left out of the inner product.
    pub skipped: Vec<usize>,
}

/// `(delta_close, delta_sign)` defaults:
/// `min(0.3, zeta^(1/3))` and `min(pi/4, c lambda / sqrt(max(zeta, lambda^2)))`,
/// with `delta_sign` lifted above `delta_close` when needed.
pub fn default_audit_deltas(zeta: f64, lambda: f64, sign_scale: f64) -> (f64, f64) {
    let z = zeta.max(lambda * lambda).max(1e-300);
    let close = 0.3f64.min(z.cbrt());
    let mut sign = (PI / 4.0).min(sign_scale * lambda / z.sqrt());
    if sign <= close {
        sign = (2.0 * close).min(PI / 2.0);
    }
    (close, sign)
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum GeometryError {
    #[error("need 0 < delta_close < delta_sign <= pi/2, got {0} and {1}")]
    InvalidDeltas(f64, f64),
}

/// Evaluates the descent-direction quantities on the sign-canonicalized
/// student. The composite direction moves the head by `(alpha + alpha_*,
/// beta + beta_*)` and each neuron by `w_j - q_ij w_i*`; `a` is left fixed.
pub fn descent_audit(
    student: &Student,
    teacher: &Teacher,
    lambda: f64,
    delta_close: f64,
    delta_sign: f64,
) -> Result<AuditReport, GeometryError> {
    if !(delta_close > 0.0 && delta_close < delta_sign && delta_sign <= PI / 2.0) {
        return Err(GeometryError::InvalidDeltas(delta_close, delta_sign));
    }
    let s = canonicalize_signs(student, teacher);
    let report = partition(&s, teacher);
    let k = teacher.width();
    let m = s.width();
    let balance_term = lambda
        * s.a
            .iter()
            .zip(&s.w)
            .map(|(a, w)| (a * a - dot(w, w)).abs())
            .sum::<f64>();
    let live = |j: usize| norm(&s.w[j]) >= NORM_FLOOR;
    let same_sign = |j: usize| s.a[j] * teacher.a[report.assign[j]] > 0.0;
    let opposite_sign = |j: usize| s.a[j] * teacher.a[report.assign[j]] < 0.0;

    let mut cancellation_mass = vec![0.0; k];
    let mut close_weight = vec![0.0; k];
    for j in (0..m).filter(|&j| live(j)) {
        let i = report.assign[j];
        if opposite_sign(j) && report.delta[j] <= delta_sign {
            cancellation_mass[i] += report.neuron_mass[j];
        }
        if same_sign(j) && report.delta[j] <= delta_close {
            close_weight[i] += s.a[j] * s.a[j];
        }
    }
    let skipped: Vec<usize> = (0..k).filter(|&i| close_weight[i] == 0.0).collect();
    let mut q = vec![0.0; m];
    let mut q_sq_sum = vec![0.0; k];
    for j in (0..m).filter(|&j| live(j)) {
        let i = report.assign[j];
        if close_weight[i] > 0.0 && same_sign(j) && report.delta[j] <= delta_close {
            q[j] = s.a[j] * teacher.a[i] / close_weight[i];
            q_sq_sum[i] += q[j] * q[j];
        }
    }

    let g = evaluate(&s, teacher, lambda, true)
        .gradient
        .expect("gradient requested");
    let mut inner = g.g_alpha * (s.alpha + teacher.alpha);
    inner += g
        .g_beta
        .iter()
        .zip(s.beta.iter().zip(&teacher.beta))
        .map(|(gb, (b, bs))| gb * (b + bs))
        .sum::<f64>();
    for j in 0..m {
        let i = report.assign[j];
        if skipped.contains(&i) {
            continue;
        }
        inner += g.g_w[j]
            .iter()
            .zip(s.w[j].iter().zip(&teacher.w[i]))
            .map(|(gw, (w, ws))| gw * (w - q[j] * ws))
            .sum::<f64>();
    }
    Ok(AuditReport {
        delta_close,
        delta_sign,
        balance_term,
        cancellation_mass,
        q,
        q_sq_sum,
        inner_product: inner,
        skipped,
    })
}

/// `||grad||^2 lambda^2 / max(zeta, 1e-300)^4` from precomputed values.
pub fn lower_bound_ratio(grad_norm_sq: f64, zeta: f64, lambda: f64) -> f64 {
    grad_norm_sq * lambda * lambda / zeta.max(1e-300).powi(4)
}

/// Empirical constant in the gradient lower bound `||grad||^2 >= c zeta^4 / lambda^2`.
pub fn grad_lower_bound_ratio(student: &Student, teacher: &Teacher, lambda: f64) -> f64 {
    let eval = evaluate(student, teacher, lambda, true);
    let zeta = eval.regularized_loss - lambda * teacher.a_l1();
    let g = eval.gradient.expect("gradient requested");
    lower_bound_ratio(g.norm_sq(), zeta, lambda)
}

/// Everything the harness records per diagnostic call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometryDiagnostics {
    pub lambda: f64,
    pub square_loss: f64,
    pub gap: GapBounds,
    pub partition: PartitionReport,
    pub residual: Option<ResidualNorms>,
    pub audit: Option<AuditReport>,
    /// Absent when the ratio overflows, which happens for `zeta_hat <= 0`.
    pub grad_lower_bound_ratio: Option<f64>,
}

/// Runs the geometry suite; `p_norm` feeds the gap bounds, `mc` enables
/// the residual decomposition.
pub fn diagnose(
    student: &Student,
    teacher: &Teacher,
    lambda: f64,
    p_norm: Option<f64>,
    mc: Option<McSettings>,
    sign_scale: f64,
) -> GeometryDiagnostics {
    let eval = evaluate(student, teacher, lambda, true);
    let zeta = eval.regularized_loss - lambda * teacher.a_l1();
    let g = eval.gradient.expect("gradient requested");
    let (close, sign) = default_audit_deltas(zeta, lambda, sign_scale);
    GeometryDiagnostics {
        lambda,
        square_loss: eval.square_loss,
        gap: gap_bounds(zeta, lambda, p_norm),
        partition: partition(student, teacher),
        residual: mc.map(|mc| residual_norms(&canonicalize_signs(student, teacher), teacher, mc)),
        audit: (lambda > 0.0)
            .then(|| descent_audit(student, teacher, lambda, close, sign).ok())
            .flatten(),
        grad_lower_bound_ratio: Some(lower_bound_ratio(g.norm_sq(), zeta, lambda)).filter(|r| r.is_finite()),
    }
}
