//! Exact population loss `E[(f(x) - y~(x))^2]`, its weight-decay regularized
//! form and the exact gradient, all in closed form through arc-cosine kernels.
//!
//! The residual is written as a single signed neuron list: students
//! `(a_j, w_j)` and teachers `(-a_i*, w_i*)`, plus the head
//! `A = alpha + alpha_*`, `B = beta + beta_*`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::gauss::{arccos_kernel_unit, sigma_ge2_from_angle, NORM_FLOOR};
use crate::network::{Student, Teacher};
use crate::numeric::{dot, norm, NeumaierSum};

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
const INV_2PI: f64 = 1.0 / (2.0 * PI);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gradient {
    pub g_a: Vec<f64>,
    #[serde(rename = "g_W")]
    pub g_w: Vec<Vec<f64>>,
    pub g_alpha: f64,
    pub g_beta: Vec<f64>,
}

impl Gradient {
    /// Squared Frobenius norm over all parameter blocks.
    pub fn norm_sq(&self) -> f64 {
        self.g_a.iter().map(|v| v * v).sum::<f64>()
            + self.g_w.iter().map(|w| dot(w, w)).sum::<f64>()
            + self.g_alpha * self.g_alpha
            + dot(&self.g_beta, &self.g_beta)
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.g_a.iter().chain(self.g_w.iter().flatten()).chain(&self.g_beta).all(|v| v.is_finite())
            && self.g_alpha.is_finite()
    }
}

/// Loss values and gradient from one joint evaluation.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub square_loss: f64,
    pub regularized_loss: f64,
    pub gradient: Option<Gradient>,
}

/// Angle and cosine between unit vectors stored at offsets in a flat buffer.
#[inline]
fn pair_angle(u: &[f64], v: &[f64]) -> (f64, f64) {
    let c = dot(u, v).clamp(-1.0, 1.0);
    if c.abs() < 0.9 {
        return (c.acos(), c);
    }
    let mut diff = 0.0;
    let mut sum = 0.0;
    for (x, y) in u.iter().zip(v) {
        diff += (x - y) * (x - y);
        sum += (x + y) * (x + y);
    }
    (2.0 * diff.sqrt().atan2(sum.sqrt()), c)
}

struct NeuronList {
    d: usize,
    coef: Vec<f64>,
    norms: Vec<f64>,
    /// Unit directions, row-major `n x d`; zero rows for dead neurons.
    units: Vec<f64>,
    alive: Vec<bool>,
}

impl NeuronList {
    fn new(student: &Student, teacher: &Teacher) -> NeuronList {
        let d = teacher.dim();
        let n = student.width() + teacher.width();
        let mut list = NeuronList {
            d,
            coef: Vec::with_capacity(n),
            norms: Vec::with_capacity(n),
            units: vec![0.0; n * d],
            alive: Vec::with_capacity(n),
        };
        let entries = student
            .a
            .iter()
            .zip(&student.w)
            .map(|(a, w)| (*a, w))
            .chain(teacher.a.iter().zip(&teacher.w).map(|(a, w)| (-*a, w)));
        for (idx, (c, w)) in entries.enumerate() {
            let nw = norm(w);
            let alive = nw >= NORM_FLOOR;
            list.coef.push(c);
            list.norms.push(if alive { nw } else { 0.0 });
            list.alive.push(alive);
            if alive {
                for (dst, src) in list.units[idx * d..(idx + 1) * d].iter_mut().zip(w) {
                    *dst = src / nw;
                }
            }
        }
        list
    }

    fn unit(&self, p: usize) -> &[f64] {
        &self.units[p * self.d..(p + 1) * self.d]
    }

    fn len(&self) -> usize {
        self.coef.len()
    }
}

/// Joint loss and (optionally) gradient evaluation.
pub fn evaluate(student: &Student, teacher: &Teacher, lambda: f64, want_grad: bool) -> Evaluation {
    let list = NeuronList::new(student, teacher);
    let m = student.width();
    let n = list.len();
    let d = list.d;
    let head_a = student.alpha + teacher.alpha;
    let head_b: Vec<f64> = student.beta.iter().zip(&teacher.beta).map(|(x, y)| x + y).collect();

    // v[p] = sum_q c_q kappa(u_p, u_q); only needed for students beyond the loss.
    let mut v = vec![NeumaierSum::default(); n];
    let mut radial = vec![0.0; if want_grad { m } else { 0 }];
    let mut along = vec![0.0; if want_grad { m * d } else { 0 }];
    let mut pair_sum = NeumaierSum::default();

    for p in 0..n {
        if !list.alive[p] {
            continue;
        }
        let (cp, np) = (list.coef[p], list.norms[p]);
        let self_k = 0.5 * np * np;
        v[p].add(cp * self_k);
        pair_sum.add(cp * cp * self_k);
        if want_grad && p < m {
            // grad_1 kappa(w, w) = w / 2
            let up = list.unit(p);
            for (g, x) in along[p * d..(p + 1) * d].iter_mut().zip(up) {
                *g += 0.5 * cp * np * x;
            }
        }
        for q in p + 1..n {
            if !list.alive[q] {
                continue;
            }
            let (cq, nq) = (list.coef[q], list.norms[q]);
            let up = list.unit(p);
            let uq = list.unit(q);
            let (theta, cos) = pair_angle(up, uq);
            let ku = arccos_kernel_unit(theta, cos);
            let k = np * nq * ku;
            v[p].add(cq * k);
            v[q].add(cp * k);
            pair_sum.add(2.0 * cp * cq * k);
            if want_grad && (p < m || q < m) {
                let sin_t = theta.sin();
                let w_along = (PI - theta) * INV_2PI;
                if p < m {
                    radial[p] += cq * nq * sin_t * INV_2PI;
                    let s = cq * nq * w_along;
                    for (g, x) in along[p * d..(p + 1) * d].iter_mut().zip(uq) {
                        *g += s * x;
                    }
                }
                if q < m {
                    radial[q] += cp * np * sin_t * INV_2PI;
                    let s = cp * np * w_along;
                    for (g, x) in along[q * d..(q + 1) * d].iter_mut().zip(up) {
                        *g += s * x;
                    }
                }
            }
        }
    }

    let mut mean_part = NeumaierSum::default();
    let mut lin_part = NeumaierSum::default();
    for p in 0..n {
        if !list.alive[p] {
            continue;
        }
        let (cp, np) = (list.coef[p], list.norms[p]);
        mean_part.add(cp * np * INV_SQRT_2PI);
        lin_part.add(cp * np * dot(list.unit(p), &head_b));
    }
    let mut loss = NeumaierSum::default();
    loss.merge(&pair_sum);
    loss.add(2.0 * head_a * mean_part.total());
    loss.add(lin_part.total());
    loss.add(head_a * head_a);
    loss.add(dot(&head_b, &head_b));
    let square_loss = loss.total().max(0.0);
    let regularizer = 0.5 * lambda * student.param_norm_sq();
    let regularized_loss = square_loss + regularizer;

    let gradient = want_grad.then(|| {
        let mut g_a = Vec::with_capacity(m);
        let mut g_w = Vec::with_capacity(m);
        for j in 0..m {
            let a = student.a[j];
            let w = &student.w[j];
            if !list.alive[j] {
                g_a.push(lambda * a);
                g_w.push(w.iter().map(|x| lambda * x).collect());
                continue;
            }
            let nj = list.norms[j];
            let uj = list.unit(j);
            let e_r_sigma = v[j].total() + head_a * nj * INV_SQRT_2PI + 0.5 * nj * dot(uj, &head_b);
            g_a.push(2.0 * e_r_sigma + lambda * a);
            let radial_coef = radial[j] + head_a * INV_SQRT_2PI;
            let row: Vec<f64> = (0..d)
                .map(|i| {
                    let e = radial_coef * uj[i] + along[j * d + i] + 0.5 * head_b[i];
                    2.0 * a * e + lambda * w[i]
                })
                .collect();
            g_w.push(row);
        }
        let g_alpha = 2.0 * (mean_part.total() + head_a);
        let mut e_rx = head_b.clone();
        for p in 0..n {
            if list.alive[p] {
                let s = 0.5 * list.coef[p] * list.norms[p];
                for (e, x) in e_rx.iter_mut().zip(list.unit(p)) {
                    *e += s * x;
                }
            }
        }
        Gradient {
            g_a,
            g_w,
            g_alpha,
            g_beta: e_rx.into_iter().map(|x| 2.0 * x).collect(),
        }
    });

    Evaluation {
        square_loss,
        regularized_loss,
        gradient,
    }
}

/// `E[(f(x) - y~(x))^2]`.
pub fn population_square_loss(student: &Student, teacher: &Teacher) -> f64 {
    evaluate(student, teacher, 0.0, false).square_loss
}

/// Square loss plus `(lambda/2)(||a||^2 + ||W||_F^2)`.
pub fn regularized_loss(student: &Student, teacher: &Teacher, lambda: f64) -> f64 {
    evaluate(student, teacher, lambda, false).regularized_loss
}

/// Exact gradient of [`regularized_loss`]. Neurons with `||w_j|| < 1e-14`
/// take the zero data-subgradient.
pub fn population_gradient(student: &Student, teacher: &Teacher, lambda: f64) -> Gradient {
    evaluate(student, teacher, lambda, true)
        .gradient
        .expect("gradient requested")
}

/// The optimal constant and linear head for fixed neurons:
/// `alpha_hat = -(1/sqrt(2 pi)) sum_j a_j ||w_j||`, `beta_hat = -(1/2) sum_j a_j w_j`.
pub fn optimal_head(student: &Student) -> (f64, Vec<f64>) {
    let alpha = -INV_SQRT_2PI
        * student
            .a
            .iter()
            .zip(&student.w)
            .map(|(a, w)| a * norm(w))
            .collect::<NeumaierSum>()
            .total();
    let mut beta = vec![0.0; student.dim()];
    for (a, w) in student.a.iter().zip(&student.w) {
        for (b, x) in beta.iter_mut().zip(w) {
            *b -= 0.5 * a * x;
        }
    }
    (alpha, beta)
}

/// Orthogonal split of the square loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossDecomposition {
    /// `(alpha - alpha_hat)^2`
    pub lin_const: f64,
    /// `||beta - beta_hat||^2`
    pub lin_vec: f64,
    /// `E[(f_{>=2}(x) - y~(x))^2]`
    pub high: f64,
}

impl LossDecomposition {
    pub fn total(&self) -> f64 {
        self.lin_const + self.lin_vec + self.high
    }
}

/// Splits the square loss into its constant, linear and order-two-and-above
/// parts. The last part is computed independently from the `sigma_{>=2}`
/// kernel over signed masses `a_j ||w_j||` and `-a_i*`.
pub fn loss_decomposition(student: &Student, teacher: &Teacher) -> LossDecomposition {
    let (alpha_hat, beta_hat) = optimal_head(student);
    let lin_const = (student.alpha - alpha_hat).powi(2);
    let lin_vec = student
        .beta
        .iter()
        .zip(&beta_hat)
        .map(|(b, h)| (b - h).powi(2))
        .sum();
    let mut dirs: Vec<(f64, Vec<f64>)> = Vec::new();
    for (a, w) in student.a.iter().zip(&student.w) {
        let nw = norm(w);
        if nw >= NORM_FLOOR {
            dirs.push((a * nw, w.iter().map(|x| x / nw).collect()));
        }
    }
    for (a, w) in teacher.a.iter().zip(&teacher.w) {
        dirs.push((-a, w.clone()));
    }
    let mut high = NeumaierSum::default();
    for p in 0..dirs.len() {
        high.add(dirs[p].0 * dirs[p].0 * crate::gauss::SIGMA_GE2_ENERGY);
        for q in p + 1..dirs.len() {
            let (theta, cos) = pair_angle(&dirs[p].1, &dirs[q].1);
            high.add(2.0 * dirs[p].0 * dirs[q].0 * sigma_ge2_from_angle(theta, cos));
        }
    }
    LossDecomposition {
        lin_const,
        lin_vec,
        high: high.total().max(0.0),
    }
}
