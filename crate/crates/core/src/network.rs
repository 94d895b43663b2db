//! Teacher and student parameterizations, teacher sampling, symmetric
//! initialization and the forward map.
//!
//! The regression target is the teacher output with its constant and linear
//! Hermite parts removed: `y~(x) = f_*(x) - alpha_* - beta_*.x`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::numeric::{dot, norm, scaled, unsigned_angle};

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Maximum number of full draws in [`sample_teacher`].
pub const REJECTION_BUDGET: usize = 100_000;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum NetworkError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("teacher rejection sampler exhausted {0} attempts; the requested geometry looks infeasible")]
    RejectionBudgetExhausted(usize),
    #[error("student width must be even and at least 2, got {0}")]
    OddWidth(usize),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Teacher {
    pub a: Vec<f64>,
    /// Unit teacher directions, one per row.
    #[serde(rename = "W")]
    pub w: Vec<Vec<f64>>,
    /// Constant head removed from the target, `sum_i a_i / sqrt(2 pi)`.
    pub alpha: f64,
    /// Linear head removed from the target, `sum_i a_i w_i / 2`.
    pub beta: Vec<f64>,
    /// Orthonormal basis of the target subspace, `d` rows of `r` entries.
    pub subspace_basis: Vec<Vec<f64>>,
    /// Minimum pairwise unsigned angle between teacher directions.
    pub delta_sep: f64,
    /// Smallest nonzero eigenvalue magnitude of `sum_i a_i w_i w_i^T`.
    pub kappa: f64,
}

impl Teacher {
    pub fn dim(&self) -> usize {
        self.beta.len()
    }

    pub fn width(&self) -> usize {
        self.a.len()
    }

    pub fn rank(&self) -> usize {
        self.subspace_basis.first().map_or(0, Vec::len)
    }

    /// `sum_i |a_i|`.
    pub fn a_l1(&self) -> f64 {
        self.a.iter().map(|v| v.abs()).sum()
    }

    /// Basis vectors of the target subspace, each of length `d`.
    pub fn basis_columns(&self) -> Vec<Vec<f64>> {
        (0..self.rank())
            .map(|c| self.subspace_basis.iter().map(|row| row[c]).collect())
            .collect()
    }

    /// Builds a teacher from explicit weights and unit directions, computing
    /// the heads, an orthonormal basis of the span, the separation and kappa.
    pub fn from_parts(a: Vec<f64>, w: Vec<Vec<f64>>) -> Result<Teacher, NetworkError> {
        if a.is_empty() || a.len() != w.len() {
            return Err(NetworkError::DimensionMismatch(format!(
                "{} weights for {} directions",
                a.len(),
                w.len()
            )));
        }
        let d = w[0].len();
        if d == 0 || w.iter().any(|row| row.len() != d) {
            return Err(NetworkError::DimensionMismatch("ragged direction rows".into()));
        }
        let w: Vec<Vec<f64>> = w
            .into_iter()
            .map(|row| {
                let n = norm(&row);
                if n == 0.0 {
                    Err(NetworkError::InvalidArgument("zero teacher direction".into()))
                } else {
                    Ok(scaled(1.0 / n, &row))
                }
            })
            .collect::<Result<_, _>>()?;
        let basis = span_basis(&w, 1e-10);
        let r = basis.len();
        let (kappa, _) = reduced_spectrum(&a, &w, &basis);
        Ok(Self::assemble(a, w, basis, d, r, kappa))
    }

    fn assemble(
        a: Vec<f64>,
        w: Vec<Vec<f64>>,
        basis: Vec<Vec<f64>>,
        d: usize,
        r: usize,
        kappa: f64,
    ) -> Teacher {
        let alpha = a.iter().sum::<f64>() * INV_SQRT_2PI;
        let mut beta = vec![0.0; d];
        for (ai, wi) in a.iter().zip(&w) {
            for (b, x) in beta.iter_mut().zip(wi) {
                *b += 0.5 * ai * x;
            }
        }
        let delta_sep = min_pairwise_angle(&w);
        let subspace_basis = (0..d).map(|row| (0..r).map(|c| basis[c][row]).collect()).collect();
        Teacher {
            a,
            w,
            alpha,
            beta,
            subspace_basis,
            delta_sep,
            kappa,
        }
    }

    /// Teacher output `f_*(x)`.
    pub fn output(&self, x: &[f64]) -> f64 {
        self.a
            .iter()
            .zip(&self.w)
            .map(|(a, w)| a * dot(w, x).max(0.0))
            .sum()
    }

    /// Preprocessed target `f_*(x) - alpha_* - beta_*.x`.
    pub fn target(&self, x: &[f64]) -> f64 {
        self.output(x) - self.alpha - dot(&self.beta, x)
    }

    /// `H = sum_i a_i w_i w_i^T` as a dense `d x d` matrix.
    pub fn h_matrix(&self) -> DMatrix<f64> {
        let d = self.dim();
        let mut h = DMatrix::zeros(d, d);
        for (a, w) in self.a.iter().zip(&self.w) {
            for i in 0..d {
                for j in 0..d {
                    h[(i, j)] += a * w[i] * w[j];
                }
            }
        }
        h
    }
}

fn min_pairwise_angle(w: &[Vec<f64>]) -> f64 {
    let mut best = PI / 2.0;
    for i in 0..w.len() {
        for j in i + 1..w.len() {
            best = best.min(unsigned_angle(&w[i], &w[j]));
        }
    }
    best
}

/// Gram-Schmidt basis of `span(rows)`, dropping directions with residual
/// norm below `tol`.
fn span_basis(rows: &[Vec<f64>], tol: f64) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for row in rows {
        let mut v = row.clone();
        for _ in 0..2 {
            for b in &basis {
                let c = dot(&v, b);
                for (vi, bi) in v.iter_mut().zip(b) {
                    *vi -= c * bi;
                }
            }
        }
        let n = norm(&v);
        if n > tol {
            basis.push(scaled(1.0 / n, &v));
        }
    }
    basis
}

/// Smallest eigenvalue magnitude and numerical rank of `B^T H B`.
fn reduced_spectrum(a: &[f64], w: &[Vec<f64>], basis: &[Vec<f64>]) -> (f64, usize) {
    let r = basis.len();
    let coords: Vec<Vec<f64>> = w
        .iter()
        .map(|wi| basis.iter().map(|b| dot(b, wi)).collect())
        .collect();
    let mut h = DMatrix::<f64>::zeros(r, r);
    for (ai, c) in a.iter().zip(&coords) {
        for i in 0..r {
            for j in 0..r {
                h[(i, j)] += ai * c[i] * c[j];
            }
        }
    }
    let eig = SymmetricEigen::new(h);
    let mags: Vec<f64> = eig.eigenvalues.iter().map(|v| v.abs()).collect();
    let rank = mags.iter().filter(|v| **v > 1e-10).count();
    let kappa = mags.iter().cloned().fold(f64::INFINITY, f64::min);
    (if r == 0 { 0.0 } else { kappa }, rank)
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Haar-distributed orthonormal `r`-frame in `R^d` (columns returned as vectors).
fn haar_frame(rng: &mut ChaCha8Rng, d: usize, r: usize) -> Vec<Vec<f64>> {
    let g = DMatrix::<f64>::from_fn(d, r, |_, _| StandardNormal.sample(&mut *rng));
    let qr = g.qr();
    let q = qr.q();
    let rm = qr.r();
    (0..r)
        .map(|c| {
            let s = if rm[(c, c)] < 0.0 { -1.0 } else { 1.0 };
            (0..d).map(|i| s * q[(i, c)]).collect()
        })
        .collect()
}

/// Sampling parameters for [`sample_teacher`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherSpec {
    pub d: usize,
    pub r: usize,
    pub m_star: usize,
    pub delta_min: f64,
    /// Signed second-layer weights, one per teacher neuron.
    pub a_magnitudes: Vec<f64>,
    /// Lower bound on kappa; defaults to `0.1 * min |a_i|`.
    pub kappa_floor: Option<f64>,
}

/// Samples a teacher whose directions are uniform in a Haar-random
/// `r`-dimensional subspace, rejecting draws that violate separation,
/// rank or the kappa floor.
pub fn sample_teacher(spec: &TeacherSpec, seed: u64) -> Result<Teacher, NetworkError> {
    let TeacherSpec { d, r, m_star, delta_min, .. } = *spec;
    let a = spec.a_magnitudes.clone();
    if r == 0 || r > d {
        return Err(NetworkError::InvalidArgument(format!("need 1 <= r <= d, got r={r}, d={d}")));
    }
    if m_star < r {
        return Err(NetworkError::InvalidArgument(format!("need r <= m_star, got r={r}, m_star={m_star}")));
    }
    if !(delta_min > 0.0 && delta_min < PI / 2.0) {
        return Err(NetworkError::InvalidArgument(format!("delta_min must lie in (0, pi/2), got {delta_min}")));
    }
    if a.len() != m_star {
        return Err(NetworkError::InvalidArgument(format!(
            "{} second-layer weights for m_star={m_star}",
            a.len()
        )));
    }
    if a.iter().any(|v| *v == 0.0 || !v.is_finite()) {
        return Err(NetworkError::InvalidArgument("second-layer weights must be finite and nonzero".into()));
    }
    let kappa_floor = spec
        .kappa_floor
        .unwrap_or_else(|| 0.1 * a.iter().map(|v| v.abs()).fold(f64::INFINITY, f64::min));

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frame = haar_frame(&mut rng, d, r);
    'attempt: for _ in 0..REJECTION_BUDGET {
        let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(m_star);
        for _ in 0..m_star {
            let z = gaussian_vec(&mut rng, r);
            let nz = norm(&z);
            let mut w = vec![0.0; d];
            for (c, b) in frame.iter().enumerate() {
                for (wi, bi) in w.iter_mut().zip(b) {
                    *wi += z[c] / nz * bi;
                }
            }
            if dirs.iter().any(|p| unsigned_angle(p, &w) < delta_min) {
                continue 'attempt;
            }
            dirs.push(w);
        }
        let (kappa, rank) = reduced_spectrum(&a, &dirs, &frame);
        if rank != r || kappa < kappa_floor {
            continue;
        }
        return Ok(Teacher::assemble(a, dirs, frame, d, r, kappa));
    }
    Err(NetworkError::RejectionBudgetExhausted(REJECTION_BUDGET))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Student {
    pub a: Vec<f64>,
    #[serde(rename = "W")]
    pub w: Vec<Vec<f64>>,
    pub alpha: f64,
    pub beta: Vec<f64>,
}

impl Student {
    /// Student with no neurons and a zero head.
    pub fn empty(d: usize) -> Student {
        Student {
            a: Vec::new(),
            w: Vec::new(),
            alpha: 0.0,
            beta: vec![0.0; d],
        }
    }

    /// The teacher copy with head `(-alpha_*, -beta_*)`, whose residual
    /// vanishes identically.
    pub fn zero_residual(teacher: &Teacher) -> Student {
        Student {
            a: teacher.a.clone(),
            w: teacher.w.clone(),
            alpha: -teacher.alpha,
            beta: scaled(-1.0, &teacher.beta),
        }
    }

    pub fn width(&self) -> usize {
        self.a.len()
    }

    pub fn dim(&self) -> usize {
        self.beta.len()
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        let d = self.dim();
        if self.a.len() != self.w.len() {
            return Err(NetworkError::DimensionMismatch(format!(
                "{} second-layer weights for {} neurons",
                self.a.len(),
                self.w.len()
            )));
        }
        if self.w.iter().any(|row| row.len() != d) {
            return Err(NetworkError::DimensionMismatch(format!("neuron rows must have length {d}")));
        }
        let finite = self.a.iter().chain(self.w.iter().flatten()).chain(&self.beta).all(|v| v.is_finite())
            && self.alpha.is_finite();
        if !finite {
            return Err(NetworkError::InvalidArgument("non-finite parameter".into()));
        }
        Ok(())
    }

    pub fn check_against(&self, teacher: &Teacher) -> Result<(), NetworkError> {
        self.validate()?;
        if self.dim() != teacher.dim() {
            return Err(NetworkError::DimensionMismatch(format!(
                "student dimension {} vs teacher dimension {}",
                self.dim(),
                teacher.dim()
            )));
        }
        Ok(())
    }

    /// Student output `sum_j a_j relu(w_j.x) + alpha + beta.x`.
    pub fn output(&self, x: &[f64]) -> f64 {
        let hidden: f64 = self
            .a
            .iter()
            .zip(&self.w)
            .map(|(a, w)| a * dot(w, x).max(0.0))
            .sum();
        hidden + self.alpha + dot(&self.beta, x)
    }

    /// `sum_j a_j^2 + ||W||_F^2`.
    pub fn param_norm_sq(&self) -> f64 {
        self.a.iter().map(|v| v * v).sum::<f64>()
            + self.w.iter().map(|w| dot(w, w)).sum::<f64>()
    }

    /// Per-neuron masses `|a_j| ||w_j||`.
    pub fn masses(&self) -> Vec<f64> {
        self.a.iter().zip(&self.w).map(|(a, w)| a.abs() * norm(w)).collect()
    }
}

/// Symmetric initialization: the first half has `a_j = +-sqrt(d)` with i.i.d.
/// signs and `w_j` uniform on the sphere of radius `1/sqrt(m)`; the second
/// half mirrors it with negated `a`. The initial output is identically zero.
pub fn init_student(m: usize, d: usize, seed: u64) -> Result<Student, NetworkError> {
    if m < 2 || m % 2 != 0 {
        return Err(NetworkError::OddWidth(m));
    }
    if d == 0 {
        return Err(NetworkError::InvalidArgument("input dimension must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = m / 2;
    let radius = 1.0 / (m as f64).sqrt();
    let scale = (d as f64).sqrt();
    let mut a = Vec::with_capacity(m);
    let mut w = Vec::with_capacity(m);
    for _ in 0..half {
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        a.push(sign * scale);
        let mut g = gaussian_vec(&mut rng, d);
        while norm(&g) == 0.0 {
            g = gaussian_vec(&mut rng, d);
        }
        w.push(scaled(radius / norm(&g), &g));
    }
    for j in 0..half {
        a.push(-a[j]);
        w.push(w[j].clone());
    }
    Ok(Student {
        a,
        w,
        alpha: 0.0,
        beta: vec![0.0; d],
    })
}

/// Returns `(f(x), f(x) - y~(x))`.
pub fn forward(student: &Student, teacher: &Teacher, x: &[f64]) -> (f64, f64) {
    let f = student.output(x);
    (f, f - teacher.target(x))
}
