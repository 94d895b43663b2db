//! Sparse-spike dual certificate built from the high-order part of the ReLU
//! kernel, its verification on the sphere, and the Hermite test statistic.
//!
//! The kernel is `K(w, u) = g(w.u)` with `g(c) = (1/Z2) sum_{ell<=k<=k_max}
//! sigma_hat_k^2 c^k` and `Z2` the same sum at `c = 1`, so `K(w, w) = 1`.
//! The certificate is
//! `eta(w) = sum_j alpha1_j K(w_j*, w) + sum_j alpha2_j . grad_1 K(w_j*, w)`
//! with `alpha2_j` tangent at `w_j*`, solved so that `eta(w_i*) = sign(a_i*)`
//! and the spherical gradient of `eta` vanishes at every `w_i*`.

use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::gauss::NORM_FLOOR;
use crate::hermite::HermiteTable;
use crate::network::{Student, Teacher};
use crate::numeric::{dot, norm, normalize, unsigned_angle};

#[derive(Debug, thiserror::Error)]
pub enum CertificateError {
    #[error("need 2 <= ell <= k_max, got ell = {ell}, k_max = {k_max}")]
    InvalidOrder { ell: usize, k_max: usize },
    #[error("k_max = {requested} exceeds the coefficient table (k_max = {available})")]
    TableTooShort { requested: usize, available: usize },
    #[error("interpolation system ill-conditioned: smallest kept singular value {sigma_min:e}, largest {sigma_max:e}, rank {rank} of {expected}")]
    IllConditioned {
        sigma_min: f64,
        sigma_max: f64,
        rank: usize,
        expected: usize,
    },
    #[error("certificate degenerate: rho_fit = {}", .0.rho_fit)]
    Degenerate(Box<Verification>),
    #[error("grid_n must be at least 90, got {0}")]
    GridTooSmall(usize),
    #[error("teacher index {0} out of range")]
    BadIndex(usize),
}

/// Truncated high-order kernel profile `g`.
#[derive(Debug, Clone, PartialEq)]
pub struct TruncatedKernel {
    pub ell: usize,
    pub k_max: usize,
    pub z2: f64,
    /// `sigma_hat_k^2 / Z2` for `k = ell..=k_max`.
    weights: Vec<f64>,
}

impl TruncatedKernel {
    pub fn new(table: &HermiteTable, ell: usize, k_max: usize) -> Result<TruncatedKernel, CertificateError> {
        if ell < 2 || ell > k_max {
            return Err(CertificateError::InvalidOrder { ell, k_max });
        }
        if k_max > table.k_max() {
            return Err(CertificateError::TableTooShort {
                requested: k_max,
                available: table.k_max(),
            });
        }
        let raw: Vec<f64> = (ell..=k_max).map(|k| table.get(k).powi(2)).collect();
        let z2 = crate::numeric::compensated_sum(raw.iter().copied());
        Ok(TruncatedKernel {
            ell,
            k_max,
            z2,
            weights: raw.into_iter().map(|v| v / z2).collect(),
        })
    }

    /// `[g(c), g'(c), g''(c), g'''(c)]`, by Horner's rule on each series.
    pub fn profile(&self, c: f64) -> [f64; 4] {
        let mut acc = [0.0; 4];
        for (idx, q) in self.weights.iter().enumerate().rev() {
            let k = (self.ell + idx) as f64;
            let falling = [1.0, k, k * (k - 1.0), k * (k - 1.0) * (k - 2.0)];
            for n in 0..4 {
                if self.ell + idx >= n {
                    acc[n] = acc[n] * c + q * falling[n];
                }
            }
        }
        let mut out = [0.0; 4];
        for n in 0..4 {
            let lo = self.ell.max(n);
            out[n] = acc[n] * c.powi((lo - n) as i32);
        }
        out
    }
}

/// Kernel value and derivatives at a pair of unit vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelDerivatives {
    pub cos: f64,
    /// `[g, g', g'', g''']` at `cos`.
    pub profile: [f64; 4],
    pub k: f64,
    /// Spherical gradient in the first argument, `g'(c) P_w u`.
    pub k10: Vec<f64>,
    /// Bound on the operator norm of the mixed third derivative.
    pub k21_bound: f64,
    pw_u: Vec<f64>,
    pu_w: Vec<f64>,
    wbar: Vec<f64>,
    ubar: Vec<f64>,
}

fn project_out(v: &[f64], axis: &[f64]) -> Vec<f64> {
    let s = dot(v, axis);
    v.iter().zip(axis).map(|(x, a)| x - s * a).collect()
}

impl KernelDerivatives {
    /// `K11 v = g''(c) (P_w u) (P_u w . v) + g'(c) P_w P_u v`.
    pub fn k11_apply(&self, v: &[f64]) -> Vec<f64> {
        let s = self.profile[2] * dot(&self.pu_w, v);
        let pwpu = project_out(&project_out(v, &self.ubar), &self.wbar);
        self.pw_u
            .iter()
            .zip(&pwpu)
            .map(|(a, b)| s * a + self.profile[1] * b)
            .collect()
    }

    /// `v^T K20 v = g''(c) (P_w u . v)^2 - g'(c) c ||P_w v||^2`.
    pub fn k20_quad(&self, v: &[f64]) -> f64 {
        let pv = project_out(v, &self.wbar);
        self.profile[2] * dot(&self.pw_u, v).powi(2) - self.profile[1] * self.cos * dot(&pv, &pv)
    }
}

pub fn kernel_and_derivatives(
    wbar: &[f64],
    ubar: &[f64],
    kernel: &TruncatedKernel,
) -> KernelDerivatives {
    let c = dot(wbar, ubar).clamp(-1.0, 1.0);
    let profile = kernel.profile(c);
    let pw_u = project_out(ubar, wbar);
    let pu_w = project_out(wbar, ubar);
    let s = norm(&pw_u);
    let [_, g1, g2, g3] = profile;
    KernelDerivatives {
        cos: c,
        profile,
        k: profile[0],
        k10: pw_u.iter().map(|x| g1 * x).collect(),
        k21_bound: g3.abs() * s.powi(3) + 2.0 * g2.abs() * s + (g2.abs() * c.abs() + g1.abs()) * s,
        pw_u,
        pu_w,
        wbar: wbar.to_vec(),
        ubar: ubar.to_vec(),
    }
}

/// `ceil(8 Delta^-2 ln(8 m / Delta))` rounded up to even, at least 4.
pub fn default_ell(m_star: usize, delta: f64) -> usize {
    let delta = delta.min(FRAC_PI_2);
    let raw = (8.0 / (delta * delta) * (8.0 * m_star as f64 / delta).ln()).ceil().max(4.0) as usize;
    raw + raw % 2
}

pub fn default_k_max(ell: usize) -> usize {
    20 * ell
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Certificate {
    pub alpha1: Vec<f64>,
    /// Tangent coefficients, one row per teacher.
    pub alpha2: Vec<Vec<f64>>,
    pub ell: usize,
    pub k_max: usize,
    #[serde(rename = "Z2")]
    pub z2: f64,
    /// `sqrt(sum_i alpha1_i sign(a_i*) / Z2)`, the norm of the dual
    /// pre-image against the unnormalized high-order activation.
    pub p_norm_est: f64,
    pub rho_fit: Option<f64>,
    /// Singular values of the solved system, descending.
    pub singular_values: Vec<f64>,
    #[serde(skip)]
    pub kernel: TruncatedKernel,
}

/// Builds and solves the interpolation system with unknowns expressed in
/// the orthonormal `basis` (vectors of length `d`). Every teacher direction
/// must lie in its span.
fn solve_in_basis(
    teacher: &Teacher,
    basis: &[Vec<f64>],
    kernel: &TruncatedKernel,
) -> Result<(Vec<f64>, Vec<Vec<f64>>, Vec<f64>), CertificateError> {
    let m = teacher.width();
    let q = basis.len();
    let coords: Vec<Vec<f64>> = teacher
        .w
        .iter()
        .map(|w| basis.iter().map(|b| dot(b, w)).collect())
        .collect();
    let n = m * (q + 1);
    let mut a = DMatrix::<f64>::zeros(n, n);
    let mut rhs = DVector::<f64>::zeros(n);
    for i in 0..m {
        rhs[i] = teacher.a[i].signum();
        for j in 0..m {
            let kd = kernel_and_derivatives(&coords[j], &coords[i], kernel);
            let [g0, g1, g2, _] = kd.profile;
            // P_j t_i and P_i t_j
            let pj_ti = project_out(&coords[i], &coords[j]);
            let pi_tj = project_out(&coords[j], &coords[i]);
            a[(i, j)] = g0;
            for x in 0..q {
                a[(i, m + j * q + x)] = g1 * pj_ti[x];
                a[(m + i * q + x, j)] = g1 * pi_tj[x];
                let mut unit = vec![0.0; q];
                for y in 0..q {
                    unit[y] = 1.0;
                    let pipj = project_out(&project_out(&unit, &coords[j]), &coords[i]);
                    a[(m + i * q + x, m + j * q + y)] = g2 * pi_tj[x] * pj_ti[y] + g1 * pipj[x];
                    unit[y] = 0.0;
                }
            }
        }
    }
    let svd = a.svd(true, true);
    let sigma = svd.singular_values.clone();
    let sigma_max = sigma.max();
    let cutoff = 1e-10 * sigma_max;
    let kept: Vec<usize> = (0..n).filter(|&k| sigma[k] > cutoff).collect();
    let sigma_min = kept.iter().map(|&k| sigma[k]).fold(f64::INFINITY, f64::min);
    let expected = m * q;
    if kept.len() < expected.min(n) || sigma_min < 1e-8 * sigma_max {
        return Err(CertificateError::IllConditioned {
            sigma_min,
            sigma_max,
            rank: kept.len(),
            expected,
        });
    }
    let u = svd.u.as_ref().expect("u requested");
    let v_t = svd.v_t.as_ref().expect("v_t requested");
    let mut sol = DVector::<f64>::zeros(n);
    for &k in &kept {
        let coef = u.column(k).dot(&rhs) / sigma[k];
        sol += v_t.row(k).transpose() * coef;
    }
    let alpha1 = (0..m).map(|i| sol[i]).collect();
    let d = teacher.dim();
    let alpha2 = (0..m)
        .map(|j| {
            let mut row = vec![0.0; d];
            for x in 0..q {
                for (r, b) in row.iter_mut().zip(&basis[x]) {
                    *r += sol[m + j * q + x] * b;
                }
            }
            project_out(&row, &teacher.w[j])
        })
        .collect();
    let mut values: Vec<f64> = sigma.iter().copied().collect();
    values.sort_by(|x, y| y.total_cmp(x));
    Ok((alpha1, alpha2, values))
}

fn finish(
    teacher: &Teacher,
    kernel: TruncatedKernel,
    (alpha1, alpha2, singular_values): (Vec<f64>, Vec<Vec<f64>>, Vec<f64>),
) -> Certificate {
    let p_sq: f64 = alpha1.iter().zip(&teacher.a).map(|(x, a)| x * a.signum()).sum();
    Certificate {
        p_norm_est: (p_sq.max(0.0) / kernel.z2).sqrt(),
        alpha1,
        alpha2,
        ell: kernel.ell,
        k_max: kernel.k_max,
        z2: kernel.z2,
        rho_fit: None,
        singular_values,
        kernel,
    }
}

/// Solves in the coordinates of the teacher subspace.
pub fn assemble_certificate(
    teacher: &Teacher,
    table: &HermiteTable,
    ell: usize,
    k_max: usize,
) -> Result<Certificate, CertificateError> {
    let kernel = TruncatedKernel::new(table, ell, k_max)?;
    let solved = solve_in_basis(teacher, &teacher.basis_columns(), &kernel)?;
    Ok(finish(teacher, kernel, solved))
}

/// Same system in ambient coordinates; used to cross-check the reduced solve.
pub fn assemble_certificate_ambient(
    teacher: &Teacher,
    table: &HermiteTable,
    ell: usize,
    k_max: usize,
) -> Result<Certificate, CertificateError> {
    let kernel = TruncatedKernel::new(table, ell, k_max)?;
    let d = teacher.dim();
    let basis: Vec<Vec<f64>> = (0..d)
        .map(|i| (0..d).map(|k| if i == k { 1.0 } else { 0.0 }).collect())
        .collect();
    let solved = solve_in_basis(teacher, &basis, &kernel)?;
    Ok(finish(teacher, kernel, solved))
}

pub fn eval_eta(cert: &Certificate, teacher: &Teacher, w: &[f64]) -> f64 {
    teacher
        .w
        .iter()
        .zip(cert.alpha1.iter().zip(&cert.alpha2))
        .map(|(wj, (a1, a2))| {
            let c = dot(wj, w).clamp(-1.0, 1.0);
            let [g0, g1, _, _] = cert.kernel.profile(c);
            a1 * g0 + g1 * (dot(a2, w) - dot(a2, wj) * c)
        })
        .sum()
}

/// Spherical gradient `P_w grad eta(w)`.
pub fn eta_gradient(cert: &Certificate, teacher: &Teacher, w: &[f64]) -> Vec<f64> {
    let d = w.len();
    let mut grad = vec![0.0; d];
    for (wj, (a1, a2)) in teacher.w.iter().zip(cert.alpha1.iter().zip(&cert.alpha2)) {
        let c = dot(wj, w).clamp(-1.0, 1.0);
        let [_, g1, g2, _] = cert.kernel.profile(c);
        let a2_t = project_out(a2, wj);
        let radial = a1 * g1 + g2 * dot(&a2_t, w);
        for k in 0..d {
            grad[k] += radial * wj[k] + g1 * a2_t[k];
        }
    }
    project_out(&grad, w)
}

/// `(max_i |eta(w_i*) - sign(a_i*)|, max_i ||P grad eta(w_i*)||)`.
pub fn interpolation_errors(cert: &Certificate, teacher: &Teacher) -> (f64, f64) {
    teacher.w.iter().zip(&teacher.a).fold((0.0f64, 0.0f64), |(e, g), (w, a)| {
        (
            e.max((eval_eta(cert, teacher, w) - a.signum()).abs()),
            g.max(norm(&eta_gradient(cert, teacher, w))),
        )
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorstPoint {
    pub w: Vec<f64>,
    pub eta: f64,
    /// `1 - |eta(w)|`
    pub margin: f64,
    /// Unsigned angle to the nearest teacher direction.
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verification {
    /// `min (1 - |eta|) / delta^2` over in-subspace grid points with
    /// `delta > 1e-3`.
    pub rho_fit: f64,
    /// Grid point attaining `rho_fit`.
    pub worst: WorstPoint,
    pub max_abs_eta_grid: f64,
    pub max_abs_eta_ambient: f64,
    pub grid_points: usize,
    pub ambient_points: usize,
}

/// Points of the unit sphere of the teacher subspace: a full circle for
/// `r = 2`, a Fibonacci lattice for `r = 3`, seeded uniform samples beyond.
/// A rank-one subspace is widened to a plane by one orthogonal axis.
pub fn subspace_grid(teacher: &Teacher, grid_n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut basis = teacher.basis_columns();
    if basis.len() == 1 && teacher.dim() > 1 {
        let extra = (0..teacher.dim())
            .map(|i| {
                let mut e = vec![0.0; teacher.dim()];
                e[i] = 1.0;
                project_out(&e, &basis[0])
            })
            .max_by(|x, y| norm(x).total_cmp(&norm(y)))
            .and_then(|e| normalize(&e, NORM_FLOOR))
            .map(|(e, _)| e);
        basis.extend(extra);
    }
    let r = basis.len();
    let lift = |coords: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; teacher.dim()];
        for (c, b) in coords.iter().zip(&basis) {
            for (o, x) in out.iter_mut().zip(b) {
                *o += c * x;
            }
        }
        out
    };
    match r {
        0 | 1 => vec![lift(&[1.0])],
        2 => (0..grid_n)
            .map(|k| {
                let t = 2.0 * PI * k as f64 / grid_n as f64;
                lift(&[t.cos(), t.sin()])
            })
            .collect(),
        3 => {
            let golden = PI * (3.0 - 5f64.sqrt());
            (0..grid_n)
                .map(|k| {
                    let z = 1.0 - 2.0 * (k as f64 + 0.5) / grid_n as f64;
                    let rad = (1.0 - z * z).sqrt();
                    let t = golden * k as f64;
                    lift(&[rad * t.cos(), rad * t.sin(), z])
                })
                .collect()
        }
        _ => random_directions(r, grid_n, seed).iter().map(|c| lift(c)).collect(),
    }
}

fn random_directions(d: usize, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let x: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        if let Some((u, _)) = normalize(&x, NORM_FLOOR) {
            out.push(u);
        }
    }
    out
}

fn nearest_delta(teacher: &Teacher, w: &[f64]) -> f64 {
    teacher
        .w
        .iter()
        .map(|v| unsigned_angle(w, v))
        .fold(f64::INFINITY, f64::min)
}

/// Scans the subspace grid and `ambient_samples` uniform directions of
/// `R^d`, fits the quadratic-decay constant and records it on `cert`.
pub fn verify_nondegeneracy(
    cert: &mut Certificate,
    teacher: &Teacher,
    grid_n: usize,
    ambient_samples: usize,
    seed: u64,
) -> Result<Verification, CertificateError> {
    if grid_n < 90 {
        return Err(CertificateError::GridTooSmall(grid_n));
    }
    let grid = subspace_grid(teacher, grid_n, seed);
    let cert_ref = &*cert;
    let scored: Vec<WorstPoint> = grid
        .par_iter()
        .map(|w| {
            let eta = eval_eta(cert_ref, teacher, w);
            WorstPoint {
                w: w.clone(),
                eta,
                margin: 1.0 - eta.abs(),
                delta: nearest_delta(teacher, w),
            }
        })
        .collect();
    let ambient = random_directions(teacher.dim(), ambient_samples, seed ^ 0x5eed);
    let max_abs_eta_ambient = ambient
        .par_iter()
        .map(|w| eval_eta(cert_ref, teacher, w).abs())
        .reduce(|| 0.0, f64::max);
    let max_abs_eta_grid = scored.iter().map(|p| p.eta.abs()).fold(0.0, f64::max);
    let worst = scored
        .iter()
        .filter(|p| p.delta > 1e-3)
        .min_by(|x, y| (x.margin / (x.delta * x.delta)).total_cmp(&(y.margin / (y.delta * y.delta))))
        .cloned()
        .unwrap_or_else(|| scored[0].clone());
    let rho_fit = worst.margin / (worst.delta * worst.delta);
    cert.rho_fit = Some(rho_fit);
    let report = Verification {
        rho_fit,
        worst,
        max_abs_eta_grid,
        max_abs_eta_ambient,
        grid_points: grid.len(),
        ambient_points: ambient.len(),
    };
    if !(rho_fit > 0.0) {
        return Err(CertificateError::Degenerate(Box::new(report)));
    }
    Ok(report)
}

/// `ceil((5/delta^2) ln(16 ||a*||_1 / |a_i*|))` with `delta = Delta/2`,
/// rounded up to even.
pub fn default_ell_t(teacher: &Teacher, i: usize) -> usize {
    let delta = 0.5 * teacher.delta_sep.min(FRAC_PI_2);
    let raw = (5.0 / (delta * delta) * (16.0 * teacher.a_l1() / teacher.a[i].abs()).ln())
        .ceil()
        .max(2.0) as usize;
    raw + raw % 2
}

/// `sum_{ell_t <= k < 2 ell_t} |sigma_hat_k|`.
pub fn test_scale(table: &HermiteTable, ell_t: usize) -> f64 {
    (ell_t..2 * ell_t).map(|k| table.get(k).abs()).sum()
}

/// `<-R, g>` for the test function
/// `g(x) = sum_{ell_t <= k < 2 ell_t} sign(a_i*) sign(sigma_hat_k) h_k(w_i*.x)`.
/// Heads drop out since every `k >= 2`.
pub fn test_statistic(
    student: &Student,
    teacher: &Teacher,
    i: usize,
    ell_t: usize,
    table: &HermiteTable,
) -> Result<f64, CertificateError> {
    if i >= teacher.width() {
        return Err(CertificateError::BadIndex(i));
    }
    if ell_t < 2 {
        return Err(CertificateError::InvalidOrder { ell: ell_t, k_max: 2 * ell_t });
    }
    if 2 * ell_t - 1 > table.k_max() {
        return Err(CertificateError::TableTooShort {
            requested: 2 * ell_t - 1,
            available: table.k_max(),
        });
    }
    let target = &teacher.w[i];
    let sign = teacher.a[i].signum();
    let series = |c: f64| -> f64 {
        let mut acc = 0.0;
        for k in (ell_t..2 * ell_t).rev() {
            acc = acc * c + table.get(k).abs();
        }
        sign * acc * c.powi(ell_t as i32)
    };
    let teacher_part: f64 = teacher
        .a
        .iter()
        .zip(&teacher.w)
        .map(|(a, w)| a * series(dot(w, target).clamp(-1.0, 1.0)))
        .sum();
    let student_part: f64 = student
        .a
        .iter()
        .zip(&student.w)
        .filter_map(|(a, w)| normalize(w, NORM_FLOOR).map(|(u, n)| a * n * series(dot(&u, target).clamp(-1.0, 1.0))))
        .sum();
    Ok(teacher_part - student_part)
}

/// JSON report of the `certify` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertifyReport {
    pub ell: usize,
    pub k_max: usize,
    pub rho_fit: f64,
    pub interp_error: f64,
    pub grad_error: f64,
    pub max_abs_eta: f64,
    pub worst_point: WorstPoint,
    pub p_norm_est: f64,
    pub alpha1: Vec<f64>,
}
