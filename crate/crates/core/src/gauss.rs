//! Closed-form Gaussian expectations for ReLU units and a reproducible Monte
//! Carlo oracle for quantities without one.
//!
//! All expectations are over `x ~ N(0, I_d)`.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::numeric::{dot, norm, scaled, unit_angle};

/// Norms below this are treated as exactly zero.
pub const NORM_FLOOR: f64 = 1e-14;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Second moment of the ReLU with its constant and linear Hermite parts
/// removed: `1/2 - 1/(2 pi) - 1/4`.
pub const SIGMA_GE2_ENERGY: f64 = 0.5 - 1.0 / (2.0 * PI) - 0.25;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum GaussError {
    #[error("vector norm {0:e} is below the degenerate-input floor")]
    Degenerate(f64),
    #[error("expected a unit vector, got norm {0}")]
    NotUnit(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MCEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub samples: usize,
}

impl MCEstimate {
    /// `|mean - target| <= k * stderr`, with a rounding allowance.
    pub fn agrees_with(&self, target: f64, k: f64) -> bool {
        (self.mean - target).abs() <= k * self.stderr + 1e-12 * (1.0 + target.abs())
    }
}

/// `(sin t + (pi - t) cos t) / (2 pi)`: the unit-norm arc-cosine kernel at angle `t`.
pub fn arccos_kernel_unit(theta: f64, cos: f64) -> f64 {
    (theta.sin() + (PI - theta) * cos) / (2.0 * PI)
}

fn unit_and_norm(v: &[f64]) -> Option<(Vec<f64>, f64)> {
    let n = norm(v);
    (n >= NORM_FLOOR).then(|| (scaled(1.0 / n, v), n))
}

/// `E[relu(w.x) relu(u.x)]`.
pub fn relu_pair_kernel(w: &[f64], u: &[f64]) -> f64 {
    let (Some((wb, nw)), Some((ub, nu))) = (unit_and_norm(w), unit_and_norm(u)) else {
        return 0.0;
    };
    let theta = unit_angle(&wb, &ub);
    let cos = dot(&wb, &ub).clamp(-1.0, 1.0);
    nw * nu * arccos_kernel_unit(theta, cos)
}

/// Gradient of [`relu_pair_kernel`] in its first argument.
pub fn relu_pair_kernel_grad(w: &[f64], u: &[f64]) -> Result<Vec<f64>, GaussError> {
    let (wb, _) = unit_and_norm(w).ok_or(GaussError::Degenerate(norm(w)))?;
    let Some((ub, nu)) = unit_and_norm(u) else {
        return Ok(vec![0.0; w.len()]);
    };
    let theta = unit_angle(&wb, &ub);
    let radial = nu * theta.sin() / (2.0 * PI);
    let along = (PI - theta) / (2.0 * PI);
    Ok(wb
        .iter()
        .zip(u)
        .map(|(wi, ui)| radial * wi + along * ui)
        .collect())
}

/// `(E[relu(w.x)], E[relu(w.x) x])`.
pub fn relu_low_order_moments(w: &[f64]) -> (f64, Vec<f64>) {
    (norm(w) * INV_SQRT_2PI, scaled(0.5, w))
}

/// `E[s(w.x) s(u.x)]` for unit `w, u` where `s(z) = relu(z) - 1/sqrt(2 pi) - z/2`.
pub fn sigma_ge2_kernel(wbar: &[f64], ubar: &[f64]) -> Result<f64, GaussError> {
    for v in [wbar, ubar] {
        let n = norm(v);
        if (n - 1.0).abs() > 1e-10 {
            return Err(GaussError::NotUnit(n));
        }
    }
    let theta = unit_angle(wbar, ubar);
    let cos = dot(wbar, ubar).clamp(-1.0, 1.0);
    Ok(sigma_ge2_from_angle(theta, cos))
}

/// [`sigma_ge2_kernel`] from a precomputed angle and cosine.
pub fn sigma_ge2_from_angle(theta: f64, cos: f64) -> f64 {
    arccos_kernel_unit(theta, cos) - 1.0 / (2.0 * PI) - cos / 4.0
}

const MC_CHUNK: usize = 8192;

#[derive(Clone, Copy)]
struct Moments {
    n: usize,
    mean: f64,
    m2: f64,
}

impl Moments {
    fn combine(self, other: Moments) -> Moments {
        if self.n == 0 {
            return other;
        }
        if other.n == 0 {
            return self;
        }
        let n = self.n + other.n;
        let delta = other.mean - self.mean;
        let mean = self.mean + delta * (other.n as f64 / n as f64);
        let m2 = self.m2 + other.m2 + delta * delta * (self.n as f64 * other.n as f64 / n as f64);
        Moments { n, mean, m2 }
    }
}

/// Monte Carlo estimate of `E[f(x)]`, `x ~ N(0, I_d)`.
///
/// Samples are drawn in fixed-size chunks, each from its own ChaCha stream
/// keyed by `(seed, chunk index)`, and chunk statistics are merged in index
/// order, so the result does not depend on thread scheduling.
pub fn mc_expectation<F>(f: F, d: usize, n: usize, seed: u64) -> MCEstimate
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    mc_expectation_many(|x, out| out[0] = f(x), 1, d, n, seed)[0]
}

/// [`mc_expectation`] for `outputs` functions evaluated on the same samples;
/// `f(x, out)` fills `out`.
pub fn mc_expectation_many<F>(f: F, outputs: usize, d: usize, n: usize, seed: u64) -> Vec<MCEstimate>
where
    F: Fn(&[f64], &mut [f64]) + Sync,
{
    let n = n.max(1);
    let chunks = n.div_ceil(MC_CHUNK);
    let empty = Moments { n: 0, mean: 0.0, m2: 0.0 };
    let parts: Vec<Vec<Moments>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c as u64);
            let count = MC_CHUNK.min(n - c * MC_CHUNK);
            let mut x = vec![0.0; d];
            let mut v = vec![0.0; outputs];
            let mut acc = vec![empty; outputs];
            for _ in 0..count {
                for xi in x.iter_mut() {
                    *xi = StandardNormal.sample(&mut rng);
                }
                f(&x, &mut v);
                for (a, val) in acc.iter_mut().zip(&v) {
                    a.n += 1;
                    let delta = val - a.mean;
                    a.mean += delta / a.n as f64;
                    a.m2 += delta * (val - a.mean);
                }
            }
            acc
        })
        .collect();
    (0..outputs)
        .map(|o| {
            let total = parts.iter().fold(empty, |acc, p| acc.combine(p[o]));
            let var = if total.n > 1 {
                (total.m2 / (total.n - 1) as f64).max(0.0)
            } else {
                0.0
            };
            MCEstimate {
                mean: total.mean,
                stderr: (var / total.n as f64).sqrt(),
                samples: total.n,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hermite::{build_table, Activation};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn e(d: usize, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        v
    }

    #[test]
    fn kernel_special_angles() {
        let w = e(3, 0);
        assert_abs_diff_eq!(relu_pair_kernel(&w, &w), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(relu_pair_kernel(&w, &scaled(-1.0, &w)), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(relu_pair_kernel(&w, &e(3, 1)), 1.0 / (2.0 * PI), epsilon = 1e-15);
        assert_eq!(relu_pair_kernel(&[0.0; 3], &w), 0.0);
    }

    #[test]
    fn kernel_grad_special_angles() {
        let u = [0.6, 0.8, 0.0];
        let g = relu_pair_kernel_grad(&u, &u).unwrap();
        for (gi, ui) in g.iter().zip(&u) {
            assert_abs_diff_eq!(*gi, ui / 2.0, epsilon = 1e-15);
        }
        let g = relu_pair_kernel_grad(&u, &scaled(-1.0, &u)).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-15));
        assert_eq!(
            relu_pair_kernel_grad(&[0.0; 3], &u),
            Err(GaussError::Degenerate(0.0))
        );
    }

    #[test]
    fn low_order_moments_examples() {
        let (m, l) = relu_low_order_moments(&e(3, 0));
        assert_abs_diff_eq!(m, 0.398_942_3, epsilon = 1e-7);
        assert_eq!(l, vec![0.5, 0.0, 0.0]);
        let (m, l) = relu_low_order_moments(&[0.0, 2.0]);
        assert_abs_diff_eq!(m, 0.797_884_6, epsilon = 1e-7);
        assert_eq!(l, vec![0.0, 1.0]);
        assert_eq!(relu_low_order_moments(&[0.0; 2]), (0.0, vec![0.0; 2]));
    }

    #[test]
    fn sigma_ge2_examples() {
        let a = e(2, 0);
        assert_abs_diff_eq!(sigma_ge2_kernel(&a, &a).unwrap(), 0.090_845_1, epsilon = 1e-7);
        assert_abs_diff_eq!(sigma_ge2_kernel(&a, &e(2, 1)).unwrap(), 0.0, epsilon = 1e-16);
        assert_abs_diff_eq!(
            sigma_ge2_kernel(&a, &[-1.0, 0.0]).unwrap(),
            SIGMA_GE2_ENERGY,
            epsilon = 1e-15
        );
        assert!(matches!(sigma_ge2_kernel(&[2.0, 0.0], &a), Err(GaussError::NotUnit(_))));
    }

    #[test]
    fn sigma_ge2_matches_truncated_series_on_grid() {
        let table = build_table(Activation::Relu, 4096).unwrap();
        for i in 0..=180 {
            let theta = PI * i as f64 / 180.0;
            let c = theta.cos();
            let closed = sigma_ge2_from_angle(theta, c);
            let mut series = 0.0;
            let mut p = c * c;
            for k in 2..=4096 {
                series += table.get(k).powi(2) * p;
                p *= c;
            }
            assert!((closed - series).abs() <= 1e-5, "theta={theta}");
        }
    }

    #[test]
    fn mc_basics() {
        let one = mc_expectation(|_| 1.0, 3, 1000, 1);
        assert_eq!((one.mean, one.stderr, one.samples), (1.0, 0.0, 1000));
        let sq = mc_expectation(|x| x[0] * x[0], 4, 200_000, 3);
        assert!(sq.agrees_with(1.0, 5.0));
        let again = mc_expectation(|x| x[0] * x[0], 4, 200_000, 3);
        assert_eq!(sq, again);
        let other = mc_expectation(|x| x[0] * x[0], 4, 200_000, 4);
        assert_ne!(sq.mean, other.mean);
    }

    fn vec_strategy(d: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-2.0f64..2.0, d)
            .prop_filter("nonzero", |v| norm(v) > 1e-3)
    }

    proptest! {
        #[test]
        fn kernel_symmetric_bounded_homogeneous(w in vec_strategy(5), u in vec_strategy(5), s in 0.1f64..5.0) {
            let k = relu_pair_kernel(&w, &u);
            prop_assert!((k - relu_pair_kernel(&u, &w)).abs() <= 1e-14 * (1.0 + k));
            prop_assert!(k >= 0.0 && k <= norm(&w) * norm(&u) / 2.0 + 1e-14);
            let ks = relu_pair_kernel(&scaled(s, &w), &u);
            prop_assert!((ks - s * k).abs() <= 1e-12 * (1.0 + ks));
        }

        #[test]
        fn kernel_grad_matches_finite_differences(w in vec_strategy(8), u in vec_strategy(8)) {
            let g = relu_pair_kernel_grad(&w, &u).unwrap();
            let h = 1e-6;
            for i in 0..8 {
                let mut wp = w.clone();
                let mut wm = w.clone();
                wp[i] += h;
                wm[i] -= h;
                let fd = (relu_pair_kernel(&wp, &u) - relu_pair_kernel(&wm, &u)) / (2.0 * h);
                prop_assert!((fd - g[i]).abs() <= 1e-5 * g[i].abs().max(1e-2), "i={} fd={} g={}", i, fd, g[i]);
            }
        }
    }
}
