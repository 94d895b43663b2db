//! Normalized probabilists' Hermite polynomials and the Hermite coefficients
//! of the ReLU and absolute-value activations.
//!
//! `h_k = He_k / sqrt(k!)` is orthonormal under the standard Gaussian. The
//! coefficient tables are evaluated from their closed forms in log space so
//! that orders in the thousands do not overflow.
//!
//! The quadrature here is an oracle for tests and documentation. It splits the
//! Gaussian line at the origin and applies a Gauss rule for the half-range
//! weight `exp(-x^2/2)` on each side, which makes it exact for integrands that
//! are polynomial on each half-line (ReLU times a polynomial, for instance).

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::numeric::NeumaierSum;

/// Default truncation order for coefficient tables.
pub const DEFAULT_K_MAX: usize = 8192;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum HermiteError {
    #[error("unknown activation tag `{0}` (expected `relu` or `abs`)")]
    UnknownActivation(String),
    #[error("table order must be at least 2, got {0}")]
    OrderTooSmall(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Abs,
}

impl Activation {
    pub fn eval(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Abs => x.abs(),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Activation::Relu => f.write_str("relu"),
            Activation::Abs => f.write_str("abs"),
        }
    }
}

impl FromStr for Activation {
    type Err = HermiteError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "relu" => Ok(Activation::Relu),
            "abs" => Ok(Activation::Abs),
            other => Err(HermiteError::UnknownActivation(other.to_string())),
        }
    }
}

/// `h_k(x) = He_k(x) / sqrt(k!)` via the three-term recurrence on the
/// normalized polynomials.
pub fn hermite_normalized(k: usize, x: f64) -> f64 {
    let mut prev = 0.0;
    let mut cur = 1.0;
    for j in 0..k {
        let next = (x * cur - (j as f64).sqrt() * prev) / ((j + 1) as f64).sqrt();
        prev = cur;
        cur = next;
    }
    cur
}

/// All of `h_0(x), ..., h_k_max(x)` in one pass.
pub fn hermite_normalized_all(k_max: usize, x: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(k_max + 1);
    out.push(1.0);
    if k_max == 0 {
        return out;
    }
    out.push(x);
    for j in 1..k_max {
        let next = (x * out[j] - (j as f64).sqrt() * out[j - 1]) / ((j + 1) as f64).sqrt();
        out.push(next);
    }
    out
}

/// Hermite coefficients `sigma_hat_k = E[sigma(z) h_k(z)]`, `k = 0..=k_max`.
#[derive(Debug, Clone, PartialEq)]
pub struct HermiteTable {
    pub activation: Activation,
    pub coeffs: Vec<f64>,
}

impl HermiteTable {
    pub fn k_max(&self) -> usize {
        self.coeffs.len() - 1
    }

    pub fn get(&self, k: usize) -> f64 {
        self.coeffs[k]
    }

    /// `sum_{k >= from, k <= k_max} sigma_hat_k^2`.
    pub fn tail_energy(&self, from: usize) -> f64 {
        let mut acc = NeumaierSum::default();
        for c in self.coeffs.iter().skip(from) {
            acc.add(c * c);
        }
        acc.total()
    }

    /// CSV with header `k,sigma_hat_k`, full precision.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "k,sigma_hat_k")?;
        for (k, c) in self.coeffs.iter().enumerate() {
            writeln!(out, "{},{:.17e}", k, c)?;
        }
        Ok(())
    }
}

fn log_factorials(n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n + 1);
    let mut acc = NeumaierSum::default();
    out.push(0.0);
    for i in 1..=n {
        acc.add((i as f64).ln());
        out.push(acc.total());
    }
    out
}

pub fn build_table(activation: Activation, k_max: usize) -> Result<HermiteTable, HermiteError> {
    if k_max < 2 {
        return Err(HermiteError::OrderTooSmall(k_max));
    }
    let lf = log_factorials(k_max);
    let scale = match activation {
        Activation::Relu => (1.0 / (2.0 * PI)).sqrt(),
        Activation::Abs => (2.0 / PI).sqrt(),
    };
    let mut coeffs = vec![0.0; k_max + 1];
    coeffs[0] = scale;
    if activation == Activation::Relu {
        coeffs[1] = 0.5;
    }
    for k in (2..=k_max).step_by(2) {
        let half = k / 2 - 1;
        let log_mag = lf[k - 2] - 0.5 * lf[k] - (half as f64) * std::f64::consts::LN_2 - lf[half];
        let sign = if half % 2 == 0 { 1.0 } else { -1.0 };
        coeffs[k] = sign * scale * log_mag.exp();
    }
    Ok(HermiteTable { activation, coeffs })
}

/// Parses the tag and builds the table; the string form used by the CLI and
/// the Python bindings.
pub fn build_table_tagged(tag: &str, k_max: usize) -> Result<HermiteTable, HermiteError> {
    build_table(tag.parse()?, k_max)
}

static RELU_DEFAULT: OnceLock<Arc<HermiteTable>> = OnceLock::new();

/// Shared ReLU table of order [`DEFAULT_K_MAX`].
pub fn relu_table() -> Arc<HermiteTable> {
    RELU_DEFAULT
        .get_or_init(|| Arc::new(build_table(Activation::Relu, DEFAULT_K_MAX).expect("valid order")))
        .clone()
}

/// Gauss rule for the weight `phi(x) = exp(-x^2/2)/sqrt(2 pi)` restricted to
/// `[0, inf)`; the weights sum to 1/2.
#[derive(Debug, Clone)]
pub struct HalfRangeRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    // Golub-Welsch on the Legendre Jacobi matrix; n is small here.
    let mut jac = DMatrix::<f64>::zeros(n, n);
    for k in 1..n {
        let kf = k as f64;
        let b = kf / (4.0 * kf * kf - 1.0).sqrt();
        jac[(k, k - 1)] = b;
        jac[(k - 1, k)] = b;
    }
    let eig = SymmetricEigen::new(jac);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| (eig.eigenvalues[i], 2.0 * eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

impl HalfRangeRule {
    /// Recurrence coefficients come from Lanczos on a fine composite
    /// Gauss-Legendre discretization of the measure, carried on
    /// square-root-weighted vectors with full reorthogonalization so that
    /// high orders neither overflow nor lose orthogonality. Nodes and weights
    /// then come from the Jacobi matrix eigendecomposition.
    pub fn new(n: usize) -> Self {
        assert!(n >= 1);
        // exp(-t^2/4) stays a normal float up to t ~ 53
        let upper = (12.0 + 3.2 * (n as f64).sqrt()).min(52.0);
        let panel_nodes = 24;
        let panels = ((upper / 0.25).ceil() as usize).max(64);
        let width = upper / panels as f64;
        let (gx, gw) = gauss_legendre(panel_nodes);
        let norm = 1.0 / (2.0 * PI).sqrt();
        let mut xs = Vec::with_capacity(panels * panel_nodes);
        let mut roots = Vec::with_capacity(panels * panel_nodes);
        for p in 0..panels {
            let lo = p as f64 * width;
            for (x, w) in gx.iter().zip(&gw) {
                let t = lo + 0.5 * width * (x + 1.0);
                xs.push(t);
                roots.push((0.5 * width * w * norm).sqrt() * (-0.25 * t * t).exp());
            }
        }
        let len = xs.len();
        let mass: f64 = roots.iter().map(|r| r * r).sum();

        let mut diag = Vec::with_capacity(n);
        let mut off = Vec::with_capacity(n);
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n);
        let mut u: Vec<f64> = roots.iter().map(|r| r / mass.sqrt()).collect();
        for k in 0..n {
            let a: f64 = (0..len).map(|i| xs[i] * u[i] * u[i]).sum();
            diag.push(a);
            basis.push(u);
            if k + 1 == n {
                break;
            }
            let cur = &basis[k];
            let mut p: Vec<f64> = (0..len).map(|i| xs[i] * cur[i]).collect();
            for _ in 0..2 {
                for q in &basis {
                    let c: f64 = (0..len).map(|i| p[i] * q[i]).sum();
                    for i in 0..len {
                        p[i] -= c * q[i];
                    }
                }
            }
            let b = p.iter().map(|v| v * v).sum::<f64>().sqrt();
            off.push(b);
            u = p.into_iter().map(|v| v / b).collect();
        }

        let mut jac = DMatrix::<f64>::zeros(n, n);
        for k in 0..n {
            jac[(k, k)] = diag[k];
            if k + 1 < n {
                jac[(k, k + 1)] = off[k];
                jac[(k + 1, k)] = off[k];
            }
        }
        let mut nodes: Vec<f64> = SymmetricEigen::new(jac).eigenvalues.iter().copied().collect();
        nodes.sort_by(f64::total_cmp);
        // Christoffel weights 1 / sum_k p_k(x)^2 keep full relative accuracy
        // at the outer nodes, where squared eigenvector entries do not.
        let weights = nodes
            .iter()
            .map(|&x| {
                let mut prev = 0.0;
                let mut cur = 1.0 / mass.sqrt();
                let mut acc = cur * cur;
                for k in 0..n - 1 {
                    let back = if k == 0 { 0.0 } else { off[k - 1] };
                    let next = ((x - diag[k]) * cur - back * prev) / off[k];
                    prev = cur;
                    cur = next;
                    acc += cur * cur;
                }
                1.0 / acc
            })
            .collect();
        HalfRangeRule { nodes, weights }
    }
}

fn cached_rule(n: usize) -> Arc<HalfRangeRule> {
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<HalfRangeRule>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(rule) = cache.lock().expect("rule cache").get(&n) {
        return rule.clone();
    }
    let rule = Arc::new(HalfRangeRule::new(n));
    cache
        .lock()
        .expect("rule cache")
        .entry(n)
        .or_insert(rule)
        .clone()
}

/// Estimate of `E_{z ~ N(0,1)}[f(z) g(z)]` with `nodes` Gauss nodes on each
/// half-line. Exact for integrands that are polynomials of degree at most
/// `2 * nodes - 1` on each of `(-inf, 0]` and `[0, inf)`.
pub fn quadrature_inner<F, G>(f: F, g: G, nodes: usize) -> f64
where
    F: Fn(f64) -> f64,
    G: Fn(f64) -> f64,
{
    let rule = cached_rule(nodes.max(2));
    let mut acc = NeumaierSum::default();
    for (x, w) in rule.nodes.iter().zip(&rule.weights) {
        acc.add(w * f(*x) * g(*x));
        acc.add(w * f(-*x) * g(-*x));
    }
    acc.total()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn low_order_values() {
        assert_eq!(hermite_normalized(0, 3.7), 1.0);
        assert_eq!(hermite_normalized(1, 2.0), 2.0);
        assert_abs_diff_eq!(hermite_normalized(2, 1.0), 0.0, epsilon = 1e-15);
        let x = 0.7_f64;
        assert_abs_diff_eq!(
            hermite_normalized(3, x),
            (x.powi(3) - 3.0 * x) / 6.0_f64.sqrt(),
            epsilon = 1e-14
        );
        let all = hermite_normalized_all(12, x);
        for (k, v) in all.iter().enumerate() {
            assert_abs_diff_eq!(*v, hermite_normalized(k, x), epsilon = 1e-14);
        }
    }

    #[test]
    fn relu_closed_form_entries() {
        let t = build_table(Activation::Relu, 64).unwrap();
        assert_abs_diff_eq!(t.get(0), 0.398_942_280_401_432_7, epsilon = 1e-15);
        assert_eq!(t.get(1), 0.5);
        assert_eq!(t.get(3), 0.0);
        assert_abs_diff_eq!(t.get(2), 1.0 / (4.0 * PI).sqrt(), epsilon = 1e-15);
        // even-order signs alternate: + at k=2, - at k=4
        assert!(t.get(4) < 0.0 && t.get(6) > 0.0);
        for k in (3..=64).step_by(2) {
            assert_eq!(t.get(k), 0.0);
        }
    }

    #[test]
    fn abs_is_twice_relu_beyond_first_order() {
        let r = build_table(Activation::Relu, 200).unwrap();
        let a = build_table(Activation::Abs, 200).unwrap();
        assert_eq!(a.get(1), 0.0);
        for k in (0..=200).filter(|k| *k != 1) {
            assert_abs_diff_eq!(a.get(k), 2.0 * r.get(k), epsilon = 1e-15);
        }
    }

    #[test]
    fn even_ratio_recurrence_matches_log_space_table() {
        // c_{k+2} / c_k = -(k-1)/sqrt((k+1)(k+2)) is an independent route.
        let t = build_table(Activation::Relu, 4000).unwrap();
        let mut c = t.get(2);
        for k in (2..3998).step_by(2) {
            let kf = k as f64;
            c *= -(kf - 1.0) / ((kf + 1.0) * (kf + 2.0)).sqrt();
            assert!(((c - t.get(k + 2)) / c).abs() < 1e-10, "k={}", k + 2);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        assert_eq!(
            build_table_tagged("tanh", 10),
            Err(HermiteError::UnknownActivation("tanh".into()))
        );
        assert_eq!(build_table(Activation::Relu, 1), Err(HermiteError::OrderTooSmall(1)));
    }

    #[test]
    fn quadrature_orthonormality_and_relu_mean() {
        let q = |m: usize, n: usize, nodes| {
            quadrature_inner(|x| hermite_normalized(m, x), |x| hermite_normalized(n, x), nodes)
        };
        assert_abs_diff_eq!(q(3, 3, 50), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(q(2, 5, 50), 0.0, epsilon = 1e-12);
        let relu_mean = quadrature_inner(|x| x.max(0.0), |_| 1.0, 200);
        assert_abs_diff_eq!(relu_mean, 0.398_942_3, epsilon = 1e-7);
        assert_abs_diff_eq!(relu_mean, relu_table().get(0), epsilon = 1e-10);
    }

    #[test]
    fn half_range_weights_sum_to_half() {
        let rule = HalfRangeRule::new(40);
        let total: f64 = rule.weights.iter().sum();
        assert_abs_diff_eq!(total, 0.5, epsilon = 1e-14);
        assert!(rule.nodes.iter().all(|x| *x > 0.0));
    }

    #[test]
    fn csv_dump_has_header_and_rows() {
        let t = build_table(Activation::Relu, 4).unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "k,sigma_hat_k");
        assert_eq!(lines.len(), 6);
        let v: f64 = lines[3].split(',').nth(1).unwrap().parse().unwrap();
        assert_eq!(v, t.get(2));
    }
}
