//! Small statistics helpers: means, batch means, jackknife, quadrature.

use serde::{Deserialize, Serialize};

/// A Monte Carlo value with its standard error (0 for exact values).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub se: f64,
}

impl Estimate {
    pub fn exact(value: f64) -> Self {
        Self { value, se: 0.0 }
    }

    pub fn from_samples(xs: &[f64]) -> Self {
        let (value, se) = mean_se(xs);
        Self { value, se: if xs.len() > 1 { se } else { 0.0 } }
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance; 0 for fewer than two points.
pub fn variance(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64
}

/// Mean and standard error of the mean for i.i.d. samples.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    (mean(xs), (variance(xs) / n as f64).sqrt())
}

#[derive(Clone, Copy, Debug)]
pub struct BatchMeans {
    pub mean: f64,
    pub se: f64,
    /// Integrated autocorrelation time estimate, in units of recorded samples.
    pub tau_int: f64,
    pub n_batches: usize,
}

/// Batch-means standard error for a correlated series.
pub fn batch_means(xs: &[f64], n_batches: usize) -> BatchMeans {
    let n = xs.len();
    let n_batches = n_batches.max(2).min(n.max(2));
    let bsize = (n / n_batches).max(1);
    let used = bsize * n_batches.min(n / bsize);
    let nb = used / bsize;
    let m = mean(&xs[..used]);
    if nb < 2 {
        return BatchMeans { mean: m, se: f64::NAN, tau_int: f64::NAN, n_batches: nb };
    }
    let batch: Vec<f64> = xs[..used].chunks(bsize).map(mean).collect();
    let var_b = variance(&batch);
    let var_x = variance(&xs[..used]);
    let tau = if var_x > 0.0 { bsize as f64 * var_b / var_x } else { 1.0 };
    BatchMeans { mean: m, se: (var_b / nb as f64).sqrt(), tau_int: tau, n_batches: nb }
}

/// Delete-one jackknife of a statistic computed from per-sample rows.
/// Returns (full-sample estimate, jackknife standard error).
pub fn jackknife<F>(n: usize, stat: F) -> (f64, f64)
where
    F: Fn(Option<usize>) -> f64,
{
    let full = stat(None);
    if n < 2 {
        return (full, f64::NAN);
    }
    let leave: Vec<f64> = (0..n).map(|k| stat(Some(k))).collect();
    let lm = mean(&leave);
    let var = leave.iter().map(|v| (v - lm) * (v - lm)).sum::<f64>() * (n - 1) as f64 / n as f64;
    (full, var.sqrt())
}

pub fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Gauss-Legendre nodes and weights on [-1, 1] (Newton iteration on P_n).
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// Gauss-Legendre rule mapped to [a, b].
pub fn gauss_legendre_on(n: usize, a: f64, b: f64) -> Vec<(f64, f64)> {
    let (x, w) = gauss_legendre(n);
    let half = 0.5 * (b - a);
    x.iter().zip(&w).map(|(xi, wi)| (a + half * (xi + 1.0), half * wi)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss_legendre_integrates_polynomials_exactly() {
        let rule = gauss_legendre_on(8, 0.0, 2.0);
        // degree 15 is the exactness limit for 8 nodes
        let integral: f64 = rule.iter().map(|(x, w)| w * x.powi(15)).sum();
        assert!((integral - 2f64.powi(16) / 16.0).abs() < 1e-9);
        let wsum: f64 = rule.iter().map(|(_, w)| w).sum();
        assert!((wsum - 2.0).abs() < 1e-14);
    }

    #[test]
    fn batch_means_on_iid_series() {
        let xs: Vec<f64> = (0..4000).map(|i| ((i * 7919) % 1000) as f64 / 1000.0).collect();
        let bm = batch_means(&xs, 40);
        assert!((bm.mean - mean(&xs)).abs() < 1e-12);
        assert!(bm.se > 0.0);
    }

    #[test]
    fn jackknife_of_mean_matches_standard_error() {
        let xs = [1.0, 4.0, 2.0, 8.0, 5.0, 7.0];
        let (m, se) = jackknife(xs.len(), |skip| {
            let v: Vec<f64> = xs.iter().enumerate().filter(|(i, _)| Some(*i) != skip).map(|(_, x)| *x).collect();
            mean(&v)
        });
        let (m2, se2) = mean_se(&xs);
        assert!((m - m2).abs() < 1e-12 && (se - se2).abs() < 1e-12);
    }

    #[test]
    fn log_sum_exp_is_stable() {
        assert!((log_sum_exp(&[1000.0, 1000.0]) - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert_eq!(log_add_exp(f64::NEG_INFINITY, 3.0), 3.0);
    }
}
