//! Euclidean projections onto the probability simplex, with or without a
//! prescribed mean.

use crate::error::{Error, Result};
use crate::kernel::project_scaled_simplex;

pub fn project_simplex(y: &[f64]) -> Vec<f64> {
    let mut w = y.to_vec();
    project_scaled_simplex(&mut w, 1.0);
    w
}

/// Projection of `y` onto { w ≥ 0, Σw = 1, Σw_j x_j = m }.
///
/// The solution is w_j = max(0, y_j − α − βx_j). For fixed β the simplex
/// projection gives α, and the resulting mean is nonincreasing in β, so β is
/// found by bisection. A final affine correction on the support removes the
/// remaining rounding in both constraints.
pub fn project_simplex_mean(y: &[f64], xs: &[f64], m: f64) -> Result<Vec<f64>> {
    assert_eq!(y.len(), xs.len());
    let (lo_x, hi_x) = xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(*x), b.max(*x)));
    if !(m >= lo_x - 1e-12 && m <= hi_x + 1e-12) {
        return Err(Error::InvalidParams(format!("mean {m} outside the support range [{lo_x}, {hi_x}]")));
    }
    let at = |beta: f64| {
        let z: Vec<f64> = y.iter().zip(xs).map(|(a, x)| a - beta * x).collect();
        project_simplex(&z)
    };
    let mean_of = |w: &[f64]| w.iter().zip(xs).map(|(a, x)| a * x).sum::<f64>();
    let mut lo = -1.0;
    let mut hi = 1.0;
    while mean_of(&at(lo)) < m && lo > -1e15 {
        lo *= 2.0;
    }
    while mean_of(&at(hi)) > m && hi < 1e15 {
        hi *= 2.0;
    }
    let mut w = at(0.5 * (lo + hi));
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        w = at(mid);
        if mean_of(&w) > m {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * (1.0 + mid.abs()) {
            break;
        }
    }
    polish(&mut w, xs, m);
    Ok(w)
}

/// Add a + b·x_j on the support so that mass and mean hold to rounding,
/// provided no weight turns negative.
fn polish(w: &mut [f64], xs: &[f64], m: f64) {
    let supp: Vec<usize> = (0..w.len()).filter(|&j| w[j] > 0.0).collect();
    let dm = 1.0 - w.iter().sum::<f64>();
    let dmean = m - w.iter().zip(xs).map(|(a, x)| a * x).sum::<f64>();
    let n = supp.len() as f64;
    let sx: f64 = supp.iter().map(|&j| xs[j]).sum();
    let sxx: f64 = supp.iter().map(|&j| xs[j] * xs[j]).sum();
    let det = n * sxx - sx * sx;
    let (a, b) = if det.abs() > 1e-14 {
        ((dm * sxx - dmean * sx) / det, (n * dmean - sx * dm) / det)
    } else if n > 0.0 {
        (dm / n, 0.0)
    } else {
        return;
    };
    if supp.iter().all(|&j| w[j] + a + b * xs[j] >= 0.0) {
        for &j in &supp {
            w[j] += a + b * xs[j];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_projection_is_feasible_and_fixes_feasible_points() {
        let xs: Vec<f64> = (0..8).map(|i| -1.0 + 0.25 * i as f64).collect();
        let y = vec![0.3, -0.2, 0.9, 0.1, 0.0, 0.4, -0.5, 0.2];
        let w = project_simplex_mean(&y, &xs, 0.1).unwrap();
        assert!(w.iter().all(|v| *v >= 0.0));
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((w.iter().zip(&xs).map(|(a, x)| a * x).sum::<f64>() - 0.1).abs() < 1e-12);
        let again = project_simplex_mean(&w, &xs, 0.1).unwrap();
        for (a, b) in w.iter().zip(&again) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn infeasible_mean_is_rejected() {
        assert!(project_simplex_mean(&[0.5, 0.5], &[-1.0, 0.0], 0.4).is_err());
    }
}
