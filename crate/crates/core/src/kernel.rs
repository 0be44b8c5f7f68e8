//! The normalized Gaussian kernel K(x, x') = (√(2π)·h)^{−q}·exp(−‖x−x'‖²/(2h²)).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub bandwidth: f64,
    pub dim: usize,
}

impl KernelSpec {
    pub fn new(bandwidth: f64, dim: usize) -> Result<Self> {
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(Error::Argument(format!(
                "bandwidth must be positive and finite, got {bandwidth}"
            )));
        }
        if dim == 0 {
            return Err(Error::Argument("kernel dimension must be >= 1".into()));
        }
        Ok(KernelSpec { bandwidth, dim })
    }

    /// (√(2π)·h)^{−q}, which is also K(x, x).
    pub fn normalization(&self) -> f64 {
        ((2.0 * std::f64::consts::PI).sqrt() * self.bandwidth).powi(-(self.dim as i32))
    }

    pub fn self_value(&self) -> f64 {
        self.normalization()
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.dim);
        debug_assert_eq!(y.len(), self.dim);
        let sq: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
        self.normalization() * (-sq / (2.0 * self.bandwidth * self.bandwidth)).exp()
    }

    /// Symmetric kernel matrix over one point set.
    pub fn matrix(&self, xs: &[Vec<f64>]) -> DMatrix<f64> {
        let n = xs.len();
        let mut k = DMatrix::zeros(n, n);
        let diag = self.normalization();
        for i in 0..n {
            k[(i, i)] = diag;
            for j in 0..i {
                let v = self.eval(&xs[i], &xs[j]);
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
        }
        k
    }

    /// Rectangular kernel matrix K(xs, ys) of shape (|xs|, |ys|).
    pub fn cross(&self, xs: &[Vec<f64>], ys: &[Vec<f64>]) -> DMatrix<f64> {
        let mut k = DMatrix::zeros(xs.len(), ys.len());
        for (i, a) in xs.iter().enumerate() {
            for (j, b) in ys.iter().enumerate() {
                k[(i, j)] = self.eval(a, b);
            }
        }
        k
    }

    /// Kernel column K(xs, x).
    pub fn column(&self, xs: &[Vec<f64>], x: &[f64]) -> DVector<f64> {
        DVector::from_iterator(xs.len(), xs.iter().map(|a| self.eval(a, x)))
    }
}

/// Median pairwise distance over a point cloud. Data-dependent, therefore
/// NOT private: keep it for audit-mode exploration and record any bandwidth
/// used for an actual release as a fixed configuration value.
pub fn median_heuristic(xs: &[Vec<f64>]) -> Option<f64> {
    let n = xs.len();
    if n < 2 {
        return None;
    }
    let stride = if n > 500 { n / 500 + 1 } else { 1 };
    let mut dists = Vec::new();
    let picked: Vec<&Vec<f64>> = xs.iter().step_by(stride).collect();
    for i in 0..picked.len() {
        for j in 0..i {
            let d: f64 = picked[i]
                .iter()
                .zip(picked[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            dists.push(d);
        }
    }
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    dists.get(dists.len() / 2).copied().filter(|d| *d > 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn self_value_matches_normalization() {
        let k = KernelSpec::new(1.0, 2).unwrap();
        // (√(2π))^{-2} = 1/(2π)
        assert_relative_eq!(
            k.eval(&[0.3, 0.7], &[0.3, 0.7]),
            1.0 / (2.0 * std::f64::consts::PI),
            epsilon = 1e-15
        );
        assert_relative_eq!(k.self_value(), 0.15915, epsilon = 1e-5);
    }

    #[test]
    fn rejects_degenerate_specs() {
        assert!(KernelSpec::new(0.0, 1).is_err());
        assert!(KernelSpec::new(-1.0, 1).is_err());
        assert!(KernelSpec::new(1.0, 0).is_err());
    }

    #[test]
    fn kernel_is_symmetric_and_decaying() {
        let k = KernelSpec::new(0.5, 1).unwrap();
        let a = [0.2];
        let b = [0.9];
        assert_relative_eq!(k.eval(&a, &b), k.eval(&b, &a));
        assert!(k.eval(&a, &b) < k.eval(&a, &a));
    }

    #[test]
    fn median_heuristic_on_unit_interval() {
        let xs: Vec<Vec<f64>> = (0..100).map(|i| vec![i as f64 / 100.0]).collect();
        let h = median_heuristic(&xs).unwrap();
        assert!(h > 0.1 && h < 0.6, "median distance {h}");
    }
}
