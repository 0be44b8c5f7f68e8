//! Stage-2 regressors minimizing the weighted empirical orthogonal risk:
//! weighted kernel ridge regression (nonparametric path) and weighted
//! linear-basis least squares (parametric path).

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::KernelSpec;
use crate::pseudo::WeightedTarget;

/// Weighted kernel ridge regressor in dual form. `alpha` solves
/// (W·K + n·λ·I)·α = W·φ with W = diag(ρ), so that λ matches the
/// population operator form (L̂_ρ + λ·I) where L̂_ρ carries a 1/n factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KrrModel {
    pub train_x: Vec<Vec<f64>>,
    pub alpha: Vec<f64>,
    pub lambda_reg: f64,
    pub kernel: KernelSpec,
    pub rho: Vec<f64>,
    pub phi: Vec<f64>,
}

impl KrrModel {
    pub fn n(&self) -> usize {
        self.train_x.len()
    }

    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.kernel.dim {
            return Err(Error::Argument(format!(
                "query has dimension {}, model expects {}",
                x.len(),
                self.kernel.dim
            )));
        }
        Ok(self
            .train_x
            .iter()
            .zip(&self.alpha)
            .map(|(xi, a)| a * self.kernel.eval(x, xi))
            .sum())
    }

    /// Squared RKHS norm of the fitted function: αᵀKα.
    pub fn rkhs_norm_sq(&self) -> f64 {
        let k = self.kernel.matrix(&self.train_x);
        let a = DVector::from_column_slice(&self.alpha);
        (&k * &a).dot(&a)
    }
}

/// Fit the weighted KRR by a symmetrized SPD solve with a residual check and
/// one iterative-refinement pass. Writing S = W^{1/2}·K·W^{1/2}, the system
/// (W·K + nλI)·α = W·φ is equivalent to (S + nλI)·u = W^{1/2}·φ with
/// α = W^{1/2}·u.
pub fn fit_krr(
    targets: &[WeightedTarget],
    kernel: KernelSpec,
    lambda_reg: f64,
) -> Result<KrrModel> {
    if targets.is_empty() {
        return Err(Error::Argument("no targets".into()));
    }
    if !(lambda_reg > 0.0) {
        return Err(Error::Argument(format!(
            "lambda_reg must be positive, got {lambda_reg}"
        )));
    }
    let n = targets.len();
    for t in targets {
        if t.x.len() != kernel.dim {
            return Err(Error::Argument(format!(
                "target dimension {} does not match kernel dim {}",
                t.x.len(),
                kernel.dim
            )));
        }
        if !(t.rho > 0.0) {
            return Err(Error::Argument("weights must be positive".into()));
        }
    }
    let xs: Vec<Vec<f64>> = targets.iter().map(|t| t.x.clone()).collect();
    let rho: Vec<f64> = targets.iter().map(|t| t.rho).collect();
    let phi: Vec<f64> = targets.iter().map(|t| t.phi).collect();

    let k = kernel.matrix(&xs);
    let w_sqrt = DVector::from_iterator(n, rho.iter().map(|r| r.sqrt()));
    let mut s = k.clone();
    for i in 0..n {
        for j in 0..n {
            s[(i, j)] *= w_sqrt[i] * w_sqrt[j];
        }
        s[(i, i)] += n as f64 * lambda_reg;
    }
    let chol = Cholesky::new(s)
        .ok_or_else(|| Error::Numeric("KRR system not positive definite".into()))?;
    let phi_v = DVector::from_column_slice(&phi);
    let b = phi_v.component_mul(&w_sqrt);
    let u = chol.solve(&b);
    let mut alpha = u.component_mul(&w_sqrt);

    // Residual in the original (unsymmetrized) system, with one refinement
    // pass if ill-conditioning shows up.
    let w_phi = DVector::from_iterator(n, rho.iter().zip(&phi).map(|(r, p)| r * p));
    let residual = |alpha: &DVector<f64>| -> DVector<f64> {
        let ka = &k * alpha;
        let mut r = w_phi.clone();
        for i in 0..n {
            r[i] -= rho[i] * ka[i] + n as f64 * lambda_reg * alpha[i];
        }
        r
    };
    let denom = w_phi.norm();
    if denom > 0.0 {
        let mut rel = residual(&alpha).norm() / denom;
        if rel > 1e-8 {
            let r = residual(&alpha);
            let r_scaled = DVector::from_iterator(n, r.iter().zip(&w_sqrt).map(|(v, w)| v / w));
            let du = chol.solve(&r_scaled);
            alpha += du.component_mul(&w_sqrt);
            rel = residual(&alpha).norm() / denom;
            if rel > 1e-8 {
                return Err(Error::Numeric(format!(
                    "KRR normal-equation residual {rel:.3e} exceeds 1e-8 after refinement"
                )));
            }
        }
    }

    Ok(KrrModel {
        train_x: xs,
        alpha: alpha.iter().copied().collect(),
        lambda_reg,
        kernel,
        rho,
        phi,
    })
}

/// Exact RKHS distance ‖ĝ_a − ĝ_b‖_H between two KRR fits sharing a kernel:
/// the squared distance is the quadratic form of the signed coefficient
/// difference over the union of the two training point sets.
pub fn krr_rkhs_distance(a: &KrrModel, b: &KrrModel) -> Result<f64> {
    if a.kernel != b.kernel {
        return Err(Error::Argument(
            "RKHS distance requires a common kernel".into(),
        ));
    }
    let mut points: Vec<Vec<f64>> = a.train_x.clone();
    let mut coefs: Vec<f64> = a.alpha.clone();
    for (x, al) in b.train_x.iter().zip(&b.alpha) {
        points.push(x.clone());
        coefs.push(-al);
    }
    let k = a.kernel.matrix(&points);
    let c = DVector::from_column_slice(&coefs);
    Ok((&k * &c).dot(&c).max(0.0).sqrt())
}

/// Fixed feature dictionaries for the parametric path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BasisSpec {
    /// All monomials of total degree ≤ `degree` (degree 0 is the constant).
    Polynomial { degree: usize, dim: usize },
}

impl BasisSpec {
    pub fn dim(&self) -> usize {
        match self {
            BasisSpec::Polynomial { dim, .. } => *dim,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            BasisSpec::Polynomial { degree, dim } => match degree {
                0 => 1,
                1 => 1 + dim,
                _ => 1 + dim + dim * (dim + 1) / 2,
            },
        }
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn features(&self, x: &[f64]) -> DVector<f64> {
        match self {
            BasisSpec::Polynomial { degree, dim } => {
                debug_assert_eq!(x.len(), *dim);
                let mut f = Vec::with_capacity(self.len());
                f.push(1.0);
                if *degree >= 1 {
                    f.extend_from_slice(x);
                }
                if *degree >= 2 {
                    for i in 0..*dim {
                        for j in i..*dim {
                            f.push(x[i] * x[j]);
                        }
                    }
                }
                DVector::from_vec(f)
            }
        }
    }
}

/// Weighted linear-basis regressor with its loss Hessian, used by the
/// parametric influence function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearBasisModel {
    pub basis: BasisSpec,
    pub theta: Vec<f64>,
    pub hessian: DMatrix<f64>,
    pub reg: f64,
    pub alpha_damp: f64,
    pub n: usize,
}

impl LinearBasisModel {
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.basis.dim() {
            return Err(Error::Argument(format!(
                "query has dimension {}, model expects {}",
                x.len(),
                self.basis.dim()
            )));
        }
        let f = self.basis.features(x);
        Ok(f.iter().zip(&self.theta).map(|(a, b)| a * b).sum())
    }
}

/// Minimize (1/n)·Σ ρᵢ(φᵢ − θᵀψ(xᵢ))² + reg·‖θ‖². The stored Hessian is
/// (2/n)·Σ ρᵢψψᵀ + 2·reg·I, plus `alpha_damp·I` when the undamped matrix is
/// not positive definite. Damping also enters the solve in that case, which
/// biases θ slightly toward zero; it exists to keep rank-deficient designs
/// usable.
pub fn fit_linear_basis(
    targets: &[WeightedTarget],
    basis: BasisSpec,
    reg: f64,
    alpha_damp: f64,
) -> Result<LinearBasisModel> {
    if targets.is_empty() {
        return Err(Error::Argument("no targets".into()));
    }
    if reg < 0.0 || alpha_damp < 0.0 {
        return Err(Error::Argument("reg and damping must be nonnegative".into()));
    }
    let n = targets.len();
    let p = basis.len();
    if n < p {
        eprintln!("warning: fitting {p} basis coefficients from only {n} samples");
    }
    let mut h = DMatrix::<f64>::zeros(p, p);
    let mut b = DVector::<f64>::zeros(p);
    for t in targets {
        if !(t.rho > 0.0) {
            return Err(Error::Argument("weights must be positive".into()));
        }
        let f = basis.features(&t.x);
        h.syger(2.0 * t.rho / n as f64, &f, &f, 1.0);
        b.axpy(2.0 * t.rho * t.phi / n as f64, &f, 1.0);
    }
    for i in 0..p {
        for j in 0..i {
            h[(j, i)] = h[(i, j)];
        }
        h[(i, i)] += 2.0 * reg;
    }

    // A Cholesky that "succeeds" with a collapsed pivot is still a
    // rank-deficient design; reject it against the matrix scale.
    let solve_with = |m: &DMatrix<f64>| -> Option<DVector<f64>> {
        let chol = Cholesky::new(m.clone())?;
        let scale = (0..p).map(|i| m[(i, i)]).fold(0.0_f64, f64::max);
        let min_pivot = (0..p)
            .map(|i| chol.l_dirty()[(i, i)])
            .fold(f64::INFINITY, f64::min);
        if !(min_pivot * min_pivot > 1e-12 * scale) {
            return None;
        }
        Some(chol.solve(&b))
    };

    let (hessian, theta) = match solve_with(&h) {
        Some(theta) => (h, theta),
        None => {
            if alpha_damp > 0.0 {
                let mut hd = h;
                for i in 0..p {
                    hd[(i, i)] += alpha_damp;
                }
                let theta = solve_with(&hd).ok_or_else(|| {
                    Error::Numeric(
                        "design is rank deficient even after damping; increase alpha_damp".into(),
                    )
                })?;
                (hd, theta)
            } else {
                return Err(Error::Numeric(
                    "rank-deficient design with reg = 0; supply a positive reg or alpha_damp"
                        .into(),
                ));
            }
        }
    };

    Ok(LinearBasisModel {
        basis,
        theta: theta.iter().copied().collect(),
        hessian,
        reg,
        alpha_damp,
        n,
    })
}

/// Either stage-2 regressor behind one surface.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum SecondStageModel {
    Krr(KrrModel),
    LinearBasis(LinearBasisModel),
}

impl SecondStageModel {
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        match self {
            SecondStageModel::Krr(m) => m.predict(x),
            SecondStageModel::LinearBasis(m) => m.predict(x),
        }
    }

    /// Batch evaluation; output order matches input order.
    pub fn predict_batch(&self, queries: &[Vec<f64>]) -> Result<Vec<f64>> {
        queries.iter().map(|x| self.predict(x)).collect()
    }

    pub fn train_size(&self) -> usize {
        match self {
            SecondStageModel::Krr(m) => m.n(),
            SecondStageModel::LinearBasis(m) => m.n,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            SecondStageModel::Krr(m) => m.kernel.dim,
            SecondStageModel::LinearBasis(m) => m.basis.dim(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn targets_from(xs: &[f64], rho: &[f64], phi: &[f64]) -> Vec<WeightedTarget> {
        xs.iter()
            .zip(rho.iter().zip(phi))
            .map(|(x, (r, p))| WeightedTarget {
                x: vec![*x],
                rho: *r,
                phi: *p,
            })
            .collect()
    }

    fn random_targets(n: usize, seed: u64) -> Vec<WeightedTarget> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| WeightedTarget {
                x: vec![rng.random_range(0.0..1.0)],
                rho: rng.random_range(0.2..1.0),
                phi: rng.random_range(-2.0..2.0),
            })
            .collect()
    }

    #[test]
    fn zero_targets_give_zero_function() {
        let t = targets_from(&[0.1, 0.4, 0.9], &[1.0, 1.0, 1.0], &[0.0, 0.0, 0.0]);
        let m = fit_krr(&t, KernelSpec::new(0.5, 1).unwrap(), 0.1).unwrap();
        assert!(m.alpha.iter().all(|a| a.abs() < 1e-14));
        assert_relative_eq!(m.predict(&[0.3]).unwrap(), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn two_point_fit_matches_hand_solution() {
        // ρ ≡ 1, n = 2: (K + 2λI)α = φ solved with the 2×2 inverse by hand.
        let kernel = KernelSpec::new(1.0, 1).unwrap();
        let lambda = 0.5;
        let t = targets_from(&[0.0, 1.0], &[1.0, 1.0], &[1.0, 2.0]);
        let m = fit_krr(&t, kernel, lambda).unwrap();

        let k0 = kernel.self_value();
        let k01 = kernel.eval(&[0.0], &[1.0]);
        let a = k0 + 2.0 * lambda;
        let det = a * a - k01 * k01;
        let alpha0 = (a * 1.0 - k01 * 2.0) / det;
        let alpha1 = (-k01 * 1.0 + a * 2.0) / det;
        assert_relative_eq!(m.alpha[0], alpha0, epsilon = 1e-12);
        assert_relative_eq!(m.alpha[1], alpha1, epsilon = 1e-12);

        let probe = [0.25];
        let expected = alpha0 * kernel.eval(&probe, &[0.0]) + alpha1 * kernel.eval(&probe, &[1.0]);
        assert_relative_eq!(m.predict(&probe).unwrap(), expected, epsilon = 1e-12);
    }

    #[test]
    fn huge_regularization_shrinks_to_zero() {
        let t = random_targets(30, 1);
        let m = fit_krr(&t, KernelSpec::new(0.5, 1).unwrap(), 1e9).unwrap();
        for x in [0.0, 0.5, 1.0] {
            assert!(m.predict(&[x]).unwrap().abs() < 1e-6);
        }
    }

    #[test]
    fn near_interpolation_at_tiny_regularization() {
        let t = targets_from(&[0.1, 0.5, 0.9], &[1.0, 1.0, 1.0], &[1.0, -1.0, 2.0]);
        let m = fit_krr(&t, KernelSpec::new(0.7, 1).unwrap(), 1e-10).unwrap();
        for (i, x) in [0.1, 0.5, 0.9].iter().enumerate() {
            assert_relative_eq!(m.predict(&[*x]).unwrap(), t[i].phi, epsilon = 1e-4);
        }
    }

    #[test]
    fn normal_equation_residual_is_tiny() {
        let t = random_targets(80, 3);
        let kernel = KernelSpec::new(0.3, 1).unwrap();
        let lambda = 1e-3;
        let m = fit_krr(&t, kernel, lambda).unwrap();
        let n = t.len();
        let k = kernel.matrix(&m.train_x);
        let alpha = DVector::from_column_slice(&m.alpha);
        let ka = &k * &alpha;
        let mut max_rel = 0.0f64;
        let mut rnorm = 0.0;
        let mut bnorm = 0.0;
        for i in 0..n {
            let lhs = m.rho[i] * ka[i] + n as f64 * lambda * alpha[i];
            let rhs = m.rho[i] * m.phi[i];
            rnorm += (lhs - rhs) * (lhs - rhs);
            bnorm += rhs * rhs;
        }
        max_rel = max_rel.max(rnorm.sqrt() / bnorm.sqrt());
        assert!(max_rel <= 1e-8, "relative residual {max_rel}");
    }

    #[test]
    fn permutation_invariance_of_predictions() {
        let mut t = random_targets(40, 9);
        let kernel = KernelSpec::new(0.4, 1).unwrap();
        let m1 = fit_krr(&t, kernel, 0.01).unwrap();
        t.reverse();
        let m2 = fit_krr(&t, kernel, 0.01).unwrap();
        for x in [0.05, 0.33, 0.77, 0.99] {
            assert_relative_eq!(
                m1.predict(&[x]).unwrap(),
                m2.predict(&[x]).unwrap(),
                epsilon = 1e-10
            );
        }
    }

    #[test]
    fn constant_basis_reduces_to_damped_mean() {
        let t = targets_from(&[0.1, 0.2, 0.3], &[1.0, 1.0, 1.0], &[1.0, 2.0, 6.0]);
        let basis = BasisSpec::Polynomial { degree: 0, dim: 1 };
        let m = fit_linear_basis(&t, basis, 0.0, 0.0).unwrap();
        assert_relative_eq!(m.theta[0], 3.0, epsilon = 1e-12);
        // With ridge: θ = mean/(1 + reg)
        let m = fit_linear_basis(&t, basis, 0.5, 0.0).unwrap();
        assert_relative_eq!(m.theta[0], 3.0 / 1.5, epsilon = 1e-12);
    }

    #[test]
    fn doubling_weight_equals_duplicating_sample() {
        let mut base = random_targets(25, 4);
        let basis = BasisSpec::Polynomial { degree: 2, dim: 1 };
        // Duplicate sample 3 …
        let mut duplicated = base.clone();
        duplicated.push(base[3].clone());
        // … versus doubling its weight. The 1/n normalization differs between
        // the two fits, but with reg = 0 the minimizer is invariant to an
        // overall rescaling of the weights, so θ must agree exactly.
        base[3].rho *= 2.0;
        let m_dup = fit_linear_basis(&duplicated, basis, 0.0, 0.0).unwrap();
        let m_wt = fit_linear_basis(&base, basis, 0.0, 0.0).unwrap();
        for (a, b) in m_dup.theta.iter().zip(&m_wt.theta) {
            assert_relative_eq!(a, b, epsilon = 1e-10);
        }
    }

    #[test]
    fn realizable_targets_recover_coefficients() {
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let basis = BasisSpec::Polynomial { degree: 2, dim: 2 };
        let theta0: Vec<f64> = (0..basis.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let targets: Vec<WeightedTarget> = (0..200)
            .map(|_| {
                let x = vec![rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
                let f = basis.features(&x);
                let phi = f.iter().zip(&theta0).map(|(a, b)| a * b).sum();
                WeightedTarget {
                    x,
                    rho: rng.random_range(0.3..1.0),
                    phi,
                }
            })
            .collect();
        let m = fit_linear_basis(&targets, basis, 0.0, 0.0).unwrap();
        for (a, b) in m.theta.iter().zip(&theta0) {
            assert_relative_eq!(a, b, epsilon = 1e-8);
        }
    }

    #[test]
    fn hessian_is_positive_definite_after_damping() {
        // All x identical: degree-1 design is rank deficient.
        let t = targets_from(&[0.5, 0.5, 0.5], &[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]);
        let basis = BasisSpec::Polynomial { degree: 1, dim: 1 };
        let err = fit_linear_basis(&t, basis, 0.0, 0.0).unwrap_err();
        match err {
            Error::Numeric(msg) => assert!(msg.contains("damp"), "got: {msg}"),
            other => panic!("expected numeric error, got {other:?}"),
        }
        let m = fit_linear_basis(&t, basis, 0.0, 1e-3).unwrap();
        let eig = m.hessian.clone().symmetric_eigen();
        let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(min > 0.0, "min eigenvalue {min}");
    }

    #[test]
    fn batch_prediction_matches_pointwise() {
        let t = random_targets(30, 6);
        let m = SecondStageModel::Krr(fit_krr(&t, KernelSpec::new(0.5, 1).unwrap(), 0.01).unwrap());
        let queries: Vec<Vec<f64>> = (0..300).map(|i| vec![i as f64 / 300.0]).collect();
        let batch = m.predict_batch(&queries).unwrap();
        assert_eq!(batch.len(), 300);
        for (q, b) in queries.iter().zip(&batch) {
            assert_relative_eq!(m.predict(q).unwrap(), *b);
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let t = random_targets(10, 2);
        let m = fit_krr(&t, KernelSpec::new(0.5, 1).unwrap(), 0.01).unwrap();
        assert!(m.predict(&[0.1, 0.2]).is_err());
    }
}
