//! Matrix square roots for the Fréchet trace term `Tr((Σv·Σt)^½)`.
//!
//! Two routes: an exact one built on symmetric eigendecompositions, and a
//! coupled Newton–Schulz iteration that only multiplies matrices.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SqrtError {
    #[error("matrix is not symmetric (max |A - Aᵀ| = {0:e})")]
    NotSymmetric(f64),
    #[error("matrix is not positive semidefinite (min eigenvalue {min_eigenvalue:e}, allowed {floor:e})")]
    NotPositiveSemidefinite { min_eigenvalue: f64, floor: f64 },
    #[error("symmetric eigendecomposition failed to converge")]
    EigenFailure,
    #[error("Newton-Schulz did not converge after {iterations} iterations (relative step {residual:e})")]
    NonConvergence { iterations: u32, residual: f64 },
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("invalid square-root configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SqrtMethod {
    Exact,
    NewtonSchulz,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SqrtConfig {
    pub method: SqrtMethod,
    /// Iteration cap for Newton–Schulz.
    pub iterations: u32,
    /// `λ` in the `λ·(tr/d)·I` ridge added to each covariance.
    pub jitter: f64,
    /// Stop once `‖Yᵢ₊₁ − Yᵢ‖_F / ‖Yᵢ‖_F` drops below this.
    pub tolerance: f64,
}

impl Default for SqrtConfig {
    fn default() -> Self {
        Self {
            method: SqrtMethod::NewtonSchulz,
            iterations: 50,
            jitter: 1e-10,
            tolerance: 1e-7,
        }
    }
}

impl SqrtConfig {
    pub fn exact() -> Self {
        Self {
            method: SqrtMethod::Exact,
            ..Self::default()
        }
    }

    pub fn newton_schulz() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<(), SqrtError> {
        if !(1..=1000).contains(&self.iterations) {
            return Err(SqrtError::InvalidConfig(format!(
                "iterations must be in [1, 1000], got {}",
                self.iterations
            )));
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return Err(SqrtError::InvalidConfig(format!("jitter must be >= 0, got {}", self.jitter)));
        }
        if !(self.tolerance > 0.0 && self.tolerance.is_finite()) {
            return Err(SqrtError::InvalidConfig(format!("tolerance must be > 0, got {}", self.tolerance)));
        }
        Ok(())
    }
}

fn check_square(a: &DMatrix<f64>) -> Result<(), SqrtError> {
    if a.nrows() != a.ncols() {
        return Err(SqrtError::DimensionMismatch(a.nrows(), a.ncols()));
    }
    Ok(())
}

fn check_symmetric(a: &DMatrix<f64>) -> Result<(), SqrtError> {
    check_square(a)?;
    let scale = a.amax().max(1.0);
    let mut worst = 0.0f64;
    for j in 0..a.ncols() {
        for i in 0..j {
            worst = worst.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    if worst > 1e-6 * scale {
        return Err(SqrtError::NotSymmetric(worst));
    }
    Ok(())
}

fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

fn eigen(a: &DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>, SqrtError> {
    SymmetricEigen::try_new(a.clone(), f64::EPSILON, 0).ok_or(SqrtError::EigenFailure)
}

/// Principal square root of a symmetric PSD matrix via its eigendecomposition.
/// Eigenvalues slightly below zero from roundoff are clamped.
pub fn sqrt_psd_exact(a: &DMatrix<f64>) -> Result<DMatrix<f64>, SqrtError> {
    check_symmetric(a)?;
    let d = a.nrows();
    if d == 0 {
        return Ok(a.clone());
    }
    let eig = eigen(&symmetrize(a))?;
    let floor = -1e-8 * (a.trace() / d as f64).abs();
    let min = eig.eigenvalues.min();
    if min < floor {
        return Err(SqrtError::NotPositiveSemidefinite {
            min_eigenvalue: min,
            floor,
        });
    }
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let q = &eig.eigenvectors;
    let scaled = DMatrix::from_fn(d, d, |i, j| q[(i, j)] * roots[j]);
    Ok(symmetrize(&(scaled * q.transpose())))
}

/// Coupled Newton–Schulz iteration for `A^½`, where `A` has a real,
/// nonnegative spectrum.
///
/// `A` is first divided by its Frobenius norm `c` so the spectrum lies in
/// `(0, 1]`; then `Y₀ = Â`, `Z₀ = I` and
/// `Yᵢ₊₁ = ½·Yᵢ(3I − ZᵢYᵢ)`, `Zᵢ₊₁ = ½·(3I − ZᵢYᵢ)Zᵢ`. The result is `√c·Y`.
pub fn sqrt_newton_schulz(a: &DMatrix<f64>, cfg: &SqrtConfig) -> Result<DMatrix<f64>, SqrtError> {
    cfg.validate()?;
    check_square(a)?;
    let d = a.nrows();
    let c = a.norm();
    if c == 0.0 {
        return Ok(DMatrix::zeros(d, d));
    }
    let identity = DMatrix::<f64>::identity(d, d);
    let three_i = &identity * 3.0;
    let mut y = a / c;
    let mut z = identity;
    let mut step = f64::INFINITY;
    for _ in 0..cfg.iterations {
        let t = (&three_i - &z * &y) * 0.5;
        let y_next = &y * &t;
        z = &t * &z;
        step = (&y_next - &y).norm() / y.norm();
        y = y_next;
        if !step.is_finite() {
            break;
        }
        if step < cfg.tolerance {
            return Ok(y * c.sqrt());
        }
    }
    Err(SqrtError::NonConvergence {
        iterations: cfg.iterations,
        residual: step,
    })
}

fn with_jitter(a: &DMatrix<f64>, lambda: f64) -> DMatrix<f64> {
    let d = a.nrows();
    if lambda == 0.0 || d == 0 {
        return a.clone();
    }
    let ridge = lambda * (a.trace() / d as f64).abs();
    let mut out = a.clone();
    for i in 0..d {
        out[(i, i)] += ridge;
    }
    out
}

/// `Tr((Σv·Σt)^½)` for two PSD covariances.
///
/// The exact route evaluates the equivalent symmetric form
/// `Tr((Σt^½·Σv·Σt^½)^½)`; the Newton–Schulz route iterates on the
/// product `Σv·Σt` directly. Tiny negative results are clamped to zero.
pub fn trace_sqrt_product(sv: &DMatrix<f64>, st: &DMatrix<f64>, cfg: &SqrtConfig) -> Result<f64, SqrtError> {
    cfg.validate()?;
    check_symmetric(sv)?;
    check_symmetric(st)?;
    if sv.nrows() != st.nrows() {
        return Err(SqrtError::DimensionMismatch(sv.nrows(), st.nrows()));
    }
    let sv = with_jitter(sv, cfg.jitter);
    let st = with_jitter(st, cfg.jitter);
    let trace = match cfg.method {
        SqrtMethod::Exact => {
            let root_t = sqrt_psd_exact(&st)?;
            let inner = symmetrize(&(&root_t * &sv * &root_t));
            eigen(&inner)?.eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum()
        }
        SqrtMethod::NewtonSchulz => sqrt_newton_schulz(&(&sv * &st), cfg)?.trace(),
    };
    Ok(trace.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-300)
    }

    #[test]
    fn identity_root() {
        let i = DMatrix::<f64>::identity(5, 5);
        assert!((sqrt_psd_exact(&i).unwrap() - &i).amax() < 1e-12);
    }

    #[test]
    fn diagonal_root() {
        let a = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![4.0, 9.0]));
        let s = sqrt_psd_exact(&a).unwrap();
        assert!((s[(0, 0)] - 2.0).abs() < 1e-12);
        assert!((s[(1, 1)] - 3.0).abs() < 1e-12);
        assert!(s[(0, 1)].abs() < 1e-12);
    }

    #[test]
    fn rejects_asymmetric_and_indefinite() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(matches!(sqrt_psd_exact(&a), Err(SqrtError::NotSymmetric(_))));
        let b = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(sqrt_psd_exact(&b), Err(SqrtError::NotPositiveSemidefinite { .. })));
    }

    #[test]
    fn newton_schulz_identity_is_fixed_point() {
        // ‖I‖_F = 1 only for d = 1; larger identities are scaled to I/√d first.
        let i = DMatrix::<f64>::identity(1, 1);
        let cfg = SqrtConfig { iterations: 1, ..Default::default() };
        assert_eq!(sqrt_newton_schulz(&i, &cfg).unwrap(), i);

        let i = DMatrix::<f64>::identity(4, 4);
        let s = sqrt_newton_schulz(&i, &SqrtConfig::default()).unwrap();
        assert!((s - &i).amax() < 1e-9);
    }

    #[test]
    fn newton_schulz_scalar() {
        let a = DMatrix::from_element(1, 1, 4.0);
        let s = sqrt_newton_schulz(&a, &SqrtConfig::default()).unwrap();
        assert!((s[(0, 0)] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn newton_schulz_reports_non_convergence() {
        let a = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, 1e-12]));
        let cfg = SqrtConfig { iterations: 3, tolerance: 1e-15, ..Default::default() };
        assert!(matches!(
            sqrt_newton_schulz(&a, &cfg),
            Err(SqrtError::NonConvergence { iterations: 3, .. })
        ));
    }

    #[test]
    fn trace_of_identities() {
        let i = DMatrix::<f64>::identity(32, 32);
        for cfg in [SqrtConfig::exact(), SqrtConfig::newton_schulz()] {
            let t = trace_sqrt_product(&i, &i, &cfg).unwrap();
            assert!((t - 32.0).abs() < 1e-6, "{t}");
        }
    }

    #[test]
    fn trace_of_diagonal_pair() {
        let sv = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![4.0, 1.0]));
        let st = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, 4.0]));
        for cfg in [SqrtConfig::exact(), SqrtConfig::newton_schulz()] {
            let t = trace_sqrt_product(&sv, &st, &cfg).unwrap();
            assert!((t - 4.0).abs() < 1e-6, "{t}");
        }
    }

    #[test]
    fn config_bounds() {
        assert!(SqrtConfig { iterations: 0, ..Default::default() }.validate().is_err());
        assert!(SqrtConfig { iterations: 1001, ..Default::default() }.validate().is_err());
        assert!(SqrtConfig { jitter: -1.0, ..Default::default() }.validate().is_err());
        assert!(SqrtConfig { iterations: 1000, ..Default::default() }.validate().is_ok());
    }

    fn gram(d: usize) -> impl Strategy<Value = DMatrix<f64>> {
        proptest::collection::vec(-2.0f64..2.0, d * d).prop_map(move |v| {
            let b = DMatrix::from_vec(d, d, v);
            b.transpose() * b
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn exact_root_squares_back(a in gram(16)) {
            let s = sqrt_psd_exact(&a).unwrap();
            let err = (&s * &s - &a).norm();
            prop_assert!(err <= 1e-6 * a.norm().max(1e-12), "err {err}");
            prop_assert!(err <= 1e-5 * (1.0 + a.norm()));
        }

        #[test]
        fn trace_of_square_is_trace(a in gram(8)) {
            let cfg = SqrtConfig { jitter: 0.0, ..SqrtConfig::exact() };
            let t = trace_sqrt_product(&a, &a, &cfg).unwrap();
            prop_assert!(rel(t, a.trace()) < 1e-6, "{t} vs {}", a.trace());
        }

        #[test]
        fn trace_is_symmetric_in_arguments(a in gram(8), b in gram(8)) {
            let cfg = SqrtConfig::exact();
            let ab = trace_sqrt_product(&a, &b, &cfg).unwrap();
            let ba = trace_sqrt_product(&b, &a, &cfg).unwrap();
            prop_assert!(rel(ab, ba) < 1e-6 || (ab - ba).abs() < 1e-9, "{ab} vs {ba}");
        }
    }
}
