//! Dense symmetric positive-definite linear algebra.
//!
//! Every GP computation in the crate factors its covariance through
//! [`cholesky_psd`]; nothing forms an explicit inverse except through
//! [`CholFactor::solve`].

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Jitter escalation steps used when callers have no particular preference.
pub const DEFAULT_JITTER_STEPS: usize = 6;

const SYMMETRY_TOL: f64 = 1e-12;
/// Squared pivots below this fraction of the largest diagonal entry count as
/// a failed factorization.
const PIVOT_FLOOR: f64 = 1e-14;

/// A dense, finite, symmetric matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix(DMatrix<f64>);

impl SymMatrix {
    /// Wraps `m`, checking squareness, finiteness and symmetry (1e-12 relative).
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "symmetric matrix must be square, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidHyperparameter(
                "matrix has non-finite entries".into(),
            ));
        }
        let scale = m.amax().max(f64::MIN_POSITIVE);
        for i in 0..m.nrows() {
            for j in 0..i {
                if (m[(i, j)] - m[(j, i)]).abs() > SYMMETRY_TOL * scale {
                    return Err(Error::DimensionMismatch(format!(
                        "matrix is not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(Self(m))
    }

    /// Averages `m` with its transpose. Use for matrices assembled from blocks
    /// that are symmetric only up to rounding.
    pub fn symmetrize(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::DimensionMismatch("symmetrize needs a square matrix".into()));
        }
        let t = m.transpose();
        Self::new((m + t) * 0.5)
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }
}

/// Lower Cholesky factor `L` with `L Lᵀ = M + jitter_applied · I`.
#[derive(Debug, Clone)]
pub struct CholFactor {
    lower: DMatrix<f64>,
    jitter_applied: f64,
}

impl CholFactor {
    pub fn lower(&self) -> &DMatrix<f64> {
        &self.lower
    }

    pub fn jitter_applied(&self) -> f64 {
        self.jitter_applied
    }

    pub fn dim(&self) -> usize {
        self.lower.nrows()
    }

    /// `log det(L Lᵀ)`.
    pub fn log_det(&self) -> f64 {
        2.0 * self.lower.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// Solves `L X = B`.
    pub fn solve_lower(&self, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_rows(b.nrows())?;
        Ok(self
            .lower
            .solve_lower_triangular(b)
            .expect("Cholesky diagonal is strictly positive"))
    }

    /// Solves `Lᵀ X = B`.
    pub fn solve_upper(&self, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_rows(b.nrows())?;
        Ok(self
            .lower
            .tr_solve_lower_triangular(b)
            .expect("Cholesky diagonal is strictly positive"))
    }

    pub fn solve_lower_vec(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_rows(b.len())?;
        Ok(self
            .lower
            .solve_lower_triangular(b)
            .expect("Cholesky diagonal is strictly positive"))
    }

    pub fn solve_upper_vec(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_rows(b.len())?;
        Ok(self
            .lower
            .tr_solve_lower_triangular(b)
            .expect("Cholesky diagonal is strictly positive"))
    }

    /// Solves `(L Lᵀ) X = B`.
    pub fn solve(&self, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let half = self.solve_lower(b)?;
        self.solve_upper(&half)
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        let half = self.solve_lower_vec(b)?;
        self.solve_upper_vec(&half)
    }

    /// `(L Lᵀ)⁻¹` via two triangular solves against the identity.
    pub fn inverse(&self) -> DMatrix<f64> {
        let n = self.dim();
        self.solve(&DMatrix::identity(n, n))
            .expect("identity has matching dimension")
    }

    /// `L Lᵀ`.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.lower * self.lower.transpose()
    }

    fn check_rows(&self, rows: usize) -> Result<()> {
        if rows != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "factor is {0}x{0}, right-hand side has {rows} rows",
                self.dim()
            )));
        }
        Ok(())
    }
}

/// Cholesky factorization with escalating diagonal jitter.
///
/// Tries the plain factorization first. On failure retries with
/// `1e-10 · mean(diag)` added to the diagonal, multiplying the jitter by ten per
/// step, for at most `max_jitter_steps` retries.
pub fn cholesky_psd(m: &SymMatrix, max_jitter_steps: usize) -> Result<CholFactor> {
    let a = m.as_matrix();
    let n = a.nrows();
    let floor = PIVOT_FLOOR * a.diagonal().amax();
    let attempt = |mat: DMatrix<f64>| {
        nalgebra::Cholesky::new(mat)
            .map(|c| c.unpack())
            .filter(|l| l.diagonal().iter().all(|d| d * d > floor))
    };
    if let Some(lower) = attempt(a.clone()) {
        return Ok(CholFactor {
            lower,
            jitter_applied: 0.0,
        });
    }
    let mean_diag = if n == 0 {
        1.0
    } else {
        a.diagonal().iter().map(|v| v.abs()).sum::<f64>() / n as f64
    };
    let mut jitter = 1e-10 * mean_diag.max(f64::MIN_POSITIVE);
    let mut last = 0.0;
    for _ in 0..max_jitter_steps {
        let mut shifted = a.clone();
        for i in 0..n {
            shifted[(i, i)] += jitter;
        }
        if let Some(lower) = attempt(shifted) {
            return Ok(CholFactor {
                lower,
                jitter_applied: jitter,
            });
        }
        last = jitter;
        jitter *= 10.0;
    }
    Err(Error::NotPositiveDefinite { jitter: last })
}

/// Solves `(L Lᵀ) X = B` for a factor produced by [`cholesky_psd`].
pub fn solve_chol(l: &CholFactor, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    l.solve(b)
}

/// Factors `m` with the default jitter schedule, symmetrizing first.
pub(crate) fn chol_of(m: DMatrix<f64>) -> Result<CholFactor> {
    cholesky_psd(&SymMatrix::symmetrize(m)?, DEFAULT_JITTER_STEPS)
}

const LN_2PI: f64 = 1.837_877_066_409_345_3;
/// Below this the normal tail uses its asymptotic series.
const TAIL_SWITCH: f64 = -30.0;

/// `1 − 1/z² + 3/z⁴ − 15/z⁶ + 105/z⁸`, the ratio `Φ(z)·(−z)/φ(z)` for very negative `z`.
fn tail_series(z: f64) -> f64 {
    let r = 1.0 / (z * z);
    1.0 - r * (1.0 - r * (3.0 - r * (15.0 - 105.0 * r)))
}

/// `log Φ(z)` for the standard normal CDF, stable in both tails.
pub fn log_norm_cdf(z: f64) -> f64 {
    if z >= 0.0 {
        (-0.5 * libm::erfc(z / std::f64::consts::SQRT_2)).ln_1p()
    } else if z > TAIL_SWITCH {
        (0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)).ln()
    } else {
        -0.5 * z * z - (-z).ln() - 0.5 * LN_2PI + tail_series(z).ln()
    }
}

/// Inverse Mills ratio `φ(z)/Φ(z)`.
pub fn inv_mills(z: f64) -> f64 {
    if z > TAIL_SWITCH {
        let phi = (-0.5 * z * z - 0.5 * LN_2PI).exp();
        phi / (0.5 * libm::erfc(-z / std::f64::consts::SQRT_2))
    } else {
        -z / tail_series(z)
    }
}
