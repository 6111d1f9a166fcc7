//! Covariance kernels, their log-hyperparameter gradients, input-derivative
//! cross-covariances and the warped deep kernel.
//!
//! Hyperparameters are stored in the log domain:
//!
//! | family | `log_params` |
//! |---|---|
//! | RBF | `log φ_f²`, `log φ_l²` |
//! | rational quadratic | `log σ²`, `log ℓ²`, `log α` |
//! | polynomial | `log φ_f`, `log φ_l` (degree is a separate integer) |
//!
//! A warped kernel maps both arguments through a [`FeatureNet`] and scales the
//! base kernel by `exp(log_outscale)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::FeatureNet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    Rbf,
    RationalQuadratic,
    Polynomial { degree: u32 },
}

impl KernelFamily {
    pub fn num_params(&self) -> usize {
        match self {
            KernelFamily::Rbf | KernelFamily::Polynomial { .. } => 2,
            KernelFamily::RationalQuadratic => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarpSpec {
    pub net_ref: String,
    pub log_outscale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub log_params: Vec<f64>,
    #[serde(default)]
    pub warp: Option<WarpSpec>,
}

/// Hyperparameters resolved out of the log domain.
#[derive(Debug, Clone, Copy)]
enum Resolved {
    Rbf { var: f64, len_sq: f64 },
    Rq { var: f64, len_sq: f64, alpha: f64 },
    Poly { scale: f64, offset: f64, degree: i32 },
}

impl Resolved {
    fn value(&self, p: &[f64], q: &[f64]) -> f64 {
        match *self {
            Resolved::Rbf { var, len_sq } => var * (-sq_dist(p, q) / (2.0 * len_sq)).exp(),
            Resolved::Rq { var, len_sq, alpha } => {
                var * (1.0 + sq_dist(p, q) / (2.0 * alpha * len_sq)).powf(-alpha)
            }
            Resolved::Poly {
                scale,
                offset,
                degree,
            } => (scale * dot(p, q) + offset).powi(degree),
        }
    }

    /// `∂k(p,q)/∂p = coeff · (p − q)` for stationary kernels and
    /// `coeff · q` for the polynomial kernel.
    fn first_arg_coeff(&self, p: &[f64], q: &[f64]) -> f64 {
        match *self {
            Resolved::Rbf { var, len_sq } => {
                -var * (-sq_dist(p, q) / (2.0 * len_sq)).exp() / len_sq
            }
            Resolved::Rq { var, len_sq, alpha } => {
                let u = 1.0 + sq_dist(p, q) / (2.0 * alpha * len_sq);
                -var * u.powf(-alpha - 1.0) / len_sq
            }
            Resolved::Poly {
                scale,
                offset,
                degree,
            } => degree as f64 * (scale * dot(p, q) + offset).powi(degree - 1) * scale,
        }
    }

    fn is_stationary(&self) -> bool {
        !matches!(self, Resolved::Poly { .. })
    }

    /// Gradients with respect to each log-hyperparameter.
    fn hyper_grads(&self, p: &[f64], q: &[f64], out: &mut [f64]) {
        match *self {
            Resolved::Rbf { var, len_sq } => {
                let r2 = sq_dist(p, q);
                let k = var * (-r2 / (2.0 * len_sq)).exp();
                out[0] = k;
                out[1] = k * r2 / (2.0 * len_sq);
            }
            Resolved::Rq { var, len_sq, alpha } => {
                let r2 = sq_dist(p, q);
                let u = 1.0 + r2 / (2.0 * alpha * len_sq);
                let k = var * u.powf(-alpha);
                out[0] = k;
                out[1] = var * u.powf(-alpha - 1.0) * r2 / (2.0 * len_sq);
                out[2] = alpha * k * (-(u.ln()) + (u - 1.0) / u);
            }
            Resolved::Poly {
                scale,
                offset,
                degree,
            } => {
                let g = dot(p, q);
                let base = degree as f64 * (scale * g + offset).powi(degree - 1);
                out[0] = base * scale * g;
                out[1] = base * offset;
            }
        }
    }
}

fn sq_dist(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum()
}

fn dot(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| a * b).sum()
}

/// Row `i` of a row-major point matrix as a contiguous vector.
pub(crate) fn rows_of(x: &DMatrix<f64>) -> Vec<Vec<f64>> {
    x.row_iter().map(|r| r.iter().copied().collect()).collect()
}

impl KernelSpec {
    pub fn rbf(signal_var: f64, length_sq: f64) -> Self {
        KernelSpec {
            family: KernelFamily::Rbf,
            log_params: vec![signal_var.ln(), length_sq.ln()],
            warp: None,
        }
    }

    pub fn rational_quadratic(var: f64, length_sq: f64, alpha: f64) -> Self {
        KernelSpec {
            family: KernelFamily::RationalQuadratic,
            log_params: vec![var.ln(), length_sq.ln(), alpha.ln()],
            warp: None,
        }
    }

    pub fn polynomial(scale: f64, offset: f64, degree: u32) -> Self {
        KernelSpec {
            family: KernelFamily::Polynomial { degree },
            log_params: vec![scale.ln(), offset.ln()],
            warp: None,
        }
    }

    /// Default family with unit signal variance and the given squared length scale.
    pub fn default_for(family: KernelFamily, length_sq: f64) -> Self {
        match family {
            KernelFamily::Rbf => Self::rbf(1.0, length_sq),
            KernelFamily::RationalQuadratic => Self::rational_quadratic(1.0, length_sq, 1.0),
            KernelFamily::Polynomial { degree } => Self::polynomial(1.0, 1.0, degree),
        }
    }

    pub fn with_warp(mut self, net_ref: &str, log_outscale: f64) -> Self {
        self.warp = Some(WarpSpec {
            net_ref: net_ref.to_string(),
            log_outscale,
        });
        self
    }

    /// Same kernel without the warp wrapper.
    pub fn base(&self) -> KernelSpec {
        KernelSpec {
            family: self.family,
            log_params: self.log_params.clone(),
            warp: None,
        }
    }

    /// `exp(log_outscale)`, or 1 when unwarped.
    pub fn outscale(&self) -> f64 {
        self.warp.as_ref().map_or(1.0, |w| w.log_outscale.exp())
    }

    /// Number of trainable log-domain scalars, including the warp scale.
    pub fn num_trainable(&self) -> usize {
        self.family.num_params() + usize::from(self.warp.is_some())
    }

    pub fn validate(&self) -> Result<()> {
        if self.log_params.len() != self.family.num_params() {
            return Err(Error::InvalidHyperparameter(format!(
                "{:?} needs {} log-parameters, got {}",
                self.family,
                self.family.num_params(),
                self.log_params.len()
            )));
        }
        for v in &self.log_params {
            let e = v.exp();
            if !v.is_finite() || !e.is_finite() || e <= 0.0 {
                return Err(Error::InvalidHyperparameter(format!(
                    "log-parameter {v} does not map to a finite positive value"
                )));
            }
        }
        if let KernelFamily::Polynomial { degree } = self.family {
            if degree < 1 {
                return Err(Error::InvalidHyperparameter("polynomial degree must be >= 1".into()));
            }
        }
        if let Some(w) = &self.warp {
            let e = w.log_outscale.exp();
            if !w.log_outscale.is_finite() || !e.is_finite() || e <= 0.0 {
                return Err(Error::InvalidHyperparameter("warp output scale".into()));
            }
        }
        Ok(())
    }

    fn resolved(&self) -> Result<Resolved> {
        self.validate()?;
        let p = &self.log_params;
        Ok(match self.family {
            KernelFamily::Rbf => Resolved::Rbf {
                var: p[0].exp(),
                len_sq: p[1].exp(),
            },
            KernelFamily::RationalQuadratic => Resolved::Rq {
                var: p[0].exp(),
                len_sq: p[1].exp(),
                alpha: p[2].exp(),
            },
            KernelFamily::Polynomial { degree } => Resolved::Poly {
                scale: p[0].exp(),
                offset: p[1].exp(),
                degree: degree as i32,
            },
        })
    }

    pub fn is_rbf(&self) -> bool {
        self.family == KernelFamily::Rbf
    }

    /// Base kernel (no warp, no output scale) between two point sets.
    pub fn base_matrix(&self, z1: &DMatrix<f64>, z2: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_cols(z1, z2)?;
        let r = self.resolved()?;
        let (a, b) = (rows_of(z1), rows_of(z2));
        let same = std::ptr::eq(z1, z2);
        let mut k = DMatrix::zeros(a.len(), b.len());
        for i in 0..a.len() {
            let start = if same { i } else { 0 };
            for j in start..b.len() {
                let v = r.value(&a[i], &b[j]);
                k[(i, j)] = v;
                if same {
                    k[(j, i)] = v;
                }
            }
        }
        Ok(k)
    }

    /// Diagonal `k(z_i, z_i)` of the base kernel.
    pub fn base_diag(&self, z: &DMatrix<f64>) -> Result<DVector<f64>> {
        let r = self.resolved()?;
        Ok(DVector::from_iterator(
            z.nrows(),
            rows_of(z).iter().map(|p| r.value(p, p)),
        ))
    }

    /// `Σ_ij G_ij ∂K_ij/∂(log θ)` for each base log-hyperparameter.
    pub(crate) fn contract_hyper(
        &self,
        z1: &DMatrix<f64>,
        z2: &DMatrix<f64>,
        g: &DMatrix<f64>,
    ) -> Result<Vec<f64>> {
        check_cols(z1, z2)?;
        let r = self.resolved()?;
        let np = self.family.num_params();
        let (a, b) = (rows_of(z1), rows_of(z2));
        let mut acc = vec![0.0; np];
        let mut buf = vec![0.0; np];
        for i in 0..a.len() {
            for j in 0..b.len() {
                let gij = g[(i, j)];
                if gij == 0.0 {
                    continue;
                }
                r.hyper_grads(&a[i], &b[j], &mut buf);
                for (s, v) in acc.iter_mut().zip(&buf) {
                    *s += gij * v;
                }
            }
        }
        Ok(acc)
    }

    pub(crate) fn contract_hyper_diag(&self, z: &DMatrix<f64>, g: &DVector<f64>) -> Result<Vec<f64>> {
        let r = self.resolved()?;
        let np = self.family.num_params();
        let mut acc = vec![0.0; np];
        let mut buf = vec![0.0; np];
        for (i, p) in rows_of(z).iter().enumerate() {
            r.hyper_grads(p, p, &mut buf);
            for (s, v) in acc.iter_mut().zip(&buf) {
                *s += g[i] * v;
            }
        }
        Ok(acc)
    }

    /// Gradients of `Σ_ij G_ij k(z1_i, z2_j)` with respect to `z1` and `z2`.
    pub(crate) fn contract_points(
        &self,
        z1: &DMatrix<f64>,
        z2: &DMatrix<f64>,
        g: &DMatrix<f64>,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        check_cols(z1, z2)?;
        let r = self.resolved()?;
        let d = z1.ncols();
        let (a, b) = (rows_of(z1), rows_of(z2));
        let mut d1 = DMatrix::zeros(a.len(), d);
        let mut d2 = DMatrix::zeros(b.len(), d);
        let stationary = r.is_stationary();
        for i in 0..a.len() {
            for j in 0..b.len() {
                let gij = g[(i, j)];
                if gij == 0.0 {
                    continue;
                }
                if stationary {
                    // ∂/∂p = c (p − q), ∂/∂q = −c (p − q)
                    let c = gij * r.first_arg_coeff(&a[i], &b[j]);
                    for k in 0..d {
                        let diff = a[i][k] - b[j][k];
                        d1[(i, k)] += c * diff;
                        d2[(j, k)] -= c * diff;
                    }
                } else {
                    // polynomial: ∂/∂p = c q, ∂/∂q = c p
                    let c = gij * r.first_arg_coeff(&a[i], &b[j]);
                    for k in 0..d {
                        d1[(i, k)] += c * b[j][k];
                        d2[(j, k)] += c * a[i][k];
                    }
                }
            }
        }
        Ok((d1, d2))
    }

    /// Gradient of `Σ_i g_i k(z_i, z_i)` with respect to `z`.
    pub(crate) fn contract_points_diag(
        &self,
        z: &DMatrix<f64>,
        g: &DVector<f64>,
    ) -> Result<DMatrix<f64>> {
        let r = self.resolved()?;
        let mut out = DMatrix::zeros(z.nrows(), z.ncols());
        if r.is_stationary() {
            return Ok(out);
        }
        for (i, p) in rows_of(z).iter().enumerate() {
            let c = 2.0 * g[i] * r.first_arg_coeff(p, p);
            for k in 0..z.ncols() {
                out[(i, k)] = c * p[k];
            }
        }
        Ok(out)
    }
}

fn check_cols(z1: &DMatrix<f64>, z2: &DMatrix<f64>) -> Result<()> {
    if z1.ncols() != z2.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "point sets have dimensions {} and {}",
            z1.ncols(),
            z2.ncols()
        )));
    }
    Ok(())
}

fn resolve_net<'a>(spec: &KernelSpec, net: Option<&'a FeatureNet>) -> Result<Option<&'a FeatureNet>> {
    match (&spec.warp, net) {
        (None, _) => Ok(None),
        (Some(w), Some(n)) if n.id == w.net_ref => Ok(Some(n)),
        (Some(w), _) => Err(Error::UnknownReference(format!(
            "warp references network `{}` which was not supplied",
            w.net_ref
        ))),
    }
}

/// Kernel matrix between `x1` and `x2`.
///
/// With a warp, points are mapped through `net` first and the base kernel is
/// multiplied by the output scale. Passing the same matrix twice yields an
/// exactly symmetric result.
pub fn eval_kernel(
    spec: &KernelSpec,
    net: Option<&FeatureNet>,
    x1: &DMatrix<f64>,
    x2: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    spec.validate()?;
    match resolve_net(spec, net)? {
        None => spec.base_matrix(x1, x2),
        Some(n) => {
            let f1 = n.features(x1)?;
            let k = if std::ptr::eq(x1, x2) {
                spec.base_matrix(&f1, &f1)?
            } else {
                spec.base_matrix(&f1, &n.features(x2)?)?
            };
            Ok(k * spec.outscale())
        }
    }
}

/// `∂K/∂(log θ_j)` for every log-hyperparameter, warp output scale last.
pub fn kernel_grad_hyper(
    spec: &KernelSpec,
    net: Option<&FeatureNet>,
    x1: &DMatrix<f64>,
    x2: &DMatrix<f64>,
) -> Result<Vec<DMatrix<f64>>> {
    spec.validate()?;
    let net = resolve_net(spec, net)?;
    let (z1, z2) = match net {
        Some(n) => (n.features(x1)?, n.features(x2)?),
        None => (x1.clone(), x2.clone()),
    };
    check_cols(&z1, &z2)?;
    let r = spec.resolved()?;
    let np = spec.family.num_params();
    let scale = spec.outscale();
    let (a, b) = (rows_of(&z1), rows_of(&z2));
    let mut out = vec![DMatrix::zeros(a.len(), b.len()); np];
    let mut buf = vec![0.0; np];
    for i in 0..a.len() {
        for j in 0..b.len() {
            r.hyper_grads(&a[i], &b[j], &mut buf);
            for (m, v) in out.iter_mut().zip(&buf) {
                m[(i, j)] = v * scale;
            }
        }
    }
    if spec.warp.is_some() {
        out.push(spec.base_matrix(&z1, &z2)? * scale);
    }
    Ok(out)
}

fn require_rbf(spec: &KernelSpec) -> Result<(f64, f64)> {
    if spec.family != KernelFamily::Rbf {
        return Err(Error::UnsupportedKernel(format!(
            "input derivatives are implemented for RBF only, got {:?}",
            spec.family
        )));
    }
    if spec.warp.is_some() {
        return Err(Error::UnsupportedKernel(
            "input derivatives take the base kernel; strip the warp first".into(),
        ));
    }
    spec.validate()?;
    Ok((spec.log_params[0].exp(), spec.log_params[1].exp()))
}

/// `∂k(x, x_j)/∂x_dim` for every row `x_j` of `xs` (RBF only).
pub fn kernel_grad_input(
    spec: &KernelSpec,
    x: &DVector<f64>,
    xs: &DMatrix<f64>,
    dim: usize,
) -> Result<DVector<f64>> {
    let (var, len_sq) = require_rbf(spec)?;
    if x.len() != xs.ncols() || dim >= x.len() {
        return Err(Error::DimensionMismatch(format!(
            "derivative dim {dim} for points of dimension {}",
            x.len()
        )));
    }
    let p = x.as_slice();
    Ok(DVector::from_iterator(
        xs.nrows(),
        rows_of(xs).iter().map(|q| {
            let k = var * (-sq_dist(p, q) / (2.0 * len_sq)).exp();
            -(p[dim] - q[dim]) / len_sq * k
        }),
    ))
}

/// `∂²k(x, x')/∂x_{dim1} ∂x'_{dim2}` for every pair of rows (RBF only).
pub fn kernel_grad_input_input(
    spec: &KernelSpec,
    x1: &DMatrix<f64>,
    x2: &DMatrix<f64>,
    dim1: usize,
    dim2: usize,
) -> Result<DMatrix<f64>> {
    let (var, len_sq) = require_rbf(spec)?;
    check_cols(x1, x2)?;
    if dim1 >= x1.ncols() || dim2 >= x1.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "derivative dims ({dim1}, {dim2}) for points of dimension {}",
            x1.ncols()
        )));
    }
    let (a, b) = (rows_of(x1), rows_of(x2));
    let delta = if dim1 == dim2 { 1.0 } else { 0.0 };
    Ok(DMatrix::from_fn(a.len(), b.len(), |i, j| {
        let (p, q) = (&a[i], &b[j]);
        let k = var * (-sq_dist(p, q) / (2.0 * len_sq)).exp();
        k * (delta / len_sq - (p[dim1] - q[dim1]) * (p[dim2] - q[dim2]) / (len_sq * len_sq))
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{cholesky_psd, SymMatrix};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pts(rows: usize, d: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(rows, d, |_, _| rng.gen_range(-1.5..1.5))
    }

    fn random_spec(rng: &mut ChaCha8Rng) -> KernelSpec {
        match rng.gen_range(0..3) {
            0 => KernelSpec::rbf(rng.gen_range(0.2..3.0), rng.gen_range(0.2..3.0)),
            1 => KernelSpec::rational_quadratic(
                rng.gen_range(0.2..3.0),
                rng.gen_range(0.2..3.0),
                rng.gen_range(0.2..5.0),
            ),
            _ => KernelSpec::polynomial(rng.gen_range(0.2..2.0), rng.gen_range(0.2..2.0), rng.gen_range(1..4)),
        }
    }

    #[test]
    fn rbf_hand_values() {
        let k = KernelSpec::rbf(2.5, 0.7);
        let x = DMatrix::from_row_slice(1, 2, &[0.3, -0.4]);
        assert!((eval_kernel(&k, None, &x, &x).unwrap()[(0, 0)] - 2.5).abs() < 1e-14);

        let k = KernelSpec::rbf(1.0, 1.0);
        let a = DMatrix::from_row_slice(1, 1, &[0.0]);
        let b = DMatrix::from_row_slice(1, 1, &[2f64.sqrt()]);
        let v = eval_kernel(&k, None, &a, &b).unwrap()[(0, 0)];
        assert!((v - (-1f64).exp()).abs() < 1e-12);
        assert!((v - 0.36788).abs() < 1e-5);
    }

    #[test]
    fn linear_polynomial_reduces_to_dot_product() {
        let k = KernelSpec {
            family: KernelFamily::Polynomial { degree: 1 },
            log_params: vec![0.0, -40.0],
            warp: None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = pts(3, 4, &mut rng);
        let b = pts(2, 4, &mut rng);
        let km = eval_kernel(&k, None, &a, &b).unwrap();
        let dotm = &a * b.transpose();
        assert!((km - dotm).amax() < 1e-15);
    }

    #[test]
    fn invalid_hyperparameters_rejected() {
        let mut k = KernelSpec::rbf(1.0, 1.0);
        k.log_params[0] = f64::INFINITY;
        let x = DMatrix::zeros(1, 1);
        assert!(matches!(eval_kernel(&k, None, &x, &x), Err(Error::InvalidHyperparameter(_))));
        let k = KernelSpec {
            family: KernelFamily::Polynomial { degree: 0 },
            log_params: vec![0.0, 0.0],
            warp: None,
        };
        assert!(k.validate().is_err());
        let k = KernelSpec::rbf(1.0, 1.0);
        assert!(matches!(
            eval_kernel(&k, None, &DMatrix::zeros(1, 2), &DMatrix::zeros(1, 3)),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn kernel_matrices_are_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let spec = random_spec(&mut rng);
            let n = rng.gen_range(2..12);
            let x = pts(n, 3, &mut rng);
            let mut k = eval_kernel(&spec, None, &x, &x).unwrap();
            assert_eq!(k, k.transpose());
            for i in 0..n {
                k[(i, i)] += 1e-8;
            }
            cholesky_psd(&SymMatrix::new(k).unwrap(), 6).unwrap();
        }
    }

    #[test]
    fn rq_approaches_rbf_for_large_alpha() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = pts(8, 2, &mut rng);
        let rq = KernelSpec::rational_quadratic(1.7, 0.9, 1e6);
        let rbf = KernelSpec::rbf(1.7, 0.9);
        let diff = eval_kernel(&rq, None, &x, &x).unwrap() - eval_kernel(&rbf, None, &x, &x).unwrap();
        assert!(diff.amax() < 1e-4);
    }

    #[test]
    fn identity_warp_with_unit_scale_equals_base() {
        let net = FeatureNet::identity(2);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = pts(5, 2, &mut rng);
        let base = KernelSpec::rational_quadratic(1.3, 0.8, 2.0);
        let warped = base.clone().with_warp("net0", 0.0);
        assert_eq!(
            eval_kernel(&warped, Some(&net), &x, &x).unwrap(),
            eval_kernel(&base, None, &x, &x).unwrap()
        );
        assert!(matches!(
            eval_kernel(&warped, None, &x, &x),
            Err(Error::UnknownReference(_))
        ));
    }

    #[test]
    fn rbf_hyper_gradients_at_zero_distance() {
        let k = KernelSpec::rbf(1.8, 0.6);
        let x = DMatrix::from_row_slice(1, 2, &[0.1, 0.2]);
        let g = kernel_grad_hyper(&k, None, &x, &x).unwrap();
        assert!((g[0][(0, 0)] - 1.8).abs() < 1e-14);
        assert_eq!(g[1][(0, 0)], 0.0);
    }

    #[test]
    fn hyper_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let h = 1e-5;
        for trial in 0..30 {
            let mut spec = random_spec(&mut rng);
            let net = crate::net::init_net(3, trial);
            let use_warp = trial % 2 == 0;
            if use_warp {
                spec = spec.with_warp("net0", rng.gen_range(-0.5..0.5));
            }
            let x1 = pts(4, 3, &mut rng);
            let x2 = pts(3, 3, &mut rng);
            let analytic = kernel_grad_hyper(&spec, Some(&net), &x1, &x2).unwrap();
            for p in 0..spec.num_trainable() {
                let bump = |delta: f64| {
                    let mut s = spec.clone();
                    if p < s.log_params.len() {
                        s.log_params[p] += delta;
                    } else {
                        s.warp.as_mut().unwrap().log_outscale += delta;
                    }
                    eval_kernel(&s, Some(&net), &x1, &x2).unwrap()
                };
                let fd = (bump(h) - bump(-h)) / (2.0 * h);
                for (a, f) in analytic[p].iter().zip(fd.iter()) {
                    assert!(
                        (a - f).abs() <= 1e-5 * a.abs().max(f.abs()).max(1e-6),
                        "trial {trial} param {p}: {a} vs {f}"
                    );
                }
            }
        }
    }

    #[test]
    fn contractions_match_explicit_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let h = 1e-6;
        for _ in 0..20 {
            let spec = random_spec(&mut rng);
            let z1 = pts(4, 2, &mut rng);
            let z2 = pts(5, 2, &mut rng);
            let g = pts(4, 5, &mut rng);
            let hyp = spec.contract_hyper(&z1, &z2, &g).unwrap();
            let mats = kernel_grad_hyper(&spec, None, &z1, &z2).unwrap();
            for (c, m) in hyp.iter().zip(&mats) {
                assert!((c - m.component_mul(&g).sum()).abs() < 1e-10);
            }
            let (d1, d2) = spec.contract_points(&z1, &z2, &g).unwrap();
            let f = |a: &DMatrix<f64>, b: &DMatrix<f64>| {
                spec.base_matrix(a, b).unwrap().component_mul(&g).sum()
            };
            for i in 0..4 {
                for k in 0..2 {
                    let mut p = z1.clone();
                    p[(i, k)] += h;
                    let mut m = z1.clone();
                    m[(i, k)] -= h;
                    let fd = (f(&p, &z2) - f(&m, &z2)) / (2.0 * h);
                    assert!((fd - d1[(i, k)]).abs() < 1e-6 * fd.abs().max(1.0));
                }
            }
            for j in 0..5 {
                for k in 0..2 {
                    let mut p = z2.clone();
                    p[(j, k)] += h;
                    let mut m = z2.clone();
                    m[(j, k)] -= h;
                    let fd = (f(&z1, &p) - f(&z1, &m)) / (2.0 * h);
                    assert!((fd - d2[(j, k)]).abs() < 1e-6 * fd.abs().max(1.0));
                }
            }
            let gd = DVector::from_fn(4, |_, _| rng.gen_range(-1.0..1.0));
            let dd = spec.contract_points_diag(&z1, &gd).unwrap();
            let fdiag = |a: &DMatrix<f64>| spec.base_diag(a).unwrap().dot(&gd);
            for i in 0..4 {
                for k in 0..2 {
                    let mut p = z1.clone();
                    p[(i, k)] += h;
                    let mut m = z1.clone();
                    m[(i, k)] -= h;
                    let fd = (fdiag(&p) - fdiag(&m)) / (2.0 * h);
                    assert!((fd - dd[(i, k)]).abs() < 1e-6 * fd.abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn input_gradient_hand_cases() {
        let k = KernelSpec::rbf(1.0, 1.0);
        let x = DVector::from_vec(vec![0.0]);
        let xs = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let g = kernel_grad_input(&k, &x, &xs, 0).unwrap();
        assert_eq!(g[0], 0.0);
        assert!((g[1] - (-0.5f64).exp()).abs() < 1e-15);

        let rq = KernelSpec::rational_quadratic(1.0, 1.0, 1.0);
        assert!(matches!(
            kernel_grad_input(&rq, &x, &xs, 0),
            Err(Error::UnsupportedKernel(_))
        ));
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let h = 1e-6;
        for _ in 0..20 {
            let k = KernelSpec::rbf(rng.gen_range(0.3..2.0), rng.gen_range(0.3..2.0));
            let x = DVector::from_fn(3, |_, _| rng.gen_range(-1.0..1.0));
            let xs = pts(5, 3, &mut rng);
            for dim in 0..3 {
                let g = kernel_grad_input(&k, &x, &xs, dim).unwrap();
                let eval = |v: &DVector<f64>| {
                    eval_kernel(&k, None, &DMatrix::from_row_slice(1, 3, v.as_slice()), &xs).unwrap()
                };
                let mut xp = x.clone();
                xp[dim] += h;
                let mut xm = x.clone();
                xm[dim] -= h;
                let fd = (eval(&xp) - eval(&xm)) / (2.0 * h);
                for j in 0..5 {
                    assert!((fd[(0, j)] - g[j]).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn mixed_second_derivative_cases() {
        let k = KernelSpec::rbf(2.0, 0.5);
        let x = DMatrix::from_row_slice(1, 1, &[0.7]);
        let v = kernel_grad_input_input(&k, &x, &x, 0, 0).unwrap()[(0, 0)];
        assert!((v - 4.0).abs() < 1e-14);

        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let k = KernelSpec::rbf(1.3, 0.8);
        let a = pts(4, 2, &mut rng);
        let b = pts(3, 2, &mut rng);
        let ab = kernel_grad_input_input(&k, &a, &b, 1, 1).unwrap();
        let ba = kernel_grad_input_input(&k, &b, &a, 1, 1).unwrap();
        assert!((ab - ba.transpose()).amax() < 1e-15);

        // nested finite differences over both arguments
        let h = 1e-4;
        for (d1, d2) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            let m = kernel_grad_input_input(&k, &a, &b, d1, d2).unwrap();
            for i in 0..4 {
                for j in 0..3 {
                    let f = |s1: f64, s2: f64| {
                        let mut p = a.row(i).into_owned();
                        p[d1] += s1;
                        let mut q = b.row(j).into_owned();
                        q[d2] += s2;
                        k.base_matrix(&DMatrix::from_row_slice(1, 2, p.as_slice()), &DMatrix::from_row_slice(1, 2, q.as_slice()))
                            .unwrap()[(0, 0)]
                    };
                    let fd = (f(h, h) - f(h, -h) - f(-h, h) + f(-h, -h)) / (4.0 * h * h);
                    assert!((fd - m[(i, j)]).abs() < 1e-4, "{fd} vs {}", m[(i, j)]);
                }
            }
        }
    }
}
