//! Monotone GPs through virtual derivative observations.
//!
//! Each virtual point asserts `sign·∂f/∂x_dim > 0` through a probit factor
//! `Φ(f'/ν)`. The Gaussian part of the model (the data) is conjugate, so the
//! Laplace approximation runs over the virtual derivatives only, with the
//! data-conditioned posterior (exact or sparse) as their prior. The mode of
//! the full joint vector is recovered afterwards by Gaussian conditioning.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{FittedGp, GpModel, Prediction};
use crate::kernels::{kernel_grad_input, kernel_grad_input_input, KernelSpec};
use crate::numerics::{chol_of, inv_mills, log_norm_cdf, CholFactor, SymMatrix};
use crate::sparse::FittedSparse;

pub const DEFAULT_NU: f64 = 1e-6;
pub const DEFAULT_MAX_ITER: usize = 200;
pub const DEFAULT_GRID_POINTS: usize = 10;
/// Gradient-norm tolerance at the mode.
const GRAD_TOL: f64 = 1e-6;
/// Newton decrement `∇ᵀ(−H)⁻¹∇`, relative to the size of the quadratic term,
/// below which the objective cannot improve measurably. Two such steps in a
/// row end the iteration; this happens when a near-hard constraint makes the
/// gradient unresolvable in double precision.
const DECREMENT_TOL: f64 = 1e-15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VirtualDerivativeSet {
    /// One row per virtual point, in input space.
    pub locations: DMatrix<f64>,
    /// Input coordinate whose derivative is constrained.
    pub dim: usize,
    /// `+1` for increasing, `−1` for decreasing.
    pub sign: f64,
    pub nu: f64,
}

impl VirtualDerivativeSet {
    pub fn empty(input_dim: usize, dim: usize) -> Self {
        VirtualDerivativeSet {
            locations: DMatrix::zeros(0, input_dim),
            dim,
            sign: 1.0,
            nu: DEFAULT_NU,
        }
    }

    /// `count` points evenly spaced along `dim` over the data range widened by
    /// 10% on each side; the other coordinates sit at their column means.
    pub fn on_grid(x: &DMatrix<f64>, dim: usize, count: usize, sign: f64, nu: f64) -> Result<Self> {
        if x.nrows() == 0 {
            return Err(Error::EmptyData);
        }
        if dim >= x.ncols() {
            return Err(Error::DimensionMismatch(format!("axis {dim} of {}-D inputs", x.ncols())));
        }
        let anchor = x.row_mean();
        Self::along_axis(x, &DMatrix::from_rows(&[anchor]), dim, count, sign, nu)
    }

    /// Like [`VirtualDerivativeSet::on_grid`], cycling through `anchors` for the
    /// coordinates other than `dim`.
    pub fn along_axis(
        x: &DMatrix<f64>,
        anchors: &DMatrix<f64>,
        dim: usize,
        count: usize,
        sign: f64,
        nu: f64,
    ) -> Result<Self> {
        if x.nrows() == 0 || anchors.nrows() == 0 {
            return Err(Error::EmptyData);
        }
        if anchors.ncols() != x.ncols() || dim >= x.ncols() {
            return Err(Error::DimensionMismatch("anchor dimension".into()));
        }
        let col = x.column(dim);
        let (lo, hi) = (col.min(), col.max());
        let pad = 0.1 * (hi - lo);
        let (lo, hi) = (lo - pad, hi + pad);
        let mut locations = DMatrix::zeros(count, x.ncols());
        for i in 0..count {
            locations.set_row(i, &anchors.row(i % anchors.nrows()));
            let t = if count == 1 { 0.5 } else { i as f64 / (count - 1) as f64 };
            locations[(i, dim)] = lo + t * (hi - lo);
        }
        let v = VirtualDerivativeSet {
            locations,
            dim,
            sign,
            nu,
        };
        v.validate(x)?;
        Ok(v)
    }

    pub fn len(&self) -> usize {
        self.locations.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.nrows() == 0
    }

    /// Checks `ν`, the sign, and that every location lies in the data's
    /// bounding box widened by 20% of its range on each side.
    pub fn validate(&self, x: &DMatrix<f64>) -> Result<()> {
        if !(self.nu > 0.0 && self.nu.is_finite()) {
            return Err(Error::InvalidConfig(format!("steepness must be positive, got {}", self.nu)));
        }
        if self.sign != 1.0 && self.sign != -1.0 {
            return Err(Error::InvalidConfig(format!("sign must be +1 or -1, got {}", self.sign)));
        }
        if self.locations.ncols() != x.ncols() || self.dim >= x.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "virtual points are {}-D constraining axis {}, data is {}-D",
                self.locations.ncols(),
                self.dim,
                x.ncols()
            )));
        }
        if self.is_empty() || x.nrows() == 0 {
            return Ok(());
        }
        for c in 0..x.ncols() {
            let (lo, hi) = (x.column(c).min(), x.column(c).max());
            let pad = 0.2 * (hi - lo) + 1e-9 * (1.0 + lo.abs().max(hi.abs()));
            if self
                .locations
                .column(c)
                .iter()
                .any(|v| !v.is_finite() || *v < lo - pad || *v > hi + pad)
            {
                return Err(Error::InvalidConfig(format!(
                    "virtual point outside the widened data range on axis {c}"
                )));
            }
        }
        Ok(())
    }
}

/// Latent quantities in kernel-input space: function values, or directional
/// derivatives along a per-point direction.
#[derive(Debug, Clone)]
struct Items {
    feats: DMatrix<f64>,
    dirs: Option<DMatrix<f64>>,
}

impl Items {
    fn values(model: &GpModel, x: &DMatrix<f64>) -> Result<Items> {
        Ok(Items {
            feats: model.map(x, false)?.feats,
            dirs: None,
        })
    }

    /// Directional derivatives `sign·∂f/∂x_dim`, pushed through the network's
    /// Jacobian when the kernel sees network features.
    fn derivatives(model: &GpModel, v: &VirtualDerivativeSet) -> Result<Items> {
        let feats = model.map(&v.locations, false)?.feats;
        let mut dirs = DMatrix::zeros(v.len(), feats.ncols());
        match (&model.net, model.uses_net()) {
            (Some(net), true) => {
                for i in 0..v.len() {
                    let jac = net.input_jacobian(&v.locations.row(i).transpose())?;
                    dirs.set_row(i, &(jac.column(v.dim).transpose() * v.sign));
                }
            }
            _ => dirs.column_mut(v.dim).fill(v.sign),
        }
        Ok(Items {
            feats,
            dirs: Some(dirs),
        })
    }

    fn len(&self) -> usize {
        self.feats.nrows()
    }

    fn prior_mean(&self, model: &GpModel) -> DVector<f64> {
        let m = if self.dirs.is_some() { 0.0 } else { model.mean };
        DVector::from_element(self.len(), m)
    }
}

fn check_derivative_kernel(model: &GpModel) -> Result<KernelSpec> {
    let base = model.kernel.base();
    if !base.is_rbf() {
        return Err(Error::UnsupportedKernel(
            "derivative observations need an RBF base kernel".into(),
        ));
    }
    Ok(base)
}

/// `cov(∂f(a)·u_a, f(b))` summed over feature coordinates.
fn der_val(base: &KernelSpec, a: &DMatrix<f64>, u: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut out = DMatrix::zeros(a.nrows(), b.nrows());
    for i in 0..a.nrows() {
        let p = a.row(i).transpose();
        for d in 0..a.ncols() {
            if u[(i, d)] != 0.0 {
                let g = kernel_grad_input(base, &p, b, d)?;
                let mut row = out.row_mut(i);
                row += g.transpose() * u[(i, d)];
            }
        }
    }
    Ok(out)
}

fn der_der(
    base: &KernelSpec,
    a: &DMatrix<f64>,
    ua: &DMatrix<f64>,
    b: &DMatrix<f64>,
    ub: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let mut out = DMatrix::zeros(a.nrows(), b.nrows());
    for d1 in 0..a.ncols() {
        for d2 in 0..a.ncols() {
            let h = kernel_grad_input_input(base, a, b, d1, d2)?;
            for j in 0..b.nrows() {
                for i in 0..a.nrows() {
                    out[(i, j)] += ua[(i, d1)] * ub[(j, d2)] * h[(i, j)];
                }
            }
        }
    }
    Ok(out)
}

fn prior_cov(model: &GpModel, a: &Items, b: &Items) -> Result<DMatrix<f64>> {
    let k = match (&a.dirs, &b.dirs) {
        (None, None) => return model.kern(&a.feats, &b.feats),
        (Some(u), None) => der_val(&check_derivative_kernel(model)?, &a.feats, u, &b.feats)?,
        (None, Some(u)) => der_val(&check_derivative_kernel(model)?, &b.feats, u, &a.feats)?.transpose(),
        (Some(ua), Some(ub)) => der_der(&check_derivative_kernel(model)?, &a.feats, ua, &b.feats, ub)?,
    };
    Ok(k * model.kernel.outscale())
}

/// Prior covariance of `[f(X); sign·∂f/∂x_dim(V)]`.
pub fn build_joint_prior(model: &GpModel, x: &DMatrix<f64>, v: &VirtualDerivativeSet) -> Result<SymMatrix> {
    model.validate()?;
    v.validate(x)?;
    let vals = Items::values(model, x)?;
    let n = vals.len();
    if v.is_empty() {
        return SymMatrix::symmetrize(prior_cov(model, &vals, &vals)?);
    }
    let ders = Items::derivatives(model, v)?;
    let m = ders.len();
    let mut k = DMatrix::zeros(n + m, n + m);
    k.view_mut((0, 0), (n, n)).copy_from(&prior_cov(model, &vals, &vals)?);
    let cross = prior_cov(model, &ders, &vals)?;
    k.view_mut((n, 0), (m, n)).copy_from(&cross);
    k.view_mut((0, n), (n, m)).copy_from(&cross.transpose());
    k.view_mut((n, n), (m, m)).copy_from(&prior_cov(model, &ders, &ders)?);
    SymMatrix::symmetrize(k)
}

/// A Gaussian posterior given the data, used as the prior for the virtual derivatives.
#[derive(Debug, Clone)]
pub enum BasePosterior {
    Exact(FittedGp),
    /// Sparse fit (absent when there was no training data).
    Sparse(GpModel, Option<FittedSparse>),
}

/// Low-rank posterior corrections: `cov(a, b) = prior − negₐᵀneg_b + posₐᵀpos_b`.
#[derive(Debug, Clone)]
struct Proj {
    mean: DVector<f64>,
    neg: DMatrix<f64>,
    pos: DMatrix<f64>,
}

impl BasePosterior {
    pub fn model(&self) -> &GpModel {
        match self {
            BasePosterior::Exact(f) => &f.model,
            BasePosterior::Sparse(m, _) => m,
        }
    }

    fn project(&self, it: &Items) -> Result<Proj> {
        let model = self.model();
        let mut mean = it.prior_mean(model);
        let k = it.len();
        match self {
            BasePosterior::Exact(fit) => match fit.chol() {
                Some(chol) => {
                    let cross = prior_cov(model, &Items::values_of(fit.train_feats()), it)?;
                    mean += cross.transpose() * fit.alpha();
                    Ok(Proj {
                        mean,
                        neg: chol.solve_lower(&cross)?,
                        pos: DMatrix::zeros(0, k),
                    })
                }
                None => Ok(Proj {
                    mean,
                    neg: DMatrix::zeros(0, k),
                    pos: DMatrix::zeros(0, k),
                }),
            },
            BasePosterior::Sparse(_, Some(fit)) => {
                let kz = prior_cov(model, &Items::values_of(fit.inducing_feats()), it)?;
                let a = fit.project(&kz)?;
                mean += fit.mean_offset(&a)?;
                let pos = fit.whiten(&a)?;
                Ok(Proj { mean, neg: a, pos })
            }
            BasePosterior::Sparse(_, None) => Ok(Proj {
                mean,
                neg: DMatrix::zeros(0, k),
                pos: DMatrix::zeros(0, k),
            }),
        }
    }

    fn cov(&self, a: &Items, pa: &Proj, b: &Items, pb: &Proj) -> Result<DMatrix<f64>> {
        Ok(prior_cov(self.model(), a, b)? - pa.neg.transpose() * &pb.neg + pa.pos.transpose() * &pb.pos)
    }

    /// `cov(a, b)·w` without forming a projection of `a`; cheap for large value sets.
    fn cov_apply(&self, a: &Items, b: &Items, pb: &Proj, w: &DVector<f64>) -> Result<DVector<f64>> {
        let model = self.model();
        let mut out = prior_cov(model, a, b)? * w;
        match self {
            BasePosterior::Exact(fit) => {
                if let Some(chol) = fit.chol() {
                    let t = chol.solve_upper_vec(&(&pb.neg * w))?;
                    out -= prior_cov(model, a, &Items::values_of(fit.train_feats()))? * t;
                }
            }
            BasePosterior::Sparse(_, Some(fit)) => {
                let kz = prior_cov(model, &Items::values_of(fit.inducing_feats()), a)?;
                let pa = fit.project(&kz)?;
                out -= pa.transpose() * (&pb.neg * w);
                out += fit.whiten(&pa)?.transpose() * (&pb.pos * w);
            }
            BasePosterior::Sparse(_, None) => {}
        }
        Ok(out)
    }
}

impl BasePosterior {
    /// Predictive moments at `x_star` without any derivative information.
    pub fn predict(&self, x_star: &DMatrix<f64>) -> Result<Prediction> {
        let model = self.model();
        let vals = Items::values(model, x_star)?;
        let p = self.project(&vals)?;
        let prior = model.kern_diag(&vals.feats)?;
        let var = DVector::from_iterator(
            vals.len(),
            (0..vals.len()).map(|j| prior[j] - p.neg.column(j).norm_squared() + p.pos.column(j).norm_squared()),
        );
        Ok(Prediction::from_parts(p.mean, var, model.noise_var()))
    }

    /// Latent posterior mean and full covariance at `x_star`.
    pub fn predict_joint(&self, x_star: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let vals = Items::values(self.model(), x_star)?;
        let p = self.project(&vals)?;
        let cov = self.cov(&vals, &p, &vals, &p)?;
        Ok((p.mean, cov))
    }
}

impl Items {
    fn values_of(feats: &DMatrix<f64>) -> Items {
        Items {
            feats: feats.clone(),
            dirs: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LaplaceState {
    /// `[f̂(X); ĝ(V)]`, the latent values at the data then the virtual derivatives.
    pub mode: DVector<f64>,
    /// Cholesky factor of `I + W^½ C W^½` at the mode.
    pub hessian_chol: CholFactor,
    pub converged: bool,
    pub iterations: usize,
    /// Norm of the gradient of the log posterior at the mode.
    pub grad_norm: f64,
    grad_loglik: DVector<f64>,
    w_sqrt: DVector<f64>,
}

impl LaplaceState {
    /// The virtual-derivative part of the mode.
    pub fn derivative_mode(&self) -> DVector<f64> {
        let m = self.w_sqrt.len();
        self.mode.rows(self.mode.len() - m, m).into_owned()
    }
}

/// `Σ log Φ(g/ν)` with its gradient and the negated Hessian diagonal.
fn probit_terms(g: &DVector<f64>, nu: f64) -> (f64, DVector<f64>, DVector<f64>) {
    let mut lp = 0.0;
    let mut d1 = DVector::zeros(g.len());
    let mut w = DVector::zeros(g.len());
    for i in 0..g.len() {
        let z = g[i] / nu;
        lp += log_norm_cdf(z);
        let r = inv_mills(z);
        d1[i] = r / nu;
        w[i] = (r * (z + r)).max(0.0) / (nu * nu);
    }
    (lp, d1, w)
}

fn newton_matrix(c: &DMatrix<f64>, w_sqrt: &DVector<f64>) -> Result<CholFactor> {
    let m = c.nrows();
    let mut b = DMatrix::from_fn(m, m, |i, j| w_sqrt[i] * c[(i, j)] * w_sqrt[j]);
    for i in 0..m {
        b[(i, i)] += 1.0;
    }
    chol_of(b)
}

/// Newton's method with step halving on `Σ log Φ(g/ν) − ½(g−m)ᵀC⁻¹(g−m)`,
/// parametrized by `a = C⁻¹(g − m)`.
fn newton(mean: &DVector<f64>, c: &DMatrix<f64>, nu: f64, max_iter: usize) -> Result<(DVector<f64>, DVector<f64>, usize, bool, f64)> {
    let psi = |a: &DVector<f64>, g: &DVector<f64>| -0.5 * a.dot(&(g - mean)) + probit_terms(g, nu).0;
    let mut a = DVector::zeros(mean.len());
    let mut g = mean.clone();
    let mut obj = psi(&a, &g);
    let mut iterations = 0;
    let mut tiny_before = false;
    loop {
        let (_, d1, w) = probit_terms(&g, nu);
        let grad = &d1 - &a;
        let grad_norm = grad.norm();
        if grad_norm < GRAD_TOL {
            return Ok((g, a, iterations, true, grad_norm));
        }
        let w_sqrt = w.map(f64::sqrt);
        let l = newton_matrix(c, &w_sqrt)?;
        // δa = (I + W C)⁻¹ ∇ in terms of B; avoids cancelling the large W(g − m).
        let cg = c * &grad;
        let step = &grad - w_sqrt.component_mul(&l.solve_vec(&w_sqrt.component_mul(&cg))?);
        let scale = (a.norm() * (&g - mean).norm()).max(1.0);
        let tiny = grad.dot(&(c * &step)) < DECREMENT_TOL * scale;
        if tiny && tiny_before {
            return Ok((g, a, iterations, true, grad_norm));
        }
        tiny_before = tiny;
        if iterations == max_iter {
            return Ok((g, a, iterations, false, grad_norm));
        }
        iterations += 1;
        let mut t = 1.0;
        loop {
            let a_t = &a + &step * t;
            let g_t = c * &a_t + mean;
            let obj_t = psi(&a_t, &g_t);
            if obj_t >= obj - 1e-12 * obj.abs() || t < 1e-10 {
                a = a_t;
                g = g_t;
                obj = obj_t;
                break;
            }
            t *= 0.5;
        }
    }
}

/// A Laplace-approximated monotone posterior.
#[derive(Debug, Clone)]
pub struct MonotoneFit {
    pub base: BasePosterior,
    pub state: LaplaceState,
    pub virtuals: VirtualDerivativeSet,
    ders: Items,
    ders_proj: Proj,
}

/// Fits the monotone GP on top of an exact posterior.
pub fn laplace_fit(model: &GpModel, x: &DMatrix<f64>, y: &DVector<f64>, v: &VirtualDerivativeSet) -> Result<MonotoneFit> {
    let base = BasePosterior::Exact(FittedGp::fit(model.clone(), x.clone(), y.clone())?);
    laplace_fit_base(base, x, v, DEFAULT_MAX_ITER)
}

/// Fits the monotone GP on top of a given posterior over the training inputs `x`.
///
/// Non-convergence is reported through `state.converged`, not an error.
pub fn laplace_fit_base(base: BasePosterior, x: &DMatrix<f64>, v: &VirtualDerivativeSet, max_iter: usize) -> Result<MonotoneFit> {
    let model = base.model().clone();
    model.validate()?;
    v.validate(x)?;
    let ders = Items::derivatives(&model, v)?;
    if !v.is_empty() {
        check_derivative_kernel(&model)?;
    }
    let ders_proj = base.project(&ders)?;
    let c = SymMatrix::symmetrize(base.cov(&ders, &ders_proj, &ders, &ders_proj)?)?.into_matrix();
    let (g, a, iterations, converged, grad_norm) = newton(&ders_proj.mean, &c, v.nu, max_iter)?;
    let (_, d1, w) = probit_terms(&g, v.nu);
    let w_sqrt = w.map(f64::sqrt);
    let hessian_chol = newton_matrix(&c, &w_sqrt)?;

    let vals = Items::values(&model, x)?;
    let fx = match &base {
        BasePosterior::Exact(fit) if fit.chol().is_some() => {
            let ks = prior_cov(&model, &Items::values_of(fit.train_feats()), &vals)?;
            ks.transpose() * fit.alpha()
        }
        BasePosterior::Sparse(_, Some(fit)) => {
            let kz = prior_cov(&model, &Items::values_of(fit.inducing_feats()), &vals)?;
            fit.mean_offset(&fit.project(&kz)?)?
        }
        _ => DVector::zeros(vals.len()),
    }
    .add_scalar(model.mean)
        + if v.is_empty() {
            DVector::zeros(vals.len())
        } else {
            base.cov_apply(&vals, &ders, &ders_proj, &a)?
        };
    let mut mode = DVector::zeros(fx.len() + g.len());
    mode.rows_mut(0, fx.len()).copy_from(&fx);
    mode.rows_mut(fx.len(), g.len()).copy_from(&g);
    Ok(MonotoneFit {
        base,
        state: LaplaceState {
            mode,
            hessian_chol,
            converged,
            iterations,
            grad_norm,
            grad_loglik: d1,
            w_sqrt,
        },
        virtuals: v.clone(),
        ders,
        ders_proj,
    })
}

/// Laplace-approximate predictive moments at `x_star`.
pub fn monotone_predict(fit: &MonotoneFit, x_star: &DMatrix<f64>) -> Result<Prediction> {
    if !fit.state.converged {
        return Err(Error::StateNotConverged);
    }
    let model = fit.base.model();
    let vals = Items::values(model, x_star)?;
    let p = fit.base.project(&vals)?;
    let prior = model.kern_diag(&vals.feats)?;
    let mut var = DVector::from_iterator(
        vals.len(),
        (0..vals.len()).map(|j| prior[j] - p.neg.column(j).norm_squared() + p.pos.column(j).norm_squared()),
    );
    let mut mean = p.mean.clone();
    if !fit.virtuals.is_empty() {
        let (shift, v) = fit.update_terms(&vals, &p)?;
        mean += shift;
        for j in 0..vals.len() {
            var[j] -= v.column(j).norm_squared();
        }
    }
    Ok(Prediction::from_parts(mean, var, model.noise_var()))
}

/// Laplace-approximate latent mean and full covariance at `x_star`.
pub fn monotone_predict_joint(fit: &MonotoneFit, x_star: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if !fit.state.converged {
        return Err(Error::StateNotConverged);
    }
    let vals = Items::values(fit.base.model(), x_star)?;
    let p = fit.base.project(&vals)?;
    let mut cov = fit.base.cov(&vals, &p, &vals, &p)?;
    let mut mean = p.mean.clone();
    if !fit.virtuals.is_empty() {
        let (shift, v) = fit.update_terms(&vals, &p)?;
        mean += shift;
        cov -= v.transpose() * v;
    }
    Ok((mean, cov))
}

impl MonotoneFit {
    /// Mean shift `C_*gᵀ ∇log p(ĝ)` and `L⁻¹ W^½ C_g*` for value items.
    fn update_terms(&self, vals: &Items, p: &Proj) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let cgs = self.base.cov(&self.ders, &self.ders_proj, vals, p)?;
        let shift = cgs.transpose() * &self.state.grad_loglik;
        let scaled = DMatrix::from_fn(cgs.nrows(), cgs.ncols(), |i, j| self.state.w_sqrt[i] * cgs[(i, j)]);
        Ok((shift, self.state.hessian_chol.solve_lower(&scaled)?))
    }
}
