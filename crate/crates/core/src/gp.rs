//! Exact GP regression with constant mean, Gaussian noise and an optional
//! feature network (plain deep kernel or warped kernel).

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::KernelSpec;
use crate::net::{FeatureNet, GradientTape, NetGradients};
use crate::numerics::{chol_of, CholFactor};
use crate::optim::{adam_minimize, OptimizerConfig};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    /// Kernel on the inputs themselves.
    RawInputs,
    /// Kernel on `h_w(x)`.
    NetFeatures,
    /// `exp(log_outscale) · k(h_w(x), h_w(x'))`, inducing points stay in input space.
    WarpedKernel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpModel {
    pub kernel: KernelSpec,
    pub mean: f64,
    pub log_noise: f64,
    pub net: Option<FeatureNet>,
    pub feature_mode: FeatureMode,
}

/// Kernel-space representation of a batch of inputs.
pub(crate) struct Mapped {
    pub feats: DMatrix<f64>,
    pub tape: Option<GradientTape>,
}

impl GpModel {
    pub fn raw(kernel: KernelSpec, log_noise: f64) -> Self {
        GpModel {
            kernel,
            mean: 0.0,
            log_noise,
            net: None,
            feature_mode: FeatureMode::RawInputs,
        }
    }

    pub fn net_features(kernel: KernelSpec, net: FeatureNet, log_noise: f64) -> Self {
        GpModel {
            kernel: kernel.base(),
            mean: 0.0,
            log_noise,
            net: Some(net),
            feature_mode: FeatureMode::NetFeatures,
        }
    }

    pub fn warped(kernel: KernelSpec, net: FeatureNet, log_outscale: f64, log_noise: f64) -> Self {
        let kernel = kernel.base().with_warp(&net.id, log_outscale);
        GpModel {
            kernel,
            mean: 0.0,
            log_noise,
            net: Some(net),
            feature_mode: FeatureMode::WarpedKernel,
        }
    }

    pub fn noise_var(&self) -> f64 {
        self.log_noise.exp()
    }

    pub fn uses_net(&self) -> bool {
        self.feature_mode != FeatureMode::RawInputs
    }

    pub fn validate(&self) -> Result<()> {
        self.kernel.validate()?;
        let nv = self.noise_var();
        if !self.log_noise.is_finite() || !(nv > 0.0) || !nv.is_finite() {
            return Err(Error::InvalidHyperparameter("noise variance must be positive".into()));
        }
        if !self.mean.is_finite() {
            return Err(Error::InvalidHyperparameter("mean must be finite".into()));
        }
        match self.feature_mode {
            FeatureMode::RawInputs if self.kernel.warp.is_some() => Err(Error::InvalidConfig(
                "raw-input models cannot carry a warp".into(),
            )),
            FeatureMode::NetFeatures if self.net.is_none() => {
                Err(Error::InvalidConfig("net-feature model needs a network".into()))
            }
            FeatureMode::NetFeatures if self.kernel.warp.is_some() => Err(Error::InvalidConfig(
                "net-feature model applies the network outside the kernel; use WarpedKernel".into(),
            )),
            FeatureMode::WarpedKernel => match (&self.net, &self.kernel.warp) {
                (Some(n), Some(w)) if n.id == w.net_ref => Ok(()),
                _ => Err(Error::InvalidConfig(
                    "warped model needs a network matching the kernel's warp".into(),
                )),
            },
            _ => Ok(()),
        }
    }

    /// Dimension of the space the base kernel sees.
    pub fn feature_dim(&self, input_dim: usize) -> usize {
        match (&self.net, self.uses_net()) {
            (Some(n), true) => n.output_dim(),
            _ => input_dim,
        }
    }

    pub(crate) fn map(&self, x: &DMatrix<f64>, keep_tape: bool) -> Result<Mapped> {
        if self.uses_net() {
            let net = self.net.as_ref().expect("validated");
            let (feats, tape) = net.forward(x)?;
            Ok(Mapped {
                feats,
                tape: keep_tape.then_some(tape),
            })
        } else {
            Ok(Mapped {
                feats: x.clone(),
                tape: None,
            })
        }
    }

    /// Kernel between already-mapped feature sets, including the warp scale.
    pub(crate) fn kern(&self, f1: &DMatrix<f64>, f2: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let k = self.kernel.base_matrix(f1, f2)?;
        Ok(if self.kernel.warp.is_some() {
            k * self.kernel.outscale()
        } else {
            k
        })
    }

    pub(crate) fn kern_diag(&self, f: &DMatrix<f64>) -> Result<DVector<f64>> {
        Ok(self.kernel.base_diag(f)? * self.kernel.outscale())
    }

    /// Prior covariance matrix `K(x1, x2)` (no noise).
    pub fn covariance(&self, x1: &DMatrix<f64>, x2: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.validate()?;
        let f1 = self.map(x1, false)?.feats;
        let f2 = self.map(x2, false)?.feats;
        self.kern(&f1, &f2)
    }

    /// Number of entries in [`GpModel::params`].
    pub fn num_params(&self) -> usize {
        self.kernel.num_trainable()
            + 2
            + if self.uses_net() {
                self.net.as_ref().map_or(0, FeatureNet::num_params)
            } else {
                0
            }
    }

    /// Trainable parameters: kernel log-parameters, warp log-scale (if any),
    /// log-noise, mean, then network weights (if used).
    pub fn params(&self) -> Vec<f64> {
        let mut p = self.kernel.log_params.clone();
        if let Some(w) = &self.kernel.warp {
            p.push(w.log_outscale);
        }
        p.push(self.log_noise);
        p.push(self.mean);
        if self.uses_net() {
            if let Some(n) = &self.net {
                p.extend(n.params_flat());
            }
        }
        p
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.num_params() {
            return Err(Error::LengthMismatch(p.len(), self.num_params()));
        }
        let nk = self.kernel.log_params.len();
        self.kernel.log_params.copy_from_slice(&p[..nk]);
        let mut at = nk;
        if let Some(w) = &mut self.kernel.warp {
            w.log_outscale = p[at];
            at += 1;
        }
        self.log_noise = p[at];
        self.mean = p[at + 1];
        at += 2;
        if self.uses_net() {
            if let Some(n) = &mut self.net {
                n.set_params_flat(&p[at..])?;
            }
        }
        Ok(())
    }

    /// Half the L2 penalty the network gradient carries, `½ λ ‖w‖²`.
    pub fn decay_penalty(&self) -> f64 {
        match (&self.net, self.uses_net()) {
            (Some(n), true) => 0.5 * n.l2_coeff * n.param_norm_sq(),
            _ => 0.0,
        }
    }
}

/// Gradients of the negative log marginal likelihood.
#[derive(Debug, Clone)]
pub struct NllGradients {
    pub nll: f64,
    /// Kernel log-parameters followed by the warp log-scale when present.
    pub kernel: Vec<f64>,
    pub log_noise: f64,
    pub mean: f64,
    /// Includes the network's L2 decay term.
    pub net: Option<NetGradients>,
}

impl NllGradients {
    /// Same layout as [`GpModel::params`].
    pub fn flat(&self) -> Vec<f64> {
        let mut g = self.kernel.clone();
        g.push(self.log_noise);
        g.push(self.mean);
        if let Some(n) = &self.net {
            g.extend(n.flat());
        }
        g
    }
}

fn check_xy(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<()> {
    if x.nrows() != y.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} inputs but {} targets",
            x.nrows(),
            y.len()
        )));
    }
    Ok(())
}

struct Factored {
    mapped: Mapped,
    kf: DMatrix<f64>,
    chol: CholFactor,
    alpha: DVector<f64>,
}

fn factor(model: &GpModel, x: &DMatrix<f64>, y: &DVector<f64>, keep_tape: bool) -> Result<Factored> {
    model.validate()?;
    check_xy(x, y)?;
    let mapped = model.map(x, keep_tape)?;
    let kf = model.kern(&mapped.feats, &mapped.feats)?;
    let mut ky = kf.clone();
    let nv = model.noise_var();
    for i in 0..ky.nrows() {
        ky[(i, i)] += nv;
    }
    let chol = chol_of(ky)?;
    let resid = y.add_scalar(-model.mean);
    let alpha = chol.solve_vec(&resid)?;
    Ok(Factored {
        mapped,
        kf,
        chol,
        alpha,
    })
}

/// `log N(y; μ₀, K + φ_n² I)` through a Cholesky factor.
pub fn log_marginal_likelihood(model: &GpModel, x: &DMatrix<f64>, y: &DVector<f64>) -> Result<f64> {
    if y.is_empty() {
        return Err(Error::EmptyData);
    }
    let f = factor(model, x, y, false)?;
    let resid = y.add_scalar(-model.mean);
    let n = y.len() as f64;
    Ok(-0.5 * resid.dot(&f.alpha) - 0.5 * f.chol.log_det() - 0.5 * n * LN_2PI)
}

/// Gradient of `−log p(y | X)` with respect to every trainable parameter.
pub fn nll_gradients(model: &GpModel, x: &DMatrix<f64>, y: &DVector<f64>) -> Result<NllGradients> {
    if y.is_empty() {
        return Err(Error::EmptyData);
    }
    let f = factor(model, x, y, true)?;
    let resid = y.add_scalar(-model.mean);
    let n = y.len() as f64;
    let nll = 0.5 * resid.dot(&f.alpha) + 0.5 * f.chol.log_det() + 0.5 * n * LN_2PI;

    // dNLL/dK_y = ½ (K_y⁻¹ − α αᵀ)
    let mut g = f.chol.inverse();
    g -= &f.alpha * f.alpha.transpose();
    g *= 0.5;

    let scale = model.kernel.outscale();
    let feats = &f.mapped.feats;
    let mut kernel: Vec<f64> = model
        .kernel
        .contract_hyper(feats, feats, &g)?
        .into_iter()
        .map(|v| v * scale)
        .collect();
    if model.kernel.warp.is_some() {
        kernel.push(g.component_mul(&f.kf).sum());
    }
    let log_noise = model.noise_var() * g.trace();
    let mean = -f.alpha.sum();
    let net = match (&f.mapped.tape, &model.net) {
        (Some(tape), Some(netw)) => {
            let (d1, d2) = model.kernel.contract_points(feats, feats, &g)?;
            let upstream = (d1 + d2) * scale;
            Some(netw.backward(tape, &upstream)?.0)
        }
        _ => None,
    };
    Ok(NllGradients {
        nll,
        kernel,
        log_noise,
        mean,
        net,
    })
}

/// Per-point predictive moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub mean: DVector<f64>,
    /// Variance of the latent function.
    pub latent_var: DVector<f64>,
    /// Latent variance plus observation noise.
    pub obs_var: DVector<f64>,
    /// How many latent variances were clamped up to zero.
    pub clamped: usize,
}

impl Prediction {
    pub(crate) fn from_parts(mean: DVector<f64>, mut latent: DVector<f64>, noise: f64) -> Self {
        let mut clamped = 0;
        for v in latent.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
                clamped += 1;
            }
        }
        let obs_var = latent.add_scalar(noise);
        Prediction {
            mean,
            latent_var: latent,
            obs_var,
            clamped,
        }
    }
}

/// A GP conditioned on training data.
#[derive(Debug, Clone)]
pub struct FittedGp {
    pub model: GpModel,
    pub x_train: DMatrix<f64>,
    pub y_train: DVector<f64>,
    feats: DMatrix<f64>,
    chol: Option<CholFactor>,
    alpha: DVector<f64>,
}

impl FittedGp {
    pub fn fit(model: GpModel, x: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        model.validate()?;
        check_xy(&x, &y)?;
        if y.is_empty() {
            let feats = DMatrix::zeros(0, x.ncols());
            return Ok(FittedGp {
                model,
                x_train: x,
                y_train: y,
                feats,
                chol: None,
                alpha: DVector::zeros(0),
            });
        }
        let f = factor(&model, &x, &y, false)?;
        Ok(FittedGp {
            model,
            x_train: x,
            y_train: y,
            feats: f.mapped.feats,
            chol: Some(f.chol),
            alpha: f.alpha,
        })
    }

    pub fn chol(&self) -> Option<&CholFactor> {
        self.chol.as_ref()
    }

    pub fn alpha(&self) -> &DVector<f64> {
        &self.alpha
    }

    pub(crate) fn train_feats(&self) -> &DMatrix<f64> {
        &self.feats
    }
}

/// Posterior predictive mean and variances at `x_star`.
pub fn posterior_predict(fit: &FittedGp, x_star: &DMatrix<f64>) -> Result<Prediction> {
    let model = &fit.model;
    if fit.x_train.nrows() > 0 && x_star.ncols() != fit.x_train.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "model trained on {}-D inputs, queried with {}-D",
            fit.x_train.ncols(),
            x_star.ncols()
        )));
    }
    let fs = model.map(x_star, false)?.feats;
    let prior = model.kern_diag(&fs)?;
    let Some(chol) = &fit.chol else {
        let mean = DVector::from_element(x_star.nrows(), model.mean);
        return Ok(Prediction::from_parts(mean, prior, model.noise_var()));
    };
    let ks = model.kern(&fit.feats, &fs)?;
    let mean = (ks.transpose() * &fit.alpha).add_scalar(model.mean);
    let v = chol.solve_lower(&ks)?;
    let reduction = DVector::from_iterator(v.ncols(), v.column_iter().map(|c| c.norm_squared()));
    Ok(Prediction::from_parts(mean, prior - reduction, model.noise_var()))
}

/// Seeded row subset, order preserved.
pub(crate) fn subsample_rows(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    limit: usize,
    seed: u64,
) -> (DMatrix<f64>, DVector<f64>) {
    if x.nrows() <= limit {
        return (x.clone(), y.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, x.nrows(), limit).into_vec();
    idx.sort_unstable();
    (x.select_rows(idx.iter()), y.select_rows(idx.iter()))
}

/// Fits all trainable parameters by ADAM on the negative log marginal likelihood.
///
/// The loss trace reports the pure NLL; the network's L2 decay only enters the
/// gradient. With `opt.subsample = Some(m)` the objective uses a seeded subset
/// of at most `m` rows.
pub fn train(
    model: &GpModel,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    opt: &OptimizerConfig,
) -> Result<(GpModel, Vec<f64>)> {
    model.validate()?;
    check_xy(x, y)?;
    let (xs, ys) = match opt.subsample {
        Some(m) => subsample_rows(x, y, m, opt.seed),
        None => (x.clone(), y.clone()),
    };
    let mut work = model.clone();
    let (best, trace) = adam_minimize(model.params(), opt, |p| {
        work.set_params(p)?;
        let g = nll_gradients(&work, &xs, &ys)?;
        Ok((g.nll, g.flat()))
    })?;
    let mut fitted = model.clone();
    fitted.set_params(&best)?;
    fitted.validate()?;
    Ok((fitted, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::eval_kernel;
    use crate::net::init_net;
    use rand::Rng;

    fn data(n: usize, d: usize, seed: u64) -> (DMatrix<f64>, DVector<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, d, |_, _| rng.gen_range(-2.0..2.0));
        let y = DVector::from_fn(n, |i, _| f64::sin(x.row(i).sum()) + rng.gen_range(-0.1f64..0.1));
        (x, y)
    }

    /// Dense-inverse Gaussian log density.
    fn brute_lml(model: &GpModel, x: &DMatrix<f64>, y: &DVector<f64>) -> f64 {
        let mut k = eval_kernel(&model.kernel, model.net.as_ref(), x, x).unwrap();
        if model.feature_mode == FeatureMode::NetFeatures {
            let f = model.net.as_ref().unwrap().features(x).unwrap();
            k = model.kernel.base_matrix(&f, &f).unwrap();
        }
        for i in 0..k.nrows() {
            k[(i, i)] += model.noise_var();
        }
        let r = y.add_scalar(-model.mean);
        let inv = k.clone().try_inverse().unwrap();
        let det = k.determinant();
        -0.5 * (r.transpose() * inv * &r)[(0, 0)] - 0.5 * det.ln() - 0.5 * y.len() as f64 * LN_2PI
    }

    #[test]
    fn single_point_lml_is_gaussian_density() {
        let model = GpModel::raw(KernelSpec::rbf(1.7, 0.5), 0.3f64.ln());
        let x = DMatrix::from_row_slice(1, 1, &[0.4]);
        let y = DVector::from_vec(vec![1.1]);
        let var: f64 = 1.7 + 0.3;
        let expected = -0.5 * (2.0 * std::f64::consts::PI * var).ln() - 1.1f64.powi(2) / (2.0 * var);
        let got = log_marginal_likelihood(&model, &x, &y).unwrap();
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn zero_residual_leaves_only_log_det() {
        let mut model = GpModel::raw(KernelSpec::rbf(1.0, 1.0), 0.1f64.ln());
        model.mean = 0.7;
        let x = DMatrix::from_row_slice(2, 1, &[0.0, 0.5]);
        let y = DVector::from_element(2, 0.7);
        let mut k = model.covariance(&x, &x).unwrap();
        for i in 0..2 {
            k[(i, i)] += 0.1;
        }
        let expected = -0.5 * (k * 2.0 * std::f64::consts::PI).determinant().ln();
        assert!((log_marginal_likelihood(&model, &x, &y).unwrap() - expected).abs() < 1e-12);
        let g = nll_gradients(&model, &x, &y).unwrap();
        assert!(g.mean.abs() < 1e-14);
    }

    #[test]
    fn lml_matches_brute_force_and_is_permutation_invariant() {
        for seed in 0..5 {
            let (x, y) = data(6, 2, seed);
            let model = GpModel::raw(KernelSpec::rational_quadratic(1.2, 0.8, 2.0), -1.5);
            let lml = log_marginal_likelihood(&model, &x, &y).unwrap();
            assert!((lml - brute_lml(&model, &x, &y)).abs() < 1e-8);
            let perm = [5, 2, 0, 4, 1, 3];
            let xp = x.select_rows(perm.iter());
            let yp = y.select_rows(perm.iter());
            assert!((lml - log_marginal_likelihood(&model, &xp, &yp).unwrap()).abs() < 1e-10);
        }
    }

    #[test]
    fn noise_gradient_single_point() {
        // NLL = ½ log 2π(s+σ²) + y²/(2(s+σ²)); d/dlogσ² = σ²(1/(2v) − y²/(2v²))
        let model = GpModel::raw(KernelSpec::rbf(0.8, 1.0), 0.2f64.ln());
        let x = DMatrix::from_row_slice(1, 1, &[0.0]);
        let y = DVector::from_vec(vec![1.3]);
        let v: f64 = 1.0;
        let expected = 0.2 * (1.0 / (2.0 * v) - 1.69 / (2.0 * v * v));
        let g = nll_gradients(&model, &x, &y).unwrap();
        assert!((g.log_noise - expected).abs() < 1e-12);
    }

    fn fd_check(model: &GpModel, x: &DMatrix<f64>, y: &DVector<f64>) {
        let g = nll_gradients(model, x, y).unwrap().flat();
        let p0 = model.params();
        let h = 1e-5;
        let mut m = model.clone();
        for k in 0..p0.len() {
            let mut p = p0.clone();
            p[k] += h;
            m.set_params(&p).unwrap();
            let fp = -log_marginal_likelihood(&m, x, y).unwrap();
            p[k] -= 2.0 * h;
            m.set_params(&p).unwrap();
            let fm = -log_marginal_likelihood(&m, x, y).unwrap();
            let fd = (fp - fm) / (2.0 * h);
            assert!(
                (fd - g[k]).abs() <= 1e-4 * fd.abs().max(g[k].abs()).max(1e-2),
                "param {k}: fd {fd} vs analytic {}",
                g[k]
            );
        }
    }

    #[test]
    fn gradients_match_finite_differences_in_all_modes() {
        let (x, y) = data(15, 3, 4);
        let mut net = init_net(3, 1);
        net.l2_coeff = 0.0;
        fd_check(&GpModel::raw(KernelSpec::rational_quadratic(1.0, 2.0, 1.5), -1.0), &x, &y);
        fd_check(&GpModel::net_features(KernelSpec::rbf(1.0, 1.0), net.clone(), -1.0), &x, &y);
        let mut warped = GpModel::warped(KernelSpec::rational_quadratic(1.0, 1.0, 2.0), net, 0.3, -1.0);
        warped.mean = 0.2;
        fd_check(&warped, &x, &y);
    }

    #[test]
    fn decay_is_added_to_network_gradient() {
        let (x, y) = data(8, 2, 9);
        let mut net = init_net(2, 1);
        net.l2_coeff = 0.0;
        let plain = GpModel::net_features(KernelSpec::rbf(1.0, 1.0), net.clone(), -1.0);
        net.l2_coeff = 0.5;
        let decayed = GpModel::net_features(KernelSpec::rbf(1.0, 1.0), net.clone(), -1.0);
        let a = nll_gradients(&plain, &x, &y).unwrap().net.unwrap().flat();
        let b = nll_gradients(&decayed, &x, &y).unwrap().net.unwrap().flat();
        for ((ga, gb), w) in a.iter().zip(&b).zip(net.params_flat()) {
            assert!((gb - ga - 0.5 * w).abs() < 1e-10);
        }
    }

    #[test]
    fn posterior_matches_dense_formulas() {
        for seed in 0..10 {
            let (x, y) = data(7, 2, 20 + seed);
            let mut model = GpModel::raw(KernelSpec::rbf(1.3, 0.7), -2.0);
            model.mean = 0.1;
            let (xs, _) = data(5, 2, 40 + seed);
            let fit = FittedGp::fit(model.clone(), x.clone(), y.clone()).unwrap();
            let p = posterior_predict(&fit, &xs).unwrap();
            let mut k = model.covariance(&x, &x).unwrap();
            for i in 0..7 {
                k[(i, i)] += model.noise_var();
            }
            let inv = k.try_inverse().unwrap();
            let ks = model.covariance(&x, &xs).unwrap();
            let kss = model.covariance(&xs, &xs).unwrap();
            let mean = (ks.transpose() * &inv * y.add_scalar(-0.1)).add_scalar(0.1);
            let cov = kss - ks.transpose() * &inv * &ks;
            for i in 0..5 {
                assert!((mean[i] - p.mean[i]).abs() < 1e-8);
                assert!((cov[(i, i)] - p.latent_var[i]).abs() < 1e-8);
                assert!((p.obs_var[i] - p.latent_var[i] - model.noise_var()).abs() < 1e-12);
                assert!(p.latent_var[i] <= 1.3 + 1e-10);
            }
        }
    }

    #[test]
    fn prior_fallback_and_interpolation() {
        let model = GpModel::raw(KernelSpec::rbf(2.0, 1.0), -1.0);
        let fit = FittedGp::fit(model, DMatrix::zeros(0, 1), DVector::zeros(0)).unwrap();
        let p = posterior_predict(&fit, &DMatrix::from_row_slice(2, 1, &[0.0, 3.0])).unwrap();
        assert_eq!(p.mean, DVector::zeros(2));
        assert!((p.latent_var[0] - 2.0).abs() < 1e-15);

        let model = GpModel::raw(KernelSpec::rbf(1.0, 1.0), (1e-12f64).ln());
        let x = DMatrix::from_row_slice(1, 1, &[0.5]);
        let fit = FittedGp::fit(model, x.clone(), DVector::from_vec(vec![2.0])).unwrap();
        let p = posterior_predict(&fit, &x).unwrap();
        assert!((p.mean[0] - 2.0).abs() < 1e-9);
        assert!(p.latent_var[0] < 1e-9);
    }

    #[test]
    fn single_point_closed_form_mean() {
        let model = GpModel::raw(KernelSpec::rbf(1.5, 0.8), 0.4f64.ln());
        let x = DMatrix::from_row_slice(1, 1, &[0.0]);
        let xs = DMatrix::from_row_slice(1, 1, &[0.6]);
        let fit = FittedGp::fit(model, x, DVector::from_vec(vec![1.2])).unwrap();
        let k = 1.5 * (-0.36f64 / 1.6).exp();
        let expected = k / (1.5 + 0.4) * 1.2;
        assert!((posterior_predict(&fit, &xs).unwrap().mean[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn zero_iterations_and_finite_trace() {
        let (x, y) = data(20, 1, 3);
        let model = GpModel::raw(KernelSpec::rbf(1.0, 1.0), -1.0);
        let opt = OptimizerConfig {
            iterations: 0,
            ..Default::default()
        };
        let (m, t) = train(&model, &x, &y, &opt).unwrap();
        assert_eq!(m, model);
        assert!(t.is_empty());
        let opt = OptimizerConfig {
            iterations: 50,
            ..Default::default()
        };
        let (m, t) = train(&model, &x, &y, &opt).unwrap();
        assert_eq!(t.len(), 50);
        assert!(t.iter().all(|v| v.is_finite()));
        assert!(-log_marginal_likelihood(&m, &x, &y).unwrap() <= t[0]);
    }
}
