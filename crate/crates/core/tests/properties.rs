use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use neurogp::data::{fit_preprocessor, simulate_cohort, SimConfig, Target};
use neurogp::eval::{assign_folds, icc31};
use neurogp::gp::{log_marginal_likelihood, posterior_predict, FittedGp, GpModel};
use neurogp::kernels::{eval_kernel, KernelSpec};
use neurogp::net::{init_net, FeatureNet};
use neurogp::numerics::{cholesky_psd, solve_chol, SymMatrix};
use neurogp::ppl::{replay, run_forward, Dist, Runtime};
use neurogp::sparse::{elbo, select_inducing, InitStrategy};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-2.0f64..2.0, rows * cols).prop_map(move |v| DMatrix::from_row_slice(rows, cols, &v))
}

fn data(max_n: usize, d: usize) -> impl Strategy<Value = (DMatrix<f64>, DVector<f64>)> {
    (2..=max_n).prop_flat_map(move |n| (matrix(n, d), prop::collection::vec(-2.0f64..2.0, n).prop_map(DVector::from_vec)))
}

fn psd(n: usize) -> impl Strategy<Value = DMatrix<f64>> {
    matrix(n, n).prop_map(move |a| &a * a.transpose() + DMatrix::identity(n, n) * 0.1)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cholesky_solves_and_log_dets(m in (2usize..=6).prop_flat_map(psd)) {
        let n = m.nrows();
        let l = cholesky_psd(&SymMatrix::new(m.clone()).unwrap(), 0).unwrap();
        let inv_m = solve_chol(&l, &m).unwrap();
        prop_assert!((inv_m - DMatrix::identity(n, n)).amax() < 1e-6);
        let det = m.determinant();
        prop_assert!((l.log_det() - det.ln()).abs() <= 1e-8 * det.ln().abs().max(1.0));
    }

    #[test]
    fn kernel_matrices_are_psd(
        x in (1usize..12).prop_flat_map(|n| matrix(n, 3)),
        var in 0.1f64..5.0,
        len_sq in 0.05f64..10.0,
        alpha in 0.1f64..20.0,
    ) {
        for spec in [KernelSpec::rbf(var, len_sq), KernelSpec::rational_quadratic(var, len_sq, alpha)] {
            let mut k = eval_kernel(&spec, None, &x, &x).unwrap();
            for i in 0..k.nrows() {
                k[(i, i)] += 1e-8;
            }
            prop_assert!(cholesky_psd(&SymMatrix::new(k).unwrap(), 0).is_ok());
        }
    }

    #[test]
    fn huge_alpha_recovers_rbf(x in matrix(6, 2), var in 0.1f64..3.0, len_sq in 0.1f64..5.0) {
        let rq = eval_kernel(&KernelSpec::rational_quadratic(var, len_sq, 1e6), None, &x, &x).unwrap();
        let rbf = eval_kernel(&KernelSpec::rbf(var, len_sq), None, &x, &x).unwrap();
        prop_assert!((rq - rbf).amax() < 1e-4);
    }

    #[test]
    fn identity_warp_is_the_base_kernel(x in matrix(5, 2), y in matrix(4, 2)) {
        let base = KernelSpec::rbf(1.3, 0.7);
        let net = FeatureNet::identity(2);
        let warped = base.clone().with_warp(&net.id, 0.0);
        prop_assert_eq!(eval_kernel(&warped, Some(&net), &x, &y).unwrap(), eval_kernel(&base, None, &x, &y).unwrap());
    }

    #[test]
    fn network_is_batch_permutation_equivariant(x in matrix(7, 4), seed in 0u64..1000, shift in 1usize..7) {
        let net = init_net(4, seed);
        let perm: Vec<usize> = (0..7).map(|i| (i + shift) % 7).collect();
        let xp = x.select_rows(&perm);
        let (f, _) = net.forward(&x).unwrap();
        let (fp, _) = net.forward(&xp).unwrap();
        prop_assert_eq!(f.select_rows(&perm), fp);
    }

    #[test]
    fn posterior_agrees_with_dense_inverse((x, y) in data(8, 2), xs in matrix(3, 2), log_noise in -4.0f64..0.0) {
        let mut model = GpModel::raw(KernelSpec::rbf(1.2, 0.9), log_noise);
        model.mean = 0.3;
        let n = x.nrows();
        let fit = FittedGp::fit(model.clone(), x.clone(), y.clone()).unwrap();
        let p = posterior_predict(&fit, &xs).unwrap();
        let mut k = model.covariance(&x, &x).unwrap();
        for i in 0..n {
            k[(i, i)] += model.noise_var();
        }
        let inv = k.clone().try_inverse().unwrap();
        let ks = model.covariance(&x, &xs).unwrap();
        let kss = model.covariance(&xs, &xs).unwrap();
        let mean = (ks.transpose() * &inv * y.add_scalar(-0.3)).add_scalar(0.3);
        let cov = &kss - ks.transpose() * &inv * &ks;
        let r = y.add_scalar(-0.3);
        let lml = -0.5 * r.dot(&(&inv * &r)) - 0.5 * k.determinant().ln() - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
        for i in 0..3 {
            prop_assert!((mean[i] - p.mean[i]).abs() < 1e-8);
            prop_assert!((cov[(i, i)] - p.latent_var[i]).abs() < 1e-8);
            prop_assert!(p.latent_var[i] <= kss[(i, i)] + 1e-10);
        }
        prop_assert!((lml - log_marginal_likelihood(&model, &x, &y).unwrap()).abs() < 1e-8);
    }

    #[test]
    fn lml_ignores_point_order((x, y) in data(10, 2), shift in 1usize..10) {
        let n = x.nrows();
        let perm: Vec<usize> = (0..n).map(|i| (i + shift) % n).collect();
        let model = GpModel::raw(KernelSpec::rational_quadratic(1.0, 1.5, 2.0), -1.5);
        let a = log_marginal_likelihood(&model, &x, &y).unwrap();
        let b = log_marginal_likelihood(&model, &x.select_rows(&perm), &DVector::from_fn(n, |i, _| y[perm[i]])).unwrap();
        prop_assert!((a - b).abs() < 1e-9 * a.abs().max(1.0));
    }

    #[test]
    fn bound_never_exceeds_evidence((x, y) in data(15, 2), m in 1usize..15, seed in 0u64..100) {
        let model = GpModel::raw(KernelSpec::rbf(1.0, 0.8), -1.0);
        let z = select_inducing(&x, m.min(x.nrows()), InitStrategy::SubsetOfData, seed).unwrap();
        prop_assert!(elbo(&model, &z, &x, &y).unwrap() <= log_marginal_likelihood(&model, &x, &y).unwrap() + 1e-8);
    }

    #[test]
    fn folds_partition_patients(n in 1usize..200, k in 2usize..12, seed in any::<u64>()) {
        let ids: Vec<String> = (0..n).map(|i| format!("P{i}")).collect();
        let folds = assign_folds(&ids, k, seed);
        prop_assert_eq!(folds.len(), k);
        let mut all: Vec<String> = folds.concat();
        all.sort();
        let mut want = ids.clone();
        want.sort();
        prop_assert_eq!(all, want);
        let sizes: Vec<usize> = folds.iter().map(Vec::len).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }

    #[test]
    fn icc_is_invariant_to_shared_positive_affine_maps(
        pairs in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 3..40),
        scale in 0.01f64..100.0,
        shift in -50.0f64..50.0,
    ) {
        let (p, t): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let a = icc31(&p, &t);
        let map = |v: &[f64]| v.iter().map(|x| scale * x + shift).collect::<Vec<_>>();
        let b = icc31(&map(&p), &map(&t));
        if let (Ok(a), Ok(b)) = (a, b) {
            prop_assert!((a - b).abs() < 1e-8);
            prop_assert!((-1.0..=1.0).contains(&a));
        }
    }

    #[test]
    fn full_pca_reconstructs(x in (3usize..20).prop_flat_map(|n| matrix(n, 4))) {
        let p = fit_preprocessor(&x, 1.0).unwrap();
        let back = p.inverse_transform(&p.transform(&x).unwrap()).unwrap();
        let rel = (&back - &x).norm() / x.norm().max(1e-12);
        prop_assert!(rel < 1e-8, "{}", rel);
    }

    #[test]
    fn replay_reproduces_forward_log_prob(seed in any::<u64>(), y0 in -3.0f64..3.0, sites in 1usize..6) {
        let program = move |rt: &mut Runtime<'_>| {
            let mut prev = 0.0;
            for i in 0..sites {
                prev = rt.sample(format!("x{i}"), Dist::normal(prev, 1.0))?;
            }
            let u = rt.sample("u", Dist::uniform(-1.0, 2.0))?;
            rt.observe("y", Dist::normal(prev + u, 0.5), y0)
        };
        let t = run_forward(&program, seed).unwrap();
        let obs = t.observations.iter().map(|(k, c)| (k.clone(), c.value)).collect();
        let r = replay(&program, &t.values(), Some(&obs)).unwrap();
        prop_assert!((t.total_log_prob - r.total_log_prob).abs() < 1e-12);
        prop_assert_eq!(t.values(), r.values());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn simulated_scores_stay_in_range(seed in any::<u64>(), n in 1usize..60) {
        let c = simulate_cohort(&SimConfig { n_patients: n, ..Default::default() }, seed).unwrap();
        prop_assert!(c.validate().is_ok());
        for p in &c.patients {
            for v in &p.visits {
                for t in Target::ALL {
                    if let Some(s) = v.scores.get(t) {
                        let (lo, hi) = t.range();
                        prop_assert!(s >= lo && s <= hi);
                    }
                }
            }
        }
    }
}
