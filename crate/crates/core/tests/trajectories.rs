use indexmap::IndexMap;
use neurogp::data::{
    make_supervised_pairs, simulate_cohort, Cohort, SimConfig, Target, DEFAULT_HORIZON, DEFAULT_MATCH_TOL, DEFAULT_VARIANCE_FRACTION,
};
use neurogp::gp::FeatureMode;
use neurogp::kernels::KernelFamily;
use neurogp::models::{train_on_pairs, FittedCohort, ModelSpec};
use neurogp::optim::OptimizerConfig;
use neurogp::ppl::{
    function_address, grid_inputs, noise_address, replay, run_forward, simulate_trajectories, uncertainty_decompose, NeuroProgram,
};
use neurogp::Error;

fn raw_spec(iterations: usize, init_noise_var: f64) -> ModelSpec {
    ModelSpec {
        name: "raw".into(),
        feature_mode: FeatureMode::RawInputs,
        time_passthrough: false,
        kernel: KernelFamily::Rbf,
        sparse: None,
        monotonic: None,
        optimizer: OptimizerConfig { iterations, step_size: 0.05, ..Default::default() },
        init_length_sq: 4.0,
        init_noise_var,
        ..ModelSpec::exact_gp()
    }
}

fn fitted(n_patients: usize, spec: &ModelSpec) -> (Cohort, FittedCohort) {
    let cohort = simulate_cohort(&SimConfig { n_patients, ..Default::default() }, 21).unwrap();
    let pairs = make_supervised_pairs(&cohort, DEFAULT_HORIZON, DEFAULT_MATCH_TOL).unwrap();
    let model = train_on_pairs(spec, &pairs, cohort.k(), DEFAULT_HORIZON, DEFAULT_VARIANCE_FRACTION, &Target::ALL, 4).unwrap();
    let fit = model.fit().unwrap();
    (cohort, fit)
}

/// Grid times `s` whose history point `s - τ` is one of the patient's visits.
fn training_grid(cohort: &Cohort, id: &str) -> Vec<f64> {
    let pairs = make_supervised_pairs(cohort, DEFAULT_HORIZON, DEFAULT_MATCH_TOL).unwrap();
    pairs.iter().filter(|p| p.patient_id == id).map(|p| p.base_time + DEFAULT_HORIZON).collect()
}

#[test]
fn pinned_program_reproduces_posterior_means() {
    let (cohort, fit) = fitted(40, &raw_spec(20, 0.1));
    let patient = &cohort.patients[0];
    let grid = training_grid(&cohort, &patient.patient_id);
    assert!(grid.len() >= 2);
    let x = grid_inputs(&fit.pipeline, patient, fit.horizon, &grid).unwrap();
    for joint in [false, true] {
        let program = NeuroProgram::new(&fit.targets, &fit.pipeline, patient, fit.horizon, &grid, joint).unwrap();
        let mut pins = IndexMap::new();
        for m in &fit.targets {
            let mean = m.predict(&x).unwrap().mean;
            for i in 0..grid.len() {
                pins.insert(function_address(m.target, i), mean[i]);
                pins.insert(noise_address(m.target, i), 0.0);
            }
        }
        let trace = replay(&program, &pins, None).unwrap();
        for (m, (f, e)) in fit.targets.iter().zip(program.components(&trace).unwrap()) {
            let mean = m.predict(&x).unwrap().mean;
            assert!((f + e - mean).amax() < 1e-12);
        }
    }
}

#[test]
fn trace_has_two_sites_per_grid_point_and_target() {
    let (cohort, fit) = fitted(40, &raw_spec(5, 0.1));
    let grid = [30.0, 36.0, 42.0, 48.0];
    let program = NeuroProgram::new(&fit.targets, &fit.pipeline, &cohort.patients[3], fit.horizon, &grid, false).unwrap();
    let trace = run_forward(&program, 9).unwrap();
    assert_eq!(trace.choices.len(), 2 * grid.len() * 3);
    assert!(trace.observations.is_empty());
}

#[test]
fn sample_means_match_the_posterior() {
    let (cohort, fit) = fitted(40, &raw_spec(20, 0.1));
    let patient = &cohort.patients[5];
    let grid = [24.0, 36.0, 48.0];
    let x = grid_inputs(&fit.pipeline, patient, fit.horizon, &grid).unwrap();
    let program = NeuroProgram::new(&fit.targets, &fit.pipeline, patient, fit.horizon, &grid, false).unwrap();
    let n = 5000;
    let ens = simulate_trajectories(&program, n, 17).unwrap();
    assert_eq!(ens, simulate_trajectories(&program, n, 17).unwrap());
    for (t, m) in fit.targets.iter().enumerate() {
        let pred = m.predict(&x).unwrap();
        let values = ens.values(t);
        for g in 0..grid.len() {
            let sample_mean = values.column(g).mean();
            let se = (pred.obs_var[g] / n as f64).sqrt();
            assert!((sample_mean - pred.mean[g]).abs() < 3.0 * se, "{:?} at {}: {sample_mean} vs {}", m.target, grid[g], pred.mean[g]);
        }
    }
}

#[test]
fn variance_decomposition_adds_up() {
    let (cohort, fit) = fitted(40, &raw_spec(20, 0.1));
    let grid = [30.0, 60.0];
    let program = NeuroProgram::new(&fit.targets, &fit.pipeline, &cohort.patients[7], fit.horizon, &grid, true).unwrap();
    let ens = simulate_trajectories(&program, 10_000, 2).unwrap();
    for split in uncertainty_decompose(&ens).unwrap() {
        for g in 0..grid.len() {
            let sum = split.aleatoric[g] + split.epistemic[g];
            assert!((sum - split.total[g]).abs() <= 0.05 * split.total[g], "{:?}: {sum} vs {}", split.target, split.total[g]);
        }
    }
}

#[test]
fn ensemble_widens_with_horizon() {
    let (cohort, fit) = fitted(60, &raw_spec(30, 0.1));
    for patient in cohort.patients.iter().take(10) {
        let last = patient.visits.last().unwrap().time_months;
        let grid = [last + 12.0, last + 24.0, last + 48.0];
        let program = NeuroProgram::new(&fit.targets, &fit.pipeline, patient, fit.horizon, &grid, false).unwrap();
        let ens = simulate_trajectories(&program, 4000, 5).unwrap();
        for split in uncertainty_decompose(&ens).unwrap() {
            assert!(split.total[0] < split.total[1], "{} {:?}: {:?}", patient.patient_id, split.target, split.total);
            assert!(split.total[0] < split.total[2], "{} {:?}: {:?}", patient.patient_id, split.target, split.total);
        }
    }
}

#[test]
fn noiseless_model_has_no_aleatoric_spread() {
    let (cohort, fit) = fitted(30, &raw_spec(0, 1e-12));
    let patient = &cohort.patients[2];
    let grid = training_grid(&cohort, &patient.patient_id);
    let program = NeuroProgram::new(&fit.targets, &fit.pipeline, patient, fit.horizon, &grid, false).unwrap();
    let ens = simulate_trajectories(&program, 200, 1).unwrap();
    let x = grid_inputs(&fit.pipeline, patient, fit.horizon, &grid).unwrap();
    for (split, m) in uncertainty_decompose(&ens).unwrap().iter().zip(&fit.targets) {
        let prior = m.model().kernel.outscale() * m.y_sd * m.y_sd;
        assert!(split.aleatoric.iter().all(|v| *v < 1e-9 * prior));
        // The training inputs are interpolated.
        let pred = m.predict(&x).unwrap();
        assert!(pred.latent_var.iter().all(|v| *v < 1e-4 * prior), "{:?}", pred.latent_var);
        assert!(split.epistemic.iter().all(|v| *v < 1e-3 * prior));
    }
}

#[test]
fn single_sample_is_degenerate() {
    let (cohort, fit) = fitted(30, &raw_spec(0, 0.1));
    let program = NeuroProgram::new(&fit.targets, &fit.pipeline, &cohort.patients[0], fit.horizon, &[20.0, 30.0], false).unwrap();
    let ens = simulate_trajectories(&program, 1, 0).unwrap();
    assert_eq!(ens.n_samples(), 1);
    assert!(matches!(uncertainty_decompose(&ens), Err(Error::TooFewSamples(1))));
}
