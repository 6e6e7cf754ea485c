use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use sear_core::numerics::Rng;
use sear_core::toylab::*;

fn spec(sigma_r: f64, sigma_e: f64, eps: f64, seed: u64) -> ToyWorldSpec {
    ToyWorldSpec::new(sigma_r, sigma_e, eps, 64, 16, &mut Rng::new(seed)).unwrap()
}

fn fixed_state() -> ToyState {
    ToyState {
        agent: [0.2, 0.7],
        goal: [0.8, 0.3],
        obstacle: [0.5, 0.5],
        radius: 0.08,
    }
}

fn small_config() -> ToyConfig {
    ToyConfig {
        data_episodes: 60,
        eval_episodes: 4,
        candidates: 64,
        ..ToyConfig::default()
    }
}

/// Samples from varied states, as the random-action data would be.
fn dataset(spec: &ToyWorldSpec, n: usize, seed: u64) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
    let mut rng = Rng::new(seed);
    let (mut xs, mut xrs) = (Vec::new(), Vec::new());
    for _ in 0..n {
        let state = ToyState::sample(&mut rng).unwrap();
        let o = sample_observation(spec, &state, &mut rng);
        xs.push(o.x);
        xrs.push(o.x_r);
    }
    (xs, xrs)
}

fn columns(m: &DMatrix<f64>, start: usize, n: usize) -> DMatrix<f64> {
    m.columns(start, n).into_owned()
}

#[test]
fn noiseless_observation_is_the_projected_mean() {
    let s = spec(0.0, 0.0, 0.0, 1);
    let state = fixed_state();
    let o = sample_observation(&s, &state, &mut Rng::new(2));
    let want = &s.q * state.mean_latent();
    assert_eq!(o.x, want);
    assert_eq!(o.x_r, &s.q2 * state.mean_latent().rows(0, 2));
}

#[test]
fn projections_are_orthonormal() {
    let s = spec(0.1, 0.1, 0.05, 3);
    assert!((s.q.transpose() * &s.q - DMatrix::identity(7, 7)).amax() < 1e-10);
    assert!((s.q2.transpose() * &s.q2 - DMatrix::identity(2, 2)).amax() < 1e-10);
}

#[test]
fn invalid_spec_is_rejected() {
    let mut s = spec(0.1, 0.1, 0.05, 3);
    s.q[(0, 0)] += 0.1;
    assert!(matches!(s.validate(), Err(ToyError::Config(_))));
    assert!(ToyWorldSpec::new(-0.1, 0.1, 0.0, 64, 16, &mut Rng::new(0)).is_err());
}

/// Closed-form covariance `Q·diag(σ_R², σ_E²)·Qᵀ + ε²·I`.
fn closed_form_cov(s: &ToyWorldSpec) -> DMatrix<f64> {
    let d = DMatrix::from_diagonal(&DVector::from_fn(7, |i, _| {
        if i < 2 {
            s.sigma_r.powi(2)
        } else {
            s.sigma_e.powi(2)
        }
    }));
    &s.q * d * s.q.transpose() + DMatrix::identity(64, 64) * s.eps_scale.powi(2)
}

#[test]
fn sample_mean_matches_projected_mean() {
    let s = spec(0.3, 0.6, 0.2, 4);
    let state = fixed_state();
    let n = 100_000;
    let mut rng = Rng::new(5);
    let mut sum = DVector::zeros(64);
    for _ in 0..n {
        sum += sample_observation(&s, &state, &mut rng).x;
    }
    let mean = sum / n as f64;
    let want = &s.q * state.mean_latent();
    let cov = closed_form_cov(&s);
    for i in 0..64 {
        let se = (cov[(i, i)] / n as f64).sqrt();
        // 4σ per coordinate keeps the family-wise false-alarm rate near 0.4%.
        assert!(
            (mean[i] - want[i]).abs() < 4.0 * se,
            "coord {i}: {} vs {}",
            mean[i],
            want[i]
        );
    }
}

#[test]
fn sample_covariance_matches_closed_form() {
    let s = spec(0.3, 0.6, 0.2, 6);
    let state = fixed_state();
    let n = 20_000;
    let mut rng = Rng::new(7);
    let mu = &s.q * state.mean_latent();
    let mut acc = DMatrix::zeros(64, 64);
    for _ in 0..n {
        let d = sample_observation(&s, &state, &mut rng).x - &mu;
        acc += &d * d.transpose();
    }
    let emp = acc / n as f64;
    let cov = closed_form_cov(&s);
    for i in 0..64 {
        for j in 0..64 {
            // Var of a Gaussian sample covariance entry is (Σii·Σjj + Σij²)/n.
            let se = ((cov[(i, i)] * cov[(j, j)] + cov[(i, j)].powi(2)) / n as f64).sqrt();
            assert!((emp[(i, j)] - cov[(i, j)]).abs() < 5.0 * se, "({i},{j})");
        }
    }
}

proptest! {
    #[test]
    fn projection_preserves_norm(v in proptest::collection::vec(-10.0f64..10.0, 7), seed in 0u64..50) {
        let s = spec(0.1, 0.1, 0.0, seed);
        let v = DVector::from_vec(v);
        prop_assert!(((&s.q * &v).norm() - v.norm()).abs() <= 1e-10 * (1.0 + v.norm()));
    }
}

#[test]
fn noiseless_pca_recovers_the_projection_subspace() {
    let s = spec(0.0, 0.0, 0.0, 8);
    let (xs, xrs) = dataset(&s, 500, 9);
    let rec = fit_latents(&xs, &xrs, 7, RecoveryMode::Joint).unwrap();
    assert!(rec.recon_error < 1e-20, "recon error {}", rec.recon_error);
    let angles = principal_angles(&rec.components.transpose(), &s.q);
    assert!(angles.iter().all(|&a| a < 1e-6), "{angles:?}");
    assert!(rec.warnings.is_empty());
}

#[test]
fn rank_deficient_data_warns() {
    let s = spec(0.0, 0.0, 0.0, 8);
    let (xs, xrs) = dataset(&s, 500, 9);
    let rec = fit_latents(&xs, &xrs, 8, RecoveryMode::Joint).unwrap();
    assert_eq!(rec.warnings.len(), 1, "{:?}", rec.warnings);
}

#[test]
fn too_few_samples_is_an_error() {
    let s = spec(0.1, 0.1, 0.05, 8);
    let (xs, xrs) = dataset(&s, 50, 9);
    assert!(matches!(
        fit_latents(&xs, &xrs, 6, RecoveryMode::Joint),
        Err(ToyError::Config(_))
    ));
}

#[test]
fn joint_components_follow_the_noisier_environment() {
    let s = spec(0.05, 0.5, 0.05, 10);
    let (xs, xrs) = dataset(&s, 4000, 11);
    let rec = fit_latents(&xs, &xrs, 5, RecoveryMode::Joint).unwrap();
    let angles = principal_angles(&rec.components.transpose(), &columns(&s.q, 2, 5));
    assert!(angles.iter().all(|&a| a < 0.1), "{angles:?}");
}

#[test]
fn split_mode_recovers_the_agent_subspace() {
    let s = spec(0.05, 0.5, 0.05, 12);
    let (xs, xrs) = dataset(&s, 20_000, 13);
    let rec = fit_latents(&xs, &xrs, 6, RecoveryMode::Split).unwrap();
    let map = rec.agent_map.as_ref().unwrap();
    let angles = principal_angles(&map.transpose(), &columns(&s.q, 0, 2));
    assert!(angles.iter().all(|&a| a < 0.1), "{angles:?}");
    assert_eq!(rec.features(&xs[0], true).len(), 8);
    // The 6 joint components lose most of one agent direction.
    let joint = principal_angles(&rec.components.transpose(), &columns(&s.q, 0, 2));
    assert!(joint[1] > 0.5, "{joint:?}");
}

#[test]
fn constant_reward_is_predicted_exactly() {
    let mut rng = Rng::new(14);
    let fs: Vec<Vec<f64>> = (0..200).map(|_| (0..4).map(|_| rng.normal()).collect()).collect();
    let ys = vec![0.37; 200];
    let fit = fit_reward_model(&fs, &ys, RewardFlavor::Quadratic { ridge: 0.0 }, &mut rng).unwrap();
    assert!(fit.val_mse < 1e-24 && fit.train_mse < 1e-24);
    assert!((fit.model.predict(&[5.0, -3.0, 1.0, 0.0]) - 0.37).abs() < 1e-9);
}

#[test]
fn quadratic_flavor_recovers_a_quadratic_exactly() {
    let mut rng = Rng::new(15);
    let truth = |f: &[f64]| 0.5 - f[0] + 2.0 * f[1] + 0.3 * f[0] * f[0] - 1.5 * f[0] * f[2] + 0.7 * f[2] * f[2];
    let fs: Vec<Vec<f64>> = (0..300).map(|_| (0..3).map(|_| rng.normal()).collect()).collect();
    let ys: Vec<f64> = fs.iter().map(|f| truth(f)).collect();
    let fit = fit_reward_model(&fs, &ys, RewardFlavor::Quadratic { ridge: 0.0 }, &mut rng).unwrap();
    let RewardModel::Quadratic { coef, .. } = &fit.model else {
        panic!("wrong flavor")
    };
    // [1, f0, f1, f2, f0², f0f1, f0f2, f1², f1f2, f2²]
    let want = [0.5, -1.0, 2.0, 0.0, 0.3, 0.0, -1.5, 0.0, 0.0, 0.7];
    for (c, w) in coef.iter().zip(want) {
        assert!((c - w).abs() < 1e-9, "{coef}");
    }
    let (a, b) = fit.model.quadratic_spectra(2).unwrap();
    assert_eq!((a.len(), b.len()), (2, 1));
    assert!((b[0] - 0.7).abs() < 1e-9);
}

#[test]
fn mlp_flavor_trains_to_a_plateau() {
    let mut rng = Rng::new(16);
    let fs: Vec<Vec<f64>> = (0..300)
        .map(|_| (0..2).map(|_| rng.uniform_range(-1.0, 1.0)).collect())
        .collect();
    let ys: Vec<f64> = fs.iter().map(|f| (-(f[0] * f[0] + f[1] * f[1])).exp()).collect();
    let mean = ys.iter().sum::<f64>() / ys.len() as f64;
    let var = ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / ys.len() as f64;
    let fit = fit_reward_model(&fs, &ys, RewardFlavor::Mlp { hidden: 16 }, &mut rng).unwrap();
    assert!(fit.evaluations >= PLATEAU_EVALS);
    assert!(fit.val_mse < 0.1 * var, "val {} vs variance {var}", fit.val_mse);
    let p = fit.model.predict(&[0.1, 0.2]);
    assert_eq!(p, fit.model.predict(&[0.1, 0.2]));
}

#[test]
fn single_candidate_returns_its_first_action() {
    let mut probe = Rng::new(17);
    let want = [probe.uniform_range(-1.0, 1.0), probe.uniform_range(-1.0, 1.0)];
    let got = mpc_plan(|s: &f64| *s, |s: &mut f64, a| *s += a[0], &0.0, 5, 1, &mut Rng::new(17)).unwrap();
    assert_eq!(got, want);
}

#[test]
fn ties_go_to_the_lowest_candidate() {
    let mut probe = Rng::new(18);
    let want = [probe.uniform_range(-1.0, 1.0), probe.uniform_range(-1.0, 1.0)];
    let got = mpc_plan(|_: &f64| 1.0, |_: &mut f64, _| {}, &0.0, 3, 50, &mut Rng::new(18)).unwrap();
    assert_eq!(got, want);
}

#[test]
fn planner_is_deterministic_and_validates() {
    let plan = |seed| {
        mpc_plan(
            |s: &[f64; 2]| -s[0].abs(),
            |s, a| s[0] += a[0],
            &[0.5, 0.0],
            4,
            32,
            &mut Rng::new(seed),
        )
    };
    assert_eq!(plan(19).unwrap(), plan(19).unwrap());
    assert!(mpc_plan(|_: &f64| 0.0, |_, _| {}, &0.0, 0, 4, &mut Rng::new(0)).is_err());
    assert!(mpc_plan(|_: &f64| 0.0, |_, _| {}, &0.0, 4, 0, &mut Rng::new(0)).is_err());
}

#[test]
fn true_reward_planner_halves_the_random_goal_distance() {
    let cfg = ToyConfig::default();
    let s = spec(0.0, 0.0, 0.0, 20);
    let (mut planned, mut random) = (Vec::new(), Vec::new());
    for ep in 0..30 {
        let mut rng = Rng::new(21).split_index("ep", ep);
        let start = ToyState::sample(&mut rng).unwrap();
        let mut r1 = rng.clone();
        planned.push(
            run_episode(&cfg, &s, start, &mut rng, |_, state, r| {
                let step = |st: &mut ToyState, a| st.advance(a, cfg.step_size);
                mpc_plan(|st: &ToyState| st.reward(), step, state, cfg.horizon, cfg.candidates, r)
            })
            .unwrap(),
        );
        random.push(
            run_episode(&cfg, &s, start, &mut r1, |_, _, r| {
                Ok([r.uniform_range(-1.0, 1.0), r.uniform_range(-1.0, 1.0)])
            })
            .unwrap(),
        );
    }
    let (p, r) = (median(&planned), median(&random));
    assert!(p <= 0.5 * r, "planner {p} vs random {r}");
}

#[test]
fn seed_runs_are_deterministic() {
    let cfg = small_config();
    let a = run_seed(&cfg, &CONDITIONS[0], 3).unwrap();
    let b = run_seed(&cfg, &CONDITIONS[0], 3).unwrap();
    assert_eq!(a, b);
}

#[test]
fn without_noise_both_flavors_agree() {
    let cfg = ToyConfig {
        eps_scale: 0.0,
        ..small_config()
    };
    let cond = Condition {
        label: "noiseless",
        sigma_r: 0.0,
        sigma_e: 0.0,
    };
    let r = run_seed(&cfg, &cond, 4).unwrap();
    assert!((r.baseline - r.sear).abs() <= 0.05 * r.baseline.max(r.sear), "{r:?}");
}

#[test]
fn sear_reward_model_validates_better_under_environment_noise() {
    let cfg = small_config();
    let (mut base, mut sear) = (Vec::new(), Vec::new());
    for seed in 0..5 {
        let m = fit_models(&cfg, 0.05, 0.5, seed).unwrap();
        base.push(m.baseline.val_mse);
        sear.push(m.sear.val_mse);
    }
    assert!(median(&sear) <= median(&base), "{sear:?} vs {base:?}");
}

#[test]
fn table_needs_five_seeds_and_writes_files() {
    let cfg = ToyConfig {
        data_episodes: 30,
        eval_episodes: 1,
        candidates: 8,
        horizon: 2,
        ..ToyConfig::default()
    };
    assert!(matches!(run_table(&cfg, &[0, 1, 2, 3]), Err(ToyError::Config(_))));
    let table = run_table(&cfg, &[0, 1, 2, 3, 4]).unwrap();
    assert_eq!(table, run_table(&cfg, &[0, 1, 2, 3, 4]).unwrap());
    let dir = tempfile::tempdir().unwrap();
    table.write(dir.path()).unwrap();
    let text = std::fs::read_to_string(dir.path().join("table.txt")).unwrap();
    assert_eq!(text.lines().count(), 5);
    let json: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("table.json")).unwrap()).unwrap();
    assert_eq!(json["rows"].as_array().unwrap().len(), 3);
}
