use kolmo_chain::chain_model::{build_kolmogorov_chain, build_power_chain, HolderMatrix};
use kolmo_chain::flow_engine::integrate_backward_flow;
use kolmo_chain::mc_simulate::{
    empirical_density, euler_ensemble_with, BandwidthRule, Record, Scheme, SimOptions,
};
use kolmo_chain::parametrix::{build_proxy, compute_covariance, ProxyConfig};
use kolmo_chain::peano_lab::{
    delta, extreme_solution, iterated_bm_moment, noise_self_similarity, run_peano, sharpness_threshold,
    simulate_peano, survival_probability, threshold_sweep, PeanoConfig,
};
use kolmo_chain::quad::linspace;
use kolmo_chain::Exec;
use num_rational::Ratio;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn ensembles_match_across_exec_modes(seed in any::<u64>(), beta in 0.3f64..1.0) {
        let m = build_power_chain(2, 1, &HolderMatrix::uniform(2, beta), (2, 2), 1.0).unwrap();
        let run = |exec| {
            let opts = SimOptions { exec, ..SimOptions::default() };
            euler_ensemble_with(&m, &[0.1, -0.2], 0.0, 1.0, 20, 64, seed, Scheme::LinearizedEuler, &opts).unwrap()
        };
        let (a, b) = (run(Exec::Sequential), run(Exec::Parallel));
        prop_assert_eq!(a.states, b.states);
    }

    #[test]
    fn threshold_identity_is_exact(i in 2usize..=6, k in 0usize..=4) {
        let j = i + k;
        let th = sharpness_threshold(i, j).unwrap();
        let gamma = Ratio::new(2 * i as i64 - 1, 2);
        prop_assert_eq!(th.value, (gamma - 1) / (Ratio::from_integer(k as i64) + gamma));
        prop_assert_eq!(th.value, th.from_self_similarity);
    }

    #[test]
    fn delta_changes_sign_at_threshold(i in 2usize..=5, k in 0usize..=3, off in 0.001f64..0.05) {
        let j = i + k;
        let th = sharpness_threshold(i, j).unwrap().value;
        let a = *th.numer() as f64 / *th.denom() as f64;
        prop_assert!(delta(a, i, j).abs() < 1e-12);
        if a - off > 0.0 {
            prop_assert!(delta(a - off, i, j) > 0.0);
        }
        prop_assert!(delta(a + off, i, j) < 0.0);
    }
}

#[test]
fn weighted_mean_ignores_path_order() {
    let m = build_kolmogorov_chain(2, 1, 1.0).unwrap();
    let ens = euler_ensemble_with(&m, &[0.0, 0.0], 0.0, 1.0, 10, 500, 3, Scheme::LinearizedEuler, &SimOptions::default())
        .unwrap();
    let mut shuffled = ens.clone();
    let r = ens.recorded.len() * ens.nd;
    let perm: Vec<usize> = (0..ens.paths).map(|p| (p * 7919) % ens.paths).collect();
    for (dst, &src) in perm.iter().enumerate() {
        shuffled.states[dst * r..(dst + 1) * r].copy_from_slice(&ens.states[src * r..(src + 1) * r]);
        shuffled.weights[dst] = ens.weights[src];
        shuffled.excluded[dst] = ens.excluded[src];
    }
    let (a, sa) = ens.terminal_mean(|x| x[1] * x[1]).unwrap();
    let (b, sb) = shuffled.terminal_mean(|x| x[1] * x[1]).unwrap();
    assert!((a - b).abs() <= 1e-12 * a.abs());
    assert!((sa - sb).abs() <= 1e-12 * sa.abs());
}

#[test]
fn splitting_step_covariance_is_exact() {
    let m = build_kolmogorov_chain(3, 1, 1.0).unwrap();
    let (t, h) = (0.2, 0.3);
    let x = [0.1, 0.5, -0.4];
    let step = kolmo_chain::mc_simulate::step_covariance(&m, Scheme::ExactLinearSplitting, t, h, &x).unwrap();
    let flow = integrate_backward_flow(&m, &x, t + h, t, 200).unwrap();
    let exact = compute_covariance(&m, &flow, t, t + h, 65, 200).unwrap();
    assert!((step - exact).abs().max() < 1e-10);
}

#[test]
fn density_estimate_converges_on_kolmogorov() {
    let m = build_kolmogorov_chain(2, 1, 1.0).unwrap();
    let exact = build_proxy(&m, &[0.0, 0.0], 1.0, 0.0, &ProxyConfig::default()).unwrap();
    let axes = vec![linspace(-2.5, 2.5, 21), linspace(-1.5, 1.5, 21)];
    let opts = SimOptions {
        record: Record::Terminal,
        ..SimOptions::default()
    };
    let gaps: Vec<f64> = [1_000, 10_000, 100_000]
        .iter()
        .map(|&paths| {
            let ens = euler_ensemble_with(&m, &[0.0, 0.0], 0.0, 1.0, 20, paths, 17, Scheme::LinearizedEuler, &opts)
                .unwrap();
            let est = empirical_density(&ens, &axes, &BandwidthRule::ScaledScott).unwrap();
            est.values
                .iter()
                .enumerate()
                .map(|(g, v)| (v - exact.density(&[0.0, 0.0], &est.node(g))).abs())
                .fold(0.0, f64::max)
        })
        .collect();
    assert!(gaps[1] < gaps[0] && gaps[2] < gaps[1], "{gaps:?}");
}

#[test]
fn integrated_noise_abs_moment() {
    let (_, want) = iterated_bm_moment(2).unwrap();
    let r = noise_self_similarity(2, 4.0, 20_000, 50, 5).unwrap();
    let (m, se) = r.abs_moment;
    assert!((m - want).abs() <= 3.0 * se, "{m} ± {se} vs {want}");
    assert!(r.within_3se);
}

#[test]
fn mirrored_noise_negates_paths_from_zero() {
    let base = PeanoConfig {
        alpha: 0.4,
        x0: 0.0,
        rho: Some(0.5),
        paths: 64,
        steps: 500,
        run_past_passage: true,
        record_every: 50,
        seed: 21,
        ..PeanoConfig::default()
    };
    let a = simulate_peano(&base).unwrap();
    let b = simulate_peano(&PeanoConfig { mirrored: true, ..base }).unwrap();
    assert!(a.terminal.iter().zip(&b.terminal).all(|(u, v)| *u == -*v));
    assert!(a.z_records.iter().zip(&b.z_records).all(|(u, v)| *u == -*v));
}

#[test]
fn markov_bound_holds_below_threshold() {
    for alpha in [0.1, 0.2, 0.3] {
        let r = run_peano(&PeanoConfig {
            alpha,
            paths: 2000,
            steps: 4000,
            seed: 8,
            ..PeanoConfig::default()
        })
        .unwrap();
        assert!(r.delta > 0.0);
        assert!(r.markov_lower <= r.survival_hat + 3.0 * r.std_error, "α={alpha}: {r:?}");
        assert_eq!(r.bound_consistent, Some(true));
    }
}

#[test]
fn drift_dominated_start_survives() {
    let r = run_peano(&PeanoConfig {
        alpha: 0.5,
        x0: 5.0,
        rho: Some(0.01),
        paths: 500,
        steps: 500,
        ..PeanoConfig::default()
    })
    .unwrap();
    assert_eq!(r.survival_hat, 1.0);
}

#[test]
fn survival_tends_to_one_as_horizon_shrinks() {
    let s: Vec<f64> = [1.0, 1e-2, 1e-4]
        .iter()
        .map(|&rho| {
            run_peano(&PeanoConfig {
                alpha: 0.5,
                x0: 1e-2,
                rho: Some(rho),
                paths: 1000,
                steps: 1000,
                ..PeanoConfig::default()
            })
            .unwrap()
            .survival_hat
        })
        .collect();
    assert!(s[0] <= s[1] && s[1] <= s[2] && s[2] > 0.99, "{s:?}");
}

#[test]
fn survival_rejects_zero_start_and_short_grid() {
    let cfg = PeanoConfig {
        x0: 0.0,
        paths: 10,
        steps: 10,
        ..PeanoConfig::default()
    };
    let ens = simulate_peano(&cfg).unwrap();
    assert!(survival_probability(&ens, &cfg).is_err());
    let cfg = PeanoConfig {
        paths: 10,
        steps: 10,
        ..PeanoConfig::default()
    };
    let mut ens = simulate_peano(&cfg).unwrap();
    ens.times.pop();
    assert!(survival_probability(&ens, &cfg).is_err());
}

#[test]
fn sweep_is_deterministic_and_ordered_across_threshold() {
    let shared = PeanoConfig {
        paths: 1000,
        steps: 4000,
        seed: 99,
        ..PeanoConfig::default()
    };
    let a = threshold_sweep(2, 2, &[0.15, 0.8], &shared).unwrap();
    let b = threshold_sweep(2, 2, &[0.15, 0.8], &shared).unwrap();
    assert_eq!(a[0].survival_hat, b[0].survival_hat);
    assert_eq!(a[1].survival_hat, b[1].survival_hat);
    assert!(a[0].survival_hat > a[1].survival_hat);
    assert!(threshold_sweep(2, 2, &[1.2], &shared).is_err());
}

#[test]
fn extreme_solution_k0_closed_form() {
    for alpha in [0.1, 0.25, 0.5, 0.75, 0.9] {
        let e = extreme_solution(alpha, 0).unwrap();
        let c = (1.0 - alpha).powf(1.0 / (1.0 - alpha));
        assert!((e.c - c).abs() < 1e-12 * c);
    }
}

/// Integrates `Z' = |Y|^α, Y' = Z` from `t = ε` on the extreme solution and
/// compares `Z(1)` with `c`.
#[test]
fn extreme_solution_matches_ode_integration() {
    let alpha = 1.0 / 3.0;
    let e = extreme_solution(alpha, 1).unwrap();
    assert!((e.c - 1.0 / (2.0 * 6f64.sqrt())).abs() < 1e-12);
    let eps: f64 = 1e-3;
    let mut z = e.c * eps.powf(e.p);
    let mut y = e.c * eps.powf(e.p + 1.0) / (e.p + 1.0);
    let steps = 20_000;
    let h = (1.0 - eps) / steps as f64;
    let f = |z: f64, y: f64| (y.abs().powf(alpha), z);
    for _ in 0..steps {
        let k1 = f(z, y);
        let k2 = f(z + 0.5 * h * k1.0, y + 0.5 * h * k1.1);
        let k3 = f(z + 0.5 * h * k2.0, y + 0.5 * h * k2.1);
        let k4 = f(z + h * k3.0, y + h * k3.1);
        z += h / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0);
        y += h / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1);
    }
    assert!((z - e.c).abs() < 1e-6 * e.c, "{z} vs {}", e.c);
}

#[test]
fn extreme_residual_over_twenty_pairs() {
    for alpha in [0.1, 0.3, 0.5, 0.7, 0.9] {
        for k in 0..4 {
            assert!(extreme_solution(alpha, k).unwrap().residual < 1e-6);
        }
    }
}
