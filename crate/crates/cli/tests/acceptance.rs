//! Acceptance suite: one PASS/FAIL line per criterion, all at their stated tolerances.
//! Run with `cargo test -p kolmo-chain-cli --test acceptance -- --nocapture`.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use kolmo_chain::chain_model::{build_kolmogorov_chain, build_power_chain, ChainModel, HolderMatrix};
use kolmo_chain::flow_engine::{flow_equivalence_probe, integrate_backward_flow};
use kolmo_chain::green_kernel::{default_dictionary, estimate_r_opnorm, GridSpec, TestFunction};
use kolmo_chain::mc_simulate::{
    euler_ensemble_with, girsanov_weighted_ensemble, khasminskii_probe, krylov_functional, Record, Scheme,
    SimOptions,
};
use kolmo_chain::parametrix::{
    build_proxy, compute_covariance, compute_resolvent, dirac_probe, gsp_spectrum, ProxyConfig,
};
use kolmo_chain::peano_lab::{extreme_solution, run_peano, sharpness_threshold, PeanoConfig};
use kolmo_chain::rng::NormalStream;
use num_rational::Ratio;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn kolmo() -> ChainModel {
    build_kolmogorov_chain(2, 1, 1.0).unwrap()
}

fn power(beta: f64) -> ChainModel {
    build_power_chain(2, 1, &HolderMatrix::uniform(2, beta), (2, 2), 1.0).unwrap()
}

fn c1_covariance() -> Verdict {
    let m = kolmo();
    let start = Instant::now();
    let flow = integrate_backward_flow(&m, &[0.0, 0.0], 1.0, 0.0, 200).unwrap();
    let k = compute_covariance(&m, &flow, 0.0, 1.0, 65, 200).unwrap();
    let el = start.elapsed();
    let exact = [[1.0, 0.5], [0.5, 1.0 / 3.0]];
    let err = (0..2)
        .flat_map(|a| (0..2).map(move |b| (a, b)))
        .map(|(a, b)| (k[(a, b)] - exact[a][b]).abs())
        .fold(0.0, f64::max);
    verdict(err < 1e-8 && el < Duration::from_secs(1), format!("max abs error {err:.2e}, {el:.2?}"))
}

fn c2_unit_determinant() -> Verdict {
    let mut rng = NormalStream::new(2024, 0);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = 2 + (rng.next_uniform() * 3.0) as usize;
        let d = 1 + (rng.next_uniform() * 2.0) as usize;
        let beta = 0.2 + 0.8 * rng.next_uniform();
        let i = 2 + (rng.next_uniform() * (n - 1) as f64) as usize;
        let j = i + (rng.next_uniform() * (n - i + 1) as f64) as usize;
        let m = build_power_chain(n, d, &HolderMatrix::uniform(n, beta), (i, j), 1.0).unwrap();
        let horizon = 10f64.powf(-2.0 + 2.3 * rng.next_uniform());
        let y: Vec<f64> = (0..n * d).map(|_| rng.next_normal()).collect();
        let flow = integrate_backward_flow(&m, &y, horizon, 0.0, 64).unwrap();
        let r = compute_resolvent(&m, &flow, horizon, 0.0, 64).unwrap();
        worst = worst.max((r.determinant() - 1.0).abs());
    }
    verdict(worst <= 1e-10, format!("max |det - 1| = {worst:.2e} over 1000 models"))
}

fn c3_good_scaling() -> Verdict {
    let durations = [1.0, 1e-1, 1e-2, 1e-3];
    let (emin, emax) = ((4.0 - 13f64.sqrt()) / 6.0, (4.0 + 13f64.sqrt()) / 6.0);
    let cfg = ProxyConfig::default();
    let km = kolmo();
    let mut dev = 0.0f64;
    for &h in &durations {
        let p = build_proxy(&km, &[0.3, -0.2], h, 0.0, &cfg).unwrap();
        let s = gsp_spectrum(&p.covariance(), h, 2, 1).unwrap();
        dev = dev.max((s.lambda_min - emin).abs()).max((s.lambda_max - emax).abs());
    }
    let pm = power(0.8);
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for y in [[0.0, 0.0], [0.5, 0.5], [-1.0, 0.3], [0.2, -2.0]] {
        for &h in &durations {
            let p = build_proxy(&pm, &y, h, 0.0, &cfg).unwrap();
            let s = gsp_spectrum(&p.covariance(), h, 2, 1).unwrap();
            lo = lo.min(s.lambda_min);
            hi = hi.max(s.lambda_max);
        }
    }
    let band = hi / lo;
    verdict(
        dev < 1e-6 && band < 20.0,
        format!("Kolmogorov deviation {dev:.2e}, power-chain band ratio {band:.3}"),
    )
}

fn c4_dirac() -> Verdict {
    let m = power(0.8);
    let x = [0.2, -0.1];
    let eps = [0.2, 0.1, 0.05, 0.025];
    let start = Instant::now();
    let f = TestFunction::gaussian(vec![0.7, 0.4], 1.0);
    let rows = dirac_probe(&m, |y: &[f64]| f.eval(0.0, y), &x, 0.0, &eps).unwrap();
    let ones = dirac_probe(&m, |_: &[f64]| 1.0, &x, 0.0, &eps).unwrap();
    let el = start.elapsed();
    let errs: Vec<f64> = rows.iter().map(|r| r.error).collect();
    let decreasing = errs.windows(2).all(|w| w[1] < w[0]);
    let min_mass = ones.iter().map(|r| r.value).fold(f64::INFINITY, f64::min);
    verdict(
        decreasing && min_mass >= 0.999 && el < Duration::from_secs(120),
        format!("errors {errs:.3?}, min mass {min_mass:.6}, {el:.2?}"),
    )
}

fn c5_euler_moments() -> Verdict {
    let m = kolmo();
    let big_t = 1.0;
    let opts = SimOptions {
        record: Record::Terminal,
        ..SimOptions::default()
    };
    let start = Instant::now();
    let ens = euler_ensemble_with(&m, &[0.0, 0.0], 0.0, big_t, 100, 100_000, 5, Scheme::LinearizedEuler, &opts)
        .unwrap();
    let el = start.elapsed();
    let s = ens.summary().unwrap();
    let exact = [[big_t, big_t * big_t / 2.0], [big_t * big_t / 2.0, big_t.powi(3) / 3.0]];
    let mut worst = 0.0f64;
    for a in 0..2 {
        for b in 0..2 {
            worst = worst.max((s.terminal_cov[a][b] - exact[a][b]).abs() / s.terminal_cov_se[a][b]);
        }
    }
    verdict(
        worst <= 3.0 && el < Duration::from_secs(30),
        format!("max |cov - exact| = {worst:.2} SE, {el:.2?}"),
    )
}

fn c6_krylov() -> Verdict {
    let m = kolmo();
    let (t, big_t) = (0.25, 1.0);
    let x0 = [0.0, 0.0];
    let opts = SimOptions::default();
    let ens = euler_ensemble_with(&m, &x0, t, big_t, 400, 10_000, 6, Scheme::LinearizedEuler, &opts).unwrap();
    // The constant has no closed-form mixed norm; a coarse grid supplies one.
    let grid = GridSpec::new(2, 1, big_t, 5, vec![1.0, 1.0], 5, 2.2, 20.0).unwrap();
    let one = krylov_functional(&ens, &TestFunction::Constant { value: 1.0 }, 2.2, 20.0, Some(&grid)).unwrap();
    let exact = (one.value - (big_t - t)).abs() < 1e-12 && one.std_error == 0.0;
    let ratios: Vec<f64> = [0.5, 0.25, 0.125]
        .iter()
        .map(|&r| {
            let f = TestFunction::rescaled_ball(x0.to_vec(), r, 2, 1);
            krylov_functional(&ens, &f, 2.2, 20.0, None).unwrap().bound_ratio
        })
        .collect();
    let spread = ratios.iter().copied().fold(0.0, f64::max) / ratios.iter().copied().fold(f64::INFINITY, f64::min);
    verdict(
        exact && spread < 3.0,
        format!("E∫1 = {} (T-t = {}), ball ratios {ratios:.4?}, variation {spread:.3}", one.value, big_t - t),
    )
}

fn c7_r_opnorm() -> Verdict {
    let m = power(0.8);
    let grid = GridSpec::new(2, 1, 0.5, 5, vec![1.5, 1.5], 9, 4.0, 4.0).unwrap();
    let dict = default_dictionary(&grid);
    let est: Vec<f64> = [0.5, 0.25, 0.125]
        .iter()
        .map(|&h| estimate_r_opnorm(&m, h, &grid, &dict).unwrap().estimate)
        .collect();
    let decreasing = est.windows(2).all(|w| w[1] < w[0]);
    verdict(decreasing && est[2] < 1.0, format!("C(T) at T = 0.5, 0.25, 0.125: {est:.4?}"))
}

fn c8_girsanov() -> Verdict {
    let m = kolmo();
    let f1 = |_t: f64, x: &[f64], out: &mut [f64]| out[0] = x[0].tanh() + 0.5;
    let opts = SimOptions {
        record: Record::Terminal,
        ..SimOptions::default()
    };
    let w = girsanov_weighted_ensemble(&m, f1, &[0.0, 0.0], 0.0, 1.0, 100, 10_000, 81, Scheme::LinearizedEuler, &opts)
        .unwrap();
    let direct = m.with_first_drift(f1);
    let d = euler_ensemble_with(&direct, &[0.0, 0.0], 0.0, 1.0, 100, 10_000, 82, Scheme::LinearizedEuler, &opts)
        .unwrap();
    let (wm, wse) = w.terminal_mean(|x| x[0]).unwrap();
    let (dm, dse) = d.terminal_mean(|x| x[0]).unwrap();
    let z = 1.959_963_984_540_054;
    let overlap = wm - z * wse <= dm + z * dse && dm - z * dse <= wm + z * wse;
    let s = w.summary().unwrap();
    let weight_ok = (s.weight_mean - 1.0).abs() <= 3.0 * s.weight_mean_se;
    verdict(
        overlap && weight_ok,
        format!(
            "weighted {wm:.4}±{:.4}, direct {dm:.4}±{:.4}, mean weight {:.4} (se {:.4})",
            z * wse,
            z * dse,
            s.weight_mean,
            s.weight_mean_se
        ),
    )
}

fn c9_khasminskii() -> Verdict {
    let m = kolmo();
    let c = 0.7;
    let big_t = 1.0;
    let opts = SimOptions::default();
    let starts = vec![vec![0.0, 0.0], vec![1.0, -0.5]];
    let cst = khasminskii_probe(&m, move |_t: f64, _x: &[f64], out: &mut [f64]| out[0] = c, big_t, &starts, 50, 1000, 9, &opts)
        .unwrap();
    let exact = (c * c * big_t).exp();
    let rel = (cst.estimate - exact).abs() / exact;
    // n²d/p + 2/q = 4/8 + 2/8 < 1 for a bounded bump.
    let bump = TestFunction::gaussian(vec![0.0, 0.0], 0.5).scaled(2.0);
    let b = khasminskii_probe(
        &m,
        move |t: f64, x: &[f64], out: &mut [f64]| out[0] = bump.eval(t, x),
        big_t,
        &starts,
        100,
        10_000,
        10,
        &opts,
    )
    .unwrap();
    verdict(
        rel < 1e-12 && b.estimate.is_finite() && b.tail_ratio < 10.0,
        format!(
            "constant: {:.12} vs e^(c²T) = {exact:.12}; bump: estimate {:.4}, tail ratio {:.3}",
            cst.estimate, b.estimate, b.tail_ratio
        ),
    )
}

fn c10_peano() -> Verdict {
    let start = Instant::now();
    let lo = run_peano(&PeanoConfig {
        alpha: 0.15,
        seed: 10,
        ..PeanoConfig::default()
    })
    .unwrap();
    let hi = run_peano(&PeanoConfig {
        alpha: 0.8,
        seed: 11,
        ..PeanoConfig::default()
    })
    .unwrap();
    let el = start.elapsed();
    verdict(
        lo.survival_hat >= 0.7 && hi.survival_hat < 0.5 && el < Duration::from_secs(300),
        format!(
            "α=0.15: ρ={:.3e}, bound {:.3}, survival {:.4}; α=0.8: ρ={:.3}, survival {:.4}; {el:.2?}",
            lo.rho, lo.markov_lower, lo.survival_hat, hi.rho, hi.survival_hat
        ),
    )
}

fn c11_threshold_identity() -> Verdict {
    let mut ok = true;
    let mut count = 0;
    for i in 2..=6usize {
        for j in i..=6usize {
            let th = sharpness_threshold(i, j).unwrap();
            let gamma = Ratio::new(2 * i as i64 - 1, 2);
            let k = Ratio::from_integer((j - i) as i64);
            ok &= th.value == (gamma - 1) / (k + gamma);
            ok &= th.value == Ratio::new(2 * i as i64 - 3, 2 * j as i64 - 1);
            count += 1;
        }
    }
    verdict(ok, format!("{count} (i, j) pairs checked in exact rationals"))
}

fn c12_extreme_residual() -> Verdict {
    let mut worst = 0.0f64;
    for alpha in [0.1, 0.3, 0.5, 0.7, 0.9] {
        for k in 0..4 {
            worst = worst.max(extreme_solution(alpha, k).unwrap().residual);
        }
    }
    let e = extreme_solution(0.5, 0).unwrap();
    let exact = (e.p - 2.0).abs() < 1e-12 && (e.c - 0.25).abs() < 1e-12;
    verdict(worst < 1e-6 && exact, format!("max residual {worst:.2e} over 20 pairs; α=1/2,k=0 → ({}, {})", e.p, e.c))
}

fn c13_flow_equivalence() -> Verdict {
    let m = power(0.8);
    let cs: Vec<f64> = [1e-1, 1e-2, 1e-3]
        .iter()
        .enumerate()
        .map(|(k, &g)| flow_equivalence_probe(&m, 1000, 0.0, g, 13 + k as u64).unwrap().constant)
        .collect();
    let c = cs.iter().copied().fold(0.0, f64::max);
    verdict(c <= 50.0, format!("constants per scale {cs:.3?}, C = {c:.3}"))
}

const CLI_CONFIGS: &[(&str, &str)] = &[
    ("simulate", "[params.simulation]\npaths = 2000\nsteps = 20\n"),
    ("density", "[params]\naxes = [[-3.0, 3.0, 15], [-2.0, 2.0, 15]]\n[params.simulation]\npaths = 2000\nsteps = 20\n"),
    ("proxy", "[model]\nkind = \"power-chain\"\nn = 2\nd = 1\nbeta = [1.0, 1.0, 0.8]\n"),
    ("gsp-check", ""),
    ("flow-equiv", "[params]\npairs = 100\n"),
    ("dirac-check", "[params]\npoints_per_dim = 11\neps = [0.2, 0.1]\n"),
    ("green", "[params.kernel]\ntime_nodes = 3\npoints_per_dim = 5\n"),
    ("rnorm", "[params]\nhorizons = [0.5, 0.25]\n[params.grid]\ntime_nodes = 3\nspace_nodes = 3\n[params.grid.kernel]\ntime_nodes = 3\npoints_per_dim = 5\n"),
    ("singular-green", "[params]\ngammas = [0.0, 0.5]\n[params.grid]\ntime_nodes = 3\nspace_nodes = 3\n[params.grid.kernel]\ntime_nodes = 3\npoints_per_dim = 5\n"),
    ("uf1", "[params]\nhorizons = [0.25]\n[params.grid]\ntime_nodes = 3\nspace_nodes = 3\n[params.grid.kernel]\ntime_nodes = 3\npoints_per_dim = 5\n"),
    ("krylov", "[params.simulation]\npaths = 1000\nsteps = 20\n"),
    ("girsanov", "[params.simulation]\npaths = 1000\nsteps = 20\n"),
    ("khasminskii", "[params]\npaths = 500\nsteps = 20\n"),
    ("peano", "[params]\npaths = 300\nsteps = 2000\n"),
    ("peano-sweep", "[params]\nalphas = [0.15, 0.8]\npaths = 200\nsteps = 1000\n"),
    ("validate", "[params]\nsamples = 500\n"),
];

fn run_cli(cmd: &str, config: &Path, out: &Path, threads: &str) -> (i32, String) {
    let o = Command::new(env!("CARGO_BIN_EXE_kolmo-chain"))
        .args([cmd, "--config"])
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(["--threads", threads, "--seed", "14"])
        .output()
        .expect("binary runs");
    (o.status.code().unwrap_or(-1), String::from_utf8_lossy(&o.stdout).into_owned())
}

fn c14_determinism() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let mut failures = Vec::new();
    for (cmd, body) in CLI_CONFIGS {
        let cfg = dir.path().join(format!("{cmd}.toml"));
        std::fs::write(&cfg, format!("command = \"{cmd}\"\n{body}")).unwrap();
        let out = dir.path().join("runs");
        let (c1, _) = run_cli(cmd, &cfg, &out, "1");
        let manifest = std::fs::read_dir(&out)
            .unwrap()
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .find(|p| p.file_name().unwrap().to_string_lossy().starts_with(&format!("{cmd}-")))
            .map(|p| p.join("manifest.json"));
        let (c2, stdout) = match manifest {
            Some(m) => run_cli(cmd, &m, &out, "4"),
            None => (-1, String::new()),
        };
        if c1 != 0 || c2 != 0 || !stdout.contains("reproduced") {
            failures.push(format!("{cmd} (exit {c1}/{c2})"));
        }
    }
    verdict(
        failures.is_empty(),
        if failures.is_empty() {
            format!("{} commands re-run from manifest with 4 threads vs 1: headline metrics bitwise equal", CLI_CONFIGS.len())
        } else {
            format!("failed: {}", failures.join(", "))
        },
    )
}

type Criterion = (&'static str, fn() -> Verdict);

#[test]
fn acceptance() {
    let criteria: [Criterion; 14] = [
        ("covariance oracle", c1_covariance),
        ("unit-determinant resolvent", c2_unit_determinant),
        ("good scaling property", c3_good_scaling),
        ("Dirac convergence", c4_dirac),
        ("Euler moments", c5_euler_moments),
        ("Krylov estimate", c6_krylov),
        ("R-operator smallness", c7_r_opnorm),
        ("Girsanov consistency", c8_girsanov),
        ("Khas'minskii probe", c9_khasminskii),
        ("Peano sharpness", c10_peano),
        ("threshold identity", c11_threshold_identity),
        ("extreme-solution residual", c12_extreme_residual),
        ("flow equivalence", c13_flow_equivalence),
        ("determinism", c14_determinism),
    ];
    let mut failed = Vec::new();
    for (k, (name, check)) in criteria.iter().enumerate() {
        let v = check();
        let tag = if v.pass { "PASS" } else { "FAIL" };
        println!("[{tag}] {:>2}. {name}: {}", k + 1, v.detail);
        if !v.pass {
            failed.push(k + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
