use kolmo_chain::chain_model::{build_kolmogorov_chain, build_power_chain, ChainModel, HolderMatrix};
use kolmo_chain::green_kernel::{
    green_apply, parametrix_kernel_h, singular_green_norm, GridSpec, KernelQuadrature, TestFunction,
};
use kolmo_chain::parametrix::{build_proxy, dirac_probe, gsp_spectrum, kernel_grid, ProxyConfig};
use kolmo_chain::quad::gauss_legendre;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn kolmo(n: usize) -> ChainModel {
    build_kolmogorov_chain(n, 1, 1.0).unwrap()
}

fn power(beta: f64) -> ChainModel {
    build_power_chain(2, 1, &HolderMatrix::uniform(2, beta), (2, 2), 1.0).unwrap()
}

fn gaussian_density(z: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let nd = z.len() as f64;
    let inv = cov.clone().try_inverse().unwrap();
    let q = (z.transpose() * inv * z)[(0, 0)];
    (-0.5 * q).exp() / ((2.0 * std::f64::consts::PI).powf(nd) * cov.determinant()).sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn resolvent_has_unit_determinant(
        beta in 0.2f64..1.0,
        big_t in 1e-3f64..2.0,
        y0 in -2.0f64..2.0,
        y1 in -2.0f64..2.0,
    ) {
        let p = build_proxy(&power(beta), &[y0, y1], big_t, 0.0, &ProxyConfig::default()).unwrap();
        let det = p.resolvent_endpoint().determinant();
        prop_assert!((det - 1.0).abs() < 1e-10);
        prop_assert!(p.det_error.unwrap() < 1e-10);
    }

    #[test]
    fn log_density_matches_direct(
        beta in 0.3f64..1.0,
        big_t in 0.05f64..1.0,
        x0 in -1.0f64..1.0,
        x1 in -1.0f64..1.0,
        z0 in -1.0f64..1.0,
        z1 in -1.0f64..1.0,
    ) {
        let p = build_proxy(&power(beta), &[z0, z1], big_t, 0.0, &ProxyConfig::default()).unwrap();
        let direct = p.density_direct(&[x0, x1], &[z0, z1]);
        prop_assume!(direct > 1e-250);
        let via_log = p.log_density(&[x0, x1], &[z0, z1]).exp();
        prop_assert!((via_log - direct).abs() <= 1e-10 * direct.max(1e-300) + 1e-300);
    }

    #[test]
    fn h_vanishes_on_linear_models(
        t in 0.0f64..0.5,
        h in 1e-3f64..0.5,
        x0 in -2.0f64..2.0,
        x1 in -2.0f64..2.0,
        y0 in -2.0f64..2.0,
        y1 in -2.0f64..2.0,
    ) {
        let v = parametrix_kernel_h(&kolmo(2), t, t + h, &[x0, x1], &[y0, y1], &ProxyConfig::fast()).unwrap();
        prop_assert!(v.abs() < 1e-6);
    }

    #[test]
    fn green_apply_is_linear(alpha in -3.0f64..3.0, c0 in -0.5f64..0.5, c1 in -0.5f64..0.5) {
        let m = power(0.8);
        let grid = GridSpec::new(2, 1, 0.25, 3, vec![1.0, 1.0], 3, 4.0, 4.0).unwrap();
        let f = TestFunction::gaussian(vec![c0, c1], 0.4);
        let g = TestFunction::ball(vec![0.1, -0.1], 0.5);
        let combo = TestFunction::Combination { terms: vec![(alpha, f.clone()), (1.0, g.clone())] };
        let x = [0.1, 0.2];
        let lhs = green_apply(&m, &combo, 0.0, &x, 0.25, &grid).unwrap();
        let rhs = alpha * green_apply(&m, &f, 0.0, &x, 0.25, &grid).unwrap()
            + green_apply(&m, &g, 0.0, &x, 0.25, &grid).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-9 * lhs.abs().max(rhs.abs()).max(1e-12));
    }
}

#[test]
fn smallest_eigenvalue_scales_with_duration() {
    // n = 2: λ_min(K̃) ∝ h^{2n-1} = h³.
    let m = kolmo(2);
    let cfg = ProxyConfig::default();
    let lam = |h: f64| {
        let k = build_proxy(&m, &[0.0, 0.0], h, 0.0, &cfg).unwrap().covariance();
        k.symmetric_eigen().eigenvalues.min()
    };
    let base = lam(1.0);
    for h in [0.5, 0.1, 0.01] {
        let r = lam(h) / (base * h.powi(3));
        assert!((0.1..=10.0).contains(&r), "h={h}: ratio {r}");
    }
}

#[test]
fn covariance_scales_like_duration_powers() {
    let m = kolmo(2);
    for eps in [0.5, 0.1, 0.01] {
        let k = build_proxy(&m, &[0.0, 0.0], eps, 0.0, &ProxyConfig::default()).unwrap().covariance();
        let exact = [[eps, eps * eps / 2.0], [eps * eps / 2.0, eps.powi(3) / 3.0]];
        for a in 0..2 {
            for b in 0..2 {
                assert!((k[(a, b)] - exact[a][b]).abs() < 1e-12 * exact[a][b].abs().max(1e-3));
            }
        }
    }
}

#[test]
fn kolmogorov_mean_map_is_resolvent_action() {
    let m = kolmo(3);
    let p = build_proxy(&m, &[0.3, -0.1, 0.8], 0.7, 0.1, &ProxyConfig::default()).unwrap();
    let x = [1.0, -2.0, 0.5];
    let r = p.resolvent_endpoint();
    let want = &r * DVector::from_column_slice(&x);
    let got = p.mean_map_vec(&x);
    for k in 0..3 {
        assert!((got[k] - want[k]).abs() < 1e-10);
    }
}

#[test]
fn kolmogorov_spectrum_is_scale_invariant() {
    let m = kolmo(2);
    let cfg = ProxyConfig::default();
    let spec = |h: f64| {
        let p = build_proxy(&m, &[0.5, 0.5], h, 0.0, &cfg).unwrap();
        gsp_spectrum(&p.covariance(), h, 2, 1).unwrap()
    };
    let s1 = spec(1.0);
    for h in [1e-1, 1e-2, 1e-3] {
        let s = spec(h);
        assert!((s.lambda_min - s1.lambda_min).abs() < 1e-6);
        assert!((s.lambda_max - s1.lambda_max).abs() < 1e-6);
    }
}

#[test]
fn dirac_probe_on_linear_coordinate() {
    let m = kolmo(2);
    let eps = [0.2, 0.1, 0.05, 0.025];
    let rows = dirac_probe(&m, |y: &[f64]| y[1].tanh(), &[0.3, 0.4], 0.0, &eps).unwrap();
    for w in rows.windows(2) {
        assert!(w[1].error < w[0].error);
    }
    let ones = dirac_probe(&m, |_: &[f64]| 1.0, &[0.3, 0.4], 0.0, &eps).unwrap();
    assert!(ones.iter().all(|r| r.mass >= 0.999));
}

#[test]
fn green_of_gaussian_matches_convolution() {
    // Kolmogorov: p̃ is the exact Gaussian N(R x, K(s)), so
    // ∫ p f dy = (2π w²)^{nd/2} N(c; R x, K + w² I).
    let m = kolmo(2);
    let (w, c) = (0.6, [0.4, -0.3]);
    let f = TestFunction::gaussian(c.to_vec(), w);
    let x = [0.2, 0.1];
    let big_t = 0.5;
    let quad = KernelQuadrature {
        time_nodes: 12,
        points_per_dim: 31,
        box_sd: 7.0,
        proxy: ProxyConfig::default(),
    };
    let mut grid = GridSpec::new(2, 1, big_t, 3, vec![1.0, 1.0], 3, 4.0, 4.0).unwrap();
    grid.kernel = quad;
    let got = green_apply(&m, &f, 0.0, &x, big_t, &grid).unwrap();
    let (ss, ws) = gauss_legendre(40, 0.0, big_t);
    let want: f64 = ss
        .iter()
        .zip(&ws)
        .map(|(&s, &wt)| {
            let cov = DMatrix::from_row_slice(2, 2, &[s, s * s / 2.0, s * s / 2.0, s.powi(3) / 3.0 + 0.0])
                + DMatrix::identity(2, 2) * (w * w);
            let mean = [x[0], x[1] + s * x[0]];
            let z = DVector::from_column_slice(&[c[0] - mean[0], c[1] - mean[1]]);
            wt * 2.0 * std::f64::consts::PI * w * w * gaussian_density(&z, &cov)
        })
        .sum();
    assert!((got - want).abs() < 1e-3, "green {got} vs convolution {want}");
}

#[test]
fn norm_estimators_are_monotone_in_abs() {
    let m = power(0.8);
    let grid = GridSpec::new(2, 1, 0.25, 3, vec![1.0, 1.0], 3, 4.0, 4.0).unwrap();
    let f = TestFunction::Combination {
        terms: vec![
            (1.0, TestFunction::gaussian(vec![0.3, 0.0], 0.3)),
            (-1.0, TestFunction::gaussian(vec![-0.3, 0.0], 0.3)),
        ],
    };
    let a = singular_green_norm(&m, 0.5, &f, &grid).unwrap().estimate;
    let b = singular_green_norm(&m, 0.5, &f.abs(), &grid).unwrap().estimate;
    assert!(b >= a * (1.0 - 1e-12));
}

/// L¹ mass of `H(0, h, x, ·)`, which should scale like `h^{-1+χ}`.
fn h_mass(m: &ChainModel, x: &[f64], h: f64) -> f64 {
    let cfg = ProxyConfig::default();
    let (nodes, w) = kernel_grid(m, x, 0.0, h, 7.0, 41, &cfg).unwrap();
    nodes
        .chunks(2)
        .zip(&w)
        .map(|(y, wt)| wt * parametrix_kernel_h(m, 0.0, h, x, y, &cfg).unwrap().abs())
        .sum()
}

#[test]
fn h_time_singularity_exponent() {
    let beta = 0.8;
    // χ = 1 - (2i-1)/2 + β(2j-1)/2 at (i, j) = (2, 2).
    let chi = 1.0 - 1.5 + beta * 1.5;
    let m = power(beta);
    let x = [0.0, 0.0];
    let hs: Vec<f64> = (4..10).map(|k| 0.5f64.powi(k)).collect();
    let (lx, ly): (Vec<f64>, Vec<f64>) = hs.iter().map(|&h| (h.ln(), h_mass(&m, &x, h).ln())).unzip();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let slope = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>()
        / lx.iter().map(|a| (a - mx).powi(2)).sum::<f64>();
    assert!((slope - (-1.0 + chi)).abs() <= 0.1, "slope {slope}, expected {}", -1.0 + chi);
}
