//! Green kernel `Gf(t,x) = ∫_t^T ∫ p̃^{s,y}(t,s,x,y) f(s,y) dy ds`, the
//! parametrix kernel `H = (L_t - L̃_t^{s,y}) p̃`, the operator `R` built from it,
//! and mixed `L^q_t L^p_x` grid norms of the resulting functions.
//!
//! Operations are limited to `nd ≤ 4`: every inner `y`-node needs its own
//! proxy, so cost grows like `points^{nd}` per outer node.

use std::io::Write;

use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma;

use crate::chain_model::ChainModel;
use crate::error::{invalid, Error, Result};
use crate::exec::{self, pairwise_sum, Exec};
use crate::parametrix::{build_proxy, kernel_grid, tensor_grid, FrozenProxy, ProxyConfig};
use crate::quad::{gauss_legendre, linspace, trapezoid_weights};

pub const MAX_ND: usize = 4;

/// Inner quadrature used for every `∫_t^T ds ∫ dy` evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KernelQuadrature {
    /// Gauss–Legendre nodes in the substituted time variable.
    pub time_nodes: usize,
    /// Trapezoid nodes per dimension of the adapted `y` grid.
    pub points_per_dim: usize,
    /// Half-width of the `y` grid in proxy standard deviations.
    pub box_sd: f64,
    pub proxy: ProxyConfig,
}

impl Default for KernelQuadrature {
    fn default() -> Self {
        KernelQuadrature {
            time_nodes: 6,
            points_per_dim: 11,
            box_sd: 6.0,
            proxy: ProxyConfig::fast(),
        }
    }
}

/// Outer `(t, x)` grid on `[0, T] × Π [-r_i, r_i]^d` where the mixed norms are taken.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub n: usize,
    pub d: usize,
    pub horizon: f64,
    pub time_nodes: usize,
    /// Absolute half-width of the box for each block.
    pub box_radius: Vec<f64>,
    pub space_nodes: usize,
    pub p_prime: f64,
    pub q_prime: f64,
    #[serde(default)]
    pub kernel: KernelQuadrature,
    #[serde(default)]
    pub exec: Exec,
}

/// Returns `n²d/p + 2/q`.
pub fn integrability_index(n: usize, d: usize, p: f64, q: f64) -> f64 {
    (n * n * d) as f64 / p + 2.0 / q
}

impl GridSpec {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        n: usize,
        d: usize,
        horizon: f64,
        time_nodes: usize,
        box_radius: Vec<f64>,
        space_nodes: usize,
        p_prime: f64,
        q_prime: f64,
    ) -> Result<Self> {
        let g = GridSpec {
            n,
            d,
            horizon,
            time_nodes,
            box_radius,
            space_nodes,
            p_prime,
            q_prime,
            kernel: KernelQuadrature::default(),
            exec: Exec::default(),
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        let nd = self.n * self.d;
        if nd == 0 || nd > MAX_ND {
            return Err(invalid(format!("grid operations need 1 ≤ nd ≤ {MAX_ND}, got {nd}")));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(invalid("horizon must be positive"));
        }
        if self.time_nodes < 2 || self.space_nodes < 2 {
            return Err(invalid("grids need at least two nodes per axis"));
        }
        if self.box_radius.len() != self.n {
            return Err(Error::DimensionMismatch {
                expected: self.n,
                got: self.box_radius.len(),
            });
        }
        if self.box_radius.iter().any(|r| !(*r > 0.0)) {
            return Err(invalid("box radii must be positive"));
        }
        if !(self.p_prime > 1.0 && self.q_prime > 1.0) {
            return Err(invalid("exponents p', q' must exceed 1"));
        }
        let idx = integrability_index(self.n, self.d, self.p_prime, self.q_prime);
        if !(idx < 2.0) {
            return Err(Error::ExponentGate(format!(
                "n²d/p' + 2/q' = {idx} must be < 2"
            )));
        }
        let k = &self.kernel;
        if k.time_nodes == 0 || k.points_per_dim < 3 || !(k.box_sd > 0.0) {
            return Err(invalid("kernel quadrature needs time_nodes ≥ 1, points_per_dim ≥ 3, box_sd > 0"));
        }
        Ok(())
    }

    pub fn nd(&self) -> usize {
        self.n * self.d
    }

    /// Same spatial grid on the time window `[0, horizon]`.
    pub fn at_horizon(&self, horizon: f64) -> Result<Self> {
        let mut g = self.clone();
        g.horizon = horizon;
        g.validate()?;
        Ok(g)
    }

    pub fn times(&self) -> Vec<f64> {
        linspace(0.0, self.horizon, self.time_nodes)
    }

    /// Flat `count × nd` nodes and trapezoid weights of the spatial box.
    pub fn space_grid(&self) -> (Vec<f64>, Vec<f64>) {
        let axes: Vec<Vec<f64>> = (0..self.nd())
            .map(|c| {
                let r = self.box_radius[c / self.d];
                linspace(-r, r, self.space_nodes)
            })
            .collect();
        tensor_grid(&axes)
    }

    fn check_model(&self, model: &ChainModel) -> Result<()> {
        self.validate()?;
        if model.n() != self.n || model.d() != self.d {
            return Err(Error::DimensionMismatch {
                expected: self.nd(),
                got: model.nd(),
            });
        }
        Ok(())
    }
}

/// `(∫ (∫ |g|^p dx)^{q/p} dt)^{1/q}` by trapezoid rules on row-major `values[t][x]`.
pub fn mixed_norm(values: &[f64], times: &[f64], space_weights: &[f64], p: f64, q: f64) -> f64 {
    let nx = space_weights.len();
    let tw = trapezoid_weights(times);
    let per_t: Vec<f64> = (0..times.len())
        .map(|a| {
            let terms: Vec<f64> = (0..nx)
                .map(|b| space_weights[b] * values[a * nx + b].abs().powf(p))
                .collect();
            tw[a] * pairwise_sum(&terms).powf(q / p)
        })
        .collect();
    pairwise_sum(&per_t).powf(1.0 / q)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TestFunction {
    Constant {
        value: f64,
    },
    GaussianBump {
        center: Vec<f64>,
        width: f64,
        amplitude: f64,
    },
    /// Indicator of the ellipsoid `Σ ((y_k - c_k)/r_k)² ≤ 1`.
    IndicatorBall {
        center: Vec<f64>,
        radii: Vec<f64>,
    },
    /// `amplitude · e^{-time_rate·s} · Π_k exp(-(y_k - c_k)²/(2 w_k²))`.
    SeparableProduct {
        centers: Vec<f64>,
        widths: Vec<f64>,
        time_rate: f64,
        amplitude: f64,
    },
    Combination {
        terms: Vec<(f64, TestFunction)>,
    },
    Abs {
        inner: Box<TestFunction>,
    },
}

impl TestFunction {
    pub fn gaussian(center: Vec<f64>, width: f64) -> Self {
        TestFunction::GaussianBump {
            center,
            width,
            amplitude: 1.0,
        }
    }

    pub fn ball(center: Vec<f64>, radius: f64) -> Self {
        let radii = vec![radius; center.len()];
        TestFunction::IndicatorBall { center, radii }
    }

    /// Ball of the anisotropic metric: block `i` has radius `r^{2i-1}`.
    pub fn rescaled_ball(center: Vec<f64>, r: f64, n: usize, d: usize) -> Self {
        let radii = (0..n * d).map(|c| r.powi(2 * (c / d) as i32 + 1)).collect();
        TestFunction::IndicatorBall { center, radii }
    }

    pub fn scaled(self, alpha: f64) -> Self {
        TestFunction::Combination {
            terms: vec![(alpha, self)],
        }
    }

    pub fn abs(&self) -> Self {
        TestFunction::Abs {
            inner: Box::new(self.clone()),
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            TestFunction::Constant { value } => *value == 0.0,
            TestFunction::GaussianBump { amplitude, .. } | TestFunction::SeparableProduct { amplitude, .. } => {
                *amplitude == 0.0
            }
            TestFunction::IndicatorBall { .. } => false,
            TestFunction::Combination { terms } => terms.iter().all(|(a, f)| *a == 0.0 || f.is_zero()),
            TestFunction::Abs { inner } => inner.is_zero(),
        }
    }

    pub fn validate(&self, nd: usize) -> Result<()> {
        let dim = |v: &Vec<f64>| {
            if v.len() == nd {
                Ok(())
            } else {
                Err(Error::DimensionMismatch {
                    expected: nd,
                    got: v.len(),
                })
            }
        };
        match self {
            TestFunction::Constant { value } if value.is_finite() => Ok(()),
            TestFunction::Constant { .. } => Err(invalid("constant must be finite")),
            TestFunction::GaussianBump { center, width, .. } => {
                dim(center)?;
                if *width > 0.0 {
                    Ok(())
                } else {
                    Err(invalid("bump width must be positive"))
                }
            }
            TestFunction::IndicatorBall { center, radii } => {
                dim(center)?;
                dim(radii)?;
                if radii.iter().all(|r| *r > 0.0) {
                    Ok(())
                } else {
                    Err(invalid("ball radii must be positive"))
                }
            }
            TestFunction::SeparableProduct { centers, widths, .. } => {
                dim(centers)?;
                dim(widths)?;
                if widths.iter().all(|w| *w > 0.0) {
                    Ok(())
                } else {
                    Err(invalid("factor widths must be positive"))
                }
            }
            TestFunction::Combination { terms } => terms.iter().try_for_each(|(_, f)| f.validate(nd)),
            TestFunction::Abs { inner } => inner.validate(nd),
        }
    }

    pub fn eval(&self, s: f64, y: &[f64]) -> f64 {
        match self {
            TestFunction::Constant { value } => *value,
            TestFunction::GaussianBump {
                center,
                width,
                amplitude,
            } => {
                let r2: f64 = y.iter().zip(center).map(|(a, b)| (a - b) * (a - b)).sum();
                amplitude * (-0.5 * r2 / (width * width)).exp()
            }
            TestFunction::IndicatorBall { center, radii } => {
                let q: f64 = y
                    .iter()
                    .zip(center)
                    .zip(radii)
                    .map(|((a, b), r)| ((a - b) / r).powi(2))
                    .sum();
                if q <= 1.0 {
                    1.0
                } else {
                    0.0
                }
            }
            TestFunction::SeparableProduct {
                centers,
                widths,
                time_rate,
                amplitude,
            } => {
                let e: f64 = y
                    .iter()
                    .zip(centers)
                    .zip(widths)
                    .map(|((a, c), w)| (a - c).powi(2) / (2.0 * w * w))
                    .sum();
                amplitude * (-time_rate * s - e).exp()
            }
            TestFunction::Combination { terms } => terms.iter().map(|(a, f)| a * f.eval(s, y)).sum(),
            TestFunction::Abs { inner } => inner.eval(s, y).abs(),
        }
    }

    /// Closed-form `‖f‖_{L^q([t0,t1], L^p(ℝ^{nd}))}` where available.
    pub fn norm_analytic(&self, nd: usize, p: f64, q: f64, t0: f64, t1: f64) -> Option<f64> {
        let len = t1 - t0;
        let spatial = |amp: f64, sum_log_w2: f64| -> f64 {
            // ∫ Π exp(-p y_k²/(2w_k²)) dy = Π (2π w_k²/p)^{1/2}
            let log_int = 0.5 * (nd as f64 * (2.0 * std::f64::consts::PI / p).ln() + sum_log_w2);
            amp.abs() * (log_int / p).exp()
        };
        match self {
            TestFunction::Constant { value } if *value == 0.0 => Some(0.0),
            TestFunction::GaussianBump { width, amplitude, .. } => {
                Some(spatial(*amplitude, nd as f64 * (width * width).ln()) * len.powf(1.0 / q))
            }
            TestFunction::IndicatorBall { radii, .. } => {
                let half = nd as f64 / 2.0;
                let vol = std::f64::consts::PI.powf(half) / gamma(half + 1.0) * radii.iter().product::<f64>();
                Some(vol.powf(1.0 / p) * len.powf(1.0 / q))
            }
            TestFunction::SeparableProduct {
                widths,
                time_rate,
                amplitude,
                ..
            } => {
                let sp = spatial(*amplitude, widths.iter().map(|w| (w * w).ln()).sum());
                let lam = q * time_rate;
                let time = if lam.abs() < 1e-14 {
                    len
                } else {
                    ((-lam * t0).exp() - (-lam * t1).exp()) / lam
                };
                Some(sp * time.powf(1.0 / q))
            }
            TestFunction::Abs { inner } => inner.norm_analytic(nd, p, q, t0, t1),
            TestFunction::Combination { terms } if terms.len() == 1 => terms[0]
                .1
                .norm_analytic(nd, p, q, t0, t1)
                .map(|v| v * terms[0].0.abs()),
            _ => None,
        }
    }

    /// Mixed norm on the grid (trapezoid in time and space).
    pub fn grid_norm(&self, grid: &GridSpec, p: f64, q: f64) -> f64 {
        let times = grid.times();
        let (nodes, w) = grid.space_grid();
        let nd = grid.nd();
        let mut vals = Vec::with_capacity(times.len() * w.len());
        for &s in &times {
            for b in 0..w.len() {
                vals.push(self.eval(s, &nodes[b * nd..(b + 1) * nd]));
            }
        }
        mixed_norm(&vals, &times, &w, p, q)
    }
}

/// Eight Gaussian bumps and four indicator balls spread over the grid box.
pub fn default_dictionary(grid: &GridSpec) -> Vec<TestFunction> {
    let nd = grid.nd();
    let rad: Vec<f64> = (0..nd).map(|c| grid.box_radius[c / grid.d]).collect();
    let rmin = rad.iter().copied().fold(f64::INFINITY, f64::min);
    let mut dict = Vec::with_capacity(12);
    let offsets = [0.0, 0.3, -0.3, 0.5];
    let widths = [0.15, 0.3];
    for (k, &o) in offsets.iter().enumerate() {
        for &w in &widths {
            let center = rad
                .iter()
                .enumerate()
                .map(|(c, r)| if (c + k) % 2 == 0 { o * r } else { -o * r })
                .collect();
            dict.push(TestFunction::gaussian(center, w * rmin));
        }
    }
    for (k, &o) in [0.0, 0.25, -0.25, 0.4].iter().enumerate() {
        let center = rad.iter().map(|r| o * r).collect();
        let scale = [0.3, 0.2, 0.25, 0.15][k];
        dict.push(TestFunction::IndicatorBall {
            center,
            radii: rad.iter().map(|r| scale * r).collect(),
        });
    }
    dict
}

// ---------------------------------------------------------------------------
// Kernel quadrature

/// Substitution for `∫_t^T (s-t)^{-γ} g(s) ds`: `s = t + u^{1/(1-γ)}`, after
/// which the singular factor and the Jacobian combine into the constant `1/(1-γ)`.
/// Returns `(s_k, w_k)` so that the integral is `Σ w_k g(s_k)`.
pub fn singular_time_rule(t: f64, big_t: f64, gamma_exp: f64, nodes: usize) -> Vec<(f64, f64)> {
    let a = 1.0 / (1.0 - gamma_exp);
    let umax = (big_t - t).powf(1.0 - gamma_exp);
    let (u, w) = gauss_legendre(nodes, 0.0, umax);
    u.iter().zip(&w).map(|(&u, &w)| (t + u.powf(a), w * a)).collect()
}

/// Plain `∫_t^T g(s) ds` with `s = t + u²`.
pub fn sqrt_time_rule(t: f64, big_t: f64, nodes: usize) -> Vec<(f64, f64)> {
    let (u, w) = gauss_legendre(nodes, 0.0, (big_t - t).sqrt());
    u.iter().zip(&w).map(|(&u, &w)| (t + u * u, 2.0 * u * w)).collect()
}

/// One `∫ dy` evaluation on the `y` grid adapted to `θ_{s,t}(x)`; `g` receives the
/// proxy frozen at `(s, y)` and `y`. Returns `(Σ w g, Σ w p̃(t,s,x,y))`.
fn y_integral<G>(
    model: &ChainModel,
    t: f64,
    s: f64,
    x: &[f64],
    quad: &KernelQuadrature,
    mut g: G,
) -> Result<(f64, f64)>
where
    G: FnMut(&FrozenProxy, &[f64]) -> f64,
{
    let nd = model.nd();
    let (nodes, weights) = kernel_grid(model, x, t, s, quad.box_sd, quad.points_per_dim, &quad.proxy)?;
    let mut acc = Vec::with_capacity(weights.len());
    let mut mass = Vec::with_capacity(weights.len());
    for (k, w) in weights.iter().enumerate() {
        let y = &nodes[k * nd..(k + 1) * nd];
        let proxy = build_proxy(model, y, s, t, &quad.proxy)?;
        mass.push(w * proxy.density(x, y));
        acc.push(w * g(&proxy, y));
    }
    Ok((pairwise_sum(&acc), pairwise_sum(&mass)))
}

fn check_point(model: &ChainModel, f: Option<&TestFunction>, x: &[f64], t: f64, big_t: f64) -> Result<()> {
    model.check_dim(x)?;
    if model.nd() > MAX_ND {
        return Err(invalid(format!("kernel operations need nd ≤ {MAX_ND}")));
    }
    if let Some(f) = f {
        f.validate(model.nd())?;
    }
    if !(t <= big_t) {
        return Err(invalid(format!("need t ≤ T, got t={t}, T={big_t}")));
    }
    Ok(())
}

/// `∫_t^T (s-t)^{-γ} ∫ p̃^{s,y}(t,s,x,y) f(s,y) dy ds` (γ = 0 is the Green function).
/// Returns the value and the worst mass deficit `1 - ∫ p̃ dy` over the time nodes.
fn singular_green_point(
    model: &ChainModel,
    f: &TestFunction,
    gamma_exp: f64,
    t: f64,
    x: &[f64],
    big_t: f64,
    quad: &KernelQuadrature,
) -> Result<(f64, f64)> {
    if t == big_t {
        return Ok((0.0, 0.0));
    }
    let rule = if gamma_exp == 0.0 {
        sqrt_time_rule(t, big_t, quad.time_nodes)
    } else {
        singular_time_rule(t, big_t, gamma_exp, quad.time_nodes)
    };
    let mut terms = Vec::with_capacity(rule.len());
    let mut deficit = f64::NEG_INFINITY;
    for (s, w) in rule {
        let (v, mass) = y_integral(model, t, s, x, quad, |proxy, y| proxy.density(x, y) * f.eval(s, y))?;
        terms.push(w * v);
        deficit = deficit.max(1.0 - mass);
    }
    Ok((pairwise_sum(&terms), deficit))
}

/// Green function `∫_t^T ds ∫ p̃^{s,y}(t,s,x,y) f(s,y) dy` with one proxy per `(s, y)` node.
pub fn green_apply(
    model: &ChainModel,
    f: &TestFunction,
    t: f64,
    x: &[f64],
    big_t: f64,
    grid: &GridSpec,
) -> Result<f64> {
    grid.check_model(model)?;
    check_point(model, Some(f), x, t, big_t)?;
    Ok(singular_green_point(model, f, 0.0, t, x, big_t, &grid.kernel)?.0)
}

// ---------------------------------------------------------------------------
// Parametrix kernel

/// Scratch buffers for [`h_from_proxy`].
pub(crate) struct HBufs {
    fx: Vec<f64>,
    ft: Vec<f64>,
    jac: Vec<f64>,
    blocks: Vec<f64>,
    sx: Vec<f64>,
    st: Vec<f64>,
    ax: Vec<f64>,
    at: Vec<f64>,
}

impl HBufs {
    pub(crate) fn new(model: &ChainModel) -> Self {
        let (n, d, nd) = (model.n(), model.d(), model.nd());
        HBufs {
            fx: vec![0.0; nd],
            ft: vec![0.0; nd],
            jac: vec![0.0; nd * nd],
            blocks: vec![0.0; n.saturating_sub(1) * d * d],
            sx: vec![0.0; d * d],
            st: vec![0.0; d * d],
            ax: vec![0.0; d * d],
            at: vec![0.0; d * d],
        }
    }
}

/// `H(t,s,x,y)` for the proxy frozen at `(s, y)` over `[t, s]`. The derivatives
/// of the Gaussian proxy in `x` are analytic.
pub(crate) fn h_from_proxy(model: &ChainModel, proxy: &FrozenProxy, t: f64, x: &[f64], b: &mut HBufs) -> f64 {
    let (nd, d) = (model.nd(), model.d());
    let y = &proxy.y;
    let theta = proxy.theta_start();
    let dv = proxy.x_derivatives(x, y);
    if dv.density == 0.0 {
        return 0.0;
    }
    model.drift(t, x, &mut b.fx);
    model.drift(t, theta, &mut b.ft);
    model.jacobian_with(t, theta, &mut b.blocks, &mut b.jac);
    let mut drift_term = 0.0;
    for r in 0..nd {
        let lin: f64 = (0..nd).map(|c| b.jac[r * nd + c] * (x[c] - theta[c])).sum();
        drift_term += (b.fx[r] - b.ft[r] - lin) * dv.grad_log[r];
    }
    let mut trace_term = 0.0;
    if !model.has_constant_diffusion() {
        model.diffusion(t, x, &mut b.sx);
        model.diffusion(t, theta, &mut b.st);
        gram_dd(&b.sx, d, &mut b.ax);
        gram_dd(&b.st, d, &mut b.at);
        for a in 0..d {
            for c in 0..d {
                let hess = dv.grad_log[a] * dv.grad_log[c] - dv.info1[a * d + c];
                trace_term += (b.ax[a * d + c] - b.at[a * d + c]) * hess;
            }
        }
        trace_term *= 0.5;
    }
    dv.density * (drift_term + trace_term)
}

fn gram_dd(s: &[f64], d: usize, out: &mut [f64]) {
    for a in 0..d {
        for c in 0..d {
            out[a * d + c] = (0..d).map(|l| s[a * d + l] * s[c * d + l]).sum();
        }
    }
}

/// `H(t,s,x,y) = (L_t - L̃_t^{s,y}) p̃^{s,y}(t,s,·,y)(x)`: the drift difference
/// `F(x) - F(θ) - DF(θ)(x-θ)` against `∇_x p̃`, plus half the trace of
/// `(a(x) - a(θ)) D²_{x_1} p̃`, with `θ = θ_{t,s}(y)`.
pub fn parametrix_kernel_h(
    model: &ChainModel,
    t: f64,
    s: f64,
    x: &[f64],
    y: &[f64],
    cfg: &ProxyConfig,
) -> Result<f64> {
    model.check_dim(x)?;
    model.check_dim(y)?;
    if !(t < s) {
        return Err(invalid(format!("H needs t < s, got t={t}, s={s}")));
    }
    let proxy = build_proxy(model, y, s, t, cfg)?;
    let v = h_from_proxy(model, &proxy, t, x, &mut HBufs::new(model));
    if !v.is_finite() {
        return Err(Error::Numerical(format!("non-finite H at t={t}, s={s}")));
    }
    Ok(v)
}

// ---------------------------------------------------------------------------
// Norm estimates

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NormEstimate {
    pub horizon: f64,
    /// `‖Tf‖ / ‖f‖` maximized over the inputs (or the single ratio).
    pub estimate: f64,
    pub ratios: Vec<f64>,
    /// Worst `1 - ∫ p̃ dy` over all inner `y` grids.
    pub mass_deficit: f64,
    pub time_nodes: usize,
    pub space_nodes: usize,
}

/// Evaluates `values[(t,x)][k]` for every outer grid node in parallel.
fn outer_map<G>(grid: &GridSpec, width: usize, g: G) -> Result<(Vec<Vec<f64>>, f64)>
where
    G: Fn(f64, &[f64]) -> Result<(Vec<f64>, f64)> + Sync + Send,
{
    let times = grid.times();
    let (nodes, _) = grid.space_grid();
    let nd = grid.nd();
    let nx = nodes.len() / nd;
    let out = exec::try_map_indexed(times.len() * nx, grid.exec, |idx| {
        let (a, b) = (idx / nx, idx % nx);
        g(times[a], &nodes[b * nd..(b + 1) * nd])
    })?;
    let deficit = out.iter().map(|o| o.1).fold(f64::NEG_INFINITY, f64::max);
    let cols = (0..width)
        .map(|k| out.iter().map(|o| o.0[k]).collect())
        .collect();
    Ok((cols, deficit))
}

/// Lower bound on `‖R‖_{L^{q'}L^{p'} → L^{q'}L^{p'}}` over `[0, T]`, as the max of
/// `‖Rf‖/‖f‖` over `dictionary`, with `Rf(t,x) = ∫_t^T ∫ H(t,s,x,y) f(s,y) dy ds`.
/// `H` values are shared across the dictionary.
pub fn estimate_r_opnorm(
    model: &ChainModel,
    big_t: f64,
    grid: &GridSpec,
    dictionary: &[TestFunction],
) -> Result<NormEstimate> {
    if dictionary.is_empty() {
        return Err(invalid("empty test dictionary"));
    }
    let grid = grid.at_horizon(big_t)?;
    grid.check_model(model)?;
    for f in dictionary {
        f.validate(model.nd())?;
    }
    let quad = &grid.kernel;
    let width = dictionary.len();
    let (cols, deficit) = outer_map(&grid, width, |t, x| {
        if t >= big_t {
            return Ok((vec![0.0; width], 0.0));
        }
        let mut bufs = HBufs::new(model);
        let mut acc = vec![Vec::with_capacity(quad.time_nodes); width];
        let mut worst = f64::NEG_INFINITY;
        for (s, w) in sqrt_time_rule(t, big_t, quad.time_nodes) {
            let (nodes, weights) = kernel_grid(model, x, t, s, quad.box_sd, quad.points_per_dim, &quad.proxy)?;
            let nd = model.nd();
            let mut per_f = vec![Vec::with_capacity(weights.len()); width];
            let mut mass = Vec::with_capacity(weights.len());
            for (k, wy) in weights.iter().enumerate() {
                let y = &nodes[k * nd..(k + 1) * nd];
                let proxy = build_proxy(model, y, s, t, &quad.proxy)?;
                let h = h_from_proxy(model, &proxy, t, x, &mut bufs);
                mass.push(wy * proxy.density(x, y));
                for (j, f) in dictionary.iter().enumerate() {
                    per_f[j].push(wy * h * f.eval(s, y));
                }
            }
            worst = worst.max(1.0 - pairwise_sum(&mass));
            for j in 0..width {
                acc[j].push(w * pairwise_sum(&per_f[j]));
            }
        }
        Ok((acc.iter().map(|v| pairwise_sum(v)).collect(), worst))
    })?;
    let times = grid.times();
    let (_, sw) = grid.space_grid();
    let ratios: Vec<f64> = dictionary
        .iter()
        .enumerate()
        .map(|(j, f)| {
            let num = mixed_norm(&cols[j], &times, &sw, grid.p_prime, grid.q_prime);
            let den = f.grid_norm(&grid, grid.p_prime, grid.q_prime);
            if den > 0.0 {
                num / den
            } else {
                0.0
            }
        })
        .collect();
    for r in &ratios {
        if !r.is_finite() {
            return Err(Error::Numerical("non-finite R norm ratio".into()));
        }
    }
    Ok(NormEstimate {
        horizon: big_t,
        estimate: ratios.iter().copied().fold(0.0, f64::max),
        ratios,
        mass_deficit: deficit,
        time_nodes: grid.time_nodes,
        space_nodes: grid.space_nodes,
    })
}

/// Grid values and `L^{q'}L^{p'}` norm ratio `‖N_γ f‖/‖f‖` of
/// `N_γ f(t,x) = ∫_t^T (s-t)^{-γ} ∫ p̃ |f| dy ds`. The proxy density replaces the
/// Gaussian envelope so that `γ = 0` is exactly the Green function of `|f|`.
pub fn singular_green_norm(
    model: &ChainModel,
    gamma_exp: f64,
    f: &TestFunction,
    grid: &GridSpec,
) -> Result<NormEstimate> {
    if !(0.0..1.0).contains(&gamma_exp) {
        return Err(invalid(format!(
            "singular exponent must lie in [0, 1), got {gamma_exp}; the endpoint γ = 1 diverges"
        )));
    }
    grid.check_model(model)?;
    f.validate(model.nd())?;
    let big_t = grid.horizon;
    let absf = f.abs();
    let den = f.grid_norm(grid, grid.p_prime, grid.q_prime);
    if f.is_zero() || den == 0.0 {
        return Ok(NormEstimate {
            horizon: big_t,
            estimate: 0.0,
            ratios: vec![0.0],
            mass_deficit: 0.0,
            time_nodes: grid.time_nodes,
            space_nodes: grid.space_nodes,
        });
    }
    let (cols, deficit) = outer_map(grid, 1, |t, x| {
        let (v, def) = singular_green_point(model, &absf, gamma_exp, t, x, big_t, &grid.kernel)?;
        Ok((vec![v], def))
    })?;
    let (_, sw) = grid.space_grid();
    let num = mixed_norm(&cols[0], &grid.times(), &sw, grid.p_prime, grid.q_prime);
    Ok(NormEstimate {
        horizon: big_t,
        estimate: num / den,
        ratios: vec![num / den],
        mass_deficit: deficit,
        time_nodes: grid.time_nodes,
        space_nodes: grid.space_nodes,
    })
}

/// Ratio `‖u_{F1}‖ / (‖F1‖·‖f‖)` in `L^q([0,T], L^p)` for
/// `u_{F1}(t,x) = F1(t,x) ∫_t^T (s-t)^{-1/2} ∫ p̃ f dy ds`.
pub fn refined_uf1_norm(
    model: &ChainModel,
    f1: &TestFunction,
    f: &TestFunction,
    p: f64,
    q: f64,
    big_t: f64,
    grid: &GridSpec,
) -> Result<NormEstimate> {
    let idx = integrability_index(model.n(), model.d(), p, q);
    if !(p >= 2.0 && q > 2.0 && idx < 1.0) {
        return Err(Error::ExponentGate(format!(
            "need p ≥ 2, q > 2 and n²d/p + 2/q < 1; got p={p}, q={q}, n²d/p + 2/q = {idx}"
        )));
    }
    let grid = grid.at_horizon(big_t)?;
    grid.check_model(model)?;
    f1.validate(model.nd())?;
    f.validate(model.nd())?;
    let zero = NormEstimate {
        horizon: big_t,
        estimate: 0.0,
        ratios: vec![0.0],
        mass_deficit: 0.0,
        time_nodes: grid.time_nodes,
        space_nodes: grid.space_nodes,
    };
    if f1.is_zero() || f.is_zero() {
        return Ok(zero);
    }
    let (cols, deficit) = outer_map(&grid, 1, |t, x| {
        let a = f1.eval(t, x);
        if a == 0.0 {
            return Ok((vec![0.0], f64::NEG_INFINITY));
        }
        let (v, def) = singular_green_point(model, f, 0.5, t, x, big_t, &grid.kernel)?;
        Ok((vec![a * v], def))
    })?;
    let (_, sw) = grid.space_grid();
    let num = mixed_norm(&cols[0], &grid.times(), &sw, p, q);
    let den = f1.grid_norm(&grid, p, q) * f.grid_norm(&grid, p, q);
    let ratio = if den > 0.0 { num / den } else { 0.0 };
    Ok(NormEstimate {
        estimate: ratio,
        ratios: vec![ratio],
        mass_deficit: deficit.max(0.0),
        ..zero
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NormSweepRow {
    pub horizon: f64,
    /// `gamma=…`, `p=…;q=…` or `R`.
    pub parameter: String,
    pub estimate: f64,
    pub time_nodes: usize,
    pub space_nodes: usize,
    pub mass_deficit: f64,
}

impl NormSweepRow {
    pub fn from_estimate(parameter: impl Into<String>, e: &NormEstimate) -> Self {
        NormSweepRow {
            horizon: e.horizon,
            parameter: parameter.into(),
            estimate: e.estimate,
            time_nodes: e.time_nodes,
            space_nodes: e.space_nodes,
            mass_deficit: e.mass_deficit,
        }
    }
}

pub fn write_norm_sweep_csv<W: Write>(rows: &[NormSweepRow], mut w: W) -> Result<()> {
    writeln!(w, "T,parameter,estimate,time_nodes,space_nodes,mass_deficit")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.horizon, r.parameter, r.estimate, r.time_nodes, r.space_nodes, r.mass_deficit
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain_model::{build_kolmogorov_chain, build_power_chain, HolderMatrix};

    fn grid(horizon: f64) -> GridSpec {
        GridSpec::new(2, 1, horizon, 3, vec![1.0, 1.0], 3, 4.0, 4.0).unwrap()
    }

    #[test]
    fn gate_is_checked() {
        let err = GridSpec::new(2, 1, 1.0, 3, vec![1.0, 1.0], 3, 2.0, 2.0).unwrap_err();
        assert!(matches!(err, Error::ExponentGate(_)));
        assert!(GridSpec::new(3, 2, 1.0, 3, vec![1.0; 3], 3, 40.0, 40.0).is_err());
    }

    #[test]
    fn singular_rule_integrates_power() {
        // ∫_0^1 s^{-1/2} ds = 2, ∫_0^1 s^{-0.3} s ds = 1/1.7
        let r = singular_time_rule(0.0, 1.0, 0.5, 4);
        assert!((r.iter().map(|(_, w)| w).sum::<f64>() - 2.0).abs() < 1e-13);
        let r = singular_time_rule(0.0, 1.0, 0.3, 12);
        let v: f64 = r.iter().map(|(s, w)| w * s).sum();
        assert!((v - 1.0 / 1.7).abs() < 1e-6);
    }

    #[test]
    fn green_of_one_is_duration() {
        let m = build_kolmogorov_chain(2, 1, 1.0).unwrap();
        let g = green_apply(&m, &TestFunction::Constant { value: 1.0 }, 0.1, &[0.2, -0.1], 0.6, &grid(0.6)).unwrap();
        assert!((g - 0.5).abs() < 5e-3, "{g}");
    }

    #[test]
    fn h_vanishes_on_linear_model() {
        let m = build_kolmogorov_chain(2, 1, 1.0).unwrap();
        let h = parametrix_kernel_h(&m, 0.0, 0.3, &[0.1, 0.2], &[0.3, -0.1], &ProxyConfig::fast()).unwrap();
        assert!(h.abs() < 1e-12);
    }

    #[test]
    fn h_keeps_only_trace_term_for_variable_sigma() {
        let m = build_kolmogorov_chain(2, 1, 1.0)
            .unwrap()
            .with_diffusion(|_t, x, out| out[0] = 1.0 + 0.5 * x[1].sin());
        let cfg = ProxyConfig::fast();
        let proxy = build_proxy(&m, &[0.2, 0.4], 0.5, 0.0, &cfg).unwrap();
        let x = [0.3, 0.1];
        let theta = proxy.theta_start().to_vec();
        let dv = proxy.x_derivatives(&x, &proxy.y);
        let a = |v: f64| (1.0 + 0.5 * v.sin()).powi(2);
        let expect = 0.5 * (a(x[1]) - a(theta[1])) * dv.density * (dv.grad_log[0].powi(2) - dv.info1[0]);
        let h = parametrix_kernel_h(&m, 0.0, 0.5, &x, &[0.2, 0.4], &cfg).unwrap();
        assert!((h - expect).abs() < 1e-12 * expect.abs().max(1.0));
    }

    #[test]
    fn mixed_norm_of_constant() {
        let times = linspace(0.0, 2.0, 5);
        let w = trapezoid_weights(&linspace(-1.0, 1.0, 9));
        let v = vec![3.0; 45];
        let nrm = mixed_norm(&v, &times, &w, 2.0, 4.0);
        // (2 · (9·2)^{2})^{1/4}
        assert!((nrm - (2.0 * 18f64.powi(2)).powf(0.25)).abs() < 1e-12);
    }

    #[test]
    fn analytic_norms_match_grid() {
        let g = GridSpec::new(2, 1, 1.0, 3, vec![4.0, 4.0], 81, 3.0, 4.0).unwrap();
        let f = TestFunction::gaussian(vec![0.1, 0.0], 0.5);
        let a = f.norm_analytic(2, 3.0, 3.0, 0.0, 1.0).unwrap();
        assert!((a - f.grid_norm(&g, 3.0, 3.0)).abs() < 1e-6 * a);
        let sp = TestFunction::SeparableProduct {
            centers: vec![0.0, 0.0],
            widths: vec![0.4, 0.7],
            time_rate: 0.5,
            amplitude: 2.0,
        };
        let g = GridSpec::new(2, 1, 1.0, 201, vec![4.0, 5.0], 81, 3.0, 4.0).unwrap();
        let a = sp.norm_analytic(2, 3.0, 3.0, 0.0, 1.0).unwrap();
        assert!((a - sp.grid_norm(&g, 3.0, 3.0)).abs() < 1e-4 * a);
    }

    #[test]
    fn uf1_gate_and_zero() {
        let m = build_power_chain(2, 1, &HolderMatrix::uniform(2, 0.8), (2, 2), 1.0).unwrap();
        let f = TestFunction::gaussian(vec![0.0, 0.0], 0.3);
        // 4/5 + 2/5 = 1.2
        let err = refined_uf1_norm(&m, &f, &f, 5.0, 5.0, 0.5, &grid(0.5)).unwrap_err();
        assert!(matches!(err, Error::ExponentGate(_)));
        let zero = TestFunction::Constant { value: 0.0 };
        assert_eq!(refined_uf1_norm(&m, &zero, &f, 10.0, 10.0, 0.5, &grid(0.5)).unwrap().estimate, 0.0);
        assert_eq!(singular_green_norm(&m, 0.5, &zero, &grid(0.5)).unwrap().estimate, 0.0);
        assert!(singular_green_norm(&m, 1.0, &f, &grid(0.5)).is_err());
    }
}
