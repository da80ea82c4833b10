//! Frozen Gaussian proxy: the linearization of the chain along the backward
//! flow `θ_{·,T}(y)`, its resolvent, covariance `K̃`, affine mean map and
//! density, plus probes of the good scaling property, gradient bounds and
//! Dirac convergence.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::chain_model::{ChainModel, ScaleProfile};
use crate::dense;
use crate::error::{invalid, Error, Result};
use crate::exec::{self, pairwise_sum, Exec};
use crate::flow_engine::{integrate_flow, Direction, FlowOptions, FlowPath, Mesh};
use crate::quad::{linspace, simpson_weights, trapezoid_weights};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProxyConfig {
    /// Total RK4 steps for the flow and the resolvent sweep (rounded up to a
    /// multiple of the Simpson intervals).
    pub flow_steps: usize,
    /// Composite Simpson nodes for the covariance and mean integrals (odd).
    pub quad_nodes: usize,
    /// Diagonal jitter added before the Cholesky factorization; 0 disables it.
    pub jitter: f64,
    /// Record the worst `|det R̃ - 1|` over the resolvent nodes.
    pub check_determinant: bool,
}

impl Default for ProxyConfig {
    fn default() -> Self {
        ProxyConfig {
            flow_steps: 200,
            quad_nodes: 65,
            jitter: 0.0,
            check_determinant: true,
        }
    }
}

impl ProxyConfig {
    /// Coarser settings for the nested kernel quadratures, where one proxy is
    /// built per quadrature node.
    pub fn fast() -> Self {
        ProxyConfig {
            flow_steps: 32,
            quad_nodes: 9,
            jitter: 0.0,
            check_determinant: false,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.quad_nodes < 3 || self.quad_nodes.is_multiple_of(2) {
            return Err(invalid("quad_nodes must be odd and at least 3"));
        }
        if self.flow_steps == 0 {
            return Err(invalid("flow_steps must be positive"));
        }
        if !(self.jitter >= 0.0) {
            return Err(invalid("jitter must be non-negative"));
        }
        Ok(())
    }

    fn substeps(&self) -> usize {
        self.flow_steps.div_ceil(self.quad_nodes - 1).max(1)
    }
}

/// `Q(s) = R̃(v, s)` recorded at equispaced nodes of `[lo, v]`.
struct Sweep {
    node_times: Vec<f64>,
    q: Vec<f64>,
    theta: Vec<f64>,
}

struct SweepBufs {
    theta: Vec<f64>,
    blocks: Vec<f64>,
    j0: Vec<f64>,
    jm: Vec<f64>,
    j1: Vec<f64>,
    k: [Vec<f64>; 4],
    qt: Vec<f64>,
}

impl SweepBufs {
    fn new(model: &ChainModel) -> Self {
        let (n, d, nd) = (model.n(), model.d(), model.nd());
        let sq = nd * nd;
        SweepBufs {
            theta: vec![0.0; nd],
            blocks: vec![0.0; n.saturating_sub(1) * d * d],
            j0: vec![0.0; sq],
            jm: vec![0.0; sq],
            j1: vec![0.0; sq],
            k: [vec![0.0; sq], vec![0.0; sq], vec![0.0; sq], vec![0.0; sq]],
            qt: vec![0.0; sq],
        }
    }
}

fn jac_at(model: &ChainModel, flow: &FlowPath, s: f64, b: &mut SweepBufs, which: u8) -> Result<()> {
    flow.state_at(s, &mut b.theta)?;
    let out = match which {
        0 => &mut b.j0,
        1 => &mut b.jm,
        _ => &mut b.j1,
    };
    model.jacobian_with(s, &b.theta, &mut b.blocks, out);
    Ok(())
}

/// Integrates `∂_s Q = -Q J(s)` from `Q(v) = I` down to `lo`.
fn resolvent_sweep(
    model: &ChainModel,
    flow: &FlowPath,
    lo: f64,
    v: f64,
    nodes: usize,
    substeps: usize,
) -> Result<Sweep> {
    if !flow.covers(lo, v) {
        return Err(Error::FlowCoverage {
            have_lo: flow.t0,
            have_hi: flow.t1,
            want_lo: lo,
            want_hi: v,
        });
    }
    let nd = model.nd();
    let sq = nd * nd;
    let total = (nodes - 1) * substeps;
    let grid = |j: usize| lo + (v - lo) * (j as f64 / total as f64);
    let node_times = linspace(lo, v, nodes);
    let mut q_nodes = vec![0.0; nodes * sq];
    let mut theta = vec![0.0; nodes * nd];
    let mut q = dense::identity(nd);
    let mut b = SweepBufs::new(model);
    q_nodes[(nodes - 1) * sq..].copy_from_slice(&q);
    flow.state_at(v, &mut theta[(nodes - 1) * nd..])?;
    jac_at(model, flow, v, &mut b, 0)?;
    for jj in (1..=total).rev() {
        let (s0, s1) = (grid(jj), grid(jj - 1));
        let h = s1 - s0;
        jac_at(model, flow, 0.5 * (s0 + s1), &mut b, 1)?;
        jac_at(model, flow, s1, &mut b, 2)?;
        let SweepBufs {
            j0, jm, j1, k, qt, ..
        } = &mut b;
        let [k1, k2, k3, k4] = k;
        neg_matmul(&q, j0, nd, k1);
        axpy_into(&q, 0.5 * h, k1, qt);
        neg_matmul(qt, jm, nd, k2);
        axpy_into(&q, 0.5 * h, k2, qt);
        neg_matmul(qt, jm, nd, k3);
        axpy_into(&q, h, k3, qt);
        neg_matmul(qt, j1, nd, k4);
        for c in 0..sq {
            q[c] += h / 6.0 * (k1[c] + 2.0 * k2[c] + 2.0 * k3[c] + k4[c]);
        }
        std::mem::swap(&mut b.j0, &mut b.j1);
        if (jj - 1) % substeps == 0 {
            let node = (jj - 1) / substeps;
            q_nodes[node * sq..(node + 1) * sq].copy_from_slice(&q);
            flow.state_at(node_times[node], &mut theta[node * nd..(node + 1) * nd])?;
        }
    }
    Ok(Sweep {
        node_times,
        q: q_nodes,
        theta,
    })
}

#[inline]
fn neg_matmul(a: &[f64], b: &[f64], n: usize, out: &mut [f64]) {
    dense::matmul(a, b, n, n, n, out);
    for v in out.iter_mut() {
        *v = -*v;
    }
}

#[inline]
fn axpy_into(x: &[f64], a: f64, y: &[f64], out: &mut [f64]) {
    for c in 0..x.len() {
        out[c] = x[c] + a * y[c];
    }
}

/// Simpson Gram quadrature of `∫ Q(s) B a(s) B* Q(s)* ds`.
fn gram(model: &ChainModel, sw: &Sweep) -> Vec<f64> {
    let (d, nd) = (model.d(), model.nd());
    let nodes = sw.node_times.len();
    let w = simpson_weights(nodes, sw.node_times[0], sw.node_times[nodes - 1]);
    let mut k = vec![0.0; nd * nd];
    let mut sig = vec![0.0; d * d];
    let mut g = vec![0.0; nd * d];
    for node in 0..nodes {
        let s = sw.node_times[node];
        let q = &sw.q[node * nd * nd..(node + 1) * nd * nd];
        model.diffusion(s, &sw.theta[node * nd..(node + 1) * nd], &mut sig);
        for r in 0..nd {
            for c in 0..d {
                let mut acc = 0.0;
                for l in 0..d {
                    acc += q[r * nd + l] * sig[l * d + c];
                }
                g[r * d + c] = acc;
            }
        }
        for r in 0..nd {
            for c in 0..nd {
                let mut acc = 0.0;
                for l in 0..d {
                    acc += g[r * d + l] * g[c * d + l];
                }
                k[r * nd + c] += w[node] * acc;
            }
        }
    }
    k
}

fn min_eigenvalue(k: &[f64], nd: usize) -> f64 {
    SymmetricEigen::new(DMatrix::from_row_slice(nd, nd, k))
        .eigenvalues
        .min()
}

/// `R̃(s, t)` solving `∂_s R̃ = DF(s, θ_s) R̃`, `R̃(t, t) = I`, with `steps` RK4 steps.
pub fn compute_resolvent(
    model: &ChainModel,
    flow: &FlowPath,
    s: f64,
    t: f64,
    steps: usize,
) -> Result<DMatrix<f64>> {
    let nd = model.nd();
    if !flow.covers(s.min(t), s.max(t)) {
        return Err(Error::FlowCoverage {
            have_lo: flow.t0,
            have_hi: flow.t1,
            want_lo: s.min(t),
            want_hi: s.max(t),
        });
    }
    if steps == 0 {
        return Err(invalid("resolvent needs at least one step"));
    }
    let mut r = dense::identity(nd);
    if s == t {
        return Ok(DMatrix::from_row_slice(nd, nd, &r));
    }
    let mut b = SweepBufs::new(model);
    let grid = |j: usize| t + (s - t) * (j as f64 / steps as f64);
    jac_at(model, flow, t, &mut b, 0)?;
    let sq = nd * nd;
    for jj in 0..steps {
        let (u0, u1) = (grid(jj), grid(jj + 1));
        let h = u1 - u0;
        jac_at(model, flow, 0.5 * (u0 + u1), &mut b, 1)?;
        jac_at(model, flow, u1, &mut b, 2)?;
        let SweepBufs {
            j0, jm, j1, k, qt, ..
        } = &mut b;
        let [k1, k2, k3, k4] = k;
        dense::matmul(j0, &r, nd, nd, nd, k1);
        axpy_into(&r, 0.5 * h, k1, qt);
        dense::matmul(jm, qt, nd, nd, nd, k2);
        axpy_into(&r, 0.5 * h, k2, qt);
        dense::matmul(jm, qt, nd, nd, nd, k3);
        axpy_into(&r, h, k3, qt);
        dense::matmul(j1, qt, nd, nd, nd, k4);
        for c in 0..sq {
            r[c] += h / 6.0 * (k1[c] + 2.0 * k2[c] + 2.0 * k3[c] + k4[c]);
        }
        std::mem::swap(&mut b.j0, &mut b.j1);
    }
    Ok(DMatrix::from_row_slice(nd, nd, &r))
}

/// `K̃ = ∫_t^v R̃(v,s) B a(s, θ_s) B* R̃(v,s)* ds` by composite Simpson on
/// `quad_nodes` nodes, with the resolvent from one RK4 sweep of about `rk_steps` steps.
pub fn compute_covariance(
    model: &ChainModel,
    flow: &FlowPath,
    t: f64,
    v: f64,
    quad_nodes: usize,
    rk_steps: usize,
) -> Result<DMatrix<f64>> {
    let nd = model.nd();
    if v == t {
        return Ok(DMatrix::zeros(nd, nd));
    }
    if !(t < v) {
        return Err(invalid(format!("covariance needs t < v, got t={t}, v={v}")));
    }
    let cfg = ProxyConfig {
        flow_steps: rk_steps,
        quad_nodes,
        ..ProxyConfig::default()
    };
    cfg.validate()?;
    let sw = resolvent_sweep(model, flow, t, v, quad_nodes, cfg.substeps())?;
    let k = gram(model, &sw);
    let lmin = min_eigenvalue(&k, nd);
    if !(lmin > 0.0) {
        return Err(Error::NotPositiveDefinite {
            min_eigenvalue: lmin,
        });
    }
    Ok(DMatrix::from_row_slice(nd, nd, &k))
}

#[derive(Clone, Debug)]
pub struct FrozenProxy {
    pub y: Vec<f64>,
    pub t: f64,
    pub big_t: f64,
    pub flow: FlowPath,
    /// Simpson node times for the resolvent values below.
    pub node_times: Vec<f64>,
    /// `R̃(T, s)` at each node, row-major `nd×nd` each.
    pub resolvent_nodes: Vec<f64>,
    /// Worst `|det R̃ - 1|` over the nodes, when checked.
    pub det_error: Option<f64>,
    nd: usize,
    n: usize,
    d: usize,
    k: Vec<f64>,
    r_tt: Vec<f64>,
    offset: Vec<f64>,
    chol: Vec<f64>,
    log_det: f64,
}

/// Builds the proxy frozen at `(T, y)` over `[t, T]`.
pub fn build_proxy(
    model: &ChainModel,
    y: &[f64],
    big_t: f64,
    t: f64,
    cfg: &ProxyConfig,
) -> Result<FrozenProxy> {
    model.check_dim(y)?;
    cfg.validate()?;
    if !(t < big_t) {
        if t == big_t {
            return Err(Error::Degenerate);
        }
        return Err(invalid(format!("proxy needs t < T, got t={t}, T={big_t}")));
    }
    let nd = model.nd();
    let substeps = cfg.substeps();
    let nodes = cfg.quad_nodes;
    let flow = integrate_flow(
        model,
        y,
        Direction::Backward,
        t,
        big_t,
        &FlowOptions {
            steps: (nodes - 1) * substeps,
            mesh: Mesh::Uniform,
            residual: false,
        },
    )?;
    let sw = resolvent_sweep(model, &flow, t, big_t, nodes, substeps)?;
    let k = gram(model, &sw);

    // Mean offset ∫ R̃(T,s)(F(θ_s) - DF(θ_s)θ_s) ds.
    let w = simpson_weights(nodes, t, big_t);
    let mut offset = vec![0.0; nd];
    let mut f = vec![0.0; nd];
    let mut jac = vec![0.0; nd * nd];
    let mut blocks = vec![0.0; model.n().saturating_sub(1) * model.d() * model.d()];
    let mut jt = vec![0.0; nd];
    let mut rem = vec![0.0; nd];
    let mut qr = vec![0.0; nd];
    for node in 0..nodes {
        let s = sw.node_times[node];
        let th = &sw.theta[node * nd..(node + 1) * nd];
        model.drift(s, th, &mut f);
        model.jacobian_with(s, th, &mut blocks, &mut jac);
        dense::matvec(&jac, th, nd, nd, &mut jt);
        for c in 0..nd {
            rem[c] = f[c] - jt[c];
        }
        dense::matvec(&sw.q[node * nd * nd..(node + 1) * nd * nd], &rem, nd, nd, &mut qr);
        for c in 0..nd {
            offset[c] += w[node] * qr[c];
        }
    }

    let det_error = if cfg.check_determinant {
        let mut worst = 0.0f64;
        for node in 0..nodes {
            let m = DMatrix::from_row_slice(nd, nd, &sw.q[node * nd * nd..(node + 1) * nd * nd]);
            worst = worst.max((m.determinant() - 1.0).abs());
        }
        Some(worst)
    } else {
        None
    };

    let mut chol = k.clone();
    if cfg.jitter > 0.0 {
        for c in 0..nd {
            chol[c * nd + c] += cfg.jitter;
        }
    }
    if dense::cholesky(&mut chol, nd).is_err() {
        return Err(Error::NotPositiveDefinite {
            min_eigenvalue: min_eigenvalue(&k, nd),
        });
    }
    let log_det = 2.0 * (0..nd).map(|c| chol[c * nd + c].ln()).sum::<f64>();
    let r_tt = sw.q[..nd * nd].to_vec();
    Ok(FrozenProxy {
        y: y.to_vec(),
        t,
        big_t,
        flow,
        node_times: sw.node_times,
        resolvent_nodes: sw.q,
        det_error,
        nd,
        n: model.n(),
        d: model.d(),
        k,
        r_tt,
        offset,
        chol,
        log_det,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProxyDump {
    pub y: Vec<f64>,
    pub t: f64,
    pub big_t: f64,
    pub covariance: Vec<Vec<f64>>,
    pub resolvent_endpoint: Vec<Vec<f64>>,
    pub mean_offset: Vec<f64>,
    pub det_error: Option<f64>,
}

fn rows(v: &[f64], nd: usize) -> Vec<Vec<f64>> {
    v.chunks(nd).map(|r| r.to_vec()).collect()
}

impl FrozenProxy {
    pub fn nd(&self) -> usize {
        self.nd
    }

    pub fn duration(&self) -> f64 {
        self.big_t - self.t
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.nd, self.nd, &self.k)
    }

    /// `R̃(T, t)`.
    pub fn resolvent_endpoint(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.nd, self.nd, &self.r_tt)
    }

    pub fn mean_offset(&self) -> &[f64] {
        &self.offset
    }

    /// `θ_{t,T}(y)`, the flow at the initial time.
    pub fn theta_start(&self) -> &[f64] {
        self.flow.endpoint()
    }

    /// `θ̃_{T,t}(x) = R̃(T,t) x + offset`.
    pub fn mean_map(&self, x: &[f64], out: &mut [f64]) {
        dense::matvec(&self.r_tt, x, self.nd, self.nd, out);
        for c in 0..self.nd {
            out[c] += self.offset[c];
        }
    }

    pub fn mean_map_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut v = vec![0.0; self.nd];
        self.mean_map(x, &mut v);
        v
    }

    /// Inverse of the mean map: `θ̃_{t,T}(y)`.
    pub fn transport_back(&self, y: &[f64]) -> Vec<f64> {
        let r = self.resolvent_endpoint();
        let rhs = DVector::from_iterator(self.nd, y.iter().zip(&self.offset).map(|(a, b)| a - b));
        let sol = r.lu().solve(&rhs).expect("unit-determinant resolvent is invertible");
        sol.iter().copied().collect()
    }

    /// Log of the Gaussian density with mean `mean_map(x)` and covariance `K̃`, at `z`.
    pub fn log_density(&self, x: &[f64], z: &[f64]) -> f64 {
        let nd = self.nd;
        let mut u = [0.0f64; 16];
        let mut heap;
        let u: &mut [f64] = if nd <= 16 {
            &mut u[..nd]
        } else {
            heap = vec![0.0; nd];
            &mut heap
        };
        self.mean_map(x, u);
        for c in 0..nd {
            u[c] = z[c] - u[c];
        }
        dense::forward_subst(&self.chol, nd, u);
        let q: f64 = u.iter().map(|v| v * v).sum();
        -0.5 * q - 0.5 * self.log_det - 0.5 * nd as f64 * LN_2PI
    }

    pub fn density(&self, x: &[f64], z: &[f64]) -> f64 {
        self.log_density(x, z).exp()
    }

    /// Density from the explicit inverse and determinant (reference form).
    pub fn density_direct(&self, x: &[f64], z: &[f64]) -> f64 {
        let k = self.covariance();
        let inv = k.clone().try_inverse().expect("positive-definite covariance");
        let m = self.mean_map_vec(x);
        let r = DVector::from_iterator(self.nd, z.iter().zip(&m).map(|(a, b)| a - b));
        let q = (r.transpose() * inv * &r)[(0, 0)];
        (2.0 * std::f64::consts::PI).powf(-0.5 * self.nd as f64) * k.determinant().powf(-0.5) * (-0.5 * q).exp()
    }

    /// `R̃(T, s_k)` at Simpson node `k`.
    pub fn resolvent_at_node(&self, k: usize) -> DMatrix<f64> {
        let sq = self.nd * self.nd;
        DMatrix::from_row_slice(self.nd, self.nd, &self.resolvent_nodes[k * sq..(k + 1) * sq])
    }

    pub fn dump(&self) -> ProxyDump {
        ProxyDump {
            y: self.y.clone(),
            t: self.t,
            big_t: self.big_t,
            covariance: rows(&self.k, self.nd),
            resolvent_endpoint: rows(&self.r_tt, self.nd),
            mean_offset: self.offset.clone(),
            det_error: self.det_error,
        }
    }

    pub(crate) fn dims(&self) -> (usize, usize) {
        (self.n, self.d)
    }

    /// Density and its analytic derivatives in the backward variable `x`.
    pub fn x_derivatives(&self, x: &[f64], y: &[f64]) -> XDerivatives {
        let nd = self.nd;
        let d = self.d;
        let mut r = self.mean_map_vec(x);
        for c in 0..nd {
            r[c] = y[c] - r[c];
        }
        let mut v = r.clone();
        dense::forward_subst(&self.chol, nd, &mut v);
        let quad: f64 = v.iter().map(|a| a * a).sum();
        dense::backward_subst_t(&self.chol, nd, &mut v);
        // ∇_x log p̃ = R̃ᵀ K̃⁻¹ (y - R̃x - m).
        let mut grad_log = vec![0.0; nd];
        for c in 0..nd {
            grad_log[c] = (0..nd).map(|k| self.r_tt[k * nd + c] * v[k]).sum();
        }
        // First diagonal block of R̃ᵀ K̃⁻¹ R̃.
        let mut info1 = vec![0.0; d * d];
        let mut w = vec![0.0; nd];
        for c in 0..d {
            for k in 0..nd {
                w[k] = self.r_tt[k * nd + c];
            }
            dense::forward_subst(&self.chol, nd, &mut w);
            dense::backward_subst_t(&self.chol, nd, &mut w);
            for a in 0..d {
                info1[a * d + c] = (0..nd).map(|k| self.r_tt[k * nd + a] * w[k]).sum();
            }
        }
        let density = (-0.5 * quad - 0.5 * self.log_det - 0.5 * nd as f64 * LN_2PI).exp();
        XDerivatives {
            density,
            grad_log,
            info1,
        }
    }
}

/// `p̃`, `∇_x log p̃` and the first diagonal block of `R̃ᵀK̃⁻¹R̃`, from which
/// `D²_{x_1} p̃ = p̃ (g₁g₁ᵀ - info1)`.
#[derive(Clone, Debug)]
pub struct XDerivatives {
    pub density: f64,
    pub grad_log: Vec<f64>,
    pub info1: Vec<f64>,
}

// ---------------------------------------------------------------------------
// Good scaling property

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GspSpectrum {
    pub duration: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
}

/// Eigen-extremes of `M = duration · T^{-1} K̃ T^{-1}`.
pub fn gsp_spectrum(k: &DMatrix<f64>, duration: f64, n: usize, d: usize) -> Result<GspSpectrum> {
    let nd = n * d;
    if k.nrows() != nd || k.ncols() != nd {
        return Err(Error::DimensionMismatch {
            expected: nd,
            got: k.nrows(),
        });
    }
    if !(duration > 0.0) {
        return Err(invalid("duration must be positive"));
    }
    let prof = ScaleProfile { u: duration, n, d };
    let m = DMatrix::from_fn(nd, nd, |r, c| duration * k[(r, c)] / (prof.factor(r) * prof.factor(c)));
    let ev = SymmetricEigen::try_new(m, f64::EPSILON, 1000)
        .ok_or_else(|| Error::Numerical("eigen-solver did not converge".into()))?
        .eigenvalues;
    if ev.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite eigenvalues".into()));
    }
    Ok(GspSpectrum {
        duration,
        lambda_min: ev.min(),
        lambda_max: ev.max(),
    })
}

// ---------------------------------------------------------------------------
// Gradient bounds

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradientReport {
    pub k: usize,
    pub block: usize,
    pub duration: f64,
    /// Decay constant `c` in `p̄_c = h^{-n²d/2} exp(-c h |T_h^{-1}(x - θ)|²)`.
    pub decay: f64,
    pub max_ratio: f64,
    pub ratios: Vec<f64>,
}

impl FrozenProxy {
    /// Default envelope decay `1 / (4 λ_max)` of the rescaled covariance in `x`.
    pub fn default_decay(&self) -> f64 {
        let r = self.resolvent_endpoint();
        let rinv = r.clone().try_inverse().expect("unit-determinant resolvent");
        let h = &rinv * self.covariance() * rinv.transpose();
        let (n, d) = self.dims();
        let s = gsp_spectrum(&h, self.duration(), n, d).expect("covariance dimensions match");
        0.25 / s.lambda_max
    }
}

/// Ratios `|D^k_{x_i} p̃| / (h^{-k(i-1/2)} p̄_c)` at probe points given in
/// rescaled coordinates: `x = θ_{t,T}(y) + h^{-1/2} T_h ζ`.
pub fn gradient_bound_probe(
    proxy: &FrozenProxy,
    k: usize,
    block: usize,
    probe_points: &[Vec<f64>],
    decay: Option<f64>,
) -> Result<GradientReport> {
    let (n, d) = proxy.dims();
    let nd = proxy.nd();
    if k > 2 {
        return Err(invalid("derivative order must be 0, 1 or 2"));
    }
    if block == 0 || block > n {
        return Err(invalid(format!("block {block} out of range 1..={n}")));
    }
    let h = proxy.duration();
    let prof = ScaleProfile { u: h, n, d };
    let decay = decay.unwrap_or_else(|| proxy.default_decay());
    let theta = proxy.theta_start().to_vec();
    let y = proxy.y.clone();
    let step = 5e-3 * h.powf(block as f64 - 0.5);
    let p = |x: &[f64]| proxy.density(x, &y);
    let mut ratios = Vec::with_capacity(probe_points.len());
    for zeta in probe_points {
        if zeta.len() != nd {
            return Err(Error::DimensionMismatch {
                expected: nd,
                got: zeta.len(),
            });
        }
        if zeta.iter().map(|v| v * v).sum::<f64>().sqrt() > 5.0 + 1e-12 {
            return Err(invalid("probe points must lie within 5 rescaled standard deviations"));
        }
        let x: Vec<f64> = (0..nd)
            .map(|c| theta[c] + zeta[c] * prof.factor(c) / h.sqrt())
            .collect();
        let cols: Vec<usize> = ((block - 1) * d..block * d).collect();
        for &c in &cols {
            if x[c] + step == x[c] {
                return Err(Error::StepUnderflow(step));
            }
        }
        let shift = |dx: &[(usize, f64)]| {
            let mut z = x.clone();
            for &(c, v) in dx {
                z[c] += v;
            }
            p(&z)
        };
        let mag = match k {
            0 => p(&x),
            1 => cols
                .iter()
                .map(|&c| {
                    let g = (shift(&[(c, step)]) - shift(&[(c, -step)])) / (2.0 * step);
                    g * g
                })
                .sum::<f64>()
                .sqrt(),
            _ => {
                let p0 = p(&x);
                let mut fro = 0.0;
                for &a in &cols {
                    for &b in &cols {
                        let v = if a == b {
                            (shift(&[(a, step)]) - 2.0 * p0 + shift(&[(a, -step)])) / (step * step)
                        } else {
                            (shift(&[(a, step), (b, step)]) - shift(&[(a, step), (b, -step)])
                                - shift(&[(a, -step), (b, step)])
                                + shift(&[(a, -step), (b, -step)]))
                                / (4.0 * step * step)
                        };
                        fro += v * v;
                    }
                }
                fro.sqrt()
            }
        };
        let z2: f64 = zeta.iter().map(|v| v * v).sum();
        let envelope = h.powf(-((n * n * d) as f64) / 2.0) * (-decay * z2).exp();
        let scale = h.powf(-(k as f64) * (block as f64 - 0.5));
        ratios.push(mag / (scale * envelope));
    }
    let max_ratio = ratios.iter().copied().fold(0.0, f64::max);
    Ok(GradientReport {
        k,
        block,
        duration: h,
        decay,
        max_ratio,
        ratios,
    })
}

// ---------------------------------------------------------------------------
// Dirac convergence

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DiracOptions {
    pub points_per_dim: usize,
    /// Half-width of the grid in standard deviations per coordinate.
    pub box_sd: f64,
    pub proxy: ProxyConfig,
    pub exec: Exec,
}

impl Default for DiracOptions {
    fn default() -> Self {
        DiracOptions {
            points_per_dim: 21,
            box_sd: 6.0,
            proxy: ProxyConfig::default(),
            exec: Exec::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DiracRow {
    pub eps: f64,
    pub value: f64,
    pub error: f64,
    pub mass: f64,
    /// `1 - mass` (negative when the frozen kernel carries excess mass).
    pub mass_deficit: f64,
    /// Set when `mass_deficit > 1e-2`.
    pub box_too_small: bool,
}

pub fn dirac_probe<F>(model: &ChainModel, f: F, x: &[f64], t: f64, eps_list: &[f64]) -> Result<Vec<DiracRow>>
where
    F: Fn(&[f64]) -> f64 + Sync + Send,
{
    dirac_probe_with(model, f, x, t, eps_list, &DiracOptions::default())
}

/// For each `ε`, the tensor-grid quadrature of `∫ f(y) p̃^{t+ε,y}(t, t+ε, x, y) dy`
/// with one proxy per grid node, compared to `f(x)`.
pub fn dirac_probe_with<F>(
    model: &ChainModel,
    f: F,
    x: &[f64],
    t: f64,
    eps_list: &[f64],
    opts: &DiracOptions,
) -> Result<Vec<DiracRow>>
where
    F: Fn(&[f64]) -> f64 + Sync + Send,
{
    model.check_dim(x)?;
    let nd = model.nd();
    if nd > 4 {
        return Err(invalid("dirac probe is limited to nd ≤ 4"));
    }
    if eps_list.is_empty() || eps_list.windows(2).any(|w| !(w[1] < w[0])) || eps_list.iter().any(|&e| !(e > 0.0)) {
        return Err(invalid("eps_list must be positive and strictly decreasing"));
    }
    if opts.points_per_dim < 3 {
        return Err(invalid("points_per_dim must be at least 3"));
    }
    let fx = f(x);
    let mut out = Vec::with_capacity(eps_list.len());
    for &eps in eps_list {
        let (nodes, weights) = kernel_grid(model, x, t, t + eps, opts.box_sd, opts.points_per_dim, &opts.proxy)?;
        let vals = exec::try_map_indexed(weights.len(), opts.exec, |g| -> Result<(f64, f64)> {
            let y = &nodes[g * nd..(g + 1) * nd];
            let p = build_proxy(model, y, t + eps, t, &opts.proxy)?.density(x, y);
            Ok((weights[g] * f(y) * p, weights[g] * p))
        })?;
        let value = pairwise_sum(&vals.iter().map(|v| v.0).collect::<Vec<_>>());
        let mass = pairwise_sum(&vals.iter().map(|v| v.1).collect::<Vec<_>>());
        out.push(DiracRow {
            eps,
            value,
            error: (value - fx).abs(),
            mass,
            mass_deficit: 1.0 - mass,
            box_too_small: 1.0 - mass > 1e-2,
        });
    }
    Ok(out)
}

/// Trapezoid grid around the forward flow `θ_{s,t}(x)` in the whitened
/// coordinates `y = center + L z` of the proxy frozen at the center
/// (`K̃ = L Lᵀ`), with `z ∈ [-box_sd, box_sd]^{nd}`. Whitening keeps the strongly
/// correlated blocks resolved. Returns flat nodes (`count × nd`) and weights.
pub fn kernel_grid(
    model: &ChainModel,
    x: &[f64],
    t: f64,
    s: f64,
    box_sd: f64,
    points: usize,
    cfg: &ProxyConfig,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let nd = model.nd();
    let steps = cfg.flow_steps.max(8);
    let center = integrate_flow(model, x, Direction::Forward, t, s, &FlowOptions::uniform(steps))?
        .endpoint()
        .to_vec();
    let chol = build_proxy(model, &center, s, t, cfg)?.chol;
    let jac: f64 = (0..nd).map(|c| chol[c * nd + c]).product();
    let axis = linspace(-box_sd, box_sd, points);
    let (z, mut weights) = tensor_grid(&vec![axis; nd]);
    let mut nodes = vec![0.0; z.len()];
    for (g, w) in weights.iter_mut().enumerate() {
        dense::lower_matvec(&chol, nd, &z[g * nd..(g + 1) * nd], &mut nodes[g * nd..(g + 1) * nd]);
        for c in 0..nd {
            nodes[g * nd + c] += center[c];
        }
        *w *= jac;
    }
    Ok((nodes, weights))
}

pub fn tensor_grid(axes: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let nd = axes.len();
    let aw: Vec<Vec<f64>> = axes.iter().map(|a| trapezoid_weights(a)).collect();
    let total: usize = axes.iter().map(|a| a.len()).product();
    let mut nodes = Vec::with_capacity(total * nd);
    let mut weights = Vec::with_capacity(total);
    let mut idx = vec![0usize; nd];
    for _ in 0..total {
        let mut w = 1.0;
        for c in 0..nd {
            nodes.push(axes[c][idx[c]]);
            w *= aw[c][idx[c]];
        }
        weights.push(w);
        for c in 0..nd {
            idx[c] += 1;
            if idx[c] < axes[c].len() {
                break;
            }
            idx[c] = 0;
        }
    }
    (nodes, weights)
}
