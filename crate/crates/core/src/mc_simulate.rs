//! Monte Carlo ensembles of the chain: plain Euler–Maruyama, the linearized
//! Euler scheme (coefficients frozen at the left node, linear part integrated
//! exactly), and exact linear splitting. On top of them: Krylov functionals,
//! Girsanov reweighting, the Khas'minskii exponential probe and anisotropic KDE.

use std::io::Write;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::chain_model::ChainModel;
use crate::dense;
use crate::error::{invalid, Error, Result};
use crate::exec::{self, mean_and_se, pairwise_sum, Exec};
use crate::flow_engine::Mesh;
use crate::green_kernel::{integrability_index, GridSpec, TestFunction};
use crate::quad::trapezoid_weights;
use crate::rng::NormalStream;

/// Log-weights above this are flagged as overflowing.
pub const LOG_WEIGHT_LIMIT: f64 = 700.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    #[default]
    LinearizedEuler,
    PlainEuler,
    ExactLinearSplitting,
}

impl Scheme {
    pub fn tag(self) -> &'static str {
        match self {
            Scheme::LinearizedEuler => "linearized-euler",
            Scheme::PlainEuler => "plain-euler",
            Scheme::ExactLinearSplitting => "exact-linear-splitting",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Record {
    #[default]
    Full,
    Terminal,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimOptions {
    pub mesh: Mesh,
    pub record: Record,
    /// Odd paths reuse the noise of the preceding even path with flipped sign.
    pub antithetic: bool,
    pub exec: Exec,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            mesh: Mesh::Uniform,
            record: Record::Full,
            antithetic: false,
            exec: Exec::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct PathEnsemble {
    pub model: ChainModel,
    pub scheme: Scheme,
    pub seed: u64,
    pub paths: usize,
    pub nd: usize,
    /// Simulation mesh.
    pub times: Vec<f64>,
    /// Indices into `times` of the recorded nodes.
    pub recorded: Vec<usize>,
    /// Row-major `paths × recorded × nd`.
    pub states: Vec<f64>,
    pub weights: Vec<f64>,
    /// Accumulated Girsanov log-weights, when reweighted.
    pub log_weights: Option<Vec<f64>>,
    /// Paths with a non-finite state; they are excluded from all estimators.
    pub excluded: Vec<bool>,
    /// Paths whose log-weight exceeded [`LOG_WEIGHT_LIMIT`].
    pub weight_overflow: Vec<bool>,
}

impl PathEnsemble {
    pub fn recorded_times(&self) -> Vec<f64> {
        self.recorded.iter().map(|&k| self.times[k]).collect()
    }

    pub fn state(&self, path: usize, node: usize) -> &[f64] {
        let r = self.recorded.len();
        let off = (path * r + node) * self.nd;
        &self.states[off..off + self.nd]
    }

    pub fn terminal(&self, path: usize) -> &[f64] {
        self.state(path, self.recorded.len() - 1)
    }

    pub fn excluded_count(&self) -> usize {
        self.excluded.iter().filter(|&&e| e).count()
    }

    pub fn surviving(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.paths).filter(move |&p| !self.excluded[p])
    }

    /// Weighted sample mean of `g(terminal)` with its standard error, taken as
    /// the plain mean of `w·g` over surviving paths.
    pub fn terminal_mean<G: Fn(&[f64]) -> f64>(&self, g: G) -> Result<(f64, f64)> {
        let vals: Vec<f64> = self.surviving().map(|p| self.weights[p] * g(self.terminal(p))).collect();
        if vals.is_empty() {
            return Err(Error::NoSurvivingPaths);
        }
        let (m, se) = mean_and_se(&vals);
        if !m.is_finite() {
            return Err(Error::Numerical("non-finite weighted mean".into()));
        }
        Ok((m, se))
    }

    pub fn summary(&self) -> Result<EnsembleSummary> {
        let nd = self.nd;
        let live: Vec<usize> = self.surviving().collect();
        if live.is_empty() {
            return Err(Error::NoSurvivingPaths);
        }
        let mut mean = vec![0.0; nd];
        let mut mean_se = vec![0.0; nd];
        for c in 0..nd {
            let (m, se) = self.terminal_mean(|x| x[c])?;
            mean[c] = m;
            mean_se[c] = se;
        }
        let mut cov = vec![vec![0.0; nd]; nd];
        let mut cov_se = vec![vec![0.0; nd]; nd];
        for a in 0..nd {
            for b in 0..nd {
                let vals: Vec<f64> = live
                    .iter()
                    .map(|&p| {
                        let x = self.terminal(p);
                        self.weights[p] * (x[a] - mean[a]) * (x[b] - mean[b])
                    })
                    .collect();
                let (m, se) = mean_and_se(&vals);
                let k = vals.len() as f64;
                cov[a][b] = m * k / (k - 1.0).max(1.0);
                cov_se[a][b] = se;
            }
        }
        let (wm, wse) = mean_and_se(&live.iter().map(|&p| self.weights[p]).collect::<Vec<_>>());
        Ok(EnsembleSummary {
            scheme: self.scheme.tag().into(),
            seed: self.seed,
            paths: self.paths,
            excluded: self.excluded_count(),
            weight_overflow: self.weight_overflow.iter().filter(|&&f| f).count(),
            t0: self.times[0],
            t1: *self.times.last().unwrap(),
            terminal_mean: mean,
            terminal_mean_se: mean_se,
            terminal_cov: cov,
            terminal_cov_se: cov_se,
            weight_mean: wm,
            weight_mean_se: wse,
        })
    }

    /// Long CSV: `path_id,node_time,x_1..x_nd,weight`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        write!(w, "path_id,node_time")?;
        for c in 1..=self.nd {
            write!(w, ",x_{c}")?;
        }
        writeln!(w, ",weight")?;
        let times = self.recorded_times();
        for p in self.surviving() {
            for (k, t) in times.iter().enumerate() {
                write!(w, "{p},{t}")?;
                for v in self.state(p, k) {
                    write!(w, ",{v}")?;
                }
                writeln!(w, ",{}", self.weights[p])?;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EnsembleSummary {
    pub scheme: String,
    pub seed: u64,
    pub paths: usize,
    pub excluded: usize,
    pub weight_overflow: usize,
    pub t0: f64,
    pub t1: f64,
    pub terminal_mean: Vec<f64>,
    pub terminal_mean_se: Vec<f64>,
    pub terminal_cov: Vec<Vec<f64>>,
    pub terminal_cov_se: Vec<Vec<f64>>,
    pub weight_mean: f64,
    pub weight_mean_se: f64,
}

// ---------------------------------------------------------------------------
// One-step propagators

/// `Φ₁(h) = Σ h^{k+1} J^k/(k+1)!` and `C_h = Σ_{k,l} h^{k+l+1}/(k! l! (k+l+1)) J^k B a B* (J*)^l`
/// for a nilpotent chain Jacobian `J` (`J^n = 0`).
pub fn linear_step_matrices(jac: &[f64], a: &[f64], n: usize, d: usize, h: f64) -> (Vec<f64>, Vec<f64>) {
    let nd = n * d;
    let mut powers = vec![dense::identity(nd)];
    for k in 1..n {
        let mut next = vec![0.0; nd * nd];
        dense::matmul(&powers[k - 1], jac, nd, nd, nd, &mut next);
        powers.push(next);
    }
    let mut phi = vec![0.0; nd * nd];
    let mut fact = 1.0;
    for (k, pk) in powers.iter().enumerate() {
        fact *= (k + 1) as f64;
        let c = h.powi(k as i32 + 1) / fact;
        for (o, v) in phi.iter_mut().zip(pk) {
            *o += c * v;
        }
    }
    // G_k = J^k[:, :d]; C = Σ c_kl G_k a G_lᵀ
    let ga: Vec<Vec<f64>> = powers
        .iter()
        .map(|pk| {
            let mut out = vec![0.0; nd * d];
            for r in 0..nd {
                for c in 0..d {
                    out[r * d + c] = (0..d).map(|l| pk[r * nd + l] * a[l * d + c]).sum();
                }
            }
            out
        })
        .collect();
    let mut cov = vec![0.0; nd * nd];
    let fac = |k: usize| (1..=k).map(|v| v as f64).product::<f64>();
    for k in 0..n {
        for l in 0..n {
            let c = h.powi((k + l + 1) as i32) / (fac(k) * fac(l) * (k + l + 1) as f64);
            let pl = &powers[l];
            for r in 0..nd {
                for s in 0..nd {
                    let v: f64 = (0..d).map(|m| ga[k][r * d + m] * pl[s * nd + m]).sum();
                    cov[r * nd + s] += c * v;
                }
            }
        }
    }
    (phi, cov)
}

/// A factor `L` with `L Lᵀ = C`: Cholesky, or an eigen square root when the
/// covariance is numerically singular.
fn factor(cov: &[f64], nd: usize) -> Vec<f64> {
    let mut l = cov.to_vec();
    if dense::cholesky(&mut l, nd).is_ok() {
        return l;
    }
    let eig = SymmetricEigen::new(DMatrix::from_row_slice(nd, nd, cov));
    let mut out = vec![0.0; nd * nd];
    for r in 0..nd {
        for c in 0..nd {
            out[r * nd + c] = eig.eigenvectors[(r, c)] * eig.eigenvalues[c].max(0.0).sqrt();
        }
    }
    out
}

struct Stepper<'a> {
    model: &'a ChainModel,
    scheme: Scheme,
    n: usize,
    d: usize,
    nd: usize,
    fx: Vec<f64>,
    jac: Vec<f64>,
    blocks: Vec<f64>,
    sig: Vec<f64>,
    a: Vec<f64>,
    key: Vec<f64>,
    phi: Vec<f64>,
    chol: Vec<f64>,
    tmp: Vec<f64>,
}

impl<'a> Stepper<'a> {
    fn new(model: &'a ChainModel, scheme: Scheme) -> Self {
        let (n, d, nd) = (model.n(), model.d(), model.nd());
        let mut jac = vec![0.0; nd * nd];
        if scheme == Scheme::ExactLinearSplitting {
            for r in d..nd {
                jac[r * nd + r - d] = 1.0;
            }
        }
        Stepper {
            model,
            scheme,
            n,
            d,
            nd,
            fx: vec![0.0; nd],
            jac,
            blocks: vec![0.0; n.saturating_sub(1) * d * d],
            sig: vec![0.0; d * d],
            a: vec![0.0; d * d],
            key: Vec::new(),
            phi: vec![0.0; nd * nd],
            chol: vec![0.0; nd * nd],
            tmp: vec![0.0; nd],
        }
    }

    fn per_step(&self) -> usize {
        match self.scheme {
            Scheme::PlainEuler => self.d,
            _ => self.nd,
        }
    }

    /// Advances `x` over `[t, t+h]` with standard normals `xi`; writes the
    /// first-block noise increment `B*(X' - mean)` to `noise1`.
    fn step(&mut self, t: f64, h: f64, x: &mut [f64], xi: &[f64], noise1: &mut [f64]) {
        let (d, nd) = (self.d, self.nd);
        self.model.drift(t, x, &mut self.fx);
        self.model.diffusion(t, x, &mut self.sig);
        if self.scheme == Scheme::PlainEuler {
            let sh = h.sqrt();
            for r in 0..d {
                noise1[r] = sh * (0..d).map(|c| self.sig[r * d + c] * xi[c]).sum::<f64>();
            }
            for r in 0..nd {
                x[r] += h * self.fx[r];
            }
            for r in 0..d {
                x[r] += noise1[r];
            }
            return;
        }
        if self.scheme == Scheme::LinearizedEuler {
            self.model.jacobian_with(t, x, &mut self.blocks, &mut self.jac);
        }
        for r in 0..d {
            for c in 0..d {
                self.a[r * d + c] = (0..d).map(|l| self.sig[r * d + l] * self.sig[c * d + l]).sum();
            }
        }
        let fresh = self.key.len() != nd * nd + d * d + 1
            || self.key[0] != h
            || self.key[1..1 + nd * nd] != self.jac[..]
            || self.key[1 + nd * nd..] != self.a[..];
        if fresh {
            let (phi, cov) = linear_step_matrices(&self.jac, &self.a, self.n, d, h);
            self.phi = phi;
            self.chol = factor(&cov, nd);
            self.key.clear();
            self.key.push(h);
            self.key.extend_from_slice(&self.jac);
            self.key.extend_from_slice(&self.a);
        }
        // Linear part of the frozen drift integrates to X + Φ₁ F(X) in both schemes.
        dense::matvec(&self.phi, &self.fx, nd, nd, &mut self.tmp);
        for r in 0..nd {
            x[r] += self.tmp[r];
        }
        dense::matvec(&self.chol, xi, nd, nd, &mut self.tmp);
        for r in 0..nd {
            x[r] += self.tmp[r];
        }
        noise1.copy_from_slice(&self.tmp[..d]);
    }
}

/// Exact per-step covariance of the scheme's Gaussian increment at `(t, x)`.
pub fn step_covariance(model: &ChainModel, scheme: Scheme, t: f64, h: f64, x: &[f64]) -> Result<DMatrix<f64>> {
    model.check_dim(x)?;
    let (n, d, nd) = (model.n(), model.d(), model.nd());
    let mut sig = vec![0.0; d * d];
    model.diffusion(t, x, &mut sig);
    let mut a = vec![0.0; d * d];
    for r in 0..d {
        for c in 0..d {
            a[r * d + c] = (0..d).map(|l| sig[r * d + l] * sig[c * d + l]).sum();
        }
    }
    let cov = match scheme {
        Scheme::PlainEuler => {
            let mut cov = vec![0.0; nd * nd];
            for r in 0..d {
                for c in 0..d {
                    cov[r * nd + c] = h * a[r * d + c];
                }
            }
            cov
        }
        _ => {
            let mut st = Stepper::new(model, scheme);
            if scheme == Scheme::LinearizedEuler {
                model.jacobian_with(t, x, &mut st.blocks, &mut st.jac);
            }
            linear_step_matrices(&st.jac, &a, n, d, h).1
        }
    };
    Ok(DMatrix::from_row_slice(nd, nd, &cov))
}

// ---------------------------------------------------------------------------
// Ensembles

struct PathOut {
    states: Vec<f64>,
    log_weight: f64,
    failed: bool,
}

#[allow(clippy::too_many_arguments)]
fn simulate<F1>(
    model: &ChainModel,
    x0: &[f64],
    t: f64,
    big_t: f64,
    steps: usize,
    paths: usize,
    seed: u64,
    scheme: Scheme,
    opts: &SimOptions,
    girsanov: Option<&F1>,
) -> Result<PathEnsemble>
where
    F1: Fn(f64, &[f64], &mut [f64]) + Sync,
{
    model.check_dim(x0)?;
    if steps == 0 || paths == 0 {
        return Err(invalid("steps and paths must be at least 1"));
    }
    if !(t < big_t) {
        return Err(invalid(format!("need t < T, got t={t}, T={big_t}")));
    }
    if let Mesh::Graded { exponent } = opts.mesh {
        if !(exponent > 0.0) {
            return Err(invalid("mesh grading must be positive"));
        }
    }
    let (d, nd) = (model.d(), model.nd());
    let times = opts.mesh.nodes(t, big_t, steps);
    let recorded: Vec<usize> = match opts.record {
        Record::Full => (0..=steps).collect(),
        Record::Terminal => vec![steps],
    };
    let out = exec::map_indexed(paths, opts.exec, |p| {
        let mut st = Stepper::new(model, scheme);
        let (src, mirror) = if opts.antithetic { (p / 2, p % 2 == 1) } else { (p, false) };
        let mut rng = NormalStream::new(seed, src as u64).mirrored(mirror);
        let mut xi = vec![0.0; st.per_step()];
        let mut x = x0.to_vec();
        let mut noise1 = vec![0.0; d];
        let mut states = Vec::with_capacity(recorded.len() * nd);
        if opts.record == Record::Full {
            states.extend_from_slice(&x);
        }
        let mut lw = 0.0;
        let mut f1 = vec![0.0; d];
        let mut sig = vec![0.0; d * d];
        let mut failed = false;
        for m in 0..steps {
            let (tm, h) = (times[m], times[m + 1] - times[m]);
            rng.fill(&mut xi);
            let g = girsanov.map(|f| {
                f(tm, &x, &mut f1);
                model.diffusion(tm, &x, &mut sig);
            });
            st.step(tm, h, &mut x, &xi, &mut noise1);
            if g.is_some() {
                // ΔW = σ⁻¹ · (first-block noise); θ = σ⁻¹ F1.
                let s = DMatrix::from_row_slice(d, d, &sig);
                let lu = s.lu();
                let dw = lu.solve(&nalgebra::DVector::from_column_slice(&noise1));
                let th = lu.solve(&nalgebra::DVector::from_column_slice(&f1));
                match (dw, th) {
                    (Some(dw), Some(th)) => lw += th.dot(&dw) - 0.5 * th.norm_squared() * h,
                    _ => failed = true,
                }
            }
            if x.iter().any(|v| !v.is_finite()) {
                failed = true;
            }
            if failed {
                break;
            }
            if opts.record == Record::Full {
                states.extend_from_slice(&x);
            }
        }
        if opts.record == Record::Terminal {
            states.extend_from_slice(&x);
        }
        states.resize(recorded.len() * nd, f64::NAN);
        PathOut {
            states,
            log_weight: lw,
            failed,
        }
    });
    let mut states = Vec::with_capacity(paths * recorded.len() * nd);
    let mut excluded = Vec::with_capacity(paths);
    let mut overflow = Vec::with_capacity(paths);
    let mut weights = Vec::with_capacity(paths);
    let mut lws = Vec::with_capacity(paths);
    for o in out {
        states.extend_from_slice(&o.states);
        excluded.push(o.failed);
        overflow.push(o.log_weight > LOG_WEIGHT_LIMIT);
        weights.push(o.log_weight.exp());
        lws.push(o.log_weight);
    }
    let reweighted = girsanov.is_some();
    Ok(PathEnsemble {
        model: model.clone(),
        scheme,
        seed,
        paths,
        nd,
        times,
        recorded,
        states,
        weights: if reweighted { weights } else { vec![1.0; paths] },
        log_weights: reweighted.then_some(lws),
        excluded,
        weight_overflow: overflow,
    })
}

type NoDrift = fn(f64, &[f64], &mut [f64]);

#[allow(clippy::too_many_arguments)]
pub fn euler_ensemble(
    model: &ChainModel,
    x0: &[f64],
    t: f64,
    big_t: f64,
    steps: usize,
    paths: usize,
    seed: u64,
    scheme: Scheme,
) -> Result<PathEnsemble> {
    euler_ensemble_with(model, x0, t, big_t, steps, paths, seed, scheme, &SimOptions::default())
}

#[allow(clippy::too_many_arguments)]
pub fn euler_ensemble_with(
    model: &ChainModel,
    x0: &[f64],
    t: f64,
    big_t: f64,
    steps: usize,
    paths: usize,
    seed: u64,
    scheme: Scheme,
    opts: &SimOptions,
) -> Result<PathEnsemble> {
    simulate::<NoDrift>(model, x0, t, big_t, steps, paths, seed, scheme, opts, None)
}

/// Simulates `model_driftless` (the chain without `F1`) and accumulates
/// `log M_T = Σ ⟨σ⁻¹F1, ΔW⟩ - ½ Σ |σ⁻¹F1|² Δt` along each path.
#[allow(clippy::too_many_arguments)]
pub fn girsanov_weighted_ensemble<F1>(
    model_driftless: &ChainModel,
    f1: F1,
    x0: &[f64],
    t: f64,
    big_t: f64,
    steps: usize,
    paths: usize,
    seed: u64,
    scheme: Scheme,
    opts: &SimOptions,
) -> Result<PathEnsemble>
where
    F1: Fn(f64, &[f64], &mut [f64]) + Sync,
{
    simulate(model_driftless, x0, t, big_t, steps, paths, seed, scheme, opts, Some(&f1))
}

// ---------------------------------------------------------------------------
// Krylov functional

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KrylovEstimate {
    pub value: f64,
    pub std_error: f64,
    pub f_norm: f64,
    pub bound_ratio: f64,
    pub surviving_paths: usize,
}

/// `E[∫_t^T f(s, X_s) ds]` by the trapezoid rule over the recorded nodes and the
/// weighted mean over surviving paths; `‖f‖_{L^{q'}L^{p'}}` is analytic when
/// available and otherwise taken on `norm_grid`.
pub fn krylov_functional(
    ensemble: &PathEnsemble,
    f: &TestFunction,
    p_prime: f64,
    q_prime: f64,
    norm_grid: Option<&GridSpec>,
) -> Result<KrylovEstimate> {
    let (n, d, nd) = (ensemble.model.n(), ensemble.model.d(), ensemble.nd);
    let idx = integrability_index(n, d, p_prime, q_prime);
    if !(p_prime > 1.0 && q_prime > 1.0 && idx < 2.0) {
        return Err(Error::ExponentGate(format!("n²d/p' + 2/q' = {idx} must be < 2")));
    }
    f.validate(nd)?;
    if ensemble.recorded.len() < 2 {
        return Err(invalid("krylov functional needs full path records"));
    }
    let times = ensemble.recorded_times();
    let tw = trapezoid_weights(&times);
    let ints: Vec<f64> = ensemble
        .surviving()
        .map(|p| {
            let terms: Vec<f64> = (0..times.len())
                .map(|k| tw[k] * f.eval(times[k], ensemble.state(p, k)))
                .collect();
            ensemble.weights[p] * pairwise_sum(&terms)
        })
        .collect();
    if ints.is_empty() {
        return Err(Error::NoSurvivingPaths);
    }
    let (value, std_error) = mean_and_se(&ints);
    let (t0, t1) = (times[0], *times.last().unwrap());
    let f_norm = match f.norm_analytic(nd, p_prime, q_prime, t0, t1) {
        Some(v) => v,
        None => {
            let g = norm_grid.ok_or_else(|| invalid("no closed-form norm for this test function; supply a grid"))?;
            f.grid_norm(g, p_prime, q_prime)
        }
    };
    let bound_ratio = if f_norm > 0.0 { value.abs() / f_norm } else { 0.0 };
    Ok(KrylovEstimate {
        value,
        std_error,
        f_norm,
        bound_ratio,
        surviving_paths: ints.len(),
    })
}

// ---------------------------------------------------------------------------
// Khas'minskii probe

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KhasminskiiStart {
    pub x: Vec<f64>,
    pub estimate: f64,
    pub std_error: f64,
    /// Mean of the top decile of `exp(∫|σ⁻¹F1|²)` over the overall mean (in `[1, 10]`).
    pub tail_ratio: f64,
    pub overflowed: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KhasminskiiReport {
    pub horizon: f64,
    pub estimate: f64,
    pub tail_ratio: f64,
    pub starts: Vec<KhasminskiiStart>,
}

/// For each start, `E[exp(∫_0^T |σ⁻¹F1(s, X̄_s)|² ds)]` along the `F1`-free
/// dynamics `model` (left-point rule on the simulation mesh).
#[allow(clippy::too_many_arguments)]
pub fn khasminskii_probe<F1>(
    model: &ChainModel,
    f1: F1,
    big_t: f64,
    x_samples: &[Vec<f64>],
    steps: usize,
    paths: usize,
    seed: u64,
    opts: &SimOptions,
) -> Result<KhasminskiiReport>
where
    F1: Fn(f64, &[f64], &mut [f64]) + Sync,
{
    if x_samples.is_empty() {
        return Err(invalid("khasminskii probe needs at least one start"));
    }
    let d = model.d();
    let mut sim = opts.clone();
    sim.record = Record::Full;
    let mut starts = Vec::with_capacity(x_samples.len());
    for (k, x) in x_samples.iter().enumerate() {
        let ens = euler_ensemble_with(model, x, 0.0, big_t, steps, paths, seed.wrapping_add(k as u64), Scheme::LinearizedEuler, &sim)?;
        let times = ens.recorded_times();
        let expo: Vec<f64> = exec::map_indexed(ens.paths, opts.exec, |p| {
            if ens.excluded[p] {
                return f64::NAN;
            }
            let mut f = vec![0.0; d];
            let mut sig = vec![0.0; d * d];
            let terms: Vec<f64> = (0..times.len() - 1)
                .map(|m| {
                    let xs = ens.state(p, m);
                    f1(times[m], xs, &mut f);
                    model.diffusion(times[m], xs, &mut sig);
                    let th = DMatrix::from_row_slice(d, d, &sig)
                        .lu()
                        .solve(&nalgebra::DVector::from_column_slice(&f))
                        .map(|v| v.norm_squared())
                        .unwrap_or(f64::INFINITY);
                    th * (times[m + 1] - times[m])
                })
                .collect();
            pairwise_sum(&terms)
        });
        let vals: Vec<f64> = expo.iter().filter(|v| !v.is_nan()).map(|v| v.exp()).collect();
        let overflowed = vals.iter().filter(|v| !v.is_finite()).count();
        let finite: Vec<f64> = vals.iter().copied().filter(|v| v.is_finite()).collect();
        if finite.is_empty() {
            return Err(Error::Numerical(format!("every path overflowed for start {k}")));
        }
        let (estimate, std_error) = mean_and_se(&finite);
        let mut sorted = finite.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        let top = (sorted.len() / 10).max(1);
        let tail_ratio = if estimate > 0.0 {
            pairwise_sum(&sorted[..top]) / top as f64 / estimate
        } else {
            1.0
        };
        starts.push(KhasminskiiStart {
            x: x.clone(),
            estimate: if overflowed > 0 { f64::INFINITY } else { estimate },
            std_error,
            tail_ratio,
            overflowed,
        });
    }
    Ok(KhasminskiiReport {
        horizon: big_t,
        estimate: starts.iter().map(|s| s.estimate).fold(f64::NEG_INFINITY, f64::max),
        tail_ratio: starts.iter().map(|s| s.tail_ratio).fold(f64::NEG_INFINITY, f64::max),
        starts,
    })
}

// ---------------------------------------------------------------------------
// Kernel density estimate

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "rule")]
pub enum BandwidthRule {
    /// `N^{-1/(nd+4)}` times the sample standard deviation per coordinate.
    Scott,
    /// `N^{-1/(nd+4)}` times the chain scale `(T-t)^{i-1/2}` for coordinates of block `i`.
    ScaledScott,
    Fixed { bandwidths: Vec<f64> },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DensityEstimate {
    pub axes: Vec<Vec<f64>>,
    /// Row-major over the tensor grid (first axis fastest).
    pub values: Vec<f64>,
    pub bandwidths: Vec<f64>,
    /// Trapezoid mass of the estimate over the grid.
    pub normalization: f64,
}

/// Gaussian-kernel density of the terminal law (weighted by the path weights) on
/// the tensor grid spanned by `axes`.
pub fn empirical_density(ens: &PathEnsemble, axes: &[Vec<f64>], rule: &BandwidthRule) -> Result<DensityEstimate> {
    let (d, nd) = (ens.model.d(), ens.nd);
    if axes.len() != nd {
        return Err(Error::DimensionMismatch {
            expected: nd,
            got: axes.len(),
        });
    }
    if axes.iter().any(|a| a.len() < 2) {
        return Err(invalid("empty density grid"));
    }
    let live: Vec<usize> = ens.surviving().collect();
    if live.len() < 1000 {
        return Err(invalid(format!("density estimate needs ≥ 1000 surviving paths, got {}", live.len())));
    }
    let nf = live.len() as f64;
    let scott = nf.powf(-1.0 / (nd as f64 + 4.0));
    let dur = ens.times.last().unwrap() - ens.times[0];
    let bw: Vec<f64> = match rule {
        BandwidthRule::Scott => (0..nd)
            .map(|c| {
                let xs: Vec<f64> = live.iter().map(|&p| ens.terminal(p)[c]).collect();
                let (m, _) = mean_and_se(&xs);
                let v = pairwise_sum(&xs.iter().map(|x| (x - m) * (x - m)).collect::<Vec<_>>()) / (nf - 1.0);
                scott * v.sqrt()
            })
            .collect(),
        BandwidthRule::ScaledScott => (0..nd)
            .map(|c| scott * dur.powf((c / d) as f64 + 0.5))
            .collect(),
        BandwidthRule::Fixed { bandwidths } => {
            if bandwidths.len() != nd || bandwidths.iter().any(|b| !(*b > 0.0)) {
                return Err(invalid("fixed bandwidths must be positive, one per coordinate"));
            }
            bandwidths.clone()
        }
    };
    let wsum = pairwise_sum(&live.iter().map(|&p| ens.weights[p]).collect::<Vec<_>>());
    let norm_c: f64 = bw.iter().map(|b| b * (2.0 * std::f64::consts::PI).sqrt()).product();
    let total: usize = axes.iter().map(|a| a.len()).product();
    let values = exec::map_indexed(total, Exec::default(), |g| {
        let mut idx = g;
        let mut y = [0.0f64; 8];
        for c in 0..nd {
            y[c] = axes[c][idx % axes[c].len()];
            idx /= axes[c].len();
        }
        let terms: Vec<f64> = live
            .iter()
            .map(|&p| {
                let x = ens.terminal(p);
                let e: f64 = (0..nd).map(|c| ((y[c] - x[c]) / bw[c]).powi(2)).sum();
                ens.weights[p] * (-0.5 * e).exp()
            })
            .collect();
        pairwise_sum(&terms) / (wsum * norm_c)
    });
    let aw: Vec<Vec<f64>> = axes.iter().map(|a| trapezoid_weights(a)).collect();
    let mass: Vec<f64> = (0..total)
        .map(|g| {
            let mut idx = g;
            let mut w = values[g];
            for c in 0..nd {
                w *= aw[c][idx % axes[c].len()];
                idx /= axes[c].len();
            }
            w
        })
        .collect();
    Ok(DensityEstimate {
        axes: axes.to_vec(),
        values,
        bandwidths: bw,
        normalization: pairwise_sum(&mass),
    })
}

impl DensityEstimate {
    pub fn node(&self, g: usize) -> Vec<f64> {
        let mut idx = g;
        self.axes
            .iter()
            .map(|a| {
                let v = a[idx % a.len()];
                idx /= a.len();
                v
            })
            .collect()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        for c in 1..=self.axes.len() {
            write!(w, "y_{c},")?;
        }
        writeln!(w, "density")?;
        for (g, v) in self.values.iter().enumerate() {
            for y in self.node(g) {
                write!(w, "{y},")?;
            }
            writeln!(w, "{v}")?;
        }
        Ok(())
    }
}
