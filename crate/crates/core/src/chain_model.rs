//! The degenerate chain model, its anisotropic scale geometry and sampled
//! checks of the structural assumptions.
//!
//! States are flat slices of length `n·d`; block `i` (1-based) occupies
//! `x[(i-1)d .. i·d]`. The noise enters block 1 only.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::NormalStream;

/// Evaluator `(time, state, out)`; must be a pure function of its inputs.
pub type Field = dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    KolmogorovLinear,
    PowerChain,
    Custom,
}

/// Hölder exponents `β_i^j`, 1-based, meaningful for `i ≤ j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HolderMatrix {
    n: usize,
    entries: Vec<f64>,
}

impl HolderMatrix {
    pub fn ones(n: usize) -> Self {
        Self::uniform(n, 1.0)
    }

    pub fn uniform(n: usize, beta: f64) -> Self {
        HolderMatrix {
            n,
            entries: vec![beta; n * n],
        }
    }

    /// Builds from a row-major upper-triangular list, either for rows `2..=n`
    /// (length `n(n-1)/2`) or rows `1..=n` (length `n(n+1)/2`). Row 1 defaults
    /// to ones when omitted.
    pub fn from_upper(n: usize, list: &[f64]) -> Result<Self> {
        let tail = n * (n - 1) / 2;
        let full = n * (n + 1) / 2;
        let first_row = if list.len() == full && full != tail {
            1
        } else if list.len() == tail {
            2
        } else {
            return Err(invalid(format!(
                "beta list has {} entries; expected {} (rows 2..n) or {} (rows 1..n)",
                list.len(),
                tail,
                full
            )));
        };
        let mut m = Self::ones(n);
        let mut it = list.iter();
        for i in first_row..=n {
            for j in i..=n {
                let b = *it.next().expect("length checked");
                m.set(i, j, b)?;
            }
        }
        Ok(m)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[(i - 1) * self.n + (j - 1)]
    }

    pub fn set(&mut self, i: usize, j: usize, beta: f64) -> Result<()> {
        if i == 0 || j == 0 || i > self.n || j > self.n || i > j {
            return Err(invalid(format!("Hölder index ({i},{j}) out of range for n={}", self.n)));
        }
        if !(beta > 0.0 && beta <= 1.0) {
            return Err(invalid(format!("Hölder exponent {beta} outside (0,1]")));
        }
        self.entries[(i - 1) * self.n + (j - 1)] = beta;
        Ok(())
    }
}

/// Description of the nonlinear term `amp·sign(x_j)|x_j|^β` added on level `i`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerTerm {
    pub i: usize,
    pub j: usize,
    pub beta: f64,
    pub amplitude: f64,
}

impl PowerTerm {
    /// `amp·sign(z)|z|^β` with `sign(0) = 0`.
    #[inline]
    pub fn eval(&self, z: f64) -> f64 {
        self.amplitude * signed_power(z, self.beta)
    }
}

/// `sign(z)|z|^β` with `sign(0) = 0`.
#[inline]
pub fn signed_power(z: f64, beta: f64) -> f64 {
    if z == 0.0 {
        0.0
    } else if beta == 1.0 {
        z
    } else {
        z.signum() * z.abs().powf(beta)
    }
}

#[derive(Clone)]
pub struct ChainModel {
    n: usize,
    d: usize,
    kind: ModelKind,
    holder: HolderMatrix,
    drift: Arc<Field>,
    drift_subgrad: Arc<Field>,
    diffusion: Arc<Field>,
    constant_diffusion: bool,
    power: Option<PowerTerm>,
}

impl fmt::Debug for ChainModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ChainModel")
            .field("n", &self.n)
            .field("d", &self.d)
            .field("kind", &self.kind)
            .field("power", &self.power)
            .finish_non_exhaustive()
    }
}

/// Writes `A·x` for the subdiagonal identity-block transmission matrix `A`.
#[inline]
pub fn transmission(n: usize, d: usize, x: &[f64], out: &mut [f64]) {
    out[..d].fill(0.0);
    out[d..n * d].copy_from_slice(&x[..(n - 1) * d]);
}

pub fn build_kolmogorov_chain(n: usize, d: usize, sigma_scale: f64) -> Result<ChainModel> {
    if n == 0 || d == 0 {
        return Err(invalid("n and d must be at least 1"));
    }
    if !(sigma_scale > 0.0) || !sigma_scale.is_finite() {
        return Err(invalid(format!("sigma_scale must be positive, got {sigma_scale}")));
    }
    Ok(ChainModel {
        n,
        d,
        kind: ModelKind::KolmogorovLinear,
        holder: HolderMatrix::ones(n),
        drift: Arc::new(move |_t, x, out| transmission(n, d, x, out)),
        drift_subgrad: identity_subgrad(n, d),
        diffusion: scaled_identity(d, sigma_scale),
        constant_diffusion: true,
        power: None,
    })
}

pub fn build_power_chain(
    n: usize,
    d: usize,
    beta: &HolderMatrix,
    target: (usize, usize),
    amplitude: f64,
) -> Result<ChainModel> {
    let (i, j) = target;
    if n == 0 || d == 0 {
        return Err(invalid("n and d must be at least 1"));
    }
    if beta.n() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: beta.n(),
        });
    }
    if !(2 <= i && i <= j && j <= n) {
        return Err(invalid(format!("target ({i},{j}) must satisfy 2 ≤ i ≤ j ≤ n={n}")));
    }
    let b = beta.get(i, j);
    if !(b > 0.0 && b <= 1.0) {
        return Err(invalid(format!("β_{i}^{j} = {b} outside (0,1]")));
    }
    if !amplitude.is_finite() {
        return Err(invalid("amplitude must be finite"));
    }
    let term = PowerTerm {
        i,
        j,
        beta: b,
        amplitude,
    };
    let drift = move |_t: f64, x: &[f64], out: &mut [f64]| {
        transmission(n, d, x, out);
        for c in 0..d {
            out[(i - 1) * d + c] += term.eval(x[(j - 1) * d + c]);
        }
    };
    Ok(ChainModel {
        n,
        d,
        kind: ModelKind::PowerChain,
        holder: beta.clone(),
        drift: Arc::new(drift),
        drift_subgrad: identity_subgrad(n, d),
        diffusion: scaled_identity(d, 1.0),
        constant_diffusion: true,
        power: Some(term),
    })
}

fn identity_subgrad(n: usize, d: usize) -> Arc<Field> {
    Arc::new(move |_t, _x, out| {
        out.fill(0.0);
        for blk in 0..n.saturating_sub(1) {
            for c in 0..d {
                out[blk * d * d + c * d + c] = 1.0;
            }
        }
    })
}

fn scaled_identity(d: usize, s: f64) -> Arc<Field> {
    Arc::new(move |_t, _x, out| {
        out.fill(0.0);
        for c in 0..d {
            out[c * d + c] = s;
        }
    })
}

impl ChainModel {
    /// Custom model from raw evaluators. `drift_subgrad` writes `n-1` row-major
    /// `d×d` blocks (block `k` is `D_{x_k} F_{k+1}`), `diffusion` one row-major `d×d`.
    pub fn custom<F, G, S>(
        n: usize,
        d: usize,
        drift: F,
        drift_subgrad: G,
        diffusion: S,
        holder: HolderMatrix,
    ) -> Result<Self>
    where
        F: Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static,
        G: Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static,
        S: Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static,
    {
        if n == 0 || d == 0 {
            return Err(invalid("n and d must be at least 1"));
        }
        if holder.n() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: holder.n(),
            });
        }
        Ok(ChainModel {
            n,
            d,
            kind: ModelKind::Custom,
            holder,
            drift: Arc::new(drift),
            drift_subgrad: Arc::new(drift_subgrad),
            diffusion: Arc::new(diffusion),
            constant_diffusion: false,
            power: None,
        })
    }

    /// Zero drift with identity subgradients declared (`n = 1` is plain Brownian motion).
    pub fn zero_drift(n: usize, d: usize, sigma_scale: f64) -> Result<Self> {
        let mut m = build_kolmogorov_chain(n, d, sigma_scale)?;
        m.kind = ModelKind::Custom;
        m.drift = Arc::new(|_t, _x, out| out.fill(0.0));
        m.drift_subgrad = Arc::new(|_t, _x, out| out.fill(0.0));
        Ok(m)
    }

    /// Same model with a different diffusion coefficient.
    pub fn with_diffusion<S>(&self, diffusion: S) -> Self
    where
        S: Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static,
    {
        let mut m = self.clone();
        m.kind = ModelKind::Custom;
        m.diffusion = Arc::new(diffusion);
        m.constant_diffusion = false;
        m
    }

    /// Same model with `F_1` replaced by `f1` (which writes `d` values).
    pub fn with_first_drift<F>(&self, f1: F) -> Self
    where
        F: Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static,
    {
        let base = self.drift.clone();
        let d = self.d;
        let mut m = self.clone();
        m.kind = ModelKind::Custom;
        m.drift = Arc::new(move |t, x, out| {
            base(t, x, out);
            f1(t, x, &mut out[..d]);
        });
        m
    }

    pub fn n(&self) -> usize {
        self.n
    }
    pub fn d(&self) -> usize {
        self.d
    }
    pub fn nd(&self) -> usize {
        self.n * self.d
    }
    pub fn kind(&self) -> ModelKind {
        self.kind
    }
    pub fn holder(&self) -> &HolderMatrix {
        &self.holder
    }
    pub fn power_term(&self) -> Option<PowerTerm> {
        self.power
    }
    /// True when σ is known not to depend on `(t, x)`.
    pub fn has_constant_diffusion(&self) -> bool {
        self.constant_diffusion
    }

    #[inline]
    pub fn drift(&self, t: f64, x: &[f64], out: &mut [f64]) {
        (self.drift)(t, x, out)
    }

    pub fn drift_vec(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.nd()];
        self.drift(t, x, &mut out);
        out
    }

    #[inline]
    pub fn drift_subgrad(&self, t: f64, x: &[f64], out: &mut [f64]) {
        (self.drift_subgrad)(t, x, out)
    }

    #[inline]
    pub fn diffusion(&self, t: f64, x: &[f64], out: &mut [f64]) {
        (self.diffusion)(t, x, out)
    }

    /// Full `nd×nd` row-major Jacobian `DF` assembled from the subgradient blocks.
    pub fn jacobian(&self, t: f64, x: &[f64], out: &mut [f64]) {
        let mut blocks = vec![0.0; self.n.saturating_sub(1) * self.d * self.d];
        self.jacobian_with(t, x, &mut blocks, out);
    }

    /// [`ChainModel::jacobian`] with a caller-provided subgradient buffer.
    pub fn jacobian_with(&self, t: f64, x: &[f64], blocks: &mut [f64], out: &mut [f64]) {
        let (n, d) = (self.n, self.d);
        let nd = n * d;
        out.fill(0.0);
        if n < 2 {
            return;
        }
        self.drift_subgrad(t, x, blocks);
        for b in 0..n - 1 {
            for r in 0..d {
                for c in 0..d {
                    out[((b + 1) * d + r) * nd + b * d + c] = blocks[b * d * d + r * d + c];
                }
            }
        }
    }

    pub fn jacobian_matrix(&self, t: f64, x: &[f64]) -> DMatrix<f64> {
        let nd = self.nd();
        let mut buf = vec![0.0; nd * nd];
        self.jacobian(t, x, &mut buf);
        DMatrix::from_row_slice(nd, nd, &buf)
    }

    pub fn diffusion_matrix(&self, t: f64, x: &[f64]) -> DMatrix<f64> {
        let d = self.d;
        let mut buf = vec![0.0; d * d];
        self.diffusion(t, x, &mut buf);
        DMatrix::from_row_slice(d, d, &buf)
    }

    pub(crate) fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.nd() {
            return Err(Error::DimensionMismatch {
                expected: self.nd(),
                got: x.len(),
            });
        }
        Ok(())
    }
}

/// Block-diagonal scale matrix `T_u = diag(u I, u² I, …, uⁿ I)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleProfile {
    pub u: f64,
    pub n: usize,
    pub d: usize,
}

impl ScaleProfile {
    pub fn new(u: f64, n: usize, d: usize) -> Result<Self> {
        if !(u > 0.0) {
            return Err(invalid(format!("scale u must be positive, got {u}")));
        }
        Ok(ScaleProfile { u, n, d })
    }

    /// `u^i` for the block containing coordinate `k`.
    #[inline]
    pub fn factor(&self, k: usize) -> f64 {
        self.u.powi((k / self.d + 1) as i32)
    }

    pub fn apply(&self, xi: &[f64]) -> Vec<f64> {
        xi.iter().enumerate().map(|(k, v)| v * self.factor(k)).collect()
    }

    pub fn apply_inv(&self, xi: &[f64]) -> Vec<f64> {
        xi.iter().enumerate().map(|(k, v)| v / self.factor(k)).collect()
    }
}

/// `|T_u^{-1} ξ|`.
pub fn rescaled_norm(profile: &ScaleProfile, xi: &[f64]) -> Result<f64> {
    if xi.len() != profile.n * profile.d {
        return Err(Error::DimensionMismatch {
            expected: profile.n * profile.d,
            got: xi.len(),
        });
    }
    if !(profile.u > 0.0) {
        return Err(invalid("scale u must be positive"));
    }
    Ok(xi
        .iter()
        .enumerate()
        .map(|(k, v)| {
            let r = v / profile.factor(k);
            r * r
        })
        .sum::<f64>()
        .sqrt())
}

/// Configuration-file description of a zoo model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub n: usize,
    pub d: usize,
    #[serde(default = "one")]
    pub sigma_scale: f64,
    /// Row-major upper-triangular Hölder list; a single value means "all entries".
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_i: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_j: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub amplitude: Option<f64>,
}

fn one() -> f64 {
    1.0
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            kind: ModelKind::KolmogorovLinear,
            n: 2,
            d: 1,
            sigma_scale: 1.0,
            beta: None,
            target_i: None,
            target_j: None,
            amplitude: None,
        }
    }
}

impl ModelSpec {
    pub fn holder(&self) -> Result<HolderMatrix> {
        match &self.beta {
            None => Ok(HolderMatrix::ones(self.n)),
            Some(v) if v.len() == 1 && self.n > 2 => {
                if !(v[0] > 0.0 && v[0] <= 1.0) {
                    return Err(invalid(format!("Hölder exponent {} outside (0,1]", v[0])));
                }
                Ok(HolderMatrix::uniform(self.n, v[0]))
            }
            Some(v) => HolderMatrix::from_upper(self.n, v),
        }
    }

    pub fn build(&self) -> Result<ChainModel> {
        match self.kind {
            ModelKind::KolmogorovLinear => build_kolmogorov_chain(self.n, self.d, self.sigma_scale),
            ModelKind::PowerChain => {
                let i = self.target_i.unwrap_or(2);
                let j = self.target_j.unwrap_or(i);
                let mut m = build_power_chain(
                    self.n,
                    self.d,
                    &self.holder()?,
                    (i, j),
                    self.amplitude.unwrap_or(1.0),
                )?;
                if self.sigma_scale != 1.0 {
                    if !(self.sigma_scale > 0.0) {
                        return Err(invalid("sigma_scale must be positive"));
                    }
                    m.diffusion = scaled_identity(self.d, self.sigma_scale);
                }
                Ok(m)
            }
            ModelKind::Custom => Err(invalid(
                "custom models are defined in code and cannot be built from a config block",
            )),
        }
    }
}

// ---------------------------------------------------------------------------
// Sampled assumption checks

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ValidationConfig {
    pub samples: usize,
    pub box_radius: f64,
    pub seed: u64,
    pub subgrad_floor: f64,
    /// Tolerance on empirical Hölder slopes.
    pub slope_band: f64,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        ValidationConfig {
            samples: 10_000,
            box_radius: 10.0,
            seed: 0,
            subgrad_floor: 1e-6,
            slope_band: 0.05,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HolderEstimate {
    pub i: usize,
    pub j: usize,
    pub declared: f64,
    pub estimate: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FirstDriftVerdict {
    /// (D)(a): sampled Hölder continuity.
    pub holder: bool,
    /// (D)(b): sampled boundedness (no growth between the box and its double).
    pub bounded: bool,
    /// (D)(c): sampled decay on the outer shell.
    pub integrable: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Verdicts {
    pub ue: bool,
    pub s: bool,
    pub h: bool,
    pub d: FirstDriftVerdict,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub kappa_hat: f64,
    pub ellipticity_bounds: (f64, f64),
    pub diffusion_finite: bool,
    pub subgrad_min_sv: Vec<f64>,
    pub holder_hat: Vec<HolderEstimate>,
    pub diffusion_holder_hat: f64,
    pub first_drift_holder_hat: f64,
    pub structure_ok: bool,
    pub subgrad_fd_max_rel_err: f64,
    pub verdicts: Verdicts,
}

pub fn validate_assumptions(
    model: &ChainModel,
    samples: usize,
    box_radius: f64,
    seed: u64,
) -> Result<AssumptionReport> {
    validate_assumptions_with(
        model,
        &ValidationConfig {
            samples,
            box_radius,
            seed,
            ..ValidationConfig::default()
        },
    )
}

pub fn validate_assumptions_with(
    model: &ChainModel,
    cfg: &ValidationConfig,
) -> Result<AssumptionReport> {
    if cfg.samples < 10 {
        return Err(invalid("validation needs at least 10 samples"));
    }
    if !(cfg.box_radius > 0.0) {
        return Err(invalid("box radius must be positive"));
    }
    let (n, d, nd) = (model.n(), model.d(), model.nd());
    let r = cfg.box_radius;
    let mut rng = NormalStream::new(cfg.seed, 0);
    let points: Vec<Vec<f64>> = (0..cfg.samples)
        .map(|_| (0..nd).map(|_| r * (2.0 * rng.next_uniform() - 1.0)).collect())
        .collect();

    // (UE)
    let mut sig = vec![0.0; d * d];
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    let mut finite = true;
    for x in &points {
        model.diffusion(0.0, x, &mut sig);
        if sig.iter().any(|v| !v.is_finite()) {
            finite = false;
            break;
        }
        let s = DMatrix::from_row_slice(d, d, &sig);
        let a = &s * s.transpose();
        let ev = SymmetricEigen::new(a).eigenvalues;
        lo = lo.min(ev.min());
        hi = hi.max(ev.max());
    }
    let kappa_hat = if finite && lo > 0.0 { hi / lo } else { f64::INFINITY };

    // (H)
    let mut subgrad_min_sv = vec![f64::INFINITY; n.saturating_sub(1)];
    let mut blocks = vec![0.0; n.saturating_sub(1) * d * d];
    for x in &points {
        model.drift_subgrad(0.0, x, &mut blocks);
        for (b, slot) in subgrad_min_sv.iter_mut().enumerate() {
            let m = DMatrix::from_row_slice(d, d, &blocks[b * d * d..(b + 1) * d * d]);
            let sv = m.singular_values().min();
            *slot = slot.min(if sv.is_finite() { sv } else { 0.0 });
        }
    }
    let h_ok = subgrad_min_sv.iter().all(|&s| s > cfg.subgrad_floor);

    // (S): Hölder slopes of F_i in x_j and of σ.
    let probe = HolderProbe::new(model, cfg, &mut rng);
    let mut holder_hat = Vec::new();
    for i in 2..=n {
        for j in i..=n {
            let est = probe.slope(Some(j), |x, out| {
                let mut f = vec![0.0; nd];
                model.drift(0.0, x, &mut f);
                out.copy_from_slice(&f[(i - 1) * d..i * d]);
            }, d);
            holder_hat.push(HolderEstimate {
                i,
                j,
                declared: model.holder().get(i, j),
                estimate: est,
            });
        }
    }
    let diffusion_holder_hat = if finite {
        probe.slope(None, |x, out| model.diffusion(0.0, x, out), d * d)
    } else {
        0.0
    };
    let s_ok = finite
        && diffusion_holder_hat > cfg.slope_band
        && holder_hat
            .iter()
            .all(|h| h.estimate >= h.declared - cfg.slope_band);

    // (D) for F_1.
    let first = |x: &[f64], out: &mut [f64]| {
        let mut f = vec![0.0; nd];
        model.drift(0.0, x, &mut f);
        out.copy_from_slice(&f[..d]);
    };
    let first_drift_holder_hat = (1..=n)
        .map(|j| probe.slope(Some(j), first, d))
        .fold(f64::INFINITY, f64::min);
    let sup_on = |inner: f64, outer: f64, rng: &mut NormalStream| {
        let mut best = 0.0f64;
        let mut f = vec![0.0; d];
        for _ in 0..cfg.samples.min(2000) {
            let dir: Vec<f64> = (0..nd).map(|_| rng.next_normal()).collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
            let rad = inner + (outer - inner) * rng.next_uniform();
            let x: Vec<f64> = dir.iter().map(|v| v / norm * rad).collect();
            first(&x, &mut f);
            best = best.max(f.iter().map(|v| v * v).sum::<f64>().sqrt());
        }
        best
    };
    let sup_inner = sup_on(0.0, r, &mut rng);
    let sup_double = sup_on(r, 2.0 * r, &mut rng);
    let sup_shell = sup_on(2.0 * r, 4.0 * r, &mut rng);
    let d_verdict = FirstDriftVerdict {
        holder: first_drift_holder_hat > cfg.slope_band,
        bounded: sup_double.is_finite() && sup_double <= 1.01 * sup_inner.max(1e-300) + 1e-12,
        integrable: sup_shell <= 1e-6 * sup_inner.max(1e-300) || sup_inner == 0.0,
    };

    let structure_ok = check_chain_structure(model, 100, cfg.seed ^ 0x5a5a)?;
    let subgrad_fd_max_rel_err = subgrad_consistency(model, 100, cfg.box_radius, cfg.seed ^ 0xa5a5);

    Ok(AssumptionReport {
        kappa_hat,
        ellipticity_bounds: (if finite { lo } else { f64::NAN }, if finite { hi } else { f64::NAN }),
        diffusion_finite: finite,
        subgrad_min_sv,
        holder_hat,
        diffusion_holder_hat,
        first_drift_holder_hat,
        structure_ok,
        subgrad_fd_max_rel_err,
        verdicts: Verdicts {
            ue: finite && kappa_hat.is_finite(),
            s: s_ok,
            h: h_ok,
            d: d_verdict,
        },
    })
}

/// Sup-modulus probe: for each dyadic scale `h = 2^{-k}`, the largest
/// increment over anchored base points `a + h·u` displaced by `h·v`.
struct HolderProbe {
    nd: usize,
    d: usize,
    anchors: Vec<Vec<f64>>,
    offsets: Vec<Vec<f64>>,
    directions: Vec<Vec<f64>>,
}

const HOLDER_SCALES: usize = 12;

impl HolderProbe {
    fn new(model: &ChainModel, cfg: &ValidationConfig, rng: &mut NormalStream) -> Self {
        let nd = model.nd();
        let r = cfg.box_radius;
        let mut anchors = vec![vec![0.0; nd]];
        for _ in 0..cfg.samples.min(32) {
            anchors.push((0..nd).map(|_| r * (2.0 * rng.next_uniform() - 1.0)).collect());
        }
        let offsets: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..nd).map(|_| 2.0 * rng.next_uniform() - 1.0).collect())
            .collect();
        let directions: Vec<Vec<f64>> = (0..anchors.len() * 4 * 2)
            .map(|_| (0..nd).map(|_| rng.next_normal()).collect())
            .collect();
        HolderProbe {
            nd,
            d: model.d(),
            anchors,
            offsets,
            directions,
        }
    }

    /// Slope of `log sup|Δ_h g|` against `log h`. `block = Some(j)` restricts the
    /// displacement (and zeroes the anchor) to block `j`; constant maps report 1.
    fn slope<G: Fn(&[f64], &mut [f64])>(&self, block: Option<usize>, g: G, out_len: usize) -> f64 {
        let (nd, d) = (self.nd, self.d);
        let range = match block {
            Some(j) => (j - 1) * d..j * d,
            None => 0..nd,
        };
        // Anchors on the hyperplane {x_j = 0} catch power singularities there.
        let mut anchors = self.anchors.clone();
        if block.is_some() {
            for a in &self.anchors[1..] {
                let mut b = a.clone();
                b[range.clone()].fill(0.0);
                anchors.push(b);
            }
        }
        let mut ga = vec![0.0; out_len];
        let mut gb = vec![0.0; out_len];
        let mut logs = Vec::with_capacity(HOLDER_SCALES);
        for k in 1..=HOLDER_SCALES {
            let h = 0.5f64.powi(k as i32);
            let mut sup = 0.0f64;
            for (ai, a) in anchors.iter().enumerate() {
                for (oi, u) in self.offsets.iter().enumerate() {
                    let dir = &self.directions[(ai * 4 + oi) % self.directions.len()];
                    let mut v = vec![0.0; nd];
                    for c in range.clone() {
                        v[c] = dir[c];
                    }
                    let vn = v.iter().map(|z| z * z).sum::<f64>().sqrt();
                    if vn == 0.0 {
                        continue;
                    }
                    let x: Vec<f64> = (0..nd).map(|c| a[c] + h * u[c]).collect();
                    let y: Vec<f64> = (0..nd).map(|c| x[c] + h * v[c] / vn).collect();
                    g(&x, &mut ga);
                    g(&y, &mut gb);
                    let inc = ga
                        .iter()
                        .zip(&gb)
                        .map(|(p, q)| (p - q) * (p - q))
                        .sum::<f64>()
                        .sqrt();
                    if inc.is_finite() {
                        sup = sup.max(inc);
                    }
                }
            }
            logs.push((h.ln(), sup));
        }
        let pts: Vec<(f64, f64)> = logs
            .iter()
            .filter(|(_, s)| *s > 1e-300)
            .map(|&(lh, s)| (lh, s.ln()))
            .collect();
        if pts.len() < 2 {
            return 1.0;
        }
        least_squares_slope(&pts)
    }
}

pub(crate) fn least_squares_slope(pts: &[(f64, f64)]) -> f64 {
    let m = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / m;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    sxy / sxx
}

/// Checks that `F_i` (i ≥ 3) ignores `x_1..x_{i-2}` on random probe pairs.
pub fn check_chain_structure(model: &ChainModel, probes: usize, seed: u64) -> Result<bool> {
    let (n, d, nd) = (model.n(), model.d(), model.nd());
    let mut rng = NormalStream::new(seed, 1);
    let mut fa = vec![0.0; nd];
    let mut fb = vec![0.0; nd];
    for _ in 0..probes {
        let t = rng.next_uniform();
        let x: Vec<f64> = (0..nd).map(|_| 3.0 * rng.next_normal()).collect();
        for i in 3..=n {
            let mut y = x.clone();
            for v in y.iter_mut().take((i - 2) * d) {
                *v += 3.0 * rng.next_normal();
            }
            model.drift(t, &x, &mut fa);
            model.drift(t, &y, &mut fb);
            if fa[(i - 1) * d..i * d] != fb[(i - 1) * d..i * d] {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

/// Largest relative discrepancy between the declared subgradient blocks and
/// central differences of the drift, over random probes.
pub fn subgrad_consistency(model: &ChainModel, probes: usize, radius: f64, seed: u64) -> f64 {
    let (n, d, nd) = (model.n(), model.d(), model.nd());
    if n < 2 {
        return 0.0;
    }
    let mut rng = NormalStream::new(seed, 2);
    let mut blocks = vec![0.0; (n - 1) * d * d];
    let mut fp = vec![0.0; nd];
    let mut fm = vec![0.0; nd];
    let mut worst = 0.0f64;
    for _ in 0..probes {
        let x: Vec<f64> = (0..nd).map(|_| radius * (2.0 * rng.next_uniform() - 1.0)).collect();
        model.drift_subgrad(0.0, &x, &mut blocks);
        for b in 0..n - 1 {
            for c in 0..d {
                let col = b * d + c;
                let eps = 1e-6 * (1.0 + x[col].abs());
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[col] += eps;
                xm[col] -= eps;
                model.drift(0.0, &xp, &mut fp);
                model.drift(0.0, &xm, &mut fm);
                for r in 0..d {
                    let row = (b + 1) * d + r;
                    let fd = (fp[row] - fm[row]) / (2.0 * eps);
                    let declared = blocks[b * d * d + r * d + c];
                    let err = (fd - declared).abs() / declared.abs().max(1.0);
                    worst = worst.max(err);
                }
            }
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kolmogorov_drift_is_transmission() {
        let m = build_kolmogorov_chain(2, 1, 1.0).unwrap();
        assert_eq!(m.drift_vec(0.0, &[3.0, -1.0]), vec![0.0, 3.0]);
        let mut g = vec![0.0; 1];
        m.drift_subgrad(0.0, &[3.0, -1.0], &mut g);
        assert_eq!(g, vec![1.0]);
    }

    #[test]
    fn n1_has_no_subgradient_blocks() {
        let m = build_kolmogorov_chain(1, 1, 1.0).unwrap();
        assert_eq!(m.drift_vec(0.0, &[5.0]), vec![0.0]);
        let mut g: Vec<f64> = vec![];
        m.drift_subgrad(0.0, &[5.0], &mut g);
        assert!(g.is_empty());
    }

    #[test]
    fn n3_d2_blocks_are_identity() {
        let m = build_kolmogorov_chain(3, 2, 1.0).unwrap();
        let mut g = vec![0.0; 8];
        m.drift_subgrad(0.0, &[1.0; 6], &mut g);
        assert_eq!(g, vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0]);
        assert!(subgrad_consistency(&m, 20, 5.0, 1) < 1e-8);
    }

    #[test]
    fn power_chain_examples() {
        let b = HolderMatrix::from_upper(2, &[0.5]).unwrap();
        let m = build_power_chain(2, 1, &b, (2, 2), 1.0).unwrap();
        assert_eq!(m.drift_vec(0.0, &[0.0, 4.0])[1], 2.0);
        assert_eq!(m.drift_vec(0.0, &[1.5, 0.0])[1], 1.5);
        let lin = build_power_chain(2, 1, &HolderMatrix::ones(2), (2, 2), 1.0).unwrap();
        assert_eq!(lin.drift_vec(0.0, &[2.0, 3.0])[1], 5.0);
    }

    #[test]
    fn power_chain_rejects_bad_inputs() {
        let b = HolderMatrix::ones(3);
        assert!(build_power_chain(3, 1, &b, (1, 2), 1.0).is_err());
        assert!(build_power_chain(3, 1, &b, (3, 2), 1.0).is_err());
        assert!(build_power_chain(3, 1, &b, (2, 4), 1.0).is_err());
        assert!(HolderMatrix::from_upper(2, &[0.0]).is_err());
        assert!(HolderMatrix::from_upper(2, &[1.5]).is_err());
    }

    #[test]
    fn rescaled_norm_examples() {
        let p = ScaleProfile::new(0.25, 2, 1).unwrap();
        let v = rescaled_norm(&p, &[0.25, 0.0625]).unwrap();
        assert!((v - 2f64.sqrt()).abs() < 1e-15);
        let id = ScaleProfile::new(1.0, 2, 1).unwrap();
        assert_eq!(rescaled_norm(&id, &[3.0, 4.0]).unwrap(), 5.0);
        assert!(rescaled_norm(&p, &[1.0]).is_err());
    }

    #[test]
    fn validation_kolmogorov_passes() {
        let m = build_kolmogorov_chain(2, 1, 1.0).unwrap();
        let rep = validate_assumptions(&m, 500, 10.0, 3).unwrap();
        assert_eq!(rep.kappa_hat, 1.0);
        assert_eq!(rep.subgrad_min_sv, vec![1.0]);
        assert!(rep.verdicts.ue && rep.verdicts.s && rep.verdicts.h);
        assert!(rep.structure_ok);
    }

    #[test]
    fn validation_zero_sigma_fails_ue() {
        let m = build_kolmogorov_chain(2, 1, 1.0)
            .unwrap()
            .with_diffusion(|_t, _x, out| out.fill(0.0));
        let rep = validate_assumptions(&m, 100, 10.0, 3).unwrap();
        assert!(!rep.verdicts.ue);
    }

    #[test]
    fn validation_flags_nonfinite_diffusion() {
        let m = build_kolmogorov_chain(1, 1, 1.0)
            .unwrap()
            .with_diffusion(|_t, _x, out| out.fill(f64::NAN));
        let rep = validate_assumptions(&m, 100, 10.0, 3).unwrap();
        assert!(!rep.diffusion_finite);
        assert!(!rep.verdicts.ue);
    }

    #[test]
    fn validation_recovers_half_exponent() {
        let b = HolderMatrix::from_upper(2, &[0.5]).unwrap();
        let m = build_power_chain(2, 1, &b, (2, 2), 1.0).unwrap();
        let rep = validate_assumptions(&m, 500, 10.0, 9).unwrap();
        let e = rep.holder_hat.iter().find(|h| h.i == 2 && h.j == 2).unwrap();
        assert!((0.45..=0.55).contains(&e.estimate), "estimate {}", e.estimate);
    }
}
