use kolmo_chain::chain_model::{validate_assumptions_with, ChainModel, ModelKind, ModelSpec, ValidationConfig};
use kolmo_chain::flow_engine::{flow_equivalence_probe_with, EquivalenceOptions, Mesh};
use kolmo_chain::green_kernel::{
    default_dictionary, estimate_r_opnorm, green_apply, refined_uf1_norm, singular_green_norm, GridSpec,
    KernelQuadrature, NormEstimate, NormSweepRow, TestFunction,
};
use kolmo_chain::mc_simulate::{
    empirical_density, euler_ensemble_with, girsanov_weighted_ensemble, khasminskii_probe, krylov_functional,
    BandwidthRule, PathEnsemble, Record, Scheme, SimOptions,
};
use kolmo_chain::parametrix::{build_proxy, dirac_probe_with, gsp_spectrum, DiracOptions, ProxyConfig};
use kolmo_chain::peano_lab::{self, PeanoConfig, PeanoReport};
use kolmo_chain::rng::derive_seed;
use kolmo_chain::{Error, Exec, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::output::{num, text, Outcome, Table};

pub const COMMANDS: [&str; 16] = [
    "simulate",
    "density",
    "proxy",
    "gsp-check",
    "flow-equiv",
    "dirac-check",
    "green",
    "rnorm",
    "singular-green",
    "uf1",
    "krylov",
    "girsanov",
    "khasminskii",
    "peano",
    "peano-sweep",
    "validate",
];

pub struct Ctx {
    pub model: Option<ChainModel>,
    pub seed: u64,
}

impl Ctx {
    fn model(&self) -> Result<&ChainModel> {
        self.model
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("this command needs a [model] block".into()))
    }
}

fn zeros_or(v: &Option<Vec<f64>>, nd: usize) -> Result<Vec<f64>> {
    match v {
        None => Ok(vec![0.0; nd]),
        Some(v) if v.len() == nd => Ok(v.clone()),
        Some(v) => Err(Error::DimensionMismatch { expected: nd, got: v.len() }),
    }
}

// ---------------------------------------------------------------------------
// Shared parameter blocks

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimParams {
    pub x0: Option<Vec<f64>>,
    pub t0: f64,
    pub horizon: f64,
    pub steps: usize,
    pub paths: usize,
    pub scheme: Scheme,
    pub mesh: Mesh,
    pub antithetic: bool,
}

impl Default for SimParams {
    fn default() -> Self {
        SimParams {
            x0: None,
            t0: 0.0,
            horizon: 1.0,
            steps: 100,
            paths: 10_000,
            scheme: Scheme::default(),
            mesh: Mesh::Uniform,
            antithetic: false,
        }
    }
}

impl SimParams {
    fn options(&self, record: Record) -> SimOptions {
        SimOptions {
            mesh: self.mesh,
            record,
            antithetic: self.antithetic,
            exec: Exec::Parallel,
        }
    }

    fn run(&self, model: &ChainModel, seed: u64, record: Record) -> Result<PathEnsemble> {
        let x0 = zeros_or(&self.x0, model.nd())?;
        euler_ensemble_with(
            model,
            &x0,
            self.t0,
            self.horizon,
            self.steps,
            self.paths,
            seed,
            self.scheme,
            &self.options(record),
        )
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridParams {
    pub time_nodes: usize,
    /// Per-block half-widths; defaults to 1.5 for every block.
    pub box_radius: Option<Vec<f64>>,
    pub space_nodes: usize,
    pub p_prime: f64,
    pub q_prime: f64,
    pub kernel: KernelQuadrature,
}

impl Default for GridParams {
    fn default() -> Self {
        GridParams {
            time_nodes: 5,
            box_radius: None,
            space_nodes: 9,
            p_prime: 4.0,
            q_prime: 4.0,
            kernel: KernelQuadrature::default(),
        }
    }
}

impl GridParams {
    fn spec(&self, model: &ChainModel, horizon: f64) -> Result<GridSpec> {
        let radius = self.box_radius.clone().unwrap_or_else(|| vec![1.5; model.n()]);
        let mut g = GridSpec::new(
            model.n(),
            model.d(),
            horizon,
            self.time_nodes,
            radius,
            self.space_nodes,
            self.p_prime,
            self.q_prime,
        )?;
        g.kernel = self.kernel.clone();
        g.exec = Exec::Parallel;
        Ok(g)
    }
}

/// First-block drift `F_1` used by the Girsanov and Khas'minskii commands.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Drift1 {
    Constant { value: Vec<f64> },
    /// `amplitude · tanh(x_{1,k} / scale)` per component.
    Tanh { amplitude: f64, scale: f64 },
    /// `f(t, x) · direction`.
    Bump { f: TestFunction, direction: Vec<f64> },
}

impl Drift1 {
    fn check(&self, model: &ChainModel) -> Result<()> {
        let d = model.d();
        match self {
            Drift1::Constant { value } if value.len() != d => {
                Err(Error::DimensionMismatch { expected: d, got: value.len() })
            }
            Drift1::Tanh { scale, .. } if !(*scale > 0.0) => Err(Error::InvalidArgument("tanh scale must be positive".into())),
            Drift1::Bump { f, direction } => {
                f.validate(model.nd())?;
                if direction.len() != d {
                    return Err(Error::DimensionMismatch { expected: d, got: direction.len() });
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    fn eval(&self, t: f64, x: &[f64], out: &mut [f64]) {
        match self {
            Drift1::Constant { value } => out.copy_from_slice(value),
            Drift1::Tanh { amplitude, scale } => {
                for (k, o) in out.iter_mut().enumerate() {
                    *o = amplitude * (x[k] / scale).tanh();
                }
            }
            Drift1::Bump { f, direction } => {
                let v = f.eval(t, x);
                for (o, dir) in out.iter_mut().zip(direction) {
                    *o = v * dir;
                }
            }
        }
    }
}

fn norm_table(name: &str, rows: &[NormSweepRow]) -> Table {
    let mut t = Table::new(name, &["T", "parameter", "estimate", "time_nodes", "space_nodes", "mass_deficit"]);
    for r in rows {
        t.push(vec![
            num(r.horizon),
            text(&r.parameter),
            num(r.estimate),
            Value::from(r.time_nodes),
            Value::from(r.space_nodes),
            num(r.mass_deficit),
        ]);
    }
    t
}

fn strictly_decreasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] < w[0])
}

// ---------------------------------------------------------------------------
// Per-command parameters

macro_rules! params {
    ($name:ident { $($(#[$m:meta])* $field:ident : $ty:ty = $default:expr),* $(,)? }) => {
        #[derive(Clone, Debug, Serialize, Deserialize)]
        #[serde(deny_unknown_fields, default)]
        pub struct $name { $($(#[$m])* pub $field: $ty),* }
        impl Default for $name {
            fn default() -> Self { $name { $($field: $default),* } }
        }
    };
}

params!(SimulateParams {
    simulation: SimParams = SimParams::default(),
    export_paths: bool = false,
});

params!(DensityParams {
    simulation: SimParams = SimParams::default(),
    /// `(lo, hi, points)` per coordinate; defaults to mean ± 4 sd.
    axes: Option<Vec<(f64, f64, usize)>> = None,
    bandwidth: BandwidthRule = BandwidthRule::ScaledScott,
});

params!(ProxyParams {
    y: Option<Vec<f64>> = None,
    t: f64 = 0.0,
    horizon: f64 = 1.0,
    config: ProxyConfig = ProxyConfig::default(),
});

params!(GspParams {
    y: Option<Vec<f64>> = None,
    durations: Vec<f64> = vec![1.0, 1e-1, 1e-2, 1e-3],
    config: ProxyConfig = ProxyConfig::default(),
    band_limit: f64 = 20.0,
});

params!(FlowEquivParams {
    pairs: usize = 1000,
    t: f64 = 0.0,
    gaps: Vec<f64> = vec![1e-1, 1e-2, 1e-3],
    flow_steps: usize = 64,
    spreads: Vec<f64> = vec![0.5, 2.0, 8.0],
    limit: f64 = 50.0,
});

params!(DiracParams {
    x: Option<Vec<f64>> = None,
    t: f64 = 0.0,
    eps: Vec<f64> = vec![0.2, 0.1, 0.05, 0.025],
    /// Defaults to a unit-width Gaussian bump centred half a unit from `x`.
    f: Option<TestFunction> = None,
    points_per_dim: usize = 21,
    box_sd: f64 = 6.0,
    proxy: ProxyConfig = ProxyConfig::default(),
});

params!(GreenParams {
    f: TestFunction = TestFunction::Constant { value: 1.0 },
    t: f64 = 0.0,
    x: Option<Vec<f64>> = None,
    horizon: f64 = 0.5,
    kernel: KernelQuadrature = KernelQuadrature::default(),
});

params!(RnormParams {
    horizons: Vec<f64> = vec![0.5, 0.25, 0.125],
    grid: GridParams = GridParams::default(),
});

params!(SingularGreenParams {
    gammas: Vec<f64> = vec![0.0, 0.25, 0.5, 0.75],
    /// Defaults to a width-0.5 Gaussian bump at the origin.
    f: Option<TestFunction> = None,
    horizon: f64 = 0.5,
    grid: GridParams = GridParams::default(),
});

params!(Uf1Params {
    f1: Option<TestFunction> = None,
    f: Option<TestFunction> = None,
    p: f64 = 8.0,
    q: f64 = 8.0,
    horizons: Vec<f64> = vec![0.5, 0.25, 0.125],
    grid: GridParams = GridParams::default(),
});

params!(KrylovParams {
    simulation: SimParams = SimParams::default(),
    f: TestFunction = TestFunction::Constant { value: 1.0 },
    p_prime: f64 = 4.0,
    q_prime: f64 = 4.0,
    /// Grid for the norm of test functions without a closed form; defaults to the standard grid.
    norm_grid: Option<GridParams> = None,
});

params!(GirsanovParams {
    simulation: SimParams = SimParams::default(),
    f1: Drift1 = Drift1::Tanh { amplitude: 1.0, scale: 1.0 },
});

params!(KhasminskiiParams {
    f1: Drift1 = Drift1::Constant { value: vec![0.5] },
    horizon: f64 = 1.0,
    starts: Option<Vec<Vec<f64>>> = None,
    steps: usize = 100,
    paths: usize = 10_000,
    tail_limit: f64 = 10.0,
});

params!(PeanoParams {
    alpha: f64 = 0.15,
    i: usize = 2,
    j: usize = 2,
    x0: f64 = 1e-3,
    rho: Option<f64> = None,
    beta_margin: f64 = 0.5,
    paths: usize = 10_000,
    steps: usize = 10_000,
    grading: f64 = 2.0,
    mirrored: bool = false,
});

params!(PeanoSweepParams {
    i: usize = 2,
    j: usize = 2,
    alphas: Vec<f64> = vec![0.1, 0.15, 0.2, 0.25, 0.3, 0.4, 0.5, 0.6, 0.8],
    x0: f64 = 1e-3,
    beta_margin: f64 = 0.5,
    paths: usize = 2000,
    steps: usize = 10_000,
    grading: f64 = 2.0,
    /// Extra runs at `limit_alpha` over these starting points.
    x0_limit: Vec<f64> = vec![],
    limit_alpha: f64 = 0.15,
});

params!(ValidateParams {
    samples: usize = 10_000,
    box_radius: f64 = 10.0,
    subgrad_floor: f64 = 1e-6,
    slope_band: f64 = 0.05,
});

pub enum Command {
    Simulate(SimulateParams),
    Density(DensityParams),
    Proxy(ProxyParams),
    Gsp(GspParams),
    FlowEquiv(FlowEquivParams),
    Dirac(DiracParams),
    Green(GreenParams),
    Rnorm(RnormParams),
    SingularGreen(SingularGreenParams),
    Uf1(Uf1Params),
    Krylov(KrylovParams),
    Girsanov(GirsanovParams),
    Khasminskii(KhasminskiiParams),
    Peano(PeanoParams),
    PeanoSweep(PeanoSweepParams),
    Validate(ValidateParams),
}

fn parse<P: DeserializeOwned>(v: Value) -> std::result::Result<P, String> {
    serde_json::from_value(v).map_err(|e| format!("[params]: {e}"))
}

impl Command {
    pub fn parse(name: &str, params: Value) -> std::result::Result<Command, String> {
        let params = if params.is_null() { json!({}) } else { params };
        Ok(match name {
            "simulate" => Command::Simulate(parse(params)?),
            "density" => Command::Density(parse(params)?),
            "proxy" => Command::Proxy(parse(params)?),
            "gsp-check" => Command::Gsp(parse(params)?),
            "flow-equiv" => Command::FlowEquiv(parse(params)?),
            "dirac-check" => Command::Dirac(parse(params)?),
            "green" => Command::Green(parse(params)?),
            "rnorm" => Command::Rnorm(parse(params)?),
            "singular-green" => Command::SingularGreen(parse(params)?),
            "uf1" => Command::Uf1(parse(params)?),
            "krylov" => Command::Krylov(parse(params)?),
            "girsanov" => Command::Girsanov(parse(params)?),
            "khasminskii" => Command::Khasminskii(parse(params)?),
            "peano" => Command::Peano(parse(params)?),
            "peano-sweep" => Command::PeanoSweep(parse(params)?),
            "validate" => Command::Validate(parse(params)?),
            other => return Err(format!("unknown command {other:?}")),
        })
    }

    /// Peano commands build their own chain from `(α, i, j)`.
    pub fn uses_model(&self) -> bool {
        !matches!(self, Command::Peano(_) | Command::PeanoSweep(_))
    }

    pub fn params_value(&self) -> Value {
        let v = match self {
            Command::Simulate(p) => serde_json::to_value(p),
            Command::Density(p) => serde_json::to_value(p),
            Command::Proxy(p) => serde_json::to_value(p),
            Command::Gsp(p) => serde_json::to_value(p),
            Command::FlowEquiv(p) => serde_json::to_value(p),
            Command::Dirac(p) => serde_json::to_value(p),
            Command::Green(p) => serde_json::to_value(p),
            Command::Rnorm(p) => serde_json::to_value(p),
            Command::SingularGreen(p) => serde_json::to_value(p),
            Command::Uf1(p) => serde_json::to_value(p),
            Command::Krylov(p) => serde_json::to_value(p),
            Command::Girsanov(p) => serde_json::to_value(p),
            Command::Khasminskii(p) => serde_json::to_value(p),
            Command::Peano(p) => serde_json::to_value(p),
            Command::PeanoSweep(p) => serde_json::to_value(p),
            Command::Validate(p) => serde_json::to_value(p),
        };
        v.expect("parameters serialize")
    }

    pub fn run(&self, ctx: &Ctx, spec: Option<&ModelSpec>) -> Result<Outcome> {
        match self {
            Command::Simulate(p) => simulate(ctx, p),
            Command::Density(p) => density(ctx, p),
            Command::Proxy(p) => proxy(ctx, p),
            Command::Gsp(p) => gsp_check(ctx, spec, p),
            Command::FlowEquiv(p) => flow_equiv(ctx, p),
            Command::Dirac(p) => dirac_check(ctx, p),
            Command::Green(p) => green(ctx, p),
            Command::Rnorm(p) => rnorm(ctx, p),
            Command::SingularGreen(p) => singular_green(ctx, p),
            Command::Uf1(p) => uf1(ctx, p),
            Command::Krylov(p) => krylov(ctx, p),
            Command::Girsanov(p) => girsanov(ctx, p),
            Command::Khasminskii(p) => khasminskii(ctx, p),
            Command::Peano(p) => peano(ctx, p),
            Command::PeanoSweep(p) => peano_sweep(ctx, p),
            Command::Validate(p) => validate(ctx, p),
        }
    }
}

// ---------------------------------------------------------------------------
// Commands

fn moments_outcome(out: &mut Outcome, ens: &PathEnsemble) -> Result<()> {
    let s = ens.summary()?;
    let mut t = Table::new("moments", &["statistic", "i", "j", "value", "std_error"]);
    for (k, (m, se)) in s.terminal_mean.iter().zip(&s.terminal_mean_se).enumerate() {
        t.push(vec![text("mean"), Value::from(k + 1), Value::Null, num(*m), num(*se)]);
        out.metric(format!("mean_{}", k + 1), *m);
    }
    for (a, (row, row_se)) in s.terminal_cov.iter().zip(&s.terminal_cov_se).enumerate() {
        for (b, (c, se)) in row.iter().zip(row_se).enumerate() {
            t.push(vec![text("cov"), Value::from(a + 1), Value::from(b + 1), num(*c), num(*se)]);
            if b >= a {
                out.metric(format!("cov_{}_{}", a + 1, b + 1), *c);
            }
        }
    }
    out.metric("excluded", s.excluded as f64);
    out.metric("weight_overflow", s.weight_overflow as f64);
    out.tables.push(t);
    out.details = serde_json::to_value(&s)?;
    Ok(())
}

fn simulate(ctx: &Ctx, p: &SimulateParams) -> Result<Outcome> {
    let model = ctx.model()?;
    let record = if p.export_paths { Record::Full } else { Record::Terminal };
    let ens = p.simulation.run(model, ctx.seed, record)?;
    let mut out = Outcome::default();
    moments_outcome(&mut out, &ens)?;
    if p.export_paths {
        let mut cols = vec!["path_id".to_string(), "node_time".to_string()];
        cols.extend((1..=ens.nd).map(|k| format!("x_{k}")));
        cols.push("weight".into());
        let mut t = Table::with_columns("paths", cols);
        let times = ens.recorded_times();
        for path in 0..ens.paths {
            for (k, &tm) in times.iter().enumerate() {
                let mut row = vec![Value::from(path), num(tm)];
                row.extend(ens.state(path, k).iter().map(|&v| num(v)));
                row.push(num(ens.weights[path]));
                t.push(row);
            }
        }
        out.tables.push(t);
    }
    Ok(out)
}

fn density(ctx: &Ctx, p: &DensityParams) -> Result<Outcome> {
    let model = ctx.model()?;
    let ens = p.simulation.run(model, ctx.seed, Record::Terminal)?;
    let nd = model.nd();
    let axes: Vec<Vec<f64>> = match &p.axes {
        Some(a) => {
            if a.len() != nd {
                return Err(Error::DimensionMismatch { expected: nd, got: a.len() });
            }
            a.iter().map(|&(lo, hi, m)| kolmo_chain::quad::linspace(lo, hi, m)).collect()
        }
        None => {
            let s = ens.summary()?;
            let pts = if nd <= 2 { 41 } else { 11 };
            (0..nd)
                .map(|k| {
                    let sd = s.terminal_cov[k][k].sqrt().max(1e-12);
                    let m = s.terminal_mean[k];
                    kolmo_chain::quad::linspace(m - 4.0 * sd, m + 4.0 * sd, pts)
                })
                .collect()
        }
    };
    let est = empirical_density(&ens, &axes, &p.bandwidth)?;
    let mut cols: Vec<String> = (1..=nd).map(|k| format!("x_{k}")).collect();
    cols.push("density".into());
    let mut t = Table::with_columns("density", cols);
    for (g, v) in est.values.iter().enumerate() {
        let mut row: Vec<Value> = est.node(g).into_iter().map(num).collect();
        row.push(num(*v));
        t.push(row);
    }
    let mut out = Outcome::default();
    out.metric("normalization", est.normalization);
    out.metric("peak", est.values.iter().copied().fold(0.0, f64::max));
    for (k, b) in est.bandwidths.iter().enumerate() {
        out.metric(format!("bandwidth_{}", k + 1), *b);
    }
    out.tables.push(t);
    out.details = json!({ "bandwidths": est.bandwidths, "normalization": est.normalization });
    Ok(out)
}

fn matrix_table(name: &str, m: &[Vec<f64>]) -> Table {
    let mut t = Table::new(name, &["row", "col", "value"]);
    for (a, row) in m.iter().enumerate() {
        for (b, v) in row.iter().enumerate() {
            t.push(vec![Value::from(a + 1), Value::from(b + 1), num(*v)]);
        }
    }
    t
}

fn proxy(ctx: &Ctx, p: &ProxyParams) -> Result<Outcome> {
    let model = ctx.model()?;
    let y = zeros_or(&p.y, model.nd())?;
    let px = build_proxy(model, &y, p.horizon, p.t, &p.config)?;
    let dump = px.dump();
    let mut out = Outcome::default();
    for (a, row) in dump.covariance.iter().enumerate() {
        for (b, v) in row.iter().enumerate().skip(a) {
            out.metric(format!("cov_{}_{}", a + 1, b + 1), *v);
        }
    }
    for (k, v) in dump.mean_offset.iter().enumerate() {
        out.metric(format!("mean_offset_{}", k + 1), *v);
    }
    if let Some(e) = dump.det_error {
        out.metric("det_error", e);
    }
    out.tables.push(matrix_table("covariance", &dump.covariance));
    out.tables.push(matrix_table("resolvent", &dump.resolvent_endpoint));
    out.details = serde_json::to_value(&dump)?;
    Ok(out)
}

fn gsp_check(ctx: &Ctx, spec: Option<&ModelSpec>, p: &GspParams) -> Result<Outcome> {
    let model = ctx.model()?;
    if p.durations.is_empty() {
        return Err(Error::InvalidArgument("durations must not be empty".into()));
    }
    let y = zeros_or(&p.y, model.nd())?;
    let mut t = Table::new("spectrum", &["duration", "lambda_min", "lambda_max"]);
    let mut lo = f64::INFINITY;
    let mut hi = 0.0f64;
    let mut out = Outcome::default();
    let mut dev = 0.0f64;
    let kolmo = spec.is_some_and(|s| {
        s.kind == ModelKind::KolmogorovLinear && s.n == 2 && s.d == 1 && s.sigma_scale == 1.0
    });
    let (emin, emax) = ((4.0 - 13f64.sqrt()) / 6.0, (4.0 + 13f64.sqrt()) / 6.0);
    for &dur in &p.durations {
        let px = build_proxy(model, &y, dur, 0.0, &p.config)?;
        let s = gsp_spectrum(&px.covariance(), dur, model.n(), model.d())?;
        t.push(vec![num(dur), num(s.lambda_min), num(s.lambda_max)]);
        lo = lo.min(s.lambda_min);
        hi = hi.max(s.lambda_max);
        if kolmo {
            dev = dev.max((s.lambda_min - emin).abs()).max((s.lambda_max - emax).abs());
        }
    }
    let band = hi / lo;
    out.metric("lambda_min", lo);
    out.metric("lambda_max", hi);
    out.metric("band_ratio", band);
    let mut pass = band < p.band_limit;
    if kolmo {
        out.metric("kolmogorov_max_deviation", dev);
        pass &= dev < 1e-6;
    }
    out.pass = Some(pass);
    out.tables.push(t);
    Ok(out)
}

fn flow_equiv(ctx: &Ctx, p: &FlowEquivParams) -> Result<Outcome> {
    let model = ctx.model()?;
    let opts = EquivalenceOptions {
        flow_steps: p.flow_steps,
        spreads: p.spreads.clone(),
        exec: Exec::Parallel,
    };
    let mut t = Table::new("equivalence", &["gap", "pairs", "max_a_over_b", "max_b_over_a", "constant"]);
    let mut c = 0.0f64;
    let mut reports = Vec::new();
    for (k, &gap) in p.gaps.iter().enumerate() {
        let r = flow_equivalence_probe_with(model, p.pairs, p.t, p.t + gap, derive_seed(ctx.seed, &[k as u64]), &opts)?;
        t.push(vec![num(gap), Value::from(r.pairs), num(r.max_a_over_b), num(r.max_b_over_a), num(r.constant)]);
        c = c.max(r.constant);
        reports.push(r);
    }
    let mut out = Outcome::default();
    out.metric("constant", c);
    out.pass = Some(c <= p.limit);
    out.tables.push(t);
    out.details = serde_json::to_value(&reports)?;
    Ok(out)
}

fn dirac_check(ctx: &Ctx, p: &DiracParams) -> Result<Outcome> {
    let model = ctx.model()?;
    let x = zeros_or(&p.x, model.nd())?;
    let f = p
        .f
        .clone()
        .unwrap_or_else(|| TestFunction::gaussian(x.iter().map(|v| v + 0.5).collect(), 1.0));
    f.validate(model.nd())?;
    let opts = DiracOptions {
        points_per_dim: p.points_per_dim,
        box_sd: p.box_sd,
        proxy: p.proxy.clone(),
        exec: Exec::Parallel,
    };
    let rows = dirac_probe_with(model, |y: &[f64]| f.eval(p.t, y), &x, p.t, &p.eps, &opts)?;
    let mut t = Table::new("dirac", &["eps", "value", "error", "mass", "mass_deficit", "box_too_small"]);
    let mut out = Outcome::default();
    for (k, r) in rows.iter().enumerate() {
        t.push(vec![num(r.eps), num(r.value), num(r.error), num(r.mass), num(r.mass_deficit), Value::from(r.box_too_small)]);
        out.metric(format!("error_{k}"), r.error);
    }
    let errs: Vec<f64> = rows.iter().map(|r| r.error).collect();
    let min_mass = rows.iter().map(|r| r.mass).fold(f64::INFINITY, f64::min);
    out.metric("min_mass", min_mass);
    out.pass = Some(strictly_decreasing(&errs) && min_mass >= 0.999);
    out.tables.push(t);
    out.details = serde_json::to_value(&rows)?;
    Ok(out)
}

fn green(ctx: &Ctx, p: &GreenParams) -> Result<Outcome> {
    let model = ctx.model()?;
    let x = zeros_or(&p.x, model.nd())?;
    let mut grid = GridParams::default().spec(model, p.horizon)?;
    grid.kernel = p.kernel.clone();
    let v = green_apply(model, &p.f, p.t, &x, p.horizon, &grid)?;
    let mut out = Outcome::default();
    out.metric("value", v);
    let mut t = Table::new("green", &["t", "T", "value"]);
    t.push(vec![num(p.t), num(p.horizon), num(v)]);
    out.tables.push(t);
    Ok(out)
}

fn rnorm(ctx: &Ctx, p: &RnormParams) -> Result<Outcome> {
    let model = ctx.model()?;
    let top = p.horizons.iter().copied().fold(0.0, f64::max);
    let grid = p.grid.spec(model, top)?;
    let dict = default_dictionary(&grid);
    let mut rows = Vec::new();
    let mut out = Outcome::default();
    let mut ests = Vec::new();
    for &h in &p.horizons {
        let e = estimate_r_opnorm(model, h, &grid, &dict)?;
        out.metric(format!("estimate_T{h}"), e.estimate);
        ests.push(e.estimate);
        rows.push(NormSweepRow::from_estimate("R", &e));
    }
    let last = *ests.last().ok_or_else(|| Error::InvalidArgument("horizons must not be empty".into()))?;
    out.pass = Some(strictly_decreasing(&ests) && last < 1.0);
    out.tables.push(norm_table("rnorm", &rows));
    Ok(out)
}

fn default_bump(nd: usize) -> TestFunction {
    TestFunction::gaussian(vec![0.0; nd], 0.5)
}

fn singular_green(ctx: &Ctx, p: &SingularGreenParams) -> Result<Outcome> {
    let model = ctx.model()?;
    let grid = p.grid.spec(model, p.horizon)?;
    let f = p.f.clone().unwrap_or_else(|| default_bump(model.nd()));
    let mut rows = Vec::new();
    let mut out = Outcome::default();
    for &g in &p.gammas {
        let e: NormEstimate = singular_green_norm(model, g, &f, &grid)?;
        out.metric(format!("estimate_gamma{g}"), e.estimate);
        rows.push(NormSweepRow::from_estimate(format!("gamma={g}"), &e));
    }
    out.tables.push(norm_table("singular_green", &rows));
    Ok(out)
}

fn uf1(ctx: &Ctx, p: &Uf1Params) -> Result<Outcome> {
    let model = ctx.model()?;
    let top = p.horizons.iter().copied().fold(0.0, f64::max);
    let grid = p.grid.spec(model, top)?;
    let f1 = p.f1.clone().unwrap_or_else(|| default_bump(model.nd()));
    let f = p.f.clone().unwrap_or_else(|| default_bump(model.nd()));
    let mut rows = Vec::new();
    let mut out = Outcome::default();
    for &h in &p.horizons {
        let e = refined_uf1_norm(model, &f1, &f, p.p, p.q, h, &grid)?;
        out.metric(format!("estimate_T{h}"), e.estimate);
        rows.push(NormSweepRow::from_estimate(format!("p={};q={}", p.p, p.q), &e));
    }
    out.tables.push(norm_table("uf1", &rows));
    Ok(out)
}

fn krylov(ctx: &Ctx, p: &KrylovParams) -> Result<Outcome> {
    let model = ctx.model()?;
    let ens = p.simulation.run(model, ctx.seed, Record::Full)?;
    let grid = p.norm_grid.clone().unwrap_or_default().spec(model, p.simulation.horizon)?;
    let k = krylov_functional(&ens, &p.f, p.p_prime, p.q_prime, Some(&grid))?;
    let mut out = Outcome::default();
    out.metric("value", k.value);
    out.metric("std_error", k.std_error);
    out.metric("f_norm", k.f_norm);
    out.metric("bound_ratio", k.bound_ratio);
    let mut t = Table::new("krylov", &["value", "std_error", "f_norm", "bound_ratio", "surviving_paths"]);
    t.push(vec![num(k.value), num(k.std_error), num(k.f_norm), num(k.bound_ratio), Value::from(k.surviving_paths)]);
    out.tables.push(t);
    out.details = serde_json::to_value(&k)?;
    Ok(out)
}

fn girsanov(ctx: &Ctx, p: &GirsanovParams) -> Result<Outcome> {
    let model = ctx.model()?;
    p.f1.check(model)?;
    let sim = &p.simulation;
    let x0 = zeros_or(&sim.x0, model.nd())?;
    let opts = sim.options(Record::Terminal);
    let f1 = p.f1.clone();
    let drift = move |t: f64, x: &[f64], out: &mut [f64]| f1.eval(t, x, out);
    let weighted = girsanov_weighted_ensemble(
        model,
        drift.clone(),
        &x0,
        sim.t0,
        sim.horizon,
        sim.steps,
        sim.paths,
        derive_seed(ctx.seed, &[1]),
        sim.scheme,
        &opts,
    )?;
    let drifted = model.with_first_drift(drift);
    let direct = euler_ensemble_with(
        &drifted,
        &x0,
        sim.t0,
        sim.horizon,
        sim.steps,
        sim.paths,
        derive_seed(ctx.seed, &[2]),
        sim.scheme,
        &opts,
    )?;
    let (wm, wse) = weighted.terminal_mean(|x| x[0])?;
    let (dm, dse) = direct.terminal_mean(|x| x[0])?;
    let ws = weighted.summary()?;
    let z = 1.959_963_984_540_054;
    let overlap = (wm - z * wse) <= (dm + z * dse) && (dm - z * dse) <= (wm + z * wse);
    let weight_ok = (ws.weight_mean - 1.0).abs() <= 3.0 * ws.weight_mean_se;
    let mut out = Outcome::default();
    out.metric("weighted_mean", wm);
    out.metric("weighted_se", wse);
    out.metric("direct_mean", dm);
    out.metric("direct_se", dse);
    out.metric("weight_mean", ws.weight_mean);
    out.metric("weight_mean_se", ws.weight_mean_se);
    out.metric("weight_overflow", ws.weight_overflow as f64);
    out.pass = Some(overlap && weight_ok);
    let mut t = Table::new("girsanov", &["ensemble", "terminal_mean_x1", "std_error", "ci_lo", "ci_hi"]);
    t.push(vec![text("weighted"), num(wm), num(wse), num(wm - z * wse), num(wm + z * wse)]);
    t.push(vec![text("direct"), num(dm), num(dse), num(dm - z * dse), num(dm + z * dse)]);
    out.tables.push(t);
    out.details = json!({ "weighted": ws, "direct": direct.summary()? });
    Ok(out)
}

fn khasminskii(ctx: &Ctx, p: &KhasminskiiParams) -> Result<Outcome> {
    let model = ctx.model()?;
    p.f1.check(model)?;
    let starts = p.starts.clone().unwrap_or_else(|| vec![vec![0.0; model.nd()]]);
    let f1 = p.f1.clone();
    let opts = SimOptions {
        record: Record::Full,
        exec: Exec::Parallel,
        ..SimOptions::default()
    };
    let r = khasminskii_probe(
        model,
        move |t: f64, x: &[f64], out: &mut [f64]| f1.eval(t, x, out),
        p.horizon,
        &starts,
        p.steps,
        p.paths,
        ctx.seed,
        &opts,
    )?;
    let mut t = Table::new("khasminskii", &["start", "estimate", "std_error", "tail_ratio", "overflowed"]);
    for (k, s) in r.starts.iter().enumerate() {
        t.push(vec![Value::from(k), num(s.estimate), num(s.std_error), num(s.tail_ratio), Value::from(s.overflowed)]);
    }
    let mut out = Outcome::default();
    out.metric("estimate", r.estimate);
    out.metric("tail_ratio", r.tail_ratio);
    out.pass = Some(r.estimate.is_finite() && r.tail_ratio < p.tail_limit);
    out.tables.push(t);
    out.details = serde_json::to_value(&r)?;
    Ok(out)
}

fn peano_table(rows: &[PeanoReport]) -> Table {
    let mut t = Table::new(
        "peano",
        &["i", "j", "alpha", "delta", "rho", "markov_lower", "survival_hat", "ci_lo", "ci_hi", "paths", "steps"],
    );
    for r in rows {
        t.push(vec![
            Value::from(r.i),
            Value::from(r.j),
            num(r.alpha),
            num(r.delta),
            num(r.rho),
            num(r.markov_lower),
            num(r.survival_hat),
            num(r.ci95.0),
            num(r.ci95.1),
            Value::from(r.paths),
            Value::from(r.steps),
        ]);
    }
    t
}

fn peano(ctx: &Ctx, p: &PeanoParams) -> Result<Outcome> {
    let cfg = PeanoConfig {
        alpha: p.alpha,
        i: p.i,
        j: p.j,
        x0: p.x0,
        rho: p.rho,
        beta_margin: p.beta_margin,
        paths: p.paths,
        steps: p.steps,
        grading: p.grading,
        seed: ctx.seed,
        mirrored: p.mirrored,
        ..PeanoConfig::default()
    };
    let r = peano_lab::run_peano(&cfg)?;
    let mut out = Outcome::default();
    out.metric("survival_hat", r.survival_hat);
    out.metric("std_error", r.std_error);
    out.metric("markov_lower", r.markov_lower);
    out.metric("rho", r.rho);
    out.metric("delta", r.delta);
    out.pass = r.bound_consistent;
    out.tables.push(peano_table(std::slice::from_ref(&r)));
    out.details = serde_json::to_value(&r)?;
    Ok(out)
}

fn peano_sweep(ctx: &Ctx, p: &PeanoSweepParams) -> Result<Outcome> {
    let shared = PeanoConfig {
        x0: p.x0,
        beta_margin: p.beta_margin,
        paths: p.paths,
        steps: p.steps,
        grading: p.grading,
        seed: ctx.seed,
        ..PeanoConfig::default()
    };
    let rows = peano_lab::threshold_sweep(p.i, p.j, &p.alphas, &shared)?;
    let thr = peano_lab::sharpness_threshold(p.i, p.j)?;
    let mut out = Outcome::default();
    for r in &rows {
        out.metric(format!("survival_alpha{}", r.alpha), r.survival_hat);
    }
    out.tables.push(peano_table(&rows));
    let mut limit = Vec::new();
    if !p.x0_limit.is_empty() {
        let cfg = PeanoConfig {
            alpha: p.limit_alpha,
            i: p.i,
            j: p.j,
            seed: derive_seed(ctx.seed, &[u64::MAX]),
            ..shared.clone()
        };
        limit = peano_lab::x0_limit_sweep(&cfg, &p.x0_limit)?;
        let mut t = Table::new("x0_limit", &["x0", "alpha", "rho", "survival_hat", "ci_lo", "ci_hi"]);
        for r in &limit {
            t.push(vec![num(r.x0), num(r.alpha), num(r.rho), num(r.survival_hat), num(r.ci95.0), num(r.ci95.1)]);
            out.metric(format!("x0_limit_{}", r.x0), r.survival_hat);
        }
        out.tables.push(t);
    }
    let verdicts: Vec<Value> = rows
        .iter()
        .map(|r| json!({ "alpha": r.alpha, "regime": r.regime, "bound_consistent": r.bound_consistent }))
        .collect();
    out.pass = Some(rows.iter().all(|r| r.bound_consistent != Some(false)));
    out.details = json!({
        "threshold": thr.value.to_string(),
        "verdicts": verdicts,
        "rows": rows,
        "x0_limit": limit,
    });
    Ok(out)
}

fn validate(ctx: &Ctx, p: &ValidateParams) -> Result<Outcome> {
    let model = ctx.model()?;
    let cfg = ValidationConfig {
        samples: p.samples,
        box_radius: p.box_radius,
        seed: ctx.seed,
        subgrad_floor: p.subgrad_floor,
        slope_band: p.slope_band,
    };
    let r = validate_assumptions_with(model, &cfg)?;
    let mut out = Outcome::default();
    out.metric("kappa_hat", r.kappa_hat);
    out.metric("ellipticity_lo", r.ellipticity_bounds.0);
    out.metric("ellipticity_hi", r.ellipticity_bounds.1);
    let mut t = Table::new("holder", &["i", "j", "declared", "estimate"]);
    for h in &r.holder_hat {
        t.push(vec![Value::from(h.i), Value::from(h.j), num(h.declared), num(h.estimate)]);
    }
    let v = &r.verdicts;
    out.pass = Some(v.ue && v.s && v.h && r.structure_ok);
    out.tables.push(t);
    out.details = serde_json::to_value(&r)?;
    Ok(out)
}
