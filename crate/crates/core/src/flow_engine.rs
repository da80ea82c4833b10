//! Deterministic Cauchy–Peano flows `θ̇ = F(t, θ)`, the regularization
//! schedule for mollified drifts, and the forward/backward flow
//! equivalence probe.
//!
//! Flows are a fixed-step RK4 selection; for non-Lipschitz drifts this picks
//! one solution among possibly many (at `x_j = 0` it stays on the zero branch).

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::chain_model::{ChainModel, HolderMatrix, ScaleProfile};
use crate::error::{invalid, Error, Result};
use crate::exec::{self, Exec};
use crate::quad::gauss_hermite;
use crate::rng::NormalStream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    Forward,
    Backward,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Mesh {
    Uniform,
    /// Nodes `lo + (hi-lo)(m/N)^exponent`, clustered at the lower end.
    Graded { exponent: f64 },
}

impl Mesh {
    pub fn nodes(&self, lo: f64, hi: f64, steps: usize) -> Vec<f64> {
        let len = hi - lo;
        let mut v: Vec<f64> = (0..=steps)
            .map(|m| {
                let r = m as f64 / steps as f64;
                match *self {
                    Mesh::Uniform => lo + len * r,
                    Mesh::Graded { exponent } => lo + len * r.powf(exponent),
                }
            })
            .collect();
        v[0] = lo;
        v[steps] = hi;
        v
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FlowOptions {
    pub steps: usize,
    pub mesh: Mesh,
    /// Also integrate with doubled steps and report the node-wise discrepancy.
    pub residual: bool,
}

impl FlowOptions {
    pub fn uniform(steps: usize) -> Self {
        FlowOptions {
            steps,
            mesh: Mesh::Uniform,
            residual: false,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FlowPath {
    /// Lower time endpoint.
    pub t0: f64,
    /// Upper time endpoint.
    pub t1: f64,
    pub direction: Direction,
    /// Node times, strictly increasing.
    pub times: Vec<f64>,
    /// Row-major `times.len() × nd`.
    pub states: Vec<f64>,
    pub nd: usize,
    /// Max node discrepancy against a run with doubled steps, when requested.
    pub residual: Option<f64>,
}

impl FlowPath {
    pub fn node(&self, k: usize) -> &[f64] {
        &self.states[k * self.nd..(k + 1) * self.nd]
    }

    /// The anchor point (the state at `t1` for backward flows, `t0` for forward).
    pub fn anchor(&self) -> &[f64] {
        match self.direction {
            Direction::Backward => self.node(self.times.len() - 1),
            Direction::Forward => self.node(0),
        }
    }

    /// The state at the non-anchored endpoint.
    pub fn endpoint(&self) -> &[f64] {
        match self.direction {
            Direction::Backward => self.node(0),
            Direction::Forward => self.node(self.times.len() - 1),
        }
    }

    pub fn covers(&self, lo: f64, hi: f64) -> bool {
        let tol = 1e-12 * (1.0 + self.t1.abs());
        lo >= self.t0 - tol && hi <= self.t1 + tol
    }

    /// Piecewise-linear interpolation.
    pub fn state_at(&self, time: f64, out: &mut [f64]) -> Result<()> {
        if !self.covers(time, time) {
            return Err(Error::FlowCoverage {
                have_lo: self.t0,
                have_hi: self.t1,
                want_lo: time,
                want_hi: time,
            });
        }
        let m = self.times.len();
        let k = match self.times.binary_search_by(|v| v.total_cmp(&time)) {
            Ok(k) => {
                out.copy_from_slice(self.node(k));
                return Ok(());
            }
            Err(0) => {
                out.copy_from_slice(self.node(0));
                return Ok(());
            }
            Err(k) if k >= m => {
                out.copy_from_slice(self.node(m - 1));
                return Ok(());
            }
            Err(k) => k - 1,
        };
        let (ta, tb) = (self.times[k], self.times[k + 1]);
        let w = (time - ta) / (tb - ta);
        let (a, b) = (self.node(k), self.node(k + 1));
        for c in 0..self.nd {
            out[c] = a[c] + w * (b[c] - a[c]);
        }
        Ok(())
    }

    pub fn state_vec(&self, time: f64) -> Result<Vec<f64>> {
        let mut v = vec![0.0; self.nd];
        self.state_at(time, &mut v)?;
        Ok(v)
    }

    /// CSV with columns `node_time, x_1..x_nd`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let header: Vec<String> = std::iter::once("node_time".to_string())
            .chain((1..=self.nd).map(|k| format!("x_{k}")))
            .collect();
        writeln!(w, "{}", header.join(","))?;
        for (k, t) in self.times.iter().enumerate() {
            let row: Vec<String> = std::iter::once(format!("{t:e}"))
                .chain(self.node(k).iter().map(|v| format!("{v:e}")))
                .collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

pub fn integrate_backward_flow(
    model: &ChainModel,
    y: &[f64],
    big_t: f64,
    t: f64,
    steps: usize,
) -> Result<FlowPath> {
    integrate_flow(
        model,
        y,
        Direction::Backward,
        t,
        big_t,
        &FlowOptions {
            steps,
            mesh: Mesh::Uniform,
            residual: true,
        },
    )
}

pub fn integrate_forward_flow(
    model: &ChainModel,
    x: &[f64],
    t: f64,
    s: f64,
    steps: usize,
) -> Result<FlowPath> {
    integrate_flow(
        model,
        x,
        Direction::Forward,
        t,
        s,
        &FlowOptions {
            steps,
            mesh: Mesh::Uniform,
            residual: true,
        },
    )
}

/// Integrates on `[lo, hi]` anchored at `hi` (backward) or `lo` (forward).
pub fn integrate_flow(
    model: &ChainModel,
    anchor: &[f64],
    direction: Direction,
    lo: f64,
    hi: f64,
    opts: &FlowOptions,
) -> Result<FlowPath> {
    model.check_dim(anchor)?;
    if !(lo < hi) {
        return Err(invalid(format!("flow interval needs lo < hi, got [{lo}, {hi}]")));
    }
    if opts.steps == 0 {
        return Err(invalid("flow needs at least one step"));
    }
    let times = opts.mesh.nodes(lo, hi, opts.steps);
    let states = rk4_sweep(model, anchor, direction, &times)?;
    let residual = if opts.residual {
        let fine_times = opts.mesh.nodes(lo, hi, 2 * opts.steps);
        let fine = rk4_sweep(model, anchor, direction, &fine_times)?;
        let nd = model.nd();
        let mut worst = 0.0f64;
        for k in 0..times.len() {
            for c in 0..nd {
                worst = worst.max((states[k * nd + c] - fine[2 * k * nd + c]).abs());
            }
        }
        Some(worst)
    } else {
        None
    };
    Ok(FlowPath {
        t0: lo,
        t1: hi,
        direction,
        times,
        states,
        nd: model.nd(),
        residual,
    })
}

fn rk4_sweep(
    model: &ChainModel,
    anchor: &[f64],
    direction: Direction,
    times: &[f64],
) -> Result<Vec<f64>> {
    let nd = model.nd();
    let m = times.len();
    let mut states = vec![0.0; m * nd];
    let mut x = anchor.to_vec();
    let mut ws = Rk4Workspace::new(nd);
    let order: Vec<usize> = match direction {
        Direction::Forward => (0..m).collect(),
        Direction::Backward => (0..m).rev().collect(),
    };
    states[order[0] * nd..(order[0] + 1) * nd].copy_from_slice(anchor);
    for w in order.windows(2) {
        let (from, to) = (w[0], w[1]);
        let (ta, tb) = (times[from], times[to]);
        ws.step(model, ta, tb - ta, &mut x)
            .map_err(|_| Error::NonFiniteDrift { node: to, time: tb })?;
        states[to * nd..(to + 1) * nd].copy_from_slice(&x);
    }
    Ok(states)
}

pub(crate) struct Rk4Workspace {
    k: [Vec<f64>; 4],
    tmp: Vec<f64>,
}

impl Rk4Workspace {
    pub(crate) fn new(nd: usize) -> Self {
        Rk4Workspace {
            k: [vec![0.0; nd], vec![0.0; nd], vec![0.0; nd], vec![0.0; nd]],
            tmp: vec![0.0; nd],
        }
    }

    /// One classical RK4 step of signed size `h`; `Err(())` on a non-finite drift.
    pub(crate) fn step(&mut self, model: &ChainModel, t: f64, h: f64, x: &mut [f64]) -> std::result::Result<(), ()> {
        let nd = x.len();
        let [k1, k2, k3, k4] = &mut self.k;
        let tmp = &mut self.tmp;
        model.drift(t, x, k1);
        for c in 0..nd {
            tmp[c] = x[c] + 0.5 * h * k1[c];
        }
        model.drift(t + 0.5 * h, tmp, k2);
        for c in 0..nd {
            tmp[c] = x[c] + 0.5 * h * k2[c];
        }
        model.drift(t + 0.5 * h, tmp, k3);
        for c in 0..nd {
            tmp[c] = x[c] + h * k3[c];
        }
        model.drift(t + h, tmp, k4);
        for c in 0..nd {
            let inc = h / 6.0 * (k1[c] + 2.0 * k2[c] + 2.0 * k3[c] + k4[c]);
            if !inc.is_finite() {
                return Err(());
            }
            x[c] += inc;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Regularization schedule

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DeltaEntry {
    pub i: usize,
    pub j: usize,
    pub beta: f64,
    pub delta: f64,
    /// `h^{1/2-i} δ^β · h`, equal to 1 up to rounding.
    pub balance: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DeltaSchedule {
    pub h: f64,
    pub n: usize,
    pub entries: Vec<DeltaEntry>,
}

impl DeltaSchedule {
    pub fn delta(&self, i: usize, j: usize) -> f64 {
        self.entries
            .iter()
            .find(|e| e.i == i && e.j == j)
            .map(|e| e.delta)
            .unwrap_or(0.0)
    }

    pub fn max_balance_error(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| (e.balance - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// `δ_ij = h^{(i-3/2)/β_i^j}` for `2 ≤ i ≤ j ≤ n`.
pub fn delta_schedule(h: f64, beta: &HolderMatrix) -> Result<DeltaSchedule> {
    if !(h > 0.0 && h <= 1.0) {
        return Err(invalid(format!("h must lie in (0,1], got {h}")));
    }
    let n = beta.n();
    let mut entries = Vec::new();
    for i in 2..=n {
        for j in i..=n {
            let b = beta.get(i, j);
            if !(b > 0.0 && b <= 1.0) {
                return Err(invalid(format!("β_{i}^{j} = {b} outside (0,1]")));
            }
            let delta = h.powf((i as f64 - 1.5) / b);
            let balance = h.powf(0.5 - i as f64) * delta.powf(b) * h;
            entries.push(DeltaEntry {
                i,
                j,
                beta: b,
                delta,
                balance,
            });
        }
    }
    Ok(DeltaSchedule { h, n, entries })
}

/// Time exponent `(j-i) - (i-3/2)(1-β)/β` of the mollification error term.
pub fn schedule_exponent(i: usize, j: usize, beta: f64) -> f64 {
    (j as f64 - i as f64) - (i as f64 - 1.5) * (1.0 - beta) / beta
}

/// The model with `F_i` (i ≥ 2) convolved in `(z_i, …, z_n)` against a product
/// Gaussian of standard deviations `δ_ij` (block `j`), by tensor Gauss–Hermite.
/// The subgradient blocks are mollified the same way.
pub fn mollified_drift(
    model: &ChainModel,
    schedule: &DeltaSchedule,
    quad_points: usize,
) -> Result<ChainModel> {
    if quad_points < 3 {
        return Err(invalid("mollifier quadrature needs at least 3 points"));
    }
    if schedule.n != model.n() {
        return Err(Error::DimensionMismatch {
            expected: model.n(),
            got: schedule.n,
        });
    }
    let (n, d) = (model.n(), model.d());
    let (gx, gw) = gauss_hermite(quad_points);
    // widths[i-2][k] is the standard deviation for coordinate k in block ≥ i.
    let widths: Vec<Vec<f64>> = (2..=n)
        .map(|i| {
            (0..n * d)
                .map(|k| {
                    let j = k / d + 1;
                    if j >= i {
                        schedule.delta(i, j)
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    let rule = MollifierRule {
        n,
        d,
        gx,
        gw,
        widths,
    };
    let base = model.clone();
    let rule_d = std::sync::Arc::new(rule);
    let rule_g = rule_d.clone();
    let base_g = model.clone();
    let diff = model.clone();
    ChainModel::custom(
        n,
        d,
        move |t, x, out| {
            base.drift(t, x, out);
            let mut f = vec![0.0; n * d];
            for i in 2..=n {
                let acc = rule_d.expect(i, x, |z| {
                    base.drift(t, z, &mut f);
                    f[(i - 1) * d..i * d].to_vec()
                });
                out[(i - 1) * d..i * d].copy_from_slice(&acc);
            }
        },
        move |t, x, out| {
            let mut g = vec![0.0; (n - 1) * d * d];
            for i in 2..=n {
                let acc = rule_g.expect(i, x, |z| {
                    base_g.drift_subgrad(t, z, &mut g);
                    g[(i - 2) * d * d..(i - 1) * d * d].to_vec()
                });
                out[(i - 2) * d * d..(i - 1) * d * d].copy_from_slice(&acc);
            }
        },
        move |t, x, out| diff.diffusion(t, x, out),
        model.holder().clone(),
    )
}

struct MollifierRule {
    n: usize,
    d: usize,
    gx: Vec<f64>,
    gw: Vec<f64>,
    widths: Vec<Vec<f64>>,
}

impl MollifierRule {
    /// Tensor Gauss–Hermite expectation of `g(x + δ·G)` over the active coordinates of level `i`.
    fn expect<G: FnMut(&[f64]) -> Vec<f64>>(&self, i: usize, x: &[f64], mut g: G) -> Vec<f64> {
        let w = &self.widths[i - 2];
        let active: Vec<usize> = (0..self.n * self.d).filter(|&k| w[k] > 0.0).collect();
        let q = self.gx.len();
        let total = q.pow(active.len() as u32);
        let mut z = x.to_vec();
        let mut acc: Vec<f64> = Vec::new();
        let mut idx = vec![0usize; active.len()];
        for _ in 0..total {
            let mut weight = 1.0;
            for (a, &k) in active.iter().enumerate() {
                z[k] = x[k] + w[k] * self.gx[idx[a]];
                weight *= self.gw[idx[a]];
            }
            let v = g(&z);
            if acc.is_empty() {
                acc = vec![0.0; v.len()];
            }
            for (s, vi) in acc.iter_mut().zip(&v) {
                *s += weight * vi;
            }
            for a in 0..active.len() {
                idx[a] += 1;
                if idx[a] < q {
                    break;
                }
                idx[a] = 0;
            }
        }
        acc
    }
}

// ---------------------------------------------------------------------------
// Flow equivalence

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub t: f64,
    pub s: f64,
    pub pairs: usize,
    /// max over pairs of `a / (b + 1)`.
    pub max_a_over_b: f64,
    /// max over pairs of `b / (a + 1)`.
    pub max_b_over_a: f64,
    /// The larger of the two statistics.
    pub constant: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EquivalenceOptions {
    pub flow_steps: usize,
    /// Rescaled separations are Gaussian with these standard deviations, cycled over pairs.
    pub spreads: Vec<f64>,
    pub exec: Exec,
}

impl Default for EquivalenceOptions {
    fn default() -> Self {
        EquivalenceOptions {
            flow_steps: 64,
            spreads: vec![0.5, 2.0, 8.0],
            exec: Exec::default(),
        }
    }
}

pub fn flow_equivalence_probe(
    model: &ChainModel,
    pairs: usize,
    t: f64,
    s: f64,
    seed: u64,
) -> Result<EquivalenceReport> {
    flow_equivalence_probe_with(model, pairs, t, s, seed, &EquivalenceOptions::default())
}

/// Samples `y` uniformly in `[-1,1]^{nd}` and `x = y + h^{-1/2} T_h ζ` with
/// Gaussian `ζ`, so separations are of order one in the rescaled metric.
pub fn flow_equivalence_probe_with(
    model: &ChainModel,
    pairs: usize,
    t: f64,
    s: f64,
    seed: u64,
    opts: &EquivalenceOptions,
) -> Result<EquivalenceReport> {
    if !(t < s) {
        return Err(invalid(format!("equivalence probe needs t < s, got t={t}, s={s}")));
    }
    if pairs == 0 || opts.spreads.is_empty() {
        return Err(invalid("equivalence probe needs at least one pair and one spread"));
    }
    let (n, d, nd) = (model.n(), model.d(), model.nd());
    let h = s - t;
    let prof = ScaleProfile { u: h, n, d };
    let flow_opts = FlowOptions::uniform(opts.flow_steps);
    let stats = exec::try_map_indexed(pairs, opts.exec, |p| -> Result<(f64, f64)> {
        let mut rng = NormalStream::new(seed, p as u64);
        let spread = opts.spreads[p % opts.spreads.len()];
        let y: Vec<f64> = (0..nd).map(|_| 2.0 * rng.next_uniform() - 1.0).collect();
        let x: Vec<f64> = (0..nd)
            .map(|k| y[k] + spread * rng.next_normal() * prof.factor(k) / h.sqrt())
            .collect();
        let back = integrate_flow(model, &y, Direction::Backward, t, s, &flow_opts)?;
        let fwd = integrate_flow(model, &x, Direction::Forward, t, s, &flow_opts)?;
        let (th_y, th_x) = (back.endpoint(), fwd.endpoint());
        let mut a = 0.0;
        let mut b = 0.0;
        for k in 0..nd {
            let ra = (x[k] - th_y[k]) / prof.factor(k);
            let rb = (th_x[k] - y[k]) / prof.factor(k);
            a += ra * ra;
            b += rb * rb;
        }
        Ok((h * a, h * b))
    })?;
    let max_a_over_b = stats.iter().map(|(a, b)| a / (b + 1.0)).fold(0.0, f64::max);
    let max_b_over_a = stats.iter().map(|(a, b)| b / (a + 1.0)).fold(0.0, f64::max);
    Ok(EquivalenceReport {
        t,
        s,
        pairs,
        max_a_over_b,
        max_b_over_a,
        constant: max_a_over_b.max(max_b_over_a),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain_model::{build_kolmogorov_chain, build_power_chain};

    fn kolmo() -> ChainModel {
        build_kolmogorov_chain(2, 1, 1.0).unwrap()
    }

    #[test]
    fn backward_flow_examples() {
        let f = integrate_backward_flow(&kolmo(), &[0.0, 1.0], 1.0, 0.0, 50).unwrap();
        assert_eq!(f.endpoint(), &[0.0, 1.0]);
        let f = integrate_backward_flow(&kolmo(), &[1.0, 1.0], 1.0, 0.0, 50).unwrap();
        assert!((f.endpoint()[0] - 1.0).abs() < 1e-14);
        assert!(f.endpoint()[1].abs() < 1e-14);
        assert_eq!(f.anchor(), &[1.0, 1.0]);
    }

    #[test]
    fn forward_flow_example() {
        let f = integrate_forward_flow(&kolmo(), &[1.0, 0.0], 0.0, 1.0, 50).unwrap();
        assert!((f.endpoint()[1] - 1.0).abs() < 1e-14);
        assert!(f.residual.unwrap() < 1e-14);
    }

    #[test]
    fn zero_drift_is_identity() {
        let m = ChainModel::zero_drift(3, 2, 1.0).unwrap();
        let y = [0.3, -1.0, 2.0, 0.5, 0.0, 7.0];
        let f = integrate_backward_flow(&m, &y, 2.0, 0.5, 7).unwrap();
        for k in 0..f.times.len() {
            assert_eq!(f.node(k), &y);
        }
    }

    #[test]
    fn nonfinite_drift_reports_node() {
        let m = kolmo().with_first_drift(|_t, x, out| out[0] = 1.0 / (x[1] - 0.5));
        let err = integrate_forward_flow(&m, &[0.0, 0.5], 0.0, 1.0, 10).unwrap_err();
        assert!(matches!(err, Error::NonFiniteDrift { node: 1, .. }));
    }

    #[test]
    fn interpolation_and_coverage() {
        let f = integrate_forward_flow(&kolmo(), &[1.0, 0.0], 0.0, 1.0, 4).unwrap();
        let v = f.state_vec(0.125).unwrap();
        assert!((v[1] - 0.125).abs() < 1e-14);
        assert!(f.state_vec(1.5).is_err());
    }

    #[test]
    fn graded_mesh_is_monotone_and_clustered() {
        let nodes = Mesh::Graded { exponent: 2.0 }.nodes(0.0, 1.0, 10);
        assert!(nodes.windows(2).all(|w| w[0] < w[1]));
        assert!((nodes[1] - 0.01).abs() < 1e-15);
    }

    #[test]
    fn delta_schedule_example() {
        let s = delta_schedule(0.01, &HolderMatrix::ones(2)).unwrap();
        assert!((s.delta(2, 2) - 0.1).abs() < 1e-15);
        assert!(s.max_balance_error() < 1e-12);
        assert!(delta_schedule(0.0, &HolderMatrix::ones(2)).is_err());
    }

    #[test]
    fn critical_exponent_is_minus_one() {
        for i in 2..=6 {
            for j in i..=6 {
                let b = (2.0 * i as f64 - 3.0) / (2.0 * j as f64 - 1.0);
                assert!((schedule_exponent(i, j, b) + 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mollifier_preserves_affine_drift() {
        let m = build_kolmogorov_chain(3, 1, 1.0).unwrap();
        let s = delta_schedule(0.1, &HolderMatrix::ones(3)).unwrap();
        let mm = mollified_drift(&m, &s, 5).unwrap();
        let x = [0.4, -1.2, 3.3];
        let (a, b) = (m.drift_vec(0.0, &x), mm.drift_vec(0.0, &x));
        for k in 0..3 {
            assert!((a[k] - b[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn equivalence_on_zero_drift_is_trivial() {
        let m = ChainModel::zero_drift(2, 1, 1.0).unwrap();
        let r = flow_equivalence_probe(&m, 50, 0.0, 0.1, 1).unwrap();
        assert!(r.max_a_over_b <= 1.0 && r.max_b_over_a <= 1.0);
    }

    #[test]
    fn power_chain_flow_stays_on_zero_branch() {
        let b = HolderMatrix::from_upper(2, &[0.5]).unwrap();
        let m = build_power_chain(2, 1, &b, (2, 2), 1.0).unwrap();
        let f = integrate_backward_flow(&m, &[0.0, 0.0], 1.0, 0.0, 20).unwrap();
        assert_eq!(f.endpoint(), &[0.0, 0.0]);
    }
}
