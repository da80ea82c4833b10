//! Perturbed Peano systems `Z_t = x + ∫ sign(I_k Z)|I_k Z|^α ds + W^i_t`, where
//! `W^i` is the `(i-1)`-fold time integral of a Brownian motion and `I_k` integrates
//! `k = j - i` times. The lab simulates `Z` inside the power chain of length `j`,
//! estimates the survival probability above the deflated extreme solution, and
//! compares it with the Markov lower bound on both sides of `(2i-3)/(2j-1)`.

use std::io::Write;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::chain_model::{build_kolmogorov_chain, build_power_chain, ChainModel, HolderMatrix};
use crate::dense;
use crate::error::{invalid, Error, Result};
use crate::exec::{self, mean_and_se, Exec};
use crate::flow_engine::Mesh;
use crate::mc_simulate::linear_step_matrices;
use crate::quad::gauss_legendre;
use crate::rng::{derive_seed, NormalStream};

// ---------------------------------------------------------------------------
// Closed forms

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtremeSolution {
    pub alpha: f64,
    pub k: usize,
    /// Exponent `(kα+1)/(1-α)`.
    pub p: f64,
    /// Coefficient of the maximal solution `c·t^p`.
    pub c: f64,
    /// `max |d/dt(c t^p) - |I_k(c t^p)|^α|` over `t ∈ [0.1, 1]`, with `I_k` by quadrature.
    pub residual: f64,
}

/// Maximal solution `c t^p` of `Ż = |I_k Z|^α`, `Z(0) = 0`.
pub fn extreme_solution(alpha: f64, k: usize) -> Result<ExtremeSolution> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(invalid(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let p = (k as f64 * alpha + 1.0) / (1.0 - alpha);
    let prod: f64 = (1..=k).map(|m| (p + m as f64).powf(alpha)).product();
    let c = (p * prod).powf(-1.0 / (1.0 - alpha));
    let residual = extreme_residual(alpha, k, p, c, 46);
    Ok(ExtremeSolution {
        alpha,
        k,
        p,
        c,
        residual,
    })
}

/// `I_k f(t) = ∫_0^t (t-s)^{k-1}/(k-1)! f(s) ds` by Gauss–Legendre (Cauchy's formula).
fn iterated_integral<F: Fn(f64) -> f64>(f: F, k: usize, t: f64) -> f64 {
    if k == 0 {
        return f(t);
    }
    let (s, w) = gauss_legendre(200, 0.0, t);
    let fact: f64 = (1..k).map(|v| v as f64).product();
    s.iter()
        .zip(&w)
        .map(|(&s, &w)| w * (t - s).powi(k as i32 - 1) * f(s))
        .sum::<f64>()
        / fact
}

fn extreme_residual(alpha: f64, k: usize, p: f64, c: f64, points: usize) -> f64 {
    (0..points)
        .map(|m| {
            let t = 0.1 + 0.9 * m as f64 / (points - 1) as f64;
            let lhs = c * p * t.powf(p - 1.0);
            let rhs = iterated_integral(|s| c * s.powf(p), k, t).abs().powf(alpha);
            (lhs - rhs).abs()
        })
        .fold(0.0, f64::max)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Threshold {
    pub i: usize,
    pub j: usize,
    /// `(2i-3)/(2j-1)`.
    pub value: Ratio<i64>,
    /// `(γ-1)/(k+γ)` with `γ = i - 1/2`, `k = j - i`.
    pub from_self_similarity: Ratio<i64>,
}

/// Exact sharpness threshold for `β_i^j`, checked against its self-similarity form.
pub fn sharpness_threshold(i: usize, j: usize) -> Result<Threshold> {
    if i < 2 || j < i {
        return Err(invalid(format!("threshold needs 2 ≤ i ≤ j, got ({i},{j})")));
    }
    let (ii, jj) = (i as i64, j as i64);
    let value = Ratio::new(2 * ii - 3, 2 * jj - 1);
    let gamma = Ratio::new(2 * ii - 1, 2);
    let k = Ratio::from_integer(jj - ii);
    let from_self_similarity = (gamma - 1) / (k + gamma);
    if value != from_self_similarity {
        return Err(Error::Numerical(format!(
            "threshold identity failed: {value} ≠ {from_self_similarity}"
        )));
    }
    Ok(Threshold {
        i,
        j,
        value,
        from_self_similarity,
    })
}

/// `(Var W^i_1, E|W^i_1|)` with `Var = 1/((i-1)!²(2i-1))`.
pub fn iterated_bm_moment(i: usize) -> Result<(f64, f64)> {
    if i == 0 {
        return Err(invalid("noise level must be at least 1"));
    }
    let fact: f64 = (1..i).map(|v| v as f64).product();
    let v = 1.0 / (fact * fact * (2 * i - 1) as f64);
    Ok((v, (2.0 * v / std::f64::consts::PI).sqrt()))
}

/// `δ = γ - (kα+1)/(1-α)` with `γ = i - 1/2`, `k = j - i`.
pub fn delta(alpha: f64, i: usize, j: usize) -> f64 {
    let k = (j - i) as f64;
    (i as f64 - 0.5) - (k * alpha + 1.0) / (1.0 - alpha)
}

/// `c̃ = (β-η) c` with `(1-η) = [(1-β)^α + (1-β)]/2`.
pub fn reduced_coefficient(alpha: f64, beta_margin: f64, c: f64) -> f64 {
    let one_minus_eta = ((1.0 - beta_margin).powf(alpha) + (1.0 - beta_margin)) / 2.0;
    let eta = 1.0 - one_minus_eta;
    (beta_margin - eta) * c
}

/// `1 - E|W₁| c̃^{-1} ρ^δ`.
pub fn markov_lower(alpha: f64, i: usize, j: usize, beta_margin: f64, rho: f64) -> Result<f64> {
    let ext = extreme_solution(alpha, j - i)?;
    let (_, abs_m) = iterated_bm_moment(i)?;
    let ct = reduced_coefficient(alpha, beta_margin, ext.c);
    Ok(1.0 - abs_m / ct * rho.powf(delta(alpha, i, j)))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RhoCalibration {
    pub rho: f64,
    /// Set when `δ = 0` makes the bound independent of `ρ`; `ρ = 1` is used then.
    pub fallback: bool,
}

/// Solves `markov_lower(ρ) = target` for `ρ`.
pub fn calibrate_rho(alpha: f64, i: usize, j: usize, beta_margin: f64, target: f64) -> Result<RhoCalibration> {
    if !(target < 1.0) {
        return Err(invalid("calibration target must be below 1"));
    }
    let ext = extreme_solution(alpha, j - i)?;
    let (_, abs_m) = iterated_bm_moment(i)?;
    let ct = reduced_coefficient(alpha, beta_margin, ext.c);
    let dl = delta(alpha, i, j);
    if dl.abs() < 1e-12 {
        return Ok(RhoCalibration { rho: 1.0, fallback: true });
    }
    let rho = ((1.0 - target) * ct / abs_m).powf(1.0 / dl);
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(Error::Numerical(format!("ρ calibration gave {rho}")));
    }
    Ok(RhoCalibration { rho, fallback: false })
}

// ---------------------------------------------------------------------------
// Simulation

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PeanoConfig {
    pub alpha: f64,
    /// Noise level: the noise is the `(i-1)`-fold integral of Brownian motion.
    pub i: usize,
    /// Level carrying the `k = j - i` running integrals of `Z`.
    pub j: usize,
    pub x0: f64,
    /// Horizon; `None` calibrates it from `markov_lower = 3/4`.
    pub rho: Option<f64>,
    pub beta_margin: f64,
    pub paths: usize,
    pub steps: usize,
    pub grading: f64,
    pub seed: u64,
    /// Negate every Gaussian increment.
    pub mirrored: bool,
    /// Keep simulating after the first passage (needed for full path records).
    pub run_past_passage: bool,
    /// Record `Z` every this many steps (0 records nothing).
    pub record_every: usize,
    pub exec: Exec,
}

impl Default for PeanoConfig {
    fn default() -> Self {
        PeanoConfig {
            alpha: 0.15,
            i: 2,
            j: 2,
            x0: 1e-3,
            rho: None,
            beta_margin: 0.5,
            paths: 10_000,
            steps: 10_000,
            grading: 2.0,
            seed: 0,
            mirrored: false,
            run_past_passage: false,
            record_every: 0,
            exec: Exec::default(),
        }
    }
}

impl PeanoConfig {
    pub fn k(&self) -> usize {
        self.j - self.i
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(invalid(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        sharpness_threshold(self.i, self.j)?;
        if !(self.x0 >= 0.0 && self.x0.is_finite()) {
            return Err(invalid("x0 must be a finite non-negative number"));
        }
        if !(self.beta_margin > 0.0 && self.beta_margin < 1.0) {
            return Err(invalid("beta_margin must lie in (0, 1)"));
        }
        if self.paths == 0 || self.steps == 0 {
            return Err(invalid("paths and steps must be positive"));
        }
        if !(self.grading >= 1.0) {
            return Err(invalid("grading must be at least 1"));
        }
        if let Some(r) = self.rho {
            if !(r > 0.0 && r.is_finite()) {
                return Err(invalid("rho must be positive"));
            }
        }
        Ok(())
    }

    /// The horizon and whether it came from the `δ = 0` fallback.
    pub fn resolved_rho(&self) -> Result<RhoCalibration> {
        match self.rho {
            Some(rho) => Ok(RhoCalibration { rho, fallback: false }),
            None => calibrate_rho(self.alpha, self.i, self.j, self.beta_margin, 0.75),
        }
    }

    /// The chain simulated: power chain of length `j` with `β_i^j = α`.
    pub fn model(&self) -> Result<ChainModel> {
        let mut h = HolderMatrix::ones(self.j);
        h.set(self.i, self.j, self.alpha)?;
        build_power_chain(self.j, 1, &h, (self.i, self.j), 1.0)
    }
}

#[derive(Clone, Debug)]
pub struct PeanoEnsemble {
    pub config: PeanoConfig,
    pub rho: RhoCalibration,
    pub times: Vec<f64>,
    /// First grid time with `Z ≤ (1-β) c t^p`, if any.
    pub passage: Vec<Option<f64>>,
    /// Row-major `paths × j` chain state at the last simulated node.
    pub terminal: Vec<f64>,
    /// Recorded `Z` values (`paths × recorded`), when `record_every > 0`.
    pub z_records: Vec<f64>,
    pub recorded_times: Vec<f64>,
    pub excluded: Vec<bool>,
}

/// Per-step `Φ₁` and noise factor of the linear block on the graded mesh.
fn linear_plan(n: usize, times: &[f64]) -> Vec<(Vec<f64>, Vec<f64>)> {
    let mut jac = vec![0.0; n * n];
    for r in 1..n {
        jac[r * n + r - 1] = 1.0;
    }
    times
        .windows(2)
        .map(|w| {
            let (phi, mut cov) = linear_step_matrices(&jac, &[1.0], n, 1, w[1] - w[0]);
            if dense::cholesky(&mut cov, n).is_err() {
                // Tiny steps at high levels underflow the lower blocks; keep the
                // first-level variance and drop the rest.
                let v = w[1] - w[0];
                cov = vec![0.0; n * n];
                cov[0] = v.sqrt();
            }
            (phi, cov)
        })
        .collect()
}

/// Simulates the chain by exact linear splitting on the mesh
/// `t_m = ρ (m/steps)^grading`, tracking the first passage of `Z = X_i` below
/// the deflated extreme solution on the grid.
pub fn simulate_peano(config: &PeanoConfig) -> Result<PeanoEnsemble> {
    config.validate()?;
    let rho = config.resolved_rho()?;
    let model = config.model()?;
    let n = config.j;
    let zi = config.i - 1;
    let ext = extreme_solution(config.alpha, config.k())?;
    let level = (1.0 - config.beta_margin) * ext.c;
    let times = Mesh::Graded {
        exponent: config.grading,
    }
    .nodes(0.0, rho.rho, config.steps);
    let envelope: Vec<f64> = times.iter().map(|t| level * t.powf(ext.p)).collect();
    let plan = linear_plan(n, &times);
    let rec: Vec<usize> = if config.record_every > 0 {
        (0..=config.steps).step_by(config.record_every).collect()
    } else {
        Vec::new()
    };
    let out = exec::map_indexed(config.paths, config.exec, |p| {
        let mut rng = NormalStream::new(config.seed, p as u64).mirrored(config.mirrored);
        let mut x = vec![0.0; n];
        x[zi] = config.x0;
        let mut f = vec![0.0; n];
        let mut xi = vec![0.0; n];
        let mut tmp = vec![0.0; n];
        let mut passage = if x[zi] <= envelope[0] { Some(0.0) } else { None };
        let mut zs = Vec::with_capacity(rec.len());
        let mut next_rec = 0;
        if rec.first() == Some(&0) {
            zs.push(x[zi]);
            next_rec = 1;
        }
        let mut failed = false;
        for m in 0..config.steps {
            if passage.is_some() && !config.run_past_passage {
                break;
            }
            let (phi, chol) = &plan[m];
            rng.fill(&mut xi);
            model.drift(times[m], &x, &mut f);
            dense::matvec(phi, &f, n, n, &mut tmp);
            for r in 0..n {
                x[r] += tmp[r];
            }
            dense::lower_matvec(chol, n, &xi, &mut tmp);
            for r in 0..n {
                x[r] += tmp[r];
            }
            if !x[zi].is_finite() {
                failed = true;
                break;
            }
            if passage.is_none() && x[zi] <= envelope[m + 1] {
                passage = Some(times[m + 1]);
            }
            if next_rec < rec.len() && rec[next_rec] == m + 1 {
                zs.push(x[zi]);
                next_rec += 1;
            }
        }
        zs.resize(rec.len(), f64::NAN);
        (passage, x, zs, failed)
    });
    let mut passage = Vec::with_capacity(config.paths);
    let mut terminal = Vec::with_capacity(config.paths * n);
    let mut z_records = Vec::with_capacity(config.paths * rec.len());
    let mut excluded = Vec::with_capacity(config.paths);
    for (pa, x, zs, failed) in out {
        passage.push(pa);
        terminal.extend_from_slice(&x);
        z_records.extend_from_slice(&zs);
        excluded.push(failed);
    }
    Ok(PeanoEnsemble {
        config: config.clone(),
        rho,
        recorded_times: rec.iter().map(|&m| times[m]).collect(),
        times,
        passage,
        terminal,
        z_records,
        excluded,
    })
}

// ---------------------------------------------------------------------------
// Survival

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    BelowThreshold,
    AtThreshold,
    AboveThreshold,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PeanoReport {
    pub i: usize,
    pub j: usize,
    pub alpha: f64,
    pub x0: f64,
    pub delta: f64,
    pub rho: f64,
    pub rho_fallback: bool,
    pub markov_lower: f64,
    pub survival_hat: f64,
    pub std_error: f64,
    pub ci95: (f64, f64),
    pub paths: usize,
    pub steps: usize,
    pub excluded: usize,
    pub regime: Regime,
    /// For `δ > 0`: whether `markov_lower ≤ survival_hat + 3 SE`.
    pub bound_consistent: Option<bool>,
    /// Grid monitoring misses crossings between nodes, so the estimated
    /// passage time is late and the survival estimate biased upward.
    pub monitoring_bias: String,
}

/// Wilson score interval at 95%.
pub fn wilson_interval(successes: usize, total: usize) -> (f64, f64) {
    if total == 0 {
        return (0.0, 1.0);
    }
    let z = 1.959_963_984_540_054;
    let nf = total as f64;
    let ph = successes as f64 / nf;
    let den = 1.0 + z * z / nf;
    let center = (ph + z * z / (2.0 * nf)) / den;
    let half = z * (ph * (1.0 - ph) / nf + z * z / (4.0 * nf * nf)).sqrt() / den;
    ((center - half).max(0.0), (center + half).min(1.0))
}

/// Fraction of surviving paths with no grid passage before `ρ`.
pub fn survival_probability(ens: &PeanoEnsemble, config: &PeanoConfig) -> Result<PeanoReport> {
    if config.x0 <= 0.0 {
        return Err(invalid("survival runs need x0 > 0"));
    }
    let rho = ens.rho.rho;
    let last = *ens.times.last().ok_or_else(|| invalid("empty ensemble grid"))?;
    if (last - rho).abs() > 1e-12 * rho.max(1.0) {
        return Err(invalid(format!("ensemble grid ends at {last}, not at ρ = {rho}")));
    }
    let live: Vec<usize> = (0..ens.passage.len()).filter(|&p| !ens.excluded[p]).collect();
    if live.is_empty() {
        return Err(Error::NoSurvivingPaths);
    }
    // τ ≥ ρ: a passage recorded exactly at ρ still counts as survival.
    let hits: Vec<f64> = live
        .iter()
        .map(|&p| match ens.passage[p] {
            None => 1.0,
            Some(t) if t >= rho => 1.0,
            _ => 0.0,
        })
        .collect();
    let (survival_hat, std_error) = mean_and_se(&hits);
    let successes = hits.iter().filter(|&&h| h == 1.0).count();
    let dl = delta(config.alpha, config.i, config.j);
    let ml = markov_lower(config.alpha, config.i, config.j, config.beta_margin, rho)?;
    let thr = sharpness_threshold(config.i, config.j)?.value;
    let thr_f = *thr.numer() as f64 / *thr.denom() as f64;
    let regime = if config.alpha < thr_f {
        Regime::BelowThreshold
    } else if config.alpha > thr_f {
        Regime::AboveThreshold
    } else {
        Regime::AtThreshold
    };
    Ok(PeanoReport {
        i: config.i,
        j: config.j,
        alpha: config.alpha,
        x0: config.x0,
        delta: dl,
        rho,
        rho_fallback: ens.rho.fallback,
        markov_lower: ml,
        survival_hat,
        std_error,
        ci95: wilson_interval(successes, live.len()),
        paths: config.paths,
        steps: config.steps,
        excluded: config.paths - live.len(),
        regime,
        bound_consistent: (dl > 0.0).then_some(ml <= survival_hat + 3.0 * std_error),
        monitoring_bias: "upward: passages between grid nodes are missed".into(),
    })
}

pub fn run_peano(config: &PeanoConfig) -> Result<PeanoReport> {
    let ens = simulate_peano(config)?;
    survival_probability(&ens, config)
}

/// One report per `α`, each with its own calibrated `ρ` and a seed derived
/// from `(seed, i, j, α index)`.
pub fn threshold_sweep(i: usize, j: usize, alpha_grid: &[f64], shared: &PeanoConfig) -> Result<Vec<PeanoReport>> {
    if alpha_grid.is_empty() {
        return Err(invalid("empty alpha grid"));
    }
    if alpha_grid.iter().any(|a| !(*a > 0.0 && *a < 1.0)) {
        return Err(invalid("alpha grid must lie in (0, 1)"));
    }
    alpha_grid
        .iter()
        .enumerate()
        .map(|(k, &alpha)| {
            let cfg = PeanoConfig {
                alpha,
                i,
                j,
                rho: None,
                seed: derive_seed(shared.seed, &[i as u64, j as u64, k as u64]),
                ..shared.clone()
            };
            run_peano(&cfg)
        })
        .collect()
}

/// Survival at a fixed `α` as `x0` decreases.
pub fn x0_limit_sweep(config: &PeanoConfig, x0s: &[f64]) -> Result<Vec<PeanoReport>> {
    x0s.iter()
        .map(|&x0| run_peano(&PeanoConfig { x0, ..config.clone() }))
        .collect()
}

pub fn write_sweep_csv<W: Write>(rows: &[PeanoReport], mut w: W) -> Result<()> {
    writeln!(w, "i,j,alpha,delta,rho,markov_lower,survival_hat,ci_lo,ci_hi,paths,steps")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.i, r.j, r.alpha, r.delta, r.rho, r.markov_lower, r.survival_hat, r.ci95.0, r.ci95.1, r.paths, r.steps
        )?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Noise self-similarity

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SelfSimilarityReport {
    pub i: usize,
    pub lambda: f64,
    pub gamma: f64,
    /// `E|W^i_1|` and `Var W^i_1` from the unit-horizon run.
    pub abs_moment: (f64, f64),
    pub variance: (f64, f64),
    /// Same moments of `λ^{-γ} W^i_λ` from the horizon-`λ` run.
    pub abs_moment_scaled: (f64, f64),
    pub variance_scaled: (f64, f64),
    pub within_3se: bool,
}

/// Simulates the noise chain `W^1 = W, W^{m+1} = ∫ W^m` on `[0, 1]` and on
/// `[0, λ]` (independent seeds) and compares the moments of `W^i_1` and
/// `λ^{-γ} W^i_λ`.
pub fn noise_self_similarity(i: usize, lambda: f64, paths: usize, steps: usize, seed: u64) -> Result<SelfSimilarityReport> {
    if i == 0 || !(lambda > 0.0) || paths < 2 || steps == 0 {
        return Err(invalid("self-similarity check needs i ≥ 1, λ > 0, paths ≥ 2, steps ≥ 1"));
    }
    let model = build_kolmogorov_chain(i, 1, 1.0)?;
    let gamma = i as f64 - 0.5;
    let run = |horizon: f64, s: u64| -> Result<(Vec<f64>, Vec<f64>)> {
        let times = Mesh::Uniform.nodes(0.0, horizon, steps);
        let plan = linear_plan(i, &times);
        let vals = exec::map_indexed(paths, Exec::default(), |p| {
            let mut rng = NormalStream::new(s, p as u64);
            let mut x = vec![0.0; i];
            let mut xi = vec![0.0; i];
            let mut f = vec![0.0; i];
            let mut tmp = vec![0.0; i];
            for m in 0..steps {
                rng.fill(&mut xi);
                model.drift(times[m], &x, &mut f);
                dense::matvec(&plan[m].0, &f, i, i, &mut tmp);
                for r in 0..i {
                    x[r] += tmp[r];
                }
                dense::lower_matvec(&plan[m].1, i, &xi, &mut tmp);
                for r in 0..i {
                    x[r] += tmp[r];
                }
            }
            x[i - 1] / horizon.powf(gamma)
        });
        Ok((vals.iter().map(|v| v.abs()).collect(), vals.iter().map(|v| v * v).collect()))
    };
    let (a1, v1) = run(1.0, derive_seed(seed, &[1]))?;
    let (a2, v2) = run(lambda, derive_seed(seed, &[2]))?;
    let (ma, sa) = mean_and_se(&a1);
    let (mv, sv) = mean_and_se(&v1);
    let (ma2, sa2) = mean_and_se(&a2);
    let (mv2, sv2) = mean_and_se(&v2);
    let close = |m1: f64, s1: f64, m2: f64, s2: f64| (m1 - m2).abs() <= 3.0 * (s1 * s1 + s2 * s2).sqrt();
    Ok(SelfSimilarityReport {
        i,
        lambda,
        gamma,
        abs_moment: (ma, sa),
        variance: (mv, sv),
        abs_moment_scaled: (ma2, sa2),
        variance_scaled: (mv2, sv2),
        within_3se: close(ma, sa, ma2, sa2) && close(mv, sv, mv2, sv2),
    })
}
