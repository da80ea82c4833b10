//! `kolmo-chain` command-line harness. Each subcommand reads an optional TOML
//! config, runs one library operation, and writes its artifacts under
//! `<out>/<command>-<hash12>`, where the hash covers the resolved config.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use kolmo_chain::chain_model::ModelSpec;

use commands::{Command, Ctx};
use config::{Loaded, Manifest, RawConfig, ResolvedConfig};
use output::{Format, RunReport};

const EXIT_VALIDATION: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser)]
#[command(name = "kolmo-chain", version, about = "Degenerate Kolmogorov-chain experiments")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(clap::Args, Clone, Debug)]
struct Common {
    /// TOML config, or a manifest.json from an earlier run.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output root; defaults to `runs`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores); falls back to KOLMO_CHAIN_THREADS.
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long, value_enum)]
    format: Option<Format>,
}

#[derive(Subcommand)]
enum Sub {
    /// Euler ensemble and terminal moments.
    Simulate(Common),
    /// Kernel density estimate of the terminal law.
    Density(Common),
    /// Frozen Gaussian proxy at one point.
    Proxy(Common),
    /// Proxy covariance spectrum in the anisotropic scale.
    GspCheck(Common),
    /// Forward/backward flow equivalence constants.
    FlowEquiv(Common),
    /// Proxy convergence to the Dirac mass.
    DiracCheck(Common),
    /// Green function of a test function.
    Green(Common),
    /// Operator norm of the parametrix remainder.
    Rnorm(Common),
    /// Singular-weight Green norms.
    SingularGreen(Common),
    /// Refined first-drift Green norm.
    Uf1(Common),
    /// Krylov functional of a test function.
    Krylov(Common),
    /// Girsanov-weighted vs direct drifted ensemble.
    Girsanov(Common),
    /// Exponential moment of the first drift.
    Khasminskii(Common),
    /// Peano survival at one α.
    Peano(Common),
    /// Peano survival across α.
    PeanoSweep(Common),
    /// Sampled assumption checks on the model.
    Validate(Common),
}

impl Sub {
    fn split(self) -> (&'static str, Common) {
        match self {
            Sub::Simulate(c) => ("simulate", c),
            Sub::Density(c) => ("density", c),
            Sub::Proxy(c) => ("proxy", c),
            Sub::GspCheck(c) => ("gsp-check", c),
            Sub::FlowEquiv(c) => ("flow-equiv", c),
            Sub::DiracCheck(c) => ("dirac-check", c),
            Sub::Green(c) => ("green", c),
            Sub::Rnorm(c) => ("rnorm", c),
            Sub::SingularGreen(c) => ("singular-green", c),
            Sub::Uf1(c) => ("uf1", c),
            Sub::Krylov(c) => ("krylov", c),
            Sub::Girsanov(c) => ("girsanov", c),
            Sub::Khasminskii(c) => ("khasminskii", c),
            Sub::Peano(c) => ("peano", c),
            Sub::PeanoSweep(c) => ("peano-sweep", c),
            Sub::Validate(c) => ("validate", c),
        }
    }
}

struct Fail(u8, String);

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(EXIT_VALIDATION, msg.into())
}

fn lib_fail(e: kolmo_chain::Error) -> Fail {
    let code = if e.is_validation() { EXIT_VALIDATION } else { EXIT_NUMERICAL };
    Fail(code, e.to_string())
}

fn io_fail(e: std::io::Error) -> Fail {
    Fail(EXIT_NUMERICAL, format!("i/o error: {e}"))
}

/// Merges config file and flags into the resolved config plus run-only settings.
fn resolve(name: &str, common: &Common) -> Result<(ResolvedConfig, Command, PathBuf, usize), Fail> {
    let (raw, from_manifest) = match &common.config {
        None => (RawConfig::default(), None),
        Some(p) => match config::load(p).map_err(|e| invalid(e.to_string()))? {
            Loaded::Raw(r) => (r, None),
            Loaded::Manifest(m) => (RawConfig::default(), Some(m)),
        },
    };
    let threads = common
        .threads
        .or(raw.threads)
        .or_else(|| std::env::var("KOLMO_CHAIN_THREADS").ok().and_then(|v| v.parse().ok()))
        .unwrap_or(0);
    let out = common
        .out
        .clone()
        .or(raw.out.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"));

    let (command_tag, seed, format, model, params): (Option<String>, u64, Format, Option<ModelSpec>, serde_json::Value) =
        match from_manifest {
            Some(m) => {
                if m.config.hash() != m.hash {
                    return Err(invalid("manifest hash does not match its config"));
                }
                let c = m.config;
                (
                    Some(c.command),
                    common.seed.unwrap_or(c.seed),
                    common.format.unwrap_or(c.format),
                    c.model,
                    c.params,
                )
            }
            None => (
                raw.command.clone(),
                common.seed.or(raw.seed).unwrap_or(0),
                common.format.or(raw.format).unwrap_or_default(),
                raw.model.clone(),
                serde_json::to_value(raw.params.clone().unwrap_or_default()).map_err(|e| invalid(e.to_string()))?,
            ),
        };
    if let Some(tag) = &command_tag {
        if tag != name {
            return Err(invalid(format!("config is for command {tag:?}, not {name:?}")));
        }
    }
    let cmd = Command::parse(name, params).map_err(invalid)?;
    let model = if cmd.uses_model() {
        Some(model.unwrap_or_default())
    } else if model.is_some() {
        return Err(invalid(format!("{name} builds its own chain; remove the [model] block")));
    } else {
        None
    };
    let resolved = ResolvedConfig {
        command: name.to_string(),
        seed,
        format,
        model,
        params: cmd.params_value(),
    };
    Ok((resolved, cmd, out, threads))
}

fn run(name: &str, common: Common) -> Result<(), Fail> {
    let (resolved, cmd, out_root, threads) = resolve(name, &common)?;
    let model = match &resolved.model {
        Some(spec) => Some(spec.build().map_err(lib_fail)?),
        None => None,
    };
    let ctx = Ctx {
        model,
        seed: resolved.seed,
    };
    let hash = resolved.hash();
    let dir = out_root.join(format!("{name}-{}", &hash[..12]));

    let start = Instant::now();
    let outcome = with_threads(threads, || cmd.run(&ctx, resolved.model.as_ref())).map_err(lib_fail)?;
    let wall = start.elapsed().as_secs_f64();

    if dir.join("report.json").exists() {
        let prior = output::read_report(&dir).map_err(io_fail)?;
        let diff = output::headline_mismatches(&prior.headline, &outcome.headline);
        if !diff.is_empty() {
            return Err(Fail(
                EXIT_NUMERICAL,
                format!("re-run of {} differs from stored headline in: {}", dir.display(), diff.join(", ")),
            ));
        }
        println!("{}: reproduced {} headline metrics bitwise", dir.display(), outcome.headline.len());
        return Ok(());
    }

    std::fs::create_dir_all(&dir).map_err(io_fail)?;
    let manifest = Manifest {
        version: config::version(),
        hash: hash.clone(),
        config: resolved.clone(),
    };
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).map_err(|e| Fail(EXIT_NUMERICAL, e.to_string()))?,
    )
    .map_err(io_fail)?;
    let mut artifacts = vec!["manifest.json".to_string()];
    artifacts.extend(output::render(&dir, &outcome, resolved.format).map_err(io_fail)?);
    artifacts.push("report.json".into());
    let report = RunReport {
        command: name.to_string(),
        version: config::version(),
        manifest_hash: hash,
        wall_time_s: wall,
        artifacts,
        headline: outcome.headline,
        pass: outcome.pass,
        details: outcome.details,
    };
    output::write_report(&dir, &report).map_err(io_fail)?;
    let verdict = match report.pass {
        Some(true) => " [pass]",
        Some(false) => " [fail]",
        None => "",
    };
    println!("{}{verdict}", dir.display());
    for (k, v) in &report.headline {
        println!("  {k} = {v}");
    }
    Ok(())
}

#[cfg(feature = "parallel")]
fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}

#[cfg(not(feature = "parallel"))]
fn with_threads<T: Send>(_threads: usize, f: impl FnOnce() -> T + Send) -> T {
    f()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (name, common) = cli.command.split();
    debug_assert!(commands::COMMANDS.contains(&name));
    match run(name, common) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Fail(code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}
