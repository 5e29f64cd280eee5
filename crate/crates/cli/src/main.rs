//! `srd`: sampling, certification and surface-measure campaigns with
//! replayable manifests.
//!
//! Exit codes: 0 success, 1 other failure (including failed oracle checks
//! and replay mismatches), 2 configuration, 3 blow-up, 4 conditioning,
//! 5 empty shell.

mod commands;
mod config;
mod error;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{parse_list, parse_modes, DictKind, Invocation, LevelKind, Suite};
use config::RunFile;
use error::CliError;
use manifest::{Artifact, OutputDir, RunManifest, MANIFEST_NAME};

#[derive(Parser)]
#[command(name = "srd", version, about = "Stochastic reaction-diffusion verification campaigns")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample the invariant measure into <out>/ensemble.srd.
    Sample {
        /// TOML run file; every key is optional.
        config: Option<PathBuf>,
        #[arg(long)]
        chains: Option<usize>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        burn_in: Option<u64>,
        #[arg(long)]
        thin: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Integration-by-parts ratio table over a trig dictionary and directions e_k.
    CertifyIbp {
        ensemble: PathBuf,
        /// Exponent of the L^p(ν) norm of the test function.
        #[arg(long, default_value_t = 2.0)]
        p: f64,
        /// Direction range `k1..k2` (inclusive); default 1..min(16, n).
        #[arg(long)]
        modes: Option<String>,
        #[arg(long, value_enum, default_value_t = DictKind::Trig)]
        dict: DictKind,
        #[arg(long, default_value_t = 1e10)]
        condition_limit: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Surface measure of a level set of |x|² or ⟨x, b⟩.
    Surface {
        ensemble: PathBuf,
        #[arg(long, value_enum)]
        g: LevelKind,
        /// Level; defaults to the ensemble median of g.
        #[arg(long, allow_hyphen_values = true)]
        r: Option<f64>,
        /// Comma-separated shell half-widths, strictly decreasing.
        #[arg(long)]
        eps_schedule: Option<String>,
        /// Comma-separated half-space normal; defaults to e_1.
        #[arg(long, allow_hyphen_values = true)]
        normal: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare an ensemble with exact laws; nonzero exit if any check fails.
    OracleCompare {
        ensemble: PathBuf,
        #[arg(long, value_enum)]
        suite: Suite,
        /// γ of the reference law; defaults to the ensemble's.
        #[arg(long, allow_hyphen_values = true)]
        gamma: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-run the command recorded in a manifest and compare checksums.
    Replay {
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn path_string(p: &Path) -> String {
    p.display().to_string()
}

fn resolve(command: Command) -> Result<(Invocation, PathBuf), CliError> {
    Ok(match command {
        Command::Sample {
            config,
            chains,
            steps,
            burn_in,
            thin,
            out,
        } => {
            let file = match config {
                Some(p) => RunFile::load(&p)?,
                None => RunFile::default(),
            };
            (Invocation::Sample(file.plan(chains, steps, burn_in, thin)?), out)
        }
        Command::CertifyIbp {
            ensemble,
            p,
            modes,
            dict,
            condition_limit,
            out,
        } => (
            Invocation::CertifyIbp {
                ensemble: path_string(&ensemble),
                p,
                modes: modes.as_deref().map(parse_modes).transpose()?,
                dict,
                condition_limit,
            },
            out,
        ),
        Command::Surface {
            ensemble,
            g,
            r,
            eps_schedule,
            normal,
            out,
        } => (
            Invocation::Surface {
                ensemble: path_string(&ensemble),
                g,
                normal: normal.as_deref().map(|s| parse_list("normal", s)).transpose()?,
                r,
                eps_schedule: eps_schedule.as_deref().map(|s| parse_list("eps_schedule", s)).transpose()?,
            },
            out,
        ),
        Command::OracleCompare {
            ensemble,
            suite,
            gamma,
            out,
        } => (
            Invocation::OracleCompare {
                ensemble: path_string(&ensemble),
                suite,
                gamma,
            },
            out,
        ),
        Command::Replay { .. } => unreachable!("replay is handled separately"),
    })
}

/// Execute and write the manifest. Returns the manifest and the number of
/// failed checks.
fn run(invocation: Invocation, out: &Path, threads: usize) -> Result<(RunManifest, usize), CliError> {
    let started = manifest::now();
    let mut dir = OutputDir::create(out)?;
    let done = invocation.execute(&mut dir)?;
    println!("{}", done.summary);
    let m = RunManifest {
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        seed: done.config.seed,
        config: done.config,
        invocation,
        started,
        finished: manifest::now(),
        worker_threads: threads,
        inputs: done.inputs,
        outputs: dir.finish(),
    };
    let text = serde_json::to_vec_pretty(&m).expect("manifest serializes");
    let path = out.join(MANIFEST_NAME);
    std::fs::write(&path, text).map_err(|e| CliError::io(path.display(), e))?;
    Ok((m, done.failed_checks))
}

fn replay(manifest_path: &Path, out: &Path, threads: usize) -> Result<(), CliError> {
    let old = RunManifest::load(manifest_path)?;
    for input in &old.inputs {
        let now = Artifact::read(Path::new(&input.path))?;
        if now.sha256 != input.sha256 {
            return Err(CliError::Replay(format!("input {} changed since the recorded run", input.path)));
        }
    }
    println!("replaying {} from {}", old.invocation.name(), manifest_path.display());
    let (new, _) = run(old.invocation.clone(), out, threads)?;
    let mut mismatches = Vec::new();
    for a in &old.outputs {
        match new.outputs.iter().find(|b| b.path == a.path) {
            Some(b) if b.sha256 == a.sha256 => println!("match    {}", a.path),
            Some(_) => mismatches.push(a.path.clone()),
            None => mismatches.push(format!("{} (not produced)", a.path)),
        }
    }
    for m in &mismatches {
        println!("MISMATCH {m}");
    }
    if mismatches.is_empty() {
        Ok(())
    } else {
        Err(CliError::Replay(mismatches.join(", ")))
    }
}

/// Size the global pool: available cores, capped by `RD_THREADS`.
fn init_pool() -> Result<usize, CliError> {
    let available = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let threads = match std::env::var("RD_THREADS") {
        Ok(v) => {
            let cap: usize = v
                .trim()
                .parse()
                .ok()
                .filter(|n| *n > 0)
                .ok_or_else(|| CliError::config("RD_THREADS", format!("need a positive integer, got {v:?}")))?;
            cap.min(available)
        }
        Err(_) => available,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::Io(format!("worker pool: {e}")))?;
    Ok(threads)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = init_pool().and_then(|threads| match cli.command {
        Command::Replay { manifest, out } => replay(&manifest, &out, threads),
        other => {
            let (invocation, out) = resolve(other)?;
            let (_, failed) = run(invocation, &out, threads)?;
            if failed > 0 {
                Err(CliError::ChecksFailed(failed))
            } else {
                Ok(())
            }
        }
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
