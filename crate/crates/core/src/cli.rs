//! Command-line front end.
//!
//! Failures print a single line `error[<kind>]: <message>` on stderr and exit
//! with status 1 (2 for usage errors).

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::compression::{certify_compressor, VectorSampler};
use crate::config::{Built, Config, Sidecar};
use crate::engine::run;
use crate::error::{Error, Result};
use crate::experiments::{preset_by_name, run_config_sweep, run_id, Manifest};
use crate::operators::find_fixed_point;
use crate::oracle::certify_oracle;
use crate::report::{Report, Status};

#[derive(Parser, Debug)]
#[command(name = "fpnet", version, about = "Compressed, communication-skipping distributed KM iterations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Overrides `run.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// `section.key=value`; the key must exist in the config.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Proceed even when a validator reports FAIL.
    #[arg(long)]
    allow_warn: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Single engine run: writes `<id>__s<seed>.csv` and its sidecar.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Runs the config's `[sweep]` grid under several seeds.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
        /// Seeds 1..=K; defaults to `sweep.seeds` or the run seed.
        #[arg(long)]
        seeds: Option<u64>,
    },
    /// Runs a named figure preset.
    Preset {
        name: String,
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        allow_warn: bool,
    },
    /// Prints the theorem parameter conditions with margins.
    ValidateParams {
        #[command(flatten)]
        common: Common,
    },
    /// Monte-Carlo certification of the configured compressor and oracle.
    Certify {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 10_000)]
        trials: usize,
        #[arg(long, default_value_t = 8)]
        points: usize,
    },
    /// Solves for the fixed point of the configured global operator.
    Fixpoint {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1e-10)]
        tol: f64,
    },
}

fn parse_overrides(raw: &[String]) -> Result<Vec<(String, String)>> {
    raw.iter()
        .map(|s| {
            s.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::Config(format!("override `{s}` is not KEY=VALUE")))
        })
        .collect()
}

fn load(common: &Common) -> Result<Config> {
    let cfg = Config::from_path(&common.config)?;
    let mut ov = parse_overrides(&common.overrides)?;
    if let Some(seed) = common.seed {
        ov.push(("run.seed".into(), seed.to_string()));
    }
    cfg.with_overrides(&ov)
}

fn gate(report: &Report, allow: bool) -> Result<()> {
    match report.status() {
        Status::Fail if !allow => {
            let failed: Vec<&str> = report
                .checks
                .iter()
                .filter(|c| c.status == Status::Fail)
                .map(|c| c.name.as_str())
                .collect();
            Err(Error::Infeasible(format!(
                "validator FAIL ({}); pass --allow-warn to run anyway",
                failed.join(", ")
            )))
        }
        Status::Fail | Status::Warn => {
            let flagged: Vec<&str> = report
                .checks
                .iter()
                .filter(|c| c.status >= Status::Warn)
                .map(|c| c.name.as_str())
                .collect();
            eprintln!("WARNING: {} conditions not met: {}", report.subject, flagged.join(", "));
            Ok(())
        }
        _ => Ok(()),
    }
}

fn write_run(cfg: &Config, built: &Built, out_dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(out_dir)?;
    let trace = run(&built.run)?;
    let id = run_id(&cfg.run.id, "", cfg.run.seed);
    let csv = out_dir.join(format!("{id}.csv"));
    trace.write_csv(&csv)?;
    let side = Sidecar {
        config: cfg.clone(),
        header: built.header.clone(),
        diagnostics: trace.diagnostics.clone(),
        validation: built.validation.clone(),
        defaults: Vec::new(),
    };
    std::fs::write(out_dir.join(format!("{id}.sidecar.toml")), side.to_toml_string()?)?;
    Ok(csv)
}

fn report_manifest(m: &Manifest, out_dir: &Path) -> Result<()> {
    println!("{} artifacts, {} failed runs", m.entries.len(), m.errors.len());
    for e in &m.errors {
        println!("failed {} {}", e.run_id, e.kind);
    }
    println!("manifest {}", out_dir.join(crate::experiments::MANIFEST_NAME).display());
    Ok(())
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Run { common, out_dir } => {
            let cfg = load(&common)?;
            let built = cfg.build()?;
            gate(&built.validation, common.allow_warn)?;
            let csv = write_run(&cfg, &built, &out_dir)?;
            println!("wrote {}", csv.display());
            Ok(())
        }
        Command::Sweep {
            common,
            out_dir,
            seeds,
        } => {
            let cfg = load(&common)?;
            let seeds: Vec<u64> = match seeds {
                Some(k) => (1..=k).collect(),
                None => cfg.sweep_seeds().unwrap_or_else(|| vec![cfg.run.seed]),
            };
            let m = run_config_sweep(&cfg.run.id, &cfg, &seeds, &out_dir, &[], None, common.allow_warn)?;
            report_manifest(&m, &out_dir)
        }
        Command::Preset {
            name,
            seeds,
            out_dir,
            overrides,
            allow_warn,
        } => {
            let mut p = preset_by_name(&name)?;
            p.config = p.config.with_overrides(&parse_overrides(&overrides)?)?;
            let seeds: Vec<u64> = (1..=seeds).collect();
            let m = run_config_sweep(
                p.name.as_str(),
                &p.config,
                &seeds,
                &out_dir,
                &p.defaults,
                p.bias_grid.as_ref(),
                allow_warn,
            )?;
            report_manifest(&m, &out_dir)
        }
        Command::ValidateParams { common } => {
            let cfg = load(&common)?;
            let built = cfg.build()?;
            print!("{}", built.validation);
            let h = &built.header;
            println!(
                "alpha={:.6e} kappa={:.6e} L={:.6e} gamma={:.6e} psi={:.6e} zeta1={:.6e} zeta2={:.6e} C={:.6e}",
                h.alpha, h.kappa, h.lipschitz, h.gamma, h.psi, h.zeta1, h.zeta2, h.consensus_constant
            );
            if built.validation.status() == Status::Fail && !common.allow_warn {
                return Err(Error::Infeasible("validator FAIL".into()));
            }
            Ok(())
        }
        Command::Certify {
            common,
            trials,
            points,
        } => {
            let cfg = load(&common)?;
            let built = cfg.build()?;
            let seed = cfg.run.seed;
            let b = built.run.global.box_bound();
            let mut all = Report::new("certify");
            all.extend(certify_compressor(
                &built.run.compressor,
                trials,
                VectorSampler::Gaussian { scale: b },
                points,
                seed,
            )?);
            for (i, op) in built.run.global.locals().iter().enumerate() {
                let mut r = certify_oracle(&built.run.oracle, op, trials, b, points, seed.wrapping_add(i as u64))?;
                r.subject = format!("oracle_{i}");
                all.extend(r);
            }
            print!("{all}");
            if all.status() == Status::Fail {
                return Err(Error::ContractViolation("certification failed".into()));
            }
            Ok(())
        }
        Command::Fixpoint { common, tol } => {
            let cfg = load(&common)?;
            let g = cfg.build_operator()?;
            let fp = find_fixed_point(&g, tol)?;
            let norm = fp.x.iter().map(|v| v * v).sum::<f64>().sqrt();
            println!(
                "kind={:?} iterations={} residual={:.6e} norm={:.6e}",
                fp.kind, fp.iterations, fp.residual, norm
            );
            let coords: Vec<String> = fp.x.iter().map(|v| format!("{v:.17e}")).collect();
            println!("x={}", coords.join(","));
            Ok(())
        }
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit status.
pub fn parse_and_dispatch<I: IntoIterator<Item = OsString>>(argv: I) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let first = e.to_string();
            let first = first.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error[usage]: {}", one_line(first));
            return 2;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error[{}]: {}", e.kind(), one_line(&e.to_string()));
            1
        }
    }
}
