//! `gflstab`: simulate fault scenarios, search clearing times, trace regions
//! of attraction, run sweeps and check the bandwidth-separation reductions.
//!
//! Exit status: 0 on a completed run (whatever the verdict), 1 on a model or
//! I/O error, 2 on a configuration error, 3 when a run ended in a solver
//! failure.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use gflstab::reduced::Ordering;

use gflstab_cli::commands;
use gflstab_cli::config::{Manifest, ModelChoice, RoaKind, RunConfig, ScenarioSource, ToolInfo};
use gflstab_cli::output::OutputDir;

#[derive(Parser, Debug)]
#[command(name = "gflstab", version, about = "Transient stability of grid-following inverters")]
struct Cli {
    /// Run configuration (TOML) or a manifest from an earlier run.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Builtin scenario name or scenario file.
    #[arg(long, global = true)]
    scenario: Option<String>,
    #[arg(long, global = true, value_enum)]
    model: Option<ModelChoice>,
    /// Reduced-model ordering (classified from the bandwidths by default).
    #[arg(long, global = true)]
    ordering: Option<Ordering>,
    /// Apply the boundary-layer correction to reduced runs.
    #[arg(long, global = true)]
    correction: bool,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Show angles in degrees (files stay in radians).
    #[arg(long, global = true)]
    degrees: bool,
    /// Worker threads for sweeps and searches.
    #[arg(long, global = true, env = "GFLSTAB_WORKERS")]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Integrate a scenario and classify the outcome.
    Simulate,
    /// Bisect the critical clearing time of the scenario's fault.
    Cct {
        #[arg(long)]
        t_lo: Option<f64>,
        #[arg(long)]
        t_hi: Option<f64>,
        #[arg(long)]
        resolution: Option<f64>,
    },
    /// Trace the region of attraction and check it on a grid.
    Roa {
        /// PLL alone with i_d frozen (at `--i-d`, default the SEP value).
        #[arg(long)]
        pll_alone: bool,
        #[arg(long)]
        i_d: Option<f64>,
        /// Oracle grid cells per side (0 skips the grid).
        #[arg(long)]
        grid: Option<usize>,
    },
    /// Run the scenario over the `[sweep]` axes of the config.
    Sweep,
    /// Compare full and reduced runs as the fast loop speeds up.
    ValidateReduction {
        /// Fast-loop bandwidths, Hz.
        #[arg(long, value_delimiter = ',')]
        fast_hz: Vec<f64>,
    },
    /// Equilibria of the full and reduced models with their linear type.
    Equilibria,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Cct { .. } => "cct",
            Command::Roa { .. } => "roa",
            Command::Sweep => "sweep",
            Command::ValidateReduction { .. } => "validate-reduction",
            Command::Equilibria => "equilibria",
        }
    }
}

/// Config file merged with the command-line flags.
fn build_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = &cli.scenario {
        cfg.scenario = Some(ScenarioSource::Named(s.clone()));
    }
    if let Some(m) = cli.model {
        cfg.model = m;
    }
    if cli.ordering.is_some() {
        cfg.ordering = cli.ordering;
    }
    cfg.correction |= cli.correction;
    cfg.degrees |= cli.degrees;
    if cli.out.is_some() {
        cfg.out = cli.out.clone();
    }
    match &cli.command {
        Command::Cct { t_lo, t_hi, resolution } => {
            cfg.cct.t_lo = t_lo.unwrap_or(cfg.cct.t_lo);
            cfg.cct.t_hi = t_hi.unwrap_or(cfg.cct.t_hi);
            cfg.cct.resolution = resolution.unwrap_or(cfg.cct.resolution);
            anyhow::ensure!(
                cfg.cct.t_lo >= 0.0 && cfg.cct.t_hi > cfg.cct.t_lo && cfg.cct.resolution > 0.0,
                "need 0 <= t_lo < t_hi and resolution > 0"
            );
        }
        Command::Roa { pll_alone, i_d, grid } => {
            if *pll_alone {
                cfg.roa.kind = RoaKind::PllAlone;
            }
            if i_d.is_some() {
                cfg.roa.i_d = *i_d;
            }
            cfg.roa.grid = grid.unwrap_or(cfg.roa.grid);
        }
        Command::Sweep => {
            cfg.sweep
                .as_ref()
                .context("sweep needs a [sweep] table in the config")?
                .validate()?;
        }
        Command::ValidateReduction { fast_hz } => {
            if !fast_hz.is_empty() {
                cfg.validate.fast_hz = fast_hz.clone();
            }
        }
        Command::Simulate | Command::Equilibria => {}
    }
    Ok(cfg)
}

fn run(cli: &Cli, cfg: &RunConfig, sc: &gflstab::scenarios::Scenario) -> Result<commands::Status> {
    let start = Instant::now();
    let dir = cfg.out.clone().unwrap_or_else(|| PathBuf::from("gflstab-out"));
    let mut out = OutputDir::create(&dir)?;
    let workers = cli
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .max(1);
    let status = match &cli.command {
        Command::Simulate => commands::simulate(cfg, sc, &mut out)?,
        Command::Cct { .. } => commands::cct(cfg, sc, &mut out)?,
        Command::Roa { .. } => commands::roa(cfg, sc, &mut out)?,
        Command::Sweep => commands::sweep(cfg, sc, &mut out, workers)?,
        Command::ValidateReduction { .. } => commands::validate_reduction(cfg, sc, &mut out)?,
        Command::Equilibria => commands::equilibria(cfg, sc, &mut out)?,
    };
    out.finish()?;
    let manifest = Manifest {
        command: cli.command.name().into(),
        wall_time_s: start.elapsed().as_secs_f64(),
        outputs: out.file_names(),
        tool: ToolInfo::default(),
        config: cfg.resolved(sc),
    };
    out.text("manifest.toml", &toml::to_string(&manifest)?)?;
    println!("wrote {} ({:.2} s)", dir.display(), manifest.wall_time_s);
    Ok(status)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let prepared = build_config(&cli).and_then(|cfg| {
        let sc = cfg.resolve_scenario()?;
        Ok((cfg, sc))
    });
    let (cfg, sc) = match prepared {
        Ok(v) => v,
        Err(e) => {
            eprintln!("configuration error: {e:#}");
            return ExitCode::from(2);
        }
    };
    match run(&cli, &cfg, &sc) {
        Ok(s) if s.solver_failure => {
            eprintln!("a run ended in a solver failure");
            ExitCode::from(3)
        }
        Ok(_) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
