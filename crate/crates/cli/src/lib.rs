//! `yyf`: simulate paths, run the grid filter and its baselines, and sweep
//! the time step or domain radius from a TOML experiment file.
//!
//! All computation runs on a worker pool; files are written afterwards by
//! the calling thread, each starting with `# yyf <version> config=<hash>`.

pub mod config;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use rayon::prelude::*;
use yyf_core::baselines::{bootstrap_pf, kalman_filter, ks_monte_carlo, KalmanOutput, StdErr};
use yyf_core::diagnostics::{convergence_sweep, radius_sweep, Oracle, SweepOptions, SweepResult};
use yyf_core::sde::write_paths_csv;
use yyf_core::{build_grid, simulate, validate_assumptions, FilterOptions, TimeSchedule, YauYauFilter};

pub use config::{load_config, load_config_with, Experiment, ExperimentConfig, Registry};
use config::{Baseline, SweepAxis, SweepOracle, DEFAULT_VALIDATION_RADII, DEFAULT_VALIDATION_SAMPLES};

const DEFAULT_OUTPUT: &str = "yyf-out";

#[derive(Debug, Parser)]
#[command(name = "yyf", version, about = "Grid-based nonlinear filtering experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory; overrides `output` in the config.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, env = "YYF_WORKERS")]
    pub workers: Option<usize>,
    #[arg(long, global = true)]
    pub seed_base: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Simulate state and observation paths, one file per seed.
    Simulate,
    /// Run the grid filter on simulated paths.
    Filter,
    /// Run the configured reference estimators on simulated paths.
    Baseline,
    /// Convergence sweep over δ or R.
    Sweep,
    /// Statistical spot-check of the model's declared assumptions.
    Validate,
}

/// Runs one command. `Ok(false)` means it completed but a check failed.
pub fn run(cli: &Cli, registry: &Registry) -> Result<bool> {
    let path = cli.config.as_deref().context("--config is required")?;
    let exp = load_config_with(path, registry, cli.seed_base)?;
    let out_dir = cli
        .out
        .clone()
        .or_else(|| exp.raw.output.clone())
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT));
    std::fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.workers {
        anyhow::ensure!(n >= 1, "--workers must be ≥ 1");
        pool = pool.num_threads(n);
    }
    let pool = pool.build()?;
    log::info!("config {} ({} workers)", exp.hash(), pool.current_num_threads());

    let (files, pass) = pool.install(|| match cli.command {
        Command::Simulate => cmd_simulate(&exp),
        Command::Filter => cmd_filter(&exp),
        Command::Baseline => cmd_baseline(&exp),
        Command::Sweep => cmd_sweep(&exp),
        Command::Validate => cmd_validate(&exp),
    })?;
    for file in files {
        write_file(&out_dir.join(&file.name), &exp.header(), &file.body)?;
    }
    Ok(pass)
}

/// An output file, rendered in memory without its header line.
pub struct Artifact {
    pub name: String,
    pub body: Vec<u8>,
}

fn write_file(path: &Path, header: &str, body: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    writeln!(w, "# {header}")?;
    w.write_all(body)?;
    w.flush()?;
    Ok(())
}

fn schedule(exp: &Experiment) -> Result<TimeSchedule> {
    Ok(TimeSchedule::new(exp.raw.schedule.terminal, exp.raw.schedule.steps)?)
}

fn filter_options(exp: &Experiment) -> FilterOptions {
    FilterOptions {
        substeps: exp.substeps,
        ..FilterOptions::default()
    }
}

fn render(f: impl FnOnce(&mut Vec<u8>) -> yyf_core::Result<()>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

type Outcome = Result<(Vec<Artifact>, bool)>;

pub fn cmd_simulate(exp: &Experiment) -> Outcome {
    let s = schedule(exp)?;
    let files = exp
        .seeds
        .par_iter()
        .map(|&seed| {
            let (x, y) = simulate(&exp.model, &s, exp.sim_substeps, seed)?;
            Ok(Artifact {
                name: format!("paths/seed_{seed}.csv"),
                body: render(|b| write_paths_csv(b, &x, &y, None))?,
            })
        })
        .collect::<Result<_>>()?;
    Ok((files, true))
}

pub fn cmd_filter(exp: &Experiment) -> Outcome {
    let s = schedule(exp)?;
    let grid = build_grid(exp.model.dim(), exp.raw.grid.radius, exp.raw.grid.points)?;
    let filter = YauYauFilter::new(&exp.model, &grid, s.delta(), filter_options(exp))?;
    let files = exp
        .seeds
        .par_iter()
        .map(|&seed| {
            let (_, y) = simulate(&exp.model, &s, exp.sim_substeps, seed)?;
            let out = filter.run(&y, &exp.tests)?;
            Ok(Artifact {
                name: format!("filter/seed_{seed}.csv"),
                body: render(|b| out.write_csv(b, None))?,
            })
        })
        .collect::<Result<_>>()?;
    Ok((files, true))
}

fn kalman_csv(exp: &Experiment, out: &KalmanOutput) -> Vec<u8> {
    let columns: Vec<Vec<f64>> = exp.tests.iter().map(|t| out.expectations(t)).collect();
    let mut text = String::from("t");
    for t in &exp.tests {
        text.push(',');
        text.push_str(t.label());
    }
    text.push('\n');
    for (k, t) in out.schedule.knots().enumerate() {
        text.push_str(&t.to_string());
        for c in &columns {
            text.push(',');
            text.push_str(&c[k].to_string());
        }
        text.push('\n');
    }
    text.into_bytes()
}

pub fn cmd_baseline(exp: &Experiment) -> Outcome {
    let s = schedule(exp)?;
    let methods = exp
        .raw
        .baseline
        .as_ref()
        .map(|b| b.methods.clone())
        .context("`[baseline]` section is required for the baseline command")?;
    let n = exp.particles();
    let files: Vec<Vec<Artifact>> = exp
        .seeds
        .par_iter()
        .map(|&seed| {
            let (_, y) = simulate(&exp.model, &s, exp.sim_substeps, seed)?;
            methods
                .iter()
                .map(|m| {
                    let (name, body) = match m {
                        Baseline::Kalman => ("kalman", kalman_csv(exp, &kalman_filter(&exp.model, &s, &y)?)),
                        Baseline::MonteCarlo => {
                            let out = ks_monte_carlo(&exp.model, &s, &y, &exp.tests, n, exp.sim_substeps, seed, StdErr::Delta)?;
                            ("monte_carlo", render(|b| out.write_csv(b, None))?)
                        }
                        Baseline::ParticleFilter => {
                            let out = bootstrap_pf(&exp.model, &s, &y, &exp.tests, n, seed)?;
                            ("particle_filter", render(|b| out.write_csv(b, None))?)
                        }
                    };
                    Ok(Artifact {
                        name: format!("baseline/{name}_seed_{seed}.csv"),
                        body,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    Ok((files.into_iter().flatten().collect(), true))
}

fn sweep_files(r: &SweepResult) -> Result<Vec<Artifact>> {
    Ok(vec![
        Artifact {
            name: "sweep.csv".into(),
            body: render(|b| r.write_csv(b, None))?,
        },
        Artifact {
            name: "sweep_long.csv".into(),
            body: render(|b| r.write_long_csv(b, None))?,
        },
        Artifact {
            name: "sweep_summary.json".into(),
            body: format!("{}\n", r.summary_json()).into_bytes(),
        },
    ])
}

pub fn cmd_sweep(exp: &Experiment) -> Outcome {
    let cfg = exp
        .raw
        .sweep
        .as_ref()
        .context("`[sweep]` section is required for the sweep command")?;
    let phi = &exp.tests[0];
    let mut opts = SweepOptions {
        filter: filter_options(exp),
        sim_substeps: exp.sim_substeps,
        ..SweepOptions::default()
    };
    if let Some(r) = cfg.oracle_refine {
        opts.oracle_refine = r;
    }
    let result = match cfg.axis {
        SweepAxis::Delta => {
            let grid = build_grid(exp.model.dim(), exp.raw.grid.radius, exp.raw.grid.points)?;
            let oracle = match cfg.oracle {
                Some(SweepOracle::Kalman) => Oracle::Kalman,
                Some(SweepOracle::FineFilter) => Oracle::FineFilter {
                    space_factor: cfg.space_factor.unwrap_or(2),
                },
                Some(SweepOracle::ParticleFilter) => Oracle::ParticleFilter {
                    particles: cfg.particles.unwrap_or(config::DEFAULT_PARTICLES),
                },
                None if exp.model.linear().is_some() => Oracle::Kalman,
                None => Oracle::FineFilter { space_factor: 2 },
            };
            convergence_sweep(
                &exp.model,
                &grid,
                exp.raw.schedule.terminal,
                &cfg.values,
                &exp.seeds,
                oracle,
                phi,
                &opts,
            )?
        }
        SweepAxis::Radius => {
            let spacing = cfg
                .spacing
                .unwrap_or(2.0 * exp.raw.grid.radius / (exp.raw.grid.points - 1) as f64);
            radius_sweep(
                &exp.model,
                &schedule(exp)?,
                &cfg.values,
                spacing,
                &exp.seeds,
                phi,
                cfg.tail_order.unwrap_or(2),
                &opts,
            )?
            .error
        }
    };
    println!("{}", result.summary_json());
    Ok((sweep_files(&result)?, result.passed()))
}

pub fn cmd_validate(exp: &Experiment) -> Outcome {
    let v = exp.raw.validate.clone();
    let radii = v
        .as_ref()
        .and_then(|v| v.radii.clone())
        .unwrap_or(DEFAULT_VALIDATION_RADII.to_vec());
    let samples = v.and_then(|v| v.samples).unwrap_or(DEFAULT_VALIDATION_SAMPLES);
    let reports = radii
        .par_iter()
        .map(|&r| validate_assumptions(&exp.model, r, samples, exp.seeds[0]))
        .collect::<yyf_core::Result<Vec<_>>>()?;
    let pass = reports.iter().all(|r| r.passed());
    let mut body = String::new();
    for r in &reports {
        body.push_str(&serde_json::to_string(r)?);
        body.push('\n');
        println!("{} R={}: {}", r.model, r.radius, if r.passed() { "pass" } else { "fail" });
    }
    Ok((
        vec![Artifact {
            name: "validate.jsonl".into(),
            body: body.into_bytes(),
        }],
        pass,
    ))
}
