//! Command-line interface.

use std::path::PathBuf;

use clap::{value_parser, Arg, ArgMatches, Command};
use kalnat::Backend;

use crate::bench::{bench_point, loglog_slope};
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{ExperimentConfig, KEYS};
use crate::error::{HarnessError, Result};
use crate::experiment::{advance, write_outputs, Run, Trainer};
use crate::oracle::{empirical_fisher_gap, verify_suite};
use crate::sweep::{cells_csv, render_grid, run_sweep, SweepSpec};

/// Exit status of a run that diverged.
pub const EXIT_DIVERGED: i32 = 2;

fn config_args(cmd: Command) -> Command {
    let cmd = cmd.arg(
        Arg::new("config")
            .long("config")
            .value_name("FILE")
            .value_parser(value_parser!(PathBuf))
            .help("key = value config file; flags below override it"),
    );
    KEYS.iter().fold(cmd, |cmd, key| {
        cmd.arg(
            Arg::new(*key)
                .long(*key)
                .value_name("VALUE")
                .allow_negative_numbers(true)
                .help_heading("Config overrides"),
        )
    })
}

fn list_arg(name: &'static str, help: &'static str) -> Arg {
    Arg::new(name).long(name).value_name("LIST").help(help)
}

pub fn command() -> Command {
    Command::new("kalnat")
        .about("Kalman-filter natural-gradient fine-tuning on synthetic two-tower tasks")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(
            config_args(Command::new("run").about("Train one configuration and write metrics"))
                .arg(
                    Arg::new("out")
                        .long("out")
                        .value_name("DIR")
                        .default_value("out")
                        .value_parser(value_parser!(PathBuf)),
                )
                .arg(
                    Arg::new("resume")
                        .long("resume")
                        .value_name("CKPT")
                        .value_parser(value_parser!(PathBuf))
                        .help("continue from a checkpoint"),
                )
                .arg(
                    Arg::new("save")
                        .long("save-checkpoint")
                        .value_name("CKPT")
                        .value_parser(value_parser!(PathBuf))
                        .help("write the final optimizer state"),
                )
                .arg(
                    Arg::new("stop_after")
                        .long("stop-after")
                        .value_name("STEPS")
                        .value_parser(value_parser!(usize))
                        .help("stop once this many steps are done"),
                ),
        )
        .subcommand(
            config_args(Command::new("sweep").about("Grid over alpha, beta, OOD fraction and shots"))
                .arg(list_arg("alphas", "comma-separated alpha values"))
                .arg(list_arg("betas", "comma-separated beta values"))
                .arg(list_arg("ood_fractions", "comma-separated OOD fractions").long("ood-fractions"))
                .arg(list_arg("shots_grid", "comma-separated shot counts").long("shots-grid"))
                .arg(list_arg("seeds", "comma-separated seeds (default 0,1,2,3,4)"))
                .arg(
                    Arg::new("csv")
                        .long("csv")
                        .value_name("FILE")
                        .value_parser(value_parser!(PathBuf))
                        .help("also write per-cell results as CSV"),
                ),
        )
        .subcommand(
            Command::new("verify")
                .about("Check the filter update against its natural-gradient form")
                .arg(
                    Arg::new("instances")
                        .long("instances")
                        .default_value("200")
                        .value_parser(value_parser!(usize)),
                )
                .arg(
                    Arg::new("seed")
                        .long("seed")
                        .default_value("0")
                        .value_parser(value_parser!(u64)),
                )
                .arg(
                    Arg::new("fisher_samples")
                        .long("fisher-samples")
                        .default_value("100000")
                        .value_parser(value_parser!(usize)),
                ),
        )
        .subcommand(
            Command::new("bench")
                .about("Per-step time of the Full and Diagonal backends")
                .arg(list_arg("sizes", "parameter counts").default_value("100,1000,10000"))
                .arg(
                    Arg::new("full_max")
                        .long("full-max")
                        .value_name("N")
                        .default_value("10000")
                        .value_parser(value_parser!(usize))
                        .help("skip Full above this size"),
                )
                .arg(
                    Arg::new("steps")
                        .long("steps")
                        .default_value("5")
                        .value_parser(value_parser!(usize)),
                ),
        )
}

/// Config file (if any) with per-key flag overrides applied, then validated.
pub fn config_from_matches(m: &ArgMatches) -> Result<ExperimentConfig> {
    let mut cfg = match m.get_one::<PathBuf>("config") {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::default(),
    };
    for key in KEYS {
        if let Some(v) = m.get_one::<String>(key) {
            cfg.set(key, v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_list<T: std::str::FromStr>(m: &ArgMatches, name: &str) -> Result<Option<Vec<T>>> {
    let Some(raw) = m.get_one::<String>(name) else {
        return Ok(None);
    };
    raw.split(',')
        .map(|t| {
            t.trim()
                .parse::<T>()
                .map_err(|_| HarnessError::InvalidArgument(format!("--{name}: cannot parse `{t}`")))
        })
        .collect::<Result<Vec<T>>>()
        .map(Some)
}

fn cmd_run(m: &ArgMatches) -> Result<i32> {
    let cfg = config_from_matches(m)?;
    let out = m.get_one::<PathBuf>("out").expect("has default");
    let mut run = match m.get_one::<PathBuf>("resume") {
        Some(path) => Run::resume(&cfg, load_checkpoint(path, &cfg)?)?,
        None => Run::new(&cfg)?,
    };
    let stop_at = m.get_one::<usize>("stop_after").copied().unwrap_or(usize::MAX);
    let outcome = advance(&mut run, stop_at, None)?;
    write_outputs(&cfg, &outcome, out)?;
    if let Some(path) = m.get_one::<PathBuf>("save") {
        match &run.trainer {
            Trainer::Kalman(opt) => save_checkpoint(opt, path)?,
            Trainer::Sgd { .. } => {
                return Err(HarnessError::InvalidArgument(
                    "checkpoints are only written for Kalman runs".into(),
                ))
            }
        }
    }
    println!(
        "steps={} final_accuracy={:.4} diverged={} -> {}",
        outcome.steps,
        outcome.final_accuracy,
        outcome.diverged,
        out.display()
    );
    Ok(if outcome.diverged { EXIT_DIVERGED } else { 0 })
}

fn cmd_sweep(m: &ArgMatches) -> Result<i32> {
    let base = config_from_matches(m)?;
    let mut spec = SweepSpec::at(&base);
    if let Some(v) = parse_list(m, "alphas")? {
        spec.alphas = v;
    }
    if let Some(v) = parse_list(m, "betas")? {
        spec.betas = v;
    }
    if let Some(v) = parse_list(m, "ood_fractions")? {
        spec.ood_fractions = v;
    }
    if let Some(v) = parse_list(m, "shots_grid")? {
        spec.shots = v;
    }
    if let Some(v) = parse_list(m, "seeds")? {
        spec.seeds = v;
    }
    let cells = run_sweep(&base, &spec)?;
    print!("{}", render_grid(&cells));
    if let Some(path) = m.get_one::<PathBuf>("csv") {
        std::fs::write(path, cells_csv(&cells)).map_err(crate::error::io_err(path))?;
    }
    Ok(0)
}

fn cmd_verify(m: &ArgMatches) -> Result<i32> {
    let instances = *m.get_one::<usize>("instances").expect("has default");
    let seed = *m.get_one::<u64>("seed").expect("has default");
    let samples = *m.get_one::<usize>("fisher_samples").expect("has default");
    let rep = verify_suite(instances, seed)?;
    let fisher = empirical_fisher_gap(samples, seed)?;
    println!("instances              {}", rep.instances);
    println!("max mean deviation     {:.3e}", rep.max_mean_deviation);
    println!("max cov deviation      {:.3e}", rep.max_cov_deviation);
    println!("max Fisher deviation   {:.3e}", rep.max_fisher_deviation);
    println!("empirical Fisher gap   {fisher:.3e} ({samples} samples)");
    let ok = rep.max_mean_deviation <= 1e-8 && rep.max_cov_deviation <= 1e-8 && rep.max_fisher_deviation <= 1e-7;
    Ok(if ok { 0 } else { 1 })
}

fn cmd_bench(m: &ArgMatches) -> Result<i32> {
    let sizes: Vec<usize> = parse_list(m, "sizes")?.unwrap_or_default();
    let full_max = *m.get_one::<usize>("full_max").expect("has default");
    let steps = *m.get_one::<usize>("steps").expect("has default");
    println!("{:>9} {:>7} {:>12} {:>12}", "backend", "n", "ms/step", "cov scalars");
    for backend in [Backend::Diagonal, Backend::Full] {
        let mut points = Vec::new();
        for &n in &sizes {
            if backend == Backend::Full && n > full_max {
                continue;
            }
            let p = bench_point(backend, n, steps, 0)?;
            println!(
                "{:>9} {:>7} {:>12.4} {:>12}",
                backend.to_string(),
                n,
                1e3 * p.secs_per_step,
                p.cov_storage
            );
            points.push(p);
        }
        if points.len() >= 2 {
            println!("{backend} log-log slope {:.3}", loglog_slope(&points));
        }
    }
    Ok(0)
}

/// Dispatches parsed arguments; returns the process exit status.
pub fn dispatch(m: &ArgMatches) -> Result<i32> {
    match m.subcommand() {
        Some(("run", sub)) => cmd_run(sub),
        Some(("sweep", sub)) => cmd_sweep(sub),
        Some(("verify", sub)) => cmd_verify(sub),
        Some(("bench", sub)) => cmd_bench(sub),
        _ => unreachable!("subcommand_required"),
    }
}
