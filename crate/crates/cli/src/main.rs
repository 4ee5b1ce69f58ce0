use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Arg, ArgMatches, Command};
use hmlab::config::KEYS;
use hmlab::expcli::{self, preset, PRESETS};
use hmlab::{ExperimentConfig, HmlError, SweepKind};

const USAGE: u8 = 1;
const NUMERICAL: u8 = 2;

fn flag(key: &str) -> String {
    key.replace('_', "-")
}

fn config_args(cmd: Command) -> Command {
    let cmd = cmd
        .arg(Arg::new("config").long("config").value_name("FILE").help("key = value config file"))
        .arg(Arg::new("preset").long("preset").value_name("NAME").help(format!("named configuration: {}", PRESETS.join(", "))));
    KEYS.iter().fold(cmd, |cmd, key| {
        let arg = Arg::new(*key).long(flag(key)).value_name("VALUE").help_heading("Config overrides");
        let arg = if key.contains('_') { arg.alias(*key) } else { arg };
        cmd.arg(arg)
    })
}

fn cli() -> Command {
    let verbs = [
        Command::new("gen").about("Write latents, folded inputs and teacher labels"),
        Command::new("train").about("Online SGD with snapshots of the order parameters"),
        Command::new("ode").about("Integrate the order-parameter equations"),
        Command::new("compare").about("Simulation next to the ODE from the same initial weights"),
        Command::new("fp").about("Fixed points of the reduced flow"),
        Command::new("gep")
            .about("Gaussian-equivalence check of the local fields")
            .arg(Arg::new("samples").long("samples").default_value("100000").value_parser(clap::value_parser!(usize))),
        Command::new("sweep")
            .about("Asymptotic error over a parameter grid, simulation and theory")
            .arg(Arg::new("kind").long("kind").required(true).value_parser(["delta", "eta", "width"]))
            .arg(
                Arg::new("values")
                    .long("values")
                    .required(true)
                    .value_delimiter(',')
                    .value_parser(clap::value_parser!(f64))
                    .help("comma-separated grid"),
            ),
        Command::new("memorise").about("Per-sample memorability after one epoch"),
        Command::new("complexity").about("Students of increasing width on one data stream"),
        Command::new("audit").about("Step-size, grid and gradient checks of the numerics"),
    ];
    Command::new("hmlab")
        .about("Hidden manifold model experiments")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommands(verbs.map(config_args))
}

/// Preset or file, then flag overrides.
fn build_config(m: &ArgMatches) -> Result<ExperimentConfig> {
    let mut cfg = match (m.get_one::<String>("preset"), m.get_one::<String>("config")) {
        (Some(_), Some(_)) => bail!("--preset and --config are mutually exclusive"),
        (Some(name), None) => preset(name)?,
        (None, Some(path)) => {
            ExperimentConfig::from_file(Path::new(path)).with_context(|| format!("reading config {path}"))?
        }
        (None, None) => ExperimentConfig::default(),
    };
    for key in KEYS {
        if let Some(v) = m.get_one::<String>(key) {
            cfg.set(key, v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(verb: &str, m: &ArgMatches) -> Result<()> {
    let cfg = build_config(m)?;
    let dir = PathBuf::from(&cfg.out_dir).join(verb);
    match verb {
        "gen" => expcli::run_gen(&cfg, &dir)?,
        "train" => {
            let tr = expcli::run_train(&cfg, &dir)?;
            println!("final eps_g = {:?}", tr.final_eps());
        }
        "ode" => {
            let tr = expcli::run_ode(&cfg, &dir)?;
            println!("final eps_g = {:?}", tr.final_eps());
        }
        "compare" => print_json(&expcli::run_sim_vs_ode(&cfg, &dir)?.report)?,
        "fp" => {
            let search = expcli::run_fixed_points(&cfg, &dir)?;
            for p in &search.points {
                println!("{:?} eps = {:.6e} residual = {:.1e}", p.class, p.eps, p.residual);
            }
        }
        "gep" => {
            let samples = *m.get_one::<usize>("samples").expect("default");
            let rep = expcli::run_gep(&cfg, samples, &dir)?;
            println!(
                "passed = {} max |z| covariance = {:.2} wick = {:.2}",
                rep.passed, rep.max_abs_z_covariance, rep.max_abs_z_wick
            );
        }
        "sweep" => {
            let kind = SweepKind::from_name(m.get_one::<String>("kind").expect("required"))?;
            let values: Vec<f64> = m.get_many::<f64>("values").expect("required").copied().collect();
            for row in expcli::run_sweep(kind, &values, &cfg, &dir)? {
                println!(
                    "{} = {}: sim {:.4e} ± {:.1e}, theory {:?}{}",
                    kind.name(),
                    row.value,
                    row.sim_mean,
                    row.sim_std,
                    row.theory_eps,
                    if row.flagged { " (flagged)" } else { "" }
                );
            }
        }
        "memorise" => {
            for c in expcli::run_memorisation(&cfg, &dir)? {
                print_json(&expcli::MemorabilityRow::from(&c))?;
            }
        }
        "complexity" => {
            let run = expcli::run_complexity(&cfg, &dir)?;
            for (k, tr) in run.k_values.iter().zip(&run.trajectories) {
                println!("K = {k}: final eps_g = {:?}", tr.final_eps());
            }
        }
        "audit" => print_json(&expcli::run_audit(&cfg, &dir)?)?,
        other => return Err(anyhow!("unknown verb {other}")),
    }
    eprintln!("wrote {}", dir.display());
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<HmlError>() {
        Some(e) if e.is_numerical() => NUMERICAL,
        _ => USAGE,
    }
}

fn main() -> ExitCode {
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let (verb, sub) = matches.subcommand().expect("subcommand required");
    match run(verb, sub) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
