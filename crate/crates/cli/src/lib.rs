//! Command-line driver for the tandem distillation engine: configuration,
//! experiment orchestration, checkpointing and report emission.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataio;
pub mod error;
pub mod runner;

use config::RunConfig;
use error::{CliError, Result};
use std::path::PathBuf;

const USAGE: &str = "usage: tandem <train|eval|sweep-beta|ablate|gradcheck|bench> \
[--config PATH] [--out DIR] [--seed INT] [--checkpoint PATH] [--betas LIST]

exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric failure";

struct Cli {
    command: String,
    config: Option<PathBuf>,
    out: Option<PathBuf>,
    seed: Option<u64>,
    checkpoint: Option<PathBuf>,
    betas: Option<Vec<f64>>,
}

fn parse_args(args: &[String]) -> Result<Cli> {
    let mut it = args.iter();
    let command = it
        .next()
        .ok_or_else(|| CliError::Usage(USAGE.into()))?
        .clone();
    let mut cli = Cli {
        command,
        config: None,
        out: None,
        seed: None,
        checkpoint: None,
        betas: None,
    };
    while let Some(flag) = it.next() {
        let mut value = || {
            it.next()
                .cloned()
                .ok_or_else(|| CliError::Usage(format!("{flag} needs a value")))
        };
        match flag.as_str() {
            "--config" => cli.config = Some(PathBuf::from(value()?)),
            "--out" => cli.out = Some(PathBuf::from(value()?)),
            "--seed" => {
                cli.seed = Some(
                    value()?
                        .parse()
                        .map_err(|_| CliError::Usage("--seed needs an integer".into()))?,
                )
            }
            "--checkpoint" => cli.checkpoint = Some(PathBuf::from(value()?)),
            "--betas" => {
                cli.betas = Some(
                    value()?
                        .split(',')
                        .map(|s| {
                            s.trim()
                                .parse()
                                .map_err(|_| CliError::Usage(format!("bad beta `{s}`")))
                        })
                        .collect::<Result<Vec<f64>>>()?,
                )
            }
            _ => return Err(CliError::Usage(format!("unknown flag `{flag}`\n{USAGE}"))),
        }
    }
    Ok(cli)
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                CliError::Config(format!("cannot read config {}: {e}", path.display()))
            })?;
            RunConfig::from_text(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.to_string_lossy().into_owned();
    }
    cfg.validate()?;
    // referenced paths must exist up front
    for path in [
        &cfg.mind_news,
        &cfg.mind_behaviors,
        &cfg.retrieval_train,
        &cfg.retrieval_test,
        &cfg.init_from,
        &cfg.resume_from,
    ]
    .into_iter()
    .flatten()
    {
        if !std::path::Path::new(path).exists() {
            return Err(CliError::Data(format!("referenced path {path} does not exist")));
        }
    }
    Ok(cfg)
}

fn dispatch(cli: &Cli) -> Result<()> {
    match cli.command.as_str() {
        "train" => {
            let cfg = load_config(cli)?;
            commands::cmd_train(&cfg)?;
            Ok(())
        }
        "eval" => {
            let checkpoint = cli
                .checkpoint
                .as_ref()
                .ok_or_else(|| CliError::Usage("eval needs --checkpoint PATH".into()))?;
            let override_cfg = match &cli.config {
                Some(_) => Some(load_config(cli)?),
                None => None,
            };
            let out = cli
                .out
                .clone()
                .or_else(|| {
                    override_cfg
                        .as_ref()
                        .map(|c| PathBuf::from(&c.out_dir))
                })
                .unwrap_or_else(|| PathBuf::from("out"));
            commands::cmd_eval(checkpoint, override_cfg.as_ref(), &out)
        }
        "sweep-beta" => {
            let cfg = load_config(cli)?;
            let betas = cli.betas.clone().unwrap_or_else(|| cfg.beta_sweep.clone());
            commands::cmd_sweep_beta(&cfg, &betas)?;
            Ok(())
        }
        "ablate" => {
            let cfg = load_config(cli)?;
            commands::cmd_ablate(&cfg)?;
            Ok(())
        }
        "gradcheck" => {
            let cfg = load_config(cli)?;
            commands::cmd_gradcheck(&cfg)
        }
        "bench" => {
            let cfg = load_config(cli)?;
            commands::cmd_bench(&cfg)
        }
        other => Err(CliError::Usage(format!(
            "unknown subcommand `{other}`\n{USAGE}"
        ))),
    }
}

/// Run the CLI on `args` (without the binary name); returns the exit code.
pub fn run_cli(args: &[String]) -> i32 {
    match parse_args(args).and_then(|cli| dispatch(&cli)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}
