// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::info;

use xmrc::runner::config::KEYS;
use xmrc::runner::{self, render_report, RunConfig, StageStatus};

/// Cross-lingual reading comprehension evaluation and analysis.
#[derive(Parser)]
#[command(name = "xmrc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured stages, then render the report.
    ///
    /// Any config key can be overridden as `--key value` after the named flags.
    Run {
        /// Flat `key = value` config file. Named flags go before overrides.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Skip report rendering.
        #[arg(long)]
        no_report: bool,
        #[arg(
            trailing_var_arg = true,
            allow_hyphen_values = true,
            value_name = "--KEY VALUE"
        )]
        overrides: Vec<String>,
    },
    /// Render tables and figures from an existing run directory.
    Report {
        #[arg(long)]
        run_dir: PathBuf,
    },
    /// Check that a corpus loads and is id-aligned across languages.
    ValidateCorpus {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(
            trailing_var_arg = true,
            allow_hyphen_values = true,
            value_name = "--KEY VALUE"
        )]
        overrides: Vec<String>,
    },
    /// List every config key with its default.
    Keys,
}

/// Parse `--key value` and `--key=value` tokens.
fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let Some(flag) = arg.strip_prefix("--") else {
            bail!("expected `--key value`, found `{arg}`");
        };
        let (key, value) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it
                    .next()
                    .with_context(|| format!("`--{flag}` needs a value"))?;
                (flag.to_string(), v.clone())
            }
        };
        if !KEYS.iter().any(|(k, _)| *k == key) {
            bail!("unknown config key `{key}` (see `xmrc keys`)");
        }
        out.push((key, value));
    }
    Ok(out)
}

fn load_config(config: Option<&PathBuf>, overrides: &[String]) -> Result<RunConfig> {
    let overrides = parse_overrides(overrides)?;
    Ok(match config {
        Some(path) => RunConfig::load(path, &overrides)
            .with_context(|| format!("loading {}", path.display()))?,
        None => RunConfig::from_pairs(&overrides)?,
    })
}

fn run(config: Option<PathBuf>, no_report: bool, overrides: Vec<String>) -> Result<bool> {
    let config = load_config(config.as_ref(), &overrides)?;
    let manifest = runner::run(&config)?;
    let mut ok = true;
    for (stage, record) in &manifest.stages {
        let status = match &record.status {
            StageStatus::Completed if record.reused => "completed (reused)".to_string(),
            StageStatus::Completed => "completed".to_string(),
            StageStatus::Failed { error } => {
                ok = false;
                format!("failed: {error}")
            }
            StageStatus::Skipped { reason } => {
                ok = false;
                format!("skipped: {reason}")
            }
        };
        println!("{:<11} {status}", stage.name());
        for note in &record.notes {
            println!("{:<11} note: {note}", "");
        }
    }
    if !no_report {
        let report = render_report(&config.run_dir)?;
        info!("report: {} files", report.files.len());
        println!(
            "report written to {}",
            config.run_dir.join("report").display()
        );
    }
    Ok(ok)
}

fn validate(config: Option<PathBuf>, overrides: Vec<String>) -> Result<()> {
    let config = load_config(config.as_ref(), &overrides)?;
    let langs = config.languages.as_deref();
    println!(
        "{}",
        runner::validate_corpus(&config.corpus_path, &config.corpus_name, langs)?
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            no_report,
            overrides,
        } => run(config, no_report, overrides),
        Command::Report { run_dir } => render_report(&run_dir).map_err(Into::into).map(|r| {
            for note in &r.notes {
                println!("note: {note}");
            }
            println!(
                "{} files written to {}",
                r.files.len(),
                run_dir.join("report").display()
            );
            true
        }),
        Command::ValidateCorpus { config, overrides } => validate(config, overrides).map(|()| true),
        Command::Keys => {
            for (k, d) in KEYS {
                match d {
                    Some(d) => println!("{k} = {d}"),
                    None => println!("{k} (required)"),
                }
            }
            Ok(true)
        }
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
