//! Command-line driver for the extraction, purification, weighting and
//! steering pipeline.
//!
//! Output layout under `paths.out_dir`:
//!
//! ```text
//! manifest.json            digests of config, corpus, bundles and every file below
//! corpus/                  pairs-<factor>.jsonl, vignettes.jsonl
//! acf/                     <factor>.acf, vignettes.acf
//! vectors/                 raw.cvb, purified.cvb
//! reports/                 CSV tables, SVG figures, per-phase JSON, summary
//! ```

pub mod commands;
pub mod config;
pub mod exit;
pub mod manifest;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::commands::Ctx;
use crate::config::{BackendKind, Overrides, RunConfig};
use crate::exit::{classify, ExitClass, Failure};

#[derive(Debug, Parser)]
#[command(name = "repe", version, about = "Factor directions, purification, weighting and steering")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML run config.
    #[arg(long, short, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (paths.out_dir).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Base seed (seeds.base).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    pub backend: Option<BackendKind>,
    /// Steering strength, overriding the family table.
    #[arg(long, global = true)]
    pub alpha: Option<f64>,
    /// Set any config field, e.g. `--set toy.noise_sigma=0.2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub sets: Vec<String>,
    /// No progress lines on stderr.
    #[arg(long, short, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Build contrastive pairs and vignettes; starts a new run.
    Gen,
    /// Record hidden states for the corpus.
    Capture,
    /// Layer-wise cross-validated scan and per-layer directions.
    Scan,
    /// Remove confounder components from each predictor direction.
    Purify,
    /// Regress the jealousy score on the purified factor scores.
    Regress,
    /// Stimulate, suppress and knock out factor directions.
    Steer,
    /// Aggregate the phase outputs into a summary.
    Report,
    /// Run every phase in order; starts a new run.
    All,
    /// Print the resolved config as TOML.
    Config,
    /// Check the output directory against its manifest.
    Verify,
}

impl Cli {
    pub fn resolve_config(&self, env: Vec<(String, String)>) -> Result<RunConfig, Failure> {
        let mut cfg = RunConfig::resolve(&Overrides {
            file: self.config.clone(),
            env,
            sets: self.sets.clone(),
        })?;
        if let Some(out) = &self.out {
            cfg.paths.out_dir = out.clone();
        }
        if let Some(seed) = self.seed {
            cfg.seeds.base = seed;
        }
        if let Some(b) = self.backend {
            cfg.backend = b;
        }
        if let Some(a) = self.alpha {
            cfg.alpha = Some(a);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn execute(cli: &Cli, cfg: RunConfig) -> anyhow::Result<()> {
    let fresh = matches!(cli.command, Command::Gen | Command::All);
    match cli.command {
        Command::Config => {
            print!("{}", cfg.to_toml());
            return Ok(());
        }
        Command::Verify => {
            let problems = manifest::audit(&cfg.paths.out_dir)?;
            for p in &problems {
                println!("{p}");
            }
            if problems.is_empty() {
                println!("ok");
                return Ok(());
            }
            return Err(Failure::new(ExitClass::Phase, format!("{} problems", problems.len())).into());
        }
        _ => {}
    }
    let mut ctx = Ctx::new(cfg, fresh, cli.quiet)?;
    let (name, run): (&str, fn(&mut Ctx) -> anyhow::Result<()>) = match cli.command {
        Command::Gen => ("gen", commands::gen),
        Command::Capture => ("capture", commands::capture),
        Command::Scan => ("scan", commands::scan),
        Command::Purify => ("purify", commands::purify),
        Command::Regress => ("regress", commands::regress),
        Command::Steer => ("steer", commands::steer),
        Command::Report => ("report", commands::report),
        Command::All => return commands::all(&mut ctx),
        Command::Config | Command::Verify => unreachable!("handled above"),
    };
    anyhow::Context::with_context(run(&mut ctx), || format!("{name} failed"))
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I, env: Vec<(String, String)>) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitClass::Usage.code() } else { 0 };
        }
    };
    let result = cli
        .resolve_config(env)
        .map_err(anyhow::Error::from)
        .and_then(|cfg| execute(&cli, cfg));
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            classify(&e).code()
        }
    }
}
