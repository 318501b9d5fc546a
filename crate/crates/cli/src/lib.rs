//! Command-line pipeline around `untangle-core`: predict entangled
//! attributes, train and evaluate latent mappers, and tabulate the results.

pub mod config;
pub mod output;
pub mod pipeline;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};

use config::{ConfigError, PipelineConfig};
use output::OutputDir;
use pipeline::{Mode, Pipeline};

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_BACKEND: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "untangle", version, about = "Predict and suppress attribute entanglement in latent-space edits")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Config file (TOML, or JSON when the name ends in .json).
    #[arg(long, short, global = true, default_value = "untangle.toml")]
    pub config: PathBuf,
    /// Overrides `seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides `command` (the edit text, e.g. "grey hair").
    #[arg(long, global = true, value_name = "TEXT")]
    pub command: Option<String>,
    /// Overrides `backend`.
    #[arg(long, global = true)]
    pub backend: Option<String>,
    /// Overrides `paths.output_dir`.
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,
    /// Sets any config key, e.g. `--set predictor.n=5`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Ppe,
    Baseline,
    Both,
}

impl ModeArg {
    fn modes(self) -> Vec<Mode> {
        match self {
            ModeArg::Ppe => vec![Mode::Ppe],
            ModeArg::Baseline => vec![Mode::Baseline],
            ModeArg::Both => vec![Mode::Baseline, Mode::Ppe],
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Predict entangled attributes for each command.
    Predict,
    /// Train latent mappers (predicts first if needed).
    Train {
        #[arg(long, value_enum, default_value = "both")]
        mode: ModeArg,
    },
    /// Evaluate trained mappers and sweep manipulation strength.
    Evaluate {
        #[arg(long, value_enum, default_value = "both")]
        mode: ModeArg,
    },
    /// Render manipulated test images at several strengths.
    Manipulate {
        #[arg(long, value_enum, default_value = "ppe")]
        mode: ModeArg,
        #[arg(long, value_delimiter = ',', default_value = "0,0.5,1,1.5,2")]
        strengths: Vec<f64>,
    },
    /// Mine candidate attributes with the external masked language model.
    Mine,
    /// Find the category of each command.
    FindCategory,
    /// Compare baseline and ppe runs from persisted reports.
    Report,
    /// Write a toy world, latent corpus and config into a directory.
    InitToy {
        #[arg(long, default_value = ".")]
        dir: PathBuf,
    },
    /// Print a hierarchy as JSON.
    Hierarchy {
        #[arg(long, default_value = untangle_core::hierarchy::BUNDLED_CELEBA_FACE_V1)]
        source: String,
    },
}

impl GlobalArgs {
    fn overrides(&self) -> Result<Vec<(String, String)>, ConfigError> {
        let mut out = Vec::new();
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| ConfigError::new(kv.clone(), "overrides take the form KEY=VALUE"))?;
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
        let quote = |s: &str| toml::Value::String(s.to_string()).to_string();
        if let Some(s) = self.seed {
            out.push(("seed".into(), s.to_string()));
        }
        if let Some(c) = &self.command {
            out.push(("command".into(), quote(c)));
        }
        if let Some(b) = &self.backend {
            out.push(("backend".into(), quote(b)));
        }
        if let Some(d) = &self.output_dir {
            let d = std::env::current_dir().map(|cwd| cwd.join(d)).unwrap_or_else(|_| d.clone());
            out.push(("paths.output_dir".into(), quote(&d.to_string_lossy())));
        }
        Ok(out)
    }

    pub fn load_config(&self) -> Result<PipelineConfig, ConfigError> {
        PipelineConfig::load(&self.config, &self.overrides()?)
    }
}

/// Runs one subcommand, returning the paths it wrote.
pub fn run(cli: &Cli) -> Result<Vec<PathBuf>> {
    match &cli.cmd {
        Cmd::InitToy { dir } => return pipeline::init_toy(dir, cli.global.seed.unwrap_or(0)),
        Cmd::Hierarchy { source } => {
            let h = untangle_core::hierarchy::AttributeHierarchy::load(source)?;
            println!("{}", h.to_json());
            return Ok(Vec::new());
        }
        _ => {}
    }
    let pipeline = Pipeline::new(cli.global.load_config()?)?;
    let out = OutputDir::open(&pipeline.config.paths.output_dir)?;
    match &cli.cmd {
        Cmd::Predict => pipeline.predict(&out),
        Cmd::Train { mode } => pipeline.train(&out, &mode.modes()),
        Cmd::Evaluate { mode } => pipeline.evaluate(&out, &mode.modes()),
        Cmd::Manipulate { mode, strengths } => pipeline.manipulate(&out, &mode.modes(), strengths),
        Cmd::Mine => pipeline.mine(&out),
        Cmd::FindCategory => pipeline.find_category(&out),
        Cmd::Report => pipeline.report(&out),
        Cmd::InitToy { .. } | Cmd::Hierarchy { .. } => unreachable!("handled above"),
    }
}

/// Process exit code for a failed run.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.downcast_ref::<ConfigError>().is_some() {
            return EXIT_CONFIG;
        }
        if let Some(e) = cause.downcast_ref::<untangle_core::Error>() {
            if e.is_config() {
                return EXIT_CONFIG;
            }
            if e.is_backend() {
                return EXIT_BACKEND;
            }
        }
    }
    EXIT_FAILURE
}
