//! Command-line front end: argument parsing, config merging and exit codes.

mod commands;
mod config;

pub use commands::{available_variants, evaluate, gen_data, infer, report, train, Layout, COPY_T1W};
pub use config::RunConfig;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

use crate::data::{Split, Stage, Variant};
use crate::error::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "tavit",
    version,
    about = "Tumor-aware contrast synthesis on synthetic brain phantoms"
)]
pub struct Cli {
    /// Config file of `key = value` lines; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub data_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub image_size: Option<usize>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    #[arg(long, global = true)]
    pub batch_size: Option<usize>,
    #[arg(long, global = true)]
    pub patients: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    Seg,
    Latent,
    Tavit,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the phantom dataset and print its hash.
    GenData,
    /// Train one stage.
    Train {
        stage: StageArg,
        /// Synthesis variant, for `train tavit`.
        #[arg(long, default_value = "tavit-t1w-flair")]
        variant: String,
    },
    /// Predict T1C volumes for one split.
    Infer {
        /// A synthesis variant or `copy-t1w`.
        #[arg(long, default_value = "tavit-t1w-flair")]
        variant: String,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Checkpoint to use instead of the variant's trained one.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score test predictions; every available variant by default.
    Evaluate {
        #[arg(long = "variant")]
        variants: Vec<String>,
        /// Reference of the paired t-tests.
        #[arg(long)]
        baseline: Option<String>,
    },
    /// Evaluate, score the segmenter and write a summary.
    Report {
        #[arg(long = "variant")]
        variants: Vec<String>,
        #[arg(long)]
        baseline: Option<String>,
    },
}

impl Cli {
    /// Defaults, then the config file, then explicit flags.
    pub fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($f:ident),*) => {$(
                if let Some(v) = &self.$f {
                    cfg.$f = v.clone();
                }
            )*};
        }
        set!(seed, data_dir, out_dir, image_size, epochs, batch_size, patients);
        Ok(cfg)
    }
}

fn resolve_variants(cfg: &RunConfig, given: &[String]) -> Result<Vec<String>> {
    let vs = if given.is_empty() {
        available_variants(cfg)
    } else {
        given.to_vec()
    };
    for v in &vs {
        if v != COPY_T1W {
            v.parse::<Variant>()?;
        }
    }
    Ok(vs)
}

fn resolve_baseline(variants: &[String], given: Option<&str>) -> Option<String> {
    match given {
        Some(b) => Some(b.to_string()),
        None => {
            let b = Variant::BASELINE.name();
            variants.iter().any(|v| v == b).then(|| b.to_string())
        }
    }
}

fn nan_check(report: &crate::metrics::MetricReport) -> Result<()> {
    if report.has_nan() {
        return Err(Error::InvalidArgument(
            "report contains NaN metrics (constant input over a region)".into(),
        ));
    }
    Ok(())
}

pub fn execute(cli: &Cli) -> Result<()> {
    let cfg = cli.run_config()?;
    match &cli.command {
        Command::GenData => {
            let hash = gen_data(&cfg)?;
            println!("{hash:016x}");
        }
        Command::Train { stage, variant } => {
            let stage = match stage {
                StageArg::Seg => Stage::Segmentation,
                StageArg::Latent => Stage::Latent,
                StageArg::Tavit => Stage::Synthesis(variant.parse()?),
            };
            train(&cfg, stage)?;
        }
        Command::Infer {
            variant,
            split,
            checkpoint,
        } => {
            let n = infer(&cfg, variant, (*split).into(), checkpoint.as_deref())?;
            println!("wrote {n} predictions for {variant}");
        }
        Command::Evaluate { variants, baseline } => {
            let vs = resolve_variants(&cfg, variants)?;
            let b = resolve_baseline(&vs, baseline.as_deref());
            let r = evaluate(&cfg, &vs, b.as_deref())?;
            nan_check(&r)?;
        }
        Command::Report { variants, baseline } => {
            let vs = resolve_variants(&cfg, variants)?;
            let b = resolve_baseline(&vs, baseline.as_deref());
            let r = evaluate(&cfg, &vs, b.as_deref())?;
            print!("{}", report(&cfg, &r)?);
            nan_check(&r)?;
        }
    }
    Ok(())
}

/// Exit code of a failed command.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_)
        | Error::InvalidArgument(_)
        | Error::MissingPrerequisite(_)
        | Error::CheckpointMismatch(_)
        | Error::ZeroExtent(_)
        | Error::ShapeMismatch { .. }
        | Error::InvalidShape { .. }
        | Error::UndefinedCorrelation(_) => EXIT_VALIDATION,
        _ => EXIT_RUNTIME,
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run_cli<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
