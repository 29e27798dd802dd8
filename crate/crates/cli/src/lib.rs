//! `dualsr` command line: one subcommand per pipeline stage, with explicit
//! checkpoint files handed from one stage to the next inside a run
//! directory.
//!
//! ```text
//! <run-dir>/
//!   config.resolved        resolved TOML config of the latest invocation
//!   data/toy/{train,val,test}/     labeled HQ textures
//!   data/pairs/{train,val,test}/   hq/, lq/, records.jsonl
//!   checkpoints/           codec, classifier, teacher, stage1, stage2
//!   logs/<command>.jsonl   per-step training records
//!   reports/               metrics, sweeps, loss checks
//! ```

pub mod config;
pub mod stages;
pub mod verify;

use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use dualsr_core::infer::GuidanceScales;

pub use config::CliConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_MISSING_PREREQUISITE: i32 = 3;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    /// A file produced by an earlier stage is absent.
    MissingPrerequisite {
        run_first: &'static str,
        path: PathBuf,
    },
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::MissingPrerequisite { .. } => EXIT_MISSING_PREREQUISITE,
            CliError::Failed(_) => EXIT_FAILURE,
        }
    }

    /// One line of JSON.
    pub fn to_line(&self) -> String {
        let v = match self {
            CliError::Usage(m) => json!({"error": "usage", "message": m}),
            CliError::MissingPrerequisite { run_first, path } => json!({
                "error": "missing_prerequisite",
                "run_first": run_first,
                "path": path.display().to_string(),
                "message": format!("{} not found; run `{run_first}` first", path.display()),
            }),
            CliError::Failed(m) => json!({"error": "failed", "message": m}),
        };
        v.to_string()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_line())
    }
}

impl std::error::Error for CliError {}

impl From<dualsr_core::Error> for CliError {
    fn from(e: dualsr_core::Error) -> Self {
        CliError::Failed(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Failed(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "dualsr", version, about = "Two-adapter one-step super-resolution on toy data")]
pub struct Cli {
    /// Directory holding data, checkpoints, logs and reports.
    #[arg(long, global = true, default_value = "runs/default")]
    pub run_dir: PathBuf,
    /// TOML config file; missing keys take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the top-level seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate labeled toy textures for train/val/test.
    GenData,
    /// Build degraded LQ/HQ pairs from the toy textures.
    Degrade,
    /// Train the latent codec.
    PretrainCodec,
    /// Train the texture classifier used for conditions and perceptual features.
    PretrainClassifier,
    /// Train the conditional teacher denoiser in codec latent space.
    PretrainTeacher,
    /// Stage 1: pixel-level adapter.
    TrainPix,
    /// Stage 2: semantic-level adapter on top of the frozen pixel adapter.
    TrainSem,
    /// Metrics over the test pairs at every configured scale setting.
    Eval(CheckpointArg),
    /// Grid of restorations over scale lists, with a metrics table.
    Sweep(SweepArgs),
    /// Restore one image.
    Restore(RestoreArgs),
    /// Check the guidance and distillation identities on fresh random models.
    LossVerify,
    /// Serve the HTTP API.
    Serve(ServeArgs),
}

#[derive(Args, Debug)]
pub struct CheckpointArg {
    /// Defaults to `<run-dir>/checkpoints/stage2.ckpt`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub ckpt: CheckpointArg,
    /// LQ image; defaults to test pair `--index`.
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// Ground truth for `--image`; without it no metrics are written.
    #[arg(long, requires = "image")]
    pub gt: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    /// Comma-separated lambda_pix values (grid rows).
    #[arg(long, default_value = "0,0.5,1,1.5")]
    pub pix: String,
    /// Comma-separated lambda_sem values (grid columns).
    #[arg(long, default_value = "0,0.5,1,1.5")]
    pub sem: String,
}

#[derive(Args, Debug)]
pub struct RestoreArgs {
    #[command(flatten)]
    pub ckpt: CheckpointArg,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// `lambda_pix,lambda_sem`. Without it the merged single-pass path runs.
    #[arg(long)]
    pub scales: Option<String>,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    #[command(flatten)]
    pub ckpt: CheckpointArg,
    /// Overrides `serve.addr`.
    #[arg(long)]
    pub addr: Option<String>,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Degrade => "degrade",
            Command::PretrainCodec => "pretrain-codec",
            Command::PretrainClassifier => "pretrain-classifier",
            Command::PretrainTeacher => "pretrain-teacher",
            Command::TrainPix => "train-pix",
            Command::TrainSem => "train-sem",
            Command::Eval(_) => "eval",
            Command::Sweep(_) => "sweep",
            Command::Restore(_) => "restore",
            Command::LossVerify => "loss-verify",
            Command::Serve(_) => "serve",
        }
    }
}

/// Fixed file locations inside a run directory.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn toy(&self, split: &str) -> PathBuf {
        self.root.join("data").join("toy").join(split)
    }

    pub fn pairs(&self, split: &str) -> PathBuf {
        self.root.join("data").join("pairs").join(split)
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{name}.ckpt"))
    }

    pub fn log(&self, command: &str) -> PathBuf {
        self.root.join("logs").join(format!("{command}.jsonl"))
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn resolved_config(&self) -> PathBuf {
        self.root.join("config.resolved")
    }

    fn create(&self) -> std::io::Result<()> {
        for d in ["checkpoints", "logs", "reports"] {
            std::fs::create_dir_all(self.root.join(d))?;
        }
        Ok(())
    }
}

/// Parses `a,b,c` into numbers.
pub fn parse_list(text: &str) -> CliResult<Vec<f64>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| CliError::Usage(format!("`{s}` is not a finite number")))
        })
        .collect()
}

pub fn parse_scales(text: &str) -> CliResult<GuidanceScales> {
    match parse_list(text)?.as_slice() {
        [p, s] => Ok(GuidanceScales::new(*p, *s)),
        _ => Err(CliError::Usage(format!("--scales expects `lambda_pix,lambda_sem`, got `{text}`"))),
    }
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> CliResult<CliConfig> {
    let base = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
            CliConfig::from_toml(&text).map_err(|e| CliError::Usage(e.to_string()))?
        }
        None => CliConfig::default(),
    };
    base.resolve(seed).map_err(|e| CliError::Usage(e.to_string()))
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code. Failures print one JSON line on stderr.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return EXIT_OK;
            }
            let msg = e.render().to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("{}", CliError::Usage(first.to_string()).to_line());
            return EXIT_USAGE;
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("{}", e.to_line());
            e.exit_code()
        }
    }
}

pub fn execute(cli: &Cli) -> CliResult<()> {
    let cfg = load_config(cli.config.as_deref(), cli.seed)?;
    let run = RunDir::new(&cli.run_dir);
    run.create()?;
    std::fs::write(run.resolved_config(), cfg.to_toml()?)?;
    log::info!("{}: run directory {}", cli.command.name(), run.root.display());
    match &cli.command {
        Command::GenData => stages::gen_data(&cfg, &run),
        Command::Degrade => stages::degrade(&cfg, &run),
        Command::PretrainCodec => stages::pretrain_codec(&cfg, &run),
        Command::PretrainClassifier => stages::pretrain_classifier(&cfg, &run),
        Command::PretrainTeacher => stages::pretrain_teacher(&cfg, &run),
        Command::TrainPix => stages::train_pix(&cfg, &run),
        Command::TrainSem => stages::train_sem(&cfg, &run),
        Command::Eval(a) => stages::eval(&cfg, &run, a.checkpoint.as_deref()),
        Command::Sweep(a) => stages::sweep(&cfg, &run, a),
        Command::Restore(a) => stages::restore(&cfg, &run, a),
        Command::LossVerify => verify::loss_verify(&cfg, &run),
        Command::Serve(a) => stages::serve(&cfg, &run, a),
    }
}
