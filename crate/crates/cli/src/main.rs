//! `hetattr`: explain attention traces, generate planted fixtures, evaluate
//! and self-test.
//!
//! Exit codes: 0 success, 2 usage, 3 validation, 4 I/O, 5 numerical check.

mod commands;
mod error;
mod manifest;
mod pnm;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hetattr::suite::Method;
use hetattr::CorrectionMode;

use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "hetattr", version, about)]
pub struct Cli {
    /// Root under which commands create their default output directories.
    #[arg(
        long,
        global = true,
        env = "HETATTR_OUT",
        default_value = "hetattr-out"
    )]
    pub out_root: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Propagate a trace and write saliency maps and heatmaps.
    Explain(ExplainArgs),
    /// Write the planted fixture suite for a seed.
    GenFixtures(GenFixturesArgs),
    /// Weakly supervised segmentation AP/AR over a fixture suite.
    EvalSeg(EvalSegArgs),
    /// Positive and negative perturbation curves over a fixture suite.
    EvalPerturb(EvalPerturbArgs),
    /// Gradient, oracle, Otsu and format checks.
    Selftest(SelftestArgs),
    /// Replay the command recorded in a manifest.
    Rerun(RerunArgs),
}

#[derive(Debug, Clone, Args)]
pub struct MethodArgs {
    /// Gradient correction: pos, abs or full.
    #[arg(long, default_value = "pos")]
    pub mode: CorrectionMode,
    /// Renormalize attention of streams flagged for it (no-op when none are).
    #[arg(long)]
    pub noise_link: bool,
}

impl MethodArgs {
    pub fn method(&self) -> Method {
        Method {
            mode: self.mode,
            noise_link: self.noise_link,
        }
    }

    fn argv(&self) -> Vec<String> {
        let mut v = vec!["--mode".into(), self.mode.name().into()];
        if self.noise_link {
            v.push("--noise-link".into());
        }
        v
    }
}

#[derive(Debug, Clone, Args)]
pub struct ExplainArgs {
    pub trace: PathBuf,
    #[command(flatten)]
    pub method: MethodArgs,
    /// Stream whose token is explained. Default: the stream with a CLS token,
    /// else the query stream of the last layer.
    #[arg(long)]
    pub stream: Option<u32>,
    /// Token row to explain. Default: the stream's CLS token.
    #[arg(long)]
    pub row: Option<usize>,
    /// Pixels per patch side in heatmaps.
    #[arg(long, default_value_t = 8, value_parser = clap::value_parser!(u32).range(1..=256))]
    pub upsample: u32,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct GenFixturesArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalSegArgs {
    pub fixtures: PathBuf,
    #[command(flatten)]
    pub method: MethodArgs,
    /// Binarization scales applied to the Otsu threshold.
    #[arg(long = "k", value_delimiter = ',', default_values_t = [1.0, 0.3])]
    pub scales: Vec<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalPerturbArgs {
    pub fixtures: PathBuf,
    #[command(flatten)]
    pub method: MethodArgs,
    /// Seed of the random-scoring baseline.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Random scorings averaged into the baseline; 0 skips it.
    #[arg(long, default_value_t = 16)]
    pub baseline_draws: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SelftestArgs {
    /// Check this fixture suite instead of one generated in memory.
    #[arg(long)]
    pub fixtures: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct RerunArgs {
    pub manifest: PathBuf,
    /// Output directory. Default: the one recorded in the manifest.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn path_arg(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn stem(p: &Path) -> String {
    p.file_stem()
        .or_else(|| p.file_name())
        .map_or_else(|| "input".into(), |s| s.to_string_lossy().into_owned())
}

impl Command {
    /// Subcommand name and resolved argument list, without `--out`.
    pub fn argv(&self) -> Vec<String> {
        let mut v: Vec<String> = Vec::new();
        match self {
            Command::Explain(a) => {
                v.extend(["explain".into(), path_arg(&a.trace)]);
                v.extend(a.method.argv());
                if let Some(s) = a.stream {
                    v.extend(["--stream".into(), s.to_string()]);
                }
                if let Some(r) = a.row {
                    v.extend(["--row".into(), r.to_string()]);
                }
                v.extend(["--upsample".into(), a.upsample.to_string()]);
            }
            Command::GenFixtures(a) => {
                v.extend(["gen-fixtures".into(), "--seed".into(), a.seed.to_string()]);
            }
            Command::EvalSeg(a) => {
                v.extend(["eval-seg".into(), path_arg(&a.fixtures)]);
                v.extend(a.method.argv());
                let ks: Vec<String> = a.scales.iter().map(|k| format!("{k:?}")).collect();
                v.extend(["--k".into(), ks.join(",")]);
            }
            Command::EvalPerturb(a) => {
                v.extend(["eval-perturb".into(), path_arg(&a.fixtures)]);
                v.extend(a.method.argv());
                v.extend(["--seed".into(), a.seed.to_string()]);
                v.extend(["--baseline-draws".into(), a.baseline_draws.to_string()]);
            }
            Command::Selftest(a) => {
                v.push("selftest".into());
                if let Some(f) = &a.fixtures {
                    v.extend(["--fixtures".into(), path_arg(f)]);
                }
            }
            Command::Rerun(_) => unreachable!("rerun is never recorded"),
        }
        v
    }

    /// `--out` if given, else a directory under `root` named after the run.
    pub fn out_dir(&self, root: &Path) -> PathBuf {
        let (given, default) = match self {
            Command::Explain(a) => (
                &a.out,
                format!("explain-{}-{}", stem(&a.trace), a.method.method().name()),
            ),
            Command::GenFixtures(a) => (&a.out, format!("fixtures-{}", a.seed)),
            Command::EvalSeg(a) => (
                &a.out,
                format!(
                    "eval-seg-{}-{}",
                    stem(&a.fixtures),
                    a.method.method().name()
                ),
            ),
            Command::EvalPerturb(a) => (
                &a.out,
                format!(
                    "eval-perturb-{}-{}",
                    stem(&a.fixtures),
                    a.method.method().name()
                ),
            ),
            Command::Selftest(a) => (&a.out, "selftest".into()),
            Command::Rerun(a) => (&a.out, String::new()),
        };
        given.clone().unwrap_or_else(|| root.join(default))
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Rerun(a) => {
            let m = manifest::RunManifest::read(&a.manifest)?;
            if m.tool_version != env!("CARGO_PKG_VERSION") {
                eprintln!(
                    "warning: manifest written by {} {}, running {}",
                    m.tool,
                    m.tool_version,
                    env!("CARGO_PKG_VERSION")
                );
            }
            let out = a.out.clone().unwrap_or(m.output_dir);
            let argv = std::iter::once(manifest::TOOL.to_string())
                .chain(m.argv)
                .chain(["--out".into(), path_arg(&out)]);
            let replay = Cli::try_parse_from(argv)
                .map_err(|e| CliError::Validation(format!("manifest argv: {e}")))?;
            if matches!(replay.command, Command::Rerun(_)) {
                return Err(CliError::Validation("manifest records a rerun".into()));
            }
            run(replay)
        }
        command => {
            let out = command.out_dir(&cli.out_root);
            commands::execute(command, &out)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
