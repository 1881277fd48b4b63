//! The `floodvqa` command: run the answering pipeline, build datasets,
//! score human ratings and host the annotation service.

pub mod config;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use floodvqa_annotate::{load_campaign, ServiceState};
use floodvqa_core::builder::{build, NOT_GROUNDED};
use floodvqa_core::eval::{
    aggregate_plausibility, fleiss_kappa, parse_ratings_jsonl, render_table, report,
    AccuracyReport, Aggregation, KappaGate, RatingMatrix,
};
use floodvqa_core::model::{parse_manifest, serialize_manifest, validate_manifest};
use floodvqa_core::pipeline::{PipelineError, RunLog};
use floodvqa_core::{DatasetManifest, PromptMode};
use serde::{Deserialize, Serialize};

pub use config::CliConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 1;
pub const EXIT_PARTIAL: i32 = 2;
pub const EXIT_USAGE: i32 = 64;

#[derive(Debug, Parser)]
#[command(name = "floodvqa", version, about = "Caption-grounded VQA over flood imagery")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum ModeArg {
    WithoutCot,
    ZeroShotCot,
    FewShotCot,
}

impl From<ModeArg> for PromptMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::WithoutCot => PromptMode::WithoutCot,
            ModeArg::ZeroShotCot => PromptMode::ZeroShotCot,
            ModeArg::FewShotCot => PromptMode::FewShotCot,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum AggregationArg {
    Majority,
    PerRating,
}

impl From<AggregationArg> for Aggregation {
    fn from(a: AggregationArg) -> Self {
        match a {
            AggregationArg::Majority => Aggregation::Majority,
            AggregationArg::PerRating => Aggregation::PerRating,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Answer every question of a manifest and write a JSON Lines run log
    Run {
        /// Dataset manifest JSON
        manifest: PathBuf,
        /// Configuration JSON (backends, pipeline settings, paths)
        config: PathBuf,
        /// Prompting arm
        #[arg(long, value_enum)]
        mode: ModeArg,
        /// Run log to write
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a yes/no question manifest from a directory of images
    BuildDataset {
        /// Directory of .jpg/.jpeg/.png images (not searched recursively)
        image_dir: PathBuf,
        /// Configuration JSON (backends, build settings)
        config: PathBuf,
        /// Manifest to write; the build report goes next to it as <stem>.report.json
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a ratings log against a run log and write an accuracy report
    Eval {
        /// Run log the ratings judge
        run_log: PathBuf,
        /// Ratings JSON Lines, as written by `serve`
        ratings_log: PathBuf,
        /// Manifest the run log answers
        manifest: PathBuf,
        /// Report JSON to write
        #[arg(long)]
        out: PathBuf,
        /// How ratings of one item combine into accuracy observations
        #[arg(long, value_enum, default_value = "majority")]
        aggregation: AggregationArg,
        /// Minimum Fleiss' kappa for the ratings to count as reliable
        #[arg(long, default_value_t = KappaGate::default().threshold)]
        kappa_gate: f64,
        /// Row label in the printed table; derived from the run log's mode when absent
        #[arg(long)]
        method: Option<String>,
    },
    /// Host the annotation API for a run log
    Serve {
        /// Run log whose answers are rated
        run_log: PathBuf,
        /// Manifest the run log answers
        manifest: PathBuf,
        /// Rater ids: a file with one id per line, or a comma-separated list
        raters: String,
        /// TCP port; 0 picks a free one
        #[arg(long, default_value_t = 8080)]
        port: u16,
        /// Address to bind
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Ratings log to append to; <run log stem>.ratings.jsonl beside the run log when absent
        #[arg(long)]
        ratings_log: Option<PathBuf>,
        /// Directory image paths resolve against; the manifest's directory when absent
        #[arg(long)]
        image_root: Option<PathBuf>,
    },
    /// Print one table row per eval report, in the given order
    Table {
        /// Report JSON files written by `eval`
        #[arg(required = true)]
        reports: Vec<PathBuf>,
    },
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_INPUT
        }
    }
}

pub fn execute(command: Command) -> Result<i32> {
    match command {
        Command::Run {
            manifest,
            config,
            mode,
            out,
        } => cmd_run(&manifest, &config, mode.into(), &out),
        Command::BuildDataset {
            image_dir,
            config,
            out,
        } => cmd_build_dataset(&image_dir, &config, &out),
        Command::Eval {
            run_log,
            ratings_log,
            manifest,
            out,
            aggregation,
            kappa_gate,
            method,
        } => {
            let r = cmd_eval(
                &run_log,
                &ratings_log,
                &manifest,
                aggregation.into(),
                KappaGate {
                    threshold: kappa_gate,
                },
                method,
            )?;
            write_output(&out, &to_json(&r))?;
            print!("{}", render_table(&[(r.method.clone(), &r.accuracy)]));
            match r.kappa {
                Some(k) => println!(
                    "Fleiss' kappa {k:.4} ({} the {:.2} gate)",
                    if r.kappa_gate.passes == Some(true) { "passes" } else { "fails" },
                    r.kappa_gate.threshold
                ),
                None => println!(
                    "Fleiss' kappa unavailable: {}",
                    r.kappa_note.as_deref().unwrap_or("unknown")
                ),
            }
            Ok(EXIT_OK)
        }
        Command::Serve {
            run_log,
            manifest,
            raters,
            port,
            host,
            ratings_log,
            image_root,
        } => cmd_serve(
            &run_log,
            &manifest,
            &raters,
            &host,
            port,
            ratings_log,
            image_root,
        ),
        Command::Table { reports } => {
            let loaded = reports
                .iter()
                .map(|p| {
                    serde_json::from_slice::<EvalReport>(&read(p)?)
                        .with_context(|| format!("in eval report {}", p.display()))
                })
                .collect::<Result<Vec<_>>>()?;
            let rows: Vec<_> = loaded.iter().map(|r| (r.method.clone(), &r.accuracy)).collect();
            print!("{}", render_table(&rows));
            Ok(EXIT_OK)
        }
    }
}

/// Installs a stderr logger; `FLOODVQA_LOG` picks the level (default warn).
pub fn init_logging() {
    let level = std::env::var("FLOODVQA_LOG")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(tracing::Level::WARN);
    let _ = tracing_subscriber::fmt()
        .with_max_level(level)
        .with_writer(std::io::stderr)
        .try_init();
}

fn runtime() -> Result<tokio::runtime::Runtime> {
    Ok(tokio::runtime::Builder::new_multi_thread().enable_all().build()?)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).with_context(|| format!("reading {}", path.display()))
}

fn read_text(path: &Path) -> Result<String> {
    String::from_utf8(read(path)?).with_context(|| format!("{} is not UTF-8", path.display()))
}

/// Writes `bytes` to `path`, creating missing parent directories.
pub fn write_output(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn to_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(value).expect("report serializes");
    v.push(b'\n');
    v
}

fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    parse_manifest(&read(path)?).with_context(|| format!("in manifest {}", path.display()))
}

fn load_run_log(path: &Path) -> Result<RunLog> {
    RunLog::from_jsonl(&read_text(path)?).with_context(|| format!("in run log {}", path.display()))
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

/// `dir/name.json` becomes `dir/name.<suffix>`.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn violation_listing(violations: &[floodvqa_core::model::Violation]) -> String {
    let mut s = format!("manifest has {} violation(s):", violations.len());
    for v in violations {
        s.push_str(&format!("\n  {v}"));
    }
    s
}

pub fn cmd_run(manifest_path: &Path, config_path: &Path, mode: PromptMode, out: &Path) -> Result<i32> {
    let manifest = load_manifest(manifest_path)?;
    let violations = validate_manifest(&manifest);
    if !violations.is_empty() {
        bail!(violation_listing(&violations));
    }
    let config = CliConfig::load(config_path, |k| std::env::var(k).ok())?;
    let pipeline = config.pipeline(mode)?;
    let image_root = config.image_root.clone().unwrap_or_else(|| parent_dir(manifest_path));

    let log = runtime()?
        .block_on(pipeline.run_dataset(&manifest, &image_root))
        .map_err(|e| match e {
            PipelineError::InvalidManifest(v) => anyhow::anyhow!(violation_listing(&v)),
            other => other.into(),
        })?;
    write_output(out, log.to_jsonl().as_bytes())?;

    let failed = log.failures().count();
    eprintln!(
        "{} answered, {failed} failed; run log written to {}",
        log.entries.len() - failed,
        out.display()
    );
    Ok(if failed > 0 { EXIT_PARTIAL } else { EXIT_OK })
}

pub fn cmd_build_dataset(image_dir: &Path, config_path: &Path, out: &Path) -> Result<i32> {
    let config = CliConfig::load(config_path, |k| std::env::var(k).ok())?;
    let backends = config.build_backends(image_dir)?;
    let (manifest, build_report) = runtime()?.block_on(build(image_dir, &backends, &config.build))?;

    let violations = validate_manifest(&manifest);
    if !violations.is_empty() {
        bail!("built manifest is invalid; {}", violation_listing(&violations));
    }
    write_output(out, &serialize_manifest(&manifest))?;
    let report_path = sibling(out, "report.json");
    write_output(&report_path, &to_json(&build_report))?;

    let errors = build_report
        .rejections
        .iter()
        .filter(|r| r.reason != NOT_GROUNDED)
        .count();
    eprintln!(
        "{} images, {} entities, {} grounded, {} questions; {errors} error(s); report written to {}",
        build_report.n_images_in,
        build_report.n_entities_extracted,
        build_report.n_entities_grounded,
        build_report.n_questions_emitted,
        report_path.display()
    );
    Ok(if errors > 0 { EXIT_PARTIAL } else { EXIT_OK })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateResult {
    pub threshold: f64,
    /// Absent when kappa could not be computed.
    pub passes: Option<bool>,
}

/// What `eval` writes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub aggregation: Aggregation,
    pub n_raters: usize,
    pub n_complete_items: usize,
    pub n_observations: usize,
    pub kappa: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa_note: Option<String>,
    pub kappa_gate: GateResult,
    pub accuracy: AccuracyReport,
}

fn method_label(log: &RunLog) -> String {
    let mut modes = log.answers().map(|a| a.mode);
    match modes.next() {
        None => "unknown".into(),
        Some(first) if modes.all(|m| m == first) => first.label().into(),
        Some(_) => "mixed".into(),
    }
}

pub fn cmd_eval(
    run_log_path: &Path,
    ratings_path: &Path,
    manifest_path: &Path,
    aggregation: Aggregation,
    gate: KappaGate,
    method: Option<String>,
) -> Result<EvalReport> {
    let run_log = load_run_log(run_log_path)?;
    let manifest = load_manifest(manifest_path)?;
    let ratings = parse_ratings_jsonl(&read_text(ratings_path)?)
        .with_context(|| format!("in ratings log {}", ratings_path.display()))?;
    let matrix = RatingMatrix::from_ratings(&ratings, None)?;

    let (kappa, kappa_note) = match fleiss_kappa(&matrix) {
        Ok(k) => (Some(k), None),
        Err(e) => (None, Some(e.to_string())),
    };
    let observations = aggregate_plausibility(&matrix, aggregation)?;
    let accuracy = report(&run_log, &observations, &manifest)?;
    Ok(EvalReport {
        method: method.unwrap_or_else(|| method_label(&run_log)),
        aggregation,
        n_raters: matrix.n_raters(),
        n_complete_items: matrix.n_items(),
        n_observations: observations.len(),
        kappa,
        kappa_note,
        kappa_gate: GateResult {
            threshold: gate.threshold,
            passes: kappa.map(|k| gate.passes(k)),
        },
        accuracy,
    })
}

/// A rater list argument: an existing file with one id per line (blank
/// lines and `#` comments skipped), otherwise comma-separated ids.
pub fn parse_raters(arg: &str) -> Result<Vec<String>> {
    let path = Path::new(arg);
    let ids: Vec<String> = if path.is_file() {
        read_text(path)?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(String::from)
            .collect()
    } else {
        arg.split(',').map(|s| s.trim().to_string()).collect()
    };
    Ok(ids)
}

pub fn cmd_serve(
    run_log_path: &Path,
    manifest_path: &Path,
    raters: &str,
    host: &str,
    port: u16,
    ratings_log: Option<PathBuf>,
    image_root: Option<PathBuf>,
) -> Result<i32> {
    let run_log = load_run_log(run_log_path)?;
    let manifest = load_manifest(manifest_path)?;
    let raters = parse_raters(raters)?;
    let campaign = load_campaign(&run_log, &manifest, &raters)?;
    let ratings_log = ratings_log.unwrap_or_else(|| sibling(run_log_path, "ratings.jsonl"));
    let image_root = image_root.unwrap_or_else(|| parent_dir(manifest_path));
    let state = Arc::new(ServiceState::open(
        campaign,
        run_log,
        manifest,
        image_root,
        &ratings_log,
    )?);

    let rt = runtime()?;
    let listener = rt
        .block_on(tokio::net::TcpListener::bind((host, port)))
        .with_context(|| format!("binding {host}:{port}"))?;
    let addr = listener.local_addr()?;
    let mut stdout = std::io::stdout();
    writeln!(stdout, "ratings log: {}", state.ratings_log().display())?;
    writeln!(stdout, "listening on http://{addr}")?;
    stdout.flush()?;

    rt.block_on(floodvqa_annotate::service::serve(listener, state, async {
        let _ = tokio::signal::ctrl_c().await;
    }))?;
    Ok(EXIT_OK)
}
