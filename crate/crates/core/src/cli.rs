//! Command-line front end.
//!
//! Exit codes: 0 success, 2 bad input (flags, missing or invalid files),
//! 3 backend unreachable or failing, 1 anything else.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::embed::{HashingEmbedder, HttpEmbedder, TextEmbedder};
use crate::error::Error;
use crate::gateway::{
    Backend, BackendConfig, BackendKind, FallbackBackend, Gateway, HttpBackend, MockBackend,
    Secret, API_KEY_ENV,
};
use crate::policy_grad::{BaselineMode, PolicyGradConfig};
use crate::reflection::{run_loop, write_trace, LoopConfig, LoopError};
use crate::retrieval::RetrievalConfig;
use crate::simulator::{Experiment, SIM_TEMPERATURE};
use crate::store::EmbeddingStore;
use crate::tma::{sample_schedule, write_schedule_csv, TmaSchedule};

pub const EXIT_OK: u8 = 0;
pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_BACKEND: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "frameloop", version, about = "Keyframe evidence loops and attention gain schedules")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
#[allow(clippy::large_enum_variant)]
pub enum Command {
    /// Answer a question over a store of frame embeddings.
    Ask(AskArgs),
    /// Convert a text matrix of embeddings plus timestamps into a store file.
    Import(ImportArgs),
    /// Write a store back out as a text matrix plus timestamps.
    Export(ExportArgs),
    /// Dump the attention gain schedules as CSV.
    Tma(TmaArgs),
    /// Run the planted-evidence policy-gradient experiment.
    Simulate(SimulateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendChoice {
    Mock,
    Http,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EmbedderChoice {
    /// Offline token-hashing encoder.
    Hash,
    /// Embeddings HTTP endpoint.
    Http,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OutputFormat {
    Text,
    Structured,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BaselineChoice {
    Zero,
    RunningMean,
}

#[derive(Debug, Args)]
pub struct AskArgs {
    /// Store file (UVEB format).
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long)]
    pub question: String,
    #[arg(long, value_enum, default_value_t = BackendChoice::Mock)]
    pub backend: BackendChoice,
    /// Chat-completions URL for the http backend.
    #[arg(long)]
    pub endpoint: Option<String>,
    /// Model name sent to the http backend.
    #[arg(long)]
    pub model: Option<String>,
    /// Per-request timeout in seconds.
    #[arg(long, default_value_t = 60.0)]
    pub timeout_secs: f64,
    #[arg(long, default_value_t = 1)]
    pub max_retries: u32,
    /// Sampling temperature sent to the http backend.
    #[arg(long, default_value_t = 0.0)]
    pub sampling_temperature: f64,
    /// Answer with the offline mock when the http backend is unreachable.
    #[arg(long)]
    pub mock_fallback: bool,
    #[arg(long, value_enum, default_value_t = EmbedderChoice::Hash)]
    pub embedder: EmbedderChoice,
    /// Embeddings URL for the http embedder.
    #[arg(long)]
    pub embed_endpoint: Option<String>,
    #[arg(long)]
    pub embed_model: Option<String>,
    #[arg(long, default_value_t = 3)]
    pub max_rounds: usize,
    /// Evaluator score at which an answer is accepted.
    #[arg(long, default_value_t = 0.7)]
    pub stop_threshold: f64,
    /// Frames used to build the global caption.
    #[arg(long, default_value_t = 16)]
    pub seed_frames: usize,
    #[arg(long, default_value_t = 0.5)]
    pub mmr_lambda: f64,
    #[arg(long, default_value_t = 1.0)]
    pub softmax_temperature: f64,
    /// Working-set sizes per round for static questions.
    #[arg(long, value_delimiter = ',', default_value = "4,8,16")]
    pub static_schedule: Vec<usize>,
    /// Working-set sizes per round for dynamic questions.
    #[arg(long, value_delimiter = ',', default_value = "64,32,16")]
    pub dynamic_schedule: Vec<usize>,
    /// Sample expansions from the soft retrieval policy.
    #[arg(long)]
    pub stochastic: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write the per-round trace as JSON to this path.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = OutputFormat::Text)]
    pub format: OutputFormat,
}

#[derive(Debug, Args)]
pub struct ImportArgs {
    /// Directory holding `embeddings.txt` and `timestamps.txt`.
    #[arg(long)]
    pub input: PathBuf,
    /// Output store path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub store: PathBuf,
    /// Directory to write `embeddings.txt` and `timestamps.txt` into.
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct TmaArgs {
    /// Grid points over [0, 1].
    #[arg(long, default_value_t = 101)]
    pub samples: usize,
    #[arg(long, default_value_t = 0.3)]
    pub lambda_txt: f64,
    #[arg(long, default_value_t = 0.3)]
    pub lambda_img: f64,
    #[arg(long, default_value_t = 0.4)]
    pub txt_breakpoint: f64,
    #[arg(long, default_value_t = 0.6)]
    pub img_breakpoint: f64,
    /// Output file; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, default_value_t = 100)]
    pub seeds: u64,
    /// First seed; seeds run from here upward.
    #[arg(long, default_value_t = 0)]
    pub seed_start: u64,
    #[arg(long, default_value_t = 20)]
    pub steps: usize,
    /// Step size of the search-vector update.
    #[arg(long, default_value_t = 0.5)]
    pub eta: f64,
    #[arg(long, default_value_t = 32)]
    pub frames: usize,
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    #[arg(long, default_value_t = 4)]
    pub planted: usize,
    /// Frames drawn per step.
    #[arg(long, default_value_t = 4)]
    pub k: usize,
    #[arg(long, default_value_t = SIM_TEMPERATURE)]
    pub temperature: f64,
    #[arg(long, value_enum, default_value_t = BaselineChoice::RunningMean)]
    pub baseline: BaselineChoice,
    #[arg(long, value_enum, default_value_t = OutputFormat::Text)]
    pub format: OutputFormat,
}

/// Failure carrying its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Transport { .. } | Error::Service { .. } => EXIT_BACKEND,
            Error::Format(_) | Error::Validation(_) | Error::Io { .. } | Error::Bounds { .. } => {
                EXIT_USAGE
            }
            Error::Parse(_) => EXIT_FAILURE,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult = Result<(), CliError>;

/// Parse `args` and run, writing primary output to `out` and diagnostics to
/// `err`. Returns the exit code.
pub fn run_with_io<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let rendered = e.render().to_string();
            let _ = if code == EXIT_OK {
                out.write_all(rendered.as_bytes())
            } else {
                err.write_all(rendered.as_bytes())
            };
            return code;
        }
    };
    let result = match cli.command {
        Command::Ask(a) => cmd_ask(&a, out, err),
        Command::Import(a) => cmd_import(&a, out),
        Command::Export(a) => cmd_export(&a, out),
        Command::Tma(a) => cmd_tma(&a, out),
        Command::Simulate(a) => cmd_simulate(&a, out),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e.message);
            e.code
        }
    }
}

pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    let code = run_with_io(args, &mut stdout.lock(), &mut stderr.lock());
    ExitCode::from(code)
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::from(Error::io(path, e))
}

fn write_out(out: &mut dyn Write, text: &str) -> CliResult {
    out.write_all(text.as_bytes())
        .map_err(|e| CliError::usage(format!("cannot write output: {e}")))
}

fn loop_config(a: &AskArgs) -> Result<LoopConfig, CliError> {
    if !(0.0..=1.0).contains(&a.stop_threshold) {
        return Err(CliError::usage(format!(
            "--stop-threshold {} must lie in [0, 1]",
            a.stop_threshold
        )));
    }
    let config = LoopConfig {
        max_rounds: a.max_rounds,
        stop_threshold: a.stop_threshold,
        seed_frames_for_caption: a.seed_frames,
        retrieval: RetrievalConfig {
            softmax_temperature: a.softmax_temperature,
            mmr_lambda: a.mmr_lambda,
            static_schedule: a.static_schedule.clone(),
            dynamic_schedule: a.dynamic_schedule.clone(),
            stochastic: a.stochastic,
            rng_seed: a.seed,
        },
    };
    config.validate().map_err(|e| CliError::usage(e.to_string()))?;
    Ok(config)
}

fn backend(a: &AskArgs) -> Result<Box<dyn Backend>, CliError> {
    if !(a.timeout_secs > 0.0) || !a.timeout_secs.is_finite() {
        return Err(CliError::usage("--timeout-secs must be positive"));
    }
    match a.backend {
        BackendChoice::Mock => Ok(Box::new(MockBackend::new())),
        BackendChoice::Http => {
            let config = BackendConfig {
                kind: BackendKind::Http,
                endpoint: a.endpoint.clone().unwrap_or_default(),
                model_name: a.model.clone().unwrap_or_default(),
                api_key: std::env::var(API_KEY_ENV).map(Secret::new).unwrap_or_default(),
                timeout: Duration::from_secs_f64(a.timeout_secs),
                max_retries: a.max_retries,
                sampling_temperature: a.sampling_temperature,
            };
            let http = HttpBackend::new(config).map_err(|e| CliError::usage(e.to_string()))?;
            Ok(if a.mock_fallback {
                Box::new(FallbackBackend {
                    primary: http,
                    fallback: MockBackend::new(),
                })
            } else {
                Box::new(http)
            })
        }
    }
}

fn embedder(a: &AskArgs, dim: usize) -> Result<Box<dyn TextEmbedder>, CliError> {
    match a.embedder {
        EmbedderChoice::Hash => Ok(Box::new(HashingEmbedder::new(dim))),
        EmbedderChoice::Http => {
            let endpoint = a
                .embed_endpoint
                .as_deref()
                .ok_or_else(|| CliError::usage("--embedder http needs --embed-endpoint"))?;
            Ok(Box::new(HttpEmbedder::new(
                endpoint,
                a.embed_model.as_deref().unwrap_or_default(),
                std::env::var(API_KEY_ENV).map(Secret::new).unwrap_or_default(),
                dim,
                Duration::from_secs_f64(a.timeout_secs),
            )))
        }
    }
}

pub fn cmd_ask(a: &AskArgs, out: &mut dyn Write, err: &mut dyn Write) -> CliResult {
    if a.question.trim().is_empty() {
        return Err(CliError::usage("--question must not be empty"));
    }
    let config = loop_config(a)?;
    let store = EmbeddingStore::load(&a.store)?;
    let gateway = Gateway::new(backend(a)?);
    let embedder = embedder(a, store.dim())?;

    let outcome = match run_loop(&a.question, &store, &gateway, &embedder, &config) {
        Ok(o) => o,
        Err(LoopError { error, trace }) => {
            if let Some(path) = &a.trace {
                write_trace(&trace, path)?;
            }
            return Err(error.into());
        }
    };
    if let Some(path) = &a.trace {
        write_trace(&outcome.trace, path)?;
    }
    for r in &outcome.trace {
        for w in &r.warnings {
            let _ = writeln!(err, "warning: round {}: {w}", r.round);
        }
    }
    let text = match a.format {
        OutputFormat::Text => format!("{}\n", outcome.answer),
        OutputFormat::Structured => {
            let v = serde_json::json!({
                "answer": outcome.answer,
                "mode": outcome.mode.as_str(),
                "rounds": outcome.trace.len(),
                "used_fallback": outcome.used_fallback,
                "global_caption": outcome.global_caption,
            });
            format!("{}\n", serde_json::to_string_pretty(&v).expect("json"))
        }
    };
    write_out(out, &text)
}

pub const EMBEDDINGS_FILE: &str = "embeddings.txt";
pub const TIMESTAMPS_FILE: &str = "timestamps.txt";

fn parse_matrix(text: &str, path: &Path) -> Result<Vec<Vec<f64>>, CliError> {
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split_whitespace()
            .map(|tok| {
                tok.parse::<f64>().map_err(|_| {
                    CliError::usage(format!(
                        "{}:{}: not a number: {tok:?}",
                        path.display(),
                        lineno + 1
                    ))
                })
            })
            .collect::<Result<Vec<f64>, _>>()?;
        if let Some(first) = rows.first().map(Vec::len) {
            if row.len() != first {
                return Err(CliError::usage(format!(
                    "{}:{}: row has {} values, expected {first}",
                    path.display(),
                    lineno + 1,
                    row.len()
                )));
            }
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn cmd_import(a: &ImportArgs, out: &mut dyn Write) -> CliResult {
    let emb_path = a.input.join(EMBEDDINGS_FILE);
    let ts_path = a.input.join(TIMESTAMPS_FILE);
    let emb_text = fs::read_to_string(&emb_path).map_err(|e| io_err(&emb_path, e))?;
    let ts_text = fs::read_to_string(&ts_path).map_err(|e| io_err(&ts_path, e))?;
    let rows = parse_matrix(&emb_text, &emb_path)?;
    let timestamps: Vec<f64> = parse_matrix(&ts_text, &ts_path)?.into_iter().flatten().collect();
    if timestamps.len() != rows.len() {
        return Err(CliError::usage(format!(
            "{} embedding rows but {} timestamps",
            rows.len(),
            timestamps.len()
        )));
    }
    let store = EmbeddingStore::from_rows(&rows, timestamps)?;
    store.save(&a.out)?;
    write_out(
        out,
        &format!(
            "wrote {} frames of dimension {} to {}\n",
            store.n_frames(),
            store.dim(),
            a.out.display()
        ),
    )
}

pub fn cmd_export(a: &ExportArgs, out: &mut dyn Write) -> CliResult {
    let store = EmbeddingStore::load(&a.store)?;
    fs::create_dir_all(&a.out_dir).map_err(|e| io_err(&a.out_dir, e))?;
    let mut emb = String::new();
    for row in store.rows() {
        let line: Vec<String> = row.iter().map(|&v| (v as f32).to_string()).collect();
        emb.push_str(&line.join(" "));
        emb.push('\n');
    }
    let ts: String = store.timestamps().iter().map(|t| format!("{t:?}\n")).collect();
    let emb_path = a.out_dir.join(EMBEDDINGS_FILE);
    let ts_path = a.out_dir.join(TIMESTAMPS_FILE);
    fs::write(&emb_path, emb).map_err(|e| io_err(&emb_path, e))?;
    fs::write(&ts_path, ts).map_err(|e| io_err(&ts_path, e))?;
    write_out(out, &format!("exported {} frames to {}\n", store.n_frames(), a.out_dir.display()))
}

pub fn cmd_tma(a: &TmaArgs, out: &mut dyn Write) -> CliResult {
    let schedule = TmaSchedule {
        lambda_txt: a.lambda_txt,
        lambda_img: a.lambda_img,
        txt_breakpoint: a.txt_breakpoint,
        img_breakpoint: a.img_breakpoint,
    };
    let rows = sample_schedule(&schedule, a.samples)?;
    match &a.out {
        Some(path) => {
            let file = fs::File::create(path).map_err(|e| io_err(path, e))?;
            let mut w = std::io::BufWriter::new(file);
            write_schedule_csv(&rows, &mut w)
                .and_then(|_| w.flush())
                .map_err(|e| io_err(path, e))
        }
        None => write_schedule_csv(&rows, out)
            .map_err(|e| CliError::usage(format!("cannot write output: {e}"))),
    }
}

/// Mean and standard error of `xs`.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

pub fn cmd_simulate(a: &SimulateArgs, out: &mut dyn Write) -> CliResult {
    if a.seeds == 0 || a.steps == 0 || a.frames == 0 || a.dim == 0 || a.k == 0 {
        return Err(CliError::usage("seeds, steps, frames, dim and k must be positive"));
    }
    if !(a.eta >= 0.0) || !(a.temperature > 0.0) {
        return Err(CliError::usage("--eta must be >= 0 and --temperature > 0"));
    }
    let ex = Experiment {
        n_frames: a.frames,
        dim: a.dim,
        n_planted: a.planted,
        k: a.k,
        steps: a.steps,
        temperature: a.temperature,
        policy: PolicyGradConfig {
            step_size: a.eta,
            baseline_mode: match a.baseline {
                BaselineChoice::Zero => BaselineMode::Zero,
                BaselineChoice::RunningMean => BaselineMode::RunningMean,
            },
            ..Default::default()
        },
    };
    if ex.k > ex.n_frames {
        return Err(CliError::usage("--k must not exceed --frames"));
    }
    let seeds: Vec<u64> = (a.seed_start..a.seed_start + a.seeds).collect();
    // seeds are independent; results are gathered back in seed order
    let summaries = std::thread::scope(|scope| {
        let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(seeds.len());
        let chunk = seeds.len().div_ceil(workers);
        let handles: Vec<_> = seeds
            .chunks(chunk)
            .map(|part| {
                let ex = &ex;
                scope.spawn(move || {
                    part.iter()
                        .map(|&s| ex.run_seed(s).map(|(_, summary)| summary))
                        .collect::<Result<Vec<_>, Error>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("simulation worker panicked"))
            .collect::<Result<Vec<_>, Error>>()
    })?
    .into_iter()
    .flatten()
    .collect::<Vec<_>>();

    let improvements: Vec<f64> = summaries.iter().map(|s| s.last_mean - s.first_mean).collect();
    let slopes: Vec<f64> = summaries.iter().map(|s| s.slope).collect();
    let (imp, imp_se) = mean_se(&improvements);
    let (slope, slope_se) = mean_se(&slopes);
    let first = mean_se(&summaries.iter().map(|s| s.first_mean).collect::<Vec<_>>()).0;
    let last = mean_se(&summaries.iter().map(|s| s.last_mean).collect::<Vec<_>>()).0;

    let text = match a.format {
        OutputFormat::Text => {
            let mut t = String::from("seed,first_mean,last_mean,improvement,slope\n");
            for s in &summaries {
                t.push_str(&format!(
                    "{},{:.6},{:.6},{:.6},{:.6}\n",
                    s.seed,
                    s.first_mean,
                    s.last_mean,
                    s.last_mean - s.first_mean,
                    s.slope
                ));
            }
            t.push_str(&format!(
                "aggregate seeds={} steps={} eta={} first_mean={first:.6} last_mean={last:.6} \
                 mean_improvement={imp:.6} improvement_se={imp_se:.6} \
                 mean_slope={slope:.6} slope_se={slope_se:.6}\n",
                summaries.len(),
                a.steps,
                a.eta
            ));
            t
        }
        OutputFormat::Structured => {
            let per_seed: Vec<_> = summaries
                .iter()
                .map(|s| {
                    serde_json::json!({
                        "seed": s.seed,
                        "first_mean": s.first_mean,
                        "last_mean": s.last_mean,
                        "slope": s.slope,
                    })
                })
                .collect();
            let v = serde_json::json!({
                "seeds": per_seed,
                "first_mean": first,
                "last_mean": last,
                "mean_improvement": imp,
                "improvement_se": imp_se,
                "mean_slope": slope,
                "slope_se": slope_se,
            });
            format!("{}\n", serde_json::to_string_pretty(&v).expect("json"))
        }
    };
    write_out(out, &text)
}
