//! `feater` command-line driver. [`run`] does all the work and returns a
//! [`CommandResult`]; the binary only prints it and exits.

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use feater_core::blocks::{save_checkpoint, Architecture, StackParams};
use feater_core::costmodel::{format_giga, macs_feater_block, macs_vanilla_block, CostReport};
use feater_core::gradcheck::{check_feater_block, check_vanilla_block, DEFAULT_EPS};
use feater_core::synthtask::{ablate_mask_ratio_jobs, ablation_csv, train_toy, TrainConfig};
use feater_core::tensor::read_tensor;
use feater_core::Error;

pub const SEED_ENV: &str = "FEATER_SEED";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CommandResult {
    pub exit_code: i32,
    pub artifacts: Vec<PathBuf>,
    /// Goes to stdout.
    pub summary: String,
    /// Goes to stderr.
    pub diagnostics: String,
}

impl CommandResult {
    fn ok(summary: String, artifacts: Vec<PathBuf>) -> Self {
        CommandResult { exit_code: 0, artifacts, summary, diagnostics: String::new() }
    }

    fn failure(code: i32, diagnostics: String) -> Self {
        CommandResult { exit_code: code, diagnostics, ..Default::default() }
    }
}

#[derive(Debug, Parser)]
#[command(name = "feater", version, about = "Feature-map transformer cost reports, gradient checks and toy training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// MAC and parameter report for one block (and a stack of `--depth`).
    Cost(CostArgs),
    /// Finite-difference check of one block's gradients.
    Gradcheck(GradcheckArgs),
    /// Train the toy heatmap-refinement task.
    Train(TrainArgs),
    /// Masking-ratio sweep over the toy task.
    Ablate(AblateArgs),
    /// Write each channel of a stored tensor as CSV or PGM.
    Dump(DumpArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ArchArg {
    Feater,
    Vanilla,
}

impl From<ArchArg> for Architecture {
    fn from(a: ArchArg) -> Self {
        match a {
            ArchArg::Feater => Architecture::Feater,
            ArchArg::Vanilla => Architecture::Vanilla,
        }
    }
}

#[derive(Debug, Args)]
struct CostArgs {
    #[arg(long, value_enum)]
    arch: ArchArg,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    /// Token dimension for the vanilla block.
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long, default_value_t = 1)]
    depth: u64,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Append an aligned text table to the summary.
    #[arg(long)]
    pretty: bool,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum)]
    arch: ArchArg,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    /// Vanilla token dimension; defaults to height·width.
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long, default_value_t = 1)]
    heads: usize,
    #[arg(long, default_value_t = DEFAULT_EPS)]
    eps: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[arg(long, value_delimiter = ',', required = true)]
    ratios: Vec<f64>,
    /// Base configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum DumpFormat {
    Csv,
    Pgm,
}

#[derive(Debug, Args)]
struct DumpArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum)]
    format: DumpFormat,
    #[arg(long)]
    out: PathBuf,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(format!("I/O error: {e}"))
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Runtime(format!("JSON error: {e}"))
    }
}

type Outcome = std::result::Result<CommandResult, Failure>;

/// Runs one invocation; `argv[0]` is the program name.
pub fn run<I, T>(argv: I) -> CommandResult
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let mut text = e.render().to_string();
            return if e.use_stderr() {
                if !text.contains("Usage:") {
                    let usage = <Cli as clap::CommandFactory>::command().render_usage();
                    text.push_str(&format!("\n{usage}\n"));
                }
                CommandResult::failure(2, text)
            } else {
                CommandResult::ok(text, Vec::new())
            };
        }
    };
    let outcome = match cli.command {
        Command::Cost(a) => cost(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Train(a) => train(a),
        Command::Ablate(a) => ablate(a),
        Command::Dump(a) => dump(a),
    };
    match outcome {
        Ok(r) => r,
        Err(Failure::Usage(msg)) => {
            let usage = <Cli as clap::CommandFactory>::command().render_usage();
            CommandResult::failure(2, format!("error: {msg}\n\n{usage}\n"))
        }
        Err(Failure::Runtime(msg)) => CommandResult::failure(1, format!("error: {msg}\n")),
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> std::io::Result<PathBuf> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, contents)?;
    Ok(path.to_path_buf())
}

fn cost(a: CostArgs) -> Outcome {
    let (block, shape) = match (a.arch, a.height, a.width, a.dim) {
        (ArchArg::Feater, Some(h), Some(w), None) => {
            (macs_feater_block(a.n, h, w)?, json!({ "n": a.n, "height": h, "width": w }))
        }
        (ArchArg::Vanilla, None, None, Some(d)) => (macs_vanilla_block(a.n, d)?, json!({ "n": a.n, "dim": d })),
        (ArchArg::Feater, ..) => return Err(Failure::Usage("feater needs --height and --width (and no --dim)".into())),
        (ArchArg::Vanilla, ..) => return Err(Failure::Usage("vanilla needs --dim (and no --height/--width)".into())),
    };
    if a.depth == 0 {
        return Err(Failure::Usage("--depth must be at least 1".into()));
    }
    let stack: CostReport = block.scaled(a.depth)?;
    let report = json!({
        "architecture": Architecture::from(a.arch),
        "shape": shape,
        "depth": a.depth,
        "block": block,
        "total_macs": stack.total_macs(),
        "total_params": stack.total_params(),
        "total_macs_giga": format_giga(stack.total_macs()),
    });
    let mut summary = serde_json::to_string_pretty(&report)?;
    summary.push('\n');
    let mut artifacts = Vec::new();
    if let Some(out) = &a.out {
        artifacts.push(write_file(out, &summary)?);
    }
    if a.pretty {
        summary.push_str(&block.to_text_table());
    }
    Ok(CommandResult::ok(summary, artifacts))
}

fn gradcheck(a: GradcheckArgs) -> Outcome {
    if !(a.eps > 0.0 && a.eps.is_finite()) {
        return Err(Failure::Usage(format!("--eps must be positive, got {}", a.eps)));
    }
    let report = match a.arch {
        ArchArg::Feater => {
            let (Some(h), Some(w)) = (a.height, a.width) else {
                return Err(Failure::Usage("feater needs --height and --width".into()));
            };
            check_feater_block(a.n, h, w, a.heads, a.seed, a.eps)?
        }
        ArchArg::Vanilla => {
            let d = match (a.dim, a.height, a.width) {
                (Some(d), _, _) => d,
                (None, Some(h), Some(w)) => h * w,
                _ => return Err(Failure::Usage("vanilla needs --dim or --height and --width".into())),
            };
            check_vanilla_block(a.n, d, a.heads, a.seed, a.eps)?
        }
    };
    let mut summary = serde_json::to_string_pretty(&report)?;
    summary.push('\n');
    let mut artifacts = Vec::new();
    if let Some(out) = &a.out {
        artifacts.push(write_file(out, &summary)?);
    }
    let mut result = CommandResult::ok(summary, artifacts);
    if !report.pass {
        result.exit_code = 1;
        result.diagnostics = format!(
            "gradient check failed: max relative error {:e} ≥ {:e}\n",
            report.max_rel_error, report.tolerance
        );
    }
    Ok(result)
}

fn seed_override() -> std::result::Result<Option<u64>, Failure> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Failure::Usage(format!("{SEED_ENV} must be a decimal integer, got {v:?}"))),
        Err(_) => Ok(None),
    }
}

fn load_config(path: Option<&Path>) -> std::result::Result<TrainConfig, Failure> {
    let mut cfg: TrainConfig = match path {
        Some(p) => serde_json::from_reader(BufReader::new(fs::File::open(p)?))?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = seed_override()? {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn train(a: TrainArgs) -> Outcome {
    let cfg = load_config(Some(&a.config))?;
    let rec = train_toy(&cfg)?;
    fs::create_dir_all(&a.out)?;
    let mut artifacts = vec![write_file(&a.out.join("train.jsonl"), rec.to_jsonl()?)?];
    let metrics = json!({
        "config": cfg,
        "learning_rate": cfg.effective_learning_rate(),
        "initial": rec.initial,
        "final": rec.final_metrics,
    });
    artifacts.push(write_file(&a.out.join("metrics.json"), serde_json::to_string_pretty(&metrics)?)?);
    let ckpt = a.out.join("checkpoint");
    artifacts.extend(save_checkpoint(&ckpt.join("refine"), &StackParams::Feater(rec.params.refine.clone()))?);
    artifacts.extend(save_checkpoint(&ckpt.join("recon"), &StackParams::Feater(rec.params.recon.clone()))?);
    let summary = format!("{}\n", serde_json::to_string(&metrics)?);
    Ok(CommandResult::ok(summary, artifacts))
}

fn ablate(a: AblateArgs) -> Outcome {
    if a.jobs == 0 {
        return Err(Failure::Usage("--jobs must be at least 1".into()));
    }
    if let Some(r) = a.ratios.iter().find(|r| !(0.0..1.0).contains(*r)) {
        return Err(Failure::Usage(format!("ratio {r} is outside [0, 1)")));
    }
    let cfg = load_config(a.config.as_deref())?;
    let rows = ablate_mask_ratio_jobs(&a.ratios, &cfg, a.jobs)?;
    let csv = ablation_csv(&rows);
    let path = write_file(&a.out, &csv)?;
    Ok(CommandResult::ok(csv, vec![path]))
}

fn channel_view(path: &Path) -> std::result::Result<(usize, usize, usize, Vec<f64>), Failure> {
    let t = read_tensor(BufReader::new(fs::File::open(path)?))?;
    let (n, h, w) = match *t.shape() {
        [n, h, w] => (n, h, w),
        [h, w] => (1, h, w),
        _ => {
            return Err(Failure::Runtime(format!(
                "expected a [n, h, w] or [h, w] tensor, got shape {:?}",
                t.shape()
            )))
        }
    };
    Ok((n, h, w, t.into_data()))
}

fn channel_csv(map: &[f64], w: usize) -> String {
    let mut out = String::new();
    for row in map.chunks_exact(w) {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

/// Binary P5, linearly rescaled so the channel's min is 0 and max is 255.
fn channel_pgm(map: &[f64], h: usize, w: usize) -> Vec<u8> {
    let (lo, hi) = map.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = hi - lo;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(map.iter().map(|&v| {
        if span > 0.0 && span.is_finite() {
            ((v - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            0
        }
    }));
    out
}

fn dump(a: DumpArgs) -> Outcome {
    let (n, h, w, data) = channel_view(&a.input)?;
    fs::create_dir_all(&a.out)?;
    let mut artifacts = Vec::with_capacity(n);
    for (c, map) in data.chunks_exact(h * w).enumerate() {
        let path = match a.format {
            DumpFormat::Csv => write_file(&a.out.join(format!("channel{c:03}.csv")), channel_csv(map, w))?,
            DumpFormat::Pgm => write_file(&a.out.join(format!("channel{c:03}.pgm")), channel_pgm(map, h, w))?,
        };
        artifacts.push(path);
    }
    let summary = format!("wrote {n} channel(s) of {h}x{w} to {}\n", a.out.display());
    Ok(CommandResult::ok(summary, artifacts))
}
