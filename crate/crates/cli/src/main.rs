//! `fnscope`: validate, analyze, synthesize and compare detector dumps.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use fnscope_core::interchange::format::to_canonical_string;
use fnscope_core::interchange::{create_dump, open_dump, validate_consistency, DumpError, DumpErrorKind, EmitError};
use fnscope_core::pipeline::{analyze, AnalyzeOptions, PipelineError, DEFAULT_BATCH_SIZE};
use fnscope_core::report::{compare, render, AnalysisReport, RenderFormat, ReportError};
use fnscope_core::synth::{generate, InjectionPlan, ObjectTarget, SynthError};
use fnscope_core::AnalysisConfig;

/// Exit statuses; stable across releases.
mod exit {
    pub const OTHER: u8 = 1;
    pub const USAGE: u8 = 2;
    pub const IO: u8 = 3;
    pub const PARSE: u8 = 4;
    pub const INVARIANT: u8 = 5;
    pub const UNSATISFIABLE: u8 = 6;
    pub const CATALOG_MISMATCH: u8 = 7;
}

#[derive(Parser, Debug)]
#[command(name = "fnscope", version, about = "Attribute object-detector false negatives to pipeline mechanisms")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// TOML file with defaults for any of the flags below.
    #[arg(long, global = true, env = "FNSCOPE_CONFIG")]
    config: Option<PathBuf>,
    /// Localization IoU threshold, shared by matching and attribution.
    #[arg(long, global = true, env = "FNSCOPE_THETA_LOC")]
    theta_loc: Option<f64>,
    /// Classification score threshold.
    #[arg(long, global = true, env = "FNSCOPE_THETA_CLS")]
    theta_cls: Option<f64>,
    /// NMS overlap threshold.
    #[arg(long, global = true, env = "FNSCOPE_NMS_IOU")]
    nms_iou: Option<f64>,
    /// TIDE foreground IoU.
    #[arg(long, global = true, env = "FNSCOPE_TIDE_FG")]
    tide_fg: Option<f64>,
    /// TIDE background IoU.
    #[arg(long, global = true, env = "FNSCOPE_TIDE_BG")]
    tide_bg: Option<f64>,
    /// Parallel analysis workers (0: one per core).
    #[arg(long, global = true, env = "FNSCOPE_WORKERS")]
    workers: Option<usize>,
    /// Output format for reports and delta tables.
    #[arg(long, global = true, value_enum, env = "FNSCOPE_FORMAT")]
    format: Option<Format>,
    /// Seed for synthesis.
    #[arg(long, global = true, env = "FNSCOPE_SEED")]
    seed: Option<u64>,
    /// Output path (a directory for `analyze`).
    #[arg(long, global = true, env = "FNSCOPE_OUT")]
    out: Option<PathBuf>,
    /// Print nothing on stderr unless something fails.
    #[arg(long, short, global = true, env = "FNSCOPE_QUIET")]
    quiet: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Check a dump against the schema and replay its NMS.
    Validate { dump: PathBuf },
    /// Attribute every false negative of a dump and aggregate a report.
    Analyze { dump: PathBuf },
    /// Generate a dump from an injection plan.
    Synth {
        plan: PathBuf,
        /// Also write per-object planned outcomes as JSON lines.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Percentage-point differences between two reports (second minus first).
    Compare { report_a: PathBuf, report_b: PathBuf },
    /// Render a machine-readable report in another format.
    ReportRender { report: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum Format {
    Table,
    Json,
    CrosstabFlow,
}

impl From<Format> for RenderFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Table => RenderFormat::Table,
            Format::Json => RenderFormat::Json,
            Format::CrosstabFlow => RenderFormat::CrosstabFlow,
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    theta_loc: Option<f64>,
    theta_cls: Option<f64>,
    nms_iou: Option<f64>,
    tide_fg: Option<f64>,
    tide_bg: Option<f64>,
    workers: Option<usize>,
    format: Option<Format>,
    seed: Option<u64>,
}

/// Effective settings: flag, then environment, then config file, then default.
struct RunConfig {
    analysis: AnalysisConfig,
    workers: usize,
    format: Format,
    seed: u64,
    out: Option<PathBuf>,
    quiet: bool,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

impl From<DumpError> for Failure {
    fn from(e: DumpError) -> Self {
        let code = match &e.kind {
            DumpErrorKind::Io(_) => exit::IO,
            k if k.is_syntax() => exit::PARSE,
            _ => exit::INVARIANT,
        };
        Failure::new(code, e.to_string())
    }
}

impl From<ReportError> for Failure {
    fn from(e: ReportError) -> Self {
        let code = match e {
            ReportError::Parse(_) => exit::PARSE,
            ReportError::Invalid(_) => exit::INVARIANT,
            ReportError::CatalogMismatch { .. } => exit::CATALOG_MISMATCH,
        };
        Failure::new(code, e.to_string())
    }
}

impl From<SynthError> for Failure {
    fn from(e: SynthError) -> Self {
        let code = match e {
            SynthError::InvalidPlan(_) => exit::PARSE,
            SynthError::Io(_) => exit::IO,
            SynthError::Unsatisfiable { .. } => exit::UNSATISFIABLE,
        };
        Failure::new(code, e.to_string())
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Dump(d) => d.into(),
            PipelineError::Mechanism { .. } => Failure::new(exit::INVARIANT, e.to_string()),
            PipelineError::Config(m) => Failure::new(exit::OTHER, m),
            PipelineError::Sink(io) => Failure::new(exit::IO, io.to_string()),
        }
    }
}

impl From<EmitError> for Failure {
    fn from(e: EmitError) -> Self {
        let code = match e {
            EmitError::Io(_) => exit::IO,
            _ => exit::INVARIANT,
        };
        Failure::new(code, e.to_string())
    }
}

fn io_failure(path: &Path, e: io::Error) -> Failure {
    Failure::new(exit::IO, format!("{}: {e}", path.display()))
}

fn resolve(g: &Global) -> Result<RunConfig, Failure> {
    let file = match &g.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| io_failure(path, e))?;
            toml::from_str::<FileConfig>(&text)
                .map_err(|e| Failure::new(exit::PARSE, format!("{}: {e}", path.display())))?
        }
        None => FileConfig::default(),
    };
    let d = AnalysisConfig::default();
    let analysis = AnalysisConfig {
        theta_loc: g.theta_loc.or(file.theta_loc).unwrap_or(d.theta_loc),
        theta_cls: g.theta_cls.or(file.theta_cls).unwrap_or(d.theta_cls),
        nms_iou: g.nms_iou.or(file.nms_iou).unwrap_or(d.nms_iou),
        tide_fg: g.tide_fg.or(file.tide_fg).unwrap_or(d.tide_fg),
        tide_bg: g.tide_bg.or(file.tide_bg).unwrap_or(d.tide_bg),
    };
    analysis
        .validate()
        .map_err(|m| Failure::new(exit::USAGE, format!("invalid configuration: {m}")))?;
    Ok(RunConfig {
        analysis,
        workers: g.workers.or(file.workers).unwrap_or(0),
        format: g.format.or(file.format).unwrap_or(Format::Table),
        seed: g.seed.or(file.seed).unwrap_or(0),
        out: g.out.clone(),
        quiet: g.quiet,
    })
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path).map(BufWriter::new).map_err(|e| io_failure(path, e))
}

/// Writes `text` to `--out` when given, stdout otherwise.
fn emit(cfg: &RunConfig, text: &str) -> Result<(), Failure> {
    match &cfg.out {
        Some(path) => std::fs::write(path, text).map_err(|e| io_failure(path, e)),
        None => io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| Failure::new(exit::IO, e.to_string())),
    }
}

fn note(cfg: &RunConfig, msg: impl AsRef<str>) {
    if !cfg.quiet {
        eprintln!("{}", msg.as_ref());
    }
}

fn cmd_validate(cfg: &RunConfig, dump: &Path) -> Result<(), Failure> {
    let reader = open_dump(dump)?;
    let header = reader.header().clone();
    let nms = cfg.analysis.nms();
    let mut first_error: Option<DumpError> = None;
    let mut images = 0usize;
    let mut diagnostics = 0usize;
    let mut stdout = io::stdout().lock();
    for item in reader {
        match item {
            Ok(image) => {
                images += 1;
                for d in validate_consistency(&image, &header.catalog, &nms) {
                    diagnostics += 1;
                    let _ = writeln!(stdout, "consistency: image \"{}\": {d}", image.image_id);
                }
            }
            Err(e) => {
                eprintln!("error: {e}");
                if first_error.is_none() {
                    first_error = Some(e);
                }
            }
        }
    }
    if let Some(e) = first_error {
        return Err(Failure {
            message: String::new(),
            ..Failure::from(e)
        });
    }
    note(cfg, format!("valid: {images} images, {diagnostics} consistency diagnostics"));
    Ok(())
}

fn cmd_analyze(cfg: &RunConfig, dump: &Path) -> Result<(), Failure> {
    let reader = open_dump(dump)?;
    let opts = AnalyzeOptions {
        config: cfg.analysis,
        workers: cfg.workers,
        batch_size: DEFAULT_BATCH_SIZE,
    };
    let report = match &cfg.out {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))?;
            let records_path = dir.join("fn_records.jsonl");
            let mut records = create(&records_path)?;
            let report = analyze(reader, &opts, |r| {
                let line = to_canonical_string(r).map_err(io::Error::other)?;
                writeln!(records, "{line}")
            })?;
            records.flush().map_err(|e| io_failure(&records_path, e))?;
            let report_path = dir.join("report.json");
            std::fs::write(&report_path, report.to_json()).map_err(|e| io_failure(&report_path, e))?;
            report
        }
        None => analyze(reader, &opts, |_| Ok(()))?,
    };
    report.check_invariants()?;
    let text = render(&report, cfg.format.into());
    if cfg.out.is_none() || !cfg.quiet {
        io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| Failure::new(exit::IO, e.to_string()))?;
    }
    note(
        cfg,
        format!(
            "analyzed: {} objects, {} false negatives",
            report.overall.total_objects, report.overall.fn_count
        ),
    );
    Ok(())
}

#[derive(Serialize)]
struct TruthLine<'a> {
    image_id: &'a str,
    gt_id: u64,
    target: ObjectTarget,
}

fn cmd_synth(cfg: &RunConfig, plan_path: &Path, truth: Option<&Path>) -> Result<(), Failure> {
    let plan = InjectionPlan::from_path(plan_path)?;
    let dump = generate(&plan, cfg.seed, &cfg.analysis)?;
    match &cfg.out {
        Some(path) => {
            let mut w = create_dump(path, dump.header.clone())?;
            for img in &dump.images {
                w.write_image(img)?;
            }
            w.finish()?;
        }
        None => emit(cfg, &dump.to_canonical_string()?)?,
    }
    if let Some(path) = truth {
        let mut w = create(path)?;
        for (img, objects) in dump.images.iter().zip(&dump.truth) {
            for o in objects {
                let line = TruthLine {
                    image_id: &img.image_id,
                    gt_id: o.gt_id,
                    target: o.target,
                };
                let text = to_canonical_string(&line).map_err(|e| Failure::new(exit::OTHER, e.to_string()))?;
                writeln!(w, "{text}").map_err(|e| io_failure(path, e))?;
            }
        }
        w.flush().map_err(|e| io_failure(path, e))?;
    }
    note(
        cfg,
        format!("synthesized: {} images, seed {}", dump.images.len(), cfg.seed),
    );
    Ok(())
}

fn read_report(path: &Path) -> Result<AnalysisReport, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| io_failure(path, e))?;
    AnalysisReport::from_json(&text).map_err(|e| {
        let f = Failure::from(e);
        Failure::new(f.code, format!("{}: {}", path.display(), f.message))
    })
}

fn cmd_compare(cfg: &RunConfig, a: &Path, b: &Path) -> Result<(), Failure> {
    let table = compare(&read_report(a)?, &read_report(b)?)?;
    let text = match cfg.format {
        Format::Json => table.to_json(),
        Format::Table | Format::CrosstabFlow => table.render_table(),
    };
    emit(cfg, &text)
}

fn cmd_report_render(cfg: &RunConfig, path: &Path) -> Result<(), Failure> {
    let report = read_report(path)?;
    emit(cfg, &render(&report, cfg.format.into()))
}

fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = resolve(&cli.global)?;
    match &cli.command {
        Command::Validate { dump } => cmd_validate(&cfg, dump),
        Command::Analyze { dump } => cmd_analyze(&cfg, dump),
        Command::Synth { plan, truth } => cmd_synth(&cfg, plan, truth.as_deref()),
        Command::Compare { report_a, report_b } => cmd_compare(&cfg, report_a, report_b),
        Command::ReportRender { report } => cmd_report_render(&cfg, report),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            if !f.message.is_empty() {
                eprintln!("error: {}", f.message);
            }
            ExitCode::from(f.code)
        }
    }
}
