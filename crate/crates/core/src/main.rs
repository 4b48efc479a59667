use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use filterprune::accounting::{cost_report, report_compression, CostReport};
use filterprune::data::{generate_dataset, threshold_baseline, BaselineReport, DatasetManifest, GeneratorConfig};
use filterprune::harness::{
    emit_report, emit_table, evaluate, load_experiment_data, run_experiment, Architecture, ExperimentConfig,
    Format, MetricsReport, PruningPlan,
};
use filterprune::zoo::{build_resnet, load_checkpoint, save_checkpoint, ModelGraph};
use filterprune::{Error, Result};

#[derive(Parser)]
#[command(name = "filterprune", version, about = "Residual CNN training, filter pruning and cost accounting")]
struct Cli {
    /// Seed for every random choice; overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Hard,
    Asfp,
}

#[derive(Clone, Copy, ValueEnum)]
enum OutFormat {
    Json,
    Table,
}

impl From<OutFormat> for Format {
    fn from(f: OutFormat) -> Format {
        match f {
            OutFormat::Json => Format::Json,
            OutFormat::Table => Format::Table,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset (`default` uses the built-in generator config).
    GenData { config: String, out_dir: PathBuf },
    /// Cross-validated training without pruning.
    Train {
        config: PathBuf,
        #[arg(long, default_value = "results")]
        out: PathBuf,
    },
    /// Cross-validated training followed by hard or soft filter pruning.
    Prune {
        config: PathBuf,
        #[arg(long, value_enum)]
        method: Method,
        #[arg(long, default_value = "results")]
        out: PathBuf,
    },
    /// Accuracy and confusion counts of a checkpoint on every manifest record.
    Eval { checkpoint: PathBuf, manifest: PathBuf },
    /// Parameters and FLOPs of a config's architecture or of a checkpoint.
    Count {
        source: PathBuf,
        #[arg(long, value_enum, default_value = "json")]
        format: OutFormat,
    },
    /// Windowed intensity-threshold classifier swept over thresholds.
    Baseline {
        manifest: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "2,4,8,16")]
        windows: Vec<usize>,
        /// Thresholds on the 0..255 scale (default: 0 to 80 in steps of 0.25).
        #[arg(long, value_delimiter = ',')]
        thresholds: Option<Vec<f64>>,
    },
    /// Render the metrics reports found under a results directory.
    Report {
        results_dir: PathBuf,
        #[arg(long, value_enum, default_value = "table")]
        format: OutFormat,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.render().to_string();
            let head = msg.split("\n\nUsage").next().unwrap_or_default();
            let words: Vec<&str> = head.trim_start_matches("error: ").split_whitespace().collect();
            error_line("usage", &words.join(" "));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(out) => {
            print!("{out}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            error_line(e.kind(), &e.to_string());
            ExitCode::from(if e.kind() == "usage" { 2 } else { 1 })
        }
    }
}

fn error_line(kind: &str, message: &str) {
    let line = serde_json::json!({ "error": { "kind": kind, "message": message } });
    eprintln!("{line}");
}

fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::GenData { config, out_dir } => gen_data(&config, &out_dir, cli.seed.unwrap_or(0)),
        Command::Train { config, out } => experiment(&config, None, &out, cli.seed),
        Command::Prune { config, method, out } => experiment(&config, Some(method), &out, cli.seed),
        Command::Eval { checkpoint, manifest } => eval(&checkpoint, &manifest),
        Command::Count { source, format } => count(&source, format),
        Command::Baseline {
            manifest,
            windows,
            thresholds,
        } => baseline(&manifest, &windows, thresholds),
        Command::Report { results_dir, format } => report(&results_dir, format.into()),
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct GenSummary<'a> {
    out_dir: &'a Path,
    seed: u64,
    images: usize,
    defective: usize,
    non_defective: usize,
}

fn gen_data(config: &str, out_dir: &Path, seed: u64) -> Result<String> {
    let cfg: GeneratorConfig = if config == "default" {
        GeneratorConfig::default()
    } else {
        let text = read(Path::new(config))?;
        serde_json::from_slice(&text).map_err(|e| Error::Config(format!("{config}: {e}")))?
    };
    let m = generate_dataset(&cfg, seed, out_dir)?;
    let summary = GenSummary {
        out_dir,
        seed,
        images: m.len(),
        defective: m.count(filterprune::data::Label::Defective),
        non_defective: m.count(filterprune::data::Label::NonDefective),
    };
    Ok(serde_json::to_string_pretty(&summary)? + "\n")
}

fn experiment(path: &Path, method: Option<Method>, out: &Path, seed: Option<u64>) -> Result<String> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.pruning = match (method, &cfg.pruning) {
        (None, _) => PruningPlan::None,
        (Some(Method::Hard), p @ PruningPlan::Hard { .. }) | (Some(Method::Asfp), p @ PruningPlan::Asfp { .. }) => {
            p.clone()
        }
        (Some(Method::Hard), _) => PruningPlan::default_hard(),
        (Some(Method::Asfp), _) => PruningPlan::default_asfp(),
    };
    cfg.validate()?;
    create_dir(out)?;
    let data = load_experiment_data(&cfg)?;
    let (report, models) = run_experiment(&cfg, &data, Some(out), &mut |line| eprintln!("{line}"))?;
    let text = emit_report(&report, Format::Json);
    write(&out.join("report.json"), text.as_bytes())?;
    write(&out.join("model.ckpt"), &save_checkpoint(&models.baseline)?)?;
    if let Some(pruned) = &models.pruned {
        write(&out.join("pruned.ckpt"), &save_checkpoint(pruned)?)?;
    }
    let _ = fs::remove_file(out.join("partial.json"));
    Ok(text)
}

fn eval(checkpoint: &Path, manifest: &Path) -> Result<String> {
    let model = load_checkpoint(&read(checkpoint)?, None)?;
    let m = DatasetManifest::read(manifest)?;
    let [c, h, w] = model.meta().input_shape;
    if c != 1 || h != w {
        return Err(Error::Usage(format!("checkpoint expects {c}x{h}x{w} input; datasets are square grayscale")));
    }
    let data = filterprune::data::load_dataset(&m, h)?;
    let idx: Vec<usize> = (0..data.images.len()).collect();
    let e = evaluate(&model, &data, &idx)?;
    Ok(serde_json::to_string_pretty(&e)? + "\n")
}

/// A config file, a bare architecture, or a checkpoint.
fn count_source(path: &Path) -> Result<(ModelGraph, Option<ModelGraph>)> {
    let bytes = read(path)?;
    if let Ok(value) = serde_json::from_slice::<serde_json::Value>(&bytes) {
        let arch: Architecture = match value.get("architecture") {
            Some(a) => serde_json::from_value(a.clone()),
            None => serde_json::from_value(value),
        }
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let model = build_resnet(arch.depth, arch.width_scale, arch.input_shape(), arch.num_classes, 0)?;
        return Ok((model, None));
    }
    let model = load_checkpoint(&bytes, None)?;
    let meta = model.meta();
    let reference = match meta.depth {
        Some(d) => Some(build_resnet(d, meta.width_scale, meta.input_shape, meta.num_classes, 0)?),
        None => None,
    };
    Ok((model, reference))
}

fn count(path: &Path, format: OutFormat) -> Result<String> {
    let (model, reference) = count_source(path)?;
    let input = model.meta().input_shape;
    let mut report: CostReport = cost_report(&model, input)?;
    if let Some(r) = reference {
        let base = cost_report(&r, input)?;
        if base.totals != report.totals {
            report = report_compression(&base, &report);
        }
    }
    Ok(match format {
        OutFormat::Json => report.to_json(),
        OutFormat::Table => report.to_table(),
    })
}

#[derive(Serialize)]
struct BestBaseline {
    window: usize,
    threshold: f64,
    accuracy: f64,
}

#[derive(Serialize)]
struct BaselineSummary {
    records: usize,
    best: Option<BestBaseline>,
    windows: Vec<BaselineReport>,
}

fn baseline(manifest: &Path, windows: &[usize], thresholds: Option<Vec<f64>>) -> Result<String> {
    let m = DatasetManifest::read(manifest)?;
    let thresholds = thresholds.unwrap_or_else(|| (0..=320).map(|i| i as f64 * 0.25).collect());
    if windows.is_empty() {
        return Err(Error::Usage("no windows given".into()));
    }
    let mut reports = Vec::with_capacity(windows.len());
    for &w in windows {
        reports.push(threshold_baseline(&m, w, &thresholds)?);
    }
    let best = reports
        .iter()
        .fold(None::<&BaselineReport>, |b, r| match b {
            Some(b) if b.best_accuracy >= r.best_accuracy => Some(b),
            _ => Some(r),
        })
        .map(|r| BestBaseline {
            window: r.window,
            threshold: r.best_threshold,
            accuracy: r.best_accuracy,
        });
    let summary = BaselineSummary {
        records: m.len(),
        best,
        windows: reports,
    };
    Ok(serde_json::to_string_pretty(&summary)? + "\n")
}

fn collect_reports(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for e in entries {
        let p = e
            .map_err(|e| Error::io(dir, e))?
            .path();
        if p.is_dir() {
            collect_reports(&p, out)?;
        } else if p.file_name().is_some_and(|n| n == "report.json") {
            out.push(p);
        }
    }
    Ok(())
}

fn report(dir: &Path, format: Format) -> Result<String> {
    let mut paths = Vec::new();
    collect_reports(dir, &mut paths)?;
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Input(format!("no report.json under {}", dir.display())));
    }
    let mut reports = Vec::with_capacity(paths.len());
    for p in &paths {
        let r: MetricsReport = serde_json::from_slice(&read(p)?)
            .map_err(|e| Error::Format(format!("{}: {e}", p.display())))?;
        reports.push(r);
    }
    Ok(match format {
        Format::Table => emit_table(&reports),
        Format::Json if reports.len() == 1 => emit_report(&reports[0], Format::Json),
        Format::Json => serde_json::to_string_pretty(&reports)? + "\n",
    })
}
