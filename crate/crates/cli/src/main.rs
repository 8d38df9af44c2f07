use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use edgecost::model_io::{default_cache_dir, fetch_model, registry, zoo, ModelIoError};
use edgecost::report::{
    layers_csv, render_analyze_text, render_compare_text, render_svg, summary_csv, AnalyzeReport,
    CompareReport, ModelFailure, ModelSummaryRow, SCHEMA_VERSION,
};
use edgecost::roofline::{builtin_profiles, load_profile, RooflineError};
use edgecost::{analyze_file, Analysis, AnalysisError, AnalysisOptions, DType};

const EXIT_ANALYSIS: u8 = 1;
const EXIT_PARTIAL: u8 = 2;
const EXIT_USAGE: u8 = 64;

#[derive(Parser, Debug)]
#[command(name = "edgecost", version, about = "Static compute and memory-traffic analysis of ONNX CNNs")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalArgs {
    /// Element type used for all byte counts.
    #[arg(long, global = true, default_value = "fp32")]
    dtype: DType,
    /// Skip batch-norm folding and activation fusion.
    #[arg(long, global = true)]
    no_fusion: bool,
    /// Charge one read per consumer of each intermediate.
    #[arg(long, global = true)]
    per_consumer_reads: bool,
    /// Network input shape, e.g. 1,3,224,224.
    #[arg(long, global = true, value_name = "N,C,H,W", value_parser = parse_shape)]
    input_shape: Option<InputShape>,
    /// Builtin profile name or JSON profile file.
    #[arg(long, global = true)]
    profile: Option<String>,
    /// Model cache directory (default: $EDGECOST_CACHE or ~/.cache/edgecost).
    #[arg(long, global = true)]
    cache_dir: Option<PathBuf>,
    /// Add compute and transfer time instead of overlapping them.
    #[arg(long, global = true)]
    no_overlap: bool,
}

#[derive(Debug, Clone)]
struct InputShape(Vec<i64>);

fn parse_shape(s: &str) -> Result<InputShape, String> {
    let dims = s
        .split([',', 'x'])
        .map(|d| d.trim().parse::<i64>().map_err(|e| format!("'{d}': {e}")))
        .collect::<Result<Vec<_>, _>>()?;
    if dims.is_empty() || dims.iter().any(|&d| d < 1) {
        return Err(format!("'{s}' must be positive integers separated by commas"));
    }
    Ok(InputShape(dims))
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Per-layer and total cost of one model (file path or registry name).
    Analyze {
        model: String,
        #[arg(long, conflicts_with = "csv")]
        json: bool,
        #[arg(long)]
        csv: bool,
    },
    /// Side-by-side totals for several models.
    Compare {
        #[arg(required = true)]
        models: Vec<String>,
        #[arg(long, conflicts_with = "csv")]
        json: bool,
        #[arg(long)]
        csv: bool,
        /// Write a log-log FLOPs vs bytes scatter plot here.
        #[arg(long, value_name = "FILE")]
        svg: Option<PathBuf>,
        /// Worker threads (default: available cores).
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Download registry models into the cache.
    Fetch {
        names: Vec<String>,
        /// Fetch every downloadable registry model.
        #[arg(long, conflicts_with = "names")]
        all: bool,
        /// Re-hash cached files against the manifest.
        #[arg(long)]
        verify: bool,
        /// Print the registry and exit.
        #[arg(long, conflicts_with_all = ["names", "all"])]
        list: bool,
    },
    /// List builtin hardware profiles.
    Profiles {
        #[arg(long)]
        json: bool,
    },
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Analysis(String),
}

impl From<AnalysisError> for CliError {
    fn from(e: AnalysisError) -> Self {
        CliError::Analysis(e.to_string())
    }
}

impl From<ModelIoError> for CliError {
    fn from(e: ModelIoError) -> Self {
        CliError::Analysis(e.to_string())
    }
}

impl From<RooflineError> for CliError {
    fn from(e: RooflineError) -> Self {
        match e {
            RooflineError::UnknownProfile(_) => CliError::Usage(e.to_string()),
            e => CliError::Analysis(e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(EXIT_USAGE),
            };
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(CliError::Analysis(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_ANALYSIS)
        }
    }
}

fn options(g: &GlobalArgs) -> Result<AnalysisOptions, CliError> {
    Ok(AnalysisOptions {
        dtype: g.dtype,
        fusion: !g.no_fusion,
        per_consumer_reads: g.per_consumer_reads,
        input_shape: g.input_shape.as_ref().map(|s| s.0.clone()),
        profile: g.profile.as_deref().map(load_profile).transpose()?,
        overlap: !g.no_overlap,
        ..AnalysisOptions::default()
    })
}

fn cache_dir(g: &GlobalArgs) -> PathBuf {
    g.cache_dir.clone().unwrap_or_else(default_cache_dir)
}

/// A model argument is a file when it names an existing path or ends in
/// `.onnx`; otherwise it is looked up in the registry and fetched.
fn resolve(model: &str, cache: &Path) -> Result<PathBuf, ModelIoError> {
    let path = Path::new(model);
    if path.exists() || path.extension().is_some_and(|e| e == "onnx") {
        return Ok(path.to_path_buf());
    }
    fetch_model(model, cache)
}

fn analyze_one(model: &str, cache: &Path, opts: &AnalysisOptions) -> Result<Analysis, CliError> {
    let path = resolve(model, cache)?;
    let mut analysis = analyze_file(&path, opts)?;
    if zoo::lookup(model).is_some() {
        analysis.model = model.to_string();
    }
    Ok(analysis)
}

fn run(cli: Cli) -> Result<u8, CliError> {
    let g = &cli.global;
    match &cli.command {
        Command::Analyze { model, json, csv } => {
            let opts = options(g)?;
            let analysis = analyze_one(model, &cache_dir(g), &opts)?;
            let report = AnalyzeReport::new(&analysis);
            if *json {
                println!("{}", to_json(&report));
            } else if *csv {
                print!("{}", layers_csv(&report));
            } else {
                print!("{}", render_analyze_text(&report));
            }
            Ok(0)
        }
        Command::Compare { models, json, csv, svg, jobs } => {
            if models.len() < 2 {
                return Err(CliError::Usage("compare needs at least two models".into()));
            }
            let opts = options(g)?;
            let results = analyze_all(models, &cache_dir(g), &opts, *jobs);
            let mut rows = vec![];
            let mut errors = vec![];
            for (model, r) in models.iter().zip(results) {
                match r {
                    Ok(a) => rows.push(ModelSummaryRow::from_analysis(&a)),
                    Err(e) => errors.push(ModelFailure {
                        model: model.clone(),
                        error: match e {
                            CliError::Usage(m) | CliError::Analysis(m) => m,
                        },
                    }),
                }
            }
            let report = CompareReport {
                schema_version: SCHEMA_VERSION,
                dtype: opts.dtype,
                fusion: opts.fusion,
                per_consumer_reads: opts.per_consumer_reads,
                profile: opts.profile.as_ref().map(|p| p.name.clone()),
                models: rows,
                errors,
            };
            if let Some(path) = svg {
                std::fs::write(path, render_svg(&report.models))
                    .map_err(|e| CliError::Analysis(format!("cannot write {}: {e}", path.display())))?;
            }
            if *json {
                println!("{}", to_json(&report));
            } else if *csv {
                print!("{}", summary_csv(&report.models));
                for e in &report.errors {
                    eprintln!("error: {}: {}", e.model, e.error);
                }
            } else {
                print!("{}", render_compare_text(&report));
            }
            Ok(if report.errors.is_empty() { 0 } else { EXIT_PARTIAL })
        }
        Command::Fetch { list: true, .. } => {
            for e in registry() {
                println!(
                    "{:<16} {:<26} {}",
                    e.name,
                    e.description,
                    e.url.as_deref().unwrap_or("(not hosted; supply a local file)")
                );
            }
            Ok(0)
        }
        Command::Fetch { names, all, verify, .. } => {
            let cache = cache_dir(g);
            let names: Vec<String> = if *all {
                registry()
                    .into_iter()
                    .filter(|e| e.url.is_some())
                    .map(|e| e.name.to_string())
                    .collect()
            } else if names.is_empty() {
                return Err(CliError::Usage("name at least one model or pass --all".into()));
            } else {
                names.clone()
            };
            let mut failed = false;
            for name in &names {
                match fetch_model(name, &cache) {
                    Ok(path) if *verify => match zoo::verify_cached(name, &cache) {
                        Ok(true) => println!("{name}\t{}\tok", path.display()),
                        Ok(false) => {
                            failed = true;
                            println!("{name}\t{}\tDIGEST MISMATCH", path.display());
                        }
                        Err(e) => {
                            failed = true;
                            eprintln!("error: {name}: {e}");
                        }
                    },
                    Ok(path) => println!("{name}\t{}", path.display()),
                    Err(e) => {
                        failed = true;
                        eprintln!("error: {name}: {e}");
                    }
                }
            }
            Ok(if failed { EXIT_ANALYSIS } else { 0 })
        }
        Command::Profiles { json } => {
            let profiles = builtin_profiles();
            if *json {
                println!("{}", to_json(&profiles));
            } else {
                for p in profiles {
                    println!(
                        "{:<12} {:>9.1} GFLOP/s {:>8.1} GB/s  ridge {:>7.2} FLOPs/byte  {}",
                        p.name,
                        p.peak_gflops,
                        p.bandwidth_gbps,
                        p.ridge_intensity(),
                        p.description.as_deref().unwrap_or("")
                    );
                }
            }
            Ok(0)
        }
    }
}

fn to_json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("report types serialize")
}

/// Analyzes models on worker threads; results come back in input order.
fn analyze_all(
    models: &[String],
    cache: &Path,
    opts: &AnalysisOptions,
    jobs: Option<usize>,
) -> Vec<Result<Analysis, CliError>> {
    let workers = jobs
        .or_else(|| std::thread::available_parallelism().ok().map(|n| n.get()))
        .unwrap_or(1)
        .clamp(1, models.len().max(1));
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<Analysis, CliError>>>> =
        Mutex::new((0..models.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(model) = models.get(i) else { break };
                let r = analyze_one(model, cache, opts);
                slots.lock().unwrap()[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("every model analyzed"))
        .collect()
}
