use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use evidal_core::active::{run_active_learning, Regime, RunEvent, RunKey, RunRecord, Sampler};
use evidal_core::config::ExperimentConfig;
use evidal_core::data::{generate, Dataset, Split};
use evidal_core::evidential::Aggregation;
use evidal_core::losses::Method;
use evidal_core::metrics::{emit_reports, summarize, MeanStd};
use serde::{Deserialize, Serialize};

const OUT_ENV: &str = "EVIDAL_OUT";

#[derive(Parser)]
#[command(
    name = "evidal",
    version,
    about = "Evidential semi-supervised active learning experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset file
    GenData(CommonArgs),
    /// Run the annotation protocol for every seed
    Run(RunArgs),
    /// Aggregate completed runs into tables
    Report(ReportArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// TOML experiment configuration
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (default: $EVIDAL_OUT or ./runs)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dataset file to read (run) or write (gen-data)
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    method: Option<Method>,
    #[arg(long)]
    sampler: Option<Sampler>,
    #[arg(long)]
    regime: Option<Regime>,
    /// Comma-separated seed list
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Keep sampling randomly past the first budget until every class has a positive
    #[arg(long)]
    enforce_class_coverage: bool,
    #[arg(long)]
    aggregation: Option<Aggregation>,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directories (searched recursively for completed runs)
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    /// Output directory for the aggregate tables
    #[arg(long)]
    out: Option<PathBuf>,
    /// Baseline run for gains, as method+sampler
    #[arg(long, default_value = "esup+random")]
    baseline: RunKey,
}

/// Failure classes mapped onto exit codes.
enum Failure {
    Usage(String),
    Runtime(String),
}

impl Failure {
    fn runtime(e: impl std::fmt::Display) -> Self {
        Failure::Runtime(e.to_string())
    }
}

/// What a completed seed directory holds besides the logs.
#[derive(Serialize, Deserialize)]
struct RunArtifact {
    record: RunRecord,
    test_prevalence: Vec<f64>,
}

#[derive(Serialize)]
struct Provenance<'a> {
    tool: &'static str,
    version: &'static str,
    seed: Option<u64>,
    data: Option<&'a Path>,
    config: &'a ExperimentConfig,
}

fn output_root(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig, Failure> {
    let Some(path) = path else {
        return Ok(ExperimentConfig::default());
    };
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
    toml::from_str(&text)
        .map_err(|e| Failure::Usage(format!("invalid config {}: {e}", path.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value).map_err(Failure::runtime)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn gen_data(args: CommonArgs) -> Result<(), Failure> {
    let cfg = load_config(args.config.as_deref())?;
    cfg.synthetic
        .validate()
        .map_err(|e| Failure::Usage(format!("synthetic: {e}")))?;
    let path = match args.data {
        Some(p) => p,
        None => output_root(args.out).join("dataset.csv"),
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(Failure::runtime)?;
    }
    let data = generate(&cfg.synthetic).map_err(Failure::runtime)?;
    data.save(&path).map_err(Failure::runtime)?;
    let mut provenance = path.clone().into_os_string();
    provenance.push(".provenance.json");
    #[derive(Serialize)]
    struct DataProvenance<'a> {
        tool: &'static str,
        version: &'static str,
        spec: &'a evidal_core::data::SyntheticSpec,
    }
    write_json(
        Path::new(&provenance),
        &DataProvenance {
            tool: "evidal",
            version: env!("CARGO_PKG_VERSION"),
            spec: &cfg.synthetic,
        },
    )?;
    log::info!("wrote {} rows to {}", data.len(), path.display());
    Ok(())
}

fn apply_flags(mut cfg: ExperimentConfig, args: &RunArgs) -> ExperimentConfig {
    if let Some(m) = args.method {
        cfg.method = m;
    }
    if let Some(s) = args.sampler {
        cfg.sampler = s;
    }
    if let Some(r) = args.regime {
        cfg.regime = r;
    }
    if let Some(seeds) = &args.seeds {
        cfg.seeds = seeds.clone();
    }
    if args.enforce_class_coverage {
        cfg.enforce_class_coverage = true;
    }
    if let Some(a) = args.aggregation {
        cfg.aggregation = a;
    }
    if let Some(d) = &args.common.data {
        cfg.data = Some(d.clone());
    }
    if let Some(o) = &args.common.out {
        cfg.out_dir = Some(o.clone());
    }
    cfg
}

fn run(args: RunArgs) -> Result<(), Failure> {
    let cfg = apply_flags(load_config(args.common.config.as_deref())?, &args).resolved();
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let data = match &cfg.data {
        Some(path) => {
            Dataset::load(path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?
        }
        None => generate(&cfg.synthetic).map_err(Failure::runtime)?,
    };
    let key = RunKey {
        method: cfg.method,
        sampler: cfg.sampler,
    };
    let root = output_root(cfg.out_dir.clone()).join(key.to_string());
    fs::create_dir_all(&root).map_err(Failure::runtime)?;
    let effective = toml::to_string(&cfg).map_err(Failure::runtime)?;
    fs::write(root.join("config.toml"), &effective).map_err(Failure::runtime)?;

    let test_prevalence = data.prevalence(&data.indices(Split::Test));
    let mut records = Vec::new();
    for &seed in &cfg.seeds {
        let dir = root.join(format!("seed-{seed}"));
        fs::create_dir_all(&dir).map_err(Failure::runtime)?;
        fs::write(dir.join("config.toml"), &effective).map_err(Failure::runtime)?;
        write_json(
            &dir.join("provenance.json"),
            &Provenance {
                tool: "evidal",
                version: env!("CARGO_PKG_VERSION"),
                seed: Some(seed),
                data: cfg.data.as_deref(),
                config: &cfg,
            },
        )?;
        let active = cfg
            .active_config(seed)
            .map_err(|e| Failure::Usage(e.to_string()))?;
        let mut epochs =
            BufWriter::new(File::create(dir.join("epochs.jsonl")).map_err(Failure::runtime)?);
        let mut rounds =
            BufWriter::new(File::create(dir.join("rounds.jsonl")).map_err(Failure::runtime)?);
        let mut io_error = None;
        let result = run_active_learning(&active, &data, &mut |event| {
            let written = match event {
                RunEvent::Epoch(r) => serde_json::to_string(r).map(|l| writeln!(epochs, "{l}")),
                RunEvent::Round(r) => serde_json::to_string(r)
                    .map(|l| writeln!(rounds, "{l}").and_then(|_| rounds.flush())),
                RunEvent::Pools(_) => Ok(Ok(())),
            };
            if let Ok(Err(e)) | Err(e) = written.map_err(std::io::Error::other) {
                io_error.get_or_insert(e);
            }
        });
        epochs.flush().map_err(Failure::runtime)?;
        rounds.flush().map_err(Failure::runtime)?;
        if let Some(e) = io_error {
            return Err(Failure::Runtime(format!(
                "writing logs in {}: {e}",
                dir.display()
            )));
        }
        let record = result.map_err(|e| Failure::Runtime(format!("seed {seed}: {e}")))?;
        write_json(
            &dir.join("run.json"),
            &RunArtifact {
                record: record.clone(),
                test_prevalence: test_prevalence.clone(),
            },
        )?;
        records.push(record);
    }
    let summary = summarize(&records, &key).map_err(Failure::runtime)?;
    write_json(&root.join("summary.json"), &summary)?;
    for run in &summary.runs {
        if let Some(last) = run.budgets.last() {
            println!(
                "{}+{} at {:.1}%: macro AUROC {}, macro AUPRC {}",
                run.method,
                run.sampler,
                100.0 * last.budget,
                fmt_mean_std(&last.macro_auroc),
                fmt_mean_std(&last.macro_auprc)
            );
        }
    }
    Ok(())
}

fn fmt_mean_std(m: &MeanStd) -> String {
    format!("{:.4} ± {:.4} (n={})", m.mean, m.std, m.n)
}

fn find_runs(dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    let candidate = dir.join("run.json");
    if candidate.is_file() {
        out.push(candidate);
        return Ok(());
    }
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    entries.sort();
    for e in entries {
        find_runs(&e, out)?;
    }
    Ok(())
}

fn report(args: ReportArgs) -> Result<(), Failure> {
    let mut files = Vec::new();
    for dir in &args.runs {
        find_runs(dir, &mut files)
            .map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))?;
    }
    if files.is_empty() {
        return Err(Failure::Runtime("no completed runs found".into()));
    }
    let mut artifacts: Vec<(PathBuf, RunArtifact)> = Vec::new();
    for file in files {
        let text = fs::read_to_string(&file)
            .map_err(|e| Failure::Runtime(format!("{}: {e}", file.display())))?;
        let artifact: RunArtifact = serde_json::from_str(&text)
            .map_err(|e| Failure::Runtime(format!("{}: {e}", file.display())))?;
        artifacts.push((file, artifact));
    }
    let (ref_path, reference) = &artifacts[0];
    let grid = |a: &RunArtifact| -> Vec<f64> {
        a.record.rounds.iter().map(|r| r.budget_fraction).collect()
    };
    for (path, a) in &artifacts[1..] {
        if a.test_prevalence.len() != reference.test_prevalence.len() {
            return Err(Failure::Runtime(format!(
                "{} has {} classes, {} has {}",
                path.display(),
                a.test_prevalence.len(),
                ref_path.display(),
                reference.test_prevalence.len()
            )));
        }
        if grid(a) != grid(reference) {
            return Err(Failure::Runtime(format!(
                "budget grid of {} differs from {}: {:?} vs {:?}",
                path.display(),
                ref_path.display(),
                grid(a),
                grid(reference)
            )));
        }
    }
    let out = args.out.unwrap_or_else(|| output_root(None).join("report"));
    let records: Vec<RunRecord> = artifacts.iter().map(|(_, a)| a.record.clone()).collect();
    let summary = emit_reports(&records, &args.baseline, &reference.test_prevalence, &out)
        .map_err(Failure::runtime)?;
    for run in &summary.runs {
        let last = run.budgets.last().expect("runs have rounds");
        let gain = run
            .final_auroc_gain
            .map_or_else(|| "n/a".to_string(), |g| format!("{g:+.2} pts"));
        println!(
            "{}+{}: final macro AUROC {}, gain vs {}: {}",
            run.method,
            run.sampler,
            fmt_mean_std(&last.macro_auroc),
            summary.baseline,
            gain
        );
    }
    println!("tables written to {}", out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(args) => gen_data(args),
        Command::Run(args) => run(args),
        Command::Report(args) => report(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
