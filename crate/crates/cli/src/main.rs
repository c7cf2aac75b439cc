use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use leafi_core::bench::{run_bench, Method, NoiseSet};
use leafi_core::enhanced::{enhance, load_enhanced, EnhanceConfig, SearchMode, SearchRequest};
use leafi_core::index::{index_dataset_path, load_index, save_index};
use leafi_core::select::{SelectionBudget, DEFAULT_THRESHOLD_FACTOR};
use leafi_core::series::{generate_randwalk, load_dataset, make_queries, save_dataset, save_queries};
use leafi_core::traingen::SplitPlan;
use leafi_core::{build_index, Error, SegmentConfig};
use log::warn;
use serde_json::json;

const SEED_ENV: &str = "LEAFI_SEED";

#[derive(Parser)]
#[command(name = "leafi", version, about = "Data series index with learned leaf filters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a z-normalized random-walk dataset.
    Gen(GenArgs),
    /// Draw noisy queries from a dataset.
    Queries(QueriesArgs),
    /// Build the summarization tree over a dataset.
    Build(BuildArgs),
    /// Train leaf filters and fit the auto-tuners.
    Enhance(EnhanceArgs),
    /// Answer queries, one JSON line each.
    Query(QueryArgs),
    /// Compare exact, epsilon and filtered search.
    Bench(BenchArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    n: usize,
    #[arg(long = "len")]
    len: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct QueriesArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    count: usize,
    /// Noise standard deviation relative to the series scale.
    #[arg(long)]
    noise: f64,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BuildArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value_t = leafi_core::index::DEFAULT_MAX_LEAF_SIZE)]
    max_leaf: usize,
    #[arg(long, default_value_t = 8)]
    segments: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EnhanceArgs {
    #[arg(long)]
    index: PathBuf,
    /// Output directory for the enhanced index.
    #[arg(long)]
    out: PathBuf,
    /// Memory available for filters; unlimited when omitted.
    #[arg(long)]
    budget_mb: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD_FACTOR)]
    threshold_factor: f64,
    #[arg(long, default_value_t = 1500)]
    global_queries: usize,
    #[arg(long, default_value_t = 500)]
    local_queries: usize,
    #[arg(long, default_value_t = 300)]
    calibration: usize,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct QueryArgs {
    #[arg(long, required_unless_present = "index", conflicts_with = "index")]
    enhanced: Option<PathBuf>,
    /// Plain index; only exact search is available.
    #[arg(long, requires = "exact")]
    index: Option<PathBuf>,
    #[arg(long)]
    queries: PathBuf,
    #[arg(long, default_value_t = 1)]
    k: usize,
    #[arg(long, conflicts_with = "target", required_unless_present = "target")]
    exact: bool,
    #[arg(long)]
    target: Option<f64>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    enhanced: PathBuf,
    /// Query set as NOISE=PATH; repeat for each noise level.
    #[arg(long = "set", required = true, value_parser = parse_set)]
    sets: Vec<(f64, PathBuf)>,
    /// Queries for tuning epsilon.
    #[arg(long)]
    validation: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "0.9,0.95,0.99")]
    targets: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "exact,epsilon,leafi", value_parser = parse_method)]
    methods: Vec<Method>,
    #[arg(long)]
    name: Option<String>,
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    json: Option<PathBuf>,
    /// Run queries concurrently; timings are then marked unreliable.
    #[arg(long)]
    parallel: bool,
}

fn parse_set(s: &str) -> Result<(f64, PathBuf), String> {
    let (noise, path) = s.split_once('=').ok_or("expected NOISE=PATH")?;
    Ok((noise.parse().map_err(|e| format!("{noise:?}: {e}"))?, PathBuf::from(path)))
}

fn parse_method(s: &str) -> Result<Method, String> {
    Method::parse(s).map_err(|e| e.to_string())
}

fn seed(explicit: Option<u64>, default: u64) -> Result<u64, Error> {
    if let Some(s) = explicit {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|e| Error::InvalidInput(format!("{SEED_ENV}={v:?}: {e}"))),
        Err(_) => Ok(default),
    }
}

fn ensure_exists(path: &Path) -> Result<(), Error> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact {
            path: path.to_path_buf(),
            reason: "no such file or directory".into(),
        })
    }
}

fn run(cmd: Command) -> Result<(), Error> {
    match cmd {
        Command::Gen(a) => {
            let data = generate_randwalk(a.n, a.len, seed(a.seed, 0)?)?;
            save_dataset(&a.out, &data)
        }
        Command::Queries(a) => {
            ensure_exists(&a.dataset)?;
            let data = load_dataset(&a.dataset)?;
            save_queries(&a.out, &make_queries(&data, a.count, a.noise, seed(a.seed, 1)?)?)
        }
        Command::Build(a) => {
            ensure_exists(&a.dataset)?;
            let data = Arc::new(load_dataset(&a.dataset)?);
            let cfg = SegmentConfig::new(data.series_len(), a.segments)?;
            let idx = build_index(data, a.max_leaf, cfg)?;
            save_index(&a.out, &idx, &a.dataset)?;
            println!("{}", json!({"leaves": idx.leaves().len(), "nodes": idx.nodes().len()}));
            Ok(())
        }
        Command::Enhance(a) => {
            ensure_exists(&a.index)?;
            let dataset = index_dataset_path(&a.index)?;
            let idx = load_index(&a.index)?;
            let mut cfg = EnhanceConfig {
                plan: SplitPlan::new(a.global_queries, a.local_queries, a.calibration)?,
                budget: SelectionBudget {
                    capacity: match a.budget_mb {
                        Some(mb) if !(mb >= 0.0) => return Err(Error::InvalidInput(format!("budget {mb} MB"))),
                        Some(mb) => (mb * 1024.0 * 1024.0) as u64,
                        None => u64::MAX,
                    },
                    a: a.threshold_factor,
                },
                seed: seed(a.seed, 0)?,
                ..EnhanceConfig::default()
            };
            if let Some(e) = a.max_epochs {
                cfg.train.max_epochs = e;
            }
            let eidx = enhance(idx, &cfg, Some((&a.out, &dataset)))?;
            if eidx.filters().is_empty() {
                warn!("no leaf filters fit the budget; searches behave like exact search");
            }
            println!(
                "{}",
                json!({
                    "filters": eidx.filters().len(),
                    "leaves": eidx.base().leaves().len(),
                    "threshold": eidx.selection().th,
                    "timings": eidx.meta().timings,
                })
            );
            Ok(())
        }
        Command::Query(a) => {
            ensure_exists(&a.queries)?;
            let queries = load_dataset(&a.queries)?;
            let mode = match a.target {
                Some(t) => SearchMode::Target(t),
                None => SearchMode::Exact,
            };
            let eidx = match &a.enhanced {
                Some(dir) => {
                    ensure_exists(dir)?;
                    Some(load_enhanced(dir)?)
                }
                None => None,
            };
            let plain = match &a.index {
                Some(p) => {
                    ensure_exists(p)?;
                    Some(load_index(p)?)
                }
                None => None,
            };
            let mut out = std::io::stdout().lock();
            for (i, q) in queries.iter().enumerate() {
                let (neighbors, stats) = match (&eidx, &plain) {
                    (Some(e), _) => {
                        let o = e.search(&SearchRequest { query: q, k: a.k, mode })?;
                        (o.neighbors, o.stats)
                    }
                    (None, Some(idx)) => {
                        let r = idx.exact_search(q, a.k)?;
                        (r.neighbors, r.stats)
                    }
                    (None, None) => unreachable!("clap requires one source"),
                };
                let line = json!({
                        "query": i,
                        "neighbors": neighbors.iter().map(|n| json!({"id": n.id, "distance": n.distance})).collect::<Vec<_>>(),
                        "pruning_ratio": stats.pruning_ratio(),
                        "leaves_searched": stats.leaves_searched,
                        "filter_pruned": stats.filter_pruned,
                        "time_us": stats.elapsed.as_secs_f64() * 1e6,
                });
                match writeln!(out, "{line}") {
                    Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => return Ok(()),
                    r => r?,
                }
            }
            Ok(())
        }
        Command::Bench(a) => {
            ensure_exists(&a.enhanced)?;
            let eidx = load_enhanced(&a.enhanced)?;
            let mut loaded = Vec::new();
            for (noise, path) in &a.sets {
                ensure_exists(path)?;
                loaded.push((*noise, leafi_core::QuerySet {
                    queries: load_dataset(path)?,
                    sources: Vec::new(),
                    noise_level: *noise,
                    seed: 0,
                }));
            }
            let validation = match &a.validation {
                Some(p) => {
                    ensure_exists(p)?;
                    Some(leafi_core::QuerySet {
                        queries: load_dataset(p)?,
                        sources: Vec::new(),
                        noise_level: f64::NAN,
                        seed: 0,
                    })
                }
                None => None,
            };
            let sets: Vec<NoiseSet> = loaded.iter().map(|(noise, queries)| NoiseSet { noise: *noise, queries }).collect();
            let name = a.name.unwrap_or_else(|| {
                a.enhanced
                    .file_name()
                    .map_or_else(|| "dataset".to_string(), |n| n.to_string_lossy().into_owned())
            });
            let report = run_bench(&name, &eidx, &sets, validation.as_ref(), &a.targets, &a.methods, a.parallel)?;
            let csv = report.to_csv();
            match &a.csv {
                Some(p) => std::fs::write(p, &csv)?,
                None => print!("{csv}"),
            }
            if let Some(p) = &a.json {
                std::fs::write(p, serde_json::to_vec_pretty(&report)?)?;
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("{}", json!({"error": "usage", "message": first}));
            eprintln!("{msg}");
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({"error": e.kind(), "message": e.to_string()}));
            ExitCode::FAILURE
        }
    }
}
