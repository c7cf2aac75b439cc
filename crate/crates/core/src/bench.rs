//! Evaluation harness: exact search, the epsilon-approximate baseline and
//! filter-enhanced search, scored against the exact answers.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::enhanced::{EnhancedIndex, SearchMode, SearchOutcome, SearchRequest};
use crate::error::{Error, Result};
use crate::index::{Index, Neighbor, Traversal};
use crate::series::QuerySet;

pub const CSV_HEADER: &str =
    "dataset,method,target,noise,queries,mean_recall,mean_pruning_ratio,mean_leaves_searched,mean_time_us,median_time_us";
pub const DEFAULT_RECALL_FOR_EPSILON: f64 = 0.99;
pub const DISTANCE_TIE_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsilonConfig {
    pub epsilon: f64,
}

impl EpsilonConfig {
    pub fn new(epsilon: f64) -> Result<Self> {
        if !(epsilon >= 0.0 && epsilon.is_finite()) {
            return Err(Error::invalid(format!("epsilon must be finite and >= 0, got {epsilon}")));
        }
        Ok(EpsilonConfig { epsilon })
    }
}

/// Exact search with nodes pruned once `lower bound > bsf / (1 + epsilon)`.
pub fn epsilon_search(index: &Index, q: &[f32], k: usize, eps: EpsilonConfig) -> Result<SearchOutcome> {
    EpsilonConfig::new(eps.epsilon)?;
    let t = Traversal {
        lb_scale: 1.0 / (1.0 + eps.epsilon),
        ..Traversal::exact()
    };
    let r = index.checked_traverse(q, k, &t)?;
    Ok(SearchOutcome {
        neighbors: r.neighbors,
        stats: r.stats,
    })
}

/// Grid `1.0, 1.5, ..., 7.0`.
pub fn epsilon_grid() -> Vec<f64> {
    (0..=12).map(|i| 1.0 + 0.5 * i as f64).collect()
}

/// 1 when `got` names the exact answer's id, or its distance ties it.
pub fn recall_at_1(got: &[Neighbor], exact: &[Neighbor]) -> f64 {
    match (got.first(), exact.first()) {
        (Some(g), Some(e)) if g.id == e.id => 1.0,
        (Some(g), Some(e)) if (g.distance - e.distance).abs() <= DISTANCE_TIE_TOLERANCE * e.distance.abs() => 1.0,
        _ => 0.0,
    }
}

/// Largest grid value whose validation recall is at least `min_recall`;
/// 1.0 when none qualifies.
pub fn tune_epsilon(index: &Index, validation: &QuerySet, min_recall: f64) -> Result<f64> {
    let exact: Vec<Vec<Neighbor>> = (0..validation.len())
        .map(|i| index.exact_search(validation.query(i), 1).map(|r| r.neighbors))
        .collect::<Result<_>>()?;
    let mut best = None;
    for eps in epsilon_grid() {
        let cfg = EpsilonConfig::new(eps)?;
        let mut hits = 0.0;
        for (i, e) in exact.iter().enumerate() {
            hits += recall_at_1(&epsilon_search(index, validation.query(i), 1, cfg)?.neighbors, e);
        }
        if hits / validation.len() as f64 >= min_recall {
            best = Some(eps);
        }
    }
    Ok(best.unwrap_or(1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Exact,
    Epsilon,
    Leafi,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Exact => "exact",
            Method::Epsilon => "epsilon",
            Method::Leafi => "leafi",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(Method::Exact),
            "epsilon" => Ok(Method::Epsilon),
            "leafi" => Ok(Method::Leafi),
            other => Err(Error::invalid(format!("unknown method {other:?}"))),
        }
    }
}

/// Per-query measurements for one method.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryEval {
    pub neighbors: Vec<Neighbor>,
    pub recall: f64,
    pub pruning_ratio: f64,
    pub leaves_searched: usize,
    pub time_us: f64,
}

pub fn exact_answers(index: &Index, queries: &QuerySet) -> Result<Vec<Vec<Neighbor>>> {
    (0..queries.len())
        .map(|i| index.exact_search(queries.query(i), 1).map(|r| r.neighbors))
        .collect()
}

fn score(outcome: SearchOutcome, exact: &[Neighbor]) -> QueryEval {
    QueryEval {
        recall: recall_at_1(&outcome.neighbors, exact),
        pruning_ratio: outcome.stats.pruning_ratio(),
        leaves_searched: outcome.stats.leaves_searched,
        time_us: outcome.stats.elapsed.as_secs_f64() * 1e6,
        neighbors: outcome.neighbors,
    }
}

/// Runs `search` on every query and scores it against `exact`.
pub fn evaluate(
    queries: &QuerySet,
    exact: &[Vec<Neighbor>],
    parallel: bool,
    search: &(dyn Fn(&[f32]) -> Result<SearchOutcome> + Sync),
) -> Result<Vec<QueryEval>> {
    let one = |i: usize| search(queries.query(i)).map(|o| score(o, &exact[i]));
    if parallel {
        (0..queries.len()).into_par_iter().map(one).collect()
    } else {
        (0..queries.len()).map(one).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub dataset: String,
    pub method: Method,
    pub target: f64,
    pub noise: f64,
    pub queries: usize,
    pub mean_recall: f64,
    pub mean_pruning_ratio: f64,
    pub mean_leaves_searched: f64,
    pub mean_time_us: f64,
    pub median_time_us: f64,
}

impl BenchRow {
    fn from_evals(dataset: &str, method: Method, target: f64, noise: f64, evals: &[QueryEval]) -> Self {
        let n = evals.len().max(1) as f64;
        let mut times: Vec<f64> = evals.iter().map(|e| e.time_us).collect();
        times.sort_by(f64::total_cmp);
        let median = match times.len() {
            0 => 0.0,
            l if l % 2 == 1 => times[l / 2],
            l => 0.5 * (times[l / 2 - 1] + times[l / 2]),
        };
        BenchRow {
            dataset: dataset.to_string(),
            method,
            target,
            noise,
            queries: evals.len(),
            mean_recall: evals.iter().map(|e| e.recall).sum::<f64>() / n,
            mean_pruning_ratio: evals.iter().map(|e| e.pruning_ratio).sum::<f64>() / n,
            mean_leaves_searched: evals.iter().map(|e| e.leaves_searched as f64).sum::<f64>() / n,
            mean_time_us: times.iter().sum::<f64>() / n,
            median_time_us: median,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub dataset: String,
    pub methods: Vec<Method>,
    pub targets: Vec<f64>,
    pub noise_levels: Vec<f64>,
    pub epsilon: Option<f64>,
    pub filters: usize,
    pub parallel: bool,
    /// Timing columns are not comparable when queries ran concurrently.
    pub timing_reliable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                r.dataset,
                r.method.name(),
                r.target,
                r.noise,
                r.queries,
                r.mean_recall,
                r.mean_pruning_ratio,
                r.mean_leaves_searched,
                r.mean_time_us,
                r.median_time_us
            );
        }
        out
    }

    pub fn parse_csv(text: &str) -> Result<Vec<BenchRow>> {
        let mut lines = text.lines();
        if lines.next() != Some(CSV_HEADER) {
            return Err(Error::invalid("unexpected CSV header"));
        }
        lines
            .filter(|l| !l.is_empty())
            .map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                if f.len() != 10 {
                    return Err(Error::invalid(format!("expected 10 fields: {l}")));
                }
                let num = |s: &str| s.parse::<f64>().map_err(|e| Error::invalid(format!("{s:?}: {e}")));
                Ok(BenchRow {
                    dataset: f[0].to_string(),
                    method: Method::parse(f[1])?,
                    target: num(f[2])?,
                    noise: num(f[3])?,
                    queries: f[4].parse().map_err(|e| Error::invalid(format!("{:?}: {e}", f[4])))?,
                    mean_recall: num(f[5])?,
                    mean_pruning_ratio: num(f[6])?,
                    mean_leaves_searched: num(f[7])?,
                    mean_time_us: num(f[8])?,
                    median_time_us: num(f[9])?,
                })
            })
            .collect()
    }
}

/// A labelled query set.
pub struct NoiseSet<'a> {
    pub noise: f64,
    pub queries: &'a QuerySet,
}

/// One row per (query set, method, target) in that order. Exact and epsilon
/// rows do not depend on the target and are repeated for each.
pub fn run_bench(
    dataset: &str,
    eidx: &EnhancedIndex,
    sets: &[NoiseSet<'_>],
    validation: Option<&QuerySet>,
    targets: &[f64],
    methods: &[Method],
    parallel: bool,
) -> Result<BenchReport> {
    if targets.is_empty() || methods.is_empty() || sets.is_empty() {
        return Err(Error::invalid("need at least one target, method and query set"));
    }
    if let Some(t) = targets.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::invalid(format!("target {t} outside [0, 1]")));
    }
    let index = eidx.base();
    let epsilon = if methods.contains(&Method::Epsilon) {
        let v = validation.ok_or_else(|| Error::invalid("epsilon tuning needs a validation query set"))?;
        Some(tune_epsilon(index, v, DEFAULT_RECALL_FOR_EPSILON)?)
    } else {
        None
    };
    let mut rows = Vec::new();
    for set in sets {
        let exact = exact_answers(index, set.queries)?;
        for &method in methods {
            let fixed = match method {
                Method::Exact => Some(evaluate(set.queries, &exact, parallel, &|q| {
                    eidx.search(&SearchRequest {
                        query: q,
                        k: 1,
                        mode: SearchMode::Exact,
                    })
                })?),
                Method::Epsilon => {
                    let cfg = EpsilonConfig::new(epsilon.expect("tuned above"))?;
                    Some(evaluate(set.queries, &exact, parallel, &|q| epsilon_search(index, q, 1, cfg))?)
                }
                Method::Leafi => None,
            };
            for &target in targets {
                let evals = match &fixed {
                    Some(e) => e.clone(),
                    None => evaluate(set.queries, &exact, parallel, &|q| {
                        eidx.search(&SearchRequest {
                            query: q,
                            k: 1,
                            mode: SearchMode::Target(target),
                        })
                    })?,
                };
                rows.push(BenchRow::from_evals(dataset, method, target, set.noise, &evals));
            }
        }
    }
    Ok(BenchReport {
        config: BenchConfig {
            dataset: dataset.to_string(),
            methods: methods.to_vec(),
            targets: targets.to_vec(),
            noise_levels: sets.iter().map(|s| s.noise).collect(),
            epsilon,
            filters: eidx.filters().len(),
            parallel,
            timing_reliable: !parallel,
        },
        rows,
    })
}
