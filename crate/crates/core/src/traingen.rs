//! Training queries and targets for the leaf filters.
//!
//! Global queries are noisy copies of random dataset series; local queries are
//! noisy copies of one leaf's members. Targets are collected in two passes:
//! first every selected leaf is scanned against every global query, then each
//! query walks the leaves in visit order, scanning only the unselected leaves
//! it could reach. The per-query walk (a "skeleton") keeps every leaf's lower
//! bound so searches can later be replayed without touching raw series.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::index::Index;
use crate::persist::{read_json, read_jsonl, write_json, write_jsonl};
use crate::series::{load_dataset, push_noisy, save_dataset, Dataset};

pub const DEFAULT_NOISE_RANGE: (f64, f64) = (0.1, 0.4);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    /// Global-equivalent query budget, `n_global + n_local`.
    pub n_q: usize,
    pub n_global: usize,
    /// Local queries per selected leaf.
    pub n_local: usize,
    /// Global queries held out for calibration.
    pub calibration_count: usize,
}

impl Default for SplitPlan {
    fn default() -> Self {
        SplitPlan {
            n_q: 2000,
            n_global: 1500,
            n_local: 500,
            calibration_count: 300,
        }
    }
}

impl SplitPlan {
    pub fn new(n_global: usize, n_local: usize, calibration_count: usize) -> Result<Self> {
        let plan = SplitPlan {
            n_q: n_global + n_local,
            n_global,
            n_local,
            calibration_count,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_q != self.n_global + self.n_local {
            return Err(Error::InvalidPlan(format!(
                "n_q {} != n_global {} + n_local {}",
                self.n_q, self.n_global, self.n_local
            )));
        }
        if self.calibration_count == 0 {
            return Err(Error::InvalidPlan("calibration set is empty".into()));
        }
        if self.calibration_count >= self.n_global {
            return Err(Error::InvalidPlan(format!(
                "calibration count {} must be below the global count {}",
                self.calibration_count, self.n_global
            )));
        }
        Ok(())
    }

    pub fn ratio(&self) -> f64 {
        self.n_global as f64 / self.n_local as f64
    }

    /// Global query indices used for calibration (the last ones).
    pub fn calibration_range(&self) -> std::ops::Range<usize> {
        self.n_global - self.calibration_count..self.n_global
    }
}

/// Queries with their provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainQueries {
    pub queries: Dataset,
    pub sources: Vec<usize>,
    pub levels: Vec<f64>,
}

impl TrainQueries {
    pub fn len(&self) -> usize {
        self.queries.size()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    pub fn query(&self, i: usize) -> &[f32] {
        self.queries.series(i)
    }
}

fn check_noise_range((lo, hi): (f64, f64)) -> Result<()> {
    if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
        return Err(Error::invalid(format!("noise range must satisfy 0 <= lo <= hi <= 1, got [{lo}, {hi}]")));
    }
    Ok(())
}

fn noisy_copies(data: &Dataset, pool: &[usize], n: usize, (lo, hi): (f64, f64), seed: u64) -> Result<TrainQueries> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = data.series_len();
    let mut values = Vec::with_capacity(n * m);
    let mut sources = Vec::with_capacity(n);
    let mut levels = Vec::with_capacity(n);
    for _ in 0..n {
        let id = pool[rng.gen_range(0..pool.len())];
        let level = rng.gen_range(lo..=hi);
        push_noisy(&mut values, data.series(id), level, &mut rng);
        sources.push(id);
        levels.push(level);
    }
    Ok(TrainQueries {
        queries: Dataset::from_flat(m, values)?,
        sources,
        levels,
    })
}

/// Noisy copies of uniformly drawn dataset series; each query's noise level
/// is uniform on `noise_range`.
pub fn generate_global_queries(data: &Dataset, n: usize, noise_range: (f64, f64), seed: u64) -> Result<TrainQueries> {
    if n == 0 || data.is_empty() {
        return Err(Error::invalid("need n >= 1 and a non-empty dataset"));
    }
    check_noise_range(noise_range)?;
    let pool: Vec<usize> = (0..data.size()).collect();
    noisy_copies(data, &pool, n, noise_range, seed)
}

/// Noisy copies of members of one leaf, drawn with replacement.
pub fn generate_local_queries(index: &Index, leaf_id: usize, n: usize, noise_range: (f64, f64), seed: u64) -> Result<TrainQueries> {
    let members = index.leaf_members(leaf_id)?;
    if members.is_empty() || n == 0 {
        return Err(Error::invalid(format!("leaf {leaf_id} is empty or n == 0")));
    }
    check_noise_range(noise_range)?;
    noisy_copies(index.data(), members, n, noise_range, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkeletonStep {
    pub leaf_id: usize,
    pub d_lb: f64,
    /// Leaf nearest-neighbor distance where it was computed.
    pub d_l: Option<f64>,
}

/// All leaves in visit order for one query, plus its true NN distance.
#[derive(Debug, Clone, PartialEq)]
pub struct Skeleton {
    pub nn_distance: f64,
    pub steps: Vec<SkeletonStep>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalTrainSet {
    pub queries: TrainQueries,
    /// Ascending leaf ids.
    pub selected: Vec<usize>,
    /// `leaf_distances[s][q]`: distance from query `q` to selected leaf `s`.
    pub leaf_distances: Vec<Vec<f64>>,
    pub skeletons: Vec<Skeleton>,
}

impl GlobalTrainSet {
    pub fn selected_position(&self, leaf_id: usize) -> Option<usize> {
        self.selected.binary_search(&leaf_id).ok()
    }

    pub fn leaf_targets(&self, leaf_id: usize) -> Option<&[f64]> {
        self.selected_position(leaf_id).map(|s| self.leaf_distances[s].as_slice())
    }
}

fn normalized_selection(index: &Index, selected: &[usize]) -> Result<Vec<usize>> {
    let mut sel = selected.to_vec();
    sel.sort_unstable();
    sel.dedup();
    if let Some(&bad) = sel.iter().find(|&&l| !index.is_leaf(l)) {
        return Err(Error::invalid(format!("{bad} is not a leaf id")));
    }
    Ok(sel)
}

/// Two-pass target collection for the global queries.
pub fn collect_targets(index: &Index, selected: &[usize], queries: TrainQueries) -> Result<GlobalTrainSet> {
    if queries.queries.series_len() != index.data().series_len() {
        return Err(Error::invalid("query length does not match the index"));
    }
    let selected = normalized_selection(index, selected)?;

    let leaf_distances: Vec<Vec<f64>> = selected
        .par_iter()
        .map(|&leaf| {
            (0..queries.len())
                .map(|q| index.leaf_nn_distance(queries.query(q), leaf))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;

    let skeletons: Vec<Skeleton> = (0..queries.len())
        .into_par_iter()
        .map(|q| {
            let query = queries.query(q);
            let order = index.leaf_order(&index.query_means(query));
            // Walk as if every selected leaf were filtered out: the resulting
            // best-so-far bounds any real search from above, so every
            // unselected leaf a real search could scan is scanned here.
            let mut worst_bsf = f64::INFINITY;
            let mut reachable = true;
            let mut steps = Vec::with_capacity(order.len());
            for (leaf_id, d_lb) in order {
                if d_lb > worst_bsf {
                    reachable = false;
                }
                let d_l = match selected.binary_search(&leaf_id) {
                    Ok(s) => Some(leaf_distances[s][q]),
                    Err(_) if reachable => {
                        let d = index.leaf_nn_distance(query, leaf_id)?;
                        worst_bsf = worst_bsf.min(d);
                        Some(d)
                    }
                    Err(_) => None,
                };
                steps.push(SkeletonStep { leaf_id, d_lb, d_l });
            }
            let nn_distance = steps.iter().filter_map(|s| s.d_l).fold(f64::INFINITY, f64::min);
            Ok(Skeleton { nn_distance, steps })
        })
        .collect::<Result<_>>()?;

    Ok(GlobalTrainSet {
        queries,
        selected,
        leaf_distances,
        skeletons,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalTrainSet {
    pub leaf_id: usize,
    pub queries: TrainQueries,
    pub targets: Vec<f64>,
}

pub fn collect_local_targets(index: &Index, leaf_id: usize, queries: TrainQueries) -> Result<LocalTrainSet> {
    let targets = (0..queries.len())
        .map(|q| index.leaf_nn_distance(queries.query(q), leaf_id))
        .collect::<Result<_>>()?;
    Ok(LocalTrainSet {
        leaf_id,
        queries,
        targets,
    })
}

/// Inputs and targets for one filter.
#[derive(Debug, Clone)]
pub struct FilterTrainingData<'a> {
    pub train_inputs: Vec<&'a [f32]>,
    pub train_targets: Vec<f64>,
    pub val_inputs: Vec<&'a [f32]>,
    pub val_targets: Vec<f64>,
    pub calibration_inputs: Vec<&'a [f32]>,
    pub calibration_targets: Vec<f64>,
}

/// Non-calibration global queries plus the leaf's local queries, shuffled and
/// split 4:1 into train and validation; the calibration holdout is the same
/// for every filter.
pub fn assemble_filter_training<'a>(
    leaf_id: usize,
    global: &'a GlobalTrainSet,
    local: &'a LocalTrainSet,
    plan: &SplitPlan,
    seed: u64,
) -> Result<FilterTrainingData<'a>> {
    plan.validate()?;
    if global.queries.len() != plan.n_global || local.queries.len() != plan.n_local {
        return Err(Error::InvalidPlan(format!(
            "plan expects {} global and {} local queries, got {} and {}",
            plan.n_global,
            plan.n_local,
            global.queries.len(),
            local.queries.len()
        )));
    }
    if local.leaf_id != leaf_id {
        return Err(Error::invalid(format!("local set belongs to leaf {}, not {leaf_id}", local.leaf_id)));
    }
    let targets = global
        .leaf_targets(leaf_id)
        .ok_or_else(|| Error::invalid(format!("leaf {leaf_id} was not selected")))?;

    let calib = plan.calibration_range();
    let mut pool: Vec<(&[f32], f64)> = (0..calib.start)
        .map(|q| (global.queries.query(q), targets[q]))
        .chain((0..local.queries.len()).map(|q| (local.queries.query(q), local.targets[q])))
        .collect();
    pool.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = pool.len() / 5;
    let (val, train) = pool.split_at(n_val);

    Ok(FilterTrainingData {
        train_inputs: train.iter().map(|p| p.0).collect(),
        train_targets: train.iter().map(|p| p.1).collect(),
        val_inputs: val.iter().map(|p| p.0).collect(),
        val_targets: val.iter().map(|p| p.1).collect(),
        calibration_inputs: calib.clone().map(|q| global.queries.query(q)).collect(),
        calibration_targets: calib.map(|q| targets[q]).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetRow {
    pub query_idx: usize,
    pub leaf_id: usize,
    pub d_lb: f64,
    #[serde(rename = "d_L")]
    pub d_l: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub query_idx: usize,
    pub nn_distance: f64,
    pub visit_order: Vec<usize>,
    pub source: usize,
    pub noise_level: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct QueryMeta {
    leaf_id: usize,
    sources: Vec<usize>,
    levels: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TrainSetMeta {
    plan: SplitPlan,
    selected: Vec<usize>,
    local: Vec<QueryMeta>,
}

/// Writes `plan.json`, `global_queries.bin`, `global_targets.jsonl`,
/// `global_traces.jsonl`, and per leaf `local/{leaf}.bin` plus
/// `local_targets.jsonl`.
pub fn save_trainset(dir: impl AsRef<Path>, plan: &SplitPlan, global: &GlobalTrainSet, locals: &[LocalTrainSet]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join("local"))?;
    save_dataset(dir.join("global_queries.bin"), &global.queries.queries)?;
    write_jsonl(
        dir.join("global_targets.jsonl"),
        global.skeletons.iter().enumerate().flat_map(|(q, sk)| {
            sk.steps.iter().filter_map(move |s| {
                s.d_l.map(|d_l| TargetRow {
                    query_idx: q,
                    leaf_id: s.leaf_id,
                    d_lb: s.d_lb,
                    d_l,
                })
            })
        }),
    )?;
    write_jsonl(
        dir.join("global_traces.jsonl"),
        global.skeletons.iter().enumerate().map(|(q, sk)| TraceRow {
            query_idx: q,
            nn_distance: sk.nn_distance,
            visit_order: sk.steps.iter().map(|s| s.leaf_id).collect(),
            source: global.queries.sources[q],
            noise_level: global.queries.levels[q],
        }),
    )?;
    let mut local_rows = Vec::new();
    for local in locals {
        save_dataset(dir.join("local").join(format!("{}.bin", local.leaf_id)), &local.queries.queries)?;
        local_rows.extend(local.targets.iter().enumerate().map(|(q, &d_l)| LocalRow {
            query_idx: q,
            leaf_id: local.leaf_id,
            d_l,
        }));
    }
    write_jsonl(dir.join("local_targets.jsonl"), &local_rows)?;
    write_json(
        dir.join("plan.json"),
        &TrainSetMeta {
            plan: *plan,
            selected: global.selected.clone(),
            local: locals
                .iter()
                .map(|l| QueryMeta {
                    leaf_id: l.leaf_id,
                    sources: l.queries.sources.clone(),
                    levels: l.queries.levels.clone(),
                })
                .collect(),
        },
    )
}

/// Local rows omit the lower bound, which only matters for visit order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LocalRow {
    query_idx: usize,
    leaf_id: usize,
    #[serde(rename = "d_L")]
    d_l: f64,
}

pub fn load_trainset(dir: impl AsRef<Path>, index: &Index) -> Result<(SplitPlan, GlobalTrainSet, Vec<LocalTrainSet>)> {
    let dir = dir.as_ref();
    let meta: TrainSetMeta = read_json(dir.join("plan.json"))?;
    let traces: Vec<TraceRow> = read_jsonl(dir.join("global_traces.jsonl"))?;
    let rows: Vec<TargetRow> = read_jsonl(dir.join("global_targets.jsonl"))?;
    let queries = load_dataset(dir.join("global_queries.bin"))?;
    if traces.len() != queries.size() {
        return Err(Error::invalid("trace count does not match the global queries"));
    }
    let selected = normalized_selection(index, &meta.selected)?;
    let n = queries.size();
    let mut leaf_distances = vec![vec![f64::NAN; n]; selected.len()];
    let mut skeletons: Vec<Skeleton> = traces
        .iter()
        .map(|t| Skeleton {
            nn_distance: t.nn_distance,
            steps: Vec::new(),
        })
        .collect();
    let mut known = vec![std::collections::HashMap::new(); n];
    for r in &rows {
        if r.query_idx >= n {
            return Err(Error::invalid(format!("target row for unknown query {}", r.query_idx)));
        }
        known[r.query_idx].insert(r.leaf_id, r.d_l);
        if let Ok(s) = selected.binary_search(&r.leaf_id) {
            leaf_distances[s][r.query_idx] = r.d_l;
        }
    }
    for (q, sk) in skeletons.iter_mut().enumerate() {
        let order = index.leaf_order(&index.query_means(queries.series(q)));
        if order.iter().map(|o| o.0).ne(traces[q].visit_order.iter().copied()) {
            return Err(Error::invalid(format!("visit order of query {q} does not match the index")));
        }
        sk.steps = order
            .into_iter()
            .map(|(leaf_id, d_lb)| SkeletonStep {
                leaf_id,
                d_lb,
                d_l: known[q].get(&leaf_id).copied(),
            })
            .collect();
    }
    if leaf_distances.iter().flatten().any(|d| d.is_nan()) {
        return Err(Error::invalid("missing pass-1 target rows"));
    }
    let global = GlobalTrainSet {
        queries: TrainQueries {
            queries,
            sources: traces.iter().map(|t| t.source).collect(),
            levels: traces.iter().map(|t| t.noise_level).collect(),
        },
        selected,
        leaf_distances,
        skeletons,
    };

    let local_rows: Vec<LocalRow> = read_jsonl(dir.join("local_targets.jsonl"))?;
    let mut locals = Vec::with_capacity(meta.local.len());
    for lm in meta.local {
        let queries = load_dataset(dir.join("local").join(format!("{}.bin", lm.leaf_id)))?;
        let mut targets = vec![f64::NAN; queries.size()];
        for r in local_rows.iter().filter(|r| r.leaf_id == lm.leaf_id) {
            *targets
                .get_mut(r.query_idx)
                .ok_or_else(|| Error::invalid("local target row out of range"))? = r.d_l;
        }
        if targets.iter().any(|t| t.is_nan()) {
            return Err(Error::invalid(format!("missing local targets for leaf {}", lm.leaf_id)));
        }
        locals.push(LocalTrainSet {
            leaf_id: lm.leaf_id,
            queries: TrainQueries {
                queries,
                sources: lm.sources,
                levels: lm.levels,
            },
            targets,
        });
    }
    Ok((meta.plan, global, locals))
}
