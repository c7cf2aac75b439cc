//! Choosing which leaves get filters.
//!
//! The production path is the size-threshold greedy pass. The expected
//! benefit formula and an exact 0/1 knapsack are exposed for callers that
//! can supply pruning probabilities.

use std::hint::black_box;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::index::Index;
use crate::mlp::MlpModel;
use crate::series::{squared_distance, QuerySet};

/// Bookkeeping bytes charged per filter on top of its parameters.
pub const FILTER_OVERHEAD_BYTES: u64 = 256;
pub const DEFAULT_THRESHOLD_FACTOR: f64 = 2.0;
pub const KNAPSACK_UNIT_BYTES: u64 = 1024;
pub const DEFAULT_CELL_LIMIT: u128 = 200_000_000;
const MIN_TRIALS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RuntimeConstants {
    /// Seconds per single-series distance.
    #[serde(rename = "t_S")]
    pub t_s: f64,
    /// Seconds per filter inference.
    #[serde(rename = "t_F")]
    pub t_f: f64,
    /// Bytes per filter.
    pub w: u64,
}

impl RuntimeConstants {
    pub fn new(t_s: f64, t_f: f64, w: u64) -> Result<Self> {
        let c = RuntimeConstants { t_s, t_f, w };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_s > 0.0 && self.t_f > 0.0 && self.t_s.is_finite() && self.t_f.is_finite() && self.w > 0) {
            return Err(Error::invalid(format!("runtime constants must be positive: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionBudget {
    /// Bytes available for filters.
    pub capacity: u64,
    pub a: f64,
}

impl Default for SelectionBudget {
    fn default() -> Self {
        SelectionBudget {
            capacity: u64::MAX,
            a: DEFAULT_THRESHOLD_FACTOR,
        }
    }
}

impl SelectionBudget {
    pub fn validate(&self) -> Result<()> {
        if !(self.a >= 1.0 && self.a.is_finite()) {
            return Err(Error::invalid(format!("threshold factor must be >= 1, got {}", self.a)));
        }
        Ok(())
    }
}

pub fn filter_bytes(m: usize) -> u64 {
    4 * (m * m + m + m + 1) as u64 + FILTER_OVERHEAD_BYTES
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Time `op` repeated `reps` times, growing `reps` until the clock registers.
fn timed_per_op(mut op: impl FnMut(), mut reps: usize, what: &str) -> Result<(f64, usize)> {
    for _ in 0..12 {
        let start = Instant::now();
        for _ in 0..reps {
            op();
        }
        let secs = start.elapsed().as_secs_f64();
        if secs > 0.0 {
            return Ok((secs / reps as f64, reps));
        }
        reps *= 8;
    }
    Err(Error::Measurement(format!("timer did not register any {what} time")))
}

/// Median per-series scan time over a warm leaf, median single inference
/// time, and the serialized filter size.
pub fn measure_constants(index: &Index, queries: &QuerySet, trial_model: &MlpModel<f32>) -> Result<RuntimeConstants> {
    if queries.len() == 0 {
        return Err(Error::invalid("need at least one sample query"));
    }
    let leaf = *index
        .leaves()
        .iter()
        .max_by_key(|&&l| (index.node(l).size, std::cmp::Reverse(l)))
        .ok_or_else(|| Error::invalid("index has no leaves"))?;
    let members = index.leaf_members(leaf)?;
    let data = index.data();

    let scan_once = |q: &[f32]| {
        let mut acc = 0.0;
        for &id in members {
            acc += squared_distance(q, data.series(id));
        }
        black_box(acc);
    };
    scan_once(queries.query(0));
    let mut scan_times = Vec::with_capacity(MIN_TRIALS);
    for t in 0..MIN_TRIALS {
        let q = queries.query(t % queries.len());
        let (per, _) = timed_per_op(|| scan_once(q), 1, "scan")?;
        scan_times.push(per / members.len() as f64);
    }

    let mut infer_times = Vec::with_capacity(MIN_TRIALS);
    black_box(trial_model.predict(queries.query(0)));
    for t in 0..MIN_TRIALS {
        let q = queries.query(t % queries.len());
        let (per, _) = timed_per_op(|| { black_box(trial_model.predict(black_box(q))); }, 1, "inference")?;
        infer_times.push(per);
    }

    let c = RuntimeConstants {
        t_s: median(scan_times),
        t_f: median(infer_times),
        w: trial_model.byte_size() as u64 + FILTER_OVERHEAD_BYTES,
    };
    if !(c.t_s > 0.0 && c.t_f > 0.0) {
        return Err(Error::Measurement(format!("zero timing: {c:?}")));
    }
    Ok(c)
}

/// Minimum leaf size worth a filter: `ceil(a * t_F / t_S)`.
pub fn compute_threshold(c: &RuntimeConstants, a: f64) -> usize {
    let ratio = a * c.t_f / c.t_s;
    // absorb rounding noise so exact integer ratios are not bumped up
    let nearest = ratio.round();
    if (ratio - nearest).abs() <= 1e-9 * ratio.max(1.0) {
        nearest.max(1.0) as usize
    } else {
        ratio.ceil().max(1.0) as usize
    }
}

/// Largest leaves first (ascending id on ties), taking every leaf of size at
/// least `th` until the next filter would exceed the capacity.
pub fn select_greedy(leaves: &[(usize, usize)], th: usize, budget: &SelectionBudget, w: u64) -> Vec<usize> {
    let mut sorted = leaves.to_vec();
    sorted.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut used: u64 = 0;
    let mut selected = Vec::new();
    for (id, size) in sorted {
        if size < th {
            break;
        }
        match used.checked_add(w) {
            Some(next) if next <= budget.capacity => used = next,
            _ => break,
        }
        selected.push(id);
    }
    selected
}

/// Expected seconds saved per query by a filter on a leaf.
pub fn estimate_benefit(size: usize, p_lb: f64, p_f: f64, c: &RuntimeConstants) -> Result<f64> {
    if !(0.0..=1.0).contains(&p_lb) || !(0.0..=1.0).contains(&p_f) {
        return Err(Error::invalid(format!("probabilities must lie in [0, 1]: p_lb={p_lb}, p_F={p_f}")));
    }
    Ok((1.0 - p_lb) * (p_f * c.t_s * size as f64 - c.t_f))
}

pub fn quantize_bytes(bytes: u64) -> u64 {
    bytes.div_ceil(KNAPSACK_UNIT_BYTES)
}

/// Exact 0/1 knapsack by dynamic programming over integer weights. Items
/// with non-positive value are never chosen. Returns ascending item indices.
pub fn solve_knapsack(values: &[f64], weights: &[u64], capacity: u64, cell_limit: u128) -> Result<Vec<usize>> {
    if values.len() != weights.len() {
        return Err(Error::invalid("values and weights differ in length"));
    }
    if weights.iter().any(|&w| w == 0) || values.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("weights must be positive and values finite"));
    }
    let items: Vec<usize> = (0..values.len()).filter(|&i| values[i] > 0.0 && weights[i] <= capacity).collect();
    let total: u64 = items.iter().map(|&i| weights[i]).sum();
    let cap = capacity.min(total) as usize;
    let cells = (items.len() as u128) * (cap as u128 + 1);
    if cells > cell_limit {
        return Err(Error::TableTooLarge { cells, limit: cell_limit });
    }

    let width = cap + 1;
    let mut best = vec![0.0f64; width];
    let mut take = vec![false; items.len() * width];
    for (row, &i) in items.iter().enumerate() {
        let w = weights[i] as usize;
        for c in (w..width).rev() {
            let with = best[c - w] + values[i];
            if with > best[c] {
                best[c] = with;
                take[row * width + c] = true;
            }
        }
    }
    let mut chosen = Vec::new();
    let mut c = cap;
    for row in (0..items.len()).rev() {
        if take[row * width + c] {
            chosen.push(items[row]);
            c -= weights[items[row]] as usize;
        }
    }
    chosen.sort_unstable();
    Ok(chosen)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedLeaf {
    pub leaf_id: usize,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    #[serde(rename = "t_S")]
    pub t_s: f64,
    #[serde(rename = "t_F")]
    pub t_f: f64,
    pub w: u64,
    pub a: f64,
    pub th: usize,
    pub capacity: u64,
    pub selected: Vec<SelectedLeaf>,
}

impl SelectionReport {
    pub fn constants(&self) -> RuntimeConstants {
        RuntimeConstants {
            t_s: self.t_s,
            t_f: self.t_f,
            w: self.w,
        }
    }

    pub fn leaf_ids(&self) -> Vec<usize> {
        self.selected.iter().map(|s| s.leaf_id).collect()
    }
}

/// Threshold plus greedy selection over the index's leaves.
pub fn select_leaves(index: &Index, c: &RuntimeConstants, budget: &SelectionBudget) -> Result<SelectionReport> {
    c.validate()?;
    budget.validate()?;
    let th = compute_threshold(c, budget.a);
    let leaves: Vec<(usize, usize)> = index.leaves().iter().map(|&l| (l, index.node(l).size)).collect();
    let selected = select_greedy(&leaves, th, budget, c.w)
        .into_iter()
        .map(|leaf_id| SelectedLeaf {
            leaf_id,
            size: index.node(leaf_id).size,
        })
        .collect();
    Ok(SelectionReport {
        t_s: c.t_s,
        t_f: c.t_f,
        w: c.w,
        a: budget.a,
        th,
        capacity: budget.capacity,
        selected,
    })
}
