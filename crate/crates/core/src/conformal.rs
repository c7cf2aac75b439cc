//! Auto-tuners mapping a recall target to per-filter offsets.
//!
//! Each filter's calibration errors are sorted descending. Setting every
//! filter to its `j`-th largest error and replaying the calibration searches
//! gives a mean recall for position `j`; the (recall, offset) pairs are
//! repaired to be monotone and interpolated with a monotone cubic.

use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::traingen::Skeleton;

pub const MIN_CALIBRATION: usize = 20;
pub const RECALL_REL_TOLERANCE: f64 = 1e-6;

/// `|d_L - d_f|` per calibration query, sorted descending.
pub fn compute_alphas(predictions: &[f64], targets: &[f64]) -> Result<Vec<f64>> {
    if predictions.len() != targets.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    let mut alphas: Vec<f64> = predictions.iter().zip(targets).map(|(f, l)| (l - f).abs()).collect();
    if alphas.iter().any(|a| !a.is_finite()) {
        return Err(Error::invalid("non-finite calibration error"));
    }
    alphas.sort_by(|a, b| b.total_cmp(a));
    Ok(alphas)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonConformityTable {
    pub leaf_id: usize,
    pub alphas_desc: Vec<f64>,
}

/// One leaf of a calibration replay.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayStep {
    pub d_lb: f64,
    /// Filter position and its prediction, for filtered leaves.
    pub filter: Option<(usize, f64)>,
    pub d_l: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayQuery {
    pub nn_distance: f64,
    pub steps: Vec<ReplayStep>,
}

/// Attach filter predictions to a traingen skeleton. `filters` lists leaf
/// ids in filter order; `predictions[i]` is filter `i`'s output for this query.
pub fn replay_query(skeleton: &Skeleton, filters: &[usize], predictions: &[f64]) -> Result<ReplayQuery> {
    if filters.len() != predictions.len() {
        return Err(Error::invalid("one prediction per filter is required"));
    }
    let position: HashMap<usize, usize> = filters.iter().enumerate().map(|(i, &l)| (l, i)).collect();
    let steps = skeleton
        .steps
        .iter()
        .map(|s| {
            let filter = position.get(&s.leaf_id).map(|&i| (i, predictions[i]));
            if filter.is_some() && s.d_l.is_none() {
                return Err(Error::invalid(format!("filtered leaf {} has no target", s.leaf_id)));
            }
            Ok(ReplayStep {
                d_lb: s.d_lb,
                filter,
                d_l: s.d_l,
            })
        })
        .collect::<Result<_>>()?;
    Ok(ReplayQuery {
        nn_distance: skeleton.nn_distance,
        steps,
    })
}

/// Replays the enhanced search on a recorded visit order and returns the
/// final best-so-far distance.
pub fn simulate_search(query: &ReplayQuery, offsets: &[f64]) -> Result<f64> {
    let mut bsf = f64::INFINITY;
    for step in &query.steps {
        if step.d_lb > bsf {
            // later leaves have larger bounds
            break;
        }
        if let Some((i, d_f)) = step.filter {
            let o = *offsets
                .get(i)
                .ok_or_else(|| Error::invalid(format!("no offset for filter {i}")))?;
            if d_f - o > bsf {
                continue;
            }
        }
        let d_l = step
            .d_l
            .ok_or_else(|| Error::invalid("replay reached a leaf without a recorded distance"))?;
        bsf = bsf.min(d_l);
    }
    Ok(bsf)
}

pub fn is_exact_hit(achieved: f64, exact: f64) -> bool {
    achieved <= exact + RECALL_REL_TOLERANCE * exact.abs()
}

pub fn mean_recall(queries: &[ReplayQuery], offsets: &[f64]) -> Result<f64> {
    let mut hits = 0usize;
    for q in queries {
        if is_exact_hit(simulate_search(q, offsets)?, q.nn_distance) {
            hits += 1;
        }
    }
    Ok(hits as f64 / queries.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Knot {
    pub quality: f64,
    pub offset: f64,
}

/// Monotone map from recall target to one filter's offset.
#[derive(Debug, Clone, PartialEq)]
pub struct QualityOffsetCurve {
    pub leaf_id: usize,
    pub alphas_desc: Vec<f64>,
    /// Ascending quality, non-decreasing offset.
    pub knots: Vec<Knot>,
    slopes: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CurveRecord {
    leaf_id: usize,
    alphas_desc: Vec<f64>,
    knots: Vec<Knot>,
}

impl Serialize for QualityOffsetCurve {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        CurveRecord {
            leaf_id: self.leaf_id,
            alphas_desc: self.alphas_desc.clone(),
            knots: self.knots.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for QualityOffsetCurve {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = CurveRecord::deserialize(d)?;
        QualityOffsetCurve::from_knots(r.leaf_id, r.alphas_desc, r.knots).map_err(serde::de::Error::custom)
    }
}

impl QualityOffsetCurve {
    /// Validates ordering and precomputes interpolation slopes.
    pub fn from_knots(leaf_id: usize, alphas_desc: Vec<f64>, knots: Vec<Knot>) -> Result<Self> {
        if alphas_desc.is_empty() || alphas_desc.windows(2).any(|w| w[0] < w[1]) || alphas_desc.iter().any(|a| !(*a >= 0.0)) {
            return Err(Error::invalid(format!("leaf {leaf_id}: alphas must be non-negative and descending")));
        }
        for w in knots.windows(2) {
            if !(w[0].quality < w[1].quality && w[0].offset <= w[1].offset) {
                return Err(Error::invalid(format!("leaf {leaf_id}: knots are not monotone")));
            }
        }
        if knots.iter().any(|k| !(0.0..=1.0).contains(&k.quality) || !(k.offset >= 0.0) || k.offset > alphas_desc[0]) {
            return Err(Error::invalid(format!("leaf {leaf_id}: knot out of range")));
        }
        let slopes = steffen_slopes(&knots);
        Ok(QualityOffsetCurve {
            leaf_id,
            alphas_desc,
            knots,
            slopes,
        })
    }

    pub fn max_alpha(&self) -> f64 {
        self.alphas_desc[0]
    }

    pub fn is_degenerate(&self) -> bool {
        self.knots.len() < 2
    }

    /// Offset for a recall target, within `[0, max_alpha]`.
    pub fn eval(&self, target: f64) -> f64 {
        let top = self.max_alpha();
        if target <= 0.0 {
            return 0.0;
        }
        if self.is_degenerate() {
            return top;
        }
        let first = self.knots[0];
        let last = self.knots[self.knots.len() - 1];
        if target > last.quality {
            return top;
        }
        if target < first.quality {
            return 0.0;
        }
        let k = self.knots.partition_point(|kn| kn.quality <= target).saturating_sub(1).min(self.knots.len() - 2);
        let (a, b) = (self.knots[k], self.knots[k + 1]);
        let h = b.quality - a.quality;
        let t = (target - a.quality) / h;
        let (t2, t3) = (t * t, t * t * t);
        let y = (2.0 * t3 - 3.0 * t2 + 1.0) * a.offset
            + (t3 - 2.0 * t2 + t) * h * self.slopes[k]
            + (-2.0 * t3 + 3.0 * t2) * b.offset
            + (t3 - t2) * h * self.slopes[k + 1];
        y.clamp(a.offset, b.offset)
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Knot derivatives that keep the Hermite cubic monotone between knots.
fn steffen_slopes(knots: &[Knot]) -> Vec<f64> {
    let n = knots.len();
    if n < 2 {
        return vec![0.0; n];
    }
    let h: Vec<f64> = knots.windows(2).map(|w| w[1].quality - w[0].quality).collect();
    let d: Vec<f64> = knots
        .windows(2)
        .zip(&h)
        .map(|(w, &h)| (w[1].offset - w[0].offset) / h)
        .collect();
    if n == 2 {
        return vec![d[0], d[0]];
    }
    let mut m = vec![0.0; n];
    for i in 1..n - 1 {
        let p = (d[i - 1] * h[i] + d[i] * h[i - 1]) / (h[i - 1] + h[i]);
        m[i] = (sign(d[i - 1]) + sign(d[i])) * d[i - 1].abs().min(d[i].abs()).min(0.5 * p.abs());
    }
    let end = |d0: f64, d1: f64, h0: f64, h1: f64| {
        let p = d0 * (1.0 + h0 / (h0 + h1)) - d1 * h0 / (h0 + h1);
        if p * d0 <= 0.0 {
            0.0
        } else if p.abs() > 2.0 * d0.abs() {
            2.0 * d0
        } else {
            p
        }
    };
    m[0] = end(d[0], d[1], h[0], h[1]);
    m[n - 1] = end(d[n - 2], d[n - 3], h[n - 2], h[n - 3]);
    m
}

/// Merge equal qualities by their largest offset, sort by quality, then
/// raise offsets to a running maximum so they never decrease.
pub fn monotone_knots(raw: &[(f64, f64)]) -> Vec<Knot> {
    let mut pairs = raw.to_vec();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
    let mut knots: Vec<Knot> = Vec::new();
    for (quality, offset) in pairs {
        match knots.last_mut() {
            Some(k) if k.quality == quality => k.offset = k.offset.max(offset),
            _ => knots.push(Knot { quality, offset }),
        }
    }
    let mut running = 0.0f64;
    for k in &mut knots {
        running = running.max(k.offset);
        k.offset = running;
    }
    knots
}

/// Fitted curves for every filter plus the replayed quality per position.
#[derive(Debug)]
pub struct AutoTuners {
    /// Mean calibration recall when every filter uses its `j`-th largest error.
    pub position_quality: Vec<f64>,
    pub curves: Vec<QualityOffsetCurve>,
    memo: RwLock<HashMap<u64, Arc<Vec<f64>>>>,
}

impl Clone for AutoTuners {
    fn clone(&self) -> Self {
        AutoTuners::new(self.position_quality.clone(), self.curves.clone())
    }
}

impl PartialEq for AutoTuners {
    fn eq(&self, other: &Self) -> bool {
        self.position_quality == other.position_quality && self.curves == other.curves
    }
}

#[derive(Serialize, Deserialize)]
struct TunersFile {
    position_quality: Vec<f64>,
    curves: Vec<QualityOffsetCurve>,
}

impl Serialize for AutoTuners {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        TunersFile {
            position_quality: self.position_quality.clone(),
            curves: self.curves.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for AutoTuners {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let f = TunersFile::deserialize(d)?;
        Ok(AutoTuners::new(f.position_quality, f.curves))
    }
}

impl AutoTuners {
    pub fn new(position_quality: Vec<f64>, curves: Vec<QualityOffsetCurve>) -> Self {
        AutoTuners {
            position_quality,
            curves,
            memo: RwLock::new(HashMap::new()),
        }
    }

    pub fn empty() -> Self {
        AutoTuners::new(Vec::new(), Vec::new())
    }

    pub fn leaf_ids(&self) -> Vec<usize> {
        self.curves.iter().map(|c| c.leaf_id).collect()
    }

    /// Per-filter offsets for a recall target, cached per target value.
    pub fn tune(&self, target: f64) -> Result<Arc<Vec<f64>>> {
        if !(0.0..=1.0).contains(&target) {
            return Err(Error::invalid(format!("recall target must lie in [0, 1], got {target}")));
        }
        let key = target.to_bits();
        if let Some(hit) = self.memo.read().unwrap_or_else(|e| e.into_inner()).get(&key) {
            return Ok(hit.clone());
        }
        let offsets = Arc::new(self.curves.iter().map(|c| c.eval(target)).collect::<Vec<_>>());
        let mut memo = self.memo.write().unwrap_or_else(|e| e.into_inner());
        Ok(memo.entry(key).or_insert(offsets).clone())
    }

    pub fn memo_len(&self) -> usize {
        self.memo.read().unwrap_or_else(|e| e.into_inner()).len()
    }
}

/// Fit one curve per table from replays of the calibration queries. Tables
/// are in filter order, matching the filter positions in `queries`.
pub fn fit_auto_tuners(tables: &[NonConformityTable], queries: &[ReplayQuery]) -> Result<AutoTuners> {
    let c = queries.len();
    if c < MIN_CALIBRATION {
        return Err(Error::invalid(format!("need at least {MIN_CALIBRATION} calibration queries, got {c}")));
    }
    if let Some(t) = tables.iter().find(|t| t.alphas_desc.len() != c) {
        return Err(Error::invalid(format!(
            "leaf {} has {} calibration errors for {c} queries",
            t.leaf_id,
            t.alphas_desc.len()
        )));
    }
    if tables.is_empty() {
        return Ok(AutoTuners::empty());
    }

    let position_quality: Vec<f64> = (0..c)
        .into_par_iter()
        .map(|j| {
            let offsets: Vec<f64> = tables.iter().map(|t| t.alphas_desc[j]).collect();
            mean_recall(queries, &offsets)
        })
        .collect::<Result<_>>()?;

    let curves = tables
        .iter()
        .map(|t| {
            let raw: Vec<(f64, f64)> = position_quality.iter().copied().zip(t.alphas_desc.iter().copied()).collect();
            let knots = monotone_knots(&raw);
            let knots = if knots.len() < 2 {
                warn!("leaf {}: fewer than two distinct calibration qualities, using the largest error", t.leaf_id);
                Vec::new()
            } else {
                knots
            };
            QualityOffsetCurve::from_knots(t.leaf_id, t.alphas_desc.clone(), knots)
        })
        .collect::<Result<_>>()?;
    Ok(AutoTuners::new(position_quality, curves))
}
