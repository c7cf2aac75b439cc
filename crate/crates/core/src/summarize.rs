//! Piecewise segment-mean summaries, node envelopes, and the envelope lower
//! bound on Euclidean distance.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_SEGMENTS: usize = 8;

/// Equal-width split of `0..m` into contiguous segments whose widths differ
/// by at most one (the first `m % count` segments are one longer).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentConfig {
    series_len: usize,
    bounds: Vec<(usize, usize)>,
}

impl SegmentConfig {
    pub fn new(series_len: usize, num_segments: usize) -> Result<Self> {
        if num_segments == 0 || num_segments > series_len {
            return Err(Error::invalid(format!(
                "cannot split length {series_len} into {num_segments} segments"
            )));
        }
        let base = series_len / num_segments;
        let extra = series_len % num_segments;
        let mut bounds = Vec::with_capacity(num_segments);
        let mut start = 0;
        for i in 0..num_segments {
            let width = base + usize::from(i < extra);
            bounds.push((start, start + width));
            start += width;
        }
        Ok(SegmentConfig { series_len, bounds })
    }

    pub fn num_segments(&self) -> usize {
        self.bounds.len()
    }

    pub fn series_len(&self) -> usize {
        self.series_len
    }

    /// Half-open `[start, end)` ranges.
    pub fn bounds(&self) -> &[(usize, usize)] {
        &self.bounds
    }

    pub fn width(&self, segment: usize) -> usize {
        let (s, e) = self.bounds[segment];
        e - s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeriesSummary {
    pub means: Vec<f64>,
}

pub fn summarize_series(s: &[f32], cfg: &SegmentConfig) -> SeriesSummary {
    let mut means = Vec::with_capacity(cfg.num_segments());
    summarize_into(s, cfg, &mut means);
    SeriesSummary { means }
}

pub(crate) fn summarize_into(s: &[f32], cfg: &SegmentConfig, out: &mut Vec<f64>) {
    debug_assert_eq!(s.len(), cfg.series_len());
    out.clear();
    out.extend(cfg.bounds.iter().map(|&(start, end)| {
        let sum: f64 = s[start..end].iter().map(|&v| v as f64).sum();
        sum / (end - start) as f64
    }));
}

/// Per-segment range of member means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeEnvelope {
    pub mean_min: Vec<f64>,
    pub mean_max: Vec<f64>,
}

impl NodeEnvelope {
    pub fn empty(num_segments: usize) -> Self {
        NodeEnvelope {
            mean_min: vec![f64::INFINITY; num_segments],
            mean_max: vec![f64::NEG_INFINITY; num_segments],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.mean_min.iter().zip(&self.mean_max).any(|(lo, hi)| lo > hi)
    }

    pub fn insert(&mut self, means: &[f64]) {
        debug_assert_eq!(means.len(), self.mean_min.len());
        for ((lo, hi), &m) in self.mean_min.iter_mut().zip(self.mean_max.iter_mut()).zip(means) {
            *lo = lo.min(m);
            *hi = hi.max(m);
        }
    }

    pub fn contains(&self, means: &[f64]) -> bool {
        means
            .iter()
            .zip(self.mean_min.iter().zip(&self.mean_max))
            .all(|(m, (lo, hi))| lo <= m && m <= hi)
    }

    /// Segment with the widest `mean_max - mean_min` range (lowest index on
    /// ties), and that width.
    pub fn widest_segment(&self) -> (usize, f64) {
        let mut best = (0, f64::NEG_INFINITY);
        for (i, (lo, hi)) in self.mean_min.iter().zip(&self.mean_max).enumerate() {
            let w = hi - lo;
            if w > best.1 {
                best = (i, w);
            }
        }
        best
    }
}

pub fn envelope_insert(mut env: NodeEnvelope, summ: &SeriesSummary) -> NodeEnvelope {
    env.insert(&summ.means);
    env
}

/// Envelope lower bound for a query whose segment means are already known.
#[inline]
pub fn lower_bound_from_means(query_means: &[f64], env: &NodeEnvelope, cfg: &SegmentConfig) -> f64 {
    let mut acc = 0.0;
    for (i, &q) in query_means.iter().enumerate() {
        let gap = (env.mean_min[i] - q).max(q - env.mean_max[i]).max(0.0);
        acc += cfg.width(i) as f64 * gap * gap;
    }
    acc.sqrt()
}

/// Lower bound on the Euclidean distance between `q` and any series whose
/// summary lies inside `env`.
pub fn lower_bound(q: &[f32], env: &NodeEnvelope, cfg: &SegmentConfig) -> f64 {
    lower_bound_from_means(&summarize_series(q, cfg).means, env, cfg)
}
