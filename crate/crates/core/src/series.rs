//! Series storage, Euclidean distance with early abandoning, synthetic
//! random-walk data, noisy query generation, and the binary dataset format.
//!
//! Values are stored as `f32`; every distance and moment is accumulated in
//! `f64`.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};

/// Magic bytes at the start of every dataset file.
pub const DATASET_MAGIC: &[u8; 4] = b"LEAF";
pub const DATASET_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 16;

/// A single owned series. Length is at least 2 and every value is finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Series(Vec<f32>);

impl Series {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::invalid(format!(
                "series needs at least 2 values, got {}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite value at position {i}")));
        }
        Ok(Series(values))
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.0
    }
}

impl AsRef<[f32]> for Series {
    fn as_ref(&self) -> &[f32] {
        &self.0
    }
}

/// A collection of `n` equal-length series, stored series-major.
/// Series ids are their positions `0..n`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    len: usize,
    values: Vec<f32>,
}

impl Dataset {
    pub fn from_flat(len: usize, values: Vec<f32>) -> Result<Self> {
        if len < 2 {
            return Err(Error::invalid(format!("series length must be >= 2, got {len}")));
        }
        if values.len() % len != 0 {
            return Err(Error::invalid(format!(
                "{} values do not divide into series of length {len}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite value in series {} at position {}",
                i / len,
                i % len
            )));
        }
        Ok(Dataset { len, values })
    }

    pub fn from_series(series: &[Series]) -> Result<Self> {
        let first = series
            .first()
            .ok_or_else(|| Error::invalid("cannot build a dataset from zero series"))?;
        let len = first.len();
        let mut values = Vec::with_capacity(series.len() * len);
        for (id, s) in series.iter().enumerate() {
            if s.len() != len {
                return Err(Error::invalid(format!(
                    "series {id} has length {}, expected {len}",
                    s.len()
                )));
            }
            values.extend_from_slice(s.values());
        }
        Ok(Dataset { len, values })
    }

    /// Number of series.
    pub fn size(&self) -> usize {
        self.values.len() / self.len
    }

    /// Length `m` shared by all series.
    pub fn series_len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn series(&self, id: usize) -> &[f32] {
        &self.values[id * self.len..(id + 1) * self.len]
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = &[f32]> + '_ {
        self.values.chunks_exact(self.len)
    }

    pub fn as_flat(&self) -> &[f32] {
        &self.values
    }
}

/// Noisy queries drawn from a source dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct QuerySet {
    pub queries: Dataset,
    /// Id of the dataset series each query was derived from.
    pub sources: Vec<usize>,
    pub noise_level: f64,
    pub seed: u64,
}

impl QuerySet {
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

const LANES: usize = 8;
const CHECK_EVERY: usize = 32;

/// Squared Euclidean distance, abandoned as soon as the running sum exceeds
/// `cap`. Returns `None` when abandoned.
///
/// The summation order does not depend on `cap`, so any value returned is
/// bit-identical to the unbounded result.
#[inline]
pub fn squared_distance_bounded(a: &[f32], b: &[f32], cap: f64) -> Option<f64> {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [0.0f64; LANES];
    let mut blocks_a = a.chunks_exact(CHECK_EVERY);
    let mut blocks_b = b.chunks_exact(CHECK_EVERY);
    for (ba, bb) in (&mut blocks_a).zip(&mut blocks_b) {
        for (ca, cb) in ba.chunks_exact(LANES).zip(bb.chunks_exact(LANES)) {
            for k in 0..LANES {
                let d = ca[k] as f64 - cb[k] as f64;
                lanes[k] += d * d;
            }
        }
        if reduce(&lanes) > cap {
            return None;
        }
    }
    let mut sum = reduce(&lanes);
    for (x, y) in blocks_a.remainder().iter().zip(blocks_b.remainder()) {
        let d = *x as f64 - *y as f64;
        sum += d * d;
    }
    if sum > cap {
        None
    } else {
        Some(sum)
    }
}

#[inline]
fn reduce(lanes: &[f64; LANES]) -> f64 {
    ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3])) + ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7]))
}

#[inline]
pub fn squared_distance(a: &[f32], b: &[f32]) -> f64 {
    squared_distance_bounded(a, b, f64::INFINITY).unwrap_or(f64::INFINITY)
}

/// Euclidean distance between two series. `abandon_at` is a cap on the
/// *squared* distance; `Ok(None)` means the computation was abandoned and
/// the true distance exceeds `sqrt(abandon_at)`.
pub fn euclidean_distance(a: &[f32], b: &[f32], abandon_at: Option<f64>) -> Result<Option<f64>> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "length mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let cap = match abandon_at {
        Some(c) if c.is_nan() || c < 0.0 => {
            return Err(Error::invalid(format!("abandon cap must be >= 0, got {c}")))
        }
        Some(c) => c,
        None => f64::INFINITY,
    };
    Ok(squared_distance_bounded(a, b, cap).map(f64::sqrt))
}

/// Mean and sample standard deviation.
pub fn moments(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Rescale to zero mean and unit sample standard deviation.
pub fn znormalize(values: &[f64]) -> Result<Vec<f64>> {
    if values.len() < 2 {
        return Err(Error::invalid("z-normalization needs at least 2 values"));
    }
    let (mean, sd) = moments(values);
    if !(sd > 0.0) || !sd.is_finite() {
        return Err(Error::Degenerate(format!(
            "cannot z-normalize a series with standard deviation {sd}"
        )));
    }
    let mut out: Vec<f64> = values.iter().map(|v| (v - mean) / sd).collect();
    // second pass removes the residual mean left by rounding
    let (residual, _) = moments(&out);
    out.iter_mut().for_each(|v| *v -= residual);
    Ok(out)
}

/// Random-walk dataset: each series is the cumulative sum of i.i.d. standard
/// normal steps, then z-normalized.
pub fn generate_randwalk(n: usize, m: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::invalid("randwalk needs n >= 1"));
    }
    if m < 2 {
        return Err(Error::invalid("randwalk needs m >= 2"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(n * m);
    let mut walk = vec![0.0f64; m];
    for _ in 0..n {
        loop {
            let mut acc = 0.0;
            for slot in walk.iter_mut() {
                let step: f64 = StandardNormal.sample(&mut rng);
                acc += step;
                *slot = acc;
            }
            match znormalize(&walk) {
                Ok(z) => {
                    values.extend(z.iter().map(|&v| v as f32));
                    break;
                }
                // measure-zero event; draw again
                Err(Error::Degenerate(_)) => continue,
                Err(e) => return Err(e),
            }
        }
    }
    Dataset::from_flat(m, values)
}

/// Queries formed by sampling dataset series uniformly and adding i.i.d.
/// Gaussian noise with standard deviation `noise_level`. Queries are not
/// re-normalized.
pub fn make_queries(src: &Dataset, count: usize, noise_level: f64, seed: u64) -> Result<QuerySet> {
    if src.is_empty() {
        return Err(Error::invalid("cannot draw queries from an empty dataset"));
    }
    if count == 0 {
        return Err(Error::invalid("query count must be >= 1"));
    }
    if !(0.0..=1.0).contains(&noise_level) {
        return Err(Error::invalid(format!(
            "noise level must be in [0, 1], got {noise_level}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = src.series_len();
    let mut values = Vec::with_capacity(count * m);
    let mut sources = Vec::with_capacity(count);
    for _ in 0..count {
        let id = rng.gen_range(0..src.size());
        sources.push(id);
        push_noisy(&mut values, src.series(id), noise_level, &mut rng);
    }
    Ok(QuerySet {
        queries: Dataset::from_flat(m, values)?,
        sources,
        noise_level,
        seed,
    })
}

pub(crate) fn push_noisy<R: Rng>(out: &mut Vec<f32>, source: &[f32], level: f64, rng: &mut R) {
    if level == 0.0 {
        out.extend_from_slice(source);
        return;
    }
    let noise = Normal::new(0.0, level).expect("noise level is finite and positive");
    out.extend(source.iter().map(|&v| (v as f64 + noise.sample(rng)) as f32));
}

pub fn save_dataset(path: impl AsRef<Path>, data: &Dataset) -> Result<()> {
    let n = u32::try_from(data.size()).map_err(|_| Error::invalid("too many series for format"))?;
    let m = u32::try_from(data.series_len()).map_err(|_| Error::invalid("series too long for format"))?;
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&DATASET_VERSION.to_le_bytes())?;
    w.write_all(&n.to_le_bytes())?;
    w.write_all(&m.to_le_bytes())?;
    for v in data.as_flat() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    decode_dataset(&fs::read(path)?)
}

pub fn save_queries(path: impl AsRef<Path>, queries: &QuerySet) -> Result<()> {
    save_dataset(path, &queries.queries)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            message: format!("header needs {HEADER_LEN} bytes"),
        });
    }
    if &bytes[0..4] != DATASET_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad magic {:?}", &bytes[0..4]),
        });
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
    let version = word(4);
    if version != DATASET_VERSION {
        return Err(Error::Format {
            offset: 4,
            message: format!("unsupported version {version}"),
        });
    }
    let n = word(8) as u64;
    let m = word(12) as u64;
    if m < 2 {
        return Err(Error::Format {
            offset: 12,
            message: format!("series length {m} < 2"),
        });
    }
    let expected = HEADER_LEN as u64 + n * m * 4;
    if bytes.len() as u64 != expected {
        return Err(Error::Format {
            offset: (bytes.len() as u64).min(expected),
            message: format!(
                "payload length mismatch: header implies {expected} bytes, file has {}",
                bytes.len()
            ),
        });
    }
    let mut values = Vec::with_capacity((n * m) as usize);
    for (i, chunk) in bytes[HEADER_LEN..].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::Format {
                offset: (HEADER_LEN + 4 * i) as u64,
                message: "non-finite value".into(),
            });
        }
        values.push(v);
    }
    Dataset::from_flat(m as usize, values)
}
