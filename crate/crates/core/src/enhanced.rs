//! Filter-enhanced index: building the filters and searching with them.
//!
//! A leaf that survives its lower bound is skipped when its filter's
//! prediction, lowered by the tuned offset, still exceeds the current
//! best-so-far distance. Exact mode never consults filters.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conformal::{compute_alphas, fit_auto_tuners, replay_query, AutoTuners, NonConformityTable, ReplayQuery};
use crate::error::{Error, Result};
use crate::index::{load_index, save_index, Index, LeafGate, Neighbor, SearchStats, Traversal};
use crate::mlp::{init_model, train, MlpModel, TrainConfig, TrainReport};
use crate::persist::{read_json, sha256_bytes, sha256_file, write_json};
use crate::select::{measure_constants, select_leaves, RuntimeConstants, SelectionBudget, SelectionReport};
use crate::series::make_queries;
use crate::traingen::{
    assemble_filter_training, collect_local_targets, collect_targets, generate_global_queries, generate_local_queries,
    save_trainset, GlobalTrainSet, LocalTrainSet, SplitPlan, DEFAULT_NOISE_RANGE,
};

pub const INCOMPLETE_MARKER: &str = "INCOMPLETE";
pub const MANIFEST_FILE: &str = "manifest.json";
const MEASURE_QUERIES: usize = 100;

#[derive(Debug, Clone)]
pub struct EnhanceConfig {
    pub plan: SplitPlan,
    pub budget: SelectionBudget,
    pub train: TrainConfig,
    pub noise_range: (f64, f64),
    pub seed: u64,
    /// Use these instead of timing the machine.
    pub constants: Option<RuntimeConstants>,
}

impl Default for EnhanceConfig {
    fn default() -> Self {
        EnhanceConfig {
            plan: SplitPlan::default(),
            budget: SelectionBudget::default(),
            train: TrainConfig::default(),
            noise_range: DEFAULT_NOISE_RANGE,
            seed: 0,
            constants: None,
        }
    }
}

/// Independent seed for one stream (and item) derived from a base seed.
pub fn derive_seed(base: u64, stream: u64, item: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ item.wrapping_mul(0xd1b5_4a32_d192_ed03);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const STREAM_MEASURE: u64 = 1;
const STREAM_GLOBAL: u64 = 2;
const STREAM_LOCAL: u64 = 3;
const STREAM_SPLIT: u64 = 4;
const STREAM_INIT: u64 = 5;
const STREAM_SHUFFLE: u64 = 6;

#[derive(Debug, Clone, PartialEq)]
pub struct Filter {
    pub leaf_id: usize,
    pub model: MlpModel<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub leaf_id: usize,
    pub train: TrainReport,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub select_s: f64,
    pub global_s: f64,
    pub local_s: f64,
    pub train_s: f64,
    pub calibrate_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnhancementMeta {
    pub plan: SplitPlan,
    pub train: TrainConfig,
    pub noise_range: (f64, f64),
    pub seed: u64,
    pub reports: Vec<FilterReport>,
    pub timings: StageTimings,
}

#[derive(Debug, Clone)]
pub struct EnhancedIndex {
    base: Index,
    /// Ascending leaf id.
    filters: Vec<Filter>,
    /// Filter position per node id.
    slot: Vec<Option<usize>>,
    tuners: AutoTuners,
    selection: SelectionReport,
    meta: EnhancementMeta,
}

/// What a search should guarantee.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SearchMode {
    /// Expected recall-at-1 in `[0, 1]`.
    Target(f64),
    /// Filters disabled; identical to the plain exact search.
    Exact,
}

#[derive(Debug, Clone, Copy)]
pub struct SearchRequest<'a> {
    pub query: &'a [f32],
    pub k: usize,
    pub mode: SearchMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    pub neighbors: Vec<Neighbor>,
    pub stats: SearchStats,
}

/// Intermediate products kept for inspection and tests.
#[derive(Debug, Clone)]
pub struct EnhanceArtifacts {
    pub global: GlobalTrainSet,
    pub locals: Vec<LocalTrainSet>,
    pub calibration: Vec<ReplayQuery>,
    pub tables: Vec<NonConformityTable>,
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.in_stage(name))
}

/// Select leaves, collect targets, train one filter per selected leaf, and
/// fit the auto-tuners. When `artifact_dir` is given every stage is written
/// there as it completes, under an incomplete marker that is removed only
/// after the manifest is written.
pub fn enhance(index: Index, cfg: &EnhanceConfig, artifact_dir: Option<(&Path, &Path)>) -> Result<EnhancedIndex> {
    enhance_with_artifacts(index, cfg, artifact_dir).map(|(e, _)| e)
}

/// [`enhance`], also returning the training sets and calibration replays.
/// `artifact_dir` is `(directory, dataset path)`.
pub fn enhance_with_artifacts(
    index: Index,
    cfg: &EnhanceConfig,
    artifact_dir: Option<(&Path, &Path)>,
) -> Result<(EnhancedIndex, EnhanceArtifacts)> {
    cfg.plan.validate()?;
    cfg.budget.validate()?;
    cfg.train.validate()?;
    let m = index.data().series_len();
    if let Some((dir, _)) = artifact_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(INCOMPLETE_MARKER), b"enhancement in progress\n")?;
    }
    let mut timings = StageTimings::default();

    let t = Instant::now();
    let selection = stage("select", (|| {
        let constants = match cfg.constants {
            Some(c) => c,
            None => {
                let sample = make_queries(index.data(), MEASURE_QUERIES, 0.1, derive_seed(cfg.seed, STREAM_MEASURE, 0))?;
                measure_constants(&index, &sample, &init_model(m, derive_seed(cfg.seed, STREAM_INIT, 0))?)?
            }
        };
        let report = select_leaves(&index, &constants, &cfg.budget)?;
        if let Some((dir, _)) = artifact_dir {
            write_json(dir.join("selection.json"), &report)?;
        }
        Ok(report)
    })())?;
    timings.select_s = t.elapsed().as_secs_f64();
    let selected = {
        let mut s = selection.leaf_ids();
        s.sort_unstable();
        s
    };
    info!("selected {} of {} leaves (th = {})", selected.len(), index.leaves().len(), selection.th);

    let t = Instant::now();
    let global = stage("global", (|| {
        let queries = generate_global_queries(index.data(), cfg.plan.n_global, cfg.noise_range, derive_seed(cfg.seed, STREAM_GLOBAL, 0))?;
        collect_targets(&index, &selected, queries)
    })())?;
    timings.global_s = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let locals: Vec<LocalTrainSet> = stage(
        "local",
        selected
            .par_iter()
            .map(|&leaf| {
                let q = generate_local_queries(&index, leaf, cfg.plan.n_local, cfg.noise_range, derive_seed(cfg.seed, STREAM_LOCAL, leaf as u64))?;
                collect_local_targets(&index, leaf, q)
            })
            .collect(),
    )?;
    if let Some((dir, _)) = artifact_dir {
        stage("local", save_trainset(dir.join("trainset"), &cfg.plan, &global, &locals))?;
    }
    timings.local_s = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let trained: Vec<(Filter, FilterReport, Vec<f64>, Vec<f64>)> = stage(
        "train",
        selected
            .par_iter()
            .zip(&locals)
            .map(|(&leaf, local)| {
                let data = assemble_filter_training(leaf, &global, local, &cfg.plan, derive_seed(cfg.seed, STREAM_SPLIT, leaf as u64))?;
                let tc = TrainConfig {
                    seed: derive_seed(cfg.train.seed ^ cfg.seed, STREAM_SHUFFLE, leaf as u64),
                    ..cfg.train.clone()
                };
                let init = init_model(m, derive_seed(cfg.seed, STREAM_INIT, leaf as u64 + 1))?;
                let (model, report) = train(init, &data.train_inputs, &data.train_targets, &data.val_inputs, &data.val_targets, &tc)
                    .inspect_err(|e| log::error!("filter for leaf {leaf}: {e}"))?;
                let preds: Vec<f64> = data.calibration_inputs.iter().map(|x| model.predict(x) as f64).collect();
                Ok((Filter { leaf_id: leaf, model }, FilterReport { leaf_id: leaf, train: report }, preds, data.calibration_targets))
            })
            .collect(),
    )?;
    timings.train_s = t.elapsed().as_secs_f64();
    let mut filters = Vec::with_capacity(trained.len());
    let mut reports = Vec::with_capacity(trained.len());
    let mut predictions = Vec::with_capacity(trained.len());
    let mut tables = Vec::with_capacity(trained.len());
    for (filter, report, preds, targets) in trained {
        tables.push(NonConformityTable {
            leaf_id: filter.leaf_id,
            alphas_desc: stage("calibrate", compute_alphas(&preds, &targets))?,
        });
        predictions.push(preds);
        filters.push(filter);
        reports.push(report);
    }
    if let Some((dir, _)) = artifact_dir {
        stage("train", write_filters(dir, &filters))?;
    }

    let t = Instant::now();
    let (calibration, tuners) = stage("calibrate", (|| {
        let calibration: Vec<ReplayQuery> = cfg
            .plan
            .calibration_range()
            .enumerate()
            .map(|(c, q)| {
                let preds: Vec<f64> = predictions.iter().map(|p| p[c]).collect();
                replay_query(&global.skeletons[q], &selected, &preds)
            })
            .collect::<Result<_>>()?;
        let tuners = fit_auto_tuners(&tables, &calibration)?;
        Ok((calibration, tuners))
    })())?;
    timings.calibrate_s = t.elapsed().as_secs_f64();

    let meta = EnhancementMeta {
        plan: cfg.plan,
        train: cfg.train.clone(),
        noise_range: cfg.noise_range,
        seed: cfg.seed,
        reports,
        timings,
    };
    let eidx = EnhancedIndex::assemble(index, filters, tuners, selection, meta)?;
    if let Some((dir, dataset)) = artifact_dir {
        stage("persist", save_enhanced(dir, &eidx, dataset))?;
    }
    Ok((
        eidx,
        EnhanceArtifacts {
            global,
            locals,
            calibration,
            tables,
        },
    ))
}

fn write_filters(dir: &Path, filters: &[Filter]) -> Result<()> {
    let fdir = dir.join("filters");
    fs::create_dir_all(&fdir)?;
    for f in filters {
        fs::write(fdir.join(format!("{}.bin", f.leaf_id)), f.model.to_bytes())?;
    }
    Ok(())
}

impl EnhancedIndex {
    fn assemble(base: Index, mut filters: Vec<Filter>, tuners: AutoTuners, selection: SelectionReport, meta: EnhancementMeta) -> Result<Self> {
        filters.sort_by_key(|f| f.leaf_id);
        let selected: std::collections::HashSet<usize> = selection.leaf_ids().into_iter().collect();
        let mut slot = vec![None; base.nodes().len()];
        for (i, f) in filters.iter().enumerate() {
            if !base.is_leaf(f.leaf_id) || !selected.contains(&f.leaf_id) {
                return Err(Error::invalid(format!("filter for {} is not on a selected leaf", f.leaf_id)));
            }
            if f.model.input_dim() != base.data().series_len() {
                return Err(Error::invalid(format!("filter for leaf {} has the wrong input size", f.leaf_id)));
            }
            slot[f.leaf_id] = Some(i);
        }
        let curve_leaves = tuners.leaf_ids();
        if curve_leaves.len() != filters.len() || curve_leaves.iter().zip(&filters).any(|(c, f)| *c != f.leaf_id) {
            return Err(Error::invalid("curves and filters do not cover the same leaves"));
        }
        Ok(EnhancedIndex {
            base,
            filters,
            slot,
            tuners,
            selection,
            meta,
        })
    }

    pub fn base(&self) -> &Index {
        &self.base
    }

    pub fn filters(&self) -> &[Filter] {
        &self.filters
    }

    pub fn filter_for(&self, leaf_id: usize) -> Option<&Filter> {
        self.slot.get(leaf_id).copied().flatten().map(|i| &self.filters[i])
    }

    pub fn tuners(&self) -> &AutoTuners {
        &self.tuners
    }

    pub fn selection(&self) -> &SelectionReport {
        &self.selection
    }

    pub fn meta(&self) -> &EnhancementMeta {
        &self.meta
    }

    /// Offsets per filter (in filter order) for a recall target.
    pub fn offsets_for(&self, target: f64) -> Result<std::sync::Arc<Vec<f64>>> {
        self.tuners.tune(target)
    }

    pub fn search(&self, req: &SearchRequest<'_>) -> Result<SearchOutcome> {
        match req.mode {
            SearchMode::Exact => self.run(req, None, &|_, _| unreachable!()),
            SearchMode::Target(t) => {
                let offsets = self.tuners.tune(t)?;
                self.run(req, Some(&offsets), &|i, q| self.filters[i].model.predict(q) as f64)
            }
        }
    }

    /// Search with explicit offsets and a replacement predictor, called with
    /// the filter position and the query.
    pub fn search_with(&self, query: &[f32], k: usize, offsets: &[f64], predict: &dyn Fn(usize, &[f32]) -> f64) -> Result<SearchOutcome> {
        if offsets.len() != self.filters.len() {
            return Err(Error::invalid(format!("{} offsets for {} filters", offsets.len(), self.filters.len())));
        }
        let req = SearchRequest {
            query,
            k,
            mode: SearchMode::Target(1.0),
        };
        self.run(&req, Some(offsets), predict)
    }

    fn run(&self, req: &SearchRequest<'_>, offsets: Option<&[f64]>, predict: &dyn Fn(usize, &[f32]) -> f64) -> Result<SearchOutcome> {
        let q = req.query;
        let gate = |leaf: usize, bsf: f64| match self.slot[leaf] {
            None => LeafGate::Scan,
            Some(i) => {
                let o = offsets.map_or(f64::INFINITY, |o| o[i]);
                if predict(i, q) - o > bsf {
                    LeafGate::FilterPruned
                } else {
                    LeafGate::FilterPassed
                }
            }
        };
        let traversal = Traversal {
            gate: offsets.map(|_| &gate as &dyn Fn(usize, f64) -> LeafGate),
            ..Traversal::exact()
        };
        let r = self.base.checked_traverse(q, req.k, &traversal)?;
        Ok(SearchOutcome {
            neighbors: r.neighbors,
            stats: r.stats,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub dataset_sha256: String,
    /// Relative path to sha256 for every artifact.
    pub files: BTreeMap<String, String>,
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            out.push(path.strip_prefix(root).expect("inside root").to_path_buf());
        }
    }
    Ok(())
}

fn rel_key(p: &Path) -> String {
    p.components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

/// Write the index, selection, filters, curves, metadata and a manifest of
/// checksums into `dir`. Existing training sets in `dir/trainset` are kept
/// and covered by the manifest.
pub fn save_enhanced(dir: impl AsRef<Path>, eidx: &EnhancedIndex, dataset_path: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let marker = dir.join(INCOMPLETE_MARKER);
    fs::write(&marker, b"enhancement in progress\n")?;
    let dataset_path = fs::canonicalize(dataset_path.as_ref())?;

    save_index(dir.join("index.json"), &eidx.base, &dataset_path)?;
    write_json(dir.join("selection.json"), &eidx.selection)?;
    let fdir = dir.join("filters");
    if fdir.exists() {
        fs::remove_dir_all(&fdir)?;
    }
    write_filters(dir, &eidx.filters)?;
    write_json(dir.join("curves.json"), &eidx.tuners)?;
    write_json(dir.join("enhancement.json"), &eidx.meta)?;

    let mut files = Vec::new();
    collect_files(dir, dir, &mut files)?;
    let mut manifest = Manifest {
        dataset_sha256: sha256_file(&dataset_path)?,
        files: BTreeMap::new(),
    };
    for rel in files {
        let key = rel_key(&rel);
        if key == MANIFEST_FILE || key == INCOMPLETE_MARKER {
            continue;
        }
        manifest.files.insert(key, sha256_file(dir.join(&rel))?);
    }
    write_json(dir.join(MANIFEST_FILE), &manifest)?;
    fs::remove_file(marker)?;
    Ok(())
}

fn read_verified(dir: &Path, manifest: &Manifest, rel: &str, what: &str) -> Result<Vec<u8>> {
    let path = dir.join(rel);
    let expected = manifest.files.get(rel).ok_or_else(|| Error::MissingArtifact {
        path: path.clone(),
        reason: format!("{what} is not listed in the manifest"),
    })?;
    let bytes = fs::read(&path).map_err(|e| Error::MissingArtifact {
        path: path.clone(),
        reason: format!("{what}: {e}"),
    })?;
    if &sha256_bytes(&bytes) != expected {
        return Err(Error::Checksum(format!("{what} ({})", path.display())));
    }
    Ok(bytes)
}

pub fn load_enhanced(dir: impl AsRef<Path>) -> Result<EnhancedIndex> {
    let dir = dir.as_ref();
    if dir.join(INCOMPLETE_MARKER).exists() {
        return Err(Error::MissingArtifact {
            path: dir.to_path_buf(),
            reason: "enhancement did not finish".into(),
        });
    }
    let manifest: Manifest = read_json(dir.join(MANIFEST_FILE)).map_err(|e| Error::MissingArtifact {
        path: dir.join(MANIFEST_FILE),
        reason: e.to_string(),
    })?;
    for (rel, _) in manifest.files.iter().filter(|(k, _)| k.starts_with("trainset/")) {
        read_verified(dir, &manifest, rel, "training set file")?;
    }
    read_verified(dir, &manifest, "index.json", "index")?;
    let base = load_index(dir.join("index.json"))?;
    let index_file: crate::index::IndexFile = serde_json::from_slice(&fs::read(dir.join("index.json"))?)?;
    if index_file.dataset_sha256 != manifest.dataset_sha256 {
        return Err(Error::Checksum("dataset differs from the one the filters were trained on".into()));
    }

    let selection: SelectionReport = serde_json::from_slice(&read_verified(dir, &manifest, "selection.json", "selection report")?)?;
    let tuners: AutoTuners = serde_json::from_slice(&read_verified(dir, &manifest, "curves.json", "curves")?)?;
    let meta: EnhancementMeta = serde_json::from_slice(&read_verified(dir, &manifest, "enhancement.json", "enhancement metadata")?)?;
    let m = base.data().series_len();

    let mut leaves = selection.leaf_ids();
    leaves.sort_unstable();
    let mut filters = Vec::with_capacity(leaves.len());
    for &leaf in &leaves {
        let rel = format!("filters/{leaf}.bin");
        let bytes = read_verified(dir, &manifest, &rel, &format!("filter for leaf {leaf}"))?;
        filters.push(Filter {
            leaf_id: leaf,
            model: MlpModel::from_bytes(&bytes, m)?,
        });
    }
    let curve_leaves: std::collections::HashSet<usize> = tuners.leaf_ids().into_iter().collect();
    if let Some(missing) = leaves.iter().find(|l| !curve_leaves.contains(l)) {
        return Err(Error::MissingArtifact {
            path: dir.join("curves.json"),
            reason: format!("no curve for leaf {missing}"),
        });
    }
    EnhancedIndex::assemble(base, filters, tuners, selection, meta)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeds_differ_by_stream_and_item() {
        let a = derive_seed(1, STREAM_LOCAL, 0);
        assert_ne!(a, derive_seed(1, STREAM_LOCAL, 1));
        assert_ne!(a, derive_seed(1, STREAM_SPLIT, 0));
        assert_ne!(a, derive_seed(2, STREAM_LOCAL, 0));
        assert_eq!(a, derive_seed(1, STREAM_LOCAL, 0));
    }
}
