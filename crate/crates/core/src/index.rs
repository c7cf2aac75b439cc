//! Summarization tree over a dataset and exact best-first k-NN search.
//!
//! Nodes live in a flat table; a node's children always have larger ids
//! than the node itself, and a child's envelope is contained in its
//! parent's, so lower bounds never decrease along a root-to-leaf path.
//! With the `(lower bound, node id)` heap order, nodes pop in globally
//! sorted order, so the leaves examined before the first lower-bound prune
//! are exactly a prefix of all leaves sorted by `(lower bound, leaf id)`,
//! and after that prune nothing else can be scanned. Offline replays rely on
//! this to reproduce searches without the tree.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::persist;
use crate::series::{squared_distance_bounded, Dataset};
use crate::summarize::{lower_bound_from_means, summarize_into, NodeEnvelope, SegmentConfig};

pub const DEFAULT_MAX_LEAF_SIZE: usize = 1000;
pub const INDEX_FILE_VERSION: u32 = 1;

/// Route a series left when its mean on `segment` is below `threshold`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub segment: usize,
    pub threshold: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Internal,
    Leaf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreeNode {
    pub id: usize,
    pub parent: Option<usize>,
    pub envelope: NodeEnvelope,
    pub split: Option<Split>,
    pub children: Option<(usize, usize)>,
    /// Series ids; empty for internal nodes.
    pub members: Vec<usize>,
    pub size: usize,
}

impl TreeNode {
    pub fn kind(&self) -> NodeKind {
        if self.children.is_some() {
            NodeKind::Internal
        } else {
            NodeKind::Leaf
        }
    }

    pub fn is_leaf(&self) -> bool {
        self.children.is_none()
    }
}

#[derive(Debug, Clone)]
pub struct Index {
    nodes: Vec<TreeNode>,
    cfg: SegmentConfig,
    data: Arc<Dataset>,
    max_leaf_size: usize,
    leaves: Vec<usize>,
    oversized: bool,
}

pub fn build_index(data: Arc<Dataset>, max_leaf_size: usize, cfg: SegmentConfig) -> Result<Index> {
    if data.is_empty() {
        return Err(Error::invalid("cannot index an empty dataset"));
    }
    if max_leaf_size < 2 {
        return Err(Error::invalid(format!("max leaf size must be >= 2, got {max_leaf_size}")));
    }
    if cfg.series_len() != data.series_len() {
        return Err(Error::invalid(format!(
            "segment config covers length {}, dataset has length {}",
            cfg.series_len(),
            data.series_len()
        )));
    }
    let segs = cfg.num_segments();
    let mut summaries = Vec::with_capacity(data.size() * segs);
    let mut scratch = Vec::with_capacity(segs);
    for s in data.iter() {
        summarize_into(s, &cfg, &mut scratch);
        summaries.extend_from_slice(&scratch);
    }
    let mut builder = Builder {
        nodes: vec![TreeNode {
            id: 0,
            parent: None,
            envelope: NodeEnvelope::empty(segs),
            split: None,
            children: None,
            members: Vec::new(),
            size: 0,
        }],
        summaries: &summaries,
        segs,
        max_leaf_size,
        oversized: false,
    };
    for id in 0..data.size() {
        builder.insert(id);
    }
    if builder.oversized {
        warn!("some leaves exceed max_leaf_size {max_leaf_size}: their members share identical summaries");
    }
    let Builder { nodes, oversized, .. } = builder;
    Ok(Index::assemble(nodes, cfg, data, max_leaf_size, oversized))
}

struct Builder<'a> {
    nodes: Vec<TreeNode>,
    summaries: &'a [f64],
    segs: usize,
    max_leaf_size: usize,
    oversized: bool,
}

impl Builder<'_> {
    fn means(&self, id: usize) -> &[f64] {
        &self.summaries[id * self.segs..(id + 1) * self.segs]
    }

    fn insert(&mut self, id: usize) {
        let summaries = self.summaries;
        let segs = self.segs;
        let means = &summaries[id * segs..(id + 1) * segs];
        let mut at = 0;
        loop {
            let node = &mut self.nodes[at];
            node.envelope.insert(means);
            node.size += 1;
            match (node.children, node.split) {
                (Some((left, right)), Some(split)) => {
                    at = if means[split.segment] < split.threshold { left } else { right };
                }
                _ => {
                    node.members.push(id);
                    break;
                }
            }
        }
        self.split_if_needed(at);
    }

    fn split_if_needed(&mut self, leaf: usize) {
        let mut pending = vec![leaf];
        while let Some(at) = pending.pop() {
            if self.nodes[at].members.len() <= self.max_leaf_size {
                continue;
            }
            let Some(split) = self.choose_split(at) else {
                self.oversized = true;
                continue;
            };
            let members = std::mem::take(&mut self.nodes[at].members);
            let (left_ids, right_ids): (Vec<usize>, Vec<usize>) = members
                .into_iter()
                .partition(|&m| self.means(m)[split.segment] < split.threshold);
            let left = self.push_child(at, left_ids);
            let right = self.push_child(at, right_ids);
            let node = &mut self.nodes[at];
            node.split = Some(split);
            node.children = Some((left, right));
            pending.push(right);
            pending.push(left);
        }
    }

    /// Widest envelope segment, thresholded at the median member mean. When
    /// the median equals the minimum, the next larger value is used so that
    /// both sides are non-empty.
    fn choose_split(&self, at: usize) -> Option<Split> {
        let node = &self.nodes[at];
        let (segment, width) = node.envelope.widest_segment();
        if !(width > 0.0) {
            return None;
        }
        let mut values: Vec<f64> = node.members.iter().map(|&m| self.means(m)[segment]).collect();
        values.sort_by(f64::total_cmp);
        let mut threshold = values[values.len() / 2];
        if threshold <= values[0] {
            threshold = *values.iter().find(|&&v| v > values[0])?;
        }
        Some(Split { segment, threshold })
    }

    fn push_child(&mut self, parent: usize, members: Vec<usize>) -> usize {
        let id = self.nodes.len();
        let mut envelope = NodeEnvelope::empty(self.segs);
        for &m in &members {
            envelope.insert(self.means(m));
        }
        self.nodes.push(TreeNode {
            id,
            parent: Some(parent),
            envelope,
            split: None,
            children: None,
            size: members.len(),
            members,
        });
        id
    }
}

/// A k-NN answer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub id: usize,
    pub distance: f64,
}

/// Counters collected during one search.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchStats {
    pub dataset_size: usize,
    /// Leaves popped from the queue.
    pub leaves_visited: usize,
    /// Leaves whose members were scanned.
    pub leaves_searched: usize,
    /// Visited leaves pruned by their summarization lower bound.
    pub lb_pruned: usize,
    /// Visited leaves pruned by a filter.
    pub filter_pruned: usize,
    pub filter_inferences: usize,
    /// Internal nodes pruned together with their subtrees.
    pub internal_pruned: usize,
    /// Distance computations, abandoned ones included.
    pub series_scanned: usize,
    pub elapsed: Duration,
}

impl SearchStats {
    pub fn pruning_ratio(&self) -> f64 {
        pruning_ratio(self)
    }
}

/// Fraction of the collection whose distance was never computed.
pub fn pruning_ratio(stats: &SearchStats) -> f64 {
    if stats.dataset_size == 0 {
        return 0.0;
    }
    1.0 - stats.series_scanned as f64 / stats.dataset_size as f64
}

/// One popped leaf in visit order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LeafVisit {
    pub leaf_id: usize,
    pub lower_bound: f64,
    pub searched: bool,
    /// Nearest member distance, when the leaf was scanned and at least one
    /// member was not abandoned.
    pub leaf_nn: Option<f64>,
    pub bsf_before: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LeafVisitTrace {
    pub visits: Vec<LeafVisit>,
}

#[derive(Debug, Clone)]
pub struct SearchResult {
    pub neighbors: Vec<Neighbor>,
    pub trace: LeafVisitTrace,
    pub stats: SearchStats,
}

/// What a leaf-level policy decided for a leaf that survived the
/// summarization check.
pub(crate) enum LeafGate {
    Scan,
    /// The filter was consulted and pruned the leaf.
    FilterPruned,
    /// The filter was consulted and the leaf must be scanned.
    FilterPassed,
}

/// Knobs for the shared best-first traversal.
pub(crate) struct Traversal<'a> {
    /// A node is pruned when `lower_bound > bsf * lb_scale`.
    pub lb_scale: f64,
    pub gate: Option<&'a dyn Fn(usize, f64) -> LeafGate>,
    pub record_trace: bool,
}

impl Traversal<'_> {
    pub fn exact() -> Self {
        Traversal {
            lb_scale: 1.0,
            gate: None,
            record_trace: false,
        }
    }
}

#[derive(Clone, Copy, PartialEq)]
struct QueueEntry {
    lb: f64,
    node: usize,
}

impl Eq for QueueEntry {}

impl Ord for QueueEntry {
    // reversed: BinaryHeap is a max-heap
    fn cmp(&self, other: &Self) -> Ordering {
        other.lb.total_cmp(&self.lb).then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for QueueEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Bounded max-heap of the k best `(squared distance, id)` pairs.
pub(crate) struct TopK {
    k: usize,
    heap: BinaryHeap<(OrdSq, usize)>,
}

#[derive(Clone, Copy, PartialEq, PartialOrd)]
struct OrdSq(f64);

impl Eq for OrdSq {}

impl Ord for OrdSq {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

impl TopK {
    pub fn new(k: usize) -> Self {
        TopK {
            k,
            heap: BinaryHeap::with_capacity(k + 1),
        }
    }

    /// Squared k-th best distance, or infinity while fewer than k results.
    #[inline]
    pub fn cap(&self) -> f64 {
        if self.heap.len() < self.k {
            f64::INFINITY
        } else {
            self.heap.peek().map_or(f64::INFINITY, |(d, _)| d.0)
        }
    }

    #[inline]
    pub fn bsf(&self) -> f64 {
        self.cap().sqrt()
    }

    #[inline]
    pub fn offer(&mut self, sq: f64, id: usize) {
        if self.heap.len() < self.k {
            self.heap.push((OrdSq(sq), id));
        } else if let Some(&(worst, worst_id)) = self.heap.peek() {
            if (OrdSq(sq), id) < (worst, worst_id) {
                self.heap.pop();
                self.heap.push((OrdSq(sq), id));
            }
        }
    }

    pub fn into_sorted(self) -> Vec<Neighbor> {
        let mut v: Vec<(OrdSq, usize)> = self.heap.into_vec();
        v.sort();
        v.into_iter()
            .map(|(d, id)| Neighbor {
                id,
                distance: d.0.sqrt(),
            })
            .collect()
    }
}

impl Index {
    fn assemble(
        nodes: Vec<TreeNode>,
        cfg: SegmentConfig,
        data: Arc<Dataset>,
        max_leaf_size: usize,
        oversized: bool,
    ) -> Index {
        let leaves = nodes.iter().filter(|n| n.is_leaf()).map(|n| n.id).collect();
        Index {
            nodes,
            cfg,
            data,
            max_leaf_size,
            leaves,
            oversized,
        }
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn node(&self, id: usize) -> &TreeNode {
        &self.nodes[id]
    }

    pub fn root(&self) -> &TreeNode {
        &self.nodes[0]
    }

    /// Leaf ids (node ids of leaves), ascending.
    pub fn leaves(&self) -> &[usize] {
        &self.leaves
    }

    pub fn is_leaf(&self, id: usize) -> bool {
        self.nodes.get(id).is_some_and(TreeNode::is_leaf)
    }

    pub fn leaf_members(&self, leaf_id: usize) -> Result<&[usize]> {
        match self.nodes.get(leaf_id) {
            Some(n) if n.is_leaf() => Ok(&n.members),
            _ => Err(Error::invalid(format!("{leaf_id} is not a leaf id"))),
        }
    }

    pub fn segments(&self) -> &SegmentConfig {
        &self.cfg
    }

    pub fn data(&self) -> &Arc<Dataset> {
        &self.data
    }

    pub fn max_leaf_size(&self) -> usize {
        self.max_leaf_size
    }

    /// True when some leaf could not be split below `max_leaf_size`.
    pub fn has_oversized_leaves(&self) -> bool {
        self.oversized
    }

    pub fn query_means(&self, q: &[f32]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.cfg.num_segments());
        summarize_into(q, &self.cfg, &mut out);
        out
    }

    pub fn node_lower_bound(&self, query_means: &[f64], node: usize) -> f64 {
        lower_bound_from_means(query_means, &self.nodes[node].envelope, &self.cfg)
    }

    /// Every leaf paired with its lower bound, in visit order.
    pub fn leaf_order(&self, query_means: &[f64]) -> Vec<(usize, f64)> {
        let mut order: Vec<(usize, f64)> = self
            .leaves
            .iter()
            .map(|&l| (l, self.node_lower_bound(query_means, l)))
            .collect();
        order.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        order
    }

    /// Nearest member distance inside one leaf, scanning every member.
    pub fn leaf_nn_distance(&self, q: &[f32], leaf_id: usize) -> Result<f64> {
        let mut best = f64::INFINITY;
        for &id in self.leaf_members(leaf_id)? {
            if let Some(sq) = squared_distance_bounded(q, self.data.series(id), best) {
                best = sq;
            }
        }
        Ok(best.sqrt())
    }

    fn check_query(&self, q: &[f32], k: usize) -> Result<()> {
        if q.len() != self.data.series_len() {
            return Err(Error::invalid(format!(
                "query length {} does not match series length {}",
                q.len(),
                self.data.series_len()
            )));
        }
        if k == 0 || k > self.data.size() {
            return Err(Error::invalid(format!(
                "k must be in 1..={}, got {k}",
                self.data.size()
            )));
        }
        Ok(())
    }

    /// Exact k nearest neighbors, ascending by distance then id.
    pub fn exact_search(&self, q: &[f32], k: usize) -> Result<SearchResult> {
        self.check_query(q, k)?;
        let traversal = Traversal {
            record_trace: true,
            ..Traversal::exact()
        };
        Ok(self.traverse(q, k, &traversal))
    }

    pub(crate) fn checked_traverse(&self, q: &[f32], k: usize, t: &Traversal<'_>) -> Result<SearchResult> {
        self.check_query(q, k)?;
        Ok(self.traverse(q, k, t))
    }

    pub(crate) fn traverse(&self, q: &[f32], k: usize, t: &Traversal<'_>) -> SearchResult {
        let started = Instant::now();
        let qm = self.query_means(q);
        let mut stats = SearchStats {
            dataset_size: self.data.size(),
            ..SearchStats::default()
        };
        let mut trace = LeafVisitTrace::default();
        let mut top = TopK::new(k);
        let mut queue = BinaryHeap::new();
        queue.push(QueueEntry {
            lb: self.node_lower_bound(&qm, 0),
            node: 0,
        });
        while let Some(QueueEntry { lb, node }) = queue.pop() {
            let bsf = top.bsf();
            let n = &self.nodes[node];
            let pruned = lb > bsf * t.lb_scale;
            let Some((left, right)) = n.children else {
                stats.leaves_visited += 1;
                let mut visit = LeafVisit {
                    leaf_id: node,
                    lower_bound: lb,
                    searched: false,
                    leaf_nn: None,
                    bsf_before: bsf,
                };
                if pruned {
                    stats.lb_pruned += 1;
                } else {
                    let gate = t.gate.map_or(LeafGate::Scan, |g| g(node, bsf));
                    match gate {
                        LeafGate::FilterPruned => {
                            stats.filter_inferences += 1;
                            stats.filter_pruned += 1;
                        }
                        LeafGate::FilterPassed | LeafGate::Scan => {
                            if matches!(gate, LeafGate::FilterPassed) {
                                stats.filter_inferences += 1;
                            }
                            stats.leaves_searched += 1;
                            visit.searched = true;
                            let mut leaf_best = f64::INFINITY;
                            for &id in &n.members {
                                stats.series_scanned += 1;
                                let cap = top.cap();
                                if let Some(sq) = squared_distance_bounded(q, self.data.series(id), cap) {
                                    leaf_best = leaf_best.min(sq);
                                    top.offer(sq, id);
                                }
                            }
                            if leaf_best.is_finite() {
                                visit.leaf_nn = Some(leaf_best.sqrt());
                            }
                        }
                    }
                }
                if t.record_trace {
                    trace.visits.push(visit);
                }
                continue;
            };
            if pruned {
                stats.internal_pruned += 1;
                continue;
            }
            for child in [left, right] {
                queue.push(QueueEntry {
                    lb: self.node_lower_bound(&qm, child),
                    node: child,
                });
            }
        }
        stats.elapsed = started.elapsed();
        SearchResult {
            neighbors: top.into_sorted(),
            trace,
            stats,
        }
    }

    /// Serializable node table for the index file.
    pub fn to_file(&self, dataset_path: &str, dataset_sha256: &str) -> IndexFile {
        IndexFile {
            version: INDEX_FILE_VERSION,
            dataset_path: dataset_path.to_string(),
            dataset_sha256: dataset_sha256.to_string(),
            max_leaf_size: self.max_leaf_size,
            num_segments: self.cfg.num_segments(),
            nodes: self
                .nodes
                .iter()
                .map(|n| NodeRecord {
                    id: n.id,
                    kind: n.kind(),
                    parent: n.parent,
                    split: n.split,
                    envelope: n.envelope.clone(),
                    members: n.is_leaf().then(|| n.members.clone()),
                })
                .collect(),
        }
    }

    /// Rebuild an index from its node table, checking every structural
    /// invariant against the supplied dataset.
    pub fn from_file(file: &IndexFile, data: Arc<Dataset>) -> Result<Index> {
        let bad = |msg: String| Error::Format { offset: 0, message: msg };
        if file.version != INDEX_FILE_VERSION {
            return Err(bad(format!("unsupported index version {}", file.version)));
        }
        let cfg = SegmentConfig::new(data.series_len(), file.num_segments)?;
        let count = file.nodes.len();
        if count == 0 {
            return Err(bad("index has no nodes".into()));
        }
        let mut nodes: Vec<TreeNode> = Vec::with_capacity(count);
        let mut children: Vec<Vec<usize>> = vec![Vec::new(); count];
        for (pos, r) in file.nodes.iter().enumerate() {
            if r.id != pos {
                return Err(bad(format!("node at position {pos} has id {}", r.id)));
            }
            if r.envelope.mean_min.len() != cfg.num_segments() || r.envelope.mean_max.len() != cfg.num_segments() {
                return Err(bad(format!("node {pos} envelope has wrong segment count")));
            }
            match r.parent {
                Some(p) if p >= pos => return Err(bad(format!("node {pos} has parent {p} >= its id"))),
                Some(p) => children[p].push(pos),
                None if pos != 0 => return Err(bad(format!("node {pos} has no parent"))),
                None => {}
            }
        }
        let n = data.size();
        let mut seen = vec![false; n];
        for (pos, r) in file.nodes.iter().enumerate() {
            let kids = &children[pos];
            let (split, kids, members) = match (r.kind, &r.members) {
                (NodeKind::Leaf, Some(members)) if kids.is_empty() => {
                    for &m in members {
                        if m >= n || std::mem::replace(&mut seen[m], true) {
                            return Err(bad(format!("leaf {pos} has invalid or duplicate member {m}")));
                        }
                    }
                    (None, None, members.clone())
                }
                (NodeKind::Internal, None) if kids.len() == 2 => {
                    let split = r.split.ok_or_else(|| bad(format!("internal node {pos} has no split")))?;
                    if split.segment >= cfg.num_segments() {
                        return Err(bad(format!("node {pos} splits on missing segment {}", split.segment)));
                    }
                    (Some(split), Some((kids[0], kids[1])), Vec::new())
                }
                _ => return Err(bad(format!("node {pos} has an inconsistent shape"))),
            };
            nodes.push(TreeNode {
                id: pos,
                parent: r.parent,
                envelope: r.envelope.clone(),
                split,
                children: kids,
                size: members.len(),
                members,
            });
        }
        if seen.iter().any(|s| !s) {
            return Err(bad("leaf members do not cover the dataset".into()));
        }
        for pos in (0..count).rev() {
            if let Some((l, r)) = nodes[pos].children {
                nodes[pos].size = nodes[l].size + nodes[r].size;
            }
        }
        let oversized = nodes.iter().any(|nd| nd.is_leaf() && nd.size > file.max_leaf_size);
        Ok(Index::assemble(nodes, cfg, data, file.max_leaf_size, oversized))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub id: usize,
    pub kind: NodeKind,
    pub parent: Option<usize>,
    pub split: Option<Split>,
    pub envelope: NodeEnvelope,
    pub members: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexFile {
    pub version: u32,
    pub dataset_path: String,
    pub dataset_sha256: String,
    pub max_leaf_size: usize,
    pub num_segments: usize,
    pub nodes: Vec<NodeRecord>,
}

pub fn save_index(path: impl AsRef<Path>, index: &Index, dataset_path: impl AsRef<Path>) -> Result<()> {
    let dataset_path = dataset_path.as_ref();
    let sha = persist::sha256_file(dataset_path)?;
    let file = index.to_file(&dataset_path.to_string_lossy(), &sha);
    persist::write_json(path, &file)
}

/// Load an index and the dataset it references. A relative dataset path is
/// resolved against the index file's directory.
pub fn load_index(path: impl AsRef<Path>) -> Result<Index> {
    let path = path.as_ref();
    let file: IndexFile = persist::read_json(path)?;
    let dataset_path = resolve(path, &file.dataset_path);
    let bytes = std::fs::read(&dataset_path).map_err(|e| Error::MissingArtifact {
        path: dataset_path.clone(),
        reason: e.to_string(),
    })?;
    if persist::sha256_bytes(&bytes) != file.dataset_sha256 {
        return Err(Error::Checksum(format!("dataset {}", dataset_path.display())));
    }
    let data = Arc::new(crate::series::decode_dataset(&bytes)?);
    Index::from_file(&file, data)
}

/// The dataset file an index file refers to, resolved like [`load_index`].
pub fn index_dataset_path(path: impl AsRef<Path>) -> Result<std::path::PathBuf> {
    let path = path.as_ref();
    let file: IndexFile = persist::read_json(path)?;
    Ok(resolve(path, &file.dataset_path))
}

pub(crate) fn resolve(base_file: &Path, target: &str) -> std::path::PathBuf {
    let target = Path::new(target);
    if target.is_absolute() {
        return target.to_path_buf();
    }
    base_file.parent().map_or_else(|| target.to_path_buf(), |dir| dir.join(target))
}
