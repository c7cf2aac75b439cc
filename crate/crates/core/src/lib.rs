//! Data series similarity search with learned leaf filters.
//!
//! A summarization tree ([`index`]) answers exact k-NN queries by
//! best-first traversal with envelope lower bounds. [`enhanced`] attaches
//! per-leaf regressors ([`mlp`]) that predict each leaf's nearest-neighbor
//! distance, and conformal auto-tuners ([`conformal`]) that turn a recall
//! target into per-filter prediction offsets.

pub mod bench;
pub mod conformal;
pub mod enhanced;
pub mod error;
pub mod index;
pub mod mlp;
pub mod persist;
pub mod select;
pub mod series;
pub mod summarize;
pub mod traingen;

pub use error::{Error, Result};
pub use index::{build_index, Index, Neighbor, SearchStats};
pub use series::{Dataset, QuerySet, Series};
pub use summarize::SegmentConfig;
