//! Evaluation toolkit for sentence-embedding spaces.
//!
//! Everything operates on precomputed embedding files:
//!
//! * [`store`] loads, validates, normalizes and persists embeddings and their
//!   sidecar files (qrels, listings, triplets).
//! * [`simsearch`] does exact cosine top-k retrieval.
//! * [`metrics`] computes Recall@K, click-based NDCG and paired t-tests.
//! * [`geometry`] estimates alignment and uniformity of an embedding space.
//! * [`contrastive`] implements the supervised contrastive objective with hard
//!   negatives and trains a linear projection head with it.
//! * [`nli_filter`] selects and filters machine-translated NLI examples by
//!   translation-quality score.

pub mod contrastive;
pub mod geometry;
pub mod metrics;
pub mod nli_filter;
pub mod simsearch;
pub mod store;
pub mod tsv;

pub use contrastive::{ProjectionHead, TrainConfig};
pub use geometry::DiagReport;
pub use metrics::MetricReport;
pub use simsearch::NeighborList;
pub use store::{EmbeddingMatrix, Format, Listing, RelevanceSet, TripletSet};
