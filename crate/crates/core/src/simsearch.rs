//! Exact brute-force cosine top-k retrieval.
//!
//! Each query keeps a bounded heap of its `k` best corpus rows while the
//! corpus is streamed in row order. Queries are processed in parallel blocks;
//! every score is computed by the same sequential f64 dot product whatever the
//! worker count, so results are identical for any thread pool size.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::io::{self, Write};

use rayon::prelude::*;
use thiserror::Error;

use crate::store::{self, EmbeddingMatrix, StoreError};

/// Queries scored together against each streamed corpus row.
const QUERY_BLOCK: usize = 16;

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("zero vector")]
    ZeroVector,
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("k must be positive")]
    ZeroK,
    #[error("cannot build a pool of {0} workers: {1}")]
    Pool(usize, String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

pub type Result<T> = std::result::Result<T, SearchError>;

pub(crate) fn dot(u: &[f32], v: &[f32]) -> f64 {
    u.iter().zip(v).map(|(&a, &b)| f64::from(a) * f64::from(b)).sum()
}

/// Cosine similarity accumulated in f64.
pub fn cosine(u: &[f32], v: &[f32]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(SearchError::DimMismatch(u.len(), v.len()));
    }
    let nu = store::l2_norm(u);
    let nv = store::l2_norm(v);
    if nu == 0.0 || nv == 0.0 {
        return Err(SearchError::ZeroVector);
    }
    Ok(dot(u, v) / (nu * nv))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hit {
    pub doc_id: String,
    /// Row of the document in the corpus matrix.
    pub row: usize,
    pub score: f64,
}

/// Ranked hits for one query: score descending, ties by ascending corpus row.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborList {
    pub query_id: String,
    pub hits: Vec<Hit>,
}

/// Heap entry ordered so that the *worst* candidate is the maximum.
#[derive(Debug, Clone, Copy)]
struct Scored {
    score: f64,
    row: usize,
}

impl Ord for Scored {
    fn cmp(&self, other: &Self) -> Ordering {
        other.score.total_cmp(&self.score).then(self.row.cmp(&other.row))
    }
}

impl PartialOrd for Scored {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl PartialEq for Scored {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Scored {}

struct TopK {
    k: usize,
    heap: BinaryHeap<Scored>,
}

impl TopK {
    fn new(k: usize) -> Self {
        Self {
            k,
            heap: BinaryHeap::with_capacity(k + 1),
        }
    }

    fn offer(&mut self, s: Scored) {
        if self.heap.len() < self.k {
            self.heap.push(s);
        } else if let Some(mut worst) = self.heap.peek_mut() {
            if s < *worst {
                *worst = s;
            }
        }
    }

    fn into_sorted(self) -> Vec<Scored> {
        self.heap.into_sorted_vec()
    }
}

/// The `k` highest-cosine corpus rows for every query, in query order.
///
/// Unnormalized inputs are normalized first (zero rows are an error). Runs on
/// the current rayon pool.
pub fn top_k(queries: &EmbeddingMatrix, corpus: &EmbeddingMatrix, k: usize) -> Result<Vec<NeighborList>> {
    if k == 0 {
        return Err(SearchError::ZeroK);
    }
    if corpus.is_empty() {
        return Err(SearchError::EmptyCorpus);
    }
    if queries.dims() != corpus.dims() {
        return Err(SearchError::DimMismatch(queries.dims(), corpus.dims()));
    }
    let queries = store::ensure_normalized(queries)?;
    let corpus = store::ensure_normalized(corpus)?;

    let n_queries = queries.len();
    let query_rows: Vec<usize> = (0..n_queries).collect();
    let lists: Vec<NeighborList> = query_rows
        .par_chunks(QUERY_BLOCK)
        .flat_map_iter(|block| {
            let mut heaps: Vec<TopK> = block.iter().map(|_| TopK::new(k)).collect();
            for (row, doc) in corpus.rows().enumerate() {
                for (heap, &q) in heaps.iter_mut().zip(block) {
                    heap.offer(Scored {
                        score: dot(queries.row(q), doc),
                        row,
                    });
                }
            }
            block
                .iter()
                .zip(heaps)
                .map(|(&q, heap)| NeighborList {
                    query_id: queries.id(q).to_owned(),
                    hits: heap
                        .into_sorted()
                        .into_iter()
                        .map(|s| Hit {
                            doc_id: corpus.id(s.row).to_owned(),
                            row: s.row,
                            score: s.score,
                        })
                        .collect(),
                })
                .collect::<Vec<_>>()
        })
        .collect();
    Ok(lists)
}

/// [`top_k`] on a dedicated pool of `workers` threads.
pub fn top_k_with_workers(
    queries: &EmbeddingMatrix,
    corpus: &EmbeddingMatrix,
    k: usize,
    workers: usize,
) -> Result<Vec<NeighborList>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| SearchError::Pool(workers, e.to_string()))?;
    pool.install(|| top_k(queries, corpus, k))
}

/// Writes a run as `query_id<TAB>rank<TAB>doc_id<TAB>score`, ranks from 1 and
/// scores with 9 decimals.
pub fn write_run<W: Write>(lists: &[NeighborList], w: &mut W) -> io::Result<()> {
    for list in lists {
        for (rank, hit) in list.hits.iter().enumerate() {
            writeln!(
                w,
                "{}\t{}\t{}\t{:.9}",
                list.query_id,
                rank + 1,
                hit.doc_id,
                hit.score
            )?;
        }
    }
    Ok(())
}
