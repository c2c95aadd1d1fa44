//! Alignment and uniformity of an embedding space on the unit sphere.
//!
//! * alignment: `mean ‖f(x) − f(y)‖₂^α` over positive pairs.
//! * uniformity: `log mean exp(−t ‖f(x) − f(y)‖₂²)` over data pairs.
//!
//! Uniformity is estimated over all distinct ordered pairs inside seeded,
//! shuffled batches. Per-batch sums stay in log space and are merged with a
//! running-maximum log-sum-exp in batch order, so the result does not depend
//! on how batches are scheduled across threads.
//!
//! Inputs are stored as f32; every row is re-projected onto the sphere in f64
//! before distances are taken (rows must already be unit within
//! [`UNIT_NORM_TOL`]), so `‖u − v‖² = 2 − 2 cos(u, v)` holds to f64 precision.

use std::collections::HashSet;
use std::io::{self, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::store::{self, l2_norm, EmbeddingMatrix, RelevanceSet, StoreError, UNIT_NORM_TOL};
use crate::tsv;

pub const DEFAULT_ALPHA: f64 = 2.0;
pub const DEFAULT_T: f64 = 2.0;
pub const DEFAULT_BATCH_SIZE: usize = 1024;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("no pairs to average")]
    NoPairs,
    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("row is not unit-normalized (norm {0})")]
    NotUnit(f64),
    #[error("need at least 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("batch size must be at least 2, got {0}")]
    BatchTooSmall(usize),
    #[error("{name} must be positive and finite, got {value}")]
    BadParameter { name: &'static str, value: f64 },
    #[error("unknown id {0:?}")]
    UnknownId(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

pub type Result<T> = std::result::Result<T, GeometryError>;

fn check_param(name: &'static str, value: f64) -> Result<()> {
    if value.is_finite() && value > 0.0 {
        Ok(())
    } else {
        Err(GeometryError::BadParameter { name, value })
    }
}

fn to_unit(row: &[f32], out: &mut Vec<f64>) -> Result<()> {
    let norm = l2_norm(row);
    if (norm - 1.0).abs() > UNIT_NORM_TOL {
        return Err(GeometryError::NotUnit(norm));
    }
    out.extend(row.iter().map(|&v| f64::from(v) / norm));
    Ok(())
}

fn sq_dist(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Running log-sum-exp.
#[derive(Debug, Clone, Copy)]
pub struct LogSumExp {
    max: f64,
    scaled_sum: f64,
}

impl Default for LogSumExp {
    fn default() -> Self {
        Self {
            max: f64::NEG_INFINITY,
            scaled_sum: 0.0,
        }
    }
}

impl LogSumExp {
    pub fn push(&mut self, x: f64) {
        if x == f64::NEG_INFINITY {
            return;
        }
        if x > self.max {
            self.scaled_sum = self.scaled_sum * (self.max - x).exp() + 1.0;
            self.max = x;
        } else {
            self.scaled_sum += (x - self.max).exp();
        }
    }

    /// `log Σ exp(xᵢ)`; `-inf` when empty.
    pub fn value(&self) -> f64 {
        if self.scaled_sum == 0.0 {
            f64::NEG_INFINITY
        } else {
            self.max + self.scaled_sum.ln()
        }
    }
}

/// Mean of `‖x − y‖^alpha` over unit-normalized pairs.
pub fn alignment(pairs: &[(&[f32], &[f32])], alpha: f64) -> Result<f64> {
    check_param("alpha", alpha)?;
    if pairs.is_empty() {
        return Err(GeometryError::NoPairs);
    }
    let mut total = 0.0;
    let mut u = Vec::new();
    let mut v = Vec::new();
    for (x, y) in pairs {
        if x.len() != y.len() {
            return Err(GeometryError::DimMismatch(x.len(), y.len()));
        }
        u.clear();
        v.clear();
        to_unit(x, &mut u)?;
        to_unit(y, &mut v)?;
        let d2 = sq_dist(&u, &v);
        total += if alpha == 2.0 { d2 } else { d2.powf(alpha / 2.0) };
    }
    Ok(total / pairs.len() as f64)
}

/// Log of the mean Gaussian kernel over within-batch ordered pairs of the
/// matrix rows. See [`uniformity_rows`].
pub fn uniformity(points: &EmbeddingMatrix, t: f64, batch_size: usize, seed: u64) -> Result<f64> {
    let rows: Vec<&[f32]> = points.rows().collect();
    uniformity_rows(&rows, t, batch_size, seed)
}

/// Uniformity over arbitrary unit rows.
///
/// Rows are shuffled with a ChaCha8 stream seeded by `seed` and cut into
/// consecutive batches of `batch_size`; a trailing batch with a single point
/// has no pairs and contributes nothing. Each batch contributes
/// `Σ_{i≠j} exp(−t‖xᵢ − xⱼ‖²)` and `m(m − 1)` pairs; the result is
/// `log(Σ sums / Σ pairs)`.
pub fn uniformity_rows(rows: &[&[f32]], t: f64, batch_size: usize, seed: u64) -> Result<f64> {
    check_param("t", t)?;
    if rows.len() < 2 {
        return Err(GeometryError::TooFewPoints(rows.len()));
    }
    if batch_size < 2 {
        return Err(GeometryError::BatchTooSmall(batch_size));
    }
    let dims = rows[0].len();
    if let Some(r) = rows.iter().find(|r| r.len() != dims) {
        return Err(GeometryError::DimMismatch(dims, r.len()));
    }

    let mut order: Vec<usize> = (0..rows.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let per_batch = order
        .par_chunks(batch_size)
        .map(|batch| -> Result<(f64, u64)> {
            let m = batch.len();
            let mut buf = Vec::with_capacity(m * dims);
            for &i in batch {
                to_unit(rows[i], &mut buf)?;
            }
            let mut lse = LogSumExp::default();
            for i in 0..m {
                let u = &buf[i * dims..(i + 1) * dims];
                for j in i + 1..m {
                    lse.push(-t * sq_dist(u, &buf[j * dims..(j + 1) * dims]));
                }
            }
            // Each unordered pair stands for two ordered pairs.
            let pairs = (m * (m - 1)) as u64;
            Ok((lse.value() + std::f64::consts::LN_2, pairs))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut total = LogSumExp::default();
    let mut pairs = 0u64;
    for (log_sum, count) in per_batch {
        if count > 0 {
            total.push(log_sum);
            pairs += count;
        }
    }
    // Every kernel value is ≤ 1, so the mean's log is ≤ 0.
    Ok((total.value() - (pairs as f64).ln()).min(0.0))
}

/// Estimator settings for [`diagnose`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiagConfig {
    pub alpha: f64,
    pub t: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for DiagConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            t: DEFAULT_T,
            batch_size: DEFAULT_BATCH_SIZE,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagReport {
    pub align: f64,
    pub uniform: f64,
    pub alpha: f64,
    pub t: f64,
    pub n_pos_pairs: usize,
    pub n_data_points: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl DiagReport {
    /// `label<TAB>align<TAB>uniform<TAB>recall` with an empty recall column
    /// when none is given.
    pub fn write_row<W: Write>(&self, label: &str, recall: Option<f64>, w: &mut W) -> io::Result<()> {
        let recall = recall.map(tsv::fmt_exact).unwrap_or_default();
        writeln!(
            w,
            "{label}\t{}\t{}\t{recall}",
            tsv::fmt_exact(self.align),
            tsv::fmt_exact(self.uniform)
        )
    }
}

/// Alignment over (query, clicked document) pairs and uniformity over the
/// distinct queries and documents taking part in those pairs.
///
/// Every judgment with a positive gain is a positive pair. Query ids resolve
/// against `query_emb`, document ids against `doc_emb`; unnormalized matrices
/// are normalized first.
pub fn diagnose(
    query_emb: &EmbeddingMatrix,
    doc_emb: &EmbeddingMatrix,
    positives: &RelevanceSet,
    config: &DiagConfig,
) -> Result<DiagReport> {
    if query_emb.dims() != doc_emb.dims() {
        return Err(GeometryError::DimMismatch(query_emb.dims(), doc_emb.dims()));
    }
    let queries = store::ensure_normalized(query_emb)?;
    let docs = store::ensure_normalized(doc_emb)?;

    let mut pairs = Vec::new();
    let mut query_rows = Vec::new();
    let mut doc_rows = Vec::new();
    let mut seen_docs = HashSet::new();
    for (q, judgments) in positives.iter() {
        let qi = queries
            .index_of(q)
            .ok_or_else(|| GeometryError::UnknownId(q.to_owned()))?;
        let mut used = false;
        for j in judgments.iter().filter(|j| j.gain > 0.0) {
            let di = docs
                .index_of(&j.doc_id)
                .ok_or_else(|| GeometryError::UnknownId(j.doc_id.clone()))?;
            pairs.push((queries.row(qi), docs.row(di)));
            if seen_docs.insert(di) {
                doc_rows.push(di);
            }
            used = true;
        }
        if used {
            query_rows.push(qi);
        }
    }

    let align = alignment(&pairs, config.alpha)?;
    let points: Vec<&[f32]> = query_rows
        .iter()
        .map(|&i| queries.row(i))
        .chain(doc_rows.iter().map(|&i| docs.row(i)))
        .collect();
    let uniform = uniformity_rows(&points, config.t, config.batch_size, config.seed)?;

    Ok(DiagReport {
        align,
        uniform,
        alpha: config.alpha,
        t: config.t,
        n_pos_pairs: pairs.len(),
        n_data_points: points.len(),
        batch_size: config.batch_size,
        seed: config.seed,
    })
}
