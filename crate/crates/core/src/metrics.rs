//! Ranking and retrieval metrics: click-based NDCG over cosine-reranked
//! listings, Recall@K over retrieval runs, and the paired Student t-test used
//! to compare two systems query by query.

use std::collections::{HashMap, HashSet};
use std::io::{self, Write};
use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::simsearch::{self, NeighborList, SearchError};
use crate::store::{Listing, RelevanceSet};
use crate::tsv;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("no gains to score")]
    Empty,
    #[error("gain at rank {rank} is negative or non-finite: {gain}")]
    BadGain { rank: usize, gain: f64 },
    #[error("truncation depth must be positive")]
    ZeroTruncation,
    #[error("k must be positive")]
    ZeroK,
    #[error("query {0:?} has no relevant documents")]
    NoRelevant(String),
    #[error("listing {listing:?}: {source}")]
    Listing {
        listing: String,
        #[source]
        source: SearchError,
    },
    #[error("samples differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 paired samples, got {0}")]
    TooFewSamples(usize),
    #[error("query {0:?} appears in only one of the compared reports")]
    UnpairedQuery(String),
    #[error("non-finite sample at index {0}")]
    NonFiniteSample(usize),
    #[error("{path}: {message}")]
    Report { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, MetricError>;

/// Per-query values of one metric plus their mean.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub metric_name: String,
    pub per_query: Vec<(String, f64)>,
    pub mean: f64,
    pub k: Option<usize>,
}

impl MetricReport {
    pub fn new(metric_name: impl Into<String>, per_query: Vec<(String, f64)>, k: Option<usize>) -> Self {
        let values: Vec<f64> = per_query.iter().map(|(_, v)| *v).collect();
        let mean = if values.is_empty() {
            0.0
        } else {
            pairwise_sum(&values) / values.len() as f64
        };
        Self {
            metric_name: metric_name.into(),
            per_query,
            mean,
            k,
        }
    }

    /// `query_id<TAB>value` lines followed by a `#` summary line.
    pub fn write_tsv<W: Write>(&self, w: &mut W) -> io::Result<()> {
        for (q, v) in &self.per_query {
            writeln!(w, "{q}\t{}", tsv::fmt_exact(*v))?;
        }
        let k = self.k.map_or_else(|| "none".to_owned(), |k| k.to_string());
        writeln!(
            w,
            "# summary\tmetric={}\tk={k}\tn={}\tmean={}",
            self.metric_name,
            self.per_query.len(),
            tsv::fmt_exact(self.mean)
        )
    }
}

/// Reads the per-query lines of a report written by [`MetricReport::write_tsv`].
pub fn read_per_query(path: &Path) -> Result<Vec<(String, f64)>> {
    let bad = |message: String| MetricError::Report {
        path: path.display().to_string(),
        message,
    };
    let records = tsv::read_records(path).map_err(|e| bad(e.to_string()))?;
    let mut seen = HashSet::new();
    records
        .into_iter()
        .map(|r| {
            if r.fields.len() != 2 {
                return Err(bad(format!("line {}: expected query_id<TAB>value", r.line)));
            }
            let v: f64 = r.fields[1]
                .parse()
                .map_err(|_| bad(format!("line {}: cannot parse {:?}", r.line, r.fields[1])))?;
            if !seen.insert(r.fields[0].clone()) {
                return Err(bad(format!("line {}: duplicate query {:?}", r.line, r.fields[0])));
            }
            Ok((r.fields[0].clone(), v))
        })
        .collect()
}

/// Sum with pairwise (cascade) splitting; the order is fixed by the length.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    if values.len() <= 8 {
        values.iter().sum()
    } else {
        let mid = values.len() / 2;
        pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
    }
}

/// Candidate indices sorted by cosine to the query, descending. Equal scores
/// keep listing order.
pub fn rerank_listing(listing: &Listing<'_>) -> Result<Vec<usize>> {
    let scores = listing
        .candidates
        .iter()
        .map(|c| simsearch::cosine(listing.query, c.embedding))
        .collect::<std::result::Result<Vec<f64>, _>>()
        .map_err(|source| MetricError::Listing {
            listing: listing.query_id.clone(),
            source,
        })?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    Ok(order)
}

fn dcg(gains: &[f64]) -> f64 {
    gains
        .iter()
        .enumerate()
        .map(|(i, g)| g / ((i + 2) as f64).log2())
        .sum()
}

/// NDCG with linear gains and a `log2(rank + 1)` discount, optionally
/// truncated to the first `truncation` ranks. All-zero gains score 0.
pub fn ndcg(gains_in_ranked_order: &[f64], truncation: Option<usize>) -> Result<f64> {
    if gains_in_ranked_order.is_empty() {
        return Err(MetricError::Empty);
    }
    if truncation == Some(0) {
        return Err(MetricError::ZeroTruncation);
    }
    if let Some((i, &g)) = gains_in_ranked_order
        .iter()
        .enumerate()
        .find(|(_, g)| !g.is_finite() || **g < 0.0)
    {
        return Err(MetricError::BadGain { rank: i + 1, gain: g });
    }
    let depth = truncation.unwrap_or(usize::MAX).min(gains_in_ranked_order.len());
    let mut ideal = gains_in_ranked_order.to_vec();
    ideal.sort_by(|a, b| b.total_cmp(a));
    let idcg = dcg(&ideal[..depth]);
    if idcg == 0.0 {
        return Ok(0.0);
    }
    Ok((dcg(&gains_in_ranked_order[..depth]) / idcg).min(1.0))
}

/// Mean NDCG of cosine-reranked listings.
pub fn evaluate_ranking(listings: &[Listing<'_>], truncation: Option<usize>) -> Result<MetricReport> {
    if listings.is_empty() {
        return Err(MetricError::Empty);
    }
    let per_query = listings
        .par_iter()
        .map(|l| {
            let order = rerank_listing(l)?;
            let gains: Vec<f64> = order.iter().map(|&i| l.candidates[i].gain).collect();
            Ok((l.query_id.clone(), ndcg(&gains, truncation)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let name = match truncation {
        Some(t) => format!("ndcg@{t}"),
        None => "ndcg".to_owned(),
    };
    Ok(MetricReport::new(name, per_query, truncation))
}

/// Fraction of each query's positive-gain documents found in its first `k` hits.
pub fn recall_at_k(runs: &[NeighborList], rels: &RelevanceSet, k: usize) -> Result<MetricReport> {
    if k == 0 {
        return Err(MetricError::ZeroK);
    }
    let per_query = runs
        .iter()
        .map(|run| {
            let relevant: HashSet<&str> = rels
                .get(&run.query_id)
                .unwrap_or_default()
                .iter()
                .filter(|j| j.gain > 0.0)
                .map(|j| j.doc_id.as_str())
                .collect();
            if relevant.is_empty() {
                return Err(MetricError::NoRelevant(run.query_id.clone()));
            }
            let found: HashSet<&str> = run
                .hits
                .iter()
                .take(k)
                .map(|h| h.doc_id.as_str())
                .filter(|d| relevant.contains(d))
                .collect();
            Ok((run.query_id.clone(), found.len() as f64 / relevant.len() as f64))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport::new(format!("recall@{k}"), per_query, Some(k)))
}

/// Result of a two-sided paired t-test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
    pub df: usize,
}

/// Two-sided paired Student t-test on `a − b` with `n − 1` degrees of freedom.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(MetricError::LengthMismatch(a.len(), b.len()));
    }
    let n = a.len();
    if n < 2 {
        return Err(MetricError::TooFewSamples(n));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    if let Some(i) = diffs.iter().position(|d| !d.is_finite()) {
        return Err(MetricError::NonFiniteSample(i));
    }
    let df = n - 1;
    if diffs.iter().all(|&d| d == 0.0) {
        return Ok(TTest { t: 0.0, p: 1.0, df });
    }
    let mean = pairwise_sum(&diffs) / n as f64;
    let sq: Vec<f64> = diffs.iter().map(|d| (d - mean) * (d - mean)).collect();
    let var = pairwise_sum(&sq) / df as f64;
    let se = (var / n as f64).sqrt();
    let t = if se == 0.0 {
        // Constant nonzero difference: infinitely significant.
        mean.signum() * f64::INFINITY
    } else {
        mean / se
    };
    Ok(TTest {
        t,
        p: student_t_two_sided_p(t, df as f64),
        df,
    })
}

/// `P(|T| ≥ |t|)` for Student's t with `df` degrees of freedom.
pub fn student_t_two_sided_p(t: f64, df: f64) -> f64 {
    if t.is_infinite() {
        return 0.0;
    }
    let x = df / (df + t * t);
    regularized_incomplete_beta(x, df / 2.0, 0.5).clamp(0.0, 1.0)
}

/// Natural log of the gamma function (Lanczos, g = 7, 9 terms), `x > 0`.
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // Reflection.
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut sum = COEF[0];
    for (i, c) in COEF.iter().enumerate().skip(1) {
        sum += c / (x + i as f64);
    }
    let t = x + G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + sum.ln()
}

/// Regularized incomplete beta `I_x(a, b)` by Lentz's continued fraction.
pub fn regularized_incomplete_beta(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    // The fraction converges fast for x < (a + 1) / (a + b + 2); use symmetry otherwise.
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_continued_fraction(x, a, b) / a
    } else {
        1.0 - front * beta_continued_fraction(1.0 - x, b, a) / b
    }
}

fn beta_continued_fraction(x: f64, a: f64, b: f64) -> f64 {
    const MAX_ITER: usize = 500;
    const EPS: f64 = 1e-16;
    const TINY: f64 = 1e-300;

    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Pairs two per-query reports by query id (order of `a`) and runs the paired
/// t-test on the aligned values. Both reports must cover the same queries.
pub fn compare_reports(a: &[(String, f64)], b: &[(String, f64)]) -> Result<TTest> {
    let lookup: HashMap<&str, f64> = b.iter().map(|(q, v)| (q.as_str(), *v)).collect();
    if a.len() != b.len() {
        return Err(MetricError::LengthMismatch(a.len(), b.len()));
    }
    let mut xs = Vec::with_capacity(a.len());
    let mut ys = Vec::with_capacity(a.len());
    for (q, v) in a {
        let w = lookup
            .get(q.as_str())
            .ok_or_else(|| MetricError::UnpairedQuery(q.clone()))?;
        xs.push(*v);
        ys.push(*w);
    }
    paired_t_test(&xs, &ys)
}
