//! Translation-quality selection and filtering of machine-translated NLI data.
//!
//! Quality scores come from a score file (`sentence_id<TAB>system<TAB>score`).
//! For each sentence the best-scoring system is kept; examples are then pruned
//! by a score threshold and the surviving triplets are materialized.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use log::warn;
use thiserror::Error;

use crate::store::{StoreError, TripletRecord, TripletSet};
use crate::tsv;

#[derive(Debug, Error)]
pub enum FilterError {
    #[error("duplicate score for sentence {sentence:?} from system {system:?}")]
    Duplicate { sentence: String, system: String },
    #[error("no scores given")]
    Empty,
    #[error("non-finite score for sentence {0:?}")]
    NonFinite(String),
    #[error("unknown id {0:?}")]
    UnknownId(String),
    #[error("triplet {triplet:?}: no score for member sentence {sentence:?}")]
    MissingScore { triplet: String, sentence: String },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error(transparent)]
    Store(#[from] StoreError),
}

pub type Result<T> = std::result::Result<T, FilterError>;

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredTranslation {
    pub sentence_id: String,
    pub system: String,
    pub score: f64,
}

pub fn load_scores(path: &Path) -> Result<Vec<ScoredTranslation>> {
    let bad = |message: String| FilterError::Parse {
        path: path.display().to_string(),
        message,
    };
    tsv::read_records(path)
        .map_err(|e| bad(e.to_string()))?
        .into_iter()
        .map(|r| {
            if r.fields.len() != 3 {
                return Err(bad(format!(
                    "line {}: expected sentence_id<TAB>system<TAB>score",
                    r.line
                )));
            }
            let score: f64 = r.fields[2]
                .trim()
                .parse()
                .map_err(|_| bad(format!("line {}: cannot parse score {:?}", r.line, r.fields[2])))?;
            Ok(ScoredTranslation {
                sentence_id: r.fields[0].clone(),
                system: r.fields[1].clone(),
                score,
            })
        })
        .collect()
}

/// The system chosen for a sentence and its score.
#[derive(Debug, Clone, PartialEq)]
pub struct BestTranslation {
    pub system: String,
    pub score: f64,
}

/// Highest-scoring system per sentence; equal scores go to the
/// lexicographically smallest system name.
pub fn select_best_translation(scores: &[ScoredTranslation]) -> Result<BTreeMap<String, BestTranslation>> {
    let mut seen = HashSet::new();
    let mut best: BTreeMap<String, BestTranslation> = BTreeMap::new();
    for s in scores {
        if !s.score.is_finite() {
            return Err(FilterError::NonFinite(s.sentence_id.clone()));
        }
        if !seen.insert((s.sentence_id.as_str(), s.system.as_str())) {
            return Err(FilterError::Duplicate {
                sentence: s.sentence_id.clone(),
                system: s.system.clone(),
            });
        }
        let better = match best.get(&s.sentence_id) {
            None => true,
            Some(cur) => s.score > cur.score || (s.score == cur.score && s.system < cur.system),
        };
        if better {
            best.insert(
                s.sentence_id.clone(),
                BestTranslation {
                    system: s.system.clone(),
                    score: s.score,
                },
            );
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterStats {
    pub input_count: usize,
    pub output_count: usize,
    pub removed_fraction: f64,
    pub mean_score_before: f64,
    /// `None` when nothing survives.
    pub mean_score_after: Option<f64>,
}

/// Keeps ids with `score ≥ threshold`, in id order.
pub fn filter_by_threshold(
    scores: &BTreeMap<String, f64>,
    threshold: f64,
) -> Result<(Vec<String>, FilterStats)> {
    if scores.is_empty() {
        return Err(FilterError::Empty);
    }
    if let Some((id, _)) = scores.iter().find(|(_, s)| !s.is_finite()) {
        return Err(FilterError::NonFinite(id.clone()));
    }
    let mut retained = Vec::new();
    let mut kept_scores = Vec::new();
    for (id, &s) in scores {
        if s >= threshold {
            retained.push(id.clone());
            kept_scores.push(s);
        }
    }
    let all: Vec<f64> = scores.values().copied().collect();
    let mean = |v: &[f64]| crate::metrics::pairwise_sum(v) / v.len() as f64;
    let input = scores.len();
    let output = retained.len();
    if output == 0 {
        warn!("threshold {threshold} removes all {input} examples");
    }
    let stats = FilterStats {
        input_count: input,
        output_count: output,
        removed_fraction: (input - output) as f64 / input as f64,
        mean_score_before: mean(&all),
        mean_score_after: (output > 0).then(|| mean(&kept_scores)),
    };
    Ok((retained, stats))
}

/// How the per-sentence scores of a triplet's members combine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Aggregate {
    #[default]
    Min,
    Mean,
}

/// One score per triplet from the scores of its anchor, positive and negative
/// sentences. Every member needs a score.
pub fn triplet_scores(
    records: &[TripletRecord],
    sentence_scores: &BTreeMap<String, f64>,
    aggregate: Aggregate,
) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    for r in records {
        let mut member = [0.0; 3];
        for (slot, id) in member
            .iter_mut()
            .zip([&r.anchor_id, &r.positive_id, &r.negative_id])
        {
            *slot = *sentence_scores.get(id).ok_or_else(|| FilterError::MissingScore {
                triplet: r.triplet_id.clone(),
                sentence: id.clone(),
            })?;
        }
        let score = match aggregate {
            Aggregate::Min => member.iter().copied().fold(f64::INFINITY, f64::min),
            Aggregate::Mean => member.iter().sum::<f64>() / 3.0,
        };
        out.insert(r.triplet_id.clone(), score);
    }
    Ok(out)
}

/// The retained triplets in their original order.
pub fn materialize_filtered_triplets(triplets: &TripletSet, retained: &[String]) -> Result<TripletSet> {
    let position: HashMap<&str, usize> = triplets
        .triplet_ids()
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let mut rows = retained
        .iter()
        .map(|id| {
            position
                .get(id.as_str())
                .copied()
                .ok_or_else(|| FilterError::UnknownId(id.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    rows.sort_unstable();
    rows.dedup();
    Ok(triplets.subset(&rows)?)
}
