//! Supervised contrastive objective with in-batch and hard negatives, its
//! analytic gradient through a linear projection head, and a gradient-descent
//! trainer for that head over frozen embeddings.
//!
//! For a batch of `N` triplets `(hᵢ, hᵢ⁺, hᵢ⁻)` with cosine similarity `sim`
//! and temperature `τ`, example `i` contributes
//!
//! ```text
//! −log  exp(sim(hᵢ, hᵢ⁺)/τ) / Σⱼ [ exp(sim(hᵢ, hⱼ⁺)/τ) + exp(sim(hᵢ, hⱼ⁻)/τ) ]
//! ```
//!
//! (the `hⱼ⁻` terms only when hard negatives are used) and the batch loss is
//! the mean. The softmax runs with row-max subtraction, all in f64.

use std::io::{self, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::store::{self, EmbeddingMatrix, Format, StoreError, TripletSet};
use crate::tsv;

pub const DEFAULT_TAU: f64 = 0.05;

#[derive(Debug, Error)]
pub enum ContrastiveError {
    #[error("temperature must be positive and finite, got {0}")]
    BadTau(f64),
    #[error("learning rate must be positive and finite, got {0}")]
    BadLearningRate(f64),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("empty batch")]
    Empty,
    #[error("zero-norm {set} row {row}")]
    ZeroNorm { set: &'static str, row: usize },
    #[error("batch size {batch} exceeds the {n} available triplets")]
    BatchTooLarge { batch: usize, n: usize },
    #[error("batch size must be at least 2, got {0}")]
    BatchTooSmall(usize),
    #[error("non-finite loss in epoch {epoch}, batch {batch}; lower the learning rate or raise tau")]
    Diverged { epoch: usize, batch: usize },
    #[error("invalid head: {0}")]
    Head(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

pub type Result<T> = std::result::Result<T, ContrastiveError>;

/// Dense row-major f64 matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(ContrastiveError::Shape(format!(
                "{} values for a {rows}×{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_embeddings(m: &EmbeddingMatrix) -> Self {
        Self {
            rows: m.len(),
            cols: m.dims(),
            data: m.values().iter().map(|&v| f64::from(v)).collect(),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    fn select(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    fn stack(&self, other: &Self) -> Self {
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Self {
            rows: self.rows + other.rows,
            cols: self.cols,
            data,
        }
    }
}

fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

/// Trainable affine map `z = W x + b` with `W` of shape `d_out × d_in`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead {
    d_in: usize,
    d_out: usize,
    weight: Vec<f64>,
    bias: Option<Vec<f64>>,
}

impl ProjectionHead {
    pub fn new(d_in: usize, d_out: usize, weight: Vec<f64>, bias: Option<Vec<f64>>) -> Result<Self> {
        if d_in == 0 || d_out == 0 {
            return Err(ContrastiveError::Head("dimensions must be positive".into()));
        }
        if weight.len() != d_in * d_out {
            return Err(ContrastiveError::Head(format!(
                "{} weights for a {d_out}×{d_in} map",
                weight.len()
            )));
        }
        if bias.as_ref().is_some_and(|b| b.len() != d_out) {
            return Err(ContrastiveError::Head("bias length differs from d_out".into()));
        }
        let finite = weight.iter().chain(bias.iter().flatten()).all(|v| v.is_finite());
        if !finite {
            return Err(ContrastiveError::Head("non-finite parameter".into()));
        }
        Ok(Self {
            d_in,
            d_out,
            weight,
            bias,
        })
    }

    pub fn identity(d: usize, with_bias: bool) -> Result<Self> {
        let mut weight = vec![0.0; d * d];
        for i in 0..d {
            weight[i * d + i] = 1.0;
        }
        Self::new(d, d, weight, with_bias.then(|| vec![0.0; d]))
    }

    /// Weights drawn uniformly from `(−1/√d_in, 1/√d_in)`; bias starts at zero.
    pub fn random<R: Rng>(d_in: usize, d_out: usize, with_bias: bool, rng: &mut R) -> Result<Self> {
        let bound = 1.0 / (d_in as f64).sqrt();
        let weight = (0..d_in * d_out)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Self::new(d_in, d_out, weight, with_bias.then(|| vec![0.0; d_out]))
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    pub fn weight(&self) -> &[f64] {
        &self.weight
    }

    pub fn bias(&self) -> Option<&[f64]> {
        self.bias.as_deref()
    }

    pub fn apply_row(&self, x: &[f64], out: &mut Vec<f64>) {
        for k in 0..self.d_out {
            let w = &self.weight[k * self.d_in..(k + 1) * self.d_in];
            let b = self.bias.as_ref().map_or(0.0, |b| b[k]);
            out.push(dot(w, x) + b);
        }
    }

    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols != self.d_in {
            return Err(ContrastiveError::Shape(format!(
                "head expects {} inputs, rows have {}",
                self.d_in, x.cols
            )));
        }
        let data = (0..x.rows)
            .into_par_iter()
            .flat_map_iter(|i| {
                let mut out = Vec::with_capacity(self.d_out);
                self.apply_row(x.row(i), &mut out);
                out
            })
            .collect();
        Ok(Matrix {
            rows: x.rows,
            cols: self.d_out,
            data,
        })
    }
}

/// Maps every row through the head. The output is not normalized.
pub fn apply_head(matrix: &EmbeddingMatrix, head: &ProjectionHead) -> Result<EmbeddingMatrix> {
    let projected = head.apply(&Matrix::from_embeddings(matrix))?;
    let values = projected.data.iter().map(|&v| v as f32).collect();
    Ok(EmbeddingMatrix::new(matrix.ids().to_vec(), head.d_out, values)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub per_example: Vec<f64>,
}

/// Rows divided by their norms, and the norms.
fn unit_rows(m: &Matrix, set: &'static str) -> Result<(Matrix, Vec<f64>)> {
    let mut data = Vec::with_capacity(m.data.len());
    let mut norms = Vec::with_capacity(m.rows);
    for i in 0..m.rows {
        let row = m.row(i);
        let norm = dot(row, row).sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(ContrastiveError::ZeroNorm { set, row: i + 1 });
        }
        data.extend(row.iter().map(|v| v / norm));
        norms.push(norm);
    }
    Ok((
        Matrix {
            rows: m.rows,
            cols: m.cols,
            data,
        },
        norms,
    ))
}

struct Forward {
    loss: LossBreakdown,
    /// Softmax over the candidates of each anchor, `N × C`.
    probs: Vec<f64>,
}

/// Loss and softmax for unit anchors against unit candidates whose first `N`
/// rows are the aligned positives.
fn forward(anchors: &Matrix, candidates: &Matrix, tau: f64) -> Forward {
    let n = anchors.rows;
    let c = candidates.rows;
    let rows: Vec<(f64, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let a = anchors.row(i);
            let logits: Vec<f64> = (0..c).map(|j| dot(a, candidates.row(j)) / tau).collect();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = logits.iter().map(|l| (l - max).exp()).sum();
            let lse = max + sum.ln();
            let probs = logits.iter().map(|l| (l - lse).exp()).collect();
            ((lse - logits[i]).max(0.0), probs)
        })
        .collect();
    let mut per_example = Vec::with_capacity(n);
    let mut probs = Vec::with_capacity(n * c);
    for (l, p) in rows {
        per_example.push(l);
        probs.extend(p);
    }
    let total = crate::metrics::pairwise_sum(&per_example) / n as f64;
    Forward {
        loss: LossBreakdown { total, per_example },
        probs,
    }
}

fn check_batch(
    anchors: &Matrix,
    positives: &Matrix,
    hard_negatives: Option<&Matrix>,
    tau: f64,
) -> Result<()> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(ContrastiveError::BadTau(tau));
    }
    if anchors.rows == 0 {
        return Err(ContrastiveError::Empty);
    }
    for (name, m) in [("positives", Some(positives)), ("hard negatives", hard_negatives)] {
        if let Some(m) = m {
            if m.rows != anchors.rows || m.cols != anchors.cols {
                return Err(ContrastiveError::Shape(format!(
                    "{name} are {}×{}, anchors are {}×{}",
                    m.rows, m.cols, anchors.rows, anchors.cols
                )));
            }
        }
    }
    Ok(())
}

/// Contrastive loss of a batch of raw (unnormalized) embeddings.
pub fn contrastive_loss(
    anchors: &Matrix,
    positives: &Matrix,
    hard_negatives: Option<&Matrix>,
    tau: f64,
) -> Result<LossBreakdown> {
    check_batch(anchors, positives, hard_negatives, tau)?;
    let (a, _) = unit_rows(anchors, "anchor")?;
    let (p, _) = unit_rows(positives, "positive")?;
    let candidates = match hard_negatives {
        Some(n) => p.stack(&unit_rows(n, "hard negative")?.0),
        None => p,
    };
    Ok(forward(&a, &candidates, tau).loss)
}

/// Gradient of the mean loss with respect to the head parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGradient {
    /// Same layout as [`ProjectionHead::weight`].
    pub weight: Vec<f64>,
    pub bias: Option<Vec<f64>>,
    pub loss: LossBreakdown,
}

impl HeadGradient {
    pub fn max_abs(&self) -> f64 {
        self.weight
            .iter()
            .chain(self.bias.iter().flatten())
            .fold(0.0, |m, g| m.max(g.abs()))
    }
}

/// Back-propagates through `z ↦ z/‖z‖`: `(g − ẑ(ẑ·g)) / ‖z‖`.
fn through_normalization(grad_hat: &[f64], hat: &[f64], norm: f64, out: &mut Vec<f64>) {
    let proj = dot(hat, grad_hat);
    out.extend(grad_hat.iter().zip(hat).map(|(g, h)| (g - h * proj) / norm));
}

/// Loss and exact gradient for a batch of raw inputs passed through `head`.
pub fn contrastive_grad(
    anchors: &Matrix,
    positives: &Matrix,
    hard_negatives: Option<&Matrix>,
    tau: f64,
    head: &ProjectionHead,
) -> Result<HeadGradient> {
    check_batch(anchors, positives, hard_negatives, tau)?;
    let n = anchors.rows;
    let inputs_c = match hard_negatives {
        Some(neg) => positives.stack(neg),
        None => positives.clone(),
    };
    let (a_hat, a_norm) = unit_rows(&head.apply(anchors)?, "anchor")?;
    let (c_hat, c_norm) = unit_rows(&head.apply(&inputs_c)?, "candidate")?;
    let c = c_hat.rows;
    let d = head.d_out;

    let fwd = forward(&a_hat, &c_hat, tau);

    // dL/dsᵢⱼ = (pᵢⱼ − [i = j]) / (N τ)
    let scale = 1.0 / (n as f64 * tau);
    let mut g = fwd.probs;
    for i in 0..n {
        g[i * c + i] -= 1.0;
    }
    g.iter_mut().for_each(|v| *v *= scale);

    // Gradients w.r.t. the pre-normalization projections.
    let mut dz_a = Vec::with_capacity(n * d);
    let mut buf = vec![0.0; d];
    for i in 0..n {
        buf.iter_mut().for_each(|v| *v = 0.0);
        for j in 0..c {
            let gij = g[i * c + j];
            for (b, x) in buf.iter_mut().zip(c_hat.row(j)) {
                *b += gij * x;
            }
        }
        through_normalization(&buf, a_hat.row(i), a_norm[i], &mut dz_a);
    }
    let mut dz_c = Vec::with_capacity(c * d);
    for j in 0..c {
        buf.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..n {
            let gij = g[i * c + j];
            for (b, x) in buf.iter_mut().zip(a_hat.row(i)) {
                *b += gij * x;
            }
        }
        through_normalization(&buf, c_hat.row(j), c_norm[j], &mut dz_c);
    }

    // dW[k, l] = Σ_rows dz[k] x[l]; one output row per task keeps the
    // summation order fixed.
    let d_in = head.d_in;
    let weight: Vec<f64> = (0..d)
        .into_par_iter()
        .flat_map_iter(|k| {
            let mut row = vec![0.0; d_in];
            for (dz, x) in [(&dz_a, anchors), (&dz_c, &inputs_c)] {
                for r in 0..x.rows {
                    let gk = dz[r * d + k];
                    for (w, xv) in row.iter_mut().zip(x.row(r)) {
                        *w += gk * xv;
                    }
                }
            }
            row
        })
        .collect();
    let bias = head.bias.as_ref().map(|_| {
        (0..d)
            .map(|k| {
                let sa: f64 = (0..n).map(|r| dz_a[r * d + k]).sum();
                let sc: f64 = (0..c).map(|r| dz_c[r * d + k]).sum();
                sa + sc
            })
            .collect()
    });

    Ok(HeadGradient {
        weight,
        bias,
        loss: fwd.loss,
    })
}

/// Hyperparameters of [`train_head`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub tau: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub use_hard_negatives: bool,
    /// Output width; `None` keeps the input width (identity initialization).
    pub d_out: Option<usize>,
    pub bias: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            learning_rate: 0.05,
            epochs: 1,
            batch_size: 64,
            seed: 0,
            use_hard_negatives: true,
            d_out: None,
            bias: false,
        }
    }
}

/// Passed to the per-epoch hook of [`train_head`].
#[derive(Debug)]
pub struct EpochReport<'a> {
    /// 1-based.
    pub epoch: usize,
    pub mean_loss: f64,
    pub head: &'a ProjectionHead,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub head: ProjectionHead,
    /// Example-weighted mean loss of each epoch, measured before each step.
    pub loss_history: Vec<f64>,
}

/// The head [`train_head`] starts from.
pub fn initial_head(d_in: usize, config: &TrainConfig) -> Result<ProjectionHead> {
    let d_out = config.d_out.unwrap_or(d_in);
    if d_out == d_in {
        ProjectionHead::identity(d_in, config.bias)
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        ProjectionHead::random(d_in, d_out, config.bias, &mut rng)
    }
}

/// Fits a projection head with plain mini-batch gradient descent.
///
/// Each epoch reshuffles the triplets with a ChaCha8 stream seeded by
/// `config.seed` and takes one step per consecutive batch; the final partial
/// batch is kept. The run is a pure function of the inputs and the config.
pub fn train_head(
    triplets: &TripletSet,
    config: &TrainConfig,
    mut eval_hook: Option<&mut dyn FnMut(&EpochReport<'_>)>,
) -> Result<TrainOutcome> {
    if !(config.tau.is_finite() && config.tau > 0.0) {
        return Err(ContrastiveError::BadTau(config.tau));
    }
    if !(config.learning_rate.is_finite() && config.learning_rate > 0.0) {
        return Err(ContrastiveError::BadLearningRate(config.learning_rate));
    }
    if config.batch_size < 2 {
        return Err(ContrastiveError::BatchTooSmall(config.batch_size));
    }
    let n = triplets.len();
    if config.batch_size > n {
        return Err(ContrastiveError::BatchTooLarge {
            batch: config.batch_size,
            n,
        });
    }

    let mut head = initial_head(triplets.dims(), config)?;
    let anchors = Matrix::from_embeddings(&triplets.anchors);
    let positives = Matrix::from_embeddings(&triplets.positives);
    let negatives = Matrix::from_embeddings(&triplets.hard_negatives);

    // Separate stream from the initialization so both stay reproducible.
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5348_5546_464c_4521);
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut weighted = 0.0;
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let a = anchors.select(batch);
            let p = positives.select(batch);
            let neg = config.use_hard_negatives.then(|| negatives.select(batch));
            let grad = contrastive_grad(&a, &p, neg.as_ref(), config.tau, &head)?;
            if !grad.loss.total.is_finite() || !grad.weight.iter().all(|g| g.is_finite()) {
                return Err(ContrastiveError::Diverged { epoch, batch: b + 1 });
            }
            weighted += grad.loss.total * batch.len() as f64;
            for (w, g) in head.weight.iter_mut().zip(&grad.weight) {
                *w -= config.learning_rate * g;
            }
            if let (Some(bias), Some(gb)) = (head.bias.as_mut(), grad.bias.as_ref()) {
                for (w, g) in bias.iter_mut().zip(gb) {
                    *w -= config.learning_rate * g;
                }
            }
        }
        let mean_loss = weighted / n as f64;
        history.push(mean_loss);
        if let Some(hook) = eval_hook.as_mut() {
            hook(&EpochReport {
                epoch,
                mean_loss,
                head: &head,
            });
        }
    }

    Ok(TrainOutcome {
        head,
        loss_history: history,
    })
}

const BIAS_ROW_ID: &str = "bias";

/// Stores the head in the binary embedding format: one row per output
/// dimension (`w0`, `w1`, ...) and a final `bias` row when present. Values
/// are narrowed to f32.
pub fn save_head(head: &ProjectionHead, path: &Path) -> Result<()> {
    store::save_embeddings(&head_to_matrix(head)?, path, Format::Binary)?;
    Ok(())
}

pub fn head_to_matrix(head: &ProjectionHead) -> Result<EmbeddingMatrix> {
    let mut ids: Vec<String> = (0..head.d_out).map(|k| format!("w{k}")).collect();
    let mut values: Vec<f32> = head.weight.iter().map(|&v| v as f32).collect();
    if let Some(b) = &head.bias {
        ids.push(BIAS_ROW_ID.to_owned());
        // The bias row is d_out wide; pad to d_in.
        let mut row: Vec<f32> = b.iter().map(|&v| v as f32).collect();
        if head.d_out > head.d_in {
            return Err(ContrastiveError::Head(
                "a biased head with d_out > d_in cannot be stored as one matrix".into(),
            ));
        }
        row.resize(head.d_in, 0.0);
        values.extend(row);
    }
    Ok(EmbeddingMatrix::new(ids, head.d_in, values)?)
}

pub fn load_head(path: &Path) -> Result<ProjectionHead> {
    let m = store::load_embeddings(path, Format::Binary)?;
    let d_in = m.dims();
    let has_bias = m.ids().last().is_some_and(|id| id == BIAS_ROW_ID);
    let d_out = m.len() - usize::from(has_bias);
    let weight = m.values()[..d_out * d_in].iter().map(|&v| f64::from(v)).collect();
    let bias = has_bias.then(|| m.row(d_out)[..d_out].iter().map(|&v| f64::from(v)).collect());
    ProjectionHead::new(d_in, d_out, weight, bias)
}

/// `key<TAB>value` training metadata followed by `loss<TAB>epoch<TAB>value` lines.
pub fn write_train_metadata<W: Write>(
    config: &TrainConfig,
    head: &ProjectionHead,
    loss_history: &[f64],
    w: &mut W,
) -> io::Result<()> {
    writeln!(w, "tau\t{}", tsv::fmt_exact(config.tau))?;
    writeln!(w, "learning_rate\t{}", tsv::fmt_exact(config.learning_rate))?;
    writeln!(w, "epochs\t{}", config.epochs)?;
    writeln!(w, "batch_size\t{}", config.batch_size)?;
    writeln!(w, "seed\t{}", config.seed)?;
    writeln!(w, "hard_negatives\t{}", config.use_hard_negatives)?;
    writeln!(w, "d_in\t{}", head.d_in)?;
    writeln!(w, "d_out\t{}", head.d_out)?;
    writeln!(w, "bias\t{}", head.bias.is_some())?;
    for (e, l) in loss_history.iter().enumerate() {
        writeln!(w, "loss\t{}\t{}", e + 1, tsv::fmt_exact(*l))?;
    }
    Ok(())
}
