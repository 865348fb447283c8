//! Classifier heads and the losses built on them.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{argmax, dot, norm, pairwise_sum, pairwise_sum_by, Tensor};

static DEGENERATE_COSINE: AtomicU64 = AtomicU64::new(0);

/// Number of zero-norm cosine inputs seen by this process.
pub fn degenerate_cosine_count() -> u64 {
    DEGENERATE_COSINE.load(Ordering::Relaxed)
}

pub const DEFAULT_COSINE_SCALE: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Softmax,
    Cosine,
    Prototype,
}

/// Linear classifier `W e + b`, used for base pre-training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxHead {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Scaled cosine similarity between the embedding and one weight vector per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosineHead {
    pub weight: Tensor,
    pub scale: f64,
}

/// Negative squared Euclidean distance to one prototype per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeHead {
    pub prototypes: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Head {
    Softmax(SoftmaxHead),
    Cosine(CosineHead),
    Prototype(PrototypeHead),
}

/// Scores from a cosine head plus the number of rows that hit a zero norm.
#[derive(Debug, Clone, PartialEq)]
pub struct CosineScores {
    pub scores: Tensor,
    pub degenerate: usize,
}

impl CosineHead {
    pub fn classes(&self) -> usize {
        self.weight.rows()
    }

    pub fn scores(&self, embeddings: &Tensor) -> CosineScores {
        let c = self.classes();
        let mut out = Vec::with_capacity(embeddings.rows() * c);
        let mut degenerate = 0;
        let w_norms: Vec<f64> = (0..c).map(|k| norm(self.weight.row(k))).collect();
        for n in 0..embeddings.rows() {
            let e = embeddings.row(n);
            let e_norm = norm(e);
            for (k, w_norm) in w_norms.iter().enumerate() {
                let denom = e_norm * w_norm;
                if denom == 0.0 {
                    degenerate += 1;
                    out.push(0.0);
                } else {
                    out.push(self.scale * dot(e, self.weight.row(k)) / denom);
                }
            }
        }
        if degenerate > 0 {
            DEGENERATE_COSINE.fetch_add(degenerate as u64, Ordering::Relaxed);
            tracing::warn!(
                count = degenerate,
                "zero-norm cosine input treated as cosine 0"
            );
        }
        CosineScores {
            scores: Tensor::new(vec![embeddings.rows(), c], out).expect("cosine score shape"),
            degenerate,
        }
    }
}

/// Cosine scores of a single embedding (or a batch) against a cosine head.
pub fn cosine_scores(head: &CosineHead, embedding: &Tensor) -> CosineScores {
    if embedding.shape().len() == 1 {
        let e = embedding
            .clone()
            .reshape(vec![1, embedding.len()])
            .expect("row");
        let mut s = head.scores(&e);
        s.scores = s.scores.reshape(vec![head.classes()]).expect("row");
        s
    } else {
        head.scores(embedding)
    }
}

/// Class-wise mean of the embeddings. Every class in `0..classes` must appear.
pub fn class_means(embeddings: &Tensor, labels: &[usize], classes: usize) -> Result<Tensor> {
    let dim = embeddings.row_len();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::LabelOutOfRange { label: y, classes });
        }
        members[y].push(i);
    }
    let mut out = Vec::with_capacity(classes * dim);
    for (c, m) in members.iter().enumerate() {
        if m.is_empty() {
            return Err(Error::EmptyClass(c));
        }
        for d in 0..dim {
            out.push(pairwise_sum_by(m.len(), |j| embeddings.row(m[j])[d]) / m.len() as f64);
        }
    }
    Tensor::new(vec![classes, dim], out)
}

/// Prototype scores for `query` given support embeddings grouped by class.
pub fn prototype_scores(support_by_class: &[Vec<Vec<f64>>], query: &[f64]) -> Result<Vec<f64>> {
    let mut scores = Vec::with_capacity(support_by_class.len());
    for (c, members) in support_by_class.iter().enumerate() {
        if members.is_empty() {
            return Err(Error::EmptyClass(c));
        }
        let mut d2 = Vec::with_capacity(query.len());
        for (d, &q) in query.iter().enumerate() {
            let mean = pairwise_sum_by(members.len(), |j| members[j][d]) / members.len() as f64;
            d2.push((q - mean) * (q - mean));
        }
        scores.push(-pairwise_sum(&d2));
    }
    Ok(scores)
}

fn squared_distance_scores(embeddings: &Tensor, prototypes: &Tensor) -> Tensor {
    let c = prototypes.rows();
    let mut out = Vec::with_capacity(embeddings.rows() * c);
    for n in 0..embeddings.rows() {
        let e = embeddings.row(n);
        for k in 0..c {
            let p = prototypes.row(k);
            let d2: f64 = e.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum();
            out.push(-d2);
        }
    }
    Tensor::new(vec![embeddings.rows(), c], out).expect("distance score shape")
}

impl Head {
    pub fn kind(&self) -> HeadKind {
        match self {
            Head::Softmax(_) => HeadKind::Softmax,
            Head::Cosine(_) => HeadKind::Cosine,
            Head::Prototype(_) => HeadKind::Prototype,
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            Head::Softmax(h) => h.weight.rows(),
            Head::Cosine(h) => h.weight.rows(),
            Head::Prototype(h) => h.prototypes.rows(),
        }
    }

    pub fn embedding_dim(&self) -> usize {
        match self {
            Head::Softmax(h) => h.weight.row_len(),
            Head::Cosine(h) => h.weight.row_len(),
            Head::Prototype(h) => h.prototypes.row_len(),
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            Head::Softmax(h) => vec![&h.weight, &h.bias],
            Head::Cosine(h) => vec![&h.weight],
            Head::Prototype(h) => vec![&h.prototypes],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Head::Softmax(h) => vec![&mut h.weight, &mut h.bias],
            Head::Cosine(h) => vec![&mut h.weight],
            Head::Prototype(h) => vec![&mut h.prototypes],
        }
    }

    /// Class scores for a `[batch, dim]` embedding tensor.
    pub fn scores(&self, embeddings: &Tensor) -> Tensor {
        match self {
            Head::Softmax(h) => {
                let c = h.weight.rows();
                let mut out = Vec::with_capacity(embeddings.rows() * c);
                for n in 0..embeddings.rows() {
                    let e = embeddings.row(n);
                    for k in 0..c {
                        out.push(h.bias.data()[k] + dot(h.weight.row(k), e));
                    }
                }
                Tensor::new(vec![embeddings.rows(), c], out).expect("softmax score shape")
            }
            Head::Cosine(h) => h.scores(embeddings).scores,
            Head::Prototype(h) => squared_distance_scores(embeddings, &h.prototypes),
        }
    }

    /// Backpropagates score gradients into embedding and head-parameter gradients.
    pub(crate) fn backward(&self, embeddings: &Tensor, d_scores: &Tensor) -> (Tensor, Vec<Tensor>) {
        let batch = embeddings.rows();
        let dim = embeddings.row_len();
        let c = self.classes();
        let g = d_scores.data();
        let mut d_emb = vec![0.0; batch * dim];
        match self {
            Head::Softmax(h) => {
                for n in 0..batch {
                    for k in 0..c {
                        let gk = g[n * c + k];
                        for (d, w) in h.weight.row(k).iter().enumerate() {
                            d_emb[n * dim + d] += w * gk;
                        }
                    }
                }
                let mut dw = vec![0.0; c * dim];
                for k in 0..c {
                    for d in 0..dim {
                        dw[k * dim + d] =
                            pairwise_sum_by(batch, |n| g[n * c + k] * embeddings.row(n)[d]);
                    }
                }
                let db = (0..c)
                    .map(|k| pairwise_sum_by(batch, |n| g[n * c + k]))
                    .collect();
                (
                    Tensor::new(vec![batch, dim], d_emb).expect("d_emb"),
                    vec![
                        Tensor::new(vec![c, dim], dw).expect("dw"),
                        Tensor::new(vec![c], db).expect("db"),
                    ],
                )
            }
            Head::Cosine(h) => {
                // per (example, class): d cos / d e and d cos / d w
                let w_norms: Vec<f64> = (0..c).map(|k| norm(h.weight.row(k))).collect();
                let mut per_example_dw = vec![0.0; batch * c * dim];
                for n in 0..batch {
                    let e = embeddings.row(n);
                    let en = norm(e);
                    for k in 0..c {
                        let w = h.weight.row(k);
                        let wn = w_norms[k];
                        if en == 0.0 || wn == 0.0 {
                            continue;
                        }
                        let cos = dot(e, w) / (en * wn);
                        let gk = g[n * c + k] * h.scale;
                        for d in 0..dim {
                            d_emb[n * dim + d] += gk * (w[d] / (en * wn) - cos * e[d] / (en * en));
                            per_example_dw[(n * c + k) * dim + d] =
                                gk * (e[d] / (en * wn) - cos * w[d] / (wn * wn));
                        }
                    }
                }
                let dw = (0..c * dim)
                    .map(|j| pairwise_sum_by(batch, |n| per_example_dw[n * c * dim + j]))
                    .collect();
                (
                    Tensor::new(vec![batch, dim], d_emb).expect("d_emb"),
                    vec![Tensor::new(vec![c, dim], dw).expect("dw")],
                )
            }
            Head::Prototype(h) => {
                // score = -|e - p|^2
                for n in 0..batch {
                    let e = embeddings.row(n);
                    for k in 0..c {
                        let p = h.prototypes.row(k);
                        let gk = g[n * c + k];
                        for d in 0..dim {
                            d_emb[n * dim + d] += -2.0 * gk * (e[d] - p[d]);
                        }
                    }
                }
                let dp = (0..c * dim)
                    .map(|j| {
                        let (k, d) = (j / dim, j % dim);
                        pairwise_sum_by(batch, |n| {
                            2.0 * g[n * c + k] * (embeddings.row(n)[d] - h.prototypes.row(k)[d])
                        })
                    })
                    .collect();
                (
                    Tensor::new(vec![batch, dim], d_emb).expect("d_emb"),
                    vec![Tensor::new(vec![c, dim], dp).expect("dp")],
                )
            }
        }
    }
}

/// Mean softmax cross-entropy over rows of `scores` and its gradient w.r.t. the scores.
pub fn softmax_cross_entropy(scores: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let batch = scores.rows();
    let c = scores.row_len();
    if batch == 0 || labels.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if labels.len() != batch {
        return Err(Error::Shape(format!(
            "{} labels for a batch of {batch}",
            labels.len()
        )));
    }
    let mut losses = Vec::with_capacity(batch);
    let mut grad = vec![0.0; batch * c];
    for (n, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::LabelOutOfRange {
                label: y,
                classes: c,
            });
        }
        let s = scores.row(n);
        let max = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = s.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        losses.push(z.ln() + max - s[y]);
        for k in 0..c {
            let p = exps[k] / z;
            grad[n * c + k] = (p - if k == y { 1.0 } else { 0.0 }) / batch as f64;
        }
    }
    let loss = pairwise_sum(&losses) / batch as f64;
    Ok((loss, Tensor::new(vec![batch, c], grad).expect("grad shape")))
}

/// Loss and embedding gradient of a head applied to fixed embeddings.
pub fn head_loss(
    head: &Head,
    embeddings: &Tensor,
    labels: &[usize],
) -> Result<(f64, Tensor, Vec<Tensor>)> {
    let scores = head.scores(embeddings);
    let (loss, d_scores) = softmax_cross_entropy(&scores, labels)?;
    let (d_emb, head_grads) = head.backward(embeddings, &d_scores);
    Ok((loss, d_emb, head_grads))
}

/// Episodic prototype loss: prototypes are the class means of `embeddings`
/// themselves, and gradients flow through both the points and the means.
pub fn prototype_episode_loss(
    embeddings: &Tensor,
    labels: &[usize],
    classes: usize,
) -> Result<(f64, Tensor)> {
    let batch = embeddings.rows();
    if batch == 0 {
        return Err(Error::EmptyBatch);
    }
    let dim = embeddings.row_len();
    let prototypes = class_means(embeddings, labels, classes)?;
    let scores = squared_distance_scores(embeddings, &prototypes);
    let (loss, d_scores) = softmax_cross_entropy(&scores, labels)?;
    let g = d_scores.data();
    let mut counts = vec![0usize; classes];
    for &y in labels {
        counts[y] += 1;
    }
    let mut d_emb = vec![0.0; batch * dim];
    for n in 0..batch {
        let e = embeddings.row(n);
        for k in 0..classes {
            let p = prototypes.row(k);
            for d in 0..dim {
                d_emb[n * dim + d] += -2.0 * g[n * classes + k] * (e[d] - p[d]);
            }
        }
    }
    // d loss / d prototype, distributed back to its members
    for k in 0..classes {
        let p = prototypes.row(k);
        for d in 0..dim {
            let dp = pairwise_sum_by(batch, |n| {
                2.0 * g[n * classes + k] * (embeddings.row(n)[d] - p[d])
            });
            let share = dp / counts[k] as f64;
            for (n, &y) in labels.iter().enumerate() {
                if y == k {
                    d_emb[n * dim + d] += share;
                }
            }
        }
    }
    Ok((loss, Tensor::new(vec![batch, dim], d_emb).expect("d_emb")))
}

/// Predicted class per row; ties resolve to the lowest class index.
pub fn predict(scores: &Tensor) -> Vec<usize> {
    (0..scores.rows()).map(|n| argmax(scores.row(n))).collect()
}
