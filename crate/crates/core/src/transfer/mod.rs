//! The three pipeline stages: base pre-training, per-scheme fine-tuning on an
//! episode (the search fitness), and multi-episode evaluation.

mod pretrain;
mod scheme;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{episode_rng, sample_episode, Episode, EpisodeShape, LabeledDataset, Split};
use crate::error::{Error, Result};
use crate::nn::{
    class_means, head_loss, predict, prototype_episode_loss, sgd_step, softmax_cross_entropy,
    Gradients, Head, Network, PrototypeHead, DEFAULT_COSINE_SCALE,
};
use crate::tensor::{pairwise_sum, pairwise_sum_by, Tensor};

pub use pretrain::{collapse_layer, pretrain_base, EpochRecord, PretrainConfig};
pub use scheme::{LrZoo, SchemeVector};

/// Classifier used when adapting to an episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FewShotHead {
    Cosine,
    Prototype,
}

impl std::fmt::Display for FewShotHead {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FewShotHead::Cosine => "cosine",
            FewShotHead::Prototype => "prototype",
        })
    }
}

/// Fine-tuning budget for one episode. Every iteration is one full-batch
/// plain SGD step on the support set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneBudget {
    pub iterations: usize,
    pub head_lr: f64,
    pub cosine_scale: f64,
}

impl Default for FinetuneBudget {
    fn default() -> Self {
        Self {
            iterations: 100,
            head_lr: 0.01,
            cosine_scale: DEFAULT_COSINE_SCALE,
        }
    }
}

impl FinetuneBudget {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::InvalidSearchConfig(
                "finetune.iterations must be at least 1".into(),
            ));
        }
        if !(self.head_lr >= 0.0 && self.head_lr.is_finite()) {
            return Err(Error::InvalidSearchConfig(
                "finetune.head_lr must be a finite rate >= 0".into(),
            ));
        }
        if !(self.cosine_scale > 0.0 && self.cosine_scale.is_finite()) {
            return Err(Error::InvalidSearchConfig(
                "finetune.cosine_scale must be positive".into(),
            ));
        }
        Ok(())
    }
}

fn accuracy(scores: &Tensor, labels: &[usize]) -> f64 {
    let correct = predict(scores)
        .iter()
        .zip(labels)
        .filter(|(p, y)| p == y)
        .count();
    correct as f64 / labels.len() as f64
}

/// Class-mean support embeddings scaled to unit norm (zero rows stay zero).
fn cosine_init(embeddings: &Tensor, labels: &[usize], way: usize) -> Result<Tensor> {
    let mut w = class_means(embeddings, labels, way)?;
    let dim = w.row_len();
    for row in w.data_mut().chunks_mut(dim) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
    Ok(w)
}

fn prototype_accuracy(net: &Network, ep: &Episode) -> Result<f64> {
    let support = net.embed(&ep.support)?;
    let prototypes = class_means(&support, &ep.support_labels, ep.shape.way)?;
    let head = Head::Prototype(PrototypeHead { prototypes });
    Ok(accuracy(
        &head.scores(&net.embed(&ep.query)?),
        &ep.query_labels,
    ))
}

/// Result of adapting a copy of the base network to one episode.
#[derive(Debug, Clone)]
pub struct Finetuned {
    /// Backbone after fine-tuning, with the cosine head attached when used.
    pub network: Network,
    pub accuracy: f64,
    /// Support-set loss after the last update.
    pub support_loss: f64,
    /// Per backbone layer: largest gradient magnitude seen in any iteration.
    pub max_gradient: Vec<f64>,
}

fn track_max(seen: &mut [f64], g: &Gradients) {
    for (s, block) in seen.iter_mut().zip(&g.layers) {
        *s = block
            .weight
            .data()
            .iter()
            .chain(block.bias.data())
            .fold(*s, |m, v| m.max(v.abs()));
    }
}

/// Fine-tunes a copy of `base` on the episode's support set under `scheme`.
/// `base` is never modified.
///
/// Layers whose rate is 0 get no gradient and no update. The cosine head
/// starts from normalized class-mean support embeddings and trains at
/// `budget.head_lr`; the prototype head has no parameters and the backbone
/// trains on the episodic prototype loss.
pub fn finetune(
    base: &Network,
    scheme: &SchemeVector,
    zoo: &LrZoo,
    ep: &Episode,
    budget: &FinetuneBudget,
    head: FewShotHead,
) -> Result<Finetuned> {
    scheme.validate(base.scheme_len(), zoo)?;
    let rates = scheme.rates(zoo)?;
    let mask: Vec<bool> = rates.iter().map(|&r| r > 0.0).collect();
    let mut net = base.clone().without_head();
    let way = ep.shape.way;
    let mut max_gradient = vec![0.0; rates.len()];
    match head {
        FewShotHead::Cosine => {
            let w = cosine_init(&net.embed(&ep.support)?, &ep.support_labels, way)?;
            net = net.with_cosine_head(w, budget.cosine_scale);
            for _ in 0..budget.iterations {
                let (loss, g) =
                    net.loss_and_gradients_masked(&ep.support, &ep.support_labels, &mask)?;
                if !loss.is_finite() {
                    break;
                }
                track_max(&mut max_gradient, &g);
                net.apply_update_in_place(&g, &rates, budget.head_lr)?;
            }
            let accuracy = accuracy(&net.forward(&ep.query)?, &ep.query_labels);
            let support_loss =
                softmax_cross_entropy(&net.forward(&ep.support)?, &ep.support_labels)?.0;
            Ok(Finetuned {
                network: net,
                accuracy,
                support_loss,
                max_gradient,
            })
        }
        FewShotHead::Prototype => {
            if mask.iter().any(|&m| m) {
                for _ in 0..budget.iterations {
                    let (loss, g) = net.prototype_loss_and_gradients(
                        &ep.support,
                        &ep.support_labels,
                        way,
                        &mask,
                    )?;
                    if !loss.is_finite() {
                        break;
                    }
                    track_max(&mut max_gradient, &g);
                    net.apply_update_in_place(&g, &rates, 0.0)?;
                }
            }
            let accuracy = prototype_accuracy(&net, ep)?;
            let support_loss =
                prototype_episode_loss(&net.embed(&ep.support)?, &ep.support_labels, way)?.0;
            Ok(Finetuned {
                network: net,
                accuracy,
                support_loss,
                max_gradient,
            })
        }
    }
}

/// Query accuracy after [`finetune`].
pub fn mini_finetune(
    base: &Network,
    scheme: &SchemeVector,
    zoo: &LrZoo,
    ep: &Episode,
    budget: &FinetuneBudget,
    head: FewShotHead,
) -> Result<f64> {
    finetune(base, scheme, zoo, ep, budget, head).map(|f| f.accuracy)
}

/// Accuracy of the frozen backbone: embeddings are computed once and only
/// the head adapts. Matches `mini_finetune` with the all-zero scheme.
pub fn frozen_accuracy(
    base: &Network,
    ep: &Episode,
    budget: &FinetuneBudget,
    head: FewShotHead,
) -> Result<f64> {
    let net = base.clone().without_head();
    match head {
        FewShotHead::Cosine => {
            let support = net.embed(&ep.support)?;
            let mut h = Head::Cosine(crate::nn::CosineHead {
                weight: cosine_init(&support, &ep.support_labels, ep.shape.way)?,
                scale: budget.cosine_scale,
            });
            for _ in 0..budget.iterations {
                let (loss, _, grads) = head_loss(&h, &support, &ep.support_labels)?;
                if !loss.is_finite() {
                    break;
                }
                if budget.head_lr != 0.0 {
                    for (t, g) in h.params_mut().into_iter().zip(&grads) {
                        sgd_step(t, g, budget.head_lr)?;
                    }
                }
            }
            Ok(accuracy(
                &h.scores(&net.embed(&ep.query)?),
                &ep.query_labels,
            ))
        }
        FewShotHead::Prototype => prototype_accuracy(&net, ep),
    }
}

/// Mean accuracy with a normal-approximation 95% confidence interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scheme: SchemeVector,
    pub zoo: LrZoo,
    pub head: FewShotHead,
    pub shape: EpisodeShape,
    pub split: Split,
    pub seed: u64,
    pub n_episodes: usize,
    pub mean_accuracy: f64,
    pub ci95_halfwidth: f64,
    pub per_episode: Vec<f64>,
}

/// `(mean, 1.96 * s / sqrt(n))` with `s` the n-1 sample standard deviation.
pub fn mean_and_ci95(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = pairwise_sum(values) / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = pairwise_sum_by(n, |i| (values[i] - mean).powi(2)) / (n - 1) as f64;
    (mean, 1.96 * var.sqrt() / (n as f64).sqrt())
}

impl EvalReport {
    /// Accuracy as `AA.AA±B.BB`, in percent.
    pub fn formatted(&self) -> String {
        format_accuracy(self.mean_accuracy, self.ci95_halfwidth)
    }
}

pub fn format_accuracy(mean: f64, halfwidth: f64) -> String {
    format!("{:.2}±{:.2}", mean * 100.0, halfwidth * 100.0)
}

/// Everything needed to evaluate schemes on freshly sampled episodes.
#[derive(Debug, Clone)]
pub struct EvalSetup<'a> {
    pub base: &'a Network,
    pub zoo: &'a LrZoo,
    pub dataset: &'a LabeledDataset,
    pub split: Split,
    pub shape: EpisodeShape,
    pub budget: FinetuneBudget,
    pub head: FewShotHead,
}

/// Episodes `0..n` of a run, episode `i` drawn from RNG `seed ^ i`.
pub fn sample_episodes(
    ds: &LabeledDataset,
    split: Split,
    shape: EpisodeShape,
    n: usize,
    seed: u64,
) -> Result<Vec<Episode>> {
    (0..n as u64)
        .map(|i| sample_episode(ds, split, shape, &mut episode_rng(seed, i)))
        .collect()
}

/// Runs `mini_finetune` on `n_episodes` episodes in parallel (on the current
/// rayon pool) and aggregates in episode order.
pub fn evaluate_scheme(
    setup: &EvalSetup<'_>,
    scheme: &SchemeVector,
    n_episodes: usize,
    seed: u64,
) -> Result<EvalReport> {
    evaluate_with(setup, scheme, n_episodes, seed, |ep| {
        mini_finetune(setup.base, scheme, setup.zoo, ep, &setup.budget, setup.head)
    })
}

/// Frozen-backbone evaluation through [`frozen_accuracy`].
pub fn evaluate_frozen(setup: &EvalSetup<'_>, n_episodes: usize, seed: u64) -> Result<EvalReport> {
    let scheme = SchemeVector::frozen(setup.base.scheme_len());
    evaluate_with(setup, &scheme, n_episodes, seed, |ep| {
        frozen_accuracy(setup.base, ep, &setup.budget, setup.head)
    })
}

fn evaluate_with<F>(
    setup: &EvalSetup<'_>,
    scheme: &SchemeVector,
    n_episodes: usize,
    seed: u64,
    run: F,
) -> Result<EvalReport>
where
    F: Fn(&Episode) -> Result<f64> + Sync,
{
    if n_episodes == 0 {
        return Err(Error::InsufficientData(
            "evaluation needs at least one episode".into(),
        ));
    }
    scheme.validate(setup.base.scheme_len(), setup.zoo)?;
    let per_episode = (0..n_episodes as u64)
        .into_par_iter()
        .map(|i| {
            let ep = sample_episode(
                setup.dataset,
                setup.split,
                setup.shape,
                &mut episode_rng(seed, i),
            )?;
            run(&ep)
        })
        .collect::<Result<Vec<f64>>>()?;
    let (mean_accuracy, ci95_halfwidth) = mean_and_ci95(&per_episode);
    Ok(EvalReport {
        scheme: scheme.clone(),
        zoo: setup.zoo.clone(),
        head: setup.head,
        shape: setup.shape,
        split: setup.split,
        seed,
        n_episodes,
        mean_accuracy,
        ci95_halfwidth,
        per_episode,
    })
}

/// Search fitness: mean query accuracy over a fixed set of episodes.
#[derive(Debug, Clone)]
pub struct EpisodeFitness<'a> {
    pub base: &'a Network,
    pub zoo: &'a LrZoo,
    pub episodes: Vec<Episode>,
    pub budget: FinetuneBudget,
    pub head: FewShotHead,
}

impl EpisodeFitness<'_> {
    pub fn evaluate(&self, scheme: &SchemeVector) -> Result<f64> {
        let accs = self
            .episodes
            .iter()
            .map(|ep| mini_finetune(self.base, scheme, self.zoo, ep, &self.budget, self.head))
            .collect::<Result<Vec<_>>>()?;
        Ok(pairwise_sum(&accs) / accs.len() as f64)
    }
}
