use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{LabeledDataset, Split};
use crate::error::{Error, Result};
use crate::nn::{adam_step, predict, AdamConfig, AdamState, Head, Network};
use crate::tensor::{pairwise_sum, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 400,
            batch: 16,
            lr: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

/// Cross-entropy pre-training on the base split with Adam.
///
/// `net` must carry a softmax head over the base classes. The returned
/// network has that head removed. Each epoch visits the base examples in a
/// seeded random order in mini-batches of `cfg.batch`.
pub fn pretrain_base(
    net: Network,
    ds: &LabeledDataset,
    cfg: &PretrainConfig,
) -> Result<(Network, Vec<EpochRecord>)> {
    let (x, y) = ds.split_tensor(Split::Base)?;
    let classes = ds.classes_in(Split::Base).len();
    match net.head() {
        Some(Head::Softmax(h)) if h.weight.rows() == classes => {}
        _ => {
            return Err(Error::InvalidNetwork(format!(
                "pre-training needs a softmax head over {classes} base classes"
            )))
        }
    }
    if cfg.batch == 0 {
        return Err(Error::InvalidNetwork(
            "pretrain batch size must be positive".into(),
        ));
    }
    let mut net = net;
    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut state = AdamState::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = y.len();
    let dim = x.row_len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut losses = Vec::with_capacity(n.div_ceil(cfg.batch));
        for chunk in order.chunks(cfg.batch) {
            let data: Vec<f64> = chunk
                .iter()
                .flat_map(|&i| x.row(i).iter().copied())
                .collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| y[i]).collect();
            let batch = Tensor::new(vec![chunk.len(), dim], data)?;
            let (loss, g) = net.loss_and_gradients(&batch, &labels)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, loss });
            }
            losses.push(loss);
            adam_step(&mut net, &g, &mut state, &adam)?;
        }
        let loss = pairwise_sum(&losses) / losses.len() as f64;
        let preds = predict(&net.forward(&x)?);
        let accuracy = preds.iter().zip(&y).filter(|(p, t)| p == t).count() as f64 / n as f64;
        tracing::debug!(epoch, loss, accuracy, "pretrain epoch");
        log.push(EpochRecord {
            epoch,
            loss,
            accuracy,
        });
    }
    Ok((net.without_head(), log))
}

/// Replaces the weight of parameterized layer `layer` with a random rank-one
/// matrix of the same Frobenius norm, destroying most of what it encodes
/// while keeping gradients informative.
pub fn collapse_layer(net: &Network, layer: usize, seed: u64) -> Result<Network> {
    let mut out = net.clone();
    let block = out
        .params_mut()
        .get_mut(layer)
        .ok_or_else(|| Error::InvalidNetwork(format!("no parameterized layer {layer}")))?;
    let shape = block.weight.shape().to_vec();
    let rows = shape[0];
    let cols = block.weight.len() / rows;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw =
        |n: usize| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(&mut rng)).collect() };
    let u = draw(rows);
    let v = draw(cols);
    let target = block
        .weight
        .data()
        .iter()
        .map(|w| w * w)
        .sum::<f64>()
        .sqrt();
    let mut w: Vec<f64> = u
        .iter()
        .flat_map(|a| v.iter().map(move |b| a * b))
        .collect();
    let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        w.iter_mut().for_each(|x| *x *= target / norm);
    }
    block.weight = Tensor::new(shape, w)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, DatasetParams};
    use crate::nn::LayerSpec;

    fn setup() -> (Network, LabeledDataset) {
        let ds = generate_dataset(&DatasetParams {
            seed: 1,
            n_base: 4,
            n_val: 2,
            n_novel: 2,
            per_class: 10,
            dim: 4,
            ..DatasetParams::default()
        })
        .unwrap();
        let net = Network::init(
            vec![4],
            vec![
                LayerSpec::Dense {
                    inputs: 4,
                    outputs: 6,
                },
                LayerSpec::Relu,
                LayerSpec::Dense {
                    inputs: 6,
                    outputs: 5,
                },
            ],
            3,
        )
        .unwrap()
        .with_softmax_head(4, 4);
        (net, ds)
    }

    #[test]
    fn zero_epochs_keeps_initial_backbone() {
        let (net, ds) = setup();
        let cfg = PretrainConfig {
            epochs: 0,
            ..PretrainConfig::default()
        };
        let (out, log) = pretrain_base(net.clone(), &ds, &cfg).unwrap();
        assert!(log.is_empty());
        assert_eq!(out.params(), net.params());
        assert!(out.head().is_none());
    }

    #[test]
    fn requires_base_softmax_head() {
        let (net, ds) = setup();
        assert!(pretrain_base(net.without_head(), &ds, &PretrainConfig::default()).is_err());
    }

    #[test]
    fn collapse_keeps_norm_and_rank_one() {
        let (net, _) = setup();
        let out = collapse_layer(&net, 1, 9).unwrap();
        let before: f64 = net.params()[1].weight.data().iter().map(|v| v * v).sum();
        let w = out.params()[1].weight.data();
        let after: f64 = w.iter().map(|v| v * v).sum();
        assert!((before - after).abs() < 1e-9);
        // every 2x2 minor vanishes
        let cols = 6;
        assert!((w[0] * w[cols + 1] - w[1] * w[cols]).abs() < 1e-12);
        assert_eq!(out.params()[0], net.params()[0]);
        assert!(collapse_layer(&net, 2, 0).is_err());
    }
}
