use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::head::{
    head_loss, prototype_episode_loss, CosineHead, Head, PrototypeHead, SoftmaxHead,
};
use super::layer::{self, infer_shapes, LayerCache, LayerSpec, ParamBlock};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A feed-forward backbone with an optional classifier head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    params: Vec<ParamBlock>,
    head: Option<Head>,
}

/// Gradients shaped like [`Network`] parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<ParamBlock>,
    pub head: Vec<Tensor>,
}

struct ForwardTrace {
    caches: Vec<LayerCache>,
    embeddings: Tensor,
}

fn he_uniform(shape: Vec<usize>, fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("init shape")
}

impl Network {
    /// He-uniform weights and zero biases drawn from `seed`; no head.
    pub fn init(input_shape: Vec<usize>, layers: Vec<LayerSpec>, seed: u64) -> Result<Self> {
        infer_shapes(&input_shape, &layers)?;
        if !layers.iter().any(LayerSpec::is_parameterized) {
            return Err(Error::InvalidNetwork(
                "backbone has no parameterized layer".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = layers
            .iter()
            .filter_map(|l| {
                let (ws, bs) = l.param_shapes()?;
                Some(ParamBlock {
                    weight: he_uniform(ws, l.fan_in(), &mut rng),
                    bias: Tensor::zeros(bs),
                })
            })
            .collect();
        Ok(Self {
            input_shape,
            layers,
            params,
            head: None,
        })
    }

    /// Assembles a network from explicit parameters, validating every shape.
    pub fn from_parts(
        input_shape: Vec<usize>,
        layers: Vec<LayerSpec>,
        params: Vec<ParamBlock>,
        head: Option<Head>,
    ) -> Result<Self> {
        let embed = infer_shapes(&input_shape, &layers)?;
        let param_layers: Vec<_> = layers.iter().filter(|l| l.is_parameterized()).collect();
        if param_layers.len() != params.len() || params.is_empty() {
            return Err(Error::InvalidNetwork(format!(
                "{} parameterized layers but {} parameter blocks",
                param_layers.len(),
                params.len()
            )));
        }
        for (i, (l, p)) in param_layers.iter().zip(&params).enumerate() {
            let (ws, bs) = l.param_shapes().expect("parameterized");
            if p.weight.shape() != ws.as_slice() || p.bias.shape() != bs.as_slice() {
                return Err(Error::InvalidNetwork(format!(
                    "parameter block {i} has shapes {:?}/{:?}, expected {ws:?}/{bs:?}",
                    p.weight.shape(),
                    p.bias.shape()
                )));
            }
        }
        let net = Self {
            input_shape,
            layers,
            params,
            head: None,
        };
        match head {
            Some(h) => {
                if embed.len() != 1 || h.embedding_dim() != embed[0] {
                    return Err(Error::InvalidNetwork(format!(
                        "head expects dimension {}, backbone emits {embed:?}",
                        h.embedding_dim()
                    )));
                }
                Ok(net.with_head(h))
            }
            None => Ok(net),
        }
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &[ParamBlock] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [ParamBlock] {
        &mut self.params
    }

    pub fn head(&self) -> Option<&Head> {
        self.head.as_ref()
    }

    pub fn head_mut(&mut self) -> Option<&mut Head> {
        self.head.as_mut()
    }

    /// Number of parameterized backbone layers, i.e. the scheme length.
    pub fn scheme_len(&self) -> usize {
        self.params.len()
    }

    /// Indices into `layers()` of the parameterized layers.
    pub fn param_layer_indices(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_parameterized())
            .map(|(i, _)| i)
            .collect()
    }

    pub fn embedding_shape(&self) -> Vec<usize> {
        infer_shapes(&self.input_shape, &self.layers).expect("validated at construction")
    }

    pub fn embedding_dim(&self) -> usize {
        self.embedding_shape().iter().product()
    }

    pub fn parameter_count(&self) -> usize {
        let backbone: usize = self
            .params
            .iter()
            .map(|p| p.weight.len() + p.bias.len())
            .sum();
        let head: usize = self
            .head
            .iter()
            .flat_map(|h| h.params())
            .map(Tensor::len)
            .sum();
        backbone + head
    }

    pub fn with_head(mut self, head: Head) -> Self {
        self.head = Some(head);
        self
    }

    pub fn without_head(mut self) -> Self {
        self.head = None;
        self
    }

    pub fn with_softmax_head(self, classes: usize, seed: u64) -> Self {
        let dim = self.embedding_dim();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let head = Head::Softmax(SoftmaxHead {
            weight: he_uniform(vec![classes, dim], dim, &mut rng),
            bias: Tensor::zeros(vec![classes]),
        });
        self.with_head(head)
    }

    pub fn with_cosine_head(self, weight: Tensor, scale: f64) -> Self {
        self.with_head(Head::Cosine(CosineHead { weight, scale }))
    }

    pub fn with_prototype_head(self, prototypes: Tensor) -> Self {
        self.with_head(Head::Prototype(PrototypeHead { prototypes }))
    }

    fn batchify(&self, batch: &Tensor) -> Result<(Tensor, bool)> {
        let shape = batch.shape();
        let per_example: usize = self.input_shape.iter().product();
        if shape == self.input_shape.as_slice() {
            let t = batch
                .clone()
                .reshape(layer::with_batch(1, &self.input_shape))?;
            return Ok((t, true));
        }
        if shape.len() >= 2 && batch.row_len() == per_example {
            let t = batch
                .clone()
                .reshape(layer::with_batch(batch.rows(), &self.input_shape))?;
            return Ok((t, false));
        }
        Err(Error::LayerShape {
            layer: 0,
            expected: self.input_shape.clone(),
            actual: shape.to_vec(),
        })
    }

    fn run(&self, batch: Tensor, keep_cache: bool) -> ForwardTrace {
        let mut x = batch;
        let mut caches = Vec::with_capacity(if keep_cache { self.layers.len() } else { 0 });
        let mut p = 0;
        for spec in &self.layers {
            let params = if spec.is_parameterized() {
                p += 1;
                Some(&self.params[p - 1])
            } else {
                None
            };
            let (y, cache) = layer::forward(spec, params, x);
            if keep_cache {
                caches.push(cache);
            }
            x = y;
        }
        let rows = x.rows();
        let width = x.row_len();
        ForwardTrace {
            caches,
            embeddings: x.reshape(vec![rows, width]).expect("flatten embeddings"),
        }
    }

    /// Backbone embeddings as a `[batch, dim]` tensor.
    pub fn embed(&self, batch: &Tensor) -> Result<Tensor> {
        let (b, _) = self.batchify(batch)?;
        Ok(self.run(b, false).embeddings)
    }

    /// Head scores when a head is attached, otherwise the embeddings.
    ///
    /// A single unbatched example yields an unbatched result.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        let (b, single) = self.batchify(batch)?;
        let emb = self.run(b, false).embeddings;
        let out = match &self.head {
            Some(h) => h.scores(&emb),
            None => emb,
        };
        if single {
            let n = out.len();
            out.reshape(vec![n])
        } else {
            Ok(out)
        }
    }

    /// Mean softmax cross-entropy of the head scores and exact gradients for every parameter.
    pub fn loss_and_gradients(&self, batch: &Tensor, labels: &[usize]) -> Result<(f64, Gradients)> {
        let all = vec![true; self.scheme_len()];
        self.loss_and_gradients_masked(batch, labels, &all)
    }

    /// Like [`loss_and_gradients`](Self::loss_and_gradients), but backbone
    /// layers whose mask entry is false get zero gradients and the backward
    /// pass stops below the lowest layer that needs one.
    pub fn loss_and_gradients_masked(
        &self,
        batch: &Tensor,
        labels: &[usize],
        mask: &[bool],
    ) -> Result<(f64, Gradients)> {
        let head = self.head.as_ref().ok_or(Error::MissingHead)?;
        self.check_mask(mask)?;
        let (b, _) = self.batchify(batch)?;
        if b.rows() == 0 {
            return Err(Error::EmptyBatch);
        }
        let trace = self.run(b, true);
        let (loss, d_emb, head_grads) = head_loss(head, &trace.embeddings, labels)?;
        let layers = self.backward(&trace, d_emb, mask);
        Ok((
            loss,
            Gradients {
                layers,
                head: head_grads,
            },
        ))
    }

    /// Episodic prototype loss on `batch` (prototypes recomputed from the
    /// batch's own embeddings) with backbone gradients. Any attached head is ignored.
    pub fn prototype_loss_and_gradients(
        &self,
        batch: &Tensor,
        labels: &[usize],
        classes: usize,
        mask: &[bool],
    ) -> Result<(f64, Gradients)> {
        self.check_mask(mask)?;
        let (b, _) = self.batchify(batch)?;
        let trace = self.run(b, true);
        let (loss, d_emb) = prototype_episode_loss(&trace.embeddings, labels, classes)?;
        let layers = self.backward(&trace, d_emb, mask);
        Ok((
            loss,
            Gradients {
                layers,
                head: Vec::new(),
            },
        ))
    }

    fn check_mask(&self, mask: &[bool]) -> Result<()> {
        if mask.len() != self.scheme_len() {
            return Err(Error::RateCount {
                expected: self.scheme_len(),
                actual: mask.len(),
            });
        }
        Ok(())
    }

    fn backward(&self, trace: &ForwardTrace, d_emb: Tensor, mask: &[bool]) -> Vec<ParamBlock> {
        let mut grads: Vec<ParamBlock> = self.params.iter().map(ParamBlock::zeros_like).collect();
        let param_layers = self.param_layer_indices();
        let lowest = match mask.iter().position(|&m| m) {
            Some(p) => param_layers[p],
            None => return grads,
        };
        let out_shape = layer::with_batch(d_emb.rows(), &self.embedding_shape());
        let mut g = d_emb.reshape(out_shape).expect("embedding grad shape");
        let mut p = self.params.len();
        for li in (lowest..self.layers.len()).rev() {
            let spec = &self.layers[li];
            let params = if spec.is_parameterized() {
                p -= 1;
                Some(&self.params[p])
            } else {
                None
            };
            let need_params = spec.is_parameterized() && mask[p];
            let need_input = li > lowest;
            let (gi, pg) =
                layer::backward(spec, params, &trace.caches[li], &g, need_input, need_params);
            if let Some(pg) = pg {
                grads[p] = pg;
            }
            match gi {
                Some(gi) => g = gi,
                None => break,
            }
        }
        grads
    }

    /// `params_i -= lr_i * g_i` per backbone layer, and `head_lr` for the head.
    /// Layers with a zero rate are left untouched.
    pub fn apply_update(
        &self,
        g: &Gradients,
        per_layer_lr: &[f64],
        head_lr: f64,
    ) -> Result<Network> {
        let mut out = self.clone();
        out.apply_update_in_place(g, per_layer_lr, head_lr)?;
        Ok(out)
    }

    pub fn apply_update_in_place(
        &mut self,
        g: &Gradients,
        per_layer_lr: &[f64],
        head_lr: f64,
    ) -> Result<()> {
        if per_layer_lr.len() != self.scheme_len() {
            return Err(Error::RateCount {
                expected: self.scheme_len(),
                actual: per_layer_lr.len(),
            });
        }
        for (i, &lr) in per_layer_lr.iter().enumerate() {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(Error::InvalidRate { layer: i, rate: lr });
            }
        }
        if !(head_lr >= 0.0 && head_lr.is_finite()) {
            return Err(Error::InvalidRate {
                layer: self.scheme_len(),
                rate: head_lr,
            });
        }
        if g.layers.len() != self.params.len() {
            return Err(Error::Shape(
                "gradient layer count differs from network".into(),
            ));
        }
        for ((p, gp), &lr) in self.params.iter_mut().zip(&g.layers).zip(per_layer_lr) {
            if lr == 0.0 {
                continue;
            }
            sgd_step(&mut p.weight, &gp.weight, lr)?;
            sgd_step(&mut p.bias, &gp.bias, lr)?;
        }
        if head_lr != 0.0 {
            if let Some(head) = self.head.as_mut() {
                if g.head.len() != head.params().len() {
                    return Err(Error::Shape("head gradient count differs from head".into()));
                }
                for (t, gt) in head.params_mut().into_iter().zip(&g.head) {
                    sgd_step(t, gt, head_lr)?;
                }
            }
        }
        Ok(())
    }

    /// Every parameter tensor: weight and bias per backbone layer, then the head tensors.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for p in self.params.iter_mut() {
            out.push(&mut p.weight);
            out.push(&mut p.bias);
        }
        if let Some(h) = self.head.as_mut() {
            out.extend(h.params_mut());
        }
        out
    }

    /// Little-endian bytes of every parameter, backbone first, then head.
    pub fn param_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for p in &self.params {
            out.extend(p.weight.to_le_bytes());
            out.extend(p.bias.to_le_bytes());
        }
        if let Some(h) = &self.head {
            for t in h.params() {
                out.extend(t.to_le_bytes());
            }
        }
        out
    }
}

pub fn sgd_step(param: &mut Tensor, grad: &Tensor, lr: f64) -> Result<()> {
    if param.shape() != grad.shape() {
        return Err(Error::Shape(format!(
            "gradient {:?} does not match parameter {:?}",
            grad.shape(),
            param.shape()
        )));
    }
    for (w, g) in param.data_mut().iter_mut().zip(grad.data()) {
        *w -= lr * g;
    }
    Ok(())
}
