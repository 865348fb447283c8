use serde::{Deserialize, Serialize};

use super::network::{Gradients, Network};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for every parameter tensor, in the
/// order backbone weight, backbone bias, ..., head tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

fn grad_tensors(g: &Gradients) -> Vec<&Tensor> {
    let mut out: Vec<&Tensor> = Vec::new();
    for p in &g.layers {
        out.push(&p.weight);
        out.push(&p.bias);
    }
    out.extend(g.head.iter());
    out
}

/// One bias-corrected Adam step over every parameter, backbone and head.
pub fn adam_step(
    net: &mut Network,
    g: &Gradients,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    let grads = grad_tensors(g);
    let params = net.tensors_mut();
    if grads.len() != params.len() {
        return Err(Error::Shape(format!(
            "{} gradient tensors for {} parameter tensors",
            grads.len(),
            params.len()
        )));
    }
    if state.first.is_empty() {
        state.first = params
            .iter()
            .map(|t| Tensor::zeros(t.shape().to_vec()))
            .collect();
        state.second = state.first.clone();
    }
    if state.first.len() != params.len() {
        return Err(Error::Shape(
            "optimizer state does not match network".into(),
        ));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (((p, gt), m), v) in params
        .into_iter()
        .zip(grads)
        .zip(state.first.iter_mut())
        .zip(state.second.iter_mut())
    {
        if p.shape() != gt.shape() || m.shape() != p.shape() {
            return Err(Error::Shape(format!(
                "adam shapes {:?} / {:?} / {:?}",
                p.shape(),
                gt.shape(),
                m.shape()
            )));
        }
        let pd = p.data_mut();
        let md = m.data_mut();
        let vd = v.data_mut();
        for (j, &gj) in gt.data().iter().enumerate() {
            md[j] = cfg.beta1 * md[j] + (1.0 - cfg.beta1) * gj;
            vd[j] = cfg.beta2 * vd[j] + (1.0 - cfg.beta2) * gj * gj;
            let m_hat = md[j] / c1;
            let v_hat = vd[j] / c2;
            pd[j] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
