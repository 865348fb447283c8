//! Central finite-difference gradient checks.
//!
//! Only the scalar loss is evaluated here; the analytic gradients under test
//! are passed in and never recomputed, so the check is independent of the
//! backward pass.

use super::network::{Gradients, Network};
use crate::error::Result;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub step: f64,
    pub rel_tolerance: f64,
    /// Denominator floor, so near-zero gradients are compared absolutely.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            rel_tolerance: 1e-4,
            floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub failures: usize,
    pub max_rel_error: f64,
    /// (tensor index, element, analytic, numeric) for the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0 && self.checked > 0
    }
}

fn flatten(g: &Gradients) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for p in &g.layers {
        out.push(p.weight.data().to_vec());
        out.push(p.bias.data().to_vec());
    }
    for t in &g.head {
        out.push(t.data().to_vec());
    }
    out
}

/// Compares `analytic` against central differences of `loss` for every
/// parameter of `net` (backbone tensors first, then head tensors).
pub fn check_gradients<F>(
    net: &Network,
    analytic: &Gradients,
    loss: F,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&Network) -> Result<f64>,
{
    let expected = flatten(analytic);
    let mut probe = net.clone();
    let mut report = GradCheckReport {
        checked: 0,
        failures: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    let n_tensors = probe.tensors_mut().len();
    for t in 0..n_tensors {
        let len = probe.tensors_mut()[t].len();
        for j in 0..len {
            let orig = probe.tensors_mut()[t].data()[j];
            probe.tensors_mut()[t].data_mut()[j] = orig + cfg.step;
            let up = loss(&probe)?;
            probe.tensors_mut()[t].data_mut()[j] = orig - cfg.step;
            let down = loss(&probe)?;
            probe.tensors_mut()[t].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * cfg.step);
            let a = expected
                .get(t)
                .and_then(|v| v.get(j))
                .copied()
                .unwrap_or(f64::NAN);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
            report.checked += 1;
            if err.is_nan() || err > cfg.rel_tolerance {
                report.failures += 1;
            }
            if err.is_nan() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((t, j, a, numeric));
            }
        }
    }
    Ok(report)
}

/// The layer kinds and heads covered by [`run_target`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckTarget {
    Dense,
    Relu,
    Conv2d,
    MaxPool,
    SoftmaxHead,
    CosineHead,
    PrototypeHead,
    PrototypeEpisode,
    Composed,
}

impl CheckTarget {
    pub const ALL: [CheckTarget; 9] = [
        CheckTarget::Dense,
        CheckTarget::Relu,
        CheckTarget::Conv2d,
        CheckTarget::MaxPool,
        CheckTarget::SoftmaxHead,
        CheckTarget::CosineHead,
        CheckTarget::PrototypeHead,
        CheckTarget::PrototypeEpisode,
        CheckTarget::Composed,
    ];
}

fn random_tensor(shape: Vec<usize>, rng: &mut rand_chacha::ChaCha8Rng) -> crate::Tensor {
    use rand_distr::{Distribution, StandardNormal};
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    crate::Tensor::new(shape, data).expect("random tensor shape")
}

/// Builds a small random instance of `target` from `seed` and checks every
/// parameter gradient against central differences.
pub fn run_target(
    target: CheckTarget,
    seed: u64,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    use super::layer::LayerSpec::*;
    use rand::SeedableRng;

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x6772_6164);
    let batch = 6;
    let classes = 3;
    let labels: Vec<usize> = (0..batch).map(|i| i % classes).collect();
    let conv = |stride| Conv2d {
        in_channels: 2,
        out_channels: 3,
        kernel: if stride == 1 { 3 } else { 2 },
        stride,
        height: 5,
        width: 5,
    };
    let (input, layers) = match target {
        CheckTarget::Dense => (
            vec![4],
            vec![
                Dense {
                    inputs: 4,
                    outputs: 5,
                },
                Dense {
                    inputs: 5,
                    outputs: 4,
                },
            ],
        ),
        CheckTarget::SoftmaxHead => (
            vec![4],
            vec![Dense {
                inputs: 4,
                outputs: 5,
            }],
        ),
        CheckTarget::CosineHead | CheckTarget::PrototypeHead => (
            vec![4],
            vec![Dense {
                inputs: 4,
                outputs: 6,
            }],
        ),
        CheckTarget::Relu | CheckTarget::PrototypeEpisode => (
            vec![4],
            vec![
                Dense {
                    inputs: 4,
                    outputs: 7,
                },
                Relu,
                Dense {
                    inputs: 7,
                    outputs: 5,
                },
            ],
        ),
        CheckTarget::Conv2d => {
            let stride = 1 + (seed % 2) as usize;
            let out = if stride == 1 { 3 * 3 * 3 } else { 3 * 2 * 2 };
            (
                vec![2, 5, 5],
                vec![
                    conv(stride),
                    Flatten,
                    Dense {
                        inputs: out,
                        outputs: 4,
                    },
                ],
            )
        }
        CheckTarget::MaxPool => (
            vec![2, 5, 5],
            vec![
                conv(1),
                Relu,
                MaxPool { size: 2 },
                Flatten,
                Dense {
                    inputs: 3,
                    outputs: 4,
                },
            ],
        ),
        CheckTarget::Composed => (
            vec![2, 5, 5],
            vec![
                conv(1),
                Relu,
                MaxPool { size: 2 },
                Flatten,
                Dense {
                    inputs: 3,
                    outputs: 6,
                },
                Relu,
                Dense {
                    inputs: 6,
                    outputs: 5,
                },
            ],
        ),
    };
    let mut net = Network::init(input.clone(), layers, seed)?;
    // non-zero biases so every bias path is exercised
    for p in net.params_mut() {
        let b = random_tensor(p.bias.shape().to_vec(), &mut rng);
        p.bias = crate::Tensor::new(
            b.shape().to_vec(),
            b.data().iter().map(|v| 0.1 * v).collect(),
        )?;
    }
    let dim = net.embedding_dim();
    let mut shape = vec![batch];
    shape.extend(&input);
    let x = random_tensor(shape, &mut rng);
    match target {
        CheckTarget::PrototypeEpisode => {
            let mask = vec![true; net.scheme_len()];
            let (_, g) = net.prototype_loss_and_gradients(&x, &labels, classes, &mask)?;
            check_gradients(
                &net,
                &g,
                |n| {
                    Ok(n.prototype_loss_and_gradients(
                        &x,
                        &labels,
                        classes,
                        &vec![false; n.scheme_len()],
                    )?
                    .0)
                },
                cfg,
            )
        }
        _ => {
            net = match target {
                CheckTarget::CosineHead | CheckTarget::Composed => {
                    net.with_cosine_head(random_tensor(vec![classes, dim], &mut rng), 4.0)
                }
                CheckTarget::PrototypeHead => {
                    net.with_prototype_head(random_tensor(vec![classes, dim], &mut rng))
                }
                _ => net.with_softmax_head(classes, seed.wrapping_add(1)),
            };
            let (_, g) = net.loss_and_gradients(&x, &labels)?;
            check_gradients(
                &net,
                &g,
                |n| {
                    Ok(
                        n.loss_and_gradients_masked(&x, &labels, &vec![false; n.scheme_len()])?
                            .0,
                    )
                },
                cfg,
            )
        }
    }
}
