use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{pairwise_sum_by, Tensor};

/// One layer of a backbone. Only `Dense` and `Conv2d` carry parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    /// Valid (unpadded) convolution over a `[channels, height, width]` input.
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        height: usize,
        width: usize,
    },
    Relu,
    /// Non-overlapping max pooling with a square window.
    MaxPool {
        size: usize,
    },
    Flatten,
}

impl LayerSpec {
    pub fn is_parameterized(&self) -> bool {
        matches!(self, LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. })
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool { .. } => "maxpool",
            LayerSpec::Flatten => "flatten",
        }
    }

    /// Per-example output shape, or `None` if `input` is not accepted.
    pub fn output_shape(&self, input: &[usize]) -> Option<Vec<usize>> {
        match *self {
            LayerSpec::Dense { inputs, outputs } => {
                (input == [inputs] && inputs > 0 && outputs > 0).then(|| vec![outputs])
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                height,
                width,
            } => {
                if input != [in_channels, height, width]
                    || kernel == 0
                    || stride == 0
                    || out_channels == 0
                    || kernel > height
                    || kernel > width
                {
                    return None;
                }
                Some(vec![
                    out_channels,
                    (height - kernel) / stride + 1,
                    (width - kernel) / stride + 1,
                ])
            }
            LayerSpec::Relu => Some(input.to_vec()),
            LayerSpec::MaxPool { size } => match input {
                [c, h, w] if size > 0 && *h >= size && *w >= size => {
                    Some(vec![*c, h / size, w / size])
                }
                _ => None,
            },
            LayerSpec::Flatten => Some(vec![input.iter().product()]),
        }
    }

    /// Weight and bias shapes for parameterized layers.
    pub fn param_shapes(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        match *self {
            LayerSpec::Dense { inputs, outputs } => Some((vec![outputs, inputs], vec![outputs])),
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => Some((
                vec![out_channels, in_channels, kernel, kernel],
                vec![out_channels],
            )),
            _ => None,
        }
    }

    pub fn fan_in(&self) -> usize {
        match *self {
            LayerSpec::Dense { inputs, .. } => inputs,
            LayerSpec::Conv2d {
                in_channels,
                kernel,
                ..
            } => in_channels * kernel * kernel,
            _ => 0,
        }
    }
}

/// Weight and bias of one parameterized layer (or their gradients).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ParamBlock {
    pub fn zeros_like(other: &ParamBlock) -> Self {
        Self {
            weight: Tensor::zeros(other.weight.shape().to_vec()),
            bias: Tensor::zeros(other.bias.shape().to_vec()),
        }
    }
}

/// State a layer needs to run its backward pass.
#[derive(Debug, Clone)]
pub(crate) enum LayerCache {
    Input(Tensor),
    PoolArgmax(Vec<usize>, Vec<usize>),
    Shape(Vec<usize>),
}

fn batched_shape(batch: usize, shape: &[usize]) -> Vec<usize> {
    let mut s = Vec::with_capacity(shape.len() + 1);
    s.push(batch);
    s.extend_from_slice(shape);
    s
}

pub(crate) fn forward(
    spec: &LayerSpec,
    params: Option<&ParamBlock>,
    input: Tensor,
) -> (Tensor, LayerCache) {
    let batch = input.rows();
    match *spec {
        LayerSpec::Dense { inputs, outputs } => {
            let p = params.expect("dense layer without parameters");
            let w = p.weight.data();
            let b = p.bias.data();
            let x = input.data();
            let mut out = vec![0.0; batch * outputs];
            for n in 0..batch {
                let xr = &x[n * inputs..(n + 1) * inputs];
                for o in 0..outputs {
                    let wr = &w[o * inputs..(o + 1) * inputs];
                    let mut acc = b[o];
                    for i in 0..inputs {
                        acc += wr[i] * xr[i];
                    }
                    out[n * outputs + o] = acc;
                }
            }
            let y = Tensor::new(vec![batch, outputs], out).expect("dense output shape");
            (y, LayerCache::Input(input))
        }
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            height,
            width,
        } => {
            let p = params.expect("conv layer without parameters");
            let oh = (height - kernel) / stride + 1;
            let ow = (width - kernel) / stride + 1;
            let w = p.weight.data();
            let b = p.bias.data();
            let x = input.data();
            let in_sz = in_channels * height * width;
            let out_sz = out_channels * oh * ow;
            let mut out = vec![0.0; batch * out_sz];
            for n in 0..batch {
                let xn = &x[n * in_sz..(n + 1) * in_sz];
                for oc in 0..out_channels {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = b[oc];
                            for ic in 0..in_channels {
                                for ky in 0..kernel {
                                    let row =
                                        (ic * height + oy * stride + ky) * width + ox * stride;
                                    let wrow = ((oc * in_channels + ic) * kernel + ky) * kernel;
                                    for kx in 0..kernel {
                                        acc += w[wrow + kx] * xn[row + kx];
                                    }
                                }
                            }
                            out[n * out_sz + (oc * oh + oy) * ow + ox] = acc;
                        }
                    }
                }
            }
            let y = Tensor::new(vec![batch, out_channels, oh, ow], out).expect("conv output shape");
            (y, LayerCache::Input(input))
        }
        LayerSpec::Relu => {
            let data = input.data().iter().map(|&v| v.max(0.0)).collect();
            let y = Tensor::new(input.shape().to_vec(), data).expect("relu shape");
            (y, LayerCache::Input(input))
        }
        LayerSpec::MaxPool { size } => {
            let (c, h, w) = match input.shape() {
                [_, c, h, w] => (*c, *h, *w),
                s => panic!("maxpool expects a rank-4 batch, got {s:?}"),
            };
            let (oh, ow) = (h / size, w / size);
            let x = input.data();
            let mut out = Vec::with_capacity(batch * c * oh * ow);
            let mut idx = Vec::with_capacity(batch * c * oh * ow);
            for n in 0..batch {
                for ch in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut best = f64::NEG_INFINITY;
                            let mut best_i = 0;
                            for ky in 0..size {
                                for kx in 0..size {
                                    let i =
                                        ((n * c + ch) * h + oy * size + ky) * w + ox * size + kx;
                                    if x[i] > best || (ky == 0 && kx == 0) {
                                        best = x[i];
                                        best_i = i;
                                    }
                                }
                            }
                            out.push(best);
                            idx.push(best_i);
                        }
                    }
                }
            }
            let in_shape = input.shape().to_vec();
            let y = Tensor::new(vec![batch, c, oh, ow], out).expect("pool shape");
            (y, LayerCache::PoolArgmax(idx, in_shape))
        }
        LayerSpec::Flatten => {
            let in_shape = input.shape().to_vec();
            let w = input.row_len();
            let y = input.reshape(vec![batch, w]).expect("flatten shape");
            (y, LayerCache::Shape(in_shape))
        }
    }
}

/// Backward pass of one layer. Returns the input gradient when `need_input`
/// is set and the parameter gradient when `need_params` is set.
pub(crate) fn backward(
    spec: &LayerSpec,
    params: Option<&ParamBlock>,
    cache: &LayerCache,
    grad_out: &Tensor,
    need_input: bool,
    need_params: bool,
) -> (Option<Tensor>, Option<ParamBlock>) {
    let batch = grad_out.rows();
    match (*spec, cache) {
        (LayerSpec::Dense { inputs, outputs }, LayerCache::Input(x)) => {
            let p = params.expect("dense layer without parameters");
            let dy = grad_out.data();
            let xd = x.data();
            let pg = need_params.then(|| {
                let mut dw = vec![0.0; outputs * inputs];
                for o in 0..outputs {
                    for i in 0..inputs {
                        dw[o * inputs + i] =
                            pairwise_sum_by(batch, |n| dy[n * outputs + o] * xd[n * inputs + i]);
                    }
                }
                let db = (0..outputs)
                    .map(|o| pairwise_sum_by(batch, |n| dy[n * outputs + o]))
                    .collect();
                ParamBlock {
                    weight: Tensor::new(vec![outputs, inputs], dw).expect("dense dw"),
                    bias: Tensor::new(vec![outputs], db).expect("dense db"),
                }
            });
            let gi = need_input.then(|| {
                let w = p.weight.data();
                let mut dx = vec![0.0; batch * inputs];
                for n in 0..batch {
                    let dxr = &mut dx[n * inputs..(n + 1) * inputs];
                    for o in 0..outputs {
                        let g = dy[n * outputs + o];
                        let wr = &w[o * inputs..(o + 1) * inputs];
                        for i in 0..inputs {
                            dxr[i] += wr[i] * g;
                        }
                    }
                }
                Tensor::new(vec![batch, inputs], dx).expect("dense dx")
            });
            (gi, pg)
        }
        (
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                height,
                width,
            },
            LayerCache::Input(x),
        ) => {
            let p = params.expect("conv layer without parameters");
            let oh = (height - kernel) / stride + 1;
            let ow = (width - kernel) / stride + 1;
            let in_sz = in_channels * height * width;
            let out_sz = out_channels * oh * ow;
            let dy = grad_out.data();
            let xd = x.data();
            let pg = need_params.then(|| {
                let wlen = out_channels * in_channels * kernel * kernel;
                let mut dw = vec![0.0; wlen];
                for oc in 0..out_channels {
                    for ic in 0..in_channels {
                        for ky in 0..kernel {
                            for kx in 0..kernel {
                                let per_example = |n: usize| {
                                    let mut acc = 0.0;
                                    for oy in 0..oh {
                                        for ox in 0..ow {
                                            let xi = n * in_sz
                                                + (ic * height + oy * stride + ky) * width
                                                + ox * stride
                                                + kx;
                                            acc +=
                                                dy[n * out_sz + (oc * oh + oy) * ow + ox] * xd[xi];
                                        }
                                    }
                                    acc
                                };
                                dw[((oc * in_channels + ic) * kernel + ky) * kernel + kx] =
                                    pairwise_sum_by(batch, per_example);
                            }
                        }
                    }
                }
                let db = (0..out_channels)
                    .map(|oc| {
                        pairwise_sum_by(batch, |n| {
                            let base = n * out_sz + oc * oh * ow;
                            dy[base..base + oh * ow].iter().sum()
                        })
                    })
                    .collect();
                ParamBlock {
                    weight: Tensor::new(vec![out_channels, in_channels, kernel, kernel], dw)
                        .expect("conv dw"),
                    bias: Tensor::new(vec![out_channels], db).expect("conv db"),
                }
            });
            let gi = need_input.then(|| {
                let w = p.weight.data();
                let mut dx = vec![0.0; batch * in_sz];
                for n in 0..batch {
                    for oc in 0..out_channels {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let g = dy[n * out_sz + (oc * oh + oy) * ow + ox];
                                for ic in 0..in_channels {
                                    for ky in 0..kernel {
                                        let row = n * in_sz
                                            + (ic * height + oy * stride + ky) * width
                                            + ox * stride;
                                        let wrow = ((oc * in_channels + ic) * kernel + ky) * kernel;
                                        for kx in 0..kernel {
                                            dx[row + kx] += w[wrow + kx] * g;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                Tensor::new(x.shape().to_vec(), dx).expect("conv dx")
            });
            (gi, pg)
        }
        (LayerSpec::Relu, LayerCache::Input(x)) => {
            let gi = need_input.then(|| {
                let data = grad_out
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
                    .collect();
                Tensor::new(x.shape().to_vec(), data).expect("relu dx")
            });
            (gi, None)
        }
        (LayerSpec::MaxPool { .. }, LayerCache::PoolArgmax(idx, in_shape)) => {
            let gi = need_input.then(|| {
                let mut dx = Tensor::zeros(in_shape.clone());
                let d = dx.data_mut();
                for (&i, &g) in idx.iter().zip(grad_out.data()) {
                    d[i] += g;
                }
                dx
            });
            (gi, None)
        }
        (LayerSpec::Flatten, LayerCache::Shape(in_shape)) => {
            let gi = need_input.then(|| {
                grad_out
                    .clone()
                    .reshape(in_shape.clone())
                    .expect("flatten dx")
            });
            (gi, None)
        }
        (spec, _) => panic!("cache does not match layer {spec:?}"),
    }
}

/// Checks that each layer accepts the previous layer's output and returns
/// the per-example embedding shape.
pub fn infer_shapes(input_shape: &[usize], layers: &[LayerSpec]) -> Result<Vec<usize>> {
    if input_shape.is_empty() || input_shape.contains(&0) {
        return Err(Error::InvalidNetwork(format!(
            "invalid input shape {input_shape:?}"
        )));
    }
    let mut shape = input_shape.to_vec();
    for (i, layer) in layers.iter().enumerate() {
        shape = layer
            .output_shape(&shape)
            .ok_or_else(|| Error::LayerShape {
                layer: i,
                expected: expected_input(layer),
                actual: shape.clone(),
            })?;
    }
    Ok(shape)
}

fn expected_input(layer: &LayerSpec) -> Vec<usize> {
    match *layer {
        LayerSpec::Dense { inputs, .. } => vec![inputs],
        LayerSpec::Conv2d {
            in_channels,
            height,
            width,
            ..
        } => vec![in_channels, height, width],
        _ => vec![],
    }
}

pub(crate) fn with_batch(batch: usize, shape: &[usize]) -> Vec<usize> {
    batched_shape(batch, shape)
}
