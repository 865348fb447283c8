//! Binary network checkpoints.
//!
//! All integers are little-endian `u32`, all reals little-endian `f64`:
//!
//! ```text
//! magic        4 bytes  "PTCK"
//! version      u32      1
//! meta_len     u32      byte length of the metadata block
//! metadata     bytes    UTF-8 text (the CLI stores the run config here)
//! input_rank   u32
//! input_dims   u32 x input_rank
//! layer_count  u32
//! layers       per layer: tag u8, then its u32 fields
//!                0 Dense    inputs, outputs
//!                1 Conv2d   in_channels, out_channels, kernel, stride, height, width
//!                2 Relu
//!                3 MaxPool  size
//!                4 Flatten
//! scheme_len   u32      number of parameterized layers (L)
//! head_tag     u8       0 none, 1 softmax, 2 cosine, 3 prototype
//! head_dims    u32 classes, u32 dim          (only when head_tag != 0)
//! head_scale   f64                           (only for cosine)
//! tensors      f64 values: for each parameterized layer its weight then
//!              its bias, row-major; then the head tensors (softmax: weight,
//!              bias; cosine: weight; prototype: prototypes)
//! ```
//!
//! Trailing bytes are rejected, so a checkpoint round-trips bit-exactly.

use std::path::Path;

use sha2::{Digest, Sha256};

use super::head::{CosineHead, Head, PrototypeHead, SoftmaxHead};
use super::layer::{LayerSpec, ParamBlock};
use super::network::Network;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PTCK";
pub const FORMAT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend((v as u32).to_le_bytes());
}

pub fn encode(net: &Network, metadata: &str) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend(MAGIC);
    out.extend(FORMAT_VERSION.to_le_bytes());
    put_u32(&mut out, metadata.len());
    out.extend(metadata.as_bytes());
    put_u32(&mut out, net.input_shape().len());
    for &d in net.input_shape() {
        put_u32(&mut out, d);
    }
    put_u32(&mut out, net.layers().len());
    for layer in net.layers() {
        match *layer {
            LayerSpec::Dense { inputs, outputs } => {
                out.push(0);
                put_u32(&mut out, inputs);
                put_u32(&mut out, outputs);
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                height,
                width,
            } => {
                out.push(1);
                for v in [in_channels, out_channels, kernel, stride, height, width] {
                    put_u32(&mut out, v);
                }
            }
            LayerSpec::Relu => out.push(2),
            LayerSpec::MaxPool { size } => {
                out.push(3);
                put_u32(&mut out, size);
            }
            LayerSpec::Flatten => out.push(4),
        }
    }
    put_u32(&mut out, net.scheme_len());
    match net.head() {
        None => out.push(0),
        Some(h) => {
            out.push(match h {
                Head::Softmax(_) => 1,
                Head::Cosine(_) => 2,
                Head::Prototype(_) => 3,
            });
            put_u32(&mut out, h.classes());
            put_u32(&mut out, h.embedding_dim());
            if let Head::Cosine(c) = h {
                out.extend(c.scale.to_le_bytes());
            }
        }
    }
    out.extend(net.param_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(f64::from_le_bytes(a))
    }

    fn tensor(&mut self, shape: Vec<usize>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Tensor::new(shape, data)
    }
}

/// Decodes a checkpoint into the network and its metadata text.
pub fn decode(bytes: &[u8]) -> Result<(Network, String)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()? as u32;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}"
        )));
    }
    let meta_len = r.u32()?;
    let metadata = String::from_utf8(r.take(meta_len)?.to_vec())
        .map_err(|_| Error::Checkpoint("metadata is not UTF-8".into()))?;
    let rank = r.u32()?;
    let input_shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let n_layers = r.u32()?;
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let layer = match r.u8()? {
            0 => LayerSpec::Dense {
                inputs: r.u32()?,
                outputs: r.u32()?,
            },
            1 => LayerSpec::Conv2d {
                in_channels: r.u32()?,
                out_channels: r.u32()?,
                kernel: r.u32()?,
                stride: r.u32()?,
                height: r.u32()?,
                width: r.u32()?,
            },
            2 => LayerSpec::Relu,
            3 => LayerSpec::MaxPool { size: r.u32()? },
            4 => LayerSpec::Flatten,
            t => return Err(Error::Checkpoint(format!("unknown layer tag {t}"))),
        };
        layers.push(layer);
    }
    let scheme_len = r.u32()?;
    let head_tag = r.u8()?;
    let head_dims = if head_tag != 0 {
        Some((r.u32()?, r.u32()?))
    } else {
        None
    };
    let scale = if head_tag == 2 { Some(r.f64()?) } else { None };
    let mut params = Vec::new();
    for l in layers.iter().filter(|l| l.is_parameterized()) {
        let (ws, bs) = l.param_shapes().expect("parameterized");
        params.push(ParamBlock {
            weight: r.tensor(ws)?,
            bias: r.tensor(bs)?,
        });
    }
    if params.len() != scheme_len {
        return Err(Error::Checkpoint(format!(
            "header declares L = {scheme_len} but layers define {}",
            params.len()
        )));
    }
    let head = match (head_tag, head_dims) {
        (0, _) => None,
        (1, Some((c, d))) => Some(Head::Softmax(SoftmaxHead {
            weight: r.tensor(vec![c, d])?,
            bias: r.tensor(vec![c])?,
        })),
        (2, Some((c, d))) => Some(Head::Cosine(CosineHead {
            weight: r.tensor(vec![c, d])?,
            scale: scale.expect("cosine scale read"),
        })),
        (3, Some((c, d))) => Some(Head::Prototype(PrototypeHead {
            prototypes: r.tensor(vec![c, d])?,
        })),
        (t, _) => return Err(Error::Checkpoint(format!("unknown head tag {t}"))),
    };
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    let net = Network::from_parts(input_shape, layers, params, head)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok((net, metadata))
}

pub fn save(path: &Path, net: &Network, metadata: &str) -> Result<Vec<u8>> {
    let bytes = encode(net, metadata);
    std::fs::write(path, &bytes)?;
    Ok(bytes)
}

pub fn load(path: &Path) -> Result<(Network, String, Vec<u8>)> {
    let bytes = std::fs::read(path)?;
    let (net, meta) = decode(&bytes)?;
    Ok((net, meta, bytes))
}

/// Git-style content hash: SHA-256 over `"blob <len>\0"` followed by the bytes.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv_net() -> Network {
        Network::init(
            vec![1, 6, 6],
            vec![
                LayerSpec::Conv2d {
                    in_channels: 1,
                    out_channels: 2,
                    kernel: 3,
                    stride: 1,
                    height: 6,
                    width: 6,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool { size: 2 },
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    inputs: 8,
                    outputs: 3,
                },
            ],
            11,
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for net in [conv_net(), conv_net().with_softmax_head(4, 2)] {
            let bytes = encode(&net, "seed = 11");
            let (back, meta) = decode(&bytes).unwrap();
            assert_eq!(meta, "seed = 11");
            assert_eq!(back.param_bytes(), net.param_bytes());
            assert_eq!(encode(&back, &meta), bytes);
        }
    }

    #[test]
    fn cosine_head_round_trip() {
        let net = conv_net().with_cosine_head(
            Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 0.1, 0.2, 0.3]).unwrap(),
            7.5,
        );
        let (back, _) = decode(&encode(&net, "")).unwrap();
        assert_eq!(back, net);
    }

    #[test]
    fn rejects_truncation_and_trailing_bytes() {
        let bytes = encode(&conv_net(), "");
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(decode(&longer).is_err());
        let mut bad = bytes;
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = encode(&conv_net(), "");
        let mut b = a.clone();
        *b.last_mut().unwrap() ^= 1;
        assert_eq!(content_hash(&a), content_hash(&a.clone()));
        assert_ne!(content_hash(&a), content_hash(&b));
        assert_eq!(content_hash(&a).len(), 64);
    }
}
