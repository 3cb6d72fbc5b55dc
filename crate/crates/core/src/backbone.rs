//! Embedding backbones: small MLPs producing flat vectors and a two-block
//! strided convolution producing spatial descriptor grids.
//!
//! Architectures are registered by name (`mlp-2`, `mlp-3`, `tinyconv-2`),
//! parameters are enumerable named tensors (required by per-parameter inner
//! updates), and the forward pass is a pure function of bound parameter
//! tensors so adapted copies can be evaluated without touching canonical
//! values.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{Bound, ParamSet};
use crate::rng::{substream, tag};
use crate::tensor::functional::broadcast_row;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    pub fn parse(s: &str) -> Result<Activation> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::Registry(format!("unknown activation '{other}'"))),
        }
    }

    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.relu(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OutputMode {
    Flat(usize),
    Spatial { channels: usize, h: usize, w: usize },
}

impl OutputMode {
    pub fn is_spatial(&self) -> bool {
        matches!(self, OutputMode::Spatial { .. })
    }

    /// Embedding dimension: `d` for flat mode, descriptor dimension
    /// (channel count) for spatial mode.
    pub fn dim(&self) -> usize {
        match *self {
            OutputMode::Flat(d) => d,
            OutputMode::Spatial { channels, .. } => channels,
        }
    }
}

#[derive(Debug, Clone)]
enum Block {
    Affine {
        d_in: usize,
        d_out: usize,
    },
    /// 3x3 convolution, stride 2, padding 1.
    Conv {
        c_in: usize,
        c_out: usize,
        h_in: usize,
        w_in: usize,
        h_out: usize,
        w_out: usize,
    },
}

/// An embedding function `f_theta` with enumerable parameters.
#[derive(Debug, Clone)]
pub struct EmbeddingModel {
    pub arch: String,
    pub input_shape: Vec<usize>,
    pub output_mode: OutputMode,
    activation: Activation,
    blocks: Vec<Block>,
}

fn conv_out(extent: usize) -> usize {
    // k = 3, stride = 2, pad = 1
    (extent + 2 - 3) / 2 + 1
}

/// Build a registered architecture and its fan-in-scaled uniform initial
/// parameters; deterministic under `seed`.
pub fn init_model(
    arch: &str,
    widths: &[usize],
    filters: &[usize],
    activation: Activation,
    input_shape: &[usize],
    seed: u64,
) -> Result<(EmbeddingModel, ParamSet)> {
    let blocks = match arch {
        "mlp-2" | "mlp-3" => {
            let want = if arch == "mlp-2" { 2 } else { 3 };
            if widths.len() != want {
                return Err(Error::Config(format!(
                    "backbone.widths: {arch} needs {want} widths, got {}",
                    widths.len()
                )));
            }
            if input_shape.len() != 1 {
                return Err(Error::Dim(format!(
                    "{arch} expects flat [d] inputs, got {input_shape:?}"
                )));
            }
            let mut d_in = input_shape[0];
            let mut blocks = Vec::new();
            for &d_out in widths {
                blocks.push(Block::Affine { d_in, d_out });
                d_in = d_out;
            }
            blocks
        }
        "tinyconv-2" => {
            if filters.len() != 2 {
                return Err(Error::Config(format!(
                    "backbone.filters: tinyconv-2 needs 2 filter counts, got {}",
                    filters.len()
                )));
            }
            if input_shape.len() != 3 {
                return Err(Error::Dim(format!(
                    "tinyconv-2 expects [c, h, w] inputs, got {input_shape:?}"
                )));
            }
            let (mut c_in, mut h, mut w) = (input_shape[0], input_shape[1], input_shape[2]);
            let mut blocks = Vec::new();
            for &c_out in filters {
                let (h_out, w_out) = (conv_out(h), conv_out(w));
                blocks.push(Block::Conv {
                    c_in,
                    c_out,
                    h_in: h,
                    w_in: w,
                    h_out,
                    w_out,
                });
                c_in = c_out;
                h = h_out;
                w = w_out;
            }
            blocks
        }
        other => {
            return Err(Error::Registry(format!(
                "unknown backbone architecture '{other}'"
            )))
        }
    };

    let output_mode = match blocks.last().expect("at least one block") {
        Block::Affine { d_out, .. } => OutputMode::Flat(*d_out),
        Block::Conv {
            c_out, h_out, w_out, ..
        } => OutputMode::Spatial {
            channels: *c_out,
            h: *h_out,
            w: *w_out,
        },
    };

    let mut params = ParamSet::new();
    for (i, b) in blocks.iter().enumerate() {
        let (fan_in, w_shape, b_shape) = match b {
            Block::Affine { d_in, d_out } => (*d_in, vec![*d_in, *d_out], vec![1, *d_out]),
            Block::Conv { c_in, c_out, .. } => {
                (c_in * 9, vec![c_in * 9, *c_out], vec![1, *c_out])
            }
        };
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut rng = substream(seed, &[tag::INIT, i as u64]);
        let w_numel: usize = w_shape.iter().product();
        let b_numel: usize = b_shape.iter().product();
        let w_vals: Vec<f64> = (0..w_numel).map(|_| rng.random_range(-bound..bound)).collect();
        let b_vals: Vec<f64> = (0..b_numel).map(|_| rng.random_range(-bound..bound)).collect();
        params.push(&format!("backbone.{i}.weight"), &w_shape, w_vals)?;
        params.push(&format!("backbone.{i}.bias"), &b_shape, b_vals)?;
    }

    Ok((
        EmbeddingModel {
            arch: arch.to_string(),
            input_shape: input_shape.to_vec(),
            output_mode,
            activation,
            blocks,
        },
        params,
    ))
}

impl EmbeddingModel {
    pub fn param_names(&self) -> Vec<String> {
        (0..self.blocks.len())
            .flat_map(|i| {
                [
                    format!("backbone.{i}.weight"),
                    format!("backbone.{i}.bias"),
                ]
            })
            .collect()
    }

    /// Embed a batch: flat mode takes `[n, d]` and returns `[n, d_out]`;
    /// spatial mode takes `[n, c, h, w]` and returns `[n, c_out, h', w']`.
    pub fn embed(&self, params: &Bound, batch: &Tensor) -> Result<Tensor> {
        let want_rank = 1 + self.input_shape.len();
        if batch.shape().len() != want_rank || batch.shape()[1..] != self.input_shape[..] {
            return Err(Error::Dim(format!(
                "embed: batch shape {:?} does not match input contract {:?}",
                batch.shape(),
                self.input_shape
            )));
        }
        let n = batch.shape()[0];
        let mut x = batch.clone();
        for (i, b) in self.blocks.iter().enumerate() {
            let w = params.get(&format!("backbone.{i}.weight"))?;
            let bias = params.get(&format!("backbone.{i}.bias"))?;
            x = match *b {
                Block::Affine { .. } => {
                    let z = x.matmul(w)?.add(&broadcast_row(bias, n)?)?;
                    self.activation.apply(&z)?
                }
                Block::Conv {
                    c_in,
                    c_out,
                    h_in,
                    w_in,
                    h_out,
                    w_out,
                } => {
                    let patches =
                        x.gather_flat(&im2col_indices(n, c_in, h_in, w_in), &[n * h_out * w_out, c_in * 9])?;
                    let z = patches
                        .matmul(w)?
                        .add(&broadcast_row(bias, n * h_out * w_out)?)?;
                    let z = self.activation.apply(&z)?;
                    z.gather_flat(
                        &nhwc_to_nchw_indices(n, h_out, w_out, c_out),
                        &[n, c_out, h_out, w_out],
                    )?
                }
            };
        }
        Ok(x)
    }
}

/// Gather indices turning `[n, c, h, w]` into im2col patches
/// `[n*oh*ow, c*9]` for a 3x3 / stride-2 / pad-1 convolution (`-1` = pad).
fn im2col_indices(n: usize, c: usize, h: usize, w: usize) -> Vec<i64> {
    let (oh, ow) = (conv_out(h), conv_out(w));
    let mut idx = Vec::with_capacity(n * oh * ow * c * 9);
    for i in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    for ky in 0..3usize {
                        for kx in 0..3usize {
                            let y = (oy * 2 + ky) as i64 - 1;
                            let x = (ox * 2 + kx) as i64 - 1;
                            idx.push(if y < 0 || y >= h as i64 || x < 0 || x >= w as i64 {
                                -1
                            } else {
                                (((i * c + ch) * h) as i64 + y) * w as i64 + x
                            });
                        }
                    }
                }
            }
        }
    }
    idx
}

/// Gather indices permuting `[(n*oh*ow), c]` rows into `[n, c, oh, ow]`.
fn nhwc_to_nchw_indices(n: usize, oh: usize, ow: usize, c: usize) -> Vec<i64> {
    let mut idx = Vec::with_capacity(n * c * oh * ow);
    for i in 0..n {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    idx.push(((((i * oh + oy) * ow + ox) * c) + ch) as i64);
                }
            }
        }
    }
    idx
}

/// Descriptor matrix `[h*w, d]` of one image from a spatial embedding
/// `[n, d, h, w]` (the reshape of Eq-style local descriptors; a bijection).
pub fn image_descriptors(spatial: &Tensor, image: usize) -> Result<Tensor> {
    let s = spatial.shape();
    if s.len() != 4 {
        return Err(Error::Dim(format!(
            "image_descriptors: expected [n, d, h, w], got {s:?}"
        )));
    }
    let (n, d, h, w) = (s[0], s[1], s[2], s[3]);
    if image >= n {
        return Err(Error::Dim(format!(
            "image_descriptors: image {image} out of range [0, {n})"
        )));
    }
    let mut idx = Vec::with_capacity(h * w * d);
    for p in 0..h * w {
        for ch in 0..d {
            idx.push((((image * d + ch) * h * w) + p) as i64);
        }
    }
    spatial.gather_flat(&idx, &[h * w, d])
}

/// Inverse of the descriptor reshape for one image, back to `[d, h, w]`.
pub fn descriptors_to_grid(desc: &Tensor) -> Result<Tensor> {
    let (hw, d) = desc.rank2("descriptors_to_grid")?;
    let mut idx = Vec::with_capacity(d * hw);
    for ch in 0..d {
        for p in 0..hw {
            idx.push((p * d + ch) as i64);
        }
    }
    desc.gather_flat(&idx, &[d, hw])
}
