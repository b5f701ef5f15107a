//! Deterministic ViT forward pass with tap points.
//!
//! Each block computes
//!
//! ```text
//! z' = MSA(LN1(z)) + z
//! z  = MLP(LN2(z')) + z'
//! ```
//!
//! and the block output `z` (after the second residual, before the final
//! norm) is recorded with any class token stripped. Per-head attention is
//! kept for the last block, or for every block with
//! [`TapOptions::all_attention`].

use crate::degradation::RgbImage;
use crate::error::{Error, Result};
use crate::model_io::{block_tensor_name, FeaturePooling, VitModel};
use crate::tensor::{gelu, layer_norm, linear, matmul, softmax_rows, Tensor, LAYER_NORM_EPS};

/// Preprocessed image, `height × width × 3` interleaved RGB in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl ImageTensor {
    pub fn pixel(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + c]
    }
}

/// Maps each channel value through `(x/255 − 0.5)/0.5`. No resizing is done
/// here; the image must already be `image_size × image_size`.
pub fn preprocess(raw: &RgbImage, image_size: usize) -> Result<ImageTensor> {
    if raw.width != image_size || raw.height != image_size {
        return Err(Error::Dimension(format!(
            "image is {}x{}, model expects {image_size}x{image_size}",
            raw.width, raw.height
        )));
    }
    Ok(ImageTensor {
        height: raw.height,
        width: raw.width,
        data: raw
            .data
            .iter()
            .map(|&v| (f32::from(v) / 255.0 - 0.5) / 0.5)
            .collect(),
    })
}

/// Flattens patches in row-major grid order. Inside a patch the layout is
/// `(dy·P + dx)·3 + channel`, channel innermost.
pub fn flatten_patches(img: &ImageTensor, patch_size: usize) -> Result<Tensor> {
    if !img.height.is_multiple_of(patch_size) || !img.width.is_multiple_of(patch_size) {
        return Err(Error::Dimension(format!(
            "image {}x{} not divisible into {patch_size}px patches",
            img.width, img.height
        )));
    }
    let (gh, gw) = (img.height / patch_size, img.width / patch_size);
    let patch_dim = patch_size * patch_size * 3;
    let mut data = Vec::with_capacity(gh * gw * patch_dim);
    for gy in 0..gh {
        for gx in 0..gw {
            for dy in 0..patch_size {
                for dx in 0..patch_size {
                    for c in 0..3 {
                        data.push(img.pixel(gy * patch_size + dy, gx * patch_size + dx, c));
                    }
                }
            }
        }
    }
    Tensor::new(vec![gh * gw, patch_dim], data)
}

/// Initial token sequence: projected patches (class token prepended when
/// configured) plus positional embedding. Shape `(N[+1]) × D`.
pub fn patchify_embed(img: &ImageTensor, model: &VitModel) -> Result<Tensor> {
    let cfg = &model.config;
    if img.height != cfg.image_size || img.width != cfg.image_size {
        return Err(Error::Dimension(format!(
            "image tensor is {}x{}, model expects {}x{}",
            img.width, img.height, cfg.image_size, cfg.image_size
        )));
    }
    let patches = flatten_patches(img, cfg.patch_size)?;
    let projected = linear(
        &patches,
        model.tensor("patch_embed.weight")?,
        model.tensor("patch_embed.bias")?,
    )?;
    let tokens = if cfg.has_class_token {
        let mut data = model.tensor("cls_token")?.data().to_vec();
        data.extend_from_slice(projected.data());
        Tensor::new(vec![cfg.seq_len(), cfg.embed_dim], data)?
    } else {
        projected
    };
    tokens.add(model.tensor("pos_embed")?)
}

struct BlockWeights<'a> {
    ln1: (&'a Tensor, &'a Tensor),
    qkv: (&'a Tensor, &'a Tensor),
    attn_out: (&'a Tensor, &'a Tensor),
    ln2: (&'a Tensor, &'a Tensor),
    fc1: (&'a Tensor, &'a Tensor),
    fc2: (&'a Tensor, &'a Tensor),
}

impl<'a> BlockWeights<'a> {
    fn load(model: &'a VitModel, block: usize) -> Result<Self> {
        if block >= model.config.num_blocks {
            return Err(Error::Range(format!(
                "block {block} >= num_blocks {}",
                model.config.num_blocks
            )));
        }
        let get = |suffix: &str| model.tensor(&block_tensor_name(block, suffix));
        Ok(Self {
            ln1: (get("ln1.gamma")?, get("ln1.beta")?),
            qkv: (get("qkv.weight")?, get("qkv.bias")?),
            attn_out: (get("attn_out.weight")?, get("attn_out.bias")?),
            ln2: (get("ln2.gamma")?, get("ln2.beta")?),
            fc1: (get("mlp.fc1.weight")?, get("mlp.fc1.bias")?),
            fc2: (get("mlp.fc2.weight")?, get("mlp.fc2.bias")?),
        })
    }
}

/// Copies columns `start..start+width` of a matrix.
fn column_slice(x: &Tensor, start: usize, width: usize) -> Result<Tensor> {
    let (m, _) = x.dims2()?;
    let mut data = Vec::with_capacity(m * width);
    for row in x.rows() {
        data.extend_from_slice(&row[start..start + width]);
    }
    Tensor::new(vec![m, width], data)
}

/// One transformer block. Returns the block output and the per-head
/// attention matrices `softmax(Q_h K_hᵀ / √(D/H))`, each `S × S`.
pub fn attention_block(
    x: &Tensor,
    block_index: usize,
    model: &VitModel,
) -> Result<(Tensor, Vec<Tensor>)> {
    let cfg = &model.config;
    let w = BlockWeights::load(model, block_index)?;
    let (seq, d) = x.dims2()?;
    if d != cfg.embed_dim {
        return Err(Error::Dimension(format!(
            "block input width {d} != embed_dim {}",
            cfg.embed_dim
        )));
    }
    let dh = cfg.head_dim();
    let scale = (dh as f32).sqrt();

    let normed = layer_norm(x, w.ln1.0, w.ln1.1, LAYER_NORM_EPS)?;
    let qkv = linear(&normed, w.qkv.0, w.qkv.1)?;

    let mut concat = vec![0.0f32; seq * d];
    let mut attention = Vec::with_capacity(cfg.num_heads);
    for h in 0..cfg.num_heads {
        let q = column_slice(&qkv, h * dh, dh)?;
        let k = column_slice(&qkv, d + h * dh, dh)?;
        let v = column_slice(&qkv, 2 * d + h * dh, dh)?;
        let scores = matmul(&q, &k.transpose()?)?.map(|s| s / scale);
        let attn = softmax_rows(&scores)?;
        let head = matmul(&attn, &v)?;
        for (i, row) in head.rows().enumerate() {
            concat[i * d + h * dh..i * d + (h + 1) * dh].copy_from_slice(row);
        }
        attention.push(attn);
    }
    let concat = Tensor::new(vec![seq, d], concat)?;
    let mixed = linear(&concat, w.attn_out.0, w.attn_out.1)?.add(x)?;

    let normed = layer_norm(&mixed, w.ln2.0, w.ln2.1, LAYER_NORM_EPS)?;
    let hidden = gelu(&linear(&normed, w.fc1.0, w.fc1.1)?);
    let out = linear(&hidden, w.fc2.0, w.fc2.1)?.add(&mixed)?;
    Ok((out, attention))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TapOptions {
    /// Keep the attention of every block, not only the last.
    pub all_attention: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockTaps {
    /// One `N × D` tensor per block, class token removed.
    pub patch_embeddings: Vec<Tensor>,
    /// Per-head `S × S` attention of the last block, `S = N + prefix_tokens`.
    pub last_block_attention: Vec<Tensor>,
    /// Per-block, per-head attention when requested.
    pub all_block_attention: Option<Vec<Vec<Tensor>>>,
    /// Pooled output of the final layer norm, length `D`.
    pub final_feature: Tensor,
    /// Sequence positions ahead of the patches (1 with a class token).
    pub prefix_tokens: usize,
}

impl BlockTaps {
    pub fn num_blocks(&self) -> usize {
        self.patch_embeddings.len()
    }

    pub fn num_patches(&self) -> usize {
        self.patch_embeddings.first().map_or(0, |t| t.shape()[0])
    }
}

pub fn forward_with_taps(
    img: &ImageTensor,
    model: &VitModel,
    opts: TapOptions,
) -> Result<BlockTaps> {
    let cfg = &model.config;
    let prefix = cfg.prefix_tokens();
    let seq = cfg.seq_len();
    let mut x = patchify_embed(img, model)?;

    let mut patch_embeddings = Vec::with_capacity(cfg.num_blocks);
    let mut all = opts.all_attention.then(Vec::new);
    let mut last = Vec::new();
    for block in 0..cfg.num_blocks {
        let (out, attention) = attention_block(&x, block, model)?;
        patch_embeddings.push(out.slice_rows(prefix, seq)?);
        if block + 1 == cfg.num_blocks {
            last = attention.clone();
        }
        if let Some(all) = all.as_mut() {
            all.push(attention);
        }
        x = out;
    }

    let normed = layer_norm(
        &x,
        model.tensor("final_norm.gamma")?,
        model.tensor("final_norm.beta")?,
        LAYER_NORM_EPS,
    )?;
    let final_feature = pool(&normed, prefix, cfg.feature_pooling)?;

    Ok(BlockTaps {
        patch_embeddings,
        last_block_attention: last,
        all_block_attention: all,
        final_feature,
        prefix_tokens: prefix,
    })
}

fn pool(normed: &Tensor, prefix: usize, pooling: FeaturePooling) -> Result<Tensor> {
    let (seq, d) = normed.dims2()?;
    match pooling {
        FeaturePooling::ClassToken => {
            if prefix == 0 {
                return Err(Error::Contract(
                    "class_token pooling on a model without class token".into(),
                ));
            }
            Tensor::new(vec![d], normed.row(0).to_vec())
        }
        FeaturePooling::MeanPatch => {
            let mut acc = vec![0.0f64; d];
            for row in normed.rows().skip(prefix) {
                for (a, &v) in acc.iter_mut().zip(row) {
                    *a += f64::from(v);
                }
            }
            let n = (seq - prefix) as f64;
            Tensor::new(vec![d], acc.into_iter().map(|a| (a / n) as f32).collect())
        }
    }
}

/// Identity embedding of an image: the pooled final feature of one forward pass.
pub fn embed(img: &ImageTensor, model: &VitModel) -> Result<Tensor> {
    Ok(forward_with_taps(img, model, TapOptions::default())?.final_feature)
}
