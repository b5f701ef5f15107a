//! Shared test fixtures and an explicit-loop reference forward pass.
//!
//! The reference works in `f64` over plain nested `Vec`s, indexing the raw
//! weight buffers directly. It shares no code with the engine beyond reading
//! tensor buffers by name.

#![allow(dead_code, clippy::needless_range_loop)]

use rand::{Rng, SeedableRng};
use rand_xoshiro::SplitMix64;
use vitnt::degradation::RgbImage;
use vitnt::model_io::{block_tensor_name, VitConfig, VitModel};

pub type Mat = Vec<Vec<f64>>;

pub struct Reference {
    /// Per block, per patch token (class token dropped), `D` values.
    pub taps: Vec<Mat>,
    /// Per head attention of the last block, full sequence.
    pub last_attention: Vec<Mat>,
    pub final_feature: Vec<f64>,
}

pub fn tiny_config() -> VitConfig {
    VitConfig {
        image_size: 8,
        patch_size: 4,
        embed_dim: 8,
        num_blocks: 2,
        num_heads: 2,
        mlp_ratio: 4.0,
        has_class_token: false,
        feature_pooling: Default::default(),
    }
}

pub fn random_image(size: usize, seed: u64) -> RgbImage {
    let mut rng = SplitMix64::seed_from_u64(seed);
    let data = (0..size * size * 3).map(|_| rng.random::<u8>()).collect();
    RgbImage::new(size, size, data).unwrap()
}

fn w(model: &VitModel, name: &str) -> Vec<f64> {
    model
        .tensor(name)
        .unwrap()
        .data()
        .iter()
        .map(|&v| f64::from(v))
        .collect()
}

fn bw(model: &VitModel, block: usize, suffix: &str) -> Vec<f64> {
    w(model, &block_tensor_name(block, suffix))
}

/// `y[i][o] = Σ_k x[i][k]·W[o][k] + b[o]`, `W` stored row-major `out × in`.
fn dense(x: &Mat, weight: &[f64], bias: &[f64]) -> Mat {
    let out_dim = bias.len();
    let in_dim = x[0].len();
    assert_eq!(weight.len(), out_dim * in_dim);
    let mut y = vec![vec![0.0; out_dim]; x.len()];
    for i in 0..x.len() {
        for o in 0..out_dim {
            let mut acc = bias[o];
            for k in 0..in_dim {
                acc += x[i][k] * weight[o * in_dim + k];
            }
            y[i][o] = acc;
        }
    }
    y
}

fn norm(x: &Mat, gamma: &[f64], beta: &[f64]) -> Mat {
    let d = x[0].len();
    let mut y = vec![vec![0.0; d]; x.len()];
    for i in 0..x.len() {
        let mut mean = 0.0;
        for k in 0..d {
            mean += x[i][k];
        }
        mean /= d as f64;
        let mut var = 0.0;
        for k in 0..d {
            var += (x[i][k] - mean) * (x[i][k] - mean);
        }
        var /= d as f64;
        let inv = 1.0 / (var + 1e-6).sqrt();
        for k in 0..d {
            y[i][k] = (x[i][k] - mean) * inv * gamma[k] + beta[k];
        }
    }
    y
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn add(a: &Mat, b: &Mat) -> Mat {
    let mut y = a.clone();
    for i in 0..a.len() {
        for k in 0..a[i].len() {
            y[i][k] += b[i][k];
        }
    }
    y
}

pub fn reference_forward(raw: &RgbImage, model: &VitModel) -> Reference {
    let cfg = &model.config;
    let p = cfg.patch_size;
    let g = cfg.image_size / p;
    let d = cfg.embed_dim;
    let heads = cfg.num_heads;
    let dh = d / heads;
    let prefix = usize::from(cfg.has_class_token);

    // Patch vectors: pixel (row y, column x), channel innermost.
    let mut patches: Mat = Vec::new();
    for gy in 0..g {
        for gx in 0..g {
            let mut v = Vec::new();
            for dy in 0..p {
                for dx in 0..p {
                    for c in 0..3 {
                        let y = gy * p + dy;
                        let x = gx * p + dx;
                        let byte = raw.data[(y * raw.width + x) * 3 + c];
                        v.push((f64::from(byte) / 255.0 - 0.5) / 0.5);
                    }
                }
            }
            patches.push(v);
        }
    }

    let mut z = dense(
        &patches,
        &w(model, "patch_embed.weight"),
        &w(model, "patch_embed.bias"),
    );
    if cfg.has_class_token {
        z.insert(0, w(model, "cls_token"));
    }
    let pos = w(model, "pos_embed");
    for i in 0..z.len() {
        for k in 0..d {
            z[i][k] += pos[i * d + k];
        }
    }

    let seq = z.len();
    let mut taps = Vec::new();
    let mut last_attention = Vec::new();
    for b in 0..cfg.num_blocks {
        let h1 = norm(&z, &bw(model, b, "ln1.gamma"), &bw(model, b, "ln1.beta"));
        let qkv = dense(&h1, &bw(model, b, "qkv.weight"), &bw(model, b, "qkv.bias"));
        let mut concat = vec![vec![0.0; d]; seq];
        let mut attn_heads = Vec::new();
        for h in 0..heads {
            let mut a = vec![vec![0.0; seq]; seq];
            for i in 0..seq {
                let mut row_max = f64::NEG_INFINITY;
                for j in 0..seq {
                    let mut s = 0.0;
                    for k in 0..dh {
                        s += qkv[i][h * dh + k] * qkv[j][d + h * dh + k];
                    }
                    a[i][j] = s / (dh as f64).sqrt();
                    row_max = row_max.max(a[i][j]);
                }
                let mut total = 0.0;
                for j in 0..seq {
                    a[i][j] = (a[i][j] - row_max).exp();
                    total += a[i][j];
                }
                for j in 0..seq {
                    a[i][j] /= total;
                }
            }
            for i in 0..seq {
                for k in 0..dh {
                    let mut acc = 0.0;
                    for j in 0..seq {
                        acc += a[i][j] * qkv[j][2 * d + h * dh + k];
                    }
                    concat[i][h * dh + k] = acc;
                }
            }
            attn_heads.push(a);
        }
        let mixed = add(
            &dense(
                &concat,
                &bw(model, b, "attn_out.weight"),
                &bw(model, b, "attn_out.bias"),
            ),
            &z,
        );
        let h2 = norm(
            &mixed,
            &bw(model, b, "ln2.gamma"),
            &bw(model, b, "ln2.beta"),
        );
        let mut hidden = dense(
            &h2,
            &bw(model, b, "mlp.fc1.weight"),
            &bw(model, b, "mlp.fc1.bias"),
        );
        for row in hidden.iter_mut() {
            for v in row.iter_mut() {
                *v = gelu(*v);
            }
        }
        z = add(
            &dense(
                &hidden,
                &bw(model, b, "mlp.fc2.weight"),
                &bw(model, b, "mlp.fc2.bias"),
            ),
            &mixed,
        );
        taps.push(z[prefix..].to_vec());
        last_attention = attn_heads;
    }

    let normed = norm(
        &z,
        &w(model, "final_norm.gamma"),
        &w(model, "final_norm.beta"),
    );
    let final_feature = match cfg.feature_pooling {
        vitnt::model_io::FeaturePooling::ClassToken => normed[0].clone(),
        vitnt::model_io::FeaturePooling::MeanPatch => {
            let mut f = vec![0.0; d];
            for row in &normed[prefix..] {
                for k in 0..d {
                    f[k] += row[k];
                }
            }
            f.iter().map(|v| v / (seq - prefix) as f64).collect()
        }
    };

    Reference {
        taps,
        last_attention,
        final_feature,
    }
}

/// Largest absolute elementwise difference between an engine buffer and a
/// reference matrix.
pub fn max_abs_diff(engine: &[f32], reference: &Mat) -> f64 {
    let flat: Vec<f64> = reference.iter().flatten().copied().collect();
    assert_eq!(engine.len(), flat.len(), "shape mismatch");
    engine
        .iter()
        .zip(&flat)
        .map(|(&a, &b)| (f64::from(a) - b).abs())
        .fold(0.0, f64::max)
}
