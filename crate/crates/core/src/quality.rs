//! Training-free image quality from the stability of patch embeddings across
//! consecutive transformer blocks.
//!
//! For a run of consecutive blocks `t₀ … t_{T−1}` and each patch `p`:
//!
//! ```text
//! ẑ_t(p)    = z_t(p) / ‖z_t(p)‖₂
//! d_i(p)    = ‖ẑ_{tᵢ}(p) − ẑ_{tᵢ₊₁}(p)‖₂              i = 0 … T−2
//! d̄(p)      = mean_i d_i(p)
//! q(p)      = 2 / (1 + exp(α · d̄(p)))                 ∈ (0, 1]
//! Q         = Σ_p w(p) · q(p)
//! ```
//!
//! with `w` either uniform (`1/N`) or the normalized column mass of the
//! last block's attention, summed over heads. The class token, when the
//! model has one, takes no part in any of these quantities.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model_io::VitModel;
use crate::tensor::{l2_normalize_rows, Tensor, L2_NORM_EPS};
use crate::vit::{forward_with_taps, BlockTaps, ImageTensor, TapOptions};

/// Deepest block used by default; the default run is `0..=min(L, 12) − 1`.
pub const DEFAULT_MAX_BLOCKS: usize = 12;
pub const DEFAULT_ALPHA: f32 = 1.0;

/// Inclusive run of consecutive block indices, at least two long.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockSet {
    first: usize,
    last: usize,
}

impl BlockSet {
    pub fn new(first: usize, last: usize) -> Result<Self> {
        if last <= first {
            return Err(Error::Contract(format!(
                "block set {first}..{last} must span at least two blocks in increasing order"
            )));
        }
        Ok(Self { first, last })
    }

    /// Accepts an explicit index list; it must increase in steps of exactly one.
    pub fn from_indices(indices: &[usize]) -> Result<Self> {
        if indices.len() < 2 {
            return Err(Error::Contract(format!(
                "block set needs at least two blocks, got {indices:?}"
            )));
        }
        if indices.windows(2).any(|w| w[1] != w[0] + 1) {
            return Err(Error::Contract(format!(
                "block set {indices:?} is not a run of consecutive blocks"
            )));
        }
        Self::new(indices[0], indices[indices.len() - 1])
    }

    pub fn default_for(num_blocks: usize) -> Result<Self> {
        let depth = num_blocks.min(DEFAULT_MAX_BLOCKS);
        if depth < 2 {
            return Err(Error::Contract(format!(
                "a {num_blocks}-block model has no block transition to measure"
            )));
        }
        Self::new(0, depth - 1)
    }

    pub fn first(&self) -> usize {
        self.first
    }

    pub fn last(&self) -> usize {
        self.last
    }

    /// Number of blocks T.
    pub fn len(&self) -> usize {
        self.last - self.first + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn indices(&self) -> std::ops::RangeInclusive<usize> {
        self.first..=self.last
    }
}

impl fmt::Display for BlockSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}..{}", self.first, self.last)
    }
}

/// Parses `a..b` (both ends inclusive).
impl FromStr for BlockSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parse_err = || Error::Parse {
            location: "block set".into(),
            message: format!("expected `first..last`, got {s:?}"),
        };
        let (a, b) = s.split_once("..").ok_or_else(parse_err)?;
        let b = b.strip_prefix('=').unwrap_or(b);
        let first = a.trim().parse().map_err(|_| parse_err())?;
        let last = b.trim().parse().map_err(|_| parse_err())?;
        Self::new(first, last)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Aggregation {
    Uniform,
    #[default]
    AttentionLast,
    AttentionAll,
}

impl Aggregation {
    pub fn as_str(&self) -> &'static str {
        match self {
            Aggregation::Uniform => "uniform",
            Aggregation::AttentionLast => "attn-last",
            Aggregation::AttentionAll => "attn-all",
        }
    }
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Aggregation::Uniform),
            "attn-last" | "attention_last" => Ok(Aggregation::AttentionLast),
            "attn-all" | "attention_all" => Ok(Aggregation::AttentionAll),
            other => Err(Error::Parse {
                location: "aggregation".into(),
                message: format!("unknown aggregation {other:?} (uniform, attn-last, attn-all)"),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionMode {
    Last,
    /// Equal-weight average of every block's normalized column mass.
    All,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QualityConfig {
    pub block_set: BlockSet,
    pub alpha: f32,
    pub aggregation: Aggregation,
    pub eps_norm: f32,
}

impl QualityConfig {
    /// Defaults for an `num_blocks`-deep model: first `min(L, 12)` blocks,
    /// α = 1, last-block attention weighting.
    pub fn for_depth(num_blocks: usize) -> Result<Self> {
        Ok(Self {
            block_set: BlockSet::default_for(num_blocks)?,
            alpha: DEFAULT_ALPHA,
            aggregation: Aggregation::AttentionLast,
            eps_norm: L2_NORM_EPS,
        })
    }

    fn check(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Contract(format!(
                "alpha must be > 0, got {}",
                self.alpha
            )));
        }
        if self.eps_norm.is_nan() || self.eps_norm <= 0.0 {
            return Err(Error::Contract(format!(
                "eps_norm must be > 0, got {}",
                self.eps_norm
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QualityResult {
    pub per_patch_mean_distance: Vec<f32>,
    pub per_patch_quality: Vec<f32>,
    pub patch_weights: Vec<f32>,
    pub image_score: f32,
}

impl QualityResult {
    /// Unweighted mean of the per-patch mean distances.
    pub fn mean_distance(&self) -> f64 {
        let n = self.per_patch_mean_distance.len() as f64;
        self.per_patch_mean_distance
            .iter()
            .map(|&d| f64::from(d))
            .sum::<f64>()
            / n
    }
}

/// Distances between unit-normalized embeddings of the same patch at each
/// pair of consecutive blocks in the set. Shape `(T − 1) × N`.
pub fn cross_block_distances(taps: &BlockTaps, cfg: &QualityConfig) -> Result<Tensor> {
    let set = cfg.block_set;
    if set.last() >= taps.num_blocks() {
        return Err(Error::Range(format!(
            "block set {set} needs block {}, taps cover 0..{}",
            set.last(),
            taps.num_blocks()
        )));
    }
    let normalized = set
        .indices()
        .map(|b| l2_normalize_rows(&taps.patch_embeddings[b], cfg.eps_norm))
        .collect::<Result<Vec<_>>>()?;
    let n = taps.num_patches();
    let mut out = Vec::with_capacity((set.len() - 1) * n);
    for pair in normalized.windows(2) {
        for (a, b) in pair[0].rows().zip(pair[1].rows()) {
            out.push(unit_distance(a, b));
        }
    }
    Tensor::new(vec![set.len() - 1, n], out)
}

/// Euclidean distance between two (near-)unit vectors. Rounding in the
/// normalization can push antipodal pairs a few ulps past 2, so the result
/// is clamped to the exact bound.
fn unit_distance(a: &[f32], b: &[f32]) -> f32 {
    let sq: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum();
    (sq.sqrt() as f32).min(2.0)
}

/// Per-patch mean over the transitions (rows) of a distance matrix.
pub fn mean_patch_distance(distances: &Tensor) -> Result<Tensor> {
    let (transitions, n) = distances.dims2()?;
    if transitions == 0 || distances.shape().len() != 2 {
        return Err(Error::Contract(
            "mean_patch_distance needs a (T-1) x N distance matrix".into(),
        ));
    }
    let mut acc = vec![0.0f64; n];
    for row in distances.rows() {
        for (a, &d) in acc.iter_mut().zip(row) {
            *a += f64::from(d);
        }
    }
    Tensor::new(
        vec![n],
        acc.into_iter()
            .map(|a| (a / transitions as f64) as f32)
            .collect(),
    )
}

/// `q = 2 / (1 + exp(α·d̄))`: 1 at zero distance, strictly decreasing.
pub fn patch_quality(d_bar: &Tensor, alpha: f32) -> Result<Tensor> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Contract(format!("alpha must be > 0, got {alpha}")));
    }
    Ok(d_bar.map(|d| quality_of_distance(d, alpha)))
}

pub fn quality_of_distance(d: f32, alpha: f32) -> f32 {
    2.0 / (1.0 + (alpha * d).exp())
}

/// Column mass `Σ_h Σ_j A_h[j][p]` over patch queries `j` and patch keys `p`,
/// class-token row and column excluded.
fn column_mass(heads: &[Tensor], prefix: usize) -> Result<Vec<f64>> {
    let first = heads
        .first()
        .ok_or_else(|| Error::Contract("no attention matrices in taps".into()))?;
    let (seq, _) = first.dims2()?;
    if seq <= prefix {
        return Err(Error::Contract("attention has no patch positions".into()));
    }
    let mut mass = vec![0.0f64; seq - prefix];
    for head in heads {
        let (rows, cols) = head.dims2()?;
        if rows != seq || cols != seq {
            return Err(Error::Dimension(format!(
                "attention heads disagree in shape: {:?} vs {:?}",
                first.shape(),
                head.shape()
            )));
        }
        for row in head.rows().skip(prefix) {
            for (m, &a) in mass.iter_mut().zip(&row[prefix..]) {
                *m += f64::from(a);
            }
        }
    }
    Ok(mass)
}

/// Rescales to sum 1. A zero total (every patch column empty) gives uniform
/// weights.
fn normalize_mass(mass: &[f64]) -> Vec<f64> {
    let total: f64 = mass.iter().sum();
    if total > 0.0 {
        mass.iter().map(|m| m / total).collect()
    } else {
        vec![1.0 / mass.len() as f64; mass.len()]
    }
}

/// Patch importance weights from how much attention each patch receives.
pub fn attention_weights(taps: &BlockTaps, mode: AttentionMode) -> Result<Tensor> {
    let weights = match mode {
        AttentionMode::Last => normalize_mass(&column_mass(
            &taps.last_block_attention,
            taps.prefix_tokens,
        )?),
        AttentionMode::All => {
            let blocks = taps.all_block_attention.as_ref().ok_or_else(|| {
                Error::Contract(
                    "all-block attention weighting needs taps with every block's attention".into(),
                )
            })?;
            if blocks.is_empty() {
                return Err(Error::Contract("no attention blocks in taps".into()));
            }
            let mut avg = Vec::new();
            for heads in blocks {
                let w = normalize_mass(&column_mass(heads, taps.prefix_tokens)?);
                if avg.is_empty() {
                    avg = vec![0.0; w.len()];
                }
                for (a, x) in avg.iter_mut().zip(w) {
                    *a += x;
                }
            }
            normalize_mass(&avg)
        }
    };
    Tensor::new(
        vec![weights.len()],
        weights.into_iter().map(|w| w as f32).collect(),
    )
}

#[derive(Debug, Clone, Copy)]
pub enum Weights<'a> {
    Uniform,
    Given(&'a Tensor),
}

/// Image score from patch qualities: the plain mean, or `Σ w·q` for a
/// probability vector `w`. The weighted form divides by `Σ w` so that `f32`
/// rounding in the weights cannot push `Q` past its range.
pub fn aggregate(q: &Tensor, weights: Weights<'_>) -> Result<f32> {
    if q.is_empty() {
        return Err(Error::Contract("no patch qualities to aggregate".into()));
    }
    match weights {
        Weights::Uniform => {
            let sum: f64 = q.data().iter().map(|&v| f64::from(v)).sum();
            Ok((sum / q.len() as f64) as f32)
        }
        Weights::Given(w) => {
            if w.len() != q.len() {
                return Err(Error::Dimension(format!(
                    "{} weights for {} patch qualities",
                    w.len(),
                    q.len()
                )));
            }
            let total: f64 = w.data().iter().map(|&v| f64::from(v)).sum();
            if (total - 1.0).abs() > 1e-4 || w.data().iter().any(|&v| v < 0.0) {
                return Err(Error::Contract(format!(
                    "weights must be a probability vector, sum is {total}"
                )));
            }
            let dot: f64 = w
                .data()
                .iter()
                .zip(q.data())
                .map(|(&a, &b)| f64::from(a) * f64::from(b))
                .sum();
            Ok((dot / total) as f32)
        }
    }
}

/// Quality from already-captured taps.
pub fn score_taps(taps: &BlockTaps, cfg: &QualityConfig) -> Result<QualityResult> {
    cfg.check()?;
    let distances = cross_block_distances(taps, cfg)?;
    let d_bar = mean_patch_distance(&distances)?;
    let q = patch_quality(&d_bar, cfg.alpha)?;
    let n = q.len();
    let (weights, image_score) = match cfg.aggregation {
        Aggregation::Uniform => (vec![1.0 / n as f32; n], aggregate(&q, Weights::Uniform)?),
        Aggregation::AttentionLast | Aggregation::AttentionAll => {
            let mode = if cfg.aggregation == Aggregation::AttentionAll {
                AttentionMode::All
            } else {
                AttentionMode::Last
            };
            let w = attention_weights(taps, mode)?;
            if w.len() != n {
                return Err(Error::Dimension(format!(
                    "{} attention weights for {n} patches",
                    w.len()
                )));
            }
            let score = aggregate(&q, Weights::Given(&w))?;
            (w.into_data(), score)
        }
    };
    Ok(QualityResult {
        per_patch_mean_distance: d_bar.into_data(),
        per_patch_quality: q.into_data(),
        patch_weights: weights,
        image_score,
    })
}

/// One forward pass, then [`score_taps`].
pub fn score_image(
    img: &ImageTensor,
    model: &VitModel,
    cfg: &QualityConfig,
) -> Result<QualityResult> {
    cfg.check()?;
    if cfg.block_set.last() >= model.config.num_blocks {
        return Err(Error::Range(format!(
            "block set {} exceeds model depth {}",
            cfg.block_set, model.config.num_blocks
        )));
    }
    let opts = TapOptions {
        all_attention: cfg.aggregation == Aggregation::AttentionAll,
    };
    let taps = forward_with_taps(img, model, opts)?;
    score_taps(&taps, cfg)
}
