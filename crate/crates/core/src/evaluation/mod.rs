//! Verification-error metrics for judging a quality scorer.
//!
//! The main instrument is the error-versus-discard curve: the decision
//! threshold is fixed once from all impostor comparisons at a target false
//! match rate, then the lowest-quality comparisons are discarded in growing
//! fractions and the false non-match rate of what remains is recorded.
//! Curve areas, rank correlation and boxplot statistics are computed in
//! `f64`.

mod io;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

pub use io::{attach_qualities, format_curve, parse_pairs, parse_qualities, RawPair};

/// Default discard fractions: 101 points, `0.00, 0.01, …, 1.00`.
pub const DEFAULT_GRID_POINTS: usize = 101;
pub const PAUC_RANGE: f64 = 0.25;

#[derive(Debug, Clone, PartialEq)]
pub struct VerificationPair {
    pub id_a: String,
    pub id_b: String,
    /// Cosine similarity in `[-1, 1]`.
    pub similarity: f32,
    pub is_genuine: bool,
    pub quality_a: f32,
    pub quality_b: f32,
}

/// How two sample qualities combine into one comparison quality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PairQuality {
    #[default]
    Min,
    Mean,
}

impl PairQuality {
    pub fn combine(self, a: f32, b: f32) -> f64 {
        match self {
            PairQuality::Min => f64::from(a.min(b)),
            PairQuality::Mean => (f64::from(a) + f64::from(b)) / 2.0,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            PairQuality::Min => "min",
            PairQuality::Mean => "mean",
        }
    }
}

impl fmt::Display for PairQuality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PairQuality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "min" => Ok(PairQuality::Min),
            "mean" => Ok(PairQuality::Mean),
            other => Err(Error::Parse {
                location: "pair quality".into(),
                message: format!("unknown rule {other:?} (min, mean)"),
            }),
        }
    }
}

pub fn cosine_similarity(a: &[f32], b: &[f32]) -> Result<f32> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "cosine of vectors with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (f64::from(x), f64::from(y));
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Contract("cosine similarity of a zero vector".into()));
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0) as f32)
}

/// `⌊fraction · total⌋`, corrected for products that land a hair below an
/// integer (`0.29 · 100 = 28.999…`).
fn floor_fraction(fraction: f64, total: usize) -> usize {
    let k = (fraction * total as f64).floor() as usize;
    if k < total && (k + 1) as f64 / total as f64 <= fraction {
        k + 1
    } else {
        k
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Threshold {
    /// Comparisons with similarity `>= value` are accepted as matches.
    pub value: f32,
    /// The target was below `1/M`, so the threshold sits just above the
    /// highest impostor score and the achieved rate is 0.
    pub below_resolution: bool,
}

/// Fraction of impostor scores accepted at `threshold`.
pub fn achieved_fmr(impostors: &[f32], threshold: f32) -> f64 {
    impostors.iter().filter(|&&s| s >= threshold).count() as f64 / impostors.len() as f64
}

/// Threshold whose false match rate on `impostors` does not exceed
/// `fmr_target`.
///
/// Scores are sorted descending and the boundary score is the one at index
/// `k = ⌊target · M⌋`; at most `k` impostors may be accepted, so the
/// threshold lies strictly above it: halfway to the next distinct higher
/// score, or one ulp above the boundary when nothing is higher.
pub fn threshold_at_fmr(impostors: &[f32], fmr_target: f64) -> Result<Threshold> {
    if impostors.is_empty() {
        return Err(Error::Contract("no impostor scores".into()));
    }
    if !(fmr_target > 0.0 && fmr_target < 1.0) {
        return Err(Error::Contract(format!(
            "fmr target must lie in (0, 1), got {fmr_target}"
        )));
    }
    if impostors.iter().any(|s| !s.is_finite()) {
        return Err(Error::Contract("non-finite impostor score".into()));
    }
    let mut sorted = impostors.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let k = floor_fraction(fmr_target, sorted.len());
    let boundary = sorted[k];
    let above = sorted[..k].iter().rev().find(|&&s| s > boundary).copied();
    let value = match above {
        Some(above) => {
            let mid = ((f64::from(boundary) + f64::from(above)) / 2.0) as f32;
            if mid > boundary {
                mid
            } else {
                boundary.next_up()
            }
        }
        None => boundary.next_up(),
    };
    Ok(Threshold {
        value,
        below_resolution: k == 0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdcSample {
    pub reject_fraction: f64,
    pub fnmr: f64,
    /// No genuine comparison survived the discard; `fnmr` repeats the
    /// previous sample.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdcCurve {
    pub fmr_target: f64,
    pub threshold: Threshold,
    pub samples: Vec<EdcSample>,
    pub auc: f64,
    pub pauc25: f64,
}

/// `n` evenly spaced fractions from 0 to 1 inclusive.
pub fn reject_grid(n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..n).map(|i| i as f64 / (n - 1) as f64).collect(),
    }
}

/// Error-versus-discard curve at a fixed false-match-rate threshold.
///
/// Genuine and impostor comparisons are ranked together by pair quality
/// (ascending, ties by input position); at discard fraction `r` the first
/// `⌊r · total⌋` are dropped and the FNMR of the remaining genuine pairs is
/// recorded. The threshold never moves.
pub fn edc_curve(
    pairs: &[VerificationPair],
    fmr_target: f64,
    grid: &[f64],
    rule: PairQuality,
) -> Result<EdcCurve> {
    let impostors: Vec<f32> = pairs
        .iter()
        .filter(|p| !p.is_genuine)
        .map(|p| p.similarity)
        .collect();
    let genuine_total = pairs.iter().filter(|p| p.is_genuine).count();
    if genuine_total == 0 {
        return Err(Error::Contract("no genuine comparisons".into()));
    }
    if impostors.is_empty() {
        return Err(Error::Contract("no impostor comparisons".into()));
    }
    let mut grid = grid.to_vec();
    if grid.iter().any(|r| !(0.0..=1.0).contains(r)) {
        return Err(Error::Contract(
            "discard fractions must lie in [0, 1]".into(),
        ));
    }
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    if grid.len() < 2 {
        return Err(Error::Contract(
            "an EDC curve needs at least two discard fractions".into(),
        ));
    }

    let threshold = threshold_at_fmr(&impostors, fmr_target)?;

    let mut order: Vec<(f64, usize)> = pairs
        .iter()
        .enumerate()
        .map(|(i, p)| (rule.combine(p.quality_a, p.quality_b), i))
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    // Genuine and false-non-match counts among the first `i` ranked pairs.
    let mut genuine_prefix = vec![0usize; pairs.len() + 1];
    let mut error_prefix = vec![0usize; pairs.len() + 1];
    for (i, &(_, idx)) in order.iter().enumerate() {
        let p = &pairs[idx];
        let g = usize::from(p.is_genuine);
        let e = usize::from(p.is_genuine && p.similarity < threshold.value);
        genuine_prefix[i + 1] = genuine_prefix[i] + g;
        error_prefix[i + 1] = error_prefix[i] + e;
    }
    let errors_total = error_prefix[pairs.len()];

    let mut samples: Vec<EdcSample> = Vec::with_capacity(grid.len());
    for &r in &grid {
        let dropped = floor_fraction(r, pairs.len());
        let genuine_left = genuine_total - genuine_prefix[dropped];
        let sample = if genuine_left == 0 {
            EdcSample {
                reject_fraction: r,
                fnmr: samples.last().map_or(0.0, |s| s.fnmr),
                degenerate: true,
            }
        } else {
            let errors_left = errors_total - error_prefix[dropped];
            EdcSample {
                reject_fraction: r,
                fnmr: errors_left as f64 / genuine_left as f64,
                degenerate: false,
            }
        };
        samples.push(sample);
    }

    let mut curve = EdcCurve {
        fmr_target,
        threshold,
        samples,
        auc: 0.0,
        pauc25: 0.0,
    };
    curve.auc = auc(&curve);
    curve.pauc25 = pauc(&curve, PAUC_RANGE);
    Ok(curve)
}

/// Trapezoidal area under piecewise-linear `(x, y)` points, from the first
/// point up to `upper` (interpolating at `upper`).
pub fn trapezoid(points: &[(f64, f64)], upper: f64) -> f64 {
    let mut area = 0.0;
    for w in points.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if x0 >= upper {
            break;
        }
        if x1 <= upper {
            area += (x1 - x0) * (y0 + y1) / 2.0;
        } else {
            let y_at = y0 + (y1 - y0) * (upper - x0) / (x1 - x0);
            area += (upper - x0) * (y0 + y_at) / 2.0;
            break;
        }
    }
    area
}

fn curve_points(curve: &EdcCurve) -> Vec<(f64, f64)> {
    curve
        .samples
        .iter()
        .map(|s| (s.reject_fraction, s.fnmr))
        .collect()
}

/// Area under the whole curve, `[0, max r]`.
pub fn auc(curve: &EdcCurve) -> f64 {
    trapezoid(&curve_points(curve), f64::INFINITY)
}

/// Area over `[0, delta]` divided by `delta`, so a flat curve at FNMR `c`
/// scores `c`.
pub fn pauc(curve: &EdcCurve, delta: f64) -> f64 {
    trapezoid(&curve_points(curve), delta) / delta
}

/// Ranks starting at 1, tied values sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j + 1) as f64 / 2.0;
        for &idx in &order[i..j] {
            ranks[idx] = rank;
        }
        i = j;
    }
    ranks
}

/// Spearman rank correlation (Pearson correlation of average ranks).
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 3 {
        return Err(Error::Contract(format!(
            "spearman needs two equal-length samples of at least 3, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Undefined(
            "spearman correlation of a constant sample".into(),
        ));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Hyndman–Fan type 7 quantile (linear interpolation between order
/// statistics at `h = (n − 1)·p`). `sorted` must be ascending and non-empty.
pub fn quantile_type7(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupStats {
    pub level: u8,
    pub count: usize,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub whisker_lo: f64,
    pub whisker_hi: f64,
    pub mean: f64,
}

/// Boxplot summary per level: type-7 quartiles, whiskers at 1.5·IQR
/// clipped to the data range.
pub fn group_distance_stats(values: &[(u8, f64)]) -> Vec<GroupStats> {
    let mut groups: BTreeMap<u8, Vec<f64>> = BTreeMap::new();
    for &(level, v) in values {
        groups.entry(level).or_default().push(v);
    }
    groups
        .into_iter()
        .map(|(level, mut v)| {
            v.sort_by(f64::total_cmp);
            let q1 = quantile_type7(&v, 0.25);
            let median = quantile_type7(&v, 0.5);
            let q3 = quantile_type7(&v, 0.75);
            let iqr = q3 - q1;
            GroupStats {
                level,
                count: v.len(),
                q1,
                median,
                q3,
                whisker_lo: (q1 - 1.5 * iqr).max(v[0]),
                whisker_hi: (q3 + 1.5 * iqr).min(v[v.len() - 1]),
                mean: v.iter().sum::<f64>() / v.len() as f64,
            }
        })
        .collect()
}
