//! Seeded synthetic degradations used to build quality-graded image groups.
//!
//! Eleven levels, 0 (pristine) to 10 (worst). Level 0 is the identity for
//! every kind. Severity per level:
//!
//! | kind             | level `k`                                                          |
//! |------------------|--------------------------------------------------------------------|
//! | `gaussian_blur`  | separable Gaussian, σ = 0.4·k, radius ⌈3σ⌉, clamp-to-edge           |
//! | `down_up`        | bilinear downscale by 1 + k/2, quantize to u8, bilinear upscale back |
//! | `occlusion`      | black square of ⌊isqrt(⌊5k·H·W/100⌋)⌋² pixels at a seeded position  |
//! | `gaussian_noise` | additive N(0, (2.5·k)²) per channel, clamped to [0, 255]            |
//!
//! Randomness comes from SplitMix64 (`rand_xoshiro::SplitMix64`) seeded with
//! `DegradationSpec::seed`. Occlusion draws the column then the row offset with
//! `random_range`; noise draws one `rand_distr::Normal` sample per channel in
//! raster order. Results are rounded half away from zero.

mod ppm;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, RngCore, SeedableRng};
use rand_distr::{Distribution, Normal};
use rand_xoshiro::SplitMix64;

use crate::error::{Error, Result};

pub use ppm::{decode_ppm, encode_ppm, read_ppm, write_ppm};

pub const MAX_LEVEL: u8 = 10;

/// 8-bit RGB image, interleaved, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Dimension(format!("empty image {width}x{height}")));
        }
        if data.len() != width * height * 3 {
            return Err(Error::Dimension(format!(
                "{width}x{height} RGB image needs {} bytes, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let data = rgb
            .iter()
            .copied()
            .cycle()
            .take(width * height * 3)
            .collect();
        Self::new(width, height, data).expect("non-empty image")
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DegradationKind {
    GaussianBlur,
    DownUp,
    Occlusion,
    GaussianNoise,
}

impl DegradationKind {
    pub const ALL: [DegradationKind; 4] = [
        DegradationKind::GaussianBlur,
        DegradationKind::DownUp,
        DegradationKind::Occlusion,
        DegradationKind::GaussianNoise,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            DegradationKind::GaussianBlur => "gaussian_blur",
            DegradationKind::DownUp => "down_up",
            DegradationKind::Occlusion => "occlusion",
            DegradationKind::GaussianNoise => "gaussian_noise",
        }
    }
}

impl fmt::Display for DegradationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DegradationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "gaussian_blur" | "blur" => Ok(DegradationKind::GaussianBlur),
            "down_up" | "downup" => Ok(DegradationKind::DownUp),
            "occlusion" => Ok(DegradationKind::Occlusion),
            "gaussian_noise" | "noise" => Ok(DegradationKind::GaussianNoise),
            _ => Err(Error::Parse {
                location: "degradation kind".into(),
                message: format!(
                    "unknown kind {s:?} (gaussian_blur, down_up, occlusion, gaussian_noise)"
                ),
            }),
        }
    }
}

/// Degradation level in `0..=10`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Level(u8);

impl Level {
    pub fn new(level: u8) -> Result<Self> {
        if level > MAX_LEVEL {
            return Err(Error::Range(format!(
                "level {level} outside 0..={MAX_LEVEL}"
            )));
        }
        Ok(Self(level))
    }

    pub fn get(self) -> u8 {
        self.0
    }

    pub fn all() -> impl Iterator<Item = Level> {
        (0..=MAX_LEVEL).map(Level)
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DegradationSpec {
    pub kind: DegradationKind,
    pub level: Level,
    pub seed: u64,
}

pub fn apply(img: &RgbImage, spec: DegradationSpec) -> RgbImage {
    let k = spec.level.get();
    if k == 0 {
        return img.clone();
    }
    match spec.kind {
        DegradationKind::GaussianBlur => gaussian_blur(img, 0.4 * f64::from(k)),
        DegradationKind::DownUp => down_up(img, 1.0 + f64::from(k) / 2.0),
        DegradationKind::Occlusion => occlude(img, u64::from(k) * 5, spec.seed),
        DegradationKind::GaussianNoise => add_noise(img, 2.5 * f64::from(k), spec.seed),
    }
}

fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Normalized 1-D Gaussian taps for offsets `-radius..=radius`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

pub fn gaussian_blur(img: &RgbImage, sigma: f64) -> RgbImage {
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as isize;
    let (w, h) = (img.width, img.height);
    let clamp = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;

    let mut horiz = vec![0.0f64; w * h * 3];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (t, &k) in kernel.iter().enumerate() {
                    let sx = clamp(x as isize + t as isize - radius, w);
                    acc += k * f64::from(img.data[(y * w + sx) * 3 + c]);
                }
                horiz[(y * w + x) * 3 + c] = acc;
            }
        }
    }
    let mut out = vec![0u8; w * h * 3];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (t, &k) in kernel.iter().enumerate() {
                    let sy = clamp(y as isize + t as isize - radius, h);
                    acc += k * horiz[(sy * w + x) * 3 + c];
                }
                out[(y * w + x) * 3 + c] = to_u8(acc);
            }
        }
    }
    RgbImage::new(w, h, out).expect("same dimensions")
}

/// Bilinear resampling with half-pixel-centre alignment and edge clamping.
pub fn resize_bilinear(img: &RgbImage, new_w: usize, new_h: usize) -> RgbImage {
    let (w, h) = (img.width, img.height);
    let sx = w as f64 / new_w as f64;
    let sy = h as f64 / new_h as f64;
    let coord = |dst: usize, scale: f64, len: usize| {
        let src = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(len - 1);
        (lo, hi, src - lo as f64)
    };
    let mut out = Vec::with_capacity(new_w * new_h * 3);
    for y in 0..new_h {
        let (y0, y1, fy) = coord(y, sy, h);
        for x in 0..new_w {
            let (x0, x1, fx) = coord(x, sx, w);
            for c in 0..3 {
                let p = |xx: usize, yy: usize| f64::from(img.data[(yy * w + xx) * 3 + c]);
                let top = p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx;
                let bottom = p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx;
                out.push(to_u8(top * (1.0 - fy) + bottom * fy));
            }
        }
    }
    RgbImage::new(new_w, new_h, out).expect("positive dimensions")
}

pub fn down_up(img: &RgbImage, factor: f64) -> RgbImage {
    let small_w = ((img.width as f64 / factor).round() as usize).max(1);
    let small_h = ((img.height as f64 / factor).round() as usize).max(1);
    let small = resize_bilinear(img, small_w, small_h);
    resize_bilinear(&small, img.width, img.height)
}

/// Side of the occluding square for `percent` of the image area.
pub fn occluder_side(width: usize, height: usize, percent: u64) -> usize {
    let area = (percent * (width * height) as u64 / 100) as usize;
    area.isqrt().min(width).min(height)
}

fn occlude(img: &RgbImage, percent: u64, seed: u64) -> RgbImage {
    let side = occluder_side(img.width, img.height, percent);
    let mut out = img.clone();
    if side == 0 {
        return out;
    }
    let mut rng = SplitMix64::seed_from_u64(seed);
    let x0 = rng.random_range(0..=img.width - side);
    let y0 = rng.random_range(0..=img.height - side);
    for y in y0..y0 + side {
        let row = (y * img.width + x0) * 3;
        out.data[row..row + side * 3].fill(0);
    }
    out
}

fn add_noise(img: &RgbImage, sigma: f64, seed: u64) -> RgbImage {
    let mut rng = SplitMix64::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).expect("positive sigma");
    let data = img
        .data
        .iter()
        .map(|&v| to_u8(f64::from(v) + normal.sample(&mut rng)))
        .collect();
    RgbImage::new(img.width, img.height, data).expect("same dimensions")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupedImage {
    /// Index of the source image.
    pub source: usize,
    pub kind: DegradationKind,
    pub level: Level,
    pub image: RgbImage,
}

/// One degraded variant per (source image, kind, level), in that nesting
/// order. Each variant's seed is the next draw of a SplitMix64 stream seeded
/// with `seed`, so the whole set is fixed by `seed`.
pub fn make_quality_groups(
    images: &[RgbImage],
    kinds: &[DegradationKind],
    levels: &[Level],
    seed: u64,
) -> Result<Vec<GroupedImage>> {
    if images.is_empty() || kinds.is_empty() || levels.is_empty() {
        return Err(Error::Contract(
            "quality groups need at least one image, kind, and level".into(),
        ));
    }
    let mut seeds = SplitMix64::seed_from_u64(seed);
    let mut out = Vec::with_capacity(images.len() * kinds.len() * levels.len());
    for (source, img) in images.iter().enumerate() {
        for &kind in kinds {
            for &level in levels {
                let spec = DegradationSpec {
                    kind,
                    level,
                    seed: seeds.next_u64(),
                };
                out.push(GroupedImage {
                    source,
                    kind,
                    level,
                    image: apply(img, spec),
                });
            }
        }
    }
    Ok(out)
}

/// Writes `<level>\t<path>` lines.
pub fn write_group_manifest(entries: &[(Level, PathBuf)], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    for (level, p) in entries {
        text.push_str(&format!("{level}\t{}\n", p.display()));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_group_manifest(path: impl AsRef<Path>) -> Result<Vec<(Level, PathBuf)>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            location: format!("{}:{}", path.display(), lineno + 1),
            message,
        };
        let (level, p) = line
            .split_once('\t')
            .ok_or_else(|| parse_err("expected `<level>\\t<path>`".into()))?;
        let level: u8 = level
            .parse()
            .map_err(|_| parse_err(format!("bad level {level:?}")))?;
        out.push((Level::new(level)?, PathBuf::from(p)));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn textured(w: usize, h: usize) -> RgbImage {
        let data = (0..w * h * 3)
            .map(|i| ((i * 37 + i / 7 * 11) % 256) as u8)
            .collect();
        RgbImage::new(w, h, data).unwrap()
    }

    fn spec(kind: DegradationKind, level: u8) -> DegradationSpec {
        DegradationSpec {
            kind,
            level: Level::new(level).unwrap(),
            seed: 7,
        }
    }

    #[test]
    fn level_bounds() {
        assert!(Level::new(10).is_ok());
        assert!(matches!(Level::new(11), Err(Error::Range(_))));
        assert_eq!(Level::all().count(), 11);
    }

    #[test]
    fn level_zero_is_identity() {
        let img = textured(13, 9);
        for kind in DegradationKind::ALL {
            assert_eq!(apply(&img, spec(kind, 0)), img);
        }
    }

    #[test]
    fn kernel_is_normalized() {
        for level in 1..=10 {
            let k = gaussian_kernel(0.4 * f64::from(level));
            assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert_eq!(k.len(), 2 * (1.2 * f64::from(level)).ceil() as usize + 1);
        }
    }

    #[test]
    fn blur_keeps_constant_image() {
        let img = RgbImage::filled(10, 7, [200, 13, 77]);
        for level in 1..=10 {
            assert_eq!(apply(&img, spec(DegradationKind::GaussianBlur, level)), img);
        }
    }

    #[test]
    fn down_up_keeps_size_and_constants() {
        let img = RgbImage::filled(16, 12, [9, 99, 199]);
        let out = apply(&img, spec(DegradationKind::DownUp, 10));
        assert_eq!(out, img);
        let t = textured(16, 12);
        let out = apply(&t, spec(DegradationKind::DownUp, 4));
        assert_eq!((out.width, out.height), (16, 12));
        assert_ne!(out, t);
    }

    #[test]
    fn bilinear_same_size_is_identity() {
        let t = textured(7, 5);
        assert_eq!(resize_bilinear(&t, 7, 5), t);
    }

    #[test]
    fn occlusion_covers_exact_area() {
        // 32x16: half the area is 256 = 16², a square that fits.
        let white = RgbImage::filled(32, 16, [255, 255, 255]);
        let out = apply(&white, spec(DegradationKind::Occlusion, 10));
        let black = (0..16)
            .flat_map(|y| (0..32).map(move |x| (x, y)))
            .filter(|&(x, y)| out.pixel(x, y) == [0, 0, 0])
            .count();
        assert_eq!(black, 32 * 16 / 2);
        assert_eq!(occluder_side(20, 20, 25), 10);
        assert_eq!(occluder_side(4, 4, 5), 0);
    }

    #[test]
    fn noise_is_seeded() {
        let img = textured(8, 8);
        let a = apply(&img, spec(DegradationKind::GaussianNoise, 5));
        let b = apply(&img, spec(DegradationKind::GaussianNoise, 5));
        let c = apply(
            &img,
            DegradationSpec {
                seed: 8,
                ..spec(DegradationKind::GaussianNoise, 5)
            },
        );
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, img);
    }

    #[test]
    fn group_cardinality_and_determinism() {
        let img = textured(8, 8);
        let levels: Vec<Level> = Level::all().collect();
        let one = make_quality_groups(
            std::slice::from_ref(&img),
            &[DegradationKind::Occlusion],
            &levels,
            1,
        )
        .unwrap();
        assert_eq!(one.len(), 11);
        assert_eq!(
            one.iter().map(|g| g.level.get()).collect::<Vec<_>>(),
            (0..=10).collect::<Vec<_>>()
        );

        let imgs = vec![
            img.clone(),
            textured(8, 8),
            RgbImage::filled(8, 8, [1, 2, 3]),
        ];
        let kinds = [DegradationKind::GaussianNoise, DegradationKind::Occlusion];
        let a = make_quality_groups(&imgs, &kinds, &levels, 99).unwrap();
        let b = make_quality_groups(&imgs, &kinds, &levels, 99).unwrap();
        assert_eq!(a.len(), 66);
        assert_eq!(a, b);
        assert!(make_quality_groups(&[], &kinds, &levels, 1).is_err());
    }

    #[test]
    fn manifest_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("groups.tsv");
        let entries = vec![
            (Level::new(0).unwrap(), PathBuf::from("a/b.ppm")),
            (Level::new(10).unwrap(), PathBuf::from("c.ppm")),
        ];
        write_group_manifest(&entries, &path).unwrap();
        assert_eq!(
            std::fs::read_to_string(&path).unwrap(),
            "0\ta/b.ppm\n10\tc.ppm\n"
        );
        assert_eq!(read_group_manifest(&path).unwrap(), entries);
    }
}
