//! Procedural real/fake image corpora.
//!
//! Every "real" image is a multi-scale value-noise texture under smooth
//! illumination with additive per-pixel sensor noise. Each "fake" is derived
//! from its paired real image by one manipulation, leaving pixels outside the
//! manipulated region untouched:
//!
//! * `PatchSplice`: a blurred patch of a foreign texture pasted with a soft border.
//! * `CenterInpaint`: the central square is refilled from a smooth
//!   interpolation of its surroundings with weak re-synthesised grain.
//! * `PeriodicArtifact`: a faint period-2/period-4 lattice over the whole image.
//! * `WarpBlend`: an elliptical region is warped, re-rendered at half
//!   resolution and blended back.

use std::path::Path;
use std::str::FromStr;

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::manifest::{DatasetManifest, ManifestEntry, Split};
use crate::error::{config, io_error, Error, Result};
use crate::model::ClassLabel;
use crate::parallel::par_map;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Manipulation {
    PatchSplice,
    CenterInpaint,
    PeriodicArtifact,
    WarpBlend,
}

impl Manipulation {
    pub const ALL: [Manipulation; 4] = [
        Manipulation::PatchSplice,
        Manipulation::CenterInpaint,
        Manipulation::PeriodicArtifact,
        Manipulation::WarpBlend,
    ];

    /// Domain tag written into manifests.
    pub fn tag(self) -> &'static str {
        match self {
            Manipulation::PatchSplice => "patch-splice",
            Manipulation::CenterInpaint => "center-inpaint",
            Manipulation::PeriodicArtifact => "periodic-artifact",
            Manipulation::WarpBlend => "warp-blend",
        }
    }
}

impl std::fmt::Display for Manipulation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Manipulation {
    type Err = Error;

    /// Accepts the tag with or without separators, in any case
    /// (`patch-splice`, `patchsplice`, `PatchSplice`).
    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .map(|c| c.to_ascii_lowercase())
            .collect();
        Manipulation::ALL
            .into_iter()
            .find(|m| m.tag().replace('-', "") == key)
            .ok_or_else(|| config(format!("unknown manipulation {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n_per_class: usize,
    pub size: usize,
    pub seed: u64,
    pub manipulation: Manipulation,
    /// Manipulation intensity in `(0, 1]`.
    pub strength: f32,
}

/// 1429 pairs split into 1000 train, 286 val and 143 test per class.
impl Default for SynthSpec {
    fn default() -> Self {
        Self::new(Manipulation::PatchSplice, 1429, 0)
    }
}

impl SynthSpec {
    pub fn new(manipulation: Manipulation, n_per_class: usize, seed: u64) -> Self {
        Self {
            n_per_class,
            size: 64,
            seed,
            manipulation,
            strength: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || self.size % 16 != 0 {
            return Err(config(format!(
                "image size {} is not a positive multiple of 16",
                self.size
            )));
        }
        if !(self.strength > 0.0 && self.strength <= 1.0) {
            return Err(config(format!(
                "strength must lie in (0, 1], got {}",
                self.strength
            )));
        }
        if self.n_per_class == 0 {
            return Err(config("n_per_class must be positive"));
        }
        Ok(())
    }
}

/// Per-class split sizes: `round(0.7 n)` train, `round(0.2 n)` val, rest test.
pub fn split_counts(n: usize) -> (usize, usize, usize) {
    let train = ((n as f64) * 0.7).round() as usize;
    let val = (((n as f64) * 0.2).round() as usize).min(n - train);
    (train, val, n - train - val)
}

/// Planar float RGB image, values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FloatImage {
    pub size: usize,
    /// `[3][size * size]`, row-major planes.
    pub planes: [Vec<f32>; 3],
}

impl FloatImage {
    fn new(size: usize) -> Self {
        Self {
            size,
            planes: [
                vec![0.0; size * size],
                vec![0.0; size * size],
                vec![0.0; size * size],
            ],
        }
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let s = self.size;
        RgbImage::from_fn(s as u32, s as u32, |x, y| {
            let i = y as usize * s + x as usize;
            image::Rgb(std::array::from_fn(|c| quantize(self.planes[c][i])))
        })
    }
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// One real image, its manipulated twin and the manipulated region.
#[derive(Clone, Debug)]
pub struct SynthPair {
    pub real: RgbImage,
    pub fake: RgbImage,
    /// `size * size` flags, true where the fake may differ from the real.
    pub region: Vec<bool>,
}

// Real-image texture parameters.
const OCTAVES: [(usize, f32); 4] = [(32, 0.30), (16, 0.16), (8, 0.09), (4, 0.05)];
const SENSOR_NOISE: (f32, f32) = (2.5 / 255.0, 4.5 / 255.0);

// Manipulation parameters.
const SPLICE_BLUR_SIGMA: f32 = 1.2;
const FEATHER: usize = 3;
const INPAINT_GRAIN: (f32, f32) = (0.2, 0.65);
const PERIODIC_AMPLITUDE: f32 = 3.0 / 255.0;
const WARP_AMPLITUDE: f32 = 1.5;

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn normal(rng: &mut ChaCha8Rng) -> f32 {
    rng.sample::<f32, _>(StandardNormal)
}

/// Smooth random field from bilinearly-smoothstepped lattice values in `[-1, 1]`.
fn value_noise(size: usize, cell: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let g = size / cell + 2;
    let lattice: Vec<f32> = (0..g * g).map(|_| rng.random_range(-1.0..1.0)).collect();
    let (ox, oy) = (rng.random_range(0.0..1.0f32), rng.random_range(0.0..1.0f32));
    let smooth = |t: f32| t * t * (3.0 - 2.0 * t);
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        let fy = y as f32 / cell as f32 + oy;
        let (iy, ty) = (fy.floor() as usize, smooth(fy.fract()));
        for x in 0..size {
            let fx = x as f32 / cell as f32 + ox;
            let (ix, tx) = (fx.floor() as usize, smooth(fx.fract()));
            let at = |a: usize, b: usize| lattice[(iy + b) * g + ix + a];
            let top = at(0, 0) * (1.0 - tx) + at(1, 0) * tx;
            let bottom = at(0, 1) * (1.0 - tx) + at(1, 1) * tx;
            out[y * size + x] = top * (1.0 - ty) + bottom * ty;
        }
    }
    out
}

/// A real-looking texture: multi-scale luminance, colour tint, smooth
/// illumination and per-pixel sensor noise.
pub fn real_texture(size: usize, rng: &mut ChaCha8Rng) -> FloatImage {
    let mut lum = vec![0.0f32; size * size];
    for &(cell, amp) in &OCTAVES {
        let cell = cell.min(size).max(1);
        let contrast = amp * rng.random_range(0.6..1.4);
        for (l, v) in lum.iter_mut().zip(value_noise(size, cell, rng)) {
            *l += contrast * v;
        }
    }
    let base: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.35..0.65));
    let tints: Vec<Vec<f32>> = (0..3)
        .map(|_| value_noise(size, size.max(2) / 2, rng))
        .collect();
    let tint_amp = rng.random_range(0.02..0.08);
    let (gx, gy) = (rng.random_range(-0.25..0.25f32), rng.random_range(-0.25..0.25f32));
    let (cx, cy) = (rng.random_range(0.2..0.8f32), rng.random_range(0.2..0.8f32));
    let vignette = rng.random_range(0.0..0.35f32);
    let sigma = rng.random_range(SENSOR_NOISE.0..SENSOR_NOISE.1);

    let mut img = FloatImage::new(size);
    let inv = 1.0 / size as f32;
    for y in 0..size {
        for x in 0..size {
            let (u, v) = (x as f32 * inv, y as f32 * inv);
            let r2 = (u - cx).powi(2) + (v - cy).powi(2);
            let light = (1.0 + gx * (u - 0.5) + gy * (v - 0.5)) * (1.0 - vignette * r2);
            let i = y * size + x;
            for c in 0..3 {
                let clean = (base[c] + lum[i] + tint_amp * tints[c][i]) * light;
                img.planes[c][i] = clean + sigma * normal(rng);
            }
        }
    }
    clamp_image(&mut img);
    img
}

fn clamp_image(img: &mut FloatImage) {
    for p in &mut img.planes {
        for v in p.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }
}

fn gaussian_blur(plane: &[f32], size: usize, sigma: f32) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f32> = (-radius..=radius)
        .map(|k| (-(k * k) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f32 = kernel.iter().sum();
    let clampi = |v: isize| v.clamp(0, size as isize - 1) as usize;
    let mut tmp = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            tmp[y * size + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * plane[y * size + clampi(x as isize + k as isize - radius)])
                .sum::<f32>()
                / norm;
        }
    }
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            out[y * size + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * tmp[clampi(y as isize + k as isize - radius) * size + x])
                .sum::<f32>()
                / norm;
        }
    }
    out
}

/// Feathered rectangle mask: 1 inside `[x0, x1) x [y0, y1)`, ramping to 0
/// over `feather` pixels outside it.
fn rect_mask(size: usize, (x0, y0, x1, y1): (usize, usize, usize, usize), feather: usize) -> Vec<f32> {
    let mut m = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let dx = (x0 as isize - x as isize).max(x as isize - (x1 as isize - 1)).max(0);
            let dy = (y0 as isize - y as isize).max(y as isize - (y1 as isize - 1)).max(0);
            let d = dx.max(dy) as f32;
            m[y * size + x] = (1.0 - d / (feather as f32 + 1.0)).max(0.0);
        }
    }
    m
}

fn ellipse_mask(size: usize, centre: (f32, f32), radii: (f32, f32), feather: f32) -> Vec<f32> {
    let mut m = vec![0.0; size * size];
    let r_mean = 0.5 * (radii.0 + radii.1);
    for y in 0..size {
        for x in 0..size {
            let dx = (x as f32 - centre.0) / radii.0;
            let dy = (y as f32 - centre.1) / radii.1;
            let d = (dx * dx + dy * dy).sqrt();
            let outside = (d - 1.0) * r_mean;
            m[y * size + x] = (1.0 - outside / feather).clamp(0.0, 1.0);
        }
    }
    m
}

fn blend(real: &FloatImage, other: &FloatImage, mask: &[f32], alpha: f32) -> FloatImage {
    let mut out = real.clone();
    for c in 0..3 {
        for (i, v) in out.planes[c].iter_mut().enumerate() {
            let a = alpha * mask[i];
            if a > 0.0 {
                *v = (1.0 - a) * real.planes[c][i] + a * other.planes[c][i];
            }
        }
    }
    clamp_image(&mut out);
    out
}

fn patch_splice(real: &FloatImage, strength: f32, rng: &mut ChaCha8Rng) -> (FloatImage, Vec<f32>) {
    let s = real.size;
    let foreign = real_texture(s, rng);
    let side = rng.random_range(s * 3 / 8..=s / 2);
    let x0 = rng.random_range(FEATHER..=s - side - FEATHER);
    let y0 = rng.random_range(FEATHER..=s - side - FEATHER);
    let mask = rect_mask(s, (x0, y0, x0 + side, y0 + side), FEATHER);
    let mut patch = FloatImage::new(s);
    for c in 0..3 {
        patch.planes[c] = gaussian_blur(&foreign.planes[c], s, SPLICE_BLUR_SIGMA);
    }
    (blend(real, &patch, &mask, strength), mask)
}

/// Harmonic interpolation of the square `[x0, x1) x [y0, y1)` from its
/// border, by successive over-relaxation.
fn harmonic_fill(plane: &[f32], size: usize, (x0, y0, x1, y1): (usize, usize, usize, usize)) -> Vec<f32> {
    let mut out = plane.to_vec();
    let mut ring = 0.0;
    let mut count = 0.0;
    for y in y0 - 1..=y1 {
        for x in x0 - 1..=x1 {
            if x == x0 - 1 || x == x1 || y == y0 - 1 || y == y1 {
                ring += plane[y * size + x];
                count += 1.0;
            }
        }
    }
    let ring_mean = ring / count;
    for y in y0..y1 {
        for x in x0..x1 {
            out[y * size + x] = ring_mean;
        }
    }
    let omega = 1.85;
    for _ in 0..120 {
        for y in y0..y1 {
            for x in x0..x1 {
                let i = y * size + x;
                let avg = 0.25 * (out[i - 1] + out[i + 1] + out[i - size] + out[i + size]);
                out[i] += omega * (avg - out[i]);
            }
        }
    }
    out
}

fn center_inpaint(real: &FloatImage, strength: f32, rng: &mut ChaCha8Rng) -> (FloatImage, Vec<f32>) {
    let s = real.size;
    let (x0, x1) = (s / 4, s / 4 + s / 2);
    let rect = (x0, x0, x1, x1);
    // Grain level relative to the real image's own noise, estimated from
    // the high-pass energy of the surround.
    let grain = rng.random_range(INPAINT_GRAIN.0..=INPAINT_GRAIN.1) * estimate_noise(real);
    // Grain shared by all channels, unlike the independent sensor noise.
    let shared: Vec<f32> = (0..s * s).map(|_| grain * normal(rng)).collect();
    let mut fill = FloatImage::new(s);
    for c in 0..3 {
        let smooth = gaussian_blur(&real.planes[c], s, 2.0);
        let mut plane = harmonic_fill(&smooth, s, rect);
        for (v, n) in plane.iter_mut().zip(&shared) {
            *v += n;
        }
        fill.planes[c] = plane;
    }
    let mask = rect_mask(s, rect, FEATHER.min(s / 4 - 1));
    (blend(real, &fill, &mask, strength), mask)
}

/// Robust per-pixel noise estimate from horizontal first differences.
fn estimate_noise(img: &FloatImage) -> f32 {
    let s = img.size;
    let mut diffs: Vec<f32> = img.planes[1]
        .chunks_exact(s)
        .flat_map(|row| row.windows(2).map(|w| (w[1] - w[0]).abs()))
        .collect();
    let mid = diffs.len() / 2;
    let (_, median, _) = diffs.select_nth_unstable_by(mid, f32::total_cmp);
    // median |N(0, 2 s^2)| = 0.6745 * sqrt(2) * s
    *median / (0.6745 * std::f32::consts::SQRT_2)
}

fn periodic_artifact(real: &FloatImage, strength: f32, rng: &mut ChaCha8Rng) -> (FloatImage, Vec<f32>) {
    let s = real.size;
    let amp = strength * PERIODIC_AMPLITUDE * rng.random_range(0.8..1.2);
    let weights: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.3..1.0));
    let phase4 = rng.random_range(0..4usize);
    let colour: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.7..1.3));
    let mut out = real.clone();
    for y in 0..s {
        for x in 0..s {
            let checker = if (x + y) % 2 == 0 { 1.0 } else { -1.0 };
            let cols = if x % 2 == 0 { 1.0 } else { -1.0 };
            let wide = if (x + phase4) % 4 < 2 { 0.5 } else { -0.5 };
            let p = weights[0] * checker + weights[1] * cols + weights[2] * wide;
            for c in 0..3 {
                out.planes[c][y * s + x] += amp * colour[c] * p;
            }
        }
    }
    clamp_image(&mut out);
    (out, vec![1.0; s * s])
}

fn bilinear(plane: &[f32], size: usize, x: f32, y: f32) -> f32 {
    let max = (size - 1) as f32;
    let (x, y) = (x.clamp(0.0, max), y.clamp(0.0, max));
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(size - 1), (y0 + 1).min(size - 1));
    let (tx, ty) = (x - x0 as f32, y - y0 as f32);
    let top = plane[y0 * size + x0] * (1.0 - tx) + plane[y0 * size + x1] * tx;
    let bottom = plane[y1 * size + x0] * (1.0 - tx) + plane[y1 * size + x1] * tx;
    top * (1.0 - ty) + bottom * ty
}

fn warp_blend(real: &FloatImage, strength: f32, rng: &mut ChaCha8Rng) -> (FloatImage, Vec<f32>) {
    let s = real.size;
    let sf = s as f32;
    let radii = (
        rng.random_range(sf / 5.0..sf / 3.5),
        rng.random_range(sf / 5.0..sf / 3.5),
    );
    let feather = (sf / 16.0).min(4.0);
    let margin = |r: f32| r + feather + 1.0;
    let centre = (
        rng.random_range(margin(radii.0)..sf - margin(radii.0)),
        rng.random_range(margin(radii.1)..sf - margin(radii.1)),
    );
    let amp = WARP_AMPLITUDE * rng.random_range(0.7..1.3);
    let freq = rng.random_range(0.08..0.2f32);
    let phase = rng.random_range(0.0..std::f32::consts::TAU);

    // Warp at full resolution, render at half resolution, upsample back.
    let half = s / 2;
    let mut rendered = FloatImage::new(s);
    for c in 0..3 {
        let plane = &real.planes[c];
        let mut low = vec![0.0; half * half];
        for y in 0..half {
            for x in 0..half {
                let (fx, fy) = (2.0 * x as f32 + 0.5, 2.0 * y as f32 + 0.5);
                let dx = amp * (freq * fy + phase).sin();
                let dy = amp * (freq * fx + 0.7 * phase).cos();
                low[y * half + x] = bilinear(plane, s, fx + dx, fy + dy);
            }
        }
        for y in 0..s {
            for x in 0..s {
                let (lx, ly) = ((x as f32 - 0.5) / 2.0, (y as f32 - 0.5) / 2.0);
                rendered.planes[c][y * s + x] = bilinear(&low, half, lx, ly);
            }
        }
    }
    let mask = ellipse_mask(s, centre, radii, feather);
    (blend(real, &rendered, &mask, strength), mask)
}

/// Deterministically synthesises pair `index` of a corpus.
pub fn synthesize_pair(spec: &SynthSpec, index: usize) -> Result<SynthPair> {
    spec.validate()?;
    let mut rng = rng_for(spec.seed, index as u64);
    let real = real_texture(spec.size, &mut rng);
    let (fake, mask) = match spec.manipulation {
        Manipulation::PatchSplice => patch_splice(&real, spec.strength, &mut rng),
        Manipulation::CenterInpaint => center_inpaint(&real, spec.strength, &mut rng),
        Manipulation::PeriodicArtifact => periodic_artifact(&real, spec.strength, &mut rng),
        Manipulation::WarpBlend => warp_blend(&real, spec.strength, &mut rng),
    };
    Ok(SynthPair {
        real: real.to_rgb8(),
        fake: fake.to_rgb8(),
        region: mask.iter().map(|&m| m > 0.0).collect(),
    })
}

/// Seeded assignment of pair indices to splits; both images of a pair share
/// a split.
pub fn assign_splits(n: usize, seed: u64) -> Vec<Split> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rng_for(seed, u64::MAX);
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let (train, val, _) = split_counts(n);
    let mut splits = vec![Split::Test; n];
    for (rank, &pair) in order.iter().enumerate() {
        splits[pair] = if rank < train {
            Split::Train
        } else if rank < train + val {
            Split::Val
        } else {
            Split::Test
        };
    }
    splits
}

/// Writes `n_per_class` real and fake PNGs plus `manifest.json` into `out_dir`.
pub fn generate(spec: &SynthSpec, out_dir: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    for sub in ["real", "fake"] {
        let dir = out_dir.join(sub);
        std::fs::create_dir_all(&dir).map_err(io_error(&dir))?;
    }
    let splits = assign_splits(spec.n_per_class, spec.seed);
    let indices: Vec<usize> = (0..spec.n_per_class).collect();
    let written = par_map(&indices, |_, &i| -> Result<()> {
        let pair = synthesize_pair(spec, i)?;
        for (label, img) in [("real", &pair.real), ("fake", &pair.fake)] {
            let path = out_dir.join(label).join(format!("{i:05}.png"));
            img.save(&path).map_err(|source| Error::Image { path, source })?;
        }
        Ok(())
    });
    written.into_iter().collect::<Result<Vec<()>>>()?;

    let mut manifest = DatasetManifest::new(spec.size, 3, out_dir);
    for (i, &split) in splits.iter().enumerate() {
        for label in [ClassLabel::Real, ClassLabel::Fake] {
            manifest.entries.push(ManifestEntry {
                path: format!("{}/{i:05}.png", label.as_str()),
                label,
                domain: spec.manipulation.tag().to_string(),
                split,
            });
        }
    }
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}
