//! Synthetic lesion images and the corruption and augmentation transforms
//! used by the robustness experiments.
//!
//! A positive image holds at least one striped (oriented-texture) blob; every
//! image may also hold smooth distractor blobs of the same mean intensity, so
//! only texture separates the classes. Generation is a pure function of
//! `(spec, index)`.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::deform::sample_slice;
use crate::error::{arg_err, shape_err, Result};
use crate::tensor::Tensor;

/// SplitMix64 finalizer, used to derive independent seeds per purpose.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn rng_for(base: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, stream))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthLesionSpec {
    /// Image side `W`.
    pub size: usize,
    /// Inclusive range of lesions in a positive image.
    pub lesion_count: [usize; 2],
    /// Inclusive range of smooth distractor blobs in any image.
    pub distractor_count: [usize; 2],
    /// Blob radius range in pixels.
    pub lesion_radius: [f64; 2],
    /// Peak blob intensity above background.
    pub contrast: f64,
    /// Lesions carry cosine stripes at a random orientation.
    pub oriented_texture: bool,
    /// Stripe wavelength in pixels.
    pub stripe_wavelength: f64,
    pub background: f64,
    pub noise_std: f64,
    pub positive_fraction: f64,
    /// Number of labels; above 1 each label is an independent lesion type.
    pub labels: usize,
    pub max_intensity: f64,
    pub seed: u64,
}

impl Default for SynthLesionSpec {
    fn default() -> Self {
        Self {
            size: 32,
            lesion_count: [1, 2],
            distractor_count: [1, 2],
            lesion_radius: [3.0, 5.0],
            contrast: 0.5,
            oriented_texture: true,
            stripe_wavelength: 3.0,
            background: 0.2,
            noise_std: 0.05,
            positive_fraction: 0.5,
            labels: 1,
            max_intensity: 1.0,
            seed: 0,
        }
    }
}

impl SynthLesionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size < 8 {
            return Err(arg_err!("image size must be at least 8"));
        }
        if self.lesion_count[0] == 0 || self.lesion_count[0] > self.lesion_count[1] {
            return Err(arg_err!(
                "lesion_count must be a range starting at 1 or more"
            ));
        }
        if self.distractor_count[0] > self.distractor_count[1] {
            return Err(arg_err!("distractor_count range is reversed"));
        }
        if !(self.lesion_radius[0] > 0.0 && self.lesion_radius[0] <= self.lesion_radius[1]) {
            return Err(arg_err!("lesion_radius must be a positive range"));
        }
        if !(0.0..=1.0).contains(&self.positive_fraction) {
            return Err(arg_err!("positive_fraction must lie in [0, 1]"));
        }
        if self.labels == 0 {
            return Err(arg_err!("labels must be at least 1"));
        }
        if !(self.max_intensity > 0.0) || self.noise_std < 0.0 || self.stripe_wavelength <= 0.0 {
            return Err(arg_err!(
                "max_intensity and stripe_wavelength must be positive, noise_std nonnegative"
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lesion {
    pub y: f64,
    pub x: f64,
    pub radius: f64,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedBag {
    /// `[1, W, W]`
    pub image: Tensor,
    pub labels: Vec<u8>,
    /// Ground-truth lesion centres; distractors are not listed.
    pub lesions: Vec<Lesion>,
}

const DATA_STREAM: u64 = 0xDA7A;

pub fn gen_bag(spec: &SynthLesionSpec, index: u64) -> Result<GeneratedBag> {
    spec.validate()?;
    let mut rng = rng_for(derive_seed(spec.seed, DATA_STREAM), index);
    let w = spec.size;
    let labels: Vec<u8> = (0..spec.labels)
        .map(|_| u8::from(rng.gen_bool(spec.positive_fraction)))
        .collect();

    let noise = Normal::new(0.0, spec.noise_std.max(1e-300)).expect("valid std");
    let mut img: Vec<f64> = (0..w * w)
        .map(|_| {
            let n = if spec.noise_std > 0.0 {
                noise.sample(&mut rng)
            } else {
                0.0
            };
            spec.background + n
        })
        .collect();

    let margin = spec.lesion_radius[1].min(w as f64 / 4.0);
    let place = |rng: &mut ChaCha8Rng| {
        (
            rng.gen_range(margin..w as f64 - 1.0 - margin),
            rng.gen_range(margin..w as f64 - 1.0 - margin),
            rng.gen_range(spec.lesion_radius[0]..=spec.lesion_radius[1]),
        )
    };

    let mut lesions = Vec::new();
    for (c, &y) in labels.iter().enumerate() {
        if y == 0 {
            continue;
        }
        let count = rng.gen_range(spec.lesion_count[0]..=spec.lesion_count[1]);
        for _ in 0..count {
            let (cy, cx, r) = place(&mut rng);
            // single-label: any orientation; multi-label: orientation encodes the type
            let theta = if spec.labels == 1 {
                rng.gen_range(0.0..PI)
            } else {
                c as f64 * PI / spec.labels as f64
            };
            let phase = rng.gen_range(0.0..2.0 * PI);
            paint_blob(&mut img, w, cy, cx, r, spec, Some((theta, phase)));
            lesions.push(Lesion {
                y: cy,
                x: cx,
                radius: r,
                label: c,
            });
        }
    }
    let distractors = rng.gen_range(spec.distractor_count[0]..=spec.distractor_count[1]);
    for _ in 0..distractors {
        let (cy, cx, r) = place(&mut rng);
        paint_blob(&mut img, w, cy, cx, r, spec, None);
    }
    for v in &mut img {
        *v = v.clamp(0.0, spec.max_intensity);
    }
    Ok(GeneratedBag {
        image: Tensor::from_vec(&[1, w, w], img)?,
        labels,
        lesions,
    })
}

/// Adds a Gaussian blob; striped blobs modulate it by `(1 + cos)/2`, smooth
/// ones by the same carrier's mean of 1/2.
fn paint_blob(
    img: &mut [f64],
    w: usize,
    cy: f64,
    cx: f64,
    r: f64,
    spec: &SynthLesionSpec,
    stripes: Option<(f64, f64)>,
) {
    for i in 0..w {
        for j in 0..w {
            let (dy, dx) = (i as f64 - cy, j as f64 - cx);
            let env = (-(dy * dy + dx * dx) / (2.0 * r * r)).exp();
            if env < 1e-4 {
                continue;
            }
            let carrier = match stripes {
                Some((theta, phase)) if spec.oriented_texture => {
                    let along = dx * theta.cos() + dy * theta.sin();
                    0.5 * (1.0 + (2.0 * PI * along / spec.stripe_wavelength + phase).cos())
                }
                _ => 0.5,
            };
            img[i * w + j] += 2.0 * spec.contrast * env * carrier;
        }
    }
}

fn image_dims(image: &Tensor) -> Result<(usize, usize, usize)> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(shape_err!("image must be [C,H,W], got {s:?}"));
    }
    Ok((s[0], s[1], s[2]))
}

/// Rotates by `angle` then scales by `scale` about the image centre, with
/// bilinear resampling and zero fill.
pub fn deform_transform(image: &Tensor, scale: f64, angle: f64) -> Result<Tensor> {
    if !(scale > 0.0) {
        return Err(arg_err!("scale must be positive, got {scale}"));
    }
    let (c, h, w) = image_dims(image)?;
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = angle.sin_cos();
    let mut out = vec![0.0; image.len()];
    for ch in 0..c {
        let src = image.slice_data(ch);
        for i in 0..h {
            for j in 0..w {
                // inverse map: p_src = c + R(-angle) (p - c) / scale
                let (dy, dx) = ((i as f64 - cy) / scale, (j as f64 - cx) / scale);
                let sy = cy + cos * dy - sin * dx;
                let sx = cx + sin * dy + cos * dx;
                out[(ch * h + i) * w + j] = sample_slice(src, h, w, sy, sx);
            }
        }
    }
    Tensor::from_vec(image.shape(), out)
}

/// Sets each pixel to `value` independently with probability `prob`.
pub fn salt_noise(image: &Tensor, prob: f64, value: f64, seed: u64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&prob) {
        return Err(arg_err!("noise probability must lie in [0, 1], got {prob}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = image
        .data()
        .iter()
        .map(|&v| if rng.gen_bool(prob) { value } else { v })
        .collect();
    Tensor::from_vec(image.shape(), data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    pub rotate_prob: f64,
    /// Largest absolute rotation, degrees.
    pub max_rotation_deg: f64,
    pub shift_prob: f64,
    /// Largest shift as a fraction of the image side.
    pub max_shift: f64,
    pub cutout_prob: f64,
    /// Cutout side as a fraction of the image side (50 of 224 pixels).
    pub cutout_frac: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            rotate_prob: 1.0,
            max_rotation_deg: 90.0,
            shift_prob: 1.0,
            max_shift: 0.1,
            cutout_prob: 1.0,
            cutout_frac: 50.0 / 224.0,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            flip_prob: 0.0,
            rotate_prob: 0.0,
            shift_prob: 0.0,
            cutout_prob: 0.0,
            ..Self::default()
        }
    }
}

/// Horizontal flip, rotation, integer shift and one zero box, each applied
/// with its own probability.
pub fn augment(image: &Tensor, cfg: &AugmentConfig, seed: u64) -> Result<Tensor> {
    let (c, h, w) = image_dims(image)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = image.clone();
    if rng.gen_bool(cfg.flip_prob) {
        let src = img.clone();
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    img.data_mut()[(ch * h + i) * w + j] =
                        src.data()[(ch * h + i) * w + (w - 1 - j)];
                }
            }
        }
    }
    if rng.gen_bool(cfg.rotate_prob) {
        let max = cfg.max_rotation_deg.to_radians();
        let angle = rng.gen_range(-max..=max);
        img = deform_transform(&img, 1.0, angle)?;
    }
    if rng.gen_bool(cfg.shift_prob) {
        let my = (cfg.max_shift * h as f64).floor() as isize;
        let mx = (cfg.max_shift * w as f64).floor() as isize;
        let sy = rng.gen_range(-my..=my);
        let sx = rng.gen_range(-mx..=mx);
        let src = img.clone();
        for ch in 0..c {
            for i in 0..h as isize {
                for j in 0..w as isize {
                    let (yi, xj) = (i - sy, j - sx);
                    let v = if yi >= 0 && xj >= 0 && yi < h as isize && xj < w as isize {
                        src.data()[(ch * h + yi as usize) * w + xj as usize]
                    } else {
                        0.0
                    };
                    img.data_mut()[(ch * h + i as usize) * w + j as usize] = v;
                }
            }
        }
    }
    if rng.gen_bool(cfg.cutout_prob) {
        let side = ((cfg.cutout_frac * h.min(w) as f64).round() as usize).clamp(1, h.min(w));
        let y0 = rng.gen_range(0..=h - side);
        let x0 = rng.gen_range(0..=w - side);
        cutout(&mut img, y0, x0, side);
    }
    Ok(img)
}

/// Zeroes a `side x side` box with top-left corner `(y0, x0)` in every channel.
pub fn cutout(image: &mut Tensor, y0: usize, x0: usize, side: usize) {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    for ch in 0..c {
        for i in y0..(y0 + side).min(h) {
            for j in x0..(x0 + side).min(w) {
                image.data_mut()[(ch * h + i) * w + j] = 0.0;
            }
        }
    }
}

/// Draws a transform from the deformation protocol: scale in `[0.5, 1.5)`,
/// angle in `[0, 2 pi)`.
pub fn sample_deformation<R: Rng + ?Sized>(rng: &mut R) -> (f64, f64) {
    (rng.gen_range(0.5..1.5), rng.gen_range(0.0..2.0 * PI))
}
