//! Weak (flip + translate) and strong (random-op + cutout) image transforms.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Image;
use crate::error::{Error, Result};

/// Fill value for pixels uncovered by geometric ops and for cutout.
pub const MID_GRAY: f32 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AugmentOp {
    AutoContrast,
    Brightness,
    Color,
    Contrast,
    Equalize,
    Identity,
    Posterize,
    Rotate,
    Sharpness,
    ShearX,
    ShearY,
    Solarize,
    TranslateX,
    TranslateY,
}

impl AugmentOp {
    pub const ALL: [AugmentOp; 14] = [
        AugmentOp::AutoContrast,
        AugmentOp::Brightness,
        AugmentOp::Color,
        AugmentOp::Contrast,
        AugmentOp::Equalize,
        AugmentOp::Identity,
        AugmentOp::Posterize,
        AugmentOp::Rotate,
        AugmentOp::Sharpness,
        AugmentOp::ShearX,
        AugmentOp::ShearY,
        AugmentOp::Solarize,
        AugmentOp::TranslateX,
        AugmentOp::TranslateY,
    ];

    /// Closed magnitude interval the op is sampled from.
    pub fn range(self) -> (f32, f32) {
        match self {
            AugmentOp::AutoContrast | AugmentOp::Equalize | AugmentOp::Identity => (0.0, 1.0),
            AugmentOp::Brightness
            | AugmentOp::Color
            | AugmentOp::Contrast
            | AugmentOp::Sharpness => (0.05, 0.95),
            AugmentOp::Posterize => (4.0, 8.0),
            AugmentOp::Rotate => (-30.0, 30.0),
            AugmentOp::ShearX
            | AugmentOp::ShearY
            | AugmentOp::TranslateX
            | AugmentOp::TranslateY => (-0.3, 0.3),
            AugmentOp::Solarize => (0.0, 256.0),
        }
    }

    pub fn sample_magnitude<R: Rng + ?Sized>(self, rng: &mut R) -> f32 {
        let (lo, hi) = self.range();
        rng.random_range(lo..=hi)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentProfile {
    pub weak_flip_enabled: bool,
    pub weak_translate_fraction: f32,
    pub strong_num_ops: usize,
    pub cutout_max_fraction: f32,
    /// Ops eligible for strong augmentation; the full table when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strong_ops: Option<Vec<AugmentOp>>,
}

impl Default for AugmentProfile {
    fn default() -> Self {
        Self::cifar()
    }
}

impl AugmentProfile {
    pub fn cifar() -> Self {
        Self {
            weak_flip_enabled: true,
            weak_translate_fraction: 0.125,
            strong_num_ops: 3,
            cutout_max_fraction: 0.5,
            strong_ops: None,
        }
    }

    /// Digits are not mirror-symmetric, so the flip is dropped.
    pub fn svhn() -> Self {
        Self {
            weak_flip_enabled: false,
            ..Self::cifar()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let frac_ok = |f: f32| (0.0..=1.0).contains(&f);
        if !frac_ok(self.weak_translate_fraction) || !frac_ok(self.cutout_max_fraction) {
            return Err(Error::config("augmentation fractions must lie in [0, 1]"));
        }
        if self.strong_num_ops == 0 {
            return Err(Error::config("strong_num_ops must be at least 1"));
        }
        if matches!(&self.strong_ops, Some(ops) if ops.is_empty()) {
            return Err(Error::config("strong_ops must not be empty"));
        }
        Ok(())
    }

    pub fn op_table(&self) -> &[AugmentOp] {
        self.strong_ops.as_deref().unwrap_or(&AugmentOp::ALL)
    }
}

pub fn flip_horizontal(image: &Image) -> Image {
    let mut out = image.clone();
    let w = image.width;
    for c in 0..Image::CHANNELS {
        for y in 0..image.height {
            for x in 0..w {
                out.set(c, y, x, image.get(c, y, w - 1 - x));
            }
        }
    }
    out
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

/// Shifts content by `(dy, dx)` pixels with reflection padding; equivalent to
/// reflect-padding then cropping at the shifted offset.
pub fn translate_reflect(image: &Image, dy: isize, dx: isize) -> Image {
    let mut out = image.clone();
    for c in 0..Image::CHANNELS {
        for y in 0..image.height {
            let sy = reflect(y as isize - dy, image.height);
            for x in 0..image.width {
                let sx = reflect(x as isize - dx, image.width);
                out.set(c, y, x, image.get(c, sy, sx));
            }
        }
    }
    out
}

/// Random mirror (p = 0.5 when enabled) then random pad-and-crop translation.
pub fn weak_augment<R: Rng + ?Sized>(image: &Image, profile: &AugmentProfile, rng: &mut R) -> Image {
    let flip = profile.weak_flip_enabled && rng.random_bool(0.5);
    let pad_y = (profile.weak_translate_fraction * image.height as f32).round() as i64;
    let pad_x = (profile.weak_translate_fraction * image.width as f32).round() as i64;
    let dy = rng.random_range(-pad_y..=pad_y);
    let dx = rng.random_range(-pad_x..=pad_x);
    let base = if flip {
        flip_horizontal(image)
    } else {
        image.clone()
    };
    if dy == 0 && dx == 0 {
        base
    } else {
        translate_reflect(&base, dy as isize, dx as isize)
    }
}

/// `strong_num_ops` ops drawn uniformly with replacement, each at a uniformly
/// sampled magnitude, followed by cutout.
pub fn strong_augment<R: Rng + ?Sized>(image: &Image, profile: &AugmentProfile, rng: &mut R) -> Image {
    let table = profile.op_table();
    let mut out = image.clone();
    for _ in 0..profile.strong_num_ops {
        let op = table[rng.random_range(0..table.len())];
        let magnitude = op.sample_magnitude(rng);
        out = apply_op(&out, op, magnitude).expect("sampled magnitude lies in range");
    }
    cutout(&out, profile.cutout_max_fraction, rng)
}

/// Masks a square with side uniform in `[0, max_fraction·side]` around a
/// uniformly chosen centre pixel.
pub fn cutout<R: Rng + ?Sized>(image: &Image, max_fraction: f32, rng: &mut R) -> Image {
    let side = image.height.min(image.width) as f32;
    let len = (rng.random_range(0.0..=1.0f32) * max_fraction.clamp(0.0, 1.0) * side).round() as usize;
    let cy = rng.random_range(0..image.height);
    let cx = rng.random_range(0..image.width);
    cutout_at(image, cy, cx, len)
}

/// Square of side `len` whose top-left corner is `len / 2` above-left of
/// `(cy, cx)`, clipped to the image and filled with mid gray.
pub fn cutout_at(image: &Image, cy: usize, cx: usize, len: usize) -> Image {
    let mut out = image.clone();
    let (y0, x0) = (cy as isize - (len / 2) as isize, cx as isize - (len / 2) as isize);
    let ys = y0.max(0) as usize..((y0 + len as isize).max(0) as usize).min(image.height);
    let xs = x0.max(0) as usize..((x0 + len as isize).max(0) as usize).min(image.width);
    for c in 0..Image::CHANNELS {
        for y in ys.clone() {
            for x in xs.clone() {
                out.set(c, y, x, MID_GRAY);
            }
        }
    }
    out
}

/// Applies one op at `magnitude`, which must lie inside the op's range.
pub fn apply_op(image: &Image, op: AugmentOp, magnitude: f32) -> Result<Image> {
    let (lo, hi) = op.range();
    if !(lo..=hi).contains(&magnitude) {
        return Err(Error::contract(format!(
            "{op:?} magnitude {magnitude} outside [{lo}, {hi}]"
        )));
    }
    let out = match op {
        AugmentOp::Identity => image.clone(),
        AugmentOp::AutoContrast => auto_contrast(image),
        AugmentOp::Brightness => blend(&Image::filled(image.height, image.width, 0.0), image, magnitude),
        AugmentOp::Color => blend(&grayscale(image), image, magnitude),
        AugmentOp::Contrast => {
            let g = grayscale(image);
            let mean = g.channel(0).iter().sum::<f32>() / g.plane() as f32;
            blend(&Image::filled(image.height, image.width, mean), image, magnitude)
        }
        AugmentOp::Equalize => equalize(image),
        AugmentOp::Posterize => posterize(image, magnitude.floor() as u32),
        AugmentOp::Rotate => {
            let (s, c) = magnitude.to_radians().sin_cos();
            // Inverse map of a counter-clockwise rotation about the centre.
            affine(image, [c, -s, s, c])
        }
        AugmentOp::Sharpness => blend(&smooth(image), image, magnitude),
        AugmentOp::ShearX => affine(image, [1.0, magnitude, 0.0, 1.0]),
        AugmentOp::ShearY => affine(image, [1.0, 0.0, magnitude, 1.0]),
        AugmentOp::Solarize => solarize(image, magnitude),
        AugmentOp::TranslateX => shift(image, 0.0, magnitude * image.width as f32),
        AugmentOp::TranslateY => shift(image, magnitude * image.height as f32, 0.0),
    };
    Ok(out)
}

/// `degenerate + factor·(image − degenerate)`, clamped.
fn blend(degenerate: &Image, image: &Image, factor: f32) -> Image {
    let mut out = image.clone();
    for (o, d) in out.pixels.iter_mut().zip(&degenerate.pixels) {
        *o = (d + factor * (*o - d)).clamp(0.0, 1.0);
    }
    out
}

fn grayscale(image: &Image) -> Image {
    let mut out = image.clone();
    for i in 0..image.plane() {
        let p = image.plane();
        let g = 0.299 * image.pixels[i] + 0.587 * image.pixels[p + i] + 0.114 * image.pixels[2 * p + i];
        for c in 0..Image::CHANNELS {
            out.pixels[c * p + i] = g;
        }
    }
    out
}

fn auto_contrast(image: &Image) -> Image {
    let mut out = image.clone();
    for c in 0..Image::CHANNELS {
        let ch = out.channel_mut(c);
        let lo = ch.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = ch.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        if hi > lo {
            for v in ch.iter_mut() {
                *v = ((*v - lo) / (hi - lo)).clamp(0.0, 1.0);
            }
        }
    }
    out
}

fn equalize(image: &Image) -> Image {
    let mut out = image.clone();
    let bytes = image.to_bytes();
    let p = image.plane();
    for c in 0..Image::CHANNELS {
        let ch = &bytes[c * p..(c + 1) * p];
        let mut hist = [0usize; 256];
        for b in ch {
            hist[*b as usize] += 1;
        }
        let last = hist.iter().rev().find(|h| **h > 0).copied().unwrap_or(0);
        let step = (p - last) / 255;
        if step == 0 {
            continue;
        }
        let mut lut = [0u8; 256];
        let mut n = step / 2;
        for (i, h) in hist.iter().enumerate() {
            lut[i] = (n / step).min(255) as u8;
            n += h;
        }
        for (o, b) in out.channel_mut(c).iter_mut().zip(ch) {
            *o = lut[*b as usize] as f32 / 255.0;
        }
    }
    out
}

fn posterize(image: &Image, bits: u32) -> Image {
    let bits = bits.clamp(1, 8);
    let mask = 0xFFu8 << (8 - bits);
    let bytes = image.to_bytes();
    Image::from_bytes(
        image.height,
        image.width,
        &bytes.iter().map(|b| b & mask).collect::<Vec<_>>(),
    )
}

fn solarize(image: &Image, threshold: f32) -> Image {
    let mut out = image.clone();
    for v in &mut out.pixels {
        if (*v * 255.0).round() >= threshold {
            *v = 1.0 - *v;
        }
    }
    out
}

/// 3x3 smoothing kernel `[[1,1,1],[1,5,1],[1,1,1]] / 13` on interior pixels.
fn smooth(image: &Image) -> Image {
    let mut out = image.clone();
    let (h, w) = (image.height, image.width);
    if h < 3 || w < 3 {
        return out;
    }
    for c in 0..Image::CHANNELS {
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                let mut s = 4.0 * image.get(c, y, x);
                for yy in y - 1..=y + 1 {
                    for xx in x - 1..=x + 1 {
                        s += image.get(c, yy, xx);
                    }
                }
                out.set(c, y, x, s / 13.0);
            }
        }
    }
    out
}

/// Bilinear sample with mid-gray outside the image.
fn sample(image: &Image, c: usize, sy: f32, sx: f32) -> f32 {
    let (h, w) = (image.height as f32, image.width as f32);
    if sy < -0.5 || sx < -0.5 || sy > h - 0.5 || sx > w - 0.5 {
        return MID_GRAY;
    }
    let sy = sy.clamp(0.0, h - 1.0);
    let sx = sx.clamp(0.0, w - 1.0);
    let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(image.height - 1), (x0 + 1).min(image.width - 1));
    let (fy, fx) = (sy - y0 as f32, sx - x0 as f32);
    let top = image.get(c, y0, x0) * (1.0 - fx) + image.get(c, y0, x1) * fx;
    let bottom = image.get(c, y1, x0) * (1.0 - fx) + image.get(c, y1, x1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Output pixel `p` (relative to the centre) reads source `M·p`, `M` row-major `[a, b, c, d]`
/// acting on `(x, y)`.
fn affine(image: &Image, m: [f32; 4]) -> Image {
    let mut out = image.clone();
    let cy = (image.height as f32 - 1.0) / 2.0;
    let cx = (image.width as f32 - 1.0) / 2.0;
    for y in 0..image.height {
        for x in 0..image.width {
            let (px, py) = (x as f32 - cx, y as f32 - cy);
            let sx = m[0] * px + m[1] * py + cx;
            let sy = m[2] * px + m[3] * py + cy;
            for c in 0..Image::CHANNELS {
                out.set(c, y, x, sample(image, c, sy, sx).clamp(0.0, 1.0));
            }
        }
    }
    out
}

fn shift(image: &Image, dy: f32, dx: f32) -> Image {
    let mut out = image.clone();
    for y in 0..image.height {
        for x in 0..image.width {
            for c in 0..Image::CHANNELS {
                let v = sample(image, c, y as f32 + dy, x as f32 + dx);
                out.set(c, y, x, v.clamp(0.0, 1.0));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn natural(side: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = Image::filled(side, side, 0.0);
        for c in 0..3 {
            for y in 0..side {
                for x in 0..side {
                    let v = 0.5 + 0.3 * ((x as f32 * 0.7 + c as f32).sin() * (y as f32 * 0.4).cos())
                        + rng.random_range(-0.1..0.1);
                    img.set(c, y, x, (((v.clamp(0.0, 1.0)) * 255.0).round()) / 255.0);
                }
            }
        }
        img
    }

    #[test]
    fn weak_identity_when_disabled() {
        let img = natural(8, 0);
        let profile = AugmentProfile {
            weak_flip_enabled: false,
            weak_translate_fraction: 0.0,
            ..AugmentProfile::cifar()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            assert_eq!(weak_augment(&img, &profile, &mut rng), img);
        }
    }

    #[test]
    fn flip_is_involution() {
        let img = natural(7, 3);
        assert_eq!(flip_horizontal(&flip_horizontal(&img)), img);
        assert_ne!(flip_horizontal(&img), img);
    }

    #[test]
    fn svhn_profile_never_mirrors() {
        let img = natural(8, 4);
        let mirrored = flip_horizontal(&img);
        let no_shift = |p: AugmentProfile| AugmentProfile {
            weak_translate_fraction: 0.0,
            ..p
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let svhn = no_shift(AugmentProfile::svhn());
        assert!((0..1000).all(|_| weak_augment(&img, &svhn, &mut rng) != mirrored));
        let cifar = no_shift(AugmentProfile::cifar());
        let flips = (0..1000)
            .filter(|_| weak_augment(&img, &cifar, &mut rng) == mirrored)
            .count();
        assert!((400..600).contains(&flips), "{flips}");
    }

    #[test]
    fn translation_stays_within_fraction() {
        // A single bright pixel can only move by at most round(0.125 * 16) = 2.
        let mut img = Image::filled(16, 16, 0.0);
        img.set(0, 8, 8, 1.0);
        let profile = AugmentProfile {
            weak_flip_enabled: false,
            ..AugmentProfile::cifar()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let out = weak_augment(&img, &profile, &mut rng);
            let pos = out.channel(0).iter().position(|v| *v == 1.0).unwrap();
            let (y, x) = (pos / 16, pos % 16);
            assert!(y.abs_diff(8) <= 2 && x.abs_diff(8) <= 2);
        }
    }

    #[test]
    fn strong_identity_limit() {
        let img = natural(8, 6);
        let profile = AugmentProfile {
            cutout_max_fraction: 0.0,
            strong_ops: Some(vec![AugmentOp::Identity]),
            ..AugmentProfile::cifar()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(strong_augment(&img, &profile, &mut rng), img);
    }

    #[test]
    fn strong_views_differ() {
        let img = natural(16, 7);
        let profile = AugmentProfile::cifar();
        let mut differ = 0;
        for t in 0..100 {
            let a = strong_augment(&img, &profile, &mut ChaCha8Rng::seed_from_u64(2 * t));
            let b = strong_augment(&img, &profile, &mut ChaCha8Rng::seed_from_u64(2 * t + 1));
            if a.to_bytes() != b.to_bytes() {
                differ += 1;
            }
        }
        assert!(differ >= 99, "{differ}");
    }

    #[test]
    fn rotate_magnitudes_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..10_000 {
            let m = AugmentOp::Rotate.sample_magnitude(&mut rng);
            assert!((-30.0..=30.0).contains(&m));
        }
        assert!(apply_op(&natural(4, 0), AugmentOp::Rotate, 30.5).is_err());
        assert!(apply_op(&natural(4, 0), AugmentOp::Posterize, 3.9).is_err());
    }

    #[test]
    fn cutout_empty_and_full() {
        let img = natural(8, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(cutout(&img, 0.0, &mut rng), img);
        let full = cutout_at(&img, 4, 4, 8);
        assert!(full.pixels.iter().all(|v| *v == MID_GRAY));
    }

    #[test]
    fn cutout_masks_clipped_square_area() {
        let img = Image::filled(10, 10, 0.2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let len = rng.random_range(0..=10usize);
            let (cy, cx) = (rng.random_range(0..10usize), rng.random_range(0..10usize));
            let out = cutout_at(&img, cy, cx, len);
            let masked = out.channel(1).iter().filter(|v| **v == MID_GRAY).count();
            let span = |c: usize| {
                let lo = c as isize - (len / 2) as isize;
                let hi = lo + len as isize;
                (hi.min(10) - lo.max(0)).max(0) as usize
            };
            assert_eq!(masked, span(cy) * span(cx));
        }
    }

    #[test]
    fn identity_and_boundary_ops() {
        let img = natural(8, 10);
        assert_eq!(apply_op(&img, AugmentOp::Identity, 0.3).unwrap(), img);
        assert_eq!(apply_op(&img, AugmentOp::Solarize, 256.0).unwrap(), img);
        assert_eq!(apply_op(&img, AugmentOp::Posterize, 8.0).unwrap(), img);
        let zero_shear = apply_op(&img, AugmentOp::ShearX, 0.0).unwrap();
        assert_eq!(zero_shear, img);
    }

    #[test]
    fn solarize_zero_inverts_everything() {
        let img = natural(4, 11);
        let out = apply_op(&img, AugmentOp::Solarize, 0.0).unwrap();
        for (a, b) in out.pixels.iter().zip(&img.pixels) {
            assert!((a - (1.0 - b)).abs() < 1e-6);
        }
    }

    #[test]
    fn every_op_preserves_shape_and_range() {
        let img = natural(9, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for op in AugmentOp::ALL {
            for _ in 0..5 {
                let out = apply_op(&img, op, op.sample_magnitude(&mut rng)).unwrap();
                assert_eq!((out.height, out.width), (9, 9));
                assert!(out.is_valid(), "{op:?}");
            }
        }
    }

    #[test]
    fn profile_validation() {
        assert!(AugmentProfile::cifar().validate().is_ok());
        let bad = AugmentProfile {
            strong_num_ops: 0,
            ..AugmentProfile::cifar()
        };
        assert!(bad.validate().is_err());
    }
}
