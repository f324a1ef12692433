//! Weak and strong augmentation pipelines.
//!
//! The weak pipeline is a random horizontal flip followed by a random integer
//! translation of up to 1/8 of the image height. The strong pipeline stacks the
//! weak one, a fixed RandAugment-style policy and Cutout.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AugmentError {
    #[error("pixel buffer has {got} values, expected {expected}")]
    BadShape { expected: usize, got: usize },
    #[error("image dimensions must be positive")]
    Empty,
    #[error("invalid policy: {0}")]
    Policy(String),
}

/// An image with `f32` pixels in `[0,1]`, stored height × width × channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self, AugmentError> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(AugmentError::Empty);
        }
        let expected = height * width * channels;
        if data.len() != expected {
            return Err(AugmentError::BadShape {
                expected,
                got: data.len(),
            });
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        assert!(height > 0 && width > 0 && channels > 0);
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[f32] {
        &self.data
    }

    pub fn pixels_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    fn idx(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[self.idx(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        let i = self.idx(y, x, c);
        self.data[i] = v;
    }

    fn map(&self, f: impl Fn(f32) -> f32) -> Image {
        Image {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }

    fn clamp01(mut self) -> Image {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
        self
    }

    /// Per-pixel luminance (the mean of channels for non-RGB images).
    fn luminance(&self) -> Vec<f32> {
        self.data
            .chunks_exact(self.channels)
            .map(|px| {
                if px.len() == 3 {
                    0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]
                } else {
                    px.iter().sum::<f32>() / px.len() as f32
                }
            })
            .collect()
    }
}

/// Largest translation, in pixels, used by the weak pipeline.
pub fn max_shift(height: usize) -> i32 {
    (0.125 * height as f64).round() as i32
}

/// Optionally mirror left-right, then shift content by `(dx, dy)` pixels,
/// replicating edge pixels into the uncovered border.
pub fn flip_translate(img: &Image, flip: bool, dx: i32, dy: i32) -> Image {
    let (h, w, ch) = (img.height as i32, img.width as i32, img.channels);
    let src_x: Vec<usize> = (0..w)
        .map(|x| {
            let sx = (x - dx).clamp(0, w - 1);
            (if flip { w - 1 - sx } else { sx }) as usize
        })
        .collect();
    let row = img.width * ch;
    let mut out = img.clone();
    for (y, dst) in out.data.chunks_exact_mut(row).enumerate() {
        let sy = (y as i32 - dy).clamp(0, h - 1) as usize;
        let src = &img.data[sy * row..][..row];
        for (px, &sx) in dst.chunks_exact_mut(ch).zip(&src_x) {
            px.copy_from_slice(&src[sx * ch..][..ch]);
        }
    }
    out
}

pub fn weak_augment<R: Rng + ?Sized>(img: &Image, rng: &mut R) -> Image {
    let flip = rng.random_bool(0.5);
    let m = max_shift(img.height);
    let dx = rng.random_range(-m..=m);
    let dy = rng.random_range(-m..=m);
    flip_translate(img, flip, dx, dy)
}

/// The transforms of the strong policy. Magnitudes are interpreted per variant:
/// enhancement factors for brightness/color/contrast/sharpness, bits for
/// posterize, degrees for rotate, shear coefficient, threshold for solarize and
/// a fraction of the image side for translate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Transform {
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

impl Transform {
    pub const ALL: [Transform; 14] = [
        Transform::AutoContrast,
        Transform::Brightness,
        Transform::Color,
        Transform::Contrast,
        Transform::Equalize,
        Transform::Identity,
        Transform::Posterize,
        Transform::Rotate,
        Transform::Sharpness,
        Transform::ShearX,
        Transform::ShearY,
        Transform::Solarize,
        Transform::TranslateX,
        Transform::TranslateY,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Transform::AutoContrast => "autocontrast",
            Transform::Brightness => "brightness",
            Transform::Color => "color",
            Transform::Contrast => "contrast",
            Transform::Equalize => "equalize",
            Transform::Identity => "identity",
            Transform::Posterize => "posterize",
            Transform::Rotate => "rotate",
            Transform::Sharpness => "sharpness",
            Transform::ShearX => "shear_x",
            Transform::ShearY => "shear_y",
            Transform::Solarize => "solarize",
            Transform::TranslateX => "translate_x",
            Transform::TranslateY => "translate_y",
        }
    }

    /// Magnitude range of the default policy.
    pub fn default_range(self) -> (f32, f32) {
        match self {
            Transform::Brightness | Transform::Color | Transform::Contrast | Transform::Sharpness => {
                (0.05, 0.95)
            }
            Transform::Posterize => (4.0, 8.0),
            Transform::Rotate => (-30.0, 30.0),
            Transform::ShearX | Transform::ShearY => (-0.3, 0.3),
            Transform::Solarize => (0.0, 1.0),
            Transform::TranslateX | Transform::TranslateY => (-0.3, 0.3),
            Transform::AutoContrast | Transform::Equalize | Transform::Identity => (0.0, 0.0),
        }
    }

    pub fn apply(self, img: &Image, magnitude: f32) -> Image {
        let out = match self {
            Transform::Identity => img.clone(),
            Transform::AutoContrast => autocontrast(img),
            Transform::Equalize => equalize(img),
            Transform::Brightness => img.map(|v| v * magnitude),
            Transform::Color => {
                let gray = img.luminance();
                blend_per_pixel(img, &gray, magnitude)
            }
            Transform::Contrast => {
                let lum = img.luminance();
                let mean = lum.iter().sum::<f32>() / lum.len() as f32;
                img.map(|v| mean + magnitude * (v - mean))
            }
            Transform::Sharpness => sharpness(img, magnitude),
            Transform::Posterize => {
                let bits = magnitude.round().clamp(1.0, 8.0) as u32;
                let mask = !((1u32 << (8 - bits)) - 1) & 0xff;
                img.map(|v| ((v * 255.0).round() as u32 & mask) as f32 / 255.0)
            }
            Transform::Solarize => img.map(|v| if v >= magnitude { 1.0 - v } else { v }),
            Transform::Rotate => {
                let (s, c) = magnitude.to_radians().sin_cos();
                affine(img, [c, s, -s, c], [0.0, 0.0])
            }
            Transform::ShearX => affine(img, [1.0, magnitude, 0.0, 1.0], [0.0, 0.0]),
            Transform::ShearY => affine(img, [1.0, 0.0, magnitude, 1.0], [0.0, 0.0]),
            Transform::TranslateX => {
                affine(img, [1.0, 0.0, 0.0, 1.0], [magnitude * img.width as f32, 0.0])
            }
            Transform::TranslateY => {
                affine(img, [1.0, 0.0, 0.0, 1.0], [0.0, magnitude * img.height as f32])
            }
        };
        out.clamp01()
    }
}

impl fmt::Display for Transform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Transform {
    type Err = AugmentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Transform::ALL
            .iter()
            .copied()
            .find(|t| t.name() == s)
            .ok_or_else(|| AugmentError::Policy(format!("unknown transform `{s}`")))
    }
}

fn blend_per_pixel(img: &Image, base: &[f32], factor: f32) -> Image {
    let mut out = img.clone();
    for (px, &b) in out.data.chunks_exact_mut(img.channels).zip(base) {
        for v in px {
            *v = b + factor * (*v - b);
        }
    }
    out
}

fn autocontrast(img: &Image) -> Image {
    let mut out = img.clone();
    for c in 0..img.channels {
        let values = img.data.iter().skip(c).step_by(img.channels);
        let (lo, hi) = values.fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
        if hi > lo {
            for v in out.data.iter_mut().skip(c).step_by(img.channels) {
                *v = (*v - lo) / (hi - lo);
            }
        }
    }
    out
}

fn equalize(img: &Image) -> Image {
    let mut out = img.clone();
    let n = img.height * img.width;
    for c in 0..img.channels {
        let mut hist = [0usize; 256];
        for &v in img.data.iter().skip(c).step_by(img.channels) {
            hist[(v.clamp(0.0, 1.0) * 255.0).round() as usize] += 1;
        }
        let mut cdf = [0usize; 256];
        let mut acc = 0;
        for (bin, count) in hist.iter().enumerate() {
            acc += count;
            cdf[bin] = acc;
        }
        let cdf_min = cdf.iter().copied().find(|&v| v > 0).unwrap_or(0);
        if n == cdf_min {
            continue;
        }
        for v in out.data.iter_mut().skip(c).step_by(img.channels) {
            let bin = (v.clamp(0.0, 1.0) * 255.0).round() as usize;
            *v = (cdf[bin] - cdf_min) as f32 / (n - cdf_min) as f32;
        }
    }
    out
}

fn sharpness(img: &Image, factor: f32) -> Image {
    // Smoothing kernel [[1,1,1],[1,5,1],[1,1,1]] / 13 on the interior; borders unchanged.
    let mut blurred = img.clone();
    let (h, w) = (img.height, img.width);
    if h >= 3 && w >= 3 {
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                for c in 0..img.channels {
                    let mut acc = 4.0 * img.get(y, x, c);
                    for yy in y - 1..=y + 1 {
                        for xx in x - 1..=x + 1 {
                            acc += img.get(yy, xx, c);
                        }
                    }
                    blurred.set(y, x, c, acc / 13.0);
                }
            }
        }
    }
    let mut out = img.clone();
    for (o, (&b, &v)) in out.data.iter_mut().zip(blurred.data.iter().zip(&img.data)) {
        *o = b + factor * (v - b);
    }
    out
}

/// Inverse-mapped affine warp about the image center with nearest-neighbour
/// sampling and mid-gray fill. `m` maps output to input coordinates
/// (row-major 2×2 acting on (x, y)); `t` is the content shift in pixels.
fn affine(img: &Image, m: [f32; 4], t: [f32; 2]) -> Image {
    const FILL: f32 = 0.5;
    let (h, w) = (img.height, img.width);
    let cx = (w as f32 - 1.0) / 2.0;
    let cy = (h as f32 - 1.0) / 2.0;
    let mut out = Image::filled(h, w, img.channels, FILL);
    for y in 0..h {
        for x in 0..w {
            let ox = x as f32 - cx - t[0];
            let oy = y as f32 - cy - t[1];
            let sx = (m[0] * ox + m[1] * oy + cx).round();
            let sy = (m[2] * ox + m[3] * oy + cy).round();
            if sx >= 0.0 && sy >= 0.0 && (sx as usize) < w && (sy as usize) < h {
                for c in 0..img.channels {
                    out.set(y, x, c, img.get(sy as usize, sx as usize, c));
                }
            }
        }
    }
    out
}

/// Fill a `side × side` square centered at `(cy, cx)`, clipped at the borders.
pub fn cutout_at(img: &Image, cy: usize, cx: usize, side: usize, fill: &[f32]) -> Image {
    let mut out = img.clone();
    if side == 0 {
        return out;
    }
    let half = side / 2;
    let y0 = cy.saturating_sub(half);
    let x0 = cx.saturating_sub(half);
    let y1 = (cy + side - half).min(img.height);
    let x1 = (cx + side - half).min(img.width);
    for y in y0..y1 {
        for x in x0..x1 {
            for c in 0..img.channels {
                out.set(y, x, c, fill[c % fill.len()].clamp(0.0, 1.0));
            }
        }
    }
    out
}

/// Fixed strong-augmentation policy.
#[derive(Debug, Clone, PartialEq)]
pub struct AugPolicy {
    pub ops: Vec<(Transform, (f32, f32))>,
    pub ops_per_image: usize,
    /// Cutout side as a fraction of the image height; 0 disables Cutout.
    pub cutout_fraction: f32,
    /// Cutout fill color, per channel (the dataset mean).
    pub fill: Vec<f32>,
}

impl AugPolicy {
    /// All 14 transforms at their default ranges, 2 ops per image, half-side Cutout.
    pub fn rand_augment(fill: Vec<f32>) -> Self {
        Self {
            ops: Transform::ALL.iter().map(|&t| (t, t.default_range())).collect(),
            ops_per_image: 2,
            cutout_fraction: 0.5,
            fill,
        }
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        if !(0.0..1.0).contains(&self.cutout_fraction) {
            return Err(AugmentError::Policy("cutout_fraction must lie in [0,1)".into()));
        }
        if self.fill.is_empty() {
            return Err(AugmentError::Policy("fill color is empty".into()));
        }
        for (t, (lo, hi)) in &self.ops {
            if lo > hi {
                return Err(AugmentError::Policy(format!("{t}: empty magnitude range")));
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "ops_per_image = {}\ncutout_fraction = {}\nfill = {}\n",
            self.ops_per_image,
            self.cutout_fraction,
            self.fill.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
        );
        for (t, (lo, hi)) in &self.ops {
            s.push_str(&format!("op = {t} {lo} {hi}\n"));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, AugmentError> {
        let bad = |line: &str| AugmentError::Policy(format!("cannot parse `{line}`"));
        let mut policy = AugPolicy {
            ops: Vec::new(),
            ops_per_image: 0,
            cutout_fraction: 0.0,
            fill: Vec::new(),
        };
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (key, value) = line.split_once('=').ok_or_else(|| bad(line))?;
            let value = value.trim();
            match key.trim() {
                "ops_per_image" => policy.ops_per_image = value.parse().map_err(|_| bad(line))?,
                "cutout_fraction" => policy.cutout_fraction = value.parse().map_err(|_| bad(line))?,
                "fill" => {
                    policy.fill = value
                        .split(',')
                        .map(|v| v.trim().parse().map_err(|_| bad(line)))
                        .collect::<Result<_, _>>()?
                }
                "op" => {
                    let parts: Vec<&str> = value.split_whitespace().collect();
                    if parts.len() != 3 {
                        return Err(bad(line));
                    }
                    let t: Transform = parts[0].parse()?;
                    let lo = parts[1].parse().map_err(|_| bad(line))?;
                    let hi = parts[2].parse().map_err(|_| bad(line))?;
                    policy.ops.push((t, (lo, hi)));
                }
                _ => return Err(bad(line)),
            }
        }
        policy.validate()?;
        Ok(policy)
    }
}

pub fn strong_augment<R: Rng + ?Sized>(img: &Image, policy: &AugPolicy, rng: &mut R) -> Image {
    let mut out = weak_augment(img, rng);
    if !policy.ops.is_empty() {
        for _ in 0..policy.ops_per_image {
            let (t, (lo, hi)) = policy.ops[rng.random_range(0..policy.ops.len())];
            let magnitude = if hi > lo { rng.random_range(lo..=hi) } else { lo };
            out = t.apply(&out, magnitude);
        }
    }
    let side = (policy.cutout_fraction as f64 * img.height as f64).round() as usize;
    if side > 0 {
        let cy = rng.random_range(0..img.height);
        let cx = rng.random_range(0..img.width);
        out = cutout_at(&out, cy, cx, side, &policy.fill);
    }
    out.clamp01()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(seed: u64, h: usize, w: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..h * w * 3).map(|_| rng.random::<f32>()).collect();
        Image::new(h, w, 3, data).unwrap()
    }

    #[test]
    fn image_shape_checked() {
        assert_eq!(
            Image::new(2, 2, 3, vec![0.0; 11]),
            Err(AugmentError::BadShape { expected: 12, got: 11 })
        );
        assert_eq!(Image::new(0, 2, 3, vec![]), Err(AugmentError::Empty));
    }

    #[test]
    fn identity_weak_step() {
        let img = random_image(1, 32, 32);
        assert_eq!(flip_translate(&img, false, 0, 0), img);
    }

    #[test]
    fn shift_bound_at_32() {
        assert_eq!(max_shift(32), 4);
        assert_eq!(max_shift(96), 12);
    }

    #[test]
    fn flip_and_translate_move_pixels() {
        let img = random_image(2, 8, 8);
        let flipped = flip_translate(&img, true, 0, 0);
        assert_eq!(flipped.get(3, 0, 1), img.get(3, 7, 1));
        let shifted = flip_translate(&img, false, 2, 1);
        assert_eq!(shifted.get(4, 5, 0), img.get(3, 3, 0));
        // edge replication
        assert_eq!(shifted.get(0, 0, 2), img.get(0, 0, 2));
        assert_eq!(shifted.get(5, 1, 2), img.get(4, 0, 2));
    }

    #[test]
    fn constant_image_stays_constant() {
        let img = Image::filled(32, 32, 3, 0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            assert_eq!(weak_augment(&img, &mut rng), img);
        }
    }

    #[test]
    fn weak_output_is_on_the_flip_translate_grid() {
        let img = random_image(5, 32, 32);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..10 {
            let out = weak_augment(&img, &mut rng);
            let mut found = false;
            'search: for flip in [false, true] {
                for dx in -4..=4 {
                    for dy in -4..=4 {
                        if flip_translate(&img, flip, dx, dy) == out {
                            found = true;
                            break 'search;
                        }
                    }
                }
            }
            assert!(found);
        }
    }

    #[test]
    fn identity_strong_policy() {
        let img = random_image(7, 16, 16);
        let policy = AugPolicy {
            ops: vec![],
            ops_per_image: 2,
            cutout_fraction: 0.0,
            fill: vec![0.5],
        };
        // Find a seed whose weak draw is the identity.
        for seed in 0..1000 {
            let mut probe = ChaCha8Rng::seed_from_u64(seed);
            let flip = probe.random_bool(0.5);
            let dx = probe.random_range(-2..=2);
            let dy = probe.random_range(-2..=2);
            if !flip && dx == 0 && dy == 0 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                assert_eq!(strong_augment(&img, &policy, &mut rng), img);
                return;
            }
        }
        panic!("no identity seed found");
    }

    #[test]
    fn interior_cutout_covers_exactly_side_squared() {
        // Zero-free image so the fill value 0 is only found inside the square.
        let img = Image::filled(32, 32, 3, 0.7);
        let fill = [0.0, 0.0, 0.0];
        for (cy, cx) in [(8, 8), (16, 16), (24, 24), (10, 20)] {
            let out = cutout_at(&img, cy, cx, 16, &fill);
            let filled: Vec<(usize, usize)> = (0..32)
                .flat_map(|y| (0..32).map(move |x| (y, x)))
                .filter(|&(y, x)| (0..3).all(|c| out.get(y, x, c) == 0.0))
                .collect();
            assert_eq!(filled.len(), 256);
            let (ys, xs): (Vec<_>, Vec<_>) = filled.iter().copied().unzip();
            let (ymin, ymax) = (*ys.iter().min().unwrap(), *ys.iter().max().unwrap());
            let (xmin, xmax) = (*xs.iter().min().unwrap(), *xs.iter().max().unwrap());
            assert_eq!((ymax - ymin + 1, xmax - xmin + 1), (16, 16));
        }
        // clipped at a corner
        let out = cutout_at(&img, 0, 0, 16, &fill);
        let count = out.pixels().chunks(3).filter(|px| px[0] == 0.0).count();
        assert_eq!(count, 64);
    }

    #[test]
    fn strong_cutout_uses_policy_fraction() {
        let img = Image::filled(32, 32, 3, 0.7);
        let policy = AugPolicy {
            ops: vec![],
            ops_per_image: 0,
            cutout_fraction: 0.5,
            fill: vec![0.0, 0.0, 0.0],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let out = strong_augment(&img, &policy, &mut rng);
            let count = out.pixels().chunks(3).filter(|px| px[0] == 0.0).count();
            assert!(count > 0 && count <= 256);
        }
    }

    #[test]
    fn every_transform_keeps_range_and_shape() {
        let img = random_image(9, 12, 10);
        for t in Transform::ALL {
            let (lo, hi) = t.default_range();
            for m in [lo, (lo + hi) / 2.0, hi] {
                let out = t.apply(&img, m);
                assert_eq!((out.height(), out.width(), out.channels()), (12, 10, 3));
                assert!(out.pixels().iter().all(|v| (0.0..=1.0).contains(v)), "{t}");
            }
        }
    }

    #[test]
    fn transform_spot_checks() {
        let img = random_image(10, 8, 8);
        assert_eq!(Transform::Identity.apply(&img, 0.0), img);
        assert_eq!(Transform::Brightness.apply(&img, 1.0), img);
        assert_eq!(Transform::Rotate.apply(&img, 0.0), img);
        assert_eq!(Transform::ShearX.apply(&img, 0.0), img);
        let dark = Transform::Brightness.apply(&img, 0.0);
        assert!(dark.pixels().iter().all(|&v| v == 0.0));
        let sol = Transform::Solarize.apply(&img, 0.0);
        for (a, b) in sol.pixels().iter().zip(img.pixels()) {
            assert!((a - (1.0 - b)).abs() < 1e-6);
        }
        let gray = Transform::Color.apply(&img, 0.0);
        for px in gray.pixels().chunks(3) {
            assert!((px[0] - px[1]).abs() < 1e-6 && (px[1] - px[2]).abs() < 1e-6);
        }
        let post = Transform::Posterize.apply(&img, 4.0);
        for &v in post.pixels() {
            assert_eq!(((v * 255.0).round() as u32) & 0x0f, 0);
        }
        let ac = Transform::AutoContrast.apply(&img, 0.0);
        for c in 0..3 {
            let vals: Vec<f32> = ac.pixels().iter().skip(c).step_by(3).copied().collect();
            let max = vals.iter().cloned().fold(0.0f32, f32::max);
            let min = vals.iter().cloned().fold(1.0f32, f32::min);
            assert!((max - 1.0).abs() < 1e-6 && min.abs() < 1e-6);
        }
        // rotating by 90 degrees maps the top-left corner to a different corner
        let r = Transform::Rotate.apply(&img, 90.0);
        let corners = [(0, 7), (7, 0), (7, 7)];
        assert!(corners.iter().any(|&(y, x)| (0..3).all(|c| r.get(y, x, c) == img.get(0, 0, c))));
    }

    #[test]
    fn policy_text_round_trip() {
        let policy = AugPolicy::rand_augment(vec![0.49, 0.48, 0.45]);
        let back = AugPolicy::from_text(&policy.to_text()).unwrap();
        assert_eq!(back, policy);
        assert!(AugPolicy::from_text("op = warp 0 1\nfill = 0").is_err());
    }

    proptest! {
        #[test]
        fn pipelines_are_deterministic_and_in_range(img_seed in 0u64..1000, rng_seed in 0u64..1000) {
            let img = random_image(img_seed, 16, 16);
            let policy = AugPolicy::rand_augment(vec![0.5, 0.5, 0.5]);
            let a = strong_augment(&img, &policy, &mut ChaCha8Rng::seed_from_u64(rng_seed));
            let b = strong_augment(&img, &policy, &mut ChaCha8Rng::seed_from_u64(rng_seed));
            prop_assert_eq!(&a, &b);
            prop_assert_eq!((a.height(), a.width(), a.channels()), (16, 16, 3));
            prop_assert!(a.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
            let w1 = weak_augment(&img, &mut ChaCha8Rng::seed_from_u64(rng_seed));
            let w2 = weak_augment(&img, &mut ChaCha8Rng::seed_from_u64(rng_seed));
            prop_assert_eq!(&w1, &w2);
            prop_assert_eq!((w1.height(), w1.width()), (16, 16));
        }
    }
}
