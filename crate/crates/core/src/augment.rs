//! Image augmentation: weak (flip + reflect-padded crop), strong (two
//! randomly drawn transforms followed by CutOut) and exact 90° rotations.
//!
//! Every random operation is split into a `sample_*` step that draws its
//! parameters from an [`Rng`] and a pure `apply_*` step, so tests can force
//! specific draws.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::rng::Rng;

pub const CHANNELS: usize = 3;

/// 3×H×W image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != CHANNELS * height * width {
            return Err(Error::shape(
                "image",
                format!(
                    "{}x{}x{} needs {} values, got {}",
                    CHANNELS,
                    height,
                    width,
                    CHANNELS * height * width,
                    data.len()
                ),
            ));
        }
        Ok(Image {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, v: f32) -> Self {
        Image {
            height,
            width,
            data: vec![v; CHANNELS * height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    fn plane_len(&self) -> usize {
        self.height * self.width
    }

    fn map(&self, f: impl Fn(f32) -> f32) -> Image {
        Image {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v).clamp(0.0, 1.0)).collect(),
        }
    }

    /// Raw bit patterns of the pixel buffer, for exact comparisons.
    pub fn to_bits(&self) -> Vec<u32> {
        self.data.iter().map(|v| v.to_bits()).collect()
    }

    /// Binary PPM (P6, maxval 255).
    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let mut buf = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..CHANNELS {
                    buf.push(quantize(self.at(c, y, x)));
                }
            }
        }
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(&buf))
            .map_err(|e| Error::io(path, e))
    }
}

#[inline]
fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Channel-wise blend `degenerate + factor * (img - degenerate)`.
fn blend(degenerate: &Image, img: &Image, factor: f32) -> Image {
    Image {
        height: img.height,
        width: img.width,
        data: degenerate
            .data
            .iter()
            .zip(&img.data)
            .map(|(&d, &v)| (d + factor * (v - d)).clamp(0.0, 1.0))
            .collect(),
    }
}

fn grayscale(img: &Image) -> Vec<f32> {
    let n = img.plane_len();
    (0..n)
        .map(|i| 0.299 * img.data[i] + 0.587 * img.data[n + i] + 0.114 * img.data[2 * n + i])
        .collect()
}

/// Applies an 8-bit lookup table per channel. Pixels whose 8-bit level the
/// table leaves unchanged keep their exact float value.
fn apply_lut(img: &Image, luts: &[[u8; 256]; CHANNELS]) -> Image {
    let n = img.plane_len();
    let mut out = img.clone();
    for (c, lut) in luts.iter().enumerate() {
        for v in &mut out.data[c * n..(c + 1) * n] {
            let q = quantize(*v);
            let m = lut[q as usize];
            if m != q {
                *v = m as f32 / 255.0;
            }
        }
    }
    out
}

fn channel_histogram(img: &Image, c: usize) -> [usize; 256] {
    let n = img.plane_len();
    let mut h = [0usize; 256];
    for &v in &img.data[c * n..(c + 1) * n] {
        h[quantize(v) as usize] += 1;
    }
    h
}

fn identity_lut() -> [u8; 256] {
    std::array::from_fn(|i| i as u8)
}

pub fn brightness(img: &Image, factor: f32) -> Image {
    img.map(|v| v * factor)
}

pub fn color(img: &Image, factor: f32) -> Image {
    let gray = grayscale(img);
    let n = img.plane_len();
    let mut deg = img.clone();
    for c in 0..CHANNELS {
        deg.data[c * n..(c + 1) * n].copy_from_slice(&gray);
    }
    blend(&deg, img, factor)
}

pub fn contrast(img: &Image, factor: f32) -> Image {
    let gray = grayscale(img);
    let mean = gray.iter().sum::<f32>() / gray.len().max(1) as f32;
    blend(&Image::filled(img.height, img.width, mean), img, factor)
}

/// Blend toward a 3×3 smoothed copy (centre weight 5, neighbours 1); border
/// pixels of the smoothed copy equal the original.
pub fn sharpness(img: &Image, factor: f32) -> Image {
    let (h, w) = (img.height, img.width);
    let mut deg = img.clone();
    if h >= 3 && w >= 3 {
        for c in 0..CHANNELS {
            for y in 1..h - 1 {
                for x in 1..w - 1 {
                    let mut s = 4.0 * img.at(c, y, x);
                    for dy in 0..3 {
                        for dx in 0..3 {
                            s += img.at(c, y + dy - 1, x + dx - 1);
                        }
                    }
                    deg.set(c, y, x, s / 13.0);
                }
            }
        }
    }
    blend(&deg, img, factor)
}

pub fn autocontrast(img: &Image) -> Image {
    let luts: [[u8; 256]; CHANNELS] = std::array::from_fn(|c| {
        let h = channel_histogram(img, c);
        let lo = h.iter().position(|&n| n > 0).unwrap_or(0);
        let hi = h.iter().rposition(|&n| n > 0).unwrap_or(255);
        if hi <= lo {
            return identity_lut();
        }
        let scale = 255.0 / (hi - lo) as f32;
        std::array::from_fn(|i| {
            (((i as f32 - lo as f32) * scale).round()).clamp(0.0, 255.0) as u8
        })
    });
    apply_lut(img, &luts)
}

/// Histogram equalization per channel in 8-bit space.
pub fn equalize(img: &Image) -> Image {
    let luts: [[u8; 256]; CHANNELS] = std::array::from_fn(|c| {
        let h = channel_histogram(img, c);
        let nonzero: Vec<usize> = h.iter().copied().filter(|&n| n > 0).collect();
        let total: usize = nonzero.iter().sum();
        let step = (total - nonzero.last().copied().unwrap_or(0)) / 255;
        if step == 0 {
            return identity_lut();
        }
        let mut lut = [0u8; 256];
        let mut n = step / 2;
        for (i, slot) in lut.iter_mut().enumerate() {
            *slot = (n / step).min(255) as u8;
            n += h[i];
        }
        lut
    });
    apply_lut(img, &luts)
}

/// Keeps the top `bits` bits of each 8-bit level.
pub fn posterize(img: &Image, bits: u32) -> Image {
    let bits = bits.clamp(1, 8);
    let mask: u8 = !((1u16 << (8 - bits)) - 1) as u8;
    let lut: [u8; 256] = std::array::from_fn(|i| i as u8 & mask);
    apply_lut(img, &[lut; CHANNELS])
}

/// Inverts every level strictly above `threshold`.
pub fn solarize(img: &Image, threshold: f32) -> Image {
    let t = (threshold.clamp(0.0, 1.0) * 255.0).round() as usize;
    let lut: [u8; 256] = std::array::from_fn(|i| if i > t { 255 - i as u8 } else { i as u8 });
    apply_lut(img, &[lut; CHANNELS])
}

/// Resamples `img` through an inverse map from output to source pixel
/// coordinates using bilinear interpolation with zero fill.
fn warp(img: &Image, inverse: impl Fn(f32, f32) -> (f32, f32)) -> Image {
    let (h, w) = (img.height, img.width);
    let mut out = Image::filled(h, w, 0.0);
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = inverse(y as f32, x as f32);
            let (y0, x0) = (sy.floor(), sx.floor());
            let (fy, fx) = (sy - y0, sx - x0);
            let (y0, x0) = (y0 as isize, x0 as isize);
            let taps = [
                (y0, x0, (1.0 - fy) * (1.0 - fx)),
                (y0, x0 + 1, (1.0 - fy) * fx),
                (y0 + 1, x0, fy * (1.0 - fx)),
                (y0 + 1, x0 + 1, fy * fx),
            ];
            for c in 0..CHANNELS {
                let mut acc = 0.0f32;
                for &(ty, tx, wt) in &taps {
                    if wt != 0.0 && ty >= 0 && tx >= 0 && (ty as usize) < h && (tx as usize) < w {
                        acc += wt * img.at(c, ty as usize, tx as usize);
                    }
                }
                out.set(c, y, x, acc.clamp(0.0, 1.0));
            }
        }
    }
    out
}

fn center(img: &Image) -> (f32, f32) {
    ((img.height as f32 - 1.0) / 2.0, (img.width as f32 - 1.0) / 2.0)
}

/// Counterclockwise rotation by `degrees` about the image centre.
pub fn rotate(img: &Image, degrees: f32) -> Image {
    if degrees == 0.0 {
        return img.clone();
    }
    let (cy, cx) = center(img);
    let (s, c) = degrees.to_radians().sin_cos();
    // (x, -y) frame: counterclockwise on screen
    warp(img, |y, x| {
        let (dx, dy) = (x - cx, y - cy);
        (cy + s * dx + c * dy, cx + c * dx - s * dy)
    })
}

pub fn shear_x(img: &Image, rate: f32) -> Image {
    let (cy, _) = center(img);
    warp(img, |y, x| (y, x + rate * (y - cy)))
}

pub fn shear_y(img: &Image, rate: f32) -> Image {
    let (_, cx) = center(img);
    warp(img, |y, x| (y + rate * (x - cx), x))
}

/// Shifts content right by `fraction · width` pixels.
pub fn translate_x(img: &Image, fraction: f32) -> Image {
    let shift = fraction * img.width as f32;
    warp(img, |y, x| (y, x - shift))
}

/// Shifts content down by `fraction · height` pixels.
pub fn translate_y(img: &Image, fraction: f32) -> Image {
    let shift = fraction * img.height as f32;
    warp(img, |y, x| (y - shift, x))
}

/// Zoom about the centre; `factor < 1` shrinks the content.
pub fn scale(img: &Image, factor: f32) -> Image {
    let (cy, cx) = center(img);
    warp(img, |y, x| (cy + (y - cy) / factor, cx + (x - cx) / factor))
}

/// The fourteen strong-augmentation transforms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TransformKind {
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

impl TransformKind {
    pub const ALL: [TransformKind; 14] = [
        TransformKind::AutoContrast,
        TransformKind::Brightness,
        TransformKind::Color,
        TransformKind::Contrast,
        TransformKind::Equalize,
        TransformKind::Identity,
        TransformKind::Posterize,
        TransformKind::Rotate,
        TransformKind::Sharpness,
        TransformKind::ShearX,
        TransformKind::ShearY,
        TransformKind::Solarize,
        TransformKind::TranslateX,
        TransformKind::TranslateY,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TransformKind::AutoContrast => "autocontrast",
            TransformKind::Brightness => "brightness",
            TransformKind::Color => "color",
            TransformKind::Contrast => "contrast",
            TransformKind::Equalize => "equalize",
            TransformKind::Identity => "identity",
            TransformKind::Posterize => "posterize",
            TransformKind::Rotate => "rotate",
            TransformKind::Sharpness => "sharpness",
            TransformKind::ShearX => "shear_x",
            TransformKind::ShearY => "shear_y",
            TransformKind::Solarize => "solarize",
            TransformKind::TranslateX => "translate_x",
            TransformKind::TranslateY => "translate_y",
        }
    }

    /// Magnitude range, or `None` for parameterless transforms.
    pub fn range(self) -> Option<(f64, f64)> {
        match self {
            TransformKind::AutoContrast | TransformKind::Equalize | TransformKind::Identity => None,
            TransformKind::Brightness
            | TransformKind::Color
            | TransformKind::Contrast
            | TransformKind::Sharpness => Some((0.05, 0.95)),
            TransformKind::Posterize => Some((4.0, 8.0)),
            TransformKind::Rotate => Some((-30.0, 30.0)),
            TransformKind::ShearX
            | TransformKind::ShearY
            | TransformKind::TranslateX
            | TransformKind::TranslateY => Some((-0.3, 0.3)),
            TransformKind::Solarize => Some((0.0, 1.0)),
        }
    }

    /// Draws a magnitude uniformly from the range (integer-uniform for
    /// posterize).
    pub fn sample_magnitude(self, rng: &mut Rng) -> f64 {
        match (self, self.range()) {
            (TransformKind::Posterize, Some((lo, hi))) => {
                lo + rng.below((hi - lo) as u64 + 1) as f64
            }
            (_, Some((lo, hi))) => rng.range(lo, hi),
            (_, None) => 0.0,
        }
    }
}

impl fmt::Display for TransformKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TransformKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TransformKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown transform `{s}`")))
    }
}

/// Applies one table transform, validating the magnitude against its range.
pub fn apply_transform(img: &Image, kind: TransformKind, magnitude: f64) -> Result<Image> {
    if let Some((lo, hi)) = kind.range() {
        if !(lo..=hi).contains(&magnitude) {
            return Err(Error::MagnitudeOutOfRange {
                transform: kind.name(),
                value: magnitude,
                lo,
                hi,
            });
        }
    }
    let m = magnitude as f32;
    Ok(match kind {
        TransformKind::AutoContrast => autocontrast(img),
        TransformKind::Brightness => brightness(img, m),
        TransformKind::Color => color(img, m),
        TransformKind::Contrast => contrast(img, m),
        TransformKind::Equalize => equalize(img),
        TransformKind::Identity => img.clone(),
        TransformKind::Posterize => posterize(img, magnitude.round() as u32),
        TransformKind::Rotate => rotate(img, m),
        TransformKind::Sharpness => sharpness(img, m),
        TransformKind::ShearX => shear_x(img, m),
        TransformKind::ShearY => shear_y(img, m),
        TransformKind::Solarize => solarize(img, m),
        TransformKind::TranslateX => translate_x(img, m),
        TransformKind::TranslateY => translate_y(img, m),
    })
}

/// Knobs shared by the weak and strong pipelines.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    /// Reflect padding for the weak crop; `None` means ⌈H/8⌉.
    pub crop_pad: Option<usize>,
    /// CutOut square side; `None` means ⌊H/2⌋.
    pub cutout_side: Option<usize>,
    pub num_ops: usize,
    pub with_replacement: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            crop_pad: None,
            cutout_side: None,
            num_ops: 2,
            with_replacement: true,
        }
    }
}

impl AugmentConfig {
    pub fn crop_pad_for(&self, height: usize) -> usize {
        self.crop_pad.unwrap_or(height.div_ceil(8))
    }

    pub fn cutout_side_for(&self, height: usize) -> usize {
        self.cutout_side.unwrap_or(height / 2)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WeakParams {
    pub flip: bool,
    pub pad: usize,
    /// Crop offsets into the padded image, each in `0..=2·pad`.
    pub dy: usize,
    pub dx: usize,
}

impl WeakParams {
    /// No flip, centred crop.
    pub fn identity(pad: usize) -> Self {
        WeakParams {
            flip: false,
            pad,
            dy: pad,
            dx: pad,
        }
    }
}

pub fn sample_weak(rng: &mut Rng, height: usize, cfg: &AugmentConfig) -> WeakParams {
    let pad = cfg.crop_pad_for(height);
    let flip = rng.bernoulli(0.5);
    let dy = rng.index(2 * pad + 1);
    let dx = rng.index(2 * pad + 1);
    WeakParams { flip, pad, dy, dx }
}

#[inline]
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

/// Horizontal flip (optional) then a crop from the reflect-padded image.
pub fn apply_weak(img: &Image, p: &WeakParams) -> Image {
    let (h, w) = (img.height, img.width);
    let mut out = Image::filled(h, w, 0.0);
    for c in 0..CHANNELS {
        for y in 0..h {
            let sy = reflect(y as isize + p.dy as isize - p.pad as isize, h);
            for x in 0..w {
                let px = reflect(x as isize + p.dx as isize - p.pad as isize, w);
                let sx = if p.flip { w - 1 - px } else { px };
                out.set(c, y, x, img.at(c, sy, sx));
            }
        }
    }
    out
}

pub fn weak_augment(img: &Image, rng: &mut Rng, cfg: &AugmentConfig) -> Image {
    let p = sample_weak(rng, img.height, cfg);
    apply_weak(img, &p)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CutoutParams {
    pub cy: usize,
    pub cx: usize,
    pub side: usize,
}

pub fn sample_cutout(rng: &mut Rng, height: usize, width: usize, side: usize) -> CutoutParams {
    CutoutParams {
        cy: rng.index(height),
        cx: rng.index(width),
        side,
    }
}

/// Fills the clipped `side`×`side` square centred at `(cy, cx)` with 0.5.
pub fn apply_cutout(img: &Image, p: &CutoutParams) -> Image {
    let mut out = img.clone();
    if p.side == 0 {
        return out;
    }
    let y0 = p.cy.saturating_sub(p.side / 2);
    let x0 = p.cx.saturating_sub(p.side / 2);
    let y1 = (p.cy + p.side - p.side / 2).min(img.height);
    let x1 = (p.cx + p.side - p.side / 2).min(img.width);
    for c in 0..CHANNELS {
        for y in y0..y1 {
            for x in x0..x1 {
                out.set(c, y, x, 0.5);
            }
        }
    }
    out
}

pub fn cutout(img: &Image, rng: &mut Rng, cfg: &AugmentConfig) -> Image {
    let p = sample_cutout(rng, img.height, img.width, cfg.cutout_side_for(img.height));
    apply_cutout(img, &p)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StrongParams {
    pub ops: Vec<(TransformKind, f64)>,
    pub cutout: CutoutParams,
}

pub fn sample_strong(rng: &mut Rng, height: usize, width: usize, cfg: &AugmentConfig) -> StrongParams {
    let mut pool: Vec<TransformKind> = TransformKind::ALL.to_vec();
    let mut ops = Vec::with_capacity(cfg.num_ops);
    for _ in 0..cfg.num_ops {
        let kind = if cfg.with_replacement || pool.is_empty() {
            TransformKind::ALL[rng.index(TransformKind::ALL.len())]
        } else {
            pool.remove(rng.index(pool.len()))
        };
        ops.push((kind, kind.sample_magnitude(rng)));
    }
    let cutout = sample_cutout(rng, height, width, cfg.cutout_side_for(height));
    StrongParams { ops, cutout }
}

pub fn apply_strong(img: &Image, p: &StrongParams) -> Result<Image> {
    let mut out = img.clone();
    for &(kind, m) in &p.ops {
        out = apply_transform(&out, kind, m)?;
    }
    Ok(apply_cutout(&out, &p.cutout))
}

pub fn strong_augment(img: &Image, rng: &mut Rng, cfg: &AugmentConfig) -> Image {
    let p = sample_strong(rng, img.height, img.width, cfg);
    apply_strong(img, &p).expect("sampled magnitudes lie in range")
}

/// Lossless counterclockwise rotation by `quarter_turns · 90°`.
pub fn rotate90(img: &Image, quarter_turns: usize) -> Result<Image> {
    if img.height != img.width {
        return Err(Error::NonSquare {
            height: img.height,
            width: img.width,
        });
    }
    let n = img.height;
    let mut out = img.clone();
    for c in 0..CHANNELS {
        for y in 0..n {
            for x in 0..n {
                let (sy, sx) = match quarter_turns % 4 {
                    0 => (y, x),
                    1 => (x, n - 1 - y),
                    2 => (n - 1 - y, n - 1 - x),
                    _ => (n - 1 - x, y),
                };
                out.set(c, y, x, img.at(c, sy, sx));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_image(seed: u64, h: usize, w: usize) -> Image {
        let mut rng = Rng::new(seed);
        Image::new(h, w, (0..3 * h * w).map(|_| rng.uniform() as f32).collect()).unwrap()
    }

    fn single_pixel(h: usize, w: usize, y: usize, x: usize) -> Image {
        let mut img = Image::filled(h, w, 0.0);
        for c in 0..3 {
            img.set(c, y, x, 1.0);
        }
        img
    }

    fn lit_pixels(img: &Image) -> Vec<(usize, usize)> {
        let mut v = Vec::new();
        for y in 0..img.height() {
            for x in 0..img.width() {
                if img.at(0, y, x) > 0.5 {
                    v.push((y, x));
                }
            }
        }
        v
    }

    #[test]
    fn weak_identity_draws_leave_image_unchanged() {
        let img = test_image(1, 32, 32);
        let out = apply_weak(&img, &WeakParams::identity(4));
        assert_eq!(out.to_bits(), img.to_bits());
    }

    #[test]
    fn weak_on_constant_image_is_constant() {
        let img = Image::filled(32, 32, 0.3);
        let mut rng = Rng::new(5);
        for _ in 0..20 {
            let out = weak_augment(&img, &mut rng, &AugmentConfig::default());
            assert!(out.data().iter().all(|&v| v == 0.3));
        }
    }

    #[test]
    fn weak_flip_mirrors_columns() {
        let img = single_pixel(8, 8, 2, 1);
        let p = WeakParams { flip: true, ..WeakParams::identity(1) };
        assert_eq!(lit_pixels(&apply_weak(&img, &p)), vec![(2, 6)]);
    }

    #[test]
    fn reflect_padding_excludes_edge() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(-4, 5), 4);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(2, 5), 2);
    }

    #[test]
    fn default_crop_pad_and_cutout_side() {
        let cfg = AugmentConfig::default();
        assert_eq!(cfg.crop_pad_for(32), 4);
        assert_eq!(cfg.crop_pad_for(20), 3);
        assert_eq!(cfg.cutout_side_for(32), 16);
    }

    #[test]
    fn strong_identity_ops_and_empty_cutout_is_identity() {
        let img = test_image(2, 32, 32);
        let p = StrongParams {
            ops: vec![(TransformKind::Identity, 0.0), (TransformKind::Identity, 0.0)],
            cutout: CutoutParams { cy: 5, cx: 5, side: 0 },
        };
        assert_eq!(apply_strong(&img, &p).unwrap().to_bits(), img.to_bits());
    }

    #[test]
    fn posterize_8_and_solarize_1_are_identities() {
        let img = test_image(3, 16, 16);
        assert_eq!(apply_transform(&img, TransformKind::Posterize, 8.0).unwrap().to_bits(), img.to_bits());
        assert_eq!(apply_transform(&img, TransformKind::Solarize, 1.0).unwrap().to_bits(), img.to_bits());
    }

    #[test]
    fn geometric_zero_magnitudes_are_identities() {
        let img = test_image(4, 16, 16);
        for kind in [
            TransformKind::Rotate,
            TransformKind::ShearX,
            TransformKind::ShearY,
            TransformKind::TranslateX,
            TransformKind::TranslateY,
        ] {
            let out = apply_transform(&img, kind, 0.0).unwrap();
            assert_eq!(out.to_bits(), img.to_bits(), "{kind}");
        }
    }

    #[test]
    fn brightness_endpoints() {
        let img = test_image(5, 8, 8);
        assert!(brightness(&img, 0.0).data().iter().all(|&v| v == 0.0));
        let out = apply_transform(&img, TransformKind::Brightness, 0.05).unwrap();
        for (&o, &i) in out.data().iter().zip(img.data()) {
            assert_eq!(o, 0.05f32 * i);
        }
    }

    #[test]
    fn enhancement_factor_one_is_identity() {
        let img = test_image(6, 8, 8);
        for out in [color(&img, 1.0), contrast(&img, 1.0), sharpness(&img, 1.0)] {
            for (&o, &i) in out.data().iter().zip(img.data()) {
                assert!((o - i).abs() < 1e-6);
            }
        }
        let gray = color(&img, 0.0);
        let n = 64;
        assert_eq!(&gray.data()[..n], &gray.data()[n..2 * n]);
    }

    #[test]
    fn translate_x_quarter_shifts_by_eight() {
        // brute force: the only lit pixel must move from column 10 to 18
        let img = single_pixel(32, 32, 7, 10);
        let out = apply_transform(&img, TransformKind::TranslateX, 0.25).unwrap();
        assert_eq!(lit_pixels(&out), vec![(7, 18)]);
        let out = apply_transform(&img, TransformKind::TranslateY, -0.125).unwrap();
        assert_eq!(lit_pixels(&out), vec![(3, 10)]);
    }

    #[test]
    fn out_of_range_magnitude_names_transform() {
        let img = test_image(7, 8, 8);
        let err = apply_transform(&img, TransformKind::Rotate, 45.0).unwrap_err();
        assert!(err.to_string().contains("rotate"), "{err}");
        assert!(apply_transform(&img, TransformKind::Posterize, 3.0).is_err());
    }

    #[test]
    fn table_ranges() {
        use TransformKind::*;
        assert_eq!(Rotate.range(), Some((-30.0, 30.0)));
        assert_eq!(Posterize.range(), Some((4.0, 8.0)));
        assert_eq!(ShearX.range(), Some((-0.3, 0.3)));
        assert_eq!(TranslateY.range(), Some((-0.3, 0.3)));
        assert_eq!(Solarize.range(), Some((0.0, 1.0)));
        for k in [Brightness, Color, Contrast, Sharpness] {
            assert_eq!(k.range(), Some((0.05, 0.95)));
        }
        assert_eq!(TransformKind::ALL.len(), 14);
    }

    #[test]
    fn posterize_magnitudes_are_integers() {
        let mut rng = Rng::new(11);
        let mut seen = [false; 9];
        for _ in 0..500 {
            let m = TransformKind::Posterize.sample_magnitude(&mut rng);
            assert_eq!(m.fract(), 0.0);
            seen[m as usize] = true;
        }
        assert!(seen[4..=8].iter().all(|&s| s));
    }

    #[test]
    fn cutout_square_of_half_side() {
        let img = Image::filled(32, 32, 0.0);
        let out = apply_cutout(&img, &CutoutParams { cy: 16, cx: 16, side: 16 });
        let filled = out.data()[..1024].iter().filter(|&&v| v == 0.5).count();
        assert_eq!(filled, 256);
        assert_eq!(out.at(0, 8, 8), 0.5);
        assert_eq!(out.at(0, 23, 23), 0.5);
        assert_eq!(out.at(0, 24, 24), 0.0);
    }

    #[test]
    fn cutout_clips_at_corner() {
        let img = Image::filled(32, 32, 0.0);
        let out = apply_cutout(&img, &CutoutParams { cy: 0, cx: 31, side: 16 });
        let filled = out.data()[..1024].iter().filter(|&&v| v == 0.5).count();
        assert_eq!(filled, 8 * 9);
        assert_eq!(out.at(0, 31, 0), 0.0);
    }

    #[test]
    fn cutout_area_bound() {
        let img = Image::filled(32, 32, 0.0);
        let mut rng = Rng::new(12);
        for _ in 0..200 {
            let out = cutout(&img, &mut rng, &AugmentConfig::default());
            let filled = out.data()[..1024].iter().filter(|&&v| v == 0.5).count();
            assert!(filled <= 256);
        }
    }

    #[test]
    fn rotate90_corner_and_group_order() {
        let img = single_pixel(8, 8, 0, 0);
        let r = rotate90(&img, 1).unwrap();
        assert_eq!(lit_pixels(&r), vec![(7, 0)]);

        let img = test_image(8, 8, 8);
        assert_eq!(rotate90(&img, 0).unwrap(), img);
        let mut x = img.clone();
        for _ in 0..4 {
            x = rotate90(&x, 1).unwrap();
        }
        assert_eq!(x, img);
        assert_eq!(rotate90(&rotate90(&img, 1).unwrap(), 1).unwrap(), rotate90(&img, 2).unwrap());
        assert!(matches!(
            rotate90(&Image::filled(4, 6, 0.0), 1),
            Err(Error::NonSquare { .. })
        ));
    }

    #[test]
    fn rotate90_matches_brute_force_permutation() {
        // oracle: rotating (y, x) counterclockwise by 90° sends it to (n-1-x, y)
        let n = 6;
        let img = test_image(9, n, n);
        let out = rotate90(&img, 1).unwrap();
        for c in 0..3 {
            for y in 0..n {
                for x in 0..n {
                    assert_eq!(out.at(c, n - 1 - x, y), img.at(c, y, x));
                }
            }
        }
    }

    #[test]
    fn small_rotation_agrees_in_direction_with_rotate90() {
        // a pixel right of centre should move up under counterclockwise rotation
        let img = single_pixel(33, 33, 16, 28);
        let r = rotate(&img, 30.0);
        let (mut best, mut at) = (0.0, (0, 0));
        for y in 0..33 {
            for x in 0..33 {
                if r.at(0, y, x) > best {
                    best = r.at(0, y, x);
                    at = (y, x);
                }
            }
        }
        assert!(at.0 < 16, "{at:?}");
    }

    #[test]
    fn equalize_and_autocontrast_stay_in_range() {
        let mut img = test_image(10, 16, 16);
        img.data_mut().iter_mut().for_each(|v| *v = 0.2 + 0.3 * *v);
        for out in [equalize(&img), autocontrast(&img)] {
            assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        let ac = autocontrast(&img);
        let mx = ac.data()[..256].iter().cloned().fold(0.0f32, f32::max);
        let mn = ac.data()[..256].iter().cloned().fold(1.0f32, f32::min);
        assert_eq!((mn, mx), (0.0, 1.0));
    }

    #[test]
    fn strong_replay_is_bit_identical() {
        let img = test_image(13, 32, 32);
        let cfg = AugmentConfig::default();
        let a = strong_augment(&img, &mut Rng::new(99), &cfg);
        let b = strong_augment(&img, &mut Rng::new(99), &cfg);
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn without_replacement_draws_distinct_ops() {
        let cfg = AugmentConfig { with_replacement: false, ..AugmentConfig::default() };
        let mut rng = Rng::new(14);
        for _ in 0..200 {
            let p = sample_strong(&mut rng, 32, 32, &cfg);
            assert_ne!(p.ops[0].0, p.ops[1].0);
        }
    }

    #[test]
    fn ppm_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ppm");
        let mut img = Image::filled(2, 3, 0.0);
        img.set(0, 0, 0, 1.0);
        img.write_ppm(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let header = b"P6\n3 2\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(bytes.len(), header.len() + 18);
        assert_eq!(&bytes[header.len()..header.len() + 3], &[255, 0, 0]);
    }
}
