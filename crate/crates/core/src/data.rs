//! Datasets: the CIFAR-10 binary layout and a procedural shape generator.

use std::path::Path;

use crate::augment::{Image, CHANNELS};
use crate::error::{Error, Result};
use crate::rng::{tag, Rng};

const CIFAR_SIDE: usize = 32;
const CIFAR_RECORD: usize = 1 + CHANNELS * CIFAR_SIDE * CIFAR_SIDE;
const CIFAR_CLASSES: usize = 10;

#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub class_names: Option<Vec<String>>,
}

impl Dataset {
    pub fn new(images: Vec<Image>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::Invalid(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange { label: l, classes: num_classes });
        }
        Ok(Dataset {
            images,
            labels,
            num_classes,
            class_names: None,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image_size(&self) -> Option<usize> {
        self.images.first().map(Image::height)
    }

    /// Subset by indices, in the given order.
    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            class_names: self.class_names.clone(),
        }
    }

    pub fn image_refs(&self) -> Vec<&Image> {
        self.images.iter().collect()
    }
}

/// Parses CIFAR-10 binary records: one label byte then the R, G and B
/// planes of a 32×32 image.
pub fn parse_cifar_binary(path: &Path, bytes: &[u8]) -> Result<Dataset> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::format(
            path,
            format!("length {} is not a multiple of the {CIFAR_RECORD}-byte record", bytes.len()),
        ));
    }
    let mut images = Vec::with_capacity(bytes.len() / CIFAR_RECORD);
    let mut labels = Vec::with_capacity(images.capacity());
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = rec[0] as usize;
        if label >= CIFAR_CLASSES {
            return Err(Error::format(path, format!("record {i}: label {label} >= {CIFAR_CLASSES}")));
        }
        let data = rec[1..].iter().map(|&b| b as f32 / 255.0).collect();
        images.push(Image::new(CIFAR_SIDE, CIFAR_SIDE, data)?);
        labels.push(label);
    }
    Dataset::new(images, labels, CIFAR_CLASSES)
}

pub fn read_cifar_binary(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_cifar_binary(path, &bytes)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Square,
    Circle,
    Triangle,
    Cross,
    Ring,
    Diamond,
    Bar,
    Saltire,
}

impl Shape {
    pub const ALL: [Shape; 8] = [
        Shape::Square,
        Shape::Circle,
        Shape::Triangle,
        Shape::Cross,
        Shape::Ring,
        Shape::Diamond,
        Shape::Bar,
        Shape::Saltire,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
            Shape::Triangle => "triangle",
            Shape::Cross => "cross",
            Shape::Ring => "ring",
            Shape::Diamond => "diamond",
            Shape::Bar => "bar",
            Shape::Saltire => "saltire",
        }
    }

    /// Membership in shape-local coordinates (unit radius, y down).
    fn contains(self, u: f64, v: f64) -> bool {
        let cross = |u: f64, v: f64| (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0);
        match self {
            Shape::Square => u.abs().max(v.abs()) <= 0.8,
            Shape::Circle => u * u + v * v <= 1.0,
            Shape::Triangle => (-1.0..=0.8).contains(&v) && u.abs() <= (v + 1.0) / 1.8,
            Shape::Cross => cross(u, v),
            Shape::Ring => (0.3..=1.0).contains(&(u * u + v * v)),
            Shape::Diamond => u.abs() + v.abs() <= 1.0,
            Shape::Bar => u.abs() <= 1.0 && v.abs() <= 0.35,
            Shape::Saltire => {
                let s = std::f64::consts::FRAC_1_SQRT_2;
                cross(s * (u + v), s * (v - u))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub image_size: usize,
    /// Maximum centre offset as a fraction of the image side.
    pub position_jitter: f64,
    /// Shape radius range as fractions of the image side.
    pub scale_range: (f64, f64),
    /// Fraction of the hue circle foreground colours are drawn from.
    pub hue_jitter: f64,
    /// Amplitude of uniform background noise.
    pub noise: f64,
    /// Drop shadow offset (down and right) as a fraction of the radius; gives
    /// every image an upright orientation.
    pub shadow: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_classes: 4,
            samples_per_class: 600,
            image_size: 32,
            position_jitter: 0.15,
            scale_range: (0.28, 0.36),
            hue_jitter: 0.1,
            noise: 0.05,
            shadow: 0.25,
            seed: 0,
        }
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor() as usize % 6;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn render(shape: Shape, spec: &SyntheticSpec, rng: &mut Rng) -> Image {
    const SUB: usize = 3;
    let s = spec.image_size;
    let side = s as f64;
    let cx = side / 2.0 + rng.range(-1.0, 1.0) * spec.position_jitter * side;
    let cy = side / 2.0 + rng.range(-1.0, 1.0) * spec.position_jitter * side;
    let radius = rng.range(spec.scale_range.0, spec.scale_range.1) * side;
    let fg = hsv_to_rgb(rng.uniform() * spec.hue_jitter, rng.range(0.5, 1.0), rng.range(0.6, 1.0));
    let bg_level = rng.range(0.05, 0.45);
    let mut img = Image::filled(s, s, 0.0);
    for y in 0..s {
        for x in 0..s {
            let (mut hits, mut shade) = (0, 0);
            for sy in 0..SUB {
                for sx in 0..SUB {
                    let px = x as f64 + (sx as f64 + 0.5) / SUB as f64;
                    let py = y as f64 + (sy as f64 + 0.5) / SUB as f64;
                    let (u, v) = ((px - cx) / radius, (py - cy) / radius);
                    if shape.contains(u, v) {
                        hits += 1;
                    } else if spec.shadow > 0.0 && shape.contains(u - spec.shadow, v - spec.shadow) {
                        shade += 1;
                    }
                }
            }
            let n = (SUB * SUB) as f64;
            let cover = hits as f64 / n;
            let dim = 1.0 - 0.6 * shade as f64 / n;
            for (c, &f) in fg.iter().enumerate() {
                let bg = (bg_level + spec.noise * rng.range(-1.0, 1.0)) * dim;
                let v = cover * f + (1.0 - cover) * bg;
                img.set(c, y, x, v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    img
}

/// Balanced procedural dataset; sample `i` has class `i % num_classes` and
/// is drawn from its own substream.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.num_classes < 2 || spec.num_classes > Shape::ALL.len() {
        return Err(Error::Invalid(format!(
            "synthetic data supports 2..={} classes, got {}",
            Shape::ALL.len(),
            spec.num_classes
        )));
    }
    if spec.image_size < 8 {
        return Err(Error::Invalid(format!("image size {} too small", spec.image_size)));
    }
    let (lo, hi) = spec.scale_range;
    if !(lo > 0.0 && lo <= hi) {
        return Err(Error::Invalid(format!("bad scale range ({lo}, {hi})")));
    }
    let n = spec.num_classes * spec.samples_per_class;
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % spec.num_classes;
        let mut rng = Rng::substream(spec.seed, i as u64, tag::DATA);
        images.push(render(Shape::ALL[class], spec, &mut rng));
        labels.push(class);
    }
    let mut ds = Dataset::new(images, labels, spec.num_classes)?;
    ds.class_names = Some(
        Shape::ALL[..spec.num_classes]
            .iter()
            .map(|s| s.name().to_string())
            .collect(),
    );
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_record() {
        let mut bytes = vec![0u8; CIFAR_RECORD];
        let ds = parse_cifar_binary(Path::new("x"), &bytes).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.labels, vec![0]);
        assert!(ds.images[0].data().iter().all(|&v| v == 0.0));

        bytes[0] = 3;
        bytes[1] = 255;
        bytes[1 + 1024] = 51;
        let ds = parse_cifar_binary(Path::new("x"), &bytes).unwrap();
        assert_eq!(ds.labels, vec![3]);
        assert_eq!(ds.images[0].at(0, 0, 0), 1.0);
        assert_eq!(ds.images[0].at(1, 0, 0), 0.2);
    }

    #[test]
    fn truncated_and_bad_labels_rejected() {
        let bytes = vec![0u8; CIFAR_RECORD + 5];
        assert!(matches!(parse_cifar_binary(Path::new("t"), &bytes), Err(Error::Format { .. })));
        let mut bytes = vec![0u8; CIFAR_RECORD];
        bytes[0] = 10;
        assert!(parse_cifar_binary(Path::new("t"), &bytes).is_err());
    }

    #[test]
    fn synthetic_is_deterministic_and_balanced() {
        let spec = SyntheticSpec { samples_per_class: 600, seed: 1, ..SyntheticSpec::default() };
        let a = generate_synthetic(&spec).unwrap();
        assert_eq!(a.len(), 2400);
        for c in 0..4 {
            assert_eq!(a.labels.iter().filter(|&&l| l == c).count(), 600);
        }
        let small = SyntheticSpec { samples_per_class: 5, ..spec };
        let b = generate_synthetic(&small).unwrap();
        let c = generate_synthetic(&small).unwrap();
        for (x, y) in b.images.iter().zip(&c.images) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        assert!(b.images.iter().all(|im| im.data().iter().all(|v| (0.0..=1.0).contains(v))));
    }

    #[test]
    fn unsupported_class_count() {
        let spec = SyntheticSpec { num_classes: 9, ..SyntheticSpec::default() };
        assert!(generate_synthetic(&spec).is_err());
    }

    #[test]
    fn shapes_are_distinct_at_origin() {
        assert!(Shape::Square.contains(0.75, 0.75));
        assert!(!Shape::Circle.contains(0.75, 0.75));
        assert!(!Shape::Ring.contains(0.0, 0.0));
        assert!(Shape::Cross.contains(0.0, 0.9) && !Shape::Saltire.contains(0.0, 0.9));
    }
}
