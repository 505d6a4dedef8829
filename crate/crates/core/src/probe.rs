//! Analysis of frozen encoders: a linear probe that detects whether a
//! transform was applied, cosine-distance statistics between augmented
//! views, and feature export.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use crate::augment::{
    brightness, scale, strong_augment, translate_x, weak_augment, AugmentConfig, Image,
};
use crate::error::{Error, Result};
use crate::model::ModelState;
use crate::rng::{tag, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeTransform {
    Identity,
    Translation,
    Scaling,
    Rotation,
    ColorJitter,
    /// Weakly vs strongly augmented views of the same image.
    StrongVsWeak,
}

impl ProbeTransform {
    pub const ALL: [ProbeTransform; 6] = [
        ProbeTransform::Identity,
        ProbeTransform::Translation,
        ProbeTransform::Scaling,
        ProbeTransform::Rotation,
        ProbeTransform::ColorJitter,
        ProbeTransform::StrongVsWeak,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ProbeTransform::Identity => "identity",
            ProbeTransform::Translation => "translation",
            ProbeTransform::Scaling => "scaling",
            ProbeTransform::Rotation => "rotation",
            ProbeTransform::ColorJitter => "color_jitter",
            ProbeTransform::StrongVsWeak => "strong-vs-weak",
        }
    }
}

impl fmt::Display for ProbeTransform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ProbeTransform {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ProbeTransform::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown probe transform `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    pub transform: ProbeTransform,
    /// Fraction of images whose pair goes to the probe's training set.
    pub train_fraction: f64,
    pub lr: f64,
    pub epochs: usize,
    pub l2: f64,
    pub seed: u64,
    pub translate_px: f64,
    pub scale: f64,
    pub rotation_deg: f64,
    pub brightness: f64,
    pub augment: AugmentConfig,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            transform: ProbeTransform::StrongVsWeak,
            train_fraction: 0.1,
            lr: 0.001,
            epochs: 50,
            l2: 1e-4,
            seed: 0,
            translate_px: 4.0,
            scale: 0.8,
            rotation_deg: 15.0,
            brightness: 0.5,
            augment: AugmentConfig::default(),
        }
    }
}

/// The (class 0, class 1) pair of views the probe must tell apart.
fn probe_pair(img: &Image, i: usize, cfg: &ProbeConfig) -> Result<(Image, Image)> {
    let mut rng = Rng::substream(cfg.seed, i as u64, tag::PROBE);
    Ok(match cfg.transform {
        ProbeTransform::Identity => (img.clone(), img.clone()),
        ProbeTransform::Translation => {
            (img.clone(), translate_x(img, (cfg.translate_px / img.width() as f64) as f32))
        }
        ProbeTransform::Scaling => (img.clone(), scale(img, cfg.scale as f32)),
        ProbeTransform::Rotation => (img.clone(), crate::augment::rotate(img, cfg.rotation_deg as f32)),
        ProbeTransform::ColorJitter => (img.clone(), brightness(img, cfg.brightness as f32)),
        ProbeTransform::StrongVsWeak => {
            let w = weak_augment(img, &mut rng, &cfg.augment);
            let s = strong_augment(img, &mut rng, &cfg.augment);
            (w, s)
        }
    })
}

/// Linear hinge-loss classifier trained by plain SGD.
struct LinearSvm {
    w: Vec<f64>,
    b: f64,
}

impl LinearSvm {
    fn fit(x: &[Vec<f64>], y: &[f64], cfg: &ProbeConfig) -> Self {
        let d = x.first().map_or(0, Vec::len);
        let mut svm = LinearSvm { w: vec![0.0; d], b: 0.0 };
        let mut order: Vec<usize> = (0..x.len()).collect();
        let mut rng = Rng::substream(cfg.seed, u64::MAX, tag::PROBE);
        for _ in 0..cfg.epochs {
            rng.shuffle(&mut order);
            for &i in &order {
                let margin = y[i] * svm.score(&x[i]);
                for (wj, &xj) in svm.w.iter_mut().zip(&x[i]) {
                    let mut g = cfg.l2 * *wj;
                    if margin < 1.0 {
                        g -= y[i] * xj;
                    }
                    *wj -= cfg.lr * g;
                }
                if margin < 1.0 {
                    svm.b += cfg.lr * y[i];
                }
            }
        }
        svm
    }

    fn score(&self, x: &[f64]) -> f64 {
        self.w.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.b
    }
}

fn pooled_features(state: &ModelState, images: &[Image]) -> Result<Vec<Vec<f64>>> {
    let refs: Vec<&Image> = images.iter().collect();
    let inf = state.infer(&refs)?;
    let d = state.config().feat_channels();
    Ok(inf
        .feat_b
        .chunks(d)
        .map(|r| r.iter().map(|&v| v as f64).collect())
        .collect())
}

/// Held-out error of a linear probe separating original from transformed
/// pooled features. The encoder is only read.
pub fn equivariance_probe(state: &ModelState, images: &[&Image], cfg: &ProbeConfig) -> Result<f64> {
    if !(cfg.lr > 0.0) || cfg.epochs == 0 {
        return Err(Error::Invalid("probe needs lr > 0 and epochs >= 1".into()));
    }
    if !(cfg.train_fraction > 0.0 && cfg.train_fraction < 1.0) {
        return Err(Error::Invalid("probe train_fraction must lie in (0, 1)".into()));
    }
    let n = images.len();
    let n_train = ((n as f64 * cfg.train_fraction).round() as usize).clamp(1, n.saturating_sub(1));
    if n < 2 {
        return Err(Error::DegenerateProbe(format!("need at least 2 images, got {n}")));
    }
    let mut views = Vec::with_capacity(2 * n);
    for (i, img) in images.iter().enumerate() {
        let (a, b) = probe_pair(img, i, cfg)?;
        views.push(a);
        views.push(b);
    }
    let feats = pooled_features(state, &views)?;
    let d = feats[0].len();
    if feats.iter().all(|f| f == &feats[0]) {
        return Err(Error::DegenerateProbe(format!(
            "all {} feature vectors are identical; the encoder output carries no signal",
            feats.len()
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    Rng::substream(cfg.seed, n as u64, tag::PROBE).shuffle(&mut order);
    let (train_img, test_img) = order.split_at(n_train);
    let rows = |imgs: &[usize]| -> (Vec<usize>, Vec<f64>) {
        imgs.iter()
            .flat_map(|&i| [(2 * i, -1.0), (2 * i + 1, 1.0)])
            .unzip()
    };
    let (tr, ytr) = rows(train_img);
    let (te, yte) = rows(test_img);

    let mut mean = vec![0.0; d];
    for &r in &tr {
        mean.iter_mut().zip(&feats[r]).for_each(|(m, v)| *m += v / tr.len() as f64);
    }
    let mut sd = vec![0.0; d];
    for &r in &tr {
        sd.iter_mut()
            .zip(feats[r].iter().zip(&mean))
            .for_each(|(s, (v, m))| *s += (v - m) * (v - m) / tr.len() as f64);
    }
    let sd: Vec<f64> = sd.iter().map(|v| if *v > 0.0 { v.sqrt() } else { 1.0 }).collect();
    let norm = |r: usize| -> Vec<f64> {
        feats[r].iter().zip(&mean).zip(&sd).map(|((v, m), s)| (v - m) / s).collect()
    };
    let xtr: Vec<Vec<f64>> = tr.iter().map(|&r| norm(r)).collect();
    let svm = LinearSvm::fit(&xtr, &ytr, cfg);
    let wrong = te
        .iter()
        .zip(&yte)
        .filter(|(&r, &y)| {
            let pred = if svm.score(&norm(r)) > 0.0 { 1.0 } else { -1.0 };
            pred != y
        })
        .count();
    Ok(wrong as f64 / te.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    fn of(xs: &[f64]) -> Self {
        let n = xs.len().max(1) as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        MeanStd { mean, std: var.sqrt() }
    }
}

impl fmt::Display for MeanStd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.4} ± {:.4}", self.mean, self.std)
    }
}

/// Cosine distances between pooled features of augmented views.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeatureDistanceStats {
    pub weak_orig: MeanStd,
    pub strong_orig: MeanStd,
    pub weak_strong: MeanStd,
}

/// `1 − cos(a, b)`; a zero vector counts as orthogonal to everything.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        1.0
    } else {
        (1.0 - dot / (na * nb)).clamp(0.0, 2.0)
    }
}

/// Mean ± std cosine distance for the (weak, orig), (strong, orig) and
/// (weak, strong) pairs over the first `n` images.
pub fn feature_distance_stats(
    state: &ModelState,
    images: &[&Image],
    n: usize,
    seed: u64,
    augment: &AugmentConfig,
) -> Result<FeatureDistanceStats> {
    if n > images.len() {
        return Err(Error::Invalid(format!("n = {n} exceeds {} images", images.len())));
    }
    let mut views = Vec::with_capacity(3 * n);
    for (i, img) in images[..n].iter().enumerate() {
        let mut rng = Rng::substream(seed, i as u64, tag::PROBE);
        views.push((*img).clone());
        views.push(weak_augment(img, &mut rng, augment));
        views.push(strong_augment(img, &mut rng, augment));
    }
    let f = pooled_features(state, &views)?;
    let mut wo = Vec::with_capacity(n);
    let mut so = Vec::with_capacity(n);
    let mut ws = Vec::with_capacity(n);
    for t in f.chunks(3) {
        wo.push(cosine_distance(&t[1], &t[0]));
        so.push(cosine_distance(&t[2], &t[0]));
        ws.push(cosine_distance(&t[1], &t[2]));
    }
    Ok(FeatureDistanceStats {
        weak_orig: MeanStd::of(&wo),
        strong_orig: MeanStd::of(&so),
        weak_strong: MeanStd::of(&ws),
    })
}

/// Writes pooled features as: "FEAT", u32 count, u32 dim, count×dim f32,
/// then count u32 labels (all little-endian).
pub fn export_features(state: &ModelState, images: &[&Image], labels: &[usize], path: &Path) -> Result<()> {
    if images.len() != labels.len() {
        return Err(Error::Invalid(format!("{} images but {} labels", images.len(), labels.len())));
    }
    let dim = state.config().feat_channels();
    let feats = if images.is_empty() { Vec::new() } else { state.infer(images)?.feat_b };
    write_features(path, dim, &feats, labels)
}

pub fn write_features(path: &Path, dim: usize, feats: &[f32], labels: &[usize]) -> Result<()> {
    let mut buf = Vec::with_capacity(12 + 4 * feats.len() + 4 * labels.len());
    buf.extend_from_slice(b"FEAT");
    buf.extend_from_slice(&(labels.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(dim as u32).to_le_bytes());
    feats.iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes()));
    labels.iter().for_each(|&l| buf.extend_from_slice(&(l as u32).to_le_bytes()));
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&buf))
        .map_err(|e| Error::io(path, e))
}

/// Reads a FEAT file back into (dim, row-major features, labels).
pub fn read_features(path: &Path) -> Result<(usize, Vec<f32>, Vec<usize>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    if bytes.len() < 12 || &bytes[..4] != b"FEAT" {
        return Err(Error::format(path, "not a FEAT file"));
    }
    let (count, dim) = (word(4) as usize, word(8) as usize);
    if bytes.len() != 12 + 4 * count * dim + 4 * count {
        return Err(Error::format(path, "size does not match header"));
    }
    let feats = (0..count * dim).map(|k| f32::from_bits(word(12 + 4 * k))).collect();
    let base = 12 + 4 * count * dim;
    let labels = (0..count).map(|k| word(base + 4 * k) as usize).collect();
    Ok((dim, feats, labels))
}

/// Appends `model_tag,transform,probe_error`, writing a header to new files.
pub fn append_probe_result(path: &Path, model_tag: &str, transform: ProbeTransform, error: f64) -> Result<()> {
    let fresh = !path.exists();
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut s = String::new();
    if fresh {
        s.push_str("model_tag,transform,probe_error\n");
    }
    s.push_str(&format!("{model_tag},{transform},{error}\n"));
    f.write_all(s.as_bytes()).map_err(|e| Error::io(path, e))
}
