//! Dataset container, synthetic blob generator, training-time
//! augmentation, and the data-access ledger that audits the no-exemplar
//! rule.
//!
//! On disk a dataset is `CEATDS1\0`, a little-endian header
//! {count: u32, height: u16, width: u16, channels: u8, classes: u16},
//! `count` images of channel-major u8 pixels, then `count` u16 labels.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Element, Tensor};

pub const MAGIC: &[u8; 8] = b"CEATDS1\0";

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub num_classes: usize,
    pixels: Vec<u8>,
    labels: Vec<usize>,
    per_class: Vec<Vec<usize>>,
}

impl Dataset {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        num_classes: usize,
        pixels: Vec<u8>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 || num_classes == 0 {
            return Err(Error::Dataset("zero dimension".into()));
        }
        let image_dim = height * width * channels;
        if labels.is_empty() || pixels.len() != labels.len() * image_dim {
            return Err(Error::Dataset(format!(
                "{} pixels for {} images of {image_dim}",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Dataset(format!("label {bad} >= {num_classes} classes")));
        }
        let mut per_class = vec![Vec::new(); num_classes];
        for (i, &y) in labels.iter().enumerate() {
            per_class[y].push(i);
        }
        Ok(Dataset { height, width, channels, num_classes, pixels, labels, per_class })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_dim(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn indices_of_class(&self, class: usize) -> &[usize] {
        &self.per_class[class]
    }

    /// Rows of pixel values scaled to [0,1], one image per row.
    pub fn image_rows<T: Element>(&self, indices: &[usize]) -> Result<Tensor<T>> {
        if indices.is_empty() {
            return Err(Error::Dataset("empty index list".into()));
        }
        let dim = self.image_dim();
        let mut data = Vec::with_capacity(indices.len() * dim);
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Dataset(format!("index {i} out of {}", self.len())));
            }
            data.extend(
                self.pixels[i * dim..(i + 1) * dim]
                    .iter()
                    .map(|&p| T::from_f64(p as f64 / 255.0)),
            );
        }
        Tensor::from_vec(vec![indices.len(), dim], data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if self.len() > u32::MAX as usize
            || self.height > u16::MAX as usize
            || self.width > u16::MAX as usize
            || self.channels > u8::MAX as usize
            || self.num_classes > u16::MAX as usize
        {
            return Err(Error::Dataset("dimensions exceed header field widths".into()));
        }
        let mut buf = Vec::with_capacity(17 + self.pixels.len() + 2 * self.len());
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(self.len() as u32).to_le_bytes());
        buf.extend_from_slice(&(self.height as u16).to_le_bytes());
        buf.extend_from_slice(&(self.width as u16).to_le_bytes());
        buf.push(self.channels as u8);
        buf.extend_from_slice(&(self.num_classes as u16).to_le_bytes());
        buf.extend_from_slice(&self.pixels);
        for &y in &self.labels {
            buf.extend_from_slice(&(y as u16).to_le_bytes());
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        if buf.len() < 19 || &buf[..8] != MAGIC {
            return Err(Error::Dataset(format!("{}: not a dataset file", path.display())));
        }
        let count = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
        let height = u16::from_le_bytes(buf[12..14].try_into().unwrap()) as usize;
        let width = u16::from_le_bytes(buf[14..16].try_into().unwrap()) as usize;
        let channels = buf[16] as usize;
        let num_classes = u16::from_le_bytes(buf[17..19].try_into().unwrap()) as usize;
        let image_dim = height * width * channels;
        let expect = 19 + count * image_dim + 2 * count;
        if buf.len() != expect {
            return Err(Error::Dataset(format!(
                "{}: payload is {} bytes, header implies {expect}",
                path.display(),
                buf.len()
            )));
        }
        let pixels = buf[19..19 + count * image_dim].to_vec();
        let labels: Vec<usize> = buf[19 + count * image_dim..]
            .chunks_exact(2)
            .map(|b| u16::from_le_bytes([b[0], b[1]]) as usize)
            .collect();
        Dataset::new(height, width, channels, num_classes, pixels, labels)
    }
}

/// Parameters for the class-conditional blob generator. Templates depend
/// only on `template_seed`, so train and test splits built with
/// different `noise_seed`s share class identity.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub samples_per_class: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub noise_sigma: f64,
    pub template_seed: u64,
    pub noise_seed: u64,
}

fn class_template(spec: &SyntheticSpec, class: usize) -> Vec<f64> {
    let mut rng = rng::stream(spec.template_seed, class, "template");
    let (h, w, c) = (spec.height, spec.width, spec.channels);
    let mut img = vec![0.12f64; h * w * c];
    // each class gets a strong bump at its own position on a ring, so
    // class means stay separated no matter what the secondary bumps do
    let angle = std::f64::consts::TAU * class as f64 / spec.classes.max(1) as f64
        + rng.random_range(-0.1..0.1);
    let radius = rng.random_range(0.26..0.32) * w.min(h) as f64;
    let add_bump = |img: &mut [f64], ch: usize, cx: f64, cy: f64, sigma: f64, amp: f64| {
        for y in 0..h {
            for x in 0..w {
                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                img[ch * h * w + y * w + x] += amp * (-d2 / (2.0 * sigma * sigma)).exp();
            }
        }
    };
    for ch in 0..c {
        let cx = w as f64 / 2.0 + radius * angle.cos();
        let cy = h as f64 / 2.0 + radius * angle.sin();
        let sigma = rng.random_range(0.10..0.16) * w.max(h) as f64;
        add_bump(&mut img, ch, cx, cy, sigma, rng.random_range(0.65..0.9));
        for _ in 0..2 {
            let cx = rng.random_range(0.15..0.85) * w as f64;
            let cy = rng.random_range(0.15..0.85) * h as f64;
            let sigma = rng.random_range(0.08..0.18) * w.max(h) as f64;
            add_bump(&mut img, ch, cx, cy, sigma, rng.random_range(0.2..0.45));
        }
    }
    img
}

/// Deterministic blob dataset: per class a fixed template of Gaussian
/// bumps, per sample a small integer translation plus pixel noise.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.height == 0 || spec.height > 64 || spec.width == 0 || spec.width > 64 {
        return Err(Error::Dataset(format!("{}x{} outside supported sizes", spec.height, spec.width)));
    }
    if spec.classes == 0 || spec.samples_per_class == 0 || spec.channels == 0 {
        return Err(Error::Dataset("empty synthetic spec".into()));
    }
    if !(spec.noise_sigma >= 0.0 && spec.noise_sigma < 1.0) {
        return Err(Error::Dataset(format!("noise sigma {}", spec.noise_sigma)));
    }
    let (h, w, c) = (spec.height, spec.width, spec.channels);
    let normal = Normal::new(0.0, spec.noise_sigma)
        .map_err(|e| Error::Dataset(format!("noise distribution: {e}")))?;
    let mut pixels = Vec::with_capacity(spec.classes * spec.samples_per_class * h * w * c);
    let mut labels = Vec::with_capacity(spec.classes * spec.samples_per_class);
    for class in 0..spec.classes {
        let template = class_template(spec, class);
        let mut noise = rng::stream(spec.noise_seed, class, "sample-noise");
        for _ in 0..spec.samples_per_class {
            let dx = noise.random_range(-1i64..=1);
            let dy = noise.random_range(-1i64..=1);
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let sx = x as i64 - dx;
                        let sy = y as i64 - dy;
                        let base = if (0..w as i64).contains(&sx) && (0..h as i64).contains(&sy) {
                            template[ch * h * w + sy as usize * w + sx as usize]
                        } else {
                            0.0
                        };
                        let v = (base + normal.sample(&mut noise)).clamp(0.0, 1.0);
                        pixels.push((v * 255.0).round() as u8);
                    }
                }
            }
            labels.push(class);
        }
    }
    Dataset::new(h, w, c, spec.classes, pixels, labels)
}

/// One augmented view per row: zero-pad 4 pixels on every side, crop
/// back at a random offset, then flip horizontally with probability 1/2.
pub fn augment_batch<T: Element>(
    images: &Tensor<T>,
    height: usize,
    width: usize,
    channels: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<T>> {
    const PAD: usize = 4;
    let dim = height * width * channels;
    if images.cols() != dim {
        return Err(Error::shape(
            "augment_batch",
            format!("{} columns vs {height}x{width}x{channels}", images.cols()),
        ));
    }
    let n = images.rows();
    let mut out = Vec::with_capacity(n * dim);
    for i in 0..n {
        let src = images.row_slice(i);
        let dy = rng.random_range(0..=2 * PAD) as i64 - PAD as i64;
        let dx = rng.random_range(0..=2 * PAD) as i64 - PAD as i64;
        let flip = rng.random_range(0..2u8) == 1;
        for ch in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    let tx = if flip { width - 1 - x } else { x };
                    let sx = tx as i64 + dx;
                    let sy = y as i64 + dy;
                    let v = if (0..width as i64).contains(&sx) && (0..height as i64).contains(&sy) {
                        src[ch * height * width + sy as usize * width + sx as usize]
                    } else {
                        T::zero()
                    };
                    out.push(v);
                }
            }
        }
    }
    Tensor::from_vec(vec![n, dim], out)
}

/// Records which classes the training loop touched in which task. Any
/// raw sample from a class outside the active task's set is a violation
/// of the no-exemplar rule.
#[derive(Debug, Clone, Default)]
pub struct DataAccessLedger {
    counts: BTreeMap<(usize, usize), u64>,
    violations: Vec<String>,
}

impl DataAccessLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Rebuilds a ledger from its persisted summary, as when resuming a
    /// run from a checkpoint.
    pub fn from_parts(summary: &[(usize, usize, u64)], violations: Vec<String>) -> Self {
        DataAccessLedger {
            counts: summary.iter().map(|&(t, c, n)| ((t, c), n)).collect(),
            violations,
        }
    }

    pub fn record_training_batch(&mut self, task: usize, labels: &[usize], allowed: &[usize]) {
        for &y in labels {
            *self.counts.entry((task, y)).or_insert(0) += 1;
            if !allowed.contains(&y) {
                let msg = format!("task {task}: raw sample of class {y} accessed");
                if self.violations.last() != Some(&msg) {
                    self.violations.push(msg);
                }
            }
        }
    }

    pub fn violations(&self) -> &[String] {
        &self.violations
    }

    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }

    /// (task, class, samples) triples in deterministic order.
    pub fn summary(&self) -> Vec<(usize, usize, u64)> {
        self.counts.iter().map(|(&(t, c), &n)| (t, c, n)).collect()
    }
}

/// Nearest-class-mean probe on raw pixels — a linear classifier that
/// bounds how separable the data is.
pub fn linear_probe_accuracy(train: &Dataset, test: &Dataset) -> Result<f64> {
    if train.num_classes != test.num_classes || train.image_dim() != test.image_dim() {
        return Err(Error::Dataset("probe splits disagree on shape".into()));
    }
    let dim = train.image_dim();
    let mut means = vec![vec![0.0f64; dim]; train.num_classes];
    for class in 0..train.num_classes {
        let idx = train.indices_of_class(class);
        if idx.is_empty() {
            return Err(Error::Dataset(format!("class {class} has no train samples")));
        }
        let rows: Tensor<f64> = train.image_rows(idx)?;
        for r in 0..rows.rows() {
            for (acc, v) in means[class].iter_mut().zip(rows.row_slice(r)) {
                *acc += *v;
            }
        }
        means[class].iter_mut().for_each(|v| *v /= idx.len() as f64);
    }
    let all: Vec<usize> = (0..test.len()).collect();
    let rows: Tensor<f64> = test.image_rows(&all)?;
    let mut correct = 0usize;
    for i in 0..test.len() {
        let x = rows.row_slice(i);
        let mut best = (0usize, f64::INFINITY);
        for (class, mean) in means.iter().enumerate() {
            let d: f64 = x.iter().zip(mean).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.1 {
                best = (class, d);
            }
        }
        if best.0 == test.label(i) {
            correct += 1;
        }
    }
    Ok(correct as f64 / test.len() as f64)
}
