//! Labeled image sets: IDX ingestion and a synthetic blob generator.

use std::io::{Read, Write};
use std::path::Path;

use aelayers_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Images `[N,C,H,W]` in `[0,1]` with class ids in `[0, classes)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSet {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl LabeledSet {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.rank() != 4 || images.batch() != labels.len() {
            return Err(CoreError::Config(format!(
                "images {:?} do not match {} labels",
                images.shape(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(CoreError::Config(format!("label {bad} outside [0,{classes})")));
        }
        Ok(LabeledSet { images, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample shape `[C,H,W]`.
    pub fn sample_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Ok(LabeledSet {
            images: self.images.select(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        })
    }

    /// First `n` samples (or all of them).
    pub fn head(&self, n: usize) -> Result<Self> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn u32(&mut self, what: &str) -> Result<u32> {
        let end = self.pos + 4;
        let b = self.bytes.get(self.pos..end).ok_or_else(|| CoreError::Format {
            offset: self.pos as u64,
            detail: format!("truncated while reading {what}"),
        })?;
        self.pos = end;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn payload(&mut self, n: usize) -> Result<&[u8]> {
        let have = self.bytes.len() - self.pos;
        if have < n {
            return Err(CoreError::Format {
                offset: self.bytes.len() as u64,
                detail: format!("truncated payload: expected {n} bytes after offset {}, found {have}", self.pos),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
}

fn expect_magic(c: &mut Cursor<'_>, expected: u32) -> Result<()> {
    let got = c.u32("magic")?;
    if got != expected {
        return Err(CoreError::Format { offset: 0, detail: format!("bad magic: expected {expected:#010x}, got {got:#010x}") });
    }
    Ok(())
}

/// Parses an IDX image file into `[N,1,H,W]` with pixels scaled by `1/255`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut c = Cursor { bytes, pos: 0 };
    expect_magic(&mut c, IDX_IMAGES_MAGIC)?;
    let n = c.u32("image count")? as usize;
    let h = c.u32("row count")? as usize;
    let w = c.u32("column count")? as usize;
    if n == 0 || h == 0 || w == 0 {
        return Err(CoreError::Format { offset: 4, detail: format!("empty dimensions {n}x{h}x{w}") });
    }
    let data = c.payload(n * h * w)?.iter().map(|&b| f32::from(b) / 255.0).collect();
    Ok(Tensor::new(vec![n, 1, h, w], data)?)
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let mut c = Cursor { bytes, pos: 0 };
    expect_magic(&mut c, IDX_LABELS_MAGIC)?;
    let n = c.u32("label count")? as usize;
    Ok(c.payload(n)?.iter().map(|&b| usize::from(b)).collect())
}

/// Writes `[N,1,H,W]` images, quantizing to `round(255·v)`.
pub fn write_idx_images<W: Write>(mut w: W, images: &Tensor<f32>) -> Result<()> {
    let s = images.shape();
    if s.len() != 4 || s[1] != 1 {
        return Err(CoreError::Config(format!("IDX images must be [N,1,H,W], got {s:?}")));
    }
    w.write_all(&IDX_IMAGES_MAGIC.to_be_bytes())?;
    for &d in &[s[0], s[2], s[3]] {
        w.write_all(&(d as u32).to_be_bytes())?;
    }
    let bytes: Vec<u8> = images.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    w.write_all(&bytes)?;
    Ok(())
}

pub fn write_idx_labels<W: Write>(mut w: W, labels: &[usize]) -> Result<()> {
    w.write_all(&IDX_LABELS_MAGIC.to_be_bytes())?;
    w.write_all(&(labels.len() as u32).to_be_bytes())?;
    let bytes = labels
        .iter()
        .map(|&l| u8::try_from(l).map_err(|_| CoreError::Config(format!("label {l} does not fit a byte"))))
        .collect::<Result<Vec<u8>>>()?;
    w.write_all(&bytes)?;
    Ok(())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(CoreError::file(path))?;
    Ok(bytes)
}

/// Loads an image/label IDX pair. The class count is `max(label) + 1`.
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<LabeledSet> {
    let x = parse_idx_images(&read_file(images.as_ref())?)?;
    let y = parse_idx_labels(&read_file(labels.as_ref())?)?;
    let classes = y.iter().max().map_or(1, |m| m + 1);
    LabeledSet::new(x, y, classes)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub classes: usize,
    pub per_class: usize,
    pub size: usize,
    /// Blob radius in pixels.
    pub blob_sigma: f64,
    /// Standard deviation of the blob center around its class position, in pixels.
    pub jitter: f64,
    /// Additive Gaussian pixel noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams { classes: 10, per_class: 200, size: 28, blob_sigma: 3.0, jitter: 1.0, noise: 0.1, seed: 0 }
    }
}

/// Single-channel images, each a Gaussian blob placed at a class-specific
/// point on a circle around the image center. Samples come out in a seeded
/// random order.
pub fn synth_dataset(p: &SynthParams) -> Result<LabeledSet> {
    if p.classes == 0 || p.per_class == 0 || p.size < 8 || !(p.blob_sigma > 0.0) || p.jitter < 0.0 || p.noise < 0.0 {
        return Err(CoreError::Config(format!("invalid synthetic dataset parameters {p:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let jitter = Normal::new(0.0, p.jitter).map_err(|e| CoreError::Config(e.to_string()))?;
    let noise = Normal::new(0.0, p.noise).map_err(|e| CoreError::Config(e.to_string()))?;
    let s = p.size;
    let mid = (s as f64 - 1.0) / 2.0;
    let radius = 0.3 * s as f64;
    let n = p.classes * p.per_class;

    let mut order: Vec<usize> = (0..n).map(|i| i % p.classes).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let mut data = Vec::with_capacity(n * s * s);
    for &class in &order {
        let angle = std::f64::consts::TAU * class as f64 / p.classes as f64;
        let (cy, cx) = (
            mid + radius * angle.sin() + jitter.sample(&mut rng),
            mid + radius * angle.cos() + jitter.sample(&mut rng),
        );
        let amplitude = rng.random_range(0.7..1.0);
        for r in 0..s {
            for c in 0..s {
                let d2 = (r as f64 - cy).powi(2) + (c as f64 - cx).powi(2);
                let v = amplitude * (-d2 / (2.0 * p.blob_sigma * p.blob_sigma)).exp() + noise.sample(&mut rng);
                data.push(v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    LabeledSet::new(Tensor::new(vec![n, 1, s, s], data)?, order, p.classes)
}
