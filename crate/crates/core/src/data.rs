//! Image-classification datasets: IDX files and a seeded synthetic generator.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Images as `[N, C, H, W]` in `[0, 1]` with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let s = images.shape();
        if s.len() != 4 || s[0] != labels.len() {
            return Err(Error::Invalid(format!(
                "{} labels for images of shape {s:?}",
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Invalid(format!("label {l} out of range for {classes} classes")));
        }
        Ok(Dataset {
            images,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]` of one sample.
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let per: usize = self.sample_shape().iter().product();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.sample_shape());
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (Tensor::new(shape, data).expect("gathered length matches"), labels)
    }

    /// Consecutive samples `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> Dataset {
        let idx: Vec<usize> = (start..end.min(self.len())).collect();
        let (images, labels) = self.gather(&idx);
        Dataset {
            images,
            labels,
            classes: self.classes,
        }
    }

    /// Batches in order; the last one may be smaller. Batches of a single
    /// sample are dropped since batch norm cannot use them.
    pub fn batches(&self, batch_size: usize) -> Vec<(Tensor, Vec<usize>)> {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.batches_of(&idx, batch_size)
    }

    /// Batches of a seeded random permutation.
    pub fn shuffled_batches(&self, batch_size: usize, seed: u64) -> Vec<(Tensor, Vec<usize>)> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        self.batches_of(&idx, batch_size)
    }

    fn batches_of(&self, idx: &[usize], batch_size: usize) -> Vec<(Tensor, Vec<usize>)> {
        idx.chunks(batch_size.max(1))
            .filter(|c| c.len() > 1)
            .map(|c| self.gather(c))
            .collect()
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn u32(&mut self, what: &str) -> Result<u32> {
        let end = self.pos + 4;
        let b = self.bytes.get(self.pos..end).ok_or_else(|| Error::Parse {
            offset: self.pos as u64,
            message: format!("file ends before the {what}"),
        })?;
        self.pos = end;
        Ok(u32::from_be_bytes(b.try_into().expect("four bytes")))
    }
}

fn check_magic(r: &mut Reader, expected: u32, kind: &str) -> Result<()> {
    let magic = r.u32("magic number")?;
    if magic != expected {
        return Err(Error::Parse {
            offset: 0,
            message: format!("bad {kind} magic 0x{magic:08x}, expected 0x{expected:08x}"),
        });
    }
    Ok(())
}

fn payload<'a>(r: &Reader<'a>, len: usize, what: &str) -> Result<&'a [u8]> {
    let available = r.bytes.len() - r.pos;
    if available < len {
        return Err(Error::Parse {
            offset: r.bytes.len() as u64,
            message: format!(
                "truncated {what}: need {len} bytes after offset {}, found {available}",
                r.pos
            ),
        });
    }
    Ok(&r.bytes[r.pos..r.pos + len])
}

/// Parses an IDX image file into `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let mut r = Reader { bytes, pos: 0 };
    check_magic(&mut r, IDX_IMAGES_MAGIC, "image")?;
    let n = r.u32("image count")? as usize;
    let rows = r.u32("row count")? as usize;
    let cols = r.u32("column count")? as usize;
    let pixels = payload(&r, n * rows * cols, "pixel data")?;
    Ok((n, rows, cols, pixels))
}

/// Parses an IDX label file.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let mut r = Reader { bytes, pos: 0 };
    check_magic(&mut r, IDX_LABELS_MAGIC, "label")?;
    let n = r.u32("label count")? as usize;
    payload(&r, n, "label data")
}

/// Builds a dataset from the raw bytes of an IDX image/label pair.
pub fn idx_dataset(image_bytes: &[u8], label_bytes: &[u8]) -> Result<Dataset> {
    let (n, rows, cols, pixels) = parse_idx_images(image_bytes)?;
    let labels = parse_idx_labels(label_bytes)?;
    if labels.len() != n {
        return Err(Error::Parse {
            offset: 4,
            message: format!(
                "image file holds {n} images but label file holds {} labels",
                labels.len()
            ),
        });
    }
    let labels: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let classes = labels.iter().max().map_or(0, |&m| m + 1);
    let images = Tensor::new(
        vec![n, 1, rows, cols],
        pixels.iter().map(|&p| p as f64 / 255.0).collect(),
    )?;
    Dataset::new(images, labels, classes)
}

pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let ib = std::fs::read(images)?;
    let lb = std::fs::read(labels)?;
    idx_dataset(&ib, &lb)
}

/// Seeded Gaussian-blob classes: every class is a sum of a few smooth
/// bumps at random positions; samples jitter the bump positions and
/// amplitudes and add pixel noise.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub samples: usize,
    pub noise: f64,
    pub seed: u64,
    #[serde(default = "default_blobs")]
    pub blobs: usize,
    /// Standard deviation of the per-sample bump displacement in pixels.
    #[serde(default = "default_jitter")]
    pub jitter: f64,
}

fn default_blobs() -> usize {
    3
}

fn default_jitter() -> f64 {
    1.0
}

#[derive(Clone, Copy)]
struct Blob {
    y: f64,
    x: f64,
    width: f64,
    amp: f64,
}

pub fn synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.classes < 2 || spec.height < 4 || spec.width < 4 || spec.samples == 0 || spec.blobs == 0 {
        return Err(Error::Config(format!("degenerate synthetic dataset {spec:?}")));
    }
    if !(spec.noise >= 0.0 && spec.jitter >= 0.0) {
        return Err(Error::Config("synthetic noise and jitter must be non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (h, w) = (spec.height as f64, spec.width as f64);
    let protos: Vec<Vec<Blob>> = (0..spec.classes)
        .map(|_| {
            (0..spec.blobs)
                .map(|_| Blob {
                    y: rng.random_range(0.15 * h..0.85 * h),
                    x: rng.random_range(0.15 * w..0.85 * w),
                    width: rng.random_range(0.08..0.2) * h.min(w),
                    amp: rng.random_range(0.5..1.0),
                })
                .collect()
        })
        .collect();
    let pixel = Normal::new(0.0, spec.noise).map_err(|e| Error::Config(e.to_string()))?;
    let shift = Normal::new(0.0, spec.jitter).map_err(|e| Error::Config(e.to_string()))?;
    let per = spec.height * spec.width;
    let mut data = Vec::with_capacity(spec.samples * per);
    let mut labels = Vec::with_capacity(spec.samples);
    for i in 0..spec.samples {
        let label = i % spec.classes;
        let blobs: Vec<Blob> = protos[label]
            .iter()
            .map(|b| Blob {
                y: b.y + shift.sample(&mut rng),
                x: b.x + shift.sample(&mut rng),
                amp: b.amp * rng.random_range(0.7..1.3),
                ..*b
            })
            .collect();
        for r in 0..spec.height {
            for c in 0..spec.width {
                let mut v = 0.0;
                for b in &blobs {
                    let d2 = (r as f64 - b.y).powi(2) + (c as f64 - b.x).powi(2);
                    v += b.amp * (-d2 / (2.0 * b.width * b.width)).exp();
                }
                data.push((v + pixel.sample(&mut rng)).clamp(0.0, 1.0));
            }
        }
        labels.push(label);
    }
    let images = Tensor::new(vec![spec.samples, 1, spec.height, spec.width], data)?;
    Dataset::new(images, labels, spec.classes)
}
