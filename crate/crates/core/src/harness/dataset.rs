//! Synthetic attributed images and the GLK1 binary format.
//!
//! Layout (little-endian): `b"GLK1"`, `u32` N, `u32` H, `u32` W, then N records
//! of `H*W` `f32` pixels, one class byte and one attribute byte.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::nn::Sample;
use crate::rng;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"GLK1";
pub const NUM_CLASSES: usize = 4;
const HEADER_LEN: usize = 16;
const PATCH: usize = 3;
const BACKGROUND_MAX: f64 = 0.2;
const PATCH_VALUE: f64 = 0.9;
const RAMP_AMPLITUDE: f64 = 0.3;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub height: usize,
    pub width: usize,
    pub images: Vec<Tensor>,
    pub labels: Vec<u8>,
    pub attributes: Vec<u8>,
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        (1, self.height, self.width)
    }

    pub fn samples(&self) -> Vec<Sample> {
        self.images
            .iter()
            .zip(&self.labels)
            .map(|(x, &y)| (x.clone(), usize::from(y)))
            .collect()
    }

    /// Samples split by attribute: `(without, with)`.
    pub fn attribute_pools(&self) -> (Vec<Sample>, Vec<Sample>) {
        let mut pools = (Vec::new(), Vec::new());
        for ((x, &y), &p) in self.images.iter().zip(&self.labels).zip(&self.attributes) {
            let s = (x.clone(), usize::from(y));
            if p == 1 {
                pools.1.push(s);
            } else {
                pools.0.push(s);
            }
        }
        pools
    }

    pub fn byte_len(&self) -> usize {
        HEADER_LEN + self.len() * (self.height * self.width * 4 + 2)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.byte_len());
        out.extend_from_slice(MAGIC);
        for v in [self.len(), self.height, self.width] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for ((x, &y), &p) in self.images.iter().zip(&self.labels).zip(&self.attributes) {
            for &v in x.values() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
            out.push(y);
            out.push(p);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let format = |offset: usize, detail: String| Error::Format {
            offset: offset as u64,
            detail,
        };
        if bytes.len() < HEADER_LEN {
            return Err(format(
                bytes.len(),
                format!("truncated header ({} of {HEADER_LEN} bytes)", bytes.len()),
            ));
        }
        if &bytes[..4] != MAGIC {
            return Err(format(0, format!("bad magic {:?}", &bytes[..4])));
        }
        let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes")) as usize;
        let (n, h, w) = (word(4), word(8), word(12));
        let record = h
            .checked_mul(w)
            .and_then(|p| p.checked_mul(4))
            .and_then(|p| p.checked_add(2))
            .ok_or_else(|| format(8, "image dimensions overflow".into()))?;
        let expected = n
            .checked_mul(record)
            .and_then(|r| r.checked_add(HEADER_LEN))
            .ok_or_else(|| format(4, "record count overflows".into()))?;
        if bytes.len() != expected {
            let at = bytes.len().min(expected);
            return Err(format(
                at,
                format!("expected {expected} bytes for {n} records, found {}", bytes.len()),
            ));
        }
        let mut images = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        let mut attributes = Vec::with_capacity(n);
        for i in 0..n {
            let base = HEADER_LEN + i * record;
            let values: Vec<f64> = bytes[base..base + h * w * 4]
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
                .collect();
            if let Some(k) = values.iter().position(|v| !v.is_finite()) {
                return Err(format(base + 4 * k, "non-finite pixel".into()));
            }
            let (y, p) = (bytes[base + h * w * 4], bytes[base + h * w * 4 + 1]);
            if usize::from(y) >= NUM_CLASSES {
                return Err(format(base + h * w * 4, format!("class label {y} out of range")));
            }
            if p > 1 {
                return Err(format(base + h * w * 4 + 1, format!("attribute {p} is not binary")));
            }
            images.push(Tensor::from_parts(vec![1, h, w], values));
            labels.push(y);
            attributes.push(p);
        }
        Ok(Self {
            height: h,
            width: w,
            images,
            labels,
            attributes,
        })
    }
}

/// Images with a bright 3x3 patch in the quadrant named by the class label
/// and, for attribute 1, a left-to-right intensity ramp.
pub fn synth_dataset(n: usize, height: usize, width: usize, seed: u64) -> Result<SyntheticDataset> {
    if height < 8 || width < 8 || n < 8 {
        return Err(Error::invalid(format!(
            "dataset needs N >= 8 and H, W >= 8 (got {n}, {height}, {width})"
        )));
    }
    let mut labels: Vec<u8> = (0..n).map(|i| (i % NUM_CLASSES) as u8).collect();
    let mut attributes: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
    labels.shuffle(&mut rng::stream(seed, u64::MAX));
    attributes.shuffle(&mut rng::stream(seed, u64::MAX - 1));
    let (qh, qw) = (height / 2, width / 2);
    let images = (0..n)
        .map(|i| {
            let mut r = rng::stream(seed, i as u64);
            let mut px: Vec<f64> = (0..height * width)
                .map(|_| r.random_range(0.0..BACKGROUND_MAX))
                .collect();
            let q = usize::from(labels[i]);
            let top = (q / 2) * qh + r.random_range(0..=qh - PATCH);
            let left = (q % 2) * qw + r.random_range(0..=qw - PATCH);
            for row in top..top + PATCH {
                for col in left..left + PATCH {
                    px[row * width + col] = PATCH_VALUE;
                }
            }
            if attributes[i] == 1 {
                for row in 0..height {
                    for col in 0..width {
                        px[row * width + col] += RAMP_AMPLITUDE * col as f64 / (width - 1) as f64;
                    }
                }
            }
            let px = px.into_iter().map(|v| f64::from(v.clamp(0.0, 1.0) as f32)).collect();
            Tensor::from_parts(vec![1, height, width], px)
        })
        .collect();
    Ok(SyntheticDataset {
        height,
        width,
        images,
        labels,
        attributes,
    })
}

pub fn save_dataset(ds: &SyntheticDataset, path: &Path) -> Result<()> {
    fs::write(path, ds.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: &Path) -> Result<SyntheticDataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    SyntheticDataset::from_bytes(&bytes)
}
