//! Datasets: IDX ingestion, corrupted target sets and splits.
//!
//! Corrupted sets are stored as three files sharing a stem:
//! `<stem>.json` (manifest), `<stem>.bin` (`"MCDS0001"`, `u32` count,
//! `u32` H, W, C, then little-endian `f32` pixels in H x W x C order) and
//! `<stem>.labels` (one byte per sample).

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::imgops::{apply_factor, Factor, Image, TransformSpec};
use crate::seed;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const MCDS_MAGIC: &[u8; 8] = b"MCDS0001";

/// Where a dataset came from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// SHA-256 (hex) of the files the data was read from, in read order.
    pub source_hashes: Vec<String>,
    pub corruption: Option<CorruptionSpec>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub images: Vec<Image>,
    pub labels: Vec<u8>,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn new(name: impl Into<String>, images: Vec<Image>, labels: Vec<u8>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::contract(
                "dataset",
                format!("{} images but {} labels", images.len(), labels.len()),
            ));
        }
        if let Some(first) = images.first() {
            if let Some(bad) = images.iter().find(|i| i.shape() != first.shape()) {
                return Err(Error::contract(
                    "dataset",
                    format!("mixed image shapes {:?} and {:?}", first.shape(), bad.shape()),
                ));
            }
        }
        Ok(Dataset { name: name.into(), images, labels, provenance: Provenance::default() })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image_shape(&self) -> Option<(usize, usize, usize)> {
        self.images.first().map(Image::shape)
    }

    /// Keep only the first `n` samples.
    pub fn truncate(&mut self, n: usize) {
        self.images.truncate(n);
        self.labels.truncate(n);
    }

    /// Samples at `indices`, in that order.
    pub fn subset(&self, name: impl Into<String>, indices: &[usize]) -> Dataset {
        Dataset {
            name: name.into(),
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            provenance: self.provenance.clone(),
        }
    }

    /// Hash over the source hashes, or over the pixel data if there are none.
    pub fn source_hash(&self) -> String {
        let mut h = Sha256::new();
        if self.provenance.source_hashes.is_empty() {
            for img in &self.images {
                for v in img.pixels() {
                    h.update(v.to_le_bytes());
                }
            }
            h.update(&self.labels);
        } else {
            for s in &self.provenance.source_hashes {
                h.update(s.as_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(offset as u64, format!("truncated {what}")))
}

fn le_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(offset as u64, format!("truncated {what}")))
}

/// Parse an IDX image file (`0x00000803`): count, rows, cols, then `u8` pixels.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Vec<Image>> {
    let magic = be_u32(bytes, 0, "magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(0, format!("image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}")));
    }
    let count = be_u32(bytes, 4, "image count")? as usize;
    let rows = be_u32(bytes, 8, "row count")? as usize;
    let cols = be_u32(bytes, 12, "column count")? as usize;
    let size = rows * cols;
    let needed = 16 + count * size;
    if bytes.len() < needed {
        return Err(Error::format(
            bytes.len() as u64,
            format!("truncated pixel data: {count} images of {rows}x{cols} need {needed} bytes"),
        ));
    }
    bytes[16..needed]
        .chunks(size)
        .map(|px| Image::from_u8(rows, cols, 1, px))
        .collect()
}

/// Parse an IDX label file (`0x00000801`).
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, "magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(0, format!("label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}")));
    }
    let count = be_u32(bytes, 4, "label count")? as usize;
    if bytes.len() < 8 + count {
        return Err(Error::format(bytes.len() as u64, format!("truncated labels: header says {count}")));
    }
    Ok(bytes[8..8 + count].to_vec())
}

/// Load an IDX image/label pair, optionally keeping only the first `limit` samples.
pub fn load_idx(images_path: &Path, labels_path: &Path, limit: Option<usize>) -> Result<Dataset> {
    let img_bytes = fs::read(images_path)?;
    let lbl_bytes = fs::read(labels_path)?;
    let images = parse_idx_images(&img_bytes)?;
    let labels = parse_idx_labels(&lbl_bytes)?;
    if images.len() != labels.len() {
        return Err(Error::format(
            4,
            format!("{} images but {} labels", images.len(), labels.len()),
        ));
    }
    let name = images_path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "idx".into());
    let mut ds = Dataset::new(name, images, labels)?;
    ds.provenance.source_hashes = vec![sha256_hex(&img_bytes), sha256_hex(&lbl_bytes)];
    if let Some(n) = limit {
        ds.truncate(n);
    }
    Ok(ds)
}

/// One corruption: a factor at a severity level in `1..=5`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub factor: Factor,
    pub severity: u8,
    pub seed: u64,
}

impl CorruptionSpec {
    /// `g_min + (s / 5) (g_max - g_min)`; `None` for degree-free factors.
    pub fn degree(&self) -> Result<Option<f64>> {
        if !(1..=5).contains(&self.severity) {
            return Err(Error::contract(
                "make_corrupted",
                format!("severity {} outside 1..=5", self.severity),
            ));
        }
        match self.factor.degree_range() {
            None if self.severity != 1 => Err(Error::contract(
                "make_corrupted",
                format!("{} has no severity axis; only severity 1 is valid", self.factor),
            )),
            None => Ok(None),
            Some((_, hi)) if self.severity == 5 => Ok(Some(hi)),
            Some((lo, hi)) => Ok(Some(lo + (self.severity as f64 / 5.0) * (hi - lo))),
        }
    }
}

/// Apply the corruption to every image; noise draws are seeded per sample.
pub fn make_corrupted(dataset: &Dataset, spec: &CorruptionSpec) -> Result<Dataset> {
    let degree = spec.degree()?;
    let images = dataset
        .images
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let t = TransformSpec {
                factor: spec.factor,
                degree,
                noise_seed: Some(seed::derive(&[spec.seed, i as u64])),
            };
            apply_factor(img, &t)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = Dataset::new(
        format!("{}-{}-s{}", dataset.name, spec.factor, spec.severity),
        images,
        dataset.labels.clone(),
    )?;
    out.provenance = Provenance {
        source_hashes: dataset.provenance.source_hashes.clone(),
        corruption: Some(*spec),
    };
    Ok(out)
}

/// JSON manifest of a persisted dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub name: String,
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub tensors: String,
    pub labels: String,
    pub spec: Option<CorruptionSpec>,
    pub degree: Option<f64>,
    pub seed: Option<u64>,
    pub source_hash: String,
    pub source_hashes: Vec<String>,
}

/// Write `<dir>/<stem>.{json,bin,labels}`; returns the manifest path.
pub fn save_dataset(dataset: &Dataset, dir: &Path, stem: &str) -> Result<PathBuf> {
    let (h, w, c) = dataset
        .image_shape()
        .ok_or_else(|| Error::contract("save_dataset", "empty dataset"))?;
    fs::create_dir_all(dir)?;
    let mut bin = Vec::with_capacity(24 + dataset.len() * h * w * c * 4);
    bin.extend_from_slice(MCDS_MAGIC);
    for v in [dataset.len(), h, w, c] {
        bin.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for img in &dataset.images {
        for v in img.pixels() {
            bin.extend_from_slice(&v.to_le_bytes());
        }
    }
    let tensors = format!("{stem}.bin");
    let labels = format!("{stem}.labels");
    fs::write(dir.join(&tensors), &bin)?;
    fs::write(dir.join(&labels), &dataset.labels)?;
    let spec = dataset.provenance.corruption;
    let manifest = Manifest {
        format: "MCDS0001".into(),
        name: dataset.name.clone(),
        count: dataset.len(),
        height: h,
        width: w,
        channels: c,
        tensors,
        labels,
        degree: spec.as_ref().map(|s| s.degree()).transpose()?.flatten(),
        seed: spec.map(|s| s.seed),
        spec,
        source_hash: dataset.source_hash(),
        source_hashes: dataset.provenance.source_hashes.clone(),
    };
    let path = dir.join(format!("{stem}.json"));
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    fs::write(&path, text)?;
    Ok(path)
}

/// Read a dataset written by [`save_dataset`].
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(manifest_path)?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| {
        Error::format(0, format!("manifest {}: {e}", manifest_path.display()))
    })?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let bin = fs::read(dir.join(&manifest.tensors))?;
    if bin.get(..8) != Some(MCDS_MAGIC.as_slice()) {
        return Err(Error::format(0, "tensor file magic is not MCDS0001"));
    }
    let count = le_u32(&bin, 8, "count")? as usize;
    let h = le_u32(&bin, 12, "height")? as usize;
    let w = le_u32(&bin, 16, "width")? as usize;
    let c = le_u32(&bin, 20, "channels")? as usize;
    if (count, h, w, c) != (manifest.count, manifest.height, manifest.width, manifest.channels) {
        return Err(Error::format(8, "tensor header disagrees with manifest"));
    }
    let size = h * w * c;
    let needed = 24 + count * size * 4;
    if bin.len() != needed {
        return Err(Error::format(bin.len() as u64, format!("tensor file should hold {needed} bytes")));
    }
    let labels = fs::read(dir.join(&manifest.labels))?;
    if labels.len() != count {
        return Err(Error::format(labels.len() as u64, format!("expected {count} labels")));
    }
    let mut images = Vec::with_capacity(count);
    for (i, chunk) in bin[24..].chunks(size * 4).enumerate() {
        let px: Vec<f32> = chunk.chunks(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        if px.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::format((24 + i * size * 4) as u64, "pixel outside [0, 1]"));
        }
        images.push(Image::new(h, w, c, px)?);
    }
    let mut ds = Dataset::new(manifest.name, images, labels)?;
    ds.provenance = Provenance { source_hashes: manifest.source_hashes, corruption: manifest.spec };
    Ok(ds)
}

/// Load either a persisted dataset (`.json` manifest) or an IDX image file
/// whose label file sits next to it (`images-idx3` swapped for `labels-idx1`).
pub fn load_path(path: &Path, limit: Option<usize>) -> Result<Dataset> {
    if path.extension().is_some_and(|e| e == "json") {
        let mut ds = load_dataset(path)?;
        if let Some(n) = limit {
            ds.truncate(n);
        }
        return Ok(ds);
    }
    let file = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    if !file.contains("images-idx3") {
        return Err(Error::Config(format!(
            "{}: expected a .json manifest or an IDX file named *images-idx3*",
            path.display()
        )));
    }
    let labels = path.with_file_name(file.replace("images-idx3", "labels-idx1"));
    load_idx(path, &labels, limit)
}

/// Seeded shuffle split into train/val/test.
///
/// Sizes are `floor(f * n)`; leftover samples go one each to the parts
/// with the largest fractional remainders (lowest index first on ties).
pub fn split(dataset: &Dataset, seed: u64, fractions: [f64; 3]) -> Result<(Dataset, Dataset, Dataset)> {
    let total: f64 = fractions.iter().sum();
    if fractions.iter().any(|&f| !(0.0..=1.0).contains(&f)) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::contract("split", format!("fractions {fractions:?} must be in [0, 1] and sum to 1")));
    }
    let n = dataset.len();
    let exact: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut sizes: Vec<usize> = exact.iter().map(|v| v.floor() as usize).collect();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    let mut left = n - sizes.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if fractions[i] > 0.0 {
            sizes[i] += 1;
            left -= 1;
        }
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (a, rest) = idx.split_at(sizes[0]);
    let (b, c) = rest.split_at(sizes[1]);
    Ok((
        dataset.subset(format!("{}-train", dataset.name), a),
        dataset.subset(format!("{}-val", dataset.name), b),
        dataset.subset(format!("{}-test", dataset.name), c),
    ))
}
