//! Segmentation corpora, class folds and episodic sampling.

mod folds;
mod io;
mod sampling;
mod synthetic;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

pub use image::{GrayImage, RgbImage};

pub use folds::{build_folds, pascal_voc_catalog, remap_to_fold, FoldSpec};
pub use io::{load_dataset, load_dataset_root, save_dataset, write_mask_pgm, LoadedDataset, Rejected};
pub use sampling::{
    benchmark_set, episodes_from_manifest, manifest_text, sample_episode, SAMPLING_RETRY_BUDGET,
};
pub use synthetic::{generate_synthetic, SyntheticConfig, SHAPE_NAMES, TEXTURE_NAMES};

use crate::tensor::Tensor;
use crate::{Error, Result};

/// Class id reserved for background.
pub const BACKGROUND: u8 = 0;

/// H×W raster of {0, 1}.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::shape(
                "binary_mask",
                format!("{width}x{height} needs {} values, got {}", width * height, data.len()),
            ));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::InvalidArgument("mask values must be 0 or 1".into()));
        }
        Ok(BinaryMask {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: bool) -> Self {
        BinaryMask {
            width,
            height,
            data: vec![value as u8; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y) as u8);
            }
        }
        BinaryMask {
            width,
            height,
            data,
        }
    }

    /// Pixels of `labels` equal to `class_id`.
    pub fn from_labels(labels: &GrayImage, class_id: u8) -> Self {
        BinaryMask {
            width: labels.width() as usize,
            height: labels.height() as usize,
            data: labels.as_raw().iter().map(|&v| (v == class_id) as u8).collect(),
        }
    }

    /// Thresholds probabilities: `p >= threshold` is foreground.
    pub fn from_probs(width: usize, height: usize, probs: &[f64], threshold: f64) -> Result<Self> {
        if probs.len() != width * height {
            return Err(Error::shape("binary_mask", "probability map size"));
        }
        Ok(BinaryMask {
            width,
            height,
            data: probs.iter().map(|&p| (p >= threshold) as u8).collect(),
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] == 1
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn same_size(&self, other: &BinaryMask) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Pixelwise logical OR.
    pub fn union(&self, other: &BinaryMask) -> Result<BinaryMask> {
        if !self.same_size(other) {
            return Err(Error::shape("mask union", "size mismatch"));
        }
        Ok(BinaryMask {
            width: self.width,
            height: self.height,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a | b).collect(),
        })
    }

    /// Area-majority downsampling by an integer factor. A cell is foreground
    /// when at least half of its pixels are (ties go to foreground).
    pub fn downsample_majority(&self, factor: usize) -> Result<BinaryMask> {
        if factor == 0 || self.width % factor != 0 || self.height % factor != 0 {
            return Err(Error::InvalidArgument(format!(
                "cannot downsample {}x{} by {factor}",
                self.width, self.height
            )));
        }
        let (w, h) = (self.width / factor, self.height / factor);
        let cell = factor * factor;
        let mut data = Vec::with_capacity(w * h);
        for cy in 0..h {
            for cx in 0..w {
                let mut fg = 0;
                for y in cy * factor..(cy + 1) * factor {
                    for x in cx * factor..(cx + 1) * factor {
                        fg += self.data[y * self.width + x] as usize;
                    }
                }
                data.push((2 * fg >= cell) as u8);
            }
        }
        Ok(BinaryMask {
            width: w,
            height: h,
            data,
        })
    }

    /// Nearest-neighbour resize.
    pub fn resize_nearest(&self, width: usize, height: usize) -> BinaryMask {
        BinaryMask::from_fn(width, height, |x, y| {
            let sx = (x * self.width) / width;
            let sy = (y * self.height) / height;
            self.get(sx, sy)
        })
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    /// 8-bit raster: 0 background, 255 foreground.
    pub fn to_gray_image(&self) -> GrayImage {
        GrayImage::from_raw(
            self.width as u32,
            self.height as u32,
            self.data.iter().map(|&v| v * 255).collect(),
        )
        .expect("dimensions match")
    }
}

/// RGB image as a `[3, H, W]` tensor with values in `[0, 1]`.
pub fn image_to_tensor(image: &RgbImage) -> Tensor {
    let (w, h) = (image.width() as usize, image.height() as usize);
    let raw = image.as_raw();
    Tensor::from_fn(&[3, h, w], |i| {
        let c = i / (h * w);
        let p = i % (h * w);
        raw[p * 3 + c] as f64 / 255.0
    })
}

/// Map from class id to name. Id 0 (background) is implicit.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Catalog {
    names: BTreeMap<u8, String>,
}

impl Catalog {
    pub fn new(names: impl IntoIterator<Item = (u8, String)>) -> Result<Self> {
        let names: BTreeMap<u8, String> = names.into_iter().collect();
        if names.contains_key(&BACKGROUND) {
            return Err(Error::Dataset("class id 0 is reserved for background".into()));
        }
        Ok(Catalog { names })
    }

    pub fn ids(&self) -> BTreeSet<u8> {
        self.names.keys().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, id: u8) -> Option<&str> {
        self.names.get(&id).map(String::as_str)
    }

    pub fn contains(&self, id: u8) -> bool {
        self.names.contains_key(&id)
    }

    /// `id<TAB>name` per line.
    pub fn to_text(&self) -> String {
        self.names
            .iter()
            .map(|(id, name)| format!("{id}\t{name}\n"))
            .collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut names = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            let (id, name) = line
                .split_once('\t')
                .ok_or_else(|| Error::Dataset(format!("catalog line {}: expected id<TAB>name", lineno + 1)))?;
            let id: u8 = id
                .trim()
                .parse()
                .map_err(|_| Error::Dataset(format!("catalog line {}: bad id `{id}`", lineno + 1)))?;
            names.push((id, name.to_string()));
        }
        Catalog::new(names)
    }
}

/// One image with its semantic label raster.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Arc<RgbImage>,
    pub labels: Arc<GrayImage>,
}

/// Validated, immutable collection of labelled images.
#[derive(Clone, Debug, PartialEq)]
pub struct SegDataset {
    samples: Vec<Sample>,
    catalog: Catalog,
    present: Vec<Vec<u8>>,
    carriers: BTreeMap<u8, Vec<usize>>,
}

impl SegDataset {
    pub fn new(samples: Vec<Sample>, catalog: Catalog) -> Result<Self> {
        let mut present = Vec::with_capacity(samples.len());
        let mut carriers: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
        for (i, s) in samples.iter().enumerate() {
            if s.image.dimensions() != s.labels.dimensions() {
                return Err(Error::Dataset(format!(
                    "sample {}: image {:?} vs labels {:?}",
                    s.id,
                    s.image.dimensions(),
                    s.labels.dimensions()
                )));
            }
            let mut seen = [false; 256];
            for &v in s.labels.as_raw() {
                seen[v as usize] = true;
            }
            let classes: Vec<u8> = (1..=255u8).filter(|&c| seen[c as usize]).collect();
            if let Some(&bad) = classes.iter().find(|&&c| !catalog.contains(c)) {
                return Err(Error::Dataset(format!(
                    "sample {}: label {bad} is not in the catalog",
                    s.id
                )));
            }
            for &c in &classes {
                carriers.entry(c).or_default().push(i);
            }
            present.push(classes);
        }
        Ok(SegDataset {
            samples,
            catalog,
            present,
            carriers,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn sample(&self, index: usize) -> &Sample {
        &self.samples[index]
    }

    pub fn catalog(&self) -> &Catalog {
        &self.catalog
    }

    /// Foreground classes present in sample `index`, ascending.
    pub fn classes_in(&self, index: usize) -> &[u8] {
        &self.present[index]
    }

    /// Indices of the samples containing `class_id`.
    pub fn carriers(&self, class_id: u8) -> &[usize] {
        self.carriers.get(&class_id).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Classes that occur anywhere in the corpus.
    pub fn present_classes(&self) -> BTreeSet<u8> {
        self.carriers.keys().copied().collect()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.samples.iter().position(|s| s.id == id)
    }

    /// Splits off the trailing `fraction` of samples as a disjoint held-out
    /// pool; returns `(head, tail)`.
    pub fn split_holdout(&self, fraction: f64) -> Result<(SegDataset, SegDataset)> {
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "holdout fraction must lie in (0, 1), got {fraction}"
            )));
        }
        let n_tail = ((self.len() as f64) * fraction).ceil() as usize;
        if n_tail == 0 || n_tail >= self.len() {
            return Err(Error::Dataset(format!(
                "cannot hold out {fraction} of {} samples",
                self.len()
            )));
        }
        let cut = self.len() - n_tail;
        let head = SegDataset::new(self.samples[..cut].to_vec(), self.catalog.clone())?;
        let tail = SegDataset::new(self.samples[cut..].to_vec(), self.catalog.clone())?;
        Ok((head, tail))
    }

    /// Keeps the samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<SegDataset> {
        let samples = indices
            .iter()
            .map(|&i| {
                self.samples
                    .get(i)
                    .cloned()
                    .ok_or_else(|| Error::InvalidArgument(format!("sample index {i} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        SegDataset::new(samples, self.catalog.clone())
    }
}

/// A labelled support image for one class.
#[derive(Clone, Debug, PartialEq)]
pub struct SupportPair {
    pub image_index: usize,
    pub image: Arc<RgbImage>,
    pub mask: BinaryMask,
}

/// One few-shot problem: k supports, a query and its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub class_id: u8,
    pub query_index: usize,
    pub query_image: Arc<RgbImage>,
    pub query_mask: BinaryMask,
    pub support: Vec<SupportPair>,
}

impl Episode {
    pub fn k(&self) -> usize {
        self.support.len()
    }

    /// Same episode restricted to its first `k` supports.
    pub fn with_k(&self, k: usize) -> Result<Episode> {
        if k == 0 || k > self.support.len() {
            return Err(Error::InvalidArgument(format!(
                "cannot take {k} of {} supports",
                self.support.len()
            )));
        }
        let mut e = self.clone();
        e.support.truncate(k);
        Ok(e)
    }

    /// Checks the structural invariants: at least one support, every mask
    /// non-empty and sized like its image, supports distinct and never the
    /// query.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Dataset(format!("invalid episode: {msg}")));
        if self.support.is_empty() {
            return fail("no supports".into());
        }
        let (qw, qh) = self.query_image.dimensions();
        if self.query_mask.width() != qw as usize || self.query_mask.height() != qh as usize {
            return fail("query mask size differs from image".into());
        }
        if self.query_mask.is_empty() {
            return fail("query mask is empty".into());
        }
        let mut seen = BTreeSet::new();
        for s in &self.support {
            if s.image_index == self.query_index {
                return fail("query used as support".into());
            }
            if !seen.insert(s.image_index) {
                return fail(format!("support {} repeated", s.image_index));
            }
            let (w, h) = s.image.dimensions();
            if s.mask.width() != w as usize || s.mask.height() != h as usize {
                return fail("support mask size differs from image".into());
            }
            if s.mask.is_empty() {
                return fail(format!("support {} mask is empty", s.image_index));
            }
        }
        Ok(())
    }
}
