use std::collections::BTreeSet;
use std::sync::Arc;

use super::{Catalog, GrayImage, Sample, SegDataset, BACKGROUND};
use crate::{Error, Result};

/// Disjoint split of class ids into held-out test labels and training labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldSpec {
    pub fold_index: usize,
    pub test_labels: BTreeSet<u8>,
    pub train_labels: BTreeSet<u8>,
}

/// Fold `i` tests on `{c·i + 1, …, c·i + c}` (with `c = classes_per_fold`)
/// and trains on every other id in `1..=num_classes`.
pub fn build_folds(num_classes: usize, classes_per_fold: usize, fold_index: usize) -> Result<FoldSpec> {
    if num_classes == 0 || classes_per_fold == 0 || num_classes > 255 {
        return Err(Error::InvalidFold(format!(
            "need 1..=255 classes and a positive fold size, got {num_classes} and {classes_per_fold}"
        )));
    }
    if num_classes % classes_per_fold != 0 {
        return Err(Error::InvalidFold(format!(
            "{num_classes} classes do not split into folds of {classes_per_fold}"
        )));
    }
    let num_folds = num_classes / classes_per_fold;
    if fold_index >= num_folds {
        return Err(Error::InvalidFold(format!(
            "fold index {fold_index} out of range 0..{num_folds}"
        )));
    }
    let first = classes_per_fold * fold_index + 1;
    let test_labels: BTreeSet<u8> = (first..first + classes_per_fold).map(|c| c as u8).collect();
    let train_labels = (1..=num_classes as u8)
        .filter(|c| !test_labels.contains(c))
        .collect();
    Ok(FoldSpec {
        fold_index,
        test_labels,
        train_labels,
    })
}

/// The twenty PASCAL VOC class names in id order (1-based).
pub fn pascal_voc_catalog() -> Catalog {
    const NAMES: [&str; 20] = [
        "aeroplane",
        "bicycle",
        "bird",
        "boat",
        "bottle",
        "bus",
        "car",
        "cat",
        "chair",
        "cow",
        "diningtable",
        "dog",
        "horse",
        "motorbike",
        "person",
        "potted plant",
        "sheep",
        "sofa",
        "train",
        "tv/monitor",
    ];
    Catalog::new(NAMES.iter().enumerate().map(|(i, n)| (i as u8 + 1, n.to_string())))
        .expect("static catalog is valid")
}

/// Relabels every pixel whose class is not in `labels` as background and
/// drops samples left without foreground.
pub fn remap_to_fold(dataset: &SegDataset, labels: &BTreeSet<u8>) -> Result<SegDataset> {
    if let Some(bad) = labels.iter().find(|&&l| !dataset.catalog().contains(l)) {
        return Err(Error::Dataset(format!("label {bad} is not in the catalog")));
    }
    let mut keep = [false; 256];
    for &l in labels {
        keep[l as usize] = true;
    }
    let mut samples = Vec::new();
    for (i, s) in dataset.samples().iter().enumerate() {
        if !dataset.classes_in(i).iter().any(|c| keep[*c as usize]) {
            continue;
        }
        let labels = if dataset.classes_in(i).iter().all(|c| keep[*c as usize]) {
            s.labels.clone()
        } else {
            let raw = s
                .labels
                .as_raw()
                .iter()
                .map(|&v| if keep[v as usize] { v } else { BACKGROUND })
                .collect();
            Arc::new(GrayImage::from_raw(s.labels.width(), s.labels.height(), raw).expect("same size"))
        };
        samples.push(Sample {
            id: s.id.clone(),
            image: s.image.clone(),
            labels,
        });
    }
    if samples.is_empty() {
        return Err(Error::Dataset("no sample contains any of the requested labels".into()));
    }
    SegDataset::new(samples, dataset.catalog().clone())
}
