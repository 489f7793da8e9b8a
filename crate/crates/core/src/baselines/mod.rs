//! Learned baselines that answer the same episodes as the main model.
//!
//! `nn1`, `logreg` and `finetune` reuse the dense features of a network
//! trained for ordinary pixel classification over the training classes;
//! `siamese` learns its own features for pixel verification. With k > 1
//! supports, the pixel-level baselines pool every support pixel and
//! `finetune` trains on all supports at once.

mod base_net;
mod finetune;
mod logreg;
mod nn1;
mod siamese;

pub use base_net::{downsample_mode, pixel_accuracy, train_base_classifier, BaseFeatureNet, BaseNetConfig};
pub use finetune::{FineTune, FineTuneConfig};
pub use logreg::{fit_logreg, LogReg, LogRegFit, LogRegOptions};
pub use nn1::{nearest_labels, Nn1};
pub use siamese::{most_similar_labels, siamese_train, verification_accuracy, SiameseConfig, SiameseMatcher};

use crate::dataset::{BinaryMask, SupportPair};
use crate::tensor::Tensor;
use crate::Result;

/// Names accepted wherever a predictor is chosen by name.
pub const PREDICTOR_NAMES: [&str; 5] = ["nn1", "logreg", "finetune", "siamese", "ours"];

/// `[D, h, w]` → row-major `[h·w, D]` (one row per pixel).
pub(crate) fn pixel_rows(t: &Tensor) -> Vec<f64> {
    let s = t.shape();
    let (d, n) = (s[0], s[1] * s[2]);
    let src = t.data();
    let mut out = vec![0.0; n * d];
    for c in 0..d {
        for p in 0..n {
            out[p * d + c] = src[c * n + p];
        }
    }
    out
}

/// Support feature pixels of all supports, concatenated in support order,
/// with their labels on the feature grid.
pub(crate) struct PooledSupport {
    pub rows: Vec<f64>,
    pub labels: Vec<bool>,
}

pub(crate) fn pool_support(
    supports: &[SupportPair],
    stride: usize,
    mut features: impl FnMut(&SupportPair) -> Result<Tensor>,
) -> Result<PooledSupport> {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for s in supports {
        rows.extend(pixel_rows(&features(s)?));
        labels.extend(s.mask.downsample_majority(stride)?.data().iter().map(|&v| v == 1));
    }
    Ok(PooledSupport { rows, labels })
}

/// Nearest-neighbour enlargement of a feature-grid labelling.
pub(crate) fn upsample_labels(labels: &[bool], grid_w: usize, grid_h: usize, width: usize, height: usize) -> BinaryMask {
    let small = BinaryMask::new(grid_w, grid_h, labels.iter().map(|&b| b as u8).collect()).expect("grid size");
    small.resize_nearest(width, height)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pixel_rows_transposes_channels() {
        let t = Tensor::from_fn(&[2, 1, 3], |i| i as f64);
        assert_eq!(pixel_rows(&t), vec![0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
    }

    #[test]
    fn label_upsampling_replicates_cells() {
        let m = upsample_labels(&[true, false], 2, 1, 4, 2);
        assert_eq!(m.data(), &[1, 1, 0, 0, 1, 1, 0, 0]);
    }
}
