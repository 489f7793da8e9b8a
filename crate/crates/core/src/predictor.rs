//! Common interface shared by the main model, the baselines and the
//! reference predictors used to sanity-check the benchmark.

use crate::dataset::{BinaryMask, Episode};
use crate::model::TwoBranchModel;
use crate::Result;

/// Maps an episode to a binary mask the size of its query image.
pub trait Predictor: Sync {
    fn name(&self) -> &str;
    fn predict(&self, episode: &Episode) -> Result<BinaryMask>;
}

impl Predictor for TwoBranchModel {
    fn name(&self) -> &str {
        "ours"
    }

    fn predict(&self, episode: &Episode) -> Result<BinaryMask> {
        self.predict_kshot(&episode.query_image, &episode.support)
    }
}

/// Returns the ground truth.
#[derive(Clone, Copy, Debug, Default)]
pub struct OraclePredictor;

impl Predictor for OraclePredictor {
    fn name(&self) -> &str {
        "oracle"
    }

    fn predict(&self, episode: &Episode) -> Result<BinaryMask> {
        Ok(episode.query_mask.clone())
    }
}

/// Labels every pixel the same way.
#[derive(Clone, Copy, Debug)]
pub struct ConstantPredictor {
    pub foreground: bool,
}

impl Predictor for ConstantPredictor {
    fn name(&self) -> &str {
        if self.foreground {
            "all-foreground"
        } else {
            "all-background"
        }
    }

    fn predict(&self, episode: &Episode) -> Result<BinaryMask> {
        let (w, h) = episode.query_image.dimensions();
        Ok(BinaryMask::filled(w as usize, h as usize, self.foreground))
    }
}
