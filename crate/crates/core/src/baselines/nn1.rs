use super::{pixel_rows, pool_support, upsample_labels, BaseFeatureNet};
use crate::dataset::{BinaryMask, Episode};
use crate::predictor::Predictor;
use crate::{Error, Result};

/// Label of the Euclidean-nearest support row for every query row. Rows
/// are `dim` wide; ties go to the lowest support index.
pub fn nearest_labels(query: &[f64], support: &[f64], labels: &[bool], dim: usize) -> Result<Vec<bool>> {
    if support.is_empty() || labels.len() * dim != support.len() || query.len() % dim != 0 {
        return Err(Error::InvalidArgument("empty or inconsistent support features".into()));
    }
    Ok(query
        .chunks(dim)
        .map(|q| {
            let mut best = (f64::INFINITY, 0);
            for (j, s) in support.chunks(dim).enumerate() {
                let d: f64 = q.iter().zip(s).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best.0 {
                    best = (d, j);
                }
            }
            labels[best.1]
        })
        .collect())
}

/// 1-nearest-neighbour pixel labelling on base-net features.
pub struct Nn1<'a> {
    pub net: &'a BaseFeatureNet,
}

impl Predictor for Nn1<'_> {
    fn name(&self) -> &str {
        "nn1"
    }

    fn predict(&self, episode: &Episode) -> Result<BinaryMask> {
        let pooled = pool_support(&episode.support, self.net.stride(), |s| self.net.features(&s.image))?;
        let q = self.net.features(&episode.query_image)?;
        let (gh, gw) = (q.shape()[1], q.shape()[2]);
        let labels = nearest_labels(&pixel_rows(&q), &pooled.rows, &pooled.labels, self.net.feature_dim())?;
        let (w, h) = episode.query_image.dimensions();
        Ok(upsample_labels(&labels, gw, gh, w as usize, h as usize))
    }
}
