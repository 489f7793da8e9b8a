//! Dense pixel verification with a shared encoder and a learned weighted-L1
//! similarity `σ(Σ_c α_c·|f_p^c − f_q^c| + β)`.

use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{downsample_mode, pixel_rows, pool_support, upsample_labels};
use crate::dataset::{image_to_tensor, sample_episode, FoldSpec, RgbImage, SegDataset};
use crate::dataset::{BinaryMask, Episode};
use crate::model::{add_conv_stack, conv_stack, parse_list};
use crate::predictor::Predictor;
use crate::tensor::checkpoint::Checkpoint;
use crate::tensor::{sgd_step, ParamGroup, ParamStore, SgdState, Tape, Tensor, Var};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SiameseConfig {
    pub image_size: usize,
    pub channels: Vec<usize>,
    pub iterations: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Share of feature-pixel positions drawn from each image per step.
    pub pixel_fraction: f64,
    pub seed: u64,
}

impl Default for SiameseConfig {
    fn default() -> Self {
        SiameseConfig {
            image_size: 64,
            channels: vec![16, 32, 64],
            iterations: 4000,
            learning_rate: 0.01,
            momentum: 0.9,
            pixel_fraction: 0.5,
            seed: 7,
        }
    }
}

impl SiameseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::Config("channels must be non-empty and positive".into()));
        }
        let stride = 1 << (self.channels.len() - 1);
        if self.image_size == 0 || self.image_size % stride != 0 {
            return Err(Error::Config(format!(
                "image_size {} not divisible by stride {stride}",
                self.image_size
            )));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("need learning_rate > 0 and momentum in [0, 1)".into()));
        }
        if !(self.pixel_fraction > 0.0 && self.pixel_fraction <= 1.0) {
            return Err(Error::Config("pixel_fraction must be in (0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SiameseMatcher {
    config: SiameseConfig,
    params: ParamStore,
}

impl SiameseMatcher {
    /// Fresh encoder with `α_c = −1/D` and `β = 0`.
    pub fn new(config: SiameseConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        add_conv_stack(&mut params, &mut rng, "enc", ParamGroup::Other, 3, &config.channels);
        let d = *config.channels.last().expect("validated");
        params.add("sim.alpha", ParamGroup::Other, Tensor::filled(&[d], -1.0 / d as f64));
        params.add("sim.beta", ParamGroup::Other, Tensor::zeros(&[1]));
        Ok(SiameseMatcher { config, params })
    }

    pub fn config(&self) -> &SiameseConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn feature_dim(&self) -> usize {
        *self.config.channels.last().expect("validated")
    }

    pub fn stride(&self) -> usize {
        1 << (self.config.channels.len() - 1)
    }

    pub fn alpha(&self) -> &[f64] {
        self.params.get(self.params.len() - 2).data()
    }

    pub fn beta(&self) -> f64 {
        self.params.get(self.params.len() - 1).data()[0]
    }

    fn encode(&self, tape: &mut Tape, vars: &[Var], image: &RgbImage) -> Result<Var> {
        let s = self.config.image_size as u32;
        if image.dimensions() != (s, s) {
            return Err(Error::shape(
                "siamese input",
                format!("expected {s}x{s}, got {:?}", image.dimensions()),
            ));
        }
        let x = tape.constant(image_to_tensor(image));
        let last = self.config.channels.len() - 1;
        let f = conv_stack(tape, x, &vars[..2 * self.config.channels.len()], |i| i < last)?;
        let s = tape.shape(f)?.to_vec();
        tape.reshape(f, &[s[0], s[1] * s[2]])
    }

    /// Dense features `[D, h, w]`.
    pub fn features(&self, image: &RgbImage) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = self.params.tensors().iter().map(|t| tape.constant(t.clone())).collect();
        let f = self.encode(&mut tape, &vars, image)?;
        let g = self.config.image_size / self.stride();
        tape.value(f)?.clone().reshaped(&[self.feature_dim(), g, g])
    }

    /// Learned logit between two feature rows.
    pub fn logit(&self, a: &[f64], b: &[f64]) -> f64 {
        self.beta() + self.alpha().iter().zip(a.iter().zip(b)).map(|(al, (x, y))| al * (x - y).abs()).sum::<f64>()
    }

    fn meta(&self) -> Vec<(String, String)> {
        let channels = self.config.channels.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",");
        vec![
            ("kind".into(), "siamese".into()),
            ("image_size".into(), self.config.image_size.to_string()),
            ("channels".into(), channels),
            ("iterations".into(), self.config.iterations.to_string()),
            ("learning_rate".into(), self.config.learning_rate.to_string()),
            ("momentum".into(), self.config.momentum.to_string()),
            ("pixel_fraction".into(), self.config.pixel_fraction.to_string()),
        ]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Checkpoint::from_store(self.config.seed, self.meta(), &self.params).save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        ck.expect_kind("siamese")?;
        let config = SiameseConfig {
            image_size: ck.meta_parse("image_size")?,
            channels: parse_list(ck.require_meta("channels")?)?,
            iterations: ck.meta_parse("iterations")?,
            learning_rate: ck.meta_parse("learning_rate")?,
            momentum: ck.meta_parse("momentum")?,
            pixel_fraction: ck.meta_parse("pixel_fraction")?,
            seed: ck.seed,
        };
        let mut m = SiameseMatcher::new(config)?;
        ck.load_into(&mut m.params)?;
        Ok(m)
    }
}

/// For every query row, the label of the support row with the largest
/// learned similarity; ties go to the lowest support index.
pub fn most_similar_labels(matcher: &SiameseMatcher, query: &[f64], support: &[f64], labels: &[bool]) -> Result<Vec<bool>> {
    let dim = matcher.feature_dim();
    if support.is_empty() || labels.len() * dim != support.len() || query.len() % dim != 0 {
        return Err(Error::InvalidArgument("empty or inconsistent support features".into()));
    }
    Ok(query
        .chunks(dim)
        .map(|q| {
            let mut best = (f64::NEG_INFINITY, 0);
            for (j, s) in support.chunks(dim).enumerate() {
                let z = matcher.logit(q, s);
                if z > best.0 {
                    best = (z, j);
                }
            }
            labels[best.1]
        })
        .collect())
}

struct PixelPair {
    a: Vec<usize>,
    b: Vec<usize>,
    target: Vec<f64>,
}

/// Draws an image pair sharing a class and subsampled pixel positions of
/// each; targets are 1 where the mode-downsampled labels agree.
fn draw_pair(
    dataset: &SegDataset,
    stride: usize,
    fraction: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(usize, usize, PixelPair)> {
    let ep = sample_episode(dataset, 1, rng)?;
    let (qi, si) = (ep.query_index, ep.support[0].image_index);
    let la = downsample_mode(&dataset.sample(qi).labels, stride)?;
    let lb = downsample_mode(&dataset.sample(si).labels, stride)?;
    let take = |n: usize, rng: &mut ChaCha8Rng| {
        let m = ((n as f64 * fraction).round() as usize).clamp(1, n);
        let mut v = index::sample(rng, n, m).into_vec();
        v.sort_unstable();
        v
    };
    let a = take(la.len(), rng);
    let b = take(lb.len(), rng);
    let target = a
        .iter()
        .flat_map(|&i| b.iter().map(move |&j| (i, j)))
        .map(|(i, j)| f64::from(la[i] == lb[j]))
        .collect();
    Ok((qi, si, PixelPair { a, b, target }))
}

/// Trains the matcher for pixel verification on pairs of training images
/// that share a class. `dataset` must be remapped to the fold's training
/// labels.
pub fn siamese_train(dataset: &SegDataset, fold: &FoldSpec, config: &SiameseConfig) -> Result<SiameseMatcher> {
    if let Some(bad) = dataset.present_classes().into_iter().find(|c| !fold.train_labels.contains(c)) {
        return Err(Error::Dataset(format!(
            "class {bad} is not a training label of fold {}",
            fold.fold_index
        )));
    }
    let mut m = SiameseMatcher::new(config.clone())?;
    let mut sgd = SgdState::new(config.learning_rate, config.momentum, m.params.tensors())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let stride = m.stride();
    for it in 0..config.iterations {
        let (qi, si, pair) = draw_pair(dataset, stride, config.pixel_fraction, &mut rng)?;
        let mut tape = Tape::new();
        let vars = m.params.bind(&mut tape);
        let fa = m.encode(&mut tape, &vars, &dataset.sample(qi).image)?;
        let fb = m.encode(&mut tape, &vars, &dataset.sample(si).image)?;
        let fa = tape.select_cols(fa, &pair.a)?;
        let fb = tape.select_cols(fb, &pair.b)?;
        let n = vars.len();
        let z = tape.l1_similarity_logits(fa, fb, vars[n - 2], vars[n - 1])?;
        let p = tape.sigmoid(z)?;
        let total = tape.bce_sum(p, &pair.target, 1e-12)?;
        let loss = tape.scale(total, 1.0 / pair.target.len() as f64)?;
        if !tape.data(loss)?[0].is_finite() {
            return Err(Error::Diverged { iteration: it + 1 });
        }
        tape.backward(loss)?;
        m.params.accumulate_grads(&tape, &vars)?;
        sgd_step(m.params.tensors_mut(), &mut sgd).map_err(|_| Error::Diverged { iteration: it + 1 })?;
    }
    Ok(m)
}

/// Share of sampled pixel pairs whose thresholded similarity matches the
/// same/different label, over `pairs` draws from `dataset`.
pub fn verification_accuracy(matcher: &SiameseMatcher, dataset: &SegDataset, pairs: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut right, mut total) = (0usize, 0usize);
    let dim = matcher.feature_dim();
    for _ in 0..pairs {
        let (qi, si, pair) = draw_pair(dataset, matcher.stride(), matcher.config.pixel_fraction, &mut rng)?;
        let ra = pixel_rows(&matcher.features(&dataset.sample(qi).image)?);
        let rb = pixel_rows(&matcher.features(&dataset.sample(si).image)?);
        let mut t = pair.target.iter();
        for &i in &pair.a {
            for &j in &pair.b {
                let same = matcher.logit(&ra[i * dim..(i + 1) * dim], &rb[j * dim..(j + 1) * dim]) >= 0.0;
                right += usize::from(same == (*t.next().expect("one target per pair") == 1.0));
                total += 1;
            }
        }
    }
    Ok(right as f64 / total.max(1) as f64)
}

impl Predictor for SiameseMatcher {
    fn name(&self) -> &str {
        "siamese"
    }

    fn predict(&self, episode: &Episode) -> Result<BinaryMask> {
        let pooled = pool_support(&episode.support, self.stride(), |s| self.features(&s.image))?;
        let q = self.features(&episode.query_image)?;
        let (gh, gw) = (q.shape()[1], q.shape()[2]);
        let labels = most_similar_labels(self, &pixel_rows(&q), &pooled.rows, &pooled.labels)?;
        let (w, h) = episode.query_image.dimensions();
        Ok(upsample_labels(&labels, gw, gh, w as usize, h as usize))
    }
}
