use std::collections::BTreeSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{image_to_tensor, FoldSpec, GrayImage, RgbImage, SegDataset};
use crate::model::{add_conv_stack, conv_stack, he_kernel, parse_list};
use crate::tensor::checkpoint::Checkpoint;
use crate::tensor::{sgd_step, ParamGroup, ParamStore, SgdState, Tape, Tensor, Var};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaseNetConfig {
    pub image_size: usize,
    /// Encoder widths; 2×2 max pooling follows every block but the last.
    pub channels: Vec<usize>,
    pub iterations: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for BaseNetConfig {
    fn default() -> Self {
        BaseNetConfig {
            image_size: 64,
            channels: vec![16, 32, 64],
            iterations: 4000,
            learning_rate: 0.01,
            momentum: 0.9,
            seed: 7,
        }
    }
}

impl BaseNetConfig {
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
        Ok(())
    }
}

/// Most frequent label in each `factor × factor` cell; ties go to the
/// smaller id (so background wins ties).
pub fn downsample_mode(labels: &GrayImage, factor: usize) -> Result<Vec<u8>> {
    let (w, h) = (labels.width() as usize, labels.height() as usize);
    if factor == 0 || w % factor != 0 || h % factor != 0 {
        return Err(Error::InvalidArgument(format!("cannot downsample {w}x{h} by {factor}")));
    }
    let raw = labels.as_raw();
    let mut out = Vec::with_capacity((w / factor) * (h / factor));
    let mut hist = [0usize; 256];
    for cy in 0..h / factor {
        for cx in 0..w / factor {
            hist.fill(0);
            for y in cy * factor..(cy + 1) * factor {
                for x in cx * factor..(cx + 1) * factor {
                    hist[raw[y * w + x] as usize] += 1;
                }
            }
            let best = (0..256).fold(0, |b, v| if hist[v] > hist[b] { v } else { b });
            out.push(best as u8);
        }
    }
    Ok(out)
}

/// Dense encoder plus a 1×1 `(|train labels| + 1)`-way head.
#[derive(Clone, Debug, PartialEq)]
pub struct BaseFeatureNet {
    config: BaseNetConfig,
    train_labels: Vec<u8>,
    params: ParamStore,
}

impl BaseFeatureNet {
    pub fn new(config: BaseNetConfig, train_labels: &BTreeSet<u8>) -> Result<Self> {
        config.validate()?;
        if train_labels.is_empty() || train_labels.contains(&0) {
            return Err(Error::InvalidArgument("train labels must be non-empty and exclude 0".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        add_conv_stack(&mut params, &mut rng, "enc", ParamGroup::Other, 3, &config.channels);
        let d = *config.channels.last().expect("validated");
        let outputs = train_labels.len() + 1;
        params.add("head.weight", ParamGroup::Other, he_kernel(&mut rng, outputs, d, 1));
        params.add("head.bias", ParamGroup::Other, Tensor::zeros(&[outputs]));
        Ok(BaseFeatureNet {
            config,
            train_labels: train_labels.iter().copied().collect(),
            params,
        })
    }

    pub fn config(&self) -> &BaseNetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn train_labels(&self) -> &[u8] {
        &self.train_labels
    }

    pub fn num_outputs(&self) -> usize {
        self.train_labels.len() + 1
    }

    pub fn feature_dim(&self) -> usize {
        *self.config.channels.last().expect("validated")
    }

    pub fn stride(&self) -> usize {
        1 << (self.config.channels.len() - 1)
    }

    pub(crate) fn encoder_blocks(&self) -> usize {
        self.config.channels.len()
    }

    fn check_size(&self, image: &RgbImage) -> Result<()> {
        let s = self.config.image_size as u32;
        if image.dimensions() != (s, s) {
            return Err(Error::shape(
                "base net input",
                format!("expected {s}x{s}, got {:?}", image.dimensions()),
            ));
        }
        Ok(())
    }

    /// Encoder blocks `from..` applied to `x`; `vars` holds the kernel/bias
    /// pairs of exactly those blocks.
    pub(crate) fn encode_from(&self, tape: &mut Tape, x: Var, vars: &[Var], from: usize) -> Result<Var> {
        let last = self.encoder_blocks() - 1;
        conv_stack(tape, x, vars, |i| i + from < last)
    }

    /// Post-activation penultimate features `[D, h, w]`.
    pub fn features(&self, image: &RgbImage) -> Result<Tensor> {
        self.check_size(image)?;
        let mut tape = Tape::new();
        let vars = self.frozen_vars(&mut tape);
        let x = tape.constant(image_to_tensor(image));
        let f = self.encode_from(&mut tape, x, &vars[..2 * self.encoder_blocks()], 0)?;
        Ok(tape.value(f)?.clone())
    }

    pub(crate) fn frozen_vars(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.tensors().iter().map(|t| tape.constant(t.clone())).collect()
    }

    fn logits_on(&self, tape: &mut Tape, vars: &[Var], image: &RgbImage) -> Result<Var> {
        self.check_size(image)?;
        let n = 2 * self.encoder_blocks();
        let x = tape.constant(image_to_tensor(image));
        let f = self.encode_from(tape, x, &vars[..n], 0)?;
        tape.conv2d(f, vars[n], vars[n + 1], 1, 0)
    }

    /// Head index per feature pixel: 0 is background, `i + 1` is
    /// `train_labels[i]`.
    fn targets(&self, labels: &GrayImage) -> Result<Vec<usize>> {
        let mut lookup = [usize::MAX; 256];
        lookup[0] = 0;
        for (i, &l) in self.train_labels.iter().enumerate() {
            lookup[l as usize] = i + 1;
        }
        downsample_mode(labels, self.stride())?
            .into_iter()
            .map(|v| match lookup[v as usize] {
                usize::MAX => Err(Error::Dataset(format!("label {v} is not a training label"))),
                t => Ok(t),
            })
            .collect()
    }

    /// Arg-max head index per feature pixel (ties to the lower index).
    pub fn predict_indices(&self, image: &RgbImage) -> Result<Vec<usize>> {
        let mut tape = Tape::new();
        let vars = self.frozen_vars(&mut tape);
        let logits = self.logits_on(&mut tape, &vars, image)?;
        let data = tape.data(logits)?;
        let n = data.len() / self.num_outputs();
        Ok((0..n)
            .map(|p| {
                (0..self.num_outputs()).fold(0, |best, c| if data[c * n + p] > data[best * n + p] { c } else { best })
            })
            .collect())
    }

    fn meta(&self) -> Vec<(String, String)> {
        let join = |v: &mut dyn Iterator<Item = String>| v.collect::<Vec<_>>().join(",");
        vec![
            ("kind".into(), "basenet".into()),
            ("image_size".into(), self.config.image_size.to_string()),
            ("channels".into(), join(&mut self.config.channels.iter().map(|c| c.to_string()))),
            ("train_labels".into(), join(&mut self.train_labels.iter().map(|c| c.to_string()))),
            ("iterations".into(), self.config.iterations.to_string()),
            ("learning_rate".into(), self.config.learning_rate.to_string()),
            ("momentum".into(), self.config.momentum.to_string()),
        ]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Checkpoint::from_store(self.config.seed, self.meta(), &self.params).save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        ck.expect_kind("basenet")?;
        let config = BaseNetConfig {
            image_size: ck.meta_parse("image_size")?,
            channels: parse_list(ck.require_meta("channels")?)?,
            iterations: ck.meta_parse("iterations")?,
            learning_rate: ck.meta_parse("learning_rate")?,
            momentum: ck.meta_parse("momentum")?,
            seed: ck.seed,
        };
        let labels = parse_list(ck.require_meta("train_labels")?)?
            .into_iter()
            .map(|v| u8::try_from(v).map_err(|_| Error::Checkpoint(format!("bad label {v}"))))
            .collect::<Result<BTreeSet<u8>>>()?;
        let mut net = BaseFeatureNet::new(config, &labels)?;
        ck.load_into(&mut net.params)?;
        Ok(net)
    }
}

/// Trains the encoder and head with per-pixel softmax cross-entropy on one
/// uniformly drawn image per step. `dataset` must be remapped to the fold's
/// training labels.
pub fn train_base_classifier(dataset: &SegDataset, fold: &FoldSpec, config: &BaseNetConfig) -> Result<BaseFeatureNet> {
    if let Some(bad) = dataset.present_classes().into_iter().find(|c| !fold.train_labels.contains(c)) {
        return Err(Error::Dataset(format!(
            "class {bad} is not a training label of fold {}",
            fold.fold_index
        )));
    }
    if dataset.is_empty() {
        return Err(Error::Dataset("empty training set".into()));
    }
    let mut net = BaseFeatureNet::new(config.clone(), &fold.train_labels)?;
    let mut sgd = SgdState::new(config.learning_rate, config.momentum, net.params.tensors())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    for it in 0..config.iterations {
        let sample = dataset.sample(rng.random_range(0..dataset.len()));
        let targets = net.targets(&sample.labels)?;
        let mut tape = Tape::new();
        let vars = net.params.bind(&mut tape);
        let logits = net.logits_on(&mut tape, &vars, &sample.image)?;
        let loss = tape.softmax_cross_entropy(logits, &targets)?;
        if !tape.data(loss)?[0].is_finite() {
            return Err(Error::Diverged { iteration: it + 1 });
        }
        tape.backward(loss)?;
        net.params.accumulate_grads(&tape, &vars)?;
        sgd_step(net.params.tensors_mut(), &mut sgd)
            .map_err(|_| Error::Diverged { iteration: it + 1 })?;
    }
    Ok(net)
}

/// Fraction of feature pixels whose arg-max head index matches the
/// mode-downsampled label.
pub fn pixel_accuracy(net: &BaseFeatureNet, dataset: &SegDataset) -> Result<f64> {
    let (mut right, mut total) = (0usize, 0usize);
    for s in dataset.samples() {
        let targets = net.targets(&s.labels)?;
        let pred = net.predict_indices(&s.image)?;
        right += targets.iter().zip(&pred).filter(|(a, b)| a == b).count();
        total += targets.len();
    }
    Ok(right as f64 / total.max(1) as f64)
}
