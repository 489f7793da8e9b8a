//! The two-branch segmentation model.
//!
//! The conditioning branch sees the support image multiplied by its mask,
//! runs a small conv encoder, pools globally and projects to an `m`-vector.
//! The fixed hashing layer expands that vector to `D + 1` values: the first
//! `D` are the weights of a pixel classifier, the last its bias. The
//! segmentation branch maps the query to a `[D, H/4, W/4]` feature volume
//! and the classifier is applied as a 1×1 convolution followed by a sigmoid.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{image_to_tensor, BinaryMask, RgbImage, SupportPair};
use crate::hashing::{build_hashing, HashingSpec, HASH_STREAM_VERSION};
use crate::tensor::checkpoint::Checkpoint;
use crate::tensor::{ParamGroup, ParamStore, Tape, Tensor, Var};
use crate::{Error, Result};

/// Probabilities at or above this value are foreground.
pub const THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    /// Output widths of the conditioning conv blocks; each block halves the
    /// resolution.
    pub cond_channels: Vec<usize>,
    /// Output widths of the segmentation conv blocks; every block but the
    /// last is followed by a 2×2 max pool. The last width is `D`.
    pub seg_channels: Vec<usize>,
    /// Length `m` of the conditioning head vector.
    pub head_dim: usize,
    /// Seeds are taken from the run seed rather than the config file.
    #[serde(skip)]
    pub hash_seed: u64,
    #[serde(skip)]
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 64,
            cond_channels: vec![4, 8, 16, 32],
            seg_channels: vec![16, 32, 64],
            head_dim: 64,
            hash_seed: 0,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn feature_dim(&self) -> usize {
        *self.seg_channels.last().expect("validated")
    }

    pub fn stride(&self) -> usize {
        1 << (self.seg_channels.len() - 1)
    }

    pub fn feature_size(&self) -> usize {
        self.image_size / self.stride()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.cond_channels.is_empty() || self.seg_channels.is_empty() {
            return bad("both branches need at least one conv block".into());
        }
        if self.cond_channels.iter().chain(&self.seg_channels).any(|&c| c == 0) || self.head_dim == 0 {
            return bad("channel widths and head_dim must be positive".into());
        }
        let cond_factor = 1usize << self.cond_channels.len();
        if self.image_size == 0 || self.image_size % cond_factor != 0 || self.image_size % self.stride() != 0 {
            return bad(format!(
                "image_size {} must be divisible by {} and {}",
                self.image_size,
                cond_factor,
                self.stride()
            ));
        }
        Ok(())
    }

    fn to_meta(&self) -> Vec<(String, String)> {
        let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        vec![
            ("kind".into(), "twobranch".into()),
            ("image_size".into(), self.image_size.to_string()),
            ("cond_channels".into(), join(&self.cond_channels)),
            ("seg_channels".into(), join(&self.seg_channels)),
            ("head_dim".into(), self.head_dim.to_string()),
            ("hash_seed".into(), self.hash_seed.to_string()),
            ("hash_stream_version".into(), HASH_STREAM_VERSION.to_string()),
        ]
    }

    fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind("twobranch")?;
        let version: u32 = ck.meta_parse("hash_stream_version")?;
        if version != HASH_STREAM_VERSION {
            return Err(Error::Checkpoint(format!("unsupported hash stream version {version}")));
        }
        let config = ModelConfig {
            image_size: ck.meta_parse("image_size")?,
            cond_channels: parse_list(ck.require_meta("cond_channels")?)?,
            seg_channels: parse_list(ck.require_meta("seg_channels")?)?,
            head_dim: ck.meta_parse("head_dim")?,
            hash_seed: ck.meta_parse("hash_seed")?,
            init_seed: ck.seed,
        };
        config.validate()?;
        Ok(config)
    }
}

pub(crate) fn parse_list(raw: &str) -> Result<Vec<usize>> {
    raw.split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad list entry `{s}`")))
        })
        .collect()
}

/// Weight vector and bias of a pixel-level logistic classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierParams {
    pub w: Vec<f64>,
    pub b: f64,
}

/// Dense features `[D, h, w]` of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVolume {
    pub tensor: Tensor,
}

impl FeatureVolume {
    pub fn channels(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[2]
    }
}

/// Per-pixel foreground probabilities, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl ProbMap {
    pub fn to_mask(&self) -> BinaryMask {
        BinaryMask::from_probs(self.width, self.height, &self.data, THRESHOLD).expect("sizes agree")
    }
}

/// Zeroes every channel of `image` ([3, H, W]) where `mask` is background.
pub fn mask_support(image: &Tensor, mask: &BinaryMask) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 || s[1] != mask.height() || s[2] != mask.width() {
        return Err(Error::shape(
            "mask_support",
            format!("image {s:?} vs mask {}x{}", mask.height(), mask.width()),
        ));
    }
    let plane = s[1] * s[2];
    let m = mask.data();
    Ok(Tensor::from_fn(s, |i| image.data()[i] * m[i % plane] as f64))
}

/// He-normal `[c_out, c_in, k, k]` kernel.
pub(crate) fn he_kernel(rng: &mut ChaCha8Rng, c_out: usize, c_in: usize, k: usize) -> Tensor {
    let fan_in = (c_in * k * k) as f64;
    let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
    Tensor::from_fn(&[c_out, c_in, k, k], |_| normal.sample(rng))
}

/// Adds 3×3 conv blocks `prefix.conv{i}.{weight,bias}` to `store`.
pub(crate) fn add_conv_stack(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    group: ParamGroup,
    in_channels: usize,
    widths: &[usize],
) {
    let mut c_in = in_channels;
    for (i, &c_out) in widths.iter().enumerate() {
        store.add(format!("{prefix}.conv{i}.weight"), group, he_kernel(rng, c_out, c_in, 3));
        store.add(format!("{prefix}.conv{i}.bias"), group, Tensor::zeros(&[c_out]));
        c_in = c_out;
    }
}

/// Runs 3×3 conv + relu blocks whose (kernel, bias) vars come in pairs,
/// max-pooling after block `i` when `pool_after(i)`.
pub(crate) fn conv_stack(tape: &mut Tape, mut x: Var, vars: &[Var], pool_after: impl Fn(usize) -> bool) -> Result<Var> {
    for (i, kb) in vars.chunks(2).enumerate() {
        x = tape.conv2d(x, kb[0], kb[1], 1, 1)?;
        x = tape.relu(x)?;
        if pool_after(i) {
            x = tape.maxpool2(x)?;
        }
    }
    Ok(x)
}

/// Variables of a model recorded on one tape.
#[derive(Clone, Debug)]
pub struct BoundModel {
    vars: Vec<Var>,
    hash_matrix: Var,
    hash_bias: Var,
    cond_convs: usize,
    seg_start: usize,
}

impl BoundModel {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

pub struct TwoBranchModel {
    config: ModelConfig,
    params: ParamStore,
    hashing: HashingSpec,
    seg_forwards: AtomicUsize,
}

impl Clone for TwoBranchModel {
    fn clone(&self) -> Self {
        TwoBranchModel {
            config: self.config.clone(),
            params: self.params.clone(),
            hashing: self.hashing.clone(),
            seg_forwards: AtomicUsize::new(0),
        }
    }
}

impl std::fmt::Debug for TwoBranchModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TwoBranchModel")
            .field("config", &self.config)
            .field("num_values", &self.params.num_values())
            .finish()
    }
}

impl TwoBranchModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut params = ParamStore::new();
        add_conv_stack(&mut params, &mut rng, "cond", ParamGroup::Conditioning, 3, &config.cond_channels);
        let pooled = *config.cond_channels.last().expect("validated");
        // Small head so the initial classifier logits stay far from saturation.
        let head_std = 0.1 / (pooled as f64).sqrt();
        let normal = Normal::new(0.0, head_std).expect("positive std");
        params.add(
            "cond.head.weight",
            ParamGroup::Conditioning,
            Tensor::from_fn(&[config.head_dim, pooled], |_| normal.sample(&mut rng)),
        );
        params.add("cond.head.bias", ParamGroup::Conditioning, Tensor::zeros(&[config.head_dim]));
        add_conv_stack(&mut params, &mut rng, "seg", ParamGroup::Segmentation, 3, &config.seg_channels);
        let hashing = build_hashing(config.hash_seed, config.head_dim, config.feature_dim() + 1)?;
        Ok(TwoBranchModel {
            config,
            params,
            hashing,
            seg_forwards: AtomicUsize::new(0),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn hashing(&self) -> &HashingSpec {
        &self.hashing
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim()
    }

    /// Number of segmentation-branch forward passes run so far.
    pub fn seg_forward_count(&self) -> usize {
        self.seg_forwards.load(Ordering::Relaxed)
    }

    pub fn reset_seg_forward_count(&self) {
        self.seg_forwards.store(0, Ordering::Relaxed);
    }

    /// Records parameters as trainable leaves.
    pub fn bind(&self, tape: &mut Tape) -> BoundModel {
        let vars = self.params.bind(tape);
        self.finish_binding(tape, vars)
    }

    /// Records parameters as constants, for inference.
    pub fn bind_frozen(&self, tape: &mut Tape) -> BoundModel {
        let vars = self.params.tensors().iter().map(|t| tape.constant(t.clone())).collect();
        self.finish_binding(tape, vars)
    }

    fn finish_binding(&self, tape: &mut Tape, vars: Vec<Var>) -> BoundModel {
        let hash_matrix = tape.constant(self.hashing.as_matrix());
        let hash_bias = tape.constant(Tensor::zeros(&[self.hashing.output_dim()]));
        let cond_convs = 2 * self.config.cond_channels.len();
        BoundModel {
            vars,
            hash_matrix,
            hash_bias,
            cond_convs,
            seg_start: cond_convs + 2,
        }
    }

    /// Conditioning branch on the tape: returns `(w [D], b [1])`.
    pub fn condition_on(&self, tape: &mut Tape, bound: &BoundModel, image: &RgbImage, mask: &BinaryMask) -> Result<(Var, Var)> {
        self.check_size(image)?;
        let masked = mask_support(&image_to_tensor(image), mask)?;
        let x = tape.constant(masked);
        let x = conv_stack(tape, x, &bound.vars[..bound.cond_convs], |_| true)?;
        let x = tape.global_avg_pool(x)?;
        let head = tape.linear(x, bound.vars[bound.cond_convs], bound.vars[bound.cond_convs + 1])?;
        let theta = tape.linear(head, bound.hash_matrix, bound.hash_bias)?;
        let d = self.feature_dim();
        Ok((tape.slice(theta, 0, d)?, tape.slice(theta, d, 1)?))
    }

    /// Segmentation branch on the tape: `[D, h, w]`.
    pub fn features_on(&self, tape: &mut Tape, bound: &BoundModel, image: &RgbImage) -> Result<Var> {
        self.check_size(image)?;
        self.seg_forwards.fetch_add(1, Ordering::Relaxed);
        let x = tape.constant(image_to_tensor(image));
        let last = self.config.seg_channels.len() - 1;
        conv_stack(tape, x, &bound.vars[bound.seg_start..], |i| i < last)
    }

    /// Pixel classifier on the tape: `sigmoid(conv1x1(features; w, b))`, `[1, h, w]`.
    pub fn classify_on(&self, tape: &mut Tape, features: Var, w: Var, b: Var) -> Result<Var> {
        let d = tape.shape(w)?[0];
        let kernel = tape.reshape(w, &[1, d, 1, 1])?;
        let logits = tape.conv2d(features, kernel, b, 1, 0)?;
        tape.sigmoid(logits)
    }

    fn check_size(&self, image: &RgbImage) -> Result<()> {
        let s = self.config.image_size as u32;
        if image.dimensions() != (s, s) {
            return Err(Error::shape(
                "model input",
                format!("expected {s}x{s}, got {:?}", image.dimensions()),
            ));
        }
        Ok(())
    }

    pub fn condition(&self, image: &RgbImage, mask: &BinaryMask) -> Result<ClassifierParams> {
        let mut tape = Tape::new();
        let bound = self.bind_frozen(&mut tape);
        let (w, b) = self.condition_on(&mut tape, &bound, image, mask)?;
        Ok(ClassifierParams {
            w: tape.data(w)?.to_vec(),
            b: tape.data(b)?[0],
        })
    }

    pub fn extract_features(&self, image: &RgbImage) -> Result<FeatureVolume> {
        let mut tape = Tape::new();
        let bound = self.bind_frozen(&mut tape);
        let f = self.features_on(&mut tape, &bound, image)?;
        Ok(FeatureVolume {
            tensor: tape.value(f)?.clone(),
        })
    }

    /// One-shot prediction: the thresholded mask and the full-resolution
    /// probability map.
    pub fn predict_mask(&self, query: &RgbImage, support: &SupportPair) -> Result<(BinaryMask, ProbMap)> {
        let features = self.extract_features(query)?;
        let params = self.condition(&support.image, &support.mask)?;
        let probs = upsample_probs(&classify_pixels(&features, &params)?, self.config.image_size)?;
        Ok((probs.to_mask(), probs))
    }

    /// k-shot prediction: one feature extraction, one classifier per
    /// support, union of the thresholded masks.
    pub fn predict_kshot(&self, query: &RgbImage, supports: &[SupportPair]) -> Result<BinaryMask> {
        if supports.is_empty() {
            return Err(Error::InvalidArgument("k-shot prediction needs at least one support".into()));
        }
        let features = self.extract_features(query)?;
        let mut out: Option<BinaryMask> = None;
        for s in supports {
            let params = self.condition(&s.image, &s.mask)?;
            let mask = upsample_probs(&classify_pixels(&features, &params)?, self.config.image_size)?.to_mask();
            out = Some(match out {
                None => mask,
                Some(acc) => acc.union(&mask)?,
            });
        }
        Ok(out.expect("non-empty supports"))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(self.config.init_seed, self.config.to_meta(), &self.params)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut model = TwoBranchModel::new(ModelConfig::from_checkpoint(ck)?)?;
        ck.load_into(&mut model.params)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// `sigmoid(wᵀ F[:, m, n] + b)` for every feature pixel.
pub fn classify_pixels(features: &FeatureVolume, params: &ClassifierParams) -> Result<ProbMap> {
    if params.w.len() != features.channels() {
        return Err(Error::shape(
            "classify_pixels",
            format!("{} weights for {} channels", params.w.len(), features.channels()),
        ));
    }
    let mut tape = Tape::new();
    let f = tape.constant(features.tensor.clone());
    let kernel = tape.constant(Tensor::new(&[1, params.w.len(), 1, 1], params.w.clone())?);
    let bias = tape.constant(Tensor::new(&[1], vec![params.b])?);
    let logits = tape.conv2d(f, kernel, bias, 1, 0)?;
    let p = tape.sigmoid(logits)?;
    Ok(ProbMap {
        width: features.width(),
        height: features.height(),
        data: tape.data(p)?.to_vec(),
    })
}

/// Align-corners bilinear upsampling of a probability map to `size × size`.
pub fn upsample_probs(probs: &ProbMap, size: usize) -> Result<ProbMap> {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(&[1, probs.height, probs.width], probs.data.clone())?);
    let y = tape.bilinear_upsample(x, size, size)?;
    Ok(ProbMap {
        width: size,
        height: size,
        data: tape.data(y)?.to_vec(),
    })
}
