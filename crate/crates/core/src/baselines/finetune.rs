//! Per-episode fine-tuning of the base network's last two conv blocks plus
//! a fresh binary 1×1 head. Penultimate features are standardised per
//! channel with statistics of the support pixels (gradients flow through
//! the statistics); query features are normalised with the same support
//! statistics at prediction time.

use serde::{Deserialize, Serialize};

use super::{pixel_rows, BaseFeatureNet};
use crate::dataset::{image_to_tensor, BinaryMask, Episode, RgbImage};
use crate::model::{upsample_probs, ProbMap};
use crate::predictor::Predictor;
use crate::tensor::{sgd_step, sigmoid, ChannelStats, SgdState, Tape, Tensor, Var};
use crate::{Error, Result};

const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FineTuneConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub momentum: f64,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        FineTuneConfig {
            steps: 20,
            learning_rate: 0.05,
            momentum: 0.0,
        }
    }
}

pub struct FineTune<'a> {
    pub net: &'a BaseFeatureNet,
    pub config: FineTuneConfig,
}

/// Working copy of the trainable tail: conv kernel/bias pairs of the last
/// two encoder blocks, then head weight `[1, D, 1, 1]` and bias `[1]`.
struct Tail {
    first_block: usize,
    params: Vec<Tensor>,
}

impl FineTune<'_> {
    fn frozen_prefix(&self, tape: &mut Tape, image: &RgbImage, first_block: usize) -> Result<Tensor> {
        let vars = self.net.frozen_vars(tape);
        let x = tape.constant(image_to_tensor(image));
        let mut out = x;
        for b in 0..first_block {
            out = tape.conv2d(out, vars[2 * b], vars[2 * b + 1], 1, 1)?;
            out = tape.relu(out)?;
            out = tape.maxpool2(out)?;
        }
        Ok(tape.value(out)?.clone())
    }

    /// Features `[D, N]` of the cached inputs, columns concatenated.
    fn tail_features(&self, tape: &mut Tape, tail: &Tail, vars: &[Var], inputs: &[Tensor]) -> Result<Var> {
        let d = self.net.feature_dim();
        let mut cols = Vec::with_capacity(inputs.len());
        for input in inputs {
            let x = tape.constant(input.clone());
            let f = self.net.encode_from(tape, x, &vars[..vars.len() - 2], tail.first_block)?;
            let n = tape.shape(f)?[1] * tape.shape(f)?[2];
            cols.push(tape.reshape(f, &[d, n])?);
        }
        tape.concat_cols(&cols)
    }

    /// Mean binary cross-entropy on the support pixels, recorded on `tape`.
    fn support_loss(&self, tape: &mut Tape, tail: &Tail, vars: &[Var], inputs: &[Tensor], target: &[f64]) -> Result<Var> {
        let d = self.net.feature_dim();
        let f = self.tail_features(tape, tail, vars, inputs)?;
        let (z, _) = tape.standardize_channels(f, NORM_EPS)?;
        let n = target.len();
        let z = tape.reshape(z, &[d, n, 1])?;
        let h = vars.len() - 2;
        let logits = tape.conv2d(z, vars[h], vars[h + 1], 1, 0)?;
        let p = tape.sigmoid(logits)?;
        let total = tape.bce_sum(p, target, 1e-12)?;
        tape.scale(total, 1.0 / n as f64)
    }

    /// Support loss after each of `steps` updates (index 0 is before any).
    pub fn loss_trace(&self, episode: &Episode) -> Result<Vec<f64>> {
        let mut trace = Vec::new();
        self.fit(episode, |l| trace.push(l))?;
        Ok(trace)
    }

    fn fit(&self, episode: &Episode, mut on_loss: impl FnMut(f64)) -> Result<(Tail, ChannelStats)> {
        let blocks = self.net.encoder_blocks();
        let first_block = blocks.saturating_sub(2);
        let src = self.net.params();
        let mut params: Vec<Tensor> = (2 * first_block..2 * blocks)
            .map(|i| src.get(i).clone().requires_grad())
            .collect();
        let d = self.net.feature_dim();
        params.push(Tensor::zeros(&[1, d, 1, 1]).requires_grad());
        params.push(Tensor::zeros(&[1]).requires_grad());
        let tail = Tail { first_block, params };

        let mut prefix_tape = Tape::new();
        let inputs = episode
            .support
            .iter()
            .map(|s| self.frozen_prefix(&mut prefix_tape, &s.image, first_block))
            .collect::<Result<Vec<_>>>()?;
        let stride = self.net.stride();
        let target: Vec<f64> = episode
            .support
            .iter()
            .map(|s| s.mask.downsample_majority(stride).map(|m| m.to_f64()))
            .collect::<Result<Vec<_>>>()?
            .concat();

        let mut tail = tail;
        let mut sgd = SgdState::new(self.config.learning_rate, self.config.momentum, &tail.params)?;
        for step in 0..=self.config.steps {
            let mut tape = Tape::new();
            let vars: Vec<Var> = tail.params.iter().map(|t| tape.param(t)).collect();
            let loss = self.support_loss(&mut tape, &tail, &vars, &inputs, &target)?;
            let value = tape.data(loss)?[0];
            if !value.is_finite() {
                return Err(Error::Diverged { iteration: step });
            }
            on_loss(value);
            if step == self.config.steps {
                break;
            }
            tape.backward(loss)?;
            for (t, &v) in tail.params.iter_mut().zip(&vars) {
                t.zero_grad();
                if let Some(g) = tape.grad(v)? {
                    t.grad_mut().expect("trainable").copy_from_slice(g);
                }
            }
            sgd_step(&mut tail.params, &mut sgd).map_err(|_| Error::Diverged { iteration: step + 1 })?;
        }

        let mut tape = Tape::new();
        let vars: Vec<Var> = tail.params.iter().map(|t| tape.constant(t.clone())).collect();
        let f = self.tail_features(&mut tape, &tail, &vars, &inputs)?;
        let (_, stats) = tape.standardize_channels(f, NORM_EPS)?;
        Ok((tail, stats))
    }
}

impl FineTune<'_> {
    /// Query foreground probabilities on the feature grid after fitting to
    /// the supports.
    pub fn probabilities(&self, episode: &Episode) -> Result<ProbMap> {
        let (tail, stats) = self.fit(episode, |_| {})?;
        let mut tape = Tape::new();
        let query_in = self.frozen_prefix(&mut tape, &episode.query_image, tail.first_block)?;
        let vars: Vec<Var> = tail.params.iter().map(|t| tape.constant(t.clone())).collect();
        let f = self.tail_features(&mut tape, &tail, &vars, std::slice::from_ref(&query_in))?;
        let d = self.net.feature_dim();
        let n = tape.shape(f)?[1];
        let h = tail.params.len() - 2;
        let (w, b) = (tail.params[h].data(), tail.params[h + 1].data()[0]);
        let rows = pixel_rows(&tape.value(f)?.clone().reshaped(&[d, n, 1])?);
        let side = self.net.config().image_size / self.net.stride();
        Ok(ProbMap {
            width: side,
            height: side,
            data: rows
                .chunks(d)
                .map(|x| {
                    let z: f64 = (0..d).map(|c| w[c] * (x[c] - stats.mean[c]) * stats.inv_std[c]).sum();
                    sigmoid(z + b)
                })
                .collect(),
        })
    }
}

impl Predictor for FineTune<'_> {
    fn name(&self) -> &str {
        "finetune"
    }

    fn predict(&self, episode: &Episode) -> Result<BinaryMask> {
        let probs = self.probabilities(episode)?;
        let (qw, _) = episode.query_image.dimensions();
        Ok(upsample_probs(&probs, qw as usize)?.to_mask())
    }
}
