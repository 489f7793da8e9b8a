//! Randomised gradient-check cases, one generator per tape operation.

use std::sync::Arc;

use episeg::dataset::sample_episode;
use episeg::model::{ModelConfig, TwoBranchModel};
use episeg::tensor::{Tape, Tensor, Var};
use episeg::training::{episode_loss, episode_loss_on};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{grad_check, rel_err, rng, uniform, FD_STEP};

pub type OpCase = fn(u64) -> f64;

/// Values bounded away from zero, for ops with a kink there.
fn away_from_zero(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = r.random_range(0.01..1.0);
        if r.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn conv2d(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (ci, co) = (r.random_range(1..=3), r.random_range(1..=3));
    let (h, w) = (r.random_range(3..=7), r.random_range(3..=7));
    let pad = r.random_range(0..=1);
    let k = r.random_range(1..=3);
    let stride = r.random_range(1..=2);
    let inputs = [
        uniform(&mut r, &[ci, h, w], -1.0, 1.0),
        uniform(&mut r, &[co, ci, k, k], -1.0, 1.0),
        uniform(&mut r, &[co], -1.0, 1.0),
    ];
    grad_check(&inputs, seed, |t, v| t.conv2d(v[0], v[1], v[2], stride, pad).unwrap())
}

fn relu(seed: u64) -> f64 {
    let mut r = rng(seed);
    let n = r.random_range(1..=20);
    grad_check(&[away_from_zero(&mut r, &[n])], seed, |t, v| t.relu(v[0]).unwrap())
}

fn sigmoid(seed: u64) -> f64 {
    let mut r = rng(seed);
    let n = r.random_range(1..=20);
    grad_check(&[uniform(&mut r, &[n], -4.0, 4.0)], seed, |t, v| t.sigmoid(v[0]).unwrap())
}

fn maxpool2(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (c, h, w) = (r.random_range(1..=3), r.random_range(2..=7), r.random_range(2..=7));
    // Distinct levels keep every window's winner stable under the FD step.
    let mut levels: Vec<usize> = (0..c * h * w).collect();
    levels.shuffle(&mut r);
    let x = Tensor::new(
        &[c, h, w],
        levels.iter().map(|&l| l as f64 * 0.05 + r.random_range(0.0..0.01)).collect(),
    )
    .unwrap();
    grad_check(&[x], seed, |t, v| t.maxpool2(v[0]).unwrap())
}

fn linear(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (n, m) = (r.random_range(1..=6), r.random_range(1..=6));
    let inputs = [
        uniform(&mut r, &[m], -1.0, 1.0),
        uniform(&mut r, &[n, m], -1.0, 1.0),
        uniform(&mut r, &[n], -1.0, 1.0),
    ];
    grad_check(&inputs, seed, |t, v| t.linear(v[0], v[1], v[2]).unwrap())
}

fn global_avg_pool(seed: u64) -> f64 {
    let mut r = rng(seed);
    let shape = [r.random_range(1..=4), r.random_range(1..=5), r.random_range(1..=5)];
    grad_check(&[uniform(&mut r, &shape, -1.0, 1.0)], seed, |t, v| t.global_avg_pool(v[0]).unwrap())
}

fn add(seed: u64) -> f64 {
    let mut r = rng(seed);
    let shape = [r.random_range(1..=4), r.random_range(1..=4)];
    let inputs = [uniform(&mut r, &shape, -1.0, 1.0), uniform(&mut r, &shape, -1.0, 1.0)];
    grad_check(&inputs, seed, |t, v| t.add(v[0], v[1]).unwrap())
}

fn mul(seed: u64) -> f64 {
    let mut r = rng(seed);
    let shape = [r.random_range(1..=4), r.random_range(1..=4)];
    let inputs = [uniform(&mut r, &shape, -1.0, 1.0), uniform(&mut r, &shape, -1.0, 1.0)];
    grad_check(&inputs, seed, |t, v| t.mul(v[0], v[1]).unwrap())
}

fn scale(seed: u64) -> f64 {
    let mut r = rng(seed);
    let n = r.random_range(1..=10);
    let factor = r.random_range(-3.0..3.0);
    grad_check(&[uniform(&mut r, &[n], -1.0, 1.0)], seed, |t, v| t.scale(v[0], factor).unwrap())
}

fn sum(seed: u64) -> f64 {
    let mut r = rng(seed);
    let shape = [r.random_range(1..=4), r.random_range(1..=4)];
    grad_check(&[uniform(&mut r, &shape, -1.0, 1.0)], seed, |t, v| t.sum(v[0]).unwrap())
}

fn reshape(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (a, b) = (r.random_range(1..=4), r.random_range(1..=4));
    grad_check(&[uniform(&mut r, &[a, b], -1.0, 1.0)], seed, |t, v| t.reshape(v[0], &[b, a]).unwrap())
}

fn slice(seed: u64) -> f64 {
    let mut r = rng(seed);
    let n = r.random_range(1..=12);
    let start = r.random_range(0..n);
    let len = r.random_range(1..=n - start);
    grad_check(&[uniform(&mut r, &[n], -1.0, 1.0)], seed, |t, v| t.slice(v[0], start, len).unwrap())
}

fn bilinear_upsample(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (c, h, w) = (r.random_range(1..=2), r.random_range(1..=4), r.random_range(1..=4));
    let (oh, ow) = (r.random_range(h..=9), r.random_range(w..=9));
    grad_check(&[uniform(&mut r, &[c, h, w], -1.0, 1.0)], seed, |t, v| {
        t.bilinear_upsample(v[0], oh, ow).unwrap()
    })
}

fn signed_gather(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (m, d) = (r.random_range(1..=6), r.random_range(1..=10));
    let index: Arc<[usize]> = (0..d).map(|_| r.random_range(0..m)).collect();
    let sign: Arc<[f64]> = (0..d).map(|_| if r.random_bool(0.5) { 1.0 } else { -1.0 }).collect();
    grad_check(&[uniform(&mut r, &[m], -1.0, 1.0)], seed, |t, v| {
        t.signed_gather(v[0], index.clone(), sign.clone()).unwrap()
    })
}

fn bce_sum(seed: u64) -> f64 {
    let mut r = rng(seed);
    let n = r.random_range(1..=12);
    let target: Vec<f64> = (0..n)
        .map(|_| if r.random_bool(0.3) { r.random_range(0.0..1.0) } else { f64::from(r.random_bool(0.5)) })
        .collect();
    grad_check(&[uniform(&mut r, &[n], 0.05, 0.95)], seed, |t, v| t.bce_sum(v[0], &target, 1e-12).unwrap())
}

fn softmax_cross_entropy(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (c, h, w) = (r.random_range(2..=5), r.random_range(1..=3), r.random_range(1..=3));
    let labels: Vec<usize> = (0..h * w).map(|_| r.random_range(0..c)).collect();
    grad_check(&[uniform(&mut r, &[c, h, w], -2.0, 2.0)], seed, |t, v| {
        t.softmax_cross_entropy(v[0], &labels).unwrap()
    })
}

fn standardize_channels(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (c, n) = (r.random_range(1..=4), r.random_range(2..=8));
    grad_check(&[uniform(&mut r, &[c, n], -1.0, 1.0)], seed, |t, v| {
        t.standardize_channels(v[0], 1e-5).unwrap().0
    })
}

fn concat_cols(seed: u64) -> f64 {
    let mut r = rng(seed);
    let c = r.random_range(1..=3);
    let parts = r.random_range(1..=3);
    let inputs: Vec<Tensor> = (0..parts)
        .map(|_| {
            let n = r.random_range(1..=4);
            uniform(&mut r, &[c, n], -1.0, 1.0)
        })
        .collect();
    grad_check(&inputs, seed, |t, v| t.concat_cols(v).unwrap())
}

fn select_cols(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (c, n) = (r.random_range(1..=3), r.random_range(1..=6));
    let index: Vec<usize> = (0..r.random_range(1..=8)).map(|_| r.random_range(0..n)).collect();
    grad_check(&[uniform(&mut r, &[c, n], -1.0, 1.0)], seed, |t, v| t.select_cols(v[0], &index).unwrap())
}

fn l1_similarity_logits(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (c, na, nb) = (r.random_range(1..=4), r.random_range(1..=4), r.random_range(1..=4));
    // a on a coarse grid, b offset by half a step: |a - b| never nears 0.
    let grid = |r: &mut ChaCha8Rng, shape: &[usize], offset: f64| {
        Tensor::from_fn(shape, |_| r.random_range(-8..8) as f64 * 0.1 + offset)
    };
    let inputs = [
        grid(&mut r, &[c, na], 0.0),
        grid(&mut r, &[c, nb], 0.05),
        uniform(&mut r, &[c], -1.0, 1.0),
        uniform(&mut r, &[1], -1.0, 1.0),
    ];
    grad_check(&inputs, seed, |t, v| t.l1_similarity_logits(v[0], v[1], v[2], v[3]).unwrap())
}

pub const OP_CASES: [(&str, OpCase); 21] = [
    ("conv2d", conv2d),
    ("relu", relu),
    ("sigmoid", sigmoid),
    ("maxpool2", maxpool2),
    ("linear", linear),
    ("global_avg_pool", global_avg_pool),
    ("add", add),
    ("mul", mul),
    ("scale", scale),
    ("sum", sum),
    ("reshape", reshape),
    ("slice", slice),
    ("bilinear_upsample", bilinear_upsample),
    ("signed_gather", signed_gather),
    ("bce_sum", bce_sum),
    ("softmax_cross_entropy", softmax_cross_entropy),
    ("standardize_channels", standardize_channels),
    ("concat_cols", concat_cols),
    ("select_cols", select_cols),
    ("l1_similarity_logits", l1_similarity_logits),
    ("shared_subexpression", shared_subexpression),
];

/// `x` used on two paths (`x·x + relu-free scale of x`), exercising
/// accumulation across fan-out.
fn shared_subexpression(seed: u64) -> f64 {
    let mut r = rng(seed);
    let n = r.random_range(1..=8);
    grad_check(&[uniform(&mut r, &[n], -1.0, 1.0)], seed, |t, v| {
        let sq = t.mul(v[0], v[0]).unwrap();
        let s = t.scale(v[0], 0.7).unwrap();
        t.add(sq, s).unwrap()
    })
}

/// Model configuration small enough for finite differences over the whole
/// support → classifier → query → loss pipeline.
pub fn tiny_model_config(seed: u64) -> ModelConfig {
    ModelConfig {
        image_size: 16,
        cond_channels: vec![2, 3],
        seg_channels: vec![3, 4],
        head_dim: 5,
        hash_seed: seed,
        init_seed: seed,
    }
}

/// Relative error between tape and central-difference gradients of the
/// episode loss for 20 randomly chosen parameter entries.
pub fn pipeline_case(seed: u64) -> f64 {
    let mut r = rng(seed);
    let dataset = super::toy_dataset(8, 16, seed);
    let episode = sample_episode(&dataset, 1, &mut r).unwrap();
    let mut model = TwoBranchModel::new(tiny_model_config(seed)).unwrap();
    // Spread weights so probabilities are far from the flat 0.5 regime.
    for i in 0..model.params().len() {
        for v in model.params_mut().get_mut(i).data_mut() {
            *v += r.random_range(-0.3..0.3);
        }
    }

    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let loss = episode_loss_on(&model, &mut tape, &bound, &episode).unwrap();
    tape.backward(loss).unwrap();
    let vars: Vec<Var> = bound.vars().to_vec();

    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for _ in 0..20 {
        let i = r.random_range(0..model.params().len());
        let j = r.random_range(0..model.params().get(i).numel());
        let g = tape.grad(vars[i]).unwrap().map_or(0.0, |g| g[j]);
        let x0 = model.params().get(i).data()[j];
        model.params_mut().get_mut(i).data_mut()[j] = x0 + FD_STEP;
        let up = episode_loss(&model, &episode).unwrap();
        model.params_mut().get_mut(i).data_mut()[j] = x0 - FD_STEP;
        let down = episode_loss(&model, &episode).unwrap();
        model.params_mut().get_mut(i).data_mut()[j] = x0;
        analytic.push(g);
        numeric.push((up - down) / (2.0 * FD_STEP));
    }
    rel_err(&analytic, &numeric)
}
