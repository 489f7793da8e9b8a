#![allow(dead_code)]

pub mod ops;
pub mod oracles;

use episeg::dataset::{build_folds, generate_synthetic, remap_to_fold, FoldSpec, SegDataset, SyntheticConfig};
use episeg::tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Compares tape gradients of `Σ r ⊙ f(inputs)` against central differences
/// for every input element; `r` is a fixed random weighting drawn from
/// `seed`. Returns the worst per-input relative error.
pub fn grad_check(inputs: &[Tensor], seed: u64, f: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let weights = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let y = f(&mut tape, &vars);
        let n = tape.shape(y).unwrap().iter().product::<usize>();
        let mut r = rng(seed);
        let shape = tape.shape(y).unwrap().to_vec();
        Tensor::from_fn(&shape, |_| if n == 1 { 1.0 } else { r.random_range(-1.0..1.0) })
    };
    let scalar = |tape: &mut Tape, vars: &[Var]| {
        let y = f(tape, vars);
        let w = tape.constant(weights.clone());
        let prod = tape.mul(y, w).unwrap();
        tape.sum(prod).unwrap()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let loss = scalar(&mut tape, &vars);
    tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            tape.grad(v)
                .unwrap()
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();

    let eval = |xs: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let l = scalar(&mut tape, &vars);
        tape.data(l).unwrap()[0]
    };
    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; t.numel()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut xs = inputs.to_vec();
            xs[i].data_mut()[j] = t.data()[j] + FD_STEP;
            let up = eval(&xs);
            xs[i].data_mut()[j] = t.data()[j] - FD_STEP;
            let down = eval(&xs);
            *slot = (up - down) / (2.0 * FD_STEP);
        }
        worst = worst.max(rel_err(&analytic[i], &numeric));
    }
    worst
}

/// Small synthetic corpus used by integration tests.
pub fn toy_dataset(num_images: usize, image_size: usize, seed: u64) -> SegDataset {
    let cfg = SyntheticConfig {
        num_images,
        image_size,
        ..SyntheticConfig::default()
    };
    generate_synthetic(&cfg, seed).unwrap()
}

/// Train and test views of `dataset` under the 10-class, 2-per-fold split.
pub fn toy_split(dataset: &SegDataset, fold: usize) -> (FoldSpec, SegDataset, SegDataset) {
    let spec = build_folds(10, 2, fold).unwrap();
    let train = remap_to_fold(dataset, &spec.train_labels).unwrap();
    let test = remap_to_fold(dataset, &spec.test_labels).unwrap();
    (spec, train, test)
}

/// Direct convolution over an explicitly zero-padded copy of the input,
/// accumulating from the bias in (channel, ky, kx) order.
pub fn naive_conv(x: &Tensor, k: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Vec<f64> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let mut padded = vec![0.0; c * ph * pw];
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                padded[ch * ph * pw + (y + pad) * pw + xx + pad] = x.data()[ch * h * w + y * w + xx];
            }
        }
    }
    let (oh, ow) = ((ph - kh) / stride + 1, (pw - kw) / stride + 1);
    let mut out = Vec::with_capacity(co * oh * ow);
    for o in 0..co {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b.data()[o];
                for ch in 0..c {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let kv = k.data()[((o * c + ch) * kh + ky) * kw + kx];
                            let xv = padded[ch * ph * pw + (oy * stride + ky) * pw + ox * stride + kx];
                            acc += kv * xv;
                        }
                    }
                }
                out.push(acc);
            }
        }
    }
    out
}
