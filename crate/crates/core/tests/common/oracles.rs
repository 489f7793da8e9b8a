//! Independent reference computations used by the integration tests and
//! the acceptance run.

use std::collections::BTreeMap;

use episeg::baselines::{
    fit_logreg, BaseFeatureNet, BaseNetConfig, LogRegOptions, Nn1, SiameseConfig, SiameseMatcher,
};
use episeg::dataset::{sample_episode, BinaryMask, Episode};
use episeg::hashing::build_hashing;
use episeg::metrics::ClassCounts;
use episeg::predictor::Predictor;
use episeg::tensor::{Tape, Tensor};
use rand::Rng;

use super::rng;

/// `hash_forward(x) == as_matrix · x` bit for bit, plus exact linearity,
/// and the tape gradient equals `Wᵀ g`.
pub fn hashing_case(seed: u64) -> bool {
    let mut r = rng(seed);
    let (m, d) = if seed == 0 { (64, 65) } else { (r.random_range(1..=80), r.random_range(1..=80)) };
    let spec = build_hashing(r.random(), m, d).unwrap();
    let x: Vec<f64> = (0..m).map(|_| r.random_range(-10.0..10.0)).collect();
    let y: Vec<f64> = (0..m).map(|_| r.random_range(-10.0..10.0)).collect();
    let a: f64 = r.random_range(-3.0..3.0);

    let w = spec.as_matrix();
    let dense: Vec<f64> = (0..d)
        .map(|i| (0..m).fold(0.0, |acc, j| acc + w.data()[i * m + j] * x[j]))
        .collect();
    let hashed = spec.forward(&x).unwrap();
    if hashed != dense {
        return false;
    }
    let one_per_row = (0..d).all(|i| w.data()[i * m..(i + 1) * m].iter().map(|v| v.abs()).sum::<f64>() == 1.0);

    let ax_plus_y: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + q).collect();
    let lhs = spec.forward(&ax_plus_y).unwrap();
    let fy = spec.forward(&y).unwrap();
    let rhs: Vec<f64> = hashed.iter().zip(&fy).map(|(p, q)| a * p + q).collect();
    let linear = lhs.iter().zip(&rhs).all(|(p, q)| (p - q).abs() <= 1e-12 * (1.0 + q.abs()));

    let g: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
    let mut tape = Tape::new();
    let xv = tape.param(&Tensor::new(&[m], x).unwrap());
    let out = spec.forward_on(&mut tape, xv).unwrap();
    let gv = tape.constant(Tensor::new(&[d], g.clone()).unwrap());
    let prod = tape.mul(out, gv).unwrap();
    let loss = tape.sum(prod).unwrap();
    tape.backward(loss).unwrap();
    let wt_g: Vec<f64> = (0..m)
        .map(|j| (0..d).fold(0.0, |acc, i| acc + w.data()[i * m + j] * g[i]))
        .collect();
    let grad = tape.grad(xv).unwrap().unwrap();
    let grad_ok = grad.iter().zip(&wt_g).all(|(p, q)| (p - q).abs() <= 1e-12);

    one_per_row && linear && grad_ok
}

/// Share of `+1` signs over 100 specs of shape (m=64, d=65).
pub fn positive_sign_share() -> f64 {
    let mut plus = 0usize;
    let mut total = 0usize;
    for seed in 0..100 {
        let spec = build_hashing(seed, 64, 65).unwrap();
        plus += spec.zeta().iter().filter(|&&z| z > 0.0).count();
        total += spec.zeta().len();
    }
    plus as f64 / total as f64
}

fn random_mask(r: &mut impl Rng, w: usize, h: usize, density: f64) -> BinaryMask {
    BinaryMask::from_fn(w, h, |_, _| r.random_bool(density))
}

/// Random (pred, gt, class) triples; densities vary so some classes end up
/// with an all-zero denominator.
pub fn random_scored_set(seed: u64) -> Vec<(BinaryMask, BinaryMask, u8)> {
    let mut r = rng(seed);
    let n = r.random_range(1..=30);
    let (w, h) = (r.random_range(1..=9), r.random_range(1..=9));
    (0..n)
        .map(|_| {
            let class = r.random_range(1..=5u8);
            let dp = [0.0, 0.2, 0.7][r.random_range(0..3)];
            let dg = [0.0, 0.3, 0.8][r.random_range(0..3)];
            (random_mask(&mut r, w, h, dp), random_mask(&mut r, w, h, dg), class)
        })
        .collect()
}

/// Single pass over every pixel of every pair: `Some(per-class IoU, mean)`,
/// or `None` when no class has a non-zero denominator.
pub fn brute_force_scores(set: &[(BinaryMask, BinaryMask, u8)]) -> Option<(BTreeMap<u8, Option<f64>>, f64)> {
    let mut counts: BTreeMap<u8, [u64; 3]> = BTreeMap::new();
    for (pred, gt, class) in set {
        let c = counts.entry(*class).or_default();
        for y in 0..gt.height() {
            for x in 0..gt.width() {
                match (pred.get(x, y), gt.get(x, y)) {
                    (true, true) => c[0] += 1,
                    (true, false) => c[1] += 1,
                    (false, true) => c[2] += 1,
                    (false, false) => {}
                }
            }
        }
    }
    let per_class: BTreeMap<u8, Option<f64>> = counts
        .iter()
        .map(|(&k, c)| {
            let denom = c[0] + c[1] + c[2];
            (k, (denom > 0).then(|| c[0] as f64 / denom as f64))
        })
        .collect();
    let defined: Vec<f64> = per_class.values().filter_map(|v| *v).collect();
    if defined.is_empty() {
        return None;
    }
    let mean = defined.iter().sum::<f64>() / defined.len() as f64;
    Some((per_class, mean))
}

/// finalize ∘ accumulate agrees exactly with the brute-force counter.
pub fn metric_case(seed: u64) -> bool {
    let set = random_scored_set(seed);
    let mut counts = ClassCounts::new();
    for (p, g, c) in &set {
        counts.accumulate(p, g, *c).unwrap();
    }
    match (counts.finalize(), brute_force_scores(&set)) {
        (Err(_), None) => true,
        (Ok(scores), Some((per_class, mean))) => {
            scores.mean_iou == mean
                && scores.classes.len() == per_class.len()
                && scores.classes.iter().all(|c| per_class.get(&c.class_id) == Some(&c.iou))
        }
        _ => false,
    }
}

/// `[D, h, w]` feature value at channel `c`, cell `(x, y)`.
fn feat(t: &Tensor, c: usize, x: usize, y: usize) -> f64 {
    let (h, w) = (t.shape()[1], t.shape()[2]);
    t.data()[(c * h + y) * w + x]
}

/// Support feature cells in (support, row, column) order with their
/// majority-downsampled labels.
fn support_cells(episode: &Episode, stride: usize, features: impl Fn(&Episode, usize) -> Tensor) -> Vec<(Tensor, usize, usize, bool)> {
    let mut cells = Vec::new();
    for (i, s) in episode.support.iter().enumerate() {
        let f = features(episode, i);
        let (h, w) = (f.shape()[1], f.shape()[2]);
        for y in 0..h {
            for x in 0..w {
                let mut fg = 0;
                for yy in y * stride..(y + 1) * stride {
                    for xx in x * stride..(x + 1) * stride {
                        fg += usize::from(s.mask.get(xx, yy));
                    }
                }
                cells.push((f.clone(), x, y, 2 * fg >= stride * stride));
            }
        }
    }
    cells
}

/// Exhaustive best-match labelling of the query grid, enlarged to image
/// size by nearest neighbour. `score` is larger-is-better.
fn exhaustive_mask(
    episode: &Episode,
    query: &Tensor,
    cells: &[(Tensor, usize, usize, bool)],
    score: impl Fn(&[f64], &[f64]) -> f64,
) -> BinaryMask {
    let (d, gh, gw) = (query.shape()[0], query.shape()[1], query.shape()[2]);
    let mut grid = vec![false; gh * gw];
    for y in 0..gh {
        for x in 0..gw {
            let q: Vec<f64> = (0..d).map(|c| feat(query, c, x, y)).collect();
            let scores: Vec<f64> = cells
                .iter()
                .map(|(f, sx, sy, _)| score(&q, &(0..d).map(|c| feat(f, c, *sx, *sy)).collect::<Vec<_>>()))
                .collect();
            let best = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let first = scores.iter().position(|&s| s == best).unwrap();
            grid[y * gw + x] = cells[first].3;
        }
    }
    let (w, h) = episode.query_image.dimensions();
    let (w, h) = (w as usize, h as usize);
    BinaryMask::from_fn(w, h, |x, y| grid[(y * gh / h) * gw + x * gw / w])
}

fn small_episode(seed: u64, image_size: usize) -> Episode {
    let mut r = rng(seed);
    let ds = super::toy_dataset(40, image_size, seed);
    let k = r.random_range(1..=3);
    sample_episode(&ds, k, &mut r).unwrap()
}

/// Random untrained base net on a 16×16 image (8×8 feature grid). Returns
/// the nn1 mask when it equals the exhaustive nearest-neighbour labelling.
pub fn nn1_case(seed: u64) -> Option<BinaryMask> {
    let episode = small_episode(seed, 16);
    let labels = (1..=10).collect();
    let net = BaseFeatureNet::new(
        BaseNetConfig {
            image_size: 16,
            channels: vec![4, 5],
            seed,
            ..BaseNetConfig::default()
        },
        &labels,
    )
    .unwrap();
    let got = Nn1 { net: &net }.predict(&episode).unwrap();
    let cells = support_cells(&episode, net.stride(), |e, i| net.features(&e.support[i].image).unwrap());
    let query = net.features(&episode.query_image).unwrap();
    let want = exhaustive_mask(&episode, &query, &cells, |a, b| {
        -a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>()
    });
    (got == want).then_some(got)
}

/// Random siamese matcher on a 16×16 image. Returns the prediction when it
/// equals the exhaustive highest-similarity labelling.
pub fn siamese_case(seed: u64) -> Option<BinaryMask> {
    let episode = small_episode(seed, 16);
    let m = SiameseMatcher::new(SiameseConfig {
        image_size: 16,
        channels: vec![4, 5],
        seed,
        ..SiameseConfig::default()
    })
    .unwrap();
    let got = m.predict(&episode).unwrap();
    let cells = support_cells(&episode, m.stride(), |e, i| m.features(&e.support[i].image).unwrap());
    let query = m.features(&episode.query_image).unwrap();
    let (alpha, beta) = (m.alpha().to_vec(), m.beta());
    let want = exhaustive_mask(&episode, &query, &cells, |a, b| {
        beta + alpha.iter().zip(a.iter().zip(b)).map(|(al, (p, q))| al * (p - q).abs()).sum::<f64>()
    });
    (got == want).then_some(got)
}

/// Gradient descent with fixed step `1/L` on the regularised mean
/// logistic loss, run until the gradient is tiny.
pub fn descent_logreg(x: &[f64], y: &[bool], dim: usize, reg: f64) -> (Vec<f64>, f64) {
    let n = y.len() as f64;
    let sq_norm_bound: f64 = x.chunks(dim).map(|r| 1.0 + r.iter().map(|v| v * v).sum::<f64>()).sum::<f64>() / n;
    let step = 1.0 / (0.25 * sq_norm_bound + reg);
    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    for _ in 0..5_000_000 {
        let mut gw = vec![0.0; dim];
        let mut gb = 0.0;
        for (row, &label) in x.chunks(dim).zip(y) {
            let z: f64 = row.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>() + b;
            let p = 1.0 / (1.0 + (-z).exp());
            let resid = p - f64::from(u8::from(label));
            for (g, v) in gw.iter_mut().zip(row) {
                *g += resid * v / n;
            }
            gb += resid / n;
        }
        for (g, v) in gw.iter_mut().zip(&w) {
            *g += reg * v;
        }
        let size = gw.iter().chain(std::iter::once(&gb)).fold(0.0f64, |m, g| m.max(g.abs()));
        if size < 1e-13 {
            break;
        }
        for (v, g) in w.iter_mut().zip(&gw) {
            *v -= step * g;
        }
        b -= step * gb;
    }
    (w, b)
}

/// Newton solution versus the descent oracle on a small noisy problem.
pub fn logreg_case(seed: u64) -> f64 {
    let mut r = rng(seed);
    let dim = r.random_range(1..=4);
    let n = r.random_range(8..=40);
    let truth: Vec<f64> = (0..dim).map(|_| r.random_range(-2.0..2.0)).collect();
    let x: Vec<f64> = (0..n * dim).map(|_| r.random_range(-1.5..1.5)).collect();
    let mut y: Vec<bool> = x
        .chunks(dim)
        .map(|row| row.iter().zip(&truth).map(|(a, b)| a * b).sum::<f64>() + r.random_range(-0.8..0.8) > 0.0)
        .collect();
    // Both classes present.
    y[0] = true;
    y[1] = false;
    let reg = 0.05;
    let opts = LogRegOptions {
        reg,
        ..LogRegOptions::default()
    };
    let fit = fit_logreg(&x, &y, dim, &opts).unwrap();
    let (w, b) = descent_logreg(&x, &y, dim, reg);
    fit.w
        .iter()
        .zip(&w)
        .map(|(p, q)| (p - q).abs())
        .fold((fit.b - b).abs(), f64::max)
}

/// Samples `n` episodes (k cycling through 1..=5) from each side of fold 4
/// and checks every structural invariant plus class membership.
pub fn sampler_violations(n: usize, seed: u64) -> Vec<String> {
    use episeg::dataset::{build_folds, generate_synthetic, remap_to_fold, SyntheticConfig};
    let ds = generate_synthetic(&SyntheticConfig::default(), seed).unwrap();
    let spec = build_folds(10, 2, 4).unwrap();
    let mut bad = Vec::new();
    for labels in [&spec.train_labels, &spec.test_labels] {
        let view = remap_to_fold(&ds, labels).unwrap();
        let mut r = rng(seed);
        for i in 0..n {
            let k = 1 + i % 5;
            let e = match sample_episode(&view, k, &mut r) {
                Ok(e) => e,
                Err(err) => {
                    bad.push(format!("episode {i}: {err}"));
                    continue;
                }
            };
            if let Err(err) = e.validate() {
                bad.push(format!("episode {i}: {err}"));
            }
            if e.k() != k || !labels.contains(&e.class_id) {
                bad.push(format!("episode {i}: k {} class {}", e.k(), e.class_id));
            }
            let q = view.sample(e.query_index);
            if e.query_mask != BinaryMask::from_labels(&q.labels, e.class_id) {
                bad.push(format!("episode {i}: query mask is not the class raster"));
            }
        }
    }
    bad
}

/// Pixels carrying a test label after remapping to the train labels.
pub fn leaked_test_pixels(seed: u64) -> usize {
    use episeg::dataset::{build_folds, generate_synthetic, remap_to_fold, SyntheticConfig};
    let ds = generate_synthetic(&SyntheticConfig::default(), seed).unwrap();
    (0..5)
        .map(|fold| {
            let spec = build_folds(10, 2, fold).unwrap();
            let train = remap_to_fold(&ds, &spec.train_labels).unwrap();
            train
                .samples()
                .iter()
                .flat_map(|s| s.labels.as_raw().iter())
                .filter(|v| spec.test_labels.contains(v))
                .count()
        })
        .sum()
}

/// Fold 0 and fold 3 test classes under the 20-class, 5-per-fold split.
pub fn pascal_folds_match() -> bool {
    use episeg::dataset::{build_folds, pascal_voc_catalog};
    let catalog = pascal_voc_catalog();
    let names = |fold| -> Vec<String> {
        build_folds(20, 5, fold)
            .unwrap()
            .test_labels
            .iter()
            .map(|&c| catalog.name(c).unwrap().to_string())
            .collect()
    };
    names(0) == ["aeroplane", "bicycle", "bird", "boat", "bottle"]
        && names(3) == ["potted plant", "sheep", "sofa", "train", "tv/monitor"]
}
