//! L2-regularised logistic regression on support feature pixels.
//!
//! Minimises `J(w, b) = (1/n) Σ log(1 + exp(-s_i (w·x_i + b))) + (reg/2)‖w‖²`
//! with `s_i = ±1`; the bias is not regularised. Solved by damped Newton
//! steps (Cholesky solve, backtracking line search).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{pixel_rows, pool_support, BaseFeatureNet};
use crate::dataset::{BinaryMask, Episode};
use crate::model::{upsample_probs, ProbMap};
use crate::predictor::Predictor;
use crate::tensor::sigmoid;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LogRegOptions {
    pub reg: f64,
    pub max_iter: usize,
    /// Stop when the largest gradient component falls below this.
    pub tol: f64,
}

impl Default for LogRegOptions {
    fn default() -> Self {
        LogRegOptions {
            reg: 1e-3,
            max_iter: 500,
            tol: 1e-9,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRegFit {
    pub w: Vec<f64>,
    pub b: f64,
    pub iterations: usize,
}

impl LogRegFit {
    pub fn prob(&self, x: &[f64]) -> f64 {
        sigmoid(self.w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + self.b)
    }
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn objective(x: &[f64], s: &[f64], dim: usize, reg: f64, wb: &DVector<f64>) -> f64 {
    let n = s.len() as f64;
    let data: f64 = x
        .chunks(dim)
        .zip(s)
        .map(|(xi, &si)| {
            let z = xi.iter().zip(wb.iter()).map(|(a, b)| a * b).sum::<f64>() + wb[dim];
            softplus(-si * z)
        })
        .sum();
    data / n + 0.5 * reg * wb.rows(0, dim).norm_squared()
}

/// Fits `x` (`n × dim`, row-major) against binary labels `y`. When only one
/// class is present the result is the constant classifier for it.
pub fn fit_logreg(x: &[f64], y: &[bool], dim: usize, options: &LogRegOptions) -> Result<LogRegFit> {
    let n = y.len();
    if n == 0 || dim == 0 || x.len() != n * dim {
        return Err(Error::InvalidArgument("logreg needs n × dim features and n labels".into()));
    }
    if !(options.reg > 0.0) {
        return Err(Error::InvalidArgument("logreg regularisation must be positive".into()));
    }
    let positives = y.iter().filter(|&&v| v).count();
    if positives == 0 || positives == n {
        return Ok(LogRegFit {
            w: vec![0.0; dim],
            b: if positives == 0 { -1e3 } else { 1e3 },
            iterations: 0,
        });
    }
    let s: Vec<f64> = y.iter().map(|&v| if v { 1.0 } else { -1.0 }).collect();
    let p = dim + 1;
    let mut wb = DVector::<f64>::zeros(p);
    let mut current = objective(x, &s, dim, options.reg, &wb);
    for iter in 0..options.max_iter {
        let mut grad = DVector::<f64>::zeros(p);
        let mut hess = DMatrix::<f64>::zeros(p, p);
        for (xi, &si) in x.chunks(dim).zip(&s) {
            let z = xi.iter().zip(wb.iter()).map(|(a, b)| a * b).sum::<f64>() + wb[dim];
            let q = sigmoid(-si * z);
            let curv = q * (1.0 - q);
            for a in 0..p {
                let xa = if a < dim { xi[a] } else { 1.0 };
                grad[a] -= si * q * xa;
                for b in 0..=a {
                    let xb = if b < dim { xi[b] } else { 1.0 };
                    hess[(a, b)] += curv * xa * xb;
                }
            }
        }
        grad /= n as f64;
        hess /= n as f64;
        for a in 0..p {
            for b in 0..a {
                hess[(b, a)] = hess[(a, b)];
            }
        }
        for a in 0..dim {
            grad[a] += options.reg * wb[a];
            hess[(a, a)] += options.reg;
        }
        if grad.amax() < options.tol {
            return Ok(LogRegFit {
                w: wb.rows(0, dim).iter().copied().collect(),
                b: wb[dim],
                iterations: iter,
            });
        }
        // The bias direction can be nearly flat when one class dominates.
        hess[(dim, dim)] += 1e-12;
        let step = hess
            .cholesky()
            .ok_or(Error::NoConvergence(iter))?
            .solve(&grad);
        let slope = grad.dot(&step);
        let mut t = 1.0;
        loop {
            let trial = &wb - t * &step;
            let value = objective(x, &s, dim, options.reg, &trial);
            if value <= current - 1e-4 * t * slope || t < 1e-12 {
                wb = trial;
                current = value;
                break;
            }
            t *= 0.5;
        }
    }
    Err(Error::NoConvergence(options.max_iter))
}

/// Logistic regression fitted per episode on base-net support pixels.
pub struct LogReg<'a> {
    pub net: &'a BaseFeatureNet,
    pub options: LogRegOptions,
}

impl Predictor for LogReg<'_> {
    fn name(&self) -> &str {
        "logreg"
    }

    fn predict(&self, episode: &Episode) -> Result<BinaryMask> {
        let pooled = pool_support(&episode.support, self.net.stride(), |s| self.net.features(&s.image))?;
        let dim = self.net.feature_dim();
        let fit = fit_logreg(&pooled.rows, &pooled.labels, dim, &self.options)?;
        let q = self.net.features(&episode.query_image)?;
        let probs = ProbMap {
            width: q.shape()[2],
            height: q.shape()[1],
            data: pixel_rows(&q).chunks(dim).map(|x| fit.prob(x)).collect(),
        };
        let (w, _) = episode.query_image.dimensions();
        Ok(upsample_probs(&probs, w as usize)?.to_mask())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separable_points_are_fit_exactly() {
        let x = [-2.0, -1.0, 1.0, 2.0];
        let y = [false, false, true, true];
        let fit = fit_logreg(&x, &y, 1, &LogRegOptions::default()).unwrap();
        for (xi, yi) in x.iter().zip(y) {
            assert_eq!(fit.prob(&[*xi]) >= 0.5, yi);
        }
    }

    #[test]
    fn heavy_regularisation_shrinks_weights() {
        let x = [-2.0, -1.0, 1.0, 2.0, 3.0];
        let y = [false, false, true, true, true];
        let opts = LogRegOptions {
            reg: 1e8,
            ..LogRegOptions::default()
        };
        let fit = fit_logreg(&x, &y, 1, &opts).unwrap();
        assert!(fit.w[0].abs() < 1e-7);
        // Only the bias remains: sigmoid(b) equals the positive rate.
        assert!((sigmoid(fit.b) - 0.6).abs() < 1e-6);
    }

    #[test]
    fn single_class_falls_back_to_constant() {
        let fit = fit_logreg(&[1.0, 2.0], &[true, true], 1, &LogRegOptions::default()).unwrap();
        assert!(fit.prob(&[-100.0]) > 0.5);
    }
}
