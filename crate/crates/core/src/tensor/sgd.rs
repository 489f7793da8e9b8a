use super::Tensor;
use crate::{Error, Result};

/// Momentum SGD with per-parameter learning-rate multipliers.
///
/// Update: `v <- momentum·v + grad`, `p <- p - lr·multiplier·v`, then the
/// gradient is zeroed.
#[derive(Clone, Debug, PartialEq)]
pub struct SgdState {
    learning_rate: f64,
    momentum: f64,
    velocity: Vec<Vec<f64>>,
    multipliers: Vec<f64>,
}

impl SgdState {
    /// Builds state for `params` with every multiplier set to 1.
    pub fn new(learning_rate: f64, momentum: f64, params: &[Tensor]) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidArgument(format!(
                "momentum must lie in [0, 1), got {momentum}"
            )));
        }
        Ok(SgdState {
            learning_rate,
            momentum,
            velocity: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            multipliers: vec![1.0; params.len()],
        })
    }

    pub fn with_multipliers(mut self, multipliers: Vec<f64>) -> Result<Self> {
        if multipliers.len() != self.velocity.len() {
            return Err(Error::InvalidArgument(format!(
                "{} multipliers for {} parameters",
                multipliers.len(),
                self.velocity.len()
            )));
        }
        self.multipliers = multipliers;
        Ok(self)
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn multiplier(&self, index: usize) -> f64 {
        self.multipliers[index]
    }

    pub fn velocity(&self, index: usize) -> &[f64] {
        &self.velocity[index]
    }
}

pub fn sgd_step(params: &mut [Tensor], state: &mut SgdState) -> Result<()> {
    if params.len() != state.velocity.len() {
        return Err(Error::InvalidArgument(format!(
            "optimizer tracks {} parameters, got {}",
            state.velocity.len(),
            params.len()
        )));
    }
    for (i, p) in params.iter().enumerate() {
        if p.grad().is_none() {
            return Err(Error::MissingGrad(i));
        }
        if p.numel() != state.velocity[i].len() {
            return Err(Error::shape("sgd_step", format!("parameter {i} changed size")));
        }
    }
    for (i, p) in params.iter_mut().enumerate() {
        let step = state.learning_rate * state.multipliers[i];
        let velocity = &mut state.velocity[i];
        let grad = p.grad.as_mut().expect("checked above");
        for ((v, g), x) in velocity.iter_mut().zip(grad.iter_mut()).zip(p.data.iter_mut()) {
            *v = state.momentum * *v + *g;
            *x -= step * *v;
            *g = 0.0;
        }
    }
    Ok(())
}
