//! Fixed random decompression from the conditioning head to classifier
//! parameters.
//!
//! Output coefficient `i` is a copy of input coefficient `kappa[i]` with sign
//! `zeta[i]`. The map is linear, so it is also available as an explicit
//! `[d, m]` matrix with exactly one `±1` per row; the model applies it that
//! way, as a fully connected layer whose weights never train.
//!
//! `kappa` and `zeta` are a pure function of `(seed, m, d)`. The stream is
//! ChaCha8 seeded through `SeedableRng::seed_from_u64(seed)`: the first `d`
//! `next_u64` draws give `kappa[i] = (draw · m) >> 64`, the next `d` draws
//! give `zeta[i] = -1` when the top bit is set and `+1` otherwise.

use std::sync::Arc;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Tape, Tensor, Var};
use crate::{Error, Result};

/// Version tag of the `(seed, m, d) -> (kappa, zeta)` stream above.
pub const HASH_STREAM_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct HashingSpec {
    seed: u64,
    m: usize,
    d: usize,
    kappa: Arc<[usize]>,
    zeta: Arc<[f64]>,
}

pub fn build_hashing(seed: u64, m: usize, d: usize) -> Result<HashingSpec> {
    if m == 0 || d == 0 {
        return Err(Error::InvalidArgument(format!(
            "hashing dimensions must be positive, got m={m}, d={d}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kappa: Vec<usize> = (0..d)
        .map(|_| ((rng.next_u64() as u128 * m as u128) >> 64) as usize)
        .collect();
    let zeta: Vec<f64> = (0..d)
        .map(|_| if rng.next_u64() >> 63 == 1 { -1.0 } else { 1.0 })
        .collect();
    Ok(HashingSpec {
        seed,
        m,
        d,
        kappa: kappa.into(),
        zeta: zeta.into(),
    })
}

impl HashingSpec {
    /// Builds a spec from explicit tables, validating them.
    pub fn from_tables(seed: u64, m: usize, kappa: Vec<usize>, zeta: Vec<f64>) -> Result<Self> {
        if m == 0 || kappa.is_empty() || kappa.len() != zeta.len() {
            return Err(Error::InvalidArgument("hashing tables are inconsistent".into()));
        }
        if kappa.iter().any(|&k| k >= m) {
            return Err(Error::InvalidArgument(format!("kappa index out of [0, {m})")));
        }
        if zeta.iter().any(|&z| z != 1.0 && z != -1.0) {
            return Err(Error::InvalidArgument("zeta must be +1 or -1".into()));
        }
        Ok(HashingSpec {
            seed,
            m,
            d: kappa.len(),
            kappa: kappa.into(),
            zeta: zeta.into(),
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn input_dim(&self) -> usize {
        self.m
    }

    pub fn output_dim(&self) -> usize {
        self.d
    }

    pub fn kappa(&self) -> &[usize] {
        &self.kappa
    }

    pub fn zeta(&self) -> &[f64] {
        &self.zeta
    }

    /// `theta[i] = x[kappa[i]] · zeta[i]`.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.m {
            return Err(Error::shape(
                "hash_forward",
                format!("expected {} inputs, got {}", self.m, x.len()),
            ));
        }
        Ok(self
            .kappa
            .iter()
            .zip(self.zeta.iter())
            .map(|(&k, &z)| x[k] * z)
            .collect())
    }

    /// Records the gather form on a tape; the gradient scatters back through
    /// `kappa` with sign `zeta`.
    pub fn forward_on(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        if tape.shape(x)? != [self.m] {
            return Err(Error::shape(
                "hash_forward",
                format!("expected [{}], got {:?}", self.m, tape.shape(x)?),
            ));
        }
        tape.signed_gather(x, self.kappa.clone(), self.zeta.clone())
    }

    /// Dense `[d, m]` matrix with `W[i, j] = zeta[i]` if `j == kappa[i]`, else 0.
    pub fn as_matrix(&self) -> Tensor {
        let mut w = Tensor::zeros(&[self.d, self.m]);
        let data = w.data_mut();
        for (i, (&k, &z)) in self.kappa.iter().zip(self.zeta.iter()).enumerate() {
            data[i * self.m + k] = z;
        }
        w
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rebuild_is_identical() {
        assert_eq!(build_hashing(3, 10, 50).unwrap(), build_hashing(3, 10, 50).unwrap());
        assert_ne!(build_hashing(3, 10, 50).unwrap(), build_hashing(4, 10, 50).unwrap());
    }

    #[test]
    fn single_source_maps_everything_to_zero() {
        for seed in [0, 1, 77, u64::MAX] {
            let spec = build_hashing(seed, 1, 40).unwrap();
            assert!(spec.kappa().iter().all(|&k| k == 0));
        }
    }

    #[test]
    fn zero_dimensions_rejected() {
        assert!(build_hashing(1, 0, 3).is_err());
        assert!(build_hashing(1, 3, 0).is_err());
    }

    #[test]
    fn seed_42_stream_sign_balance() {
        let spec = build_hashing(42, 8, 32).unwrap();
        let mean = spec.zeta().iter().sum::<f64>() / 32.0;
        assert!(mean.abs() <= 1.0);
        assert!(spec.kappa().iter().all(|&k| k < 8));
        // Both signs occur in this stream.
        assert!(spec.zeta().contains(&1.0) && spec.zeta().contains(&-1.0));
    }

    #[test]
    fn hand_evaluated_tables() {
        let spec = HashingSpec::from_tables(0, 2, vec![0, 1, 0], vec![1.0, -1.0, -1.0]).unwrap();
        assert_eq!(spec.forward(&[2.0, 5.0]).unwrap(), vec![2.0, -5.0, -2.0]);
        assert_eq!(spec.forward(&[0.0, 0.0]).unwrap(), vec![0.0, 0.0, 0.0]);
        assert_eq!(
            spec.as_matrix().data(),
            &[1.0, 0.0, 0.0, -1.0, -1.0, 0.0]
        );
        assert!(spec.forward(&[1.0]).is_err());
    }

    #[test]
    fn invalid_tables_rejected() {
        assert!(HashingSpec::from_tables(0, 2, vec![2], vec![1.0]).is_err());
        assert!(HashingSpec::from_tables(0, 2, vec![1], vec![0.5]).is_err());
    }

    #[test]
    fn matrix_rows_have_unit_l1_norm() {
        let spec = build_hashing(9, 64, 65).unwrap();
        let w = spec.as_matrix();
        for row in w.data().chunks(64) {
            assert_eq!(row.iter().map(|v| v.abs()).sum::<f64>(), 1.0);
            assert_eq!(row.iter().filter(|v| **v != 0.0).count(), 1);
        }
    }
}
