use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SHIFT_SALT: u64 = 0x5348_4946_5400_0000;

/// Knobs for a random affine distribution shift.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShiftParams {
    /// Rotation angle (radians) applied in each of `dim / 2` random planes.
    pub rotation: f64,
    /// Uniform scale multiplied into the rotation.
    pub scale: f64,
    /// Per-dimension standard deviation of the random translation.
    pub translation: f64,
    /// Additive noise amplitude, the same for every dimension.
    pub noise: f64,
}

impl Default for ShiftParams {
    fn default() -> Self {
        Self {
            rotation: 0.6,
            scale: 1.0,
            translation: 1.5,
            noise: 0.2,
        }
    }
}

impl ShiftParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0
            && self.translation >= 0.0
            && self.noise >= 0.0
            && self.rotation.is_finite())
        {
            return Err(Error::InvalidDataset(format!(
                "invalid shift parameters {self:?}"
            )));
        }
        Ok(())
    }
}

/// `x -> A x + t + noise * z`, with `z` standard normal drawn from a stream
/// keyed by the example index, so applying it is a pure function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainShift {
    pub matrix: Vec<f64>,
    pub translation: Vec<f64>,
    pub noise: Vec<f64>,
    pub noise_seed: u64,
}

impl DomainShift {
    pub fn dim(&self) -> usize {
        self.translation.len()
    }

    pub fn from_params(p: &ShiftParams, dim: usize, dataset_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(dataset_seed ^ SHIFT_SALT);
        let mut matrix = vec![0.0; dim * dim];
        for i in 0..dim {
            matrix[i * dim + i] = p.scale;
        }
        // Givens rotations on disjoint random coordinate pairs
        let mut order: Vec<usize> = (0..dim).collect();
        for i in (1..dim).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let (c, s) = (p.rotation.cos(), p.rotation.sin());
        for pair in order.chunks_exact(2) {
            let (a, b) = (pair[0], pair[1]);
            matrix[a * dim + a] = p.scale * c;
            matrix[a * dim + b] = -p.scale * s;
            matrix[b * dim + a] = p.scale * s;
            matrix[b * dim + b] = p.scale * c;
        }
        let translation = (0..dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                p.translation * z
            })
            .collect::<Vec<f64>>();
        Self {
            matrix,
            translation,
            noise: vec![p.noise; dim],
            noise_seed: rng.random(),
        }
    }

    pub fn apply(&self, point: &[f64], example_index: u64) -> Vec<f64> {
        let dim = self.dim();
        let mut rng = ChaCha8Rng::seed_from_u64(self.noise_seed);
        rng.set_stream(example_index);
        (0..dim)
            .map(|r| {
                let row = &self.matrix[r * dim..(r + 1) * dim];
                let ax: f64 = row.iter().zip(point).map(|(a, x)| a * x).sum();
                let z: f64 = StandardNormal.sample(&mut rng);
                ax + self.translation[r] + self.noise[r] * z
            })
            .collect()
    }
}
