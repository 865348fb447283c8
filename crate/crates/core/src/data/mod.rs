//! Synthetic few-shot data: Gaussian class clusters with disjoint
//! base / validation / novel splits, and the N-way K-shot episode sampler.

mod episode;
mod io;
mod shift;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use episode::{episode_rng, sample_episode, Episode, EpisodeShape};
pub use io::{export_dataset, import_dataset};
pub use shift::{DomainShift, ShiftParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Base,
    Validation,
    Novel,
}

impl Split {
    pub fn tag(self) -> char {
        match self {
            Split::Base => 'B',
            Split::Validation => 'V',
            Split::Novel => 'N',
        }
    }

    pub fn from_tag(c: char) -> Option<Self> {
        match c {
            'B' => Some(Split::Base),
            'V' => Some(Split::Validation),
            'N' => Some(Split::Novel),
            _ => None,
        }
    }
}

/// Generation parameters for [`generate_dataset`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetParams {
    pub seed: u64,
    pub n_base: usize,
    pub n_val: usize,
    pub n_novel: usize,
    pub per_class: usize,
    pub dim: usize,
    /// Standard deviation of every cluster around its mean.
    pub cluster_spread: f64,
    /// Rank of the subspace shared by all class means.
    pub subspace_rank: usize,
    /// Per-dimension scale of the shared-subspace component of each mean.
    pub subspace_scale: f64,
    /// Per-dimension scale of each class's private offset.
    pub offset_scale: f64,
    pub shift: Option<ShiftParams>,
}

impl Default for DatasetParams {
    fn default() -> Self {
        Self {
            seed: 0,
            n_base: 64,
            n_val: 16,
            n_novel: 20,
            per_class: 30,
            dim: 16,
            cluster_spread: 0.6,
            subspace_rank: 6,
            subspace_scale: 1.5,
            offset_scale: 0.6,
            shift: None,
        }
    }
}

impl DatasetParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidDataset(m.to_string()));
        if self.n_base == 0 || self.n_val == 0 || self.n_novel == 0 {
            return bad("every split needs at least one class");
        }
        if self.per_class == 0 || self.dim == 0 || self.subspace_rank == 0 {
            return bad("per_class, dim and subspace_rank must be positive");
        }
        if !(self.cluster_spread >= 0.0 && self.subspace_scale >= 0.0 && self.offset_scale >= 0.0) {
            return bad("scales must be non-negative");
        }
        if let Some(s) = &self.shift {
            s.validate()?;
        }
        Ok(())
    }

    pub fn n_classes(&self) -> usize {
        self.n_base + self.n_val + self.n_novel
    }
}

/// Labeled points with a split tag per class.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    params: DatasetParams,
    shift: Option<DomainShift>,
    class_split: Vec<Split>,
    points: Vec<f64>,
    labels: Vec<usize>,
    by_class: Vec<Vec<usize>>,
}

impl LabeledDataset {
    pub(crate) fn from_parts(
        params: DatasetParams,
        shift: Option<DomainShift>,
        class_split: Vec<Split>,
        points: Vec<f64>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        let dim = params.dim;
        if points.len() != labels.len() * dim {
            return Err(Error::InvalidDataset(
                "point count does not match labels".into(),
            ));
        }
        let mut by_class = vec![Vec::new(); class_split.len()];
        for (i, &y) in labels.iter().enumerate() {
            by_class
                .get_mut(y)
                .ok_or_else(|| Error::InvalidDataset(format!("label {y} has no class record")))?
                .push(i);
        }
        Ok(Self {
            params,
            shift,
            class_split,
            points,
            labels,
            by_class,
        })
    }

    pub fn params(&self) -> &DatasetParams {
        &self.params
    }

    pub fn shift(&self) -> Option<&DomainShift> {
        self.shift.as_ref()
    }

    pub fn dim(&self) -> usize {
        self.params.dim
    }

    pub fn seed(&self) -> u64 {
        self.params.seed
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim()..(i + 1) * self.dim()]
    }

    pub fn class_split(&self) -> &[Split] {
        &self.class_split
    }

    pub fn examples_of(&self, class: usize) -> &[usize] {
        &self.by_class[class]
    }

    /// Class ids in `split`, ascending.
    pub fn classes_in(&self, split: Split) -> Vec<usize> {
        (0..self.class_split.len())
            .filter(|&c| self.class_split[c] == split)
            .collect()
    }

    /// All examples of `split` as a `[n, dim]` tensor with labels re-indexed
    /// to `0..classes_in(split).len()`.
    pub fn split_tensor(&self, split: Split) -> Result<(Tensor, Vec<usize>)> {
        let classes = self.classes_in(split);
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for (local, &c) in classes.iter().enumerate() {
            for &i in &self.by_class[c] {
                data.extend_from_slice(self.point(i));
                labels.push(local);
            }
        }
        if labels.is_empty() {
            return Err(Error::InsufficientData(format!(
                "split {split:?} has no examples"
            )));
        }
        Ok((Tensor::new(vec![labels.len(), self.dim()], data)?, labels))
    }

    /// A copy in which `split` is also moved into the shifted domain.
    ///
    /// Used to draw target-domain validation episodes during search; the
    /// dataset itself keeps base and validation points unshifted.
    pub fn with_split_shifted(&self, split: Split) -> Self {
        let mut out = self.clone();
        if let Some(shift) = &self.shift {
            let dim = self.dim();
            for (i, &y) in self.labels.iter().enumerate() {
                if self.class_split[y] == split && split != Split::Novel {
                    let moved = shift.apply(self.point(i), i as u64);
                    out.points[i * dim..(i + 1) * dim].copy_from_slice(&moved);
                }
            }
        }
        out
    }

    /// Text export of the whole dataset, see [`export_dataset`].
    pub fn to_text(&self) -> String {
        export_dataset(self)
    }

    pub fn content_hash(&self) -> String {
        crate::nn::checkpoint::content_hash(self.to_text().as_bytes())
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Draws a dataset of isotropic Gaussian clusters.
///
/// Class means share a low-rank subspace (so features learned on base classes
/// carry over) plus a private per-class offset. Classes are laid out as
/// base, then validation, then novel. When a shift is configured it is applied
/// to novel points only, from an RNG stream independent of the clean data.
pub fn generate_dataset(params: &DatasetParams) -> Result<LabeledDataset> {
    params.validate()?;
    let dim = params.dim;
    let rank = params.subspace_rank;
    let n_classes = params.n_classes();

    let mut mean_rng = ChaCha8Rng::seed_from_u64(params.seed);
    let basis: Vec<f64> = (0..dim * rank)
        .map(|_| normal(&mut mean_rng) / (rank as f64).sqrt())
        .collect();
    let mut means = Vec::with_capacity(n_classes * dim);
    for _ in 0..n_classes {
        let z: Vec<f64> = (0..rank).map(|_| normal(&mut mean_rng)).collect();
        for d in 0..dim {
            let shared: f64 = (0..rank).map(|r| basis[d * rank + r] * z[r]).sum();
            means
                .push(params.subspace_scale * shared + params.offset_scale * normal(&mut mean_rng));
        }
    }

    let mut class_split = vec![Split::Base; params.n_base];
    class_split.extend(vec![Split::Validation; params.n_val]);
    class_split.extend(vec![Split::Novel; params.n_novel]);

    let mut points = Vec::with_capacity(n_classes * params.per_class * dim);
    let mut labels = Vec::with_capacity(n_classes * params.per_class);
    for c in 0..n_classes {
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        rng.set_stream(1 + c as u64);
        for _ in 0..params.per_class {
            for d in 0..dim {
                points.push(means[c * dim + d] + params.cluster_spread * normal(&mut rng));
            }
            labels.push(c);
        }
    }

    let shift = params
        .shift
        .as_ref()
        .map(|s| DomainShift::from_params(s, dim, params.seed));
    if let Some(shift) = &shift {
        for (i, &y) in labels.iter().enumerate() {
            if class_split[y] == Split::Novel {
                let moved = shift.apply(&points[i * dim..(i + 1) * dim], i as u64);
                points[i * dim..(i + 1) * dim].copy_from_slice(&moved);
            }
        }
    }
    LabeledDataset::from_parts(params.clone(), shift, class_split, points, labels)
}
