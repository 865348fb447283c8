use rand::seq::index;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{LabeledDataset, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpisodeShape {
    pub way: usize,
    pub shot: usize,
    pub query: usize,
}

impl Default for EpisodeShape {
    fn default() -> Self {
        Self {
            way: 5,
            shot: 1,
            query: 15,
        }
    }
}

/// One N-way K-shot task. Classes are relabeled `0..way` in draw order.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub shape: EpisodeShape,
    /// `[way * shot, dim]`, grouped by relabeled class.
    pub support: Tensor,
    pub support_labels: Vec<usize>,
    /// `[way * query, dim]`, grouped by relabeled class.
    pub query: Tensor,
    pub query_labels: Vec<usize>,
    /// Original class id of each relabeled class.
    pub classes: Vec<usize>,
    pub support_examples: Vec<usize>,
    pub query_examples: Vec<usize>,
}

impl Episode {
    /// Maps relabeled classes back to original class ids.
    pub fn original_label(&self, relabeled: usize) -> usize {
        self.classes[relabeled]
    }
}

/// RNG for episode `index` of a run seeded with `master_seed`.
pub fn episode_rng(master_seed: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(master_seed ^ index)
}

pub fn sample_episode<R: RngCore>(
    ds: &LabeledDataset,
    split: Split,
    shape: EpisodeShape,
    rng: &mut R,
) -> Result<Episode> {
    let EpisodeShape { way, shot, query } = shape;
    if way == 0 || shot == 0 || query == 0 {
        return Err(Error::InsufficientData(format!(
            "episode shape {way}-way {shot}-shot {query}-query must be positive"
        )));
    }
    let classes = ds.classes_in(split);
    if classes.len() < way {
        return Err(Error::InsufficientData(format!(
            "{split:?} split has {} classes, episode needs {way} (short by {})",
            classes.len(),
            way - classes.len()
        )));
    }
    let need = shot + query;
    if let Some(&c) = classes.iter().find(|&&c| ds.examples_of(c).len() < need) {
        return Err(Error::InsufficientData(format!(
            "class {c} has {} examples, episode needs {need} (short by {})",
            ds.examples_of(c).len(),
            need - ds.examples_of(c).len()
        )));
    }
    let dim = ds.dim();
    let chosen: Vec<usize> = index::sample(rng, classes.len(), way)
        .into_iter()
        .map(|i| classes[i])
        .collect();
    let mut support = Vec::with_capacity(way * shot * dim);
    let mut query_pts = Vec::with_capacity(way * query * dim);
    let mut support_examples = Vec::with_capacity(way * shot);
    let mut query_examples = Vec::with_capacity(way * query);
    for &c in &chosen {
        let pool = ds.examples_of(c);
        let picks = index::sample(rng, pool.len(), need).into_vec();
        for (j, &p) in picks.iter().enumerate() {
            let ex = pool[p];
            if j < shot {
                support.extend_from_slice(ds.point(ex));
                support_examples.push(ex);
            } else {
                query_pts.extend_from_slice(ds.point(ex));
                query_examples.push(ex);
            }
        }
    }
    Ok(Episode {
        shape,
        support: Tensor::new(vec![way * shot, dim], support)?,
        support_labels: (0..way)
            .flat_map(|c| std::iter::repeat_n(c, shot))
            .collect(),
        query: Tensor::new(vec![way * query, dim], query_pts)?,
        query_labels: (0..way)
            .flat_map(|c| std::iter::repeat_n(c, query))
            .collect(),
        classes: chosen,
        support_examples,
        query_examples,
    })
}
