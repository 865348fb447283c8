//! Run configuration: a TOML file of dotted keys, every key optional.
//!
//! ```toml
//! seed = 3
//! head = "prototype"
//! zoo = [0.0, 0.01, 0.1, 1.0]
//! dataset.n_novel = 20
//! network.layers = ["dense 16 32", "relu", "dense 32 16"]
//! search.population_size = 20
//! episode.shot = 5
//! ```

use std::path::{Path, PathBuf};

use ptransfer_core::data::{DatasetParams, EpisodeShape};
use ptransfer_core::nn::{infer_shapes, LayerSpec};
use ptransfer_core::search::SearchConfig;
use ptransfer_core::transfer::{FewShotHead, FinetuneBudget, LrZoo, PretrainConfig};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; every random stream of the pipeline derives from it.
    pub seed: u64,
    /// Parent directory for run directories.
    pub out_dir: PathBuf,
    pub head: FewShotHead,
    pub zoo: LrZoo,
    pub dataset: DatasetParams,
    pub network: NetworkSection,
    pub pretrain: PretrainSection,
    pub search: SearchSection,
    pub finetune: FinetuneBudget,
    pub episode: EpisodeShape,
    pub eval: EvalSection,
    pub benchmark: BenchmarkSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs"),
            head: FewShotHead::Cosine,
            zoo: LrZoo::default(),
            dataset: DatasetParams::default(),
            network: NetworkSection::default(),
            pretrain: PretrainSection::default(),
            search: SearchSection::default(),
            finetune: FinetuneBudget::default(),
            episode: EpisodeShape::default(),
            eval: EvalSection::default(),
            benchmark: BenchmarkSection::default(),
        }
    }
}

/// Backbone layers in a compact notation: `dense IN OUT`,
/// `conv2d IN_CH OUT_CH KERNEL STRIDE HEIGHT WIDTH`, `relu`, `maxpool SIZE`,
/// `flatten`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkSection {
    pub input: Vec<usize>,
    pub layers: Vec<String>,
}

impl Default for NetworkSection {
    fn default() -> Self {
        Self {
            input: vec![16],
            layers: ["dense 16 32", "relu", "dense 32 32", "relu", "dense 32 16"]
                .map(String::from)
                .to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let d = PretrainConfig::default();
        Self {
            epochs: d.epochs,
            batch: d.batch,
            lr: d.lr,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchSection {
    pub population_size: usize,
    pub max_iterations: usize,
    pub n_random: usize,
    pub n_mutation: usize,
    pub n_crossover: usize,
    pub mutation_prob: f64,
    pub n_val_episodes: usize,
}

impl Default for SearchSection {
    fn default() -> Self {
        let d = SearchConfig::default();
        Self {
            population_size: d.population_size,
            max_iterations: d.max_iterations,
            n_random: d.n_random,
            n_mutation: d.n_mutation,
            n_crossover: d.n_crossover,
            mutation_prob: d.mutation_prob,
            n_val_episodes: d.n_val_episodes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub episodes: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { episodes: 600 }
    }
}

/// Optional damage applied to the checkpoint after pre-training, so that
/// frozen transfer is a poor choice.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkSection {
    /// Parameterized layer whose weight is replaced by a rank-one matrix.
    pub collapse_layer: Option<usize>,
}

/// Independent random streams derived from the master seed.
#[derive(Debug, Clone, Copy)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    BaseHead = 2,
    Shuffle = 3,
    Collapse = 4,
    Search = 5,
    Validation = 6,
    Evaluation = 7,
}

pub fn derive_seed(master: u64, stream: Stream) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(stream as u64);
    rng.next_u64()
}

pub fn parse_layer(text: &str) -> Result<LayerSpec, String> {
    let mut parts = text.split_whitespace();
    let kind = parts.next().ok_or("empty layer")?;
    let nums = parts
        .map(|p| {
            p.parse::<usize>()
                .map_err(|_| format!("`{p}` is not a size"))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let want = |n: usize| {
        if nums.len() == n {
            Ok(())
        } else {
            Err(format!("`{kind}` takes {n} sizes, got {}", nums.len()))
        }
    };
    match kind {
        "dense" => want(2).map(|_| LayerSpec::Dense {
            inputs: nums[0],
            outputs: nums[1],
        }),
        "conv2d" => want(6).map(|_| LayerSpec::Conv2d {
            in_channels: nums[0],
            out_channels: nums[1],
            kernel: nums[2],
            stride: nums[3],
            height: nums[4],
            width: nums[5],
        }),
        "relu" => want(0).map(|_| LayerSpec::Relu),
        "maxpool" => want(1).map(|_| LayerSpec::MaxPool { size: nums[0] }),
        "flatten" => want(0).map(|_| LayerSpec::Flatten),
        other => Err(format!("unknown layer kind `{other}`")),
    }
}

pub fn format_layer(spec: &LayerSpec) -> String {
    match *spec {
        LayerSpec::Dense { inputs, outputs } => format!("dense {inputs} {outputs}"),
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            height,
            width,
        } => format!("conv2d {in_channels} {out_channels} {kernel} {stride} {height} {width}"),
        LayerSpec::Relu => "relu".into(),
        LayerSpec::MaxPool { size } => format!("maxpool {size}"),
        LayerSpec::Flatten => "flatten".into(),
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        let cfg: RunConfig = toml::from_str(text)
            .map_err(|e| CliError::Usage(format!("config: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn layers(&self) -> CliResult<Vec<LayerSpec>> {
        self.network
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                parse_layer(l).map_err(|e| CliError::config(&format!("network.layers[{i}]"), e))
            })
            .collect()
    }

    pub fn scheme_len(&self) -> CliResult<usize> {
        Ok(self
            .layers()?
            .iter()
            .filter(|l| l.is_parameterized())
            .count())
    }

    pub fn validate(&self) -> CliResult<()> {
        let err = |field: &str, c: &str| Err(CliError::config(field, c));
        self.dataset
            .validate()
            .map_err(|e| CliError::config("dataset", e.to_string()))?;
        let layers = self.layers()?;
        if self.network.input.iter().product::<usize>() != self.dataset.dim
            || self.network.input.is_empty()
        {
            return err("network.input", "must have as many elements as dataset.dim");
        }
        infer_shapes(&self.network.input, &layers)
            .map_err(|e| CliError::config("network.layers", e.to_string()))?;
        let len = layers.iter().filter(|l| l.is_parameterized()).count();
        if len == 0 {
            return err("network.layers", "needs at least one dense or conv2d layer");
        }
        if self.pretrain.batch == 0 {
            return err("pretrain.batch", "must be at least 1");
        }
        if !(self.pretrain.lr > 0.0 && self.pretrain.lr.is_finite()) {
            return err("pretrain.lr", "must be a positive finite number");
        }
        self.search_config()
            .validate()
            .map_err(|e| CliError::config("search", e.to_string()))?;
        self.finetune
            .validate()
            .map_err(|e| CliError::config("finetune", e.to_string()))?;
        let ep = &self.episode;
        if ep.way < 2 || ep.shot == 0 || ep.query == 0 {
            return err(
                "episode",
                "way must be at least 2, shot and query at least 1",
            );
        }
        if ep.shot + ep.query > self.dataset.per_class {
            return err("episode", "shot + query must not exceed dataset.per_class");
        }
        if ep.way > self.dataset.n_novel || ep.way > self.dataset.n_val {
            return err(
                "episode.way",
                "must not exceed dataset.n_novel or dataset.n_val",
            );
        }
        if self.eval.episodes == 0 {
            return err("eval.episodes", "must be at least 1");
        }
        if let Some(l) = self.benchmark.collapse_layer {
            if l >= len {
                return err(
                    "benchmark.collapse_layer",
                    &format!("must be below the {len} parameterized layers"),
                );
            }
        }
        Ok(())
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            epochs: self.pretrain.epochs,
            batch: self.pretrain.batch,
            lr: self.pretrain.lr,
            seed: derive_seed(self.seed, Stream::Shuffle),
        }
    }

    pub fn search_config(&self) -> SearchConfig {
        let s = &self.search;
        SearchConfig {
            population_size: s.population_size,
            max_iterations: s.max_iterations,
            n_random: s.n_random,
            n_mutation: s.n_mutation,
            n_crossover: s.n_crossover,
            mutation_prob: s.mutation_prob,
            zoo: self.zoo.clone(),
            n_val_episodes: s.n_val_episodes,
            seed: derive_seed(self.seed, Stream::Search),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_default() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn dotted_keys_and_round_trip() {
        let cfg = RunConfig::from_toml(
            "seed = 4\nhead = \"prototype\"\nepisode.shot = 5\ndataset.shift.rotation = 1.0\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.episode.shot, 5);
        assert_eq!(cfg.dataset.shift.unwrap().rotation, 1.0);
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(
            RunConfig::from_toml("search.popsize = 3"),
            Err(CliError::Usage(_))
        ));
        assert!(RunConfig::from_toml("colour = 1").is_err());
    }

    #[test]
    fn errors_name_the_field() {
        let e = RunConfig::from_toml("search.population_size = 1").unwrap_err();
        assert!(e.to_string().contains("search"), "{e}");
        let e = RunConfig::from_toml("network.layers = [\"dense 16 8\", \"tanh\"]").unwrap_err();
        assert!(e.to_string().contains("network.layers[1]"), "{e}");
        let e = RunConfig::from_toml("benchmark.collapse_layer = 3").unwrap_err();
        assert!(e.to_string().contains("benchmark.collapse_layer"), "{e}");
        assert_eq!(e.exit_code(), 1);
    }

    #[test]
    fn layer_notation_round_trips() {
        for text in [
            "dense 3 4",
            "conv2d 1 2 3 1 8 8",
            "relu",
            "maxpool 2",
            "flatten",
        ] {
            assert_eq!(format_layer(&parse_layer(text).unwrap()), text);
        }
        assert!(parse_layer("dense 3").is_err());
    }
}
