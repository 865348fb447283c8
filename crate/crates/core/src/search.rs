//! Evolutionary search over scheme vectors, plus a brute-force oracle for
//! small spaces.
//!
//! One run evaluates the all-zero and uniform baselines, `R` random schemes,
//! keeps the top `P`, then for `I` generations adds `M` mutants and `C`
//! crossovers and keeps the top `P` of parents and offspring together.
//! Fitness is memoized per scheme; repeated schemes still consume budget and
//! appear in the trace flagged as cached.

use std::collections::{HashMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::transfer::{LrZoo, SchemeVector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    pub population_size: usize,
    pub max_iterations: usize,
    pub n_random: usize,
    pub n_mutation: usize,
    pub n_crossover: usize,
    pub mutation_prob: f64,
    pub zoo: LrZoo,
    pub n_val_episodes: usize,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            population_size: 20,
            max_iterations: 20,
            n_random: 50,
            n_mutation: 50,
            n_crossover: 50,
            mutation_prob: 0.1,
            zoo: LrZoo::default(),
            n_val_episodes: 20,
            seed: 0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSearchConfig(m.into()));
        if self.population_size < 2 {
            return bad("search.population_size must be at least 2");
        }
        if self.n_random < self.population_size {
            return bad("search.n_random must be at least search.population_size");
        }
        if self.max_iterations == 0
            || self.n_mutation == 0
            || self.n_crossover == 0
            || self.n_val_episodes == 0
        {
            return bad("search.max_iterations, n_mutation, n_crossover and n_val_episodes must be positive");
        }
        if !(self.mutation_prob > 0.0 && self.mutation_prob <= 1.0) {
            return bad("search.mutation_prob must lie in (0, 1]");
        }
        Ok(())
    }

    /// Total fitness calls a run performs, cached or not.
    pub fn budget(&self) -> usize {
        self.n_random + 2 + self.max_iterations * (self.n_mutation + self.n_crossover)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Seeded,
    Random,
    Mutation,
    Crossover,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredScheme {
    pub scheme: SchemeVector,
    pub fitness: f64,
    pub generation: usize,
    pub provenance: Provenance,
    /// Position of the scheme's first evaluation in the run; breaks fitness ties.
    pub order: usize,
}

/// One fitness call in evaluation order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub index: usize,
    pub generation: usize,
    pub provenance: Provenance,
    pub scheme: SchemeVector,
    pub fitness: f64,
    pub cached: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub generation: usize,
    pub best_fitness: f64,
    pub population_fitness: Vec<f64>,
    /// Cumulative fitness calls at the end of this generation.
    pub evaluations: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchTrace {
    pub records: Vec<TraceRecord>,
    pub generations: Vec<GenerationRecord>,
    pub best: Option<ScoredScheme>,
}

impl SearchTrace {
    pub fn evaluation_count(&self) -> usize {
        self.records.len()
    }
}

/// Progress notifications, emitted in trace order.
#[derive(Debug, Clone, Copy)]
pub enum SearchEvent<'a> {
    Evaluated(&'a TraceRecord),
    Generation(&'a GenerationRecord),
}

#[derive(Debug, Clone, Default)]
pub struct SearchOptions {
    /// Evaluate the new schemes of a generation on the current rayon pool.
    pub parallel: bool,
    /// Fitness values from an earlier run with the same config and fitness.
    /// They replace fitness calls without changing the trace.
    pub known: HashMap<SchemeVector, f64>,
}

impl SearchOptions {
    pub fn resume_from(records: &[TraceRecord]) -> Self {
        Self {
            parallel: false,
            known: records
                .iter()
                .map(|r| (r.scheme.clone(), r.fitness))
                .collect(),
        }
    }
}

/// A failed run: the error and everything evaluated before it.
#[derive(Debug)]
pub struct SearchAbort {
    pub error: Error,
    pub trace: Box<SearchTrace>,
}

impl std::fmt::Display for SearchAbort {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} after {} evaluations",
            self.error,
            self.trace.records.len()
        )
    }
}

impl std::error::Error for SearchAbort {}

fn check_space(len: usize, m: usize) -> Result<()> {
    if len == 0 {
        return Err(Error::InvalidScheme(
            "scheme length must be at least 1".into(),
        ));
    }
    if m < 2 {
        return Err(Error::InvalidZoo(
            "a zoo needs at least two rates to search over".into(),
        ));
    }
    Ok(())
}

/// Number of schemes of length `len` over `m` rates, `None` past u128.
pub fn space_size(len: usize, m: usize) -> Option<u128> {
    (m as u128).checked_pow(u32::try_from(len).ok()?)
}

pub fn random_scheme<R: Rng + ?Sized>(len: usize, m: usize, rng: &mut R) -> Result<SchemeVector> {
    check_space(len, m)?;
    Ok(SchemeVector::new(
        (0..len).map(|_| rng.random_range(0..m)).collect(),
    ))
}

/// Resamples each gene with probability `prob` to one of the other `m - 1`
/// values. If nothing changed, one uniformly chosen gene is resampled.
pub fn mutate<R: Rng + ?Sized>(
    parent: &SchemeVector,
    m: usize,
    prob: f64,
    rng: &mut R,
) -> Result<SchemeVector> {
    check_space(parent.len(), m)?;
    if !(prob > 0.0 && prob <= 1.0) {
        return Err(Error::InvalidSearchConfig(format!(
            "mutation probability {prob} outside (0, 1]"
        )));
    }
    let flip = |g: usize, rng: &mut R| {
        let r = rng.random_range(0..m - 1);
        if r >= g {
            r + 1
        } else {
            r
        }
    };
    let mut genes = parent.entries().to_vec();
    let mut changed = false;
    for g in genes.iter_mut() {
        if rng.random_bool(prob) {
            *g = flip(*g, rng);
            changed = true;
        }
    }
    if !changed {
        let i = rng.random_range(0..genes.len());
        genes[i] = flip(genes[i], rng);
    }
    Ok(SchemeVector::new(genes))
}

/// Uniform crossover: each gene comes from either parent with probability 1/2.
pub fn crossover<R: Rng + ?Sized>(
    p1: &SchemeVector,
    p2: &SchemeVector,
    rng: &mut R,
) -> Result<SchemeVector> {
    if p1.len() != p2.len() {
        return Err(Error::InvalidScheme(format!(
            "crossover parents differ in length ({} vs {})",
            p1.len(),
            p2.len()
        )));
    }
    let genes = p1
        .entries()
        .iter()
        .zip(p2.entries())
        .map(|(&a, &b)| if rng.random_bool(0.5) { a } else { b })
        .collect();
    Ok(SchemeVector::new(genes))
}

/// The `k` fittest entries, ties kept in their input order.
pub fn topk(scored: &[ScoredScheme], k: usize) -> Result<Vec<ScoredScheme>> {
    if k > scored.len() {
        return Err(Error::InvalidSearchConfig(format!(
            "top {k} requested from {} entries",
            scored.len()
        )));
    }
    let mut sorted = scored.to_vec();
    sorted.sort_by(|a, b| b.fitness.total_cmp(&a.fitness));
    sorted.truncate(k);
    Ok(sorted)
}

fn checked_fitness(scheme: &SchemeVector, value: Result<f64>) -> Result<f64> {
    match value {
        Ok(f) if (0.0..=1.0).contains(&f) => Ok(f),
        Ok(f) => Err(Error::Fitness(format!(
            "fitness {f} of {scheme} outside [0, 1]"
        ))),
        Err(e) => Err(Error::Fitness(format!("{scheme}: {e}"))),
    }
}

/// Evaluates every scheme of length `len` over `m` rates and returns the best
/// (earliest in enumeration order on ties) with the number of evaluations.
/// Enumeration counts upward with the last gene fastest.
pub fn exhaustive_oracle<F>(len: usize, m: usize, fitness: F) -> Result<(ScoredScheme, usize)>
where
    F: Fn(&SchemeVector) -> Result<f64>,
{
    if len == 0 || m == 0 {
        return Err(Error::InvalidScheme("empty search space".into()));
    }
    let size = space_size(len, m).unwrap_or(u128::MAX);
    if size > 100_000 {
        return Err(Error::SpaceTooLarge(size));
    }
    let mut genes = vec![0usize; len];
    let mut best: Option<ScoredScheme> = None;
    for order in 0..size as usize {
        let scheme = SchemeVector::new(genes.clone());
        let f = checked_fitness(&scheme, fitness(&scheme))?;
        if best.as_ref().is_none_or(|b| f > b.fitness) {
            best = Some(ScoredScheme {
                scheme,
                fitness: f,
                generation: 0,
                provenance: Provenance::Random,
                order,
            });
        }
        for g in genes.iter_mut().rev() {
            *g += 1;
            if *g < m {
                break;
            }
            *g = 0;
        }
    }
    Ok((best.expect("space is non-empty"), size as usize))
}

struct Run<'a, F> {
    fitness: &'a F,
    options: &'a SearchOptions,
    observer: &'a mut dyn FnMut(SearchEvent<'_>),
    memo: HashMap<SchemeVector, (f64, usize)>,
    trace: SearchTrace,
}

impl<F> Run<'_, F>
where
    F: Fn(&SchemeVector) -> Result<f64> + Sync,
{
    /// Scores a batch of candidates in order. New schemes are evaluated once
    /// each (in parallel if requested), then records are appended in order.
    fn evaluate(
        &mut self,
        generation: usize,
        batch: Vec<(SchemeVector, Provenance)>,
    ) -> Result<Vec<ScoredScheme>> {
        let mut fresh: Vec<SchemeVector> = Vec::new();
        let mut seen = HashSet::new();
        for (s, _) in &batch {
            if !self.memo.contains_key(s)
                && !self.options.known.contains_key(s)
                && seen.insert(s.clone())
            {
                fresh.push(s.clone());
            }
        }
        let fitness = self.fitness;
        let results: Vec<Result<f64>> = if self.options.parallel {
            fresh
                .par_iter()
                .map(|s| checked_fitness(s, fitness(s)))
                .collect()
        } else {
            // Stop at the first failure so the partial trace ends there.
            let mut out = Vec::with_capacity(fresh.len());
            for s in &fresh {
                let r = checked_fitness(s, fitness(s));
                let failed = r.is_err();
                out.push(r);
                if failed {
                    break;
                }
            }
            out
        };
        let mut computed: HashMap<SchemeVector, Result<f64>> =
            fresh.into_iter().zip(results).collect();
        let mut scored = Vec::with_capacity(batch.len());
        for (scheme, provenance) in batch {
            let (fitness, order, cached) = match self.memo.get(&scheme) {
                Some(&(f, order)) => (f, order, true),
                None => {
                    let f = match self.options.known.get(&scheme) {
                        Some(&f) => f,
                        None => computed.remove(&scheme).unwrap_or_else(|| {
                            Err(Error::Fitness(
                                "evaluation skipped after earlier failure".into(),
                            ))
                        })?,
                    };
                    let order = self.trace.records.len();
                    self.memo.insert(scheme.clone(), (f, order));
                    (f, order, false)
                }
            };
            let record = TraceRecord {
                index: self.trace.records.len(),
                generation,
                provenance,
                scheme: scheme.clone(),
                fitness,
                cached,
            };
            (self.observer)(SearchEvent::Evaluated(&record));
            self.trace.records.push(record);
            scored.push(ScoredScheme {
                scheme,
                fitness,
                generation,
                provenance,
                order,
            });
        }
        Ok(scored)
    }

    fn select(
        &mut self,
        generation: usize,
        pool: Vec<ScoredScheme>,
        k: usize,
    ) -> Vec<ScoredScheme> {
        let mut unique = Vec::with_capacity(pool.len());
        let mut seen = HashSet::new();
        for s in pool {
            if seen.insert(s.scheme.clone()) {
                unique.push(s);
            }
        }
        unique.sort_by(|a, b| b.fitness.total_cmp(&a.fitness).then(a.order.cmp(&b.order)));
        unique.truncate(k);
        let record = GenerationRecord {
            generation,
            best_fitness: unique[0].fitness,
            population_fitness: unique.iter().map(|s| s.fitness).collect(),
            evaluations: self.trace.records.len(),
        };
        (self.observer)(SearchEvent::Generation(&record));
        self.trace.generations.push(record);
        unique
    }
}

/// Runs the evolutionary search over schemes of length `len`.
///
/// Generation 0 holds the two baselines and the random phase; the random
/// phase draws schemes not yet drawn until the whole space has been seen, so
/// `R >= m^L` covers every scheme. The returned best has the highest fitness,
/// earliest first evaluation on ties.
pub fn search<F>(
    cfg: &SearchConfig,
    len: usize,
    fitness: F,
    options: &SearchOptions,
    observer: &mut dyn FnMut(SearchEvent<'_>),
) -> Result<(ScoredScheme, SearchTrace), SearchAbort>
where
    F: Fn(&SchemeVector) -> Result<f64> + Sync,
{
    let abort = |error| SearchAbort {
        error,
        trace: Box::default(),
    };
    cfg.validate().map_err(abort)?;
    let m = cfg.zoo.len();
    check_space(len, m).map_err(abort)?;
    let mut run = Run {
        fitness: &fitness,
        options,
        observer,
        memo: HashMap::new(),
        trace: SearchTrace::default(),
    };
    match drive(cfg, len, m, &mut run) {
        Ok(best) => {
            run.trace.best = Some(best.clone());
            Ok((best, run.trace))
        }
        Err(error) => {
            tracing::error!(%error, evaluations = run.trace.records.len(), "search aborted");
            Err(SearchAbort {
                error,
                trace: Box::new(run.trace),
            })
        }
    }
}

fn drive<F>(cfg: &SearchConfig, len: usize, m: usize, run: &mut Run<'_, F>) -> Result<ScoredScheme>
where
    F: Fn(&SchemeVector) -> Result<f64> + Sync,
{
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let space = space_size(len, m);
    let mut batch = vec![
        (SchemeVector::frozen(len), Provenance::Seeded),
        (
            SchemeVector::uniform(len, cfg.zoo.uniform_index()),
            Provenance::Seeded,
        ),
    ];
    let mut drawn = HashSet::new();
    for _ in 0..cfg.n_random {
        let exhausted = space.is_some_and(|s| drawn.len() as u128 >= s);
        let scheme = loop {
            let s = random_scheme(len, m, &mut rng)?;
            if exhausted || drawn.insert(s.clone()) {
                break s;
            }
        };
        batch.push((scheme, Provenance::Random));
    }
    let initial = run.evaluate(0, batch)?;
    let mut population = run.select(0, initial, cfg.population_size);
    for generation in 1..=cfg.max_iterations {
        let mut batch = Vec::with_capacity(cfg.n_mutation + cfg.n_crossover);
        for _ in 0..cfg.n_mutation {
            let parent = &population[rng.random_range(0..population.len())].scheme;
            batch.push((
                mutate(parent, m, cfg.mutation_prob, &mut rng)?,
                Provenance::Mutation,
            ));
        }
        for _ in 0..cfg.n_crossover {
            let i = rng.random_range(0..population.len());
            let mut j = rng.random_range(0..population.len() - 1);
            if j >= i {
                j += 1;
            }
            let child = crossover(&population[i].scheme, &population[j].scheme, &mut rng)?;
            batch.push((child, Provenance::Crossover));
        }
        let offspring = run.evaluate(generation, batch)?;
        let mut pool = population;
        pool.extend(offspring);
        population = run.select(generation, pool, cfg.population_size);
        tracing::debug!(
            generation,
            best = population[0].fitness,
            "search generation"
        );
    }
    Ok(population.swap_remove(0))
}

/// Search with no observer and serial evaluation.
pub fn search_simple<F>(
    cfg: &SearchConfig,
    len: usize,
    fitness: F,
) -> Result<(ScoredScheme, SearchTrace), SearchAbort>
where
    F: Fn(&SchemeVector) -> Result<f64> + Sync,
{
    search(cfg, len, fitness, &SearchOptions::default(), &mut |_| {})
}
