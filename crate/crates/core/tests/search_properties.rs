use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use ptransfer_core::search::{
    crossover, exhaustive_oracle, mutate, random_scheme, search, search_simple, SearchConfig,
    SearchEvent, SearchOptions, TraceRecord,
};
use ptransfer_core::transfer::{LrZoo, SchemeVector};
use ptransfer_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn zoo(m: usize) -> LrZoo {
    LrZoo::new(
        (0..m)
            .map(|i| {
                if i == 0 {
                    0.0
                } else {
                    10f64.powi(i as i32 - 3)
                }
            })
            .collect(),
    )
    .unwrap()
}

fn within_3_sigma(count: u64, n: u64, p: f64) -> bool {
    let mean = n as f64 * p;
    let sd = (n as f64 * p * (1.0 - p)).sqrt();
    (count as f64 - mean).abs() <= 3.0 * sd
}

/// A tie-free random landscape over the whole space, keyed by scheme index.
fn landscape(len: usize, m: usize, seed: u64) -> HashMap<SchemeVector, f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut table = HashMap::new();
    let total = (m as u64).pow(len as u32);
    for code in 0..total {
        let mut c = code;
        let mut genes = vec![0; len];
        for g in genes.iter_mut().rev() {
            *g = (c % m as u64) as usize;
            c /= m as u64;
        }
        table.insert(SchemeVector::new(genes), rng.random::<f64>());
    }
    table
}

#[test]
fn random_scheme_values_are_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut counts = [0u64; 4];
    for _ in 0..40_000 {
        counts[random_scheme(1, 4, &mut rng).unwrap().entries()[0]] += 1;
    }
    for c in counts {
        assert!(within_3_sigma(c, 40_000, 0.25), "{counts:?}");
    }
    let s = random_scheme(6, 4, &mut rng).unwrap();
    assert!(s.entries().iter().all(|&g| g < 4) && s.len() == 6);
    assert!(random_scheme(3, 1, &mut rng).is_err());
}

#[test]
fn mutation_always_changes_and_hamming_matches_expectation() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let trials = 10_000;
    let mut total = 0usize;
    for _ in 0..trials {
        let parent = random_scheme(12, 4, &mut rng).unwrap();
        let child = mutate(&parent, 4, 0.25, &mut rng).unwrap();
        let d = parent
            .entries()
            .iter()
            .zip(child.entries())
            .filter(|(a, b)| a != b)
            .count();
        assert!(d >= 1);
        assert!(child.entries().iter().all(|&g| g < 4));
        total += d;
    }
    // Binomial(12, 1/4) plus one forced flip when no gene was drawn.
    let expected = 3.0 + 0.75f64.powi(12);
    let sd_mean = (12.0 * 0.25 * 0.75 / trials as f64).sqrt();
    let mean = total as f64 / trials as f64;
    assert!(
        (mean - expected).abs() <= 3.0 * sd_mean,
        "mean hamming {mean}"
    );
}

#[test]
fn crossover_properties() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let p = SchemeVector::new(vec![2, 0, 3, 1]);
    assert_eq!(crossover(&p, &p, &mut rng).unwrap(), p);
    for _ in 0..500 {
        let a = random_scheme(7, 4, &mut rng).unwrap();
        let b = random_scheme(7, 4, &mut rng).unwrap();
        let c = crossover(&a, &b, &mut rng).unwrap();
        for i in 0..7 {
            assert!(c.entries()[i] == a.entries()[i] || c.entries()[i] == b.entries()[i]);
        }
    }
    let (a, b) = (SchemeVector::new(vec![0, 0]), SchemeVector::new(vec![1, 1]));
    let mut counts: HashMap<Vec<usize>, u64> = HashMap::new();
    for _ in 0..4000 {
        *counts
            .entry(crossover(&a, &b, &mut rng).unwrap().entries().to_vec())
            .or_default() += 1;
    }
    assert_eq!(counts.len(), 4);
    for (child, c) in &counts {
        assert!(within_3_sigma(*c, 4000, 0.25), "{child:?}: {c}");
    }
    assert!(crossover(&a, &SchemeVector::new(vec![1]), &mut rng).is_err());
}

#[test]
fn oracle_counts_every_scheme() {
    let calls = AtomicUsize::new(0);
    let (best, n) = exhaustive_oracle(6, 4, |s| {
        calls.fetch_add(1, Ordering::Relaxed);
        Ok(s.entries().iter().filter(|&&g| g == 2).count() as f64 / 6.0)
    })
    .unwrap();
    assert_eq!(n, 4096);
    assert_eq!(calls.load(Ordering::Relaxed), 4096);
    assert_eq!(best.scheme.entries(), &[2; 6]);
    // ties resolve to the first scheme in enumeration order
    let (best, _) = exhaustive_oracle(3, 3, |_| Ok(0.5)).unwrap();
    assert_eq!(best.scheme.entries(), &[0, 0, 0]);
}

#[test]
fn onemax_reaches_all_zero() {
    let cfg = SearchConfig {
        zoo: zoo(4),
        seed: 1,
        ..SearchConfig::default()
    };
    let (best, _) = search_simple(&cfg, 12, |s| {
        Ok(s.entries().iter().filter(|&&g| g == 0).count() as f64 / 12.0)
    })
    .unwrap();
    assert_eq!(best.scheme, SchemeVector::frozen(12));
}

#[test]
fn onemax_reaches_an_unseeded_optimum() {
    for seed in 0..3 {
        let cfg = SearchConfig {
            zoo: zoo(4),
            seed,
            ..SearchConfig::default()
        };
        let (best, _) = search_simple(&cfg, 12, |s| {
            Ok(s.entries().iter().filter(|&&g| g == 3).count() as f64 / 12.0)
        })
        .unwrap();
        assert_eq!(best.scheme, SchemeVector::uniform(12, 3), "seed {seed}");
    }
}

#[test]
fn search_matches_oracle_when_random_phase_covers_the_space() {
    let spaces = [
        (2, 2),
        (3, 2),
        (2, 4),
        (3, 3),
        (4, 3),
        (5, 3),
        (4, 4),
        (8, 2),
    ];
    for trial in 0..20u64 {
        let (len, m) = spaces[trial as usize % spaces.len()];
        let table = landscape(len, m, 100 + trial);
        let size = m.pow(len as u32);
        let cfg = SearchConfig {
            zoo: zoo(m),
            n_random: size.max(20),
            max_iterations: 2,
            n_mutation: 5,
            n_crossover: 5,
            seed: trial,
            ..SearchConfig::default()
        };
        let (best, _) = search_simple(&cfg, len, |s| Ok(table[s])).unwrap();
        let (oracle, n) = exhaustive_oracle(len, m, |s| Ok(table[s])).unwrap();
        assert_eq!(n, size);
        assert_eq!(best.scheme, oracle.scheme, "trial {trial} (L={len}, m={m})");
    }
}

#[test]
fn default_budget_lands_in_top_five_percent() {
    let spaces = [(4, 4), (8, 2), (5, 3), (3, 6)];
    for trial in 0..20u64 {
        let (len, m) = spaces[trial as usize % spaces.len()];
        let table = landscape(len, m, 500 + trial);
        let cfg = SearchConfig {
            zoo: zoo(m),
            seed: trial,
            ..SearchConfig::default()
        };
        let (best, _) = search_simple(&cfg, len, |s| Ok(table[s])).unwrap();
        let mut all: Vec<f64> = table.values().copied().collect();
        all.sort_by(|a, b| b.total_cmp(a));
        let cutoff = all[(all.len() as f64 * 0.05).floor() as usize];
        assert!(
            best.fitness >= cutoff,
            "trial {trial}: {} below {cutoff}",
            best.fitness
        );
    }
}

#[test]
fn trace_accounting_elitism_and_closure() {
    let table = landscape(6, 4, 9);
    let cfg = SearchConfig {
        zoo: zoo(4),
        seed: 4,
        ..SearchConfig::default()
    };
    let (best, trace) = search_simple(&cfg, 6, |s| Ok(table[s])).unwrap();
    assert_eq!(trace.evaluation_count(), 50 + 2 + 20 * (50 + 50));
    assert_eq!(trace.evaluation_count(), cfg.budget());
    assert_eq!(trace.generations.len(), 21);
    assert_eq!(trace.generations.last().unwrap().evaluations, cfg.budget());
    assert!(trace
        .generations
        .windows(2)
        .all(|w| w[1].best_fitness >= w[0].best_fitness));
    assert!(trace
        .records
        .iter()
        .all(|r| r.scheme.len() == 6 && r.scheme.entries().iter().all(|&g| g < 4)));
    assert!(trace.records.iter().any(|r| r.cached));
    assert_eq!(trace.best.as_ref(), Some(&best));
    // baselines come first and the best never loses to them
    assert_eq!(trace.records[0].scheme, SchemeVector::frozen(6));
    assert_eq!(trace.records[1].scheme, SchemeVector::uniform(6, 1));
    assert!(best.fitness >= trace.records[0].fitness && best.fitness >= trace.records[1].fitness);
    let max = trace
        .records
        .iter()
        .map(|r| r.fitness)
        .fold(f64::MIN, f64::max);
    assert_eq!(best.fitness, max);
}

#[test]
fn uniform_baseline_falls_back_to_smallest_nonzero_rate() {
    let cfg = SearchConfig {
        zoo: LrZoo::new(vec![0.0, 0.05, 0.5]).unwrap(),
        seed: 1,
        ..SearchConfig::default()
    };
    let (_, trace) = search_simple(&cfg, 3, |_| Ok(0.5)).unwrap();
    assert_eq!(trace.records[1].scheme, SchemeVector::uniform(3, 1));
}

#[test]
fn serial_parallel_and_resumed_runs_agree() {
    let table = landscape(5, 4, 21);
    let cfg = SearchConfig {
        zoo: zoo(4),
        seed: 12,
        ..SearchConfig::default()
    };
    let (_, a) = search_simple(&cfg, 5, |s| Ok(table[s])).unwrap();
    let (_, b) = search_simple(&cfg, 5, |s| Ok(table[s])).unwrap();
    assert_eq!(a, b);
    let par = SearchOptions {
        parallel: true,
        ..SearchOptions::default()
    };
    let (_, c) = search(&cfg, 5, |s| Ok(table[s]), &par, &mut |_| {}).unwrap();
    assert_eq!(a, c);

    let calls = AtomicUsize::new(0);
    let resume = SearchOptions::resume_from(&a.records[..400]);
    let (_, d) = search(
        &cfg,
        5,
        |s| {
            calls.fetch_add(1, Ordering::Relaxed);
            Ok(table[s])
        },
        &resume,
        &mut |_| {},
    )
    .unwrap();
    assert_eq!(a, d);
    let fresh_before = a.records[..400].iter().filter(|r| !r.cached).count();
    let fresh_total = a.records.iter().filter(|r| !r.cached).count();
    assert_eq!(calls.load(Ordering::Relaxed), fresh_total - fresh_before);
}

#[test]
fn observer_sees_records_in_order() {
    let cfg = SearchConfig {
        zoo: zoo(3),
        seed: 2,
        max_iterations: 3,
        ..SearchConfig::default()
    };
    let mut seen: Vec<TraceRecord> = Vec::new();
    let mut gens = 0;
    let (_, trace) = search(
        &cfg,
        4,
        |s| Ok(s.entries()[0] as f64 / 2.0),
        &SearchOptions::default(),
        &mut |e| match e {
            SearchEvent::Evaluated(r) => seen.push(r.clone()),
            SearchEvent::Generation(_) => gens += 1,
        },
    )
    .unwrap();
    assert_eq!(seen, trace.records);
    assert_eq!(gens, 4);
}

#[test]
fn failing_fitness_aborts_with_partial_trace() {
    let cfg = SearchConfig {
        zoo: zoo(4),
        seed: 3,
        ..SearchConfig::default()
    };
    let calls = AtomicUsize::new(0);
    let err = search_simple(&cfg, 6, |s| {
        if calls.fetch_add(1, Ordering::Relaxed) == 30 {
            Err(Error::Fitness("boom".into()))
        } else {
            Ok(s.entries()[0] as f64 / 3.0)
        }
    })
    .unwrap_err();
    assert!(matches!(err.error, Error::Fitness(_)));
    assert!(!err.trace.records.is_empty());
    assert!(err.trace.records.len() < 52);
    assert!(err.trace.best.is_none());

    let out_of_range = search_simple(&cfg, 6, |_| Ok(1.5)).unwrap_err();
    assert!(out_of_range.error.to_string().contains("outside"));
}
