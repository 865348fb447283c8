//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line.
//! Tests take a shared lock so that timings measure one test at a time.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::{Mutex, MutexGuard};
use std::time::{Duration, Instant};

use ptransfer_cli::commands::{
    cmd_evaluate, cmd_pretrain, cmd_search, ReportRecord, SearchOutput, CHECKPOINT_FILE,
    REPORT_FILE, SCHEME_FILE, TRACE_FILE,
};
use ptransfer_cli::RunConfig;
use ptransfer_core::data::{
    episode_rng, generate_dataset, sample_episode, DatasetParams, EpisodeShape, Split,
};
use ptransfer_core::nn::gradcheck::{run_target, CheckTarget, GradCheckConfig};
use ptransfer_core::nn::{LayerSpec, Network};
use ptransfer_core::search::{exhaustive_oracle, random_scheme, search_simple, SearchConfig};
use ptransfer_core::transfer::{
    finetune, pretrain_base, FewShotHead, FinetuneBudget, LrZoo, PretrainConfig, SchemeVector,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

static LOCK: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(name: &str, ok: bool, detail: &str, elapsed: Duration) {
    let tag = if ok { "PASS" } else { "FAIL" };
    println!("{tag} {name}: {detail} [{:.1}s]", elapsed.as_secs_f64());
    assert!(ok, "{name} failed: {detail}");
}

const BENCHMARK: &str = include_str!("../../../configs/benchmark.toml");
const CROSS_DOMAIN: &str = include_str!("../../../configs/cross_domain.toml");

fn random_landscape(len: usize, m: usize, rng: &mut ChaCha8Rng) -> HashMap<SchemeVector, f64> {
    let total = m.pow(len as u32);
    (0..total)
        .map(|mut code| {
            let mut genes = vec![0; len];
            for g in genes.iter_mut().rev() {
                *g = code % m;
                code /= m;
            }
            (SchemeVector::new(genes), rng.random::<f64>())
        })
        .collect()
}

fn zoo_of(m: usize) -> LrZoo {
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

/// True when `rate * max_gradient` is large enough to move some weight of
/// this size in f64.
fn update_registers(rate: f64, max_gradient: f64, weight: &[f64]) -> bool {
    let scale = weight.iter().fold(0f64, |m, v| m.max(v.abs()));
    rate * max_gradient > f64::EPSILON * scale
}

#[test]
fn oracle_equivalence() {
    let _g = serial();
    let start = Instant::now();
    let spaces: [(usize, usize); 10] = [
        (2, 2),
        (4, 2),
        (8, 2),
        (3, 3),
        (5, 3),
        (2, 4),
        (4, 4),
        (3, 6),
        (2, 16),
        (1, 200),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut equal = 0;
    let mut top5 = 0;
    let n = 20;
    for trial in 0..n {
        let (len, m) = spaces[trial % spaces.len()];
        let size = m.pow(len as u32);
        assert!(size <= 256);
        let table = random_landscape(len, m, &mut rng);
        let (oracle, count) = exhaustive_oracle(len, m, |s| Ok(table[s])).unwrap();
        assert_eq!(count, size);

        let covering = SearchConfig {
            zoo: zoo_of(m),
            n_random: size.max(20),
            seed: trial as u64,
            ..SearchConfig::default()
        };
        let (best, _) = search_simple(&covering, len, |s| Ok(table[s])).unwrap();
        equal += usize::from(best.scheme == oracle.scheme);

        let standard = SearchConfig {
            zoo: zoo_of(m),
            seed: 1000 + trial as u64,
            ..SearchConfig::default()
        };
        let (best, _) = search_simple(&standard, len, |s| Ok(table[s])).unwrap();
        let mut all: Vec<f64> = table.values().copied().collect();
        all.sort_by(|a, b| b.total_cmp(a));
        let cutoff = all[(0.05 * size as f64).floor() as usize];
        top5 += usize::from(best.fitness >= cutoff);
    }
    let elapsed = start.elapsed();
    verdict(
        "oracle equivalence",
        equal == n && top5 == n && elapsed < Duration::from_secs(60),
        &format!("{equal}/{n} equal to exhaustive with R >= m^L, {top5}/{n} in top 5% with default budget"),
        elapsed,
    );
}

#[test]
fn gradient_exactness() {
    let _g = serial();
    let start = Instant::now();
    let cfg = GradCheckConfig::default();
    let mut worst = 0.0f64;
    let mut failed = Vec::new();
    let mut checked = 0;
    for target in CheckTarget::ALL {
        for seed in 0..20 {
            let report = run_target(target, seed, &cfg).unwrap();
            checked += report.checked;
            worst = worst.max(report.max_rel_error);
            if !report.passed() {
                failed.push(format!("{target:?}/{seed}"));
            }
        }
    }
    let elapsed = start.elapsed();
    verdict(
        "gradient exactness",
        failed.is_empty() && elapsed < Duration::from_secs(60),
        &format!(
            "{} targets x 20 seeds, {checked} partials, max relative error {worst:.2e}, failures {failed:?}",
            CheckTarget::ALL.len()
        ),
        elapsed,
    );
}

#[test]
fn freeze_invariant() {
    let _g = serial();
    let start = Instant::now();
    let ds = generate_dataset(&DatasetParams {
        n_base: 16,
        ..DatasetParams::default()
    })
    .unwrap();
    let net = Network::init(
        vec![16],
        vec![
            LayerSpec::Dense {
                inputs: 16,
                outputs: 32,
            },
            LayerSpec::Relu,
            LayerSpec::Dense {
                inputs: 32,
                outputs: 32,
            },
            LayerSpec::Relu,
            LayerSpec::Dense {
                inputs: 32,
                outputs: 16,
            },
        ],
        1,
    )
    .unwrap()
    .with_softmax_head(16, 2);
    let (base, _) = pretrain_base(
        net,
        &ds,
        &PretrainConfig {
            epochs: 10,
            ..PretrainConfig::default()
        },
    )
    .unwrap();
    let zoo = LrZoo::default();
    let budget = FinetuneBudget {
        iterations: 20,
        ..FinetuneBudget::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut violations = Vec::new();
    let mut frozen_checked = 0;
    let mut tuned_checked = 0;
    for trial in 0..100u64 {
        let scheme = random_scheme(3, zoo.len(), &mut rng).unwrap();
        let head = if trial % 2 == 0 {
            FewShotHead::Cosine
        } else {
            FewShotHead::Prototype
        };
        let shape = EpisodeShape {
            way: 5,
            shot: 1 + 4 * (trial % 3 == 0) as usize,
            query: 15,
        };
        let ep = sample_episode(&ds, Split::Novel, shape, &mut episode_rng(9, trial)).unwrap();
        let out = finetune(&base, &scheme, &zoo, &ep, &budget, head).unwrap();
        for (l, &idx) in scheme.entries().iter().enumerate() {
            let (before, after) = (&base.params()[l], &out.network.params()[l]);
            if idx == 0 {
                frozen_checked += 1;
                if before != after {
                    violations.push(format!("trial {trial} layer {l} frozen but changed"));
                }
            } else if update_registers(zoo.rates()[idx], out.max_gradient[l], before.weight.data())
            {
                tuned_checked += 1;
                if before.weight == after.weight {
                    violations.push(format!("trial {trial} layer {l} tuned but unchanged"));
                }
            }
        }
    }
    verdict(
        "freeze invariant",
        violations.is_empty(),
        &format!("100 schemes, {frozen_checked} frozen and {tuned_checked} tuned layers with a representable update checked, violations {violations:?}"),
        start.elapsed(),
    );
}

#[test]
fn ci_arithmetic() {
    let _g = serial();
    let start = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::from_toml(BENCHMARK).unwrap();
    cfg.pretrain.epochs = 20;
    cfg.eval.episodes = 200;
    cfg.finetune.iterations = 20;
    let pre = cmd_pretrain(&cfg, tmp.path()).unwrap();
    let mut worst = 0.0f64;
    for scheme in ["fixed", "uniform", "manual"] {
        let r = cmd_evaluate(&cfg, &pre.checkpoint, scheme, tmp.path())
            .unwrap()
            .record
            .report;
        let n = r.per_episode.len() as f64;
        let mean = r.per_episode.iter().sum::<f64>() / n;
        let s = (r
            .per_episode
            .iter()
            .map(|a| (a - mean) * (a - mean))
            .sum::<f64>()
            / (n - 1.0))
            .sqrt();
        worst = worst.max((r.ci95_halfwidth - 1.96 * s / n.sqrt()).abs());
    }
    verdict(
        "CI arithmetic",
        worst <= 1e-12,
        &format!("max |reported - 1.96 s / sqrt(n)| = {worst:.1e} over 3 reports"),
        start.elapsed(),
    );
}

fn read_report(dir: &Path) -> ReportRecord {
    serde_json::from_str(fs::read_to_string(dir.join(REPORT_FILE)).unwrap().trim()).unwrap()
}

fn budget_of(cfg: &RunConfig) -> usize {
    let s = &cfg.search;
    s.n_random + 2 + s.max_iterations * (s.n_mutation + s.n_crossover)
}

fn trace_eval_lines(out: &SearchOutput) -> usize {
    fs::read_to_string(out.dir.join(TRACE_FILE))
        .unwrap()
        .lines()
        .filter(|l| l.starts_with("{\"kind\":\"eval\""))
        .count()
}

/// Fixed against searched for both heads at 1 and 5 shots, plus the checks
/// every search run must satisfy.
#[test]
fn desk_scale_reproduction_baseline_dominance_and_budget() {
    let _g = serial();
    let start = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let base_cfg = RunConfig::from_toml(BENCHMARK).unwrap();
    let pre = cmd_pretrain(&base_cfg, tmp.path()).unwrap();
    let mut rows = Vec::new();
    let mut beats = 0;
    let mut dominance = 0;
    let mut budget_ok = 0;
    let mut settings = 0;
    for head in [FewShotHead::Cosine, FewShotHead::Prototype] {
        for shot in [1, 5] {
            settings += 1;
            let mut cfg = base_cfg.clone();
            cfg.head = head;
            cfg.episode.shot = shot;
            let searched = cmd_search(&cfg, &pre.checkpoint, tmp.path(), false, None).unwrap();
            dominance += usize::from(searched.best.fitness >= searched.frozen_fitness);
            budget_ok += usize::from(
                searched.records.len() == budget_of(&cfg)
                    && trace_eval_lines(&searched) == budget_of(&cfg),
            );
            let path = searched.dir.join(SCHEME_FILE);
            let s = cmd_evaluate(&cfg, &pre.checkpoint, path.to_str().unwrap(), tmp.path())
                .unwrap()
                .record;
            let f = cmd_evaluate(&cfg, &pre.checkpoint, "fixed", tmp.path())
                .unwrap()
                .record;
            let (sr, fr) = (&s.report, &f.report);
            let margin =
                sr.mean_accuracy - fr.mean_accuracy - sr.ci95_halfwidth - fr.ci95_halfwidth;
            beats += usize::from(margin > 0.0 && sr.n_episodes == 600);
            rows.push(format!(
                "{head} {shot}-shot: Fixed {} vs Searched {} {} (margin {:+.2})",
                f.formatted,
                sr.scheme,
                s.formatted,
                margin * 100.0
            ));
        }
    }
    let elapsed = start.elapsed();
    for r in &rows {
        println!("    {r}");
    }
    println!(
        "{} baseline dominance: searched fitness >= Fixed fitness in {dominance}/{settings} searches",
        if dominance == settings { "PASS" } else { "FAIL" }
    );
    println!(
        "{} budget accounting: trace holds R + 2 + I(M + C) = {} evaluations in {budget_ok}/{settings} searches",
        if budget_ok == settings { "PASS" } else { "FAIL" },
        budget_of(&base_cfg)
    );
    verdict(
        "desk-scale reproduction",
        beats == settings && elapsed < Duration::from_secs(600),
        &format!("searched beats Fixed by the combined 95% CIs in {beats}/{settings} settings, pipeline {elapsed:.0?}"),
        elapsed,
    );
    assert_eq!(dominance, settings);
    assert_eq!(budget_ok, settings);
}

#[test]
fn cross_domain_pattern() {
    let _g = serial();
    let start = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let shifted = RunConfig::from_toml(CROSS_DOMAIN).unwrap();
    let mut agree = 0;
    let mut detail = Vec::new();
    for rep in 0..5u64 {
        let mut with_shift = shifted.clone();
        with_shift.seed = rep;
        with_shift.dataset.seed = rep;
        let mut without = with_shift.clone();
        without.dataset.shift = None;
        let dir = tmp.path().join(format!("rep{rep}"));
        // the shift leaves base classes untouched, so one backbone serves both
        let pre = cmd_pretrain(&without, &dir).unwrap();
        let a = cmd_search(&without, &pre.checkpoint, &dir, false, None).unwrap();
        let b = cmd_search(&with_shift, &pre.checkpoint, &dir, false, None).unwrap();
        assert!(a.best.fitness >= a.frozen_fitness && b.best.fitness >= b.frozen_fitness);
        let (na, nb) = (a.best.scheme.nonzero_count(), b.best.scheme.nonzero_count());
        agree += usize::from(nb >= na);
        detail.push(format!("{}->{}", a.best.scheme, b.best.scheme));
    }
    verdict(
        "cross-domain pattern",
        agree >= 4,
        &format!(
            "shifted search tunes at least as many layers in {agree}/5 repetitions ({})",
            detail.join(", ")
        ),
        start.elapsed(),
    );
}

#[test]
fn determinism() {
    let _g = serial();
    let start = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::from_toml(BENCHMARK).unwrap();
    cfg.pretrain.epochs = 30;
    cfg.search.max_iterations = 5;
    cfg.eval.episodes = 100;
    cfg.head = FewShotHead::Prototype;
    cfg.episode.shot = 5;
    let mut files: Vec<Vec<Vec<u8>>> = Vec::new();
    for run in 0..2 {
        let out = tmp.path().join(format!("run{run}"));
        let pre = cmd_pretrain(&cfg, &out).unwrap();
        let search = cmd_search(&cfg, &pre.checkpoint, &out, run == 1, None).unwrap();
        let scheme = search.dir.join(SCHEME_FILE);
        let eval = cmd_evaluate(&cfg, &pre.checkpoint, scheme.to_str().unwrap(), &out).unwrap();
        files.push(
            [
                pre.dir.join(CHECKPOINT_FILE),
                search.dir.join(TRACE_FILE),
                scheme,
                eval.dir.join(REPORT_FILE),
            ]
            .iter()
            .map(|p| fs::read(p).unwrap())
            .collect(),
        );
        assert_eq!(read_report(&eval.dir).report.scheme, search.best.scheme);
    }
    let identical = files[0] == files[1];
    verdict(
        "determinism",
        identical,
        "checkpoint, trace, scheme and report identical across two runs (second with parallel search)",
        start.elapsed(),
    );
}
