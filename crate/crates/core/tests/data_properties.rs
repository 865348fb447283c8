use std::collections::HashSet;

use proptest::prelude::*;
use ptransfer_core::data::{
    episode_rng, export_dataset, generate_dataset, import_dataset, sample_episode, DatasetParams,
    EpisodeShape, ShiftParams, Split,
};

fn params(seed: u64) -> DatasetParams {
    DatasetParams {
        seed,
        n_base: 12,
        n_val: 6,
        n_novel: 10,
        per_class: 20,
        dim: 8,
        ..DatasetParams::default()
    }
}

#[test]
fn support_and_query_never_overlap() {
    let ds = generate_dataset(&params(1)).unwrap();
    let shape = EpisodeShape {
        way: 5,
        shot: 5,
        query: 15,
    };
    for i in 0..1000 {
        let ep = sample_episode(&ds, Split::Novel, shape, &mut episode_rng(7, i)).unwrap();
        let s: HashSet<_> = ep.support_examples.iter().collect();
        assert!(ep.query_examples.iter().all(|q| !s.contains(q)));
        let classes: HashSet<_> = ep.classes.iter().collect();
        assert_eq!(classes.len(), 5);
        assert_eq!(s.len(), 25);
    }
}

#[test]
fn class_frequencies_are_uniform() {
    let ds = generate_dataset(&params(2)).unwrap();
    let classes = ds.classes_in(Split::Novel);
    let draws = 10_000u64;
    let mut counts = vec![0u64; ds.class_split().len()];
    for i in 0..draws {
        let ep = sample_episode(
            &ds,
            Split::Novel,
            EpisodeShape::default(),
            &mut episode_rng(99, i),
        )
        .unwrap();
        for &c in &ep.classes {
            counts[c] += 1;
        }
    }
    // each class is in an episode with probability way / classes
    let p = 5.0 / classes.len() as f64;
    let mean = draws as f64 * p;
    let sd = (draws as f64 * p * (1.0 - p)).sqrt();
    for &c in &classes {
        let dev = (counts[c] as f64 - mean).abs();
        assert!(dev <= 3.0 * sd, "class {c}: {} vs {mean} ± {sd}", counts[c]);
    }
}

#[test]
fn relabeling_round_trips_to_original_labels() {
    let ds = generate_dataset(&params(3)).unwrap();
    for i in 0..200 {
        let ep = sample_episode(
            &ds,
            Split::Base,
            EpisodeShape {
                way: 5,
                shot: 2,
                query: 3,
            },
            &mut episode_rng(5, i),
        )
        .unwrap();
        for (&ex, &y) in ep.support_examples.iter().zip(&ep.support_labels) {
            assert_eq!(ep.original_label(y), ds.labels()[ex]);
        }
        for (&ex, &y) in ep.query_examples.iter().zip(&ep.query_labels) {
            assert_eq!(ep.original_label(y), ds.labels()[ex]);
        }
    }
}

#[test]
fn tight_clusters_are_separable_by_nearest_mean() {
    let ds = generate_dataset(&DatasetParams {
        cluster_spread: 1e-9,
        ..params(4)
    })
    .unwrap();
    let n_classes = ds.class_split().len();
    let dim = ds.dim();
    // class means from the first half of each class, classify the second half
    let mut means = vec![0.0; n_classes * dim];
    for c in 0..n_classes {
        let ex = ds.examples_of(c);
        let half = &ex[..ex.len() / 2];
        for &i in half {
            for d in 0..dim {
                means[c * dim + d] += ds.point(i)[d] / half.len() as f64;
            }
        }
    }
    let mut correct = 0;
    let mut total = 0;
    for c in 0..n_classes {
        for &i in &ds.examples_of(c)[ds.examples_of(c).len() / 2..] {
            let x = ds.point(i);
            let pred = (0..n_classes)
                .min_by(|&a, &b| {
                    let da: f64 = (0..dim).map(|d| (x[d] - means[a * dim + d]).powi(2)).sum();
                    let db: f64 = (0..dim).map(|d| (x[d] - means[b * dim + d]).powi(2)).sum();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            correct += usize::from(pred == c);
            total += 1;
        }
    }
    assert_eq!(correct, total);
}

#[test]
fn shift_leaves_base_and_validation_bit_identical() {
    let clean = generate_dataset(&params(6)).unwrap();
    let shifted = generate_dataset(&DatasetParams {
        shift: Some(ShiftParams::default()),
        ..params(6)
    })
    .unwrap();
    for i in 0..clean.len() {
        if clean.class_split()[clean.labels()[i]] != Split::Novel {
            let a: Vec<u64> = clean.point(i).iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = shifted.point(i).iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn export_import_is_bit_exact(seed in any::<u64>(), shifted in any::<bool>(), spread in 0.0f64..3.0) {
        let ds = generate_dataset(&DatasetParams {
            seed,
            n_base: 2,
            n_val: 2,
            n_novel: 2,
            per_class: 3,
            dim: 4,
            cluster_spread: spread,
            shift: shifted.then(ShiftParams::default),
            ..DatasetParams::default()
        }).unwrap();
        let text = export_dataset(&ds);
        let back = import_dataset(&text).unwrap();
        prop_assert_eq!(&back, &ds);
        prop_assert_eq!(export_dataset(&back), text);
    }
}
