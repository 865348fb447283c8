use proptest::prelude::*;
use ptransfer_core::nn::gradcheck::{run_target, CheckTarget, GradCheckConfig};
use ptransfer_core::nn::{class_means, cosine_scores, CosineHead, LayerSpec, Network};
use ptransfer_core::tensor::argmax;
use ptransfer_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn normal_tensor(shape: Vec<usize>, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    Tensor::new(
        shape,
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect(),
    )
    .unwrap()
}

fn three_layer(seed: u64) -> Network {
    Network::init(
        vec![5],
        vec![
            LayerSpec::Dense {
                inputs: 5,
                outputs: 8,
            },
            LayerSpec::Relu,
            LayerSpec::Dense {
                inputs: 8,
                outputs: 6,
            },
            LayerSpec::Relu,
            LayerSpec::Dense {
                inputs: 6,
                outputs: 3,
            },
        ],
        seed,
    )
    .unwrap()
}

/// Straight-line recomputation of a dense/relu stack, written against the raw parameters.
fn reference_forward(net: &Network, x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    let mut p = 0;
    for layer in net.layers() {
        match layer {
            LayerSpec::Dense { inputs, outputs } => {
                let w = net.params()[p].weight.data();
                let b = net.params()[p].bias.data();
                let mut next = Vec::new();
                for o in 0..*outputs {
                    let mut s = b[o];
                    for i in 0..*inputs {
                        s += w[o * inputs + i] * h[i];
                    }
                    next.push(s);
                }
                h = next;
                p += 1;
            }
            LayerSpec::Relu => h
                .iter_mut()
                .for_each(|v| *v = if *v > 0.0 { *v } else { 0.0 }),
            other => panic!("reference does not model {other:?}"),
        }
    }
    h
}

#[test]
fn forward_matches_straight_line_reference() {
    for seed in 0..5 {
        let net = three_layer(seed);
        let x = normal_tensor(vec![4, 5], 100 + seed);
        let out = net.forward(&x).unwrap();
        for n in 0..4 {
            let expect = reference_forward(&net, x.row(n));
            for (a, b) in out.row(n).iter().zip(&expect) {
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "{a} vs {b}");
            }
        }
    }
}

#[test]
fn gradients_match_finite_differences() {
    let cfg = GradCheckConfig::default();
    for target in CheckTarget::ALL {
        for seed in 0..20 {
            let r = run_target(target, seed, &cfg).unwrap();
            assert!(
                r.passed(),
                "{target:?} seed {seed}: {} of {} entries failed, worst {:?}",
                r.failures,
                r.checked,
                r.worst
            );
        }
    }
}

#[test]
fn duplicated_batch_keeps_loss_and_gradients() {
    let net = three_layer(9).with_softmax_head(3, 10);
    let x = normal_tensor(vec![5, 5], 77);
    let labels = [0, 1, 2, 0, 1];
    let mut doubled = x.data().to_vec();
    doubled.extend_from_slice(x.data());
    let x2 = Tensor::new(vec![10, 5], doubled).unwrap();
    let labels2: Vec<usize> = labels.iter().chain(labels.iter()).copied().collect();
    let (l1, g1) = net.loss_and_gradients(&x, &labels).unwrap();
    let (l2, g2) = net.loss_and_gradients(&x2, &labels2).unwrap();
    assert!((l1 - l2).abs() < 1e-12);
    for (a, b) in g1.layers.iter().zip(&g2.layers) {
        for (u, v) in a.weight.data().iter().zip(b.weight.data()) {
            assert!((u - v).abs() < 1e-12);
        }
    }
    for (a, b) in g1.head.iter().zip(&g2.head) {
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-12);
        }
    }
}

#[test]
fn operations_are_deterministic() {
    let net = three_layer(4).with_softmax_head(3, 5);
    let x = normal_tensor(vec![3, 5], 8);
    assert_eq!(net.forward(&x).unwrap(), net.forward(&x).unwrap());
    let (l1, g1) = net.loss_and_gradients(&x, &[0, 1, 2]).unwrap();
    let (l2, g2) = net.loss_and_gradients(&x, &[0, 1, 2]).unwrap();
    assert_eq!(l1.to_bits(), l2.to_bits());
    assert_eq!(g1, g2);
    let a = net.apply_update(&g1, &[0.1, 0.0, 0.01], 0.01).unwrap();
    let b = net.apply_update(&g2, &[0.1, 0.0, 0.01], 0.01).unwrap();
    assert_eq!(a.param_bytes(), b.param_bytes());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn frozen_layers_stay_bit_identical(seed in 0u64..1000, rates in proptest::collection::vec(0usize..3, 3), steps in 1usize..6) {
        let zoo = [0.0, 0.05, 0.5];
        let lrs: Vec<f64> = rates.iter().map(|&r| zoo[r]).collect();
        let mut net = three_layer(seed).with_softmax_head(3, seed + 1);
        let before = net.clone();
        let x = normal_tensor(vec![6, 5], seed + 2);
        let labels = [0, 1, 2, 2, 1, 0];
        for _ in 0..steps {
            let (_, g) = net.loss_and_gradients(&x, &labels).unwrap();
            net.apply_update_in_place(&g, &lrs, 0.01).unwrap();
        }
        for (i, &lr) in lrs.iter().enumerate() {
            if lr == 0.0 {
                prop_assert_eq!(net.params()[i].weight.to_le_bytes(), before.params()[i].weight.to_le_bytes());
                prop_assert_eq!(net.params()[i].bias.to_le_bytes(), before.params()[i].bias.to_le_bytes());
            }
        }
    }

    #[test]
    fn cosine_argmax_ignores_positive_scale(
        e in proptest::collection::vec(-5.0f64..5.0, 4),
        w in proptest::collection::vec(-5.0f64..5.0, 12),
        k in 0.01f64..100.0,
    ) {
        prop_assume!(e.iter().any(|v| v.abs() > 1e-6));
        let head = CosineHead { weight: Tensor::new(vec![3, 4], w).unwrap(), scale: 10.0 };
        let scaled: Vec<f64> = e.iter().map(|v| v * k).collect();
        let a = cosine_scores(&head, &Tensor::from_vec(e));
        let b = cosine_scores(&head, &Tensor::from_vec(scaled));
        let (sa, sb) = (a.scores.data(), b.scores.data());
        // positive rescaling only perturbs scores by rounding
        for (x, y) in sa.iter().zip(sb) {
            prop_assert!((x - y).abs() < 1e-9);
        }
        let top = argmax(sa);
        let margin = sa.iter().enumerate().filter(|(i, _)| *i != top).map(|(_, v)| sa[top] - v).fold(f64::INFINITY, f64::min);
        if margin > 1e-9 {
            prop_assert_eq!(top, argmax(sb));
        }
    }

    #[test]
    fn prototypes_ignore_support_order(seed in 0u64..500, perm_seed in 0u64..500) {
        use rand::seq::SliceRandom;
        let e = normal_tensor(vec![12, 4], seed);
        let labels: Vec<usize> = (0..12).map(|i| i % 3).collect();
        let mut order: Vec<usize> = (0..12).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(perm_seed));
        let permuted = Tensor::new(vec![12, 4], order.iter().flat_map(|&i| e.row(i).to_vec()).collect()).unwrap();
        let plabels: Vec<usize> = order.iter().map(|&i| labels[i]).collect();
        let a = class_means(&e, &labels, 3).unwrap();
        let b = class_means(&permuted, &plabels, 3).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }
}
