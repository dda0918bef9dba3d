//! Invariants of the loss, graph and metric building blocks over random
//! inputs.

use cisod_core::hpl::{self_mask, ssim_loss, RelationLayer};
use cisod_core::lgr::LgrBlock;
use cisod_core::metrics::{f_measure_max, mae, s_measure, Map};
use cisod_core::net::{NormKind, HEAD_CHANNELS};
use cisod_core::train::{lr_at, scheduled_lr};
use cisod_tensor::nn::{BindMode, Binder, ParamStore};
use cisod_tensor::{Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rows_sum_to_one(t: &Tensor, tol: f64) -> bool {
    let n = *t.shape().last().unwrap();
    t.data().chunks(n).all(|row| row.iter().all(|&v| v >= 0.0) && (row.iter().sum::<f64>() - 1.0).abs() < tol)
}

fn columns_sum_to_one(t: &Tensor, tol: f64) -> bool {
    let s = t.shape();
    let (rows, cols) = (s[s.len() - 2], s[s.len() - 1]);
    t.data().chunks(rows * cols).all(|m| {
        (0..cols).all(|c| ((0..rows).map(|r| m[r * cols + c]).sum::<f64>() - 1.0).abs() < tol)
    })
}

fn map_pair(seed: u64, h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pred = Tensor::uniform([h * w], 0.0, 1.0, &mut rng).data().to_vec();
    let gt = Tensor::uniform([h * w], 0.0, 1.0, &mut rng)
        .data()
        .iter()
        .map(|&v| if v > 0.6 { 1.0 } else { 0.0 })
        .collect();
    (pred, gt)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn ssim_of_a_map_with_itself_is_zero(seed in any::<u64>(), c in 1usize..4, h in 4usize..14, w in 4usize..14) {
        let x = Tensor::randn([2, c, h, w], 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
        let tape = Tape::new();
        let v = tape.constant(x);
        let loss = ssim_loss(&v, &v).unwrap().item();
        prop_assert!(loss.abs() < 1e-9, "{loss}");
    }

    #[test]
    fn relation_rows_are_distributions(seed in any::<u64>(), cin in 1usize..6, h in 1usize..6, w in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let layer = RelationLayer::new(&mut store, &mut rng, "rel", cin, 4).unwrap();
        let tape = Tape::new();
        let b = Binder::new(&tape, &store, BindMode::EVAL);
        let f = tape.constant(Tensor::randn([2, cin, h, w], 3.0, &mut rng));
        let state = layer.state(&b, &f).unwrap();
        prop_assert_eq!(state.r.shape(), vec![2, h * w, h * w]);
        prop_assert!(rows_sum_to_one(&state.r.value(), 1e-9));
    }

    #[test]
    fn graph_attention_and_assignments_are_normalized(seed in any::<u64>(), nodes in 1usize..6, h in 1usize..4, w in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let block = LgrBlock::new(&mut store, &mut rng, "lgr", nodes, 8, NormKind::Group).unwrap();
        let tape = Tape::new();
        let b = Binder::new(&tape, &store, BindMode::EVAL);
        let s_l = tape.constant(Tensor::randn([1, HEAD_CHANNELS, h, w], 1.0, &mut rng));
        let s_p = tape.constant(Tensor::randn([1, HEAD_CHANNELS, 2 * h, 2 * w], 1.0, &mut rng));
        let (out, g) = block.forward(&b, &s_p, &s_l).unwrap();
        prop_assert_eq!(out.shape(), s_p.shape());
        prop_assert!(rows_sum_to_one(&g.attention.value(), 1e-9));
        // Each node's assignment is a distribution over sites.
        prop_assert!(columns_sum_to_one(&g.m_l.value(), 1e-9));
        prop_assert!(columns_sum_to_one(&g.m_p.value(), 1e-9));
    }

    #[test]
    fn self_masking_touches_only_foreground(seed in any::<u64>(), h in 1usize..10, w in 1usize..10, p in 0.0f64..=1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let image = Tensor::uniform([3, h, w], 0.0, 1.0, &mut rng);
        let gt = Tensor::uniform([1, h, w], 0.0, 1.0, &mut rng);
        let fill = [0.25, 0.5, 0.75];
        let (out, masked) = self_mask(&image, &gt, p, fill, &mut rng).unwrap();
        let plane = h * w;
        for i in 0..plane {
            for c in 0..3 {
                let (a, b) = (image.data()[c * plane + i], out.data()[c * plane + i]);
                if masked && gt.data()[i] > 0.5 {
                    prop_assert_eq!(b, fill[c]);
                } else {
                    prop_assert_eq!(a, b);
                }
            }
        }
        if p == 0.0 {
            prop_assert!(!masked);
        }
    }

    #[test]
    fn learning_rate_decays_monotonically(total in 1u64..500, a in 0u64..600, b in 0u64..600, max_lr in 1e-6f64..1.0) {
        let (lo, hi) = (a.min(b), a.max(b));
        prop_assert!(lr_at(hi, total, max_lr) <= lr_at(lo, total, max_lr));
        prop_assert!((0.0..=max_lr).contains(&lr_at(a, total, max_lr)));
        prop_assert_eq!(scheduled_lr(a, total, max_lr, 0), lr_at(a, total, max_lr));
    }

    #[test]
    fn metrics_stay_in_range(seed in any::<u64>(), h in 1usize..12, w in 1usize..12) {
        let (pred, gt) = map_pair(seed, h, w);
        let (p, g) = (Map::new(&pred, h, w).unwrap(), Map::new(&gt, h, w).unwrap());
        let s = s_measure(&p, &g).unwrap();
        prop_assert!((0.0..=1.0).contains(&s), "S = {s}");
        prop_assert!((0.0..=1.0).contains(&mae(&p, &g).unwrap()));
        match f_measure_max(&p, &g).unwrap() {
            Some(f) => prop_assert!((0.0..=1.0).contains(&f), "F = {f}"),
            None => prop_assert!(gt.iter().all(|&v| v == 0.0)),
        }
    }

    #[test]
    fn perfect_prediction_scores_best(seed in any::<u64>(), h in 2usize..12, w in 2usize..12) {
        let (_, gt) = map_pair(seed, h, w);
        let g = Map::new(&gt, h, w).unwrap();
        prop_assert_eq!(mae(&g, &g).unwrap(), 0.0);
        prop_assert!((s_measure(&g, &g).unwrap() - 1.0).abs() < 1e-9);
        if let Some(f) = f_measure_max(&g, &g).unwrap() {
            prop_assert!((f - 1.0).abs() < 1e-9);
        }
    }
}
