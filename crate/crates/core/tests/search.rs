mod common;

use common::*;
use maskprune_core::cost::{mask_latency, PiecewiseLatency};
use maskprune_core::search::{brute_force_search, search_flops, search_latency};
use maskprune_core::{Error, FlopsCost, ImportanceScores, LatencyModel, MaskDims, MaskSet, SeparableCost};
use proptest::prelude::*;
use rand_chacha::ChaCha8Rng;

/// Integer scores in a small range so that ties are common.
fn random_scores(rng: &mut ChaCha8Rng, dims: MaskDims) -> ImportanceScores {
    let mut draw = |n: usize| -> Vec<f64> {
        (0..n)
            .map(|_| {
                if below(rng, 3) == 0 {
                    below(rng, 4) as f64
                } else {
                    uniform(rng) * 5.0
                }
            })
            .collect()
    };
    let heads = draw(dims.total_heads());
    let filters = draw(dims.total_filters());
    ImportanceScores::new(dims, heads, filters).unwrap()
}

fn random_dims(rng: &mut ChaCha8Rng, max_l: usize, max_h: usize, max_n: usize) -> MaskDims {
    MaskDims::new(1 + below(rng, max_l), 1 + below(rng, max_h), 1 + below(rng, max_n)).unwrap()
}

fn mask_from_bits(dims: MaskDims, bits: u64) -> MaskSet {
    let nh = dims.total_heads();
    let flat: Vec<f64> = (0..dims.num_variables())
        .map(|i| if bits >> i & 1 == 1 { 1.0 } else { 0.0 })
        .collect();
    MaskSet::from_parts(dims, flat[..nh].to_vec(), flat[nh..].to_vec()).unwrap()
}

fn pruned_sum(scores: &ImportanceScores, m: &MaskSet) -> f64 {
    let h: f64 = m.heads().iter().zip(scores.heads()).filter(|(v, _)| **v == 0.0).map(|(_, s)| s).sum();
    let f: f64 = m.filters().iter().zip(scores.filters()).filter(|(v, _)| **v == 0.0).map(|(_, s)| s).sum();
    h + f
}

/// Minimum pruned importance over every mask accepted by `ok`, by plain
/// enumeration.
fn enumerate_min(dims: MaskDims, scores: &ImportanceScores, ok: impl Fn(&MaskSet) -> bool) -> Option<f64> {
    let mut best: Option<f64> = None;
    for bits in 0u64..1 << dims.num_variables() {
        let m = mask_from_bits(dims, bits);
        if ok(&m) {
            let v = pruned_sum(scores, &m);
            if best.map_or(true, |b| v < b) {
                best = Some(v);
            }
        }
    }
    best
}

#[test]
fn flops_search_matches_exhaustive_minimum_on_200_instances() {
    let mut rng = rng(11);
    for case in 0..200 {
        let dims = random_dims(&mut rng, 3, 4, 5);
        let scores = random_scores(&mut rng, dims);
        let cost = FlopsCost::new(dims, 0.5 + 4.5 * uniform(&mut rng), 0.5 + 4.5 * uniform(&mut rng)).unwrap();
        let budget = 1.1 * cost.full_cost() * uniform(&mut rng);
        let fast = search_flops(&scores, &cost, budget).unwrap();
        let exact = brute_force_search(&scores, &cost, budget).unwrap();
        assert_eq!(fast.pruned_importance, exact.pruned_importance, "case {case}: {dims:?} budget {budget}");
        assert!(fast.achieved_cost <= budget);
        assert!(fast.masks.is_binary());
        if dims.num_variables() <= 14 {
            let naive = enumerate_min(dims, &scores, |m| cost.mask_cost(m) <= budget).unwrap();
            assert!(close(fast.pruned_importance, naive, 1e-12, 1e-12), "case {case}");
        }
    }
}

#[test]
fn filter_budget_is_used_up_unless_all_filters_are_kept() {
    let mut rng = rng(12);
    for _ in 0..200 {
        let dims = random_dims(&mut rng, 3, 4, 5);
        let scores = random_scores(&mut rng, dims);
        let cost = FlopsCost::new(dims, 0.5 + 4.5 * uniform(&mut rng), 0.5 + 4.5 * uniform(&mut rng)).unwrap();
        let budget = cost.full_cost() * uniform(&mut rng);
        let r = search_flops(&scores, &cost, budget).unwrap();
        let kept: usize = r.masks.filters_kept().iter().sum();
        if kept < dims.total_filters() {
            assert!(r.achieved_cost > budget - cost.filter - 1e-9, "{} vs {budget}", r.achieved_cost);
        }
        assert!(r.achieved_cost <= budget);
    }
}

#[test]
fn larger_budget_never_prunes_more_importance() {
    let mut rng = rng(13);
    for _ in 0..100 {
        let dims = random_dims(&mut rng, 3, 6, 8);
        let scores = random_scores(&mut rng, dims);
        let cost = FlopsCost::new(dims, 0.5 + 4.5 * uniform(&mut rng), 0.5 + 4.5 * uniform(&mut rng)).unwrap();
        let mut budgets: Vec<f64> = (0..6).map(|_| cost.full_cost() * uniform(&mut rng)).collect();
        budgets.sort_by(f64::total_cmp);
        let pruned: Vec<f64> = budgets
            .iter()
            .map(|&b| search_flops(&scores, &cost, b).unwrap().pruned_importance)
            .collect();
        for w in pruned.windows(2) {
            assert!(w[0] >= w[1], "{pruned:?}");
        }
    }
}

#[test]
fn negative_budget_is_rejected() {
    let dims = MaskDims::new(1, 2, 2).unwrap();
    let scores = ImportanceScores::new(dims, vec![1.0; 2], vec![1.0; 2]).unwrap();
    let cost = FlopsCost::new(dims, 1.0, 1.0).unwrap();
    assert!(search_flops(&scores, &cost, -0.5).is_err());
    assert!(search_flops(&scores, &cost, f64::NAN).is_err());
}

fn random_latency(rng: &mut ChaCha8Rng, dims: MaskDims) -> LatencyModel {
    let mut curve = |width: usize| PiecewiseLatency {
        slope: 0.2 + 2.0 * uniform(rng),
        overhead: 3.0 * uniform(rng),
        threshold: below(rng, width + 1),
    };
    LatencyModel {
        mha: curve(dims.heads),
        ffn: curve(dims.filters),
    }
}

#[test]
fn degenerate_latency_search_equals_flops_search() {
    let mut rng = rng(21);
    for case in 0..100 {
        let dims = random_dims(&mut rng, 3, 4, 6);
        let scores = random_scores(&mut rng, dims);
        let (a_head, a_filter) = (0.5 + 4.5 * uniform(&mut rng), 0.5 + 4.5 * uniform(&mut rng));
        let lat = LatencyModel {
            mha: PiecewiseLatency { slope: a_head, overhead: 0.0, threshold: 0 },
            ffn: PiecewiseLatency { slope: a_filter, overhead: 0.0, threshold: 0 },
        };
        let flops = FlopsCost::new(dims, a_head, a_filter).unwrap();
        let budget = flops.full_cost() * uniform(&mut rng);
        let l = search_latency(&scores, &lat, budget).unwrap();
        let f = search_flops(&scores, &flops, budget).unwrap();
        assert_eq!(l.masks, f.masks, "case {case}");
    }
}

#[test]
fn latency_budget_at_floor_keeps_exactly_thresholds() {
    let mut rng = rng(22);
    for _ in 0..50 {
        let dims = random_dims(&mut rng, 3, 4, 6);
        let scores = random_scores(&mut rng, dims);
        let mut lat = random_latency(&mut rng, dims);
        lat.mha.threshold = 1 + below(&mut rng, dims.heads);
        lat.ffn.threshold = 1 + below(&mut rng, dims.filters);
        let floor = dims.layers as f64 * (lat.mha.overhead + lat.ffn.overhead);
        let r = search_latency(&scores, &lat, floor).unwrap();
        assert!(r.masks.heads_kept().iter().all(|&n| n == lat.mha.threshold));
        assert!(r.masks.filters_kept().iter().all(|&n| n == lat.ffn.threshold));
        match search_latency(&scores, &lat, floor * 0.99 - 1e-9) {
            Err(Error::Infeasible { floor: reported, .. }) => assert_eq!(reported, floor),
            other => panic!("expected an infeasible error, got {other:?}"),
        }
    }
}

#[test]
fn latency_search_is_feasible_and_optimal_among_threshold_masks() {
    let mut rng = rng(23);
    let mut compared = 0;
    for case in 0..100 {
        let dims = random_dims(&mut rng, 2, 4, 4);
        let scores = random_scores(&mut rng, dims);
        let lat = random_latency(&mut rng, dims);
        let floor = dims.layers as f64 * (lat.mha.overhead + lat.ffn.overhead);
        let full = mask_latency(&MaskSet::ones(dims), &lat);
        let budget = floor + (full - floor) * 1.1 * uniform(&mut rng);
        let r = search_latency(&scores, &lat, budget).unwrap();
        assert!(mask_latency(&r.masks, &lat) <= budget, "case {case}");
        assert_eq!(r.achieved_cost, mask_latency(&r.masks, &lat));
        // Emptying a sublayer saves its overhead, which the search never
        // considers, so compare against masks keeping at least one unit.
        let th = lat.mha.threshold.clamp(1, dims.heads);
        let tf = lat.ffn.threshold.clamp(1, dims.filters);
        let best = enumerate_min(dims, &scores, |m| {
            m.heads_kept().iter().all(|&n| n >= th)
                && m.filters_kept().iter().all(|&n| n >= tf)
                && mask_latency(m, &lat) <= budget
        });
        if let Some(best) = best {
            assert!(r.pruned_importance <= best + 1e-9, "case {case}: {} vs {best}", r.pruned_importance);
            compared += 1;
        }
    }
    assert!(compared >= 80, "only {compared} instances had a nonempty comparison set");
}

#[test]
fn brute_force_matches_plain_enumeration() {
    let mut rng = rng(31);
    for _ in 0..40 {
        let dims = random_dims(&mut rng, 2, 3, 4);
        let scores = random_scores(&mut rng, dims);
        let lat = random_latency(&mut rng, dims);
        let budget = mask_latency(&MaskSet::ones(dims), &lat) * uniform(&mut rng);
        let r = brute_force_search(&scores, &lat, budget).unwrap();
        let naive = enumerate_min(dims, &scores, |m| mask_latency(m, &lat) <= budget).unwrap();
        assert!(close(r.pruned_importance, naive, 1e-12, 1e-12));
        assert!(r.achieved_cost <= budget);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn search_result_is_binary_and_feasible(
        seed in 0u64..10_000,
        ratio in 0.0f64..1.2,
    ) {
        let mut rng = rng(seed);
        let dims = random_dims(&mut rng, 4, 8, 16);
        let scores = random_scores(&mut rng, dims);
        let cost = FlopsCost::new(dims, 1.0 + uniform(&mut rng), 0.1 + uniform(&mut rng)).unwrap();
        let budget = ratio * cost.full_cost();
        let r = search_flops(&scores, &cost, budget).unwrap();
        prop_assert!(r.masks.is_binary());
        prop_assert!(r.achieved_cost <= budget);
        prop_assert_eq!(r.n_star, r.masks.heads_kept().iter().sum::<usize>());
        prop_assert!(close(r.pruned_importance, pruned_sum(&scores, &r.masks), 1e-12, 1e-12));
    }
}
