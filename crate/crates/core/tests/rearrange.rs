mod common;

use common::*;
use maskprune_core::cost::{mask_latency, PiecewiseLatency};
use maskprune_core::rearrange::{block_objective, rearrange, rearrange_layer, RearrangeOptions};
use maskprune_core::search::search_flops;
use maskprune_core::{
    FisherBlocks, FlopsCost, LatencyModel, MaskDims, MaskSet, Matrix, SeparableCost,
};
use rand_chacha::ChaCha8Rng;

/// `(1 - m)^T B (1 - m)` written out as a double loop.
fn quadratic(block: &Matrix, mask: &[f64]) -> f64 {
    let n = mask.len();
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            total += (1.0 - mask[i]) * block.get(i, j) * (1.0 - mask[j]);
        }
    }
    total
}

fn random_binary(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| below(rng, 2) as f64).collect()
}

/// Smallest objective over every mask with the same number of kept units.
fn exhaustive_best(block: &Matrix, kept: usize) -> f64 {
    let n = block.rows();
    let mut best = f64::INFINITY;
    for bits in 0u32..1 << n {
        if bits.count_ones() as usize != kept {
            continue;
        }
        let m: Vec<f64> = (0..n).map(|i| (bits >> i & 1) as f64).collect();
        best = best.min(quadratic(block, &m));
    }
    best
}

fn three_head_block() -> Matrix {
    Matrix::from_vec(3, 3, vec![1.0, 0.0, 0.0, 0.0, 0.9, 0.4, 0.0, 0.4, 0.8]).unwrap()
}

#[test]
fn worked_example_from_stage_one_to_exhaustive_optimum() {
    let dims = MaskDims::new(1, 3, 1).unwrap();
    let block = three_head_block();
    let blocks = FisherBlocks::new(dims, vec![block.clone()], vec![Matrix::identity(1)]).unwrap();
    let cost = FlopsCost::new(dims, 1.0, 1.0).unwrap();
    let stage1 = search_flops(&blocks.diagonal(), &cost, 2.0).unwrap();
    assert_eq!(stage1.masks.heads(), &[1.0, 0.0, 0.0]);
    assert!(close(block_objective(&block, stage1.masks.heads()), 2.5, 1e-15, 0.0));

    let (out, report) = rearrange(&blocks, &stage1.masks, &RearrangeOptions::default()).unwrap();
    assert_eq!(out.heads(), &[0.0, 1.0, 0.0]);
    assert_eq!(report.total_swaps(), 1);
    assert!(close(report.sublayers[0].final_objective, 1.8, 1e-15, 0.0));
    assert!(close(exhaustive_best(&block, 1), 1.8, 1e-15, 0.0));
    assert!(report.cost_unchanged);
}

#[test]
fn objective_matches_explicit_quadratic_form() {
    let mut rng = rng(51);
    for _ in 0..100 {
        let n = 1 + below(&mut rng, 8);
        let rank = 1 + below(&mut rng, n + 2);
        let block = random_psd(&mut rng, n, rank);
        let m = random_binary(&mut rng, n);
        assert!(close(block_objective(&block, &m), quadratic(&block, &m), 1e-12, 1e-12));
    }
    let block = random_psd(&mut rng, 5, 5);
    assert_eq!(block_objective(&block, &[1.0; 5]), 0.0);
}

#[test]
fn random_psd_blocks_never_get_worse_and_keep_cardinality() {
    let mut rng = rng(52);
    let mut optimal = 0;
    for case in 0..100 {
        let n = 2 + below(&mut rng, 5);
        let rank = 1 + below(&mut rng, n + 1);
        let block = random_psd(&mut rng, n, rank);
        let m = random_binary(&mut rng, n);
        let (out, _) = rearrange_layer(&block, &m, &RearrangeOptions::default()).unwrap();
        let before = quadratic(&block, &m);
        let after = quadratic(&block, &out);
        assert!(after <= before + 1e-12, "case {case}: {before} -> {after}");
        let kept = |v: &[f64]| v.iter().filter(|x| **x != 0.0).count();
        assert_eq!(kept(&m), kept(&out), "case {case}");
        assert!(out.iter().all(|v| *v == 0.0 || *v == 1.0));
        if after <= exhaustive_best(&block, kept(&m)) + 1e-12 {
            optimal += 1;
        }
    }
    println!("greedy rearrangement reached the per-layer optimum on {optimal}/100 random blocks");
}

#[test]
fn report_objectives_match_full_reevaluation() {
    let mut rng = rng(53);
    for _ in 0..30 {
        let dims = MaskDims::new(1 + below(&mut rng, 3), 2 + below(&mut rng, 4), 2 + below(&mut rng, 6)).unwrap();
        let heads: Vec<Matrix> = (0..dims.layers).map(|_| random_psd(&mut rng, dims.heads, 3)).collect();
        let filters: Vec<Matrix> = (0..dims.layers).map(|_| random_psd(&mut rng, dims.filters, 3)).collect();
        let blocks = FisherBlocks::new(dims, heads, filters).unwrap();
        let masks = MaskSet::from_parts(
            dims,
            random_binary(&mut rng, dims.total_heads()),
            random_binary(&mut rng, dims.total_filters()),
        )
        .unwrap();
        let passes = 1 + below(&mut rng, 3);
        let (out, report) = rearrange(&blocks, &masks, &RearrangeOptions { passes }).unwrap();
        for s in &report.sublayers {
            let block = blocks.block(s.layer, s.kind);
            assert!(close(s.initial_objective, quadratic(block, masks.layer(s.layer, s.kind)), 1e-10, 1e-10));
            assert!(close(s.final_objective, quadratic(block, out.layer(s.layer, s.kind)), 1e-10, 1e-10));
            assert!(s.final_objective <= s.initial_objective + 1e-12);
        }
        assert_eq!(out.heads_kept(), masks.heads_kept());
        assert_eq!(out.filters_kept(), masks.filters_kept());

        let flops = FlopsCost::new(dims, 3.0, 1.0).unwrap();
        assert_eq!(flops.mask_cost(&out), flops.mask_cost(&masks));
        let lat = LatencyModel {
            mha: PiecewiseLatency { slope: 0.3, overhead: 1.0, threshold: 1 },
            ffn: PiecewiseLatency { slope: 0.1, overhead: 2.0, threshold: 2 },
        };
        assert_eq!(mask_latency(&out, &lat), mask_latency(&masks, &lat));
    }
}

#[test]
fn diagonal_blocks_leave_masks_unchanged() {
    let mut rng = rng(54);
    let dims = MaskDims::new(3, 4, 6).unwrap();
    let diag = |rng: &mut ChaCha8Rng, n: usize| Matrix::from_fn(n, n, |i, j| if i == j { uniform(rng) } else { 0.0 });
    let heads: Vec<Matrix> = (0..3).map(|_| diag(&mut rng, 4)).collect();
    let filters: Vec<Matrix> = (0..3).map(|_| diag(&mut rng, 6)).collect();
    let blocks = FisherBlocks::new(dims, heads, filters).unwrap();
    // stage-1 style: prune the least important units of each layer
    let cost = FlopsCost::new(dims, 2.0, 1.0).unwrap();
    let stage1 = search_flops(&blocks.diagonal(), &cost, 0.5 * cost.full_cost()).unwrap();
    let (out, report) = rearrange(&blocks, &stage1.masks, &RearrangeOptions::default()).unwrap();
    assert_eq!(out, stage1.masks);
    assert_eq!(report.total_swaps(), 0);
}

#[test]
fn mismatched_or_real_masks_are_rejected() {
    let dims = MaskDims::new(1, 2, 2).unwrap();
    let blocks = FisherBlocks::new(dims, vec![Matrix::identity(2)], vec![Matrix::identity(2)]).unwrap();
    let other = MaskSet::ones(MaskDims::new(1, 3, 2).unwrap());
    assert!(rearrange(&blocks, &other, &RearrangeOptions::default()).is_err());
    let real = MaskSet::filled(dims, 0.5);
    assert!(rearrange(&blocks, &real, &RearrangeOptions::default()).is_err());
}
