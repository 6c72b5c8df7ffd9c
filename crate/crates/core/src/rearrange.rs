//! Stage 2: intra-layer swaps driven by the block-diagonal Fisher.
//!
//! For a fixed number of pruned units per sublayer the objective
//! `(1 - m)^T I_l (1 - m)` is the sum of block entries over pruned x pruned
//! pairs. Starting from the stage-1 mask, each initially pruned unit is
//! visited once (highest diagonal Fisher first) and swapped with the kept
//! unit that lowers the objective the most, if any does.

use alloc::vec::Vec;

use crate::cost::SeparableCost;
use crate::error::{check_len, Error, Result};
use crate::fisher::FisherBlocks;
use crate::mask::{MaskSet, UnitKind};
use crate::numerics::Matrix;

/// A swap must lower the objective by more than this to be taken.
pub const SWAP_EPS: f64 = 1e-12;

/// `(1 - m)^T B (1 - m)` for a binary `m`: the sum of `B[i][j]` over pruned
/// `i`, `j`.
pub fn block_objective(block: &Matrix, mask: &[f64]) -> f64 {
    let pruned: Vec<usize> = (0..mask.len()).filter(|&i| mask[i] == 0.0).collect();
    let mut total = 0.0;
    for &i in &pruned {
        for &j in &pruned {
            total += block.get(i, j);
        }
    }
    total
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RearrangeOptions {
    /// Number of sweeps over the pruned units; 1 visits each once.
    pub passes: usize,
}

impl RearrangeOptions {
    pub fn single_pass() -> Self {
        Self { passes: 1 }
    }
}

impl Default for RearrangeOptions {
    fn default() -> Self {
        Self::single_pass()
    }
}

/// Greedy swaps on one sublayer. Returns the new mask and the swap count.
pub fn rearrange_layer(block: &Matrix, mask: &[f64], opts: &RearrangeOptions) -> Result<(Vec<f64>, usize)> {
    let n = mask.len();
    if block.rows() != n || block.cols() != n {
        return Err(Error::ShapeMismatch {
            what: "Fisher block",
            expected: n,
            found: block.rows(),
        });
    }
    if mask.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::InvalidArgument("rearrangement needs a binary mask".into()));
    }
    let mut mask = mask.to_vec();
    // row sums over the current pruned set
    let mut pruned_sum: Vec<f64> = (0..n)
        .map(|k| (0..n).filter(|&j| mask[j] == 0.0).map(|j| block.get(k, j)).sum())
        .collect();
    let mut swaps = 0;

    for _ in 0..opts.passes {
        let mut visit: Vec<usize> = (0..n).filter(|&i| mask[i] == 0.0).collect();
        visit.sort_by(|&a, &b| block.get(b, b).total_cmp(&block.get(a, a)).then(a.cmp(&b)));
        let mut swapped_this_pass = false;
        for i in visit {
            if mask[i] != 0.0 {
                continue;
            }
            // P' = P - {i} + {j}:
            // delta = B_ii - 2 s_i + 2 s_j - 2 B_ij + B_jj
            let mut best: Option<(f64, usize)> = None;
            for j in (0..n).filter(|&j| mask[j] != 0.0) {
                let delta = block.get(i, i) - 2.0 * pruned_sum[i] + 2.0 * pruned_sum[j]
                    - 2.0 * block.get(i, j)
                    + block.get(j, j);
                if delta < -SWAP_EPS && best.map_or(true, |(d, _)| delta < d) {
                    best = Some((delta, j));
                }
            }
            if let Some((_, j)) = best {
                mask[i] = 1.0;
                mask[j] = 0.0;
                for (k, s) in pruned_sum.iter_mut().enumerate() {
                    *s += block.get(k, j) - block.get(k, i);
                }
                swaps += 1;
                swapped_this_pass = true;
            }
        }
        if !swapped_this_pass {
            break;
        }
    }
    Ok((mask, swaps))
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SublayerRearrangement {
    pub layer: usize,
    pub kind: UnitKind,
    pub initial_objective: f64,
    pub final_objective: f64,
    pub swaps: usize,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RearrangeReport {
    pub sublayers: Vec<SublayerRearrangement>,
    /// Per-sublayer kept counts are unchanged, hence FLOPs and latency too.
    pub cost_unchanged: bool,
}

impl RearrangeReport {
    pub fn total_swaps(&self) -> usize {
        self.sublayers.iter().map(|s| s.swaps).sum()
    }

    pub fn initial_objective(&self) -> f64 {
        self.sublayers.iter().map(|s| s.initial_objective).sum()
    }

    pub fn final_objective(&self) -> f64 {
        self.sublayers.iter().map(|s| s.final_objective).sum()
    }
}

/// Runs [`rearrange_layer`] on every MHA and FFN block independently.
pub fn rearrange(
    blocks: &FisherBlocks,
    masks: &MaskSet,
    opts: &RearrangeOptions,
) -> Result<(MaskSet, RearrangeReport)> {
    let dims = masks.dims();
    if dims != blocks.dims() {
        return Err(Error::InvalidShape(alloc::format!(
            "mask dims {dims:?} do not match Fisher blocks {:?}",
            blocks.dims()
        )));
    }
    if !masks.is_binary() {
        return Err(Error::InvalidArgument("rearrangement needs a binary mask".into()));
    }
    let mut out = masks.clone();
    let mut sublayers = Vec::with_capacity(2 * dims.layers);
    for l in 0..dims.layers {
        for kind in UnitKind::BOTH {
            let block = blocks.block(l, kind);
            let before = masks.layer(l, kind);
            let (after, swaps) = rearrange_layer(block, before, opts)?;
            check_len("rearranged mask", before.len(), after.len())?;
            sublayers.push(SublayerRearrangement {
                layer: l,
                kind,
                initial_objective: block_objective(block, before),
                final_objective: block_objective(block, &after),
                swaps,
            });
            out.layer_mut(l, kind).copy_from_slice(&after);
        }
    }
    let cost_unchanged =
        out.heads_kept() == masks.heads_kept() && out.filters_kept() == masks.filters_kept();
    Ok((out, RearrangeReport { sublayers, cost_unchanged }))
}

/// Convenience check that a cost model agrees the rearranged mask costs the
/// same as the input.
pub fn same_cost(cost: &impl SeparableCost, a: &MaskSet, b: &MaskSet) -> bool {
    cost.mask_cost(a) == cost.mask_cost(b)
}
