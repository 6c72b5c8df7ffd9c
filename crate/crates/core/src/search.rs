//! Stage 1: binary mask search under a FLOPs or latency budget.
//!
//! With diagonal Fisher the objective is the total importance of pruned
//! units, and since every head (every filter) costs the same, the best mask
//! with `n` heads kept keeps the `n` most important heads and then as many
//! of the most important filters as the remaining budget allows. Scanning
//! all `n` gives the global optimum.
//!
//! Ties in importance are broken by (score, layer, unit) ascending: among
//! equal scores the unit with the lower index is pruned first.

use alloc::vec::Vec;

use crate::cost::{FlopsCost, LatencyModel, SeparableCost};
use crate::error::{Error, Result};
use crate::fisher::ImportanceScores;
use crate::mask::{MaskDims, MaskSet, UnitKind};

/// A budget either in absolute units or as a fraction of the unpruned cost.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Constraint {
    Ratio(f64),
    Absolute(f64),
}

impl Constraint {
    pub fn resolve(&self, full_cost: f64) -> Result<f64> {
        match *self {
            Constraint::Ratio(r) if r > 0.0 && r <= 1.0 => Ok(r * full_cost),
            Constraint::Ratio(r) => Err(Error::InvalidArgument(alloc::format!(
                "constraint ratio must lie in (0, 1], got {r}"
            ))),
            Constraint::Absolute(c) if c >= 0.0 && c.is_finite() => Ok(c),
            Constraint::Absolute(c) => Err(Error::InvalidArgument(alloc::format!(
                "constraint must be a finite non-negative number, got {c}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SearchResult {
    pub masks: MaskSet,
    /// Sum of importance over pruned units.
    pub pruned_importance: f64,
    pub achieved_cost: f64,
    /// Total heads kept.
    pub n_star: usize,
}

impl SearchResult {
    fn new(scores: &ImportanceScores, masks: MaskSet, cost: f64) -> Self {
        Self {
            pruned_importance: scores.pruned_importance(&masks),
            achieved_cost: cost,
            n_star: masks.heads_kept().iter().sum(),
            masks,
        }
    }
}

/// Global unit indices (`layer * width + unit`) sorted from least to most
/// important.
fn ascending_order(scores: &[f64], candidates: impl Iterator<Item = usize>) -> Vec<usize> {
    let mut idx: Vec<usize> = candidates.collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    idx
}

/// Shared core of both searches: `base` units are always kept, then for
/// every count `n` of extra heads from `head_pool` the most important ones
/// are kept, and the remaining budget is spent on the most important
/// filters of `filter_pool`.
struct PoolSearch<'a> {
    scores: &'a ImportanceScores,
    base: MaskSet,
    head_pool: Vec<usize>,
    filter_pool: Vec<usize>,
    head_unit: f64,
    filter_unit: f64,
    budget: f64,
}

impl PoolSearch<'_> {
    fn mask_for(&self, n: usize, f: usize) -> MaskSet {
        let mut m = self.base.clone();
        let dims = m.dims();
        let mut heads = m.heads().to_vec();
        let mut filters = m.filters().to_vec();
        for &i in &self.head_pool[self.head_pool.len() - n..] {
            heads[i] = 1.0;
        }
        for &i in &self.filter_pool[self.filter_pool.len() - f..] {
            filters[i] = 1.0;
        }
        m = MaskSet::from_parts(dims, heads, filters).expect("dims unchanged");
        m
    }

    /// Returns the best mask, keeping the lowest `n` on exact ties.
    fn run(&self, feasible: impl Fn(&MaskSet) -> bool) -> MaskSet {
        let mut best: Option<(f64, MaskSet)> = None;
        for n in 0..=self.head_pool.len() {
            let remaining = self.budget - n as f64 * self.head_unit;
            if remaining < 0.0 {
                continue;
            }
            let max_f = self.filter_pool.len();
            let raw = libm::floor(remaining / self.filter_unit);
            let mut f = if raw >= max_f as f64 { max_f } else { raw as usize };
            let mut mask = self.mask_for(n, f);
            // floating-point slack at the budget boundary
            while !feasible(&mask) && f > 0 {
                f -= 1;
                mask = self.mask_for(n, f);
            }
            if !feasible(&mask) {
                continue;
            }
            let objective = self.scores.pruned_importance(&mask);
            if best.as_ref().map_or(true, |(b, _)| objective < *b) {
                best = Some((objective, mask));
            }
        }
        best.map(|(_, m)| m).unwrap_or_else(|| self.base.clone())
    }
}

/// Optimal binary mask under `F_head ||m_mha||_0 + F_filter ||m_ffn||_0 <= budget`.
pub fn search_flops(scores: &ImportanceScores, cost: &FlopsCost, budget: f64) -> Result<SearchResult> {
    check_budget(budget)?;
    check_dims(scores.dims(), cost.dims)?;
    let dims = scores.dims();
    let search = PoolSearch {
        scores,
        base: MaskSet::zeros(dims),
        head_pool: ascending_order(scores.heads(), 0..dims.total_heads()),
        filter_pool: ascending_order(scores.filters(), 0..dims.total_filters()),
        head_unit: cost.head,
        filter_unit: cost.filter,
        budget,
    };
    let masks = search.run(|m| cost.mask_cost(m) <= budget);
    let achieved = cost.mask_cost(&masks);
    Ok(SearchResult::new(scores, masks, achieved))
}

/// Latency-constrained search with piecewise-linear `LAT`.
///
/// Each layer first keeps its `T` most important heads and filters, which
/// costs the constant overhead `c` per sublayer. The leftover budget is then
/// distributed exactly as in [`search_flops`] with the slopes `a` as unit
/// costs. Pruning a whole sublayer (which would make its latency 0) is not
/// part of the search space.
pub fn search_latency(scores: &ImportanceScores, lat: &LatencyModel, budget: f64) -> Result<SearchResult> {
    check_budget(budget)?;
    lat.mha.validate()?;
    lat.ffn.validate()?;
    let dims = scores.dims();
    let floor = dims.layers as f64 * (lat.mha.overhead + lat.ffn.overhead);
    if budget < floor {
        return Err(Error::Infeasible {
            floor,
            constraint: budget,
        });
    }

    let mut base = MaskSet::zeros(dims);
    for kind in UnitKind::BOTH {
        let width = dims.units(kind);
        let keep = lat.get(kind).threshold.min(width);
        let all = scores.scores(kind);
        for l in 0..dims.layers {
            let order = ascending_order(all, l * width..(l + 1) * width);
            for &i in &order[width - keep..] {
                base.layer_mut(l, kind)[i - l * width] = 1.0;
            }
        }
    }
    let pool = |kind: UnitKind, kept: &[f64]| {
        ascending_order(
            scores.scores(kind),
            (0..kept.len()).filter(|&i| kept[i] == 0.0),
        )
    };
    let search = PoolSearch {
        scores,
        head_pool: pool(UnitKind::Head, base.heads()),
        filter_pool: pool(UnitKind::Filter, base.filters()),
        base,
        head_unit: lat.mha.slope,
        filter_unit: lat.ffn.slope,
        budget: budget - floor,
    };
    let masks = search.run(|m| lat.mask_cost(m) <= budget);
    let achieved = lat.mask_cost(&masks);
    Ok(SearchResult::new(scores, masks, achieved))
}

/// Largest instance [`brute_force_search`] will enumerate.
pub const BRUTE_FORCE_LIMIT: usize = 28;

/// Exhaustive minimum of pruned importance over every binary mask with
/// `cost <= budget`.
///
/// Head and filter subsets are tabulated separately (their cost and pruned
/// importance), then every head subset is paired with the best affordable
/// filter subset. Ties keep the lowest head subset, then the lowest filter
/// subset, in bit order.
pub fn brute_force_search(
    scores: &ImportanceScores,
    cost: &impl SeparableCost,
    budget: f64,
) -> Result<SearchResult> {
    check_budget(budget)?;
    let dims = scores.dims();
    let vars = dims.num_variables();
    if vars > BRUTE_FORCE_LIMIT {
        return Err(Error::TooLarge {
            variables: vars,
            limit: BRUTE_FORCE_LIMIT,
        });
    }

    let table = |kind: UnitKind| -> Vec<(f64, f64)> {
        let width = dims.units(kind);
        let total = dims.layers * width;
        let s = scores.scores(kind);
        (0u32..1 << total)
            .map(|bits| {
                let counts: Vec<usize> = (0..dims.layers)
                    .map(|l| ((bits >> (l * width)) & ((1 << width) - 1)).count_ones() as usize)
                    .collect();
                let c = match kind {
                    UnitKind::Head => cost.head_cost(&counts),
                    UnitKind::Filter => cost.filter_cost(&counts),
                };
                let pruned = (0..total)
                    .filter(|i| bits & (1 << i) == 0)
                    .fold(0.0, |acc, i| acc + s[i]);
                (c, pruned)
            })
            .collect()
    };
    let heads = table(UnitKind::Head);
    let filters = table(UnitKind::Filter);

    // Filter subsets by cost, with a running minimum of pruned importance
    // (lowest subset index among equal values) so each head subset needs
    // one binary search.
    let mut by_cost: Vec<usize> = (0..filters.len()).collect();
    by_cost.sort_by(|&x, &y| filters[x].0.total_cmp(&filters[y].0).then(x.cmp(&y)));
    let mut prefix_best: Vec<(f64, usize)> = Vec::with_capacity(by_cost.len());
    for &fb in &by_cost {
        let cand = (filters[fb].1, fb);
        let next = match prefix_best.last() {
            Some(&prev) if prev.0 < cand.0 || (prev.0 == cand.0 && prev.1 < cand.1) => prev,
            _ => cand,
        };
        prefix_best.push(next);
    }
    let mut best: Option<(f64, usize, usize)> = None;
    for (hb, &(hc, hp)) in heads.iter().enumerate() {
        let affordable = by_cost.partition_point(|&fb| hc + filters[fb].0 <= budget);
        if affordable == 0 {
            continue;
        }
        let (fp, fb) = prefix_best[affordable - 1];
        let value = hp + fp;
        if best.map_or(true, |b| value < b.0) {
            best = Some((value, hb, fb));
        }
    }
    let (_, hb, fb) = best.ok_or_else(|| Error::InvalidArgument("no feasible mask".into()))?;
    let bits_to_mask = |bits: usize, n: usize| -> Vec<f64> {
        (0..n).map(|i| if bits & (1 << i) != 0 { 1.0 } else { 0.0 }).collect()
    };
    let masks = MaskSet::from_parts(
        dims,
        bits_to_mask(hb, dims.total_heads()),
        bits_to_mask(fb, dims.total_filters()),
    )?;
    let achieved = cost.mask_cost(&masks);
    Ok(SearchResult::new(scores, masks, achieved))
}

fn check_budget(budget: f64) -> Result<()> {
    if !(budget >= 0.0 && budget.is_finite()) {
        return Err(Error::InvalidArgument(alloc::format!(
            "constraint must be a finite non-negative number, got {budget}"
        )));
    }
    Ok(())
}

fn check_dims(a: MaskDims, b: MaskDims) -> Result<()> {
    if a != b {
        return Err(Error::InvalidShape(alloc::format!(
            "score dims {a:?} do not match cost dims {b:?}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::PiecewiseLatency;
    use alloc::vec;

    fn worked() -> (ImportanceScores, FlopsCost) {
        let dims = MaskDims::new(1, 2, 3).unwrap();
        (
            ImportanceScores::new(dims, vec![5.0, 1.0], vec![3.0, 2.0, 0.5]).unwrap(),
            FlopsCost::new(dims, 2.0, 1.0).unwrap(),
        )
    }

    #[test]
    fn worked_example() {
        let (s, c) = worked();
        let r = search_flops(&s, &c, 4.0).unwrap();
        assert_eq!(r.masks.heads(), &[1.0, 0.0]);
        assert_eq!(r.masks.filters(), &[1.0, 1.0, 0.0]);
        assert_eq!(r.pruned_importance, 1.5);
        assert_eq!(r.n_star, 1);
        assert_eq!(r.achieved_cost, 4.0);
        let b = brute_force_search(&s, &c, 4.0).unwrap();
        assert_eq!(b.pruned_importance, 1.5);
    }

    #[test]
    fn unconstrained_keeps_everything() {
        let (s, c) = worked();
        let r = search_flops(&s, &c, c.full_cost() * 2.0).unwrap();
        assert_eq!(r.masks, MaskSet::ones(s.dims()));
        assert_eq!(r.pruned_importance, 0.0);
    }

    #[test]
    fn zero_budget_prunes_everything() {
        let (s, c) = worked();
        let r = search_flops(&s, &c, 0.0).unwrap();
        assert_eq!(r.masks, MaskSet::zeros(s.dims()));
        let b = brute_force_search(&s, &c, 0.0).unwrap();
        assert_eq!(b.pruned_importance, s.total());
        assert!(search_flops(&s, &c, -1.0).is_err());
    }

    #[test]
    fn single_head_is_kept_when_affordable() {
        let dims = MaskDims::new(1, 1, 1).unwrap();
        let s = ImportanceScores::new(dims, vec![1.0], vec![0.0]).unwrap();
        let c = FlopsCost::new(dims, 3.0, 100.0).unwrap();
        let b = brute_force_search(&s, &c, 3.0).unwrap();
        assert_eq!(b.masks.heads(), &[1.0]);
    }

    #[test]
    fn brute_force_refuses_large_instances() {
        let dims = MaskDims::new(4, 4, 4).unwrap();
        let s = ImportanceScores::new(dims, vec![1.0; 16], vec![1.0; 16]).unwrap();
        let c = FlopsCost::new(dims, 1.0, 1.0).unwrap();
        assert!(matches!(
            brute_force_search(&s, &c, 3.0),
            Err(Error::TooLarge { .. })
        ));
    }

    #[test]
    fn latency_floor() {
        let (s, _) = worked();
        let lat = LatencyModel {
            mha: PiecewiseLatency { slope: 1.0, overhead: 2.0, threshold: 1 },
            ffn: PiecewiseLatency { slope: 0.5, overhead: 1.0, threshold: 2 },
        };
        match search_latency(&s, &lat, 2.5) {
            Err(Error::Infeasible { floor, .. }) => assert_eq!(floor, 3.0),
            other => panic!("expected infeasible, got {other:?}"),
        }
        let r = search_latency(&s, &lat, 3.0).unwrap();
        assert_eq!(r.masks.heads(), &[1.0, 0.0]);
        assert_eq!(r.masks.filters(), &[1.0, 1.0, 0.0]);
        assert_eq!(r.achieved_cost, 3.0);
    }

    #[test]
    fn ratio_constraint() {
        assert_eq!(Constraint::Ratio(0.5).resolve(10.0).unwrap(), 5.0);
        assert!(Constraint::Ratio(0.0).resolve(10.0).is_err());
        assert!(Constraint::Ratio(1.5).resolve(10.0).is_err());
        assert_eq!(Constraint::Absolute(3.0).resolve(10.0).unwrap(), 3.0);
    }
}
