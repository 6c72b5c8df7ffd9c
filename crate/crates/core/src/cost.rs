//! FLOPs and latency cost of a mask.
//!
//! Both costs depend only on how many units each sublayer keeps, never on
//! the values of the nonzero mask entries, so tuned masks cost exactly what
//! their binary support costs.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::mask::{MaskDims, MaskSet, UnitKind};
use crate::model::ModelShape;

/// A cost that splits into a head part and a filter part, each a function
/// of the per-layer kept counts.
pub trait SeparableCost {
    fn head_cost(&self, heads_kept: &[usize]) -> f64;
    fn filter_cost(&self, filters_kept: &[usize]) -> f64;

    fn cost_of_counts(&self, heads_kept: &[usize], filters_kept: &[usize]) -> f64 {
        self.head_cost(heads_kept) + self.filter_cost(filters_kept)
    }

    fn mask_cost(&self, masks: &MaskSet) -> f64 {
        self.cost_of_counts(&masks.heads_kept(), &masks.filters_kept())
    }
}

/// Per-head and per-filter FLOPs, identical in every layer.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FlopsCost {
    pub dims: MaskDims,
    pub head: f64,
    pub filter: f64,
}

impl FlopsCost {
    pub fn new(dims: MaskDims, head: f64, filter: f64) -> Result<Self> {
        if !(head > 0.0 && filter > 0.0 && head.is_finite() && filter.is_finite()) {
            return Err(Error::InvalidArgument(alloc::format!(
                "per-unit FLOPs must be positive, got head {head} filter {filter}"
            )));
        }
        Ok(Self { dims, head, filter })
    }

    /// Cost of the unpruned model.
    pub fn full_cost(&self) -> f64 {
        self.head * self.dims.total_heads() as f64 + self.filter * self.dims.total_filters() as f64
    }
}

impl SeparableCost for FlopsCost {
    fn head_cost(&self, heads_kept: &[usize]) -> f64 {
        self.head * heads_kept.iter().sum::<usize>() as f64
    }

    fn filter_cost(&self, filters_kept: &[usize]) -> f64 {
        self.filter * filters_kept.iter().sum::<usize>() as f64
    }
}

/// FLOPs per head and per filter for one sequence of `seq_len` tokens,
/// counting a multiply-accumulate as two FLOPs.
///
/// A head runs four `seq x hidden x head_dim` projections (Q, K, V, O) and
/// two `seq x seq x head_dim` matmuls (scores, context):
/// `8 s D d + 4 s^2 d`. A filter is one row of W1 and one column of W2:
/// `4 s D`. LayerNorm, softmax and embeddings are not counted.
pub fn flops_constants(shape: &ModelShape) -> FlopsCost {
    let s = shape.seq_len as f64;
    let d = shape.hidden as f64;
    let dh = shape.head_dim as f64;
    FlopsCost {
        dims: shape.mask_dims(),
        head: 8.0 * s * d * dh + 4.0 * s * s * dh,
        filter: 4.0 * s * d,
    }
}

/// `F_head ||m_mha||_0 + F_filter ||m_ffn||_0`
pub fn mask_flops(masks: &MaskSet, cost: &FlopsCost) -> f64 {
    cost.mask_cost(masks)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencyEntry {
    pub kind: UnitKind,
    pub n_active: usize,
    /// Seconds.
    pub latency: f64,
}

/// Measured sublayer latencies for various numbers of active units.
#[derive(Debug, Clone, PartialEq)]
pub struct LatencyTable {
    entries: Vec<LatencyEntry>,
}

impl LatencyTable {
    /// Requires positive latencies and at least three distinct `n_active`
    /// values per kind.
    pub fn new(entries: Vec<LatencyEntry>) -> Result<Self> {
        if let Some(bad) = entries.iter().find(|e| !(e.latency > 0.0 && e.latency.is_finite())) {
            return Err(Error::InvalidArgument(alloc::format!(
                "latency must be positive, got {} for {} with {} units",
                bad.latency,
                bad.kind.sublayer(),
                bad.n_active
            )));
        }
        let table = Self { entries };
        for kind in UnitKind::BOTH {
            let distinct = table.distinct_counts(kind);
            if distinct < 3 {
                return Err(Error::InvalidArgument(alloc::format!(
                    "latency table needs at least 3 distinct unit counts for {}, found {distinct}",
                    kind.sublayer()
                )));
            }
        }
        Ok(table)
    }

    fn distinct_counts(&self, kind: UnitKind) -> usize {
        let mut ns: Vec<usize> = self.points(kind).iter().map(|p| p.0).collect();
        ns.sort_unstable();
        ns.dedup();
        ns.len()
    }

    /// Checks `n_active` against the model's unit counts.
    pub fn check_dims(&self, dims: MaskDims) -> Result<()> {
        for e in &self.entries {
            let max = dims.units(e.kind);
            if e.n_active > max {
                return Err(Error::InvalidArgument(alloc::format!(
                    "latency table has {} {} units, model has {max}",
                    e.n_active,
                    e.kind.sublayer()
                )));
            }
        }
        Ok(())
    }

    pub fn entries(&self) -> &[LatencyEntry] {
        &self.entries
    }

    pub fn points(&self, kind: UnitKind) -> Vec<(usize, f64)> {
        self.entries
            .iter()
            .filter(|e| e.kind == kind)
            .map(|e| (e.n_active, e.latency))
            .collect()
    }
}

/// `LAT(0) = 0`, `LAT(n) = c` for `0 < n <= T`, `a (n - T) + c` above.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PiecewiseLatency {
    #[cfg_attr(feature = "serde", serde(rename = "a"))]
    pub slope: f64,
    #[cfg_attr(feature = "serde", serde(rename = "c"))]
    pub overhead: f64,
    #[cfg_attr(feature = "serde", serde(rename = "T"))]
    pub threshold: usize,
}

impl PiecewiseLatency {
    pub fn eval(&self, n: usize) -> f64 {
        if n == 0 {
            0.0
        } else if n <= self.threshold {
            self.overhead
        } else {
            self.slope * (n - self.threshold) as f64 + self.overhead
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.slope > 0.0 && self.slope.is_finite() && self.overhead >= 0.0 && self.overhead.is_finite()) {
            return Err(Error::InvalidArgument(alloc::format!(
                "latency model needs a > 0 and c >= 0, got a {} c {}",
                self.slope,
                self.overhead
            )));
        }
        Ok(())
    }
}

/// One piecewise-linear latency curve per sublayer type, shared by all layers.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LatencyModel {
    pub mha: PiecewiseLatency,
    pub ffn: PiecewiseLatency,
}

impl LatencyModel {
    pub fn get(&self, kind: UnitKind) -> &PiecewiseLatency {
        match kind {
            UnitKind::Head => &self.mha,
            UnitKind::Filter => &self.ffn,
        }
    }
}

impl SeparableCost for LatencyModel {
    fn head_cost(&self, heads_kept: &[usize]) -> f64 {
        heads_kept.iter().fold(0.0, |acc, &n| acc + self.mha.eval(n))
    }

    fn filter_cost(&self, filters_kept: &[usize]) -> f64 {
        filters_kept.iter().fold(0.0, |acc, &n| acc + self.ffn.eval(n))
    }
}

/// `sum_l LAT_mha(||m_l^mha||_0) + sum_l LAT_ffn(||m_l^ffn||_0)`
pub fn mask_latency(masks: &MaskSet, lat: &LatencyModel) -> f64 {
    lat.mask_cost(masks)
}

/// Lower bound on the slope so that `LAT` stays strictly increasing.
pub const MIN_SLOPE: f64 = 1e-12;

/// Fitted curve and its mean squared error over the table points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PiecewiseFit {
    pub model: PiecewiseLatency,
    pub mse: f64,
}

fn sse(points: &[(usize, f64)], m: &PiecewiseLatency) -> f64 {
    points
        .iter()
        .map(|&(n, y)| {
            let r = m.eval(n) - y;
            r * r
        })
        .sum()
}

/// Best `(a, c)` for a fixed threshold, with `a >= MIN_SLOPE` and `c >= 0`.
///
/// The problem is a two-variable convex QP with bound constraints, so the
/// optimum is either the unconstrained least-squares solution or lies on
/// one of the bounds; all candidates are evaluated.
fn fit_fixed_threshold(points: &[(usize, f64)], threshold: usize) -> PiecewiseLatency {
    let (mut sxx, mut sx, mut cnt, mut sxy, mut sy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for &(n, y) in points.iter().filter(|p| p.0 > 0) {
        let x = n.saturating_sub(threshold) as f64;
        sxx += x * x;
        sx += x;
        cnt += 1.0;
        sxy += x * y;
        sy += y;
    }
    let mut candidates: Vec<(f64, f64)> = Vec::with_capacity(4);
    let det = sxx * cnt - sx * sx;
    if det.abs() > 1e-12 * (sxx * cnt).max(1e-300) {
        candidates.push(((cnt * sxy - sx * sy) / det, (sxx * sy - sx * sxy) / det));
    }
    if cnt > 0.0 {
        candidates.push((MIN_SLOPE, ((sy - MIN_SLOPE * sx) / cnt).max(0.0)));
    }
    if sxx > 0.0 {
        candidates.push(((sxy / sxx).max(MIN_SLOPE), 0.0));
    }
    candidates.push((MIN_SLOPE, 0.0));

    let mut best: Option<(f64, PiecewiseLatency)> = None;
    for (a, c) in candidates {
        if !(a >= MIN_SLOPE && c >= 0.0 && a.is_finite() && c.is_finite()) {
            continue;
        }
        let m = PiecewiseLatency {
            slope: a,
            overhead: c,
            threshold,
        };
        let err = sse(points, &m);
        if best.map_or(true, |(e, _)| err < e) {
            best = Some((err, m));
        }
    }
    best.expect("the (MIN_SLOPE, 0) candidate is always feasible").1
}

/// Minimum-MSE piecewise-linear fit over thresholds `0..max_n`.
///
/// Thresholds are scanned in increasing order and a later one only wins if
/// its MSE is lower by more than a tiny relative margin, so exact ties go to
/// the smallest threshold.
pub fn fit_piecewise(points: &[(usize, f64)]) -> Result<PiecewiseFit> {
    let mut distinct: Vec<usize> = points.iter().map(|p| p.0).collect();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 3 {
        return Err(Error::InvalidArgument(alloc::format!(
            "need at least 3 distinct unit counts to fit latency, found {}",
            distinct.len()
        )));
    }
    let max_n = *distinct.last().expect("non-empty");
    let mean_sq = points.iter().map(|p| p.1 * p.1).sum::<f64>() / points.len() as f64;
    let margin = 1e-12 * mean_sq;

    let mut best: Option<PiecewiseFit> = None;
    for threshold in 0..max_n {
        let model = fit_fixed_threshold(points, threshold);
        let mse = sse(points, &model) / points.len() as f64;
        let better = match &best {
            None => true,
            Some(b) => mse < b.mse - margin,
        };
        if better {
            best = Some(PiecewiseFit { model, mse });
        }
    }
    Ok(best.expect("max_n >= 2 gives at least one threshold"))
}

/// Fits the MHA and FFN curves of `table` independently.
pub fn fit_latency_model(table: &LatencyTable) -> Result<LatencyModel> {
    Ok(LatencyModel {
        mha: fit_piecewise(&table.points(UnitKind::Head))?.model,
        ffn: fit_piecewise(&table.points(UnitKind::Filter))?.model,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn dims() -> MaskDims {
        MaskDims::new(2, 3, 4).unwrap()
    }

    #[test]
    fn flops_constants_unit_shape() {
        let shape = ModelShape::new(1, 1, 1, 1, 1, 1, 1).unwrap();
        let c = flops_constants(&shape);
        assert_eq!((c.head, c.filter), (12.0, 4.0));
    }

    #[test]
    fn flops_constants_bert_base_sequence() {
        let shape = ModelShape::new(12, 12, 3072, 768, 128, 768, 2).unwrap();
        let c = flops_constants(&shape);
        assert_eq!(c.head, 54_525_952.0);
        assert_eq!(c.filter, 393_216.0);
    }

    #[test]
    fn mask_flops_extremes_and_support_only() {
        let c = FlopsCost::new(dims(), 10.0, 1.0).unwrap();
        assert_eq!(mask_flops(&MaskSet::ones(dims()), &c), c.full_cost());
        assert_eq!(mask_flops(&MaskSet::zeros(dims()), &c), 0.0);
        let binary = MaskSet::from_parts(dims(), vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0], vec![1.0; 8]).unwrap();
        let tuned = MaskSet::from_parts(dims(), vec![-3.2, 0.0, 7.5, 0.0, 0.0, 0.01], vec![2.0; 8]).unwrap();
        assert_eq!(mask_flops(&binary, &c), mask_flops(&tuned, &c));
        assert_eq!(mask_flops(&binary, &c), 3.0 * 10.0 + 8.0);
    }

    #[test]
    fn piecewise_regimes() {
        let p = PiecewiseLatency {
            slope: 2.0,
            overhead: 5.0,
            threshold: 4,
        };
        assert_eq!(p.eval(0), 0.0);
        assert_eq!(p.eval(1), 5.0);
        assert_eq!(p.eval(4), 5.0);
        assert_eq!(p.eval(6), 9.0);
    }

    #[test]
    fn latency_of_empty_model_is_zero() {
        let lat = LatencyModel {
            mha: PiecewiseLatency { slope: 1.0, overhead: 3.0, threshold: 4 },
            ffn: PiecewiseLatency { slope: 0.5, overhead: 2.0, threshold: 1 },
        };
        assert_eq!(mask_latency(&MaskSet::zeros(dims()), &lat), 0.0);
        let mut one_head = MaskSet::zeros(MaskDims::new(1, 3, 4).unwrap());
        one_head.layer_heads_mut(0)[1] = 1.0;
        assert_eq!(mask_latency(&one_head, &lat), 3.0);
    }

    #[test]
    fn linear_data_fits_with_zero_threshold() {
        let points: Vec<(usize, f64)> = (1..=12).map(|n| (n, 2.0 * n as f64)).collect();
        let fit = fit_piecewise(&points).unwrap();
        assert_eq!(fit.model.threshold, 0);
        assert!((fit.model.slope - 2.0).abs() < 1e-12);
        assert!(fit.model.overhead.abs() < 1e-12);
        assert!(fit.mse < 1e-20);
    }

    #[test]
    fn too_few_points_is_an_error() {
        assert!(fit_piecewise(&[(1, 1.0), (2, 2.0), (2, 2.1)]).is_err());
        let entries = vec![
            LatencyEntry { kind: UnitKind::Head, n_active: 1, latency: 1.0 },
            LatencyEntry { kind: UnitKind::Head, n_active: 2, latency: 1.0 },
        ];
        assert!(LatencyTable::new(entries).is_err());
    }

    #[test]
    fn negative_slope_data_is_clamped() {
        let points: Vec<(usize, f64)> = (1..=6).map(|n| (n, 10.0 - n as f64)).collect();
        let fit = fit_piecewise(&points).unwrap();
        assert!(fit.model.slope >= MIN_SLOPE);
        assert!(fit.model.overhead >= 0.0);
    }
}
