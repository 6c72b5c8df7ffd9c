//! Stage 3: per-sublayer mask tuning by damped linear least squares.
//!
//! For each sublayer in forward order the kept units' mask values are
//! chosen so that `x + layer(x; m)` matches the original model's
//! `x' + layer(x'; 1)`, where `x` is the pruned model's input (propagated
//! through the layers tuned so far) and `x'` the original model's. Writing
//! `m = 1 + r` turns this into `min ||A r - (b - A 1)||^2 + damp^2 ||r||^2`.
//! A solution with any value outside the accepted range is discarded and
//! tuning stops there; earlier sublayers keep their tuned values.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::mask::{MaskSet, UnitKind};
use crate::model::{capture_layer_io, InputSource, Streams, SublayerState, ToyTransformer};
use crate::numerics::{solve_damped_lls, LlsOptions, Matrix};
use crate::SampleBatch;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct TuneOptions {
    pub damp: f64,
    /// Smallest accepted mask value.
    pub lower: f64,
    /// Largest accepted mask value.
    pub upper: f64,
    pub tol: f64,
    pub max_iter: Option<usize>,
    pub source: InputSource,
}

impl Default for TuneOptions {
    fn default() -> Self {
        Self {
            damp: 1.0,
            lower: -10.0,
            upper: 10.0,
            tol: 1e-10,
            max_iter: None,
            source: InputSource::Pruned,
        }
    }
}

/// `min_m ||A m - b||` over the kept units of one sublayer.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconProblem {
    /// One column per kept unit: its output over all tokens, flattened.
    pub a: Matrix,
    /// `(x' + layer(x'; 1)) - x - bias`
    pub b: Vec<f64>,
    pub unit_ids: Vec<usize>,
}

impl ReconProblem {
    /// `b - A 1`, the right-hand side for the correction `r = m - 1`.
    pub fn residual_target(&self) -> Vec<f64> {
        let ones = alloc::vec![1.0; self.a.cols()];
        let a1 = self.a.matvec(&ones);
        self.b.iter().zip(&a1).map(|(b, a)| b - a).collect()
    }
}

fn kept_units(mask: &[f64]) -> Vec<usize> {
    (0..mask.len()).filter(|&i| mask[i] != 0.0).collect()
}

fn problem_from_state(model: &ToyTransformer, state: &SublayerState, unit_ids: Vec<usize>) -> ReconProblem {
    let a = state.columns(model, &unit_ids);
    let bias = model.sublayer_bias(state.layer, state.kind);
    let hidden = model.shape.hidden;
    let mut b = Vec::with_capacity(a.rows());
    for (target, x) in state.original_output.iter().zip(&state.input) {
        for (i, (t, xi)) in target.as_slice().iter().zip(x.as_slice()).enumerate() {
            b.push(t - xi - bias[i % hidden]);
        }
    }
    ReconProblem { a, b, unit_ids }
}

/// Reconstruction problem for sublayer `(layer, kind)`, with every earlier
/// sublayer of the pruned stream running under `masks`.
pub fn build_recon_problem(
    model: &ToyTransformer,
    masks: &MaskSet,
    batch: &SampleBatch,
    layer: usize,
    kind: UnitKind,
    source: InputSource,
) -> Result<ReconProblem> {
    let cap = capture_layer_io(model, masks, batch, layer, kind, source)?;
    let b = cap
        .original_output
        .iter()
        .zip(&cap.input)
        .zip(&cap.bias)
        .map(|((t, x), bias)| t - x - bias)
        .collect();
    Ok(ReconProblem {
        a: cap.columns,
        b,
        unit_ids: cap.unit_ids,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerTuning {
    /// Candidate mask values `1 + r`, one per kept unit.
    pub values: Vec<f64>,
    pub accepted: bool,
    pub converged: bool,
}

/// Solves one reconstruction problem. The candidate is accepted only if the
/// solver converged and every value lies in `[lower, upper]`.
pub fn tune_layer(problem: &ReconProblem, opts: &TuneOptions) -> Result<LayerTuning> {
    if problem.a.cols() == 0 {
        return Err(Error::Empty("reconstruction problem columns"));
    }
    let lls = LlsOptions {
        damp: opts.damp,
        tol: opts.tol,
        max_iter: opts.max_iter,
    };
    let sol = solve_damped_lls(&problem.a, &problem.residual_target(), &lls)?;
    let values: Vec<f64> = sol.x.iter().map(|r| 1.0 + r).collect();
    let in_range = values.iter().all(|v| *v >= opts.lower && *v <= opts.upper);
    Ok(LayerTuning {
        accepted: sol.converged && in_range,
        converged: sol.converged,
        values,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum TuneStatus {
    Tuned,
    /// Solution rejected; the sublayer keeps its binary mask and tuning ends.
    RevertedAndStopped,
    SkippedAfterStop,
    /// Every unit of the sublayer is pruned, nothing to tune.
    SkippedEmpty,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SublayerTuning {
    pub layer: usize,
    pub kind: UnitKind,
    pub status: TuneStatus,
    /// Range of the solver's candidate values, when one was computed.
    pub min_value: Option<f64>,
    pub max_value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TuneReport {
    pub sublayers: Vec<SublayerTuning>,
}

impl TuneReport {
    pub fn tuned_count(&self) -> usize {
        self.sublayers
            .iter()
            .filter(|s| s.status == TuneStatus::Tuned)
            .count()
    }

    pub fn stopped_at(&self) -> Option<(usize, UnitKind)> {
        self.sublayers
            .iter()
            .find(|s| s.status == TuneStatus::RevertedAndStopped)
            .map(|s| (s.layer, s.kind))
    }
}

/// Tunes MHA_0, FFN_0, MHA_1, ... in order. Pruned entries stay exactly 0.
pub fn tune_model(
    model: &ToyTransformer,
    batch: &SampleBatch,
    masks: &MaskSet,
    opts: &TuneOptions,
) -> Result<(MaskSet, TuneReport)> {
    model.check_masks(masks)?;
    if !masks.is_binary() {
        return Err(Error::InvalidArgument("mask tuning needs a binary mask".into()));
    }
    let mut out = masks.clone();
    let mut streams = Streams::new(model, batch)?;
    let mut sublayers = Vec::with_capacity(2 * model.shape.layers);

    while let Some((layer, kind)) = streams.position() {
        let state = streams.capture(opts.source).expect("position is valid");
        let unit_ids = kept_units(masks.layer(layer, kind));
        let mut entry = SublayerTuning {
            layer,
            kind,
            status: TuneStatus::SkippedEmpty,
            min_value: None,
            max_value: None,
        };
        if !unit_ids.is_empty() {
            let problem = problem_from_state(model, &state, unit_ids);
            let tuning = tune_layer(&problem, opts)?;
            entry.min_value = tuning.values.iter().copied().reduce(f64::min);
            entry.max_value = tuning.values.iter().copied().reduce(f64::max);
            if tuning.accepted {
                let dst = out.layer_mut(layer, kind);
                for (&u, &v) in problem.unit_ids.iter().zip(&tuning.values) {
                    dst[u] = v;
                }
                entry.status = TuneStatus::Tuned;
            } else {
                entry.status = TuneStatus::RevertedAndStopped;
            }
        }
        let stop = entry.status == TuneStatus::RevertedAndStopped;
        sublayers.push(entry);
        if stop {
            break;
        }
        streams.advance(&state, out.layer(layer, kind));
    }
    for idx in sublayers.len()..2 * model.shape.layers {
        sublayers.push(SublayerTuning {
            layer: idx / 2,
            kind: UnitKind::BOTH[idx % 2],
            status: TuneStatus::SkippedAfterStop,
            min_value: None,
            max_value: None,
        });
    }
    Ok((out, TuneReport { sublayers }))
}
