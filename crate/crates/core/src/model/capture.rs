use alloc::vec::Vec;

use super::forward::UnitOutputs;
use super::ToyTransformer;
use crate::error::{Error, Result};
use crate::mask::{MaskSet, UnitKind};
use crate::numerics::Matrix;
use crate::SampleBatch;

/// Which residual stream feeds the pruned side of a reconstruction problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum InputSource {
    /// Propagate through the pruned model with the masks tuned so far.
    #[default]
    Pruned,
    /// Feed the original model's activations to both sides.
    Original,
}

/// Everything needed to set up reconstruction for one sublayer.
#[derive(Debug, Clone)]
pub struct SublayerState {
    pub layer: usize,
    pub kind: UnitKind,
    pub source: InputSource,
    /// `x`, one matrix per example.
    pub input: Vec<Matrix>,
    /// Unit outputs on `x`.
    pub units: Vec<UnitOutputs>,
    /// `x'`
    pub original_input: Vec<Matrix>,
    /// `x' + layer(x'; 1)` including the sublayer bias, before LayerNorm.
    pub original_output: Vec<Matrix>,
}

pub(crate) fn flatten(ms: &[Matrix]) -> Vec<f64> {
    let mut out = Vec::with_capacity(ms.iter().map(|m| m.as_slice().len()).sum());
    for m in ms {
        out.extend_from_slice(m.as_slice());
    }
    out
}

impl SublayerState {
    pub fn rows(&self) -> usize {
        self.input.iter().map(|m| m.as_slice().len()).sum()
    }

    /// `A`: one column per entry of `unit_ids`, each the unit's output over
    /// all (example, token, hidden) positions.
    pub fn columns(&self, model: &ToyTransformer, unit_ids: &[usize]) -> Matrix {
        let k = unit_ids.len();
        let mut a = Matrix::zeros(self.rows(), k);
        let hidden = model.shape.hidden;
        let mut row = 0;
        for units in &self.units {
            match units {
                UnitOutputs::Heads(heads) => {
                    let len = heads[0].output.as_slice().len();
                    for i in 0..len {
                        let dst = a.row_mut(row + i);
                        for (j, &u) in unit_ids.iter().enumerate() {
                            dst[j] = heads[u].output.as_slice()[i];
                        }
                    }
                    row += len;
                }
                UnitOutputs::Filters { activation, .. } => {
                    let w2 = &model.layers[self.layer].w2;
                    for t in 0..activation.rows() {
                        let act = activation.row(t);
                        for d in 0..hidden {
                            let w = w2.row(d);
                            let dst = a.row_mut(row + d);
                            for (j, &u) in unit_ids.iter().enumerate() {
                                dst[j] = act[u] * w[u];
                            }
                        }
                        row += hidden;
                    }
                }
            }
        }
        a
    }
}

/// Pruned and original residual streams walked in lockstep through the
/// sublayers MHA_0, FFN_0, MHA_1, ...
#[derive(Debug)]
pub struct Streams<'a> {
    model: &'a ToyTransformer,
    pruned: Vec<Matrix>,
    original: Vec<Matrix>,
    next: usize,
}

impl<'a> Streams<'a> {
    pub fn new(model: &'a ToyTransformer, batch: &SampleBatch) -> Result<Self> {
        if batch.is_empty() {
            return Err(Error::Empty("sample batch"));
        }
        for input in batch.inputs() {
            model.check_input(input)?;
        }
        let embedded: Vec<Matrix> = batch.inputs().iter().map(|x| model.embed(x)).collect();
        Ok(Self {
            model,
            pruned: embedded.clone(),
            original: embedded,
            next: 0,
        })
    }

    /// The sublayer [`capture`](Self::capture) would look at next.
    pub fn position(&self) -> Option<(usize, UnitKind)> {
        if self.next >= 2 * self.model.shape.layers {
            None
        } else {
            Some((self.next / 2, UnitKind::BOTH[self.next % 2]))
        }
    }

    pub fn pruned(&self) -> &[Matrix] {
        &self.pruned
    }

    pub fn original(&self) -> &[Matrix] {
        &self.original
    }

    pub fn capture(&self, source: InputSource) -> Option<SublayerState> {
        let (layer, kind) = self.position()?;
        let model = self.model;
        let input = match source {
            InputSource::Pruned => self.pruned.clone(),
            InputSource::Original => self.original.clone(),
        };
        let units = input
            .iter()
            .map(|x| model.unit_outputs(layer, kind, x))
            .collect();
        let original_output = self
            .original
            .iter()
            .map(|x| {
                let u = model.unit_outputs(layer, kind, x);
                model.residual_sum(layer, x, &u, None)
            })
            .collect();
        Some(SublayerState {
            layer,
            kind,
            source,
            input,
            units,
            original_input: self.original.clone(),
            original_output,
        })
    }

    /// Moves both streams past the current sublayer, the pruned one with
    /// `mask` applied.
    pub fn advance(&mut self, state: &SublayerState, mask: &[f64]) {
        let model = self.model;
        let (layer, kind) = (state.layer, state.kind);
        debug_assert_eq!(self.position(), Some((layer, kind)));
        let pruned_next: Vec<Matrix> = match state.source {
            InputSource::Pruned => self
                .pruned
                .iter()
                .zip(&state.units)
                .map(|(x, u)| model.sublayer_norm(layer, kind, &model.residual_sum(layer, x, u, Some(mask))).0)
                .collect(),
            InputSource::Original => self
                .pruned
                .iter()
                .map(|x| {
                    let u = model.unit_outputs(layer, kind, x);
                    model.sublayer_norm(layer, kind, &model.residual_sum(layer, x, &u, Some(mask))).0
                })
                .collect(),
        };
        self.pruned = pruned_next;
        self.original = state
            .original_output
            .iter()
            .map(|u| model.sublayer_norm(layer, kind, u).0)
            .collect();
        self.next += 1;
    }

    /// Advances with `masks` until `(layer, kind)` is the current sublayer.
    pub fn seek(&mut self, masks: &MaskSet, layer: usize, kind: UnitKind) -> Result<()> {
        let target = 2 * layer + usize::from(kind == UnitKind::Filter);
        if target < self.next {
            return Err(Error::InvalidArgument("cannot seek backwards".into()));
        }
        while self.next < target {
            let (l, k) = self.position().expect("target within range");
            let state = self.capture(InputSource::Pruned).expect("position checked");
            self.advance(&state, masks.layer(l, k));
        }
        Ok(())
    }
}

/// Inputs and per-unit outputs of one sublayer, flattened over
/// (example, token, hidden).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCapture {
    /// Indices of the unpruned units, in ascending order.
    pub unit_ids: Vec<usize>,
    /// One column per unpruned unit.
    pub columns: Matrix,
    /// `x`
    pub input: Vec<f64>,
    /// `x'`
    pub original_input: Vec<f64>,
    /// `x' + layer(x'; 1)`, bias included.
    pub original_output: Vec<f64>,
    /// Sublayer bias repeated over every (example, token) position.
    pub bias: Vec<f64>,
}

/// Captures sublayer `(layer, kind)` with every earlier sublayer of the
/// pruned stream running under `masks`.
pub fn capture_layer_io(
    model: &ToyTransformer,
    masks: &MaskSet,
    batch: &SampleBatch,
    layer: usize,
    kind: UnitKind,
    source: InputSource,
) -> Result<LayerCapture> {
    model.check_masks(masks)?;
    if layer >= model.shape.layers {
        return Err(Error::InvalidArgument(alloc::format!(
            "layer {layer} out of range for {} layers",
            model.shape.layers
        )));
    }
    let mut streams = Streams::new(model, batch)?;
    streams.seek(masks, layer, kind)?;
    let state = streams.capture(source).expect("layer checked");
    let unit_ids: Vec<usize> = masks
        .layer(layer, kind)
        .iter()
        .enumerate()
        .filter(|(_, &m)| m != 0.0)
        .map(|(i, _)| i)
        .collect();
    let columns = state.columns(model, &unit_ids);
    let bias_row = model.sublayer_bias(layer, kind);
    let positions = state.rows() / model.shape.hidden;
    let mut bias = Vec::with_capacity(state.rows());
    for _ in 0..positions {
        bias.extend_from_slice(bias_row);
    }
    Ok(LayerCapture {
        unit_ids,
        columns,
        input: flatten(&state.input),
        original_input: flatten(&state.original_input),
        original_output: flatten(&state.original_output),
        bias,
    })
}
