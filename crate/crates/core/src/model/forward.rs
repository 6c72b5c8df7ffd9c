use alloc::vec;
use alloc::vec::Vec;

use super::{ToyTransformer, LAYER_NORM_EPS};
use crate::error::{Error, Result};
use crate::mask::{MaskSet, UnitKind};
use crate::numerics::{axpy, Matrix};
use crate::SampleBatch;

/// Normalized rows and inverse standard deviations, kept for backprop.
#[derive(Debug, Clone, PartialEq)]
pub struct LnCache {
    pub normalized: Matrix,
    pub inv_std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadTrace {
    pub query: Matrix,
    pub key: Matrix,
    pub value: Matrix,
    /// Row-softmaxed attention weights, `seq x seq`.
    pub probs: Matrix,
    /// `Attn_h(x)`, `seq x hidden`, before the mask is applied.
    pub output: Matrix,
}

/// Unmasked per-unit outputs of one sublayer for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub enum UnitOutputs {
    Heads(Vec<HeadTrace>),
    /// Filter `i` contributes `activation[:, i] (x) W2[:, i]`, so only the
    /// `seq x filters` post-GELU activations are stored.
    Filters { pre_activation: Matrix, activation: Matrix },
}

impl UnitOutputs {
    pub fn kind(&self) -> UnitKind {
        match self {
            UnitOutputs::Heads(_) => UnitKind::Head,
            UnitOutputs::Filters { .. } => UnitKind::Filter,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    pub input: Matrix,
    pub heads: Vec<HeadTrace>,
    /// `x + MHA(x; m)`, before LayerNorm.
    pub attn_residual: Matrix,
    pub ln1: LnCache,
    pub hidden: Matrix,
    pub pre_activation: Matrix,
    pub activation: Matrix,
    /// `x1 + FFN(x1; m)`, before LayerNorm.
    pub ffn_residual: Matrix,
    pub ln2: LnCache,
    pub output: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExampleTrace {
    pub embedded: Matrix,
    pub layers: Vec<LayerTrace>,
    pub pooled: Vec<f64>,
    pub logits: Vec<f64>,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// Mean cross-entropy over the batch.
    pub loss: f64,
    pub losses: Vec<f64>,
    pub logits: Vec<Vec<f64>>,
}

impl ForwardOutput {
    pub fn predictions(&self) -> Vec<usize> {
        self.logits.iter().map(|l| argmax(l)).collect()
    }

    pub fn accuracy(&self, labels: &[usize]) -> f64 {
        let hits = self
            .predictions()
            .iter()
            .zip(labels)
            .filter(|(p, y)| p == y)
            .count();
        hits as f64 / labels.len() as f64
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn gelu(z: f64) -> f64 {
    0.5 * z * (1.0 + libm::erf(z * core::f64::consts::FRAC_1_SQRT_2))
}

pub(crate) fn gelu_grad(z: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(z * core::f64::consts::FRAC_1_SQRT_2));
    let pdf = libm::exp(-0.5 * z * z) / libm::sqrt(2.0 * core::f64::consts::PI);
    cdf + z * pdf
}

pub(crate) fn layer_norm(u: &Matrix, gamma: &[f64], beta: &[f64]) -> (Matrix, LnCache) {
    let cols = u.cols();
    let mut normalized = Matrix::zeros(u.rows(), cols);
    let mut out = Matrix::zeros(u.rows(), cols);
    let mut inv_std = Vec::with_capacity(u.rows());
    for r in 0..u.rows() {
        let row = u.row(r);
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let inv = 1.0 / libm::sqrt(var + LAYER_NORM_EPS);
        inv_std.push(inv);
        for c in 0..cols {
            let n = (row[c] - mean) * inv;
            normalized.set(r, c, n);
            out.set(r, c, gamma[c] * n + beta[c]);
        }
    }
    (
        out,
        LnCache {
            normalized,
            inv_std,
        },
    )
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| libm::exp(l - max)).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub(crate) fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + libm::log(logits.iter().map(|l| libm::exp(l - max)).sum::<f64>());
    lse - logits[label]
}

impl ToyTransformer {
    /// `input (seq x features) * embedding`
    pub fn embed(&self, input: &Matrix) -> Matrix {
        input.matmul(&self.embedding)
    }

    pub fn head_output(&self, layer: usize, head: usize, x: &Matrix) -> HeadTrace {
        let p = &self.layers[layer];
        let query = x.matmul(&p.query[head]);
        let key = x.matmul(&p.key[head]);
        let value = x.matmul(&p.value[head]);
        let scale = 1.0 / libm::sqrt(self.shape.head_dim as f64);
        let mut probs = query.matmul_t(&key);
        for r in 0..probs.rows() {
            let row = probs.row_mut(r);
            for v in row.iter_mut() {
                *v *= scale;
            }
            let sm = softmax(row);
            row.copy_from_slice(&sm);
        }
        let output = probs.matmul(&value).matmul(&p.output[head]);
        HeadTrace {
            query,
            key,
            value,
            probs,
            output,
        }
    }

    /// Per-unit outputs of sublayer `kind` of `layer` on input `x`.
    pub fn unit_outputs(&self, layer: usize, kind: UnitKind, x: &Matrix) -> UnitOutputs {
        match kind {
            UnitKind::Head => UnitOutputs::Heads(
                (0..self.shape.heads)
                    .map(|h| self.head_output(layer, h, x))
                    .collect(),
            ),
            UnitKind::Filter => {
                let p = &self.layers[layer];
                let mut pre_activation = x.matmul_t(&p.w1);
                for r in 0..pre_activation.rows() {
                    for (v, b) in pre_activation.row_mut(r).iter_mut().zip(&p.b1) {
                        *v += b;
                    }
                }
                let mut activation = pre_activation.clone();
                for v in activation.as_mut_slice() {
                    *v = gelu(*v);
                }
                UnitOutputs::Filters {
                    pre_activation,
                    activation,
                }
            }
        }
    }

    /// `x + sum_u m_u * unit_u + bias`, the pre-LayerNorm sublayer output.
    /// `mask = None` skips the multiplication entirely.
    pub fn residual_sum(
        &self,
        layer: usize,
        x: &Matrix,
        units: &UnitOutputs,
        mask: Option<&[f64]>,
    ) -> Matrix {
        let bias = self.sublayer_bias(layer, units.kind());
        let mut sum = Matrix::zeros(x.rows(), x.cols());
        match units {
            UnitOutputs::Heads(heads) => {
                for (h, head) in heads.iter().enumerate() {
                    match mask {
                        None => axpy(1.0, head.output.as_slice(), sum.as_mut_slice()),
                        Some(m) => axpy(m[h], head.output.as_slice(), sum.as_mut_slice()),
                    }
                }
            }
            UnitOutputs::Filters { activation, .. } => {
                let masked = match mask {
                    None => activation.clone(),
                    Some(m) => {
                        let mut a = activation.clone();
                        for r in 0..a.rows() {
                            for (v, mi) in a.row_mut(r).iter_mut().zip(m) {
                                *v *= mi;
                            }
                        }
                        a
                    }
                };
                sum = masked.matmul_t(&self.layers[layer].w2);
            }
        }
        let mut out = x.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            for ((o, s), b) in row.iter_mut().zip(sum.row(r)).zip(bias) {
                *o += s + b;
            }
        }
        out
    }

    /// LayerNorm closing sublayer `kind` of `layer`.
    pub fn sublayer_norm(&self, layer: usize, kind: UnitKind, u: &Matrix) -> (Matrix, LnCache) {
        let p = &self.layers[layer];
        match kind {
            UnitKind::Head => layer_norm(u, &p.ln1_gamma, &p.ln1_beta),
            UnitKind::Filter => layer_norm(u, &p.ln2_gamma, &p.ln2_beta),
        }
    }

    pub fn classify(&self, encoded: &Matrix) -> (Vec<f64>, Vec<f64>) {
        let seq = encoded.rows() as f64;
        let mut pooled = vec![0.0; encoded.cols()];
        for r in 0..encoded.rows() {
            axpy(1.0 / seq, encoded.row(r), &mut pooled);
        }
        let mut logits = self.classifier.t_matvec(&pooled);
        for (l, b) in logits.iter_mut().zip(&self.classifier_bias) {
            *l += b;
        }
        (pooled, logits)
    }

    pub(crate) fn check_input(&self, input: &Matrix) -> Result<()> {
        if input.rows() != self.shape.seq_len || input.cols() != self.shape.features {
            return Err(Error::InvalidShape(alloc::format!(
                "input is {}x{}, model expects {}x{}",
                input.rows(),
                input.cols(),
                self.shape.seq_len,
                self.shape.features
            )));
        }
        Ok(())
    }

    /// Full forward pass for one sequence, keeping every intermediate.
    pub fn trace_example(
        &self,
        masks: Option<&MaskSet>,
        input: &Matrix,
        label: usize,
    ) -> Result<ExampleTrace> {
        self.check_input(input)?;
        if let Some(m) = masks {
            self.check_masks(m)?;
        }
        if label >= self.shape.classes {
            return Err(Error::InvalidArgument(alloc::format!(
                "label {label} out of range for {} classes",
                self.shape.classes
            )));
        }
        let embedded = self.embed(input);
        let mut x = embedded.clone();
        let mut layers = Vec::with_capacity(self.shape.layers);
        for l in 0..self.shape.layers {
            let head_units = self.unit_outputs(l, UnitKind::Head, &x);
            let attn_residual =
                self.residual_sum(l, &x, &head_units, masks.map(|m| m.layer_heads(l)));
            let (hidden, ln1) = self.sublayer_norm(l, UnitKind::Head, &attn_residual);
            let filter_units = self.unit_outputs(l, UnitKind::Filter, &hidden);
            let ffn_residual =
                self.residual_sum(l, &hidden, &filter_units, masks.map(|m| m.layer_filters(l)));
            let (output, ln2) = self.sublayer_norm(l, UnitKind::Filter, &ffn_residual);
            let heads = match head_units {
                UnitOutputs::Heads(h) => h,
                UnitOutputs::Filters { .. } => unreachable!(),
            };
            let (pre_activation, activation) = match filter_units {
                UnitOutputs::Filters {
                    pre_activation,
                    activation,
                } => (pre_activation, activation),
                UnitOutputs::Heads(_) => unreachable!(),
            };
            layers.push(LayerTrace {
                input: core::mem::replace(&mut x, output.clone()),
                heads,
                attn_residual,
                ln1,
                hidden,
                pre_activation,
                activation,
                ffn_residual,
                ln2,
                output,
            });
        }
        let (pooled, logits) = self.classify(&x);
        let loss = cross_entropy(&logits, label);
        Ok(ExampleTrace {
            embedded,
            layers,
            pooled,
            logits,
            loss,
        })
    }

    pub fn example_loss(&self, masks: Option<&MaskSet>, input: &Matrix, label: usize) -> Result<f64> {
        Ok(self.trace_example(masks, input, label)?.loss)
    }

    /// Masked forward pass over a batch.
    pub fn forward(&self, masks: &MaskSet, batch: &SampleBatch) -> Result<ForwardOutput> {
        self.forward_impl(Some(masks), batch)
    }

    /// Reference forward pass with no mask multiplication at all.
    pub fn forward_unmasked(&self, batch: &SampleBatch) -> Result<ForwardOutput> {
        self.forward_impl(None, batch)
    }

    fn forward_impl(&self, masks: Option<&MaskSet>, batch: &SampleBatch) -> Result<ForwardOutput> {
        if batch.is_empty() {
            return Err(Error::Empty("sample batch"));
        }
        let mut losses = Vec::with_capacity(batch.len());
        let mut logits = Vec::with_capacity(batch.len());
        for (input, &label) in batch.inputs().iter().zip(batch.labels()) {
            let t = self.trace_example(masks, input, label)?;
            losses.push(t.loss);
            logits.push(t.logits);
        }
        let loss = losses.iter().sum::<f64>() / losses.len() as f64;
        Ok(ForwardOutput {
            loss,
            losses,
            logits,
        })
    }
}
