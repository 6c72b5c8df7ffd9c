//! A small post-LayerNorm transformer encoder with masked heads and filters.
//!
//! Each layer computes
//!
//! ```text
//! u1 = x  + sum_h m_h * Attn_h(x) + b_o        x1   = LayerNorm(u1)
//! u2 = x1 + sum_i m_i * W2[:, i] gelu(W1[i, :] x1 + b1_i) + b2
//! out = LayerNorm(u2)
//! ```
//!
//! followed, after the last layer, by mean pooling over tokens, a linear
//! classifier and cross-entropy. A zero mask entry is exactly equivalent to
//! deleting the unit.

mod capture;
mod data;
mod forward;
mod grad;

pub use capture::{capture_layer_io, InputSource, LayerCapture, Streams, SublayerState};
pub use data::{generate_samples, SampleBatch};
pub use forward::{ExampleTrace, ForwardOutput, HeadTrace, LayerTrace, LnCache, UnitOutputs};
pub use grad::GRADIENT_FD_STEP;

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::mask::{MaskDims, UnitKind};
use crate::numerics::Matrix;
use crate::rng::{Sampler, STREAM_MODEL};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Standard deviation of the log of each head's and filter's output scale.
const UNIT_SCALE_SPREAD: f64 = 1.0;
const CENTERING_BATCH: usize = 64;
const UNIT_GAIN: f64 = 1.0;
const CLASSIFIER_GAIN: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelShape {
    pub layers: usize,
    pub heads: usize,
    pub filters: usize,
    pub hidden: usize,
    pub head_dim: usize,
    pub seq_len: usize,
    /// Input feature size per token.
    pub features: usize,
    pub classes: usize,
}

impl ModelShape {
    /// Derives `head_dim = hidden / heads`.
    pub fn new(
        layers: usize,
        heads: usize,
        filters: usize,
        hidden: usize,
        seq_len: usize,
        features: usize,
        classes: usize,
    ) -> Result<Self> {
        if heads == 0 || hidden % heads != 0 {
            return Err(Error::InvalidShape(alloc::format!(
                "hidden size {hidden} is not divisible by head count {heads}"
            )));
        }
        let shape = Self {
            layers,
            heads,
            filters,
            hidden,
            head_dim: hidden / heads,
            seq_len,
            features,
            classes,
        };
        shape.validate()?;
        Ok(shape)
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.layers,
            self.heads,
            self.filters,
            self.hidden,
            self.head_dim,
            self.seq_len,
            self.features,
            self.classes,
        ];
        if counts.contains(&0) {
            return Err(Error::InvalidShape(alloc::format!(
                "all dimensions must be positive: {self:?}"
            )));
        }
        if self.hidden != self.heads * self.head_dim {
            return Err(Error::InvalidShape(alloc::format!(
                "hidden {} != heads {} x head_dim {}",
                self.hidden,
                self.heads,
                self.head_dim
            )));
        }
        Ok(())
    }

    pub fn mask_dims(&self) -> MaskDims {
        MaskDims {
            layers: self.layers,
            heads: self.heads,
            filters: self.filters,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    /// Per head, `hidden x head_dim`.
    pub query: Vec<Matrix>,
    pub key: Vec<Matrix>,
    pub value: Vec<Matrix>,
    /// Per head, `head_dim x hidden`.
    pub output: Vec<Matrix>,
    pub output_bias: Vec<f64>,
    pub ln1_gamma: Vec<f64>,
    pub ln1_beta: Vec<f64>,
    /// `filters x hidden`
    pub w1: Matrix,
    pub b1: Vec<f64>,
    /// `hidden x filters`
    pub w2: Matrix,
    pub b2: Vec<f64>,
    pub ln2_gamma: Vec<f64>,
    pub ln2_beta: Vec<f64>,
}

impl EncoderLayer {
    fn zeros(shape: &ModelShape) -> Self {
        let (d, dh, h, n) = (shape.hidden, shape.head_dim, shape.heads, shape.filters);
        Self {
            query: vec![Matrix::zeros(d, dh); h],
            key: vec![Matrix::zeros(d, dh); h],
            value: vec![Matrix::zeros(d, dh); h],
            output: vec![Matrix::zeros(dh, d); h],
            output_bias: vec![0.0; d],
            ln1_gamma: vec![1.0; d],
            ln1_beta: vec![0.0; d],
            w1: Matrix::zeros(n, d),
            b1: vec![0.0; n],
            w2: Matrix::zeros(d, n),
            b2: vec![0.0; d],
            ln2_gamma: vec![1.0; d],
            ln2_beta: vec![0.0; d],
        }
    }

    fn visit<'a>(&'a self, f: &mut impl FnMut(&'a [f64])) {
        for group in [&self.query, &self.key, &self.value, &self.output] {
            for m in group {
                f(m.as_slice());
            }
        }
        f(&self.output_bias);
        f(&self.ln1_gamma);
        f(&self.ln1_beta);
        f(self.w1.as_slice());
        f(&self.b1);
        f(self.w2.as_slice());
        f(&self.b2);
        f(&self.ln2_gamma);
        f(&self.ln2_beta);
    }

    fn visit_mut(&mut self, f: &mut impl FnMut(&mut [f64])) {
        for group in [
            &mut self.query,
            &mut self.key,
            &mut self.value,
            &mut self.output,
        ] {
            for m in group.iter_mut() {
                f(m.as_mut_slice());
            }
        }
        f(&mut self.output_bias);
        f(&mut self.ln1_gamma);
        f(&mut self.ln1_beta);
        f(self.w1.as_mut_slice());
        f(&mut self.b1);
        f(self.w2.as_mut_slice());
        f(&mut self.b2);
        f(&mut self.ln2_gamma);
        f(&mut self.ln2_beta);
    }
}

/// Removes from each classifier column its component in the span of the
/// embedding rows and the all-ones direction, so the class decision has to
/// come from what the heads and filters write. Skipped when that span would
/// cover the whole hidden space.
fn project_out_embedding(classifier: &mut Matrix, embedding: &Matrix) {
    let hidden = classifier.rows();
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let candidates = (0..embedding.rows())
        .map(|r| embedding.row(r).to_vec())
        .chain(core::iter::once(vec![1.0; hidden]));
    for mut v in candidates {
        for b in &basis {
            let p = crate::numerics::dot(&v, b);
            crate::numerics::axpy(-p, b, &mut v);
        }
        let norm = crate::numerics::norm2(&v);
        if norm > 1e-10 {
            crate::numerics::scale(1.0 / norm, &mut v);
            basis.push(v);
        }
    }
    if basis.len() >= hidden {
        return;
    }
    for c in 0..classifier.cols() {
        let mut col = classifier.column(c);
        for b in &basis {
            let p = crate::numerics::dot(&col, b);
            crate::numerics::axpy(-p, b, &mut col);
        }
        for (r, v) in col.into_iter().enumerate() {
            classifier.set(r, c, v);
        }
    }
}

/// Frozen encoder weights. Never trained: the weights are drawn once from
/// the seed and the model then labels its own data (see [`generate_samples`]).
#[derive(Debug, Clone, PartialEq)]
pub struct ToyTransformer {
    pub shape: ModelShape,
    /// `features x hidden`
    pub embedding: Matrix,
    pub layers: Vec<EncoderLayer>,
    /// `hidden x classes`
    pub classifier: Matrix,
    pub classifier_bias: Vec<f64>,
}

impl ToyTransformer {
    /// All weight matrices zero, LayerNorm scales one.
    pub fn zeros(shape: ModelShape) -> Result<Self> {
        shape.validate()?;
        Ok(Self {
            shape,
            embedding: Matrix::zeros(shape.features, shape.hidden),
            layers: (0..shape.layers).map(|_| EncoderLayer::zeros(&shape)).collect(),
            classifier: Matrix::zeros(shape.hidden, shape.classes),
            classifier_bias: vec![0.0; shape.classes],
        })
    }

    /// Scaled-normal initialization from `seed`.
    ///
    /// Every head's output projection and every filter's output column get
    /// an extra log-normal scale so that unit importances are spread out
    /// rather than nearly identical.
    pub fn init(shape: ModelShape, seed: u64) -> Result<Self> {
        let mut model = Self::zeros(shape)?;
        let mut rng = Sampler::new(seed, STREAM_MODEL);
        let (d, dh, n) = (shape.hidden as f64, shape.head_dim as f64, shape.filters as f64);
        let fill = |m: &mut [f64], std: f64, rng: &mut Sampler| {
            for v in m {
                *v = std * rng.normal();
            }
        };

        fill(
            model.embedding.as_mut_slice(),
            1.0 / libm::sqrt(shape.features as f64),
            &mut rng,
        );
        for layer in &mut model.layers {
            for h in 0..shape.heads {
                fill(layer.query[h].as_mut_slice(), 1.0 / libm::sqrt(d), &mut rng);
                fill(layer.key[h].as_mut_slice(), 1.0 / libm::sqrt(d), &mut rng);
                fill(layer.value[h].as_mut_slice(), 1.0 / libm::sqrt(d), &mut rng);
                let unit_scale = libm::exp(UNIT_SCALE_SPREAD * rng.normal());
                let std = UNIT_GAIN * unit_scale / libm::sqrt(dh * shape.heads as f64);
                fill(layer.output[h].as_mut_slice(), std, &mut rng);
            }
            fill(layer.w1.as_mut_slice(), 1.0 / libm::sqrt(d), &mut rng);
            fill(&mut layer.b1, 0.1, &mut rng);
            for i in 0..shape.filters {
                let unit_scale = libm::exp(UNIT_SCALE_SPREAD * rng.normal());
                for r in 0..shape.hidden {
                    let v = UNIT_GAIN * unit_scale * rng.normal() / libm::sqrt(n);
                    layer.w2.set(r, i, v);
                }
            }
        }
        fill(model.classifier.as_mut_slice(), CLASSIFIER_GAIN / (UNIT_GAIN * libm::sqrt(d)), &mut rng);
        project_out_embedding(&mut model.classifier, &model.embedding);
        model.center_classifier(&mut rng);
        Ok(model)
    }

    /// Sets the classifier bias to minus the mean logits over a reference
    /// batch of standard-normal inputs, so no class dominates.
    fn center_classifier(&mut self, rng: &mut Sampler) {
        let shape = self.shape;
        let mut mean = vec![0.0; shape.classes];
        for _ in 0..CENTERING_BATCH {
            let input = Matrix::from_fn(shape.seq_len, shape.features, |_, _| rng.normal());
            let (_, logits) = self.classify(&self.encode(&input));
            for (m, l) in mean.iter_mut().zip(&logits) {
                *m += l / CENTERING_BATCH as f64;
            }
        }
        for (b, m) in self.classifier_bias.iter_mut().zip(&mean) {
            *b = -m;
        }
    }

    pub fn mask_dims(&self) -> MaskDims {
        self.shape.mask_dims()
    }

    pub fn num_parameters(&self) -> usize {
        let mut count = 0;
        self.visit(&mut |s| count += s.len());
        count
    }

    /// All weights in a fixed order: embedding, then per layer Q, K, V, O per
    /// head, output bias, LN1, W1, b1, W2, b2, LN2, then the classifier.
    pub fn parameters(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_parameters());
        self.visit(&mut |s| out.extend_from_slice(s));
        out
    }

    pub fn from_parameters(shape: ModelShape, params: &[f64]) -> Result<Self> {
        let mut model = Self::zeros(shape)?;
        let expected = model.num_parameters();
        crate::error::check_len("model parameters", expected, params.len())?;
        if !crate::numerics::all_finite(params) {
            return Err(Error::NonFinite("model parameters"));
        }
        let mut offset = 0;
        model.visit_mut(&mut |s| {
            s.copy_from_slice(&params[offset..offset + s.len()]);
            offset += s.len();
        });
        Ok(model)
    }

    fn visit<'a>(&'a self, f: &mut impl FnMut(&'a [f64])) {
        f(self.embedding.as_slice());
        for layer in &self.layers {
            layer.visit(f);
        }
        f(self.classifier.as_slice());
        f(&self.classifier_bias);
    }

    fn visit_mut(&mut self, f: &mut impl FnMut(&mut [f64])) {
        f(self.embedding.as_mut_slice());
        for layer in &mut self.layers {
            layer.visit_mut(f);
        }
        f(self.classifier.as_mut_slice());
        f(&mut self.classifier_bias);
    }

    /// Bias added after the masked sum of a sublayer (never masked).
    pub fn sublayer_bias(&self, layer: usize, kind: UnitKind) -> &[f64] {
        match kind {
            UnitKind::Head => &self.layers[layer].output_bias,
            UnitKind::Filter => &self.layers[layer].b2,
        }
    }

    pub(crate) fn check_masks(&self, masks: &crate::MaskSet) -> Result<()> {
        if masks.dims() != self.mask_dims() {
            return Err(Error::InvalidShape(alloc::format!(
                "mask dims {:?} do not match model {:?}",
                masks.dims(),
                self.mask_dims()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelShape {
        ModelShape::new(2, 2, 8, 8, 4, 3, 2).unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        let a = ToyTransformer::init(small(), 0).unwrap();
        let b = ToyTransformer::init(small(), 0).unwrap();
        let pa: Vec<u64> = a.parameters().iter().map(|v| v.to_bits()).collect();
        let pb: Vec<u64> = b.parameters().iter().map(|v| v.to_bits()).collect();
        assert_eq!(pa, pb);
    }

    #[test]
    fn init_depends_on_seed() {
        let a = ToyTransformer::init(small(), 0).unwrap();
        let b = ToyTransformer::init(small(), 1).unwrap();
        assert_ne!(a.parameters(), b.parameters());
    }

    #[test]
    fn bert_base_mask_count() {
        let shape = ModelShape::new(12, 12, 3072, 768, 128, 768, 2).unwrap();
        assert_eq!(shape.head_dim, 64);
        assert_eq!(shape.mask_dims().num_variables(), 37_008);
    }

    #[test]
    fn indivisible_hidden_is_rejected() {
        assert!(matches!(
            ModelShape::new(1, 3, 4, 8, 2, 2, 2),
            Err(Error::InvalidShape(_))
        ));
        assert!(ModelShape::new(1, 2, 0, 8, 2, 2, 2).is_err());
    }

    #[test]
    fn parameter_round_trip() {
        let m = ToyTransformer::init(small(), 5).unwrap();
        let back = ToyTransformer::from_parameters(m.shape, &m.parameters()).unwrap();
        assert_eq!(back, m);
        assert!(ToyTransformer::from_parameters(m.shape, &[0.0; 3]).is_err());
    }
}
