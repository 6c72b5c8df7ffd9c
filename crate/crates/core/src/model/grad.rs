use alloc::vec;
use alloc::vec::Vec;

use super::forward::{gelu_grad, softmax, ExampleTrace, HeadTrace, LnCache};
use super::ToyTransformer;
use crate::error::{Error, Result};
use crate::fisher::GradSample;
use crate::mask::MaskSet;
use crate::numerics::{axpy, dot, Matrix};
use crate::SampleBatch;

/// Default step for the central-difference oracle.
pub const GRADIENT_FD_STEP: f64 = 1e-4;

fn layer_norm_backward(dy: &Matrix, cache: &LnCache, gamma: &[f64]) -> Matrix {
    let cols = dy.cols() as f64;
    let mut du = Matrix::zeros(dy.rows(), dy.cols());
    for r in 0..dy.rows() {
        let xhat = cache.normalized.row(r);
        let dxhat: Vec<f64> = dy.row(r).iter().zip(gamma).map(|(d, g)| d * g).collect();
        let mean_d = dxhat.iter().sum::<f64>() / cols;
        let mean_dx = dot(&dxhat, xhat) / cols;
        let inv = cache.inv_std[r];
        for (c, out) in du.row_mut(r).iter_mut().enumerate() {
            *out = inv * (dxhat[c] - mean_d - xhat[c] * mean_dx);
        }
    }
    du
}

impl ToyTransformer {
    /// Gradient of one head's output w.r.t. the sublayer input, given the
    /// upstream gradient on that output.
    fn head_backward(&self, layer: usize, head: usize, trace: &HeadTrace, d_out: &Matrix) -> Matrix {
        let p = &self.layers[layer];
        let scale = 1.0 / libm::sqrt(self.shape.head_dim as f64);
        let d_context = d_out.matmul_t(&p.output[head]);
        let d_probs = d_context.matmul_t(&trace.value);
        let d_value = trace.probs.t_matmul(&d_context);
        let mut d_scores = Matrix::zeros(d_probs.rows(), d_probs.cols());
        for r in 0..d_probs.rows() {
            let pr = trace.probs.row(r);
            let dr = d_probs.row(r);
            let inner = dot(pr, dr);
            for (c, v) in d_scores.row_mut(r).iter_mut().enumerate() {
                *v = pr[c] * (dr[c] - inner) * scale;
            }
        }
        let d_query = d_scores.matmul(&trace.key);
        let d_key = d_scores.t_matmul(&trace.query);
        let mut dx = d_query.matmul_t(&p.query[head]);
        axpy(1.0, d_key.matmul_t(&p.key[head]).as_slice(), dx.as_mut_slice());
        axpy(1.0, d_value.matmul_t(&p.value[head]).as_slice(), dx.as_mut_slice());
        dx
    }

    /// Reverse-mode pass restricted to the mask variables.
    pub(crate) fn backward_masks(&self, masks: &MaskSet, trace: &ExampleTrace, label: usize) -> Vec<f64> {
        let shape = &self.shape;
        let dims = self.mask_dims();
        let mut grad = vec![0.0; dims.num_variables()];
        let stride = dims.heads + dims.filters;

        let mut d_logits = softmax(&trace.logits);
        d_logits[label] -= 1.0;
        let d_pooled = self.classifier.matvec(&d_logits);
        let seq = shape.seq_len as f64;
        let mut dx = Matrix::from_fn(shape.seq_len, shape.hidden, |_, c| d_pooled[c] / seq);

        for l in (0..shape.layers).rev() {
            let p = &self.layers[l];
            let lt = &trace.layers[l];
            let g = &mut grad[l * stride..(l + 1) * stride];

            // FFN sublayer
            let du2 = layer_norm_backward(&dx, &lt.ln2, &p.ln2_gamma);
            let d_act_full = du2.matmul(&p.w2);
            let filter_mask = masks.layer_filters(l);
            let mut d_pre = Matrix::zeros(d_act_full.rows(), d_act_full.cols());
            for t in 0..d_act_full.rows() {
                let dr = d_act_full.row(t);
                let act = lt.activation.row(t);
                let pre = lt.pre_activation.row(t);
                for i in 0..dims.filters {
                    g[dims.heads + i] += act[i] * dr[i];
                    d_pre.set(t, i, filter_mask[i] * dr[i] * gelu_grad(pre[i]));
                }
            }
            let mut dx1 = du2;
            axpy(1.0, d_pre.matmul(&p.w1).as_slice(), dx1.as_mut_slice());

            // MHA sublayer
            let du1 = layer_norm_backward(&dx1, &lt.ln1, &p.ln1_gamma);
            let head_mask = masks.layer_heads(l);
            let mut d_in = du1.clone();
            for (h, ht) in lt.heads.iter().enumerate() {
                g[h] = dot(du1.as_slice(), ht.output.as_slice());
                if head_mask[h] != 0.0 {
                    let mut d_out = du1.clone();
                    crate::numerics::scale(head_mask[h], d_out.as_mut_slice());
                    axpy(1.0, self.head_backward(l, h, ht, &d_out).as_slice(), d_in.as_mut_slice());
                }
            }
            dx = d_in;
        }
        grad
    }

    /// Per-example gradients of the loss w.r.t. every mask variable at
    /// `m = 1`, in the order (layer 0 heads, layer 0 filters, layer 1 ...).
    pub fn mask_gradients(&self, batch: &SampleBatch) -> Result<Vec<GradSample>> {
        if batch.is_empty() {
            return Err(Error::Empty("sample batch"));
        }
        let ones = MaskSet::ones(self.mask_dims());
        batch
            .inputs()
            .iter()
            .zip(batch.labels())
            .map(|(input, &label)| {
                let trace = self.trace_example(Some(&ones), input, label)?;
                Ok(GradSample(self.backward_masks(&ones, &trace, label)))
            })
            .collect()
    }

    /// Central finite differences `(L(1 + h e_i) - L(1 - h e_i)) / 2h`.
    pub fn mask_gradients_fd(&self, batch: &SampleBatch, h: f64) -> Result<Vec<GradSample>> {
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::InvalidArgument(alloc::format!(
                "finite-difference step must be positive, got {h}"
            )));
        }
        let dims = self.mask_dims();
        let base = MaskSet::ones(dims).to_flat();
        let mut out = Vec::with_capacity(batch.len());
        for (input, &label) in batch.inputs().iter().zip(batch.labels()) {
            let mut g = Vec::with_capacity(base.len());
            for i in 0..base.len() {
                let mut plus = base.clone();
                plus[i] += h;
                let mut minus = base.clone();
                minus[i] -= h;
                let lp = self.example_loss(Some(&MaskSet::from_flat(dims, &plus)?), input, label)?;
                let lm = self.example_loss(Some(&MaskSet::from_flat(dims, &minus)?), input, label)?;
                g.push((lp - lm) / (2.0 * h));
            }
            out.push(GradSample(g));
        }
        Ok(out)
    }
}
