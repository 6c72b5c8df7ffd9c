//! Reference importance scores for comparison with the Fisher diagonal.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::fisher::{GradSample, ImportanceScores};
use crate::mask::{MaskDims, MaskSet};
use crate::model::ToyTransformer;

fn abs_sum(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).sum()
}

/// Weight magnitude: for a head the absolute sum of its query, key, value
/// and output projections; for a filter `|W1[i,:]| + |W2[:,i]| + |b1_i|`.
pub fn magnitude_importance(model: &ToyTransformer) -> Result<ImportanceScores> {
    let dims = model.mask_dims();
    let mut heads = Vec::with_capacity(dims.total_heads());
    let mut filters = Vec::with_capacity(dims.total_filters());
    for layer in &model.layers {
        for h in 0..dims.heads {
            heads.push(
                abs_sum(layer.query[h].as_slice())
                    + abs_sum(layer.key[h].as_slice())
                    + abs_sum(layer.value[h].as_slice())
                    + abs_sum(layer.output[h].as_slice()),
            );
        }
        for i in 0..dims.filters {
            let w2: f64 = (0..layer.w2.rows()).map(|d| layer.w2.get(d, i).abs()).sum();
            filters.push(abs_sum(layer.w1.row(i)) + w2 + layer.b1[i].abs());
        }
    }
    ImportanceScores::new(dims, heads, filters)
}

/// `|mean_k g_k|` per mask variable.
pub fn gradient_importance(dims: MaskDims, grads: &[GradSample]) -> Result<ImportanceScores> {
    if grads.is_empty() {
        return Err(Error::Empty("gradient samples"));
    }
    let n = dims.num_variables();
    let mut mean = alloc::vec![0.0; n];
    for g in grads {
        crate::error::check_len("gradient sample", n, g.0.len())?;
        for (m, v) in mean.iter_mut().zip(&g.0) {
            *m += v;
        }
    }
    let inv = 1.0 / grads.len() as f64;
    let flat: Vec<f64> = mean.iter().map(|m| (m * inv).abs()).collect();
    let masks = MaskSet::from_flat(dims, &flat)?;
    ImportanceScores::new(dims, masks.heads().to_vec(), masks.filters().to_vec())
}
