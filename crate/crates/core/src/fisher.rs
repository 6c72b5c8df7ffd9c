//! Empirical Fisher information of the mask variables.
//!
//! With per-example mask gradients `g_k` evaluated at `m = 1`, the empirical
//! Fisher is `(1/|D|) sum_k g_k g_k^T`. Stage 1 only needs its diagonal, the
//! per-unit importance scores; stage 2 uses the per-sublayer diagonal blocks.
//! Cross terms between a layer's heads and filters, and between layers, are
//! never formed.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{check_len, Error, Result};
use crate::mask::{MaskDims, MaskSet, UnitKind};
use crate::numerics::Matrix;

/// Loss gradient of one example w.r.t. all mask variables, ordered
/// (layer 0 heads, layer 0 filters, layer 1 heads, ...).
#[derive(Debug, Clone, PartialEq)]
pub struct GradSample(pub Vec<f64>);

impl GradSample {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// A non-negative score per head and filter. Higher means more important.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ImportanceScores {
    dims: MaskDims,
    heads: Vec<f64>,
    filters: Vec<f64>,
}

/// The diagonal of the empirical Fisher, used as importance scores.
pub type FisherDiagonal = ImportanceScores;

impl ImportanceScores {
    pub fn new(dims: MaskDims, heads: Vec<f64>, filters: Vec<f64>) -> Result<Self> {
        check_len("head scores", dims.total_heads(), heads.len())?;
        check_len("filter scores", dims.total_filters(), filters.len())?;
        if !heads.iter().chain(&filters).all(|v| v.is_finite() && *v >= 0.0) {
            return Err(Error::InvalidArgument(
                "importance scores must be finite and non-negative".into(),
            ));
        }
        Ok(Self {
            dims,
            heads,
            filters,
        })
    }

    pub fn dims(&self) -> MaskDims {
        self.dims
    }

    /// `L x H`, layer-major.
    pub fn heads(&self) -> &[f64] {
        &self.heads
    }

    /// `L x N`, layer-major.
    pub fn filters(&self) -> &[f64] {
        &self.filters
    }

    pub fn scores(&self, kind: UnitKind) -> &[f64] {
        match kind {
            UnitKind::Head => &self.heads,
            UnitKind::Filter => &self.filters,
        }
    }

    pub fn layer(&self, layer: usize, kind: UnitKind) -> &[f64] {
        let width = self.dims.units(kind);
        &self.scores(kind)[layer * width..(layer + 1) * width]
    }

    pub fn total(&self) -> f64 {
        self.heads.iter().sum::<f64>() + self.filters.iter().sum::<f64>()
    }

    /// Sum of scores over pruned (zero) entries of `masks`: heads in index
    /// order, then filters in index order, then the two partial sums added.
    /// Every search routine reports its objective through this function so
    /// that results are comparable bit-for-bit.
    pub fn pruned_importance(&self, masks: &MaskSet) -> f64 {
        debug_assert_eq!(masks.dims(), self.dims);
        let pruned = |scores: &[f64], m: &[f64]| {
            scores
                .iter()
                .zip(m)
                .filter(|(_, &mi)| mi == 0.0)
                .fold(0.0, |acc, (s, _)| acc + s)
        };
        pruned(&self.heads, masks.heads()) + pruned(&self.filters, masks.filters())
    }
}

fn check_grads(dims: MaskDims, grads: &[GradSample]) -> Result<()> {
    if grads.is_empty() {
        return Err(Error::Empty("gradient samples"));
    }
    for g in grads {
        check_len("gradient sample", dims.num_variables(), g.0.len())?;
        if !crate::numerics::all_finite(&g.0) {
            return Err(Error::NonFinite("gradient sample"));
        }
    }
    Ok(())
}

/// `I_ii = (1/|D|) sum_k g_k[i]^2`, accumulated in sample order.
pub fn fisher_diagonal(dims: MaskDims, grads: &[GradSample]) -> Result<FisherDiagonal> {
    check_grads(dims, grads)?;
    let mut sums = vec![0.0; dims.num_variables()];
    for g in grads {
        for (s, v) in sums.iter_mut().zip(&g.0) {
            *s += v * v;
        }
    }
    let count = grads.len() as f64;
    for s in &mut sums {
        *s /= count;
    }
    let split = MaskSet::from_flat(dims, &sums)?;
    ImportanceScores::new(dims, split.heads().to_vec(), split.filters().to_vec())
}

/// Per-layer MHA (`H x H`) and FFN (`N x N`) blocks of the empirical Fisher.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FisherBlocks {
    dims: MaskDims,
    heads: Vec<Matrix>,
    filters: Vec<Matrix>,
}

impl FisherBlocks {
    pub fn new(dims: MaskDims, heads: Vec<Matrix>, filters: Vec<Matrix>) -> Result<Self> {
        check_len("head blocks", dims.layers, heads.len())?;
        check_len("filter blocks", dims.layers, filters.len())?;
        for (blocks, n) in [(&heads, dims.heads), (&filters, dims.filters)] {
            for b in blocks {
                if b.rows() != n || b.cols() != n {
                    return Err(Error::InvalidShape(alloc::format!(
                        "Fisher block is {}x{}, expected {n}x{n}",
                        b.rows(),
                        b.cols()
                    )));
                }
            }
        }
        Ok(Self {
            dims,
            heads,
            filters,
        })
    }

    pub fn dims(&self) -> MaskDims {
        self.dims
    }

    pub fn block(&self, layer: usize, kind: UnitKind) -> &Matrix {
        match kind {
            UnitKind::Head => &self.heads[layer],
            UnitKind::Filter => &self.filters[layer],
        }
    }

    pub fn head_blocks(&self) -> &[Matrix] {
        &self.heads
    }

    pub fn filter_blocks(&self) -> &[Matrix] {
        &self.filters
    }

    /// The block diagonals, which equal [`fisher_diagonal`] exactly.
    pub fn diagonal(&self) -> ImportanceScores {
        let diag = |bs: &[Matrix]| -> Vec<f64> {
            bs.iter()
                .flat_map(|b| (0..b.rows()).map(move |i| b.get(i, i)))
                .collect()
        };
        ImportanceScores {
            dims: self.dims,
            heads: diag(&self.heads),
            filters: diag(&self.filters),
        }
    }
}

/// Block `l` is `(1/|D|) sum_k g_{k,l} g_{k,l}^T` restricted to layer `l`'s
/// head (resp. filter) coordinates.
pub fn fisher_blocks(dims: MaskDims, grads: &[GradSample]) -> Result<FisherBlocks> {
    check_grads(dims, grads)?;
    let stride = dims.heads + dims.filters;
    let count = grads.len() as f64;
    let mut heads = Vec::with_capacity(dims.layers);
    let mut filters = Vec::with_capacity(dims.layers);
    for l in 0..dims.layers {
        for (offset, n, out) in [
            (0, dims.heads, &mut heads),
            (dims.heads, dims.filters, &mut filters),
        ] {
            let start = l * stride + offset;
            let mut block = Matrix::zeros(n, n);
            for g in grads {
                let v = &g.0[start..start + n];
                for i in 0..n {
                    let vi = v[i];
                    // upper triangle only, mirrored below
                    for j in i..n {
                        let cur = block.get(i, j);
                        block.set(i, j, cur + vi * v[j]);
                    }
                }
            }
            for i in 0..n {
                for j in i..n {
                    let v = block.get(i, j) / count;
                    block.set(i, j, v);
                    block.set(j, i, v);
                }
            }
            out.push(block);
        }
    }
    FisherBlocks::new(dims, heads, filters)
}
