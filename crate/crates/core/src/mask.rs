//! Head and filter mask variables.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{check_len, Error, Result};

/// The two prunable unit types. Heads live in the MHA sublayer, filters in
/// the FFN sublayer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum UnitKind {
    Head,
    Filter,
}

impl UnitKind {
    pub const BOTH: [UnitKind; 2] = [UnitKind::Head, UnitKind::Filter];

    /// Sublayer name: `"mha"` or `"ffn"`.
    pub fn sublayer(self) -> &'static str {
        match self {
            UnitKind::Head => "mha",
            UnitKind::Filter => "ffn",
        }
    }
}

/// Layer count and units per sublayer; everything the mask-level stages need
/// to know about a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MaskDims {
    pub layers: usize,
    pub heads: usize,
    pub filters: usize,
}

impl MaskDims {
    pub fn new(layers: usize, heads: usize, filters: usize) -> Result<Self> {
        if layers == 0 || heads == 0 || filters == 0 {
            return Err(Error::InvalidShape(alloc::format!(
                "layers, heads and filters must be positive, got ({layers}, {heads}, {filters})"
            )));
        }
        Ok(Self {
            layers,
            heads,
            filters,
        })
    }

    /// `L (H + N)`
    pub fn num_variables(&self) -> usize {
        self.layers * (self.heads + self.filters)
    }

    pub fn total_heads(&self) -> usize {
        self.layers * self.heads
    }

    pub fn total_filters(&self) -> usize {
        self.layers * self.filters
    }

    pub fn units(&self, kind: UnitKind) -> usize {
        match kind {
            UnitKind::Head => self.heads,
            UnitKind::Filter => self.filters,
        }
    }
}

/// Per-layer mask vectors. Zero means the unit is pruned.
///
/// Head masks are stored layer-major in `heads` (`L x H`), filter masks
/// in `filters` (`L x N`).
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MaskSet {
    dims: MaskDims,
    heads: Vec<f64>,
    filters: Vec<f64>,
}

impl MaskSet {
    pub fn filled(dims: MaskDims, value: f64) -> Self {
        Self {
            dims,
            heads: vec![value; dims.total_heads()],
            filters: vec![value; dims.total_filters()],
        }
    }

    pub fn ones(dims: MaskDims) -> Self {
        Self::filled(dims, 1.0)
    }

    pub fn zeros(dims: MaskDims) -> Self {
        Self::filled(dims, 0.0)
    }

    pub fn from_parts(dims: MaskDims, heads: Vec<f64>, filters: Vec<f64>) -> Result<Self> {
        check_len("head masks", dims.total_heads(), heads.len())?;
        check_len("filter masks", dims.total_filters(), filters.len())?;
        if !crate::numerics::all_finite(&heads) || !crate::numerics::all_finite(&filters) {
            return Err(Error::NonFinite("mask"));
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

    pub fn heads(&self) -> &[f64] {
        &self.heads
    }

    pub fn filters(&self) -> &[f64] {
        &self.filters
    }

    pub fn layer_heads(&self, layer: usize) -> &[f64] {
        let h = self.dims.heads;
        &self.heads[layer * h..(layer + 1) * h]
    }

    pub fn layer_heads_mut(&mut self, layer: usize) -> &mut [f64] {
        let h = self.dims.heads;
        &mut self.heads[layer * h..(layer + 1) * h]
    }

    pub fn layer_filters(&self, layer: usize) -> &[f64] {
        let n = self.dims.filters;
        &self.filters[layer * n..(layer + 1) * n]
    }

    pub fn layer_filters_mut(&mut self, layer: usize) -> &mut [f64] {
        let n = self.dims.filters;
        &mut self.filters[layer * n..(layer + 1) * n]
    }

    pub fn layer(&self, layer: usize, kind: UnitKind) -> &[f64] {
        match kind {
            UnitKind::Head => self.layer_heads(layer),
            UnitKind::Filter => self.layer_filters(layer),
        }
    }

    pub fn layer_mut(&mut self, layer: usize, kind: UnitKind) -> &mut [f64] {
        match kind {
            UnitKind::Head => self.layer_heads_mut(layer),
            UnitKind::Filter => self.layer_filters_mut(layer),
        }
    }

    pub fn is_binary(&self) -> bool {
        self.heads
            .iter()
            .chain(&self.filters)
            .all(|&v| v == 0.0 || v == 1.0)
    }

    /// Nonzero head count per layer.
    pub fn heads_kept(&self) -> Vec<usize> {
        (0..self.dims.layers)
            .map(|l| count_nonzero(self.layer_heads(l)))
            .collect()
    }

    /// Nonzero filter count per layer.
    pub fn filters_kept(&self) -> Vec<usize> {
        (0..self.dims.layers)
            .map(|l| count_nonzero(self.layer_filters(l)))
            .collect()
    }

    /// Nonzero pattern as a binary mask.
    pub fn support(&self) -> MaskSet {
        let bin = |v: &f64| if *v != 0.0 { 1.0 } else { 0.0 };
        MaskSet {
            dims: self.dims,
            heads: self.heads.iter().map(bin).collect(),
            filters: self.filters.iter().map(bin).collect(),
        }
    }

    /// Flattened in gradient order: layer 0 heads, layer 0 filters, layer 1
    /// heads, ...
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dims.num_variables());
        for l in 0..self.dims.layers {
            out.extend_from_slice(self.layer_heads(l));
            out.extend_from_slice(self.layer_filters(l));
        }
        out
    }

    pub fn from_flat(dims: MaskDims, flat: &[f64]) -> Result<Self> {
        check_len("flat mask", dims.num_variables(), flat.len())?;
        let mut heads = Vec::with_capacity(dims.total_heads());
        let mut filters = Vec::with_capacity(dims.total_filters());
        for chunk in flat.chunks(dims.heads + dims.filters) {
            heads.extend_from_slice(&chunk[..dims.heads]);
            filters.extend_from_slice(&chunk[dims.heads..]);
        }
        Self::from_parts(dims, heads, filters)
    }
}

pub(crate) fn count_nonzero(v: &[f64]) -> usize {
    v.iter().filter(|&&x| x != 0.0).count()
}
