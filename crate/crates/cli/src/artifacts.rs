//! On-disk artifacts: a small JSON manifest next to one or more tensor files.
//!
//! Tensor file names in a manifest are relative to the manifest's directory,
//! so an artifact can be moved as a group.

use std::fs;
use std::path::{Path, PathBuf};

use maskprune_core::fisher::{FisherBlocks, ImportanceScores};
use maskprune_core::{MaskDims, MaskSet, Matrix, ModelShape, SampleBatch, ToyTransformer};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::atomic::write_json;
use crate::error::{CliError, CliResult, PathContext};
use crate::tensor_file::{read_tensor, write_tensor, Tensor};

const MODEL_FORMAT: &str = "maskprune-model";
const DATA_FORMAT: &str = "maskprune-data";
const MASKS_FORMAT: &str = "maskprune-masks";
const FISHER_FORMAT: &str = "maskprune-fisher";

/// `dir/stem.suffix.tensor` for a manifest at `dir/stem.json`.
fn sibling(manifest: &Path, suffix: &str) -> (PathBuf, String) {
    let stem = manifest.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = format!("{stem}.{suffix}.tensor");
    (manifest.with_file_name(&name), name)
}

fn resolve(manifest: &Path, name: &str) -> PathBuf {
    manifest.parent().unwrap_or(Path::new("")).join(name)
}

fn read_manifest<T: DeserializeOwned>(path: &Path, format: &str) -> CliResult<T> {
    let text = fs::read_to_string(path).reading(path)?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    let found = value.get("format").and_then(|f| f.as_str()).unwrap_or("");
    if found != format {
        return Err(CliError::input(format!(
            "{}: expected a {format} manifest, found format {found:?}",
            path.display()
        )));
    }
    serde_json::from_value(value).map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

fn load_tensor(manifest: &Path, name: &str, dims: &[usize]) -> CliResult<Vec<f64>> {
    let path = resolve(manifest, name);
    let Tensor { dims: found, values, .. } = read_tensor(&path).reading(&path)?;
    if found != dims {
        return Err(CliError::input(format!(
            "{}: expected dims {dims:?}, found {found:?}",
            path.display()
        )));
    }
    Ok(values)
}

fn save_tensor(manifest: &Path, suffix: &str, dims: &[usize], values: &[f64]) -> CliResult<String> {
    let (path, name) = sibling(manifest, suffix);
    write_tensor(&path, dims, values).writing(&path)?;
    Ok(name)
}

fn save_manifest<T: Serialize>(path: &Path, manifest: &T) -> CliResult<()> {
    write_json(path, manifest).writing(path)
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelManifest {
    format: String,
    shape: ModelShape,
    seed: Option<u64>,
    parameters: String,
}

pub fn save_model(path: &Path, model: &ToyTransformer, seed: Option<u64>) -> CliResult<()> {
    let params = model.parameters();
    let parameters = save_tensor(path, "params", &[params.len()], &params)?;
    save_manifest(
        path,
        &ModelManifest {
            format: MODEL_FORMAT.into(),
            shape: model.shape,
            seed,
            parameters,
        },
    )
}

pub fn load_model(path: &Path) -> CliResult<ToyTransformer> {
    let m: ModelManifest = read_manifest(path, MODEL_FORMAT)?;
    m.shape.validate()?;
    let n = ToyTransformer::zeros(m.shape)?.num_parameters();
    let params = load_tensor(path, &m.parameters, &[n])?;
    Ok(ToyTransformer::from_parameters(m.shape, &params)?)
}

#[derive(Debug, Serialize, Deserialize)]
struct DataManifest {
    format: String,
    count: usize,
    seq_len: usize,
    features: usize,
    inputs: String,
    labels: String,
}

/// Inputs as `[count, seq_len, features]`, labels as `[count]`.
pub fn save_data(path: &Path, batch: &SampleBatch) -> CliResult<()> {
    let count = batch.len();
    let (seq_len, features) = batch
        .inputs()
        .first()
        .map_or((0, 0), |m| (m.rows(), m.cols()));
    let values: Vec<f64> = batch.inputs().iter().flat_map(|m| m.as_slice().iter().copied()).collect();
    let labels: Vec<f64> = batch.labels().iter().map(|&y| y as f64).collect();
    let inputs = save_tensor(path, "inputs", &[count, seq_len, features], &values)?;
    let labels = save_tensor(path, "labels", &[count], &labels)?;
    save_manifest(
        path,
        &DataManifest {
            format: DATA_FORMAT.into(),
            count,
            seq_len,
            features,
            inputs,
            labels,
        },
    )
}

pub fn load_data(path: &Path) -> CliResult<SampleBatch> {
    let m: DataManifest = read_manifest(path, DATA_FORMAT)?;
    let values = load_tensor(path, &m.inputs, &[m.count, m.seq_len, m.features])?;
    let raw_labels = load_tensor(path, &m.labels, &[m.count])?;
    let labels = raw_labels
        .iter()
        .map(|&y| {
            if y >= 0.0 && y.fract() == 0.0 && y < u32::MAX as f64 {
                Ok(y as usize)
            } else {
                Err(CliError::input(format!("{}: label {y} is not a class index", path.display())))
            }
        })
        .collect::<CliResult<Vec<usize>>>()?;
    let per = m.seq_len * m.features;
    let inputs = (0..m.count)
        .map(|i| Matrix::from_vec(m.seq_len, m.features, values[i * per..(i + 1) * per].to_vec()))
        .collect::<Result<Vec<Matrix>, _>>()?;
    Ok(SampleBatch::new(inputs, labels)?)
}

/// Rejects data whose shape or labels do not fit `shape`.
pub fn check_data(shape: &ModelShape, batch: &SampleBatch) -> CliResult<()> {
    if let Some(first) = batch.inputs().first() {
        if first.rows() != shape.seq_len || first.cols() != shape.features {
            return Err(CliError::input(format!(
                "data has sequences of {}x{}, model expects {}x{}",
                first.rows(),
                first.cols(),
                shape.seq_len,
                shape.features
            )));
        }
    }
    if let Some(&bad) = batch.labels().iter().find(|&&y| y >= shape.classes) {
        return Err(CliError::input(format!("label {bad} out of range for {} classes", shape.classes)));
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct MasksManifest {
    format: String,
    dims: MaskDims,
    heads: String,
    filters: String,
}

/// Head masks as `[L, H]`, filter masks as `[L, N]`.
pub fn save_masks(path: &Path, masks: &MaskSet) -> CliResult<()> {
    let d = masks.dims();
    let heads = save_tensor(path, "heads", &[d.layers, d.heads], masks.heads())?;
    let filters = save_tensor(path, "filters", &[d.layers, d.filters], masks.filters())?;
    save_manifest(
        path,
        &MasksManifest {
            format: MASKS_FORMAT.into(),
            dims: d,
            heads,
            filters,
        },
    )
}

pub fn load_masks(path: &Path) -> CliResult<MaskSet> {
    let m: MasksManifest = read_manifest(path, MASKS_FORMAT)?;
    let d = MaskDims::new(m.dims.layers, m.dims.heads, m.dims.filters)?;
    let heads = load_tensor(path, &m.heads, &[d.layers, d.heads])?;
    let filters = load_tensor(path, &m.filters, &[d.layers, d.filters])?;
    if heads.iter().chain(&filters).any(|v| !v.is_finite()) {
        return Err(CliError::input(format!("{}: non-finite mask values", path.display())));
    }
    Ok(MaskSet::from_parts(d, heads, filters)?)
}

/// Everything derived from the per-example mask gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherArtifact {
    pub samples: usize,
    pub diagonal: ImportanceScores,
    pub blocks: FisherBlocks,
    /// `|mean gradient|` per mask variable.
    pub gradient: ImportanceScores,
}

#[derive(Debug, Serialize, Deserialize)]
struct FisherManifest {
    format: String,
    dims: MaskDims,
    samples: usize,
    diagonal_heads: String,
    diagonal_filters: String,
    head_blocks: String,
    filter_blocks: String,
    gradient_heads: String,
    gradient_filters: String,
}

fn stack(blocks: &[Matrix]) -> Vec<f64> {
    blocks.iter().flat_map(|b| b.as_slice().iter().copied()).collect()
}

fn unstack(values: &[f64], count: usize, n: usize) -> CliResult<Vec<Matrix>> {
    (0..count)
        .map(|l| Ok(Matrix::from_vec(n, n, values[l * n * n..(l + 1) * n * n].to_vec())?))
        .collect()
}

/// Diagonal scores as `[L, H]` / `[L, N]`, blocks as `[L, H, H]` / `[L, N, N]`.
pub fn save_fisher(path: &Path, f: &FisherArtifact) -> CliResult<()> {
    let d = f.diagonal.dims();
    let (l, h, n) = (d.layers, d.heads, d.filters);
    let manifest = FisherManifest {
        format: FISHER_FORMAT.into(),
        dims: d,
        samples: f.samples,
        diagonal_heads: save_tensor(path, "diag-heads", &[l, h], f.diagonal.heads())?,
        diagonal_filters: save_tensor(path, "diag-filters", &[l, n], f.diagonal.filters())?,
        head_blocks: save_tensor(path, "head-blocks", &[l, h, h], &stack(f.blocks.head_blocks()))?,
        filter_blocks: save_tensor(path, "filter-blocks", &[l, n, n], &stack(f.blocks.filter_blocks()))?,
        gradient_heads: save_tensor(path, "grad-heads", &[l, h], f.gradient.heads())?,
        gradient_filters: save_tensor(path, "grad-filters", &[l, n], f.gradient.filters())?,
    };
    save_manifest(path, &manifest)
}

pub fn load_fisher(path: &Path) -> CliResult<FisherArtifact> {
    let m: FisherManifest = read_manifest(path, FISHER_FORMAT)?;
    let d = MaskDims::new(m.dims.layers, m.dims.heads, m.dims.filters)?;
    let (l, h, n) = (d.layers, d.heads, d.filters);
    let scores = |heads: &str, filters: &str| -> CliResult<ImportanceScores> {
        Ok(ImportanceScores::new(
            d,
            load_tensor(path, heads, &[l, h])?,
            load_tensor(path, filters, &[l, n])?,
        )?)
    };
    let diagonal = scores(&m.diagonal_heads, &m.diagonal_filters)?;
    let gradient = scores(&m.gradient_heads, &m.gradient_filters)?;
    let head_blocks = unstack(&load_tensor(path, &m.head_blocks, &[l, h, h])?, l, h)?;
    let filter_blocks = unstack(&load_tensor(path, &m.filter_blocks, &[l, n, n])?, l, n)?;
    Ok(FisherArtifact {
        samples: m.samples,
        diagonal,
        blocks: FisherBlocks::new(d, head_blocks, filter_blocks)?,
        gradient,
    })
}
