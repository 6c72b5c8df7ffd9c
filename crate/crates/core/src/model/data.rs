use alloc::vec::Vec;

use super::forward::argmax;
use super::ToyTransformer;
use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::rng::Sampler;

/// Sequences of per-token feature vectors with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    inputs: Vec<Matrix>,
    labels: Vec<usize>,
}

impl SampleBatch {
    pub fn new(inputs: Vec<Matrix>, labels: Vec<usize>) -> Result<Self> {
        crate::error::check_len("labels", inputs.len(), labels.len())?;
        if let Some(first) = inputs.first() {
            if inputs
                .iter()
                .any(|m| m.rows() != first.rows() || m.cols() != first.cols())
            {
                return Err(Error::InvalidShape("inputs differ in shape".into()));
            }
        }
        if inputs.iter().any(|m| !m.is_finite()) {
            return Err(Error::NonFinite("sample inputs"));
        }
        Ok(Self { inputs, labels })
    }

    pub fn inputs(&self) -> &[Matrix] {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// First `n` examples (or all of them if there are fewer).
    pub fn head(&self, n: usize) -> SampleBatch {
        let n = n.min(self.len());
        SampleBatch {
            inputs: self.inputs[..n].to_vec(),
            labels: self.labels[..n].to_vec(),
        }
    }

    pub fn select(&self, indices: &[usize]) -> SampleBatch {
        SampleBatch {
            inputs: indices.iter().map(|&i| self.inputs[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Keeps the first examples of each class so that every class in
    /// `0..classes` appears equally often.
    pub fn balanced(&self, classes: usize) -> SampleBatch {
        let mut counts = alloc::vec![0usize; classes];
        for &y in &self.labels {
            if y < classes {
                counts[y] += 1;
            }
        }
        let per_class = counts.iter().copied().min().unwrap_or(0);
        let mut taken = alloc::vec![0usize; classes];
        let mut keep = Vec::new();
        for (i, &y) in self.labels.iter().enumerate() {
            if y < classes && taken[y] < per_class {
                taken[y] += 1;
                keep.push(i);
            }
        }
        self.select(&keep)
    }
}

const CLUSTERS: usize = 4;
const TOKEN_NOISE: f64 = 0.5;
/// Upper bound on the gap required between the teacher's top two logits.
pub const LABEL_MARGIN: f64 = 1.0;
/// Pilot draws used to scale the margin to the teacher's logit spread.
const PILOT_DRAWS: usize = 256;
/// Candidate draws per requested example before balancing is abandoned.
const MAX_DRAWS_PER_SAMPLE: usize = 50;

/// Synthetic classification data for `model`.
///
/// Cluster centers come from `(seed, "centers")` so that every `stream`
/// generated from the same seed follows the same distribution; token
/// features are `center + 0.5 * N(0, I)` with the cluster picked per example.
/// Labels are the unmasked model's own predictions. Candidates whose top two
/// logits are closer than the smaller of [`LABEL_MARGIN`] and the median gap
/// over a pilot batch are discarded, and each class gets
/// an equal quota (the first `count % classes` classes one extra), so the
/// unpruned model is exact and confident on its data. If the teacher almost
/// never predicts some class, its slots go to leftover candidates instead.
pub fn generate_samples(
    model: &ToyTransformer,
    count: usize,
    seed: u64,
    stream: &str,
) -> Result<SampleBatch> {
    let shape = model.shape;
    let mut center_rng = Sampler::new(seed, "centers");
    let centers: Vec<Vec<f64>> = (0..CLUSTERS)
        .map(|_| (0..shape.features).map(|_| center_rng.normal()).collect())
        .collect();
    let draw = |rng: &mut Sampler| {
        let center = &centers[rng.below(CLUSTERS)];
        let input = Matrix::from_fn(shape.seq_len, shape.features, |_, c| {
            center[c] + TOKEN_NOISE * rng.normal()
        });
        let (_, logits) = model.classify(&model.encode(&input));
        let label = argmax(&logits);
        let runner_up = logits
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != label)
            .map(|(_, v)| *v)
            .fold(f64::NEG_INFINITY, f64::max);
        (input, label, logits[label] - runner_up)
    };
    let mut pilot_rng = Sampler::new(seed, &alloc::format!("{stream}/pilot"));
    let mut gaps: Vec<f64> = (0..PILOT_DRAWS).map(|_| draw(&mut pilot_rng).2).collect();
    gaps.sort_by(f64::total_cmp);
    let margin = LABEL_MARGIN.min(gaps[PILOT_DRAWS / 2]);

    let mut quota: Vec<usize> = (0..shape.classes)
        .map(|c| count / shape.classes + usize::from(c < count % shape.classes))
        .collect();
    let mut rng = Sampler::new(seed, stream);
    let mut inputs = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    // Candidates turned away by a full quota or a small gap, kept in draw
    // order for when a class cannot be filled.
    let mut confident = Vec::new();
    let mut rest = Vec::new();
    for _ in 0..MAX_DRAWS_PER_SAMPLE * count {
        if inputs.len() == count {
            break;
        }
        let (input, label, gap) = draw(&mut rng);
        if gap < margin {
            if rest.len() < count {
                rest.push((input, label));
            }
        } else if quota[label] == 0 {
            if confident.len() < count {
                confident.push((input, label));
            }
        } else {
            quota[label] -= 1;
            labels.push(label);
            inputs.push(input);
        }
    }
    for (input, label) in confident.into_iter().chain(rest) {
        if inputs.len() == count {
            break;
        }
        labels.push(label);
        inputs.push(input);
    }
    SampleBatch::new(inputs, labels)
}

impl ToyTransformer {
    /// Unmasked encoder output for one sequence.
    pub fn encode(&self, input: &Matrix) -> Matrix {
        let mut x = self.embed(input);
        for l in 0..self.shape.layers {
            for kind in crate::UnitKind::BOTH {
                let units = self.unit_outputs(l, kind, &x);
                let u = self.residual_sum(l, &x, &units, None);
                x = self.sublayer_norm(l, kind, &u).0;
            }
        }
        x
    }
}
