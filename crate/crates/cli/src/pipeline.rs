//! Gradients, Fisher, search, rearrangement and tuning end to end.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use maskprune_core::baseline::{gradient_importance, magnitude_importance};
use maskprune_core::cost::{flops_constants, mask_latency};
use maskprune_core::fisher::{fisher_blocks, fisher_diagonal, ImportanceScores};
use maskprune_core::model::generate_samples;
use maskprune_core::rearrange::{rearrange, RearrangeOptions, RearrangeReport};
use maskprune_core::rng::STREAM_DATA;
use maskprune_core::search::{search_flops, search_latency, Constraint, SearchResult};
use maskprune_core::tune::{tune_model, TuneReport};
use maskprune_core::{FlopsCost, LatencyModel, MaskSet, SampleBatch, SeparableCost, ToyTransformer, UnitKind};
use serde::Serialize;

use crate::artifacts::{check_data, load_data, load_fisher, load_model, save_masks, FisherArtifact};
use crate::atomic::{write_atomic, write_json};
use crate::config::{Metric, Mode, PruneConfig};
use crate::error::{CliError, CliResult, PathContext};
use crate::latency::load_latency;

/// Loaded or generated inputs shared by every run of a sweep.
#[derive(Debug, Clone)]
pub struct Inputs {
    pub model: ToyTransformer,
    pub data: SampleBatch,
    pub fisher: FisherArtifact,
    pub latency: Option<LatencyModel>,
    /// Time spent on gradients and Fisher; 0 when the Fisher was loaded.
    pub gradient_seconds: f64,
}

/// Mask gradients of every example, reduced to the Fisher diagonal, the
/// Fisher blocks and the mean-gradient baseline.
pub fn compute_fisher(model: &ToyTransformer, data: &SampleBatch) -> CliResult<FisherArtifact> {
    let dims = model.mask_dims();
    let grads = model.mask_gradients(data)?;
    Ok(FisherArtifact {
        samples: grads.len(),
        diagonal: fisher_diagonal(dims, &grads)?,
        blocks: fisher_blocks(dims, &grads)?,
        gradient: gradient_importance(dims, &grads)?,
    })
}

pub fn prepare(cfg: &PruneConfig) -> CliResult<Inputs> {
    cfg.validate()?;
    let model = match &cfg.model {
        Some(p) => load_model(p)?,
        None => ToyTransformer::init(cfg.toy.to_shape()?, cfg.seed)?,
    };
    let data = match &cfg.data {
        Some(p) => load_data(p)?.head(cfg.samples),
        None => generate_samples(&model, cfg.samples, cfg.seed, STREAM_DATA)?,
    };
    if data.is_empty() {
        return Err(CliError::input("the sample set is empty"));
    }
    check_data(&model.shape, &data)?;
    let start = Instant::now();
    let (fisher, gradient_seconds) = match &cfg.fisher {
        Some(p) => {
            let f = load_fisher(p)?;
            if f.diagonal.dims() != model.mask_dims() {
                return Err(CliError::input(format!(
                    "{}: Fisher dims {:?} do not match the model {:?}",
                    p.display(),
                    f.diagonal.dims(),
                    model.mask_dims()
                )));
            }
            (f, 0.0)
        }
        None => (compute_fisher(&model, &data)?, start.elapsed().as_secs_f64()),
    };
    let latency = cfg.latency.as_deref().map(load_latency).transpose()?;
    Ok(Inputs {
        model,
        data,
        fisher,
        latency,
        gradient_seconds,
    })
}

pub fn flops_cost(cfg: &PruneConfig, model: &ToyTransformer) -> CliResult<FlopsCost> {
    match cfg.flops {
        Some(o) => Ok(FlopsCost::new(model.mask_dims(), o.head, o.filter)?),
        None => Ok(flops_constants(&model.shape)),
    }
}

/// Loss, accuracy and cost of one mask on a sample set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Evaluation {
    pub samples: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub flops: f64,
    pub flops_ratio: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub latency_s: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub latency_ratio: Option<f64>,
}

pub fn evaluate(
    model: &ToyTransformer,
    masks: &MaskSet,
    data: &SampleBatch,
    flops: &FlopsCost,
    latency: Option<&LatencyModel>,
) -> CliResult<Evaluation> {
    let out = model.forward(masks, data)?;
    let full = MaskSet::ones(model.mask_dims());
    let f = flops.mask_cost(masks);
    Ok(Evaluation {
        samples: data.len(),
        loss: out.loss,
        accuracy: out.accuracy(data.labels()),
        flops: f,
        flops_ratio: f / flops.full_cost(),
        latency_s: latency.map(|l| mask_latency(masks, l)),
        latency_ratio: latency.map(|l| mask_latency(masks, l) / mask_latency(&full, l)),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct StageTimes {
    pub gradients: f64,
    pub search: f64,
    pub rearrange: f64,
    pub tune: f64,
}

impl StageTimes {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("stage,seconds\n");
        for (name, v) in [
            ("gradients", self.gradients),
            ("search", self.search),
            ("rearrange", self.rearrange),
            ("tune", self.tune),
        ] {
            let _ = writeln!(s, "{name},{v:.6}");
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub unpruned: Evaluation,
    pub search: Evaluation,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rearrange: Option<Evaluation>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tune: Option<Evaluation>,
    #[serde(rename = "final")]
    pub final_: Evaluation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineRun {
    /// Resolved constraint in cost units.
    pub budget: f64,
    /// Cost of the unpruned model in the same units.
    pub full_cost: f64,
    pub search: SearchResult,
    pub rearrange: Option<(MaskSet, RearrangeReport)>,
    pub tune: Option<(MaskSet, TuneReport)>,
    pub masks: MaskSet,
    pub metrics: Metrics,
    pub times: StageTimes,
}

fn scores(cfg: &PruneConfig, inputs: &Inputs) -> CliResult<ImportanceScores> {
    Ok(match cfg.metric {
        Metric::Fisher => inputs.fisher.diagonal.clone(),
        Metric::Gradient => inputs.fisher.gradient.clone(),
        Metric::Magnitude => magnitude_importance(&inputs.model)?,
    })
}

fn budget(cfg: &PruneConfig, full_cost: f64) -> CliResult<f64> {
    let c = match cfg.absolute {
        Some(a) => Constraint::Absolute(a),
        None => Constraint::Ratio(cfg.target),
    };
    Ok(c.resolve(full_cost)?)
}

/// Runs the enabled stages on prepared inputs.
pub fn prune(cfg: &PruneConfig, inputs: &Inputs) -> CliResult<PipelineRun> {
    let Inputs { model, data, fisher, latency, .. } = inputs;
    let flops = flops_cost(cfg, model)?;
    let scores = scores(cfg, inputs)?;
    let eval = |m: &MaskSet| evaluate(model, m, data, &flops, latency.as_ref());
    let mut times = StageTimes {
        gradients: inputs.gradient_seconds,
        ..StageTimes::default()
    };

    let start = Instant::now();
    let (search, budget, full_cost) = match cfg.mode {
        Mode::Flops => {
            let full = flops.full_cost();
            let b = budget(cfg, full)?;
            (search_flops(&scores, &flops, b)?, b, full)
        }
        Mode::Latency => {
            let lat = latency
                .as_ref()
                .ok_or_else(|| CliError::input("latency mode needs a latency table or model"))?;
            let full = mask_latency(&MaskSet::ones(model.mask_dims()), lat);
            let b = budget(cfg, full)?;
            (search_latency(&scores, lat, b)?, b, full)
        }
    };
    times.search = start.elapsed().as_secs_f64();

    let mut masks = search.masks.clone();
    let rearranged = if cfg.stages.rearrange() {
        let start = Instant::now();
        let opts = RearrangeOptions {
            passes: cfg.rearrange_passes,
        };
        let out = rearrange(&fisher.blocks, &masks, &opts)?;
        times.rearrange = start.elapsed().as_secs_f64();
        masks = out.0.clone();
        Some(out)
    } else {
        None
    };
    let tuned = if cfg.stages.tune() {
        let start = Instant::now();
        let out = tune_model(model, data, &masks, &cfg.tune)?;
        times.tune = start.elapsed().as_secs_f64();
        masks = out.0.clone();
        Some(out)
    } else {
        None
    };

    let metrics = Metrics {
        unpruned: eval(&MaskSet::ones(model.mask_dims()))?,
        search: eval(&search.masks)?,
        rearrange: rearranged.as_ref().map(|(m, _)| eval(m)).transpose()?,
        tune: tuned.as_ref().map(|(m, _)| eval(m)).transpose()?,
        final_: eval(&masks)?,
    };
    Ok(PipelineRun {
        budget,
        full_cost,
        search,
        rearrange: rearranged,
        tune: tuned,
        masks,
        metrics,
        times,
    })
}

/// Kept unit indices per layer.
fn support(masks: &MaskSet, kind: UnitKind) -> Vec<Vec<usize>> {
    (0..masks.dims().layers)
        .map(|l| {
            masks
                .layer(l, kind)
                .iter()
                .enumerate()
                .filter(|(_, v)| **v != 0.0)
                .map(|(i, _)| i)
                .collect()
        })
        .collect()
}

#[derive(Debug, Serialize)]
pub struct SearchSummary {
    pub budget: f64,
    pub full_cost: f64,
    pub achieved_cost: f64,
    pub pruned_importance: f64,
    pub n_star: usize,
    pub kept_heads: Vec<Vec<usize>>,
    pub kept_filters: Vec<Vec<usize>>,
}

impl SearchSummary {
    pub fn new(r: &SearchResult, budget: f64, full_cost: f64) -> Self {
        Self {
            budget,
            full_cost,
            achieved_cost: r.achieved_cost,
            pruned_importance: r.pruned_importance,
            n_star: r.n_star,
            kept_heads: support(&r.masks, UnitKind::Head),
            kept_filters: support(&r.masks, UnitKind::Filter),
        }
    }
}

fn json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    write_json(path, value).writing(path)
}

/// Writes every artifact of `run` into `dir`.
pub fn write_run(cfg: &PruneConfig, run: &PipelineRun, dir: &Path) -> CliResult<()> {
    json(&dir.join("config.json"), cfg)?;
    json(&dir.join("search.json"), &SearchSummary::new(&run.search, run.budget, run.full_cost))?;
    save_masks(&dir.join("search_masks.json"), &run.search.masks)?;
    if let Some((m, report)) = &run.rearrange {
        json(&dir.join("rearrange.json"), report)?;
        save_masks(&dir.join("rearrange_masks.json"), m)?;
    }
    if let Some((_, report)) = &run.tune {
        json(&dir.join("tune.json"), report)?;
    }
    save_masks(&dir.join("masks.json"), &run.masks)?;
    json(&dir.join("metrics.json"), &run.metrics)?;
    let timing = dir.join("timing.csv");
    write_atomic(&timing, run.times.to_csv().as_bytes()).writing(&timing)
}

pub fn run_pipeline(cfg: &PruneConfig) -> CliResult<PipelineRun> {
    let inputs = prepare(cfg)?;
    let run = prune(cfg, &inputs)?;
    write_run(cfg, &run, &cfg.out_dir)?;
    Ok(run)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub target: f64,
    pub outcome: Result<Evaluation, String>,
}

/// One pipeline per target, sharing inputs and Fisher. Failed runs are
/// recorded and the sweep continues.
pub fn sweep(cfg: &PruneConfig, inputs: &Inputs, targets: &[f64]) -> CliResult<Vec<SweepRow>> {
    if targets.is_empty() {
        return Err(CliError::input("no sweep targets"));
    }
    if let Some(t) = targets.iter().find(|t| !(**t > 0.0 && **t <= 1.0)) {
        return Err(CliError::input(format!("sweep target {t} outside (0, 1]")));
    }
    if targets.windows(2).any(|w| w[0] > w[1]) {
        return Err(CliError::input("sweep targets must be sorted ascending"));
    }
    Ok(targets
        .iter()
        .map(|&target| {
            let run_cfg = PruneConfig {
                target,
                absolute: None,
                ..cfg.clone()
            };
            let outcome = prune(&run_cfg, inputs)
                .map(|run| {
                    let mut e = run.metrics.final_;
                    // achieved ratio in the units of the constraint
                    if cfg.mode == Mode::Latency {
                        e.flops_ratio = e.latency_ratio.unwrap_or(e.flops_ratio);
                    }
                    e
                })
                .map_err(|e| e.to_string());
            SweepRow { target, outcome }
        })
        .collect())
}

/// `target_ratio,achieved_ratio,loss,accuracy`; failed rows leave the last
/// three fields empty.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("target_ratio,achieved_ratio,loss,accuracy\n");
    for r in rows {
        let _ = match &r.outcome {
            Ok(e) => writeln!(s, "{},{},{},{}", r.target, e.flops_ratio, e.loss, e.accuracy),
            Err(_) => writeln!(s, "{},,,", r.target),
        };
    }
    s
}
