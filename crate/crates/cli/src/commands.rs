//! Subcommand definitions and dispatch.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use maskprune_core::baseline::magnitude_importance;
use maskprune_core::cost::{fit_latency_model, mask_latency};
use maskprune_core::model::generate_samples;
use maskprune_core::rearrange::{rearrange, RearrangeOptions};
use maskprune_core::search::{search_flops, search_latency, Constraint};
use maskprune_core::tune::tune_model;
use maskprune_core::{FlopsCost, MaskSet, ToyTransformer};

use crate::artifacts::{check_data, load_data, load_fisher, load_masks, load_model, save_data, save_fisher, save_masks, save_model};
use crate::atomic::{write_atomic, write_json};
use crate::config::{FlopsOverride, Metric, Mode, PruneConfig, Stages, ToyShape};
use crate::error::{CliError, CliResult, PathContext};
use crate::latency::{load_latency, read_latency_table, save_latency_model};
use crate::pipeline::{self, compute_fisher, evaluate, sweep_csv, Evaluation, SearchSummary};

#[derive(Debug, Parser)]
#[command(name = "maskprune", version, about = "Retraining-free structured pruning of transformer encoders")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a random toy encoder.
    GenToy(GenToyArgs),
    /// Sample a labelled data set from a model.
    GenData(GenDataArgs),
    /// Mask gradients, Fisher diagonal and Fisher blocks.
    Fisher(FisherArgs),
    /// Fit a piecewise-linear latency model to a lookup table.
    FitLatency(FitLatencyArgs),
    /// Binary mask search under a FLOPs or latency budget.
    Search(SearchArgs),
    /// Swap pruned and kept units using the Fisher blocks.
    Rearrange(RearrangeArgs),
    /// Rescale kept units by layer-wise reconstruction.
    Tune(TuneArgs),
    /// Run every stage end to end.
    Pipeline(PipelineArgs),
    /// Run the pipeline for several target ratios.
    Sweep(SweepArgs),
    /// Loss, accuracy and cost of a mask.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct ShapeArgs {
    #[arg(long, default_value_t = 4)]
    pub layers: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 32)]
    pub filters: usize,
    #[arg(long, default_value_t = 32)]
    pub hidden: usize,
    #[arg(long, default_value_t = 8)]
    pub seq_len: usize,
    #[arg(long, default_value_t = 8)]
    pub features: usize,
    #[arg(long, default_value_t = 2)]
    pub classes: usize,
}

impl ShapeArgs {
    fn toy(&self) -> ToyShape {
        ToyShape {
            layers: self.layers,
            heads: self.heads,
            filters: self.filters,
            hidden: self.hidden,
            seq_len: self.seq_len,
            features: self.features,
            classes: self.classes,
        }
    }
}

#[derive(Debug, Args)]
pub struct GenToyArgs {
    #[command(flatten)]
    pub shape: ShapeArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Model manifest to write (`.json`).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 256)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Random stream name; use different streams for disjoint sets.
    #[arg(long, default_value = "data")]
    pub stream: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FisherArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Use only the first N examples.
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FitLatencyArgs {
    /// CSV with header `kind,n_active,latency_us`.
    #[arg(long)]
    pub table: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ConstraintArgs {
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
    /// Fraction of the unpruned cost, in (0, 1].
    #[arg(long)]
    pub target: Option<f64>,
    /// Absolute budget in FLOPs, or seconds in latency mode.
    #[arg(long)]
    pub absolute: Option<f64>,
    /// Latency table (`.csv`) or fitted model (`.json`).
    #[arg(long)]
    pub latency: Option<PathBuf>,
    #[arg(long)]
    pub flops_head: Option<f64>,
    #[arg(long)]
    pub flops_filter: Option<f64>,
}

impl ConstraintArgs {
    fn apply(&self, cfg: &mut PruneConfig) -> CliResult<()> {
        if let Some(m) = self.mode {
            cfg.mode = m;
        }
        if let Some(t) = self.target {
            cfg.target = t;
            cfg.absolute = None;
        }
        if self.absolute.is_some() {
            cfg.absolute = self.absolute;
        }
        if self.latency.is_some() {
            cfg.latency = self.latency.clone();
        }
        match (self.flops_head, self.flops_filter) {
            (Some(head), Some(filter)) => cfg.flops = Some(FlopsOverride { head, filter }),
            (None, None) => {}
            _ => return Err(CliError::input("--flops-head and --flops-filter must be given together")),
        }
        Ok(())
    }
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    /// Needed for FLOPs constants and the magnitude metric.
    #[arg(long)]
    pub model: PathBuf,
    /// Fisher artifact; required unless the metric is magnitude.
    #[arg(long)]
    pub fisher: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub metric: Option<Metric>,
    #[command(flatten)]
    pub constraint: ConstraintArgs,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct RearrangeArgs {
    #[arg(long)]
    pub fisher: PathBuf,
    #[arg(long)]
    pub masks: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub passes: usize,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct TuneArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub masks: PathBuf,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub damp: Option<f64>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

/// Config file plus flag overrides; flags win.
#[derive(Debug, Args)]
pub struct PruneArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub constraint: ConstraintArgs,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub fisher: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub stages: Option<Stages>,
    #[arg(long, value_enum)]
    pub metric: Option<Metric>,
    #[arg(long)]
    pub passes: Option<usize>,
    #[arg(long)]
    pub damp: Option<f64>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

impl PruneArgs {
    pub fn config(&self) -> CliResult<PruneConfig> {
        let mut cfg = match &self.config {
            Some(p) => PruneConfig::load(p)?,
            None => PruneConfig::default(),
        };
        self.constraint.apply(&mut cfg)?;
        macro_rules! set {
            ($($field:ident => $target:expr),*) => {$(
                if let Some(v) = &self.$field {
                    $target = v.clone().into();
                }
            )*};
        }
        set!(
            samples => cfg.samples,
            seed => cfg.seed,
            model => cfg.model,
            data => cfg.data,
            fisher => cfg.fisher,
            stages => cfg.stages,
            metric => cfg.metric,
            passes => cfg.rearrange_passes,
            damp => cfg.tune.damp,
            out_dir => cfg.out_dir
        );
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    #[command(flatten)]
    pub prune: PruneArgs,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub prune: PruneArgs,
    /// Ascending target ratios in (0, 1].
    #[arg(long, value_delimiter = ',', required = true)]
    pub targets: Vec<f64>,
    /// CSV to write; defaults to `sweep.csv` in the output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Defaults to the unpruned model.
    #[arg(long)]
    pub masks: Option<PathBuf>,
    #[arg(long)]
    pub latency: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub format: Format,
    /// Written to stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn execute(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenToy(a) => gen_toy(a),
        Command::GenData(a) => gen_data(a),
        Command::Fisher(a) => fisher(a),
        Command::FitLatency(a) => fit_latency(a),
        Command::Search(a) => search(a),
        Command::Rearrange(a) => rearrange_cmd(a),
        Command::Tune(a) => tune(a),
        Command::Pipeline(a) => run_pipeline(a),
        Command::Sweep(a) => sweep(a),
        Command::Eval(a) => eval(a),
    }
}

fn print_json(value: &impl serde::Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Internal(e.to_string()))?;
    println!("{text}");
    Ok(())
}

fn gen_toy(a: GenToyArgs) -> CliResult<()> {
    let model = ToyTransformer::init(a.shape.toy().to_shape()?, a.seed)?;
    save_model(&a.out, &model, Some(a.seed))
}

fn gen_data(a: GenDataArgs) -> CliResult<()> {
    if a.count == 0 {
        return Err(CliError::input("--count must be positive"));
    }
    let model = load_model(&a.model)?;
    save_data(&a.out, &generate_samples(&model, a.count, a.seed, &a.stream)?)
}

fn load_model_and_data(model: &Path, data: &Path, samples: Option<usize>) -> CliResult<(ToyTransformer, maskprune_core::SampleBatch)> {
    let model = load_model(model)?;
    let mut batch = load_data(data)?;
    if let Some(n) = samples {
        batch = batch.head(n);
    }
    if batch.is_empty() {
        return Err(CliError::input(format!("{}: no examples", data.display())));
    }
    check_data(&model.shape, &batch)?;
    Ok((model, batch))
}

fn fisher(a: FisherArgs) -> CliResult<()> {
    let (model, batch) = load_model_and_data(&a.model, &a.data, a.samples)?;
    save_fisher(&a.out, &compute_fisher(&model, &batch)?)
}

fn fit_latency(a: FitLatencyArgs) -> CliResult<()> {
    let model = fit_latency_model(&read_latency_table(&a.table)?)?;
    save_latency_model(&a.out, &model)?;
    print_json(&model)
}

fn search(a: SearchArgs) -> CliResult<()> {
    let mut cfg = PruneConfig::default();
    a.constraint.apply(&mut cfg)?;
    cfg.metric = a.metric.unwrap_or(Metric::Fisher);
    let model = load_model(&a.model)?;
    let scores = match cfg.metric {
        Metric::Magnitude => magnitude_importance(&model)?,
        metric => {
            let path = a
                .fisher
                .as_deref()
                .ok_or_else(|| CliError::input("--fisher is required for this metric"))?;
            let f = load_fisher(path)?;
            if metric == Metric::Fisher {
                f.diagonal
            } else {
                f.gradient
            }
        }
    };
    if scores.dims() != model.mask_dims() {
        return Err(CliError::input("Fisher artifact does not match the model"));
    }
    let constraint = match cfg.absolute {
        Some(c) => Constraint::Absolute(c),
        None => Constraint::Ratio(cfg.target),
    };
    let (result, budget, full) = match cfg.mode {
        Mode::Flops => {
            let cost = pipeline::flops_cost(&cfg, &model)?;
            let full = cost.full_cost();
            let budget = constraint.resolve(full)?;
            (search_flops(&scores, &cost, budget)?, budget, full)
        }
        Mode::Latency => {
            let path = cfg
                .latency
                .as_deref()
                .ok_or_else(|| CliError::input("latency mode needs --latency"))?;
            let lat = load_latency(path)?;
            let full = mask_latency(&MaskSet::ones(model.mask_dims()), &lat);
            let budget = constraint.resolve(full)?;
            (search_latency(&scores, &lat, budget)?, budget, full)
        }
    };
    let summary = SearchSummary::new(&result, budget, full);
    write_json(&a.out_dir.join("search.json"), &summary).writing(&a.out_dir)?;
    save_masks(&a.out_dir.join("masks.json"), &result.masks)?;
    print_json(&summary)
}

fn rearrange_cmd(a: RearrangeArgs) -> CliResult<()> {
    if a.passes == 0 {
        return Err(CliError::input("--passes must be positive"));
    }
    let f = load_fisher(&a.fisher)?;
    let masks = load_masks(&a.masks)?;
    let (out, report) = rearrange(&f.blocks, &masks, &RearrangeOptions { passes: a.passes })?;
    write_json(&a.out_dir.join("rearrange.json"), &report).writing(&a.out_dir)?;
    save_masks(&a.out_dir.join("masks.json"), &out)?;
    eprintln!(
        "{} swaps, objective {:.6e} -> {:.6e}",
        report.total_swaps(),
        report.initial_objective(),
        report.final_objective()
    );
    Ok(())
}

fn tune(a: TuneArgs) -> CliResult<()> {
    let (model, batch) = load_model_and_data(&a.model, &a.data, a.samples)?;
    let masks = load_masks(&a.masks)?;
    let mut opts = PruneConfig::default().tune;
    if let Some(d) = a.damp {
        opts.damp = d;
    }
    if !(opts.damp >= 0.0) {
        return Err(CliError::input("--damp must be >= 0"));
    }
    let (out, report) = tune_model(&model, &batch, &masks, &opts)?;
    write_json(&a.out_dir.join("tune.json"), &report).writing(&a.out_dir)?;
    save_masks(&a.out_dir.join("masks.json"), &out)?;
    eprintln!("{} sublayers tuned", report.tuned_count());
    Ok(())
}

fn run_pipeline(a: PipelineArgs) -> CliResult<()> {
    let cfg = a.prune.config()?;
    let run = pipeline::run_pipeline(&cfg)?;
    print_json(&run.metrics)
}

fn sweep(a: SweepArgs) -> CliResult<()> {
    let cfg = a.prune.config()?;
    let inputs = pipeline::prepare(&cfg)?;
    let rows = pipeline::sweep(&cfg, &inputs, &a.targets)?;
    for r in &rows {
        if let Err(e) = &r.outcome {
            eprintln!("target {}: {e}", r.target);
        }
    }
    let out = a.out.unwrap_or_else(|| cfg.out_dir.join("sweep.csv"));
    let csv = sweep_csv(&rows);
    write_atomic(&out, csv.as_bytes()).writing(&out)?;
    print!("{csv}");
    Ok(())
}

fn eval_csv(e: &Evaluation) -> String {
    let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    format!(
        "samples,loss,accuracy,flops,flops_ratio,latency_s,latency_ratio\n{},{},{},{},{},{},{}\n",
        e.samples,
        e.loss,
        e.accuracy,
        e.flops,
        e.flops_ratio,
        opt(e.latency_s),
        opt(e.latency_ratio)
    )
}

fn eval(a: EvalArgs) -> CliResult<()> {
    let (model, batch) = load_model_and_data(&a.model, &a.data, None)?;
    let masks = match &a.masks {
        Some(p) => load_masks(p)?,
        None => MaskSet::ones(model.mask_dims()),
    };
    if masks.dims() != model.mask_dims() {
        return Err(CliError::input("masks do not match the model"));
    }
    let flops: FlopsCost = maskprune_core::cost::flops_constants(&model.shape);
    let lat = a.latency.as_deref().map(load_latency).transpose()?;
    let e = evaluate(&model, &masks, &batch, &flops, lat.as_ref())?;
    let text = match a.format {
        Format::Json => serde_json::to_string_pretty(&e).map_err(|e| CliError::Internal(e.to_string()))? + "\n",
        Format::Csv => eval_csv(&e),
    };
    match &a.out {
        Some(p) => write_atomic(p, text.as_bytes()).writing(p),
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| CliError::Internal(e.to_string())),
    }
}
