//! Config-driven experiments: train per seed, evaluate free-running rollouts
//! on held-out clips, write CSV reports, checkpoints, and comparison plots.
//! Includes the encoder/decoder/output-mode ablations and the noise-spike
//! robustness protocol.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{
    compute_bins, load_dataset, ClipRecord, DataError, Dataset, LengthBin, LengthBins,
    LengthMeasure,
};
use crate::metrics::{evaluate, EvalSample, MetricsError, MetricsReport};
use crate::model::{
    rollout, ClipInput, DecoderVariant, EfModel, EncoderVariant, ModelConfig, ModelError,
    OutputMode, RolloutOptions, SpikeSchedule,
};
use crate::svg::{write_svg, SvgScene};
use crate::train::{train, TrainConfig, TrainError, TrainLog};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config: {0}")]
    Config(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io { path: path.display().to_string(), source }
}

/// Estimation task: prediction sees no future observed frames; inference has
/// foresight `k >= 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "lowercase")]
pub enum Task {
    Infer { k: usize },
    Predict,
}

impl Task {
    pub fn foresight(self) -> usize {
        match self {
            Task::Infer { k } => k,
            Task::Predict => 0,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Task::Infer { .. } => "infer",
            Task::Predict => "predict",
        }
    }

    pub fn validate(self) -> Result<(), ExperimentError> {
        if let Task::Infer { k } = self {
            if k == 0 {
                return Err(ExperimentError::Config(
                    "inference requires foresight k >= 1 (k = 0 is the prediction task)".into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub train_dir: PathBuf,
    pub test_dir: PathBuf,
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
    #[serde(flatten)]
    pub task: Task,
    pub multi_task: bool,
    pub seeds: Vec<u64>,
    pub length_measure: LengthMeasure,
    /// Count never-observed action classes as zero F1.
    pub count_absent_classes: bool,
    /// Optional label override for report rows.
    pub method: Option<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            train_dir: PathBuf::from("data/train"),
            test_dir: PathBuf::from("data/test"),
            out_dir: PathBuf::from("out"),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            task: Task::Infer { k: 1 },
            multi_task: false,
            seeds: vec![1, 2, 3, 4],
            length_measure: LengthMeasure::PathLength,
            count_absent_classes: true,
            method: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self, ExperimentError> {
        let raw = fs::read_to_string(path).map_err(io_err(path))?;
        let config: Self = serde_json::from_str(&raw)
            .map_err(|e| ExperimentError::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        self.task.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.seeds.is_empty() {
            return Err(ExperimentError::Config("seeds must not be empty".into()));
        }
        Ok(())
    }

    pub fn method_label(&self) -> String {
        self.method.clone().unwrap_or_else(|| {
            format!(
                "{}+{}+{}",
                self.model.decoder_variant.cli_name(),
                self.model.encoder_variant.cli_name(),
                self.model.output_mode.cli_name()
            )
        })
    }

    /// Check the model against a dataset manifest.
    pub fn check_dataset(&self, dataset: &Dataset) -> Result<(), ExperimentError> {
        let m = &dataset.manifest;
        if m.n_obs != self.model.n_obs || m.n_tgt != self.model.n_tgt {
            return Err(ExperimentError::Config(format!(
                "dataset split {}/{} does not match model {}/{}",
                m.n_obs, m.n_tgt, self.model.n_obs, self.model.n_tgt
            )));
        }
        if m.actions.len() != self.model.action_class_count {
            return Err(ExperimentError::Config(format!(
                "dataset has {} actions, model expects {}",
                m.actions.len(),
                self.model.action_class_count
            )));
        }
        Ok(())
    }
}

/// Worker cap: `EFFORMER_THREADS` when set, otherwise available parallelism.
pub fn worker_count() -> usize {
    std::env::var("EFFORMER_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        })
}

/// Run `f` over items on up to [`worker_count`] threads; results keep the
/// input order regardless of scheduling.
pub fn parallel_map<T, R, F>(items: Vec<T>, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync,
{
    let workers = worker_count().min(items.len()).max(1);
    if workers == 1 {
        return items.into_iter().map(f).collect();
    }
    let n = items.len();
    let queue: Vec<Mutex<Option<T>>> = items.into_iter().map(|t| Mutex::new(Some(t))).collect();
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<R>>> = (0..n).map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let item = queue[i].lock().expect("queue lock").take().expect("taken once");
                let result = f(item);
                *slots[i].lock().expect("slot lock") = Some(result);
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.into_inner().expect("slot lock").expect("worker filled slot"))
        .collect()
}

/// Convert loaded records into model inputs.
pub fn clips_for_model(dataset: &Dataset) -> Vec<ClipInput> {
    dataset
        .clips
        .iter()
        .map(|c| ClipInput::from_record(c, &dataset.manifest))
        .collect()
}

/// One trained seed with its clean evaluation.
pub struct TrainedRun {
    pub seed: u64,
    pub model: EfModel,
    pub log: TrainLog,
    pub report: MetricsReport,
}

/// Evaluate free-running rollouts of a model over clips.
pub fn evaluate_model(
    model: &EfModel,
    clips: &[ClipInput],
    opts: &RolloutOptions,
    bins: Option<&LengthBins>,
    measure: LengthMeasure,
    count_absent: bool,
) -> Result<MetricsReport, ExperimentError> {
    let mut samples = Vec::with_capacity(clips.len() * model.config.n_tgt);
    for clip in clips {
        let result = rollout(model, clip, opts)?;
        for (j, target) in clip.targets.iter().enumerate() {
            samples.push(EvalSample {
                est_track: result.estimated_track(j),
                gt_track: target.positions.clone(),
                pred_actions: result.estimated_actions(j),
                gt_actions: target.actions[1..].to_vec(),
            });
        }
    }
    Ok(evaluate(
        &samples,
        bins,
        measure,
        model.config.action_class_count,
        count_absent,
    )?)
}

/// Train one model per seed (in parallel) and evaluate each on the test
/// clips without spikes.
pub fn run_seeds(
    config: &ExperimentConfig,
    train_clips: &[ClipInput],
    test_clips: &[ClipInput],
    bins: Option<&LengthBins>,
) -> Result<Vec<TrainedRun>, ExperimentError> {
    config.validate()?;
    let k = config.task.foresight();
    let opts = RolloutOptions {
        foresight: k,
        multi_task: config.multi_task,
        spike: None,
        capture_attention: false,
    };
    let results = parallel_map(config.seeds.clone(), |seed| -> Result<TrainedRun, ExperimentError> {
        let mut model = EfModel::new(config.model.clone(), seed)?;
        let train_cfg = TrainConfig { seed, ..config.train.clone() };
        let log = train(&mut model, train_clips, k, &train_cfg)?;
        let report = evaluate_model(
            &model,
            test_clips,
            &opts,
            bins,
            config.length_measure,
            config.count_absent_classes,
        )?;
        Ok(TrainedRun { seed, model, log, report })
    });
    results.into_iter().collect()
}

/// Outcome summary of one method across seeds.
pub struct ExperimentOutcome {
    pub method: String,
    pub task: Task,
    pub runs: Vec<TrainedRun>,
}

impl ExperimentOutcome {
    pub fn fads(&self) -> Vec<f64> {
        self.runs.iter().map(|r| r.report.overall.fad).collect()
    }

    pub fn mean_fad(&self) -> f64 {
        mean(&self.fads())
    }

    pub fn mean_mad(&self) -> f64 {
        mean(&self.runs.iter().map(|r| r.report.overall.mad).collect::<Vec<_>>())
    }
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample standard deviation (n - 1 denominator).
pub fn std_dev(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
}

fn load_split(config: &ExperimentConfig) -> Result<(Dataset, Dataset), ExperimentError> {
    let train_ds = load_dataset(&config.train_dir)?;
    let test_ds = load_dataset(&config.test_dir)?;
    config.check_dataset(&train_ds)?;
    config.check_dataset(&test_ds)?;
    Ok((train_ds, test_ds))
}

fn bins_from_training(
    train_ds: &Dataset,
    measure: LengthMeasure,
) -> Option<LengthBins> {
    compute_bins(&train_ds.clips, measure).ok()
}

/// Train/evaluate one method and write reports, loss logs, and checkpoints.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutcome, ExperimentError> {
    let (train_ds, test_ds) = load_split(config)?;
    let bins = bins_from_training(&train_ds, config.length_measure);
    let train_clips = clips_for_model(&train_ds);
    let test_clips = clips_for_model(&test_ds);
    let runs = run_seeds(config, &train_clips, &test_clips, bins.as_ref())?;
    let outcome = ExperimentOutcome {
        method: config.method_label(),
        task: config.task,
        runs,
    };
    write_experiment_artifacts(config, std::slice::from_ref(&outcome))?;
    Ok(outcome)
}

/// All metric rows of one outcome: `method,task,seed,bin,metric,value`.
fn push_metric_rows(out: &mut String, outcome: &ExperimentOutcome) {
    let method = &outcome.method;
    let task = outcome.task.label();
    let mut push = |seed: &str, bin: &str, metric: &str, value: f64| {
        writeln!(out, "{method},{task},{seed},{bin},{metric},{value}").expect("string write");
    };
    for run in &outcome.runs {
        let seed = run.seed.to_string();
        push(&seed, "all", "mad", run.report.overall.mad);
        push(&seed, "all", "fad", run.report.overall.fad);
        push(&seed, "all", "count", run.report.overall.count as f64);
        for bin in LengthBin::ALL {
            if let Some(stats) = run.report.bin(bin) {
                push(&seed, bin.label(), "mad", stats.mad);
                push(&seed, bin.label(), "fad", stats.fad);
                push(&seed, bin.label(), "count", stats.count as f64);
            }
        }
        if let Some(f1) = run.report.macro_f1 {
            push(&seed, "all", "macro_f1", f1);
        }
    }
    let mads: Vec<f64> = outcome.runs.iter().map(|r| r.report.overall.mad).collect();
    let fads = outcome.fads();
    push("mean", "all", "mad", mean(&mads));
    push("mean", "all", "fad", mean(&fads));
    push("std", "all", "fad", std_dev(&fads));
}

fn write_metrics_csv(path: &Path, outcomes: &[ExperimentOutcome]) -> Result<(), ExperimentError> {
    let mut out = String::from("method,task,seed,bin,metric,value\n");
    for outcome in outcomes {
        push_metric_rows(&mut out, outcome);
    }
    fs::write(path, out).map_err(io_err(path))
}

fn write_loss_log(
    path: &Path,
    log: &TrainLog,
    final_report: &MetricsReport,
) -> Result<(), ExperimentError> {
    let mut out = String::from("epoch,split,loss,mad,fad\n");
    for e in &log.epochs {
        writeln!(out, "{},train,{},,", e.epoch, e.train_loss).expect("string write");
    }
    if let Some(last) = log.epochs.last() {
        writeln!(
            out,
            "{},val,{},{},{}",
            last.epoch, last.train_loss, final_report.overall.mad, final_report.overall.fad
        )
        .expect("string write");
    }
    fs::write(path, out).map_err(io_err(path))
}

fn write_confusion_csv(path: &Path, outcomes: &[ExperimentOutcome]) -> Result<(), ExperimentError> {
    let mut out = String::from("method,seed,gt_class,pred_class,count\n");
    for outcome in outcomes {
        for run in &outcome.runs {
            if let Some(cm) = &run.report.confusion {
                for gt in 0..cm.classes {
                    for pred in 0..cm.classes {
                        let count = cm.at(gt, pred);
                        if count > 0 {
                            writeln!(out, "{},{},{gt},{pred},{count}", outcome.method, run.seed)
                                .expect("string write");
                        }
                    }
                }
            }
        }
    }
    fs::write(path, out).map_err(io_err(path))
}

fn write_experiment_artifacts(
    config: &ExperimentConfig,
    outcomes: &[ExperimentOutcome],
) -> Result<(), ExperimentError> {
    fs::create_dir_all(&config.out_dir).map_err(io_err(&config.out_dir))?;
    write_metrics_csv(&config.out_dir.join("metrics.csv"), outcomes)?;
    write_confusion_csv(&config.out_dir.join("confusion.csv"), outcomes)?;
    let ckpt_dir = config.out_dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(io_err(&ckpt_dir))?;
    for outcome in outcomes {
        for run in &outcome.runs {
            let stem = format!("{}_seed{}", outcome.method, run.seed);
            run.model
                .save(&ckpt_dir.join(format!("{stem}.eft")), &ckpt_dir.join(format!("{stem}.config.json")))?;
            write_loss_log(
                &config.out_dir.join(format!("loss_{stem}.csv")),
                &run.log,
                &run.report,
            )?;
        }
    }
    Ok(())
}

/// The robustness protocol: train per seed, then compare clean FAD against
/// spikes at single frames {3, 6, 9} and paired frames {2,3}, {5,6}, {8,9}
/// (clamped to the clip range).
pub fn default_spike_sets(frames: usize) -> Vec<Vec<usize>> {
    let sets: [&[usize]; 6] = [&[3], &[6], &[9], &[2, 3], &[5, 6], &[8, 9]];
    sets.iter()
        .filter(|s| s.iter().all(|&f| f >= 2 && f <= frames - 1))
        .map(|s| s.to_vec())
        .collect()
}

pub struct RobustnessRow {
    pub method: String,
    pub seed: u64,
    /// Spiked frames; empty for the clean run.
    pub spike: Vec<usize>,
    pub fad: f64,
}

pub fn run_robustness(config: &ExperimentConfig) -> Result<Vec<RobustnessRow>, ExperimentError> {
    let (train_ds, test_ds) = load_split(config)?;
    let frames = test_ds.clips.first().map(|c| c.frames).unwrap_or(10);
    let bins = bins_from_training(&train_ds, config.length_measure);
    let train_clips = clips_for_model(&train_ds);
    let test_clips = clips_for_model(&test_ds);
    let runs = run_seeds(config, &train_clips, &test_clips, bins.as_ref())?;
    let method = config.method_label();

    let mut rows = Vec::new();
    let spike_sets = default_spike_sets(frames);
    for run in &runs {
        rows.push(RobustnessRow {
            method: method.clone(),
            seed: run.seed,
            spike: Vec::new(),
            fad: run.report.overall.fad,
        });
        for set in &spike_sets {
            let opts = RolloutOptions {
                foresight: config.task.foresight(),
                multi_task: config.multi_task,
                spike: Some(SpikeSchedule::at_frames(set.clone())),
                capture_attention: false,
            };
            let report = evaluate_model(
                &run.model,
                &test_clips,
                &opts,
                bins.as_ref(),
                config.length_measure,
                config.count_absent_classes,
            )?;
            rows.push(RobustnessRow {
                method: method.clone(),
                seed: run.seed,
                spike: set.clone(),
                fad: report.overall.fad,
            });
        }
    }
    fs::create_dir_all(&config.out_dir).map_err(io_err(&config.out_dir))?;
    write_robustness_csv(&config.out_dir.join("robustness.csv"), &rows)?;
    Ok(rows)
}

pub fn write_robustness_csv(path: &Path, rows: &[RobustnessRow]) -> Result<(), ExperimentError> {
    let mut out = String::from("method,seed,spike,metric,value\n");
    for row in rows {
        let spike = if row.spike.is_empty() {
            "none".to_string()
        } else {
            row.spike
                .iter()
                .map(|f| f.to_string())
                .collect::<Vec<_>>()
                .join("+")
        };
        writeln!(out, "{},{},{spike},fad,{}", row.method, row.seed, row.fad).expect("string write");
    }
    fs::write(path, out).map_err(io_err(path))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationAxis {
    Decoder,
    Encoder,
    OutputMode,
}

/// Run one method per value of the chosen axis, write a combined metrics
/// file and a trajectory comparison plot for the first test clip.
pub fn run_ablation(
    config: &ExperimentConfig,
    axis: AblationAxis,
) -> Result<Vec<ExperimentOutcome>, ExperimentError> {
    let (train_ds, test_ds) = load_split(config)?;
    let bins = bins_from_training(&train_ds, config.length_measure);
    let train_clips = clips_for_model(&train_ds);
    let test_clips = clips_for_model(&test_ds);

    let variants: Vec<(String, ModelConfig)> = match axis {
        AblationAxis::Decoder => DecoderVariant::ALL
            .iter()
            .map(|&v| {
                (v.cli_name().to_string(), ModelConfig { decoder_variant: v, ..config.model.clone() })
            })
            .collect(),
        AblationAxis::Encoder => EncoderVariant::ALL
            .iter()
            .map(|&v| {
                (v.cli_name().to_string(), ModelConfig { encoder_variant: v, ..config.model.clone() })
            })
            .collect(),
        AblationAxis::OutputMode => OutputMode::ALL
            .iter()
            .map(|&v| {
                (v.cli_name().to_string(), ModelConfig { output_mode: v, ..config.model.clone() })
            })
            .collect(),
    };

    let mut outcomes = Vec::with_capacity(variants.len());
    for (label, model) in variants {
        let variant_config = ExperimentConfig {
            model,
            method: Some(label),
            ..config.clone()
        };
        let runs = run_seeds(&variant_config, &train_clips, &test_clips, bins.as_ref())?;
        outcomes.push(ExperimentOutcome {
            method: variant_config.method_label(),
            task: config.task,
            runs,
        });
    }

    write_experiment_artifacts(config, &outcomes)?;
    if let Some(first_clip) = test_clips.first() {
        let path = config.out_dir.join("comparison.svg");
        write_comparison_svg(&path, first_clip, &outcomes, config)?;
    }
    Ok(outcomes)
}

/// Overlay the first-seed rollout of every method on one clip.
pub fn write_comparison_svg(
    path: &Path,
    clip: &ClipInput,
    outcomes: &[ExperimentOutcome],
    config: &ExperimentConfig,
) -> Result<(), ExperimentError> {
    let opts = RolloutOptions {
        foresight: config.task.foresight(),
        multi_task: config.multi_task,
        spike: None,
        capture_attention: false,
    };
    let mut estimates = Vec::with_capacity(outcomes.len());
    for outcome in outcomes {
        let Some(run) = outcome.runs.first() else { continue };
        let result = rollout(&run.model, clip, &opts)?;
        let tracks: Vec<Vec<(f64, f64)>> = (0..clip.targets.len())
            .map(|j| result.estimated_track(j))
            .collect();
        estimates.push((outcome.method.clone(), tracks));
    }
    let observed: Vec<Vec<(f64, f64)>> =
        clip.observed.iter().map(|t| t.positions.clone()).collect();
    let target_gt: Vec<Vec<(f64, f64)>> =
        clip.targets.iter().map(|t| t.positions.clone()).collect();
    let scene = SvgScene {
        width: clip.width,
        height: clip.height,
        observed: &observed,
        target_gt: &target_gt,
        estimates: &estimates,
    };
    write_svg(path, &scene).map_err(io_err(path))
}

/// Write a generated dataset plus the spec that produced it.
pub fn write_generated(
    dir: &Path,
    dataset: &Dataset,
    spec: &crate::data::SynthSpec,
) -> Result<(), ExperimentError> {
    crate::data::save_dataset(dir, dataset)?;
    let path = dir.join("synth_spec.json");
    let body = serde_json::to_string_pretty(spec).expect("spec serializes");
    fs::write(&path, body).map_err(io_err(&path))
}

/// Bin boundaries from already-loaded records (exposed for tools/tests).
pub fn training_bins(
    clips: &[ClipRecord],
    measure: LengthMeasure,
) -> Result<LengthBins, ExperimentError> {
    Ok(compute_bins(clips, measure)?)
}
