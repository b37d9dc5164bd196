//! Decision rule, accuracy reports, shot sweeps and activation scatter export.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::data::{DatasetManifest, SampleSet, Split};
use crate::error::{config, contract, io_error, Result};
use crate::model::{activations, ClassLabel, ModelParams};
use crate::parallel::par_map;
use crate::residual::{residual, ResidualConfig};
use crate::tensor::Tensor;
use crate::trainer::{finetune_on, FewShotSpec, TrainConfig, EVAL_CHUNK};

/// Fake iff `a1 > a0`; ties are real.
pub fn decide(a0: f32, a1: f32) -> ClassLabel {
    if a1 > a0 {
        ClassLabel::Fake
    } else {
        ClassLabel::Real
    }
}

/// Classifies one `[C, H, W]` image with values in `[0, 1]`.
pub fn classify(
    model: &ModelParams,
    image: &Tensor,
    residual_cfg: &ResidualConfig,
) -> Result<(ClassLabel, f32, f32)> {
    let s = image.shape();
    let a = &model.arch;
    if s != [a.input_channels, a.input_size, a.input_size] {
        return Err(contract(format!(
            "image shape {s:?} does not match the model input [{}, {}, {}]",
            a.input_channels, a.input_size, a.input_size
        )));
    }
    let x = residual(image, residual_cfg)?;
    let mut shape = vec![1];
    shape.extend_from_slice(x.shape());
    let scores = activations_of(model, &x.reshape(shape)?)?;
    let (a0, a1) = scores[0];
    Ok((decide(a0, a1), a0, a1))
}

/// `(a0, a1)` for every sample of a preprocessed `[N, C, H, W]` batch.
pub fn activations_of(model: &ModelParams, inputs: &Tensor) -> Result<Vec<(f32, f32)>> {
    let n = inputs.shape()[0];
    let starts: Vec<usize> = (0..n).step_by(EVAL_CHUNK).collect();
    let per: usize = inputs.shape()[1..].iter().product();
    let parts = par_map(&starts, |_, &start| -> Result<Vec<(f32, f32)>> {
        let end = (start + EVAL_CHUNK).min(n);
        let mut shape = inputs.shape().to_vec();
        shape[0] = end - start;
        let chunk = Tensor::new(shape, inputs.data()[start * per..end * per].to_vec())?;
        let mut g = Graph::new();
        let bound = model.bind(&mut g, false);
        let x = g.constant(chunk);
        let latent = bound.encode(&mut g, x)?;
        let (a0, a1) = activations(&mut g, latent)?;
        Ok(g.value(a0)
            .data()
            .iter()
            .copied()
            .zip(g.value(a1).data().iter().copied())
            .collect())
    });
    let mut out = Vec::with_capacity(n);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub acc_real: f64,
    pub acc_fake: f64,
    pub n_real: usize,
    pub n_fake: usize,
    pub mean_a0_real: f64,
    pub mean_a1_real: f64,
    pub mean_a0_fake: f64,
    pub mean_a1_fake: f64,
}

impl EvalReport {
    /// Aggregates per-sample activations; a class with no samples reports 0
    /// for its accuracy and means.
    pub fn from_scores(labels: &[ClassLabel], scores: &[(f32, f32)]) -> Result<Self> {
        if labels.is_empty() {
            return Err(config("cannot evaluate an empty split"));
        }
        if labels.len() != scores.len() {
            return Err(contract("labels and scores differ in length"));
        }
        let mut n = [0usize; 2];
        let mut correct = [0usize; 2];
        let mut sums = [[0.0f64; 2]; 2];
        for (&label, &(a0, a1)) in labels.iter().zip(scores) {
            let c = label.index();
            n[c] += 1;
            if decide(a0, a1) == label {
                correct[c] += 1;
            }
            sums[c][0] += a0 as f64;
            sums[c][1] += a1 as f64;
        }
        let ratio = |a: f64, b: usize| if b == 0 { 0.0 } else { a / b as f64 };
        Ok(Self {
            accuracy: (correct[0] + correct[1]) as f64 / labels.len() as f64,
            acc_real: ratio(correct[0] as f64, n[0]),
            acc_fake: ratio(correct[1] as f64, n[1]),
            n_real: n[0],
            n_fake: n[1],
            mean_a0_real: ratio(sums[0][0], n[0]),
            mean_a1_real: ratio(sums[0][1], n[0]),
            mean_a0_fake: ratio(sums[1][0], n[1]),
            mean_a1_fake: ratio(sums[1][1], n[1]),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

pub fn evaluate_set(model: &ModelParams, set: &SampleSet) -> Result<EvalReport> {
    if set.is_empty() {
        return Err(config("cannot evaluate an empty split"));
    }
    EvalReport::from_scores(&set.labels, &activations_of(model, &set.inputs)?)
}

pub fn evaluate(
    model: &ModelParams,
    manifest: &DatasetManifest,
    split: Split,
    residual_cfg: &ResidualConfig,
) -> Result<EvalReport> {
    if manifest.split_indices(split).is_empty() {
        return Err(config(format!("the {split} split is empty")));
    }
    model.ensure_arch_input(manifest.channels, manifest.size)?;
    evaluate_set(model, &manifest.load_split(split, residual_cfg)?)
}

/// Scatter rows `sample_id,true_label,a0,a1` in set order.
pub fn scatter_csv(set: &SampleSet, scores: &[(f32, f32)]) -> String {
    let mut out = String::from("sample_id,true_label,a0,a1\n");
    for ((id, label), (a0, a1)) in set.ids.iter().zip(&set.labels).zip(scores) {
        let _ = writeln!(out, "{id},{label},{a0:.6},{a1:.6}");
    }
    out
}

pub fn export_scatter(
    model: &ModelParams,
    manifest: &DatasetManifest,
    split: Split,
    residual_cfg: &ResidualConfig,
    path: &Path,
) -> Result<()> {
    model.ensure_arch_input(manifest.channels, manifest.size)?;
    let set = manifest.load_split(split, residual_cfg)?;
    let scores = activations_of(model, &set.inputs)?;
    std::fs::write(path, scatter_csv(&set, &scores)).map_err(io_error(path))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShotPoint {
    pub shots: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShotRun {
    pub shots: usize,
    pub run: usize,
    pub seed: u64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShotCurve {
    pub runs: usize,
    pub points: Vec<ShotPoint>,
    pub table: Vec<ShotRun>,
}

impl ShotCurve {
    pub fn point(&self, shots: usize) -> Option<&ShotPoint> {
        self.points.iter().find(|p| p.shots == shots)
    }

    pub fn table_csv(&self) -> String {
        let mut out = String::from("shots,run,seed,accuracy\n");
        for r in &self.table {
            let _ = writeln!(out, "{},{},{},{:.6}", r.shots, r.run, r.seed, r.accuracy);
        }
        out
    }
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Pre-loaded target splits for repeated fine-tuning.
#[derive(Clone, Debug)]
pub struct TargetSets {
    pub train: SampleSet,
    pub val: SampleSet,
    pub test: SampleSet,
}

impl TargetSets {
    pub fn load(manifest: &DatasetManifest, residual_cfg: &ResidualConfig) -> Result<Self> {
        Ok(Self {
            train: manifest.load_split(Split::Train, residual_cfg)?,
            val: manifest.load_split(Split::Val, residual_cfg)?,
            test: manifest.load_split(Split::Test, residual_cfg)?,
        })
    }
}

/// Fine-tunes a copy of `source` on `shots` target examples and returns the
/// resulting test accuracy.
pub fn shot_accuracy(
    source: &ModelParams,
    target: &TargetSets,
    shots: usize,
    seed: u64,
    cfg: &TrainConfig,
) -> Result<f64> {
    let mut model = source.clone();
    let run_cfg = TrainConfig {
        seed,
        ..cfg.clone()
    };
    finetune_on(
        &mut model,
        &target.train,
        &target.val,
        &FewShotSpec::new(shots, seed),
        &run_cfg,
    )?;
    Ok(evaluate_set(&model, &target.test)?.accuracy)
}

/// Accuracy versus number of shots; run `r` uses seed `base_seed + r`.
pub fn shot_sweep(
    source: &ModelParams,
    target: &TargetSets,
    shots: &[usize],
    runs: usize,
    base_seed: u64,
    cfg: &TrainConfig,
) -> Result<ShotCurve> {
    if runs == 0 {
        return Err(config("a shot sweep needs at least one run"));
    }
    if shots.windows(2).any(|w| w[0] >= w[1]) {
        return Err(config("shot counts must be strictly increasing"));
    }
    let zero_shot = evaluate_set(source, &target.test)?.accuracy;
    let mut points = Vec::with_capacity(shots.len());
    let mut table = Vec::with_capacity(shots.len() * runs);
    for &k in shots {
        let mut accs = Vec::with_capacity(runs);
        for run in 0..runs {
            let seed = base_seed + run as u64;
            let accuracy = if k == 0 {
                zero_shot
            } else {
                shot_accuracy(source, target, k, seed, cfg)?
            };
            log::info!("shots {k} run {run}: accuracy {accuracy:.4}");
            accs.push(accuracy);
            table.push(ShotRun {
                shots: k,
                run,
                seed,
                accuracy,
            });
        }
        let (mean, std) = mean_std(&accs);
        points.push(ShotPoint { shots: k, mean, std });
    }
    Ok(ShotCurve {
        runs,
        points,
        table,
    })
}
