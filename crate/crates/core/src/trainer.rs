//! Source-domain training, few-shot fine-tuning and early stopping.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::{DatasetManifest, SampleSet, Split};
use crate::error::{config, io_error, Result};
use crate::losses::{loss_head, loss_rec, loss_total, LossConfig};
use crate::model::{activations, select, BoundModel, ClassLabel, ModelParams};
use crate::optim::{AdamConfig, AdamState};
use crate::parallel::par_map;
use crate::residual::ResidualConfig;
use crate::tensor::Tensor;

/// Samples per forward pass when scoring without gradients.
pub(crate) const EVAL_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
    /// Upper bound; the effective size is `min(batch_size, n_train / 4)`, at least 1.
    pub batch_size: usize,
    pub patience_epochs: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub loss: LossConfig,
    pub residual: ResidualConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            epsilon: adam.epsilon,
            batch_size: 64,
            patience_epochs: 30,
            max_epochs: 200,
            seed: 0,
            loss: LossConfig::default(),
            residual: ResidualConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(config("batch_size must be at least 1"));
        }
        if self.patience_epochs == 0 {
            return Err(config("patience_epochs must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(config("Adam betas must lie in [0, 1)"));
        }
        if !(self.epsilon > 0.0) {
            return Err(config("Adam epsilon must be positive"));
        }
        self.loss.validate()?;
        self.residual.validate()
    }

    pub fn effective_batch(&self, n_train: usize) -> usize {
        self.batch_size.min(n_train / 4).max(1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f32,
    pub val_loss: f32,
    pub val_acc: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Epoch 0 is the untrained (or pre-fine-tuning) model.
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub optimizer_steps: u64,
    pub wall_seconds: f64,
    pub checkpoint: Option<PathBuf>,
}

impl TrainReport {
    /// Report of a run that performed no training at all.
    pub fn passthrough() -> Self {
        Self {
            epochs: Vec::new(),
            best_epoch: 0,
            optimizer_steps: 0,
            wall_seconds: 0.0,
            checkpoint: None,
        }
    }

    pub fn best(&self) -> Option<&EpochRecord> {
        self.epochs.iter().find(|r| r.epoch == self.best_epoch)
    }

    /// Number of epochs actually trained.
    pub fn trained_epochs(&self) -> usize {
        self.epochs.last().map_or(0, |r| r.epoch)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,val_acc\n");
        for r in &self.epochs {
            let _ = writeln!(
                out,
                "{},{:.6},{:.6},{:.6}",
                r.epoch, r.train_loss, r.val_loss, r.val_acc
            );
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(io_error(path))
    }
}

/// Loss and accuracy of a frozen model over a whole set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SetScore {
    pub loss: f32,
    pub accuracy: f32,
}

struct Forward {
    loss: Var,
    bound: BoundModel,
    a0: Var,
    a1: Var,
}

/// Builds the training objective for one batch on `graph`.
fn forward_loss(
    graph: &mut Graph,
    model: &ModelParams,
    trainable: bool,
    inputs: Tensor,
    labels: &[ClassLabel],
    cfg: &LossConfig,
) -> Result<Forward> {
    let bound = model.bind(graph, trainable);
    let x = graph.constant(inputs);
    let latent = bound.encode(graph, x)?;
    let (a0, a1) = activations(graph, latent)?;
    let head = loss_head(graph, a0, a1, labels, cfg)?;
    let rec = if cfg.uses_reconstruction() {
        let z = select(graph, latent, labels)?;
        let x_hat = bound.decode(graph, z)?;
        Some(loss_rec(graph, x, x_hat)?)
    } else {
        None
    };
    let loss = loss_total(graph, rec, head, cfg)?;
    Ok(Forward { loss, bound, a0, a1 })
}

/// One optimizer step on a batch; returns the batch loss before the update.
pub fn train_step(
    model: &mut ModelParams,
    adam: &mut AdamState,
    inputs: Tensor,
    labels: &[ClassLabel],
    cfg: &LossConfig,
) -> Result<f32> {
    let mut graph = Graph::new();
    let Forward { loss, bound, .. } = forward_loss(&mut graph, model, true, inputs, labels, cfg)?;
    let value = graph.value(loss).item()?;
    graph.backward(loss)?;
    model.accumulate_grads(&graph, &bound)?;
    adam.step(model.params_mut())?;
    Ok(value)
}

/// Mean objective and decision-rule accuracy of `model` over `set`.
pub fn score_set(model: &ModelParams, set: &SampleSet, cfg: &LossConfig) -> Result<SetScore> {
    if set.is_empty() {
        return Err(config("cannot score an empty sample set"));
    }
    let chunks: Vec<Vec<usize>> = (0..set.len())
        .collect::<Vec<_>>()
        .chunks(EVAL_CHUNK)
        .map(<[usize]>::to_vec)
        .collect();
    let parts = par_map(&chunks, |_, idx| -> Result<(f64, usize)> {
        let (inputs, labels) = set.gather(idx)?;
        let mut graph = Graph::new();
        let Forward { loss, a0, a1, .. } = forward_loss(&mut graph, model, false, inputs, &labels, cfg)?;
        let correct = graph
            .value(a0)
            .data()
            .iter()
            .zip(graph.value(a1).data())
            .zip(&labels)
            .filter(|((&a0, &a1), &l)| crate::eval::decide(a0, a1) == l)
            .count();
        Ok((graph.value(loss).item()? as f64 * idx.len() as f64, correct))
    });
    let (mut total, mut correct) = (0.0f64, 0usize);
    for p in parts {
        let (l, c) = p?;
        total += l;
        correct += c;
    }
    Ok(SetScore {
        loss: (total / set.len() as f64) as f32,
        accuracy: correct as f32 / set.len() as f32,
    })
}

/// Trains `model` on `train` with early stopping on `val` loss, leaving the
/// best parameters (possibly the untouched input, epoch 0) in `model`.
pub fn fit(
    model: &mut ModelParams,
    train: &SampleSet,
    val: &SampleSet,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(config("training and validation sets must be non-empty"));
    }
    let started = Instant::now();
    let batch = cfg.effective_batch(train.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(cfg.adam(), model.params());
    model.zero_grad();

    let initial_train = score_set(model, train, &cfg.loss)?;
    let initial_val = score_set(model, val, &cfg.loss)?;
    let mut epochs = vec![EpochRecord {
        epoch: 0,
        train_loss: initial_train.loss,
        val_loss: initial_val.loss,
        val_acc: initial_val.accuracy,
    }];
    let mut best = (initial_val.loss, 0usize, model.clone());
    let mut since_best = 0;
    log::info!(
        "epoch 0: train {:.4} val {:.4} acc {:.3} (batch {batch})",
        initial_train.loss,
        initial_val.loss,
        initial_val.accuracy
    );

    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0f64;
        for idx in order.chunks(batch) {
            let (inputs, labels) = train.gather(idx)?;
            let l = train_step(model, &mut adam, inputs, &labels, &cfg.loss)?;
            total += l as f64 * idx.len() as f64;
        }
        let v = score_set(model, val, &cfg.loss)?;
        let record = EpochRecord {
            epoch,
            train_loss: (total / train.len() as f64) as f32,
            val_loss: v.loss,
            val_acc: v.accuracy,
        };
        log::info!(
            "epoch {epoch}: train {:.4} val {:.4} acc {:.3}",
            record.train_loss,
            record.val_loss,
            record.val_acc
        );
        epochs.push(record);
        if v.loss < best.0 {
            best = (v.loss, epoch, model.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience_epochs {
                break;
            }
        }
    }
    *model = best.2;
    model.zero_grad();
    Ok(TrainReport {
        epochs,
        best_epoch: best.1,
        optimizer_steps: adam.step_count(),
        wall_seconds: started.elapsed().as_secs_f64(),
        checkpoint: None,
    })
}

/// Trains on the train split of `data` (every domain pooled by class) and
/// stops early on its val split.
pub fn train_source(
    model: &mut ModelParams,
    data: &DatasetManifest,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    model.ensure_arch_input(data.channels, data.size)?;
    data.require_both_classes(Split::Train)?;
    data.require_both_classes(Split::Val)?;
    let train = data.load_split(Split::Train, &cfg.residual)?;
    let val = data.load_split(Split::Val, &cfg.residual)?;
    fit(model, &train, &val, cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FewShotSpec {
    /// Fake target examples; the same number of real ones is drawn.
    pub shots: usize,
    pub val_numerator: usize,
    pub val_denominator: usize,
    pub seed: u64,
}

impl Default for FewShotSpec {
    fn default() -> Self {
        Self::new(0, 0)
    }
}

impl FewShotSpec {
    pub fn new(shots: usize, seed: u64) -> Self {
        Self {
            shots,
            val_numerator: 3,
            val_denominator: 5,
            seed,
        }
    }

    /// Validation samples per class: `round(3/5 * shots)`, at least 1.
    pub fn val_per_class(&self) -> usize {
        if self.shots == 0 {
            return 0;
        }
        let v = (self.shots * self.val_numerator) as f64 / self.val_denominator as f64;
        (v.round() as usize).max(1)
    }
}

/// Balanced seeded draws without replacement.
#[derive(Clone, Debug)]
pub struct FewShotDraw {
    pub train: SampleSet,
    pub val: SampleSet,
}

fn draw_balanced(pool: &SampleSet, per_class: usize, rng: &mut ChaCha8Rng, what: &str) -> Result<Vec<usize>> {
    let mut picked = Vec::with_capacity(2 * per_class);
    for label in [ClassLabel::Real, ClassLabel::Fake] {
        let mut members: Vec<usize> = (0..pool.len()).filter(|&i| pool.labels[i] == label).collect();
        if members.len() < per_class {
            return Err(config(format!(
                "{per_class} {label} {what} samples requested but only {} available",
                members.len()
            )));
        }
        members.shuffle(rng);
        picked.extend_from_slice(&members[..per_class]);
    }
    Ok(picked)
}

/// Draws `shots` per class from `train_pool` and the validation quota per
/// class from `val_pool`.
pub fn draw_few_shot(train_pool: &SampleSet, val_pool: &SampleSet, spec: &FewShotSpec) -> Result<FewShotDraw> {
    if spec.val_denominator == 0 {
        return Err(config("validation fraction denominator must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let train = draw_balanced(train_pool, spec.shots, &mut rng, "training")?;
    let val = draw_balanced(val_pool, spec.val_per_class(), &mut rng, "validation")?;
    Ok(FewShotDraw {
        train: train_pool.subset(&train)?,
        val: val_pool.subset(&val)?,
    })
}

/// Fine-tunes `model` on a few-shot draw from in-memory target pools with a
/// fresh optimizer state. `shots = 0` leaves `model` untouched.
pub fn finetune_on(
    model: &mut ModelParams,
    train_pool: &SampleSet,
    val_pool: &SampleSet,
    spec: &FewShotSpec,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if spec.shots == 0 {
        return Ok(TrainReport::passthrough());
    }
    let draw = draw_few_shot(train_pool, val_pool, spec)?;
    fit(model, &draw.train, &draw.val, cfg)
}

/// Fine-tunes on the target manifest: shots come from its train split,
/// validation samples from its val split.
pub fn finetune(
    model: &mut ModelParams,
    target: &DatasetManifest,
    spec: &FewShotSpec,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    model.ensure_arch_input(target.channels, target.size)?;
    if spec.shots == 0 {
        return Ok(TrainReport::passthrough());
    }
    let train_pool = target.load_split(Split::Train, &cfg.residual)?;
    let val_pool = target.load_split(Split::Val, &cfg.residual)?;
    finetune_on(model, &train_pool, &val_pool, spec, cfg)
}

#[cfg(test)]
mod tests;
