//! Training objective `gamma * L_rec + L_act` and its ablation variants.
//!
//! Both terms are averaged over the batch, so `gamma` balances them
//! independently of the batch size.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{config, contract, Result};
use crate::model::ClassLabel;
use crate::tensor::Tensor;

/// How the latent activations are turned into a classification loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Head {
    /// `|a_c - 1| + |a_{1-c}|` per sample.
    Activation,
    /// Softmax cross-entropy with `(a0, a1)` as logits.
    CrossEntropy,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub gamma: f32,
    pub head: Head,
    /// `false` drops the reconstruction term (equivalent to `gamma = 0`).
    pub reconstruction_enabled: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma: 0.1,
            head: Head::Activation,
            reconstruction_enabled: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(config(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        Ok(())
    }

    /// Whether the decoder has to run at all.
    pub fn uses_reconstruction(&self) -> bool {
        self.reconstruction_enabled && self.gamma > 0.0
    }
}

/// Batch mean of `(1/K) * ||x - x_hat||_1`, `K = C * H * W`.
pub fn loss_rec(graph: &mut Graph, x: Var, x_hat: Var) -> Result<Var> {
    let (xs, hs) = (graph.value(x).shape(), graph.value(x_hat).shape());
    if xs != hs || xs.len() < 2 {
        return Err(contract(format!(
            "reconstruction shapes differ: {xs:?} vs {hs:?}"
        )));
    }
    let channels = xs[1];
    let diff = graph.sub(x, x_hat)?;
    let per_sample = graph.channel_mean_abs(diff, 0, channels)?;
    Ok(graph.mean(per_sample))
}

fn targets(labels: &[ClassLabel]) -> (Tensor, Tensor) {
    let t0 = labels
        .iter()
        .map(|l| if *l == ClassLabel::Real { 1.0 } else { 0.0 })
        .collect();
    let t1 = labels
        .iter()
        .map(|l| if *l == ClassLabel::Fake { 1.0 } else { 0.0 })
        .collect();
    (Tensor::from_vec(t0), Tensor::from_vec(t1))
}

fn check_pair(graph: &Graph, a0: Var, a1: Var, labels: &[ClassLabel]) -> Result<()> {
    let (s0, s1) = (graph.value(a0).shape(), graph.value(a1).shape());
    if s0 != s1 || s0 != [labels.len()] {
        return Err(contract(format!(
            "activations {s0:?}/{s1:?} do not match {} labels",
            labels.len()
        )));
    }
    Ok(())
}

/// Per-sample activation loss `|a0 - [real]| + |a1 - [fake]|`, shape `[N]`.
pub fn activation_terms(
    graph: &mut Graph,
    a0: Var,
    a1: Var,
    labels: &[ClassLabel],
) -> Result<Var> {
    check_pair(graph, a0, a1, labels)?;
    let (t0, t1) = targets(labels);
    let t0 = graph.constant(t0);
    let t1 = graph.constant(t1);
    let d0 = graph.sub(a0, t0)?;
    let d1 = graph.sub(a1, t1)?;
    let e0 = graph.abs(d0);
    let e1 = graph.abs(d1);
    graph.add(e0, e1)
}

/// Batch mean of the activation loss.
pub fn loss_act(graph: &mut Graph, a0: Var, a1: Var, labels: &[ClassLabel]) -> Result<Var> {
    let terms = activation_terms(graph, a0, a1, labels)?;
    Ok(graph.mean(terms))
}

/// Batch mean of `-log softmax(a0, a1)[label]`.
pub fn loss_cross_entropy(
    graph: &mut Graph,
    a0: Var,
    a1: Var,
    labels: &[ClassLabel],
) -> Result<Var> {
    check_pair(graph, a0, a1, labels)?;
    let ce = graph.pair_cross_entropy(a0, a1, labels.iter().map(|l| l.index()).collect())?;
    Ok(graph.mean(ce))
}

/// `gamma * rec + act`, or `act` alone when reconstruction is disabled or
/// `rec` was not computed.
pub fn loss_total(graph: &mut Graph, rec: Option<Var>, act: Var, cfg: &LossConfig) -> Result<Var> {
    match rec {
        Some(rec) if cfg.reconstruction_enabled => {
            let weighted = graph.scale(rec, cfg.gamma);
            graph.add(weighted, act)
        }
        _ => Ok(act),
    }
}

/// Classification term selected by `cfg.head`.
pub fn loss_head(
    graph: &mut Graph,
    a0: Var,
    a1: Var,
    labels: &[ClassLabel],
    cfg: &LossConfig,
) -> Result<Var> {
    match cfg.head {
        Head::Activation => loss_act(graph, a0, a1, labels),
        Head::CrossEntropy => loss_cross_entropy(graph, a0, a1, labels),
    }
}
