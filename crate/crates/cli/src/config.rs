//! Resolved experiment configuration and the run-directory key derived from it.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use forensic_transfer::{ArchConfig, FewShotSpec, Head, Split, SynthSpec, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{usage, CliError};

/// Ablation variants of the training recipe.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    NoResidual,
    NoReconstruction,
    CrossEntropy,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Full,
        Variant::NoResidual,
        Variant::NoReconstruction,
        Variant::CrossEntropy,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoResidual => "no-residual",
            Variant::NoReconstruction => "no-reconstruction",
            Variant::CrossEntropy => "cross-entropy",
        }
    }

    /// `base` with this variant's switches flipped.
    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        match self {
            Variant::Full => {}
            Variant::NoResidual => cfg.residual.enabled = false,
            Variant::NoReconstruction => cfg.loss.reconstruction_enabled = false,
            Variant::CrossEntropy => cfg.loss.head = Head::CrossEntropy,
        }
        cfg
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| format!("unknown variant {s:?}"))
    }
}

/// Source/target pairings of the synthetic manipulations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pair {
    /// PatchSplice to CenterInpaint.
    InpaintAnalog,
    /// PeriodicArtifact to WarpBlend.
    SynthesisAnalog,
}

impl Pair {
    pub fn manipulations(self) -> (forensic_transfer::Manipulation, forensic_transfer::Manipulation) {
        use forensic_transfer::Manipulation::*;
        match self {
            Pair::InpaintAnalog => (PatchSplice, CenterInpaint),
            Pair::SynthesisAnalog => (PeriodicArtifact, WarpBlend),
        }
    }
}

impl FromStr for Pair {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "inpaint-analog" => Ok(Pair::InpaintAnalog),
            "synthesis-analog" => Ok(Pair::SynthesisAnalog),
            other => Err(format!("unknown pair {other:?}")),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Source manifests, pooled by class when there are several.
    pub sources: Vec<PathBuf>,
    pub target: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

/// Everything a command needs to reproduce its outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub variant: Variant,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    /// Validation fraction for fine-tuning; `shots` and `seed` are set per run.
    pub few_shot: FewShotSpec,
    pub shots: Vec<usize>,
    pub runs: usize,
    /// Generator settings for `gen-data`, and for corpora built by `ablate --pair`.
    pub data: SynthSpec,
    /// Target corpus size per class for `ablate --pair`.
    pub target_per_class: usize,
    pub pair: Option<Pair>,
    /// Variants run by `ablate`; empty means all four.
    pub variants: Vec<Variant>,
    /// Latent sizes for the `ablate` sweep; empty skips it.
    pub latent_sweep: Vec<usize>,
    pub split: Split,
    pub paths: Paths,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Full,
            arch: ArchConfig::default(),
            train: TrainConfig::default(),
            few_shot: FewShotSpec::default(),
            shots: vec![0],
            runs: 1,
            data: SynthSpec::default(),
            target_per_class: 500,
            pair: None,
            variants: Vec::new(),
            latent_sweep: Vec::new(),
            split: Split::Test,
            paths: Paths::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| usage(format!("invalid config {}: {e}", path.display())))
    }

    /// Training recipe with the selected variant applied.
    pub fn train_config(&self) -> TrainConfig {
        self.variant.apply(&self.train)
    }

    pub fn set_latent(&mut self, latent: usize) {
        self.arch.latent_maps = latent;
        let n = self.arch.encoder_channels.len();
        for c in self.arch.encoder_channels.iter_mut().skip(n.saturating_sub(2)) {
            *c = latent;
        }
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.arch.seed = seed;
        self.data.seed = seed;
    }

    pub fn ablate_variants(&self) -> Vec<Variant> {
        if self.variants.is_empty() {
            Variant::ALL.to_vec()
        } else {
            self.variants.clone()
        }
    }

    /// Hex key naming the run directory of `command` under this config.
    pub fn run_key(&self, command: &str) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(command.as_bytes());
        h.update([0]);
        h.update(json.as_bytes());
        hex::encode(&h.finalize()[..6])
    }
}

/// Manifest path for a dataset directory or manifest file, made absolute.
pub fn resolve_manifest(path: &Path) -> Result<PathBuf, CliError> {
    let path = if path.is_dir() {
        path.join("manifest.json")
    } else {
        path.to_path_buf()
    };
    path.canonicalize()
        .map_err(|_| usage(format!("no such manifest: {}", path.display())))
}

pub fn resolve_file(path: &Path, what: &str) -> Result<PathBuf, CliError> {
    if !path.is_file() {
        return Err(usage(format!("no such {what}: {}", path.display())));
    }
    path.canonicalize()
        .map_err(|_| usage(format!("no such {what}: {}", path.display())))
}
