//! Run configuration: one flat `key = value` file covering every hyperparameter.
//!
//! The file is TOML restricted to top-level scalars and arrays. Unknown keys
//! are rejected so a typo cannot silently fall back to a default. Keys carry
//! their unit in the name (`_ms`, `_steps`).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::audio::MelConfig;
use crate::bootstrap::{EmaConvention, EmaSchedule};
use crate::error::{Error, Result};
use crate::masking::{BlockPlacement, MaskSpec};
use crate::model::ModelConfig;
use crate::multires::{derived_channels, MultiResConfig, PosEmbedding};
use crate::numerics::DType;
use crate::objective::{LossWeights, Objective};
use crate::optimizer::{AdamWConfig, LrSchedule};
use crate::probe::ProbeConfig;
use crate::transformer::TransformerConfig;

/// Where alignment targets come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetEncoder {
    /// Seeded linear projection of the time-averaged spectrogram.
    #[default]
    Oracle,
    /// Precomputed embedding file, looked up by clip id.
    File,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub dtype: DType,
    /// Directory holding `manifest.tsv`.
    pub corpus_dir: PathBuf,
    pub output_dir: PathBuf,

    pub n_mels: usize,
    pub win_ms: f64,
    pub hop_ms: f64,
    /// Spectrogram frames fed to the model; clips are cropped or padded.
    pub frames: usize,
    /// Standardize inputs with the corpus mean and standard deviation.
    pub normalize_input: bool,

    pub resolutions: Vec<usize>,
    /// Channels per resolution level; empty derives them from `hidden`.
    pub channels: Vec<usize>,
    pub pos_embedding: PosEmbedding,
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub mlp_ratio: usize,

    pub mask_ratio: f64,
    pub mask_block: usize,
    pub mask_placement: BlockPlacement,
    pub clones: usize,
    pub batch_clips: usize,

    pub lambda1: f64,
    pub lambda2: f64,
    /// 1-based transformer layer aligned with the external target.
    pub aligned_layer: usize,
    pub objective: Objective,
    pub normalize_targets: bool,

    pub ema_tau_start: f64,
    pub ema_tau_end: f64,
    pub ema_anneal_steps: u64,
    pub ema_convention: EmaConvention,

    pub lr_peak: f64,
    pub lr_min: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,

    pub target_encoder: TargetEncoder,
    pub target_file: PathBuf,
    pub target_dim: usize,
    pub oracle_seed: u64,

    pub checkpoint_every_steps: u64,

    pub probe_epochs: usize,
    pub probe_lr: f64,
    pub probe_test_fraction: f64,
    pub probe_seed: u64,
}

impl Default for RunConfig {
    /// The tiny configuration: 8x8 input, resolutions {2, 4}, two 16-wide layers.
    fn default() -> Self {
        Self {
            seed: 7,
            dtype: DType::F32,
            corpus_dir: PathBuf::from("corpus"),
            output_dir: PathBuf::from("run"),
            n_mels: 8,
            win_ms: 25.0,
            hop_ms: 40.0,
            frames: 8,
            normalize_input: true,
            resolutions: vec![2, 4],
            channels: Vec::new(),
            pos_embedding: PosEmbedding::Sinusoidal,
            layers: 2,
            hidden: 16,
            heads: 2,
            mlp_ratio: 4,
            mask_ratio: 0.8,
            mask_block: 2,
            mask_placement: BlockPlacement::Valid,
            clones: 4,
            batch_clips: 8,
            lambda1: 1.0,
            lambda2: 1.0,
            aligned_layer: 2,
            objective: Objective::Mse,
            normalize_targets: false,
            ema_tau_start: 0.998,
            ema_tau_end: 0.9999,
            ema_anneal_steps: 30,
            ema_convention: EmaConvention::Decay,
            lr_peak: 2e-3,
            lr_min: 1e-5,
            warmup_steps: 30,
            total_steps: 300,
            beta1: 0.9,
            beta2: 0.95,
            adam_eps: 1e-8,
            weight_decay: 0.05,
            target_encoder: TargetEncoder::Oracle,
            target_file: PathBuf::new(),
            target_dim: 16,
            oracle_seed: 0,
            checkpoint_every_steps: 100,
            probe_epochs: 500,
            probe_lr: 0.5,
            probe_test_fraction: 0.25,
            probe_seed: 0,
        }
    }
}

impl RunConfig {
    /// Wider desk-scale model: 32x32 input (32 mels, 10 ms hop), D = 32.
    /// The default stays the smaller configuration the acceptance checks use.
    pub fn desk() -> Self {
        Self {
            n_mels: 32,
            hop_ms: 10.0,
            frames: 32,
            hidden: 32,
            target_dim: 32,
            ..Self::default()
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self =
            toml::from_str(text).map_err(|e| Error::Config(vec![e.message().to_string()]))?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("flat config always serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn mel(&self) -> MelConfig {
        MelConfig {
            n_mels: self.n_mels,
            win_ms: self.win_ms,
            hop_ms: self.hop_ms,
        }
    }

    pub fn model(&self) -> ModelConfig {
        let channels = if self.channels.is_empty() {
            derived_channels(&self.resolutions, self.hidden)
        } else {
            self.channels.clone()
        };
        ModelConfig {
            multires: MultiResConfig {
                resolutions: self.resolutions.clone(),
                channels,
                input_t: self.frames,
                input_f: self.n_mels,
                pos: self.pos_embedding,
            },
            transformer: TransformerConfig {
                n_layers: self.layers,
                hidden: self.hidden,
                heads: self.heads,
                mlp_ratio: self.mlp_ratio,
            },
            target_dim: self.target_dim,
        }
    }

    pub fn mask(&self) -> MaskSpec {
        MaskSpec {
            ratio: self.mask_ratio,
            block: self.mask_block,
            placement: self.mask_placement,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            aligned_layer: self.aligned_layer,
            objective: self.objective,
        }
    }

    /// Schedule positioned at step 0.
    pub fn ema(&self) -> EmaSchedule {
        EmaSchedule {
            tau_start: self.ema_tau_start,
            tau_end: self.ema_tau_end,
            anneal_steps: self.ema_anneal_steps,
            step: 0,
            convention: self.ema_convention,
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn lr_schedule(&self) -> LrSchedule {
        LrSchedule {
            peak: self.lr_peak,
            min: self.lr_min,
            warmup_steps: self.warmup_steps,
            total_steps: self.total_steps,
        }
    }

    pub fn probe(&self) -> ProbeConfig {
        ProbeConfig {
            epochs: self.probe_epochs,
            lr: self.probe_lr,
            seed: self.probe_seed,
        }
    }

    /// Every cross-field problem, so one run reports all of them at once.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.n_mels == 0 || self.frames == 0 {
            v.push("n_mels and frames must be positive".to_string());
        }
        if !(self.win_ms > 0.0 && self.hop_ms > 0.0) {
            v.push("win_ms and hop_ms must be positive".to_string());
        }
        let model = self.model();
        v.extend(model.violations());
        let (gh, gw) = if model.multires.violations().is_empty() {
            model.multires.grid()
        } else {
            (0, 0)
        };
        let mask = self.mask();
        if !(mask.ratio > 0.0 && mask.ratio < 1.0) {
            v.push(format!("mask_ratio {} is outside (0, 1)", mask.ratio));
        } else if gh > 0 {
            let total = gh * gw;
            let masked = (mask.ratio * total as f64).round() as usize;
            if masked == 0 || masked == total {
                v.push(format!(
                    "mask_ratio {} masks {masked} of {total} patches; need at least one masked and one kept",
                    mask.ratio
                ));
            }
        }
        if self.mask_block == 0 || (gh > 0 && self.mask_block > gh.min(gw)) {
            v.push(format!(
                "mask_block {} does not fit the {gh}x{gw} patch grid",
                self.mask_block
            ));
        }
        if self.clones == 0 || self.batch_clips == 0 {
            v.push("clones and batch_clips must be positive".to_string());
        }
        v.extend(self.loss_weights().violations(self.layers));
        v.extend(self.ema().violations());
        v.extend(self.adamw().violations());
        v.extend(self.lr_schedule().violations());
        if self.target_encoder == TargetEncoder::File && self.target_file.as_os_str().is_empty() {
            v.push("target_encoder = \"file\" needs target_file".to_string());
        }
        if self.checkpoint_every_steps == 0 {
            v.push("checkpoint_every_steps must be positive".to_string());
        }
        if !(self.probe_test_fraction > 0.0 && self.probe_test_fraction < 1.0) {
            v.push(format!(
                "probe_test_fraction {} is outside (0, 1)",
                self.probe_test_fraction
            ));
        }
        if !(self.probe_lr > 0.0) {
            v.push("probe_lr must be positive".to_string());
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }
}
