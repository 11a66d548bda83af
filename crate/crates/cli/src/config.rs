//! Training run description, read from a TOML file. Everything except the
//! data directory and checkpoint path has a sensible small-scale default.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Deserialize;
use stfx_core::encoder::ChunkConfig;
use stfx_core::model::ModelConfig;
use stfx_core::training::TrainConfig;

use crate::formats::VOCAB;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSpec {
    pub data_dir: PathBuf,
    pub checkpoint: PathBuf,
    /// Per-epoch records are appended here as plain text lines.
    pub metrics: Option<PathBuf>,
    /// Final utterances excluded from training, left for evaluation.
    #[serde(default)]
    pub holdout: usize,

    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_alpha")]
    pub alpha: f64,
    #[serde(default = "d_label_smoothing")]
    pub label_smoothing: f64,
    #[serde(default = "d_dropout")]
    pub dropout: f64,
    #[serde(default = "d_true")]
    pub mta_noise: bool,
    #[serde(default = "d_warmup_steps")]
    pub warmup_steps: usize,
    #[serde(default = "d_lr_scale")]
    pub lr_scale: f64,
    #[serde(default = "d_average_last")]
    pub average_last: usize,

    #[serde(default = "d_feat_dim")]
    pub feat_dim: usize,
    #[serde(default = "d_d_model")]
    pub d_model: usize,
    #[serde(default = "d_heads")]
    pub heads: usize,
    #[serde(default = "d_d_ff")]
    pub d_ff: usize,
    #[serde(default = "d_enc_layers")]
    pub enc_layers: usize,
    #[serde(default = "d_dec_layers")]
    pub dec_layers: usize,
    #[serde(default = "d_conv_channels")]
    pub conv_channels: usize,
    #[serde(default = "d_conv_kernel")]
    pub conv_kernel: usize,
    #[serde(default = "d_chunk")]
    pub chunk_history: usize,
    #[serde(default = "d_chunk")]
    pub chunk_central: usize,
    #[serde(default = "d_chunk")]
    pub chunk_future: usize,
}

fn d_epochs() -> usize {
    10
}
fn d_batch_size() -> usize {
    4
}
fn d_alpha() -> f64 {
    0.7
}
fn d_label_smoothing() -> f64 {
    0.1
}
fn d_dropout() -> f64 {
    0.1
}
fn d_true() -> bool {
    true
}
fn d_warmup_steps() -> usize {
    200
}
fn d_lr_scale() -> f64 {
    1.0
}
fn d_average_last() -> usize {
    5
}
fn d_feat_dim() -> usize {
    crate::synth::FEAT_DIM
}
fn d_d_model() -> usize {
    32
}
fn d_heads() -> usize {
    2
}
fn d_d_ff() -> usize {
    64
}
fn d_enc_layers() -> usize {
    2
}
fn d_dec_layers() -> usize {
    2
}
fn d_conv_channels() -> usize {
    4
}
fn d_conv_kernel() -> usize {
    3
}
fn d_chunk() -> usize {
    16
}

impl TrainSpec {
    pub fn load(path: &Path) -> Result<TrainSpec> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))?;
        // TOML errors carry line and column positions.
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        Ok(ModelConfig {
            vocab: VOCAB,
            feat_dim: self.feat_dim,
            d_model: self.d_model,
            heads: self.heads,
            d_ff: self.d_ff,
            enc_layers: self.enc_layers,
            dec_layers: self.dec_layers,
            conv_channels: self.conv_channels,
            conv_kernel: self.conv_kernel,
            chunk: ChunkConfig::new(self.chunk_history, self.chunk_central, self.chunk_future)?,
        })
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            alpha: self.alpha,
            label_smoothing: self.label_smoothing,
            dropout: self.dropout,
            mta_noise: self.mta_noise,
            warmup_steps: self.warmup_steps,
            lr_scale: self.lr_scale,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            average_last: self.average_last,
        }
    }
}
