//! JSON run configuration shared by every subcommand.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use hgd::efficientfcn::{BackboneConfig, SegConfig, TrainConfig};
use hgd::fpn::FpnConfig;
use hgd::hgd::HgdConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Seg,
    Fpn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HgdSection {
    pub n: usize,
    pub codeword_dim: usize,
    pub compressed: usize,
    pub guidance: usize,
    pub transfer: bool,
}

impl Default for HgdSection {
    fn default() -> Self {
        Self {
            n: 256,
            codeword_dim: 32,
            compressed: 16,
            guidance: 32,
            transfer: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FpnSection {
    pub n: usize,
    pub c: usize,
    pub k: usize,
    pub share_params: bool,
}

impl Default for FpnSection {
    fn default() -> Self {
        Self {
            n: 128,
            c: 512,
            k: 4,
            share_params: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub base_lr: f64,
    pub power: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub max_iter: usize,
    pub batch: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            base_lr: 0.02,
            power: 0.9,
            momentum: 0.9,
            weight_decay: 1e-4,
            max_iter: 500,
            batch: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    pub seed: u64,
    /// Square input extent; for pyramids, the finest level is a quarter of it.
    pub input_size: usize,
    pub num_classes: usize,
    pub hgd: HgdSection,
    pub fpn: FpnSection,
    pub train: TrainSection,
    pub precision: Precision,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: Task::Seg,
            seed: 0,
            input_size: 64,
            num_classes: 5,
            hgd: HgdSection::default(),
            fpn: FpnSection::default(),
            train: TrainSection::default(),
            precision: Precision::F64,
        }
    }
}

/// Synthetic images in the segmentation demo.
pub const TRAIN_IMAGES: usize = 32;

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn seg(&self) -> SegConfig {
        SegConfig {
            backbone: BackboneConfig::default(),
            hgd: HgdConfig {
                n_codewords: self.hgd.n,
                codeword_dim: self.hgd.codeword_dim,
                compressed_channels: self.hgd.compressed,
                guidance_channels: self.hgd.guidance,
                transfer_enabled: self.hgd.transfer,
                ..HgdConfig::default()
            },
            num_classes: self.num_classes,
        }
    }

    pub fn fpn(&self) -> FpnConfig {
        FpnConfig {
            n_codewords: self.fpn.n,
            codeword_dim: self.fpn.c,
            guidance_channels: self.fpn.c,
            k_recurrence: self.fpn.k,
            share_params: self.fpn.share_params,
            ..FpnConfig::default()
        }
    }

    pub fn train(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            base_lr: t.base_lr,
            power: t.power,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            max_iter: t.max_iter,
            batch: t.batch,
            seed: self.seed,
        }
    }

    /// Rejects values no subcommand can run with.
    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.input_size % 32 != 0 {
            bail!("input_size must be a positive multiple of 32, got {}", self.input_size);
        }
        self.seg().validate()?;
        self.fpn().validate()?;
        self.train().validate()?;
        Ok(())
    }
}
