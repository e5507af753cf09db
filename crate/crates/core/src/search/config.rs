use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::ModelConfig;
use crate::metrics::SelectionConfig;
use crate::pruning::DEFAULT_M;

pub const MIB: usize = 1 << 20;

/// Everything that shapes one search run besides the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub reductions: usize,
    pub init_channels: usize,
    /// Analytic memory cap in bytes.
    pub vram_budget: usize,
    pub cycles: usize,
    pub mutations_per_cycle: usize,
    pub epochs_per_cycle: usize,
    pub train_epochs: usize,
    pub selection: SelectionConfig,
    pub batch_size: usize,
    pub base_lr: f64,
    pub dropout: f64,
    pub pruner_m: f64,
    pub seed: u64,
}

impl SearchConfig {
    pub fn new(reductions: usize, init_channels: usize) -> Self {
        SearchConfig {
            reductions,
            init_channels,
            vram_budget: 512 * MIB,
            cycles: 15,
            mutations_per_cycle: 3,
            epochs_per_cycle: 4,
            train_epochs: 600,
            selection: SelectionConfig::default(),
            batch_size: 64,
            base_lr: 0.01,
            dropout: 0.2,
            pruner_m: DEFAULT_M,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("reductions", self.reductions),
            ("init_channels", self.init_channels),
            ("cycles", self.cycles),
            ("epochs_per_cycle", self.epochs_per_cycle),
            ("train_epochs", self.train_epochs),
            ("batch_size", self.batch_size),
            ("n_good", self.selection.n_good),
            ("probe_size", self.selection.probe_size),
            ("lrc_samples", self.selection.lrc_samples),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.selection.probe_size < 2 {
            return Err(Error::Config("probe_size must be at least 2".into()));
        }
        if !(self.base_lr > 0.0) || !(0.0..1.0).contains(&self.dropout) || !(self.pruner_m > 0.0) {
            return Err(Error::Config("base_lr, dropout or pruner_m out of range".into()));
        }
        Ok(())
    }

    pub fn model_config(&self, in_channels: usize, image_size: usize, classes: usize) -> ModelConfig {
        ModelConfig {
            reductions: self.reductions,
            init_channels: self.init_channels,
            in_channels,
            image_size,
            classes,
            dropout: self.dropout,
            pruner_m: self.pruner_m,
        }
    }
}
