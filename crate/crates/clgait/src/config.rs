use std::path::Path;

use clgait_core::adam::AdamConfig;
use clgait_core::network::NetConfig;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};

/// Pooling used for the contrastive pre-training features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    /// One pair per (sample, part).
    #[default]
    Part,
    /// One pair per sample, spatially averaged features.
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub iterations_pretrain: usize,
    pub iterations_finetune: usize,
    /// Identities per fine-tuning batch.
    pub batch_p: usize,
    /// Sequences per identity in a fine-tuning batch.
    pub batch_k: usize,
    /// Frames drawn from each sequence of a fine-tuning batch.
    pub frames_per_sample: usize,
    /// Frame pairs per pre-training batch.
    pub pretrain_pairs: usize,
    /// Held-out frame pairs used for the alignment metric.
    pub alignment_pairs: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub gamma: f64,
    pub margin: f64,
    pub tau: f64,
    pub parts: usize,
    pub embed_dim: usize,
    pub channels: [usize; 3],
    pub head_depth: usize,
    pub granularity: Granularity,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let net = NetConfig::default();
        let adam = AdamConfig::default();
        Self {
            seed: 0,
            iterations_pretrain: 1000,
            iterations_finetune: 2000,
            batch_p: 8,
            batch_k: 2,
            frames_per_sample: 8,
            pretrain_pairs: 32,
            alignment_pairs: 64,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            gamma: 1.0,
            margin: 0.2,
            tau: 1.0,
            parts: net.parts,
            embed_dim: net.embed_dim,
            channels: net.channels,
            head_depth: net.head_depth,
            granularity: Granularity::Part,
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_p < 2 || self.batch_k < 1 {
            return bad("batch needs P >= 2 identities and K >= 1 sequences");
        }
        if self.frames_per_sample == 0 || self.pretrain_pairs == 0 || self.alignment_pairs == 0 {
            return bad("frame and pair counts must be positive");
        }
        let rates = [self.lr, self.eps, self.tau, self.margin];
        if rates.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return bad("lr, eps, tau and margin must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return bad("gamma must be >= 0");
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every must be positive");
        }
        self.net(0).validate()?;
        Ok(())
    }

    pub fn net(&self, num_classes: usize) -> NetConfig {
        NetConfig {
            input_size: crate::dataset::FRAME_SIZE,
            channels: self.channels,
            parts: self.parts,
            embed_dim: self.embed_dim,
            head_depth: self.head_depth,
            num_classes,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(io_err(path))?;
        serde_json::from_slice(&bytes).map_err(|source| Error::Json { path: path.to_path_buf(), source })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_unknown_keys_are_rejected() {
        TrainConfig::default().validate().unwrap();
        let c: TrainConfig = serde_json::from_str(r#"{"seed": 5, "granularity": "global"}"#).unwrap();
        assert_eq!(c.seed, 5);
        assert_eq!(c.granularity, Granularity::Global);
        assert_eq!(c.iterations_finetune, 2000);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"sede": 5}"#).is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        for c in [
            TrainConfig { batch_p: 1, ..Default::default() },
            TrainConfig { gamma: -1.0, ..Default::default() },
            TrainConfig { lr: 0.0, ..Default::default() },
            TrainConfig { parts: 16, ..Default::default() },
        ] {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }
}
