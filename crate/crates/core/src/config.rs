//! Model and training configuration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How event order is exposed to the encoder's attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PositionMode {
    /// Learned per-position embedding added to the input.
    Absolute,
    /// Learned scalar per signed relative offset, added to attention logits.
    Directional,
    /// Signed relative offset conditioned on the query row's content.
    ContextualDirectional,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Hidden size. Must be divisible by `heads`.
    pub d: usize,
    pub heads: usize,
    pub enc_blocks: usize,
    /// Attention blocks per decoder module.
    pub dec_blocks: usize,
    /// Number of refinement stages after the initial decode.
    pub k: usize,
    /// Confidence quantization bucket count.
    pub buckets: usize,
    /// Sentence length cap, terminator included.
    pub l_max: usize,
    /// Event-count capacity.
    pub n_max: usize,
    pub vocab_size: usize,
    /// Raw event-feature width; projected to `d` inside the encoder.
    pub d_raw: usize,
    pub pos_mode: PositionMode,
    /// Bucketed relative-confidence bias in refinement attention.
    pub confidence_bias: bool,
    /// Hypothesis-reconstruction auxiliary objective.
    pub aux_loss: bool,
    /// Hard (`-inf`) masking of the explanation key column; the soft variant
    /// zeroes the pre-softmax logit instead and lets information leak.
    pub hard_mask: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 64,
            heads: 4,
            enc_blocks: 2,
            dec_blocks: 2,
            k: 3,
            buckets: 10,
            l_max: 20,
            n_max: 8,
            vocab_size: 200,
            d_raw: 16,
            pos_mode: PositionMode::ContextualDirectional,
            confidence_bias: true,
            aux_loss: true,
            hard_mask: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::config(format!(
                "hidden size {} must be a positive multiple of head count {}",
                self.d, self.heads
            )));
        }
        if self.buckets < 1 {
            return Err(Error::config("bucket count must be at least 1"));
        }
        if self.vocab_size < 4 {
            return Err(Error::config(
                "vocabulary must hold the three special tokens plus at least one word",
            ));
        }
        if self.n_max < 2 || self.l_max < 2 {
            return Err(Error::config("n_max and l_max must be at least 2"));
        }
        if self.enc_blocks == 0 || self.dec_blocks == 0 {
            return Err(Error::config("block counts must be positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// Auxiliary-loss coefficient.
    pub aux_weight: f64,
    /// Momentum-encoder decay.
    pub momentum: f64,
    /// Scheduled-sampling plateau probability.
    pub ss_max: f64,
    /// Fraction of total steps over which the sampling probability ramps.
    pub ss_ramp_frac: f64,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            grad_clip: 5.0,
            steps: 2000,
            batch_size: 8,
            aux_weight: 0.2,
            momentum: 0.995,
            ss_max: 0.25,
            ss_ramp_frac: 0.25,
            seed: 0,
            log_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.aux_weight < 0.0 {
            return Err(Error::config("aux_weight must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.ss_max) {
            return Err(Error::config("ss_max must lie in [0, 1]"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if self.lr < 0.0 {
            return Err(Error::config("learning rate must be non-negative"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_configs_validate() {
        ModelConfig::default().validate().unwrap();
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut m = ModelConfig::default();
        m.d = 30; // not divisible by 4 heads
        assert!(m.validate().is_err());
        let mut t = TrainConfig::default();
        t.momentum = 1.0;
        assert!(t.validate().is_err());
        t = TrainConfig::default();
        t.aux_weight = -0.1;
        assert!(t.validate().is_err());
    }
}
