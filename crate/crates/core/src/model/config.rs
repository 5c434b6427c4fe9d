use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters and ablation switches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Hidden size; must be a multiple of 6.
    pub d_h: usize,
    /// Side length of the square attention windows over the pair grid.
    pub window: usize,
    /// Number of learnable global tokens.
    pub global_tokens: usize,
    /// Refinement rounds.
    pub rounds: usize,
    pub vocab_size: usize,
    pub use_spatial_prefix: bool,
    pub use_gskm: bool,
    pub use_iteration: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_h: 48,
            window: 4,
            global_tokens: 8,
            rounds: 3,
            vocab_size: 512,
            use_spatial_prefix: true,
            use_gskm: true,
            use_iteration: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_h == 0 || self.d_h % 6 != 0 {
            return Err(Error::Config(format!(
                "d_h must be a positive multiple of 6, got {}",
                self.d_h
            )));
        }
        if self.window == 0 || self.global_tokens == 0 || self.rounds == 0 {
            return Err(Error::Config(
                "window, global_tokens and rounds must be at least 1".into(),
            ));
        }
        if self.global_tokens >= self.window * self.window {
            return Err(Error::Config(format!(
                "global_tokens ({}) must be smaller than window^2 ({})",
                self.global_tokens,
                self.window * self.window
            )));
        }
        if self.vocab_size == 0 {
            return Err(Error::Config("vocab_size must be positive".into()));
        }
        Ok(())
    }
}

/// The ablation variants compared by the harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoSpatialPrefix,
    NoGskm,
    NoIteration,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Full,
        Variant::NoSpatialPrefix,
        Variant::NoGskm,
        Variant::NoIteration,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoSpatialPrefix => "w/o spatial-prefix",
            Variant::NoGskm => "w/o GSKM",
            Variant::NoIteration => "w/o iteration",
        }
    }

    /// `base` with only the ablation flags changed.
    pub fn apply(self, base: &ModelConfig) -> ModelConfig {
        let mut cfg = base.clone();
        cfg.use_spatial_prefix = true;
        cfg.use_gskm = true;
        cfg.use_iteration = true;
        match self {
            Variant::Full => {}
            Variant::NoSpatialPrefix => cfg.use_spatial_prefix = false,
            Variant::NoGskm => cfg.use_gskm = false,
            Variant::NoIteration => cfg.use_iteration = false,
        }
        cfg
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        ModelConfig::default().validate().unwrap();
    }

    #[test]
    fn rejects_bad_shapes() {
        let bad = |f: fn(&mut ModelConfig)| {
            let mut c = ModelConfig::default();
            f(&mut c);
            c.validate().is_err()
        };
        assert!(bad(|c| c.d_h = 40));
        assert!(bad(|c| c.window = 0));
        assert!(bad(|c| c.rounds = 0));
        assert!(bad(|c| c.global_tokens = 16));
    }

    #[test]
    fn variants_only_flip_flags() {
        let base = ModelConfig::default();
        for v in Variant::ALL {
            let c = v.apply(&base);
            assert_eq!((c.d_h, c.window, c.rounds), (base.d_h, base.window, base.rounds));
        }
        assert!(!Variant::NoGskm.apply(&base).use_gskm);
        assert!(!Variant::NoIteration.apply(&base).use_iteration);
        assert!(!Variant::NoSpatialPrefix.apply(&base).use_spatial_prefix);
    }
}
