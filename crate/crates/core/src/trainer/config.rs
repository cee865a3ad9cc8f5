use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;

use super::TrainError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Slimipl,
    SupervisedOnly,
    NaiveNoCache,
    EmaCache,
    EmaNoCache,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Slimipl,
        Variant::SupervisedOnly,
        Variant::NaiveNoCache,
        Variant::EmaCache,
        Variant::EmaNoCache,
    ];

    pub fn uses_cache(self) -> bool {
        matches!(self, Variant::Slimipl | Variant::EmaCache)
    }

    pub fn uses_ema(self) -> bool {
        matches!(self, Variant::EmaCache | Variant::EmaNoCache)
    }

    pub fn uses_unlabeled(self) -> bool {
        self != Variant::SupervisedOnly
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Slimipl => "slimipl",
            Variant::SupervisedOnly => "supervised_only",
            Variant::NaiveNoCache => "naive_no_cache",
            Variant::EmaCache => "ema_cache",
            Variant::EmaNoCache => "ema_no_cache",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown variant {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DropoutSchedule {
    pub initial: f64,
    /// Applied once the fill phase ends (or at M without a cache).
    pub after_pretrain: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Evaluations without improvement before the learning rate halves.
    #[serde(default = "default_patience")]
    pub patience: u32,
    #[serde(default = "default_min_delta")]
    pub min_delta: f64,
    /// Training stops once the learning rate has been halved this often.
    #[serde(default = "default_max_halvings")]
    pub max_halvings: u32,
}

fn default_eps() -> f64 {
    1e-8
}

fn default_patience() -> u32 {
    3
}

fn default_min_delta() -> f64 {
    1e-4
}

fn default_max_halvings() -> u32 {
    5
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DivergenceConfig {
    #[serde(default = "default_empty_fraction")]
    pub empty_fraction: f64,
    /// Absolute dev TER rise over the best so far.
    #[serde(default = "default_ter_regression")]
    pub ter_regression: f64,
    /// Consecutive evaluations the rise must persist.
    #[serde(default = "default_window")]
    pub window: usize,
}

fn default_empty_fraction() -> f64 {
    0.9
}

fn default_ter_regression() -> f64 {
    0.15
}

fn default_window() -> usize {
    3
}

impl Default for DivergenceConfig {
    fn default() -> Self {
        Self {
            empty_fraction: default_empty_fraction(),
            ter_regression: default_ter_regression(),
            window: default_window(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    /// M: supervised updates before pseudo-labeling starts. With
    /// `auto_pretrain` this is an upper bound and pretraining ends at the
    /// first dev plateau.
    pub pretrain_updates: u64,
    #[serde(default)]
    pub auto_pretrain: bool,
    /// C, counted in batches.
    pub cache_size: usize,
    /// p.
    pub replace_prob: f64,
    /// N_L.
    pub labeled_updates: u64,
    /// N_U.
    pub unlabeled_updates: u64,
    pub dropout: DropoutSchedule,
    #[serde(default = "default_ema_decay")]
    pub ema_decay: f64,
    pub batch_size: usize,
    pub max_updates: u64,
    pub eval_every: u64,
    pub seed: u64,
    #[serde(default)]
    pub filter_empty_pls: bool,
    pub augment: AugmentConfig,
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub divergence: DivergenceConfig,
}

fn default_ema_decay() -> f64 {
    0.999
}

impl TrainConfig {
    /// Desk-scale defaults for the synthetic task.
    pub fn desk(variant: Variant) -> Self {
        Self {
            variant,
            pretrain_updates: 1500,
            auto_pretrain: false,
            cache_size: 100,
            replace_prob: 0.5,
            labeled_updates: 1,
            unlabeled_updates: 3,
            dropout: DropoutSchedule {
                initial: 0.3,
                after_pretrain: 0.1,
            },
            ema_decay: 0.99,
            batch_size: 8,
            max_updates: 10_000,
            eval_every: 100,
            seed: 0,
            filter_empty_pls: false,
            augment: AugmentConfig::synthetic(),
            optimizer: OptimizerConfig {
                lr: 0.05,
                eps: default_eps(),
                patience: 6,
                min_delta: default_min_delta(),
                max_halvings: default_max_halvings(),
            },
            divergence: DivergenceConfig::default(),
        }
    }

    /// 10 h labeled setting: C=1000, p=0.1, ten unlabeled updates per
    /// labeled one, dropout 0.5 then 0.1.
    pub fn low_resource(variant: Variant) -> Self {
        Self {
            cache_size: 1000,
            replace_prob: 0.1,
            labeled_updates: 1,
            unlabeled_updates: 10,
            dropout: DropoutSchedule {
                initial: 0.5,
                after_pretrain: 0.1,
            },
            pretrain_updates: 20_000,
            augment: AugmentConfig::librispeech_low_resource(),
            ..Self::desk(variant)
        }
    }

    /// 100 h labeled setting: C=100, p=0.1, one unlabeled update per labeled
    /// one, dropout 0.3 then 0.1.
    pub fn mid_resource(variant: Variant) -> Self {
        Self {
            cache_size: 100,
            replace_prob: 0.1,
            labeled_updates: 1,
            unlabeled_updates: 1,
            dropout: DropoutSchedule {
                initial: 0.3,
                after_pretrain: 0.1,
            },
            pretrain_updates: 20_000,
            augment: AugmentConfig::librispeech(),
            ..Self::desk(variant)
        }
    }

    /// λ = N_U / N_L.
    pub fn lambda(&self) -> f64 {
        self.unlabeled_updates as f64 / self.labeled_updates as f64
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.labeled_updates == 0 {
            return bad("labeled_updates (N_L) must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.replace_prob) {
            return bad(format!("replace_prob {} is outside [0, 1]", self.replace_prob));
        }
        if self.variant.uses_cache() && self.cache_size == 0 {
            return bad("cache_size must be at least 1".into());
        }
        for (name, rate) in [("initial", self.dropout.initial), ("after_pretrain", self.dropout.after_pretrain)] {
            if !(0.0..1.0).contains(&rate) {
                return bad(format!("dropout.{name} {rate} is outside [0, 1)"));
            }
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad(format!("ema_decay {} is outside [0, 1)", self.ema_decay));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.eval_every == 0 {
            return bad("eval_every must be at least 1".into());
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) || !(o.eps >= 0.0) || !(o.min_delta >= 0.0) {
            return bad("optimizer needs lr > 0, eps >= 0 and min_delta >= 0".into());
        }
        if o.patience == 0 {
            return bad("optimizer.patience must be at least 1".into());
        }
        let d = &self.divergence;
        if d.window == 0 || !(0.0..=1.0).contains(&d.empty_fraction) || !(d.ter_regression >= 0.0) {
            return bad("divergence needs window >= 1, empty_fraction in [0, 1], ter_regression >= 0".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_carry_published_hyperparameters() {
        let low = TrainConfig::low_resource(Variant::Slimipl);
        assert_eq!((low.cache_size, low.replace_prob), (1000, 0.1));
        assert_eq!(low.lambda(), 10.0);
        assert_eq!((low.dropout.initial, low.dropout.after_pretrain), (0.5, 0.1));
        let mid = TrainConfig::mid_resource(Variant::Slimipl);
        assert_eq!((mid.cache_size, mid.replace_prob), (100, 0.1));
        assert_eq!(mid.lambda(), 1.0);
        assert_eq!((mid.dropout.initial, mid.dropout.after_pretrain), (0.3, 0.1));
        for cfg in [low, mid, TrainConfig::desk(Variant::Slimipl)] {
            cfg.validate().unwrap();
        }
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("slim".parse::<Variant>().is_err());
    }

    #[test]
    fn invalid_settings_are_named() {
        let mut cfg = TrainConfig::desk(Variant::Slimipl);
        cfg.labeled_updates = 0;
        assert!(cfg.validate().unwrap_err().to_string().contains("N_L"));
        let mut cfg = TrainConfig::desk(Variant::Slimipl);
        cfg.replace_prob = 1.5;
        assert!(cfg.validate().unwrap_err().to_string().contains("replace_prob"));
    }
}
