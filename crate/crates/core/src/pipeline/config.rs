use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::data::{AgeRange, AugmentConfig};
use crate::dgam::{AttentionConfig, EmaState};
use crate::error::{Error, Result};
use crate::optim::AdamConfig;
use crate::roi::LaplacianMode;
use crate::scoring::HeadConfig;

/// How ROIs are assigned to scoring blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GroupingMode {
    /// One block scores every ROI.
    Shared,
    /// One block per anatomy group.
    Anatomy,
    /// A seeded random partition into as many blocks as anatomy groups.
    Random,
}

/// Which stages of the model are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub grouping: GroupingMode,
    pub use_pa: bool,
    pub use_ca: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self::FULL
    }
}

impl Ablation {
    pub const FULL: Ablation = Ablation {
        grouping: GroupingMode::Anatomy,
        use_pa: true,
        use_ca: true,
    };

    /// The six rows of the ablation study, in order.
    pub fn table() -> [Ablation; 6] {
        let row = |grouping, use_pa, use_ca| Ablation {
            grouping,
            use_pa,
            use_ca,
        };
        [
            row(GroupingMode::Shared, false, false),
            row(GroupingMode::Anatomy, false, false),
            row(GroupingMode::Random, false, false),
            row(GroupingMode::Anatomy, true, false),
            row(GroupingMode::Anatomy, false, true),
            row(GroupingMode::Anatomy, true, true),
        ]
    }

    /// Parses `baseline` or a `+`/`,`-separated subset of
    /// `agconv`, `rgconv`, `pa`, `ca`.
    pub fn parse(flags: &str) -> Result<Self> {
        let mut out = Ablation {
            grouping: GroupingMode::Shared,
            use_pa: false,
            use_ca: false,
        };
        let (mut ag, mut rg) = (false, false);
        for token in flags.split([',', '+']).map(str::trim).filter(|t| !t.is_empty()) {
            match token.to_ascii_lowercase().as_str() {
                "baseline" | "none" => {}
                "full" => {
                    ag = true;
                    out.use_pa = true;
                    out.use_ca = true;
                }
                "agconv" | "ag" => ag = true,
                "rgconv" | "rg" => rg = true,
                "pa" => out.use_pa = true,
                "ca" => out.use_ca = true,
                other => return Err(Error::InvalidConfig(format!("unknown ablation flag `{}`", other))),
            }
        }
        out.grouping = match (ag, rg) {
            (true, true) => {
                return Err(Error::InvalidConfig("agconv and rgconv are mutually exclusive".into()));
            }
            (true, false) => GroupingMode::Anatomy,
            (false, true) => GroupingMode::Random,
            (false, false) => GroupingMode::Shared,
        };
        Ok(out)
    }

    pub fn label(&self) -> String {
        let mut parts: Vec<&str> = Vec::new();
        match self.grouping {
            GroupingMode::Shared => parts.push("baseline (shared block)"),
            GroupingMode::Anatomy => parts.push("AG-Conv"),
            GroupingMode::Random => parts.push("RG-Conv"),
        }
        if self.use_pa {
            parts.push("PA");
        }
        if self.use_ca {
            parts.push("CA");
        }
        parts.join(" + ")
    }

    /// The canonical flag string accepted by [`Ablation::parse`].
    pub fn flags(&self) -> String {
        let mut parts = vec![match self.grouping {
            GroupingMode::Shared => "baseline",
            GroupingMode::Anatomy => "agconv",
            GroupingMode::Random => "rgconv",
        }];
        if self.use_pa {
            parts.push("pa");
        }
        if self.use_ca {
            parts.push("ca");
        }
        parts.join("+")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub head: HeadConfig,
    pub attention: AttentionConfig,
    pub laplacian: LaplacianMode,
    pub ema_theta: f64,
    pub ablation: Ablation,
    /// Seed for parameter initialization and the random grouping.
    pub seed: u64,
    pub age_unit: String,
    pub ages: AgeRange,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            head: HeadConfig::default(),
            attention: AttentionConfig::default(),
            laplacian: LaplacianMode::Symmetric,
            ema_theta: EmaState::DEFAULT_THETA,
            ablation: Ablation::FULL,
            seed: 0,
            age_unit: "months".to_string(),
            ages: AgeRange::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if !(self.ema_theta > 0.0 && self.ema_theta <= 1.0) {
            return Err(Error::InvalidConfig(format!("EMA theta {} not in (0, 1]", self.ema_theta)));
        }
        if !(self.ages.min < self.ages.max) {
            return Err(Error::InvalidConfig("empty age range".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Epochs at which the learning rate is multiplied by `lr_decay`.
    pub milestones: Vec<usize>,
    pub lr_decay: f64,
    pub adam: AdamConfig,
    pub seed: u64,
    pub augment: bool,
    pub augmentation: AugmentConfig,
    /// Share of a single dataset held out for validation.
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 48,
            lr: 1e-3,
            milestones: vec![60, 120],
            lr_decay: 0.1,
            adam: AdamConfig::default(),
            seed: 0,
            augment: false,
            augmentation: AugmentConfig::default(),
            val_fraction: 0.2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig("batch size must be at least 2 for batch norm".into()));
        }
        if let Some(m) = self.milestones.iter().find(|&&m| m >= self.epochs) {
            return Err(Error::InvalidConfig(format!(
                "decay epoch {} is not below the {} training epochs",
                m, self.epochs
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig("learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::InvalidConfig("validation fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Milestones scaled to a different epoch budget, keeping their relative
    /// position (60 and 120 of 200 become 18 and 36 of 60).
    pub fn rescaled_milestones(&self, epochs: usize) -> Vec<usize> {
        let base = TrainConfig::default();
        base.milestones
            .iter()
            .map(|&m| m * epochs / base.epochs)
            .filter(|&m| m > 0 && m < epochs)
            .collect()
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| epoch >= m).count();
        let mut lr = self.lr;
        for _ in 0..passed {
            lr *= self.lr_decay;
        }
        lr
    }
}
