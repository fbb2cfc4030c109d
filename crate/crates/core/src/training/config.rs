use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// E and M phases alternate; only one branch moves per epoch.
    Alternating,
    /// Both branches step every epoch from each other's live pseudo-labels.
    Joint,
}

/// A run of epochs sharing one alternation cycle length and learning-rate
/// multiplier.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub epochs: usize,
    /// Epochs per phase before switching between E and M.
    pub cycle: usize,
    pub lr_multiplier: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub gamma: f64,
    pub epochs: usize,
    pub stages: Vec<Stage>,
    pub seed: u64,
    pub classifier_hidden: Vec<usize>,
    pub assigner_hidden: Vec<usize>,
    pub mode: TrainMode,
    /// Label every clip of a positive bag as a key instance during the first
    /// E phase instead of thresholding the untrained classifier.
    pub warm_start: bool,
}

impl Default for TrainConfig {
    /// 30 epochs alternating every 10, then 35 epochs alternating every epoch
    /// at four times the learning rate.
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            gamma: 0.15,
            epochs: 65,
            stages: vec![
                Stage {
                    epochs: 30,
                    cycle: 10,
                    lr_multiplier: 1.0,
                },
                Stage {
                    epochs: 35,
                    cycle: 1,
                    lr_multiplier: 4.0,
                },
            ],
            seed: 0,
            classifier_hidden: vec![64],
            assigner_hidden: vec![64],
            mode: TrainMode::Alternating,
            warm_start: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    E,
    M,
    Joint,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::E => "E",
            Phase::M => "M",
            Phase::Joint => "J",
        }
    }
}

/// What one epoch of the schedule does.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochPlan {
    pub phase: Phase,
    pub learning_rate: f64,
    pub warm_start: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.stages.is_empty() {
            return Err(Error::Config("at least one stage is required".into()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.epochs == 0 || s.cycle == 0 {
                return Err(Error::Config(format!(
                    "stage {i}: epochs and cycle must be at least 1"
                )));
            }
            if !(s.lr_multiplier > 0.0 && s.lr_multiplier.is_finite()) {
                return Err(Error::Config(format!(
                    "stage {i}: lr_multiplier must be positive"
                )));
            }
        }
        let covered: usize = self.stages.iter().map(|s| s.epochs).sum();
        if covered != self.epochs {
            return Err(Error::Config(format!(
                "stages cover {covered} epochs but epochs = {}",
                self.epochs
            )));
        }
        if self.classifier_hidden.contains(&0) || self.assigner_hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        Ok(())
    }

    /// Expands the stages into one plan entry per epoch.
    ///
    /// Alternation is continuous across stage boundaries: the phase flips
    /// every `cycle` epochs of the current stage, starting with E.
    pub fn epoch_plan(&self) -> Result<Vec<EpochPlan>> {
        self.validate()?;
        let mut plan = Vec::with_capacity(self.epochs);
        let mut phase = Phase::E;
        let mut seen_m = false;
        for (si, stage) in self.stages.iter().enumerate() {
            let lr = self.learning_rate * stage.lr_multiplier;
            for e in 0..stage.epochs {
                if e > 0 && e % stage.cycle == 0 {
                    phase = flip(phase);
                }
                match self.mode {
                    TrainMode::Alternating => {
                        seen_m |= phase == Phase::M;
                        plan.push(EpochPlan {
                            phase,
                            learning_rate: lr,
                            warm_start: self.warm_start && !seen_m,
                        });
                    }
                    TrainMode::Joint => plan.push(EpochPlan {
                        phase: Phase::Joint,
                        learning_rate: lr,
                        warm_start: self.warm_start && si == 0 && e < stage.cycle,
                    }),
                }
            }
            // next stage starts with the other phase
            phase = flip(phase);
        }
        Ok(plan)
    }
}

fn flip(p: Phase) -> Phase {
    match p {
        Phase::E => Phase::M,
        _ => Phase::E,
    }
}
