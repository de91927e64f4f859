use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How encoder layers are grouped into jointly optimized units.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UnitGranularity {
    PerLayer,
    #[default]
    PerStage,
}

/// Loss used for encoder (and neck) units. Decoder units always use the
/// local objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    /// Hybrid image tokens after the prompt interaction.
    #[default]
    Par,
    /// The unit's own output.
    Local,
}

/// Module that forms hybrid tokens from image tokens during PAR.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InteractionPath {
    /// The mask decoder's two-way blocks at full precision.
    #[default]
    TwoWay,
    /// No interaction: hybrid tokens are the neck output.
    Identity,
}

macro_rules! kebab_enum {
    ($t:ty, $($v:ident => $s:literal),+) => {
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $(Self::$v => $s),+ })
            }
        }

        impl FromStr for $t {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok(Self::$v),)+
                    _ => Err(Error::Config(format!("unknown {} `{s}`", stringify!($t)))),
                }
            }
        }
    };
}

kebab_enum!(UnitGranularity, PerLayer => "per-layer", PerStage => "per-stage");
kebab_enum!(Objective, Par => "par", Local => "local");
kebab_enum!(InteractionPath, TwoWay => "two-way", Identity => "identity");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconConfig {
    pub granularity: UnitGranularity,
    pub objective: Objective,
    pub interaction: InteractionPath,
    /// Full-budget iterations per unit.
    pub iterations: usize,
    /// Full-budget iterations of the final token-to-image attention unit.
    pub final_iterations: usize,
    /// Multiplier on both iteration counts.
    pub budget: f64,
    pub lr_bounds: f64,
    pub lr_alpha: f64,
    /// Probability of skipping activation fake-quant per element.
    pub drop_prob: f64,
    pub reg_weight: f64,
    /// Fraction of iterations before the rounding regularizer switches on.
    pub warmup: f64,
    pub beta_start: f64,
    pub beta_end: f64,
    pub batch_size: usize,
    /// Number of best-parameter checkpoints spread over a unit's run.
    pub checkpoints: usize,
    pub seed: u64,
}

impl Default for ReconConfig {
    fn default() -> Self {
        Self {
            granularity: UnitGranularity::PerStage,
            objective: Objective::Par,
            interaction: InteractionPath::TwoWay,
            iterations: 2000,
            final_iterations: 10_000,
            budget: 0.1,
            lr_bounds: 4e-5,
            lr_alpha: 1e-3,
            drop_prob: 0.5,
            reg_weight: 0.01,
            warmup: 0.2,
            beta_start: 20.0,
            beta_end: 2.0,
            batch_size: 1,
            checkpoints: 10,
            seed: 0,
        }
    }
}

impl ReconConfig {
    /// The unscaled iteration counts.
    pub fn full_budget(mut self) -> Self {
        self.budget = 1.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.iterations == 0 || self.final_iterations == 0 {
            return bad("iterations must be positive".into());
        }
        if !(self.budget > 0.0 && self.budget.is_finite()) {
            return bad(format!("iteration budget {}", self.budget));
        }
        if !(0.0..=1.0).contains(&self.drop_prob) {
            return bad(format!("drop probability {} outside [0, 1]", self.drop_prob));
        }
        if !(0.0..1.0).contains(&self.warmup) {
            return bad(format!("warm-up fraction {}", self.warmup));
        }
        if !(self.lr_bounds >= 0.0 && self.lr_alpha >= 0.0 && self.reg_weight >= 0.0) {
            return bad("learning rates and regularizer weight must be nonnegative".into());
        }
        if self.batch_size == 0 || self.checkpoints == 0 {
            return bad("batch size and checkpoint count must be positive".into());
        }
        Ok(())
    }

    /// Scaled iteration count of a unit, at least 1.
    pub fn unit_iterations(&self, is_final: bool) -> usize {
        let base = if is_final { self.final_iterations } else { self.iterations };
        ((base as f64 * self.budget).round() as usize).max(1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn budget_scaling() {
        let c = ReconConfig::default();
        assert_eq!((c.unit_iterations(false), c.unit_iterations(true)), (200, 1000));
        let f = c.full_budget();
        assert_eq!((f.unit_iterations(false), f.unit_iterations(true)), (2000, 10_000));
    }

    #[test]
    fn rejects_bad_probability() {
        let c = ReconConfig { drop_prob: 1.5, ..Default::default() };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        assert_eq!("per-layer".parse::<UnitGranularity>().unwrap(), UnitGranularity::PerLayer);
        assert!("blockwise".parse::<Objective>().is_err());
    }
}
