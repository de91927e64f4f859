//! Experiment configuration, read from TOML with unknown keys rejected.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use promptq_core::calib::{CalibPolicy, GridConfig, MaxScope, Metric};
use promptq_core::model::ModelConfig;
use promptq_core::recon::{Objective, ReconConfig};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};
use crate::inject::OutlierSpec;

/// Weight and activation bit-widths, written `W6A6`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct BitPair {
    pub weights: u32,
    pub acts: u32,
}

impl BitPair {
    pub const fn new(weights: u32, acts: u32) -> Self {
        Self { weights, acts }
    }

    pub const STANDARD: [BitPair; 3] = [BitPair::new(8, 8), BitPair::new(6, 6), BitPair::new(4, 4)];
}

impl fmt::Display for BitPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "W{}A{}", self.weights, self.acts)
    }
}

impl FromStr for BitPair {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || HarnessError::Config(format!("bit pair {s:?} is not of the form WxAy"));
        let rest = s.strip_prefix(['W', 'w']).ok_or_else(bad)?;
        let (w, a) = rest.split_once(['A', 'a']).ok_or_else(bad)?;
        let pair = BitPair::new(w.parse().map_err(|_| bad())?, a.parse().map_err(|_| bad())?);
        if !(2..=16).contains(&pair.weights) || !(2..=16).contains(&pair.acts) {
            return Err(HarnessError::Config(format!("bit pair {s} outside 2..=16 bits")));
        }
        Ok(pair)
    }
}

impl TryFrom<String> for BitPair {
    type Error = HarnessError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<BitPair> for String {
    fn from(b: BitPair) -> Self {
        b.to_string()
    }
}

/// Reconstruction applied after calibration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReconMode {
    None,
    /// Unit-output matching with dropped activation quantization.
    Local,
    /// Prompt-aware: hybrid-token matching.
    Par,
}

impl ReconMode {
    pub fn objective(self) -> Option<Objective> {
        match self {
            ReconMode::None => None,
            ReconMode::Local => Some(Objective::Local),
            ReconMode::Par => Some(Objective::Par),
        }
    }
}

impl fmt::Display for ReconMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReconMode::None => "none",
            ReconMode::Local => "local",
            ReconMode::Par => "par",
        })
    }
}

impl FromStr for ReconMode {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(ReconMode::None),
            "local" => Ok(ReconMode::Local),
            "par" => Ok(ReconMode::Par),
            _ => Err(HarnessError::Config(format!("unknown reconstruction mode {s:?}"))),
        }
    }
}

/// Calibration knobs shared by every method. The per-tensor metric rules
/// follow from the run's method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibSettings {
    pub theta: f64,
    pub max_scope: MaxScope,
    pub grid: GridConfig,
    pub pcc_sweeps: usize,
    pub pcc_samples: usize,
    pub mse_samples: Option<usize>,
    pub symmetric: bool,
}

impl Default for CalibSettings {
    fn default() -> Self {
        let p = CalibPolicy::default();
        Self {
            theta: p.theta,
            max_scope: p.max_scope,
            grid: p.grid,
            pcc_sweeps: p.pcc_sweeps,
            pcc_samples: p.pcc_samples,
            mse_samples: p.mse_samples,
            symmetric: p.symmetric,
        }
    }
}

impl CalibSettings {
    pub fn policy(&self, method: Metric, bits: BitPair, theta: f64) -> CalibPolicy {
        CalibPolicy {
            theta,
            max_scope: self.max_scope,
            grid: self.grid.clone(),
            pcc_sweeps: self.pcc_sweeps,
            pcc_samples: self.pcc_samples,
            mse_samples: self.mse_samples,
            symmetric: self.symmetric,
            ..CalibPolicy::for_method(method, bits.weights, bits.acts)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Architecture; its `seed` is replaced per run by the `model`
    /// substream of the run seed.
    pub model: ModelConfig,
    /// `None` runs on the unmodified model.
    pub outliers: Option<OutlierSpec>,
    pub seeds: Vec<u64>,
    pub bits: Vec<BitPair>,
    pub methods: Vec<Metric>,
    pub recon_modes: Vec<ReconMode>,
    pub calib: CalibSettings,
    /// Objective and granularity are overridden per run.
    pub recon: ReconConfig,
    /// Values visited by the focus-threshold sweep.
    pub thetas: Vec<f64>,
    pub n_calib: usize,
    pub n_eval: usize,
    /// Worker threads across seeds; 0 uses every core.
    pub workers: usize,
    pub output: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            outliers: Some(OutlierSpec::default()),
            seeds: vec![0, 1, 2, 3, 4],
            bits: BitPair::STANDARD.to_vec(),
            methods: vec![Metric::Minmax, Metric::Mse, Metric::Pcc],
            recon_modes: vec![ReconMode::None],
            calib: CalibSettings::default(),
            recon: ReconConfig::default(),
            thetas: (3..=9).map(|i| i as f64 / 10.0).collect(),
            n_calib: 32,
            n_eval: 16,
            workers: 0,
            output: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            HarnessError::Config(m) => HarnessError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| HarnessError::Serialize(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(HarnessError::Config(m.into()));
        if self.seeds.is_empty() {
            return bad("at least one seed is required");
        }
        if self.bits.is_empty() || self.methods.is_empty() || self.recon_modes.is_empty() {
            return bad("bits, methods and recon_modes must be non-empty");
        }
        if self.n_calib == 0 || self.n_eval == 0 {
            return bad("n_calib and n_eval must be positive");
        }
        if self.thetas.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
            return bad("every theta must lie in (0, 1)");
        }
        self.model.validate()?;
        self.recon.validate()?;
        if let Some(o) = &self.outliers {
            o.validate()?;
        }
        for (&b, &m) in self.bits.iter().flat_map(|b| self.methods.iter().map(move |m| (b, m))) {
            self.calib.policy(m, b, self.calib.theta).validate()?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bit_pair_round_trip() {
        let b: BitPair = "W6A4".parse().unwrap();
        assert_eq!(b, BitPair::new(6, 4));
        assert_eq!(b.to_string(), "W6A4");
        assert!("6A6".parse::<BitPair>().is_err());
        assert!("W1A8".parse::<BitPair>().is_err());
        assert!("W8A".parse::<BitPair>().is_err());
    }

    #[test]
    fn toml_round_trip_and_unknown_keys() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
        let err = ExperimentConfig::from_toml("seeds = [1]\nbogus = 2\n").unwrap_err();
        assert_eq!(err.exit_code(), 2);
        let err = ExperimentConfig::from_toml("[recon]\nlearning_rate = 1.0\n").unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg = ExperimentConfig::from_toml("seeds = [7]\nbits = [\"W4A4\"]\n[calib]\ntheta = 0.6\n").unwrap();
        assert_eq!(cfg.seeds, vec![7]);
        assert_eq!(cfg.bits, vec![BitPair::new(4, 4)]);
        assert_eq!(cfg.calib.theta, 0.6);
        assert_eq!(cfg.model, ModelConfig::default());
    }

    #[test]
    fn rejects_empty_seeds() {
        assert!(ExperimentConfig::from_toml("seeds = []\n").is_err());
        assert!(ExperimentConfig::from_toml("thetas = [1.5]\n").is_err());
    }
}
