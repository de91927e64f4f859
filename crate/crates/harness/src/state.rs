//! On-disk forms of datasets and quantization environments passed between
//! CLI subcommands.

use std::path::Path;

use promptq_core::calib::CalibItem;
use promptq_core::model::{PromptSpec, WeightQuant};
use promptq_core::quant::{QuantRecord, RoundingVars};
use promptq_core::{QuantEnv64, Tensor};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemFile {
    pub image: Tensor<f64>,
    pub prompts: Vec<PromptSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataFile {
    pub seed: u64,
    pub calib: Vec<ItemFile>,
    pub eval: Vec<ItemFile>,
}

impl DataFile {
    pub fn new(seed: u64, calib: &[CalibItem<f64>], eval: &[CalibItem<f64>]) -> Self {
        let conv = |v: &[CalibItem<f64>]| {
            v.iter()
                .map(|it| ItemFile {
                    image: it.image.clone(),
                    prompts: it.prompts.clone(),
                })
                .collect()
        };
        Self {
            seed,
            calib: conv(calib),
            eval: conv(eval),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightRecord {
    pub params: QuantRecord<f64>,
    /// Learned rounding variables, if any.
    pub alpha: Option<Tensor<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvFile {
    pub acts: Vec<QuantRecord<f64>>,
    pub weights: Vec<WeightRecord>,
}

impl EnvFile {
    pub fn from_env(env: &QuantEnv64) -> Self {
        Self {
            acts: env.acts.iter().map(|(n, qp)| QuantRecord::new(n, qp)).collect(),
            weights: env
                .weights
                .iter()
                .map(|(n, wq)| WeightRecord {
                    params: QuantRecord::new(n, &wq.params),
                    alpha: wq.rounding.as_ref().map(|r| r.alpha.clone()),
                })
                .collect(),
        }
    }

    pub fn to_env(&self) -> Result<QuantEnv64> {
        let mut env = QuantEnv64::default();
        for r in &self.acts {
            env.acts.insert(r.tensor_name.clone(), r.to_params()?);
        }
        for w in &self.weights {
            let wq = WeightQuant {
                params: w.params.to_params()?,
                rounding: w.alpha.clone().map(|alpha| RoundingVars { alpha }),
            };
            env.weights.insert(w.params.tensor_name.clone(), wq);
        }
        Ok(env)
    }
}

pub fn write_json<S: Serialize>(value: &S, path: &Path) -> Result<()> {
    let text = serde_json::to_string(value).map_err(|e| HarnessError::Serialize(e.to_string()))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| HarnessError::io(path, e))
}

pub fn read_json<D: DeserializeOwned>(path: &Path) -> Result<D> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))
}
