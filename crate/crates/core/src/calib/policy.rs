use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::is_qk_tensor;
use crate::quant::{MAX_BITS, MIN_BITS};

use super::focus::MaxScope;
use super::grid::GridConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    Minmax,
    Mse,
    Pcc,
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Metric::Minmax => "minmax",
            Metric::Mse => "mse",
            Metric::Pcc => "pcc",
        })
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "minmax" => Ok(Metric::Minmax),
            "mse" => Ok(Metric::Mse),
            "pcc" => Ok(Metric::Pcc),
            _ => Err(Error::Config(format!("unknown calibration method {s:?}"))),
        }
    }
}

/// Tensors whose hook name matches `pattern` (`*` matches any run of
/// characters) use `metric`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyRule {
    pub pattern: String,
    pub metric: Metric,
}

/// How each hooked tensor is calibrated. Rules are tried in order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibPolicy {
    pub rules: Vec<PolicyRule>,
    pub weight_metric: Metric,
    pub weight_bits: u32,
    pub act_bits: u32,
    pub theta: f64,
    pub max_scope: MaxScope,
    pub grid: GridConfig,
    /// Coordinate-descent sweeps of the query/key search.
    pub pcc_sweeps: usize,
    /// Calibration items used by the focus-overlap search, from the front.
    pub pcc_samples: usize,
    /// Items used by the MSE search; `None` uses all.
    pub mse_samples: Option<usize>,
    pub symmetric: bool,
}

impl Default for CalibPolicy {
    fn default() -> Self {
        Self::for_method(Metric::Pcc, 8, 8)
    }
}

pub const QK_PATTERNS: [&str; 4] = ["*.q.in", "*.q.out", "*.k.in", "*.k.out"];

impl CalibPolicy {
    /// `Pcc` routes query/key tensors to the focus-overlap search and
    /// everything else to MSE; the other methods apply to all activations.
    pub fn for_method(method: Metric, weight_bits: u32, act_bits: u32) -> Self {
        let mut rules = Vec::new();
        if method == Metric::Pcc {
            rules.extend(QK_PATTERNS.iter().map(|p| PolicyRule {
                pattern: p.to_string(),
                metric: Metric::Pcc,
            }));
        }
        rules.push(PolicyRule {
            pattern: "*".into(),
            metric: if method == Metric::Minmax { Metric::Minmax } else { Metric::Mse },
        });
        Self {
            rules,
            weight_metric: if method == Metric::Minmax { Metric::Minmax } else { Metric::Mse },
            weight_bits,
            act_bits,
            theta: 0.5,
            max_scope: MaxScope::Global,
            grid: GridConfig::default(),
            pcc_sweeps: 2,
            pcc_samples: 1,
            mse_samples: None,
            symmetric: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for b in [self.weight_bits, self.act_bits] {
            if !(MIN_BITS..=MAX_BITS).contains(&b) {
                return Err(Error::Config(format!("bit-width {b} outside [{MIN_BITS}, {MAX_BITS}]")));
            }
        }
        if !(self.theta > 0.0 && self.theta < 1.0) {
            return Err(Error::Config(format!("theta {} outside (0, 1)", self.theta)));
        }
        if self.weight_metric == Metric::Pcc {
            return Err(Error::Config("weights cannot use the focus-overlap metric".into()));
        }
        if self.pcc_samples == 0 || self.mse_samples == Some(0) {
            return Err(Error::Config("sample budgets must be positive".into()));
        }
        self.grid.validate()
    }

    /// Metric of the first rule matching `name`.
    pub fn metric_for(&self, name: &str) -> Result<Metric> {
        let m = self
            .rules
            .iter()
            .find(|r| glob_match(&r.pattern, name))
            .map(|r| r.metric)
            .ok_or_else(|| Error::Config(format!("no calibration rule matches {name}")))?;
        if m == Metric::Pcc && !is_qk_tensor(name) {
            return Err(Error::Config(format!("focus-overlap metric on non query/key tensor {name}")));
        }
        Ok(m)
    }
}

/// `*` matches any (possibly empty) run of characters.
pub fn glob_match(pattern: &str, name: &str) -> bool {
    let parts: Vec<&str> = pattern.split('*').collect();
    if parts.len() == 1 {
        return pattern == name;
    }
    let (first, last) = (parts[0], parts[parts.len() - 1]);
    if !name.starts_with(first) || name.len() < first.len() + last.len() || !name.ends_with(last) {
        return false;
    }
    let mut rest = &name[first.len()..name.len() - last.len()];
    for mid in &parts[1..parts.len() - 1] {
        match rest.find(mid) {
            Some(i) => rest = &rest[i + mid.len()..],
            None => return false,
        }
    }
    true
}
