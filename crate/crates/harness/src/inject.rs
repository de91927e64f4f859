//! Heavy-tailed query/key activations planted through the projection
//! weights.

use promptq_core::calib::CalibItem;
use promptq_core::model::{attention_of, Observer};
use promptq_core::{Model64, Tensor};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};
use crate::rng::substream;

/// Where and how strongly to plant outliers.
///
/// For a target `X.q.out`, a few output columns of the query projection get
/// an additive rank-1 spike `m * u` along a random input direction `u`, and
/// the matching columns of the key projection are zeroed so the
/// full-precision attention scores ignore them. `X.k.out` is symmetric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutlierSpec {
    pub targets: Vec<String>,
    /// Multiplier on the measured inter-quartile scale that defines the
    /// bulk unit `sigma`.
    pub bulk_scale: f64,
    /// Target `max |value| / sigma`.
    pub magnitude: f64,
    /// Fraction of output columns spiked (at least one).
    pub fraction: f64,
}

impl Default for OutlierSpec {
    fn default() -> Self {
        Self {
            targets: vec![
                "enc.2.attn.q.out".into(),
                "enc.5.attn.k.out".into(),
                "dec.0.t2i.k.out".into(),
                "dec.1.i2t.q.out".into(),
                "dec.final.t2i.k.out".into(),
            ],
            bulk_scale: 1.0,
            magnitude: 180.0,
            fraction: 0.002,
        }
    }
}

impl OutlierSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.fraction > 0.0 && self.fraction <= 0.05) {
            return Err(HarnessError::Config(format!("outlier fraction {} outside (0, 0.05]", self.fraction)));
        }
        if !(self.magnitude > 10.0 && self.magnitude.is_finite()) {
            return Err(HarnessError::Config(format!("outlier magnitude {} must exceed 10", self.magnitude)));
        }
        if !(self.bulk_scale > 0.0 && self.bulk_scale.is_finite()) {
            return Err(HarnessError::Config(format!("bulk scale {} must be positive", self.bulk_scale)));
        }
        for t in &self.targets {
            if !(t.ends_with(".q.out") || t.ends_with(".k.out")) {
                return Err(HarnessError::Config(format!("outlier target {t} is not a query/key projection output")));
            }
        }
        Ok(())
    }
}

/// Measured outcome for one target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InjectionReport {
    pub target: String,
    pub columns: Vec<usize>,
    pub spike: f64,
    /// Bulk unit: `bulk_scale * IQR / 1.349` of the injected activation.
    pub sigma: f64,
    pub max_abs: f64,
    pub ratio: f64,
}

/// `(q75 - q25) / 1.349`, linear interpolation between order statistics.
pub fn iqr_scale(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let pos = p * (values.len() - 1) as f64;
        let (i, f) = (pos.floor() as usize, pos.fract());
        let j = (i + 1).min(values.len() - 1);
        values[i] * (1.0 - f) + values[j] * f
    };
    (q(0.75) - q(0.25)) / 1.349
}

/// Ratio of the largest magnitude to the bulk unit.
fn measure(outputs: &[Tensor<f64>], bulk_scale: f64) -> (f64, f64, f64) {
    let mut all: Vec<f64> = outputs.iter().flat_map(|t| t.data().iter().copied()).collect();
    let max_abs = all.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let sigma = bulk_scale * iqr_scale(&mut all);
    (sigma, max_abs, max_abs / sigma)
}

/// Plants outliers into `model` and verifies the measured ratio on `items`
/// reaches 80% of `spec.magnitude` for every target.
pub fn inject_outliers(model: &mut Model64, spec: &OutlierSpec, items: &[CalibItem<f64>]) -> Result<Vec<InjectionReport>> {
    spec.validate()?;
    if items.is_empty() {
        return Err(HarnessError::Config("outlier injection needs calibration items".into()));
    }
    let mut reports = Vec::with_capacity(spec.targets.len());
    for target in &spec.targets {
        let module = attention_of(target).expect("validated suffix").to_string();
        let (side, partner) = if target.ends_with(".q.out") { ("q", "k") } else { ("k", "q") };
        let lin_name = format!("{module}.{side}");
        let partner_name = format!("{module}.{partner}");
        let out_dim = model
            .linear(&lin_name)
            .ok_or_else(|| HarnessError::Config(format!("no projection {lin_name} for target {target}")))?
            .weight
            .cols();
        let in_dim = model.linear(&lin_name).expect("checked").weight.rows();
        let mut rng = substream(model.cfg.seed, &format!("inject:{target}"));
        let mut cols: Vec<usize> = (0..out_dim).collect();
        cols.shuffle(&mut rng);
        let count = ((spec.fraction * out_dim as f64).ceil() as usize).clamp(1, out_dim);
        let mut columns = cols[..count].to_vec();
        columns.sort_unstable();
        let mut u: Vec<f64> = (0..in_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        u.iter_mut().for_each(|v| *v /= norm);

        let partner_lin = model.linear_mut(&partner_name).expect("attention has both projections");
        for r in 0..partner_lin.weight.rows() {
            for &c in &columns {
                partner_lin.weight.data_mut()[r * out_dim + c] = 0.0;
            }
        }
        for &c in &columns {
            partner_lin.bias.data_mut()[c] = 0.0;
        }

        let input_hook = format!("{lin_name}.in");
        let mut obs = Observer::only([input_hook.clone()]);
        for it in items {
            model.predict(&mut obs, &it.image, &it.prompts)?;
        }
        let inputs = obs.acts.remove(&input_hook).unwrap_or_default();
        let base = model.linear(&lin_name).expect("checked").clone();
        let outputs_at = |m: f64| -> Result<Vec<Tensor<f64>>> {
            let mut lin = base.clone();
            for r in 0..in_dim {
                for &c in &columns {
                    lin.weight.data_mut()[r * out_dim + c] += m * u[r];
                }
            }
            inputs.iter().map(|x| lin.apply(x).map_err(Into::into)).collect()
        };
        let (sigma0, _, _) = measure(&outputs_at(0.0)?, spec.bulk_scale);
        let proj_max = inputs
            .iter()
            .flat_map(|x| (0..x.rows()).map(|i| x.row(i).iter().zip(&u).map(|(a, b)| a * b).sum::<f64>().abs()))
            .fold(0.0f64, f64::max);
        let mut m = spec.magnitude * sigma0 / proj_max.max(1e-12);
        let mut last = (0.0, 0.0, 0.0);
        for _ in 0..30 {
            last = measure(&outputs_at(m)?, spec.bulk_scale);
            let r = last.2 / spec.magnitude;
            if (r - 1.0).abs() < 1e-3 || !r.is_finite() || r == 0.0 {
                break;
            }
            m /= r;
        }
        let (sigma, max_abs, ratio) = last;
        if !(ratio >= 0.8 * spec.magnitude) {
            return Err(HarnessError::Verification(format!(
                "outlier ratio {ratio:.2} at {target} below {:.2}",
                0.8 * spec.magnitude
            )));
        }
        let lin = model.linear_mut(&lin_name).expect("checked");
        for r in 0..in_dim {
            for &c in &columns {
                lin.weight.data_mut()[r * out_dim + c] += m * u[r];
            }
        }
        log::info!("{target}: spike {m:.3} on columns {columns:?}, ratio {ratio:.1}, sigma {sigma:.4}");
        reports.push(InjectionReport {
            target: target.clone(),
            columns,
            spike: m,
            sigma,
            max_abs,
            ratio,
        });
    }
    Ok(reports)
}
