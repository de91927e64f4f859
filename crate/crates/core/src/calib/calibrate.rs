use std::collections::{BTreeMap, BTreeSet};

use log::debug;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{attention_of, is_qk_tensor, Model, NoQuant, Observer, PromptSpec, QuantEnv, QuantHooks, WeightQuant};
use crate::quant::{OneOrMany, QuantParams};
use crate::{Scalar, Tensor};

use super::focus::{dist_pcc_scoped, MaxScope};
use super::policy::{CalibPolicy, Metric};
use super::search::{calibrate_minmax, calibrate_mse, search_clip_pcc, AttentionProbe, PccSearch, SearchOutcome};

/// One calibration image with its prompts.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibItem<T> {
    pub image: Tensor<T>,
    pub prompts: Vec<PromptSpec>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TensorKind {
    Activation,
    Weight,
}

/// Calibration outcome of one tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibRecord {
    pub name: String,
    pub kind: TensorKind,
    pub metric: Metric,
    pub bits: u32,
    pub x_low: OneOrMany<f64>,
    pub x_up: OneOrMany<f64>,
    pub objective_value: f64,
    pub candidates_evaluated: usize,
}

#[derive(Clone, Debug)]
pub struct Calibration<T> {
    pub env: QuantEnv<T>,
    /// Activations first, then weights, each sorted by name.
    pub records: Vec<CalibRecord>,
}

/// Full-precision activations at every hook over `items`.
pub fn observe<T: Scalar>(model: &Model<T>, items: &[CalibItem<T>]) -> Result<Observer<T>> {
    let mut obs = Observer::default();
    for it in items {
        model.predict(&mut obs, &it.image, &it.prompts)?;
    }
    Ok(obs)
}

fn one_or_many(v: Vec<f64>) -> OneOrMany<f64> {
    if v.len() == 1 {
        OneOrMany::One(v[0])
    } else {
        OneOrMany::Many(v)
    }
}

fn act_record<T: Scalar>(name: &str, metric: Metric, bits: u32, o: &SearchOutcome<T>) -> CalibRecord {
    CalibRecord {
        name: name.to_string(),
        kind: TensorKind::Activation,
        metric,
        bits,
        x_low: OneOrMany::One(o.low.as_f64()),
        x_up: OneOrMany::One(o.up.as_f64()),
        objective_value: o.objective,
        candidates_evaluated: o.evaluated,
    }
}

/// Builds the probe of an attention module from observed projection inputs.
pub fn attention_probe<T: Scalar>(
    model: &Model<T>,
    module: &str,
    acts: &BTreeMap<String, Vec<Tensor<T>>>,
    samples: usize,
) -> Result<AttentionProbe<T>> {
    let attn = model
        .attentions()
        .into_iter()
        .find(|a| a.name == module)
        .ok_or_else(|| Error::Contract(format!("no attention module {module}")))?;
    let get = |slot: &str| {
        acts.get(&format!("{module}.{slot}"))
            .ok_or_else(|| Error::Contract(format!("hook {module}.{slot} was not observed")))
    };
    let (q, k) = (get("q.in")?, get("k.in")?);
    let n = samples.min(q.len()).min(k.len());
    Ok(AttentionProbe {
        module: module.to_string(),
        heads: attn.heads,
        windows: model.attention_windows(module).cloned(),
        samples: (0..n).map(|i| (q[i].clone(), k[i].clone())).collect(),
        q_lin: attn.q.clone(),
        k_lin: attn.k.clone(),
    })
}

/// Sets every clipping range of `model` from `items` according to `policy`.
///
/// Activations are per-tensor and weights per output channel. Query/key
/// tensors routed to the focus-overlap metric are searched jointly per
/// attention module on the first `pcc_samples` items; the rest minimize
/// quantization MSE (or take min/max) over the MSE sample budget.
pub fn calibrate_model<T: Scalar>(model: &Model<T>, items: &[CalibItem<T>], policy: &CalibPolicy) -> Result<Calibration<T>> {
    policy.validate()?;
    if items.is_empty() {
        return Err(Error::Contract("empty calibration set".into()));
    }
    let obs = observe(model, items)?;
    calibrate_observed(model, &obs.acts, policy)
}

/// [`calibrate_model`] from activations already observed.
pub fn calibrate_observed<T: Scalar>(
    model: &Model<T>,
    acts: &BTreeMap<String, Vec<Tensor<T>>>,
    policy: &CalibPolicy,
) -> Result<Calibration<T>> {
    policy.validate()?;
    let mut env = QuantEnv::default();
    let mut records = Vec::new();
    let mut pcc_modules = BTreeSet::new();
    let mut outcomes: BTreeMap<String, (Metric, SearchOutcome<T>)> = BTreeMap::new();
    for (name, samples) in acts {
        let metric = policy.metric_for(name)?;
        let budget = policy.mse_samples.unwrap_or(samples.len()).min(samples.len());
        let slices: Vec<&[T]> = samples[..budget].iter().map(|t| t.data()).collect();
        let o = match metric {
            Metric::Pcc => {
                pcc_modules.insert(attention_of(name).expect("query/key hook").to_string());
                continue;
            }
            Metric::Minmax => calibrate_minmax(&slices, policy.symmetric)?,
            Metric::Mse => calibrate_mse(&slices, &policy.grid, policy.act_bits, policy.symmetric)?,
        };
        outcomes.insert(name.clone(), (metric, o));
    }
    let search = PccSearch {
        theta: policy.theta,
        scope: policy.max_scope,
        bits: policy.act_bits,
        sweeps: policy.pcc_sweeps,
        grid: policy.grid.clone(),
    };
    for module in &pcc_modules {
        let probe = attention_probe(model, module, acts, policy.pcc_samples)?;
        for (name, o) in search_clip_pcc(&probe, &search)? {
            if policy.metric_for(&name)? == Metric::Pcc {
                debug!("{name}: [{}, {}] distance {}", o.low, o.up, o.objective);
                outcomes.insert(name, (Metric::Pcc, o));
            }
        }
    }
    for (name, (metric, o)) in &outcomes {
        env.acts.insert(name.clone(), QuantParams::per_tensor(o.low, o.up, policy.act_bits)?);
        records.push(act_record(name, *metric, policy.act_bits, o));
    }
    let mut linears: Vec<_> = model.linears().into_iter().filter(|l| l.quantized).collect();
    linears.sort_by(|a, b| a.name.cmp(&b.name));
    for lin in linears {
        let (wq, rec) = calibrate_weight(&lin.name, &lin.weight, policy)?;
        env.weights.insert(lin.name.clone(), wq);
        records.push(rec);
    }
    Ok(Calibration { env, records })
}

/// Per-output-channel calibration of a `[in × out]` weight.
pub fn calibrate_weight<T: Scalar>(name: &str, w: &Tensor<T>, policy: &CalibPolicy) -> Result<(WeightQuant<T>, CalibRecord)> {
    let (rows, cols) = (w.rows(), w.cols());
    let mut bounds = Vec::with_capacity(cols);
    let (mut obj, mut evaluated) = (0.0, 0);
    let mut column = vec![T::zero(); rows];
    for c in 0..cols {
        for (r, v) in column.iter_mut().enumerate() {
            *v = w.at(r, c);
        }
        let o = match policy.weight_metric {
            Metric::Minmax => calibrate_minmax(&[&column], policy.symmetric)?,
            _ => calibrate_mse(&[&column], &policy.grid, policy.weight_bits, policy.symmetric)?,
        };
        obj += o.objective / cols as f64;
        evaluated += o.evaluated;
        bounds.push((o.low, o.up));
    }
    let params = QuantParams::per_channel(&bounds, policy.weight_bits, 1)?;
    let rec = CalibRecord {
        name: name.to_string(),
        kind: TensorKind::Weight,
        metric: policy.weight_metric,
        bits: policy.weight_bits,
        x_low: one_or_many(bounds.iter().map(|b| b.0.as_f64()).collect()),
        x_up: one_or_many(bounds.iter().map(|b| b.1.as_f64()).collect()),
        objective_value: obj,
        candidates_evaluated: evaluated,
    };
    Ok((WeightQuant { params, rounding: None }, rec))
}

/// Mean focus-overlap distance between the full-precision model and the
/// model under `hooks`, per attention module, over `items`.
pub fn attention_distance<T: Scalar>(
    model: &Model<T>,
    hooks: &mut dyn QuantHooks<T>,
    items: &[CalibItem<T>],
    theta: f64,
    scope: MaxScope,
) -> Result<BTreeMap<String, f64>> {
    let mut acc: BTreeMap<String, f64> = BTreeMap::new();
    for it in items {
        let (_, fp) = model.trace(&mut NoQuant, &it.image, &it.prompts)?;
        let (_, q) = model.trace(hooks, &it.image, &it.prompts)?;
        for (a, b) in fp.iter().zip(&q) {
            let d = dist_pcc_scoped(&a.weights, &b.weights, theta, scope)?;
            *acc.entry(a.module_id.clone()).or_default() += d / items.len() as f64;
        }
    }
    Ok(acc)
}

/// Mean of `attention_distance` over the modules whose query/key tensors
/// are listed in `names`; all modules when `names` is empty.
pub fn mean_distance(per_module: &BTreeMap<String, f64>, names: &[String]) -> f64 {
    let modules: BTreeSet<&str> = names.iter().filter(|n| is_qk_tensor(n)).filter_map(|n| attention_of(n)).collect();
    let vals: Vec<f64> = per_module
        .iter()
        .filter(|(m, _)| modules.is_empty() || modules.contains(m.as_str()))
        .map(|(_, v)| *v)
        .collect();
    if vals.is_empty() {
        0.0
    } else {
        vals.iter().sum::<f64>() / vals.len() as f64
    }
}
