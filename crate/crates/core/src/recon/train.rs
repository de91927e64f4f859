use std::collections::BTreeMap;

use log::{debug, info, warn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, Tape, Var};
use crate::calib::CalibItem;
use crate::error::{Error, Result};
use crate::model::{Ctx, FakeQuant, LearnVars, Model, NoQuant, QuantEnv, QuantHooks, WeightQuant};
use crate::quant::{anneal_beta, per_channel_bounds, QuantParams, RoundingVars};
use crate::rng::substream;
use crate::{Scalar, Tensor};

use super::config::{Objective, ReconConfig};
use super::unit::{reconstruction_units, trace, unit_forward, unit_sample, Unit, UnitSample};

/// Squared L2 distance over all entries.
pub fn local_recon_loss<T: Scalar>(q_out: &Tensor<T>, fp_out: &Tensor<T>) -> Result<f64> {
    if q_out.shape() != fp_out.shape() {
        return Err(crate::error::shape_err!("outputs {:?} vs {:?}", q_out.shape(), fp_out.shape()));
    }
    Ok(q_out
        .data()
        .iter()
        .zip(fp_out.data())
        .map(|(a, b)| {
            let d = (*a - *b).as_f64();
            d * d
        })
        .sum())
}

/// Squared L2 between student and teacher hybrid tokens.
pub fn par_loss<T: Scalar>(q_hybrid: &Tensor<T>, target: &super::ReconTarget<T>) -> Result<f64> {
    local_recon_loss(q_hybrid, &target.hybrid)
}

/// Outcome of one unit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitReport {
    pub unit: String,
    pub objective: Objective,
    pub iterations: usize,
    pub learnable_tensors: usize,
    /// Mean loss over all samples with the calibrated parameters.
    pub initial_loss: f64,
    /// Same measurement with the retained parameters; never above
    /// `initial_loss`.
    pub final_loss: f64,
    /// Iteration of the retained checkpoint, 0 for the initial state.
    pub best_iteration: usize,
    /// Learned bounds that left the observed value range.
    pub excursions: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct ReconOutcome<T> {
    pub env: QuantEnv<T>,
    pub units: Vec<UnitReport>,
}

/// Trainable copies of a unit's parameters.
struct Params<T> {
    acts: Vec<(String, Tensor<T>, Tensor<T>)>,
    weights: Vec<(String, Tensor<T>, Tensor<T>, Tensor<T>)>,
    /// Minimum width per bound pair, indexed like `acts` then `weights`.
    min_width: Vec<T>,
}

fn bound_tensors<T: Scalar>(qp: &QuantParams<T>) -> (Tensor<T>, Tensor<T>) {
    let c = qp.channels();
    (
        Tensor::from_parts(vec![c], qp.x_low().to_vec()),
        Tensor::from_parts(vec![c], qp.x_up().to_vec()),
    )
}

impl<T: Scalar> Params<T> {
    fn new(model: &Model<T>, env: &QuantEnv<T>, unit: &Unit) -> Result<Self> {
        let scope = unit.scope();
        let mut p = Self {
            acts: Vec::new(),
            weights: Vec::new(),
            min_width: Vec::new(),
        };
        for (name, qp) in env.acts.iter().filter(|(n, _)| scope.contains(n)) {
            let (lo, up) = bound_tensors(qp);
            p.min_width.push(min_width(qp));
            p.acts.push((name.clone(), lo, up));
        }
        for (name, wq) in env.weights.iter().filter(|(n, _)| scope.contains(n)) {
            let lin = model
                .linear(name)
                .ok_or_else(|| Error::Contract(format!("quantized weight {name} is not a layer of the model")))?;
            let (lo, up) = bound_tensors(&wq.params);
            let alpha = match &wq.rounding {
                Some(rv) => rv.alpha.clone(),
                None => RoundingVars::init(&lin.weight, &wq.params)?.alpha,
            };
            p.min_width.push(min_width(&wq.params));
            p.weights.push((name.clone(), lo, up, alpha));
        }
        if p.acts.is_empty() && p.weights.is_empty() {
            return Err(Error::Contract(format!("unit {} has no learnable parameters", unit.name)));
        }
        Ok(p)
    }

    /// Bound tensors in a fixed order: activations, then weights, low
    /// before up.
    fn bounds_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.acts
            .iter_mut()
            .flat_map(|(_, l, u)| [l, u])
            .chain(self.weights.iter_mut().flat_map(|(_, l, u, _)| [l, u]))
    }

    /// Optimizer keys matching [`Params::bounds_mut`].
    fn bound_keys(&self) -> Vec<String> {
        let names = self.acts.iter().map(|a| &a.0).chain(self.weights.iter().map(|w| &w.0));
        names.flat_map(|n| [format!("{n}.low"), format!("{n}.up")]).collect()
    }

    fn len(&self) -> usize {
        self.acts.len() + self.weights.len()
    }

    fn on_tape(&self, tape: &Tape<T>) -> LearnVars {
        let mut lv = LearnVars::default();
        for (n, lo, up) in &self.acts {
            lv.acts.insert(n.clone(), (tape.param(lo.clone()), tape.param(up.clone())));
        }
        for (n, lo, up, a) in &self.weights {
            lv.weights.insert(n.clone(), (tape.param(lo.clone()), tape.param(up.clone()), tape.param(a.clone())));
        }
        lv
    }

    /// Keeps every range at least its minimum width by moving both ends
    /// apart symmetrically.
    fn project(&mut self) {
        let bounds = self
            .acts
            .iter_mut()
            .map(|(_, l, u, ..)| (l, u))
            .chain(self.weights.iter_mut().map(|(_, l, u, _)| (l, u)));
        for ((lo, up), &w) in bounds.zip(&self.min_width) {
            for (l, u) in lo.data_mut().iter_mut().zip(up.data_mut()) {
                let gap = *u - *l;
                if gap < w {
                    let mid = (*u + *l) * T::lit(0.5);
                    *l = mid - w * T::lit(0.5);
                    *u = mid + w * T::lit(0.5);
                }
            }
        }
    }

    /// Env with these parameters, rounding snapped to hard offsets.
    fn to_env(&self, base: &QuantEnv<T>) -> Result<QuantEnv<T>> {
        let mut env = base.clone();
        for (n, lo, up) in &self.acts {
            let qp = &base.acts[n];
            let b: Vec<(T, T)> = lo.data().iter().copied().zip(up.data().iter().copied()).collect();
            env.acts.insert(n.clone(), QuantParams::from_parts(&b, qp.bits(), qp.granularity())?);
        }
        for (n, lo, up, a) in &self.weights {
            let qp = &base.weights[n].params;
            let b: Vec<(T, T)> = lo.data().iter().copied().zip(up.data().iter().copied()).collect();
            env.weights.insert(
                n.clone(),
                WeightQuant {
                    params: QuantParams::from_parts(&b, qp.bits(), qp.granularity())?,
                    rounding: Some(RoundingVars { alpha: a.clone() }),
                },
            );
        }
        Ok(env)
    }
}

fn min_width<T: Scalar>(qp: &QuantParams<T>) -> T {
    let w = qp
        .x_low()
        .iter()
        .zip(qp.x_up())
        .map(|(&l, &u)| u - l)
        .fold(T::infinity(), |a, b| a.min(b));
    (w * T::lit(1e-3)).max(T::lit(1e-8))
}

/// Records the value range at every activation hook it sees, then
/// delegates to the wrapped hooks.
struct RangeProbe<'a, T> {
    inner: &'a mut dyn QuantHooks<T>,
    ranges: &'a mut BTreeMap<String, (T, T)>,
}

impl<T: Scalar> QuantHooks<T> for RangeProbe<'_, T> {
    fn act(&mut self, tape: &Tape<T>, name: &str, x: Var) -> Result<Var> {
        let (lo, up) = tape.value(x).min_max();
        let e = self.ranges.entry(name.to_string()).or_insert((lo, up));
        *e = (e.0.min(lo), e.1.max(up));
        self.inner.act(tape, name, x)
    }

    fn weight(&mut self, tape: &Tape<T>, name: &str, w: &Tensor<T>) -> Result<Var> {
        self.inner.weight(tape, name, w)
    }
}

/// Mean unit loss over all samples under a frozen env, without dropping.
/// With `ranges` set, also records the student's activation ranges.
#[allow(clippy::too_many_arguments)]
fn evaluate<T: Scalar>(
    model: &Model<T>,
    env: &QuantEnv<T>,
    unit: &Unit,
    objective: Objective,
    cfg: &ReconConfig,
    samples: &[UnitSample<T>],
    mut ranges: Option<&mut BTreeMap<String, (T, T)>>,
) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        let tape = Tape::new();
        let mut fq = FakeQuant::new(env).scope(unit.scope());
        let out = match ranges.as_deref_mut() {
            Some(r) => {
                let mut probe = RangeProbe { inner: &mut fq, ranges: r };
                let mut ctx = Ctx::new(&tape, &mut probe);
                unit_forward(model, &mut ctx, unit, objective, cfg.interaction, s)?
            }
            None => {
                let mut ctx = Ctx::new(&tape, &mut fq);
                unit_forward(model, &mut ctx, unit, objective, cfg.interaction, s)?
            }
        };
        total += local_recon_loss(&tape.value(out), &s.target)?;
    }
    Ok(total / samples.len() as f64)
}

/// Learns the quantization parameters of `unit` against its samples,
/// starting from `env`, and returns the env with the retained parameters.
///
/// Each iteration draws `batch_size` samples, applies activation fake-quant
/// with dropping and soft rounding, and takes one Adam step on the bounds
/// and rounding variables. The deterministic loss over all samples is
/// checked at evenly spaced checkpoints; the best state seen, including
/// the starting one, is kept.
pub fn optimize_unit<T: Scalar>(
    model: &Model<T>,
    env: &QuantEnv<T>,
    unit: &Unit,
    samples: &[UnitSample<T>],
    cfg: &ReconConfig,
) -> Result<(QuantEnv<T>, UnitReport)> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Contract(format!("no samples for unit {}", unit.name)));
    }
    let objective = unit.objective(cfg.objective);
    let mut params = Params::new(model, env, unit)?;
    let iterations = cfg.unit_iterations(unit.is_final());
    let mut observed = BTreeMap::new();
    let initial = evaluate(model, env, unit, objective, cfg, samples, Some(&mut observed))?;
    let mut best = (initial, 0usize, env.clone());
    let every = iterations.div_ceil(cfg.checkpoints).max(1);

    let mut rng = substream(cfg.seed, &format!("recon:{}", unit.name));
    let mut adam_bounds = Adam::new(T::lit(cfg.lr_bounds));
    let mut adam_alpha = Adam::new(T::lit(cfg.lr_alpha));
    let batch = cfg.batch_size.min(samples.len());
    let bound_keys = params.bound_keys();
    for it in 1..=iterations {
        let progress = (it - 1) as f64 / iterations as f64;
        let reg_on = progress >= cfg.warmup && cfg.reg_weight > 0.0;
        let beta = T::lit(anneal_beta(progress, cfg.warmup, cfg.beta_start, cfg.beta_end));
        let tape = Tape::new();
        let lv = params.on_tape(&tape);
        let picks: Vec<usize> = (0..batch).map(|_| rng.random_range(0..samples.len())).collect();
        let mut terms = Vec::with_capacity(batch + 1);
        {
            let mut fq = FakeQuant::new(env).scope(unit.scope()).learn(&lv).qdrop(cfg.drop_prob, &mut rng);
            let mut ctx = Ctx::new(&tape, &mut fq);
            for &i in &picks {
                let s = &samples[i];
                let out = unit_forward(model, &mut ctx, unit, objective, cfg.interaction, s)?;
                let diff = tape.sub(out, tape.constant(s.target.clone()))?;
                terms.push(tape.sum_squares(diff));
            }
        }
        let mut loss = terms[0];
        for &t in &terms[1..] {
            loss = tape.add(loss, t)?;
        }
        loss = tape.scale(loss, T::one() / T::lit(batch as f64));
        if reg_on {
            for &(_, _, alpha) in lv.weights.values() {
                let r = tape.scale(tape.rounding_regularizer(alpha, beta), T::lit(cfg.reg_weight));
                loss = tape.add(loss, r)?;
            }
        }
        let lval = tape.value(loss).item()?.as_f64();
        if !lval.is_finite() {
            return Err(Error::NonFinite(format!("reconstruction loss of {} at iteration {it}", unit.name)));
        }
        let grads = tape.backward(loss)?;
        for ((_, lo, up), (lv_lo, lv_up)) in params.acts.iter_mut().zip(lv.acts.values()) {
            grads.assign(*lv_lo, lo)?;
            grads.assign(*lv_up, up)?;
        }
        for ((_, lo, up, a), (lv_lo, lv_up, lv_a)) in params.weights.iter_mut().zip(lv.weights.values()) {
            grads.assign(*lv_lo, lo)?;
            grads.assign(*lv_up, up)?;
            grads.assign(*lv_a, a)?;
        }
        adam_bounds.step(bound_keys.iter().map(String::as_str).zip(params.bounds_mut()))?;
        adam_alpha.step(params.weights.iter_mut().map(|(n, _, _, a)| (n.as_str(), a)))?;
        params.project();

        if it % every == 0 || it == iterations {
            let cand = params.to_env(env)?;
            let v = evaluate(model, &cand, unit, objective, cfg, samples, None)?;
            debug!("{} iteration {it}: train {lval:.6e}, checkpoint {v:.6e}", unit.name);
            if v < best.0 {
                best = (v, it, cand);
            }
        }
    }

    let (final_loss, best_iteration, out_env) = best;
    let excursions = excursions(model, env, &out_env, unit, &observed);
    for e in &excursions {
        warn!("{}: learned bounds of {e} leave the observed range", unit.name);
    }
    info!(
        "{} ({objective}): {iterations} iterations, loss {initial:.6e} -> {final_loss:.6e} (checkpoint {best_iteration})",
        unit.name
    );
    Ok((
        out_env,
        UnitReport {
            unit: unit.name.clone(),
            objective,
            iterations,
            learnable_tensors: params.len(),
            initial_loss: initial,
            final_loss,
            best_iteration,
            excursions,
        },
    ))
}

/// Tensors whose learned bounds moved outside both the observed value range
/// and their starting bounds.
fn excursions<T: Scalar>(
    model: &Model<T>,
    start: &QuantEnv<T>,
    learned: &QuantEnv<T>,
    unit: &Unit,
    observed: &BTreeMap<String, (T, T)>,
) -> Vec<String> {
    let outside = |now: &[(T, T)], before: &[(T, T)], obs: &[(T, T)]| {
        now.iter()
            .zip(before)
            .zip(obs)
            .any(|((&(l, u), &(l0, u0)), &(ol, ou))| l < ol.min(l0) || u > ou.max(u0))
    };
    let scope = unit.scope();
    let mut out = Vec::new();
    for (n, qp) in learned.acts.iter().filter(|(n, _)| scope.contains(n)) {
        if let Some(&obs) = observed.get(n) {
            if outside(&qp.bounds(), &start.acts[n].bounds(), &[obs]) {
                out.push(n.clone());
            }
        }
    }
    for (n, wq) in learned.weights.iter().filter(|(n, _)| scope.contains(n)) {
        let Some(lin) = model.linear(n) else { continue };
        let Ok(obs) = per_channel_bounds(&lin.weight, 1) else { continue };
        if outside(&wq.params.bounds(), &start.weights[n].params.bounds(), &obs) {
            out.push(n.clone());
        }
    }
    out
}

/// Reconstructs every unit front to back. Each unit's student input comes
/// from the model quantized with all earlier units' retained parameters;
/// its teacher output comes from the full-precision model.
pub fn run_reconstruction<T: Scalar>(
    model: &Model<T>,
    env: &QuantEnv<T>,
    items: &[CalibItem<T>],
    cfg: &ReconConfig,
) -> Result<ReconOutcome<T>> {
    cfg.validate()?;
    if items.is_empty() {
        return Err(Error::Contract("reconstruction needs calibration items".into()));
    }
    let teachers = items.iter().map(|it| trace(model, &mut NoQuant, it)).collect::<Result<Vec<_>>>()?;
    let mut env = env.clone();
    let mut reports = Vec::new();
    for unit in reconstruction_units(model, cfg.granularity) {
        let objective = unit.objective(cfg.objective);
        let mut samples = Vec::with_capacity(items.len());
        for (it, teacher) in items.iter().zip(&teachers) {
            let mut hooks = FakeQuant::new(&env);
            let student = trace(model, &mut hooks, it)?;
            samples.push(unit_sample(model, &unit, objective, cfg.interaction, it, &student, &mut hooks, teacher)?);
        }
        let (next, report) = optimize_unit(model, &env, &unit, &samples, cfg)?;
        env = next;
        reports.push(report);
    }
    Ok(ReconOutcome { env, units: reports })
}
