//! Quantization hook points and the environments that act on them.

use std::collections::{BTreeMap, BTreeSet};

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::quant::{fake_quant, fake_quant_weight, QuantParams, RoundingMode, RoundingVars};
use crate::{Scalar, Tensor};

/// Called by the model at every activation and weight hook point.
pub trait QuantHooks<T: Scalar> {
    fn act(&mut self, tape: &Tape<T>, name: &str, x: Var) -> Result<Var>;
    fn weight(&mut self, tape: &Tape<T>, name: &str, w: &Tensor<T>) -> Result<Var>;
}

/// Full precision; records nothing.
#[derive(Default)]
pub struct NoQuant;

impl<T: Scalar> QuantHooks<T> for NoQuant {
    fn act(&mut self, _: &Tape<T>, _: &str, x: Var) -> Result<Var> {
        Ok(x)
    }

    fn weight(&mut self, tape: &Tape<T>, _: &str, w: &Tensor<T>) -> Result<Var> {
        Ok(tape.constant(w.clone()))
    }
}

/// Full precision, capturing the value seen at each activation hook.
pub struct Observer<T> {
    filter: Option<BTreeSet<String>>,
    pub acts: BTreeMap<String, Vec<Tensor<T>>>,
    pub weights: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Default for Observer<T> {
    fn default() -> Self {
        Self {
            filter: None,
            acts: BTreeMap::new(),
            weights: BTreeMap::new(),
        }
    }
}

impl<T: Scalar> Observer<T> {
    /// Observes only the listed hooks.
    pub fn only<I: IntoIterator<Item = S>, S: Into<String>>(names: I) -> Self {
        Self {
            filter: Some(names.into_iter().map(Into::into).collect()),
            ..Self::default()
        }
    }
}

impl<T: Scalar> QuantHooks<T> for Observer<T> {
    fn act(&mut self, tape: &Tape<T>, name: &str, x: Var) -> Result<Var> {
        if self.filter.as_ref().is_none_or(|f| f.contains(name)) {
            self.acts.entry(name.to_string()).or_default().push(tape.get(x));
        }
        Ok(x)
    }

    fn weight(&mut self, tape: &Tape<T>, name: &str, w: &Tensor<T>) -> Result<Var> {
        if self.filter.is_none() {
            self.weights.insert(name.to_string(), w.clone());
        }
        Ok(tape.constant(w.clone()))
    }
}

/// Frozen quantization state of one weight.
#[derive(Clone, Debug)]
pub struct WeightQuant<T> {
    pub params: QuantParams<T>,
    /// Learned rounding; `None` means round-to-nearest.
    pub rounding: Option<RoundingVars<T>>,
}

impl<T: Scalar> WeightQuant<T> {
    pub fn apply(&self, w: &Tensor<T>) -> Result<Tensor<T>> {
        match &self.rounding {
            Some(rv) => fake_quant_weight(w, &self.params, rv, RoundingMode::Hard),
            None => fake_quant(w, &self.params),
        }
    }
}

/// Quantization parameters for every quantized hook of a model.
#[derive(Clone, Debug)]
pub struct QuantEnv<T> {
    pub acts: BTreeMap<String, QuantParams<T>>,
    pub weights: BTreeMap<String, WeightQuant<T>>,
}

impl<T> Default for QuantEnv<T> {
    fn default() -> Self {
        Self {
            acts: BTreeMap::new(),
            weights: BTreeMap::new(),
        }
    }
}

impl<T: Scalar> QuantEnv<T> {
    pub fn is_empty(&self) -> bool {
        self.acts.is_empty() && self.weights.is_empty()
    }
}

/// Which hooks a [`FakeQuant`] instance is allowed to quantize.
#[derive(Clone, Debug, Default)]
pub enum Scope {
    #[default]
    All,
    /// Hooks whose name starts with one of the prefixes.
    Prefixes(Vec<String>),
    /// Exactly these hooks.
    Names(BTreeSet<String>),
}

impl Scope {
    pub fn contains(&self, name: &str) -> bool {
        match self {
            Scope::All => true,
            Scope::Prefixes(ps) => ps.iter().any(|p| name.starts_with(p.as_str())),
            Scope::Names(ns) => ns.contains(name),
        }
    }
}

/// Trainable tape variables standing in for frozen parameters.
#[derive(Clone, Debug, Default)]
pub struct LearnVars {
    /// `(x_low, x_up)` per activation hook.
    pub acts: BTreeMap<String, (Var, Var)>,
    /// `(x_low, x_up, alpha)` per weight.
    pub weights: BTreeMap<String, (Var, Var, Var)>,
}

/// Applies a [`QuantEnv`] as fake-quant nodes on the tape.
pub struct FakeQuant<'a, T> {
    env: &'a QuantEnv<T>,
    scope: Scope,
    /// Hooks inside `scope` absent from the env are an error when set.
    strict: bool,
    learn: Option<&'a LearnVars>,
    qdrop: Option<(f64, &'a mut ChaCha8Rng)>,
    overrides: BTreeMap<String, QuantParams<T>>,
    applied: usize,
}

impl<'a, T: Scalar> FakeQuant<'a, T> {
    pub fn new(env: &'a QuantEnv<T>) -> Self {
        Self {
            env,
            scope: Scope::All,
            strict: false,
            learn: None,
            qdrop: None,
            overrides: BTreeMap::new(),
            applied: 0,
        }
    }

    pub fn scope(mut self, scope: Scope) -> Self {
        self.scope = scope;
        self
    }

    pub fn strict(mut self, on: bool) -> Self {
        self.strict = on;
        self
    }

    /// Learned variables take precedence over the env for their hooks.
    pub fn learn(mut self, vars: &'a LearnVars) -> Self {
        self.learn = Some(vars);
        self
    }

    /// Randomly passes learned activations through unquantized with
    /// probability `p`.
    pub fn qdrop(mut self, p: f64, rng: &'a mut ChaCha8Rng) -> Self {
        self.qdrop = Some((p, rng));
        self
    }

    /// Replaces the env entry for one activation hook.
    pub fn with_override(mut self, name: &str, qp: QuantParams<T>) -> Self {
        self.overrides.insert(name.to_string(), qp);
        self
    }

    /// Number of fake-quant nodes inserted so far.
    pub fn applied(&self) -> usize {
        self.applied
    }

    fn missing(&self, name: &str) -> Result<()> {
        if self.strict {
            return Err(Error::Contract(format!("no quantization parameters for hook {name}")));
        }
        Ok(())
    }
}

fn bound_vars<T: Scalar>(tape: &Tape<T>, qp: &QuantParams<T>) -> (Var, Var) {
    let c = qp.channels();
    let lo = tape.constant(Tensor::from_parts(vec![c], qp.x_low().to_vec()));
    let up = tape.constant(Tensor::from_parts(vec![c], qp.x_up().to_vec()));
    (lo, up)
}

impl<T: Scalar> QuantHooks<T> for FakeQuant<'_, T> {
    fn act(&mut self, tape: &Tape<T>, name: &str, x: Var) -> Result<Var> {
        if !self.scope.contains(name) {
            return Ok(x);
        }
        if let Some(&(lo, up)) = self.learn.and_then(|l| l.acts.get(name)) {
            let qp = self.env.acts.get(name).ok_or_else(|| {
                Error::Contract(format!("learned hook {name} has no calibrated parameters"))
            })?;
            self.applied += 1;
            return match &mut self.qdrop {
                Some((p, rng)) => tape.qdrop_fake_quant(x, lo, up, qp.into(), *p, &mut **rng),
                None => tape.fake_quant(x, lo, up, qp.into()),
            };
        }
        let qp = match self.overrides.get(name).or_else(|| self.env.acts.get(name)) {
            Some(qp) => qp,
            None => {
                self.missing(name)?;
                return Ok(x);
            }
        };
        self.applied += 1;
        if !tape.tracks_grad(x) {
            let v = fake_quant(&tape.value(x), qp)?;
            return Ok(tape.record_constant("fake_quant", v));
        }
        let (lo, up) = bound_vars(tape, qp);
        tape.fake_quant(x, lo, up, qp.into())
    }

    fn weight(&mut self, tape: &Tape<T>, name: &str, w: &Tensor<T>) -> Result<Var> {
        if !self.scope.contains(name) {
            return Ok(tape.constant(w.clone()));
        }
        let wq = self.env.weights.get(name);
        if let Some(&(lo, up, alpha)) = self.learn.and_then(|l| l.weights.get(name)) {
            let qp = &wq
                .ok_or_else(|| Error::Contract(format!("learned weight {name} not calibrated")))?
                .params;
            self.applied += 1;
            let wv = tape.constant(w.clone());
            return tape.fake_quant_weight(wv, lo, up, alpha, qp.into(), RoundingMode::Soft);
        }
        match wq {
            Some(wq) => {
                self.applied += 1;
                Ok(tape.record_constant("fake_quant_weight", wq.apply(w)?))
            }
            None => {
                self.missing(name)?;
                Ok(tape.constant(w.clone()))
            }
        }
    }
}

/// Whether `name` is one of the inputs/outputs of a query or key linear.
pub fn is_qk_tensor(name: &str) -> bool {
    [".q.in", ".q.out", ".k.in", ".k.out"].iter().any(|s| name.ends_with(s))
}

/// The attention module a hook name belongs to, e.g. `enc.2.attn` for
/// `enc.2.attn.q.out`.
pub fn attention_of(name: &str) -> Option<&str> {
    for s in [".q.in", ".q.out", ".k.in", ".k.out", ".v.in", ".v.out", ".softmax", ".proj.in", ".proj.out"] {
        if let Some(p) = name.strip_suffix(s) {
            return Some(p);
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn qk_names() {
        assert!(is_qk_tensor("dec.0.t2i.q.in"));
        assert!(is_qk_tensor("enc.5.attn.k.out"));
        assert!(!is_qk_tensor("enc.5.attn.v.out"));
        assert_eq!(attention_of("enc.5.attn.k.out"), Some("enc.5.attn"));
        assert_eq!(attention_of("enc.5.mlp.fc1.in"), None);
    }

    #[test]
    fn scope_filters() {
        assert!(Scope::Prefixes(vec!["enc.1.".into()]).contains("enc.1.attn.q"));
        assert!(!Scope::Prefixes(vec!["enc.1.".into()]).contains("enc.11.attn.q"));
    }
}
