use std::ops::RangeInclusive;

use crate::autodiff::{Tape, Var};
use crate::calib::CalibItem;
use crate::error::{Error, Result};
use crate::model::{Ctx, DecoderState, Model, NoQuant, QuantHooks, Scope};
use crate::{Scalar, Tensor};

use super::config::{InteractionPath, Objective, UnitGranularity};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum UnitKind {
    Encoder { stage: usize, layers: RangeInclusive<usize> },
    Neck,
    Decoder(usize),
    /// The final token-to-image attention.
    DecoderFinal,
}

/// A group of quantized tensors optimized jointly.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Unit {
    pub name: String,
    pub kind: UnitKind,
    /// Hook-name prefixes owned by the unit.
    pub prefixes: Vec<String>,
}

impl Unit {
    pub fn scope(&self) -> Scope {
        Scope::Prefixes(self.prefixes.clone())
    }

    pub fn is_final(&self) -> bool {
        self.kind == UnitKind::DecoderFinal
    }

    /// Decoder units are always reconstructed locally.
    pub fn objective(&self, requested: Objective) -> Objective {
        match self.kind {
            UnitKind::Encoder { .. } | UnitKind::Neck => requested,
            UnitKind::Decoder(_) | UnitKind::DecoderFinal => Objective::Local,
        }
    }
}

/// Units in processing order: encoder stages (or layers) front to back, the
/// neck, each two-way block, then the final attention.
pub fn reconstruction_units<T: Scalar>(model: &Model<T>, granularity: UnitGranularity) -> Vec<Unit> {
    let mut units = Vec::new();
    for (k, r) in model.plan().stages.iter().enumerate() {
        match granularity {
            UnitGranularity::PerStage => units.push(Unit {
                name: format!("stage.{k}"),
                kind: UnitKind::Encoder { stage: k, layers: r.clone() },
                prefixes: r.clone().map(|l| format!("enc.{l}.")).collect(),
            }),
            UnitGranularity::PerLayer => units.extend(r.clone().map(|l| Unit {
                name: format!("enc.{l}"),
                kind: UnitKind::Encoder { stage: k, layers: l..=l },
                prefixes: vec![format!("enc.{l}.")],
            })),
        }
    }
    units.push(Unit {
        name: "neck".into(),
        kind: UnitKind::Neck,
        prefixes: vec!["neck.".into()],
    });
    for i in 0..model.decoder.blocks.len() {
        units.push(Unit {
            name: format!("dec.{i}"),
            kind: UnitKind::Decoder(i),
            prefixes: vec![format!("dec.{i}.")],
        });
    }
    units.push(Unit {
        name: "dec.final".into(),
        kind: UnitKind::DecoderFinal,
        prefixes: vec!["dec.final.".into()],
    });
    units
}

/// Decoder state as plain tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct StateTensors<T> {
    pub queries: Tensor<T>,
    pub keys: Tensor<T>,
    pub query_pe: Tensor<T>,
    pub key_pe: Tensor<T>,
}

impl<T: Scalar> StateTensors<T> {
    fn read(tape: &Tape<T>, s: &DecoderState) -> Self {
        Self {
            queries: tape.get(s.queries),
            keys: tape.get(s.keys),
            query_pe: tape.get(s.query_pe),
            key_pe: tape.get(s.key_pe),
        }
    }

    fn load(&self, tape: &Tape<T>) -> DecoderState {
        DecoderState {
            queries: tape.constant(self.queries.clone()),
            keys: tape.constant(self.keys.clone()),
            query_pe: tape.constant(self.query_pe.clone()),
            key_pe: tape.constant(self.key_pe.clone()),
        }
    }
}

/// Every intermediate of one forward pass.
#[derive(Clone, Debug)]
pub(crate) struct Trace<T> {
    /// Output of each encoder layer.
    pub layers: Vec<Tensor<T>>,
    pub embedding: Tensor<T>,
    pub prompt_tokens: Tensor<T>,
    /// Decoder state before block 0, after each block.
    pub states: Vec<StateTensors<T>>,
    pub final_queries: Tensor<T>,
}

impl<T: Scalar> Trace<T> {
    /// Tokens entering encoder layer `l`.
    pub fn layer_input(&self, model: &Model<T>, hooks: &mut dyn QuantHooks<T>, image: &Tensor<T>, l: usize) -> Result<Tensor<T>> {
        if l > 0 {
            return Ok(self.layers[l - 1].clone());
        }
        let tape = Tape::new();
        let mut ctx = Ctx::new(&tape, hooks);
        let x = model.embed(&mut ctx, image)?;
        Ok(tape.get(x))
    }
}

pub(crate) fn trace<T: Scalar>(model: &Model<T>, hooks: &mut dyn QuantHooks<T>, item: &CalibItem<T>) -> Result<Trace<T>> {
    let tape = Tape::new();
    let mut ctx = Ctx::new(&tape, hooks);
    let mut x = model.embed(&mut ctx, &item.image)?;
    let mut layers = Vec::with_capacity(model.blocks.len());
    for l in 0..model.blocks.len() {
        x = model.run_layers(&mut ctx, x, l..=l)?;
        layers.push(tape.get(x));
    }
    let emb = model.run_neck(&mut ctx, x)?;
    let prompt_tokens = model.encode_prompts(&item.prompts)?;
    let mut s = model.decoder_start(&mut ctx, emb, &prompt_tokens)?;
    let mut states = vec![StateTensors::read(&tape, &s)];
    for i in 0..model.decoder.blocks.len() {
        s = model.decoder_block(&mut ctx, i, s)?;
        states.push(StateTensors::read(&tape, &s));
    }
    let s = model.decoder_final(&mut ctx, s)?;
    Ok(Trace {
        layers,
        embedding: tape.get(emb),
        prompt_tokens,
        states,
        final_queries: tape.get(s.queries),
    })
}

/// Hybrid image tokens formed from an image embedding.
pub fn interaction<T: Scalar>(
    model: &Model<T>,
    ctx: &mut Ctx<'_, T>,
    embedding: Var,
    prompt_tokens: &Tensor<T>,
    path: InteractionPath,
) -> Result<Var> {
    match path {
        InteractionPath::Identity => Ok(embedding),
        InteractionPath::TwoWay => {
            let mut s = model.decoder_start(ctx, embedding, prompt_tokens)?;
            for i in 0..model.decoder.blocks.len() {
                s = model.decoder_block(ctx, i, s)?;
            }
            Ok(s.keys)
        }
    }
}

/// Number of fake-quant nodes on a tape.
pub fn fake_quant_nodes<T: Scalar>(tape: &Tape<T>) -> usize {
    tape.count_op("fake_quant") + tape.count_op("fake_quant_weight")
}

/// Hybrid tokens of encoder tokens taken through the neck and the
/// interaction path (layer skipping), all at full precision. Fails if any
/// fake-quant node shows up on the teacher tape.
pub fn teacher_hybrid<T: Scalar>(
    model: &Model<T>,
    tokens: &Tensor<T>,
    prompt_tokens: &Tensor<T>,
    path: InteractionPath,
) -> Result<Tensor<T>> {
    let tape = Tape::new();
    let mut hooks = NoQuant;
    let mut ctx = Ctx::new(&tape, &mut hooks);
    let x = tape.constant(tokens.clone());
    let emb = model.run_neck(&mut ctx, x)?;
    let h = interaction(model, &mut ctx, emb, prompt_tokens, path)?;
    if fake_quant_nodes(&tape) != 0 {
        return Err(Error::Contract("fake quantization on the teacher path".into()));
    }
    Ok(tape.get(h))
}

/// Full-precision hybrid tokens of one stage for one calibration item.
#[derive(Clone, Debug, PartialEq)]
pub struct ReconTarget<T> {
    pub stage: usize,
    pub item: usize,
    pub hybrid: Tensor<T>,
    pub prompt_tokens: Tensor<T>,
}

/// Teacher hybrid tokens of every stage output for every item, through the
/// layer-skip path.
pub fn collect_stage_targets<T: Scalar>(
    model: &Model<T>,
    items: &[CalibItem<T>],
    path: InteractionPath,
) -> Result<Vec<ReconTarget<T>>> {
    let mut out = Vec::new();
    for (i, it) in items.iter().enumerate() {
        if it.prompts.is_empty() {
            return Err(Error::Contract(format!("calibration item {i} has no prompts")));
        }
        let tr = trace(model, &mut NoQuant, it)?;
        for (k, r) in model.plan().stages.iter().enumerate() {
            out.push(ReconTarget {
                stage: k,
                item: i,
                hybrid: teacher_hybrid(model, &tr.layers[*r.end()], &tr.prompt_tokens, path)?,
                prompt_tokens: tr.prompt_tokens.clone(),
            });
        }
    }
    Ok(out)
}

/// Input of a unit for one item.
#[derive(Clone, Debug)]
pub enum UnitInput<T> {
    Tokens(Tensor<T>),
    State(StateTensors<T>),
}

/// Student input and teacher output of a unit for one item.
#[derive(Clone, Debug)]
pub struct UnitSample<T> {
    pub input: UnitInput<T>,
    pub prompt_tokens: Tensor<T>,
    pub target: Tensor<T>,
}

fn state_output<T: Scalar>(s: &StateTensors<T>) -> Result<Tensor<T>> {
    let mut d = s.queries.data().to_vec();
    d.extend_from_slice(s.keys.data());
    Tensor::new(vec![s.queries.rows() + s.keys.rows(), s.queries.cols()], d)
}

/// Pairs the student's input (from `student`, the model quantized up to
/// this unit) with the teacher's output for `unit`.
pub(crate) fn unit_sample<T: Scalar>(
    model: &Model<T>,
    unit: &Unit,
    objective: Objective,
    path: InteractionPath,
    item: &CalibItem<T>,
    student: &Trace<T>,
    student_hooks: &mut dyn QuantHooks<T>,
    teacher: &Trace<T>,
) -> Result<UnitSample<T>> {
    let pt = teacher.prompt_tokens.clone();
    let (input, target) = match &unit.kind {
        UnitKind::Encoder { layers, .. } => {
            let input = student.layer_input(model, student_hooks, &item.image, *layers.start())?;
            let fp = &teacher.layers[*layers.end()];
            let target = match objective {
                Objective::Par => teacher_hybrid(model, fp, &pt, path)?,
                Objective::Local => fp.clone(),
            };
            (UnitInput::Tokens(input), target)
        }
        UnitKind::Neck => {
            let input = student.layers.last().expect("nonempty encoder").clone();
            let target = match objective {
                Objective::Par => teacher_hybrid(model, teacher.layers.last().expect("nonempty encoder"), &pt, path)?,
                Objective::Local => teacher.embedding.clone(),
            };
            (UnitInput::Tokens(input), target)
        }
        UnitKind::Decoder(i) => (UnitInput::State(student.states[*i].clone()), state_output(&teacher.states[i + 1])?),
        UnitKind::DecoderFinal => (
            UnitInput::State(student.states.last().expect("start state").clone()),
            teacher.final_queries.clone(),
        ),
    };
    Ok(UnitSample {
        input,
        prompt_tokens: pt,
        target,
    })
}

/// The unit's student output under `ctx`'s hooks, in the same layout as
/// [`UnitSample::target`].
pub fn unit_forward<T: Scalar>(
    model: &Model<T>,
    ctx: &mut Ctx<'_, T>,
    unit: &Unit,
    objective: Objective,
    path: InteractionPath,
    sample: &UnitSample<T>,
) -> Result<Var> {
    let tape = ctx.tape;
    match (&unit.kind, &sample.input) {
        (UnitKind::Encoder { layers, .. }, UnitInput::Tokens(x)) => {
            let y = model.run_layers(ctx, tape.constant(x.clone()), layers.clone())?;
            match objective {
                Objective::Par => {
                    let emb = model.run_neck(ctx, y)?;
                    interaction(model, ctx, emb, &sample.prompt_tokens, path)
                }
                Objective::Local => Ok(y),
            }
        }
        (UnitKind::Neck, UnitInput::Tokens(x)) => {
            let emb = model.run_neck(ctx, tape.constant(x.clone()))?;
            match objective {
                Objective::Par => interaction(model, ctx, emb, &sample.prompt_tokens, path),
                Objective::Local => Ok(emb),
            }
        }
        (UnitKind::Decoder(i), UnitInput::State(s)) => {
            let out = model.decoder_block(ctx, *i, s.load(tape))?;
            tape.concat_rows(&[out.queries, out.keys])
        }
        (UnitKind::DecoderFinal, UnitInput::State(s)) => Ok(model.decoder_final(ctx, s.load(tape))?.queries),
        _ => Err(Error::Contract(format!("input kind does not match unit {}", unit.name))),
    }
}
