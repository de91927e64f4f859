use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::calib::CalibItem;
use crate::error::{Error, Result};
use crate::model::{Ctx, FakeQuant, Model, NoQuant, QuantEnv, QuantHooks};
use crate::{Scalar, Tensor};

use super::config::InteractionPath;
use super::unit::{interaction, trace};

/// Agreement of a quantized model with its full-precision teacher.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    /// Mean IoU of the binarized (logit > 0) masks.
    pub mask_iou: f64,
    /// Mean squared error of hybrid image tokens formed from each stage's
    /// output through the layer-skip path, both models fully quantized or
    /// fully full-precision respectively.
    pub stage_hybrid_mse: Vec<f64>,
}

/// IoU of two logit maps binarized at 0; 1 when both are empty.
pub fn mask_iou<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(crate::error::shape_err!("masks {:?} vs {:?}", a.shape(), b.shape()));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (x, y) in a.data().iter().zip(b.data()) {
        let (p, q) = (*x > T::zero(), *y > T::zero());
        inter += (p && q) as usize;
        union += (p || q) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

fn stage_hybrids<T: Scalar>(model: &Model<T>, hooks: &mut dyn QuantHooks<T>, item: &CalibItem<T>) -> Result<Vec<Tensor<T>>> {
    let tr = trace(model, hooks, item)?;
    let mut out = Vec::with_capacity(model.plan().len());
    for r in &model.plan().stages {
        let tape = Tape::new();
        let mut ctx = Ctx::new(&tape, hooks);
        let x = tape.constant(tr.layers[*r.end()].clone());
        let emb = model.run_neck(&mut ctx, x)?;
        let h = interaction(model, &mut ctx, emb, &tr.prompt_tokens, InteractionPath::TwoWay)?;
        out.push(tape.get(h));
    }
    Ok(out)
}

/// Mask IoU and per-stage hybrid-token MSE of `env` applied to `model`
/// against the unquantized model, averaged over `items`.
pub fn evaluate_agreement<T: Scalar>(model: &Model<T>, env: &QuantEnv<T>, items: &[CalibItem<T>]) -> Result<AgreementReport> {
    if items.is_empty() {
        return Err(Error::Contract("agreement needs evaluation items".into()));
    }
    let mut iou = 0.0;
    let mut mse = vec![0.0; model.plan().len()];
    for it in items {
        let fp = model.predict(&mut NoQuant, &it.image, &it.prompts)?;
        let q = model.predict(&mut FakeQuant::new(env), &it.image, &it.prompts)?;
        iou += mask_iou(&fp, &q)?;
        let hf = stage_hybrids(model, &mut NoQuant, it)?;
        let hq = stage_hybrids(model, &mut FakeQuant::new(env), it)?;
        for (k, (a, b)) in hf.iter().zip(&hq).enumerate() {
            mse[k] += a.mse(b)?.as_f64();
        }
    }
    let n = items.len() as f64;
    Ok(AgreementReport {
        mask_iou: iou / n,
        stage_hybrid_mse: mse.into_iter().map(|v| v / n).collect(),
    })
}
