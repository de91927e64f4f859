use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::{Scalar, Tensor};

use super::hooks::QuantHooks;

/// Per-forward state: the tape, the hooks and optional attention tracing.
pub struct Ctx<'a, T: Scalar> {
    pub tape: &'a Tape<T>,
    pub hooks: &'a mut dyn QuantHooks<T>,
    pub traces: Option<Vec<AttentionTrace<T>>>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(tape: &'a Tape<T>, hooks: &'a mut dyn QuantHooks<T>) -> Self {
        Self { tape, hooks, traces: None }
    }

    pub fn traced(mut self) -> Self {
        self.traces = Some(Vec::new());
        self
    }

    pub fn act(&mut self, name: &str, x: Var) -> Result<Var> {
        self.hooks.act(self.tape, name, x)
    }

    pub fn take_traces(&mut self) -> Vec<AttentionTrace<T>> {
        self.traces.as_mut().map(std::mem::take).unwrap_or_default()
    }
}

/// Attention scores and weights of one module, stacked over
/// `groups = windows × heads` (window-major).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct AttentionTrace<T> {
    pub module_id: String,
    pub heads: usize,
    pub scores: Tensor<T>,
    pub weights: Tensor<T>,
}

/// `y = x W + b` with `W` stored `[in × out]`.
#[derive(Clone, Debug)]
pub struct Linear<T> {
    pub name: String,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    /// Unquantized layers skip the weight and activation hooks.
    pub quantized: bool,
}

impl<T: Scalar> Linear<T> {
    pub fn init<R: Rng + ?Sized>(name: String, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        Self {
            name,
            weight: Tensor::randn(&[fan_in, fan_out], (1.0 / fan_in as f64).sqrt(), rng),
            bias: Tensor::zeros(&[fan_out]),
            quantized: true,
        }
    }

    pub fn unquantized(mut self) -> Self {
        self.quantized = false;
        self
    }

    pub fn forward(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        if !self.quantized {
            let w = ctx.tape.constant(self.weight.clone());
            let b = ctx.tape.constant(self.bias.clone());
            let y = ctx.tape.matmul(x, w)?;
            return ctx.tape.add_bias(y, b);
        }
        let x = ctx.act(&format!("{}.in", self.name), x)?;
        let w = ctx.hooks.weight(ctx.tape, &self.name, &self.weight)?;
        let b = ctx.tape.constant(self.bias.clone());
        let y = ctx.tape.matmul(x, w)?;
        let y = ctx.tape.add_bias(y, b)?;
        ctx.act(&format!("{}.out", self.name), y)
    }

    /// Plain forward without tape or hooks.
    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, k) = (x.rows(), x.cols());
        let n = self.weight.cols();
        if self.weight.rows() != k {
            return Err(crate::error::shape_err!(
                "linear {} expects {} inputs, got {:?}",
                self.name,
                self.weight.rows(),
                x.shape()
            ));
        }
        let mut y = crate::kernels::gemm(x.data(), self.weight.data(), m, k, n);
        for row in y.chunks_mut(n) {
            for (v, &b) in row.iter_mut().zip(self.bias.data()) {
                *v += b;
            }
        }
        Tensor::new(vec![m, n], y)
    }
}

#[derive(Clone, Debug)]
pub struct Norm<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

pub const LN_EPS: f64 = 1e-5;

impl<T: Scalar> Norm<T> {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Tensor::ones(&[dim]),
            beta: Tensor::zeros(&[dim]),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let g = ctx.tape.constant(self.gamma.clone());
        let b = ctx.tape.constant(self.beta.clone());
        ctx.tape.layer_norm(x, g, b, T::lit(LN_EPS))
    }
}

/// Token index groups for window attention plus the inverse permutation
/// that restores the original order after concatenation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Windows {
    pub groups: Vec<Vec<usize>>,
    pub inverse: Vec<usize>,
}

impl Windows {
    /// Non-overlapping `window × window` tiles over a `grid × grid` token map.
    pub fn new(grid: usize, window: usize) -> Self {
        let per_side = grid / window;
        let mut groups = Vec::with_capacity(per_side * per_side);
        for wy in 0..per_side {
            for wx in 0..per_side {
                let mut g = Vec::with_capacity(window * window);
                for y in 0..window {
                    for x in 0..window {
                        g.push((wy * window + y) * grid + wx * window + x);
                    }
                }
                groups.push(g);
            }
        }
        let mut inverse = vec![0; grid * grid];
        for (pos, &tok) in groups.iter().flatten().enumerate() {
            inverse[tok] = pos;
        }
        Self { groups, inverse }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Relu,
}

#[derive(Clone, Debug)]
pub struct Mlp<T> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
    pub act: Activation,
}

impl<T: Scalar> Mlp<T> {
    pub fn init<R: Rng + ?Sized>(name: &str, dim: usize, hidden: usize, act: Activation, rng: &mut R) -> Self {
        Self {
            fc1: Linear::init(format!("{name}.fc1"), dim, hidden, rng),
            fc2: Linear::init(format!("{name}.fc2"), hidden, dim, rng),
            act,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(ctx, x)?;
        let h = match self.act {
            Activation::Gelu => ctx.tape.gelu(h),
            Activation::Relu => ctx.tape.relu(h),
        };
        self.fc2.forward(ctx, h)
    }
}

/// Multi-head attention with separate query/key/value projections.
#[derive(Clone, Debug)]
pub struct Attention<T> {
    pub name: String,
    pub heads: usize,
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub proj: Linear<T>,
}

impl<T: Scalar> Attention<T> {
    /// `inner` may be smaller than `dim` (downsampled cross-attention).
    pub fn init<R: Rng + ?Sized>(name: &str, dim: usize, inner: usize, heads: usize, rng: &mut R) -> Self {
        Self {
            name: name.to_string(),
            heads,
            q: Linear::init(format!("{name}.q"), dim, inner, rng),
            k: Linear::init(format!("{name}.k"), dim, inner, rng),
            v: Linear::init(format!("{name}.v"), dim, inner, rng),
            proj: Linear::init(format!("{name}.proj"), inner, dim, rng),
        }
    }

    pub fn inner_dim(&self) -> usize {
        self.q.weight.cols()
    }

    /// Attention over all keys, or within each window when `windows` is
    /// given. Records a trace when the context is tracing.
    pub fn forward(
        &self,
        ctx: &mut Ctx<'_, T>,
        xq: Var,
        xk: Var,
        xv: Var,
        windows: Option<&Windows>,
    ) -> Result<Var> {
        let q = self.q.forward(ctx, xq)?;
        let k = self.k.forward(ctx, xk)?;
        let v = self.v.forward(ctx, xv)?;
        let mut trace = ctx.traces.is_some().then(|| (Vec::new(), Vec::new(), 0usize, 0usize));
        let out = match windows {
            None => self.attend(ctx, q, k, v, &mut trace)?,
            Some(w) => {
                let mut parts = Vec::with_capacity(w.groups.len());
                for idx in &w.groups {
                    let qs = ctx.tape.select_rows(q, idx)?;
                    let ks = ctx.tape.select_rows(k, idx)?;
                    let vs = ctx.tape.select_rows(v, idx)?;
                    parts.push(self.attend(ctx, qs, ks, vs, &mut trace)?);
                }
                let cat = ctx.tape.concat_rows(&parts)?;
                ctx.tape.select_rows(cat, &w.inverse)?
            }
        };
        if let (Some((s, wts, nq, nk)), Some(traces)) = (trace, ctx.traces.as_mut()) {
            let g = s.len() / (nq * nk);
            traces.push(AttentionTrace {
                module_id: self.name.clone(),
                heads: self.heads,
                scores: Tensor::from_parts(vec![g, nq, nk], s),
                weights: Tensor::from_parts(vec![g, nq, nk], wts),
            });
        }
        self.proj.forward(ctx, out)
    }

    #[allow(clippy::type_complexity)]
    fn attend(
        &self,
        ctx: &mut Ctx<'_, T>,
        q: Var,
        k: Var,
        v: Var,
        trace: &mut Option<(Vec<T>, Vec<T>, usize, usize)>,
    ) -> Result<Var> {
        let dh = self.inner_dim() / self.heads;
        let inv = T::one() / T::lit(dh as f64).sqrt();
        let tape = ctx.tape;
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let scores = tape.scale(tape.matmul_nt(qh, kh)?, inv);
            let weights = tape.softmax(scores)?;
            if let Some((s, w, nq, nk)) = trace.as_mut() {
                let sv = tape.value(scores);
                (*nq, *nk) = (sv.rows(), sv.cols());
                s.extend_from_slice(sv.data());
                w.extend_from_slice(tape.value(weights).data());
            }
            let weights = ctx.act(&format!("{}.softmax", self.name), weights)?;
            outs.push(tape.matmul(weights, vh)?);
        }
        tape.concat_cols(&outs)
    }
}

/// Attention weights `[groups × Nq × Nk]` from projected queries and keys,
/// computed exactly as the traced forward does.
pub fn attention_weights<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    heads: usize,
    windows: Option<&Windows>,
) -> Result<Tensor<T>> {
    if q.cols() != k.cols() || heads == 0 || q.cols() % heads != 0 {
        return Err(crate::error::shape_err!("queries {:?} and keys {:?} for {heads} heads", q.shape(), k.shape()));
    }
    let dh = q.cols() / heads;
    let inv = T::one() / T::lit(dh as f64).sqrt();
    let gather = |x: &Tensor<T>, rows: &[usize], h: usize| -> Vec<T> {
        let mut out = Vec::with_capacity(rows.len() * dh);
        for &r in rows {
            out.extend_from_slice(&x.row(r)[h * dh..(h + 1) * dh]);
        }
        out
    };
    let all_q: Vec<usize> = (0..q.rows()).collect();
    let all_k: Vec<usize> = (0..k.rows()).collect();
    let groups: Vec<(&[usize], &[usize])> = match windows {
        Some(w) => w.groups.iter().map(|g| (g.as_slice(), g.as_slice())).collect(),
        None => vec![(all_q.as_slice(), all_k.as_slice())],
    };
    let mut data = Vec::new();
    let (mut nq, mut nk) = (0, 0);
    for (qi, ki) in groups {
        (nq, nk) = (qi.len(), ki.len());
        for h in 0..heads {
            let qh = gather(q, qi, h);
            let kh = gather(k, ki, h);
            let s: Vec<T> = crate::kernels::gemm_nt(&qh, &kh, nq, dh, nk).into_iter().map(|v| v * inv).collect();
            data.extend(crate::kernels::softmax_rows(&s, nk));
        }
    }
    let g = data.len() / (nq * nk).max(1);
    Tensor::new(vec![g, nq, nk], data)
}
