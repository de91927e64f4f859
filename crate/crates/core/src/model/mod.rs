//! Miniature promptable segmenter: windowed/global ViT encoder, neck,
//! prompt encoder and two-way mask decoder, with quantization hook points.

mod config;
mod hooks;
mod io;
mod layers;
mod prompt;
mod stage;

use std::ops::RangeInclusive;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Result};
use crate::{Scalar, Tensor};

pub use config::{LayerKind, ModelConfig};
pub use hooks::{
    attention_of, is_qk_tensor, FakeQuant, LearnVars, NoQuant, Observer, QuantEnv, QuantHooks, Scope,
    WeightQuant,
};
pub use io::{load_weights, read_saqw, save_weights, write_saqw};
pub use layers::{attention_weights, Activation, Attention, AttentionTrace, Ctx, Linear, Mlp, Norm, Windows, LN_EPS};
pub use prompt::{PromptEncoder, PromptSpec};
pub use stage::{stage_partition, StagePlan};

#[derive(Clone, Debug)]
pub struct EncoderBlock<T> {
    pub name: String,
    pub kind: LayerKind,
    pub norm1: Norm<T>,
    pub attn: Attention<T>,
    pub norm2: Norm<T>,
    pub mlp: Mlp<T>,
}

impl<T: Scalar> EncoderBlock<T> {
    fn forward(&self, ctx: &mut Ctx<'_, T>, x: Var, windows: &Windows) -> Result<Var> {
        let w = (self.kind == LayerKind::Window).then_some(windows);
        let h = self.norm1.forward(ctx, x)?;
        let h = self.attn.forward(ctx, h, h, h, w)?;
        let skip = ctx.act(&format!("{}.res1.skip", self.name), x)?;
        let x = ctx.tape.add(skip, h)?;
        let h = self.norm2.forward(ctx, x)?;
        let h = self.mlp.forward(ctx, h)?;
        let skip = ctx.act(&format!("{}.res2.skip", self.name), x)?;
        ctx.tape.add(skip, h)
    }
}

/// Channel reduction applied to encoder tokens before the decoder.
#[derive(Clone, Debug)]
pub struct Neck<T> {
    pub fc: Linear<T>,
    pub norm: Norm<T>,
}

/// Token self-attention, token-to-image and image-to-token cross-attention
/// with an MLP between them; post-norm residuals.
#[derive(Clone, Debug)]
pub struct TwoWayBlock<T> {
    pub name: String,
    pub self_attn: Attention<T>,
    pub norm1: Norm<T>,
    pub t2i: Attention<T>,
    pub norm2: Norm<T>,
    pub mlp: Mlp<T>,
    pub norm3: Norm<T>,
    pub i2t: Attention<T>,
    pub norm4: Norm<T>,
    /// The first block replaces the queries with the self-attention output.
    pub skip_first_pe: bool,
}

/// Decoder state between units.
#[derive(Clone, Copy, Debug)]
pub struct DecoderState {
    pub queries: Var,
    pub keys: Var,
    pub query_pe: Var,
    pub key_pe: Var,
}

impl<T: Scalar> TwoWayBlock<T> {
    fn forward(&self, ctx: &mut Ctx<'_, T>, s: DecoderState) -> Result<DecoderState> {
        let tape = ctx.tape;
        let n = &self.name;
        let mut queries = if self.skip_first_pe {
            self.self_attn.forward(ctx, s.queries, s.queries, s.queries, None)?
        } else {
            let q = tape.add(s.queries, s.query_pe)?;
            let a = self.self_attn.forward(ctx, q, q, s.queries, None)?;
            let skip = ctx.act(&format!("{n}.res1.skip"), s.queries)?;
            tape.add(skip, a)?
        };
        queries = self.norm1.forward(ctx, queries)?;

        let q = tape.add(queries, s.query_pe)?;
        let k = tape.add(s.keys, s.key_pe)?;
        let a = self.t2i.forward(ctx, q, k, s.keys, None)?;
        let skip = ctx.act(&format!("{n}.res2.skip"), queries)?;
        queries = self.norm2.forward(ctx, tape.add(skip, a)?)?;

        let m = self.mlp.forward(ctx, queries)?;
        let skip = ctx.act(&format!("{n}.res3.skip"), queries)?;
        queries = self.norm3.forward(ctx, tape.add(skip, m)?)?;

        let q = tape.add(queries, s.query_pe)?;
        let a = self.i2t.forward(ctx, k, q, queries, None)?;
        let skip = ctx.act(&format!("{n}.res4.skip"), s.keys)?;
        let keys = self.norm4.forward(ctx, tape.add(skip, a)?)?;
        Ok(DecoderState { queries, keys, ..s })
    }
}

#[derive(Clone, Debug)]
pub struct MaskDecoder<T> {
    pub mask_token: Tensor<T>,
    pub blocks: Vec<TwoWayBlock<T>>,
    pub final_t2i: Attention<T>,
    pub final_norm: Norm<T>,
    pub hyper: Mlp<T>,
}

/// Stage outputs of the encoder and the neck embedding of the last one.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageEncoding<T> {
    pub stage_outputs: Vec<Tensor<T>>,
    pub embedding: Tensor<T>,
}

/// Tape handles produced by [`Model::decode`].
#[derive(Clone, Copy, Debug)]
pub struct Decoded {
    /// `[grid² × 1]` mask logits at token resolution.
    pub mask_lowres: Var,
    /// Image tokens after the two-way blocks.
    pub hybrid: Var,
    pub state: DecoderState,
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub cfg: ModelConfig,
    pub patch_embed: Linear<T>,
    pub pos_embed: Tensor<T>,
    pub blocks: Vec<EncoderBlock<T>>,
    pub neck: Neck<T>,
    pub prompt: PromptEncoder<T>,
    pub decoder: MaskDecoder<T>,
    windows: Windows,
    plan: StagePlan,
}

/// Deterministic seeded initialization.
pub fn build_model<T: Scalar>(cfg: &ModelConfig) -> Result<Model<T>> {
    Model::build(cfg)
}

impl<T: Scalar> Model<T> {
    pub fn build(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = cfg.embed_dim;
        let nd = cfg.neck_dim;
        let patch_dim = cfg.in_channels * cfg.patch_size * cfg.patch_size;
        let patch_embed = Linear::init("patch_embed".into(), patch_dim, d, &mut rng).unquantized();
        let pos_embed = Tensor::randn(&[cfg.num_tokens(), d], 0.5, &mut rng);
        let blocks = cfg
            .layer_kinds()
            .into_iter()
            .enumerate()
            .map(|(l, kind)| {
                let name = format!("enc.{l}");
                EncoderBlock {
                    norm1: Norm::new(d),
                    attn: Attention::init(&format!("{name}.attn"), d, d, cfg.num_heads, &mut rng),
                    norm2: Norm::new(d),
                    mlp: Mlp::init(&format!("{name}.mlp"), d, d * cfg.mlp_ratio, Activation::Gelu, &mut rng),
                    kind,
                    name,
                }
            })
            .collect();
        let neck = Neck {
            fc: Linear::init("neck.fc".into(), d, nd, &mut rng),
            norm: Norm::new(nd),
        };
        let prompt = PromptEncoder::init(nd, &mut rng);
        let dblocks = (0..cfg.decoder_layers)
            .map(|i| {
                let name = format!("dec.{i}");
                TwoWayBlock {
                    self_attn: Attention::init(&format!("{name}.self"), nd, nd, cfg.num_heads, &mut rng),
                    norm1: Norm::new(nd),
                    t2i: Attention::init(&format!("{name}.t2i"), nd, nd, cfg.num_heads, &mut rng),
                    norm2: Norm::new(nd),
                    mlp: Mlp::init(&format!("{name}.mlp"), nd, cfg.decoder_mlp_dim, Activation::Relu, &mut rng),
                    norm3: Norm::new(nd),
                    i2t: Attention::init(&format!("{name}.i2t"), nd, nd, cfg.num_heads, &mut rng),
                    norm4: Norm::new(nd),
                    skip_first_pe: i == 0,
                    name,
                }
            })
            .collect();
        let mut hyper = Mlp::init("dec.hyper", nd, nd, Activation::Relu, &mut rng);
        hyper.fc1.quantized = false;
        hyper.fc2.quantized = false;
        let decoder = MaskDecoder {
            mask_token: Tensor::randn(&[1, nd], 1.0, &mut rng),
            blocks: dblocks,
            final_t2i: Attention::init("dec.final.t2i", nd, nd, cfg.num_heads, &mut rng),
            final_norm: Norm::new(nd),
            hyper,
        };
        Ok(Self {
            windows: Windows::new(cfg.grid(), cfg.window_size),
            plan: stage_partition(&cfg.layer_kinds())?,
            cfg: cfg.clone(),
            patch_embed,
            pos_embed,
            blocks,
            neck,
            prompt,
            decoder,
        })
    }

    pub fn plan(&self) -> &StagePlan {
        &self.plan
    }

    pub fn windows(&self) -> &Windows {
        &self.windows
    }

    /// Window partition used by attention module `name`, if windowed.
    pub fn attention_windows(&self, name: &str) -> Option<&Windows> {
        self.blocks
            .iter()
            .find(|b| b.attn.name == name)
            .filter(|b| b.kind == LayerKind::Window)
            .map(|_| &self.windows)
    }

    /// `[C × H × W]` image to `[grid² × C·p·p]` patch rows (row-major over the grid).
    pub fn patchify(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let c = &self.cfg;
        if image.shape() != [c.in_channels, c.image_size, c.image_size] {
            return Err(shape_err!(
                "image of shape {:?}, expected [{}, {}, {}]",
                image.shape(),
                c.in_channels,
                c.image_size,
                c.image_size
            ));
        }
        let (g, p, s) = (c.grid(), c.patch_size, c.image_size);
        let mut data = Vec::with_capacity(image.numel());
        for gy in 0..g {
            for gx in 0..g {
                for ch in 0..c.in_channels {
                    for y in 0..p {
                        let row = ch * s * s + (gy * p + y) * s + gx * p;
                        data.extend_from_slice(&image.data()[row..row + p]);
                    }
                }
            }
        }
        Tensor::new(vec![g * g, c.in_channels * p * p], data)
    }

    /// Patch embedding plus positional embedding.
    pub fn embed(&self, ctx: &mut Ctx<'_, T>, image: &Tensor<T>) -> Result<Var> {
        let patches = ctx.tape.constant(self.patchify(image)?);
        let x = self.patch_embed.forward(ctx, patches)?;
        let pos = ctx.tape.constant(self.pos_embed.clone());
        ctx.tape.add(x, pos)
    }

    /// Runs encoder layers `layers` on tokens `x`.
    pub fn run_layers(&self, ctx: &mut Ctx<'_, T>, mut x: Var, layers: RangeInclusive<usize>) -> Result<Var> {
        if *layers.end() >= self.blocks.len() {
            return Err(shape_err!("layer range {layers:?} beyond {} layers", self.blocks.len()));
        }
        for l in layers {
            x = self.blocks[l].forward(ctx, x, &self.windows)?;
        }
        Ok(x)
    }

    pub fn run_neck(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let h = self.neck.fc.forward(ctx, x)?;
        self.neck.norm.forward(ctx, h)
    }

    /// Neck applied directly to the output of stage `k`, skipping the
    /// remaining encoder layers.
    pub fn forward_from_stage(&self, ctx: &mut Ctx<'_, T>, tokens: Var, k: usize) -> Result<Var> {
        if k >= self.plan.len() {
            return Err(shape_err!("stage {k} of {}", self.plan.len()));
        }
        let shape = ctx.tape.shape(tokens);
        if shape != [self.cfg.num_tokens(), self.cfg.embed_dim] {
            return Err(shape_err!("stage tokens of shape {shape:?}"));
        }
        self.run_neck(ctx, tokens)
    }

    /// Encoder on the tape; returns every stage output and the embedding.
    pub fn encode(&self, ctx: &mut Ctx<'_, T>, image: &Tensor<T>) -> Result<(Vec<Var>, Var)> {
        let mut x = self.embed(ctx, image)?;
        let mut outs = Vec::with_capacity(self.plan.len());
        for r in &self.plan.stages {
            x = self.run_layers(ctx, x, r.clone())?;
            outs.push(x);
        }
        let emb = self.run_neck(ctx, x)?;
        Ok((outs, emb))
    }

    /// Full-precision encoding.
    pub fn encode_image(&self, image: &Tensor<T>) -> Result<ImageEncoding<T>> {
        self.encode_image_with(&mut NoQuant, image)
    }

    pub fn encode_image_with(&self, hooks: &mut dyn QuantHooks<T>, image: &Tensor<T>) -> Result<ImageEncoding<T>> {
        let tape = Tape::new();
        let mut ctx = Ctx::new(&tape, hooks);
        let (outs, emb) = self.encode(&mut ctx, image)?;
        Ok(ImageEncoding {
            stage_outputs: outs.into_iter().map(|v| tape.get(v)).collect(),
            embedding: tape.get(emb),
        })
    }

    pub fn encode_prompts(&self, prompts: &[PromptSpec]) -> Result<Tensor<T>> {
        self.prompt.encode(prompts, self.cfg.image_size)
    }

    /// Initial decoder state: queries are the mask token followed by the
    /// prompt tokens; the prompt tokens also serve as query positions.
    pub fn decoder_start(&self, ctx: &mut Ctx<'_, T>, embedding: Var, prompt_tokens: &Tensor<T>) -> Result<DecoderState> {
        let nd = self.cfg.neck_dim;
        if prompt_tokens.rank() != 2 || prompt_tokens.cols() != nd {
            return Err(shape_err!("prompt tokens {:?} for decoder width {nd}", prompt_tokens.shape()));
        }
        let eshape = ctx.tape.shape(embedding);
        if eshape != [self.cfg.num_tokens(), nd] {
            return Err(shape_err!("image embedding {eshape:?}, expected [{}, {nd}]", self.cfg.num_tokens()));
        }
        let mut qd = self.decoder.mask_token.data().to_vec();
        qd.extend_from_slice(prompt_tokens.data());
        let queries = Tensor::new(vec![1 + prompt_tokens.rows(), nd], qd)?;
        let queries = ctx.tape.constant(queries);
        Ok(DecoderState {
            queries,
            keys: embedding,
            query_pe: queries,
            key_pe: ctx.tape.constant(self.prompt.dense_pe(self.cfg.grid())),
        })
    }

    pub fn decoder_block(&self, ctx: &mut Ctx<'_, T>, i: usize, s: DecoderState) -> Result<DecoderState> {
        self.decoder.blocks[i].forward(ctx, s)
    }

    /// Final token-to-image attention; updates the queries only.
    pub fn decoder_final(&self, ctx: &mut Ctx<'_, T>, s: DecoderState) -> Result<DecoderState> {
        let tape = ctx.tape;
        let q = tape.add(s.queries, s.query_pe)?;
        let k = tape.add(s.keys, s.key_pe)?;
        let a = self.decoder.final_t2i.forward(ctx, q, k, s.keys, None)?;
        let skip = ctx.act("dec.final.res.skip", s.queries)?;
        let queries = self.decoder.final_norm.forward(ctx, tape.add(skip, a)?)?;
        Ok(DecoderState { queries, ..s })
    }

    /// Mask logits at token resolution: similarity of each image token to
    /// the transformed mask token, centered on its mean over the image.
    pub fn mask_head(&self, ctx: &mut Ctx<'_, T>, s: DecoderState) -> Result<Var> {
        let tape = ctx.tape;
        let tok = tape.select_rows(s.queries, &[0])?;
        let h = self.decoder.hyper.forward(ctx, tok)?;
        let sim = tape.matmul_nt(s.keys, h)?;
        let shift = tape.scale(tape.mean(sim), -T::one());
        tape.add_bias(sim, shift)
    }

    /// Two-way blocks, final attention and mask head.
    pub fn decode(&self, ctx: &mut Ctx<'_, T>, embedding: Var, prompt_tokens: &Tensor<T>) -> Result<Decoded> {
        let mut s = self.decoder_start(ctx, embedding, prompt_tokens)?;
        for i in 0..self.decoder.blocks.len() {
            s = self.decoder_block(ctx, i, s)?;
        }
        let hybrid = s.keys;
        s = self.decoder_final(ctx, s)?;
        let mask_lowres = self.mask_head(ctx, s)?;
        Ok(Decoded { mask_lowres, hybrid, state: s })
    }

    /// Full-precision decoding: `[H × W]` mask logits and the hybrid image tokens.
    pub fn decode_masks(&self, embedding: &Tensor<T>, prompt_tokens: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        self.decode_masks_with(&mut NoQuant, embedding, prompt_tokens)
    }

    pub fn decode_masks_with(
        &self,
        hooks: &mut dyn QuantHooks<T>,
        embedding: &Tensor<T>,
        prompt_tokens: &Tensor<T>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let tape = Tape::new();
        let mut ctx = Ctx::new(&tape, hooks);
        let emb = tape.constant(embedding.clone());
        let d = self.decode(&mut ctx, emb, prompt_tokens)?;
        let logits = self.upsample(&tape.value(d.mask_lowres))?;
        Ok((logits, tape.get(d.hybrid)))
    }

    /// Image and prompts to `[H × W]` mask logits under `hooks`.
    pub fn predict(&self, hooks: &mut dyn QuantHooks<T>, image: &Tensor<T>, prompts: &[PromptSpec]) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let mut ctx = Ctx::new(&tape, hooks);
        let (_, emb) = self.encode(&mut ctx, image)?;
        let pt = self.encode_prompts(prompts)?;
        let d = self.decode(&mut ctx, emb, &pt)?;
        let logits = self.upsample(&tape.value(d.mask_lowres))?;
        logits.ensure_finite("mask logits")?;
        Ok(logits)
    }

    /// [`Model::predict`] with attention tracing.
    pub fn trace(
        &self,
        hooks: &mut dyn QuantHooks<T>,
        image: &Tensor<T>,
        prompts: &[PromptSpec],
    ) -> Result<(Tensor<T>, Vec<AttentionTrace<T>>)> {
        let tape = Tape::new();
        let mut ctx = Ctx::new(&tape, hooks).traced();
        let (_, emb) = self.encode(&mut ctx, image)?;
        let pt = self.encode_prompts(prompts)?;
        let d = self.decode(&mut ctx, emb, &pt)?;
        let logits = self.upsample(&tape.value(d.mask_lowres))?;
        Ok((logits, ctx.take_traces()))
    }

    /// Bilinear upsampling of `[grid² × 1]` logits to `[H × W]`
    /// (half-pixel centers, edge clamped).
    pub fn upsample(&self, lowres: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.cfg.grid();
        if lowres.numel() != g * g {
            return Err(shape_err!("low-resolution mask of {} values for grid {g}", lowres.numel()));
        }
        let s = self.cfg.image_size;
        let f = g as f64 / s as f64;
        let src = lowres.data();
        let coord = |i: usize| {
            let c = ((i as f64 + 0.5) * f - 0.5).clamp(0.0, (g - 1) as f64);
            let i0 = c.floor() as usize;
            let i1 = (i0 + 1).min(g - 1);
            (i0, i1, T::lit(c - i0 as f64))
        };
        let mut out = Vec::with_capacity(s * s);
        for y in 0..s {
            let (y0, y1, ty) = coord(y);
            for x in 0..s {
                let (x0, x1, tx) = coord(x);
                let a = src[y0 * g + x0] * (T::one() - tx) + src[y0 * g + x1] * tx;
                let b = src[y1 * g + x0] * (T::one() - tx) + src[y1 * g + x1] * tx;
                out.push(a * (T::one() - ty) + b * ty);
            }
        }
        Tensor::new(vec![s, s], out)
    }

    /// Every linear layer, encoder first.
    pub fn linears(&self) -> Vec<&Linear<T>> {
        let mut v = vec![&self.patch_embed];
        for b in &self.blocks {
            v.extend(attn_linears(&b.attn));
            v.extend([&b.mlp.fc1, &b.mlp.fc2]);
        }
        v.push(&self.neck.fc);
        for b in &self.decoder.blocks {
            v.extend(attn_linears(&b.self_attn));
            v.extend(attn_linears(&b.t2i));
            v.extend([&b.mlp.fc1, &b.mlp.fc2]);
            v.extend(attn_linears(&b.i2t));
        }
        v.extend(attn_linears(&self.decoder.final_t2i));
        v.extend([&self.decoder.hyper.fc1, &self.decoder.hyper.fc2]);
        v
    }

    pub fn linears_mut(&mut self) -> Vec<&mut Linear<T>> {
        linears_of(&mut self.patch_embed, &mut self.blocks, &mut self.neck, &mut self.decoder)
    }

    pub fn linear(&self, name: &str) -> Option<&Linear<T>> {
        self.linears().into_iter().find(|l| l.name == name)
    }

    pub fn linear_mut(&mut self, name: &str) -> Option<&mut Linear<T>> {
        self.linears_mut().into_iter().find(|l| l.name == name)
    }

    /// Every attention module with its name.
    pub fn attentions(&self) -> Vec<&Attention<T>> {
        let mut v: Vec<&Attention<T>> = self.blocks.iter().map(|b| &b.attn).collect();
        for b in &self.decoder.blocks {
            v.extend([&b.self_attn, &b.t2i, &b.i2t]);
        }
        v.push(&self.decoder.final_t2i);
        v
    }

    /// Every stored tensor under a stable name, for serialization.
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut v: Vec<(String, &mut Tensor<T>)> = Vec::new();
        fn norm<'a, T>(v: &mut Vec<(String, &'a mut Tensor<T>)>, n: String, x: &'a mut Norm<T>) {
            v.push((format!("{n}.gamma"), &mut x.gamma));
            v.push((format!("{n}.beta"), &mut x.beta));
        }
        fn lin<'a, T>(v: &mut Vec<(String, &'a mut Tensor<T>)>, l: &'a mut Linear<T>) {
            v.push((format!("{}.weight", l.name), &mut l.weight));
            v.push((format!("{}.bias", l.name), &mut l.bias));
        }
        fn attn<'a, T>(v: &mut Vec<(String, &'a mut Tensor<T>)>, a: &'a mut Attention<T>) {
            for l in attn_linears_mut(a) {
                lin(v, l);
            }
        }
        lin(&mut v, &mut self.patch_embed);
        v.push(("pos_embed".into(), &mut self.pos_embed));
        for b in &mut self.blocks {
            norm(&mut v, format!("{}.norm1", b.name), &mut b.norm1);
            attn(&mut v, &mut b.attn);
            norm(&mut v, format!("{}.norm2", b.name), &mut b.norm2);
            lin(&mut v, &mut b.mlp.fc1);
            lin(&mut v, &mut b.mlp.fc2);
        }
        lin(&mut v, &mut self.neck.fc);
        norm(&mut v, "neck.norm".into(), &mut self.neck.norm);
        v.push(("prompt.freqs".into(), &mut self.prompt.freqs));
        v.push(("prompt.type_embed".into(), &mut self.prompt.type_embed));
        let d = &mut self.decoder;
        v.push(("dec.mask_token".into(), &mut d.mask_token));
        for b in &mut d.blocks {
            attn(&mut v, &mut b.self_attn);
            norm(&mut v, format!("{}.norm1", b.name), &mut b.norm1);
            attn(&mut v, &mut b.t2i);
            norm(&mut v, format!("{}.norm2", b.name), &mut b.norm2);
            lin(&mut v, &mut b.mlp.fc1);
            lin(&mut v, &mut b.mlp.fc2);
            norm(&mut v, format!("{}.norm3", b.name), &mut b.norm3);
            attn(&mut v, &mut b.i2t);
            norm(&mut v, format!("{}.norm4", b.name), &mut b.norm4);
        }
        attn(&mut v, &mut d.final_t2i);
        norm(&mut v, "dec.final.norm".into(), &mut d.final_norm);
        lin(&mut v, &mut d.hyper.fc1);
        lin(&mut v, &mut d.hyper.fc2);
        v
    }
}

fn linears_of<'a, T>(
    patch_embed: &'a mut Linear<T>,
    blocks: &'a mut [EncoderBlock<T>],
    neck: &'a mut Neck<T>,
    decoder: &'a mut MaskDecoder<T>,
) -> Vec<&'a mut Linear<T>> {
    let mut v = vec![patch_embed];
    for b in blocks {
        v.extend(attn_linears_mut(&mut b.attn));
        v.extend([&mut b.mlp.fc1, &mut b.mlp.fc2]);
    }
    v.push(&mut neck.fc);
    for b in &mut decoder.blocks {
        v.extend(attn_linears_mut(&mut b.self_attn));
        v.extend(attn_linears_mut(&mut b.t2i));
        v.extend([&mut b.mlp.fc1, &mut b.mlp.fc2]);
        v.extend(attn_linears_mut(&mut b.i2t));
    }
    v.extend(attn_linears_mut(&mut decoder.final_t2i));
    v.extend([&mut decoder.hyper.fc1, &mut decoder.hyper.fc2]);
    v
}

fn attn_linears<T>(a: &Attention<T>) -> [&Linear<T>; 4] {
    [&a.q, &a.k, &a.v, &a.proj]
}

fn attn_linears_mut<T>(a: &mut Attention<T>) -> [&mut Linear<T>; 4] {
    [&mut a.q, &mut a.k, &mut a.v, &mut a.proj]
}
