//! Promptable segmentation model: patch-transformer image encoder, prompt
//! encoder, and two-way mask decoders run as draft and refine stages.

use std::collections::BTreeSet;
use std::f64::consts::TAU;
use std::sync::Arc;

use spt_tensor::{bilinear_weights, Tape, Tensor, TensorError, Var};

use crate::config::{LayerKind, ModelConfig, PeftKind, PeftTarget, Placement, RunConfig, SdtConfig, VraConfig};
use crate::error::{Result, SptError};
use crate::mask::Image;
use crate::nn::{Activation, Attention, Builder, LayerNorm, Linear, Mlp};
use crate::params::{Bound, ParamId, ParamStore};
use crate::peft::{self, AdapterModule, PeftSites};
use crate::prompt::{PointLabel, PromptSet};
use crate::rng;
use crate::vra;

#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
    pub adapter: Option<AdapterModule>,
}

impl EncoderBlock {
    fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = self.ln1.forward(tape, p, x)?;
        let h = self.attn.forward(tape, p, h, h, h)?;
        let x = tape.add(x, h)?;
        let h = self.ln2.forward(tape, p, x)?;
        let h = self.mlp.forward(tape, p, h)?;
        let x = tape.add(x, h)?;
        match &self.adapter {
            Some(a) => a.forward(tape, p, x),
            None => Ok(x),
        }
    }
}

/// Non-overlapping patch embedding, learned positions, pre-norm blocks.
#[derive(Clone, Debug)]
pub struct ImageEncoder {
    pub image_size: usize,
    pub patch_size: usize,
    pub dim: usize,
    pub patch_embed: Linear,
    pub pos_embed: ParamId,
    pub blocks: Vec<EncoderBlock>,
    pub neck: LayerNorm,
}

impl ImageEncoder {
    fn build(b: &mut Builder, cfg: &ModelConfig) -> Self {
        let d = cfg.encoder_dim;
        let n = cfg.grid() * cfg.grid();
        let p2 = cfg.patch_size * cfg.patch_size;
        let blocks = (0..cfg.encoder_depth)
            .map(|i| {
                let name = format!("image_encoder.blocks.{i}");
                EncoderBlock {
                    ln1: b.layer_norm(&format!("{name}.ln1"), d),
                    attn: Attention::build(b, &format!("{name}.attn"), d, d, cfg.encoder_heads),
                    ln2: b.layer_norm(&format!("{name}.ln2"), d),
                    mlp: Mlp::build(b, &format!("{name}.mlp"), &[d, 4 * d, d], LayerKind::Mlp, Activation::Gelu),
                    adapter: None,
                }
            })
            .collect();
        ImageEncoder {
            image_size: cfg.image_size,
            patch_size: cfg.patch_size,
            dim: d,
            patch_embed: b.linear("image_encoder.patch_embed", p2, d, LayerKind::Embed, true),
            pos_embed: b.normal("image_encoder.pos_embed", &[n, d], 0.02),
            blocks,
            neck: b.layer_norm("image_encoder.neck", d),
        }
    }

    /// `[batch, tokens, patch²]` pixel patches, tokens in row-major grid order.
    pub fn patchify(&self, images: &[&Image]) -> Result<Tensor> {
        let (s, ps) = (self.image_size, self.patch_size);
        let g = s / ps;
        let mut out = Vec::with_capacity(images.len() * s * s);
        for img in images {
            if img.width() != s || img.height() != s {
                return Err(TensorError::Dimension(format!(
                    "image is {}x{}, model expects {s}x{s}",
                    img.width(),
                    img.height()
                ))
                .into());
            }
            for py in 0..g {
                for px in 0..g {
                    for dy in 0..ps {
                        let row = (py * ps + dy) * s + px * ps;
                        out.extend_from_slice(&img.data()[row..row + ps]);
                    }
                }
            }
        }
        if images.is_empty() {
            return Err(SptError::DegenerateInput("empty image batch".into()));
        }
        Ok(Tensor::new(vec![images.len(), g * g, ps * ps], out)?)
    }

    /// Patch embedding plus positional term, before the transformer blocks.
    pub fn embed_patches(&self, tape: &mut Tape, p: &Bound, images: &[&Image]) -> Result<Var> {
        let patches = tape.constant(self.patchify(images)?);
        let x = self.patch_embed.forward(tape, p, patches)?;
        Ok(tape.add(x, p[self.pos_embed])?)
    }

    /// `[batch, tokens, dim]` image embeddings.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, images: &[&Image]) -> Result<Var> {
        let mut x = self.embed_patches(tape, p, images)?;
        for block in &self.blocks {
            x = block.forward(tape, p, x)?;
        }
        self.neck.forward(tape, p, x)
    }
}

#[derive(Clone, Debug)]
pub struct MaskStage {
    pub factor: usize,
    pub linear: Linear,
}

/// Sparse tokens from points and boxes, the dense grid embedding, and the
/// grid positional encoding.
#[derive(Clone, Debug)]
pub struct PromptEncoder {
    pub dim: usize,
    pub image_size: usize,
    pub grid: usize,
    /// Frozen random Fourier basis, `[2, dim / 2]`.
    pub gaussian: Tensor,
    pub pos_grid: Arc<Tensor>,
    /// Indexed by label: background, foreground.
    pub point_embed: [ParamId; 2],
    /// Top-left, bottom-right.
    pub corner_embed: [ParamId; 2],
    pub no_mask: ParamId,
    pub mask_stages: Vec<MaskStage>,
    pub adapter: Option<AdapterModule>,
}

pub struct PromptEmbeddings {
    pub sparse: Option<Var>,
    pub dense: Var,
    pub pos: Var,
}

impl PromptEncoder {
    fn build(b: &mut Builder, cfg: &ModelConfig) -> Self {
        let d = cfg.decoder_dim;
        let gaussian = crate::nn::normal_tensor(&mut b.rng, &[2, d / 2], 1.0);
        let mut stages = Vec::new();
        let (mut channels, mut remaining) = (1, cfg.patch_size);
        while remaining > 1 {
            let factor = if stages.is_empty() && remaining >= 4 { 4 } else { 2 };
            remaining /= factor;
            let in_dim = channels * factor * factor;
            let out_dim = if remaining == 1 { d } else { 16 };
            let name = format!("prompt_encoder.mask.{}", stages.len());
            stages.push(MaskStage {
                factor,
                linear: b.linear(&name, in_dim, out_dim, LayerKind::Embed, true),
            });
            channels = out_dim;
        }
        let mut enc = PromptEncoder {
            dim: d,
            image_size: cfg.image_size,
            grid: cfg.grid(),
            gaussian,
            pos_grid: Arc::new(Tensor::scalar(0.0)),
            point_embed: [
                b.normal("prompt_encoder.point_embed.background", &[d], 1.0),
                b.normal("prompt_encoder.point_embed.foreground", &[d], 1.0),
            ],
            corner_embed: [
                b.normal("prompt_encoder.corner_embed.top_left", &[d], 1.0),
                b.normal("prompt_encoder.corner_embed.bottom_right", &[d], 1.0),
            ],
            no_mask: b.normal("prompt_encoder.no_mask", &[d], 1.0),
            mask_stages: stages,
            adapter: None,
        };
        let g = enc.grid;
        let mut grid = Vec::with_capacity(g * g * d);
        for y in 0..g {
            for x in 0..g {
                grid.extend(enc.fourier((x as f64 + 0.5) / g as f64, (y as f64 + 0.5) / g as f64));
            }
        }
        enc.pos_grid = Arc::new(Tensor::new(vec![g * g, d], grid).expect("positive shape"));
        enc
    }

    /// Fourier features of a point with coordinates normalized to `[0, 1]`.
    pub fn fourier(&self, u: f64, v: f64) -> Vec<f64> {
        let half = self.dim / 2;
        let (cu, cv) = (2.0 * u - 1.0, 2.0 * v - 1.0);
        let g = self.gaussian.data();
        let proj: Vec<f64> = (0..half).map(|j| TAU * (cu * g[j] + cv * g[half + j])).collect();
        proj.iter().map(|a| a.sin()).chain(proj.iter().map(|a| a.cos())).collect()
    }

    fn pixel_fourier(&self, x: f64, y: f64) -> Vec<f64> {
        let s = self.image_size as f64;
        self.fourier((x + 0.5) / s, (y + 0.5) / s)
    }

    fn token(&self, tape: &mut Tape, p: &Bound, x: f64, y: f64, embed: ParamId) -> Result<Var> {
        let pe = tape.constant(Tensor::new(vec![1, self.dim], self.pixel_fourier(x, y))?);
        Ok(tape.add(pe, p[embed])?)
    }

    /// `[n_s, dim]`, points first then two corners per box; `None` when the
    /// set has neither.
    pub fn encode_sparse(&self, tape: &mut Tape, p: &Bound, prompts: &PromptSet) -> Result<Option<Var>> {
        let mut tokens = Vec::with_capacity(prompts.sparse_len());
        for pt in &prompts.points {
            let label = match pt.label {
                PointLabel::Background => 0,
                PointLabel::Foreground => 1,
            };
            tokens.push(self.token(tape, p, pt.x, pt.y, self.point_embed[label])?);
        }
        for b in &prompts.boxes {
            tokens.push(self.token(tape, p, b.x0, b.y0, self.corner_embed[0])?);
            tokens.push(self.token(tape, p, b.x1, b.y1, self.corner_embed[1])?);
        }
        if tokens.is_empty() {
            return Ok(None);
        }
        Ok(Some(tape.concat(&tokens, 0)?))
    }

    /// The no-mask embedding broadcast over the grid.
    pub fn dense_default(&self, tape: &mut Tape, p: &Bound) -> Result<Var> {
        let zeros = tape.constant(Tensor::zeros(&[self.grid * self.grid, self.dim]));
        Ok(tape.add(zeros, p[self.no_mask])?)
    }

    /// Downscales an image-resolution probability map to a `[tokens, dim]`
    /// dense embedding.
    pub fn encode_mask(&self, tape: &mut Tape, p: &Bound, probs: Var) -> Result<Var> {
        let s = self.image_size;
        let mut x = tape.reshape(probs, &[s, s, 1])?;
        let last = self.mask_stages.len() - 1;
        for (i, stage) in self.mask_stages.iter().enumerate() {
            x = tape.space_to_depth(x, stage.factor)?;
            x = stage.linear.forward(tape, p, x)?;
            if i < last {
                x = tape.gelu(x)?;
            }
        }
        let x = tape.reshape(x, &[self.grid * self.grid, self.dim])?;
        match &self.adapter {
            Some(a) => a.forward(tape, p, x),
            None => Ok(x),
        }
    }

    pub fn positional(&self, tape: &mut Tape) -> Var {
        tape.constant(Arc::clone(&self.pos_grid))
    }

    pub fn encode(&self, tape: &mut Tape, p: &Bound, prompts: &PromptSet) -> Result<PromptEmbeddings> {
        prompts.validate(self.image_size)?;
        let sparse = self.encode_sparse(tape, p, prompts)?;
        let dense = match &prompts.mask_prompt {
            Some(m) => {
                let m = tape.constant(m.clone());
                self.encode_mask(tape, p, m)?
            }
            None => self.dense_default(tape, p)?,
        };
        let pos = self.positional(tape);
        Ok(PromptEmbeddings { sparse, dense, pos })
    }
}

#[derive(Clone, Debug)]
pub struct TwoWayBlock {
    pub self_attn: Attention,
    pub ln1: LayerNorm,
    pub token_to_image: Attention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
    pub ln3: LayerNorm,
    pub image_to_token: Attention,
    pub ln4: LayerNorm,
    pub adapter: Option<AdapterModule>,
}

impl TwoWayBlock {
    fn build(b: &mut Builder, name: &str, d: usize, heads: usize) -> Self {
        TwoWayBlock {
            self_attn: Attention::build(b, &format!("{name}.self_attn"), d, d, heads),
            ln1: b.layer_norm(&format!("{name}.ln1"), d),
            token_to_image: Attention::build(b, &format!("{name}.token_to_image"), d, d / 2, heads),
            ln2: b.layer_norm(&format!("{name}.ln2"), d),
            mlp: Mlp::build(b, &format!("{name}.mlp"), &[d, 4 * d, d], LayerKind::Mlp, Activation::Relu),
            ln3: b.layer_norm(&format!("{name}.ln3"), d),
            image_to_token: Attention::build(b, &format!("{name}.image_to_token"), d, d / 2, heads),
            ln4: b.layer_norm(&format!("{name}.ln4"), d),
            adapter: None,
        }
    }

    /// Returns the updated `(t_out, t_img)`. `token_pe` is added to token
    /// queries/keys and `pos` to image keys/queries in every attention.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, t_out: Var, t_img: Var, token_pe: Var, pos: Var) -> Result<(Var, Var)> {
        let q = tape.add(t_out, token_pe)?;
        let a = self.self_attn.forward(tape, p, q, q, t_out)?;
        let t_out = tape.add(t_out, a)?;
        let t_out = self.ln1.forward(tape, p, t_out)?;

        let q = tape.add(t_out, token_pe)?;
        let k = tape.add(t_img, pos)?;
        let a = self.token_to_image.forward(tape, p, q, k, t_img)?;
        let t_out = tape.add(t_out, a)?;
        let t_out = self.ln2.forward(tape, p, t_out)?;

        let m = self.mlp.forward(tape, p, t_out)?;
        let t_out = tape.add(t_out, m)?;
        let mut t_out = self.ln3.forward(tape, p, t_out)?;
        if let Some(adapter) = &self.adapter {
            t_out = adapter.forward(tape, p, t_out)?;
        }

        let q = tape.add(t_out, token_pe)?;
        let k = tape.add(t_img, pos)?;
        let a = self.image_to_token.forward(tape, p, k, q, t_out)?;
        let t_img = tape.add(t_img, a)?;
        let t_img = self.ln4.forward(tape, p, t_img)?;
        Ok((t_out, t_img))
    }
}

pub struct DecoderOutput {
    /// `[image_size, image_size]` mask logits.
    pub logits: Var,
    /// `[1, num_mask_tokens]` predicted IoU per mask token.
    pub iou: Var,
    pub t_out: Var,
    pub t_img: Var,
}

#[derive(Clone, Debug)]
pub struct MaskDecoder {
    pub prefix: String,
    pub dim: usize,
    pub grid: usize,
    pub image_size: usize,
    pub num_mask_tokens: usize,
    pub iou_token: ParamId,
    pub mask_tokens: ParamId,
    pub blocks: Vec<TwoWayBlock>,
    pub final_attn: Attention,
    pub final_ln: LayerNorm,
    pub up1: Linear,
    pub up1_bias: ParamId,
    pub up2: Linear,
    pub up2_bias: ParamId,
    pub hypernet: Mlp,
    pub iou_head: Mlp,
    /// Relation scale after each two-way block, when placed there.
    pub vra_beta: [Option<ParamId>; 2],
    /// `[image_size, 4 * grid]` bilinear resize operator.
    pub resize: Arc<Tensor>,
}

impl MaskDecoder {
    fn build(b: &mut Builder, prefix: &str, cfg: &ModelConfig) -> Self {
        let d = cfg.decoder_dim;
        let m = cfg.num_mask_tokens;
        let (c1, c2) = (d / 4, d / 8);
        let g = cfg.grid();
        MaskDecoder {
            prefix: prefix.to_string(),
            dim: d,
            grid: g,
            image_size: cfg.image_size,
            num_mask_tokens: m,
            iou_token: b.normal(&format!("{prefix}.iou_token"), &[1, d], 1.0),
            mask_tokens: b.normal(&format!("{prefix}.mask_tokens"), &[m, d], 1.0),
            blocks: (0..2)
                .map(|i| TwoWayBlock::build(b, &format!("{prefix}.blocks.{i}"), d, cfg.decoder_heads))
                .collect(),
            final_attn: Attention::build(b, &format!("{prefix}.final_attn"), d, d / 2, cfg.decoder_heads),
            final_ln: b.layer_norm(&format!("{prefix}.final_ln"), d),
            up1: b.linear(&format!("{prefix}.up1"), d, 4 * c1, LayerKind::Upsample, false),
            up1_bias: b.constant(&format!("{prefix}.up1.bias"), &[c1], 0.0),
            up2: b.linear(&format!("{prefix}.up2"), c1, 4 * c2, LayerKind::Upsample, false),
            up2_bias: b.constant(&format!("{prefix}.up2.bias"), &[c2], 0.0),
            hypernet: Mlp::build(b, &format!("{prefix}.hypernet"), &[d, d, d, c2], LayerKind::Head, Activation::Relu),
            iou_head: Mlp::build(b, &format!("{prefix}.iou_head"), &[d, d, d, m], LayerKind::Head, Activation::Relu),
            vra_beta: [None, None],
            resize: Arc::new(bilinear_weights(cfg.image_size, 4 * g)),
        }
    }

    /// Two stride-2 transposed convolutions with 2x2 kernels, each followed
    /// by GELU: `[tokens, dim]` grid to `[16 * tokens, dim / 8]`.
    pub fn upsample(&self, tape: &mut Tape, p: &Bound, t_img: Var) -> Result<Var> {
        let g = self.grid;
        let x = tape.reshape(t_img, &[g, g, self.dim])?;
        let x = self.up1.forward(tape, p, x)?;
        let x = tape.depth_to_space(x, 2)?;
        let x = tape.add(x, p[self.up1_bias])?;
        let x = tape.gelu(x)?;
        let x = self.up2.forward(tape, p, x)?;
        let x = tape.depth_to_space(x, 2)?;
        let x = tape.add(x, p[self.up2_bias])?;
        let x = tape.gelu(x)?;
        Ok(tape.reshape(x, &[16 * g * g, self.dim / 8])?)
    }

    pub fn token_count(&self, n_sparse: usize) -> usize {
        n_sparse + 1 + self.num_mask_tokens
    }

    /// Runs the decoder on display-phase embeddings. `relation` is required
    /// when a relation scale is placed.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        e_img: Var,
        sparse: Option<Var>,
        dense: Var,
        pos: Var,
        relation: Option<Var>,
    ) -> Result<DecoderOutput> {
        let n_sparse = sparse.map_or(0, |s| tape.shape(s)[0]);
        let mut parts: Vec<Var> = sparse.into_iter().collect();
        parts.push(p[self.iou_token]);
        parts.push(p[self.mask_tokens]);
        let token_pe = tape.concat(&parts, 0)?;
        let mut t_out = token_pe;
        let mut t_img = tape.add(e_img, dense)?;
        for (i, block) in self.blocks.iter().enumerate() {
            (t_out, t_img) = block.forward(tape, p, t_out, t_img, token_pe, pos)?;
            if let Some(beta) = self.vra_beta[i] {
                let rel = relation.ok_or_else(|| {
                    SptError::Tensor(TensorError::Contract(format!("{} needs a relation matrix", self.prefix)))
                })?;
                t_img = vra::apply_on_tape(tape, rel, t_img, p[beta])?;
            }
        }
        let q = tape.add(t_out, token_pe)?;
        let k = tape.add(t_img, pos)?;
        let a = self.final_attn.forward(tape, p, q, k, t_img)?;
        let t_out = tape.add(t_out, a)?;
        let t_out = self.final_ln.forward(tape, p, t_out)?;

        let mask_token = tape.slice(t_out, 0, n_sparse + 1, 1)?;
        let hyper = self.hypernet.forward(tape, p, mask_token)?;
        let up = self.upsample(tape, p, t_img)?;
        let low = tape.matmul_nt(up, hyper)?;
        let side = 4 * self.grid;
        let low = tape.reshape(low, &[side, side])?;
        let r = tape.constant(Arc::clone(&self.resize));
        let rows = tape.matmul(r, low)?;
        let logits = tape.matmul_nt(rows, r)?;

        let iou_token = tape.slice(t_out, 0, n_sparse, 1)?;
        let iou = self.iou_head.forward(tape, p, iou_token)?;
        Ok(DecoderOutput {
            logits,
            iou,
            t_out,
            t_img,
        })
    }

    fn peft_sites<'a>(&'a mut self, kinds: &[LayerKind], linears: &mut Vec<&'a mut Linear>, adapters: &mut Vec<(String, usize, &'a mut Option<AdapterModule>)>) {
        let d = self.dim;
        for (i, block) in self.blocks.iter_mut().enumerate() {
            let TwoWayBlock {
                self_attn,
                token_to_image,
                image_to_token,
                mlp,
                adapter,
                ..
            } = block;
            for attn in [self_attn, token_to_image, image_to_token] {
                linears.extend(attn.linears_mut().into_iter().filter(|l| kinds.contains(&l.kind)));
            }
            linears.extend(mlp.layers.iter_mut().filter(|l| kinds.contains(&l.kind)));
            adapters.push((format!("{}.blocks.{i}", self.prefix), d, adapter));
        }
        linears.extend(self.final_attn.linears_mut().into_iter().filter(|l| kinds.contains(&l.kind)));
        linears.extend([&mut self.up1, &mut self.up2].into_iter().filter(|l| kinds.contains(&l.kind)));
        for head in [&mut self.hypernet, &mut self.iou_head] {
            linears.extend(head.layers.iter_mut().filter(|l| kinds.contains(&l.kind)));
        }
    }
}

/// Display-phase embeddings for one image plus the relation matrix shared
/// by both decoders.
pub struct Display {
    pub e_img: Var,
    pub sparse: Option<Var>,
    pub dense: Var,
    pub pos: Var,
    pub relation: Option<Var>,
}

pub struct SptOutput {
    pub draft: Option<DecoderOutput>,
    pub refine: DecoderOutput,
}

#[derive(Clone, Debug)]
pub struct SptModel {
    pub config: ModelConfig,
    pub sdt: SdtConfig,
    pub vra: VraConfig,
    pub params: ParamStore,
    pub image_encoder: ImageEncoder,
    pub prompt_encoder: PromptEncoder,
    pub refine_decoder: MaskDecoder,
    /// Separate draft decoder; absent when self-drafting is off or the
    /// decoder is shared between both passes.
    pub draft_decoder: Option<MaskDecoder>,
    pub peft_kind: Option<PeftKind>,
    pub attached: BTreeSet<&'static str>,
}

impl SptModel {
    /// Builds the base model (every weight frozen) with the requested
    /// decoder arrangement and relation placement, then attaches PEFT.
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        SptModel::with_base(cfg, None)
    }

    /// Like [`SptModel::new`], but the base weights come from `base` (a
    /// model with the same [`ModelConfig`]) before PEFT is attached. The
    /// draft decoder receives a copy of the base decoder.
    pub fn with_base(cfg: &RunConfig, base: Option<&ParamStore>) -> Result<Self> {
        cfg.validate()?;
        let mut model = SptModel::build(&cfg.model, &cfg.sdt, &cfg.vra)?;
        if let Some(base) = base {
            model.load_base(base)?;
        }
        peft::attach(&mut model, &cfg.peft)?;
        Ok(model)
    }

    /// Copies every base weight of `base` into the matching parameter.
    /// Draft-decoder parameters take the value of their refine-decoder
    /// counterpart; parameters unknown to `base` keep their value.
    pub fn load_base(&mut self, base: &ParamStore) -> Result<()> {
        let ids: Vec<ParamId> = self.params.ids().collect();
        let mut copied = 0;
        for id in ids {
            let name = self.params.name(id);
            let source = match name.strip_prefix("draft_decoder.") {
                Some(rest) => format!("refine_decoder.{rest}"),
                None => name.to_string(),
            };
            if let Some(src) = base.lookup(&source) {
                self.params.set(id, base.value(src).clone())?;
                copied += 1;
            }
        }
        if copied == 0 {
            return Err(SptError::Schema("base weights share no parameter with the model".into()));
        }
        Ok(())
    }

    pub fn build(config: &ModelConfig, sdt: &SdtConfig, vra: &VraConfig) -> Result<Self> {
        config.validate()?;
        let seed = config.seed;
        let mut params = ParamStore::new();
        let image_encoder = ImageEncoder::build(&mut Builder::new(&mut params, rng::stream(seed, "image_encoder", 0)), config);
        let prompt_encoder = PromptEncoder::build(&mut Builder::new(&mut params, rng::stream(seed, "prompt_encoder", 0)), config);
        // Both decoders draw from the same stream, so the draft decoder starts
        // as an exact copy of the refine decoder.
        let refine_decoder = MaskDecoder::build(
            &mut Builder::new(&mut params, rng::stream(seed, "mask_decoder", 0)),
            "refine_decoder",
            config,
        );
        let draft_decoder = (sdt.enabled && !sdt.share_decoder).then(|| {
            MaskDecoder::build(
                &mut Builder::new(&mut params, rng::stream(seed, "mask_decoder", 0)),
                "draft_decoder",
                config,
            )
        });
        let mut model = SptModel {
            config: config.clone(),
            sdt: sdt.clone(),
            vra: vra.clone(),
            params,
            image_encoder,
            prompt_encoder,
            refine_decoder,
            draft_decoder,
            peft_kind: None,
            attached: BTreeSet::new(),
        };
        model.configure_placement(vra.placement);
        Ok(model)
    }

    /// Adds or removes the per-decoder relation scales so that exactly the
    /// sites of `placement` exist. New scales start at zero and train.
    pub fn configure_placement(&mut self, placement: Placement) {
        let d = self.config.decoder_dim;
        let params = &mut self.params;
        for dec in std::iter::once(&mut self.refine_decoder).chain(self.draft_decoder.as_mut()) {
            for site in 0..2 {
                let want = placement.after_block(site);
                match (want, dec.vra_beta[site]) {
                    (true, None) => {
                        let name = format!("{}.vra.tw{}.beta", dec.prefix, site + 1);
                        dec.vra_beta[site] = Some(params.add(name, Tensor::zeros(&[d]), true));
                    }
                    (false, Some(id)) => {
                        params.remove(id);
                        dec.vra_beta[site] = None;
                    }
                    _ => {}
                }
            }
        }
        self.vra.placement = placement;
    }

    pub fn draft(&self) -> &MaskDecoder {
        self.draft_decoder.as_ref().unwrap_or(&self.refine_decoder)
    }

    fn uses_relation(&self) -> bool {
        std::iter::once(&self.refine_decoder)
            .chain(self.draft_decoder.as_ref())
            .any(|d| d.vra_beta.iter().any(Option::is_some))
    }

    /// Which decoder instance a PEFT target resolves to, if present.
    pub fn attachment_key(&self, target: PeftTarget) -> Option<&'static str> {
        match target {
            PeftTarget::ImageEncoder => Some("image_encoder"),
            PeftTarget::PromptEncoder => Some("prompt_encoder"),
            PeftTarget::RefineDecoder => Some("refine_decoder"),
            PeftTarget::DraftDecoder if self.draft_decoder.is_some() => Some("draft_decoder"),
            PeftTarget::DraftDecoder if self.sdt.enabled => Some("refine_decoder"),
            PeftTarget::DraftDecoder => None,
        }
    }

    /// Linear maps (filtered by role) and adapter slots of one target. The
    /// prompt encoder has no attention; all of its mask-branch maps qualify.
    pub fn peft_sites(&mut self, target: PeftTarget, kinds: &[LayerKind]) -> (&mut ParamStore, PeftSites<'_>) {
        let mut linears: Vec<&mut Linear> = Vec::new();
        let mut adapters = Vec::new();
        match target {
            PeftTarget::ImageEncoder => {
                let enc = &mut self.image_encoder;
                let d = enc.dim;
                if kinds.contains(&enc.patch_embed.kind) {
                    linears.push(&mut enc.patch_embed);
                }
                for (i, block) in enc.blocks.iter_mut().enumerate() {
                    let EncoderBlock { attn, mlp, adapter, .. } = block;
                    linears.extend(attn.linears_mut().into_iter().filter(|l| kinds.contains(&l.kind)));
                    linears.extend(mlp.layers.iter_mut().filter(|l| kinds.contains(&l.kind)));
                    adapters.push((format!("image_encoder.blocks.{i}"), d, adapter));
                }
            }
            PeftTarget::PromptEncoder => {
                let enc = &mut self.prompt_encoder;
                linears.extend(enc.mask_stages.iter_mut().map(|s| &mut s.linear));
                adapters.push(("prompt_encoder.mask".to_string(), enc.dim, &mut enc.adapter));
            }
            PeftTarget::RefineDecoder => self.refine_decoder.peft_sites(kinds, &mut linears, &mut adapters),
            PeftTarget::DraftDecoder => match (&mut self.draft_decoder, self.sdt.enabled) {
                (Some(dec), _) => dec.peft_sites(kinds, &mut linears, &mut adapters),
                (None, true) => self.refine_decoder.peft_sites(kinds, &mut linears, &mut adapters),
                (None, false) => {}
            },
        }
        (&mut self.params, PeftSites { linears, adapters })
    }

    /// `[batch, tokens, dim]` image embeddings.
    pub fn encode_images(&self, tape: &mut Tape, p: &Bound, images: &[&Image]) -> Result<Var> {
        self.image_encoder.forward(tape, p, images)
    }

    /// Row `index` of a batched embedding as a `[tokens, dim]` matrix.
    pub fn image_tokens(&self, tape: &mut Tape, batch: Var, index: usize) -> Result<Var> {
        let shape = tape.shape(batch).to_vec();
        let one = tape.slice(batch, 0, index, 1)?;
        Ok(tape.reshape(one, &shape[1..])?)
    }

    pub fn display(&self, tape: &mut Tape, p: &Bound, e_img: Var, prompts: &PromptSet) -> Result<Display> {
        let PromptEmbeddings { sparse, dense, pos } = self.prompt_encoder.encode(tape, p, prompts)?;
        let relation = if self.uses_relation() {
            let (a, a_star) = vra::relation_on_tape(tape, e_img, self.vra.alpha)?;
            Some(if self.vra.use_raw_relation { a } else { a_star })
        } else {
            None
        };
        Ok(Display {
            e_img,
            sparse,
            dense,
            pos,
            relation,
        })
    }

    pub fn forward_draft(&self, tape: &mut Tape, p: &Bound, disp: &Display) -> Result<DecoderOutput> {
        self.draft().forward(tape, p, disp.e_img, disp.sparse, disp.dense, disp.pos, disp.relation)
    }

    /// Re-encodes draft logits as a dense embedding through the mask branch.
    pub fn encode_draft(&self, tape: &mut Tape, p: &Bound, draft_logits: Var) -> Result<Var> {
        let logits = if self.sdt.detach_draft {
            let v = tape.value_arc(draft_logits);
            tape.constant(v)
        } else {
            draft_logits
        };
        let probs = tape.sigmoid(logits)?;
        self.prompt_encoder.encode_mask(tape, p, probs)
    }

    pub fn forward_refine(&self, tape: &mut Tape, p: &Bound, disp: &Display, e_draft: Var) -> Result<DecoderOutput> {
        self.refine_decoder
            .forward(tape, p, disp.e_img, disp.sparse, e_draft, disp.pos, disp.relation)
    }

    /// Full pipeline for one image given its `[tokens, dim]` embedding.
    /// Without self-drafting only the refine decoder runs, on the default
    /// dense embedding.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, e_img: Var, prompts: &PromptSet) -> Result<SptOutput> {
        let disp = self.display(tape, p, e_img, prompts)?;
        if !self.sdt.enabled {
            let refine = self.forward_refine(tape, p, &disp, disp.dense)?;
            return Ok(SptOutput { draft: None, refine });
        }
        let draft = self.forward_draft(tape, p, &disp)?;
        let e_draft = self.encode_draft(tape, p, draft.logits)?;
        let refine = self.forward_refine(tape, p, &disp, e_draft)?;
        Ok(SptOutput {
            draft: Some(draft),
            refine,
        })
    }
}
