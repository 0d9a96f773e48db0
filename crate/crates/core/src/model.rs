//! Parameter containers and the attention block shared by the encoder and
//! the decoder modules.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::Result;
use crate::params::{PTensor, ParamBind, ParamGroup};
use crate::tensor::{Tape, TensorId};

const INIT_STD: f64 = 0.02;

/// One pre-norm attention block: self-attention with optional additive
/// logit bias and mask, then a two-layer feed-forward, residual throughout.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockParams {
    pub wq: PTensor,
    pub wk: PTensor,
    pub wv: PTensor,
    pub wo: PTensor,
    pub ln1_g: PTensor,
    pub ln1_b: PTensor,
    pub ln2_g: PTensor,
    pub ln2_b: PTensor,
    pub ffn_w1: PTensor,
    pub ffn_b1: PTensor,
    pub ffn_w2: PTensor,
    pub ffn_b2: PTensor,
}

impl BlockParams {
    pub fn new(d: usize, rng: &mut ChaCha8Rng) -> Self {
        let ff = 4 * d;
        BlockParams {
            wq: PTensor::randn(&[d, d], INIT_STD, rng),
            wk: PTensor::randn(&[d, d], INIT_STD, rng),
            wv: PTensor::randn(&[d, d], INIT_STD, rng),
            wo: PTensor::randn(&[d, d], INIT_STD, rng),
            ln1_g: PTensor::ones(&[d]),
            ln1_b: PTensor::zeros(&[d]),
            ln2_g: PTensor::ones(&[d]),
            ln2_b: PTensor::zeros(&[d]),
            ffn_w1: PTensor::randn(&[d, ff], INIT_STD, rng),
            ffn_b1: PTensor::zeros(&[ff]),
            ffn_w2: PTensor::randn(&[ff, d], INIT_STD, rng),
            ffn_b2: PTensor::zeros(&[d]),
        }
    }

    fn visit_with(&self, prefix: &str, f: &mut dyn FnMut(&str, &PTensor)) {
        f(&format!("{prefix}.wq"), &self.wq);
        f(&format!("{prefix}.wk"), &self.wk);
        f(&format!("{prefix}.wv"), &self.wv);
        f(&format!("{prefix}.wo"), &self.wo);
        f(&format!("{prefix}.ln1_g"), &self.ln1_g);
        f(&format!("{prefix}.ln1_b"), &self.ln1_b);
        f(&format!("{prefix}.ln2_g"), &self.ln2_g);
        f(&format!("{prefix}.ln2_b"), &self.ln2_b);
        f(&format!("{prefix}.ffn_w1"), &self.ffn_w1);
        f(&format!("{prefix}.ffn_b1"), &self.ffn_b1);
        f(&format!("{prefix}.ffn_w2"), &self.ffn_w2);
        f(&format!("{prefix}.ffn_b2"), &self.ffn_b2);
    }

    fn visit_with_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut PTensor)) {
        f(&format!("{prefix}.wq"), &mut self.wq);
        f(&format!("{prefix}.wk"), &mut self.wk);
        f(&format!("{prefix}.wv"), &mut self.wv);
        f(&format!("{prefix}.wo"), &mut self.wo);
        f(&format!("{prefix}.ln1_g"), &mut self.ln1_g);
        f(&format!("{prefix}.ln1_b"), &mut self.ln1_b);
        f(&format!("{prefix}.ln2_g"), &mut self.ln2_g);
        f(&format!("{prefix}.ln2_b"), &mut self.ln2_b);
        f(&format!("{prefix}.ffn_w1"), &mut self.ffn_w1);
        f(&format!("{prefix}.ffn_b1"), &mut self.ffn_b1);
        f(&format!("{prefix}.ffn_w2"), &mut self.ffn_w2);
        f(&format!("{prefix}.ffn_b2"), &mut self.ffn_b2);
    }
}

/// Encoder weights: input projection, attention blocks, the three
/// position-information variants and a final normalization.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncoderParams {
    pub in_w: PTensor,
    pub in_b: PTensor,
    pub blocks: Vec<BlockParams>,
    /// Directional position table, one learnable row per table index.
    pub pos_table: PTensor,
    /// Content-free directional variant: one scalar per table index.
    pub dir_scalars: PTensor,
    /// Absolute variant: one embedding per position.
    pub abs_pos: PTensor,
    pub final_ln_g: PTensor,
    pub final_ln_b: PTensor,
}

impl EncoderParams {
    pub fn new(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.d;
        let table_rows = 2 * cfg.n_max - 1;
        EncoderParams {
            in_w: PTensor::randn(&[cfg.d_raw, d], INIT_STD, rng),
            in_b: PTensor::zeros(&[d]),
            blocks: (0..cfg.enc_blocks).map(|_| BlockParams::new(d, rng)).collect(),
            pos_table: PTensor::randn(&[table_rows, d], INIT_STD, rng),
            dir_scalars: PTensor::zeros(&[table_rows, 1]),
            abs_pos: PTensor::randn(&[cfg.n_max, d], INIT_STD, rng),
            final_ln_g: PTensor::ones(&[d]),
            final_ln_b: PTensor::zeros(&[d]),
        }
    }
}

impl ParamGroup for EncoderParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &PTensor)) {
        f("enc.in_w", &self.in_w);
        f("enc.in_b", &self.in_b);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit_with(&format!("enc.blocks.{i}"), f);
        }
        f("enc.pos_table", &self.pos_table);
        f("enc.dir_scalars", &self.dir_scalars);
        f("enc.abs_pos", &self.abs_pos);
        f("enc.final_ln_g", &self.final_ln_g);
        f("enc.final_ln_b", &self.final_ln_b);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut PTensor)) {
        f("enc.in_w", &mut self.in_w);
        f("enc.in_b", &mut self.in_b);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_with_mut(&format!("enc.blocks.{i}"), f);
        }
        f("enc.pos_table", &mut self.pos_table);
        f("enc.dir_scalars", &mut self.dir_scalars);
        f("enc.abs_pos", &mut self.abs_pos);
        f("enc.final_ln_g", &mut self.final_ln_g);
        f("enc.final_ln_b", &mut self.final_ln_b);
    }
}

/// Decoder weights. The initial module and the shared refinement module are
/// separate block stacks; every refinement stage reuses `refine`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecoderParams {
    /// Word embedding matrix, also used as the tied captioning head.
    pub vocab: PTensor,
    /// Learned absolute within-sentence positions.
    pub word_pos: PTensor,
    /// Token type embeddings: row 0 visual, row 1 text, row 2 condensed.
    pub modal: PTensor,
    /// Relative-confidence bucket weights, length `2B - 1`.
    pub conf_bucket: PTensor,
    pub d0: Vec<BlockParams>,
    pub refine: Vec<BlockParams>,
    pub final_ln_g: PTensor,
    pub final_ln_b: PTensor,
}

pub const MODAL_VISUAL: usize = 0;
pub const MODAL_TEXT: usize = 1;
pub const MODAL_CONDENSED: usize = 2;

impl DecoderParams {
    pub fn new(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.d;
        DecoderParams {
            vocab: PTensor::randn(&[cfg.vocab_size, d], INIT_STD, rng),
            word_pos: PTensor::randn(&[cfg.l_max + 1, d], INIT_STD, rng),
            modal: PTensor::randn(&[3, d], INIT_STD, rng),
            conf_bucket: PTensor::zeros(&[2 * cfg.buckets - 1, 1]),
            d0: (0..cfg.dec_blocks).map(|_| BlockParams::new(d, rng)).collect(),
            refine: (0..cfg.dec_blocks).map(|_| BlockParams::new(d, rng)).collect(),
            final_ln_g: PTensor::ones(&[d]),
            final_ln_b: PTensor::zeros(&[d]),
        }
    }
}

impl ParamGroup for DecoderParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &PTensor)) {
        f("dec.vocab", &self.vocab);
        f("dec.word_pos", &self.word_pos);
        f("dec.modal", &self.modal);
        f("dec.conf_bucket", &self.conf_bucket);
        for (i, b) in self.d0.iter().enumerate() {
            b.visit_with(&format!("dec.d0.{i}"), f);
        }
        for (i, b) in self.refine.iter().enumerate() {
            b.visit_with(&format!("dec.refine.{i}"), f);
        }
        f("dec.final_ln_g", &self.final_ln_g);
        f("dec.final_ln_b", &self.final_ln_b);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut PTensor)) {
        f("dec.vocab", &mut self.vocab);
        f("dec.word_pos", &mut self.word_pos);
        f("dec.modal", &mut self.modal);
        f("dec.conf_bucket", &mut self.conf_bucket);
        for (i, b) in self.d0.iter_mut().enumerate() {
            b.visit_with_mut(&format!("dec.d0.{i}"), f);
        }
        for (i, b) in self.refine.iter_mut().enumerate() {
            b.visit_with_mut(&format!("dec.refine.{i}"), f);
        }
        f("dec.final_ln_g", &mut self.final_ln_g);
        f("dec.final_ln_b", &mut self.final_ln_b);
    }
}

/// Two-layer projection head used by the hypothesis-reconstruction loss.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProjParams {
    pub w1: PTensor,
    pub b1: PTensor,
    pub w2: PTensor,
    pub b2: PTensor,
}

impl ProjParams {
    pub fn new(d: usize, rng: &mut ChaCha8Rng) -> Self {
        let out = (d / 2).max(1);
        ProjParams {
            w1: PTensor::randn(&[d, d], INIT_STD, rng),
            b1: PTensor::zeros(&[d]),
            w2: PTensor::randn(&[d, out], INIT_STD, rng),
            b2: PTensor::zeros(&[out]),
        }
    }
}

impl ParamGroup for ProjParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &PTensor)) {
        f("proj.w1", &self.w1);
        f("proj.b1", &self.b1);
        f("proj.w2", &self.w2);
        f("proj.b2", &self.b2);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut PTensor)) {
        f("proj.w1", &mut self.w1);
        f("proj.b1", &mut self.b1);
        f("proj.w2", &mut self.w2);
        f("proj.b2", &mut self.b2);
    }
}

/// Full trainable model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Model {
    pub cfg: ModelConfig,
    pub encoder: EncoderParams,
    pub decoder: DecoderParams,
    pub proj: ProjParams,
}

impl Model {
    pub fn new(cfg: ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        Ok(Model {
            encoder: EncoderParams::new(&cfg, rng),
            decoder: DecoderParams::new(&cfg, rng),
            proj: ProjParams::new(cfg.d, rng),
            cfg,
        })
    }

    /// Restore grad buffers after deserialization.
    pub fn ensure_grads(&mut self) {
        self.visit_mut(&mut |_, p| p.ensure_grad());
    }
}

impl ParamGroup for Model {
    fn visit(&self, f: &mut dyn FnMut(&str, &PTensor)) {
        self.encoder.visit(f);
        self.decoder.visit(f);
        self.proj.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut PTensor)) {
        self.encoder.visit_mut(f);
        self.decoder.visit_mut(f);
        self.proj.visit_mut(f);
    }
}

/// Frozen exponential-moving-average copy of the encoder and projection
/// head. Never receives gradients.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MomentumEncoder {
    pub encoder: EncoderParams,
    pub proj: ProjParams,
}

impl MomentumEncoder {
    /// Start as an exact copy of the online weights.
    pub fn from_online(model: &Model) -> Self {
        MomentumEncoder {
            encoder: model.encoder.clone(),
            proj: model.proj.clone(),
        }
    }
}

impl ParamGroup for MomentumEncoder {
    fn visit(&self, f: &mut dyn FnMut(&str, &PTensor)) {
        self.encoder.visit(f);
        self.proj.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut PTensor)) {
        self.encoder.visit_mut(f);
        self.proj.visit_mut(f);
    }
}

// ── Shared attention block forward ───────────────────────────────────

/// Tape handles for one bound block.
#[derive(Debug, Clone, Copy)]
pub struct BoundBlock {
    pub wq: TensorId,
    pub wk: TensorId,
    pub wv: TensorId,
    pub wo: TensorId,
    pub ln1_g: TensorId,
    pub ln1_b: TensorId,
    pub ln2_g: TensorId,
    pub ln2_b: TensorId,
    pub ffn_w1: TensorId,
    pub ffn_b1: TensorId,
    pub ffn_w2: TensorId,
    pub ffn_b2: TensorId,
}

pub fn bind_block(
    tape: &mut Tape,
    bind: &mut ParamBind,
    prefix: &str,
    p: &BlockParams,
) -> BoundBlock {
    BoundBlock {
        wq: bind.bind(tape, &format!("{prefix}.wq"), &p.wq),
        wk: bind.bind(tape, &format!("{prefix}.wk"), &p.wk),
        wv: bind.bind(tape, &format!("{prefix}.wv"), &p.wv),
        wo: bind.bind(tape, &format!("{prefix}.wo"), &p.wo),
        ln1_g: bind.bind(tape, &format!("{prefix}.ln1_g"), &p.ln1_g),
        ln1_b: bind.bind(tape, &format!("{prefix}.ln1_b"), &p.ln1_b),
        ln2_g: bind.bind(tape, &format!("{prefix}.ln2_g"), &p.ln2_g),
        ln2_b: bind.bind(tape, &format!("{prefix}.ln2_b"), &p.ln2_b),
        ffn_w1: bind.bind(tape, &format!("{prefix}.ffn_w1"), &p.ffn_w1),
        ffn_b1: bind.bind(tape, &format!("{prefix}.ffn_b1"), &p.ffn_b1),
        ffn_w2: bind.bind(tape, &format!("{prefix}.ffn_w2"), &p.ffn_w2),
        ffn_b2: bind.bind(tape, &format!("{prefix}.ffn_b2"), &p.ffn_b2),
    }
}

/// How pre-softmax logits are altered after scaling and bias addition.
#[derive(Debug, Clone)]
pub enum LogitMask<'a> {
    None,
    /// Additive terms, `0` or `-inf`, length `t*t`.
    Additive(&'a [f64]),
    /// Multiplicative 0/1 terms zeroing selected logits, length `t*t`.
    ZeroLogit(&'a [f64]),
}

/// Output of one block: the residual stream plus each head's post-softmax
/// attention matrix for inspection.
pub struct BlockOut {
    pub x: TensorId,
    pub attn: Vec<TensorId>,
}

/// Pre-norm block: `x + Wo·Attn(LN(x))` then `x + FFN(LN(x))`.
///
/// `bias` is an additive `t x t` logit term shared by all heads (position
/// or confidence information); `mask` is applied after it.
pub fn block_forward(
    tape: &mut Tape,
    b: &BoundBlock,
    x: TensorId,
    t_len: usize,
    d: usize,
    heads: usize,
    bias: Option<TensorId>,
    mask: &LogitMask,
) -> Result<BlockOut> {
    let dh = d / heads;
    let xn = tape.layer_norm_rows(x, b.ln1_g, b.ln1_b)?;
    let q_full = tape.matmul(xn, b.wq)?;
    let k_full = tape.matmul(xn, b.wk)?;
    let v_full = tape.matmul(xn, b.wv)?;
    let scale = 1.0 / (dh as f64).sqrt();

    let mut head_outs = Vec::with_capacity(heads);
    let mut attns = Vec::with_capacity(heads);
    for h in 0..heads {
        let q = tape.slice_cols(q_full, h * dh, dh)?;
        let k = tape.slice_cols(k_full, h * dh, dh)?;
        let v = tape.slice_cols(v_full, h * dh, dh)?;
        let kt = tape.transpose(k);
        let raw = tape.matmul(q, kt)?;
        let mut logits = tape.scale(raw, scale);
        if let Some(u) = bias {
            logits = tape.add(logits, u)?;
        }
        logits = match mask {
            LogitMask::None => logits,
            LogitMask::Additive(m) => {
                let mid = tape.constant(m.to_vec(), &[t_len, t_len]);
                tape.add(logits, mid)?
            }
            LogitMask::ZeroLogit(m) => {
                let mid = tape.constant(m.to_vec(), &[t_len, t_len]);
                tape.mul(logits, mid)?
            }
        };
        let attn = tape.softmax_rows(logits)?;
        attns.push(attn);
        head_outs.push(tape.matmul(attn, v)?);
    }
    let cat = tape.concat_cols(&head_outs)?;
    let proj = tape.matmul(cat, b.wo)?;
    let x1 = tape.add(x, proj)?;

    let x1n = tape.layer_norm_rows(x1, b.ln2_g, b.ln2_b)?;
    let h1 = tape.matmul(x1n, b.ffn_w1)?;
    let h1b = tape.add_row(h1, b.ffn_b1)?;
    let act = tape.relu(h1b);
    let h2 = tape.matmul(act, b.ffn_w2)?;
    let h2b = tape.add_row(h2, b.ffn_b2)?;
    let out = tape.add(x1, h2b)?;
    Ok(BlockOut { x: out, attn: attns })
}
