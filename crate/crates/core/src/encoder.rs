//! Causality-aware event encoder.
//!
//! Stacked pre-norm attention blocks over the event sequence. Two things
//! distinguish it from a plain encoder: a content-conditioned directional
//! position bias on the attention logits, and masking of the explanation
//! event's key column so premise representations never read from the masked
//! slot while the masked slot reads from everything.

use crate::config::{ModelConfig, PositionMode};
use crate::error::{Error, Result};
use crate::model::{bind_block, block_forward, EncoderParams, LogitMask};
use crate::params::ParamBind;
use crate::tensor::{Tape, TensorId};

/// An event sequence with one designated explanation slot whose features
/// are zeroed out.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedEventSequence {
    /// Row-major `n x d_raw` feature matrix.
    pub features: Vec<Vec<f64>>,
    /// Zero-based index of the explanation event.
    pub h: usize,
}

impl MaskedEventSequence {
    pub fn n(&self) -> usize {
        self.features.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        if n < 2 {
            return Err(Error::contract(format!(
                "event sequence needs at least 2 events, got {n}"
            )));
        }
        if self.h >= n {
            return Err(Error::contract(format!(
                "explanation index {} out of range for {n} events",
                self.h
            )));
        }
        if self.features[self.h].iter().any(|v| *v != 0.0) {
            return Err(Error::contract(
                "explanation event features must be all-zero",
            ));
        }
        Ok(())
    }
}

/// Signed relative offset of query position `n` against key position `m`,
/// shifted into table range. Positions are one-based and `l(n,m) != l(m,n)`
/// whenever `n != m`.
pub fn directional_index(n: usize, m: usize, len: usize) -> Result<usize> {
    if n < 1 || m < 1 || n > len || m > len {
        return Err(Error::contract(format!(
            "positions ({n}, {m}) outside [1, {len}]"
        )));
    }
    // evaluation order avoids unsigned underflow when m > n
    Ok(n + len - m)
}

/// Content-conditioned directional bias `U` with `U[n][m] = X_n · R_l(n,m)`.
/// Only the query row's content enters each entry.
pub fn contextual_position_bias(
    tape: &mut Tape,
    x: TensorId,
    table: TensorId,
    n: usize,
    n_max: usize,
) -> Result<TensorId> {
    if n > n_max {
        return Err(Error::Capacity { n, max: n_max });
    }
    let d = tape.shape(x)[1];
    let mut table_idx = Vec::with_capacity(n * n);
    let mut query_idx = Vec::with_capacity(n * n);
    for r in 0..n {
        for c in 0..n {
            // table rows are zero-based; the index function is one-based
            table_idx.push(directional_index(r + 1, c + 1, n)? - 1);
            query_idx.push(r);
        }
    }
    let r_sel = tape.embedding(table, &table_idx)?;
    let x_rep = tape.embedding(x, &query_idx)?;
    let prod = tape.mul(r_sel, x_rep)?;
    let ones = tape.constant(vec![1.0; d], &[d, 1]);
    let sums = tape.matmul(prod, ones)?;
    tape.reshape(sums, &[n, n])
}

/// Content-free directional bias: one learned scalar per relative offset.
pub fn directional_scalar_bias(
    tape: &mut Tape,
    scalars: TensorId,
    n: usize,
    n_max: usize,
) -> Result<TensorId> {
    if n > n_max {
        return Err(Error::Capacity { n, max: n_max });
    }
    let mut idx = Vec::with_capacity(n * n);
    for r in 0..n {
        for c in 0..n {
            idx.push(directional_index(r + 1, c + 1, n)? - 1);
        }
    }
    let sel = tape.embedding(scalars, &idx)?;
    tape.reshape(sel, &[n, n])
}

/// Additive mask hiding the explanation key column from premise queries.
/// Query `h` itself keeps full visibility.
pub fn explanation_mask(n: usize, h: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for r in 0..n {
        if r != h {
            m[r * n + h] = f64::NEG_INFINITY;
        }
    }
    m
}

/// Multiplicative variant zeroing the pre-softmax logit instead of removing
/// the entry; retained for comparison because a zero logit still leaks.
pub fn explanation_mask_soft(n: usize, h: usize) -> Vec<f64> {
    let mut m = vec![1.0; n * n];
    for r in 0..n {
        if r != h {
            m[r * n + h] = 0.0;
        }
    }
    m
}

/// Encoder output: final event representations plus every post-softmax
/// attention matrix (block-major, then head) for verification.
pub struct Encoded {
    /// `n x d` event representations.
    pub events: TensorId,
    pub attn: Vec<TensorId>,
}

/// Run the full encoder over a sequence already living on `tape` as an
/// `n x d_raw` constant. `h` is the explanation slot to mask; `None` runs
/// the unmasked variant used for momentum targets.
pub fn encode_features(
    tape: &mut Tape,
    bind: &mut ParamBind,
    params: &EncoderParams,
    cfg: &ModelConfig,
    features: TensorId,
    n: usize,
    h: Option<usize>,
) -> Result<Encoded> {
    if n > cfg.n_max {
        return Err(Error::Capacity {
            n,
            max: cfg.n_max,
        });
    }
    if let Some(h) = h {
        if h >= n {
            return Err(Error::contract(format!(
                "explanation index {h} out of range for {n} events"
            )));
        }
    }
    let in_w = bind.bind(tape, "enc.in_w", &params.in_w);
    let in_b = bind.bind(tape, "enc.in_b", &params.in_b);
    let projected = tape.matmul(features, in_w)?;
    let mut x = tape.add_row(projected, in_b)?;

    if cfg.pos_mode == PositionMode::Absolute {
        let abs = bind.bind(tape, "enc.abs_pos", &params.abs_pos);
        let positions: Vec<usize> = (0..n).collect();
        let pos_rows = tape.embedding(abs, &positions)?;
        x = tape.add(x, pos_rows)?;
    }

    let hard_mask = h.map(|h| explanation_mask(n, h));
    let soft_mask = h.map(|h| explanation_mask_soft(n, h));
    let mask = match (cfg.hard_mask, &hard_mask, &soft_mask) {
        (_, None, _) => LogitMask::None,
        (true, Some(m), _) => LogitMask::Additive(m),
        (false, _, Some(m)) => LogitMask::ZeroLogit(m),
        _ => unreachable!(),
    };

    let mut attn = Vec::new();
    for (i, block) in params.blocks.iter().enumerate() {
        let bias = match cfg.pos_mode {
            PositionMode::Absolute => None,
            PositionMode::Directional => {
                let scalars = bind.bind(tape, "enc.dir_scalars", &params.dir_scalars);
                Some(directional_scalar_bias(tape, scalars, n, cfg.n_max)?)
            }
            PositionMode::ContextualDirectional => {
                let table = bind.bind(tape, "enc.pos_table", &params.pos_table);
                Some(contextual_position_bias(tape, x, table, n, cfg.n_max)?)
            }
        };
        let bb = bind_block(tape, bind, &format!("enc.blocks.{i}"), block);
        let out = block_forward(tape, &bb, x, n, cfg.d, cfg.heads, bias, &mask)?;
        x = out.x;
        attn.extend(out.attn);
    }

    let ln_g = bind.bind(tape, "enc.final_ln_g", &params.final_ln_g);
    let ln_b = bind.bind(tape, "enc.final_ln_b", &params.final_ln_b);
    let events = tape.layer_norm_rows(x, ln_g, ln_b)?;
    Ok(Encoded { events, attn })
}

/// Validate and encode a masked sequence.
pub fn encode(
    tape: &mut Tape,
    bind: &mut ParamBind,
    params: &EncoderParams,
    cfg: &ModelConfig,
    seq: &MaskedEventSequence,
) -> Result<Encoded> {
    if seq.n() < 2 {
        return Err(Error::contract(format!(
            "event sequence needs at least 2 events, got {}",
            seq.n()
        )));
    }
    if seq.h >= seq.n() {
        return Err(Error::contract(format!(
            "explanation index {} out of range for {} events",
            seq.h,
            seq.n()
        )));
    }
    let n = seq.n();
    let d_raw = seq.features[0].len();
    let flat: Vec<f64> = seq.features.iter().flatten().copied().collect();
    let fid = tape.constant(flat, &[n, d_raw]);
    encode_features(tape, bind, params, cfg, fid, n, Some(seq.h))
}
