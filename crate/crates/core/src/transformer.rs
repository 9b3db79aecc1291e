//! Temporal encoder-decoder over per-agent embedded sequences.
//!
//! Sequences are laid out as `[sequences × time × d_model]`; each agent of
//! each scene is one sequence and all sequences share weights. Attention
//! mixes time steps only.

use rand::Rng;
use trajformer_autodiff::{Tape, Tensor, Var};

use crate::config::{parse_value, Configurable};
use crate::error::{Error, Result};
use crate::params::{init_linear, init_norm, linear, norm, Bound, ParamStore};
use crate::rng::StreamRng;

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerConfig {
    pub d_model: usize,
    pub heads: usize,
    pub ff_width: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub dropout: f64,
    pub norm_eps: f64,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            ff_width: 2048,
            encoder_layers: 2,
            decoder_layers: 2,
            dropout: 0.1,
            norm_eps: 1e-5,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model ({}) must be a positive multiple of heads ({})",
                self.d_model, self.heads
            )));
        }
        if self.ff_width == 0 {
            return Err(Error::Config("ff_width must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.norm_eps > 0.0) {
            return Err(Error::Config("norm_eps must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

impl Configurable for TransformerConfig {
    fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "d_model" => self.d_model = parse_value(key, value)?,
            "heads" => self.heads = parse_value(key, value)?,
            "ff_width" => self.ff_width = parse_value(key, value)?,
            "encoder_layers" => self.encoder_layers = parse_value(key, value)?,
            "decoder_layers" => self.decoder_layers = parse_value(key, value)?,
            "dropout" => self.dropout = parse_value(key, value)?,
            "norm_eps" => self.norm_eps = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn to_kv(&self) -> Vec<(&'static str, String)> {
        vec![
            ("d_model", self.d_model.to_string()),
            ("heads", self.heads.to_string()),
            ("ff_width", self.ff_width.to_string()),
            ("encoder_layers", self.encoder_layers.to_string()),
            ("decoder_layers", self.decoder_layers.to_string()),
            ("dropout", format!("{:?}", self.dropout)),
            ("norm_eps", format!("{:?}", self.norm_eps)),
        ]
    }
}

/// Sinusoidal table `[steps × d]`: `sin(t / 10000^(2i/d))` on even channels,
/// the matching cosine on odd channels.
pub fn positional_encoding(steps: usize, d: usize) -> Tensor {
    Tensor::from_fn([steps, d], |k| {
        let (t, c) = (k / d, k % d);
        let pair = (c / 2 * 2) as f64;
        let angle = t as f64 / 10000f64.powf(pair / d as f64);
        if c % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Adds the positional table to `x` of shape `[sequences × time × d]`.
pub fn positional_encode(tape: &mut Tape, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 {
        return Err(Error::Contract(format!("positional_encode expects rank 3, got {s:?}")));
    }
    let pe = tape.constant(positional_encoding(s[1], s[2]));
    Ok(tape.add(x, pe)?)
}

/// Additive mask `[steps × steps]`: 0 on and below the diagonal, `-inf` above.
pub fn causal_mask(steps: usize) -> Tensor {
    Tensor::from_fn([steps, steps], |k| {
        if k % steps > k / steps {
            f64::NEG_INFINITY
        } else {
            0.0
        }
    })
}

/// Inverted dropout driven by an explicit stream; inactive without one.
pub struct Dropout {
    rate: f64,
    rng: Option<StreamRng>,
}

impl Dropout {
    pub fn disabled() -> Self {
        Self { rate: 0.0, rng: None }
    }

    pub fn new(rate: f64, rng: StreamRng) -> Self {
        Self { rate, rng: Some(rng) }
    }

    pub fn apply(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        let Some(rng) = self.rng.as_mut() else {
            return Ok(x);
        };
        if self.rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - self.rate);
        let rate = self.rate;
        let mask = Tensor::from_fn(tape.shape(x).to_vec(), |_| {
            if rng.random::<f64>() < rate {
                0.0
            } else {
                keep
            }
        });
        let mask = tape.constant(mask);
        Ok(tape.mul(x, mask)?)
    }
}

pub fn init_attention(store: &mut ParamStore, rng: &mut impl Rng, prefix: &str, d: usize) {
    for proj in ["wq", "wk", "wv", "wo"] {
        init_linear(store, rng, &format!("{prefix}.{proj}"), d, d);
    }
}

pub fn init_encoder(store: &mut ParamStore, rng: &mut impl Rng, cfg: &TransformerConfig) {
    let d = cfg.d_model;
    for l in 0..cfg.encoder_layers {
        let p = format!("enc.{l}");
        init_attention(store, rng, &format!("{p}.attn"), d);
        init_norm(store, &format!("{p}.norm1"), d);
        init_linear(store, rng, &format!("{p}.ff1"), d, cfg.ff_width);
        init_linear(store, rng, &format!("{p}.ff2"), cfg.ff_width, d);
        init_norm(store, &format!("{p}.norm2"), d);
    }
}

pub fn init_decoder(store: &mut ParamStore, rng: &mut impl Rng, cfg: &TransformerConfig) {
    let d = cfg.d_model;
    for l in 0..cfg.decoder_layers {
        let p = format!("dec.{l}");
        init_attention(store, rng, &format!("{p}.self_attn"), d);
        init_norm(store, &format!("{p}.norm1"), d);
        init_attention(store, rng, &format!("{p}.cross_attn"), d);
        init_norm(store, &format!("{p}.norm2"), d);
        init_linear(store, rng, &format!("{p}.ff1"), d, cfg.ff_width);
        init_linear(store, rng, &format!("{p}.ff2"), cfg.ff_width, d);
        init_norm(store, &format!("{p}.norm3"), d);
    }
}

fn seq_shape(tape: &Tape, x: Var, d: usize, op: &str) -> Result<(usize, usize)> {
    let s = tape.shape(x);
    if s.len() != 3 || s[2] != d {
        return Err(Error::Contract(format!("{op}: expected [sequences × time × {d}], got {s:?}")));
    }
    Ok((s[0], s[1]))
}

/// `[S × T × d]` → `[S·heads × T × d/heads]`.
fn split_heads(tape: &mut Tape, flat: Var, seqs: usize, steps: usize, heads: usize) -> Result<Var> {
    let dk = tape.shape(flat)[1] / heads;
    let x = tape.reshape(flat, &[seqs, steps, heads, dk])?;
    let x = tape.permute(x, &[0, 2, 1, 3])?;
    Ok(tape.reshape(x, &[seqs * heads, steps, dk])?)
}

/// Scaled dot-product attention with `heads` heads: `query` `[S × Tq × d]`
/// attends over `context` `[S × Tk × d]`. `mask` is an optional additive
/// `[Tq × Tk]` matrix. Returns the projected output `[S × Tq × d]` and the
/// attention weights `[S·heads × Tq × Tk]`.
pub fn multi_head_attention(
    tape: &mut Tape,
    p: &Bound,
    prefix: &str,
    query: Var,
    context: Var,
    heads: usize,
    mask: Option<&Tensor>,
) -> Result<(Var, Var)> {
    let d = tape.shape(query).last().copied().unwrap_or(0);
    if heads == 0 || d % heads != 0 {
        return Err(Error::Contract(format!("{d} channels cannot split into {heads} heads")));
    }
    let (s, tq) = seq_shape(tape, query, d, "attention query")?;
    let (sk, tk) = seq_shape(tape, context, d, "attention context")?;
    if sk != s {
        return Err(Error::Contract(format!("attention over {s} queries but {sk} context sequences")));
    }
    if let Some(m) = mask {
        if m.shape() != [tq, tk] {
            return Err(trajformer_autodiff::TensorError::ShapeMismatch {
                op: "attention mask",
                lhs: m.shape().to_vec(),
                rhs: vec![tq, tk],
            }
            .into());
        }
    }
    let q_in = tape.reshape(query, &[s * tq, d])?;
    let c_in = tape.reshape(context, &[s * tk, d])?;
    let q = linear(tape, p, &format!("{prefix}.wq"), q_in)?;
    let k = linear(tape, p, &format!("{prefix}.wk"), c_in)?;
    let v = linear(tape, p, &format!("{prefix}.wv"), c_in)?;
    let q = split_heads(tape, q, s, tq, heads)?;
    let k = split_heads(tape, k, s, tk, heads)?;
    let v = split_heads(tape, v, s, tk, heads)?;

    let dk = d / heads;
    let logits = tape.batch_matmul(q, k, true)?;
    let mut logits = tape.scale(logits, 1.0 / (dk as f64).sqrt());
    if let Some(m) = mask {
        let m = tape.constant(m.clone());
        logits = tape.add(logits, m)?;
    }
    let weights = tape.softmax(logits, 2)?;
    let mixed = tape.batch_matmul(weights, v, false)?;
    let mixed = tape.reshape(mixed, &[s, heads, tq, dk])?;
    let mixed = tape.permute(mixed, &[0, 2, 1, 3])?;
    let mixed = tape.reshape(mixed, &[s * tq, d])?;
    let out = linear(tape, p, &format!("{prefix}.wo"), mixed)?;
    Ok((tape.reshape(out, &[s, tq, d])?, weights))
}

/// Position-wise `relu(x W1 + b1) W2 + b2` on `[rows × d]`.
pub fn feed_forward(tape: &mut Tape, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let h = linear(tape, p, &format!("{prefix}.ff1"), x)?;
    let h = tape.relu(h);
    linear(tape, p, &format!("{prefix}.ff2"), h)
}

/// `norm(x + dropout(sublayer))` on `[S × T × d]` tensors.
fn residual(tape: &mut Tape, p: &Bound, norm_prefix: &str, x: Var, sub: Var, eps: f64, drop: &mut Dropout) -> Result<Var> {
    let sub = drop.apply(tape, sub)?;
    let sum = tape.add(x, sub)?;
    norm(tape, p, norm_prefix, sum, eps)
}

fn ff_block(tape: &mut Tape, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let flat = tape.reshape(x, &[shape[0] * shape[1], shape[2]])?;
    let out = feed_forward(tape, p, prefix, flat)?;
    Ok(tape.reshape(out, &shape)?)
}

/// Encoder stack over `[S × T × d]` inputs that are already embedded and
/// positionally encoded. Returns the memory, same shape.
pub fn encode(tape: &mut Tape, p: &Bound, cfg: &TransformerConfig, x: Var, drop: &mut Dropout) -> Result<Var> {
    seq_shape(tape, x, cfg.d_model, "encode")?;
    let mut h = x;
    for l in 0..cfg.encoder_layers {
        let pre = format!("enc.{l}");
        let (att, _) = multi_head_attention(tape, p, &format!("{pre}.attn"), h, h, cfg.heads, None)?;
        h = residual(tape, p, &format!("{pre}.norm1"), h, att, cfg.norm_eps, drop)?;
        let ff = ff_block(tape, p, &pre, h)?;
        h = residual(tape, p, &format!("{pre}.norm2"), h, ff, cfg.norm_eps, drop)?;
    }
    Ok(h)
}

/// Decoder stack: causal self-attention over `target` `[S × Tt × d]`, then
/// attention over `memory` `[S × Ts × d]`, then the feedforward sublayer.
pub fn decode(
    tape: &mut Tape,
    p: &Bound,
    cfg: &TransformerConfig,
    memory: Var,
    target: Var,
    drop: &mut Dropout,
) -> Result<Var> {
    let (_, steps) = seq_shape(tape, target, cfg.d_model, "decode")?;
    let mask = causal_mask(steps);
    let mut h = target;
    for l in 0..cfg.decoder_layers {
        let pre = format!("dec.{l}");
        let (att, _) = multi_head_attention(tape, p, &format!("{pre}.self_attn"), h, h, cfg.heads, Some(&mask))?;
        h = residual(tape, p, &format!("{pre}.norm1"), h, att, cfg.norm_eps, drop)?;
        let (cross, _) = multi_head_attention(tape, p, &format!("{pre}.cross_attn"), h, memory, cfg.heads, None)?;
        h = residual(tape, p, &format!("{pre}.norm2"), h, cross, cfg.norm_eps, drop)?;
        let ff = ff_block(tape, p, &pre, h)?;
        h = residual(tape, p, &format!("{pre}.norm3"), h, ff, cfg.norm_eps, drop)?;
    }
    Ok(h)
}

/// Autoregressive loop: starting from `start`, calls `step` with every frame
/// produced so far (start included) and appends its newest frame, `steps`
/// times. Returns the generated frames without the start frame.
pub fn decode_infer<F>(start: Tensor, steps: usize, mut step: F) -> Result<Vec<Tensor>>
where
    F: FnMut(&[Tensor]) -> Result<Tensor>,
{
    let mut frames = Vec::with_capacity(steps + 1);
    frames.push(start);
    for _ in 0..steps {
        let next = step(&frames)?;
        frames.push(next);
    }
    frames.remove(0);
    Ok(frames)
}
