//! Transformer layers and the joint two-modality encoder.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Init, Session, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub depth: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub mlp_ratio: f64,
    pub patch_size: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { depth: 4, heads: 4, embed_dim: 64, mlp_ratio: 4.0, patch_size: 8 }
    }
}

impl EncoderConfig {
    pub fn validate(&self, path: &str) -> Result<()> {
        if self.embed_dim == 0 {
            return Err(Error::config(format!("{path}.embed_dim"), "must be positive"));
        }
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::config(format!("{path}.heads"), format!("must divide embed_dim {}", self.embed_dim)));
        }
        if !(self.mlp_ratio > 0.0) || mlp_hidden(self.embed_dim, self.mlp_ratio) == 0 {
            return Err(Error::config(format!("{path}.mlp_ratio"), "must give a positive hidden width"));
        }
        if self.patch_size == 0 {
            return Err(Error::config(format!("{path}.patch_size"), "must be positive"));
        }
        Ok(())
    }
}

pub fn mlp_hidden(dim: usize, ratio: f64) -> usize {
    (dim as f64 * ratio).round() as usize
}

/// `softmax(Q K^T / sqrt(d)) V` with `d` the width of `Q`.
pub fn attention_head(tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<Var> {
    let (qs, ks, vs) = (tape.value(q).shape().to_vec(), tape.value(k).shape().to_vec(), tape.value(v).shape().to_vec());
    if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 || qs[1] != ks[1] || ks[0] != vs[0] {
        return Err(Error::shape("attention", format!("q {qs:?}, k {ks:?}, v {vs:?}")));
    }
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scaled = tape.scale(scores, 1.0 / (qs[1] as f64).sqrt())?;
    let weights = tape.softmax(scaled)?;
    tape.matmul(weights, v)
}

pub fn linear(s: &mut Session, name: &str, x: Var) -> Result<Var> {
    let w = s.param(&format!("{name}.weight"))?;
    let b = s.param(&format!("{name}.bias"))?;
    s.tape.linear(x, w, b)
}

pub fn layer_norm(s: &mut Session, name: &str, x: Var) -> Result<Var> {
    let g = s.param(&format!("{name}.gain"))?;
    let b = s.param(&format!("{name}.bias"))?;
    let n = s.tape.layer_norm(x)?;
    let n = s.tape.mul_row(n, g)?;
    s.tape.add_row(n, b)
}

pub fn init_attention(init: &mut Init, name: &str, dim: usize) -> Result<()> {
    for p in ["q", "k", "v", "o"] {
        init.linear(&format!("{name}.{p}"), dim, dim)?;
    }
    Ok(())
}

/// Multi-head attention with queries from `query` and keys/values from `context`.
pub fn attention(s: &mut Session, name: &str, query: Var, context: Var, heads: usize) -> Result<Var> {
    let dq = s.tape.value(query).last_dim();
    let dc = s.tape.value(context).last_dim();
    if dq != dc {
        return Err(Error::shape("attention", format!("query width {dq}, context width {dc}")));
    }
    if heads == 0 || !dq.is_multiple_of(heads) {
        return Err(Error::shape("attention", format!("{heads} heads do not divide width {dq}")));
    }
    let q = linear(s, &format!("{name}.q"), query)?;
    let k = linear(s, &format!("{name}.k"), context)?;
    let v = linear(s, &format!("{name}.v"), context)?;
    let hd = dq / heads;
    let out = if heads == 1 {
        attention_head(&mut s.tape, q, k, v)?
    } else {
        let mut parts = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = s.tape.slice_cols(q, h * hd, hd)?;
            let kh = s.tape.slice_cols(k, h * hd, hd)?;
            let vh = s.tape.slice_cols(v, h * hd, hd)?;
            parts.push(attention_head(&mut s.tape, qh, kh, vh)?);
        }
        s.tape.concat_cols(&parts)?
    };
    linear(s, &format!("{name}.o"), out)
}

pub fn init_block(init: &mut Init, name: &str, dim: usize, mlp_ratio: f64) -> Result<()> {
    let hidden = mlp_hidden(dim, mlp_ratio);
    init.layer_norm(&format!("{name}.norm1"), dim)?;
    init_attention(init, &format!("{name}.attn"), dim)?;
    init.layer_norm(&format!("{name}.norm2"), dim)?;
    init.linear(&format!("{name}.mlp.fc1"), dim, hidden)?;
    init.linear(&format!("{name}.mlp.fc2"), hidden, dim)
}

/// Pre-norm block: `x + attn(norm1(x))`, then `x + mlp(norm2(x))`.
pub fn block(s: &mut Session, name: &str, x: Var, heads: usize) -> Result<Var> {
    let n = layer_norm(s, &format!("{name}.norm1"), x)?;
    let a = attention(s, &format!("{name}.attn"), n, n, heads)?;
    let x = s.tape.add(x, a)?;
    let n = layer_norm(s, &format!("{name}.norm2"), x)?;
    let h = linear(s, &format!("{name}.mlp.fc1"), n)?;
    let h = s.tape.gelu(h)?;
    let h = linear(s, &format!("{name}.mlp.fc2"), h)?;
    s.tape.add(x, h)
}

pub const ENCODER_PREFIX: &str = "encoder";

pub fn init_encoder(init: &mut Init, cfg: &EncoderConfig) -> Result<()> {
    for i in 0..cfg.depth {
        init_block(init, &format!("{ENCODER_PREFIX}.blocks.{i}"), cfg.embed_dim, cfg.mlp_ratio)?;
    }
    Ok(())
}

/// Block stack over one token sequence.
pub fn encode_single(s: &mut Session, cfg: &EncoderConfig, tokens: Var) -> Result<Var> {
    let width = s.tape.value(tokens).last_dim();
    if width != cfg.embed_dim {
        return Err(Error::shape("encode", format!("tokens are {width} wide, encoder expects {}", cfg.embed_dim)));
    }
    let mut x = tokens;
    for i in 0..cfg.depth {
        x = block(s, &format!("{ENCODER_PREFIX}.blocks.{i}"), x, cfg.heads)?;
    }
    Ok(x)
}

/// Per-modality encoder outputs of one season.
#[derive(Clone, Copy, Debug)]
pub struct EncodedPair {
    pub f_o: Var,
    pub f_r: Var,
    pub season: usize,
}

/// Joint encoding: optical then SAR rows are concatenated, passed through
/// the stack, and split back at the modality boundary.
pub fn encode(s: &mut Session, cfg: &EncoderConfig, visible_o: Var, visible_r: Var, season: usize) -> Result<EncodedPair> {
    let (wo, wr) = (s.tape.value(visible_o).last_dim(), s.tape.value(visible_r).last_dim());
    if wo != wr {
        return Err(Error::shape("encode", format!("optical width {wo}, SAR width {wr}")));
    }
    let (no, nr) = (s.tape.value(visible_o).rows(), s.tape.value(visible_r).rows());
    let joint = s.tape.concat_rows(&[visible_o, visible_r])?;
    let out = encode_single(s, cfg, joint)?;
    let parts = s.tape.split_rows(out, &[no, nr])?;
    Ok(EncodedPair { f_o: parts[0], f_r: parts[1], season })
}
