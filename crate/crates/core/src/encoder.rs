//! Pre-norm transformer over packed patch sequences with 3D RoPE attention
//! and per-sample mean pooling.

use std::sync::Arc;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::packing::{packed_attention_op, segment_mean, PackedBatch};
use crate::params::{BoundParams, ParamSet};
use crate::rng;
use crate::rope3d::{rope, RopeAngles, RopeTable};
use crate::substrate::{Graph, Tensor, Var};
use crate::tokenizer::embed_patches;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub patch: usize,
    pub channels: usize,
    /// Coordinate range: patch coordinates lie in `[0, alpha]`.
    pub alpha: f32,
    pub rope_base: f32,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            depth: 4,
            dim: 96,
            heads: 2,
            mlp_ratio: 4,
            patch: 14,
            channels: 1,
            alpha: 128.0,
            rope_base: 10_000.0,
        }
    }
}

impl EncoderConfig {
    pub fn head_dim(&self) -> usize {
        self.dim / self.heads.max(1)
    }

    pub fn patch_width(&self) -> usize {
        self.channels * self.patch.pow(3)
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "encoder dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if !self.head_dim().is_multiple_of(6) {
            return Err(Error::Config(format!(
                "encoder head_dim {} must be divisible by 6",
                self.head_dim()
            )));
        }
        if self.patch == 0 || self.channels == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("patch, channels and mlp_ratio must be positive".into()));
        }
        if !(self.alpha > 0.0) || !(self.rope_base > 0.0) {
            return Err(Error::Config("alpha and rope_base must be positive".into()));
        }
        Ok(())
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let d = self.dim;
        let hidden = self.mlp_ratio * d;
        let patch = self.patch_width() * d + d;
        let block = 2 * d + 4 * (d * d + d) + 2 * d + (d * hidden + hidden) + (hidden * d + d);
        patch + self.depth * block + 2 * d
    }
}

/// Parameter names and shapes, in canonical order.
pub fn param_layout(cfg: &EncoderConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.dim;
    let hidden = cfg.mlp_ratio * d;
    let mut out = vec![
        ("patch.weight".to_string(), vec![cfg.patch_width(), d]),
        ("patch.bias".to_string(), vec![d]),
    ];
    for i in 0..cfg.depth {
        let p = |s: &str| format!("blocks.{i}.{s}");
        out.push((p("ln1.gamma"), vec![d]));
        out.push((p("ln1.beta"), vec![d]));
        for w in ["wq", "wk", "wv", "wo"] {
            out.push((p(&format!("attn.{w}")), vec![d, d]));
            out.push((p(&format!("attn.b{}", &w[1..])), vec![d]));
        }
        out.push((p("ln2.gamma"), vec![d]));
        out.push((p("ln2.beta"), vec![d]));
        out.push((p("mlp.w1"), vec![d, hidden]));
        out.push((p("mlp.b1"), vec![hidden]));
        out.push((p("mlp.w2"), vec![hidden, d]));
        out.push((p("mlp.b2"), vec![d]));
    }
    out.push(("final_ln.gamma".to_string(), vec![d]));
    out.push(("final_ln.beta".to_string(), vec![d]));
    out
}

/// Layer-norm scales and shifts; exempt from weight decay.
pub fn is_norm_param(name: &str) -> bool {
    name.ends_with(".gamma") || name.ends_with(".beta")
}

const INIT_STD: f32 = 0.02;

/// Truncated normal (`|x| <= 2 std`) weights with std 0.02, zero biases,
/// unit layer-norm scales.
pub fn init_params(cfg: &EncoderConfig, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    let mut rng = rng::stream(seed, &[rng::tag::INIT]);
    let mut set = ParamSet::new();
    for (name, shape) in param_layout(cfg) {
        let n: usize = shape.iter().product();
        let data = if name.ends_with(".gamma") {
            vec![1.0; n]
        } else if shape.len() == 1 {
            vec![0.0; n]
        } else {
            (0..n)
                .map(|_| loop {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    if z.abs() <= 2.0 {
                        break z as f32 * INIT_STD;
                    }
                })
                .collect()
        };
        set.insert(name, Tensor::new(shape, data)?)?;
    }
    Ok(set)
}

pub fn check_params(cfg: &EncoderConfig, params: &ParamSet) -> Result<()> {
    let layout = param_layout(cfg);
    if layout.len() != params.len() {
        return Err(Error::Config(format!(
            "encoder expects {} parameter tensors, got {}",
            layout.len(),
            params.len()
        )));
    }
    for ((name, shape), (pn, pt)) in layout.iter().zip(params.iter()) {
        if name != pn || shape.as_slice() != pt.shape() {
            return Err(Error::Config(format!(
                "parameter mismatch: expected {name} {shape:?}, got {pn} {:?}",
                pt.shape()
            )));
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderOutput {
    /// `[n_samples, d]`
    pub pooled: Var,
    /// `[T, d]`, after the final layer norm
    pub tokens: Var,
}

fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add(y, b)
}

/// Runs the encoder on a packed batch of patch rows.
pub fn encode(g: &mut Graph, params: &BoundParams, batch: &PackedBatch, cfg: &EncoderConfig) -> Result<EncoderOutput> {
    cfg.validate()?;
    let width = batch.tokens.shape()[1];
    if width != cfg.patch_width() {
        return Err(Error::shape(
            "encode",
            format!("batch rows have width {width}, config expects C*P^3 = {}", cfg.patch_width()),
        ));
    }
    let t = batch.num_tokens();
    let (d, heads, dh) = (cfg.dim, cfg.heads, cfg.head_dim());
    let table = RopeTable::new(dh, cfg.rope_base)?;
    let angles = Arc::new(RopeAngles::new(&batch.coords, &table)?);
    let bounds: Arc<[usize]> = Arc::from(batch.boundaries.clone());

    let patches = g.constant(batch.tokens.clone());
    let mut x = embed_patches(g, patches, params.get("patch.weight")?, params.get("patch.bias")?)?;
    for i in 0..cfg.depth {
        let p = |s: &str| params.get(&format!("blocks.{i}.{s}"));
        let h = g.layer_norm(x, Some(p("ln1.gamma")?), Some(p("ln1.beta")?))?;
        let mut qkv = [h; 3];
        for (slot, (w, b)) in qkv.iter_mut().zip([("wq", "bq"), ("wk", "bk"), ("wv", "bv")]) {
            let y = linear(g, h, p(&format!("attn.{w}"))?, p(&format!("attn.{b}"))?)?;
            *slot = g.reshape(y, &[t, heads, dh])?;
        }
        let q = rope(g, qkv[0], &angles)?;
        let k = rope(g, qkv[1], &angles)?;
        let a = packed_attention_op(g, q, k, qkv[2], &bounds)?;
        let a = g.reshape(a, &[t, d])?;
        let a = linear(g, a, p("attn.wo")?, p("attn.bo")?)?;
        x = g.add(x, a)?;

        let h = g.layer_norm(x, Some(p("ln2.gamma")?), Some(p("ln2.beta")?))?;
        let m = linear(g, h, p("mlp.w1")?, p("mlp.b1")?)?;
        let m = g.gelu(m);
        let m = linear(g, m, p("mlp.w2")?, p("mlp.b2")?)?;
        x = g.add(x, m)?;
    }
    let x = g.layer_norm(x, Some(params.get("final_ln.gamma")?), Some(params.get("final_ln.beta")?))?;
    let pooled = segment_mean(g, x, &bounds)?;
    Ok(EncoderOutput { pooled, tokens: x })
}

/// Inference with frozen parameters: `(pooled [n, d], tokens [T, d])`.
pub fn encode_frozen(params: &ParamSet, batch: &PackedBatch, cfg: &EncoderConfig) -> Result<(Tensor, Tensor)> {
    check_params(cfg, params)?;
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let out = encode(&mut g, &bound, batch, cfg)?;
    Ok((g.value(out.pooled).clone(), g.value(out.tokens).clone()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_count_matches_layout() {
        let cfg = EncoderConfig {
            depth: 2,
            dim: 48,
            heads: 8,
            ..Default::default()
        };
        let p = init_params(&cfg, 0).unwrap();
        assert_eq!(p.count(), cfg.param_count());
    }

    #[test]
    fn init_is_seeded() {
        let cfg = EncoderConfig {
            depth: 1,
            dim: 12,
            heads: 2,
            patch: 2,
            ..Default::default()
        };
        let a = init_params(&cfg, 5).unwrap();
        let b = init_params(&cfg, 5).unwrap();
        let c = init_params(&cfg, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let w = a.get("patch.weight").unwrap();
        assert!(w.data().iter().all(|v| v.abs() <= 0.04));
        assert!(a.get("final_ln.gamma").unwrap().data().iter().all(|&v| v == 1.0));
        assert!(a.get("blocks.0.attn.bq").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn config_validation() {
        let bad = EncoderConfig {
            dim: 96,
            heads: 3,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = EncoderConfig {
            dim: 96,
            heads: 5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert!(EncoderConfig::default().validate().is_ok());
    }
}
