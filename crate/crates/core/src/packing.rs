//! Sequence packing and exact per-sample attention over packed sequences.
//!
//! Samples of different token counts are concatenated into one `[T, w]`
//! sequence with boundary offsets `[0, S1, S1 + S2, ..., T]`. Attention is a
//! dense softmax computed independently inside every segment, so the result
//! is identical to running each sample alone.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::substrate::{gemm, softmax_in_place, CustomOp, Graph, MatRef, Tensor, Var};
use crate::tokenizer::{GridShape, Modality};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViewRole {
    Global,
    Local,
    /// Single deterministic full view used for frozen-feature extraction.
    Full,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleMeta {
    pub sample_id: u64,
    pub modality: Modality,
    pub grid: GridShape,
    pub role: ViewRole,
}

/// One sample's token rows and coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    /// `[S, w]`
    pub tokens: Tensor,
    /// `[S, 3]`
    pub coords: Tensor,
    pub meta: SampleMeta,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PackedBatch {
    /// `[T, w]`
    pub tokens: Tensor,
    /// `[T, 3]`
    pub coords: Tensor,
    pub boundaries: Vec<usize>,
    pub meta: Vec<SampleMeta>,
}

impl PackedBatch {
    pub fn num_samples(&self) -> usize {
        self.meta.len()
    }

    pub fn num_tokens(&self) -> usize {
        *self.boundaries.last().unwrap()
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.boundaries.windows(2).map(|w| w[1] - w[0]).collect()
    }

    pub fn segment(&self, i: usize) -> std::ops::Range<usize> {
        self.boundaries[i]..self.boundaries[i + 1]
    }
}

/// Checks that `boundaries` is `0 = b0 < b1 < ... = total`.
pub fn validate_boundaries(boundaries: &[usize], total: usize) -> Result<()> {
    if boundaries.len() < 2 || boundaries[0] != 0 {
        return Err(Error::invalid(format!("boundaries must start at 0 with at least one segment: {boundaries:?}")));
    }
    if let Some(w) = boundaries.windows(2).find(|w| w[1] <= w[0]) {
        return Err(Error::invalid(format!("boundaries not strictly increasing at {w:?}")));
    }
    let last = *boundaries.last().unwrap();
    if last != total {
        return Err(Error::invalid(format!(
            "last boundary {last} does not match token count {total}"
        )));
    }
    Ok(())
}

/// Concatenates sequences in input order.
pub fn pack(seqs: &[TokenSequence]) -> Result<PackedBatch> {
    let first = seqs.first().ok_or_else(|| Error::invalid("cannot pack an empty list"))?;
    let width = first.tokens.shape()[1];
    let total: usize = seqs.iter().map(|s| s.tokens.shape()[0]).sum();
    let mut tokens = Vec::with_capacity(total * width);
    let mut coords = Vec::with_capacity(total * 3);
    let mut boundaries = Vec::with_capacity(seqs.len() + 1);
    boundaries.push(0);
    for (i, s) in seqs.iter().enumerate() {
        let ts = s.tokens.shape();
        if ts.len() != 2 || ts[1] != width {
            return Err(Error::shape("pack", format!("sequence {i} has shape {ts:?}, expected [_, {width}]")));
        }
        if s.coords.shape() != [ts[0], 3] {
            return Err(Error::shape("pack", format!("sequence {i} coords {:?}", s.coords.shape())));
        }
        tokens.extend_from_slice(s.tokens.data());
        coords.extend_from_slice(s.coords.data());
        boundaries.push(boundaries.last().unwrap() + ts[0]);
    }
    Ok(PackedBatch {
        tokens: Tensor::new(vec![total, width], tokens)?,
        coords: Tensor::new(vec![total, 3], coords)?,
        boundaries,
        meta: seqs.iter().map(|s| s.meta.clone()).collect(),
    })
}

pub fn unpack(batch: &PackedBatch) -> Result<Vec<TokenSequence>> {
    let width = batch.tokens.shape()[1];
    (0..batch.num_samples())
        .map(|i| {
            let r = batch.segment(i);
            let n = r.len();
            Ok(TokenSequence {
                tokens: Tensor::new(
                    vec![n, width],
                    batch.tokens.data()[r.start * width..r.end * width].to_vec(),
                )?,
                coords: Tensor::new(vec![n, 3], batch.coords.data()[r.start * 3..r.end * 3].to_vec())?,
                meta: batch.meta[i].clone(),
            })
        })
        .collect()
}

/// Token inflation a pad-to-max layout would incur: `n * max(S) / sum(S)`.
pub fn padding_overhead(lengths: &[usize]) -> Result<f64> {
    if lengths.is_empty() || lengths.contains(&0) {
        return Err(Error::invalid("padding_overhead needs nonempty positive lengths"));
    }
    let max = *lengths.iter().max().unwrap() as f64;
    let sum: usize = lengths.iter().sum();
    Ok(lengths.len() as f64 * max / sum as f64)
}

fn check_qkv(q: &[usize], k: &[usize], v: &[usize], boundaries: &[usize]) -> Result<(usize, usize, usize)> {
    if q.len() != 3 || q != k || q != v {
        return Err(Error::shape("packed_attention", format!("q {q:?}, k {k:?}, v {v:?}")));
    }
    if let Some(&b) = boundaries.iter().find(|&&b| b > q[0]) {
        return Err(Error::invalid(format!(
            "boundary {b} exceeds token count {}",
            q[0]
        )));
    }
    validate_boundaries(boundaries, q[0])?;
    Ok((q[0], q[1], q[2]))
}

/// Forward attention; returns the output and, per `(segment, head)`, the
/// row-softmax probabilities in segment-major order.
fn attention_forward(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    heads: usize,
    dh: usize,
    boundaries: &[usize],
    keep_probs: bool,
) -> (Vec<f32>, Vec<f32>) {
    let row = heads * dh;
    let scale = 1.0 / (dh as f32).sqrt();
    let mut out = vec![0.0; q.len()];
    let mut probs = Vec::new();
    let mut scores = Vec::new();
    for w in boundaries.windows(2) {
        let (s, l) = (w[0], w[1] - w[0]);
        for h in 0..heads {
            let off = s * row + h * dh;
            let qm = MatRef::strided(&q[off..], l, dh, row, 1);
            let km = MatRef::strided(&k[off..], l, dh, row, 1);
            let vm = MatRef::strided(&v[off..], l, dh, row, 1);
            scores.clear();
            scores.resize(l * l, 0.0);
            gemm(scale, qm, km.t(), 0.0, &mut scores, l, 1);
            for r in scores.chunks_mut(l) {
                softmax_in_place(r);
            }
            gemm(1.0, MatRef::new(&scores, l, l), vm, 0.0, &mut out[off..], row, 1);
            if keep_probs {
                probs.extend_from_slice(&scores);
            }
        }
    }
    (out, probs)
}

/// `softmax(q k^T / sqrt(head_dim)) v` independently within every segment.
///
/// `q`, `k`, `v` are `[T, n_heads, head_dim]`.
pub fn packed_attention(q: &Tensor, k: &Tensor, v: &Tensor, boundaries: &[usize]) -> Result<Tensor> {
    let (_, heads, dh) = check_qkv(q.shape(), k.shape(), v.shape(), boundaries)?;
    let (out, _) = attention_forward(q.data(), k.data(), v.data(), heads, dh, boundaries, false);
    Tensor::new(q.shape().to_vec(), out)
}

/// Reference pad-to-max path: every sample is padded to the longest length
/// and padded keys are masked out. Returns the valid rows in packed order
/// and the number of score entries computed.
pub fn padded_attention(q: &Tensor, k: &Tensor, v: &Tensor, boundaries: &[usize]) -> Result<(Tensor, usize)> {
    let (_, heads, dh) = check_qkv(q.shape(), k.shape(), v.shape(), boundaries)?;
    let lens: Vec<usize> = boundaries.windows(2).map(|w| w[1] - w[0]).collect();
    let lmax = *lens.iter().max().unwrap();
    let row = heads * dh;
    let n = lens.len();
    let pad = |src: &[f32]| {
        let mut buf = vec![0.0; n * lmax * row];
        for (i, w) in boundaries.windows(2).enumerate() {
            let len = (w[1] - w[0]) * row;
            buf[i * lmax * row..i * lmax * row + len].copy_from_slice(&src[w[0] * row..w[1] * row]);
        }
        buf
    };
    let (pq, pk, pv) = (pad(q.data()), pad(k.data()), pad(v.data()));
    let scale = 1.0 / (dh as f32).sqrt();
    let mut pout = vec![0.0; n * lmax * row];
    let mut scores = vec![0.0; lmax * lmax];
    for (i, &len) in lens.iter().enumerate() {
        for h in 0..heads {
            let off = i * lmax * row + h * dh;
            let qm = MatRef::strided(&pq[off..], lmax, dh, row, 1);
            let km = MatRef::strided(&pk[off..], lmax, dh, row, 1);
            let vm = MatRef::strided(&pv[off..], lmax, dh, row, 1);
            gemm(scale, qm, km.t(), 0.0, &mut scores, lmax, 1);
            for r in scores.chunks_mut(lmax) {
                r[len..].iter_mut().for_each(|x| *x = f32::NEG_INFINITY);
                softmax_in_place(r);
            }
            gemm(1.0, MatRef::new(&scores, lmax, lmax), vm, 0.0, &mut pout[off..], row, 1);
        }
    }
    let mut out = Vec::with_capacity(q.numel());
    for (i, &len) in lens.iter().enumerate() {
        out.extend_from_slice(&pout[i * lmax * row..(i * lmax + len) * row]);
    }
    Ok((Tensor::new(q.shape().to_vec(), out)?, n * heads * lmax * lmax))
}

struct AttentionOp {
    boundaries: Arc<[usize]>,
    heads: usize,
    dh: usize,
    probs: Vec<f32>,
}

impl CustomOp for AttentionOp {
    fn name(&self) -> &'static str {
        "packed_attention"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &[f32]) -> Vec<Option<Vec<f32>>> {
        let (q, k, v) = (inputs[0].data(), inputs[1].data(), inputs[2].data());
        let (heads, dh) = (self.heads, self.dh);
        let row = heads * dh;
        let scale = 1.0 / (dh as f32).sqrt();
        let mut dq = vec![0.0; q.len()];
        let mut dk = vec![0.0; k.len()];
        let mut dv = vec![0.0; v.len()];
        let mut dp = Vec::new();
        let mut p_off = 0;
        for w in self.boundaries.windows(2) {
            let (s, l) = (w[0], w[1] - w[0]);
            for h in 0..heads {
                let off = s * row + h * dh;
                let p = &self.probs[p_off..p_off + l * l];
                p_off += l * l;
                let pm = MatRef::new(p, l, l);
                let gm = MatRef::strided(&grad[off..], l, dh, row, 1);
                // dV = P^T dO
                gemm(1.0, pm.t(), gm, 0.0, &mut dv[off..], row, 1);
                // dP = dO V^T
                dp.clear();
                dp.resize(l * l, 0.0);
                gemm(1.0, gm, MatRef::strided(&v[off..], l, dh, row, 1).t(), 0.0, &mut dp, l, 1);
                // dS = P * (dP - rowsum(dP * P))
                for (dr, pr) in dp.chunks_mut(l).zip(p.chunks(l)) {
                    let dot: f32 = dr.iter().zip(pr).map(|(a, b)| a * b).sum();
                    dr.iter_mut().zip(pr).for_each(|(d, p)| *d = p * (*d - dot));
                }
                let ds = MatRef::new(&dp, l, l);
                gemm(scale, ds, MatRef::strided(&k[off..], l, dh, row, 1), 0.0, &mut dq[off..], row, 1);
                gemm(scale, ds.t(), MatRef::strided(&q[off..], l, dh, row, 1), 0.0, &mut dk[off..], row, 1);
            }
        }
        vec![Some(dq), Some(dk), Some(dv)]
    }
}

/// Differentiable [`packed_attention`] on the tape.
pub fn packed_attention_op(g: &mut Graph, q: Var, k: Var, v: Var, boundaries: &Arc<[usize]>) -> Result<Var> {
    let (_, heads, dh) = check_qkv(g.shape(q), g.shape(k), g.shape(v), boundaries)?;
    let keep = g.requires_grad(q) || g.requires_grad(k) || g.requires_grad(v);
    let (out, probs) = attention_forward(
        g.value(q).data(),
        g.value(k).data(),
        g.value(v).data(),
        heads,
        dh,
        boundaries,
        keep,
    );
    let t = Tensor::new(g.shape(q).to_vec(), out)?;
    Ok(g.custom(
        &[q, k, v],
        t,
        Box::new(AttentionOp {
            boundaries: Arc::clone(boundaries),
            heads,
            dh,
            probs,
        }),
    ))
}

struct SegmentMeanOp {
    boundaries: Arc<[usize]>,
}

impl CustomOp for SegmentMeanOp {
    fn name(&self) -> &'static str {
        "segment_mean"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &[f32]) -> Vec<Option<Vec<f32>>> {
        let d = inputs[0].shape()[1];
        let mut dx = vec![0.0; inputs[0].numel()];
        for (i, w) in self.boundaries.windows(2).enumerate() {
            let inv = 1.0 / (w[1] - w[0]) as f32;
            let gi = &grad[i * d..(i + 1) * d];
            for r in w[0]..w[1] {
                dx[r * d..(r + 1) * d]
                    .iter_mut()
                    .zip(gi)
                    .for_each(|(o, g)| *o = g * inv);
            }
        }
        vec![Some(dx)]
    }
}

/// Mean of the rows of every segment: `[T, d] -> [n_segments, d]`.
pub fn segment_mean(g: &mut Graph, x: Var, boundaries: &Arc<[usize]>) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 2 {
        return Err(Error::shape("segment_mean", format!("input {shape:?}")));
    }
    validate_boundaries(boundaries, shape[0])?;
    let d = shape[1];
    let n = boundaries.len() - 1;
    let xv = g.value(x).data();
    let mut out = vec![0.0; n * d];
    for (i, w) in boundaries.windows(2).enumerate() {
        let o = &mut out[i * d..(i + 1) * d];
        for r in w[0]..w[1] {
            o.iter_mut().zip(&xv[r * d..(r + 1) * d]).for_each(|(a, b)| *a += b);
        }
        let inv = 1.0 / (w[1] - w[0]) as f32;
        o.iter_mut().for_each(|a| *a *= inv);
    }
    let t = Tensor::new(vec![n, d], out)?;
    Ok(g.custom(
        &[x],
        t,
        Box::new(SegmentMeanOp {
            boundaries: Arc::clone(boundaries),
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta(id: u64) -> SampleMeta {
        SampleMeta {
            sample_id: id,
            modality: Modality::Xray2d,
            grid: GridShape::new(1, 1, 1),
            role: ViewRole::Global,
        }
    }

    fn seq(len: usize, w: usize, fill: f32) -> TokenSequence {
        TokenSequence {
            tokens: Tensor::full(&[len, w], fill),
            coords: Tensor::zeros(&[len, 3]),
            meta: meta(len as u64),
        }
    }

    #[test]
    fn boundaries_are_prefix_sums() {
        let b = pack(&[seq(3, 2, 1.0), seq(5, 2, 2.0)]).unwrap();
        assert_eq!(b.boundaries, vec![0, 3, 8]);
        let single = pack(&[seq(4, 2, 1.0)]).unwrap();
        assert_eq!(single.boundaries, vec![0, 4]);
        assert_eq!(single.tokens, Tensor::full(&[4, 2], 1.0));
    }

    #[test]
    fn pack_rejects_bad_input() {
        assert!(pack(&[]).is_err());
        assert!(pack(&[seq(3, 2, 1.0), seq(3, 4, 1.0)]).is_err());
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
    }

    #[test]
    fn overhead_values() {
        assert_eq!(padding_overhead(&[5, 5, 5]).unwrap(), 1.0);
        assert!((padding_overhead(&[1, 9]).unwrap() - 1.8).abs() < 1e-12);
        assert!(padding_overhead(&[]).is_err());
    }

    #[test]
    fn single_token_attention_returns_v() {
        let q = Tensor::from_vec(vec![0.3, -0.2]).reshaped(vec![1, 1, 2]).unwrap();
        let k = Tensor::from_vec(vec![1.0, 2.0]).reshaped(vec![1, 1, 2]).unwrap();
        let v = Tensor::from_vec(vec![5.0, -7.0]).reshaped(vec![1, 1, 2]).unwrap();
        let o = packed_attention(&q, &k, &v, &[0, 1]).unwrap();
        assert_eq!(o.data(), v.data());
    }

    #[test]
    fn boundary_past_end_rejected() {
        let q = Tensor::zeros(&[3, 1, 2]);
        let e = packed_attention(&q, &q, &q, &[0, 2, 4]).unwrap_err().to_string();
        assert!(e.contains("exceeds"), "{e}");
    }

    #[test]
    fn segment_mean_values() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 10.0, 20.0]).unwrap());
        let b: Arc<[usize]> = Arc::from(vec![0, 2, 3]);
        let m = segment_mean(&mut g, x, &b).unwrap();
        assert_eq!(g.value(m).data(), &[2.0, 3.0, 10.0, 20.0]);
    }
}
