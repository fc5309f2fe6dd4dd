//! Rotary positional embeddings over three spatial axes.
//!
//! `head_dim` is split into three equal blocks for the `z`, `h` and `w`
//! axes. Inside a block, components `(2j, 2j + 1)` form a plane rotated by
//! `coord[axis] * base^(-2j / (head_dim / 3))`.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::substrate::{CustomOp, Graph, Tensor, Var};

pub const DEFAULT_BASE: f32 = 10_000.0;

#[derive(Clone, Debug, PartialEq)]
pub struct RopeTable {
    pub base: f32,
    pub head_dim: usize,
    /// Per-axis frequencies, length `head_dim / 6`, shared by all three axes.
    pub freqs: Vec<f32>,
}

impl RopeTable {
    pub fn new(head_dim: usize, base: f32) -> Result<Self> {
        if head_dim == 0 || !head_dim.is_multiple_of(6) {
            return Err(Error::invalid(format!(
                "rope head_dim {head_dim} must be a positive multiple of 6 \
                 (three axes, each an even number of dimensions)"
            )));
        }
        if !(base > 0.0) {
            return Err(Error::invalid(format!("rope base must be positive, got {base}")));
        }
        let axis_dim = head_dim / 3;
        let freqs = (0..axis_dim / 2)
            .map(|j| (base as f64).powf(-2.0 * j as f64 / axis_dim as f64) as f32)
            .collect();
        Ok(RopeTable {
            base,
            head_dim,
            freqs,
        })
    }

    pub fn pairs_per_axis(&self) -> usize {
        self.freqs.len()
    }
}

/// Shorthand for [`RopeTable::new`].
pub fn build_rope_table(head_dim: usize, base: f32) -> Result<RopeTable> {
    RopeTable::new(head_dim, base)
}

/// Per-token rotation cosines and sines, `[S, head_dim / 2]`.
///
/// Computed once per packed batch and shared by every layer and by both
/// queries and keys.
#[derive(Clone, Debug)]
pub struct RopeAngles {
    pub cos: Vec<f32>,
    pub sin: Vec<f32>,
    pub tokens: usize,
    pub head_dim: usize,
}

impl RopeAngles {
    pub fn new(coords: &Tensor, table: &RopeTable) -> Result<Self> {
        if coords.rank() != 2 || coords.shape()[1] != 3 {
            return Err(Error::shape("rope", format!("coords must be [S, 3], got {:?}", coords.shape())));
        }
        let s = coords.shape()[0];
        let half = table.head_dim / 2;
        let per_axis = table.pairs_per_axis();
        let mut cos = Vec::with_capacity(s * half);
        let mut sin = Vec::with_capacity(s * half);
        for t in 0..s {
            let c = coords.row(t);
            for axis in 0..3 {
                for f in &table.freqs {
                    let angle = c[axis] as f64 * *f as f64;
                    cos.push(angle.cos() as f32);
                    sin.push(angle.sin() as f32);
                }
            }
            debug_assert_eq!(cos.len(), (t + 1) * 3 * per_axis);
        }
        Ok(RopeAngles {
            cos,
            sin,
            tokens: s,
            head_dim: table.head_dim,
        })
    }
}

fn rotate(x: &[f32], angles: &RopeAngles, heads: usize, inverse: bool) -> Vec<f32> {
    let dh = angles.head_dim;
    let half = dh / 2;
    let mut out = vec![0.0; x.len()];
    for t in 0..angles.tokens {
        let cs = &angles.cos[t * half..(t + 1) * half];
        let sn = &angles.sin[t * half..(t + 1) * half];
        for h in 0..heads {
            let base = (t * heads + h) * dh;
            let src = &x[base..base + dh];
            let dst = &mut out[base..base + dh];
            for p in 0..half {
                let (a, b) = (src[2 * p], src[2 * p + 1]);
                let s = if inverse { -sn[p] } else { sn[p] };
                dst[2 * p] = a * cs[p] - b * s;
                dst[2 * p + 1] = a * s + b * cs[p];
            }
        }
    }
    out
}

fn check_vectors(shape: &[usize], angles: &RopeAngles) -> Result<usize> {
    if shape.len() != 3 || shape[0] != angles.tokens || shape[2] != angles.head_dim {
        return Err(Error::shape(
            "apply_rope",
            format!(
                "vectors {shape:?} vs {} tokens with head_dim {}",
                angles.tokens, angles.head_dim
            ),
        ));
    }
    Ok(shape[1])
}

/// Rotates `vectors` (`[S, n_heads, head_dim]`) by their tokens' coordinates.
pub fn apply_rope(vectors: &Tensor, coords: &Tensor, table: &RopeTable) -> Result<Tensor> {
    let angles = RopeAngles::new(coords, table)?;
    let heads = check_vectors(vectors.shape(), &angles)?;
    Tensor::new(vectors.shape().to_vec(), rotate(vectors.data(), &angles, heads, false))
}

struct RopeOp {
    angles: Arc<RopeAngles>,
    heads: usize,
}

impl CustomOp for RopeOp {
    fn name(&self) -> &'static str {
        "rope3d"
    }

    fn backward(&self, _inputs: &[&Tensor], _output: &Tensor, grad: &[f32]) -> Vec<Option<Vec<f32>>> {
        // Rotations are orthogonal: the VJP is the inverse rotation.
        vec![Some(rotate(grad, &self.angles, self.heads, true))]
    }
}

/// Differentiable [`apply_rope`] on the tape.
pub fn rope(g: &mut Graph, x: Var, angles: &Arc<RopeAngles>) -> Result<Var> {
    let heads = check_vectors(g.shape(x), angles)?;
    let out = rotate(g.value(x).data(), angles, heads, false);
    let t = Tensor::new(g.shape(x).to_vec(), out)?;
    Ok(g.custom(
        &[x],
        t,
        Box::new(RopeOp {
            angles: Arc::clone(angles),
            heads,
        }),
    ))
}
