//! Centroid prediction loss and the SIGReg normality regularizer.
//!
//! The regularizer projects the batch of embeddings onto random unit
//! directions and scores each 1D projection with the Epps-Pulley statistic,
//! the standard-normal-weighted L2 distance between the empirical
//! characteristic function and `exp(-t^2 / 2)`:
//!
//! ```text
//! T(x) = N * ∫ |phi_N(t) - exp(-t²/2)|² phi(t) dt
//!      = (1/N) Σ_jk exp(-(x_j - x_k)²/2) - √2 Σ_j exp(-x_j²/4) + N/√3
//! ```

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::substrate::{CustomOp, Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub lambda: f32,
    pub directions: usize,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            lambda: 0.025,
            directions: 64,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("objective.lambda {} not in [0, 1]", self.lambda)));
        }
        if self.directions == 0 {
            return Err(Error::Config("objective.directions must be at least 1".into()));
        }
        Ok(())
    }
}

/// Mean over samples of `(1/V) Σ_v ||mu - e_v||²`, where `mu` is the mean of
/// each sample's first `global_views` embeddings.
///
/// `embeddings` is `[n_samples * views, d]`, grouped by sample with global
/// views first.
pub fn prediction_loss(g: &mut Graph, embeddings: Var, views: usize, global_views: usize) -> Result<Var> {
    if global_views == 0 {
        return Err(Error::invalid("prediction loss needs at least one global view"));
    }
    if global_views > views {
        return Err(Error::invalid(format!("{global_views} global views out of {views}")));
    }
    let shape = g.shape(embeddings).to_vec();
    if shape.len() != 2 || !shape[0].is_multiple_of(views) {
        return Err(Error::shape(
            "prediction_loss",
            format!("embeddings {shape:?} not divisible into groups of {views} views"),
        ));
    }
    let n = shape[0] / views;
    let e = g.reshape(embeddings, &[n, views, shape[1]])?;
    let globals = g.slice(e, 1, 0, global_views)?;
    let mu = g.mean_axis(globals, 1)?;
    let diff = g.sub(e, mu)?;
    let sq = g.square(diff);
    let dist = g.sum_axis(sq, 2)?;
    Ok(g.mean(dist))
}

/// Closed-form Epps-Pulley statistic of one sample set.
pub fn ep_statistic(x: &[f32]) -> Result<f64> {
    if x.is_empty() {
        return Err(Error::invalid("ep_statistic needs at least one sample"));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("ep_statistic input".into()));
    }
    Ok(ep_column(x.iter().map(|&v| v as f64)).0)
}

/// Statistic and its gradient for one column of projections.
fn ep_column(x: impl Iterator<Item = f64> + Clone) -> (f64, Vec<f64>) {
    let xs: Vec<f64> = x.collect();
    let n = xs.len() as f64;
    let mut pair = 0.0;
    let mut grad = vec![0.0; xs.len()];
    for (j, &a) in xs.iter().enumerate() {
        pair += 1.0; // k == j
        for (k, &b) in xs.iter().enumerate().skip(j + 1) {
            let d = a - b;
            let e = (-0.5 * d * d).exp();
            pair += 2.0 * e;
            // d/dx_j of 2 e / N (pair counted twice)
            let gj = -2.0 * d * e / n;
            grad[j] += gj;
            grad[k] -= gj;
        }
    }
    let mut single = 0.0;
    for (j, &a) in xs.iter().enumerate() {
        let e = (-0.25 * a * a).exp();
        single += e;
        grad[j] += std::f64::consts::SQRT_2 * 0.5 * a * e;
    }
    let t = pair / n - std::f64::consts::SQRT_2 * single + n / 3f64.sqrt();
    (t, grad)
}

struct EppsPulleyOp {
    grads: Vec<f64>,
}

impl CustomOp for EppsPulleyOp {
    fn name(&self) -> &'static str {
        "epps_pulley"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &[f32]) -> Vec<Option<Vec<f32>>> {
        let m = inputs[0].shape()[1];
        let dx = self
            .grads
            .iter()
            .enumerate()
            .map(|(i, &gv)| (gv * grad[i % m] as f64) as f32)
            .collect();
        vec![Some(dx)]
    }
}

/// Column-wise statistic: `[N, M] -> [M]`.
pub fn ep_statistic_op(g: &mut Graph, x: Var) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 2 {
        return Err(Error::shape("ep_statistic", format!("expected [N, M], got {shape:?}")));
    }
    let (n, m) = (shape[0], shape[1]);
    let data = g.value(x).data();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("ep_statistic input".into()));
    }
    let mut out = Vec::with_capacity(m);
    let mut grads = vec![0.0; n * m];
    for c in 0..m {
        let (t, gc) = ep_column((0..n).map(|r| data[r * m + c] as f64));
        out.push(t as f32);
        for (r, gv) in gc.into_iter().enumerate() {
            grads[r * m + c] = gv;
        }
    }
    let t = Tensor::new(vec![m], out)?;
    Ok(g.custom(&[x], t, Box::new(EppsPulleyOp { grads })))
}

/// `m` directions drawn uniformly on the unit sphere in `R^d`, as the
/// columns of a `[d, m]` matrix.
pub fn sample_directions(d: usize, m: usize, seed: u64) -> Tensor {
    let mut r = rng::stream(seed, &[rng::tag::SIGREG]);
    let mut cols = vec![0.0f64; d * m];
    for c in 0..m {
        let mut norm = 0.0;
        for i in 0..d {
            let z: f64 = StandardNormal.sample(&mut r);
            cols[i * m + c] = z;
            norm += z * z;
        }
        let inv = 1.0 / norm.sqrt();
        for i in 0..d {
            cols[i * m + c] *= inv;
        }
    }
    Tensor::new(vec![d, m], cols.into_iter().map(|v| v as f32).collect()).expect("shape")
}

/// Mean over `directions` random projections of `T / N`.
///
/// The directions are constants on the tape; gradients reach only `embeddings`.
pub fn sigreg_loss(g: &mut Graph, embeddings: Var, directions: usize, seed: u64) -> Result<Var> {
    let shape = g.shape(embeddings).to_vec();
    if shape.len() != 2 || shape[0] < 2 {
        return Err(Error::invalid(format!("SIGReg needs [N >= 2, d] embeddings, got {shape:?}")));
    }
    let u = g.constant(sample_directions(shape[1], directions, seed));
    let proj = g.matmul(embeddings, u)?;
    let t = ep_statistic_op(g, proj)?;
    let mean = g.mean(t);
    Ok(g.scale(mean, 1.0 / shape[0] as f32))
}

/// `(1 - lambda) * pred + lambda * sigreg`.
pub fn total_loss(g: &mut Graph, pred: Var, sigreg: Var, lambda: f32) -> Result<Var> {
    let a = g.scale(pred, 1.0 - lambda);
    let b = g.scale(sigreg, lambda);
    g.add(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn anchor_values() {
        let one = ep_statistic(&[0.0]).unwrap();
        assert!((one - 0.16314).abs() < 1e-4, "{one}");
        let two = ep_statistic(&[0.0, 0.0]).unwrap();
        assert!((two - 0.32627).abs() < 1e-4, "{two}");
        assert!(ep_statistic(&[]).is_err());
        assert!(ep_statistic(&[f32::NAN]).is_err());
    }

    #[test]
    fn two_global_views_hand_value() {
        let mut g = Graph::new();
        let e = g.constant(Tensor::new(vec![2, 2], vec![0.0, 0.0, 2.0, 0.0]).unwrap());
        let l = prediction_loss(&mut g, e, 2, 2).unwrap();
        assert!((g.value(l).item() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn identical_views_zero_loss() {
        let mut g = Graph::new();
        let e = g.constant(Tensor::new(vec![3, 2], vec![1.0, -2.0, 1.0, -2.0, 1.0, -2.0]).unwrap());
        let l = prediction_loss(&mut g, e, 3, 1).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        assert!(prediction_loss(&mut g, e, 3, 0).is_err());
    }

    #[test]
    fn single_global_reduces_to_local_distances() {
        // global (1, 1); locals (1, 3) and (4, 1): distances 4 and 9, V = 3
        let mut g = Graph::new();
        let e = g.constant(Tensor::new(vec![3, 2], vec![1.0, 1.0, 1.0, 3.0, 4.0, 1.0]).unwrap());
        let l = prediction_loss(&mut g, e, 3, 1).unwrap();
        assert!((g.value(l).item() - 13.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn total_loss_mixing() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::scalar(1.0));
        let s = g.constant(Tensor::scalar(3.0));
        for (lambda, want) in [(0.0, 1.0), (1.0, 3.0), (0.025, 1.05)] {
            let t = total_loss(&mut g, p, s, lambda).unwrap();
            assert!((g.value(t).item() - want).abs() < 1e-6);
        }
    }

    #[test]
    fn directions_are_unit() {
        let u = sample_directions(7, 5, 3);
        for c in 0..5 {
            let n: f32 = (0..7).map(|i| u.data()[i * 5 + c].powi(2)).sum();
            assert!((n - 1.0).abs() < 1e-5);
        }
        assert_eq!(u, sample_directions(7, 5, 3));
    }

    #[test]
    fn sigreg_rejects_single_row() {
        let mut g = Graph::new();
        let e = g.param(Tensor::zeros(&[1, 4]));
        assert!(sigreg_loss(&mut g, e, 4, 0).is_err());
    }
}
