//! Central finite-difference verification of analytic gradients.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f32,
    pub rtol: f32,
    /// Check at most this many coordinates per leaf (evenly strided).
    pub max_coords: usize,
    /// Fourth-order central stencil `(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h`
    /// instead of the two-point one. Its truncation error is small enough
    /// to allow a larger `step`, which keeps 32-bit rounding noise down on
    /// deep compositions.
    pub five_point: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-3,
            rtol: 1e-2,
            max_coords: usize::MAX,
            five_point: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LeafReport {
    pub leaf: usize,
    pub checked: usize,
    pub max_rel_err: f32,
    pub worst_coord: usize,
    pub analytic: f32,
    pub numeric: f32,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub leaves: Vec<LeafReport>,
    pub rtol: f32,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.leaves.iter().all(|l| l.max_rel_err <= self.rtol)
    }

    pub fn max_rel_err(&self) -> f32 {
        self.leaves.iter().map(|l| l.max_rel_err).fold(0.0, f32::max)
    }
}

/// Compares the analytic gradient of the scalar built by `f` against
/// central differences at `points`.
///
/// The per-coordinate error is `|a - n| / max(|a|, |n|, floor)` where the
/// floor is 1% of the largest numeric gradient magnitude on that leaf (and at
/// least 1e-3). Coordinates whose gradient is negligible next to the rest of
/// the leaf are thereby held to an absolute rather than relative standard,
/// which is what 32-bit differencing can resolve.
pub fn grad_check<F>(mut f: F, points: &[Tensor], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |f: &mut F, pts: &[Tensor]| -> Result<f32> {
        let mut g = Graph::new();
        let leaves: Vec<Var> = pts.iter().map(|p| g.param(p.clone())).collect();
        let out = f(&mut g, &leaves)?;
        let v = g.value(out);
        if !v.is_scalar() {
            return Err(Error::shape("grad_check", format!("non-scalar output {:?}", v.shape())));
        }
        Ok(v.item())
    };

    let mut g = Graph::new();
    let leaves: Vec<Var> = points.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &leaves)?;
    if !g.value(out).all_finite() {
        return Err(Error::NonFinite("grad_check: forward value at the base point".into()));
    }
    let grads = g.backward(out)?;

    let mut pts = points.to_vec();
    let mut reports = Vec::with_capacity(points.len());
    for (li, leaf) in leaves.iter().enumerate() {
        let analytic = grads.tensor(*leaf);
        let n = points[li].numel();
        let stride = n.div_ceil(opts.max_coords.min(n)).max(1);
        let coords: Vec<usize> = (0..n).step_by(stride).collect();
        let mut numeric = Vec::with_capacity(coords.len());
        for &c in &coords {
            let orig = pts[li].data()[c];
            let mut at = |offset: f32, pts: &mut Vec<Tensor>| -> Result<f64> {
                pts[li].data_mut()[c] = orig + offset;
                let v = eval(&mut f, pts)?;
                pts[li].data_mut()[c] = orig;
                if !v.is_finite() {
                    return Err(Error::NonFinite(format!("grad_check: leaf {li} coordinate {c}")));
                }
                Ok(v as f64)
            };
            let h = opts.step;
            let d = if opts.five_point {
                let (p1, m1) = (at(h, &mut pts)?, at(-h, &mut pts)?);
                let (p2, m2) = (at(2.0 * h, &mut pts)?, at(-2.0 * h, &mut pts)?);
                (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h as f64)
            } else {
                (at(h, &mut pts)? - at(-h, &mut pts)?) / (2.0 * h as f64)
            };
            numeric.push(d as f32);
        }
        let scale = numeric.iter().map(|v| v.abs()).fold(0.0, f32::max);
        let floor = (0.01 * scale).max(1e-3);
        let mut rep = LeafReport {
            leaf: li,
            checked: coords.len(),
            max_rel_err: 0.0,
            worst_coord: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for (&c, &nv) in coords.iter().zip(&numeric) {
            let av = analytic.data()[c];
            if !av.is_finite() {
                return Err(Error::NonFinite(format!(
                    "grad_check: analytic gradient leaf {li} coordinate {c}"
                )));
            }
            let err = (av - nv).abs() / av.abs().max(nv.abs()).max(floor);
            if err > rep.max_rel_err {
                rep.max_rel_err = err;
                rep.worst_coord = c;
                rep.analytic = av;
                rep.numeric = nv;
            }
        }
        reports.push(rep);
    }
    Ok(GradCheckReport {
        leaves: reports,
        rtol: opts.rtol,
    })
}
