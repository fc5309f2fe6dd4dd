use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tokenizer::Modality;
use crate::training::synthetic::NUM_LABELS;

use super::embed::Embeddings;

/// Which frozen embeddings a probe is trained on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ProbeFilter {
    #[serde(rename = "2d")]
    D2,
    #[serde(rename = "3d")]
    D3,
    #[serde(rename = "all")]
    All,
}

impl ProbeFilter {
    pub const ALL: [ProbeFilter; 3] = [ProbeFilter::D2, ProbeFilter::D3, ProbeFilter::All];

    pub fn name(self) -> &'static str {
        match self {
            ProbeFilter::D2 => "2d",
            ProbeFilter::D3 => "3d",
            ProbeFilter::All => "all",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "2d" => Ok(ProbeFilter::D2),
            "3d" => Ok(ProbeFilter::D3),
            "all" => Ok(ProbeFilter::All),
            _ => Err(Error::Config(format!("probe modality {s:?}: expected 2d, 3d or all"))),
        }
    }

    pub fn admits(self, m: Modality) -> bool {
        match self {
            ProbeFilter::D2 => m.is_2d(),
            ProbeFilter::D3 => !m.is_2d(),
            ProbeFilter::All => true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub filter: ProbeFilter,
    /// Maximum number of full-batch Newton iterations.
    pub epochs: usize,
    /// Newton step length before backtracking (1.0 is the full step).
    pub lr: f64,
    /// Weight penalty `l2/2 * |w|^2` added to the mean log-loss.
    pub l2: f64,
    /// Seeds the initial weights.
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            filter: ProbeFilter::All,
            epochs: 100,
            lr: 1.0,
            l2: 1e-4,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("probe.epochs must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr <= 1.0) {
            return Err(Error::Config(format!("probe.lr must be in (0, 1], got {}", self.lr)));
        }
        if !(self.l2 >= 0.0) {
            return Err(Error::Config(format!("probe.l2 must be >= 0, got {}", self.l2)));
        }
        Ok(())
    }
}

/// One-vs-rest logistic scorers over standardized embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    /// `(weights, bias)` per label; `None` when the training set had one class.
    pub heads: Vec<Option<(Vec<f64>, f64)>>,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mean log-loss plus the weight penalty, for rows `[z | 1]`.
fn objective(z: &DMatrix<f64>, y: &[f64], w: &DVector<f64>, l2: f64) -> f64 {
    let s = z * w;
    let d = w.len() - 1;
    let loss: f64 = s
        .iter()
        .zip(y)
        .map(|(&s, &y)| {
            // log(1 + e^s) - y s, evaluated without overflow
            let softplus = if s > 0.0 { s + (-s).exp().ln_1p() } else { s.exp().ln_1p() };
            softplus - y * s
        })
        .sum::<f64>()
        / y.len() as f64;
    loss + 0.5 * l2 * w.rows(0, d).norm_squared()
}

/// Minimizes the penalized log-loss of one label by damped Newton steps
/// with backtracking. Returns `[w | b]`.
fn newton(z: &DMatrix<f64>, y: &[f64], init: DVector<f64>, cfg: &ProbeConfig) -> Result<DVector<f64>> {
    let (n, k) = z.shape();
    let d = k - 1;
    let mut w = init;
    let mut f = objective(z, y, &w, cfg.l2);
    for _ in 0..cfg.epochs {
        let s = z * &w;
        let p: Vec<f64> = s.iter().map(|&v| sigmoid(v)).collect();
        let resid = DVector::from_iterator(n, p.iter().zip(y).map(|(p, y)| p - y));
        let mut grad = z.tr_mul(&resid) / n as f64;
        let mut weighted = z.clone();
        for (mut row, p) in weighted.row_iter_mut().zip(&p) {
            row *= p * (1.0 - p);
        }
        let mut hess = z.tr_mul(&weighted) / n as f64;
        for j in 0..d {
            grad[j] += cfg.l2 * w[j];
            hess[(j, j)] += cfg.l2;
        }
        // The bias is unpenalized; a tiny ridge keeps the system definite
        // when every probability saturates.
        hess[(d, d)] += 1e-12;
        if grad.amax() < 1e-10 {
            break;
        }
        let step = hess
            .cholesky()
            .ok_or_else(|| Error::NonFinite("probe Hessian is not positive definite".into()))?
            .solve(&grad);
        let decrement = grad.dot(&step);
        let mut t = cfg.lr;
        loop {
            let cand = &w - &step * t;
            let fc = objective(z, y, &cand, cfg.l2);
            if fc <= f - 1e-4 * t * decrement {
                w = cand;
                f = fc;
                break;
            }
            t *= 0.5;
            if t < 1e-8 {
                return Ok(w);
            }
        }
        if decrement < 1e-14 {
            break;
        }
    }
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("probe weights".into()));
    }
    Ok(w)
}

/// Per-label L2-penalized logistic regression on standardized features,
/// solved to convergence by Newton's method.
///
/// Labels with a single class in the training set get no head.
pub fn fit_linear_probe(x: &[Vec<f64>], labels: &[u8], cfg: &ProbeConfig) -> Result<LinearProbe> {
    cfg.validate()?;
    let n = x.len();
    if n < 2 {
        return Err(Error::invalid(format!("probe needs at least 2 samples, got {n}")));
    }
    if labels.len() != n {
        return Err(Error::shape("fit_linear_probe", format!("{n} rows vs {} labels", labels.len())));
    }
    let d = x[0].len();
    if x.iter().any(|r| r.len() != d) {
        return Err(Error::shape("fit_linear_probe", "ragged embedding rows".to_string()));
    }
    if x.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("probe inputs".into()));
    }
    let mean: Vec<f64> = (0..d).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let scale: Vec<f64> = (0..d)
        .map(|j| {
            let var = x.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n as f64;
            if var > 1e-24 {
                var.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let z = DMatrix::from_fn(n, d + 1, |i, j| if j < d { (x[i][j] - mean[j]) / scale[j] } else { 1.0 });

    let mut heads = Vec::with_capacity(NUM_LABELS);
    for label in 0..NUM_LABELS {
        let y: Vec<f64> = labels.iter().map(|&l| (l >> label & 1) as f64).collect();
        let pos = y.iter().sum::<f64>();
        if pos == 0.0 || pos == n as f64 {
            heads.push(None);
            continue;
        }
        let mut r = rng::stream(cfg.seed, &[rng::tag::PROBE, label as u64]);
        let init = Normal::new(0.0, 0.01).expect("valid normal");
        let w0 = DVector::from_fn(d + 1, |j, _| if j < d { init.sample(&mut r) } else { 0.0 });
        let w = newton(&z, &y, w0, cfg)?;
        heads.push(Some((w.rows(0, d).iter().copied().collect(), w[d])));
    }
    Ok(LinearProbe { mean, scale, heads })
}

impl LinearProbe {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Logit of label `label` for each row; `None` for an unevaluable label.
    pub fn scores(&self, x: &[Vec<f64>], label: usize) -> Result<Option<Vec<f64>>> {
        if x.iter().any(|r| r.len() != self.dim()) {
            return Err(Error::shape("probe scores", format!("rows must have {} features", self.dim())));
        }
        Ok(self.heads[label].as_ref().map(|(w, b)| {
            x.iter()
                .map(|r| {
                    r.iter()
                        .zip(&self.mean)
                        .zip(&self.scale)
                        .zip(w)
                        .map(|(((v, m), s), w)| (v - m) / s * w)
                        .sum::<f64>()
                        + b
                })
                .collect()
        }))
    }

    /// Fraction of training-style predictions (logit > 0) that match.
    pub fn accuracy(&self, x: &[Vec<f64>], labels: &[u8], label: usize) -> Result<Option<f64>> {
        Ok(self.scores(x, label)?.map(|s| {
            let hits = s
                .iter()
                .zip(labels)
                .filter(|(s, l)| (**s > 0.0) == (*l >> label & 1 == 1))
                .count();
            hits as f64 / labels.len() as f64
        }))
    }
}

/// Fits a probe on the rows of `train` admitted by `cfg.filter`.
pub fn fit_probe_on(train: &Embeddings, cfg: &ProbeConfig) -> Result<LinearProbe> {
    let sub = train.filter(|m| cfg.filter.admits(m));
    if sub.is_empty() {
        return Err(Error::invalid(format!("no training embeddings for probe filter {}", cfg.filter.name())));
    }
    fit_linear_probe(&sub.rows, &sub.labels, cfg)
}
