use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tokenizer::Modality;
use crate::training::synthetic::{LABEL_NAMES, NUM_LABELS};

use super::embed::Embeddings;
use super::metrics::{auroc, bootstrap_ci, macro_bootstrap_ci};
use super::probe::{fit_probe_on, LinearProbe, ProbeConfig, ProbeFilter};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelResult {
    pub name: String,
    pub positives: usize,
    pub negatives: usize,
    /// Absent when the label is single-class in the probe's training or
    /// test data.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auroc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ci_lo: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ci_hi: Option<f64>,
}

/// One probe evaluated on one test set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub probe: ProbeFilter,
    pub eval_modality: ProbeFilter,
    pub n_train: usize,
    pub n_test: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub macro_auroc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub macro_ci_lo: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub macro_ci_hi: Option<f64>,
    pub labels: Vec<LabelResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub stage: String,
    pub checkpoint_step: u64,
    pub dataset: String,
    pub seed: u64,
    pub probe_seed: u64,
    pub probe_epochs: usize,
    pub probe_lr: f64,
    pub probe_l2: f64,
    pub n_boot: usize,
    /// Fully resolved run configuration.
    pub config: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metadata: ReportMeta,
    pub evaluations: Vec<Evaluation>,
}

impl EvalReport {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("report serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Format(format!("eval report: {e}")))
    }

    pub fn find(&self, probe: ProbeFilter, eval_modality: ProbeFilter) -> Option<&Evaluation> {
        self.evaluations
            .iter()
            .find(|e| e.probe == probe && e.eval_modality == eval_modality)
    }
}

fn modality_filter(m: Modality) -> ProbeFilter {
    if m.is_2d() {
        ProbeFilter::D2
    } else {
        ProbeFilter::D3
    }
}

/// Per-label and macro AUROC of `probe` on `test`, with percentile
/// bootstrap intervals.
///
/// The macro average covers labels evaluable in both the probe and the
/// test set; its interval resamples samples jointly across those labels.
pub fn evaluate_probe(
    probe: &LinearProbe,
    probe_filter: ProbeFilter,
    n_train: usize,
    test: &Embeddings,
    n_boot: usize,
    seed: u64,
) -> Result<Evaluation> {
    let eval_modality = match test.modalities.first() {
        Some(&m) if test.modalities.iter().all(|&x| x == m) => modality_filter(m),
        Some(_) => ProbeFilter::All,
        None => return Err(Error::invalid("empty test set")),
    };
    let mut labels = Vec::with_capacity(NUM_LABELS);
    let mut cols: Vec<(Vec<f64>, Vec<bool>)> = Vec::new();
    for (l, name) in LABEL_NAMES.iter().enumerate() {
        let y: Vec<bool> = test.labels.iter().map(|&b| b >> l & 1 == 1).collect();
        let positives = y.iter().filter(|&&v| v).count();
        let mut res = LabelResult {
            name: name.to_string(),
            positives,
            negatives: y.len() - positives,
            auroc: None,
            ci_lo: None,
            ci_hi: None,
        };
        if let (Some(s), true) = (probe.scores(&test.rows, l)?, positives > 0 && positives < y.len()) {
            res.auroc = Some(auroc(&s, &y)?);
            let (lo, hi) = bootstrap_ci(&s, &y, n_boot, rng::derive(seed, &[rng::tag::BOOTSTRAP, l as u64]))?;
            res.ci_lo = Some(lo);
            res.ci_hi = Some(hi);
            cols.push((s, y));
        }
        labels.push(res);
    }
    let (macro_auroc, macro_ci) = if cols.is_empty() {
        (None, None)
    } else {
        let m = labels.iter().filter_map(|r| r.auroc).sum::<f64>() / cols.len() as f64;
        let s: Vec<&[f64]> = cols.iter().map(|c| c.0.as_slice()).collect();
        let y: Vec<&[bool]> = cols.iter().map(|c| c.1.as_slice()).collect();
        let ci = macro_bootstrap_ci(&s, &y, n_boot, rng::derive(seed, &[rng::tag::BOOTSTRAP, NUM_LABELS as u64]))?;
        (Some(m), Some(ci))
    };
    Ok(Evaluation {
        probe: probe_filter,
        eval_modality,
        n_train,
        n_test: test.len(),
        macro_auroc,
        macro_ci_lo: macro_ci.map(|c| c.0),
        macro_ci_hi: macro_ci.map(|c| c.1),
        labels,
    })
}

/// Fits a probe with `cfg` on `train` and evaluates it on each modality
/// present in `test`.
pub fn probe_and_evaluate(train: &Embeddings, test: &Embeddings, cfg: &ProbeConfig, n_boot: usize) -> Result<Vec<Evaluation>> {
    let probe = fit_probe_on(train, cfg)?;
    let n_train = train.filter(|m| cfg.filter.admits(m)).len();
    let mut out = Vec::new();
    for m in [Modality::Xray2d, Modality::Ct3d] {
        let sub = test.filter(|x| x == m);
        if !sub.is_empty() {
            out.push(evaluate_probe(&probe, cfg.filter, n_train, &sub, n_boot, cfg.seed)?);
        }
    }
    Ok(out)
}

/// The probe-filter x eval-modality grid: 2D-only, 3D-only and ALL probes,
/// each evaluated on the 2D and the 3D test sets.
pub fn modality_robustness_report(
    train: &Embeddings,
    test: &Embeddings,
    cfg: &ProbeConfig,
    n_boot: usize,
) -> Result<Vec<Evaluation>> {
    for m in [Modality::Xray2d, Modality::Ct3d] {
        if !train.modalities.contains(&m) || !test.modalities.contains(&m) {
            return Err(Error::invalid(format!(
                "robustness grid needs {} samples in both train and test data",
                m.name()
            )));
        }
    }
    let mut out = Vec::with_capacity(6);
    for filter in ProbeFilter::ALL {
        let c = ProbeConfig {
            filter,
            ..cfg.clone()
        };
        out.extend(probe_and_evaluate(train, test, &c, n_boot)?);
    }
    Ok(out)
}
