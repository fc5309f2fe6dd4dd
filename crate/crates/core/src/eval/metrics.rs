use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng;

/// Pairwise ranking counts behind the Mann-Whitney AUROC.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RankCounts {
    pub positives: u64,
    pub negatives: u64,
    /// Positive-negative pairs with the positive scored higher.
    pub concordant: u64,
    pub tied: u64,
}

impl RankCounts {
    pub fn auroc(&self) -> f64 {
        (2 * self.concordant + self.tied) as f64 / (2 * self.positives * self.negatives) as f64
    }
}

/// Exact counts in `O(n log n)`: sort by score and walk tie groups.
pub fn rank_counts(scores: &[f64], labels: &[bool]) -> Result<RankCounts> {
    if scores.len() != labels.len() {
        return Err(Error::shape(
            "auroc",
            format!("{} scores vs {} labels", scores.len(), labels.len()),
        ));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("auroc scores contain NaN".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let (mut neg_below, mut conc, mut tied) = (0u64, 0u64, 0u64);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut p, mut n) = (0u64, 0u64);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] {
                p += 1;
            } else {
                n += 1;
            }
            j += 1;
        }
        conc += p * neg_below;
        tied += p * n;
        neg_below += n;
        i = j;
    }
    let positives = labels.iter().filter(|&&l| l).count() as u64;
    Ok(RankCounts {
        positives,
        negatives: labels.len() as u64 - positives,
        concordant: conc,
        tied,
    })
}

/// `(#concordant + 0.5 #tied) / (#pos * #neg)`; undefined for one class.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let c = rank_counts(scores, labels)?;
    if c.positives == 0 || c.negatives == 0 {
        return Err(Error::Undefined(format!(
            "AUROC needs both classes ({} positives, {} negatives)",
            c.positives, c.negatives
        )));
    }
    Ok(c.auroc())
}

/// Linear-interpolated quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Resampled index sets with both classes present for every column of
/// `labels`, deterministic in `seed`.
fn resample(n: usize, labels: &[&[bool]], r: &mut rng::Rng, idx: &mut Vec<usize>) {
    loop {
        idx.clear();
        idx.extend((0..n).map(|_| r.random_range(0..n)));
        let ok = labels.iter().all(|l| {
            let pos = idx.iter().filter(|&&i| l[i]).count();
            pos > 0 && pos < n
        });
        if ok {
            return;
        }
    }
}

fn check_classes(labels: &[bool]) -> Result<()> {
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 || pos == labels.len() {
        return Err(Error::Undefined("bootstrap needs both classes".into()));
    }
    Ok(())
}

/// 95% percentile bootstrap interval of the AUROC over `n_boot` sample-level
/// resamples; resamples missing a class are redrawn.
pub fn bootstrap_ci(scores: &[f64], labels: &[bool], n_boot: usize, seed: u64) -> Result<(f64, f64)> {
    auroc(scores, labels)?;
    macro_bootstrap_ci(&[scores], &[labels], n_boot, seed)
}

/// Percentile interval of the mean AUROC over several score/label columns
/// that share one set of samples.
pub fn macro_bootstrap_ci(scores: &[&[f64]], labels: &[&[bool]], n_boot: usize, seed: u64) -> Result<(f64, f64)> {
    if n_boot == 0 {
        return Err(Error::invalid("n_boot must be at least 1"));
    }
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(Error::invalid("macro bootstrap needs matching, non-empty score and label columns"));
    }
    let n = labels[0].len();
    for (s, l) in scores.iter().zip(labels) {
        if s.len() != n || l.len() != n {
            return Err(Error::shape("bootstrap", "columns differ in length".to_string()));
        }
        check_classes(l)?;
    }
    let mut r = rng::stream(seed, &[rng::tag::BOOTSTRAP]);
    let mut idx = Vec::with_capacity(n);
    let mut s_buf = vec![0.0; n];
    let mut l_buf = vec![false; n];
    let mut stats = Vec::with_capacity(n_boot);
    for _ in 0..n_boot {
        resample(n, labels, &mut r, &mut idx);
        let mut total = 0.0;
        for (s, l) in scores.iter().zip(labels) {
            for (k, &i) in idx.iter().enumerate() {
                s_buf[k] = s[i];
                l_buf[k] = l[i];
            }
            total += auroc(&s_buf, &l_buf)?;
        }
        stats.push(total / scores.len() as f64);
    }
    stats.sort_by(f64::total_cmp);
    Ok((quantile(&stats, 0.025), quantile(&stats, 0.975)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_examples() {
        assert_eq!(auroc(&[0.9, 0.1], &[true, false]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.3; 4], &[true, false, true, false]).unwrap(), 0.5);
        assert_eq!(auroc(&[0.8, 0.6, 0.4, 0.2], &[true, false, true, false]).unwrap(), 0.75);
        assert!(matches!(auroc(&[0.1, 0.2], &[true, true]), Err(Error::Undefined(_))));
    }

    #[test]
    fn quantile_interpolates() {
        let s = [0.0, 1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&s, 0.5), 2.0);
        assert_eq!(quantile(&s, 0.125), 0.5);
    }

    #[test]
    fn separated_sample_collapses() {
        let scores: Vec<f64> = (0..40).map(|i| i as f64).collect();
        let labels: Vec<bool> = (0..40).map(|i| i >= 20).collect();
        assert_eq!(bootstrap_ci(&scores, &labels, 200, 1).unwrap(), (1.0, 1.0));
    }
}
