use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::VerifyError;

fn check(labels: &[u8], scores: &[f64]) -> Result<(usize, usize), VerifyError> {
    if labels.len() != scores.len() {
        return Err(VerifyError::LengthMismatch {
            labels: labels.len(),
            scores: scores.len(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l > 1) {
        return Err(VerifyError::InvalidLabel(bad));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(VerifyError::SingleClass);
    }
    Ok((pos, neg))
}

/// Mann-Whitney AUC with midranks, so tied scores count one half.
pub fn roc_auc(labels: &[u8], scores: &[f64]) -> Result<f64, VerifyError> {
    let (pos, neg) = check(labels, scores)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let midrank = (i + j + 2) as f64 / 2.0;
        rank_sum += midrank * order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AucInterval {
    pub lo: f64,
    pub hi: f64,
    pub point: f64,
}

/// Percentile bootstrap over `(label, score)` pairs. Resamples that miss a
/// class are redrawn. The interval is widened if needed so that it
/// contains the point estimate.
pub fn bootstrap_ci(
    labels: &[u8],
    scores: &[f64],
    n_boot: usize,
    alpha: f64,
    seed: u64,
) -> Result<AucInterval, VerifyError> {
    let point = roc_auc(labels, scores)?;
    let n = labels.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stats = Vec::with_capacity(n_boot);
    let mut l = vec![0u8; n];
    let mut s = vec![0.0; n];
    while stats.len() < n_boot {
        for k in 0..n {
            let i = rng.random_range(0..n);
            l[k] = labels[i];
            s[k] = scores[i];
        }
        match roc_auc(&l, &s) {
            Ok(auc) => stats.push(auc),
            Err(VerifyError::SingleClass) => continue,
            Err(e) => return Err(e),
        }
    }
    stats.sort_by(f64::total_cmp);
    let at = |q: f64| stats[((stats.len() - 1) as f64 * q).round() as usize];
    Ok(AucInterval {
        lo: at(alpha / 2.0).min(point),
        hi: at(1.0 - alpha / 2.0).max(point),
        point,
    })
}
