//! Evaluation math: probabilistic distances, retrieval Recall@1, binned
//! uncertainty calibration, confidence transform, ECE and uncertain-sample
//! selection.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{GroveError, Result};
use crate::inference::ProbabilisticEmbedding;
use crate::par;

/// Diagonal Gaussian `N(mean, diag(variance))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagGaussian {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mean: Vec<f64>, variance: Vec<f64>) -> Result<Self> {
        if mean.len() != variance.len() {
            return Err(GroveError::ShapeMismatch(format!(
                "mean has {} dims, variance {}",
                mean.len(),
                variance.len()
            )));
        }
        if let Some(v) = variance.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
            return Err(GroveError::DegenerateInput(format!("variance must be positive and finite, got {v}")));
        }
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(GroveError::NonFiniteValue("gaussian mean".into()));
        }
        Ok(DiagGaussian { mean, variance })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

impl From<&ProbabilisticEmbedding> for DiagGaussian {
    fn from(e: &ProbabilisticEmbedding) -> Self {
        DiagGaussian {
            mean: e.mean.clone(),
            variance: e.variance.clone(),
        }
    }
}

fn same_dims(p: &DiagGaussian, q: &DiagGaussian) -> Result<()> {
    if p.dim() != q.dim() {
        return Err(GroveError::ShapeMismatch(format!("gaussians have {} and {} dims", p.dim(), q.dim())));
    }
    Ok(())
}

/// Squared 2-Wasserstein distance between diagonal Gaussians:
/// `‖μp − μq‖² + Σ(√vp − √vq)²`.
pub fn wasserstein2_diag(p: &DiagGaussian, q: &DiagGaussian) -> Result<f64> {
    same_dims(p, q)?;
    Ok(w2_unchecked(p, q))
}

fn w2_unchecked(p: &DiagGaussian, q: &DiagGaussian) -> f64 {
    (0..p.dim())
        .map(|d| {
            let dm = p.mean[d] - q.mean[d];
            let ds = p.variance[d].sqrt() - q.variance[d].sqrt();
            dm * dm + ds * ds
        })
        .sum()
}

/// `KL(p ‖ q)` for diagonal Gaussians.
pub fn kl_diag(p: &DiagGaussian, q: &DiagGaussian) -> Result<f64> {
    same_dims(p, q)?;
    Ok(kl_unchecked(&p.mean, &p.variance, &q.mean, &q.variance))
}

fn kl_unchecked(mp: &[f64], vp: &[f64], mq: &[f64], vq: &[f64]) -> f64 {
    0.5 * (0..mp.len())
        .map(|d| {
            let dm = mq[d] - mp[d];
            vp[d] / vq[d] + dm * dm / vq[d] - 1.0 + (vq[d] / vp[d]).ln()
        })
        .sum::<f64>()
}

/// Jensen-Shannon divergence `½[KL(p‖m) + KL(q‖m)]`, with `m` the diagonal
/// Gaussian matching the first two moments of the mixture `½(p + q)`.
pub fn js_diag(p: &DiagGaussian, q: &DiagGaussian) -> Result<f64> {
    same_dims(p, q)?;
    Ok(js_unchecked(p, q))
}

fn js_unchecked(p: &DiagGaussian, q: &DiagGaussian) -> f64 {
    let d = p.dim();
    let mm: Vec<f64> = (0..d).map(|i| 0.5 * (p.mean[i] + q.mean[i])).collect();
    let vm: Vec<f64> = (0..d)
        .map(|i| {
            let dm = p.mean[i] - q.mean[i];
            0.5 * (p.variance[i] + q.variance[i]) + 0.25 * dm * dm
        })
        .collect();
    0.5 * (kl_unchecked(&p.mean, &p.variance, &mm, &vm) + kl_unchecked(&q.mean, &q.variance, &mm, &vm))
}

/// Ranking distance for retrieval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distance {
    #[default]
    W2,
    /// `KL(query ‖ candidate)`.
    Kl,
    Js,
    /// `1 − cos(μ_query, μ_candidate)`; a zero mean vector counts as orthogonal.
    Cosine,
}

impl Distance {
    pub const ALL: [Distance; 4] = [Distance::W2, Distance::Kl, Distance::Js, Distance::Cosine];

    pub fn as_str(self) -> &'static str {
        match self {
            Distance::W2 => "w2",
            Distance::Kl => "kl",
            Distance::Js => "js",
            Distance::Cosine => "cosine",
        }
    }

    pub fn eval(self, p: &DiagGaussian, q: &DiagGaussian) -> Result<f64> {
        same_dims(p, q)?;
        Ok(match self {
            Distance::W2 => w2_unchecked(p, q),
            Distance::Kl => kl_unchecked(&p.mean, &p.variance, &q.mean, &q.variance),
            Distance::Js => js_unchecked(p, q),
            Distance::Cosine => {
                let dot: f64 = p.mean.iter().zip(&q.mean).map(|(a, b)| a * b).sum();
                let na = p.mean.iter().map(|a| a * a).sum::<f64>().sqrt();
                let nb = q.mean.iter().map(|b| b * b).sum::<f64>().sqrt();
                if na == 0.0 || nb == 0.0 {
                    1.0
                } else {
                    1.0 - dot / (na * nb)
                }
            }
        })
    }
}

impl fmt::Display for Distance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Distance {
    type Err = GroveError;

    fn from_str(s: &str) -> Result<Self> {
        Distance::ALL
            .into_iter()
            .find(|d| d.as_str() == s)
            .ok_or_else(|| GroveError::InvalidConfig(format!("distance: expected w2, kl, js or cosine, got {s:?}")))
    }
}

/// Index of the closest gallery item to each query, ties to the lower index.
pub fn top1(queries: &[DiagGaussian], gallery: &[DiagGaussian], distance: Distance) -> Result<Vec<usize>> {
    if gallery.is_empty() {
        return Err(GroveError::EmptyGallery);
    }
    par::map_range(queries.len(), |i| {
        let mut best = (0usize, f64::INFINITY);
        for (j, g) in gallery.iter().enumerate() {
            let d = distance.eval(&queries[i], g)?;
            if d.is_nan() {
                return Err(GroveError::NonFiniteValue(format!("distance between query {i} and item {j}")));
            }
            if d < best.1 || j == 0 {
                best = (j, d);
            }
        }
        Ok(best.0)
    })
    .into_iter()
    .collect()
}

/// Per-query hit flags: whether the top-ranked gallery item is in the
/// query's ground-truth set.
pub fn retrieval_hits(
    queries: &[DiagGaussian],
    gallery: &[DiagGaussian],
    ground_truth: &[Vec<usize>],
    distance: Distance,
) -> Result<Vec<bool>> {
    if ground_truth.len() != queries.len() {
        return Err(GroveError::ShapeMismatch(format!(
            "{} queries but {} ground-truth sets",
            queries.len(),
            ground_truth.len()
        )));
    }
    if gallery.is_empty() {
        return Err(GroveError::EmptyGallery);
    }
    for (i, truth) in ground_truth.iter().enumerate() {
        if let Some(&bad) = truth.iter().find(|&&j| j >= gallery.len()) {
            return Err(GroveError::ShapeMismatch(format!(
                "query {i}: ground-truth index {bad} outside gallery of {}",
                gallery.len()
            )));
        }
    }
    let best = top1(queries, gallery, distance)?;
    Ok(best.iter().zip(ground_truth).map(|(b, t)| t.contains(b)).collect())
}

/// 1-based rank of the first correct gallery item for each query, ordering
/// the gallery by increasing distance with ties broken by lower index
/// (a rank of 1 is exactly a hit in [`retrieval_hits`]).
pub fn first_hit_ranks(
    queries: &[DiagGaussian],
    gallery: &[DiagGaussian],
    ground_truth: &[Vec<usize>],
    distance: Distance,
) -> Result<Vec<usize>> {
    if ground_truth.len() != queries.len() {
        return Err(GroveError::ShapeMismatch(format!(
            "{} queries but {} ground-truth sets",
            queries.len(),
            ground_truth.len()
        )));
    }
    if gallery.is_empty() {
        return Err(GroveError::EmptyGallery);
    }
    par::map_range(queries.len(), |i| {
        let truth = &ground_truth[i];
        if truth.is_empty() || truth.iter().any(|&j| j >= gallery.len()) {
            return Err(GroveError::ShapeMismatch(format!(
                "query {i}: ground truth {truth:?} invalid for a gallery of {}",
                gallery.len()
            )));
        }
        let d: Vec<f64> = gallery
            .iter()
            .map(|g| distance.eval(&queries[i], g))
            .collect::<Result<_>>()?;
        if let Some(j) = d.iter().position(|v| v.is_nan()) {
            return Err(GroveError::NonFiniteValue(format!("distance between query {i} and item {j}")));
        }
        let best = truth
            .iter()
            .map(|&t| (0..gallery.len()).filter(|&j| d[j] < d[t] || (d[j] == d[t] && j < t)).count() + 1)
            .min()
            .expect("truth is nonempty");
        Ok(best)
    })
    .into_iter()
    .collect()
}

/// Fraction of queries whose top-ranked gallery item is a ground-truth match.
pub fn recall_at_1(
    queries: &[DiagGaussian],
    gallery: &[DiagGaussian],
    ground_truth: &[Vec<usize>],
    distance: Distance,
) -> Result<f64> {
    let hits = retrieval_hits(queries, gallery, ground_truth, distance)?;
    if hits.is_empty() {
        return Err(GroveError::DegenerateInput("no queries".into()));
    }
    Ok(hits.iter().filter(|h| **h).count() as f64 / hits.len() as f64)
}

/// A statistic that falls back to 0 on degenerate (constant) input.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlaggedStat {
    pub value: f64,
    /// Set when the input made the statistic undefined and `value` is the 0 fallback.
    pub degenerate: bool,
}

impl FlaggedStat {
    fn ok(value: f64) -> Self {
        FlaggedStat {
            value,
            degenerate: false,
        }
    }

    fn fallback() -> Self {
        FlaggedStat {
            value: 0.0,
            degenerate: true,
        }
    }
}

fn paired(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(GroveError::ShapeMismatch(format!("vectors of length {} and {}", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(GroveError::DegenerateInput(format!("need at least 2 points, got {}", a.len())));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(GroveError::NonFiniteValue("statistic input".into()));
    }
    Ok(())
}

fn is_constant(v: &[f64]) -> bool {
    v.iter().all(|x| *x == v[0])
}

/// 1-based fractional ranks; tied values share the mean of their positions.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]).then(i.cmp(&j)));
    let mut ranks = vec![0.0; v.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && v[idx[end]] == v[idx[start]] {
            end += 1;
        }
        let r = (start + end + 1) as f64 / 2.0;
        for &k in &idx[start..end] {
            ranks[k] = r;
        }
        start = end;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<FlaggedStat> {
    paired(a, b)?;
    if is_constant(a) || is_constant(b) {
        return Ok(FlaggedStat::fallback());
    }
    Ok(FlaggedStat::ok(pearson(&average_ranks(a), &average_ranks(b))))
}

/// `R²` of the least-squares line of `y` on `x`. Constant `y` gives 0;
/// constant `x` gives a flagged 0.
pub fn r_squared(x: &[f64], y: &[f64]) -> Result<FlaggedStat> {
    paired(x, y)?;
    if is_constant(x) {
        return Ok(FlaggedStat::fallback());
    }
    if is_constant(y) {
        return Ok(FlaggedStat::ok(0.0));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let ss_tot: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    Ok(FlaggedStat::ok(1.0 - ss_res / ss_tot))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub mean_uncertainty: f64,
    pub recall_at_1: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    /// Ordered by increasing uncertainty.
    pub bins: Vec<CalibrationBin>,
    pub spearman: FlaggedStat,
    pub r_squared: FlaggedStat,
    /// `−S·R²`.
    pub neg_sr2: f64,
}

pub const DEFAULT_BINS: usize = 10;

impl CalibrationReport {
    /// CSV with header `bin,mean_uncertainty,recall_at_1,count`, one row per
    /// bin, and a final row `summary,<S>,<R²>,<−SR²>`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin,mean_uncertainty,recall_at_1,count\n");
        for (i, b) in self.bins.iter().enumerate() {
            s.push_str(&format!("{i},{},{},{}\n", b.mean_uncertainty, b.recall_at_1, b.count));
        }
        s.push_str(&format!(
            "summary,{},{},{}\n",
            self.spearman.value, self.r_squared.value, self.neg_sr2
        ));
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Splits queries into `n_bins` equal-count bins by uncertainty (sizes
/// differ by at most one; ties ordered by index) and correlates bin mean
/// uncertainty with bin Recall@1.
pub fn calibration_report(uncertainties: &[f64], hits: &[bool], n_bins: usize) -> Result<CalibrationReport> {
    if uncertainties.len() != hits.len() {
        return Err(GroveError::ShapeMismatch(format!(
            "{} uncertainties but {} hit flags",
            uncertainties.len(),
            hits.len()
        )));
    }
    if n_bins < 2 {
        return Err(GroveError::InvalidConfig(format!("n_bins must be at least 2, got {n_bins}")));
    }
    let n = uncertainties.len();
    if n < n_bins {
        return Err(GroveError::DegenerateInput(format!("{n} queries cannot fill {n_bins} bins")));
    }
    if uncertainties.iter().any(|u| !u.is_finite()) {
        return Err(GroveError::NonFiniteValue("uncertainty".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| uncertainties[i].total_cmp(&uncertainties[j]).then(i.cmp(&j)));
    let bins: Vec<CalibrationBin> = (0..n_bins)
        .map(|b| {
            let members = &order[b * n / n_bins..(b + 1) * n / n_bins];
            let count = members.len();
            CalibrationBin {
                mean_uncertainty: members.iter().map(|&i| uncertainties[i]).sum::<f64>() / count as f64,
                recall_at_1: members.iter().filter(|&&i| hits[i]).count() as f64 / count as f64,
                count,
            }
        })
        .collect();
    let u: Vec<f64> = bins.iter().map(|b| b.mean_uncertainty).collect();
    let r: Vec<f64> = bins.iter().map(|b| b.recall_at_1).collect();
    let spearman = spearman(&u, &r)?;
    let r_squared = r_squared(&u, &r)?;
    Ok(CalibrationReport {
        bins,
        spearman,
        r_squared,
        neg_sr2: -spearman.value * r_squared.value,
    })
}

/// `1 − softmax(u)`, with the maximum subtracted before exponentiating.
pub fn confidence_from_uncertainty(u: &[f64]) -> Vec<f64> {
    if u.is_empty() {
        return Vec::new();
    }
    let max = u.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = u.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| 1.0 - v / z).collect()
}

/// Expected calibration error over `n_bins` equal-width confidence bins on
/// `[0, 1]`; confidence 1 falls in the last bin.
pub fn ece(confidences: &[f64], accuracies: &[f64], n_bins: usize) -> Result<f64> {
    if confidences.len() != accuracies.len() {
        return Err(GroveError::ShapeMismatch(format!(
            "{} confidences but {} accuracies",
            confidences.len(),
            accuracies.len()
        )));
    }
    if confidences.is_empty() {
        return Err(GroveError::DegenerateInput("ece of an empty set".into()));
    }
    if n_bins == 0 {
        return Err(GroveError::InvalidConfig("n_bins must be at least 1".into()));
    }
    if let Some(v) = confidences.iter().chain(accuracies).find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(GroveError::DegenerateInput(format!("value {v} outside [0, 1]")));
    }
    let mut conf_sum = vec![0.0; n_bins];
    let mut acc_sum = vec![0.0; n_bins];
    let mut count = vec![0usize; n_bins];
    for (c, a) in confidences.iter().zip(accuracies) {
        let b = ((c * n_bins as f64) as usize).min(n_bins - 1);
        conf_sum[b] += c;
        acc_sum[b] += a;
        count[b] += 1;
    }
    let total = confidences.len() as f64;
    Ok((0..n_bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let k = count[b] as f64;
            (k / total) * (conf_sum[b] / k - acc_sum[b] / k).abs()
        })
        .sum())
}

/// Indices of the `k` largest uncertainties, largest first, ties by lower index.
pub fn select_uncertain(uncertainties: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > uncertainties.len() {
        return Err(GroveError::KTooLarge {
            k,
            n: uncertainties.len(),
        });
    }
    let mut idx: Vec<usize> = (0..uncertainties.len()).collect();
    idx.sort_by(|&i, &j| match uncertainties[j].total_cmp(&uncertainties[i]) {
        Ordering::Equal => i.cmp(&j),
        o => o,
    });
    idx.truncate(k);
    Ok(idx)
}
