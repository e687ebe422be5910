//! Bag-level metrics and instance-level localization metrics.
//!
//! The threshold is chosen on the validation split and applied unchanged to
//! the test split. Localization is scored on ground-truth-positive test bags
//! against the held-out instance labels.

use crate::bagging::BagDataset;
use crate::error::{Error, Result};
use crate::model::{forward, forward_all, ForwardOutput, ModelParams};
use crate::training::{perturb_bag, select_key_instance};
use std::fmt::Write as _;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

pub const DEFAULT_K: usize = 3;
pub const DEFAULT_DELTA_SR: f64 = 0.1;
pub const METRICS_HEADER: &str = "dataset,seed,auc,precision,recall,f1,loc_at_k,sr,tau,k,delta_sr";

fn class_counts(labels: &[u8]) -> (usize, usize) {
    let pos = labels.iter().filter(|&&y| y == 1).count();
    (pos, labels.len() - pos)
}

/// Mann-Whitney AUC; tied scores count one half.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = class_counts(labels);
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass);
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Average ranks over tie groups.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += avg * idx[i..=j].iter().filter(|&&r| labels[r] == 1).count() as f64;
        i = j + 1;
    }
    let u = rank_sum_pos - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// Precision, recall and F1 when predicting positive for `score > tau`.
pub fn prf_at_threshold(scores: &[f64], labels: &[u8], tau: f64) -> (f64, f64, f64) {
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for (&s, &y) in scores.iter().zip(labels) {
        match (s > tau, y == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    (precision, recall, f1)
}

/// Candidate thresholds: midpoints of consecutive distinct scores plus the
/// smallest and largest score, ascending.
pub fn threshold_candidates(scores: &[f64]) -> Vec<f64> {
    let mut s: Vec<f64> = scores.to_vec();
    s.sort_by(f64::total_cmp);
    s.dedup();
    let mut out = Vec::with_capacity(s.len() + 1);
    if let Some(&first) = s.first() {
        out.push(first);
    }
    for w in s.windows(2) {
        out.push(w[0] + (w[1] - w[0]) / 2.0);
    }
    if s.len() > 1 {
        out.push(s[s.len() - 1]);
    }
    out
}

/// Threshold maximizing F1 among [`threshold_candidates`]; ties go to the
/// smallest threshold. Returns `(tau, f1)`.
pub fn select_threshold(scores: &[f64], labels: &[u8]) -> Result<(f64, f64)> {
    let (pos, neg) = class_counts(labels);
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass);
    }
    let mut best = (f64::NAN, -1.0);
    for tau in threshold_candidates(scores) {
        let f1 = prf_at_threshold(scores, labels, tau).2;
        if f1 > best.1 {
            best = (tau, f1);
        }
    }
    Ok(best)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalizationResult {
    /// Index of the bag within the evaluated split.
    pub bag: usize,
    pub head: usize,
    /// Top-k valid positions by attention in `head`, descending.
    pub s_top: Vec<usize>,
    /// Attention weights of `s_top`.
    pub weights: Vec<f64>,
    pub p_orig: f64,
    pub p_pert: f64,
}

impl LocalizationResult {
    pub fn drop(&self) -> f64 {
        self.p_orig - self.p_pert
    }
}

/// Head by the key-instance rule, then the top `k` valid positions of that
/// head ordered by descending attention with ascending-index tie break.
pub fn localize(attn: &[f64], k_heads: usize, mask: &[bool], k: usize) -> (usize, Vec<usize>) {
    localize_ranked(attn, attn, k_heads, mask, k)
}

/// [`localize`] with positions ranked by `rank_by` (`K x W`), any strictly
/// increasing transform of the attention such as the pre-softmax logits.
pub fn localize_ranked(attn: &[f64], rank_by: &[f64], k_heads: usize, mask: &[bool], k: usize) -> (usize, Vec<usize>) {
    let (head, _) = select_key_instance(attn, k_heads, mask);
    let w = mask.len();
    let row = &rank_by[head * w..(head + 1) * w];
    let mut idx: Vec<usize> = (0..w).filter(|&i| mask[i]).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.truncate(k);
    (head, idx)
}

/// Aggregate hit rate `sum |S_top ∩ S_a| / sum min(k, |S_a|)` over bags with
/// a non-empty `S_a`.
pub fn loc_at_k(results: &[(Vec<usize>, Vec<usize>)], k: usize) -> Result<f64> {
    let mut hits = 0usize;
    let mut denom = 0usize;
    for (s_top, s_a) in results {
        if s_a.is_empty() {
            continue;
        }
        hits += s_top.iter().take(k).filter(|i| s_a.contains(i)).count();
        denom += k.min(s_a.len());
    }
    if denom == 0 {
        return Err(Error::NoPositiveBags);
    }
    Ok(hits as f64 / denom as f64)
}

/// Fraction of bags with `p_orig - p_pert > delta_sr`.
pub fn success_rate(p_orig: &[f64], p_pert: &[f64], delta_sr: f64) -> Result<f64> {
    if p_orig.is_empty() {
        return Err(Error::NoPositiveBags);
    }
    let n = p_orig.iter().zip(p_pert).filter(|(&o, &p)| o - p > delta_sr).count();
    Ok(n as f64 / p_orig.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub dataset: String,
    pub seed: u64,
    pub auc: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub loc_at_k: f64,
    pub sr: f64,
    pub tau: f64,
    pub k: usize,
    pub delta_sr: f64,
}

impl MetricsReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{},{:.6}",
            self.dataset,
            self.seed,
            self.auc,
            self.precision,
            self.recall,
            self.f1,
            self.loc_at_k,
            self.sr,
            self.tau,
            self.k,
            self.delta_sr
        )
    }

    pub fn parse_csv_row(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 11 {
            return Err(Error::Format(format!("expected 11 metrics columns, got {}", f.len())));
        }
        let num = |i: usize| -> Result<f64> {
            f[i].parse().map_err(|_| Error::Format(format!("bad number `{}`", f[i])))
        };
        Ok(Self {
            dataset: f[0].to_string(),
            seed: f[1].parse().map_err(|_| Error::Format(format!("bad seed `{}`", f[1])))?,
            auc: num(2)?,
            precision: num(3)?,
            recall: num(4)?,
            f1: num(5)?,
            loc_at_k: num(6)?,
            sr: num(7)?,
            tau: num(8)?,
            k: f[9].parse().map_err(|_| Error::Format(format!("bad k `{}`", f[9])))?,
            delta_sr: num(10)?,
        })
    }
}

/// Append one row, writing the header first when the file is new or empty.
pub fn append_metrics_csv(path: &Path, report: &MetricsReport) -> Result<()> {
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(f, "{METRICS_HEADER}")?;
    }
    writeln!(f, "{}", report.csv_row())?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsReport>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == METRICS_HEADER => {}
        _ => return Err(Error::Format(format!("{} lacks the metrics header", path.display()))),
    }
    lines.filter(|l| !l.trim().is_empty()).map(MetricsReport::parse_csv_row).collect()
}

/// Mean and sample standard deviation (`n - 1` denominator; 0 for one value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Per-metric `mean (std)` table over several runs.
pub fn summarize(reports: &[MetricsReport]) -> String {
    let cols: [(&str, fn(&MetricsReport) -> f64); 6] = [
        ("auc", |r| r.auc),
        ("precision", |r| r.precision),
        ("recall", |r| r.recall),
        ("f1", |r| r.f1),
        ("loc_at_k", |r| r.loc_at_k),
        ("sr", |r| r.sr),
    ];
    let seeds: Vec<String> = reports.iter().map(|r| r.seed.to_string()).collect();
    let mut out = format!("runs={} seeds={}\n", reports.len(), seeds.join(","));
    for (name, get) in cols {
        let vals: Vec<f64> = reports.iter().map(get).collect();
        let (m, s) = mean_std(&vals);
        let _ = writeln!(out, "{name}\t{m:.4} ({s:.4})");
    }
    out
}

/// Localization of every ground-truth-positive bag of `ds`.
pub fn localize_dataset(
    params: &ModelParams<f32>,
    ds: &BagDataset,
    outputs: &[ForwardOutput],
    k: usize,
) -> Result<Vec<LocalizationResult>> {
    let kk = params.config.k_heads;
    let mut res = Vec::new();
    for (b, (bag, out)) in ds.bags.iter().zip(outputs).enumerate() {
        if bag.label != 1 {
            continue;
        }
        let (head, s_top) = localize_ranked(&out.attention, &out.attention_logits, kk, &bag.mask, k);
        let w = bag.width();
        let weights = s_top.iter().map(|&i| out.attention[head * w + i]).collect();
        let pert = perturb_bag(bag, s_top[0])?;
        let p_pert = forward(params, &[&pert])?[0].p;
        res.push(LocalizationResult {
            bag: b,
            head,
            s_top,
            weights,
            p_orig: out.p,
            p_pert,
        });
    }
    Ok(res)
}

/// Threshold from `val`, bag metrics and localization metrics on `test`.
pub fn evaluate(
    params: &ModelParams<f32>,
    val: &BagDataset,
    test: &BagDataset,
    k: usize,
    delta_sr: f64,
    dataset: &str,
    seed: u64,
) -> Result<(MetricsReport, Vec<LocalizationResult>)> {
    const BATCH: usize = 64;
    let val_scores: Vec<f64> = forward_all(params, &val.bags, BATCH)?.iter().map(|o| o.p).collect();
    let (tau, _) = select_threshold(&val_scores, &val.labels())?;
    let outs = forward_all(params, &test.bags, BATCH)?;
    let scores: Vec<f64> = outs.iter().map(|o| o.p).collect();
    let labels = test.labels();
    let auc = roc_auc(&scores, &labels)?;
    let (precision, recall, f1) = prf_at_threshold(&scores, &labels, tau);
    let loc = localize_dataset(params, test, &outs, k)?;
    let pairs: Vec<(Vec<usize>, Vec<usize>)> = loc
        .iter()
        .map(|r| (r.s_top.clone(), test.bags[r.bag].anomalous_positions()))
        .collect();
    let loc_k = loc_at_k(&pairs, k)?;
    let p_orig: Vec<f64> = loc.iter().map(|r| r.p_orig).collect();
    let p_pert: Vec<f64> = loc.iter().map(|r| r.p_pert).collect();
    let sr = success_rate(&p_orig, &p_pert, delta_sr)?;
    Ok((
        MetricsReport {
            dataset: dataset.to_string(),
            seed,
            auc,
            precision,
            recall,
            f1,
            loc_at_k: loc_k,
            sr,
            tau,
            k,
            delta_sr,
        },
        loc,
    ))
}
