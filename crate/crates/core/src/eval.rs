//! Segmentation metrics restricted to the ROI.

use std::fmt;

use crate::error::{Error, Result};
use crate::imageio::Mask;
use crate::reference::ResponseMap;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// `tp / (tp + fn)`; 0 when there are no positives.
    pub fn sensitivity(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    /// `tn / (tn + fp)`; 0 when there are no negatives.
    pub fn specificity(&self) -> f64 {
        ratio(self.tn, self.tn + self.fp)
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.total())
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsReport {
    pub auc: f64,
    pub se: f64,
    pub sp: f64,
    pub acc: f64,
    pub threshold: f64,
    pub roi_count: usize,
}

impl MetricsReport {
    pub fn new(auc: f64, threshold: f64, counts: &ConfusionCounts) -> Self {
        Self {
            auc,
            se: counts.sensitivity(),
            sp: counts.specificity(),
            acc: counts.accuracy(),
            threshold,
            roi_count: counts.total(),
        }
    }

    /// Parses the `key value` form written by `Display`.
    pub fn parse(text: &str) -> Result<Self> {
        let get = |key: &str| -> Result<f64> {
            text.lines()
                .filter_map(|l| l.split_once(' '))
                .find(|(k, _)| *k == key)
                .and_then(|(_, v)| v.trim().parse().ok())
                .ok_or_else(|| Error::InvalidParams(format!("report lacks `{key}`")))
        };
        Ok(Self {
            auc: get("auc")?,
            se: get("se")?,
            sp: get("sp")?,
            acc: get("acc")?,
            threshold: get("threshold")?,
            roi_count: get("roi_count")? as usize,
        })
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "auc {}", self.auc)?;
        writeln!(f, "se {}", self.se)?;
        writeln!(f, "sp {}", self.sp)?;
        writeln!(f, "acc {}", self.acc)?;
        writeln!(f, "threshold {}", self.threshold)?;
        writeln!(f, "roi_count {}", self.roi_count)
    }
}

/// Vessel where the response is strictly above `threshold`; always false
/// outside the ROI.
pub fn binarize(resp: &ResponseMap, roi: &Mask, threshold: f64) -> Result<Mask> {
    roi.expect_dims("mask", resp.dims())?;
    let data = resp
        .data()
        .iter()
        .zip(roi.data())
        .map(|(&v, &m)| m && v > threshold)
        .collect();
    Mask::new(resp.width(), resp.height(), data)
}

pub fn confusion(pred: &Mask, truth: &Mask, roi: &Mask) -> Result<ConfusionCounts> {
    truth.expect_dims("ground truth", pred.dims())?;
    roi.expect_dims("mask", pred.dims())?;
    let mut c = ConfusionCounts::default();
    for ((&p, &t), &m) in pred.data().iter().zip(truth.data()).zip(roi.data()) {
        if !m {
            continue;
        }
        match (p, t) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// ROI samples sorted ascending by response, with their labels.
fn sorted_samples(resp: &ResponseMap, truth: &Mask, roi: &Mask) -> Result<Vec<(f64, bool)>> {
    truth.expect_dims("ground truth", resp.dims())?;
    roi.expect_dims("mask", resp.dims())?;
    let mut s: Vec<(f64, bool)> = resp
        .data()
        .iter()
        .zip(truth.data())
        .zip(roi.data())
        .filter(|(_, &m)| m)
        .map(|((&v, &t), _)| (v, t))
        .collect();
    if s.iter().any(|(v, _)| !v.is_finite()) {
        return Err(Error::InvalidParams("non-finite response in ROI".into()));
    }
    let pos = s.iter().filter(|(_, t)| *t).count();
    if pos == 0 || pos == s.len() {
        return Err(Error::SingleClassRoi);
    }
    s.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(s)
}

/// Area under the ROC curve as the Mann–Whitney statistic with midranks.
pub fn auc(resp: &ResponseMap, truth: &Mask, roi: &Mask) -> Result<f64> {
    let s = sorted_samples(resp, truth, roi)?;
    let n_pos = s.iter().filter(|(_, t)| *t).count() as f64;
    let n_neg = s.len() as f64 - n_pos;
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < s.len() {
        let mut j = i;
        while j < s.len() && s[j].0 == s[i].0 {
            j += 1;
        }
        // ranks i+1 ..= j share their average
        let midrank = (i + 1 + j) as f64 / 2.0;
        let pos_in_group = s[i..j].iter().filter(|(_, t)| *t).count();
        rank_sum += midrank * pos_in_group as f64;
        i = j;
    }
    Ok((rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg))
}

/// Threshold that maximizes accuracy over the ROI, ties going to the higher
/// specificity. Candidates are every distinct response value plus one below
/// the minimum (everything labelled vessel).
pub fn best_threshold(
    resp: &ResponseMap,
    truth: &Mask,
    roi: &Mask,
) -> Result<(f64, MetricsReport)> {
    let area = auc(resp, truth, roi)?;
    let s = sorted_samples(resp, truth, roi)?;
    let n_pos = s.iter().filter(|(_, t)| *t).count();
    let n_neg = s.len() - n_pos;

    // start with threshold below the minimum: all predicted positive
    let mut counts = ConfusionCounts {
        tp: n_pos,
        fp: n_neg,
        tn: 0,
        fn_: 0,
    };
    let below = s[0].0 - 1.0;
    let mut best = (below, counts);
    let mut i = 0;
    while i < s.len() {
        let v = s[i].0;
        while i < s.len() && s[i].0 == v {
            if s[i].1 {
                counts.tp -= 1;
                counts.fn_ += 1;
            } else {
                counts.fp -= 1;
                counts.tn += 1;
            }
            i += 1;
        }
        // threshold v: pixels with response > v are vessel
        let (b_acc, b_sp) = (best.1.tp + best.1.tn, best.1.specificity());
        let acc = counts.tp + counts.tn;
        if acc > b_acc || (acc == b_acc && counts.specificity() > b_sp) {
            best = (v, counts);
        }
    }
    Ok((best.0, MetricsReport::new(area, best.0, &best.1)))
}

/// Metrics at a caller-chosen threshold.
pub fn metrics_at(
    resp: &ResponseMap,
    truth: &Mask,
    roi: &Mask,
    threshold: f64,
) -> Result<MetricsReport> {
    let area = auc(resp, truth, roi)?;
    let pred = binarize(resp, roi, threshold)?;
    let c = confusion(&pred, truth, roi)?;
    Ok(MetricsReport::new(area, threshold, &c))
}
