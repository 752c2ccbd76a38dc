//! Detection and fairness metrics over binarized predictions.
//!
//! Subgroups are whatever ids appear in the records. Cells that have no
//! samples (a subgroup without negatives for the FPR gap, an empty
//! `(subgroup, label)` cell for equalized odds) are left out of the
//! corresponding sum or max/min instead of being counted as zero.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// One scored test sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PredictionRecord {
    /// Probability of the fake class.
    pub score: f64,
    pub y_hat: u8,
    pub y: u8,
    pub d: usize,
}

/// Records binarized at a common threshold.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    pub threshold: f64,
    pub records: Vec<PredictionRecord>,
}

impl Predictions {
    /// Builds records with `y_hat = 1` iff `score ≥ threshold`.
    pub fn from_scores(
        scores: &[f64],
        labels: &[u8],
        subgroups: &[usize],
        threshold: f64,
    ) -> Result<Self> {
        if scores.len() != labels.len() || scores.len() != subgroups.len() {
            return Err(Error::Metric(format!(
                "length mismatch: {} scores, {} labels, {} subgroups",
                scores.len(),
                labels.len(),
                subgroups.len()
            )));
        }
        let mut records = Vec::with_capacity(scores.len());
        for ((&score, &y), &d) in scores.iter().zip(labels).zip(subgroups) {
            if !(0.0..=1.0).contains(&score) {
                return Err(Error::Metric(format!("score {score} outside [0, 1]")));
            }
            if y > 1 {
                return Err(Error::Metric(format!("label {y} is not binary")));
            }
            records.push(PredictionRecord {
                score,
                y_hat: u8::from(score >= threshold),
                y,
                d,
            });
        }
        Ok(Self { threshold, records })
    }
}

/// Metric selector, used by the oracle and the report tables.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MetricId {
    Fpr,
    Meo,
    Dp,
    Oae,
    Auc,
}

impl MetricId {
    pub const ALL: [MetricId; 5] = [
        MetricId::Fpr,
        MetricId::Meo,
        MetricId::Dp,
        MetricId::Oae,
        MetricId::Auc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MetricId::Fpr => "f_fpr",
            MetricId::Meo => "f_meo",
            MetricId::Dp => "f_dp",
            MetricId::Oae => "f_oae",
            MetricId::Auc => "auc",
        }
    }
}

#[derive(Clone, Copy, Debug, Default)]
struct Counts {
    // [y][y_hat]
    cell: [[usize; 2]; 2],
}

impl Counts {
    fn add(&mut self, r: &PredictionRecord) {
        self.cell[r.y as usize][r.y_hat as usize] += 1;
    }

    fn total(&self) -> usize {
        self.cell.iter().flatten().sum()
    }

    fn label_total(&self, y: usize) -> usize {
        self.cell[y][0] + self.cell[y][1]
    }

    fn predicted(&self, k: usize) -> usize {
        self.cell[0][k] + self.cell[1][k]
    }

    fn correct(&self) -> usize {
        self.cell[0][0] + self.cell[1][1]
    }

    fn fpr(&self) -> Option<f64> {
        let n = self.label_total(0);
        (n > 0).then(|| self.cell[0][1] as f64 / n as f64)
    }

    fn accuracy(&self) -> f64 {
        self.correct() as f64 / self.total() as f64
    }
}

fn tally(records: &[PredictionRecord]) -> Result<(Counts, BTreeMap<usize, Counts>)> {
    if records.is_empty() {
        return Err(Error::Metric("empty record set".into()));
    }
    let mut all = Counts::default();
    let mut by = BTreeMap::new();
    for r in records {
        if r.y > 1 || r.y_hat > 1 {
            return Err(Error::Metric(
                "labels and predictions must be binary".into(),
            ));
        }
        all.add(r);
        by.entry(r.d).or_insert_with(Counts::default).add(r);
    }
    Ok((all, by))
}

fn spread(values: impl Iterator<Item = f64>) -> f64 {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    });
    if hi >= lo {
        hi - lo
    } else {
        0.0
    }
}

/// `Σ_j |FPR_j − FPR_overall|` over subgroups that contain negatives.
pub fn f_fpr(records: &[PredictionRecord]) -> Result<f64> {
    let (all, by) = tally(records)?;
    let overall = all
        .fpr()
        .ok_or_else(|| Error::Metric("no negative samples".into()))?;
    Ok(by
        .values()
        .filter_map(Counts::fpr)
        .map(|f| libm::fabs(f - overall))
        .sum())
}

/// `max_j ACC_j − min_j ACC_j`.
pub fn f_oae(records: &[PredictionRecord]) -> Result<f64> {
    let (_, by) = tally(records)?;
    Ok(spread(by.values().map(Counts::accuracy)))
}

/// `max_k (max_j P(Ŷ=k | D=j) − min_j P(Ŷ=k | D=j))`.
pub fn f_dp(records: &[PredictionRecord]) -> Result<f64> {
    let (_, by) = tally(records)?;
    Ok((0..2)
        .map(|k| {
            spread(
                by.values()
                    .map(|c| c.predicted(k) as f64 / c.total() as f64),
            )
        })
        .fold(0.0, f64::max))
}

/// `max_{k,k′} (max_j P(Ŷ=k′ | Y=k, D=j) − min_j P(Ŷ=k′ | Y=k, D=j))` over
/// nonempty `(j, k)` cells.
pub fn f_meo(records: &[PredictionRecord]) -> Result<f64> {
    let (_, by) = tally(records)?;
    let mut worst: f64 = 0.0;
    for k in 0..2 {
        for kp in 0..2 {
            let gap = spread(
                by.values()
                    .filter(|c| c.label_total(k) > 0)
                    .map(|c| c.cell[k][kp] as f64 / c.label_total(k) as f64),
            );
            worst = worst.max(gap);
        }
    }
    Ok(worst)
}

/// Mann–Whitney AUC with ties counted one half, via midranks.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Metric("scores and labels differ in length".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite { op: "auc" });
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Metric("AUC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based; the tie block i..=j shares the mean rank
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

pub fn record_auc(records: &[PredictionRecord]) -> Result<f64> {
    let (scores, labels): (Vec<f64>, Vec<u8>) = records.iter().map(|r| (r.score, r.y)).unzip();
    auc(&scores, &labels)
}

/// Literal enumeration of each metric's definition, independent of the fast
/// paths above.
pub fn metric_oracle(records: &[PredictionRecord], metric: MetricId) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Metric("empty record set".into()));
    }
    let mut groups: Vec<usize> = records.iter().map(|r| r.d).collect();
    groups.sort_unstable();
    groups.dedup();
    // P(pred | cond) restricted to subgroup `j` (or everything for None)
    let rate = |j: Option<usize>,
                cond: &dyn Fn(&PredictionRecord) -> bool,
                pred: &dyn Fn(&PredictionRecord) -> bool| {
        let mut num = 0usize;
        let mut den = 0usize;
        for r in records {
            if j.is_some_and(|j| r.d != j) || !cond(r) {
                continue;
            }
            den += 1;
            if pred(r) {
                num += 1;
            }
        }
        (den > 0).then(|| num as f64 / den as f64)
    };
    let gap = |vals: Vec<f64>| {
        let mut best: f64 = 0.0;
        for a in &vals {
            for b in &vals {
                best = best.max(a - b);
            }
        }
        best
    };
    match metric {
        MetricId::Fpr => {
            let neg = |r: &PredictionRecord| r.y == 0;
            let pos_pred = |r: &PredictionRecord| r.y_hat == 1;
            let overall = rate(None, &neg, &pos_pred)
                .ok_or_else(|| Error::Metric("no negative samples".into()))?;
            let mut total = 0.0;
            for &j in &groups {
                if let Some(f) = rate(Some(j), &neg, &pos_pred) {
                    total += libm::fabs(f - overall);
                }
            }
            Ok(total)
        }
        MetricId::Oae => {
            let vals = groups
                .iter()
                .filter_map(|&j| rate(Some(j), &|_| true, &|r| r.y == r.y_hat))
                .collect();
            Ok(gap(vals))
        }
        MetricId::Dp => {
            let mut best: f64 = 0.0;
            for k in 0..2u8 {
                let vals = groups
                    .iter()
                    .filter_map(|&j| rate(Some(j), &|_| true, &|r| r.y_hat == k))
                    .collect();
                best = best.max(gap(vals));
            }
            Ok(best)
        }
        MetricId::Meo => {
            let mut best: f64 = 0.0;
            for k in 0..2u8 {
                for kp in 0..2u8 {
                    let vals = groups
                        .iter()
                        .filter_map(|&j| rate(Some(j), &|r| r.y == k, &|r| r.y_hat == kp))
                        .collect();
                    best = best.max(gap(vals));
                }
            }
            Ok(best)
        }
        MetricId::Auc => {
            let mut wins = 0.0;
            let mut pairs = 0usize;
            for p in records.iter().filter(|r| r.y == 1) {
                for n in records.iter().filter(|r| r.y == 0) {
                    pairs += 1;
                    if p.score > n.score {
                        wins += 1.0;
                    } else if p.score == n.score {
                        wins += 0.5;
                    }
                }
            }
            if pairs == 0 {
                return Err(Error::Metric("AUC needs both classes".into()));
            }
            Ok(wins / pairs as f64)
        }
    }
}

/// Diagnostics for one subgroup.
#[derive(Clone, Debug, PartialEq)]
pub struct SubgroupRow {
    pub subgroup: usize,
    pub count: usize,
    /// Percent; `None` without negatives.
    pub fpr: Option<f64>,
    /// Percent.
    pub accuracy: f64,
    /// Percent; `None` unless both classes occur.
    pub auc: Option<f64>,
}

/// All metrics as percentages.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub threshold: f64,
    pub f_fpr: f64,
    pub f_meo: f64,
    pub f_dp: f64,
    pub f_oae: f64,
    pub auc: f64,
    pub subgroups: Vec<SubgroupRow>,
    /// Cells left out of a metric because they have no samples.
    pub notes: Vec<Note>,
}

/// A subgroup-level remark attached to a report.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Note {
    pub subgroup: usize,
    pub message: String,
}

impl MetricsReport {
    pub fn compute(predictions: &Predictions) -> Result<Self> {
        let records = &predictions.records;
        let (_, by) = tally(records)?;
        let mut subgroups = Vec::with_capacity(by.len());
        let mut notes = Vec::new();
        for (&j, c) in &by {
            let own: Vec<PredictionRecord> = records.iter().filter(|r| r.d == j).copied().collect();
            let fpr = c.fpr();
            if fpr.is_none() {
                notes.push(Note {
                    subgroup: j,
                    message: "has no negatives; excluded from f_fpr".into(),
                });
            }
            for k in 0..2 {
                if c.label_total(k) == 0 {
                    notes.push(Note {
                        subgroup: j,
                        message: format!("has no samples with y={k}; excluded from f_meo"),
                    });
                }
            }
            subgroups.push(SubgroupRow {
                subgroup: j,
                count: c.total(),
                fpr: fpr.map(|f| 100.0 * f),
                accuracy: 100.0 * c.accuracy(),
                auc: record_auc(&own).ok().map(|a| 100.0 * a),
            });
        }
        Ok(Self {
            threshold: predictions.threshold,
            f_fpr: 100.0 * f_fpr(records)?,
            f_meo: 100.0 * f_meo(records)?,
            f_dp: 100.0 * f_dp(records)?,
            f_oae: 100.0 * f_oae(records)?,
            auc: 100.0 * record_auc(records)?,
            subgroups,
            notes,
        })
    }

    pub fn get(&self, metric: MetricId) -> f64 {
        match metric {
            MetricId::Fpr => self.f_fpr,
            MetricId::Meo => self.f_meo,
            MetricId::Dp => self.f_dp,
            MetricId::Oae => self.f_oae,
            MetricId::Auc => self.auc,
        }
    }
}
