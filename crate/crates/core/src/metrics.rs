//! ROC AUC (Mann-Whitney form, ties count one half) and thresholded accuracy.

use std::fmt::Write as _;

use crate::error::{arg_err, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredSet {
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(arg_err!(
                "{} scores but {} labels",
                scores.len(),
                labels.len()
            ));
        }
        if labels.iter().any(|&y| y > 1) {
            return Err(arg_err!("labels must be 0 or 1"));
        }
        if scores.iter().any(|s| s.is_nan()) {
            return Err(arg_err!("scores contain NaN"));
        }
        Ok(Self { scores, labels })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Fraction of (positive, negative) pairs ranked correctly, ties counted 0.5.
/// Sort-based, `O(n log n)`.
pub fn auc(s: &ScoredSet) -> Result<f64> {
    let pos = s.labels.iter().filter(|&&y| y == 1).count();
    let neg = s.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(arg_err!(
            "AUC needs both classes ({pos} positive, {neg} negative)"
        ));
    }
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s.scores[a].total_cmp(&s.scores[b]));

    // Walk tie groups in ascending score; each positive beats every negative
    // seen before its group and ties half of the negatives inside it.
    let mut wins = 0.0;
    let mut neg_below = 0usize;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut gp, mut gn) = (0usize, 0usize);
        while j < order.len() && s.scores[order[j]] == s.scores[order[i]] {
            if s.labels[order[j]] == 1 {
                gp += 1;
            } else {
                gn += 1;
            }
            j += 1;
        }
        wins += gp as f64 * (neg_below as f64 + 0.5 * gn as f64);
        neg_below += gn;
        i = j;
    }
    Ok(wins / (pos as f64 * neg as f64))
}

/// Fraction of examples where `score >= threshold` agrees with the label.
pub fn accuracy(s: &ScoredSet, threshold: f64) -> f64 {
    if s.is_empty() {
        return 0.0;
    }
    let hits = s
        .scores
        .iter()
        .zip(&s.labels)
        .filter(|(&sc, &y)| (sc >= threshold) == (y == 1))
        .count();
    hits as f64 / s.len() as f64
}

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Fourteen thoracic findings, in the usual reporting order.
pub const CHEST_XRAY_LABELS: [&str; 14] = [
    "Atelectasis",
    "Cardiomegaly",
    "Consolidation",
    "Edema",
    "Effusion",
    "Emphysema",
    "Fibrosis",
    "Hernia",
    "Infiltration",
    "Mass",
    "Nodule",
    "Pleural_Thickening",
    "Pneumonia",
    "Pneumothorax",
];

/// Default label names: the fourteen findings when there are fourteen labels.
pub fn label_names(count: usize) -> Vec<String> {
    if count == CHEST_XRAY_LABELS.len() {
        CHEST_XRAY_LABELS.iter().map(|s| s.to_string()).collect()
    } else if count == 1 {
        vec!["malignant".to_string()]
    } else {
        (0..count).map(|c| format!("label_{c}")).collect()
    }
}

/// Per-label AUC rows plus their average. Labels where AUC is undefined
/// (a single class present) are `None` and skipped in the average.
#[derive(Clone, Debug, PartialEq)]
pub struct AucReport {
    pub rows: Vec<(String, Option<f64>)>,
}

impl AucReport {
    pub fn from_sets(names: &[String], sets: &[ScoredSet]) -> Self {
        Self {
            rows: names
                .iter()
                .zip(sets)
                .map(|(n, s)| (n.clone(), auc(s).ok()))
                .collect(),
        }
    }

    pub fn average(&self) -> Option<f64> {
        let vals: Vec<f64> = self.rows.iter().filter_map(|r| r.1).collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("label,auc\n");
        for (name, v) in self
            .rows
            .iter()
            .map(|(n, v)| (n.as_str(), *v))
            .chain(std::iter::once(("Average", self.average())))
        {
            match v {
                Some(v) => writeln!(s, "{name},{v:.6}").unwrap(),
                None => writeln!(s, "{name},").unwrap(),
            }
        }
        s
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| Label | AUC (%) |\n|---|---|\n");
        for (name, v) in self
            .rows
            .iter()
            .map(|(n, v)| (n.as_str(), *v))
            .chain(std::iter::once(("Average", self.average())))
        {
            match v {
                Some(v) => writeln!(s, "| {name} | {:.2} |", 100.0 * v).unwrap(),
                None => writeln!(s, "| {name} | n/a |").unwrap(),
            }
        }
        s
    }
}
