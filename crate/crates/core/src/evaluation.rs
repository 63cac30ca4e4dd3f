//! Accuracy, macro-F1 and reports grouped by framework and language.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::relsdata::{Framework, LabelDistribution, RelationInstance, UnifiedLabel, NUM_LABELS};

/// Stated in every report because the averaging set changes the number.
pub const MACRO_F1_CONVENTION: &str =
    "unweighted mean of per-label F1 over labels occurring in golds or predictions; \
     labels absent from both are excluded; unparseable predictions count as wrong";

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{a} predictions for {b} golds")));
    }
    Ok(())
}

/// Exact-match fraction. `None` predictions (parse failures) are wrong.
pub fn accuracy(preds: &[Option<UnifiedLabel>], golds: &[UnifiedLabel]) -> Result<f64> {
    check_lengths(preds.len(), golds.len())?;
    if golds.is_empty() {
        return Err(Error::Input("accuracy of an empty set".into()));
    }
    let correct = preds.iter().zip(golds).filter(|(p, g)| **p == Some(**g)).count();
    Ok(correct as f64 / golds.len() as f64)
}

/// Per-label F1 for every label in golds or predictions.
pub fn per_label_f1(preds: &[Option<UnifiedLabel>], golds: &[UnifiedLabel]) -> Result<BTreeMap<UnifiedLabel, f64>> {
    check_lengths(preds.len(), golds.len())?;
    let mut tp = [0usize; NUM_LABELS];
    let mut fp = [0usize; NUM_LABELS];
    let mut fn_ = [0usize; NUM_LABELS];
    for (p, g) in preds.iter().zip(golds) {
        match p {
            Some(p) if p == g => tp[g.index()] += 1,
            Some(p) => {
                fp[p.index()] += 1;
                fn_[g.index()] += 1;
            }
            None => fn_[g.index()] += 1,
        }
    }
    let present: BTreeSet<UnifiedLabel> = golds.iter().copied().chain(preds.iter().flatten().copied()).collect();
    Ok(present
        .into_iter()
        .map(|l| {
            let i = l.index();
            let denom = 2 * tp[i] + fp[i] + fn_[i];
            (l, if denom == 0 { 0.0 } else { 2.0 * tp[i] as f64 / denom as f64 })
        })
        .collect())
}

pub fn macro_f1(preds: &[Option<UnifiedLabel>], golds: &[UnifiedLabel]) -> Result<f64> {
    let f1 = per_label_f1(preds, golds)?;
    if f1.is_empty() {
        return Err(Error::Input("macro-F1 of an empty set".into()));
    }
    Ok(f1.values().sum::<f64>() / f1.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStat {
    pub accuracy: f64,
    pub correct: usize,
    pub support: usize,
    pub share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupedReport {
    pub total: usize,
    pub correct: usize,
    pub overall_accuracy: f64,
    pub overall_macro_f1: f64,
    pub macro_f1_convention: String,
    pub parse_failures: usize,
    /// Sorted by share, largest first; ties by name.
    pub by_framework: Vec<(String, GroupStat)>,
    pub by_language: Vec<(String, GroupStat)>,
    pub per_label_f1: BTreeMap<UnifiedLabel, f64>,
}

fn group<'a>(
    keys: impl Iterator<Item = &'a str>,
    hits: &[bool],
) -> Vec<(String, GroupStat)> {
    let total = hits.len();
    let mut acc: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for (k, &hit) in keys.zip(hits) {
        let e = acc.entry(k).or_default();
        e.0 += usize::from(hit);
        e.1 += 1;
    }
    let mut rows: Vec<(String, GroupStat)> = acc
        .into_iter()
        .map(|(k, (correct, support))| {
            (
                k.to_string(),
                GroupStat {
                    accuracy: correct as f64 / support as f64,
                    correct,
                    support,
                    share: support as f64 / total as f64,
                },
            )
        })
        .collect();
    rows.sort_by(|a, b| b.1.support.cmp(&a.1.support).then_with(|| a.0.cmp(&b.0)));
    rows
}

/// Report over aligned predictions, golds and `(framework, language)` pairs.
pub fn grouped_report(
    preds: &[Option<UnifiedLabel>],
    golds: &[UnifiedLabel],
    meta: &[(String, String)],
) -> Result<GroupedReport> {
    check_lengths(preds.len(), golds.len())?;
    check_lengths(meta.len(), golds.len())?;
    for (fw, _) in meta {
        Framework::from_str(fw)?;
    }
    let hits: Vec<bool> = preds.iter().zip(golds).map(|(p, g)| *p == Some(*g)).collect();
    let correct = hits.iter().filter(|h| **h).count();
    Ok(GroupedReport {
        total: golds.len(),
        correct,
        overall_accuracy: accuracy(preds, golds)?,
        overall_macro_f1: macro_f1(preds, golds)?,
        macro_f1_convention: MACRO_F1_CONVENTION.into(),
        parse_failures: preds.iter().filter(|p| p.is_none()).count(),
        by_framework: group(meta.iter().map(|m| m.0.as_str()), &hits),
        by_language: group(meta.iter().map(|m| m.1.as_str()), &hits),
        per_label_f1: per_label_f1(preds, golds)?,
    })
}

/// Convenience wrapper taking golds and metadata from the instances.
pub fn report_for(instances: &[RelationInstance], preds: &[Option<UnifiedLabel>]) -> Result<GroupedReport> {
    let golds: Vec<UnifiedLabel> = instances.iter().map(|i| i.label).collect();
    let meta: Vec<(String, String)> = instances
        .iter()
        .map(|i| (i.framework.name().to_string(), i.language.clone()))
        .collect();
    grouped_report(preds, &golds, &meta)
}

impl GroupedReport {
    /// Support-weighted recomposition of overall accuracy from one grouping.
    pub fn recomposed_accuracy(groups: &[(String, GroupStat)], total: usize) -> f64 {
        groups.iter().map(|(_, g)| g.correct).sum::<usize>() as f64 / total as f64
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per group in the table layout: section, group, accuracy,
    /// support, share.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("section\tgroup\taccuracy\tsupport\tshare\n");
        let _ = writeln!(
            out,
            "overall\tall\t{:.4}\t{}\t1.0000",
            self.overall_accuracy, self.total
        );
        for (section, rows) in [("framework", &self.by_framework), ("language", &self.by_language)] {
            for (name, g) in rows {
                let _ = writeln!(out, "{section}\t{name}\t{:.4}\t{}\t{:.4}", g.accuracy, g.support, g.share);
            }
        }
        for (label, f1) in &self.per_label_f1 {
            let _ = writeln!(out, "label_f1\t{label}\t{f1:.4}\t\t");
        }
        out
    }

    /// The `n` labels with the lowest F1, ties by canonical order.
    pub fn lowest_f1_labels(&self, n: usize) -> Vec<UnifiedLabel> {
        let mut labels: Vec<(UnifiedLabel, f64)> = self.per_label_f1.iter().map(|(l, f)| (*l, *f)).collect();
        labels.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        labels.into_iter().take(n).map(|(l, _)| l).collect()
    }
}

/// Accuracy of always predicting the most frequent label of `dist`, scored
/// on that same distribution.
pub fn majority_baseline(dist: &LabelDistribution) -> Option<(UnifiedLabel, f64)> {
    let label = dist.majority()?;
    Some((label, dist.proportions[&label]))
}

/// Majority accuracy from a percentage table (shares renormalised).
pub fn majority_share(percent: &[f64; NUM_LABELS]) -> (UnifiedLabel, f64) {
    let sum: f64 = percent.iter().sum();
    let (i, p) = percent
        .iter()
        .enumerate()
        .fold((0, f64::MIN), |best, (i, &p)| if p > best.1 { (i, p) } else { best });
    (UnifiedLabel::ALL[i], p / sum)
}
