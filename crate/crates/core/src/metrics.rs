//! Confusion matrices, macro precision/recall/specificity, weighted Cohen's
//! kappa and Spearman's rank correlation.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

/// Counts with rows = true class, columns = predicted class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub labels: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn from_counts(labels: Vec<String>, counts: Vec<Vec<u64>>) -> Result<Self> {
        let k = labels.len();
        if k == 0 || counts.len() != k || counts.iter().any(|r| r.len() != k) {
            return Err(Error::Invalid(format!("confusion matrix must be {k}x{k}")));
        }
        Ok(ConfusionMatrix { labels, counts })
    }

    pub fn k(&self) -> usize {
        self.labels.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k()).map(|i| self.counts[i][i]).sum()
    }

    /// Rows scaled to sum to 1; empty rows stay all zero.
    pub fn row_normalized(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|row| {
                let s: u64 = row.iter().sum();
                row.iter()
                    .map(|&c| if s == 0 { 0.0 } else { c as f64 / s as f64 })
                    .collect()
            })
            .collect()
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("true\\pred");
        for l in &self.labels {
            let _ = write!(out, "\t{l}");
        }
        out.push('\n');
        for (l, row) in self.labels.iter().zip(&self.counts) {
            out.push_str(l);
            for c in row {
                let _ = write!(out, "\t{c}");
            }
            out.push('\n');
        }
        out
    }
}

/// Tally `(truth, pred)` pairs of class indices `< k`.
pub fn confusion(truth: &[usize], pred: &[usize], labels: Vec<String>) -> Result<ConfusionMatrix> {
    if truth.len() != pred.len() {
        return Err(Error::Shape {
            context: "true vs predicted labels",
            expected: truth.len(),
            actual: pred.len(),
        });
    }
    if truth.is_empty() {
        return Err(Error::Invalid("confusion matrix of zero samples".into()));
    }
    let k = labels.len();
    let mut counts = vec![vec![0u64; k]; k];
    for (&t, &p) in truth.iter().zip(pred) {
        if t >= k || p >= k {
            return Err(Error::Invalid(format!("label pair ({t}, {p}) outside 0..{k}")));
        }
        counts[t][p] += 1;
    }
    Ok(ConfusionMatrix { labels, counts })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRates {
    pub class: String,
    pub precision: f64,
    pub recall: f64,
    pub specificity: f64,
    /// Rates whose denominator was zero (reported as 0).
    pub undefined: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroRates {
    pub per_class: Vec<ClassRates>,
    pub precision: f64,
    pub recall: f64,
    pub specificity: f64,
}

/// One-vs-rest rates for each class in `include`, computed over the full
/// matrix, and their unweighted means. Excluded classes still contribute to
/// the other classes' false positives and true negatives.
pub fn macro_prs(cm: &ConfusionMatrix, include: &[usize]) -> Result<MacroRates> {
    if include.is_empty() {
        return Err(Error::Invalid("macro average over no classes".into()));
    }
    let k = cm.k();
    let n = cm.total();
    let mut per_class = Vec::with_capacity(include.len());
    for &c in include {
        if c >= k {
            return Err(Error::Invalid(format!("class index {c} outside 0..{k}")));
        }
        let tp = cm.counts[c][c];
        let row: u64 = cm.counts[c].iter().sum();
        let col: u64 = (0..k).map(|i| cm.counts[i][c]).sum();
        let fn_ = row - tp;
        let fp = col - tp;
        let tn = n - tp - fn_ - fp;
        let mut undefined = Vec::new();
        let mut rate = |num: u64, den: u64, name: &str| {
            if den == 0 {
                undefined.push(name.to_string());
                0.0
            } else {
                num as f64 / den as f64
            }
        };
        let precision = rate(tp, tp + fp, "precision");
        let recall = rate(tp, tp + fn_, "recall");
        let specificity = rate(tn, tn + fp, "specificity");
        per_class.push(ClassRates {
            class: cm.labels[c].clone(),
            precision,
            recall,
            specificity,
            undefined,
        });
    }
    let mean = |f: fn(&ClassRates) -> f64| per_class.iter().map(f).sum::<f64>() / per_class.len() as f64;
    Ok(MacroRates {
        precision: mean(|r| r.precision),
        recall: mean(|r| r.recall),
        specificity: mean(|r| r.specificity),
        per_class,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KappaWeights {
    #[default]
    Quadratic,
    Linear,
}

impl fmt::Display for KappaWeights {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KappaWeights::Quadratic => "quadratic",
            KappaWeights::Linear => "linear",
        })
    }
}

impl FromStr for KappaWeights {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "quadratic" => Ok(KappaWeights::Quadratic),
            "linear" => Ok(KappaWeights::Linear),
            _ => Err(Error::Invalid(format!("unknown kappa weights {s:?}"))),
        }
    }
}

/// `κ_w = 1 − Σ w_ij o_ij / Σ w_ij e_ij` with disagreement weights
/// `((i−j)/(K−1))²` or `|i−j|/(K−1)`.
pub fn weighted_kappa(cm: &ConfusionMatrix, scheme: KappaWeights) -> Result<f64> {
    let k = cm.k();
    let n = cm.total();
    if n == 0 {
        return Err(Error::Undefined("kappa of an empty matrix".into()));
    }
    if k < 2 {
        return Err(Error::Undefined("kappa needs at least two classes".into()));
    }
    let n = n as f64;
    let rows: Vec<f64> = cm.counts.iter().map(|r| r.iter().sum::<u64>() as f64 / n).collect();
    let cols: Vec<f64> = (0..k)
        .map(|j| (0..k).map(|i| cm.counts[i][j]).sum::<u64>() as f64 / n)
        .collect();
    let scale = (k - 1) as f64;
    let (mut observed, mut expected) = (0.0, 0.0);
    for i in 0..k {
        for j in 0..k {
            let d = (i as f64 - j as f64).abs() / scale;
            let w = match scheme {
                KappaWeights::Quadratic => d * d,
                KappaWeights::Linear => d,
            };
            observed += w * cm.counts[i][j] as f64 / n;
            expected += w * rows[i] * cols[j];
        }
    }
    if expected == 0.0 {
        return Err(Error::Undefined(
            "kappa: zero expected disagreement (both raters constant on one class)".into(),
        ));
    }
    Ok(1.0 - observed / expected)
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman's ρ (Pearson correlation of average ranks) and its two-sided
/// p-value from `t = ρ √((n−2)/(1−ρ²))` on `n − 2` degrees of freedom.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    if x.len() != y.len() {
        return Err(Error::Shape {
            context: "spearman inputs",
            expected: x.len(),
            actual: y.len(),
        });
    }
    if x.len() < 3 {
        return Err(Error::Invalid("spearman needs at least 3 pairs".into()));
    }
    let rho = pearson(&average_ranks(x), &average_ranks(y))
        .ok_or_else(|| Error::Undefined("spearman: one sequence is constant".into()))?;
    let df = (x.len() - 2) as f64;
    let p = if rho.abs() >= 1.0 {
        0.0
    } else {
        let t = rho * (df / (1.0 - rho * rho)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).expect("df > 0");
        (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0)
    };
    Ok((rho, p))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub n: usize,
    pub accuracy: f64,
    pub rates: MacroRates,
    pub kappa: Option<f64>,
    pub kappa_weights: KappaWeights,
    pub spearman_rho: Option<f64>,
    pub spearman_p: Option<f64>,
    /// Why a statistic is missing, if any is.
    pub notes: Vec<String>,
    pub confusion: ConfusionMatrix,
}

impl MetricReport {
    pub fn to_tsv(&self) -> String {
        let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_else(|| "NA".into());
        let mut out = String::from("metric\tvalue\n");
        let _ = writeln!(out, "n\t{}", self.n);
        let _ = writeln!(out, "accuracy\t{}", self.accuracy);
        let _ = writeln!(out, "macro_precision\t{}", self.rates.precision);
        let _ = writeln!(out, "macro_recall\t{}", self.rates.recall);
        let _ = writeln!(out, "macro_specificity\t{}", self.rates.specificity);
        let _ = writeln!(out, "kappa_{}\t{}", self.kappa_weights, fmt(self.kappa));
        let _ = writeln!(out, "spearman_rho\t{}", fmt(self.spearman_rho));
        let _ = writeln!(out, "spearman_p\t{}", fmt(self.spearman_p));
        for r in &self.rates.per_class {
            let _ = writeln!(out, "precision_{}\t{}", r.class, r.precision);
            let _ = writeln!(out, "recall_{}\t{}", r.class, r.recall);
            let _ = writeln!(out, "specificity_{}\t{}", r.class, r.specificity);
        }
        out
    }
}

/// Full report for ordinal labels `0..labels.len()`. Undefined statistics are
/// recorded as `None` with a note rather than failing the report.
pub fn evaluate(truth: &[usize], pred: &[usize], labels: Vec<String>, weights: KappaWeights) -> Result<MetricReport> {
    let cm = confusion(truth, pred, labels)?;
    let include: Vec<usize> = (0..cm.k()).collect();
    let rates = macro_prs(&cm, &include)?;
    let mut notes = Vec::new();
    let kappa = weighted_kappa(&cm, weights).map_err(|e| notes.push(e.to_string())).ok();
    let xs: Vec<f64> = truth.iter().map(|&v| v as f64).collect();
    let ys: Vec<f64> = pred.iter().map(|&v| v as f64).collect();
    let (rho, p) = match spearman(&xs, &ys) {
        Ok((r, p)) => (Some(r), Some(p)),
        Err(e) => {
            notes.push(e.to_string());
            (None, None)
        }
    };
    for r in &rates.per_class {
        if !r.undefined.is_empty() {
            notes.push(format!(
                "class {}: zero denominator for {}",
                r.class,
                r.undefined.join(", ")
            ));
        }
    }
    Ok(MetricReport {
        n: truth.len(),
        accuracy: cm.trace() as f64 / cm.total() as f64,
        rates,
        kappa,
        kappa_weights: weights,
        spearman_rho: rho,
        spearman_p: p,
        notes,
        confusion: cm,
    })
}

pub fn grade_labels() -> Vec<String> {
    (0..5).map(|g| g.to_string()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(k: usize) -> Vec<String> {
        (0..k).map(|i| i.to_string()).collect()
    }

    #[test]
    fn confusion_examples() {
        let cm = confusion(&[0, 1, 2], &[0, 1, 2], labels(3)).unwrap();
        assert_eq!(cm.counts, vec![vec![1, 0, 0], vec![0, 1, 0], vec![0, 0, 1]]);
        let cm = confusion(&[2], &[3], labels(5)).unwrap();
        assert_eq!(cm.counts[2][3], 1);
        assert_eq!(cm.total(), 1);
        assert!(confusion(&[1, 2], &[1], labels(3)).is_err());
        let norm = cm.row_normalized();
        assert_eq!(norm[2][3], 1.0);
        assert_eq!(norm[0], vec![0.0; 5]);
    }

    #[test]
    fn two_class_rates_by_hand() {
        let cm = ConfusionMatrix::from_counts(labels(2), vec![vec![8, 2], vec![3, 7]]).unwrap();
        let r = macro_prs(&cm, &[0, 1]).unwrap();
        assert!((r.precision - (8.0 / 11.0 + 7.0 / 9.0) / 2.0).abs() < 1e-15);
        assert!((r.recall - 0.75).abs() < 1e-15);
        assert!((r.specificity - 0.75).abs() < 1e-15);
        let perfect = ConfusionMatrix::from_counts(labels(2), vec![vec![4, 0], vec![0, 6]]).unwrap();
        let r = macro_prs(&perfect, &[0, 1]).unwrap();
        assert_eq!((r.precision, r.recall, r.specificity), (1.0, 1.0, 1.0));
    }

    #[test]
    fn zero_denominators_are_flagged() {
        let cm = ConfusionMatrix::from_counts(labels(3), vec![vec![0, 0, 0], vec![0, 0, 0], vec![0, 0, 9]]).unwrap();
        let r = macro_prs(&cm, &[0, 1]).unwrap();
        for c in &r.per_class {
            assert_eq!(c.undefined, vec!["precision", "recall"]);
            assert_eq!(c.specificity, 1.0);
        }
        assert_eq!(r.precision, 0.0);
        assert!(macro_prs(&cm, &[]).is_err());
    }

    #[test]
    fn kappa_examples() {
        let diag = ConfusionMatrix::from_counts(labels(3), vec![vec![5, 0, 0], vec![0, 2, 0], vec![0, 0, 7]]).unwrap();
        assert_eq!(weighted_kappa(&diag, KappaWeights::Quadratic).unwrap(), 1.0);
        assert_eq!(weighted_kappa(&diag, KappaWeights::Linear).unwrap(), 1.0);
        let constant = ConfusionMatrix::from_counts(labels(2), vec![vec![0, 0], vec![0, 4]]).unwrap();
        assert!(matches!(
            weighted_kappa(&constant, KappaWeights::Quadratic),
            Err(Error::Undefined(_))
        ));
    }

    #[test]
    fn spearman_examples() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let (r, p) = spearman(&x, &x).unwrap();
        assert_eq!((r, p), (1.0, 0.0));
        let rev: Vec<f64> = x.iter().rev().copied().collect();
        assert_eq!(spearman(&x, &rev).unwrap().0, -1.0);
        let (r, p) = spearman(&x, &[2.0, 1.0, 4.0, 3.0, 5.0]).unwrap();
        assert!((r - 0.8).abs() < 1e-15);
        assert!(p > 0.0 && p < 1.0);
        assert!(matches!(spearman(&x, &[2.0; 5]), Err(Error::Undefined(_))));
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn p_value_matches_reference() {
        // Reference from scipy.stats.spearmanr: rho = 0.6853146853146854,
        // p = 0.013905968814362752 (Σd² = 90, n = 12).
        let x: Vec<f64> = (0..12).map(|i| i as f64).collect();
        let y = [3.0, 0.0, 1.0, 9.0, 2.0, 5.0, 4.0, 11.0, 7.0, 6.0, 10.0, 8.0];
        let (rho, p) = spearman(&x, &y).unwrap();
        assert!((rho - (1.0 - 6.0 * 90.0 / (12.0 * 143.0))).abs() < 1e-14);
        assert!((p - 0.013905968814362752).abs() < 1e-10, "{p}");
    }

    #[test]
    fn report_records_undefined_stats() {
        let rep = evaluate(&[2, 2, 2], &[2, 2, 2], grade_labels(), KappaWeights::Quadratic).unwrap();
        assert_eq!(rep.accuracy, 1.0);
        assert!(rep.kappa.is_none() && rep.spearman_rho.is_none());
        assert!(!rep.notes.is_empty());
    }
}
