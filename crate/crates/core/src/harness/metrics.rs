//! Openness, macro-averaged F1 and AUROC.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `1 - sqrt(2 C_T / (C_E + C_R))` for `C_T` training classes, `C_E`
/// evaluation classes and `C_R` classes to be recognized.
pub fn openness(trained: usize, evaluated: usize, recognized: usize) -> Result<f64> {
    let denom = evaluated + recognized;
    if trained == 0 || denom == 0 || 2 * trained > denom {
        return Err(Error::invalid(format!(
            "openness undefined for C_T={trained}, C_E={evaluated}, C_R={recognized}"
        )));
    }
    Ok(1.0 - (2.0 * trained as f64 / denom as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub label: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Rows whose true label is this class.
    pub support: usize,
    /// Neither predicted nor present in the truth; scored as F1 = 0.
    pub absent: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F1Summary {
    pub per_class: Vec<ClassScores>,
    /// Unweighted mean over all classes, absent ones counting as zero.
    pub macro_f1: f64,
    /// `confusion[truth][pred]`.
    pub confusion: Vec<Vec<usize>>,
}

impl F1Summary {
    /// Mean F1 over classes that are not flagged absent.
    pub fn macro_f1_present(&self) -> f64 {
        let present: Vec<f64> = self.per_class.iter().filter(|c| !c.absent).map(|c| c.f1).collect();
        if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        }
    }
}

/// Macro F1 over `num_labels` classes (known classes plus unknown).
pub fn macro_f1(preds: &[usize], truth: &[usize], num_labels: usize) -> Result<F1Summary> {
    if preds.len() != truth.len() {
        return Err(Error::dim(format!(
            "{} predictions for {} labels",
            preds.len(),
            truth.len()
        )));
    }
    if num_labels == 0 {
        return Err(Error::invalid("at least one label is required"));
    }
    if let Some(&bad) = preds.iter().chain(truth).find(|&&l| l >= num_labels) {
        return Err(Error::invalid(format!("label {bad} outside 0..{num_labels}")));
    }
    let mut confusion = vec![vec![0usize; num_labels]; num_labels];
    for (&p, &t) in preds.iter().zip(truth) {
        confusion[t][p] += 1;
    }
    let per_class: Vec<ClassScores> = (0..num_labels)
        .map(|c| {
            let tp = confusion[c][c] as f64;
            let support: usize = confusion[c].iter().sum();
            let predicted: usize = confusion.iter().map(|row| row[c]).sum();
            let precision = if predicted > 0 { tp / predicted as f64 } else { 0.0 };
            let recall = if support > 0 { tp / support as f64 } else { 0.0 };
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            ClassScores {
                label: c,
                precision,
                recall,
                f1,
                support,
                absent: support == 0 && predicted == 0,
            }
        })
        .collect();
    let macro_f1 = per_class.iter().map(|c| c.f1).sum::<f64>() / num_labels as f64;
    Ok(F1Summary {
        per_class,
        macro_f1,
        confusion,
    })
}

/// Area under the ROC curve with knowns as positives, computed as the
/// Mann-Whitney statistic with mid-ranks for ties.
pub fn auroc(scores: &[f64], is_known: &[bool]) -> Result<f64> {
    if scores.len() != is_known.len() {
        return Err(Error::dim("one flag per score is required"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("AUROC scores contain NaN"));
    }
    let n_pos = is_known.iter().filter(|&&k| k).count();
    let n_neg = scores.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::invalid("AUROC needs both known and unknown samples"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum of the positives keeps mid-ranks integral.
    let mut twice_rank_sum: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1 ..= j+1 share the mid-rank (i + j + 2) / 2.
        let twice_mid = (i + j + 2) as u64;
        let pos_in_group = order[i..=j].iter().filter(|&&k| is_known[k]).count() as u64;
        twice_rank_sum += twice_mid * pos_in_group;
        i = j + 1;
    }
    let n_pos = n_pos as u64;
    // 2U = 2R - n_pos (n_pos + 1)
    let twice_u = twice_rank_sum - n_pos * (n_pos + 1);
    Ok(twice_u as f64 / (2 * n_pos * n_neg as u64) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn openness_values() {
        assert_eq!(openness(6, 6, 6).unwrap(), 0.0);
        assert!((openness(10, 57, 10).unwrap() - 0.4536).abs() < 5e-4);
        assert!((openness(10, 12, 10).unwrap() - 0.0465).abs() < 5e-4);
        assert!(openness(0, 3, 3).is_err());
        assert!(openness(5, 2, 2).is_err());
    }

    #[test]
    fn perfect_f1() {
        let y = [0, 1, 2, 2, 1, 0];
        assert_eq!(macro_f1(&y, &y, 3).unwrap().macro_f1, 1.0);
    }

    #[test]
    fn hand_confusion_f1() {
        // class 0: TP 8 FP 2 FN 2; class 1: TP 9 FP 1 FN 1; U: TP 9 FP 2 FN 2
        let mut p = Vec::new();
        let mut t = Vec::new();
        let mut add = |truth: usize, pred: usize, n: usize| {
            for _ in 0..n {
                t.push(truth);
                p.push(pred);
            }
        };
        add(0, 0, 8);
        add(1, 1, 9);
        add(2, 2, 9);
        add(0, 2, 2);
        add(1, 0, 1);
        add(2, 0, 1);
        add(2, 1, 1);
        let s = macro_f1(&p, &t, 3).unwrap();
        let f: Vec<f64> = s.per_class.iter().map(|c| c.f1).collect();
        assert!((f[0] - 0.8).abs() < 1e-12);
        assert!((f[1] - 0.9).abs() < 1e-12);
        assert!((f[2] - 9.0 / 11.0).abs() < 1e-12);
        assert!((s.macro_f1 - 0.8394).abs() < 1e-4);
        let sums: Vec<usize> = s.confusion.iter().map(|r| r.iter().sum()).collect();
        assert_eq!(sums, vec![10, 10, 11]);
    }

    #[test]
    fn all_unknown_predictions_score_zero() {
        let s = macro_f1(&[2, 2, 2], &[0, 1, 0], 3).unwrap();
        assert_eq!(s.macro_f1, 0.0);
        assert!(!s.per_class[2].absent);
    }

    #[test]
    fn absent_class_flagged() {
        let s = macro_f1(&[0, 1], &[0, 1], 3).unwrap();
        assert!(s.per_class[2].absent);
        assert!((s.macro_f1 - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(s.macro_f1_present(), 1.0);
        assert!(macro_f1(&[3], &[0], 3).is_err());
    }

    #[test]
    fn auroc_examples() {
        let k = [true, true, false, false];
        assert_eq!(auroc(&[0.9, 0.8, 0.4, 0.2], &k).unwrap(), 1.0);
        assert_eq!(auroc(&[0.6, 0.3, 0.5, 0.1], &k).unwrap(), 0.75);
        assert_eq!(auroc(&[0.5; 4], &k).unwrap(), 0.5);
        assert!(auroc(&[0.1, 0.2], &[true, true]).is_err());
    }
}
