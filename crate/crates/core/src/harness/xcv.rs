//! Cross-class validation of the temperature and the explorer weight.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::Serialize;

use super::config::{ExperimentConfig, Method};
use super::pipeline::{calibrate, evaluate_scored, score_test, train_system, PreparedData};
use crate::datagen::{split_known_unknown, stratified_split, LabeledDataset};
use crate::distill::DistillConfig;
use crate::error::{Error, Result};
use crate::{derive_seed, rng_from_seed};

const STREAM_HOLDOUT: u64 = 40;
const STREAM_VALIDATION: u64 = 41;
/// Share of every class kept for validation inside a fold.
pub const VALIDATION_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridScore {
    pub tau: f64,
    pub lambda: f64,
    pub fold_f1: Vec<f64>,
    pub mean_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct XcvOutcome {
    pub best: (f64, f64),
    pub scores: Vec<GridScore>,
    /// Original class ids held out as unknown in each fold.
    pub holdouts: Vec<Vec<usize>>,
}

impl XcvOutcome {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("tau,lambda,mean_f1");
        for f in 0..self.holdouts.len() {
            let _ = write!(s, ",fold{f}");
        }
        s.push('\n');
        for g in &self.scores {
            let _ = write!(s, "{},{},{}", g.tau, g.lambda, g.mean_f1);
            for v in &g.fold_f1 {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }
}

/// Classes held out per fold: a quarter of the known classes, at least one.
pub fn holdout_size(classes: usize) -> usize {
    (classes / 4).max(1)
}

/// For every fold a seeded random subset of `data`'s classes becomes
/// pseudo-unknown; every `(tau, lambda)` in `grid` trains a T/E/S system on
/// the remaining classes and is scored by macro F1 on held-back rows. The
/// grid point with the best mean wins, ties going to the earlier one.
pub fn cross_class_validate(
    data: &LabeledDataset,
    grid: &[(f64, f64)],
    folds: usize,
    cfg: &ExperimentConfig,
) -> Result<XcvOutcome> {
    let classes = data.class_count;
    if classes < 3 {
        return Err(Error::invalid(format!(
            "cross-class validation needs at least 3 known classes, got {classes}"
        )));
    }
    if grid.is_empty() || folds == 0 {
        return Err(Error::invalid("grid and fold count must be non-empty"));
    }
    let h = holdout_size(classes);
    let mut scores: Vec<GridScore> = grid
        .iter()
        .map(|&(tau, lambda)| GridScore {
            tau,
            lambda,
            fold_f1: Vec::with_capacity(folds),
            mean_f1: 0.0,
        })
        .collect();
    let mut holdouts = Vec::with_capacity(folds);
    for f in 0..folds as u64 {
        let mut order: Vec<usize> = (0..classes).collect();
        order.shuffle(&mut rng_from_seed(derive_seed(cfg.seed, STREAM_HOLDOUT + 2 * f)));
        let mut held = order[..h].to_vec();
        held.sort_unstable();
        let mut known = order[h..].to_vec();
        known.sort_unstable();
        let split = split_known_unknown(data, &known)?;
        let vseed = derive_seed(cfg.seed, STREAM_VALIDATION + 2 * f);
        let (train, test_known) = stratified_split(&split.known, VALIDATION_FRACTION, vseed)?;
        let test_unknown = stratified_split(&split.unknown, VALIDATION_FRACTION, vseed)?.1;
        let fold = PreparedData {
            train,
            test_known,
            test_unknown,
            unknown_classes: held.clone(),
        };
        for g in scores.iter_mut() {
            let gcfg = ExperimentConfig {
                method: Method::Tes,
                lambda: g.lambda,
                distill: DistillConfig {
                    tau: g.tau,
                    ..cfg.distill
                },
                ..cfg.clone()
            };
            let system = train_system(&gcfg, &fold.train)?;
            let (t, _) = calibrate(&gcfg, &system.joint.student, &fold.train)?;
            let scored = score_test(&system.joint.student, &fold, gcfg.auroc_score)?;
            g.fold_f1.push(evaluate_scored(&scored, &t)?.macro_f1);
        }
        holdouts.push(held);
    }
    for g in scores.iter_mut() {
        g.mean_f1 = g.fold_f1.iter().sum::<f64>() / folds as f64;
    }
    let mut best = 0;
    for (i, g) in scores.iter().enumerate() {
        if g.mean_f1 > scores[best].mean_f1 {
            best = i;
        }
    }
    Ok(XcvOutcome {
        best: (scores[best].tau, scores[best].lambda),
        scores,
        holdouts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    #[test]
    fn holdout_sizes() {
        assert_eq!(holdout_size(3), 1);
        assert_eq!(holdout_size(4), 1);
        assert_eq!(holdout_size(8), 2);
        assert_eq!(holdout_size(10), 2);
    }

    #[test]
    fn too_few_classes() {
        let d = LabeledDataset::new(Tensor::zeros(vec![4, 2]), vec![0, 1, 0, 1], 2).unwrap();
        assert!(cross_class_validate(&d, &[(2.0, 1.0)], 1, &ExperimentConfig::default()).is_err());
    }
}
