//! Openness sweeps and the method ablation.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::Serialize;

use super::config::{ExperimentConfig, Method};
use super::pipeline::{calibrate, evaluate_scored, prepare_data, score_test, train_system, with_rule, OutDir, ScoredTest};
use super::svg::{self, Series};
use crate::error::{Error, Result, StageContext};
use crate::recognition::Thresholds;
use crate::{derive_seed, rng_from_seed};

const STREAM_POOL: u64 = 21;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub unknown_classes: usize,
    pub openness: f64,
    pub macro_f1_cd: f64,
    pub macro_f1_cdu: f64,
    pub auroc: Option<f64>,
}

/// Seeded order in which unknown classes join the evaluation; the first
/// `c` entries form the unknown set of a row with count `c`.
pub fn unknown_order(pool: &[usize], seed: u64) -> Vec<usize> {
    let mut order = pool.to_vec();
    order.shuffle(&mut rng_from_seed(derive_seed(seed, STREAM_POOL)));
    order
}

fn check_counts(counts: &[usize], pool: usize) -> Result<()> {
    if counts.is_empty() {
        return Err(Error::invalid("no unknown class counts given"));
    }
    if let Some(&c) = counts.iter().find(|&&c| c > pool) {
        return Err(Error::invalid(format!("{c} unknown classes requested, only {pool} available")));
    }
    Ok(())
}

/// Every count from 1 to the pool size, or just 0 for an empty pool.
pub fn default_counts(pool: usize) -> Vec<usize> {
    if pool == 0 {
        vec![0]
    } else {
        (1..=pool).collect()
    }
}

/// Evaluates one set of scores against growing unknown sets.
pub fn sweep_scored(scored: &ScoredTest, thresholds: &Thresholds, order: &[usize], counts: &[usize]) -> Result<Vec<SweepRow>> {
    check_counts(counts, order.len())?;
    counts
        .iter()
        .map(|&c| {
            let sub = scored.restrict(&order[..c]);
            let cd = evaluate_scored(&sub, &with_rule(thresholds, false))?;
            let cdu = evaluate_scored(&sub, &with_rule(thresholds, true))?;
            Ok(SweepRow {
                unknown_classes: c,
                openness: cd.openness,
                macro_f1_cd: cd.macro_f1,
                macro_f1_cdu: cdu.macro_f1,
                auroc: cd.auroc,
            })
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("unknown_classes,openness,macro_f1_cd,macro_f1_cdu,auroc\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.unknown_classes,
            r.openness,
            r.macro_f1_cd,
            r.macro_f1_cdu,
            opt(r.auroc)
        );
    }
    s
}

/// Trains one model and evaluates it with `counts[i]` unknown classes in
/// row `i`. Writes `sweep.csv` and `plots/openness.svg` when `out` is given.
pub fn sweep_openness(cfg: &ExperimentConfig, counts: &[usize], out: Option<&Path>) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    let data = prepare_data(cfg).stage("data")?;
    check_counts(counts, data.unknown_classes.len())?;
    let system = train_system(cfg, &data.train)?;
    let student = &system.joint.student;
    let (thresholds, _) = calibrate(cfg, student, &data.train).stage("calibrate")?;
    let scored = score_test(student, &data, cfg.auroc_score).stage("evaluate")?;
    let order = unknown_order(&data.unknown_classes, cfg.seed);
    let rows = sweep_scored(&scored, &thresholds, &order, counts).stage("evaluate")?;
    if let Some(dir) = out {
        let out = OutDir::create(dir)?;
        fs::write(out.path("sweep.csv"), sweep_csv(&rows))?;
        let pts = |f: fn(&SweepRow) -> f64| rows.iter().map(|r| (r.openness, f(r))).collect::<Vec<_>>();
        let label = cfg.method.label();
        let series = [
            Series::new(format!("{label}-CD"), pts(|r| r.macro_f1_cd)),
            Series::new(format!("{label}-CDU"), pts(|r| r.macro_f1_cdu)),
        ];
        fs::write(out.plot("openness"), svg::line_chart("macro F1 versus openness", "openness", "macro F1", &series))?;
    }
    Ok(rows)
}

/// Macro F1 of every method and rule at every openness setting.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationTable {
    pub unknown_classes: Vec<usize>,
    pub openness: Vec<f64>,
    /// `(column name, one F1 per row)`, e.g. `T/E/S-CDU`.
    pub f1: Vec<(String, Vec<f64>)>,
    /// `(method, one AUROC per row)`.
    pub auroc: Vec<(String, Vec<Option<f64>>)>,
}

impl AblationTable {
    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.f1.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_slice())
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("unknown_classes,openness");
        for (n, _) in &self.f1 {
            let _ = write!(s, ",{n}");
        }
        s.push('\n');
        for (i, c) in self.unknown_classes.iter().enumerate() {
            let _ = write!(s, "{c},{}", self.openness[i]);
            for (_, v) in &self.f1 {
                let _ = write!(s, ",{}", v[i]);
            }
            s.push('\n');
        }
        s
    }

    pub fn auroc_csv(&self) -> String {
        let mut s = String::from("unknown_classes,openness");
        for (n, _) in &self.auroc {
            let _ = write!(s, ",{n}");
        }
        s.push('\n');
        for (i, c) in self.unknown_classes.iter().enumerate() {
            let _ = write!(s, "{c},{}", self.openness[i]);
            for (_, v) in &self.auroc {
                let _ = write!(s, ",{}", opt(v[i]));
            }
            s.push('\n');
        }
        s
    }
}

/// Trains every method from `cfg` (only `method` is overridden) and
/// evaluates each with both rules. `counts` defaults to
/// [`default_counts`]. Writes `ablation.csv`, `ablation_auroc.csv` and
/// `plots/ablation.svg` when `out` is given.
pub fn ablate(cfg: &ExperimentConfig, counts: Option<&[usize]>, out: Option<&Path>) -> Result<AblationTable> {
    cfg.validate()?;
    let data = prepare_data(cfg).stage("data")?;
    let counts = counts.map_or_else(|| default_counts(data.unknown_classes.len()), <[usize]>::to_vec);
    check_counts(&counts, data.unknown_classes.len())?;
    let order = unknown_order(&data.unknown_classes, cfg.seed);
    let mut table = AblationTable {
        unknown_classes: counts.clone(),
        openness: Vec::new(),
        f1: Vec::new(),
        auroc: Vec::new(),
    };
    for method in Method::ALL {
        let mcfg = ExperimentConfig {
            method,
            ..cfg.clone()
        };
        let system = train_system(&mcfg, &data.train)?;
        let student = &system.joint.student;
        let (thresholds, _) = calibrate(&mcfg, student, &data.train).stage("calibrate")?;
        let scored = score_test(student, &data, mcfg.auroc_score).stage("evaluate")?;
        let rows = sweep_scored(&scored, &thresholds, &order, &counts).stage("evaluate")?;
        table.openness = rows.iter().map(|r| r.openness).collect();
        table.f1.push((format!("{}-CD", method.label()), rows.iter().map(|r| r.macro_f1_cd).collect()));
        table.f1.push((format!("{}-CDU", method.label()), rows.iter().map(|r| r.macro_f1_cdu).collect()));
        table.auroc.push((method.label().into(), rows.iter().map(|r| r.auroc).collect()));
    }
    if let Some(dir) = out {
        let out = OutDir::create(dir)?;
        fs::write(out.path("ablation.csv"), table.to_csv())?;
        fs::write(out.path("ablation_auroc.csv"), table.auroc_csv())?;
        let series: Vec<Series> = table
            .f1
            .iter()
            .map(|(n, v)| Series::new(n.clone(), table.openness.iter().copied().zip(v.iter().copied()).collect()))
            .collect();
        fs::write(out.plot("ablation"), svg::line_chart("macro F1 versus openness", "openness", "macro F1", &series))?;
    }
    Ok(table)
}
