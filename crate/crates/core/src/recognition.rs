//! Collective decision scores, threshold calibration and the open set
//! decision rule.
//!
//! A class's collective decision score is its head logit minus the mean of
//! the other `|Y|` logits (the unknown head included). A sample is assigned
//! the arg-max class only when that class's score clears its calibrated
//! threshold and, optionally, the unknown head's probability stays below
//! the uncertainty cutoff; everything else is rejected as unknown.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::{argmax, Tensor};
use crate::student::{StudentModel, StudentOutput};

/// `cds_y = l_y - (1/|Y|) * sum_{t != y} l_t` over all `|Y| + 1` logits.
pub fn collective_decision_scores(logits: &[f64]) -> Vec<f64> {
    assert!(logits.len() >= 2, "need at least one known class and U");
    let others = (logits.len() - 1) as f64;
    (0..logits.len())
        .map(|y| {
            let rest: f64 = logits
                .iter()
                .enumerate()
                .filter(|&(t, _)| t != y)
                .map(|(_, l)| l)
                .sum();
            logits[y] - rest / others
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    /// One cutoff per known class, then the unknown class (0 by default).
    pub eps_cds: Vec<f64>,
    /// Upper bound on the unknown head's probability.
    pub eps_u: f64,
    pub use_uncertainty: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    /// `0..|Y|` for known classes, `|Y|` for unknown.
    pub label: usize,
    pub cds: Vec<f64>,
    pub p_u: f64,
}

impl Thresholds {
    pub fn class_count(&self) -> usize {
        self.eps_cds.len() - 1
    }

    pub fn unknown_label(&self) -> usize {
        self.class_count()
    }

    /// Applies the decision rule to precomputed scores.
    pub fn decide(&self, cds: &[f64], p_u: f64) -> usize {
        let u = self.unknown_label();
        let best = argmax(cds);
        if best == u {
            return u;
        }
        let passes_cds = cds[best] > self.eps_cds[best];
        let passes_u = !self.use_uncertainty || p_u < self.eps_u;
        if passes_cds && passes_u {
            best
        } else {
            u
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# collective decision thresholds; the last class id is unknown\n");
        let _ = writeln!(s, "classes {}", self.class_count());
        for (c, e) in self.eps_cds.iter().enumerate() {
            let _ = writeln!(s, "eps_cds {c} {e}");
        }
        let _ = writeln!(s, "eps_u {}", self.eps_u);
        let _ = writeln!(s, "use_uncertainty {}", self.use_uncertainty);
        s
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let perr = |line: usize, msg: &str| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg: msg.to_string(),
        };
        let mut classes: Option<usize> = None;
        let mut eps: Vec<Option<f64>> = Vec::new();
        let mut eps_u = None;
        let mut flag = None;
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            match parts.as_slice() {
                ["classes", n] => {
                    let n: usize = n.parse().map_err(|_| perr(lineno, "bad class count"))?;
                    classes = Some(n);
                    eps = vec![None; n + 1];
                }
                ["eps_cds", c, v] => {
                    let c: usize = c.parse().map_err(|_| perr(lineno, "bad class id"))?;
                    let v: f64 = v.parse().map_err(|_| perr(lineno, "bad threshold"))?;
                    let slot = eps.get_mut(c).ok_or_else(|| perr(lineno, "class id out of range"))?;
                    *slot = Some(v);
                }
                ["eps_u", v] => eps_u = Some(v.parse().map_err(|_| perr(lineno, "bad eps_u"))?),
                ["use_uncertainty", v] => {
                    flag = Some(v.parse().map_err(|_| perr(lineno, "bad use_uncertainty"))?)
                }
                _ => return Err(perr(lineno, "unrecognized line")),
            }
        }
        let eof = text.lines().count().max(1);
        classes.ok_or_else(|| perr(eof, "missing `classes` line"))?;
        let eps_cds = eps
            .into_iter()
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| perr(eof, "a class threshold is missing"))?;
        Ok(Thresholds {
            eps_cds,
            eps_u: eps_u.ok_or_else(|| perr(eof, "missing eps_u"))?,
            use_uncertainty: flag.ok_or_else(|| perr(eof, "missing use_uncertainty"))?,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&fs::read_to_string(path)?, path)
    }
}

/// Lower empirical quantile of ascending `sorted`: the entry at
/// `floor(level * (n - 1))`.
pub fn lower_quantile(sorted: &[f64], level: f64) -> f64 {
    let idx = (level * (sorted.len() - 1) as f64).floor() as usize;
    sorted[idx.min(sorted.len() - 1)]
}

fn sort_floats(v: &mut [f64]) {
    v.sort_by(f64::total_cmp);
}

/// Calibration from precomputed scores.
///
/// For class `y`, every class-`y` sample contributes `cds_y` if its
/// arg-max is `y` and negative infinity otherwise; the cutoff is the lower
/// `1 - coverage` quantile of that list. With no misassigned samples this
/// is the quantile over the arg-max-correct samples. `eps_u` is the lower
/// `coverage` quantile of `p_U` over all samples.
pub fn calibrate_from_scores(cds: &[Vec<f64>], p_u: &[f64], labels: &[usize], coverage: f64, use_uncertainty: bool) -> Result<Thresholds> {
    let (t, unusable) = calibrate_scores_inner(cds, p_u, labels, coverage, use_uncertainty)?;
    match unusable.first() {
        Some(&class) => Err(Error::EmptyClass { class }),
        None => Ok(t),
    }
}

/// Like [`calibrate_from_scores`], but a class that never wins the arg-max
/// gets an infinite cutoff (it is never accepted) instead of an error. The
/// second value lists those classes.
pub fn calibrate_from_scores_lenient(
    cds: &[Vec<f64>],
    p_u: &[f64],
    labels: &[usize],
    coverage: f64,
    use_uncertainty: bool,
) -> Result<(Thresholds, Vec<usize>)> {
    calibrate_scores_inner(cds, p_u, labels, coverage, use_uncertainty)
}

fn calibrate_scores_inner(
    cds: &[Vec<f64>],
    p_u: &[f64],
    labels: &[usize],
    coverage: f64,
    use_uncertainty: bool,
) -> Result<(Thresholds, Vec<usize>)> {
    if !(coverage > 0.0 && coverage < 1.0) {
        return Err(Error::invalid(format!("coverage {coverage} outside (0, 1)")));
    }
    if cds.len() != labels.len() || p_u.len() != labels.len() || labels.is_empty() {
        return Err(Error::dim("scores and labels must be non-empty and of equal length"));
    }
    let width = cds[0].len();
    let classes = width - 1;
    let mut eps_cds = Vec::with_capacity(width);
    let mut unusable = Vec::new();
    for y in 0..classes {
        let mut scores = Vec::new();
        let mut hits = 0;
        for (row, &l) in cds.iter().zip(labels) {
            if l != y {
                continue;
            }
            if argmax(row) == y {
                hits += 1;
                scores.push(row[y]);
            } else {
                scores.push(f64::NEG_INFINITY);
            }
        }
        if hits == 0 {
            unusable.push(y);
            eps_cds.push(f64::INFINITY);
            continue;
        }
        sort_floats(&mut scores);
        eps_cds.push(lower_quantile(&scores, 1.0 - coverage));
    }
    eps_cds.push(0.0);
    let mut pu = p_u.to_vec();
    sort_floats(&mut pu);
    let t = Thresholds {
        eps_cds,
        eps_u: lower_quantile(&pu, coverage),
        use_uncertainty,
    };
    Ok((t, unusable))
}

/// Collective decision scores and `p_U` of every row.
pub fn score_rows(out: &StudentOutput) -> (Vec<Vec<f64>>, Vec<f64>) {
    let cds = out.logits.iter_rows().map(collective_decision_scores).collect();
    let p_u = out.probs.iter_rows().map(|r| *r.last().expect("U head")).collect();
    (cds, p_u)
}

/// Calibrates thresholds on the (known-class) training set.
pub fn calibrate_thresholds(student: &StudentModel, train: &LabeledDataset, coverage: f64, use_uncertainty: bool) -> Result<Thresholds> {
    let (cds, p_u) = train_scores(student, train)?;
    calibrate_from_scores(&cds, &p_u, &train.labels, coverage, use_uncertainty)
}

/// [`calibrate_thresholds`] that tolerates classes the student never
/// predicts; see [`calibrate_from_scores_lenient`].
pub fn calibrate_thresholds_lenient(
    student: &StudentModel,
    train: &LabeledDataset,
    coverage: f64,
    use_uncertainty: bool,
) -> Result<(Thresholds, Vec<usize>)> {
    let (cds, p_u) = train_scores(student, train)?;
    calibrate_from_scores_lenient(&cds, &p_u, &train.labels, coverage, use_uncertainty)
}

fn train_scores(student: &StudentModel, train: &LabeledDataset) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    if train.class_count != student.class_count() {
        return Err(Error::dim("training set and student disagree on the class count"));
    }
    let out = student.predict(&train.features)?;
    Ok(score_rows(&out))
}

pub fn predict(student: &StudentModel, thresholds: &Thresholds, x: &[f64]) -> Result<Prediction> {
    let batch = Tensor::matrix(1, x.len(), x.to_vec())?;
    Ok(predict_batch(student, thresholds, &batch)?.remove(0))
}

pub fn predict_batch(student: &StudentModel, thresholds: &Thresholds, x: &Tensor) -> Result<Vec<Prediction>> {
    if thresholds.class_count() != student.class_count() {
        return Err(Error::dim("thresholds and student disagree on the class count"));
    }
    let out = student.predict(x)?;
    Ok(predictions_from_output(&out, thresholds))
}

pub fn predictions_from_output(out: &StudentOutput, thresholds: &Thresholds) -> Vec<Prediction> {
    let (cds, p_u) = score_rows(out);
    cds.into_iter()
        .zip(p_u)
        .map(|(cds, p_u)| Prediction {
            label: thresholds.decide(&cds, p_u),
            cds,
            p_u,
        })
        .collect()
}

/// `index,predicted_label,cds_0,...,cds_U,p_u`
pub fn predictions_csv(preds: &[Prediction]) -> String {
    let width = preds.first().map_or(0, |p| p.cds.len());
    let mut s = String::from("index,predicted_label");
    for c in 0..width {
        if c + 1 == width {
            s.push_str(",cds_U");
        } else {
            let _ = write!(s, ",cds_{c}");
        }
    }
    s.push_str(",p_u\n");
    for (i, p) in preds.iter().enumerate() {
        let _ = write!(s, "{i},{}", p.label);
        for v in &p.cds {
            let _ = write!(s, ",{v}");
        }
        let _ = writeln!(s, ",{}", p.p_u);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cds_examples() {
        assert_eq!(collective_decision_scores(&[1.5, 1.5, 1.5]), vec![0.0; 3]);
        assert_eq!(collective_decision_scores(&[2.0, 0.0, 0.0]), vec![2.0, -1.0, -1.0]);
        let a = collective_decision_scores(&[0.3, -1.0, 2.5, 0.1]);
        let b = collective_decision_scores(&[10.3, 9.0, 12.5, 10.1]);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    fn th(eps: Vec<f64>, eps_u: f64, on: bool) -> Thresholds {
        Thresholds { eps_cds: eps, eps_u, use_uncertainty: on }
    }

    #[test]
    fn decision_rule() {
        let t = th(vec![1.0, 1.0, 0.0], 0.5, false);
        // Every score below its cutoff.
        assert_eq!(t.decide(&[0.5, 0.2, -0.7], 0.1), 2);
        // Arg-max is U itself.
        assert_eq!(t.decide(&[-1.0, -1.0, 2.0], 0.9), 2);
        // Passes cds, fails the uncertainty test only when it is enabled.
        let cds = [3.0, -1.5, -1.5];
        assert_eq!(t.decide(&cds, 0.8), 0);
        assert_eq!(th(vec![1.0, 1.0, 0.0], 0.5, true).decide(&cds, 0.8), 2);
        assert_eq!(th(vec![1.0, 1.0, 0.0], 0.5, true).decide(&cds, 0.2), 0);
        // Ties at the cutoff are rejected.
        assert_eq!(t.decide(&[1.0, -0.5, -0.5], 0.0), 2);
        assert_eq!(th(vec![0.0, 0.0, 0.0], 0.5, true).decide(&cds, 0.5), 2);
    }

    #[test]
    fn quantile_on_twenty_points() {
        let v: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(lower_quantile(&v, 0.05), 1.0);
        assert_eq!(lower_quantile(&v, 0.0), 1.0);
        assert_eq!(lower_quantile(&v, 0.5), 10.0);
        assert_eq!(lower_quantile(&v, 1.0), 20.0);
    }

    #[test]
    fn calibrate_twenty_correct_samples() {
        // Class 0 with cds_0 = 1..20 and every arg-max correct.
        let cds: Vec<Vec<f64>> = (1..=20).map(|v| vec![v as f64, -100.0, -100.0]).collect();
        let mut cds2 = cds.clone();
        cds2.push(vec![-100.0, 5.0, -100.0]);
        let mut labels = vec![0; 20];
        labels.push(1);
        let p_u: Vec<f64> = (0..21).map(|i| i as f64 / 20.0).collect();
        let t = calibrate_from_scores(&cds2, &p_u, &labels, 0.95, false).unwrap();
        assert_eq!(t.eps_cds[0], 1.0);
        assert_eq!(t.eps_cds[2], 0.0);
        assert_eq!(t.eps_u, p_u[19]);
        // Coverage close to one picks the minimum.
        let t = calibrate_from_scores(&cds2, &p_u, &labels, 0.999, false).unwrap();
        assert_eq!(t.eps_cds[0], 1.0);
    }

    #[test]
    fn class_without_hits_is_an_error() {
        let cds = vec![vec![-1.0, 2.0, 0.0], vec![0.0, 3.0, 0.0]];
        let r = calibrate_from_scores(&cds, &[0.1, 0.1], &[0, 1], 0.95, false);
        assert!(matches!(r, Err(Error::EmptyClass { class: 0 })));
        assert!(calibrate_from_scores(&cds, &[0.1, 0.1], &[0, 1], 1.0, false).is_err());
    }

    #[test]
    fn thresholds_text_round_trip() {
        let t = th(vec![0.123456789012345, f64::NEG_INFINITY, -2.5, 0.0], 0.93, true);
        let back = Thresholds::parse(&t.to_text(), Path::new("t.txt")).unwrap();
        assert_eq!(back, t);
        assert!(Thresholds::parse("classes 1\neps_cds 0 1\n", Path::new("t")).is_err());
    }

    #[test]
    fn prediction_csv_header() {
        let p = vec![Prediction { label: 2, cds: vec![0.0, 1.0, -1.0], p_u: 0.5 }];
        let csv = predictions_csv(&p);
        assert!(csv.starts_with("index,predicted_label,cds_0,cds_1,cds_U,p_u\n0,2,0,1,-1,0.5\n"));
    }
}
