//! Labeled datasets, the synthetic generators used by the experiments, and
//! CSV persistence (`label,f0,f1,...`).

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::rng_from_seed;

/// Feature matrix with one integer label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl LabeledDataset {
    pub fn new(features: Tensor, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if features.shape().len() != 2 {
            return Err(Error::dim("features must be a matrix"));
        }
        if features.rows() != labels.len() {
            return Err(Error::dim(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {class_count} classes"
            )));
        }
        Ok(LabeledDataset {
            features,
            labels,
            class_count,
        })
    }

    pub fn empty(dim: usize, class_count: usize) -> Self {
        LabeledDataset {
            features: Tensor::zeros(vec![0, dim]),
            labels: Vec::new(),
            class_count,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn class_sizes(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Distinct labels in ascending order.
    pub fn present_classes(&self) -> Vec<usize> {
        self.labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect()
    }

    /// Training sets need at least two classes, each present.
    pub fn validate_for_training(&self) -> Result<()> {
        if self.class_count < 2 {
            return Err(Error::invalid(format!(
                "training needs at least two classes, dataset declares {}",
                self.class_count
            )));
        }
        if let Some(c) = self.class_sizes().iter().position(|&n| n == 0) {
            return Err(Error::invalid(format!("class {c} has no training samples")));
        }
        self.features.ensure_finite("dataset features")
    }

    pub fn subset(&self, idx: &[usize]) -> LabeledDataset {
        LabeledDataset {
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
        }
    }

    /// Rows concatenated; the class count is the larger of the two.
    pub fn concat(&self, other: &LabeledDataset) -> Result<LabeledDataset> {
        let features = Tensor::vstack(&[&self.features, &other.features])?;
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        LabeledDataset::new(features, labels, self.class_count.max(other.class_count))
    }

    /// Indices of every row with label `class`.
    pub fn indices_of(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == class).collect()
    }

    /// One-hot label matrix.
    pub fn one_hot(&self) -> Tensor {
        let mut t = Tensor::zeros(vec![self.len(), self.class_count]);
        for (i, &l) in self.labels.iter().enumerate() {
            t.row_mut(i)[l] = 1.0;
        }
        t
    }
}

fn default_spread() -> f64 {
    0.35
}

/// Isotropic Gaussian clusters in the plane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToySpec {
    pub class_count: usize,
    pub per_class: usize,
    /// Pre-normalization cluster centers; empty means [`default_centers`].
    pub centers: Vec<[f64; 2]>,
    pub spread: f64,
    pub seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        ToySpec {
            class_count: 4,
            per_class: 1000,
            centers: Vec::new(),
            spread: default_spread(),
            seed: 0,
        }
    }
}

/// `k` points on the circle of radius sqrt(2), starting at 45 degrees; for
/// four classes these are the corners (+-1, +-1).
pub fn default_centers(k: usize) -> Vec<[f64; 2]> {
    let r = 2f64.sqrt();
    (0..k)
        .map(|i| {
            let a = std::f64::consts::FRAC_PI_4 + std::f64::consts::TAU * i as f64 / k as f64;
            [r * a.cos(), r * a.sin()]
        })
        .collect()
}

impl ToySpec {
    pub fn resolved_centers(&self) -> Vec<[f64; 2]> {
        if self.centers.is_empty() {
            default_centers(self.class_count)
        } else {
            self.centers.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let centers = self.resolved_centers();
        if self.class_count == 0 || self.per_class == 0 {
            return Err(Error::invalid("toy data needs class_count >= 1 and per_class >= 1"));
        }
        if centers.len() != self.class_count {
            return Err(Error::invalid(format!(
                "{} centers given for {} classes",
                centers.len(),
                self.class_count
            )));
        }
        if !(self.spread > 0.0) {
            return Err(Error::invalid("spread must be positive"));
        }
        for i in 0..centers.len() {
            for j in 0..i {
                if centers[i] == centers[j] {
                    return Err(Error::invalid(format!("centers {j} and {i} coincide")));
                }
            }
        }
        Ok(())
    }
}

/// Gaussian blobs around each center, min-max normalized to `[0, 1]^2`
/// over the whole set. Rows are grouped by class.
pub fn gen_toy(spec: &ToySpec) -> Result<LabeledDataset> {
    spec.validate()?;
    let centers = spec.resolved_centers();
    let mut rng = rng_from_seed(spec.seed);
    let n = spec.class_count * spec.per_class;
    let mut data = Vec::with_capacity(n * 2);
    let mut labels = Vec::with_capacity(n);
    for (k, c) in centers.iter().enumerate() {
        for _ in 0..spec.per_class {
            for &ci in c {
                let z: f64 = StandardNormal.sample(&mut rng);
                data.push(ci + spec.spread * z);
            }
            labels.push(k);
        }
    }
    min_max_normalize(&mut data, 2);
    LabeledDataset::new(Tensor::matrix(n, 2, data)?, labels, spec.class_count)
}

fn min_max_normalize(data: &mut [f64], dim: usize) {
    for j in 0..dim {
        let col = data.iter().skip(j).step_by(dim);
        let (lo, hi) = col.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
        let range = hi - lo;
        for v in data.iter_mut().skip(j).step_by(dim) {
            *v = if range > 0.0 { ((*v - lo) / range).clamp(0.0, 1.0) } else { 0.5 };
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseMode {
    /// Every value i.i.d. uniform on `[0, 1]`.
    PureNoise,
    /// `clamp(source + alpha * noise, 0, 1)` with uniform noise.
    Overlay {
        #[serde(default = "default_alpha")]
        alpha: f64,
    },
}

fn default_alpha() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSpec {
    pub dim: usize,
    pub count: usize,
    pub mode: NoiseMode,
    pub overlay_source: Option<LabeledDataset>,
    pub seed: u64,
    /// Label given to every generated row.
    pub label: usize,
}

/// Uniform noise, or noise superimposed on source samples. Overlay row `i`
/// is built on source row `i mod M`.
pub fn gen_noise(spec: &NoiseSpec) -> Result<LabeledDataset> {
    let mut rng = rng_from_seed(spec.seed);
    let data: Vec<f64> = match spec.mode {
        NoiseMode::PureNoise => (0..spec.count * spec.dim)
            .map(|_| rng.random_range(0.0..=1.0))
            .collect(),
        NoiseMode::Overlay { alpha } => {
            let src = spec
                .overlay_source
                .as_ref()
                .ok_or_else(|| Error::invalid("overlay noise needs a source dataset"))?;
            if src.dim() != spec.dim {
                return Err(Error::dim(format!(
                    "overlay source has dimension {}, spec asks for {}",
                    src.dim(),
                    spec.dim
                )));
            }
            if src.is_empty() {
                return Err(Error::invalid("overlay source is empty"));
            }
            if !(alpha >= 0.0) {
                return Err(Error::invalid("overlay alpha must be non-negative"));
            }
            let mut out = Vec::with_capacity(spec.count * spec.dim);
            for i in 0..spec.count {
                for &x in src.features.row(i % src.len()) {
                    let u: f64 = rng.random_range(0.0..=1.0);
                    out.push((x + alpha * u).clamp(0.0, 1.0));
                }
            }
            out
        }
    };
    LabeledDataset::new(
        Tensor::matrix(spec.count, spec.dim, data)?,
        vec![spec.label; spec.count],
        spec.label + 1,
    )
}

/// Maps original class ids of the known classes to `0..|Y|` and back.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelabelMap {
    /// `originals[new] = original`.
    pub originals: Vec<usize>,
}

impl RelabelMap {
    pub fn to_new(&self, original: usize) -> Option<usize> {
        self.originals.iter().position(|&o| o == original)
    }

    pub fn to_original(&self, new: usize) -> usize {
        self.originals[new]
    }
}

#[derive(Debug, Clone)]
pub struct KnownUnknownSplit {
    /// Rows of the known classes, relabeled `0..|Y|`.
    pub known: LabeledDataset,
    /// Remaining rows with their original labels.
    pub unknown: LabeledDataset,
    pub relabel: RelabelMap,
}

pub fn split_known_unknown(data: &LabeledDataset, known_classes: &[usize]) -> Result<KnownUnknownSplit> {
    if known_classes.is_empty() {
        return Err(Error::invalid("at least one known class is required"));
    }
    let mut seen = BTreeSet::new();
    for &c in known_classes {
        if c >= data.class_count {
            return Err(Error::invalid(format!(
                "known class {c} does not exist (dataset has {} classes)",
                data.class_count
            )));
        }
        if !seen.insert(c) {
            return Err(Error::invalid(format!("known class {c} listed twice")));
        }
    }
    let relabel = RelabelMap {
        originals: known_classes.to_vec(),
    };
    let (mut kidx, mut uidx) = (Vec::new(), Vec::new());
    for (i, &l) in data.labels.iter().enumerate() {
        if seen.contains(&l) {
            kidx.push(i);
        } else {
            uidx.push(i);
        }
    }
    let mut known = data.subset(&kidx);
    for l in known.labels.iter_mut() {
        *l = relabel.to_new(*l).expect("known label");
    }
    known.class_count = known_classes.len();
    Ok(KnownUnknownSplit {
        known,
        unknown: data.subset(&uidx),
        relabel,
    })
}

/// Per-class random split; `round(test_fraction * n_c)` rows of every class
/// go to the second set. Both keep the original row order.
pub fn stratified_split(
    data: &LabeledDataset,
    test_fraction: f64,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::invalid(format!("test fraction {test_fraction} outside [0, 1)")));
    }
    let mut rng = rng_from_seed(seed);
    let mut is_test = vec![false; data.len()];
    for c in 0..data.class_count {
        let mut idx = data.indices_of(c);
        idx.shuffle(&mut rng);
        let k = (test_fraction * idx.len() as f64).round() as usize;
        for &i in &idx[..k] {
            is_test[i] = true;
        }
    }
    let train: Vec<usize> = (0..data.len()).filter(|&i| !is_test[i]).collect();
    let test: Vec<usize> = (0..data.len()).filter(|&i| is_test[i]).collect();
    Ok((data.subset(&train), data.subset(&test)))
}

pub fn dataset_to_csv(data: &LabeledDataset) -> String {
    let mut s = String::from("label");
    for j in 0..data.dim() {
        let _ = write!(s, ",f{j}");
    }
    s.push('\n');
    for (i, row) in data.features.iter_rows().enumerate() {
        let _ = write!(s, "{}", data.labels[i]);
        for v in row {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

pub fn save_dataset(data: &LabeledDataset, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, dataset_to_csv(data))?;
    Ok(())
}

/// Parses `label,f0,...` CSV. The class count is one more than the largest
/// label seen.
pub fn parse_dataset(text: &str, path: &Path) -> Result<LabeledDataset> {
    let perr = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| perr(1, "missing header".into()))?;
    let cols: Vec<&str> = header.trim().split(',').collect();
    if cols.first().map(|c| c.trim()) != Some("label") {
        return Err(perr(1, "header must start with `label`".into()));
    }
    for (j, c) in cols.iter().enumerate().skip(1) {
        if c.trim() != format!("f{}", j - 1) {
            return Err(perr(1, format!("expected column f{}, found `{c}`", j - 1)));
        }
    }
    let dim = cols.len() - 1;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (i, line) in lines {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim().split(',').collect();
        if fields.len() != dim + 1 {
            return Err(perr(lineno, format!("expected {} fields, found {}", dim + 1, fields.len())));
        }
        let label: usize = fields[0]
            .trim()
            .parse()
            .map_err(|_| perr(lineno, format!("invalid label `{}`", fields[0])))?;
        labels.push(label);
        for f in &fields[1..] {
            let v: f64 = f
                .trim()
                .parse()
                .map_err(|_| perr(lineno, format!("invalid feature `{f}`")))?;
            if !v.is_finite() {
                return Err(perr(lineno, format!("non-finite feature `{f}`")));
            }
            data.push(v);
        }
    }
    let class_count = labels.iter().max().map_or(0, |m| m + 1);
    let n = labels.len();
    LabeledDataset::new(Tensor::matrix(n, dim, data)?, labels, class_count)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    parse_dataset(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(seed: u64) -> LabeledDataset {
        gen_toy(&ToySpec { seed, ..ToySpec::default() }).unwrap()
    }

    #[test]
    fn toy_counts_and_range() {
        let d = toy(3);
        assert_eq!(d.len(), 4000);
        assert_eq!(d.class_sizes(), vec![1000; 4]);
        assert!(d.features.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn default_centers_are_square_corners() {
        let c = default_centers(4);
        let want = [[1.0, 1.0], [-1.0, 1.0], [-1.0, -1.0], [1.0, -1.0]];
        for (a, b) in c.iter().zip(want) {
            assert!((a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn toy_tiny_spread_collapses_to_centers() {
        let d = gen_toy(&ToySpec { spread: 1e-12, per_class: 5, ..ToySpec::default() }).unwrap();
        // Corners normalize to 0/1 coordinates.
        let want = [[1.0, 1.0], [0.0, 1.0], [0.0, 0.0], [1.0, 0.0]];
        for (i, row) in d.features.iter_rows().enumerate() {
            let c = want[d.labels[i]];
            assert!((row[0] - c[0]).abs() < 1e-9 && (row[1] - c[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn toy_determinism() {
        assert_eq!(toy(5), toy(5));
        assert_ne!(toy(5), toy(6));
    }

    #[test]
    fn toy_spec_validation() {
        let dup = ToySpec { class_count: 2, centers: vec![[0.0, 0.0], [0.0, 0.0]], ..ToySpec::default() };
        assert!(gen_toy(&dup).is_err());
        let mism = ToySpec { class_count: 3, centers: vec![[0.0, 0.0]], ..ToySpec::default() };
        assert!(gen_toy(&mism).is_err());
    }

    #[test]
    fn pure_noise_mean() {
        let spec = NoiseSpec { dim: 10, count: 10_000, mode: NoiseMode::PureNoise, overlay_source: None, seed: 1, label: 0 };
        let d = gen_noise(&spec).unwrap();
        let mean = d.features.data().iter().sum::<f64>() / d.features.len() as f64;
        assert!((0.49..=0.51).contains(&mean), "{mean}");
        assert!(d.features.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(d.class_sizes(), vec![10_000]);
    }

    #[test]
    fn overlay_alpha_zero_is_identity() {
        let src = toy(1);
        let spec = NoiseSpec { dim: 2, count: src.len(), mode: NoiseMode::Overlay { alpha: 0.0 }, overlay_source: Some(src.clone()), seed: 9, label: 0 };
        assert_eq!(gen_noise(&spec).unwrap().features, src.features);
    }

    #[test]
    fn overlay_clamped_and_requires_source() {
        let src = toy(1);
        let spec = NoiseSpec { dim: 2, count: 500, mode: NoiseMode::Overlay { alpha: 0.5 }, overlay_source: Some(src), seed: 9, label: 0 };
        let d = gen_noise(&spec).unwrap();
        assert!(d.features.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let missing = NoiseSpec { overlay_source: None, ..spec };
        assert!(matches!(gen_noise(&missing), Err(Error::Validation(_))));
    }

    #[test]
    fn known_unknown_split() {
        let d = toy(2);
        let s = split_known_unknown(&d, &[0, 1, 2]).unwrap();
        assert_eq!(s.known.len(), 3000);
        assert_eq!(s.unknown.len(), 1000);
        assert!(s.unknown.labels.iter().all(|&l| l == 3));

        let all = split_known_unknown(&d, &[0, 1, 2, 3]).unwrap();
        assert!(all.unknown.is_empty());

        let s = split_known_unknown(&d, &[3, 1]).unwrap();
        assert_eq!(s.known.class_count, 2);
        let kidx: Vec<usize> = (0..d.len()).filter(|&i| d.labels[i] == 3 || d.labels[i] == 1).collect();
        let restored: Vec<usize> = s.known.labels.iter().map(|&l| s.relabel.to_original(l)).collect();
        let original: Vec<usize> = kidx.iter().map(|&i| d.labels[i]).collect();
        assert_eq!(restored, original);

        assert!(split_known_unknown(&d, &[7]).is_err());
        assert!(split_known_unknown(&d, &[]).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let d = toy(4);
        let text = dataset_to_csv(&d);
        let back = parse_dataset(&text, Path::new("mem.csv")).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn csv_header_only_is_empty() {
        let d = parse_dataset("label,f0,f1\n", Path::new("e.csv")).unwrap();
        assert!(d.is_empty());
        assert_eq!(d.dim(), 2);
    }

    #[test]
    fn csv_bad_row_names_line() {
        let err = parse_dataset("label,f0,f1\n0,0.1,0.2\n1,0.3,abc\n", Path::new("bad.csv")).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        assert!(err_line("label,f0\n0\n") == Some(2));
    }

    fn err_line(text: &str) -> Option<usize> {
        match parse_dataset(text, Path::new("x")) {
            Err(Error::Parse { line, .. }) => Some(line),
            _ => None,
        }
    }

    #[test]
    fn stratified_split_sizes() {
        let d = toy(8);
        let (tr, te) = stratified_split(&d, 0.2, 1).unwrap();
        assert_eq!(tr.class_sizes(), vec![800; 4]);
        assert_eq!(te.class_sizes(), vec![200; 4]);
    }
}
