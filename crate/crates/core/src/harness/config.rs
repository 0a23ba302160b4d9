//! Experiment configuration, read from and written to JSON.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::ToySpec;
use crate::distill::DistillConfig;
use crate::error::{Error, Result};
use crate::nn::{AdamConfig, DEFAULT_LEAK};

/// Which parts of the teacher/explorer/student system are trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Student alone on one-hot targets.
    Ovrn,
    /// Distilled targets, no explorer.
    TeacherStudent,
    /// Explorer with one-hot targets.
    ExplorerStudent,
    /// Distilled targets and explorer.
    Tes,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Ovrn, Method::TeacherStudent, Method::ExplorerStudent, Method::Tes];

    pub fn uses_teacher(self) -> bool {
        matches!(self, Method::TeacherStudent | Method::Tes)
    }

    pub fn uses_explorer(self) -> bool {
        matches!(self, Method::ExplorerStudent | Method::Tes)
    }

    pub fn label(self) -> &'static str {
        match self {
            Method::Ovrn => "OVRN",
            Method::TeacherStudent => "T/S",
            Method::ExplorerStudent => "E/S",
            Method::Tes => "T/E/S",
        }
    }
}

/// Score treated as evidence of "known" for AUROC.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnownnessScore {
    /// Largest collective decision score among the known classes.
    MaxCds,
    /// Largest known-class sigmoid output.
    MaxSigmoid,
    /// `1 - p_U`.
    OneMinusPu,
}

impl KnownnessScore {
    pub fn score(self, cds: &[f64], probs: &[f64]) -> f64 {
        let known = cds.len() - 1;
        match self {
            KnownnessScore::MaxCds => cds[..known].iter().copied().fold(f64::NEG_INFINITY, f64::max),
            KnownnessScore::MaxSigmoid => probs[..known].iter().copied().fold(f64::NEG_INFINITY, f64::max),
            KnownnessScore::OneMinusPu => 1.0 - probs[known],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    /// Generated Gaussian clusters. `known_classes` are relabeled `0..|Y|`;
    /// the rest form the unknown pool. `test_fraction` of every class is
    /// held out for evaluation.
    Toy {
        #[serde(default)]
        toy: ToySpec,
        known_classes: Vec<usize>,
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
    },
    /// CSV files. Train and known-test labels are `0..|Y|`; the unknown
    /// file keeps arbitrary labels, each one an unknown class.
    Files {
        train: PathBuf,
        test_known: PathBuf,
        #[serde(default)]
        test_unknown: Option<PathBuf>,
    },
}

fn default_test_fraction() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Architecture {
    pub teacher_hidden: Vec<usize>,
    pub student_trunk: Vec<usize>,
    pub student_head: Vec<usize>,
    pub latent_dim: usize,
    pub generator_hidden: Vec<usize>,
    pub discriminator_hidden: Vec<usize>,
    pub leak: f64,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            teacher_hidden: vec![32, 32],
            student_trunk: vec![64, 64],
            student_head: vec![16],
            latent_dim: 8,
            generator_hidden: vec![32, 32],
            discriminator_hidden: vec![32, 32],
            leak: DEFAULT_LEAK,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamSet {
    pub teacher: AdamConfig,
    pub student: AdamConfig,
    pub generator: AdamConfig,
    pub discriminator: AdamConfig,
}

impl Default for AdamSet {
    /// The adversarial pair uses `beta1 = 0.5`; with the usual 0.9 the
    /// generator's momentum keeps dragging the student's real loss around
    /// long after it has converged.
    fn default() -> Self {
        let gan = AdamConfig {
            beta1: 0.5,
            ..AdamConfig::default()
        };
        AdamSet {
            teacher: AdamConfig::default(),
            student: AdamConfig::default(),
            generator: gan,
            discriminator: gan,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub method: Method,
    pub arch: Architecture,
    pub distill: DistillConfig,
    pub lambda: f64,
    /// Use `-log D(G(z))` for the generator's adversarial term.
    pub non_saturating: bool,
    pub adam: AdamSet,
    pub teacher_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Decision rule used for the headline report (the other is reported
    /// alongside).
    pub use_uncertainty: bool,
    pub coverage: f64,
    pub auroc_score: KnownnessScore,
    /// Generated samples scored and dumped after every epoch.
    pub probe_count: usize,
    /// Checkpoint every this many joint epochs (0 disables).
    pub snapshot_every: usize,
    /// Write per-epoch SVG scatter plots of generated samples (2-D data).
    pub plot_fakes: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: DataSource::Toy {
                toy: ToySpec::default(),
                known_classes: vec![0, 1, 2],
                test_fraction: default_test_fraction(),
            },
            method: Method::Tes,
            arch: Architecture::default(),
            distill: DistillConfig::default(),
            lambda: 1.0,
            non_saturating: false,
            adam: AdamSet::default(),
            teacher_epochs: 30,
            epochs: 100,
            batch_size: 256,
            seed: 0,
            use_uncertainty: false,
            coverage: 0.95,
            auroc_score: KnownnessScore::MaxCds,
            probe_count: 1000,
            snapshot_every: 0,
            plot_fakes: true,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.distill.validate()?;
        for a in [self.adam.teacher, self.adam.student, self.adam.generator, self.adam.discriminator] {
            a.validate()?;
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::invalid("lambda must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if !(self.coverage > 0.0 && self.coverage < 1.0) {
            return Err(Error::invalid("coverage must lie in (0, 1)"));
        }
        if self.arch.student_trunk.is_empty() || self.arch.latent_dim == 0 {
            return Err(Error::invalid("student trunk and latent dimension must be non-empty"));
        }
        match &self.data {
            DataSource::Toy { toy, .. } => toy.validate(),
            DataSource::Files { train, test_known, test_unknown } => {
                for p in [Some(train), Some(test_known), test_unknown.as_ref()].into_iter().flatten() {
                    if !p.exists() {
                        return Err(Error::invalid(format!("data file {} does not exist", p.display())));
                    }
                }
                Ok(())
            }
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut cfg = Self::from_json(&fs::read_to_string(path)?)?;
        // Relative data paths are resolved against the config's directory.
        if let DataSource::Files { train, test_known, test_unknown } = &mut cfg.data {
            let base = path.parent().unwrap_or(Path::new("."));
            for p in [Some(train), Some(test_known), test_unknown.as_mut()].into_iter().flatten() {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_json_uses_defaults() {
        let cfg = ExperimentConfig::from_json(r#"{"seed": 4, "method": "ovrn"}"#).unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.method, Method::Ovrn);
        assert_eq!(cfg.distill.q_min, 0.7);
        assert_eq!(cfg.adam.student.lr, 0.002);
        cfg.validate().unwrap();
    }

    #[test]
    fn json_round_trip() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::from_json(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn missing_files_rejected() {
        let cfg = ExperimentConfig {
            data: DataSource::Files {
                train: "/nonexistent/train.csv".into(),
                test_known: "/nonexistent/test.csv".into(),
                test_unknown: None,
            },
            ..ExperimentConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn knownness_scores() {
        let cds = [1.0, 3.0, -2.0];
        let p = [0.2, 0.7, 0.4];
        assert_eq!(KnownnessScore::MaxCds.score(&cds, &p), 3.0);
        assert_eq!(KnownnessScore::MaxSigmoid.score(&cds, &p), 0.7);
        assert!((KnownnessScore::OneMinusPu.score(&cds, &p) - 0.6).abs() < 1e-15);
    }
}
