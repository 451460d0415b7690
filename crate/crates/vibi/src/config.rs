//! Declarative run configuration.
//!
//! A run is described by one UTF-8 TOML file, schema-validated before any
//! compute (unknown keys rejected). CLI flags override config keys; the
//! `VIBI_SEED` environment variable provides the seed default. Every run
//! writes its fully resolved configuration next to its outputs, sufficient
//! to reproduce the run exactly.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::chunker::ChunkSpec;
use crate::data::SynthSpec;
use crate::error::{Error, Result};
use crate::nets::{
    dense_approximator_arch, dense_explainer_arch, mnist_approximator_arch, mnist_blackbox_arch,
    mnist_explainer_arch, ArchSpec,
};
use crate::trainer::{GridSpace, LossMode, VibiConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Synthetic,
    Mnist,
}

/// The `[vibi]` section: scalar hyperparameters plus optional explicit
/// chunking and architectures (derived from the task when omitted).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VibiSection {
    pub k: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_samples: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_samples: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adam_beta1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adam_beta2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adam_eps: Option<f64>,
    /// Epochs without validation improvement before stopping; 0 disables.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub patience: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_limit: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub soft_labels: Option<bool>,
    /// Hidden width of the derived dense nets (synthetic task).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hidden: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub chunks: Option<ChunkSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub explainer: Option<ArchSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub approximator: Option<ArchSpec>,
}

/// The `[mnist]` section.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MnistSection {
    /// Directory holding the four standard IDX files.
    pub dir: PathBuf,
    /// Square patch edge for grid chunks (must divide 28).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub patch: Option<usize>,
    /// Black-box artifact path (default `<out_dir>/blackbox.vibb`).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub blackbox_path: Option<PathBuf>,
}

/// The `[blackbox]` section: training settings for `train-blackbox`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlackboxSection {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for BlackboxSection {
    fn default() -> Self {
        BlackboxSection {
            epochs: 3,
            lr: 1e-3,
            batch: 100,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

/// The whole run description.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    pub out_dir: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_mode: Option<LossMode>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SynthSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mnist: Option<MnistSection>,
    pub vibi: VibiSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blackbox: Option<BlackboxSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridSpace>,
}

/// CLI flag overrides; every field beats the config file when present.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub k: Option<usize>,
    pub tau: Option<f64>,
    pub beta: Option<f64>,
    pub lr: Option<f64>,
    pub epochs: Option<usize>,
    pub batch: Option<usize>,
    pub train_samples: Option<usize>,
    pub loss_mode: Option<LossMode>,
}

/// A fully resolved run: the filled-in config (what gets written next to
/// outputs) plus the derived trainer configuration.
#[derive(Debug, Clone)]
pub struct ResolvedRun {
    pub config: RunConfig,
    pub vibi: VibiConfig,
    pub blackbox: BlackboxSection,
    pub loss_mode: LossMode,
    pub seed: u64,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("run config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("config serialization: {e}")))
    }

    /// Fill every default, apply CLI overrides and the `VIBI_SEED`
    /// environment fallback, and derive the trainer configuration.
    pub fn resolve(&self, overrides: &Overrides) -> Result<ResolvedRun> {
        let mut cfg = self.clone();
        if let Some(dir) = &overrides.out_dir {
            cfg.out_dir = dir.clone();
        }
        let seed = overrides
            .seed
            .or(cfg.seed)
            .or_else(|| {
                std::env::var("VIBI_SEED")
                    .ok()
                    .and_then(|v| v.parse::<u64>().ok())
            })
            .unwrap_or(0);
        cfg.seed = Some(seed);

        let loss_mode = overrides
            .loss_mode
            .or(cfg.loss_mode)
            .unwrap_or(LossMode::Vibi);
        cfg.loss_mode = Some(loss_mode);

        let v = &mut cfg.vibi;
        if let Some(k) = overrides.k {
            v.k = k;
        }
        macro_rules! fill {
            ($field:ident, $override_:expr, $default:expr) => {
                v.$field = Some($override_.or(v.$field).unwrap_or($default));
            };
        }
        fill!(tau, overrides.tau, 0.7);
        fill!(beta, overrides.beta, 0.01);
        fill!(train_samples, overrides.train_samples, 4);
        fill!(lr, overrides.lr, 1e-4);
        fill!(batch, overrides.batch, 100);
        fill!(epochs, overrides.epochs, 30);
        fill!(eval_samples, None::<usize>, 12);
        fill!(adam_beta1, None::<f64>, 0.5);
        fill!(adam_beta2, None::<f64>, 0.999);
        fill!(adam_eps, None::<f64>, 1e-8);
        fill!(patience, None::<usize>, 5);
        fill!(val_limit, None::<usize>, 1000);
        fill!(soft_labels, None::<bool>, false);

        let (chunks, explainer, approximator) = match cfg.task {
            Task::Synthetic => {
                let spec = cfg.synthetic.clone().unwrap_or_default();
                cfg.synthetic = Some(spec.clone());
                let chunks = v.chunks.clone().unwrap_or(ChunkSpec::TokenGroup {
                    n_tokens: spec.d,
                    group_size: 1,
                    features_per_token: spec.features_per_chunk,
                });
                let features = spec.d * spec.features_per_chunk;
                let hidden = v.hidden.unwrap_or(32);
                v.hidden = Some(hidden);
                let d = chunks.build()?.d();
                let explainer = v
                    .explainer
                    .clone()
                    .unwrap_or_else(|| dense_explainer_arch(features, hidden, d));
                let approximator = v
                    .approximator
                    .clone()
                    .unwrap_or_else(|| dense_approximator_arch(features, hidden, 2));
                (chunks, explainer, approximator)
            }
            Task::Mnist => {
                let m = cfg.mnist.clone().ok_or_else(|| {
                    Error::Config("task = \"mnist\" requires a [mnist] section".into())
                })?;
                let patch = m.patch.unwrap_or(4);
                let resolved = MnistSection {
                    dir: m.dir.clone(),
                    patch: Some(patch),
                    blackbox_path: Some(
                        m.blackbox_path
                            .clone()
                            .unwrap_or_else(|| cfg.out_dir.join("blackbox.vibb")),
                    ),
                };
                cfg.mnist = Some(resolved);
                let chunks = v.chunks.clone().unwrap_or(ChunkSpec::GridPatch {
                    height: 28,
                    width: 28,
                    patch_h: patch,
                    patch_w: patch,
                });
                let d = chunks.build()?.d();
                let explainer = v.explainer.clone().unwrap_or_else(|| mnist_explainer_arch(d));
                let approximator = v
                    .approximator
                    .clone()
                    .unwrap_or_else(mnist_approximator_arch);
                (chunks, explainer, approximator)
            }
        };
        v.chunks = Some(chunks.clone());
        v.explainer = Some(explainer.clone());
        v.approximator = Some(approximator.clone());

        let blackbox = cfg.blackbox.clone().unwrap_or_default();
        cfg.blackbox = Some(blackbox.clone());

        let patience = v.patience.expect("filled");
        let vibi = VibiConfig {
            k: v.k,
            tau: v.tau.expect("filled"),
            beta: v.beta.expect("filled"),
            train_samples: v.train_samples.expect("filled"),
            lr: v.lr.expect("filled"),
            batch: v.batch.expect("filled"),
            epochs: v.epochs.expect("filled"),
            seed,
            chunks,
            explainer,
            approximator,
            eval_samples: v.eval_samples.expect("filled"),
            adam_beta1: v.adam_beta1.expect("filled"),
            adam_beta2: v.adam_beta2.expect("filled"),
            adam_eps: v.adam_eps.expect("filled"),
            early_stop_patience: if patience == 0 { None } else { Some(patience) },
            val_limit: v.val_limit.expect("filled"),
            soft_labels: v.soft_labels.expect("filled"),
        };
        vibi.validate()?;
        if loss_mode == LossMode::CrossEntropyOnly && vibi.beta != 0.0 {
            return Err(Error::Config(
                "loss_mode = \"cross-entropy-only\" requires beta = 0".into(),
            ));
        }

        Ok(ResolvedRun {
            config: cfg,
            vibi,
            blackbox,
            loss_mode,
            seed,
        })
    }
}

impl ResolvedRun {
    /// Write the resolved configuration next to the run outputs.
    pub fn write(&self, out_dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(out_dir)?;
        let path = out_dir.join("resolved.toml");
        std::fs::write(&path, self.config.to_toml()?)?;
        Ok(path)
    }

    /// The black-box architecture for the task.
    pub fn blackbox_arch(&self) -> ArchSpec {
        match self.config.task {
            Task::Mnist => mnist_blackbox_arch(),
            Task::Synthetic => {
                let spec = self.config.synthetic.clone().unwrap_or_default();
                let features = spec.d * spec.features_per_chunk;
                dense_approximator_arch(features, 32, 2)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
task = "synthetic"
out_dir = "runs/demo"

[vibi]
k = 2
"#;

    #[test]
    fn minimal_config_resolves_with_defaults() {
        let rc = RunConfig::from_toml(MINIMAL).unwrap();
        let r = rc.resolve(&Overrides::default()).unwrap();
        assert_eq!(r.vibi.k, 2);
        assert_eq!(r.vibi.tau, 0.7);
        assert_eq!(r.vibi.beta, 0.01);
        assert_eq!(r.vibi.batch, 100);
        assert_eq!(r.vibi.adam_beta1, 0.5);
        assert_eq!(r.vibi.eval_samples, 12);
        assert_eq!(r.loss_mode, LossMode::Vibi);
        // derived nets fit the default synthetic layout
        assert_eq!(r.vibi.chunks.build().unwrap().d(), 8);
    }

    #[test]
    fn unknown_keys_rejected() {
        let bad = format!("{MINIMAL}\nbogus_key = 1\n");
        assert!(RunConfig::from_toml(&bad).is_err());
        let bad2 = MINIMAL.replace("k = 2", "k = 2\nnot_a_field = true");
        assert!(RunConfig::from_toml(&bad2).is_err());
    }

    #[test]
    fn flags_override_config_keys() {
        let rc = RunConfig::from_toml(MINIMAL).unwrap();
        let ov = Overrides {
            beta: Some(0.5),
            epochs: Some(7),
            seed: Some(99),
            ..Default::default()
        };
        let r = rc.resolve(&ov).unwrap();
        assert_eq!(r.vibi.beta, 0.5);
        assert_eq!(r.vibi.epochs, 7);
        assert_eq!(r.seed, 99);
        assert_eq!(r.config.seed, Some(99));
    }

    #[test]
    fn resolved_config_round_trips() {
        let rc = RunConfig::from_toml(MINIMAL).unwrap();
        let r = rc.resolve(&Overrides::default()).unwrap();
        let text = r.config.to_toml().unwrap();
        let back = RunConfig::from_toml(&text).unwrap();
        let r2 = back.resolve(&Overrides::default()).unwrap();
        assert_eq!(r.vibi, r2.vibi);
        assert_eq!(r.seed, r2.seed);
    }

    #[test]
    fn mnist_task_requires_section() {
        let rc = RunConfig::from_toml(
            r#"
task = "mnist"
out_dir = "runs/m"

[vibi]
k = 10
"#,
        )
        .unwrap();
        assert!(rc.resolve(&Overrides::default()).is_err());
    }

    #[test]
    fn ce_mode_with_nonzero_beta_rejected() {
        let rc = RunConfig::from_toml(MINIMAL).unwrap();
        let ov = Overrides {
            loss_mode: Some(LossMode::CrossEntropyOnly),
            beta: Some(0.1),
            ..Default::default()
        };
        assert!(rc.resolve(&ov).is_err());
        let ok = Overrides {
            loss_mode: Some(LossMode::CrossEntropyOnly),
            beta: Some(0.0),
            ..Default::default()
        };
        assert!(rc.resolve(&ok).is_ok());
    }
}
