//! Run configuration: a TOML file, overridden by command-line flags, then
//! resolved against task defaults into the form written to the run
//! directory.

use std::fs;
use std::path::{Path, PathBuf};

use ganext_core::augment::AugmentConfig;
use ganext_core::discriminators::DiscriminatorConfig;
use ganext_core::generator_genext::GeneratorConfig;
use ganext_core::inference_engine::InferenceConfig;
use ganext_core::losses::{GanMode, LossWeights, Task};
use ganext_core::metrics::MetricConfig;
use ganext_core::preprocess::NormalizationSpec;
use ganext_core::seg_mask_provider::LabelSource;
use ganext_core::trainer::{OptimizerConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const DEFAULT_VAL_FRACTION: f64 = 0.15;
pub const DEFAULT_PERCENTILE: f64 = 99.5;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    /// Case root read by the command.
    pub data: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    /// Directory of predicted volumes for `evaluate`.
    pub pred: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSection {
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    /// Balance anatomical regions across the two sides.
    #[serde(default = "yes")]
    pub stratify: bool,
}

fn default_val_fraction() -> f64 {
    DEFAULT_VAL_FRACTION
}

fn yes() -> bool {
    true
}

impl Default for SplitSection {
    fn default() -> Self {
        Self {
            val_fraction: DEFAULT_VAL_FRACTION,
            stratify: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSection {
    #[serde(default = "default_count")]
    pub count: usize,
    #[serde(default = "default_shape")]
    pub shape: [usize; 3],
    #[serde(default = "default_classes")]
    pub classes: usize,
}

fn default_count() -> usize {
    15
}

fn default_shape() -> [usize; 3] {
    [24, 48, 48]
}

fn default_classes() -> usize {
    4
}

impl Default for PhantomSection {
    fn default() -> Self {
        Self {
            count: default_count(),
            shape: default_shape(),
            classes: default_classes(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessSection {
    pub input: Option<NormalizationSpec>,
    pub ct: Option<NormalizationSpec>,
    #[serde(default)]
    pub margin_voxels: usize,
    /// Where anatomical labels come from. Without it, labels stored with
    /// the cases are kept as they are.
    pub labels: Option<LabelSource>,
}

/// Overrides on top of the task's training defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub batch_size_effective: Option<usize>,
    pub grad_accum_steps: Option<usize>,
    pub lr_g: Option<f64>,
    pub lr_d: Option<f64>,
    pub optimizer_g: Option<OptimizerConfig>,
    pub optimizer_d: Option<OptimizerConfig>,
    pub warmup_epochs: Option<usize>,
    pub total_epochs: Option<usize>,
    pub checkpoint_every: Option<usize>,
    pub n_critic: Option<usize>,
    pub gan_mode: Option<GanMode>,
    pub weights: Option<LossWeights>,
}

/// The file as written by the user.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: Option<Task>,
    pub seed: Option<u64>,
    #[serde(default)]
    pub paths: Paths,
    #[serde(default)]
    pub split: SplitSection,
    #[serde(default)]
    pub phantoms: PhantomSection,
    #[serde(default)]
    pub preprocess: PreprocessSection,
    #[serde(default)]
    pub train: TrainSection,
    pub generator: Option<GeneratorConfig>,
    pub discriminator: Option<DiscriminatorConfig>,
    pub augment: Option<AugmentConfig>,
    pub inference: Option<InferenceConfig>,
    #[serde(default)]
    pub metrics: MetricConfig,
}

/// Parses TOML, reporting failures with the dotted path of the offending
/// key.
pub fn parse(text: &str, origin: &str) -> Result<RunConfig, CliError> {
    let de = toml::Deserializer::new(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        let msg = inner.message().trim().to_string();
        let field = if path == "." {
            String::new()
        } else {
            format!("{path}: ")
        };
        CliError::Config(format!("{origin}: {field}{msg}"))
    })
}

pub fn load(path: &Path) -> Result<RunConfig, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse(&text, &path.display().to_string())
}

/// Everything a command ran with, defaults filled in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Resolved {
    pub command: String,
    pub task: Option<Task>,
    pub seed: u64,
    pub deterministic: bool,
    pub paths: Paths,
    pub split: SplitSection,
    pub phantoms: PhantomSection,
    pub preprocess: ResolvedPreprocess,
    pub train: Option<TrainConfig>,
    pub generator: Option<GeneratorConfig>,
    pub discriminator: Option<DiscriminatorConfig>,
    pub augment: Option<AugmentConfig>,
    pub inference: Option<InferenceConfig>,
    pub metrics: MetricConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResolvedPreprocess {
    pub input: NormalizationSpec,
    pub ct: Option<NormalizationSpec>,
    pub margin_voxels: usize,
    pub labels: Option<LabelSource>,
}

pub fn ct_range(task: Task) -> (f64, f64) {
    match task {
        Task::Mri2ct => (-1024.0, 1000.0),
        Task::Cbct2ct => (-1024.0, 1500.0),
    }
}

/// Patch size and zoom range of each task.
pub fn default_augment(task: Task, seed: u64) -> AugmentConfig {
    match task {
        Task::Mri2ct => AugmentConfig::new([32, 160, 192], Some((0.8, 1.3)), seed),
        Task::Cbct2ct => AugmentConfig::new([32, 128, 128], None, seed),
    }
}

pub fn resolve_train(task: Task, seed: u64, s: &TrainSection) -> TrainConfig {
    let mut c = TrainConfig::for_task(task);
    c.seed = seed;
    macro_rules! take {
        ($($f:ident),*) => { $( if let Some(v) = s.$f.clone() { c.$f = v; } )* };
    }
    take!(
        batch_size_effective,
        grad_accum_steps,
        lr_g,
        lr_d,
        optimizer_g,
        optimizer_d,
        total_epochs,
        checkpoint_every,
        n_critic,
        gan_mode
    );
    c.warmup_epochs = Some(s.warmup_epochs.unwrap_or_else(|| c.warmup()));
    c.weights = Some(s.weights.unwrap_or_else(|| c.loss_weights()));
    c
}

impl Resolved {
    /// Fills in defaults. Model and training sections appear only for the
    /// commands that use them.
    pub fn new(
        command: &str,
        cfg: &RunConfig,
        task: Option<Task>,
        seed: u64,
        deterministic: bool,
    ) -> Self {
        let uses_models = matches!(command, "train" | "infer");
        let ct = cfg.preprocess.ct.or_else(|| {
            task.map(|t| {
                let (lo, hi) = ct_range(t);
                NormalizationSpec::linear(lo, hi)
            })
        });
        let train = (command == "train")
            .then(|| task.map(|t| resolve_train(t, seed, &cfg.train)))
            .flatten();
        let generator = uses_models.then(|| {
            cfg.generator
                .clone()
                .unwrap_or_else(GeneratorConfig::standard)
        });
        let discriminator = (command == "train")
            .then(|| {
                task.map(|t| {
                    cfg.discriminator
                        .clone()
                        .unwrap_or_else(|| DiscriminatorConfig::standard(t.uses_seg()))
                })
            })
            .flatten();
        let augment = (command == "train")
            .then(|| {
                task.map(|t| {
                    let mut a = cfg
                        .augment
                        .clone()
                        .unwrap_or_else(|| default_augment(t, seed));
                    a.rng_seed = seed;
                    a
                })
            })
            .flatten();
        let inference = uses_models
            .then(|| {
                cfg.inference.clone().or_else(|| {
                    augment
                        .as_ref()
                        .map(|a| InferenceConfig::new(a.patch_size))
                        .or_else(|| {
                            task.map(|t| InferenceConfig::new(default_augment(t, 0).patch_size))
                        })
                })
            })
            .flatten();
        Self {
            command: command.to_string(),
            task,
            seed,
            deterministic,
            paths: cfg.paths.clone(),
            split: cfg.split.clone(),
            phantoms: cfg.phantoms.clone(),
            preprocess: ResolvedPreprocess {
                input: cfg
                    .preprocess
                    .input
                    .unwrap_or_else(|| NormalizationSpec::percentile(DEFAULT_PERCENTILE)),
                ct,
                margin_voxels: cfg.preprocess.margin_voxels,
                labels: cfg.preprocess.labels.clone(),
            },
            train,
            generator,
            discriminator,
            augment,
            inference,
            metrics: cfg.metrics,
        }
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Config(format!("cannot serialize config: {e}")))
    }

    /// SHA-256 of the resolved TOML, hex encoded.
    pub fn digest(&self) -> Result<String, CliError> {
        Ok(hex::encode(Sha256::digest(self.to_toml()?.as_bytes())))
    }
}
