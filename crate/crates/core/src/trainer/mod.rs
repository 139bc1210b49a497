//! Two-optimizer adversarial training: one discriminator update, then one
//! generator update, per batch.

mod checkpoint;

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ganext_tensor::{no_grad, Adam, AdamConfig, Module, Tensor, Var};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use checkpoint::{
    load_checkpoint, load_generator, save_checkpoint, CheckpointMeta, CHECKPOINT_FORMAT,
};

use crate::augment::{augment_batch, sample_rng, AugmentConfig, PatchSample};
use crate::discriminators::{DiscriminatorConfig, DiscriminatorOutput, PatchDiscriminator};
use crate::error::{Error, NumericAbort, Result};
use crate::generator_genext::{Generator, GeneratorConfig};
use crate::inference_engine::{synthesize_volume, InferenceConfig, TaskGenerator};
use crate::losses::{
    adversarial_loss_d, adversarial_loss_g, dice_ce_loss, feature_matching_loss, mae_loss,
    masked_mae_loss, perceptual_loss, total_loss, weighted_sum, GanMode, LossBreakdown,
    LossWeights, RandomBackbone, Task, TERM_NAMES,
};
use crate::metrics::{evaluate_case, MetricConfig, MetricReport};
use crate::preprocess::PreprocessRecord;
use crate::volume_store::{CasePair, SplitManifest};

/// Seed of the fixed perceptual feature extractor, shared by every run.
pub const PERCEPTUAL_SEED: u64 = 0x9e37_79b9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimizerKind {
    AdamW,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    #[serde(default = "beta1")]
    pub beta1: f64,
    #[serde(default = "beta2")]
    pub beta2: f64,
    #[serde(default = "adam_eps")]
    pub eps: f64,
    /// Defaults to 1e-2 for AdamW and 0 for Adam.
    #[serde(default)]
    pub weight_decay: Option<f64>,
}

fn beta1() -> f64 {
    0.9
}

fn beta2() -> f64 {
    0.999
}

fn adam_eps() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn new(kind: OptimizerKind) -> Self {
        Self {
            kind,
            beta1: beta1(),
            beta2: beta2(),
            eps: adam_eps(),
            weight_decay: None,
        }
    }

    pub fn adam_config(&self) -> AdamConfig {
        let base = match self.kind {
            OptimizerKind::AdamW => AdamConfig::adamw(self.weight_decay.unwrap_or(1e-2)),
            OptimizerKind::Adam => AdamConfig {
                weight_decay: self.weight_decay.unwrap_or(0.0),
                ..AdamConfig::adam()
            },
        };
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            ..base
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub task: Task,
    #[serde(default = "batch_eight")]
    pub batch_size_effective: usize,
    #[serde(default = "one")]
    pub grad_accum_steps: usize,
    #[serde(default = "lr_g")]
    pub lr_g: f64,
    #[serde(default = "lr_d")]
    pub lr_d: f64,
    pub optimizer_g: OptimizerConfig,
    pub optimizer_d: OptimizerConfig,
    /// Defaults to 5% of `total_epochs`.
    #[serde(default)]
    pub warmup_epochs: Option<usize>,
    pub total_epochs: usize,
    #[serde(default)]
    pub seed: u64,
    /// Checkpoint interval in epochs; 0 keeps only the final checkpoint.
    #[serde(default)]
    pub checkpoint_every: usize,
    /// Discriminator updates per batch.
    #[serde(default = "one")]
    pub n_critic: usize,
    #[serde(default)]
    pub gan_mode: GanMode,
    /// Defaults to the task's coefficients.
    #[serde(default)]
    pub weights: Option<LossWeights>,
}

fn batch_eight() -> usize {
    8
}

fn one() -> usize {
    1
}

fn lr_g() -> f64 {
    5e-4
}

fn lr_d() -> f64 {
    1e-3
}

impl TrainConfig {
    /// AdamW for MRI and 3000 epochs; Adam for CBCT and 1000 epochs.
    pub fn for_task(task: Task) -> Self {
        let (kind, total) = match task {
            Task::Mri2ct => (OptimizerKind::AdamW, 3000),
            Task::Cbct2ct => (OptimizerKind::Adam, 1000),
        };
        Self {
            task,
            batch_size_effective: batch_eight(),
            grad_accum_steps: 1,
            lr_g: lr_g(),
            lr_d: lr_d(),
            optimizer_g: OptimizerConfig::new(kind),
            optimizer_d: OptimizerConfig::new(kind),
            warmup_epochs: None,
            total_epochs: total,
            seed: 0,
            checkpoint_every: 0,
            n_critic: 1,
            gan_mode: GanMode::Bce,
            weights: None,
        }
    }

    pub fn warmup(&self) -> usize {
        self.warmup_epochs
            .unwrap_or_else(|| (self.total_epochs as f64 * 0.05).round() as usize)
    }

    pub fn loss_weights(&self) -> LossWeights {
        self.weights
            .unwrap_or_else(|| LossWeights::for_task(self.task))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::Config(format!("train.{field}: {msg}")));
        if self.batch_size_effective == 0 || self.grad_accum_steps == 0 {
            return bad(
                "batch_size_effective",
                "batch size and accumulation steps must be >= 1".into(),
            );
        }
        if self.batch_size_effective % self.grad_accum_steps != 0 {
            return bad(
                "grad_accum_steps",
                format!(
                    "{} does not divide batch_size_effective {}",
                    self.grad_accum_steps, self.batch_size_effective
                ),
            );
        }
        if !(self.lr_g > 0.0) || !(self.lr_d > 0.0) {
            return bad(
                "lr_g",
                format!(
                    "learning rates must be > 0, got {} / {}",
                    self.lr_g, self.lr_d
                ),
            );
        }
        if self.total_epochs == 0 {
            return bad("total_epochs", "must be >= 1".into());
        }
        if self.warmup() >= self.total_epochs {
            return bad(
                "warmup_epochs",
                format!(
                    "{} must be below total_epochs {}",
                    self.warmup(),
                    self.total_epochs
                ),
            );
        }
        if self.n_critic == 0 {
            return bad("n_critic", "must be >= 1".into());
        }
        self.loss_weights().validate()
    }
}

/// Linear warmup over `warmup` epochs, then half-cosine decay to zero at
/// `total`.
pub fn lr_at(epoch: usize, base_lr: f64, warmup: usize, total: usize) -> Result<f64> {
    if warmup >= total {
        return Err(Error::Config(format!(
            "warmup {warmup} must be below total {total}"
        )));
    }
    if epoch > total {
        return Err(Error::Config(format!("epoch {epoch} beyond total {total}")));
    }
    if epoch < warmup {
        return Ok(base_lr * (epoch + 1) as f64 / warmup as f64);
    }
    let t = (epoch - warmup) as f64 / (total - warmup) as f64;
    Ok(base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
}

/// Network inputs of one batch as `(B, 1, D, H, W)` tensors.
#[derive(Clone, Debug)]
pub struct Batch {
    pub x: Tensor<f32>,
    pub y: Tensor<f32>,
    /// Anatomical labels, or the body mask when a case has none.
    pub labels: Tensor<f32>,
    pub provenance: Vec<String>,
}

impl Batch {
    pub fn from_samples(samples: &[PatchSample]) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Shape("empty batch".into()))?;
        let s = first.input.shape();
        let shape = [samples.len(), 1, s[0], s[1], s[2]];
        let (mut x, mut y, mut labels) = (Vec::new(), Vec::new(), Vec::new());
        for p in samples {
            if p.input.shape() != s {
                return Err(Error::Shape(format!(
                    "batch mixes patch shapes {s:?} and {:?}",
                    p.input.shape()
                )));
            }
            let target = p.target.as_ref().ok_or_else(|| {
                Error::Volume(format!("case {} has no target CT", p.provenance.case_id))
            })?;
            x.extend_from_slice(p.input.data());
            y.extend_from_slice(target.data());
            labels.extend_from_slice(p.labels.as_ref().unwrap_or(&p.mask).data());
        }
        Ok(Self {
            x: Tensor::from_vec(&shape, x),
            y: Tensor::from_vec(&shape, y),
            labels: Tensor::from_vec(&shape, labels),
            provenance: samples.iter().map(|p| p.provenance.to_string()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Consecutive sub-batches of at most `size` samples.
    pub fn split(&self, size: usize) -> Vec<Batch> {
        let n = self.len();
        (0..n)
            .step_by(size.max(1))
            .map(|start| {
                let len = size.min(n - start);
                Batch {
                    x: self.x.batch_slice(start, len),
                    y: self.y.batch_slice(start, len),
                    labels: self.labels.batch_slice(start, len),
                    provenance: self.provenance[start..start + len].to_vec(),
                }
            })
            .collect()
    }
}

/// Which network a log row belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    D,
    G,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossLogRow {
    pub step: u64,
    pub epoch: usize,
    pub phase: Phase,
    pub lr_g: f64,
    pub lr_d: f64,
    pub losses: LossBreakdown,
}

pub const LOSS_LOG_HEADER: &str =
    "step,epoch,phase,lr_g,lr_d,mae,perc,mask,adv,fm,seg_d,seg_g,total";

impl LossLogRow {
    pub fn csv_row(&self) -> String {
        let mut s = format!(
            "{},{},{:?},{},{}",
            self.step, self.epoch, self.phase, self.lr_g, self.lr_d
        );
        for t in self.losses.terms() {
            s.push(',');
            if let Some(v) = t {
                s.push_str(&v.to_string());
            }
        }
        s.push_str(&format!(",{}", self.losses.total));
        s
    }
}

/// Models, optimizers and counters of a training run. Sample randomness is
/// a pure function of `(seed, case, epoch)`, so the seed and the epoch
/// counter are the whole random state.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub weights: LossWeights,
    pub gen_cfg: GeneratorConfig,
    pub disc_cfg: DiscriminatorConfig,
    pub aug: AugmentConfig,
    pub generator: Generator<f32>,
    pub discriminator: PatchDiscriminator<f32>,
    pub opt_g: Adam<f32>,
    pub opt_d: Adam<f32>,
    backbone: RandomBackbone<f32>,
    /// Next epoch to run.
    pub epoch: usize,
    pub global_step: u64,
    pub log: Vec<LossLogRow>,
}

/// Where a run writes its artifacts, and how many augmentation threads it
/// may use.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub checkpoint_dir: Option<PathBuf>,
    pub loss_log: Option<PathBuf>,
    pub num_workers: usize,
    /// Stop after this many epochs in total, as if interrupted.
    pub stop_after_epoch: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub epochs_run: usize,
    pub global_step: u64,
    /// Mean per-term values of the last epoch, D and G objectives.
    pub last_epoch_d: LossBreakdown,
    pub last_epoch_g: LossBreakdown,
    pub checkpoints: Vec<PathBuf>,
}

fn mean_breakdown(rows: &[(f64, LossBreakdown)], w: &LossWeights) -> Result<LossBreakdown> {
    let total_w: f64 = rows.iter().map(|(k, _)| k).sum();
    let mut acc = [None; 7];
    for (k, b) in rows {
        for (slot, t) in acc.iter_mut().zip(b.terms()) {
            if let Some(v) = t {
                *slot = Some(slot.unwrap_or(0.0) + k / total_w * v);
            }
        }
    }
    total_loss(acc, w)
}

impl Trainer {
    /// Fresh models from `cfg.seed`. The training seed also drives
    /// augmentation.
    pub fn new(
        cfg: TrainConfig,
        gen_cfg: GeneratorConfig,
        disc_cfg: DiscriminatorConfig,
        mut aug: AugmentConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        aug.validate()?;
        if cfg.task.uses_seg() && !disc_cfg.seg_head {
            return Err(Error::Config(
                "discriminator.seg_head: the cbct2ct task needs the segmentation head".into(),
            ));
        }
        aug.rng_seed = cfg.seed;
        let generator = Generator::new(&gen_cfg, cfg.seed)?;
        let discriminator = PatchDiscriminator::new(&disc_cfg, cfg.seed ^ 0xd15c)?;
        Ok(Self {
            weights: cfg.loss_weights(),
            opt_g: Adam::new(cfg.optimizer_g.adam_config()),
            opt_d: Adam::new(cfg.optimizer_d.adam_config()),
            backbone: RandomBackbone::new(PERCEPTUAL_SEED),
            cfg,
            gen_cfg,
            disc_cfg,
            aug,
            generator,
            discriminator,
            epoch: 0,
            global_step: 0,
            log: Vec::new(),
        })
    }

    /// Learning rates `(lr_g, lr_d)` for `epoch`.
    pub fn learning_rates(&self, epoch: usize) -> Result<(f64, f64)> {
        let (w, t) = (self.cfg.warmup(), self.cfg.total_epochs);
        Ok((
            lr_at(epoch, self.cfg.lr_g, w, t)?,
            lr_at(epoch, self.cfg.lr_d, w, t)?,
        ))
    }

    fn micro_batches(&self, batch: &Batch) -> Vec<(f64, Batch)> {
        let size = self.cfg.batch_size_effective / self.cfg.grad_accum_steps;
        let n = batch.len() as f64;
        batch
            .split(size)
            .into_iter()
            .map(|b| (b.len() as f64 / n, b))
            .collect()
    }

    fn check_finite(&self, phase: &'static str, b: &LossBreakdown, batch: &Batch) -> Result<()> {
        if b.is_finite() {
            return Ok(());
        }
        Err(Error::Numeric(Box::new(NumericAbort {
            step: self.global_step,
            phase,
            breakdown: *b,
            provenance: batch.provenance.clone(),
        })))
    }

    fn seg_logits<'a>(&self, out: &'a DiscriminatorOutput<f32>) -> Result<&'a Var<f32>> {
        out.seg_logits
            .as_ref()
            .ok_or_else(|| Error::Config("discriminator returned no segmentation logits".into()))
    }

    /// One discriminator update on `batch`; the generator only runs forward.
    pub fn discriminator_step(&mut self, batch: &Batch) -> Result<LossBreakdown> {
        let (_, lr_d) = self.learning_rates(self.epoch)?;
        self.discriminator.set_frozen(false);
        let b = self
            .discriminator_grads(batch)
            .inspect_err(|_| self.discriminator.zero_grad())?;
        self.opt_d.step(&self.discriminator.params(), lr_d);
        Ok(b)
    }

    fn discriminator_grads(&self, batch: &Batch) -> Result<LossBreakdown> {
        let w = self.weights;
        let seg = self.cfg.task.uses_seg();
        let d = &self.discriminator;
        let mut parts = Vec::new();
        for (k, mb) in self.micro_batches(batch) {
            let x = Var::constant(mb.x.clone());
            let y = Var::constant(mb.y.clone());
            let fake = no_grad(|| self.generator.forward(&x))?.detach();
            let real = if seg {
                d.segpatchgan_forward(&x, &y)?
            } else {
                d.patchgan_forward(&x, &y)?
            };
            let fake_out = d.patchgan_forward(&x, &fake)?;
            let adv = adversarial_loss_d(self.cfg.gan_mode, &real.score_map, &fake_out.score_map);
            let seg_d = if seg {
                Some(dice_ce_loss(self.seg_logits(&real)?, &mb.labels)?)
            } else {
                None
            };
            let terms = [
                None,
                None,
                None,
                Some(adv.item() as f64),
                None,
                seg_d.as_ref().map(|v| v.item() as f64),
                None,
            ];
            let b = total_loss(terms, &w)?;
            self.check_finite("discriminator", &b, &mb)?;
            let mut objective = vec![(w.adv, &adv)];
            if let Some(s) = &seg_d {
                objective.push((w.seg_d, s));
            }
            let grads = weighted_sum(&objective).scale(k as f32).backward();
            d.accumulate_grads(&grads);
            parts.push((k, b));
        }
        mean_breakdown(&parts, &w)
    }

    /// One generator update on `batch` with the discriminator frozen.
    pub fn generator_step(&mut self, batch: &Batch) -> Result<LossBreakdown> {
        self.discriminator.set_frozen(true);
        let result = self.generator_grads(batch);
        self.discriminator.set_frozen(false);
        let b = result.inspect_err(|_| self.generator.zero_grad())?;
        let (lr_g, _) = self.learning_rates(self.epoch)?;
        self.opt_g.step(&self.generator.params(), lr_g);
        Ok(b)
    }

    fn generator_grads(&self, batch: &Batch) -> Result<LossBreakdown> {
        let w = self.weights;
        let seg = self.cfg.task.uses_seg();
        let (g, d) = (&self.generator, &self.discriminator);
        let mut parts = Vec::new();
        for (k, mb) in self.micro_batches(batch) {
            let x = Var::constant(mb.x.clone());
            let y = Var::constant(mb.y.clone());
            let pred = g.forward(&x)?;
            let mae = mae_loss(&pred, &y)?;
            let perc = perceptual_loss(&pred, &y, &self.backbone)?;
            let mask = masked_mae_loss(&pred, &y, &mb.labels)?.value;
            let fake_out = if seg {
                d.segpatchgan_forward(&x, &pred)?
            } else {
                d.patchgan_forward(&x, &pred)?
            };
            let real_out = no_grad(|| d.patchgan_forward(&x, &y))?;
            let adv = adversarial_loss_g(self.cfg.gan_mode, &fake_out.score_map);
            let fm = feature_matching_loss(&real_out.features, &fake_out.features)?;
            let seg_g = if seg {
                Some(dice_ce_loss(self.seg_logits(&fake_out)?, &mb.labels)?)
            } else {
                None
            };
            let item = |v: &Var<f32>| Some(v.item() as f64);
            let terms = [
                item(&mae),
                item(&perc),
                item(&mask),
                item(&adv),
                item(&fm),
                None,
                seg_g.as_ref().and_then(item),
            ];
            let b = total_loss(terms, &w)?;
            self.check_finite("generator", &b, &mb)?;
            let mut objective = vec![
                (w.mae, &mae),
                (w.perc, &perc),
                (w.mask, &mask),
                (w.adv, &adv),
                (w.fm, &fm),
            ];
            if let Some(s) = &seg_g {
                objective.push((w.seg_g, s));
            }
            let grads = weighted_sum(&objective).scale(k as f32).backward();
            g.accumulate_grads(&grads);
            parts.push((k, b));
        }
        mean_breakdown(&parts, &w)
    }

    /// Trains on the manifest's training cases until `total_epochs` (or
    /// `opts.stop_after_epoch`). Cases must already be preprocessed.
    pub fn run(
        &mut self,
        cases: &[CasePair],
        manifest: &SplitManifest,
        opts: &RunOptions,
    ) -> Result<TrainSummary> {
        let train: Vec<&CasePair> = manifest
            .train_ids
            .iter()
            .map(|id| {
                cases.iter().find(|c| &c.case_id == id).ok_or_else(|| {
                    Error::Split(format!("training case {id} is not in the dataset"))
                })
            })
            .collect::<Result<_>>()?;
        if train.is_empty() {
            return Err(Error::Split("dataset empty: no training cases".into()));
        }
        let mut log_file = match &opts.loss_log {
            Some(p) => Some(open_loss_log(p)?),
            None => None,
        };
        let end = opts
            .stop_after_epoch
            .unwrap_or(self.cfg.total_epochs)
            .min(self.cfg.total_epochs);
        let mut summary = TrainSummary {
            epochs_run: 0,
            global_step: self.global_step,
            last_epoch_d: LossBreakdown::default(),
            last_epoch_g: LossBreakdown::default(),
            checkpoints: Vec::new(),
        };
        while self.epoch < end {
            let epoch = self.epoch;
            let (lr_g, lr_d) = self.learning_rates(epoch)?;
            let mut order = train.clone();
            order.shuffle(&mut sample_rng(self.cfg.seed, "epoch-order", epoch as u64));
            let patches = augment_batch(&order, &self.aug, epoch as u64, opts.num_workers.max(1))?;
            let (mut d_parts, mut g_parts) = (Vec::new(), Vec::new());
            for chunk in patches.chunks(self.cfg.batch_size_effective) {
                let batch = Batch::from_samples(chunk)?;
                let mut d_loss = LossBreakdown::default();
                for _ in 0..self.cfg.n_critic {
                    d_loss = self.discriminator_step(&batch)?;
                }
                let g_loss = self.generator_step(&batch)?;
                self.global_step += 1;
                for (phase, losses) in [(Phase::D, d_loss), (Phase::G, g_loss)] {
                    let row = LossLogRow {
                        step: self.global_step,
                        epoch,
                        phase,
                        lr_g,
                        lr_d,
                        losses,
                    };
                    if let (Some(f), Some(p)) = (log_file.as_mut(), opts.loss_log.as_ref()) {
                        writeln!(f, "{}", row.csv_row()).map_err(|e| Error::io(p, e))?;
                    }
                    self.log.push(row);
                }
                let k = batch.len() as f64;
                d_parts.push((k, d_loss));
                g_parts.push((k, g_loss));
            }
            self.epoch += 1;
            summary.epochs_run += 1;
            summary.last_epoch_d = mean_breakdown(&d_parts, &self.weights)?;
            summary.last_epoch_g = mean_breakdown(&g_parts, &self.weights)?;
            let every = self.cfg.checkpoint_every;
            let due = (every > 0 && self.epoch % every == 0) || self.epoch == self.cfg.total_epochs;
            if let (true, Some(dir)) = (due, &opts.checkpoint_dir) {
                let path = dir.join(format!("epoch_{:05}.safetensors", self.epoch));
                save_checkpoint(self, &path)?;
                summary.checkpoints.push(path);
            }
        }
        summary.global_step = self.global_step;
        Ok(summary)
    }
}

fn open_loss_log(path: &Path) -> Result<fs::File> {
    let fresh = !path.exists();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    if fresh {
        writeln!(f, "{LOSS_LOG_HEADER}").map_err(|e| Error::io(path, e))?;
    }
    Ok(f)
}

/// A case before and after preprocessing, with the record that undoes it.
#[derive(Clone, Debug)]
pub struct PreparedCase {
    pub raw: CasePair,
    pub prepared: CasePair,
    pub record: PreprocessRecord,
}

/// Full-volume synthesis and HU metrics for each case.
pub fn evaluate_generator(
    generator: &Generator<f32>,
    task: Task,
    cases: &[PreparedCase],
    inference: &InferenceConfig,
    metrics: &MetricConfig,
) -> Result<Vec<MetricReport>> {
    let net = TaskGenerator {
        net: generator,
        task,
    };
    cases
        .iter()
        .map(|c| {
            let sct = synthesize_volume(&net, &c.prepared.input, &c.record, inference, Some(task))?;
            evaluate_case(&sct, &c.raw, metrics)
        })
        .collect()
}

/// Names of the loss terms present in a breakdown.
pub fn present_terms(b: &LossBreakdown) -> Vec<&'static str> {
    TERM_NAMES
        .iter()
        .zip(b.terms())
        .filter(|(_, t)| t.is_some())
        .map(|(n, _)| *n)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::augment_case;
    use crate::preprocess::{preprocess_case, NormalizationSpec};
    use crate::seg_mask_provider::{make_phantom, PhantomSpec};
    use crate::volume_store::Modality;

    fn setup(task: Task) -> (Trainer, Batch) {
        let mut cfg = TrainConfig::for_task(task);
        cfg.batch_size_effective = 2;
        cfg.total_epochs = 10;
        cfg.seed = 5;
        let mut disc = DiscriminatorConfig::standard(task.uses_seg());
        disc.base_channels = 4;
        disc.max_channels = 32;
        let aug = AugmentConfig::new([16, 32, 32], None, 0);
        let t = Trainer::new(cfg, GeneratorConfig::tiny(4), disc, aug).unwrap();
        let modality = if task.uses_seg() {
            Modality::Cbct
        } else {
            Modality::Mri
        };
        let hu_max = if task.uses_seg() { 1500.0 } else { 1000.0 };
        let samples: Vec<PatchSample> = ["a", "b"]
            .iter()
            .map(|id| {
                let raw = make_phantom(id, &PhantomSpec::new([20, 40, 40], modality, 1)).unwrap();
                let (c, _) = preprocess_case(
                    &raw,
                    &NormalizationSpec::percentile(99.5),
                    &NormalizationSpec::linear(-1024.0, hu_max),
                    0,
                )
                .unwrap();
                augment_case(&c, &t.aug, 0).unwrap()
            })
            .collect();
        (t, Batch::from_samples(&samples).unwrap())
    }

    fn snapshot(m: &dyn Module<f32>) -> Vec<Vec<u32>> {
        m.params()
            .iter()
            .map(|p| p.value().data().iter().map(|v| v.to_bits()).collect())
            .collect()
    }

    #[test]
    fn schedule_landmarks() {
        for base in [5e-4, 1e-3] {
            assert_eq!(lr_at(10, base, 10, 110).unwrap(), base);
            assert!(lr_at(110, base, 10, 110).unwrap().abs() < 1e-18);
            assert!((lr_at(60, base, 10, 110).unwrap() - base / 2.0).abs() < 1e-15);
            assert!((lr_at(0, base, 10, 110).unwrap() - base / 10.0).abs() < 1e-18);
        }
        assert!(lr_at(0, 1e-3, 10, 10).is_err());
        assert_eq!(lr_at(0, 1e-3, 0, 10).unwrap(), 1e-3);
    }

    #[test]
    fn warmup_defaults_to_five_percent() {
        let c = TrainConfig::for_task(Task::Mri2ct);
        assert_eq!(c.warmup(), 150);
        assert_eq!(TrainConfig::for_task(Task::Cbct2ct).warmup(), 50);
        assert_eq!(c.optimizer_g.kind, OptimizerKind::AdamW);
        assert_eq!(
            TrainConfig::for_task(Task::Cbct2ct).optimizer_d.kind,
            OptimizerKind::Adam
        );
    }

    #[test]
    fn accumulation_must_divide_batch() {
        let mut c = TrainConfig::for_task(Task::Mri2ct);
        c.grad_accum_steps = 3;
        assert!(c.validate().is_err());
        c.grad_accum_steps = 4;
        assert!(c.validate().is_ok());
    }

    #[test]
    fn steps_are_isolated() {
        for task in [Task::Mri2ct, Task::Cbct2ct] {
            let (mut t, batch) = setup(task);
            let g0 = snapshot(&t.generator);
            let d0 = snapshot(&t.discriminator);
            let bd = t.discriminator_step(&batch).unwrap();
            assert_eq!(snapshot(&t.generator), g0);
            let d1 = snapshot(&t.discriminator);
            assert_ne!(d1, d0);
            let bg = t.generator_step(&batch).unwrap();
            assert_eq!(snapshot(&t.discriminator), d1);
            assert_ne!(snapshot(&t.generator), g0);
            assert!(t.discriminator.params().iter().all(|p| !p.is_frozen()));
            if task == Task::Mri2ct {
                assert_eq!(present_terms(&bd), vec!["adv"]);
                assert_eq!(present_terms(&bg), vec!["mae", "perc", "mask", "adv", "fm"]);
            } else {
                assert_eq!(present_terms(&bd), vec!["adv", "seg_d"]);
                assert_eq!(
                    present_terms(&bg),
                    vec!["mae", "perc", "mask", "adv", "fm", "seg_g"]
                );
            }
            let w = t.weights.as_array();
            let sum: f64 = bg
                .terms()
                .iter()
                .zip(w)
                .filter_map(|(v, l)| v.map(|v| l * v))
                .sum();
            assert!((sum - bg.total).abs() <= 1e-12 * sum.abs().max(1.0));
        }
    }

    #[test]
    fn accumulation_matches_full_batch() {
        // The masked term normalizes by the labelled-voxel count of whatever
        // it sees, so it only splits exactly across micro-batches when that
        // count is balanced; leave it out here.
        let (mut a, batch) = setup(Task::Mri2ct);
        let (mut b, _) = setup(Task::Mri2ct);
        for t in [&mut a, &mut b] {
            t.weights.mask = 0.0;
        }
        b.cfg.grad_accum_steps = 2;
        let la = a.generator_step(&batch).unwrap();
        let lb = b.generator_step(&batch).unwrap();
        for (x, y) in [
            (la.mae, lb.mae),
            (la.perc, lb.perc),
            (la.adv, lb.adv),
            (la.fm, lb.fm),
        ] {
            let (x, y) = (x.unwrap(), y.unwrap());
            assert!((x - y).abs() < 1e-4 * x.abs().max(1e-3), "{x} {y}");
        }
        for (pa, pb) in a.generator.params().iter().zip(b.generator.params()) {
            let (va, vb) = (pa.value(), pb.value());
            for (x, y) in va.data().iter().zip(vb.data()) {
                assert!((x - y).abs() < 1e-5, "{}", pa.name());
            }
        }
    }

    #[test]
    fn nan_input_aborts_with_diagnostics() {
        let (mut t, mut batch) = setup(Task::Mri2ct);
        batch.x.data_mut()[0] = f32::NAN;
        let before = snapshot(&t.discriminator);
        match t.discriminator_step(&batch) {
            Err(Error::Numeric(a)) => {
                assert_eq!(a.phase, "discriminator");
                assert_eq!(a.provenance.len(), 2);
            }
            other => panic!("expected numeric abort, got {other:?}"),
        }
        assert_eq!(snapshot(&t.discriminator), before);
    }

    #[test]
    fn cbct_task_requires_seg_head() {
        let cfg = TrainConfig::for_task(Task::Cbct2ct);
        let aug = AugmentConfig::new([16, 32, 32], None, 0);
        let err = Trainer::new(
            cfg,
            GeneratorConfig::tiny(4),
            DiscriminatorConfig::standard(false),
            aug,
        );
        assert!(err.is_err());
    }
}
