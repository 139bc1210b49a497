//! Phantom-dataset smoke training shared by the trainer tests and the
//! acceptance harness.

use std::fs;
use std::path::Path;

use ganext_core::augment::AugmentConfig;
use ganext_core::discriminators::DiscriminatorConfig;
use ganext_core::generator_genext::GeneratorConfig;
use ganext_core::inference_engine::InferenceConfig;
use ganext_core::losses::Task;
use ganext_core::metrics::{MetricConfig, MetricReport};
use ganext_core::preprocess::{preprocess_case, NormalizationSpec};
use ganext_core::seg_mask_provider::{make_phantom_dataset, PhantomSpec};
use ganext_core::trainer::{
    evaluate_generator, PreparedCase, RunOptions, TrainConfig, TrainSummary, Trainer,
};
use ganext_core::volume_store::{make_split, Modality, SplitManifest};
use ganext_core::Result;

pub const PHANTOM_SHAPE: [usize; 3] = [24, 48, 48];
pub const PATCH: [usize; 3] = [16, 32, 32];
pub const CASES: usize = 15;
pub const VAL_FRACTION: f64 = 0.2;
pub const BATCH: usize = 3;

pub fn ct_range(task: Task) -> (f64, f64) {
    match task {
        Task::Mri2ct => (-1024.0, 1000.0),
        Task::Cbct2ct => (-1024.0, 1500.0),
    }
}

pub fn modality(task: Task) -> Modality {
    match task {
        Task::Mri2ct => Modality::Mri,
        Task::Cbct2ct => Modality::Cbct,
    }
}

/// `n` preprocessed phantoms and a split of them.
pub fn dataset(task: Task, n: usize) -> Result<(Vec<PreparedCase>, SplitManifest)> {
    let raw = make_phantom_dataset(
        n,
        "ph",
        &PhantomSpec::new(PHANTOM_SHAPE, modality(task), 11),
    )?;
    let (lo, hi) = ct_range(task);
    let prepared = raw
        .iter()
        .map(|c| {
            let (p, record) = preprocess_case(
                c,
                &NormalizationSpec::percentile(99.5),
                &NormalizationSpec::linear(lo, hi),
                0,
            )?;
            Ok(PreparedCase {
                raw: c.clone(),
                prepared: p,
                record,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let ids: Vec<String> = raw.iter().map(|c| c.case_id.clone()).collect();
    Ok((prepared, make_split(&ids, VAL_FRACTION, 1)?))
}

/// Reduced discriminator: the standard ladder starts at 32 channels.
pub fn discriminator(task: Task) -> DiscriminatorConfig {
    DiscriminatorConfig {
        base_channels: 8,
        max_channels: 64,
        ..DiscriminatorConfig::standard(task.uses_seg())
    }
}

pub fn trainer(task: Task, epochs: usize, seed: u64) -> Result<Trainer> {
    let mut cfg = TrainConfig::for_task(task);
    cfg.batch_size_effective = BATCH;
    cfg.total_epochs = epochs;
    cfg.seed = seed;
    let zoom = (task == Task::Mri2ct).then_some((0.8, 1.3));
    Trainer::new(
        cfg,
        GeneratorConfig::tiny(8),
        discriminator(task),
        AugmentConfig::new(PATCH, zoom, seed),
    )
}

pub fn validation(prepared: &[PreparedCase], manifest: &SplitManifest) -> Vec<PreparedCase> {
    prepared
        .iter()
        .filter(|p| manifest.val_ids.contains(&p.raw.case_id))
        .cloned()
        .collect()
}

pub fn evaluate(t: &Trainer, val: &[PreparedCase]) -> Result<Vec<MetricReport>> {
    evaluate_generator(
        &t.generator,
        t.cfg.task,
        val,
        &InferenceConfig::new(PATCH),
        &MetricConfig::default(),
    )
}

pub struct SmokeRun {
    pub before: Vec<MetricReport>,
    pub after: Vec<MetricReport>,
    pub summary: TrainSummary,
    pub loss_log: String,
    pub seconds: f64,
}

/// Trains from scratch on the training split and evaluates the validation
/// split before and after. The loss log is written under `dir`.
pub fn run(task: Task, epochs: usize, seed: u64, workers: usize, dir: &Path) -> Result<SmokeRun> {
    let (prepared, manifest) = dataset(task, CASES)?;
    let val = validation(&prepared, &manifest);
    let mut t = trainer(task, epochs, seed)?;
    let before = evaluate(&t, &val)?;
    let cases: Vec<_> = prepared.iter().map(|p| p.prepared.clone()).collect();
    let log = dir.join("loss_log.csv");
    let start = std::time::Instant::now();
    let summary = t.run(
        &cases,
        &manifest,
        &RunOptions {
            loss_log: Some(log.clone()),
            num_workers: workers,
            ..Default::default()
        },
    )?;
    let seconds = start.elapsed().as_secs_f64();
    let after = evaluate(&t, &val)?;
    let loss_log = fs::read_to_string(&log).map_err(|e| ganext_core::Error::io(&log, e))?;
    Ok(SmokeRun {
        before,
        after,
        summary,
        loss_log,
        seconds,
    })
}

pub fn mean_mae(reports: &[MetricReport]) -> f64 {
    reports.iter().map(|r| r.mae_hu).sum::<f64>() / reports.len() as f64
}
