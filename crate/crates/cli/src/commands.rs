//! The six subcommands. Each resolves its configuration, records it in a
//! fresh run directory and writes its artifacts there.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ganext_core::error::Error as CoreError;
use ganext_core::inference_engine::{synthesize_volume, InferenceConfig, TaskGenerator};
use ganext_core::losses::Task;
use ganext_core::metrics::{
    aggregate, evaluate_case, format_table, MetricReport, REPORT_CSV_HEADER,
};
use ganext_core::preprocess::{preprocess_case, PreprocessRecord};
use ganext_core::seg_mask_provider::{labels_for, make_phantom_dataset, PhantomSpec};
use ganext_core::trainer::{load_checkpoint, load_generator, RunOptions, Trainer};
use ganext_core::volume_store::{
    list_cases, load_case, load_volume_as, make_split, make_stratified_split, read_manifest,
    write_case, write_manifest, write_volume, CasePair, Modality, SplitManifest,
};

use crate::config::{self, Resolved, RunConfig};
use crate::run_dir::RunDir;
use crate::{CliError, Command, Common, Result, NUM_WORKERS_ENV};

/// Preprocessing record stored inside each prepared case directory.
pub const RECORD_FILE: &str = "preprocess.json";
pub const CASES_DIR: &str = "cases";
pub const MANIFEST_FILE: &str = "split.toml";
pub const LOSS_LOG_FILE: &str = "loss_log.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const SCT_DIR: &str = "sct";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.md";
pub const ABORT_FILE: &str = "numeric_abort.json";

pub fn dispatch(command: Command, common: &Common) -> Result<()> {
    let cfg = match &common.config {
        Some(p) => config::load(p)?,
        None => RunConfig::default(),
    };
    let ctx = Context::new(command, common, &cfg)?;
    match command {
        Command::Split => split(&ctx),
        Command::Preprocess => preprocess(&ctx),
        Command::MakePhantoms => make_phantoms(&ctx),
        Command::Train => train(&ctx),
        Command::Infer => infer(&ctx, &cfg),
        Command::Evaluate => evaluate(&ctx),
    }
}

/// Flags merged over the file, plus the resolved configuration.
struct Context {
    resolved: Resolved,
    out: PathBuf,
    force: bool,
    checkpoint: Option<PathBuf>,
    workers: usize,
}

impl Context {
    fn new(command: Command, common: &Common, cfg: &RunConfig) -> Result<Self> {
        let task = common.task.or(cfg.task);
        let seed = common.seed.or(cfg.seed).unwrap_or(0);
        let mut resolved = Resolved::new(command.name(), cfg, task, seed, common.deterministic);
        let paths = &mut resolved.paths;
        for (slot, flag) in [
            (&mut paths.data, &common.data),
            (&mut paths.manifest, &common.manifest),
            (&mut paths.pred, &common.pred),
            (&mut paths.checkpoint, &common.checkpoint),
        ] {
            if flag.is_some() {
                slot.clone_from(flag);
            }
        }
        let out = common
            .out
            .clone()
            .ok_or_else(|| CliError::Config("--out is required".into()))?;
        let workers = if common.deterministic {
            1
        } else {
            match std::env::var(NUM_WORKERS_ENV) {
                Ok(v) => v
                    .trim()
                    .parse::<usize>()
                    .ok()
                    .filter(|&n| n > 0)
                    .ok_or_else(|| {
                        CliError::Config(format!(
                            "{NUM_WORKERS_ENV}: expected a positive integer, got {v:?}"
                        ))
                    })?,
                Err(_) => 1,
            }
        };
        Ok(Self {
            checkpoint: resolved.paths.checkpoint.clone(),
            resolved,
            out,
            force: common.force,
            workers,
        })
    }

    fn task(&self) -> Result<Task> {
        self.resolved.task.ok_or_else(|| {
            CliError::Config(format!("{}: --task is required", self.resolved.command))
        })
    }

    fn data(&self) -> Result<&Path> {
        self.resolved.paths.data.as_deref().ok_or_else(|| {
            CliError::Config(format!("{}: --data is required", self.resolved.command))
        })
    }

    fn open_run_dir(&self) -> Result<RunDir> {
        let dir = RunDir::create(&self.out, self.force)?;
        dir.record_config(&self.resolved)?;
        Ok(dir)
    }
}

/// Accepts either a case root or a run directory holding `cases/`.
fn case_root(p: &Path) -> PathBuf {
    let nested = p.join(CASES_DIR);
    if nested.is_dir() {
        nested
    } else {
        p.to_path_buf()
    }
}

fn load_cases(root: &Path) -> Result<Vec<CasePair>> {
    let root = case_root(root);
    let cases = list_cases(&root)?
        .into_iter()
        .map(load_case)
        .collect::<ganext_core::Result<Vec<_>>>()?;
    if cases.is_empty() {
        return Err(CliError::Data(format!("no cases under {}", root.display())));
    }
    Ok(cases)
}

fn split(ctx: &Context) -> Result<()> {
    let cases = load_cases(ctx.data()?)?;
    let manifest = split_cases(ctx, &cases)?;
    let dir = ctx.open_run_dir()?;
    write_manifest(&manifest, dir.path(MANIFEST_FILE))?;
    dir.log(&format!(
        "split: {} training, {} validation cases",
        manifest.train_ids.len(),
        manifest.val_ids.len()
    ))
}

fn make_phantoms(ctx: &Context) -> Result<()> {
    let p = &ctx.resolved.phantoms;
    let modality = match ctx.resolved.task {
        Some(Task::Cbct2ct) => Modality::Cbct,
        _ => Modality::Mri,
    };
    let mut spec = PhantomSpec::new(p.shape, modality, ctx.resolved.seed);
    spec.classes = p.classes;
    let cases = make_phantom_dataset(p.count, "phantom", &spec)?;
    let dir = ctx.open_run_dir()?;
    for c in &cases {
        write_case(c, dir.path(CASES_DIR))?;
    }
    dir.log(&format!(
        "make-phantoms: {} {} cases of shape {:?}",
        cases.len(),
        modality.tag(),
        p.shape
    ))
}

fn preprocess(ctx: &Context) -> Result<()> {
    let cases = load_cases(ctx.data()?)?;
    let pp = &ctx.resolved.preprocess;
    let ct = pp.ct.ok_or_else(|| {
        CliError::Config("preprocess: set --task or preprocess.ct to fix the HU range".into())
    })?;
    if ctx.resolved.task.is_some_and(|t| t.uses_seg()) && pp.labels.is_none() {
        if let Some(c) = cases.iter().find(|c| c.seg_labels.is_none()) {
            return Err(CliError::Data(format!(
                "case {} has no anatomical labels and preprocess.labels is not set",
                c.case_id
            )));
        }
    }
    let dir = ctx.open_run_dir()?;
    for case in &cases {
        let mut case = case.clone();
        if let Some(src) = &pp.labels {
            case.seg_labels = Some(labels_for(&case, src)?);
        }
        let (prepared, record) = preprocess_case(&case, &pp.input, &ct, pp.margin_voxels)?;
        let case_dir = write_case(&prepared, dir.path(CASES_DIR))?;
        record.save(case_dir.join(RECORD_FILE))?;
        dir.log(&format!(
            "preprocess: {} {:?} -> {:?}",
            case.case_id,
            record.full_shape,
            prepared.shape()
        ))?;
    }
    Ok(())
}

fn manifest_for(ctx: &Context, cases: &[CasePair]) -> Result<SplitManifest> {
    match &ctx.resolved.paths.manifest {
        Some(p) => Ok(read_manifest(p)?),
        None => split_cases(ctx, cases),
    }
}

fn split_cases(ctx: &Context, cases: &[CasePair]) -> Result<SplitManifest> {
    let s = &ctx.resolved.split;
    let seed = ctx.resolved.seed;
    Ok(if s.stratify {
        let tagged: Vec<_> = cases
            .iter()
            .map(|c| (c.case_id.clone(), c.region))
            .collect();
        make_stratified_split(&tagged, s.val_fraction, seed)?
    } else {
        let ids: Vec<_> = cases.iter().map(|c| c.case_id.clone()).collect();
        make_split(&ids, s.val_fraction, seed)?
    })
}

fn train(ctx: &Context) -> Result<()> {
    let cases = load_cases(ctx.data()?)?;
    let manifest = manifest_for(ctx, &cases)?;
    let mut resolved = ctx.resolved.clone();
    let mut trainer = match &ctx.checkpoint {
        Some(p) => {
            let t = load_checkpoint(p)?;
            if let Some(task) = resolved.task.filter(|&task| task != t.cfg.task) {
                return Err(CliError::Config(format!(
                    "checkpoint was trained for {:?}, not {task:?}",
                    t.cfg.task
                )));
            }
            resolved.task = Some(t.cfg.task);
            resolved.train = Some(t.cfg.clone());
            resolved.generator = Some(t.gen_cfg.clone());
            resolved.discriminator = Some(t.disc_cfg.clone());
            resolved.augment = Some(t.aug.clone());
            t
        }
        None => {
            ctx.task()?;
            let missing = || CliError::Config("train: incomplete configuration".into());
            Trainer::new(
                resolved.train.clone().ok_or_else(missing)?,
                resolved.generator.clone().ok_or_else(missing)?,
                resolved.discriminator.clone().ok_or_else(missing)?,
                resolved.augment.clone().ok_or_else(missing)?,
            )?
        }
    };
    let dir = RunDir::create(&ctx.out, ctx.force)?;
    dir.record_config(&resolved)?;
    write_manifest(&manifest, dir.path(MANIFEST_FILE))?;
    let w = &trainer.weights;
    dir.log(&format!(
        "train: task {:?}, λ mae={} perc={} mask={} adv={} fm={} seg_d={} seg_g={}",
        trainer.cfg.task, w.mae, w.perc, w.mask, w.adv, w.fm, w.seg_d, w.seg_g
    ))?;
    dir.log(&format!(
        "train: {} training cases, epochs {}..{}, {} worker(s)",
        manifest.train_ids.len(),
        trainer.epoch,
        trainer.cfg.total_epochs,
        ctx.workers
    ))?;
    let opts = RunOptions {
        checkpoint_dir: Some(dir.path(CHECKPOINT_DIR)),
        loss_log: Some(dir.path(LOSS_LOG_FILE)),
        num_workers: ctx.workers,
        stop_after_epoch: None,
    };
    match trainer.run(&cases, &manifest, &opts) {
        Ok(s) => dir.log(&format!(
            "train: done at epoch {}, step {}; last epoch G total {:.6}, D total {:.6}",
            trainer.epoch, s.global_step, s.last_epoch_g.total, s.last_epoch_d.total
        )),
        Err(CoreError::Numeric(abort)) => {
            let report = serde_json::json!({
                "step": abort.step,
                "phase": abort.phase,
                "breakdown": format!("{:?}", abort.breakdown),
                "batch": abort.provenance,
            });
            dir.write(ABORT_FILE, format!("{report:#}\n").as_bytes())?;
            let e = CoreError::Numeric(abort);
            dir.log(&format!("train: aborted: {e}"))?;
            Err(e.into())
        }
        Err(e) => Err(e.into()),
    }
}

fn infer(ctx: &Context, cfg: &RunConfig) -> Result<()> {
    let ckpt = ctx
        .checkpoint
        .as_ref()
        .ok_or_else(|| CliError::Config("infer: --checkpoint is required".into()))?;
    let (generator, meta) = load_generator(ckpt)?;
    if let Some(task) = ctx.resolved.task.filter(|&t| t != meta.task) {
        return Err(CliError::Config(format!(
            "checkpoint was trained for {:?}, not {task:?}",
            meta.task
        )));
    }
    let mut resolved = ctx.resolved.clone();
    resolved.task = Some(meta.task);
    resolved.generator = Some(meta.generator.clone());
    let inference = cfg
        .inference
        .clone()
        .unwrap_or_else(|| InferenceConfig::new(meta.augment.patch_size));
    inference.validate()?;
    resolved.inference = Some(inference.clone());

    let mut cases = load_cases(ctx.data()?)?;
    if let Some(p) = &resolved.paths.manifest {
        let m = read_manifest(p)?;
        cases.retain(|c| m.val_ids.contains(&c.case_id));
    }
    let root = case_root(ctx.data()?);
    let dir = RunDir::create(&ctx.out, ctx.force)?;
    dir.record_config(&resolved)?;
    let net = TaskGenerator {
        net: &generator,
        task: meta.task,
    };
    for case in &cases {
        let record = PreprocessRecord::load(root.join(&case.case_id).join(RECORD_FILE))?;
        let sct = synthesize_volume(&net, &case.input, &record, &inference, Some(meta.task))?;
        write_volume(
            &sct,
            dir.path(SCT_DIR).join(format!("{}.nii", case.case_id)),
        )?;
        dir.log(&format!("infer: {} -> {:?}", case.case_id, sct.shape()))?;
    }
    Ok(())
}

/// Predicted volumes keyed by case id.
fn predictions(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(|e| CliError::io(dir, e))? {
        let p = entry.map_err(|e| CliError::io(dir, e))?.path();
        let Some(name) = p.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        let id = name
            .strip_suffix(".nii.gz")
            .or_else(|| name.strip_suffix(".nii"));
        if let Some(id) = id {
            out.insert(id.to_string(), p.clone());
        }
    }
    Ok(out)
}

fn evaluate(ctx: &Context) -> Result<()> {
    let pred_dir = ctx
        .resolved
        .paths
        .pred
        .as_ref()
        .ok_or_else(|| CliError::Config("evaluate: --pred is required".into()))?;
    let preds = predictions(pred_dir)?;
    let cases = load_cases(ctx.data()?)?;
    let scored: Vec<&CasePair> = cases
        .iter()
        .filter(|c| preds.contains_key(&c.case_id))
        .collect();
    if scored.is_empty() {
        return Err(CliError::Data(format!(
            "no predictions in {} match a case",
            pred_dir.display()
        )));
    }
    let dir = ctx.open_run_dir()?;
    let mut reports: Vec<MetricReport> = Vec::new();
    let mut csv = format!("{REPORT_CSV_HEADER}\n");
    for case in scored {
        let pred = load_volume_as(&preds[&case.case_id], Modality::Sct)?;
        let r = evaluate_case(&pred, case, &ctx.resolved.metrics)?;
        csv.push_str(&r.csv_row());
        csv.push('\n');
        reports.push(r);
    }
    dir.write(METRICS_FILE, csv.as_bytes())?;
    let table = format_table(&[("sCT", aggregate(&reports)?)]);
    dir.write(SUMMARY_FILE, table.as_bytes())?;
    dir.log(&format!("evaluate: {} cases\n{table}", reports.len()))
}
