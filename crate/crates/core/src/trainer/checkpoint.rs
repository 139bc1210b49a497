//! Checkpoints as safetensors files: generator and discriminator weights,
//! optimizer moments, and the resolved configuration in the header
//! metadata.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use ganext_tensor::{Module, Moments, Tensor};
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use super::{TrainConfig, Trainer};
use crate::augment::AugmentConfig;
use crate::discriminators::DiscriminatorConfig;
use crate::error::{Error, Result};
use crate::generator_genext::{Generator, GeneratorConfig};
use crate::losses::Task;
use crate::volume_store::write_atomic;

pub const CHECKPOINT_FORMAT: &str = "ganext-checkpoint-1";

/// Header metadata of a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: String,
    pub task: Task,
    pub epoch: usize,
    pub global_step: u64,
    pub opt_g_step: u64,
    pub opt_d_step: u64,
    pub train: TrainConfig,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub augment: AugmentConfig,
}

fn err(e: impl std::fmt::Display) -> Error {
    Error::Checkpoint(e.to_string())
}

fn to_bytes(t: &Tensor<f32>) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn from_view(name: &str, v: &TensorView<'_>) -> Result<Tensor<f32>> {
    if v.dtype() != Dtype::F32 {
        return Err(err(format!("{name}: expected F32, found {:?}", v.dtype())));
    }
    let data = v
        .data()
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Tensor::new(v.shape(), data).map_err(err)
}

pub fn save_checkpoint(t: &Trainer, path: impl AsRef<Path>) -> Result<()> {
    let meta = CheckpointMeta {
        format: CHECKPOINT_FORMAT.into(),
        task: t.cfg.task,
        epoch: t.epoch,
        global_step: t.global_step,
        opt_g_step: t.opt_g.step_count(),
        opt_d_step: t.opt_d.step_count(),
        train: t.cfg.clone(),
        generator: t.gen_cfg.clone(),
        discriminator: t.disc_cfg.clone(),
        augment: t.aug.clone(),
    };
    let mut entries: Vec<(String, Tensor<f32>)> = Vec::new();
    for (prefix, m) in [
        ("g", &t.generator as &dyn Module<f32>),
        ("d", &t.discriminator),
    ] {
        entries.extend(
            m.state_dict()
                .into_iter()
                .map(|(n, v)| (format!("{prefix}/{n}"), v)),
        );
    }
    for (prefix, opt) in [("opt_g", &t.opt_g), ("opt_d", &t.opt_d)] {
        for (n, mo) in opt.state() {
            entries.push((format!("{prefix}/m/{n}"), mo.m.clone()));
            entries.push((format!("{prefix}/v/{n}"), mo.v.clone()));
        }
    }
    let bytes: Vec<(String, Vec<u8>, Vec<usize>)> = entries
        .iter()
        .map(|(n, v)| (n.clone(), to_bytes(v), v.shape().to_vec()))
        .collect();
    let views = bytes
        .iter()
        .map(|(n, b, s)| TensorView::new(Dtype::F32, s.clone(), b).map(|v| (n.clone(), v)))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(err)?;
    let mut info = HashMap::new();
    info.insert(
        "ganext".to_string(),
        serde_json::to_string(&meta).map_err(err)?,
    );
    let buf = safetensors::serialize(views, &Some(info)).map_err(err)?;
    write_atomic(path.as_ref(), &buf)
}

struct Loaded {
    meta: CheckpointMeta,
    tensors: BTreeMap<String, Tensor<f32>>,
}

fn read(path: &Path) -> Result<Loaded> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, header) = SafeTensors::read_metadata(&buf).map_err(err)?;
    let meta_json = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get("ganext"))
        .ok_or_else(|| err(format!("{}: missing ganext metadata", path.display())))?;
    let meta: CheckpointMeta = serde_json::from_str(meta_json).map_err(err)?;
    if meta.format != CHECKPOINT_FORMAT {
        return Err(err(format!("unsupported format {:?}", meta.format)));
    }
    let st = SafeTensors::deserialize(&buf).map_err(err)?;
    let mut tensors = BTreeMap::new();
    for (name, view) in st.tensors() {
        let t = from_view(&name, &view)?;
        tensors.insert(name, t);
    }
    Ok(Loaded { meta, tensors })
}

fn with_prefix(
    tensors: &BTreeMap<String, Tensor<f32>>,
    prefix: &str,
) -> Vec<(String, Tensor<f32>)> {
    tensors
        .iter()
        .filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
        .collect()
}

fn moments(
    tensors: &BTreeMap<String, Tensor<f32>>,
    prefix: &str,
) -> Result<BTreeMap<String, Moments<f32>>> {
    let m = with_prefix(tensors, &format!("{prefix}/m/"));
    let v: BTreeMap<String, Tensor<f32>> = with_prefix(tensors, &format!("{prefix}/v/"))
        .into_iter()
        .collect();
    m.into_iter()
        .map(|(n, m)| {
            let v = v
                .get(&n)
                .cloned()
                .ok_or_else(|| err(format!("{prefix}: second moment of {n} missing")))?;
            Ok((n, Moments { m, v }))
        })
        .collect()
}

/// Rebuilds a trainer, including optimizer state and counters, so training
/// resumes where the checkpoint was written.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Trainer> {
    let Loaded { meta, tensors } = read(path.as_ref())?;
    let mut t = Trainer::new(meta.train, meta.generator, meta.discriminator, meta.augment)?;
    t.generator.load_state_dict(&with_prefix(&tensors, "g/"))?;
    t.discriminator
        .load_state_dict(&with_prefix(&tensors, "d/"))?;
    t.opt_g
        .restore(meta.opt_g_step, moments(&tensors, "opt_g")?);
    t.opt_d
        .restore(meta.opt_d_step, moments(&tensors, "opt_d")?);
    t.epoch = meta.epoch;
    t.global_step = meta.global_step;
    Ok(t)
}

/// Generator weights only, for inference.
pub fn load_generator(path: impl AsRef<Path>) -> Result<(Generator<f32>, CheckpointMeta)> {
    let Loaded { meta, tensors } = read(path.as_ref())?;
    let g = Generator::new(&meta.generator, 0)?;
    g.load_state_dict(&with_prefix(&tensors, "g/"))?;
    Ok((g, meta))
}
