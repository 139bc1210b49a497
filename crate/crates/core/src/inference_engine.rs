//! Full-volume synthesis by sliding a fixed-size window over the cropped,
//! normalized input and averaging overlapping predictions.

use ganext_tensor::{no_grad, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::augment::pad_value;
use crate::error::{Error, Result};
use crate::generator_genext::{Generator, SPATIAL_DIVISOR};
use crate::losses::Task;
use crate::preprocess::{denormalize_ct, uncrop, PreprocessRecord};
use crate::volume_store::{Modality, Volume};

/// HU written outside the crop box.
pub const AIR_HU: f32 = -1024.0;

#[derive(Clone, Debug, PartialEq)]
pub struct SlidingWindowPlan {
    pub window: [usize; 3],
    pub overlap: f64,
    /// Extent before padding.
    pub volume_shape: [usize; 3],
    pub padded_shape: [usize; 3],
    /// Padding added on the low side of each axis.
    pub pad_lo: [usize; 3],
    pub origins: Vec<[usize; 3]>,
    /// Number of windows covering each voxel of the padded grid.
    pub fold_counts: Vec<u32>,
}

fn axis_origins(extent: usize, window: usize, step: usize) -> Vec<usize> {
    let last = extent - window;
    let mut o: Vec<usize> = (0..=last).step_by(step).collect();
    if *o.last().unwrap() != last {
        o.push(last);
    }
    o
}

/// Window origins for a volume of `volume_shape`. Axes shorter than the
/// window are padded symmetrically first.
pub fn plan_windows(
    volume_shape: [usize; 3],
    window: [usize; 3],
    overlap: f64,
) -> Result<SlidingWindowPlan> {
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::Config(format!("overlap {overlap} outside [0, 1)")));
    }
    if window.contains(&0) || volume_shape.contains(&0) {
        return Err(Error::Config(format!(
            "window {window:?} and volume {volume_shape:?} must be nonempty"
        )));
    }
    let padded_shape = [0, 1, 2].map(|a| volume_shape[a].max(window[a]));
    let pad_lo = [0, 1, 2].map(|a| (padded_shape[a] - volume_shape[a]) / 2);
    let per_axis: Vec<Vec<usize>> = (0..3)
        .map(|a| {
            let step = ((window[a] as f64 * (1.0 - overlap)).round() as usize).max(1);
            axis_origins(padded_shape[a], window[a], step)
        })
        .collect();
    let mut origins = Vec::new();
    for &d in &per_axis[0] {
        for &h in &per_axis[1] {
            for &w in &per_axis[2] {
                origins.push([d, h, w]);
            }
        }
    }
    let mut fold_counts = vec![0u32; padded_shape.iter().product()];
    for o in &origins {
        for_window(o, &window, &padded_shape, |i, _| fold_counts[i] += 1);
    }
    Ok(SlidingWindowPlan {
        window,
        overlap,
        volume_shape,
        padded_shape,
        pad_lo,
        origins,
        fold_counts,
    })
}

/// Calls `f(grid_index, window_index)` for every voxel of a window.
fn for_window(
    origin: &[usize; 3],
    window: &[usize; 3],
    grid: &[usize; 3],
    mut f: impl FnMut(usize, usize),
) {
    let mut k = 0;
    for d in 0..window[0] {
        for h in 0..window[1] {
            let row = ((origin[0] + d) * grid[1] + origin[1] + h) * grid[2] + origin[2];
            for w in 0..window[2] {
                f(row + w, k);
                k += 1;
            }
        }
    }
}

/// Maps a batch of single-channel patches `(B, 1, D, H, W)` to predictions
/// of the same shape.
pub trait PatchTranslator {
    fn translate(&self, batch: &Tensor<f32>) -> Result<Tensor<f32>>;

    /// Task the network was trained for, when known.
    fn task(&self) -> Option<Task> {
        None
    }
}

impl PatchTranslator for Generator<f32> {
    fn translate(&self, batch: &Tensor<f32>) -> Result<Tensor<f32>> {
        no_grad(|| {
            self.forward(&Var::constant(batch.clone()))
                .map(|y| y.value().clone())
        })
    }
}

/// A generator tagged with the task it was trained for.
pub struct TaskGenerator<'a> {
    pub net: &'a Generator<f32>,
    pub task: Task,
}

impl PatchTranslator for TaskGenerator<'_> {
    fn translate(&self, batch: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.net.translate(batch)
    }

    fn task(&self) -> Option<Task> {
        Some(self.task)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceConfig {
    pub window: [usize; 3],
    #[serde(default = "default_overlap")]
    pub overlap: f64,
    /// Windows per network call.
    #[serde(default = "default_batch")]
    pub batch_size: usize,
}

fn default_overlap() -> f64 {
    0.8
}

fn default_batch() -> usize {
    1
}

impl InferenceConfig {
    pub fn new(window: [usize; 3]) -> Self {
        Self {
            window,
            overlap: default_overlap(),
            batch_size: default_batch(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self
            .window
            .iter()
            .any(|&n| n == 0 || n % SPATIAL_DIVISOR != 0)
        {
            return Err(Error::Config(format!(
                "window {:?} must be divisible by {SPATIAL_DIVISOR}",
                self.window
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config(
                "inference batch size must be at least 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(Error::Config(format!(
                "overlap {} outside [0, 1)",
                self.overlap
            )));
        }
        Ok(())
    }
}

fn pad(v: &Volume, plan: &SlidingWindowPlan, fill: f32) -> Vec<f32> {
    let (s, p) = (v.shape(), plan.padded_shape);
    let mut out = vec![fill; p.iter().product()];
    for d in 0..s[0] {
        for h in 0..s[1] {
            let dst = ((d + plan.pad_lo[0]) * p[1] + h + plan.pad_lo[1]) * p[2] + plan.pad_lo[2];
            let src = v.index(d, h, 0);
            out[dst..dst + s[2]].copy_from_slice(&v.data()[src..src + s[2]]);
        }
    }
    out
}

/// Runs the network over every window and averages the overlapping outputs.
/// The result lies on the input's grid and stays in network output space.
pub fn fold_predictions(
    net: &dyn PatchTranslator,
    input: &Volume,
    plan: &SlidingWindowPlan,
    batch_size: usize,
) -> Result<Volume> {
    if input.shape() != plan.volume_shape {
        return Err(Error::Shape(format!(
            "plan built for {:?}, input is {:?}",
            plan.volume_shape,
            input.shape()
        )));
    }
    let padded = pad(input, plan, pad_value(input.modality()));
    let p = plan.padded_shape;
    let win: usize = plan.window.iter().product();
    let mut sum = vec![0.0f64; padded.len()];
    for chunk in plan.origins.chunks(batch_size.max(1)) {
        let mut data = Vec::with_capacity(chunk.len() * win);
        for o in chunk {
            for_window(o, &plan.window, &p, |i, _| data.push(padded[i]));
        }
        let shape = [
            chunk.len(),
            1,
            plan.window[0],
            plan.window[1],
            plan.window[2],
        ];
        let out = net.translate(&Tensor::from_vec(&shape, data))?;
        if out.shape() != shape {
            return Err(Error::Shape(format!(
                "network returned {:?} for a {shape:?} batch",
                out.shape()
            )));
        }
        for (b, o) in chunk.iter().enumerate() {
            let pred = &out.data()[b * win..(b + 1) * win];
            for_window(o, &plan.window, &p, |i, k| sum[i] += pred[k] as f64);
        }
    }
    let s = plan.volume_shape;
    let mut data = Vec::with_capacity(s.iter().product());
    for d in 0..s[0] {
        for h in 0..s[1] {
            for w in 0..s[2] {
                let i =
                    ((d + plan.pad_lo[0]) * p[1] + h + plan.pad_lo[1]) * p[2] + w + plan.pad_lo[2];
                data.push((sum[i] / plan.fold_counts[i] as f64) as f32);
            }
        }
    }
    input.with_data(data, Modality::Sct)
}

/// Synthesizes a full-size sCT in HU from a preprocessed (normalized and
/// cropped) input volume.
pub fn synthesize_volume(
    net: &dyn PatchTranslator,
    input: &Volume,
    record: &PreprocessRecord,
    cfg: &InferenceConfig,
    task: Option<Task>,
) -> Result<Volume> {
    cfg.validate()?;
    if let (Some(want), Some(have)) = (task, net.task()) {
        if want != have {
            return Err(Error::Config(format!(
                "network trained for {have:?} cannot serve {want:?}"
            )));
        }
    }
    if input.shape() != record.crop.shape() {
        return Err(Error::Shape(format!(
            "input {:?} does not match crop box extent {:?}",
            input.shape(),
            record.crop.shape()
        )));
    }
    let plan = plan_windows(input.shape(), cfg.window, cfg.overlap)?;
    let folded = fold_predictions(net, input, &plan, cfg.batch_size)?;
    let hu = denormalize_ct(&folded, &record.ct_spec)?;
    let (lo, hi) = record.ct_spec.range()?;
    let fill = (AIR_HU as f64).clamp(lo, hi) as f32;
    let full = uncrop(&hu, &record.crop, record.full_shape, fill)?;
    Volume::new(
        full.into_data(),
        record.full_shape,
        record.full_spacing,
        record.full_origin,
        Modality::Sct,
    )
}
