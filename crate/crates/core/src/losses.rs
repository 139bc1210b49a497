//! Loss terms and their weighted composition.
//!
//! Every term maps graph values to a shape-`[1]` [`Var`], so the same code
//! drives training (`f32`) and finite-difference checks (`f64`).

use ganext_tensor::{Conv3d, ConvSpec, Module, Scalar, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Mri2ct,
    Cbct2ct,
}

impl Task {
    pub fn uses_seg(self) -> bool {
        self == Task::Cbct2ct
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mri2ct" => Ok(Task::Mri2ct),
            "cbct2ct" => Ok(Task::Cbct2ct),
            other => Err(Error::Config(format!(
                "task: unknown value {other:?} (expected mri2ct or cbct2ct)"
            ))),
        }
    }
}

/// Term coefficients, `λ1..λ7` in the order mae, perc, mask, adv, fm,
/// seg_d, seg_g.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub mae: f64,
    pub perc: f64,
    pub mask: f64,
    pub adv: f64,
    pub fm: f64,
    pub seg_d: f64,
    pub seg_g: f64,
}

impl LossWeights {
    pub fn for_task(task: Task) -> Self {
        match task {
            Task::Mri2ct => Self {
                mae: 10.0,
                perc: 1.0,
                mask: 50.0,
                adv: 10.0,
                fm: 10.0,
                seg_d: 0.0,
                seg_g: 0.0,
            },
            Task::Cbct2ct => Self {
                mae: 10.0,
                perc: 1.0,
                mask: 10.0,
                adv: 10.0,
                fm: 10.0,
                seg_d: 0.5,
                seg_g: 0.5,
            },
        }
    }

    pub fn as_array(&self) -> [f64; 7] {
        [
            self.mae, self.perc, self.mask, self.adv, self.fm, self.seg_d, self.seg_g,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in TERM_NAMES.iter().zip(self.as_array()) {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::Config(format!(
                    "loss.weights.{name}: negative or non-finite weight {w}"
                )));
            }
        }
        Ok(())
    }
}

pub const TERM_NAMES: [&str; 7] = ["mae", "perc", "mask", "adv", "fm", "seg_d", "seg_g"];

/// Per-term values of one objective. `None` marks a term that is not part of
/// the objective (disabled or belonging to the other network).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mae: Option<f64>,
    pub perc: Option<f64>,
    pub mask: Option<f64>,
    pub adv: Option<f64>,
    pub fm: Option<f64>,
    pub seg_d: Option<f64>,
    pub seg_g: Option<f64>,
    pub total: f64,
}

impl LossBreakdown {
    pub fn terms(&self) -> [Option<f64>; 7] {
        [
            self.mae, self.perc, self.mask, self.adv, self.fm, self.seg_d, self.seg_g,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.terms().iter().flatten().all(|v| v.is_finite())
    }
}

/// Weighted sum over the present terms, accumulated left to right in `f64`.
pub fn total_loss(terms: [Option<f64>; 7], w: &LossWeights) -> Result<LossBreakdown> {
    w.validate()?;
    let total = terms
        .iter()
        .zip(w.as_array())
        .filter_map(|(t, lam)| t.map(|t| lam * t))
        .fold(0.0, |acc, x| acc + x);
    let [mae, perc, mask, adv, fm, seg_d, seg_g] = terms;
    Ok(LossBreakdown {
        mae,
        perc,
        mask,
        adv,
        fm,
        seg_d,
        seg_g,
        total,
    })
}

/// `Σ λ·term` on the graph; zero-weight terms are skipped.
pub fn weighted_sum<T: Scalar>(terms: &[(f64, &Var<T>)]) -> Var<T> {
    let mut acc: Option<Var<T>> = None;
    for &(w, v) in terms {
        if w == 0.0 {
            continue;
        }
        let t = v.scale(T::lit(w));
        acc = Some(match acc {
            Some(a) => a.add(&t),
            None => t,
        });
    }
    acc.unwrap_or_else(|| Var::constant(Tensor::zeros(&[1])))
}

fn check_same(a: &[usize], b: &[usize], what: &str) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::Loss(format!(
            "{what}: shape mismatch {a:?} vs {b:?}"
        )))
    }
}

pub fn mae_loss<T: Scalar>(pred: &Var<T>, target: &Var<T>) -> Result<Var<T>> {
    check_same(pred.shape(), target.shape(), "mae_loss")?;
    Ok(pred.sub(target).abs().mean())
}

pub struct MaskedLoss<T: Scalar> {
    pub value: Var<T>,
    /// No labelled voxel in the patch; `value` is then a constant zero.
    pub empty_mask: bool,
}

/// Mean absolute error over voxels whose label is positive.
pub fn masked_mae_loss<T: Scalar>(
    pred: &Var<T>,
    target: &Var<T>,
    labels: &Tensor<T>,
) -> Result<MaskedLoss<T>> {
    check_same(pred.shape(), target.shape(), "masked_mae_loss")?;
    check_same(pred.shape(), labels.shape(), "masked_mae_loss labels")?;
    let mask = labels.map(|l| if l > T::zero() { T::one() } else { T::zero() });
    let count = mask.sum();
    if count == T::zero() {
        return Ok(MaskedLoss {
            value: Var::constant(Tensor::zeros(&[1])),
            empty_mask: true,
        });
    }
    let value = pred
        .sub(target)
        .abs()
        .mul(&Var::constant(mask))
        .sum()
        .scale(T::one() / count);
    Ok(MaskedLoss {
        value,
        empty_mask: false,
    })
}

/// Feature extractor for the perceptual distance. Inputs are
/// `(B, 3, D, H, W)` stacks of 2D slices; extractors must treat every depth
/// slice independently (kernels of depth 1).
pub trait FeatureExtractor<T: Scalar> {
    fn features(&self, x: &Var<T>) -> Vec<Var<T>>;
}

/// Fixed-seed random two-stage convolutional extractor: 3x3 conv to 8
/// channels with ReLU, then a stride-2 3x3 conv to 16 channels with ReLU.
/// Parameters are frozen, so they never pick up gradients.
pub struct RandomBackbone<T: Scalar> {
    pub layers: Vec<Conv3d<T>>,
}

impl<T: Scalar> RandomBackbone<T> {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = |stride| ConvSpec {
            stride: [1, stride, stride],
            pad_lo: [0, 1, 1],
            pad_hi: [0, 1, 1],
            groups: 1,
        };
        let layers = vec![
            Conv3d::new("perc.conv1", 3, 8, [1, 3, 3], spec(1), true, &mut rng),
            Conv3d::new("perc.conv2", 8, 16, [1, 3, 3], spec(2), true, &mut rng),
        ];
        let net = Self { layers };
        net.set_frozen(true);
        net
    }
}

impl<T: Scalar> Module<T> for RandomBackbone<T> {
    fn params(&self) -> Vec<&ganext_tensor::Param<T>> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }
}

impl<T: Scalar> FeatureExtractor<T> for RandomBackbone<T> {
    fn features(&self, x: &Var<T>) -> Vec<Var<T>> {
        let mut h = x.clone();
        self.layers
            .iter()
            .map(|l| {
                h = l.forward(&h).relu();
                h.clone()
            })
            .collect()
    }
}

pub const LPIPS_EPS: f64 = 1e-10;

/// LPIPS-style distance between single-channel volumes, averaged over depth
/// slices: for each layer, channel-normalized features are compared by the
/// channel sum of squared differences, averaged spatially, then summed over
/// layers with uniform weights.
pub fn perceptual_loss<T: Scalar>(
    pred: &Var<T>,
    target: &Var<T>,
    backbone: &dyn FeatureExtractor<T>,
) -> Result<Var<T>> {
    check_same(pred.shape(), target.shape(), "perceptual_loss")?;
    if pred.shape().len() != 5 || pred.shape()[1] != 1 {
        return Err(Error::Loss(format!(
            "perceptual_loss expects (B,1,D,H,W), got {:?}",
            pred.shape()
        )));
    }
    let fa = backbone.features(&pred.repeat_channels(3));
    let fb = backbone.features(&target.repeat_channels(3));
    if fa.is_empty() || fa.len() != fb.len() {
        return Err(Error::Loss(
            "perceptual backbone returned no features".into(),
        ));
    }
    let eps = T::lit(LPIPS_EPS);
    let per_layer: Vec<Var<T>> = fa
        .iter()
        .zip(&fb)
        .map(|(a, b)| {
            a.normalize_channels(eps)
                .sub(&b.normalize_channels(eps))
                .square()
                .sum_channels()
                .mean()
        })
        .collect();
    let refs: Vec<(f64, &Var<T>)> = per_layer.iter().map(|v| (1.0, v)).collect();
    Ok(weighted_sum(&refs))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GanMode {
    #[default]
    Bce,
    /// Least-squares objective.
    Lsgan,
}

fn bce_with_logits<T: Scalar>(s: &Var<T>, real: bool) -> Var<T> {
    // -ln σ(s) = softplus(-s); -ln(1 - σ(s)) = softplus(s)
    if real {
        s.neg().softplus().mean()
    } else {
        s.softplus().mean()
    }
}

fn lsgan<T: Scalar>(s: &Var<T>, real: bool) -> Var<T> {
    if real {
        s.add_scalar(-T::one()).square().mean()
    } else {
        s.square().mean()
    }
}

fn gan_term<T: Scalar>(mode: GanMode, s: &Var<T>, real: bool) -> Var<T> {
    match mode {
        GanMode::Bce => bce_with_logits(s, real),
        GanMode::Lsgan => lsgan(s, real),
    }
}

/// Discriminator loss: mean of the real-branch and fake-branch terms.
pub fn adversarial_loss_d<T: Scalar>(
    mode: GanMode,
    score_real: &Var<T>,
    score_fake: &Var<T>,
) -> Var<T> {
    gan_term(mode, score_real, true)
        .add(&gan_term(mode, score_fake, false))
        .scale(T::lit(0.5))
}

pub fn adversarial_loss_g<T: Scalar>(mode: GanMode, score_fake: &Var<T>) -> Var<T> {
    gan_term(mode, score_fake, true)
}

/// Mean over layers of the mean absolute feature difference. Real features
/// are detached.
pub fn feature_matching_loss<T: Scalar>(real: &[Var<T>], fake: &[Var<T>]) -> Result<Var<T>> {
    if real.len() != fake.len() || real.is_empty() {
        return Err(Error::Loss(format!(
            "feature_matching_loss: {} real vs {} fake layers",
            real.len(),
            fake.len()
        )));
    }
    let mut terms = Vec::with_capacity(real.len());
    for (r, f) in real.iter().zip(fake) {
        check_same(r.shape(), f.shape(), "feature_matching_loss")?;
        terms.push(f.sub(&r.detach()).abs().mean());
    }
    let w = 1.0 / terms.len() as f64;
    let refs: Vec<(f64, &Var<T>)> = terms.iter().map(|v| (w, v)).collect();
    Ok(weighted_sum(&refs))
}

pub const DICE_SMOOTH: f64 = 1e-5;

/// One-hot encoding of integer labels `(B, 1, ...)` into `(B, classes, ...)`.
pub fn one_hot<T: Scalar>(labels: &Tensor<T>, classes: usize) -> Result<Tensor<T>> {
    let shape = labels.shape();
    if shape.len() < 2 || shape[1] != 1 {
        return Err(Error::Loss(format!(
            "labels must have one channel, got {shape:?}"
        )));
    }
    let (b, inner) = (shape[0], shape[2..].iter().product::<usize>());
    let mut out = vec![T::zero(); b * classes * inner];
    for (i, &l) in labels.data().iter().enumerate() {
        let k = l.to_f64().unwrap();
        if k < 0.0 || k.fract() != 0.0 || k as usize >= classes {
            return Err(Error::Loss(format!(
                "label {k} out of range [0, {}]",
                classes - 1
            )));
        }
        let (bi, s) = (i / inner, i % inner);
        out[(bi * classes + k as usize) * inner + s] = T::one();
    }
    let mut oshape = shape.to_vec();
    oshape[1] = classes;
    Ok(Tensor::from_vec(&oshape, out))
}

/// `0.5 * soft Dice loss + 0.5 * cross-entropy`. Dice is taken per class over
/// the whole batch and averaged over the classes present in `labels`.
pub fn dice_ce_loss<T: Scalar>(logits: &Var<T>, labels: &Tensor<T>) -> Result<Var<T>> {
    let ls = logits.shape();
    if ls.len() != 5
        || labels.shape().len() != 5
        || labels.shape()[0] != ls[0]
        || labels.shape()[2..] != ls[2..]
    {
        return Err(Error::Loss(format!(
            "dice_ce_loss: logits {ls:?} and labels {:?} disagree",
            labels.shape()
        )));
    }
    let classes = ls[1];
    let y = one_hot(labels, classes)?;
    let target_count = Var::constant(y.clone()).channel_sum();
    let present: Vec<T> = target_count
        .value()
        .data()
        .iter()
        .map(|&c| if c > T::zero() { T::one() } else { T::zero() })
        .collect();
    let n_present = present.iter().filter(|&&p| p > T::zero()).count().max(1);
    let yv = Var::constant(y);
    let p = logits.softmax_channels();
    let inter = p.mul(&yv).channel_sum();
    let denom = p
        .channel_sum()
        .add(&target_count)
        .add_scalar(T::lit(DICE_SMOOTH));
    let dice = inter
        .scale(T::lit(2.0))
        .add_scalar(T::lit(DICE_SMOOTH))
        .div(&denom);
    let mean_dice = dice
        .mul(&Var::constant(Tensor::from_vec(&[classes], present)))
        .sum()
        .scale(T::lit(1.0 / n_present as f64));
    let dice_loss = mean_dice.neg().add_scalar(T::one());
    let voxels = (labels.numel()) as f64;
    let ce = logits
        .log_softmax_channels()
        .mul(&yv)
        .sum()
        .scale(T::lit(-1.0 / voxels));
    Ok(dice_loss.scale(T::lit(0.5)).add(&ce.scale(T::lit(0.5))))
}
