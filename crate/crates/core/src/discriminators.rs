//! Conditional PatchGAN and its segmentation-head variant.
//!
//! The encoder is a ladder of stride-2 `4x4x4` convolutions followed by one
//! stride-1 `4x4x4` convolution and a `1x1x1` score head. With the seg head
//! enabled, a decoder climbs back to full resolution through the encoder
//! features and predicts `K + 1` class logits.
//!
//! Freezing (`Module::set_frozen`) turns the weights into graph constants:
//! gradients still flow through the network to its inputs, but the weights
//! collect none and optimizers skip them.

use ganext_tensor::{
    concat_channels, Conv3d, ConvSpec, InstanceNorm3d, Module, Param, Scalar, Var,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorConfig {
    #[serde(default = "two")]
    pub in_channels: usize,
    pub base_channels: usize,
    pub max_channels: usize,
    #[serde(default = "four")]
    pub n_stride2_layers: usize,
    #[serde(default = "four")]
    pub kernel: usize,
    #[serde(default = "slope")]
    pub leaky_slope: f64,
    #[serde(default)]
    pub seg_head: bool,
    #[serde(default = "four")]
    pub num_seg_classes: usize,
}

fn two() -> usize {
    2
}

fn four() -> usize {
    4
}

fn slope() -> f64 {
    0.2
}

impl DiscriminatorConfig {
    /// Channel ladder 32 -> 256 over the stride-2 layers, then 512.
    pub fn standard(seg_head: bool) -> Self {
        Self {
            in_channels: 2,
            base_channels: 32,
            max_channels: 512,
            n_stride2_layers: 4,
            kernel: 4,
            leaky_slope: 0.2,
            seg_head,
            num_seg_classes: 4,
        }
    }

    /// Output channels of the stride-2 layers, then of the stride-1 layer.
    pub fn ladder(&self) -> Vec<usize> {
        (0..=self.n_stride2_layers)
            .map(|i| (self.base_channels << i).min(self.max_channels))
            .collect()
    }

    pub fn divisor(&self) -> usize {
        1 << self.n_stride2_layers
    }

    pub fn validate(&self) -> Result<()> {
        let bad =
            |field: &str, msg: String| Err(Error::Config(format!("discriminator.{field}: {msg}")));
        if self.base_channels == 0 || self.max_channels < self.base_channels {
            return bad(
                "base_channels",
                "need 1 <= base_channels <= max_channels".into(),
            );
        }
        if self.n_stride2_layers == 0 {
            return bad("n_stride2_layers", "must be at least 1".into());
        }
        if self.kernel != 4 {
            return bad(
                "kernel",
                format!("only 4 is supported, got {}", self.kernel),
            );
        }
        if !(self.leaky_slope >= 0.0) {
            return bad(
                "leaky_slope",
                format!("must be >= 0, got {}", self.leaky_slope),
            );
        }
        if self.seg_head && self.num_seg_classes == 0 {
            return bad("num_seg_classes", "must be >= 1".into());
        }
        if self.in_channels == 0 {
            return bad("in_channels", "must be >= 1".into());
        }
        Ok(())
    }
}

pub struct DiscriminatorOutput<T: Scalar> {
    pub score_map: Var<T>,
    /// Activations of every encoder convolution, in computation order.
    pub features: Vec<Var<T>>,
    pub seg_logits: Option<Var<T>>,
}

/// Strided 4^3 convolution, optional instance norm, LeakyReLU.
pub struct EncoderLayer<T: Scalar> {
    pub conv: Conv3d<T>,
    pub norm: Option<InstanceNorm3d<T>>,
}

impl<T: Scalar> EncoderLayer<T> {
    pub fn forward(&self, x: &Var<T>, slope: T) -> Var<T> {
        let h = self.conv.forward(x);
        match &self.norm {
            Some(n) => n.forward(&h),
            None => h,
        }
        .leaky_relu(slope)
    }
}

/// Nearest 2x upsampling, concatenation with a skip, 3^3 convolution,
/// instance norm, LeakyReLU.
pub struct DecoderStage<T: Scalar> {
    pub conv: Conv3d<T>,
    pub norm: InstanceNorm3d<T>,
}

impl<T: Scalar> DecoderStage<T> {
    pub fn forward(&self, coarse: &Var<T>, skip: &Var<T>, slope: T) -> Var<T> {
        let s = concat_channels(&[&coarse.upsample_nearest2(), skip]);
        self.norm.forward(&self.conv.forward(&s)).leaky_relu(slope)
    }
}

pub struct PatchDiscriminator<T: Scalar> {
    pub config: DiscriminatorConfig,
    pub encoder: Vec<EncoderLayer<T>>,
    pub head: Conv3d<T>,
    /// Segmentation decoder, coarse to fine.
    pub decoder: Vec<DecoderStage<T>>,
    pub seg_out: Option<Conv3d<T>>,
}

impl<T: Scalar> PatchDiscriminator<T> {
    pub fn new(cfg: &DiscriminatorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ladder = cfg.ladder();
        let k = [cfg.kernel; 3];
        let mut encoder = Vec::new();
        let mut cin = cfg.in_channels;
        for (i, &cout) in ladder.iter().enumerate() {
            let name = format!("d.conv{}", i + 1);
            let spec = if i < cfg.n_stride2_layers {
                ConvSpec::new(2, 1)
            } else {
                ConvSpec::asymmetric(1, 1, 2)
            };
            encoder.push(EncoderLayer {
                conv: Conv3d::new(&name, cin, cout, k, spec, true, &mut rng),
                norm: (i > 0).then(|| InstanceNorm3d::new(&format!("{name}.norm"), cout, false)),
            });
            cin = cout;
        }
        let head = Conv3d::pointwise("d.head", cin, 1, &mut rng);
        let (mut decoder, mut seg_out) = (Vec::new(), None);
        if cfg.seg_head {
            // Skip sources from coarse to fine: stride-2 outputs n-1 .. 1,
            // then the raw input.
            let mut c = cin;
            for j in (0..cfg.n_stride2_layers).rev() {
                let (skip_c, out_c) = if j > 0 {
                    (ladder[j - 1], ladder[j - 1])
                } else {
                    (cfg.in_channels, cfg.base_channels)
                };
                let name = format!("d.seg.up{}", cfg.n_stride2_layers - j);
                decoder.push(DecoderStage {
                    conv: Conv3d::new(
                        &name,
                        c + skip_c,
                        out_c,
                        [3; 3],
                        ConvSpec::new(1, 1),
                        true,
                        &mut rng,
                    ),
                    norm: InstanceNorm3d::new(&format!("{name}.norm"), out_c, false),
                });
                c = out_c;
            }
            seg_out = Some(Conv3d::pointwise(
                "d.seg.out",
                c,
                cfg.num_seg_classes + 1,
                &mut rng,
            ));
        }
        Ok(Self {
            config: cfg.clone(),
            encoder,
            head,
            decoder,
            seg_out,
        })
    }

    fn check(&self, cond: &Var<T>, image: &Var<T>) -> Result<()> {
        if cond.shape() != image.shape() || cond.shape().len() != 5 {
            return Err(Error::Shape(format!(
                "discriminator: condition {:?} and image {:?} must share a 5D shape",
                cond.shape(),
                image.shape()
            )));
        }
        if cond.shape()[1] + image.shape()[1] != self.config.in_channels {
            return Err(Error::Shape(format!(
                "discriminator expects {} stacked channels",
                self.config.in_channels
            )));
        }
        let div = self.config.divisor();
        if cond.shape()[2..].iter().any(|n| n % div != 0 || *n == 0) {
            return Err(Error::Shape(format!(
                "spatial dims must be divisible by {div}, got {:?}",
                &cond.shape()[2..]
            )));
        }
        Ok(())
    }

    fn run(&self, cond: &Var<T>, image: &Var<T>, seg: bool) -> Result<DiscriminatorOutput<T>> {
        self.check(cond, image)?;
        let slope = T::lit(self.config.leaky_slope);
        let x = concat_channels(&[cond, image]);
        let mut h = x.clone();
        let mut features = Vec::with_capacity(self.encoder.len());
        for layer in &self.encoder {
            h = layer.forward(&h, slope);
            features.push(h.clone());
        }
        let score_map = self.head.forward(&h);
        let seg_logits = if seg {
            let n = self.config.n_stride2_layers;
            let mut s = features[n].clone();
            for (stage, j) in self.decoder.iter().zip((0..n).rev()) {
                let skip = if j > 0 { &features[j - 1] } else { &x };
                s = stage.forward(&s, skip, slope);
            }
            Some(self.seg_out.as_ref().expect("seg head built").forward(&s))
        } else {
            None
        };
        Ok(DiscriminatorOutput {
            score_map,
            features,
            seg_logits,
        })
    }

    /// Adversarial path only.
    pub fn patchgan_forward(
        &self,
        cond: &Var<T>,
        image: &Var<T>,
    ) -> Result<DiscriminatorOutput<T>> {
        self.run(cond, image, false)
    }

    /// Adversarial path plus segmentation logits at input resolution.
    pub fn segpatchgan_forward(
        &self,
        cond: &Var<T>,
        image: &Var<T>,
    ) -> Result<DiscriminatorOutput<T>> {
        if !self.config.seg_head {
            return Err(Error::Config(
                "discriminator.seg_head: segmentation head is disabled".into(),
            ));
        }
        self.run(cond, image, true)
    }

    pub fn has_seg_head(&self) -> bool {
        self.config.seg_head
    }
}

impl<T: Scalar> Module<T> for PatchDiscriminator<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut p: Vec<&Param<T>> = self.encoder.iter().flat_map(|l| l.conv.params()).collect();
        p.extend(self.head.params());
        for s in &self.decoder {
            p.extend(s.conv.params());
        }
        if let Some(o) = &self.seg_out {
            p.extend(o.params());
        }
        p
    }
}
