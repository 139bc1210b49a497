//! The GeNeXt U-shaped generator built from 3D ConvNeXt-style blocks.
//!
//! Parameter names follow `stem`, `enc.stage{i}.block{j}.{dw,norm,pw1,pw2}`,
//! `enc.down{i}.*` (transition into encoder stage `i`), `dec.up{i}.*`
//! (transition into decoder stage `i`), `dec.fuse{i}`,
//! `dec.stage{i}.block{j}.*` and `head`, with stages numbered from 1.

use ganext_tensor::{
    concat_channels, Conv3d, ConvSpec, ConvTranspose3d, InstanceNorm3d, Module, Param, Scalar, Var,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const STAGES: usize = 5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum FinalActivation {
    #[default]
    Tanh,
    Linear,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormKind {
    #[default]
    Instance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    #[serde(default = "one")]
    pub in_channels: usize,
    #[serde(default = "one")]
    pub out_channels: usize,
    pub base_channels: usize,
    pub depths: [usize; STAGES],
    pub expansion_ratios: [usize; STAGES],
    #[serde(default = "three")]
    pub dw_kernel: usize,
    #[serde(default)]
    pub norm: NormKind,
    #[serde(default)]
    pub final_activation: FinalActivation,
}

fn one() -> usize {
    1
}

fn three() -> usize {
    3
}

impl GeneratorConfig {
    /// `C1 = 32`, depths and ratios `{3, 4, 6, 6, 6}`.
    pub fn standard() -> Self {
        Self {
            in_channels: 1,
            out_channels: 1,
            base_channels: 32,
            depths: [3, 4, 6, 6, 6],
            expansion_ratios: [3, 4, 6, 6, 6],
            dw_kernel: 3,
            norm: NormKind::Instance,
            final_activation: FinalActivation::Tanh,
        }
    }

    pub fn tiny(base_channels: usize) -> Self {
        Self {
            base_channels,
            depths: [1; STAGES],
            expansion_ratios: [1; STAGES],
            ..Self::standard()
        }
    }

    pub fn channels(&self, stage: usize) -> usize {
        self.base_channels << stage
    }

    pub fn validate(&self) -> Result<()> {
        let bad =
            |field: &str, msg: String| Err(Error::Config(format!("generator.{field}: {msg}")));
        if self.base_channels == 0 {
            return bad("base_channels", "must be at least 1".into());
        }
        if self.depths.contains(&0) {
            return bad(
                "depths",
                format!("entries must be >= 1, got {:?}", self.depths),
            );
        }
        if self.expansion_ratios.contains(&0) {
            return bad(
                "expansion_ratios",
                format!("entries must be >= 1, got {:?}", self.expansion_ratios),
            );
        }
        if self.dw_kernel % 2 == 0 {
            return bad("dw_kernel", format!("must be odd, got {}", self.dw_kernel));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return bad("in_channels", "channel counts must be >= 1".into());
        }
        Ok(())
    }
}

fn check_channels<T: Scalar>(x: &Var<T>, c: usize, what: &str) -> Result<()> {
    if x.shape().len() != 5 || x.shape()[1] != c {
        return Err(Error::Shape(format!(
            "{what}: expected {c} channels in a 5D tensor, got {:?}",
            x.shape()
        )));
    }
    Ok(())
}

fn depthwise<T: Scalar>(
    name: &str,
    c: usize,
    k: usize,
    stride: usize,
    rng: &mut impl Rng,
) -> Conv3d<T> {
    Conv3d::new(
        name,
        c,
        c,
        [k; 3],
        ConvSpec::new(stride, k / 2).with_groups(c),
        true,
        rng,
    )
}

/// Pointwise expand, GELU, pointwise project.
pub struct ConvFfn<T: Scalar> {
    pub pw1: Conv3d<T>,
    pub pw2: Conv3d<T>,
}

impl<T: Scalar> ConvFfn<T> {
    pub fn new(name: &str, cin: usize, ratio: usize, cout: usize, rng: &mut impl Rng) -> Self {
        Self {
            pw1: Conv3d::pointwise(&format!("{name}.pw1"), cin, ratio * cin, rng),
            pw2: Conv3d::pointwise(&format!("{name}.pw2"), ratio * cin, cout, rng),
        }
    }

    pub fn forward(&self, x: &Var<T>) -> Var<T> {
        self.pw2.forward(&self.pw1.forward(x).gelu())
    }
}

impl<T: Scalar> Module<T> for ConvFfn<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut p = self.pw1.params();
        p.extend(self.pw2.params());
        p
    }
}

/// `x + FFN(IN(DW(x)))`.
pub struct BasicBlock<T: Scalar> {
    pub dw: Conv3d<T>,
    pub norm: InstanceNorm3d<T>,
    pub ffn: ConvFfn<T>,
    pub channels: usize,
}

impl<T: Scalar> BasicBlock<T> {
    pub fn new(name: &str, c: usize, ratio: usize, kernel: usize, rng: &mut impl Rng) -> Self {
        Self {
            dw: depthwise(&format!("{name}.dw"), c, kernel, 1, rng),
            norm: InstanceNorm3d::new(&format!("{name}.norm"), c, true),
            ffn: ConvFfn::new(name, c, ratio, c, rng),
            channels: c,
        }
    }

    pub fn forward(&self, x: &Var<T>) -> Result<Var<T>> {
        check_channels(x, self.channels, "basic block")?;
        Ok(x.add(&self.ffn.forward(&self.norm.forward(&self.dw.forward(x)))))
    }
}

impl<T: Scalar> Module<T> for BasicBlock<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut p = self.dw.params();
        p.extend(self.norm.params());
        p.extend(self.ffn.params());
        p
    }
}

/// Halves the spatial size. Shortcut: 2x average pool then pointwise
/// projection.
pub struct DownBlock<T: Scalar> {
    pub dw: Conv3d<T>,
    pub norm: InstanceNorm3d<T>,
    pub ffn: ConvFfn<T>,
    pub skip: Conv3d<T>,
    pub in_channels: usize,
}

impl<T: Scalar> DownBlock<T> {
    pub fn new(
        name: &str,
        cin: usize,
        cout: usize,
        ratio: usize,
        kernel: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            dw: depthwise(&format!("{name}.dw"), cin, kernel, 2, rng),
            norm: InstanceNorm3d::new(&format!("{name}.norm"), cin, true),
            ffn: ConvFfn::new(name, cin, ratio, cout, rng),
            skip: Conv3d::pointwise(&format!("{name}.skip"), cin, cout, rng),
            in_channels: cin,
        }
    }

    pub fn forward(&self, x: &Var<T>) -> Result<Var<T>> {
        check_channels(x, self.in_channels, "down block")?;
        if x.shape()[2..].iter().any(|n| n % 2 != 0) {
            return Err(Error::Shape(format!("odd spatial dim in {:?}", x.shape())));
        }
        let main = self.ffn.forward(&self.norm.forward(&self.dw.forward(x)));
        Ok(main.add(&self.skip.forward(&x.avg_pool2())))
    }
}

impl<T: Scalar> Module<T> for DownBlock<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut p = self.dw.params();
        p.extend(self.norm.params());
        p.extend(self.ffn.params());
        p.extend(self.skip.params());
        p
    }
}

/// Doubles the spatial size with a depthwise stride-2 transposed
/// convolution. Shortcut: nearest 2x upsampling then pointwise projection.
pub struct UpBlock<T: Scalar> {
    pub up: ConvTranspose3d<T>,
    pub norm: InstanceNorm3d<T>,
    pub ffn: ConvFfn<T>,
    pub skip: Conv3d<T>,
    pub in_channels: usize,
}

impl<T: Scalar> UpBlock<T> {
    pub fn new(
        name: &str,
        cin: usize,
        cout: usize,
        ratio: usize,
        kernel: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            up: ConvTranspose3d::new(
                &format!("{name}.dw"),
                cin,
                cin,
                kernel,
                2,
                kernel / 2,
                1,
                cin,
                rng,
            ),
            norm: InstanceNorm3d::new(&format!("{name}.norm"), cin, true),
            ffn: ConvFfn::new(name, cin, ratio, cout, rng),
            skip: Conv3d::pointwise(&format!("{name}.skip"), cin, cout, rng),
            in_channels: cin,
        }
    }

    pub fn forward(&self, x: &Var<T>) -> Result<Var<T>> {
        check_channels(x, self.in_channels, "up block")?;
        let main = self.ffn.forward(&self.norm.forward(&self.up.forward(x)));
        Ok(main.add(&self.skip.forward(&x.upsample_nearest2())))
    }
}

impl<T: Scalar> Module<T> for UpBlock<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut p = self.up.params();
        p.extend(self.norm.params());
        p.extend(self.ffn.params());
        p.extend(self.skip.params());
        p
    }
}

/// Concatenates encoder and decoder maps, then projects `2C -> C`.
pub struct SkipFuse<T: Scalar> {
    pub proj: Conv3d<T>,
    pub channels: usize,
}

impl<T: Scalar> SkipFuse<T> {
    pub fn new(name: &str, c: usize, rng: &mut impl Rng) -> Self {
        Self {
            proj: Conv3d::pointwise(name, 2 * c, c, rng),
            channels: c,
        }
    }

    pub fn forward(&self, enc: &Var<T>, dec: &Var<T>) -> Result<Var<T>> {
        check_channels(enc, self.channels, "skip fuse (encoder)")?;
        check_channels(dec, self.channels, "skip fuse (decoder)")?;
        if enc.shape() != dec.shape() {
            return Err(Error::Shape(format!(
                "skip fuse: spatial mismatch {:?} vs {:?}",
                enc.shape(),
                dec.shape()
            )));
        }
        Ok(self.proj.forward(&concat_channels(&[enc, dec])))
    }
}

impl<T: Scalar> Module<T> for SkipFuse<T> {
    fn params(&self) -> Vec<&Param<T>> {
        self.proj.params()
    }
}

pub struct Generator<T: Scalar> {
    pub config: GeneratorConfig,
    pub stem: Conv3d<T>,
    pub enc: Vec<Vec<BasicBlock<T>>>,
    /// `down[i]` enters encoder stage `i + 2`.
    pub down: Vec<DownBlock<T>>,
    /// `up[i]` enters decoder stage `i + 1`.
    pub up: Vec<UpBlock<T>>,
    pub fuse: Vec<SkipFuse<T>>,
    /// `dec[i]` is decoder stage `i + 1`.
    pub dec: Vec<Vec<BasicBlock<T>>>,
    pub head: Conv3d<T>,
}

/// Every input extent must be divisible by this.
pub const SPATIAL_DIVISOR: usize = 1 << (STAGES - 1);

impl<T: Scalar> Generator<T> {
    /// Builds and initializes from `seed`. Each transition block takes the
    /// expansion ratio of the stage it leads into.
    pub fn new(cfg: &GeneratorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = cfg.dw_kernel;
        let (l, r) = (cfg.depths, cfg.expansion_ratios);
        let stem = Conv3d::pointwise("stem", cfg.in_channels, cfg.base_channels, &mut rng);
        let mut enc = Vec::new();
        let mut down = Vec::new();
        for i in 0..STAGES {
            if i > 0 {
                let name = format!("enc.down{}", i + 1);
                down.push(DownBlock::new(
                    &name,
                    cfg.channels(i - 1),
                    cfg.channels(i),
                    r[i],
                    k,
                    &mut rng,
                ));
            }
            enc.push(
                (0..l[i])
                    .map(|j| {
                        BasicBlock::new(
                            &format!("enc.stage{}.block{}", i + 1, j + 1),
                            cfg.channels(i),
                            r[i],
                            k,
                            &mut rng,
                        )
                    })
                    .collect(),
            );
        }
        let (mut up, mut fuse, mut dec) = (Vec::new(), Vec::new(), Vec::new());
        for i in (0..STAGES - 1).rev() {
            let c = cfg.channels(i);
            up.push(UpBlock::new(
                &format!("dec.up{}", i + 1),
                cfg.channels(i + 1),
                c,
                r[i],
                k,
                &mut rng,
            ));
            fuse.push(SkipFuse::new(&format!("dec.fuse{}", i + 1), c, &mut rng));
            dec.push(
                (0..l[i])
                    .map(|j| {
                        BasicBlock::new(
                            &format!("dec.stage{}.block{}", i + 1, j + 1),
                            c,
                            r[i],
                            k,
                            &mut rng,
                        )
                    })
                    .collect::<Vec<_>>(),
            );
        }
        up.reverse();
        fuse.reverse();
        dec.reverse();
        let head = Conv3d::pointwise("head", cfg.base_channels, cfg.out_channels, &mut rng);
        Ok(Self {
            config: cfg.clone(),
            stem,
            enc,
            down,
            up,
            fuse,
            dec,
            head,
        })
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 5 || shape[1] != self.config.in_channels {
            return Err(Error::Shape(format!(
                "generator expects (B, {}, D, H, W), got {shape:?}",
                self.config.in_channels
            )));
        }
        if shape[2..]
            .iter()
            .any(|n| n % SPATIAL_DIVISOR != 0 || *n == 0)
        {
            return Err(Error::Shape(format!(
                "spatial dims must be divisible by {SPATIAL_DIVISOR}, got {:?}",
                &shape[2..]
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Var<T>) -> Result<Var<T>> {
        self.check_input(x.shape())?;
        let mut h = self.stem.forward(x);
        let mut skips = Vec::with_capacity(STAGES - 1);
        for i in 0..STAGES {
            if i > 0 {
                skips.push(h.clone());
                h = self.down[i - 1].forward(&h)?;
            }
            for b in &self.enc[i] {
                h = b.forward(&h)?;
            }
        }
        for i in (0..STAGES - 1).rev() {
            h = self.up[i].forward(&h)?;
            h = self.fuse[i].forward(&skips[i], &h)?;
            for b in &self.dec[i] {
                h = b.forward(&h)?;
            }
        }
        let out = self.head.forward(&h);
        Ok(match self.config.final_activation {
            FinalActivation::Tanh => out.tanh(),
            FinalActivation::Linear => out,
        })
    }
}

impl<T: Scalar> Module<T> for Generator<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut p = self.stem.params();
        for i in 0..STAGES {
            if i > 0 {
                p.extend(self.down[i - 1].params());
            }
            self.enc[i].iter().for_each(|b| p.extend(b.params()));
        }
        for i in (0..STAGES - 1).rev() {
            p.extend(self.up[i].params());
            p.extend(self.fuse[i].params());
            self.dec[i].iter().for_each(|b| p.extend(b.params()));
        }
        p.extend(self.head.params());
        p
    }
}
