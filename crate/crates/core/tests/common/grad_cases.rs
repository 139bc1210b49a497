//! Finite-difference cases for every network block and loss term, shared
//! by the gradient tests and the acceptance harness.

use super::{gradcheck, project, rand_tensor, rng};
use ganext_core::discriminators::{
    DecoderStage, DiscriminatorConfig, EncoderLayer, PatchDiscriminator,
};
use ganext_core::generator_genext::{
    BasicBlock, ConvFfn, DownBlock, Generator, GeneratorConfig, SkipFuse, UpBlock,
};
use ganext_core::losses::{
    adversarial_loss_d, adversarial_loss_g, dice_ce_loss, feature_matching_loss, mae_loss,
    masked_mae_loss, perceptual_loss, GanMode, RandomBackbone,
};
use ganext_core::trainer::PERCEPTUAL_SEED;
use ganext_tensor::{Module, Param, Tensor, Var};
use rand::Rng;

pub const TOL: f64 = 1e-3;

/// `(label, worst relative error, tensors with an all-zero gradient)`.
pub type Checks = Vec<(String, f64, usize)>;

fn one(label: &str, (err, zero): (f64, usize)) -> (String, f64, usize) {
    (label.to_string(), err, zero)
}

fn small_disc(seg: bool) -> PatchDiscriminator<f64> {
    let cfg = DiscriminatorConfig {
        base_channels: 2,
        max_channels: 4,
        n_stride2_layers: 1,
        seg_head: seg,
        num_seg_classes: 2,
        ..DiscriminatorConfig::standard(seg)
    };
    PatchDiscriminator::new(&cfg, 5).unwrap()
}

fn labels(shape: &[usize], classes: usize, seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    Tensor::from_fn(shape, |_| r.gen_range(0..classes) as f64)
}

pub fn conv_ffn() -> Checks {
    let mut out = Checks::new();
    let ffn = ConvFfn::<f64>::new("ffn", 3, 2, 4, &mut rng(1));
    let x = rand_tensor(&[2, 3, 4, 4, 4], 2);
    out.push(one(
        "ffn",
        gradcheck(&[x], &ffn.params(), |v| project(&ffn.forward(&v[0]), 3)),
    ));
    out
}

pub fn basic_block() -> Checks {
    let mut out = Checks::new();
    let b = BasicBlock::<f64>::new("b", 3, 2, 3, &mut rng(4));
    let x = rand_tensor(&[2, 3, 4, 4, 4], 5);
    out.push(one(
        "basic block",
        gradcheck(&[x], &b.params(), |v| {
            project(&b.forward(&v[0]).unwrap(), 6)
        }),
    ));
    out
}

pub fn down_block() -> Checks {
    let mut out = Checks::new();
    let b = DownBlock::<f64>::new("d", 3, 4, 2, 3, &mut rng(7));
    let x = rand_tensor(&[1, 3, 4, 4, 4], 8);
    out.push(one(
        "down block",
        gradcheck(&[x], &b.params(), |v| {
            project(&b.forward(&v[0]).unwrap(), 9)
        }),
    ));
    out
}

pub fn up_block() -> Checks {
    let mut out = Checks::new();
    let b = UpBlock::<f64>::new("u", 4, 3, 2, 3, &mut rng(10));
    let x = rand_tensor(&[1, 4, 2, 2, 2], 11);
    out.push(one(
        "up block",
        gradcheck(&[x], &b.params(), |v| {
            project(&b.forward(&v[0]).unwrap(), 12)
        }),
    ));
    out
}

pub fn skip_fuse() -> Checks {
    let mut out = Checks::new();
    let f = SkipFuse::<f64>::new("f", 3, &mut rng(13));
    let enc = rand_tensor(&[1, 3, 4, 4, 4], 14);
    let dec = rand_tensor(&[1, 3, 4, 4, 4], 15);
    out.push(one(
        "skip fuse",
        gradcheck(&[enc, dec], &f.params(), |v| {
            project(&f.forward(&v[0], &v[1]).unwrap(), 16)
        }),
    ));
    out
}

pub fn generator_stem_and_head() -> Checks {
    let mut out = Checks::new();
    let g = Generator::<f64>::new(&GeneratorConfig::tiny(2), 17).unwrap();
    let x = rand_tensor(&[1, 1, 4, 4, 4], 18);
    out.push(one(
        "stem",
        gradcheck(&[x], &g.stem.params(), |v| {
            project(&g.stem.forward(&v[0]), 19)
        }),
    ));
    let h = rand_tensor(&[1, 2, 4, 4, 4], 20);
    out.push(one(
        "head + tanh",
        gradcheck(&[h], &g.head.params(), |v| {
            project(&g.head.forward(&v[0]).tanh(), 21)
        }),
    ));
    out
}

pub fn discriminator_encoder_layers() -> Checks {
    let mut out = Checks::new();
    let d = small_disc(false);
    let slope = 0.2;
    let x = rand_tensor(&[1, 2, 4, 4, 4], 22);
    let first = &d.encoder[0];
    assert!(first.norm.is_none());
    out.push(one(
        "encoder layer without norm",
        gradcheck(&[x], &first.params_list(), |v| {
            project(&first.forward(&v[0], slope), 23)
        }),
    ));
    let second = &d.encoder[1];
    assert!(second.norm.is_some());
    let h = rand_tensor(&[1, 2, 2, 2, 2], 24);
    out.push(one(
        "encoder layer with norm",
        gradcheck(&[h], &second.params_list(), |v| {
            project(&second.forward(&v[0], slope), 25)
        }),
    ));
    out
}

/// Parameter lists for the discriminator layers, which do not implement
/// `Module` themselves.
trait ParamsList {
    fn params_list(&self) -> Vec<&Param<f64>>;
}

impl ParamsList for EncoderLayer<f64> {
    fn params_list(&self) -> Vec<&Param<f64>> {
        let mut p = self.conv.params();
        if let Some(n) = &self.norm {
            p.extend(n.params());
        }
        p
    }
}

impl ParamsList for DecoderStage<f64> {
    fn params_list(&self) -> Vec<&Param<f64>> {
        let mut p = self.conv.params();
        p.extend(self.norm.params());
        p
    }
}

pub fn discriminator_decoder_stage_and_seg_out() -> Checks {
    let mut out = Checks::new();
    let d = small_disc(true);
    let stage = &d.decoder[0];
    let coarse = rand_tensor(&[1, 4, 2, 2, 2], 26);
    let skip = rand_tensor(&[1, 2, 4, 4, 4], 27);
    out.push(one(
        "decoder stage",
        gradcheck(&[coarse, skip], &stage.params_list(), |v| {
            project(&stage.forward(&v[0], &v[1], 0.2), 28)
        }),
    ));
    let seg_out = d.seg_out.as_ref().unwrap();
    let h = rand_tensor(&[1, 2, 4, 4, 4], 29);
    out.push(one(
        "seg out",
        gradcheck(&[h], &seg_out.params(), |v| {
            project(&seg_out.forward(&v[0]), 30)
        }),
    ));
    out
}

pub fn whole_discriminator_with_seg_head() -> Checks {
    let mut out = Checks::new();
    let d = small_disc(true);
    let cond = rand_tensor(&[1, 1, 4, 4, 4], 31);
    let img = rand_tensor(&[1, 1, 4, 4, 4], 32);
    out.push(one(
        "discriminator",
        gradcheck(&[cond, img], &d.params(), |v| {
            let o = d.segpatchgan_forward(&v[0], &v[1]).unwrap();
            project(&o.score_map, 33).add(&project(o.seg_logits.as_ref().unwrap(), 34))
        }),
    ));
    out
}

pub fn mae_terms() -> Checks {
    let mut out = Checks::new();
    let p = rand_tensor(&[2, 1, 4, 4, 4], 35);
    let t = rand_tensor(&[2, 1, 4, 4, 4], 36);
    out.push(one(
        "mae",
        gradcheck(&[p.clone(), t.clone()], &[], |v| {
            mae_loss(&v[0], &v[1]).unwrap()
        }),
    ));
    let l = labels(&[2, 1, 4, 4, 4], 3, 37);
    out.push(one(
        "masked mae",
        gradcheck(&[p, t], &[], |v| {
            masked_mae_loss(&v[0], &v[1], &l).unwrap().value
        }),
    ));
    out
}

pub fn perceptual_term() -> Checks {
    let mut out = Checks::new();
    let backbone = RandomBackbone::<f64>::new(PERCEPTUAL_SEED);
    let p = rand_tensor(&[1, 1, 2, 4, 4], 38);
    let t = rand_tensor(&[1, 1, 2, 4, 4], 39);
    out.push(one(
        "perceptual",
        gradcheck(&[p, t], &[], |v| {
            perceptual_loss(&v[0], &v[1], &backbone).unwrap()
        }),
    ));
    out
}

pub fn adversarial_terms() -> Checks {
    let mut out = Checks::new();
    let real = rand_tensor(&[2, 1, 1, 2, 2], 40);
    let fake = rand_tensor(&[2, 1, 1, 2, 2], 41);
    for mode in [GanMode::Bce, GanMode::Lsgan] {
        out.push(one(
            &format!("{mode:?} D"),
            gradcheck(&[real.clone(), fake.clone()], &[], |v| {
                adversarial_loss_d(mode, &v[0], &v[1])
            }),
        ));
        out.push(one(
            &format!("{mode:?} G"),
            gradcheck(&[fake.clone()], &[], |v| adversarial_loss_g(mode, &v[0])),
        ));
    }
    out
}

pub fn feature_matching_term() -> Checks {
    let mut out = Checks::new();
    let real: Vec<Var<f64>> = [(42, [1, 2, 4, 4, 4]), (43, [1, 4, 2, 2, 2])]
        .iter()
        .map(|(s, sh)| Var::constant(rand_tensor(sh, *s)))
        .collect();
    let fake = vec![
        rand_tensor(&[1, 2, 4, 4, 4], 44),
        rand_tensor(&[1, 4, 2, 2, 2], 45),
    ];
    out.push(one(
        "feature matching",
        gradcheck(&fake, &[], |v| feature_matching_loss(&real, v).unwrap()),
    ));
    out
}

pub fn dice_ce_term() -> Checks {
    let mut out = Checks::new();
    let logits = rand_tensor(&[2, 3, 4, 4, 4], 46);
    let l = labels(&[2, 1, 4, 4, 4], 3, 47);
    out.push(one(
        "dice + ce",
        gradcheck(&[logits], &[], |v| dice_ce_loss(&v[0], &l).unwrap()),
    ));
    // Class 2 absent from the labels.
    let sparse = labels(&[1, 1, 4, 4, 4], 2, 48);
    let logits = rand_tensor(&[1, 3, 4, 4, 4], 49);
    out.push(one(
        "dice + ce, absent class",
        gradcheck(&[logits], &[], |v| dice_ce_loss(&v[0], &sparse).unwrap()),
    ));
    out
}

/// Every case, for sweeping.
pub const ALL: [(&str, fn() -> Checks); 14] = [
    ("conv ffn", conv_ffn),
    ("basic block", basic_block),
    ("down block", down_block),
    ("up block", up_block),
    ("skip fuse", skip_fuse),
    ("generator stem and head", generator_stem_and_head),
    ("discriminator encoder layers", discriminator_encoder_layers),
    (
        "discriminator decoder stage and seg out",
        discriminator_decoder_stage_and_seg_out,
    ),
    ("whole discriminator", whole_discriminator_with_seg_head),
    ("mae terms", mae_terms),
    ("perceptual", perceptual_term),
    ("adversarial", adversarial_terms),
    ("feature matching", feature_matching_term),
    ("dice + ce", dice_ce_term),
];
