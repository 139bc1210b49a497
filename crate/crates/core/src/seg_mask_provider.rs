//! Anatomical label maps, read from precomputed files or generated as
//! synthetic phantoms. The phantom generator also builds whole paired cases
//! for desk-scale experiments.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::volume_store::{load_volume_as, CasePair, Modality, Region, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LabelSourceKind {
    FileIngest,
    SyntheticPhantom,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelSource {
    pub kind: LabelSourceKind,
    /// Number of foreground classes `K`; labels take values in `0..=K`.
    pub classes: usize,
    /// Directory of `<case_id>.nii[.gz]` label files. When absent, the labels
    /// loaded with the case are used.
    #[serde(default)]
    pub label_dir: Option<PathBuf>,
}

impl LabelSource {
    pub fn synthetic(classes: usize) -> Self {
        Self {
            kind: LabelSourceKind::SyntheticPhantom,
            classes,
            label_dir: None,
        }
    }

    pub fn file_ingest(label_dir: Option<PathBuf>, classes: usize) -> Self {
        Self {
            kind: LabelSourceKind::FileIngest,
            classes,
            label_dir,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 {
            return Err(Error::Labels("class count must be at least 1".into()));
        }
        Ok(())
    }
}

/// Label volume for `case`, aligned with its input grid.
pub fn labels_for(case: &CasePair, src: &LabelSource) -> Result<Volume> {
    src.validate()?;
    let labels = match src.kind {
        LabelSourceKind::SyntheticPhantom => {
            return synthetic_labels(&case.body_mask, &case.case_id, src.classes)
        }
        LabelSourceKind::FileIngest => match &src.label_dir {
            Some(dir) => load_volume_as(find_label_file(dir, &case.case_id)?, Modality::Labels)?,
            None => case.seg_labels.clone().ok_or_else(|| {
                Error::Labels(format!("case {} has no label volume", case.case_id))
            })?,
        },
    };
    check_labels(&labels, case, src.classes)?;
    Ok(labels)
}

fn find_label_file(dir: &Path, case_id: &str) -> Result<PathBuf> {
    let candidates = [
        dir.join(format!("{case_id}.nii")),
        dir.join(format!("{case_id}.nii.gz")),
        dir.join(case_id).join("labels.nii"),
        dir.join(case_id).join("labels.nii.gz"),
    ];
    candidates.into_iter().find(|p| p.is_file()).ok_or_else(|| {
        Error::Labels(format!(
            "no label file for case {case_id} under {}",
            dir.display()
        ))
    })
}

/// Checks grid alignment with the case and the value range `0..=classes`.
pub fn check_labels(labels: &Volume, case: &CasePair, classes: usize) -> Result<()> {
    if labels.modality() != Modality::Labels {
        return Err(Error::Labels(format!(
            "case {}: volume is not tagged LABELS",
            case.case_id
        )));
    }
    if !labels.same_grid(&case.input) {
        return Err(Error::Labels(format!(
            "case {}: label grid {:?}/{:?} does not match input {:?}/{:?}",
            case.case_id,
            labels.shape(),
            labels.spacing(),
            case.input.shape(),
            case.input.spacing()
        )));
    }
    let (_, hi) = labels.min_max();
    if hi > classes as f32 {
        return Err(Error::Labels(format!(
            "case {}: label {hi} out of range 0..={classes}",
            case.case_id
        )));
    }
    Ok(())
}

fn keyed_rng(parts: &[&[u8]]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// `K` nested ellipsoids sharing one center inside the mask's bounding box.
/// Class `k` is the set of mask voxels inside ellipsoid `k` but not `k+1`.
pub fn synthetic_labels(mask: &Volume, case_id: &str, classes: usize) -> Result<Volume> {
    if classes == 0 {
        return Err(Error::Labels("class count must be at least 1".into()));
    }
    let s = mask.shape();
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for d in 0..s[0] {
        for h in 0..s[1] {
            for w in 0..s[2] {
                if mask.get(d, h, w) > 0.0 {
                    for (a, i) in [d, h, w].into_iter().enumerate() {
                        lo[a] = lo[a].min(i as f64);
                        hi[a] = hi[a].max(i as f64);
                    }
                }
            }
        }
    }
    if lo[0].is_infinite() {
        return Err(Error::Labels(format!("case {case_id}: empty body mask")));
    }
    let mut rng = keyed_rng(&[
        b"labels",
        case_id.as_bytes(),
        &(classes as u64).to_le_bytes(),
    ]);
    let half = [0, 1, 2].map(|a| (hi[a] - lo[a]) / 2.0 + 0.5);
    let center = [0, 1, 2].map(|a| (lo[a] + hi[a]) / 2.0 + rng.gen_range(-0.1..0.1) * half[a]);
    let aspect = [0, 1, 2].map(|_| rng.gen_range(0.8..1.0));
    let scale = |k: usize| 0.9 * (1.0 - (k - 1) as f64 / (classes as f64 + 0.5));
    let labels = Volume::from_fn(s, Modality::Labels, |d, h, w| {
        if mask.get(d, h, w) <= 0.0 {
            return 0.0;
        }
        let r2: f64 = [d, h, w]
            .into_iter()
            .enumerate()
            .map(|(a, i)| ((i as f64 - center[a]) / (half[a] * aspect[a])).powi(2))
            .sum();
        (1..=classes)
            .take_while(|&k| r2 <= scale(k).powi(2))
            .count() as f32
    })?;
    Volume::new(
        labels.into_data(),
        s,
        mask.spacing(),
        mask.origin(),
        Modality::Labels,
    )
}

/// Parameters of a synthetic paired dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub shape: [usize; 3],
    pub classes: usize,
    /// `MRI` or `CBCT`.
    pub input_modality: Modality,
    pub seed: u64,
}

impl PhantomSpec {
    pub fn new(shape: [usize; 3], input_modality: Modality, seed: u64) -> Self {
        Self {
            shape,
            classes: 4,
            input_modality,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.shape.iter().any(|&n| n < 4) {
            return Err(Error::Labels(format!(
                "phantom shape {:?} too small",
                self.shape
            )));
        }
        if !matches!(self.input_modality, Modality::Mri | Modality::Cbct) {
            return Err(Error::Labels(
                "phantom input modality must be MRI or CBCT".into(),
            ));
        }
        if self.classes == 0 {
            return Err(Error::Labels("class count must be at least 1".into()));
        }
        Ok(())
    }
}

/// CT value of each tissue class; class 0 inside the body is soft tissue.
pub const TISSUE_HU: [f32; 5] = [20.0, -90.0, 55.0, 420.0, 1100.0];

/// Knots `(HU, intensity)` of the piecewise-linear map from CT to the
/// phantom input modality.
pub fn input_transfer_knots(modality: Modality) -> &'static [(f32, f32)] {
    match modality {
        Modality::Cbct => &[
            (-1024.0, -1000.0),
            (-100.0, -60.0),
            (100.0, 140.0),
            (1500.0, 1250.0),
        ],
        _ => &[
            (-1024.0, 0.0),
            (-200.0, 250.0),
            (-90.0, 700.0),
            (0.0, 430.0),
            (100.0, 360.0),
            (420.0, 220.0),
            (1500.0, 60.0),
        ],
    }
}

/// Evaluates a piecewise-linear map, constant beyond the end knots.
pub fn piecewise_linear(knots: &[(f32, f32)], x: f32) -> f32 {
    let (first, last) = (knots[0], knots[knots.len() - 1]);
    if x <= first.0 {
        return first.1;
    }
    if x >= last.0 {
        return last.1;
    }
    let i = knots.windows(2).position(|k| x <= k[1].0).unwrap();
    let (a, b) = (knots[i], knots[i + 1]);
    a.1 + (x - a.0) / (b.0 - a.0) * (b.1 - a.1)
}

/// 3-tap mean along each axis with edge replication.
pub fn box_smooth(v: &Volume) -> Result<Volume> {
    let s = v.shape();
    let mut data = v.data().to_vec();
    let strides = [s[1] * s[2], s[2], 1];
    for a in 0..3 {
        let src = data.clone();
        for (i, out) in data.iter_mut().enumerate() {
            let pos = (i / strides[a]) % s[a];
            let prev = if pos > 0 { i - strides[a] } else { i };
            let next = if pos + 1 < s[a] { i + strides[a] } else { i };
            *out = (src[prev] + src[i] + src[next]) / 3.0;
        }
    }
    v.with_data(data, v.modality())
}

/// One paired phantom case: ellipsoidal body, nested tissue classes, a
/// smooth texture, and an input derived from the CT by
/// [`input_transfer_knots`] followed by [`box_smooth`].
pub fn make_phantom(case_id: &str, spec: &PhantomSpec) -> Result<CasePair> {
    spec.validate()?;
    let s = spec.shape;
    let mut rng = keyed_rng(&[b"phantom", &spec.seed.to_le_bytes(), case_id.as_bytes()]);
    let center = [0, 1, 2].map(|a| s[a] as f64 / 2.0 + rng.gen_range(-0.06..0.06) * s[a] as f64);
    let semi = [0, 1, 2].map(|a| rng.gen_range(0.34..0.44) * s[a] as f64);
    let body_mask = Volume::from_fn(s, Modality::Mask, |d, h, w| {
        let r2: f64 = [d, h, w]
            .into_iter()
            .enumerate()
            .map(|(a, i)| ((i as f64 + 0.5 - center[a]) / semi[a]).powi(2))
            .sum();
        if r2 <= 1.0 {
            1.0
        } else {
            0.0
        }
    })?;
    let labels = synthetic_labels(&body_mask, case_id, spec.classes)?;
    let freq = [0, 1, 2].map(|a| rng.gen_range(1.0..2.5) / s[a] as f64);
    let phase = [0, 1, 2].map(|_| rng.gen_range(0.0..std::f64::consts::TAU));
    let amp = rng.gen_range(15.0..35.0);
    let target = Volume::from_fn(s, Modality::Ct, |d, h, w| {
        if body_mask.get(d, h, w) <= 0.0 {
            return -1024.0;
        }
        let class = labels.get(d, h, w) as usize;
        let texture: f64 = [d, h, w]
            .into_iter()
            .enumerate()
            .map(|(a, i)| (std::f64::consts::TAU * freq[a] * i as f64 + phase[a]).sin())
            .product();
        (TISSUE_HU[class % TISSUE_HU.len()] as f64 + amp * texture).clamp(-1024.0, 1500.0) as f32
    })?;
    let knots = input_transfer_knots(spec.input_modality);
    let raw = target.map(spec.input_modality, |x| piecewise_linear(knots, x))?;
    let input = box_smooth(&raw)?;
    let region = [Region::HeadNeck, Region::Thorax, Region::Abdomen][rng.gen_range(0..3)];
    CasePair::new(
        case_id,
        input,
        Some(target),
        body_mask,
        Some(labels),
        region,
    )
}

/// `n` phantom cases named `<prefix><index>` with zero-padded indices.
pub fn make_phantom_dataset(n: usize, prefix: &str, spec: &PhantomSpec) -> Result<Vec<CasePair>> {
    (0..n)
        .map(|i| make_phantom(&format!("{prefix}{i:03}"), spec))
        .collect()
}
