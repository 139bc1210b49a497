//! Training-time augmentation: isotropic zoom, random patch crop, in-plane
//! flips.
//!
//! Randomness for one sample comes from a generator keyed by
//! `(seed, case_id, epoch)`, so results do not depend on the order in which
//! worker threads pick up cases.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::volume_store::{CasePair, Modality, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FlipAxis {
    H,
    W,
}

impl FlipAxis {
    fn index(self) -> usize {
        match self {
            FlipAxis::H => 1,
            FlipAxis::W => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    /// `None` disables zooming (the CBCT task).
    #[serde(default)]
    pub zoom_range: Option<(f64, f64)>,
    pub patch_size: [usize; 3],
    #[serde(default = "default_flip_axes")]
    pub flip_axes: Vec<FlipAxis>,
    #[serde(default = "default_flip_prob")]
    pub flip_prob: f64,
    #[serde(default)]
    pub rng_seed: u64,
}

fn default_flip_axes() -> Vec<FlipAxis> {
    vec![FlipAxis::H, FlipAxis::W]
}

fn default_flip_prob() -> f64 {
    0.5
}

impl AugmentConfig {
    pub fn new(patch_size: [usize; 3], zoom_range: Option<(f64, f64)>, rng_seed: u64) -> Self {
        Self {
            zoom_range,
            patch_size,
            flip_axes: default_flip_axes(),
            flip_prob: default_flip_prob(),
            rng_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some((lo, hi)) = self.zoom_range {
            if !(lo > 0.0 && lo <= hi) {
                return Err(Error::Config(format!(
                    "augment.zoom_range: need 0 < lo <= hi, got ({lo}, {hi})"
                )));
            }
        }
        if self.patch_size.contains(&0) {
            return Err(Error::Config(format!(
                "augment.patch_size: zero extent in {:?}",
                self.patch_size
            )));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config(format!(
                "augment.flip_prob: {} outside [0, 1]",
                self.flip_prob
            )));
        }
        Ok(())
    }
}

/// What was done to produce a patch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub case_id: String,
    pub zoom: f64,
    /// Symmetric padding added before cropping (low side).
    pub pad_lo: [usize; 3],
    pub crop_origin: [usize; 3],
    /// Applied flips along H and W.
    pub flips: [bool; 2],
}

impl std::fmt::Display for Provenance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} zoom={} pad={:?} origin={:?} flipH={} flipW={}",
            self.case_id, self.zoom, self.pad_lo, self.crop_origin, self.flips[0], self.flips[1]
        )
    }
}

#[derive(Clone, Debug)]
pub struct PatchSample {
    pub input: Volume,
    pub target: Option<Volume>,
    pub mask: Volume,
    pub labels: Option<Volume>,
    pub provenance: Provenance,
}

impl PatchSample {
    fn volumes_mut(&mut self) -> impl Iterator<Item = &mut Volume> {
        [
            Some(&mut self.input),
            self.target.as_mut(),
            Some(&mut self.mask),
            self.labels.as_mut(),
        ]
        .into_iter()
        .flatten()
    }
}

/// Generator for one sample, derived from `(seed, case_id, epoch)`.
pub fn sample_rng(seed: u64, case_id: &str, epoch: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((case_id.len() as u64).to_le_bytes());
    h.update(case_id.as_bytes());
    h.update(epoch.to_le_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// Value used to pad images: the minimum of the normalized range, `-1` for
/// CT-space volumes and `0` for `[0, 1]` inputs, masks and labels.
pub fn pad_value(modality: Modality) -> f32 {
    match modality {
        Modality::Ct | Modality::Sct => -1.0,
        _ => 0.0,
    }
}

fn map_case(pair: &CasePair, mut f: impl FnMut(&Volume) -> Result<Volume>) -> Result<CasePair> {
    Ok(CasePair {
        case_id: pair.case_id.clone(),
        input: f(&pair.input)?,
        target: pair.target.as_ref().map(&mut f).transpose()?,
        body_mask: f(&pair.body_mask)?,
        seg_labels: pair.seg_labels.as_ref().map(&mut f).transpose()?,
        region: pair.region,
    })
}

/// Output extent along one axis after zooming by `factor`.
pub fn zoomed_extent(n: usize, factor: f64) -> usize {
    ((n as f64 * factor).round() as usize).max(1)
}

/// Resamples to `shape` with half-pixel alignment: trilinear for images,
/// nearest neighbour for masks and labels.
pub fn resample(v: &Volume, shape: [usize; 3]) -> Result<Volume> {
    let src = v.shape();
    if shape == src {
        return Ok(v.clone());
    }
    let scale: [f64; 3] = [0, 1, 2].map(|a| src[a] as f64 / shape[a] as f64);
    let mut data = Vec::with_capacity(shape.iter().product());
    if v.modality().is_discrete() {
        let idx: Vec<Vec<usize>> = (0..3)
            .map(|a| {
                (0..shape[a])
                    .map(|i| (((i as f64 + 0.5) * scale[a]).floor() as usize).min(src[a] - 1))
                    .collect()
            })
            .collect();
        for &d in &idx[0] {
            for &h in &idx[1] {
                for &w in &idx[2] {
                    data.push(v.get(d, h, w));
                }
            }
        }
    } else {
        // (lower index, upper index, weight of upper)
        let taps: Vec<Vec<(usize, usize, f64)>> = (0..3)
            .map(|a| {
                (0..shape[a])
                    .map(|i| {
                        let x = ((i as f64 + 0.5) * scale[a] - 0.5).clamp(0.0, (src[a] - 1) as f64);
                        let i0 = x.floor() as usize;
                        let i1 = (i0 + 1).min(src[a] - 1);
                        (i0, i1, x - i0 as f64)
                    })
                    .collect()
            })
            .collect();
        for &(d0, d1, fd) in &taps[0] {
            for &(h0, h1, fh) in &taps[1] {
                for &(w0, w1, fw) in &taps[2] {
                    let g = |d, h, w| v.get(d, h, w) as f64;
                    let lerp = |a: f64, b: f64, t: f64| if t == 0.0 { a } else { a + (b - a) * t };
                    let c00 = lerp(g(d0, h0, w0), g(d0, h0, w1), fw);
                    let c01 = lerp(g(d0, h1, w0), g(d0, h1, w1), fw);
                    let c10 = lerp(g(d1, h0, w0), g(d1, h0, w1), fw);
                    let c11 = lerp(g(d1, h1, w0), g(d1, h1, w1), fw);
                    data.push(lerp(lerp(c00, c01, fh), lerp(c10, c11, fh), fd) as f32);
                }
            }
        }
    }
    let spacing = [0, 1, 2].map(|a| v.spacing()[a] * (scale[a] as f32));
    Volume::new(data, shape, spacing, v.origin(), v.modality())
}

/// Rescales every volume of the case by the same isotropic factor.
pub fn random_zoom(pair: &CasePair, factor: f64, range: (f64, f64)) -> Result<CasePair> {
    if !(factor >= range.0 && factor <= range.1) {
        return Err(Error::Augment(format!(
            "zoom factor {factor} outside configured range [{}, {}]",
            range.0, range.1
        )));
    }
    let s = pair.shape();
    let shape = s.map(|n| zoomed_extent(n, factor));
    map_case(pair, |v| resample(v, shape))
}

fn pad_and_crop(
    v: &Volume,
    pad_lo: [usize; 3],
    origin: [usize; 3],
    patch: [usize; 3],
) -> Result<Volume> {
    let fill = pad_value(v.modality());
    let s = v.shape();
    let mut data = Vec::with_capacity(patch.iter().product());
    for d in 0..patch[0] {
        let sd = (origin[0] + d).checked_sub(pad_lo[0]).filter(|&x| x < s[0]);
        for h in 0..patch[1] {
            let sh = (origin[1] + h).checked_sub(pad_lo[1]).filter(|&x| x < s[1]);
            for w in 0..patch[2] {
                let sw = (origin[2] + w).checked_sub(pad_lo[2]).filter(|&x| x < s[2]);
                data.push(match (sd, sh, sw) {
                    (Some(a), Some(b), Some(c)) => v.get(a, b, c),
                    _ => fill,
                });
            }
        }
    }
    let sp = v.spacing();
    let origin_mm =
        [0, 1, 2].map(|a| v.origin()[a] + (origin[a] as f32 - pad_lo[a] as f32) * sp[a]);
    Volume::new(data, patch, sp, origin_mm, v.modality())
}

/// Pads symmetrically where the case is smaller than `patch`, then crops a
/// patch at an origin drawn uniformly over the valid positions.
pub fn random_crop(pair: &CasePair, patch: [usize; 3], rng: &mut impl Rng) -> Result<PatchSample> {
    let s = pair.shape();
    let mut pad_lo = [0; 3];
    let mut origin = [0; 3];
    for a in 0..3 {
        let padded = if s[a] < patch[a] {
            pad_lo[a] = (patch[a] - s[a]) / 2;
            patch[a]
        } else {
            s[a]
        };
        origin[a] = rng.gen_range(0..=padded - patch[a]);
    }
    let crop = |v: &Volume| pad_and_crop(v, pad_lo, origin, patch);
    Ok(PatchSample {
        input: crop(&pair.input)?,
        target: pair.target.as_ref().map(crop).transpose()?,
        mask: crop(&pair.body_mask)?,
        labels: pair.seg_labels.as_ref().map(crop).transpose()?,
        provenance: Provenance {
            case_id: pair.case_id.clone(),
            zoom: 1.0,
            pad_lo,
            crop_origin: origin,
            flips: [false, false],
        },
    })
}

/// Reverses a volume along axis 1 (H) or 2 (W).
pub fn flip_volume(v: &Volume, axis: usize) -> Volume {
    let [d, h, w] = v.shape();
    let src = v.data();
    let mut data = Vec::with_capacity(src.len());
    for z in 0..d {
        for y in 0..h {
            let yy = if axis == 1 { h - 1 - y } else { y };
            let row = &src[(z * h + yy) * w..][..w];
            if axis == 2 {
                data.extend(row.iter().rev());
            } else {
                data.extend_from_slice(row);
            }
        }
    }
    v.with_data(data, v.modality())
        .expect("flip preserves validity")
}

/// Flips along each configured in-plane axis with probability `prob`. One
/// draw is consumed per configured axis, in the order H, W.
pub fn random_flip(
    mut sample: PatchSample,
    axes: &[FlipAxis],
    prob: f64,
    rng: &mut impl Rng,
) -> PatchSample {
    for axis in [FlipAxis::H, FlipAxis::W] {
        if !axes.contains(&axis) {
            continue;
        }
        if rng.gen::<f64>() < prob {
            let a = axis.index();
            sample.volumes_mut().for_each(|v| *v = flip_volume(v, a));
            sample.provenance.flips[a - 1] ^= true;
        }
    }
    sample
}

/// Full augmentation of one case for one epoch: zoom (if configured), crop,
/// flip.
pub fn augment_case(pair: &CasePair, cfg: &AugmentConfig, epoch: u64) -> Result<PatchSample> {
    let mut rng = sample_rng(cfg.rng_seed, &pair.case_id, epoch);
    let (zoomed, factor) = match cfg.zoom_range {
        Some(range) => {
            let f = if range.0 == range.1 {
                range.0
            } else {
                rng.gen_range(range.0..=range.1)
            };
            (random_zoom(pair, f, range)?, f)
        }
        None => (pair.clone(), 1.0),
    };
    let mut sample = random_crop(&zoomed, cfg.patch_size, &mut rng)?;
    sample.provenance.zoom = factor;
    Ok(random_flip(sample, &cfg.flip_axes, cfg.flip_prob, &mut rng))
}

/// Augments `cases` on up to `workers` threads; output order follows input
/// order and is independent of the worker count.
pub fn augment_batch(
    cases: &[&CasePair],
    cfg: &AugmentConfig,
    epoch: u64,
    workers: usize,
) -> Result<Vec<PatchSample>> {
    let workers = workers.clamp(1, cases.len().max(1));
    if workers == 1 {
        return cases.iter().map(|c| augment_case(c, cfg, epoch)).collect();
    }
    let chunk = cases.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = cases
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || {
                    part.iter()
                        .map(|c| augment_case(c, cfg, epoch))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        let mut out = Vec::with_capacity(cases.len());
        for h in handles {
            out.extend(h.join().expect("augmentation worker panicked")?);
        }
        Ok(out)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume_store::Region;
    use proptest::prelude::*;

    /// Input and target hold the flat voxel index; mask and labels are
    /// functions of it that map index 0 (and padding) to 0.
    fn index_case(shape: [usize; 3]) -> CasePair {
        let n = |d: usize, h: usize, w: usize| ((d * shape[1] + h) * shape[2] + w) as f32;
        let input = Volume::from_fn(shape, Modality::Mri, n).unwrap();
        let target = Volume::from_fn(shape, Modality::Mri, n).unwrap();
        let mask = Volume::from_fn(shape, Modality::Mask, |d, h, w| {
            (n(d, h, w) as usize % 2) as f32
        })
        .unwrap();
        let labels = Volume::from_fn(shape, Modality::Labels, |d, h, w| {
            (n(d, h, w) as usize % 5) as f32
        })
        .unwrap();
        CasePair::new(
            "idx",
            input,
            Some(target),
            mask,
            Some(labels),
            Region::Other,
        )
        .unwrap()
    }

    #[test]
    fn zoom_identity_and_rounding() {
        let c = index_case([4, 6, 5]);
        let same = random_zoom(&c, 1.0, (0.8, 1.3)).unwrap();
        assert_eq!(same.input, c.input);
        let shape = [32, 160, 192].map(|n| zoomed_extent(n, 0.8));
        assert_eq!(shape, [26, 128, 154]);
        assert!(random_zoom(&c, 1.5, (0.8, 1.3)).is_err());
        let z = random_zoom(&c, 1.3, (0.8, 1.3)).unwrap();
        assert_eq!(z.shape(), [5, 8, 7]);
        assert!(z.body_mask.data().iter().all(|&m| m == 0.0 || m == 1.0));
        assert!(z
            .seg_labels
            .unwrap()
            .data()
            .iter()
            .all(|&l| l.fract() == 0.0 && l <= 4.0));
    }

    #[test]
    fn trilinear_reproduces_linear_ramps() {
        // A linear ramp stays linear away from the clamped borders.
        let v = Volume::from_fn([1, 1, 8], Modality::Mri, |_, _, w| w as f32).unwrap();
        let z = resample(&v, [1, 1, 16]).unwrap();
        for w in 1..15 {
            let x = (w as f64 + 0.5) * 0.5 - 0.5;
            assert!((z.get(0, 0, w) as f64 - x).abs() < 1e-6);
        }
    }

    #[test]
    fn crop_exact_fit_and_padding() {
        let c = index_case([4, 4, 4]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = random_crop(&c, [4, 4, 4], &mut rng).unwrap();
        assert_eq!(s.provenance.crop_origin, [0, 0, 0]);
        assert_eq!(s.input, c.input);
        let mut small = c.clone();
        small.target = Some(c.input.map(Modality::Ct, |x| x / 100.0).unwrap());
        let p = random_crop(&small, [8, 6, 5], &mut rng).unwrap();
        assert_eq!(p.input.shape(), [8, 6, 5]);
        assert_eq!(p.provenance.pad_lo, [2, 1, 0]);
        assert_eq!(p.target.as_ref().unwrap().get(0, 0, 0), -1.0);
        assert_eq!(p.input.get(0, 0, 0), 0.0);
    }

    #[test]
    fn crop_origins_cover_the_valid_range() {
        // Extent 6, patch 4: origins {0, 1, 2} on every axis.
        let c = index_case([6, 6, 6]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut seen = [[false; 3]; 3];
        for _ in 0..300 {
            let s = random_crop(&c, [4, 4, 4], &mut rng).unwrap();
            for a in 0..3 {
                let o = s.provenance.crop_origin[a];
                assert!(o <= 2);
                seen[a][o] = true;
            }
        }
        assert!(seen.iter().flatten().all(|&b| b));
    }

    #[test]
    fn flips_are_involutions_and_replayable() {
        let c = index_case([2, 3, 4]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = random_crop(&c, [2, 3, 4], &mut rng).unwrap();
        for axis in [1, 2] {
            assert_eq!(flip_volume(&flip_volume(&s.input, axis), axis), s.input);
            let mut a = flip_volume(&s.input, axis).into_data();
            let mut b = s.input.data().to_vec();
            a.sort_by(f32::total_cmp);
            b.sort_by(f32::total_cmp);
            assert_eq!(a, b);
        }
        let cfg = AugmentConfig::new([2, 2, 2], None, 9);
        let first: Vec<_> = (0..5)
            .map(|e| augment_case(&c, &cfg, e).unwrap().provenance)
            .collect();
        let again: Vec<_> = (0..5)
            .map(|e| augment_case(&c, &cfg, e).unwrap().provenance)
            .collect();
        assert_eq!(first, again);
    }

    #[test]
    fn batch_result_ignores_worker_count() {
        let cases: Vec<CasePair> = (0..5)
            .map(|i| {
                let mut c = index_case([5, 7, 6]);
                c.case_id = format!("c{i}");
                c
            })
            .collect();
        let refs: Vec<&CasePair> = cases.iter().collect();
        let cfg = AugmentConfig::new([4, 4, 4], Some((0.8, 1.3)), 2);
        let one = augment_batch(&refs, &cfg, 3, 1).unwrap();
        let three = augment_batch(&refs, &cfg, 3, 3).unwrap();
        for (a, b) in one.iter().zip(&three) {
            assert_eq!(a.input, b.input);
            assert_eq!(a.provenance, b.provenance);
        }
    }

    proptest! {
        #[test]
        fn every_channel_gets_the_same_transform(
            shape in [1usize..7, 1usize..7, 1usize..7],
            patch in [1usize..6, 1usize..6, 1usize..6],
            seed in any::<u64>(),
        ) {
            let c = index_case(shape);
            let cfg = AugmentConfig::new(patch, None, seed);
            let s = augment_case(&c, &cfg, 0).unwrap();
            prop_assert_eq!(s.target.as_ref().unwrap().data(), s.input.data());
            for (i, &x) in s.input.data().iter().enumerate() {
                prop_assert_eq!(s.mask.data()[i], (x as usize % 2) as f32);
                prop_assert_eq!(s.labels.as_ref().unwrap().data()[i], (x as usize % 5) as f32);
            }
        }
    }
}
