//! Intensity normalization and foreground cropping.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume_store::{write_atomic, CasePair, Modality, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormKind {
    PercentileUpper,
    LinearRange,
}

/// How a volume was (or will be) normalized. Fitted values are filled in by
/// [`normalize_input`] and persisted so inference can invert exactly.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormalizationSpec {
    pub kind: NormKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub percentile_q: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hu_min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hu_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fitted_lower: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fitted_upper: Option<f64>,
}

impl NormalizationSpec {
    pub fn percentile(q: f64) -> Self {
        Self {
            kind: NormKind::PercentileUpper,
            percentile_q: Some(q),
            hu_min: None,
            hu_max: None,
            fitted_lower: None,
            fitted_upper: None,
        }
    }

    pub fn linear(hu_min: f64, hu_max: f64) -> Self {
        Self {
            kind: NormKind::LinearRange,
            percentile_q: None,
            hu_min: Some(hu_min),
            hu_max: Some(hu_max),
            fitted_lower: None,
            fitted_upper: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            NormKind::PercentileUpper => match self.percentile_q {
                Some(q) if q > 0.0 && q <= 100.0 => Ok(()),
                q => Err(Error::Preprocess(format!(
                    "percentile {q:?} outside (0, 100]"
                ))),
            },
            NormKind::LinearRange => match (self.hu_min, self.hu_max) {
                (Some(lo), Some(hi)) if lo < hi => Ok(()),
                (lo, hi) => Err(Error::Preprocess(format!(
                    "invalid HU range: hu_min {lo:?} must be below hu_max {hi:?}"
                ))),
            },
        }
    }

    pub fn range(&self) -> Result<(f64, f64)> {
        if self.kind != NormKind::LinearRange {
            return Err(Error::Preprocess(
                "expected a LinearRange specification".into(),
            ));
        }
        self.validate()?;
        Ok((self.hu_min.unwrap(), self.hu_max.unwrap()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text =
            serde_json::to_string_pretty(self).map_err(|e| Error::Preprocess(e.to_string()))?;
        write_atomic(path.as_ref(), text.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: Self = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        spec.validate()?;
        Ok(spec)
    }
}

/// "Lower" percentile: the element at index `floor(q/100 * (n-1))` of the
/// sorted values.
pub fn percentile_lower(values: &mut [f32], q: f64) -> f32 {
    assert!(!values.is_empty());
    let k = ((q / 100.0) * (values.len() - 1) as f64).floor() as usize;
    let k = k.min(values.len() - 1);
    *values.select_nth_unstable_by(k, f32::total_cmp).1
}

/// Clips at the `q`-th percentile of the mask interior and rescales the
/// interior range to `[0, 1]`. Returns the fitted specification as well.
pub fn normalize_input(
    v: &Volume,
    mask: &Volume,
    spec: &NormalizationSpec,
) -> Result<(Volume, NormalizationSpec)> {
    spec.validate()?;
    let q = match (spec.kind, spec.percentile_q) {
        (NormKind::PercentileUpper, Some(q)) => q,
        _ => {
            return Err(Error::Preprocess(
                "expected a PercentileUpper specification".into(),
            ))
        }
    };
    if !v.same_grid(mask) {
        return Err(Error::Preprocess("mask and image grids differ".into()));
    }
    let mut inside: Vec<f32> = v
        .data()
        .iter()
        .zip(mask.data())
        .filter(|(_, &m)| m > 0.0)
        .map(|(&x, _)| x)
        .collect();
    if inside.is_empty() {
        return Err(Error::Preprocess("empty body mask".into()));
    }
    let lo = inside.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = percentile_lower(&mut inside, q);
    if !(hi > lo) {
        return Err(Error::Preprocess(format!(
            "degenerate intensity range: lower {lo}, upper percentile {hi}"
        )));
    }
    let (lo64, hi64) = (lo as f64, hi as f64);
    let out = v.map(v.modality(), |x| {
        (((x as f64).clamp(lo64, hi64) - lo64) / (hi64 - lo64)) as f32
    })?;
    let fitted = NormalizationSpec {
        fitted_lower: Some(lo64),
        fitted_upper: Some(hi64),
        ..*spec
    };
    Ok((out, fitted))
}

/// HU to `[-1, 1]` on a scalar, in double precision.
pub fn ct_to_unit(x: f64, hu_min: f64, hu_max: f64) -> f64 {
    2.0 * (x.clamp(hu_min, hu_max) - hu_min) / (hu_max - hu_min) - 1.0
}

/// Inverse of [`ct_to_unit`], clamped to `[hu_min, hu_max]`.
pub fn unit_to_ct(y: f64, hu_min: f64, hu_max: f64) -> f64 {
    ((y + 1.0) * 0.5 * (hu_max - hu_min) + hu_min).clamp(hu_min, hu_max)
}

pub fn normalize_ct(v: &Volume, spec: &NormalizationSpec) -> Result<Volume> {
    let (lo, hi) = spec.range()?;
    v.map(v.modality(), |x| ct_to_unit(x as f64, lo, hi) as f32)
}

/// Output is tagged `SCT` unless the input is already CT.
pub fn denormalize_ct(v: &Volume, spec: &NormalizationSpec) -> Result<Volume> {
    let (lo, hi) = spec.range()?;
    let modality = match v.modality() {
        Modality::Ct => Modality::Ct,
        _ => Modality::Sct,
    };
    v.map(modality, |y| unit_to_ct(y as f64, lo, hi) as f32)
}

/// Axis-aligned box, `lo` inclusive and `hi` exclusive, in `(D, H, W)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropBox {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
}

impl CropBox {
    pub fn full(shape: [usize; 3]) -> Self {
        Self {
            lo: [0; 3],
            hi: shape,
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        [0, 1, 2].map(|a| self.hi[a] - self.lo[a])
    }

    pub fn check(&self, shape: [usize; 3]) -> Result<()> {
        if (0..3).all(|a| self.lo[a] < self.hi[a] && self.hi[a] <= shape[a]) {
            Ok(())
        } else {
            Err(Error::Preprocess(format!(
                "crop box {self:?} exceeds bounds of shape {shape:?}"
            )))
        }
    }
}

pub fn foreground_box(mask: &Volume, margin_voxels: usize) -> Result<CropBox> {
    let s = mask.shape();
    let mut lo = s;
    let mut hi = [0usize; 3];
    let mut any = false;
    for d in 0..s[0] {
        for h in 0..s[1] {
            for w in 0..s[2] {
                if mask.get(d, h, w) != 0.0 {
                    any = true;
                    for (a, i) in [d, h, w].into_iter().enumerate() {
                        lo[a] = lo[a].min(i);
                        hi[a] = hi[a].max(i + 1);
                    }
                }
            }
        }
    }
    if !any {
        return Err(Error::Preprocess(
            "empty mask: no foreground to crop".into(),
        ));
    }
    Ok(CropBox {
        lo: lo.map(|l| l.saturating_sub(margin_voxels)),
        hi: [0, 1, 2].map(|a| (hi[a] + margin_voxels).min(s[a])),
    })
}

pub fn apply_crop(v: &Volume, b: &CropBox) -> Result<Volume> {
    b.check(v.shape())?;
    let out_shape = b.shape();
    let mut data = Vec::with_capacity(out_shape.iter().product());
    for d in b.lo[0]..b.hi[0] {
        for h in b.lo[1]..b.hi[1] {
            let start = v.index(d, h, b.lo[2]);
            data.extend_from_slice(&v.data()[start..start + out_shape[2]]);
        }
    }
    let sp = v.spacing();
    let origin = [0, 1, 2].map(|a| v.origin()[a] + b.lo[a] as f32 * sp[a]);
    Volume::new(data, out_shape, sp, origin, v.modality())
}

/// Places `v` back into a `full_shape` grid filled with `fill`.
pub fn uncrop(v: &Volume, b: &CropBox, full_shape: [usize; 3], fill: f32) -> Result<Volume> {
    b.check(full_shape)?;
    if b.shape() != v.shape() {
        return Err(Error::Preprocess(format!(
            "volume shape {:?} does not match crop box extent {:?}",
            v.shape(),
            b.shape()
        )));
    }
    let mut data = vec![fill; full_shape.iter().product()];
    let n = v.shape()[2];
    for (i, d) in (b.lo[0]..b.hi[0]).enumerate() {
        for (j, h) in (b.lo[1]..b.hi[1]).enumerate() {
            let dst = (d * full_shape[1] + h) * full_shape[2] + b.lo[2];
            let src = v.index(i, j, 0);
            data[dst..dst + n].copy_from_slice(&v.data()[src..src + n]);
        }
    }
    let sp = v.spacing();
    let origin = [0, 1, 2].map(|a| v.origin()[a] - b.lo[a] as f32 * sp[a]);
    Volume::new(data, full_shape, sp, origin, v.modality())
}

/// Everything needed to map a network output on the cropped grid back to
/// the original volume. Persisted as a JSON sidecar per case.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessRecord {
    pub input_spec: NormalizationSpec,
    pub ct_spec: NormalizationSpec,
    pub crop: CropBox,
    pub full_shape: [usize; 3],
    pub full_spacing: [f32; 3],
    pub full_origin: [f32; 3],
}

impl PreprocessRecord {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text =
            serde_json::to_string_pretty(self).map_err(|e| Error::Preprocess(e.to_string()))?;
        write_atomic(path.as_ref(), text.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

/// Normalizes input and target, then crops every volume of the case to the
/// body-mask bounding box.
pub fn preprocess_case(
    case: &CasePair,
    input_spec: &NormalizationSpec,
    ct_spec: &NormalizationSpec,
    margin_voxels: usize,
) -> Result<(CasePair, PreprocessRecord)> {
    ct_spec.range()?;
    let (input, fitted) = normalize_input(&case.input, &case.body_mask, input_spec)?;
    let target = case
        .target
        .as_ref()
        .map(|t| normalize_ct(t, ct_spec))
        .transpose()?;
    let crop = foreground_box(&case.body_mask, margin_voxels)?;
    let cropped = CasePair::new(
        case.case_id.clone(),
        apply_crop(&input, &crop)?,
        target.as_ref().map(|t| apply_crop(t, &crop)).transpose()?,
        apply_crop(&case.body_mask, &crop)?,
        case.seg_labels
            .as_ref()
            .map(|l| apply_crop(l, &crop))
            .transpose()?,
        case.region,
    )?;
    let record = PreprocessRecord {
        input_spec: fitted,
        ct_spec: *ct_spec,
        crop,
        full_shape: case.shape(),
        full_spacing: case.input.spacing(),
        full_origin: case.input.origin(),
    };
    Ok((cropped, record))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ct(values: Vec<f32>) -> Volume {
        let n = values.len();
        Volume::from_data(values, [1, 1, n], Modality::Ct).unwrap()
    }

    #[test]
    fn ct_range_endpoints_and_midpoints() {
        let s = NormalizationSpec::linear(-1024.0, 1000.0);
        let out = normalize_ct(&ct(vec![1000.0, -1024.0, -12.0, 5000.0]), &s).unwrap();
        assert_eq!(out.data(), &[1.0, -1.0, 0.0, 1.0]);
        let s2 = NormalizationSpec::linear(-1024.0, 1500.0);
        assert_eq!(normalize_ct(&ct(vec![238.0]), &s2).unwrap().data(), &[0.0]);
        let back = denormalize_ct(&ct(vec![0.0, 1.2, -3.0]), &s).unwrap();
        assert_eq!(back.data(), &[-12.0, 1000.0, -1024.0]);
        assert!(normalize_ct(&ct(vec![0.0]), &NormalizationSpec::linear(5.0, 5.0)).is_err());
    }

    #[test]
    fn scalar_ct_maps_invert_in_double_precision() {
        for (lo, hi) in [(-1024.0, 1000.0), (-1024.0, 1500.0)] {
            let mut x = lo;
            while x <= hi {
                assert!((unit_to_ct(ct_to_unit(x, lo, hi), lo, hi) - x).abs() < 1e-9);
                x += 0.25;
            }
        }
    }

    #[test]
    fn percentile_over_uniform_mask_interior() {
        // 0, 0.5, ..., 100 inside the mask; large outliers outside are ignored.
        let n = 201;
        let mut vals: Vec<f32> = (0..n).map(|i| i as f32 * 0.5).collect();
        vals.extend([1e6, -1e6]);
        let mut m = vec![1.0; n];
        m.extend([0.0, 0.0]);
        let v = Volume::from_data(vals, [1, 1, n + 2], Modality::Mri).unwrap();
        let mask = Volume::from_data(m, [1, 1, n + 2], Modality::Mask).unwrap();
        let (out, fitted) =
            normalize_input(&v, &mask, &NormalizationSpec::percentile(99.5)).unwrap();
        assert_eq!(fitted.fitted_upper, Some(99.5));
        assert_eq!(out.data()[0], 0.0);
        assert_eq!(out.data()[n - 1], 1.0);
        assert!(out.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn constant_input_is_degenerate() {
        let v = Volume::filled([2, 2, 2], 7.0, Modality::Mri).unwrap();
        let m = Volume::filled([2, 2, 2], 1.0, Modality::Mask).unwrap();
        let err = normalize_input(&v, &m, &NormalizationSpec::percentile(99.5)).unwrap_err();
        assert!(err.to_string().contains("degenerate intensity range"));
    }

    #[test]
    fn boxes_for_simple_masks() {
        let full = Volume::filled([8, 8, 8], 1.0, Modality::Mask).unwrap();
        assert_eq!(foreground_box(&full, 0).unwrap(), CropBox::full([8, 8, 8]));
        let point = Volume::from_fn([8, 8, 8], Modality::Mask, |d, h, w| {
            ((d, h, w) == (3, 4, 5)) as u8 as f32
        })
        .unwrap();
        let b = foreground_box(&point, 0).unwrap();
        assert_eq!((b.lo, b.hi), ([3, 4, 5], [4, 5, 6]));
        let b = foreground_box(&point, 4).unwrap();
        assert_eq!((b.lo, b.hi), ([0, 0, 1], [8, 8, 8]));
        assert!(
            foreground_box(&Volume::filled([2, 2, 2], 0.0, Modality::Mask).unwrap(), 0).is_err()
        );
    }

    #[test]
    fn sidecar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("norm.json");
        let mut s = NormalizationSpec::percentile(99.5);
        s.fitted_upper = Some(412.5);
        s.save(&p).unwrap();
        assert_eq!(NormalizationSpec::load(&p).unwrap(), s);
    }

    fn sparse_mask() -> impl Strategy<Value = (Volume, usize)> {
        ([1usize..7, 1usize..7, 1usize..7], any::<u64>(), 0usize..3).prop_map(
            |(shape, seed, margin)| {
                let mut x = seed | 1;
                let mut v = Volume::from_fn(shape, Modality::Mask, |_, _, _| {
                    x ^= x << 13;
                    x ^= x >> 7;
                    x ^= x << 17;
                    (x % 9 == 0) as u8 as f32
                })
                .unwrap();
                if v.data().iter().all(|&m| m == 0.0) {
                    let mut d = v.data().to_vec();
                    let i = (seed as usize) % d.len();
                    d[i] = 1.0;
                    v = v.with_data(d, Modality::Mask).unwrap();
                }
                (v, margin)
            },
        )
    }

    proptest! {
        #[test]
        fn box_matches_exhaustive_scan((mask, margin) in sparse_mask()) {
            let b = foreground_box(&mask, margin).unwrap();
            let s = mask.shape();
            let mut lo = [usize::MAX; 3];
            let mut hi = [0; 3];
            for (i, &m) in mask.data().iter().enumerate() {
                if m != 0.0 {
                    let idx = [i / (s[1] * s[2]), (i / s[2]) % s[1], i % s[2]];
                    for a in 0..3 {
                        lo[a] = lo[a].min(idx[a]);
                        hi[a] = hi[a].max(idx[a] + 1);
                    }
                }
            }
            for a in 0..3 {
                prop_assert_eq!(b.lo[a], lo[a].saturating_sub(margin));
                prop_assert_eq!(b.hi[a], (hi[a] + margin).min(s[a]));
            }
        }

        #[test]
        fn crop_uncrop_round_trip(
            shape in [2usize..9, 2usize..9, 2usize..9],
            corners in prop::array::uniform3((0usize..100, 0usize..100)),
        ) {
            let v = Volume::from_fn(shape, Modality::Ct, |d, h, w| (d * 100 + h * 10 + w) as f32).unwrap();
            let mut b = CropBox::full(shape);
            for a in 0..3 {
                let (p, q) = (corners[a].0 % shape[a], corners[a].1 % shape[a]);
                b.lo[a] = p.min(q);
                b.hi[a] = p.max(q) + 1;
            }
            let back = uncrop(&apply_crop(&v, &b).unwrap(), &b, shape, -1024.0).unwrap();
            prop_assert_eq!(back.origin(), v.origin());
            for d in 0..shape[0] {
                for h in 0..shape[1] {
                    for w in 0..shape[2] {
                        let inside = (b.lo[0]..b.hi[0]).contains(&d)
                            && (b.lo[1]..b.hi[1]).contains(&h)
                            && (b.lo[2]..b.hi[2]).contains(&w);
                        let want = if inside { v.get(d, h, w) } else { -1024.0 };
                        prop_assert_eq!(back.get(d, h, w), want);
                    }
                }
            }
        }

        #[test]
        fn normalized_input_stays_in_unit_range(vals in prop::collection::vec(-500f32..3000.0, 8)) {
            prop_assume!(vals.iter().any(|&x| x != vals[0]));
            let v = Volume::from_data(vals, [2, 2, 2], Modality::Mri).unwrap();
            let m = Volume::filled([2, 2, 2], 1.0, Modality::Mask).unwrap();
            match normalize_input(&v, &m, &NormalizationSpec::percentile(99.5)) {
                Ok((out, _)) => prop_assert!(out.data().iter().all(|&x| (0.0..=1.0).contains(&x))),
                Err(e) => prop_assert!(e.to_string().contains("degenerate")),
            }
        }
    }
}
