//! Masked image-similarity metrics in HU space and report aggregation.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::volume_store::{CasePair, Volume};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
/// A window center counts as inside the mask when the mask, average-pooled
/// to the current scale, is at least this value there.
pub const MASK_CENTER_THRESHOLD: f64 = 0.5;

/// Peak value used by PSNR.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PsnrRange {
    /// `max(gt) - min(gt)` over the mask interior.
    #[default]
    GtMask,
    Fixed(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct MetricConfig {
    #[serde(default)]
    pub psnr_range: PsnrRange,
}

impl MetricConfig {
    /// Short content hash of every setting that affects metric values.
    pub fn digest(&self) -> String {
        let text = format!(
            "mae;psnr={:?};ms_ssim:win={SSIM_WINDOW},sigma={SSIM_SIGMA},k1={SSIM_K1},k2={SSIM_K2},\
             weights={MS_SSIM_WEIGHTS:?},center>={MASK_CENTER_THRESHOLD},pool=avg2floor",
            self.psnr_range
        );
        hex::encode(&Sha256::digest(text.as_bytes())[..8])
    }
}

fn check_aligned(pred: &Volume, gt: &Volume, mask: &Volume) -> Result<usize> {
    if pred.shape() != gt.shape() || mask.shape() != gt.shape() {
        return Err(Error::Metric(format!(
            "shape mismatch: pred {:?}, gt {:?}, mask {:?}",
            pred.shape(),
            gt.shape(),
            mask.shape()
        )));
    }
    let n = mask.data().iter().filter(|&&m| m > 0.0).count();
    if n == 0 {
        return Err(Error::Metric("empty mask".into()));
    }
    Ok(n)
}

fn interior<'a>(
    pred: &'a Volume,
    gt: &'a Volume,
    mask: &'a Volume,
) -> impl Iterator<Item = (f64, f64)> + 'a {
    pred.data()
        .iter()
        .zip(gt.data())
        .zip(mask.data())
        .filter(|(_, &m)| m > 0.0)
        .map(|((&p, &g), _)| (p as f64, g as f64))
}

pub fn masked_mae(pred: &Volume, gt: &Volume, mask: &Volume) -> Result<f64> {
    let n = check_aligned(pred, gt, mask)?;
    Ok(interior(pred, gt, mask)
        .map(|(p, g)| (p - g).abs())
        .sum::<f64>()
        / n as f64)
}

pub fn gt_range(gt: &Volume, mask: &Volume) -> Result<f64> {
    check_aligned(gt, gt, mask)?;
    let (lo, hi) = interior(gt, gt, mask)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (g, _)| {
            (lo.min(g), hi.max(g))
        });
    Ok(hi - lo)
}

/// PSNR with the ground-truth range inside the mask as peak. Returns
/// `f64::INFINITY` when the error is zero.
pub fn masked_psnr(pred: &Volume, gt: &Volume, mask: &Volume) -> Result<f64> {
    masked_psnr_with(pred, gt, mask, PsnrRange::GtMask)
}

pub fn masked_psnr_with(
    pred: &Volume,
    gt: &Volume,
    mask: &Volume,
    range: PsnrRange,
) -> Result<f64> {
    let n = check_aligned(pred, gt, mask)?;
    let peak = match range {
        PsnrRange::GtMask => gt_range(gt, mask)?,
        PsnrRange::Fixed(r) => r,
    };
    if !(peak > 0.0) {
        return Err(Error::Metric(
            "constant ground truth inside the mask: PSNR undefined".into(),
        ));
    }
    let mse = interior(pred, gt, mask)
        .map(|(p, g)| (p - g).powi(2))
        .sum::<f64>()
        / n as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// Number of dyadic scales a volume of `shape` supports, at most five.
pub fn ms_ssim_scales(shape: [usize; 3]) -> usize {
    let min_dim = *shape.iter().min().unwrap();
    (1..=MS_SSIM_WEIGHTS.len())
        .take_while(|&s| min_dim >= SSIM_WINDOW << (s - 1))
        .last()
        .unwrap_or(0)
}

/// The first `scales` standard weights, rescaled to sum to one.
pub fn ms_ssim_weights(scales: usize) -> Vec<f64> {
    let w = &MS_SSIM_WEIGHTS[..scales];
    let total: f64 = w.iter().sum();
    w.iter().map(|x| x / total).collect()
}

pub fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut g = [0.0; SSIM_WINDOW];
    for (i, v) in g.iter_mut().enumerate() {
        *v = (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.map(|v| v / s)
}

/// Valid correlation with the Gaussian window along each axis in turn.
fn filter_valid(x: &[f64], shape: [usize; 3], g: &[f64; SSIM_WINDOW]) -> (Vec<f64>, [usize; 3]) {
    let mut cur = x.to_vec();
    let mut s = shape;
    for axis in 0..3 {
        let mut out_shape = s;
        out_shape[axis] = s[axis] + 1 - SSIM_WINDOW;
        let in_strides = [s[1] * s[2], s[2], 1];
        let mut out = Vec::with_capacity(out_shape.iter().product());
        for d in 0..out_shape[0] {
            for h in 0..out_shape[1] {
                for w in 0..out_shape[2] {
                    let base = d * in_strides[0] + h * in_strides[1] + w;
                    let mut acc = 0.0;
                    for (k, &gk) in g.iter().enumerate() {
                        acc += gk * cur[base + k * in_strides[axis]];
                    }
                    out.push(acc);
                }
            }
        }
        cur = out;
        s = out_shape;
    }
    (cur, s)
}

fn avg_pool2(x: &[f64], s: [usize; 3]) -> (Vec<f64>, [usize; 3]) {
    let o = s.map(|n| n / 2);
    let mut out = Vec::with_capacity(o.iter().product());
    for d in 0..o[0] {
        for h in 0..o[1] {
            for w in 0..o[2] {
                let mut acc = 0.0;
                for (a, b, c) in (0..8).map(|i| (i >> 2, (i >> 1) & 1, i & 1)) {
                    acc += x[((2 * d + a) * s[1] + 2 * h + b) * s[2] + 2 * w + c];
                }
                out.push(acc / 8.0);
            }
        }
    }
    (out, o)
}

/// Mean contrast-structure and full SSIM over mask-interior window centers
/// at one scale.
fn ssim_terms(
    x: &[f64],
    y: &[f64],
    m: &[f64],
    s: [usize; 3],
    c1: f64,
    c2: f64,
) -> Result<(f64, f64)> {
    let g = gaussian_window();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let (mx, o) = filter_valid(x, s, &g);
    let (my, _) = filter_valid(y, s, &g);
    let (exx, _) = filter_valid(&xx, s, &g);
    let (eyy, _) = filter_valid(&yy, s, &g);
    let (exy, _) = filter_valid(&xy, s, &g);
    let r = SSIM_WINDOW / 2;
    let (mut cs_sum, mut ssim_sum, mut n) = (0.0, 0.0, 0usize);
    for d in 0..o[0] {
        for h in 0..o[1] {
            for w in 0..o[2] {
                if m[((d + r) * s[1] + h + r) * s[2] + w + r] < MASK_CENTER_THRESHOLD {
                    continue;
                }
                let i = (d * o[1] + h) * o[2] + w;
                let vx = exx[i] - mx[i] * mx[i];
                let vy = eyy[i] - my[i] * my[i];
                let cov = exy[i] - mx[i] * my[i];
                let cs = (2.0 * cov + c2) / (vx + vy + c2);
                let l = (2.0 * mx[i] * my[i] + c1) / (mx[i] * mx[i] + my[i] * my[i] + c1);
                cs_sum += cs;
                ssim_sum += l * cs;
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::Metric(format!(
            "no window center inside the mask at scale shape {s:?}"
        )));
    }
    Ok((cs_sum / n as f64, ssim_sum / n as f64))
}

/// Combines per-scale terms as a weighted geometric mean of magnitudes. The
/// result is negated when any term is negative so anti-correlated inputs
/// score below zero.
pub fn combine_scales(terms: &[f64], weights: &[f64]) -> f64 {
    let magnitude: f64 = terms
        .iter()
        .zip(weights)
        .map(|(t, w)| t.abs().powf(*w))
        .product();
    if terms.iter().any(|&t| t < 0.0) {
        -magnitude
    } else {
        magnitude
    }
}

/// 3D MS-SSIM of `pred` against `gt`, both multiplied by the mask, with
/// statistics taken over windows centered inside the mask. The data range is
/// the ground-truth range inside the mask.
pub fn masked_ms_ssim(pred: &Volume, gt: &Volume, mask: &Volume) -> Result<f64> {
    check_aligned(pred, gt, mask)?;
    let s0 = gt.shape();
    let scales = ms_ssim_scales(s0);
    if scales == 0 {
        return Err(Error::Metric(format!(
            "volume {s0:?} smaller than one {SSIM_WINDOW}-voxel window"
        )));
    }
    let range = gt_range(gt, mask)?;
    let range = if range > 0.0 { range } else { 1.0 };
    let (c1, c2) = ((SSIM_K1 * range).powi(2), (SSIM_K2 * range).powi(2));
    let m0: Vec<f64> = mask
        .data()
        .iter()
        .map(|&v| if v > 0.0 { 1.0 } else { 0.0 })
        .collect();
    let mut x: Vec<f64> = pred
        .data()
        .iter()
        .zip(&m0)
        .map(|(&p, m)| p as f64 * m)
        .collect();
    let mut y: Vec<f64> = gt
        .data()
        .iter()
        .zip(&m0)
        .map(|(&g, m)| g as f64 * m)
        .collect();
    let mut m = m0;
    let mut s = s0;
    let mut terms = Vec::with_capacity(scales);
    for scale in 0..scales {
        let (cs, ssim) = ssim_terms(&x, &y, &m, s, c1, c2)?;
        if scale + 1 == scales {
            terms.push(ssim);
        } else {
            terms.push(cs);
            (x, _) = avg_pool2(&x, s);
            (y, _) = avg_pool2(&y, s);
            (m, s) = avg_pool2(&m, s);
        }
    }
    Ok(combine_scales(&terms, &ms_ssim_weights(scales)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub case_id: String,
    pub mae_hu: f64,
    pub psnr_db: f64,
    pub ms_ssim: f64,
    pub mask_voxels: usize,
    pub metric_config_digest: String,
}

pub const REPORT_CSV_HEADER: &str = "case_id,mae,psnr,ms_ssim,mask_voxels,metric_config_digest";

impl MetricReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.8},{},{}",
            self.case_id,
            self.mae_hu,
            self.psnr_db,
            self.ms_ssim,
            self.mask_voxels,
            self.metric_config_digest
        )
    }
}

/// Scores a synthesized HU volume against the case's target CT inside its
/// body mask.
pub fn evaluate_case(pred: &Volume, case: &CasePair, cfg: &MetricConfig) -> Result<MetricReport> {
    let gt = case
        .target
        .as_ref()
        .ok_or_else(|| Error::Metric(format!("case {} has no target CT", case.case_id)))?;
    let mask = &case.body_mask;
    let mask_voxels = check_aligned(pred, gt, mask)?;
    Ok(MetricReport {
        case_id: case.case_id.clone(),
        mae_hu: masked_mae(pred, gt, mask)?,
        psnr_db: masked_psnr_with(pred, gt, mask, cfg.psnr_range)?,
        ms_ssim: masked_ms_ssim(pred, gt, mask)?,
        mask_voxels,
        metric_config_digest: cfg.digest(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Result<Self> {
        let v: Vec<f64> = values.into_iter().collect();
        if v.is_empty() {
            return Err(Error::Metric("no values to aggregate".into()));
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let std = if mean.is_finite() {
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
        } else {
            f64::NAN
        };
        Ok(Self { mean, std })
    }
}

impl std::fmt::Display for MeanStd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.4}±{:.4}", self.mean, self.std)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub cases: usize,
    pub mae: MeanStd,
    pub psnr: MeanStd,
    pub ms_ssim: MeanStd,
}

pub fn aggregate(reports: &[MetricReport]) -> Result<MetricSummary> {
    if reports.is_empty() {
        return Err(Error::Metric("empty report list".into()));
    }
    Ok(MetricSummary {
        cases: reports.len(),
        mae: MeanStd::of(reports.iter().map(|r| r.mae_hu))?,
        psnr: MeanStd::of(reports.iter().map(|r| r.psnr_db))?,
        ms_ssim: MeanStd::of(reports.iter().map(|r| r.ms_ssim))?,
    })
}

/// Markdown table with one mean±std row per labelled summary.
pub fn format_table(rows: &[(&str, MetricSummary)]) -> String {
    let mut out = String::from("| Model | MAE ↓ | PSNR ↑ | MS-SSIM ↑ |\n|---|---|---|---|\n");
    for (label, s) in rows {
        out.push_str(&format!(
            "| {label} | {} | {} | {} |\n",
            s.mae, s.psnr, s.ms_ssim
        ));
    }
    out
}
