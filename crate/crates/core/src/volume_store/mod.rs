//! Volumes, paired cases and train/validation splits.
//!
//! All grids use `(D, H, W)` = (slice, row, column) order, row-major, so the
//! last index varies fastest. Spacing and origin follow the same axis order.

mod nifti;
mod split;

use std::collections::VecDeque;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use nifti::{read_nifti, write_nifti};
pub use split::{make_split, make_stratified_split, read_manifest, write_manifest, SplitManifest};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Modality {
    Mri,
    Cbct,
    Ct,
    Sct,
    Mask,
    Labels,
}

impl Modality {
    pub fn tag(self) -> &'static str {
        match self {
            Modality::Mri => "MRI",
            Modality::Cbct => "CBCT",
            Modality::Ct => "CT",
            Modality::Sct => "SCT",
            Modality::Mask => "MASK",
            Modality::Labels => "LABELS",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        [
            Modality::Mri,
            Modality::Cbct,
            Modality::Ct,
            Modality::Sct,
            Modality::Mask,
            Modality::Labels,
        ]
        .into_iter()
        .find(|m| m.tag() == tag)
    }

    /// Masks and label maps are resampled with nearest neighbour and padded
    /// with zero.
    pub fn is_discrete(self) -> bool {
        matches!(self, Modality::Mask | Modality::Labels)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum Region {
    HeadNeck,
    Thorax,
    Abdomen,
    #[default]
    Other,
}

/// A 3D scalar grid with physical geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    data: Vec<f32>,
    shape: [usize; 3],
    spacing: [f32; 3],
    origin: [f32; 3],
    modality: Modality,
}

impl Volume {
    pub fn new(
        data: Vec<f32>,
        shape: [usize; 3],
        spacing: [f32; 3],
        origin: [f32; 3],
        modality: Modality,
    ) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Volume(format!("empty extent in shape {shape:?}")));
        }
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::Volume(format!(
                "{} voxels do not fill shape {shape:?}",
                data.len()
            )));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Volume(format!("non-positive spacing {spacing:?}")));
        }
        match modality {
            Modality::Mask if data.iter().any(|&v| v != 0.0 && v != 1.0) => {
                return Err(Error::Volume(
                    "mask volume holds values other than 0 and 1".into(),
                ));
            }
            Modality::Labels if data.iter().any(|&v| v < 0.0 || v.fract() != 0.0) => {
                return Err(Error::Volume(
                    "label volume holds non-integer or negative values".into(),
                ));
            }
            _ => {}
        }
        Ok(Self {
            data,
            shape,
            spacing,
            origin,
            modality,
        })
    }

    /// Unit spacing, zero origin.
    pub fn from_data(data: Vec<f32>, shape: [usize; 3], modality: Modality) -> Result<Self> {
        Self::new(data, shape, [1.0; 3], [0.0; 3], modality)
    }

    pub fn filled(shape: [usize; 3], value: f32, modality: Modality) -> Result<Self> {
        Self::from_data(vec![value; shape.iter().product()], shape, modality)
    }

    pub fn from_fn(
        shape: [usize; 3],
        modality: Modality,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(shape.iter().product());
        for d in 0..shape[0] {
            for h in 0..shape[1] {
                for w in 0..shape[2] {
                    data.push(f(d, h, w));
                }
            }
        }
        Self::from_data(data, shape, modality)
    }

    /// New data on this volume's grid.
    pub fn with_data(&self, data: Vec<f32>, modality: Modality) -> Result<Self> {
        Self::new(data, self.shape, self.spacing, self.origin, modality)
    }

    /// New data and shape, keeping spacing and origin.
    pub fn reshaped(&self, data: Vec<f32>, shape: [usize; 3]) -> Result<Self> {
        Self::new(data, shape, self.spacing, self.origin, self.modality)
    }

    pub fn map(&self, modality: Modality, f: impl Fn(f32) -> f32) -> Result<Self> {
        self.with_data(self.data.iter().map(|&v| f(v)).collect(), modality)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn origin(&self) -> [f32; 3] {
        self.origin
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn set_modality(&mut self, modality: Modality) -> Result<()> {
        *self = Self::new(
            self.data.clone(),
            self.shape,
            self.spacing,
            self.origin,
            modality,
        )?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, d: usize, h: usize, w: usize) -> usize {
        (d * self.shape[1] + h) * self.shape[2] + w
    }

    #[inline]
    pub fn get(&self, d: usize, h: usize, w: usize) -> f32 {
        self.data[self.index(d, h, w)]
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn same_grid(&self, other: &Volume) -> bool {
        self.shape == other.shape && self.spacing == other.spacing
    }
}

/// One paired case: input modality, target CT and the masks that go with it.
#[derive(Clone, Debug)]
pub struct CasePair {
    pub case_id: String,
    pub input: Volume,
    pub target: Option<Volume>,
    pub body_mask: Volume,
    pub seg_labels: Option<Volume>,
    pub region: Region,
}

impl CasePair {
    pub fn new(
        case_id: impl Into<String>,
        input: Volume,
        target: Option<Volume>,
        body_mask: Volume,
        seg_labels: Option<Volume>,
        region: Region,
    ) -> Result<Self> {
        let case = Self {
            case_id: case_id.into(),
            input,
            target,
            body_mask,
            seg_labels,
            region,
        };
        case.validate()?;
        Ok(case)
    }

    pub fn validate(&self) -> Result<()> {
        let check = |v: &Volume, what: &str| {
            if v.same_grid(&self.input) {
                Ok(())
            } else {
                Err(Error::Volume(format!(
                    "case {}: {what} grid {:?}/{:?} differs from input {:?}/{:?}",
                    self.case_id,
                    v.shape(),
                    v.spacing(),
                    self.input.shape(),
                    self.input.spacing()
                )))
            }
        };
        if let Some(t) = &self.target {
            check(t, "target")?;
        }
        check(&self.body_mask, "body mask")?;
        if self.body_mask.modality() != Modality::Mask {
            return Err(Error::Volume(format!(
                "case {}: body mask is not a MASK volume",
                self.case_id
            )));
        }
        if let Some(l) = &self.seg_labels {
            check(l, "labels")?;
        }
        Ok(())
    }

    pub fn shape(&self) -> [usize; 3] {
        self.input.shape()
    }
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    read_nifti(path.as_ref(), None)
}

/// Loads a volume and tags it with `modality` when the file carries no tag.
pub fn load_volume_as(path: impl AsRef<Path>, modality: Modality) -> Result<Volume> {
    read_nifti(path.as_ref(), Some(modality))
}

/// Writes atomically (temporary file, then rename).
pub fn write_volume(volume: &Volume, path: impl AsRef<Path>) -> Result<()> {
    write_nifti(volume, path.as_ref())
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Per-case metadata stored next to the volumes.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseInfo {
    #[serde(default)]
    pub region: Region,
    pub input_modality: Modality,
}

pub const INPUT_FILE: &str = "input";
pub const TARGET_FILE: &str = "target";
pub const MASK_FILE: &str = "mask";
pub const LABELS_FILE: &str = "labels";
pub const CASE_INFO_FILE: &str = "case.toml";

fn find_volume(dir: &Path, stem: &str) -> Option<PathBuf> {
    ["nii", "nii.gz"]
        .iter()
        .map(|ext| dir.join(format!("{stem}.{ext}")))
        .find(|p| p.is_file())
}

/// Loads a case directory holding `input`, optional `target`, `mask`,
/// `labels` volumes (`.nii` or `.nii.gz`) and an optional `case.toml`.
/// A missing mask is synthesized from the input.
pub fn load_case(dir: impl AsRef<Path>) -> Result<CasePair> {
    let dir = dir.as_ref();
    let case_id = dir
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::Volume(format!("bad case directory {}", dir.display())))?
        .to_string();
    let info_path = dir.join(CASE_INFO_FILE);
    let info: Option<CaseInfo> = if info_path.is_file() {
        let text = fs::read_to_string(&info_path).map_err(|e| Error::io(&info_path, e))?;
        Some(toml::from_str(&text).map_err(|e| Error::Format {
            path: info_path.clone(),
            reason: e.to_string(),
        })?)
    } else {
        None
    };
    let input_path = find_volume(dir, INPUT_FILE).ok_or_else(|| Error::Format {
        path: dir.join(INPUT_FILE),
        reason: "missing input volume".into(),
    })?;
    let input_modality = info
        .as_ref()
        .map(|i| i.input_modality)
        .unwrap_or(Modality::Mri);
    let input = load_volume_as(&input_path, input_modality)?;
    let target = find_volume(dir, TARGET_FILE)
        .map(|p| load_volume_as(p, Modality::Ct))
        .transpose()?;
    let body_mask = match find_volume(dir, MASK_FILE) {
        Some(p) => load_volume_as(p, Modality::Mask)?,
        None => synthesize_body_mask(&input)?,
    };
    let seg_labels = find_volume(dir, LABELS_FILE)
        .map(|p| load_volume_as(p, Modality::Labels))
        .transpose()?;
    let region = info.map(|i| i.region).unwrap_or_default();
    CasePair::new(case_id, input, target, body_mask, seg_labels, region)
}

/// Writes a case directory in the layout read by [`load_case`].
pub fn write_case(case: &CasePair, root: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = root.as_ref().join(&case.case_id);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_volume(&case.input, dir.join(format!("{INPUT_FILE}.nii")))?;
    if let Some(t) = &case.target {
        write_volume(t, dir.join(format!("{TARGET_FILE}.nii")))?;
    }
    write_volume(&case.body_mask, dir.join(format!("{MASK_FILE}.nii")))?;
    if let Some(l) = &case.seg_labels {
        write_volume(l, dir.join(format!("{LABELS_FILE}.nii")))?;
    }
    let info = CaseInfo {
        region: case.region,
        input_modality: case.input.modality(),
    };
    let text = toml::to_string(&info).map_err(|e| Error::Config(e.to_string()))?;
    write_atomic(&dir.join(CASE_INFO_FILE), text.as_bytes())?;
    Ok(dir)
}

/// Case directories under `root`, sorted by name.
pub fn list_cases(root: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let root = root.as_ref();
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && find_volume(p, INPUT_FILE).is_some())
        .collect();
    dirs.sort();
    Ok(dirs)
}

/// Foreground = voxels above the global minimum, reduced to the largest
/// 6-connected component.
pub fn synthesize_body_mask(image: &Volume) -> Result<Volume> {
    let (lo, _) = image.min_max();
    let fg: Vec<bool> = image.data().iter().map(|&v| v > lo).collect();
    let keep = largest_component(&fg, image.shape());
    image.with_data(
        keep.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        Modality::Mask,
    )
}

fn largest_component(fg: &[bool], shape: [usize; 3]) -> Vec<bool> {
    let [d, h, w] = shape;
    let mut label = vec![0u32; fg.len()];
    let mut best = (0u32, 0usize);
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..fg.len() {
        if !fg[start] || label[start] != 0 {
            continue;
        }
        next += 1;
        label[start] = next;
        queue.push_back(start);
        let mut size = 0usize;
        while let Some(i) = queue.pop_front() {
            size += 1;
            let (z, y, x) = (i / (h * w), (i / w) % h, i % w);
            let mut visit = |j: usize| {
                if fg[j] && label[j] == 0 {
                    label[j] = next;
                    queue.push_back(j);
                }
            };
            if z > 0 {
                visit(i - h * w);
            }
            if z + 1 < d {
                visit(i + h * w);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
        }
        if size > best.1 {
            best = (next, size);
        }
    }
    label.iter().map(|&l| l != 0 && l == best.0).collect()
}
