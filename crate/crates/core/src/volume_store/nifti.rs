//! Minimal NIfTI-1 single-file (`n+1`) codec, optionally gzip-compressed.
//!
//! Files store `i` (fastest) = W, `j` = H, `k` = D, which is exactly the
//! row-major `(D, H, W)` layout used in memory, so no reordering happens.
//! Spacing comes from `pixdim`, origin from the sform translation (or the
//! qform offset when no sform is present). The modality is kept in
//! `intent_name` as `ganext:<TAG>`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use super::{write_atomic, Modality, Volume};
use crate::error::{Error, Result};

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;
const MODALITY_PREFIX: &str = "ganext:";

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_INT32: i16 = 8;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;
const DT_INT8: i16 = 256;
const DT_UINT16: i16 = 512;
const DT_UINT32: i16 = 768;

struct Reader<'a> {
    bytes: &'a [u8],
    big_endian: bool,
}

impl Reader<'_> {
    fn arr<const N: usize>(&self, at: usize) -> [u8; N] {
        let mut a = [0u8; N];
        a.copy_from_slice(&self.bytes[at..at + N]);
        if self.big_endian {
            a.reverse();
        }
        a
    }
    fn i16(&self, at: usize) -> i16 {
        i16::from_le_bytes(self.arr(at))
    }
    fn i32(&self, at: usize) -> i32 {
        i32::from_le_bytes(self.arr(at))
    }
    fn f32(&self, at: usize) -> f32 {
        f32::from_le_bytes(self.arr(at))
    }
}

fn bad(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Reads a volume. `fallback` is used when the file carries no modality tag.
pub fn read_nifti(path: &Path, fallback: Option<Modality>) -> Result<Volume> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bytes = if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| bad(path, format!("corrupt gzip stream: {e}")))?;
        out
    } else {
        raw
    };
    decode(&bytes, fallback).map_err(|reason| bad(path, reason))
}

fn decode(bytes: &[u8], fallback: Option<Modality>) -> std::result::Result<Volume, String> {
    if bytes.len() < HEADER_SIZE {
        return Err("corrupt header: file shorter than a NIfTI-1 header".into());
    }
    let big_endian = match (
        i32::from_le_bytes(bytes[0..4].try_into().unwrap()),
        i32::from_be_bytes(bytes[0..4].try_into().unwrap()),
    ) {
        (348, _) => false,
        (_, 348) => true,
        _ => return Err("corrupt header: sizeof_hdr is not 348".into()),
    };
    let r = Reader { bytes, big_endian };
    if &bytes[344..347] != b"n+1" {
        return Err("corrupt header: magic is not \"n+1\"".into());
    }
    let ndim = r.i16(40);
    if !(1..=7).contains(&ndim) {
        return Err(format!("corrupt header: dim[0] = {ndim}"));
    }
    let dims: Vec<i64> = (1..=ndim as usize)
        .map(|i| r.i16(40 + 2 * i) as i64)
        .collect();
    if ndim < 3 || dims[3..].iter().any(|&d| d != 1) {
        return Err(format!("non-3D payload with dims {dims:?}"));
    }
    if dims[..3].iter().any(|&d| d <= 0) {
        return Err(format!("corrupt header: non-positive extent in {dims:?}"));
    }
    let (nw, nh, nd) = (dims[0] as usize, dims[1] as usize, dims[2] as usize);
    let spacing = [r.f32(76 + 12), r.f32(76 + 8), r.f32(76 + 4)];
    if spacing.iter().any(|&s| !(s > 0.0)) {
        return Err(format!("non-positive spacing {spacing:?}"));
    }
    let sform_code = r.i16(254);
    let qform_code = r.i16(252);
    let origin = if sform_code > 0 {
        [r.f32(312 + 12), r.f32(296 + 12), r.f32(280 + 12)]
    } else if qform_code > 0 {
        [r.f32(276), r.f32(272), r.f32(268)]
    } else {
        [0.0; 3]
    };
    let datatype = r.i16(70);
    let vox_offset = r.f32(108).max(VOX_OFFSET as f32) as usize;
    let n = nw * nh * nd;
    let width = match datatype {
        DT_UINT8 | DT_INT8 => 1,
        DT_INT16 | DT_UINT16 => 2,
        DT_INT32 | DT_UINT32 | DT_FLOAT32 => 4,
        DT_FLOAT64 => 8,
        other => return Err(format!("unsupported datatype code {other}")),
    };
    let payload = bytes
        .get(vox_offset..vox_offset + n * width)
        .ok_or_else(|| "truncated voxel data".to_string())?;
    let pr = Reader {
        bytes: payload,
        big_endian,
    };
    let mut data: Vec<f32> = (0..n)
        .map(|i| {
            let at = i * width;
            match datatype {
                DT_UINT8 => payload[at] as f32,
                DT_INT8 => payload[at] as i8 as f32,
                DT_INT16 => pr.i16(at) as f32,
                DT_UINT16 => u16::from_le_bytes(pr.arr(at)) as f32,
                DT_INT32 => pr.i32(at) as f32,
                DT_UINT32 => u32::from_le_bytes(pr.arr(at)) as f32,
                DT_FLOAT32 => pr.f32(at),
                _ => f64::from_le_bytes(pr.arr(at)) as f32,
            }
        })
        .collect();
    let (slope, inter) = (r.f32(112), r.f32(116));
    if slope != 0.0 && !(slope == 1.0 && inter == 0.0) {
        data.iter_mut().for_each(|v| *v = *v * slope + inter);
    }
    let intent = &bytes[328..344];
    let tag_end = intent.iter().position(|&b| b == 0).unwrap_or(16);
    let tag = std::str::from_utf8(&intent[..tag_end]).unwrap_or("");
    let modality = tag
        .strip_prefix(MODALITY_PREFIX)
        .and_then(Modality::from_tag)
        .or(fallback)
        .unwrap_or(Modality::Mri);
    Volume::new(data, [nd, nh, nw], spacing, origin, modality).map_err(|e| e.to_string())
}

fn encode(v: &Volume) -> Vec<u8> {
    let [nd, nh, nw] = v.shape();
    let [sd, sh, sw] = v.spacing();
    let [od, oh, ow] = v.origin();
    let mut h = vec![0u8; VOX_OFFSET];
    let put = |h: &mut Vec<u8>, at: usize, b: &[u8]| h[at..at + b.len()].copy_from_slice(b);
    put(&mut h, 0, &(HEADER_SIZE as i32).to_le_bytes());
    h[38] = b'r';
    for (i, d) in [3i16, nw as i16, nh as i16, nd as i16, 1, 1, 1, 1]
        .iter()
        .enumerate()
    {
        put(&mut h, 40 + 2 * i, &d.to_le_bytes());
    }
    put(&mut h, 70, &DT_FLOAT32.to_le_bytes());
    put(&mut h, 72, &32i16.to_le_bytes());
    for (i, p) in [1.0f32, sw, sh, sd, 0.0, 0.0, 0.0, 0.0].iter().enumerate() {
        put(&mut h, 76 + 4 * i, &p.to_le_bytes());
    }
    put(&mut h, 108, &(VOX_OFFSET as f32).to_le_bytes());
    put(&mut h, 112, &1.0f32.to_le_bytes());
    h[123] = 2; // millimetres
    put(&mut h, 148, b"ganext");
    put(&mut h, 254, &1i16.to_le_bytes());
    for (row, vals) in [
        (280, [sw, 0.0, 0.0, ow]),
        (296, [0.0, sh, 0.0, oh]),
        (312, [0.0, 0.0, sd, od]),
    ] {
        for (i, x) in vals.iter().enumerate() {
            put(&mut h, row + 4 * i, &x.to_le_bytes());
        }
    }
    let tag = format!("{MODALITY_PREFIX}{}", v.modality().tag());
    put(&mut h, 328, tag.as_bytes());
    put(&mut h, 344, b"n+1\0");
    h.reserve(v.len() * 4);
    for x in v.data() {
        h.extend_from_slice(&x.to_le_bytes());
    }
    h
}

/// Writes float32 data; `.gz` paths are gzip-compressed.
pub fn write_nifti(v: &Volume, path: &Path) -> Result<()> {
    let raw = encode(v);
    let bytes = if path.extension().is_some_and(|e| e == "gz") {
        let mut enc = GzEncoder::new(Vec::new(), Compression::fast());
        enc.write_all(&raw).map_err(|e| Error::io(path, e))?;
        enc.finish().map_err(|e| Error::io(path, e))?
    } else {
        raw
    };
    write_atomic(path, &bytes)
}
