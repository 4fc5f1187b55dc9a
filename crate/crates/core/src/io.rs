//! Volume, field and mask files, plus 8-bit slice export.
//!
//! Two volume formats are supported:
//!
//! * **raw**: a little-endian payload next to a JSON sidecar named
//!   `<payload>.json` holding `{dims, spacing, dtype, intensity_range}`.
//!   Writers always emit `float32`; readers also accept `int16` and `uint8`,
//!   in which case a present `intensity_range = [lo, hi]` requests mapping
//!   `lo..hi` onto `0..1`.
//! * **nifti1**: single-file uncompressed NIfTI-1 (`n+1` magic, no
//!   extensions), little-endian, `float32` or `int16` data. For `int16`
//!   data, `cal_max > cal_min` requests the same `0..1` mapping.
//!
//! Displacement fields use the raw layout with three consecutive component
//! planes (x, then y, then z) and a sidecar carrying the convention tag.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::VectorField;
use crate::volume::{Dims, LabelMask, Volume3D};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VolumeFormat {
    Raw,
    Nifti1,
}

impl VolumeFormat {
    /// `.nii` selects NIfTI-1, anything else the raw format.
    pub fn from_path(path: &Path) -> VolumeFormat {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("nii") => VolumeFormat::Nifti1,
            _ => VolumeFormat::Raw,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScalarType {
    Float32,
    Int16,
    Uint8,
}

impl ScalarType {
    fn size(self) -> usize {
        match self {
            ScalarType::Float32 => 4,
            ScalarType::Int16 => 2,
            ScalarType::Uint8 => 1,
        }
    }

    fn is_integer(self) -> bool {
        self != ScalarType::Float32
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct VolumeSidecar {
    dims: Dims,
    #[serde(default = "unit_spacing")]
    spacing: [f64; 3],
    #[serde(default = "default_dtype")]
    dtype: ScalarType,
    #[serde(default)]
    intensity_range: Option<[f64; 2]>,
}

fn unit_spacing() -> [f64; 3] {
    [1.0; 3]
}

fn default_dtype() -> ScalarType {
    ScalarType::Float32
}

const FIELD_CONVENTION: &str = "p_plus_u";
const FIELD_UNITS: &str = "voxel";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FieldSidecar {
    dims: Dims,
    convention: String,
    units: String,
}

/// Path of the JSON sidecar that accompanies a raw payload.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn decode(bytes: &[u8], dtype: ScalarType) -> Vec<f64> {
    match dtype {
        ScalarType::Float32 => bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect(),
        ScalarType::Int16 => bytes
            .chunks_exact(2)
            .map(|b| i16::from_le_bytes([b[0], b[1]]) as f64)
            .collect(),
        ScalarType::Uint8 => bytes.iter().map(|&b| b as f64).collect(),
    }
}

fn encode_f32(values: &[f64], out: &mut Vec<u8>) {
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

fn check_payload(path: &Path, dims: Dims, dtype: ScalarType, bytes: usize) -> Result<()> {
    let expected = dims.len() * dtype.size();
    if bytes != expected {
        return Err(Error::Format(format!(
            "{}: header declares {dims} ({expected} bytes) but payload has {bytes} bytes",
            path.display()
        )));
    }
    Ok(())
}

fn rescale(values: &mut [f64], lo: f64, hi: f64) {
    for v in values {
        *v = ((*v - lo) / (hi - lo)).clamp(0.0, 1.0);
    }
}

fn finite_or_data_error(path: &Path, values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::Data(format!(
            "{}: non-finite value at voxel {i}",
            path.display()
        ))),
        None => Ok(()),
    }
}

pub fn load_volume(path: &Path, format: VolumeFormat) -> Result<Volume3D> {
    match format {
        VolumeFormat::Raw => load_raw(path),
        VolumeFormat::Nifti1 => load_nifti(path),
    }
}

/// Writes `vol`; raw payloads are `float32`, so values are rounded to single
/// precision and reloading a saved volume is bit-exact from then on.
pub fn save_volume(vol: &Volume3D, path: &Path, format: VolumeFormat) -> Result<()> {
    match format {
        VolumeFormat::Raw => save_raw(vol, path),
        VolumeFormat::Nifti1 => save_nifti(vol, path),
    }
}

fn load_raw(path: &Path) -> Result<Volume3D> {
    let side = sidecar_path(path);
    let meta: VolumeSidecar = serde_json::from_slice(&read(&side)?)
        .map_err(|e| Error::Format(format!("{}: {e}", side.display())))?;
    let bytes = read(path)?;
    check_payload(path, meta.dims, meta.dtype, bytes.len())?;
    let mut data = decode(&bytes, meta.dtype);
    finite_or_data_error(path, &data)?;
    if let (true, Some([lo, hi])) = (meta.dtype.is_integer(), meta.intensity_range) {
        if hi > lo {
            rescale(&mut data, lo, hi);
        }
    }
    Volume3D::with_spacing(meta.dims, meta.spacing, data)
}

fn save_raw(vol: &Volume3D, path: &Path) -> Result<()> {
    let (lo, hi) = vol.min_max();
    let meta = VolumeSidecar {
        dims: vol.dims(),
        spacing: vol.spacing(),
        dtype: ScalarType::Float32,
        intensity_range: Some([lo as f32 as f64, hi as f32 as f64]),
    };
    let mut bytes = Vec::with_capacity(vol.len() * 4);
    encode_f32(vol.data(), &mut bytes);
    write(path, &bytes)?;
    write(&sidecar_path(path), serde_json::to_string_pretty(&meta)?.as_bytes())
}

const NIFTI_HEADER: usize = 348;
const NIFTI_DATA_OFFSET: usize = 352;
const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;

fn le_i16(b: &[u8], off: usize) -> i16 {
    i16::from_le_bytes([b[off], b[off + 1]])
}

fn le_i32(b: &[u8], off: usize) -> i32 {
    i32::from_le_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
}

fn le_f32(b: &[u8], off: usize) -> f32 {
    f32::from_le_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
}

fn load_nifti(path: &Path) -> Result<Volume3D> {
    let bytes = read(path)?;
    if bytes.len() < NIFTI_HEADER {
        return Err(Error::io(
            path,
            std::io::Error::new(
                std::io::ErrorKind::UnexpectedEof,
                format!("file has {} bytes, a NIfTI-1 header needs 348", bytes.len()),
            ),
        ));
    }
    if le_i32(&bytes, 0) != NIFTI_HEADER as i32 {
        return Err(Error::Format(format!(
            "{}: not a little-endian NIfTI-1 header",
            path.display()
        )));
    }
    if &bytes[344..348] != b"n+1\0" {
        return Err(Error::Format(format!(
            "{}: only single-file NIfTI-1 (magic n+1) is supported",
            path.display()
        )));
    }
    let dim: Vec<i16> = (0..8).map(|k| le_i16(&bytes, 40 + 2 * k)).collect();
    let ndim = dim[0];
    if !(3..=7).contains(&ndim) || dim[1..=3].iter().any(|&d| d < 1) {
        return Err(Error::Format(format!("{}: unsupported dim {dim:?}", path.display())));
    }
    if dim[4..=ndim as usize].iter().any(|&d| d > 1) {
        return Err(Error::Format(format!(
            "{}: only 3D volumes are supported, dim {dim:?}",
            path.display()
        )));
    }
    let dims = Dims::new(dim[1] as usize, dim[2] as usize, dim[3] as usize);
    let dtype = match le_i16(&bytes, 70) {
        DT_FLOAT32 => ScalarType::Float32,
        DT_INT16 => ScalarType::Int16,
        other => {
            return Err(Error::Format(format!(
                "{}: unsupported datatype code {other}",
                path.display()
            )))
        }
    };
    let pix: Vec<f64> = (0..4).map(|k| le_f32(&bytes, 76 + 4 * k).abs() as f64).collect();
    let spacing = [1, 2, 3].map(|k| if pix[k] > 0.0 { pix[k] } else { 1.0 });
    let vox_offset = le_f32(&bytes, 108);
    if !(vox_offset >= NIFTI_HEADER as f32) || vox_offset.fract() != 0.0 {
        return Err(Error::Format(format!(
            "{}: invalid vox_offset {vox_offset}",
            path.display()
        )));
    }
    let start = vox_offset as usize;
    if start > bytes.len() {
        return Err(Error::Format(format!(
            "{}: vox_offset {start} beyond end of file",
            path.display()
        )));
    }
    let payload = &bytes[start..];
    check_payload(path, dims, dtype, payload.len())?;
    let mut data = decode(payload, dtype);

    let slope = le_f32(&bytes, 112) as f64;
    let inter = le_f32(&bytes, 116) as f64;
    if slope != 0.0 && slope.is_finite() && inter.is_finite() && (slope != 1.0 || inter != 0.0) {
        for v in &mut data {
            *v = *v * slope + inter;
        }
    }
    finite_or_data_error(path, &data)?;
    if dtype.is_integer() {
        let (cal_max, cal_min) = (le_f32(&bytes, 124) as f64, le_f32(&bytes, 128) as f64);
        if cal_max > cal_min {
            rescale(&mut data, cal_min, cal_max);
        }
    }
    Volume3D::with_spacing(dims, spacing, data)
}

fn save_nifti(vol: &Volume3D, path: &Path) -> Result<()> {
    let dims = vol.dims();
    if dims.as_array().iter().any(|&d| d > i16::MAX as usize) {
        return Err(Error::Format(format!("{dims} exceeds NIfTI-1 dimension limits")));
    }
    let mut h = vec![0u8; NIFTI_DATA_OFFSET];
    h[0..4].copy_from_slice(&(NIFTI_HEADER as i32).to_le_bytes());
    let dim: [i16; 8] = [3, dims.nx as i16, dims.ny as i16, dims.nz as i16, 1, 1, 1, 1];
    for (k, d) in dim.iter().enumerate() {
        h[40 + 2 * k..42 + 2 * k].copy_from_slice(&d.to_le_bytes());
    }
    h[70..72].copy_from_slice(&DT_FLOAT32.to_le_bytes());
    h[72..74].copy_from_slice(&32i16.to_le_bytes());
    let s = vol.spacing();
    let pixdim: [f32; 8] = [1.0, s[0] as f32, s[1] as f32, s[2] as f32, 1.0, 1.0, 1.0, 1.0];
    for (k, p) in pixdim.iter().enumerate() {
        h[76 + 4 * k..80 + 4 * k].copy_from_slice(&p.to_le_bytes());
    }
    h[108..112].copy_from_slice(&(NIFTI_DATA_OFFSET as f32).to_le_bytes());
    h[112..116].copy_from_slice(&1.0f32.to_le_bytes());
    // xyzt_units: millimeters
    h[123] = 2;
    h[344..348].copy_from_slice(b"n+1\0");
    h.reserve(vol.len() * 4);
    encode_f32(vol.data(), &mut h);
    write(path, &h)
}

pub fn save_field(field: &VectorField, path: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(field.dims().len() * 12);
    for c in field.components() {
        encode_f32(c, &mut bytes);
    }
    write(path, &bytes)?;
    let meta = FieldSidecar {
        dims: field.dims(),
        convention: FIELD_CONVENTION.into(),
        units: FIELD_UNITS.into(),
    };
    write(&sidecar_path(path), serde_json::to_string_pretty(&meta)?.as_bytes())
}

pub fn load_field(path: &Path) -> Result<VectorField> {
    let side = sidecar_path(path);
    let meta: FieldSidecar = serde_json::from_slice(&read(&side)?)
        .map_err(|e| Error::Format(format!("{}: {e}", side.display())))?;
    if meta.convention != FIELD_CONVENTION || meta.units != FIELD_UNITS {
        return Err(Error::Format(format!(
            "{}: unsupported field convention {}/{}",
            side.display(),
            meta.convention,
            meta.units
        )));
    }
    let bytes = read(path)?;
    let n = meta.dims.len();
    if bytes.len() != 12 * n {
        return Err(Error::Format(format!(
            "{}: field {} needs {} bytes, payload has {}",
            path.display(),
            meta.dims,
            12 * n,
            bytes.len()
        )));
    }
    let all = decode(&bytes, ScalarType::Float32);
    finite_or_data_error(path, &all)?;
    let comps = [
        all[..n].to_vec(),
        all[n..2 * n].to_vec(),
        all[2 * n..].to_vec(),
    ];
    VectorField::new(meta.dims, comps)
}

/// Masks are stored as raw volumes of integral values.
pub fn save_mask(mask: &LabelMask, path: &Path) -> Result<()> {
    save_raw(&mask.to_volume(), path)
}

pub fn load_mask(path: &Path) -> Result<LabelMask> {
    LabelMask::from_volume(&load_raw(path)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub fn index(self) -> usize {
        self as usize
    }
}

impl std::str::FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Axis> {
        match s {
            "x" | "X" => Ok(Axis::X),
            "y" | "Y" => Ok(Axis::Y),
            "z" | "Z" => Ok(Axis::Z),
            _ => Err(Error::Config(format!("unknown axis {s:?}"))),
        }
    }
}

/// 8-bit rendering of one slice, windowed to the slice's own range.
///
/// Image columns follow the first remaining axis and rows the second
/// (z-slices are `nx` wide and `ny` tall). A constant slice renders as 128.
pub fn slice_image(vol: &Volume3D, axis: Axis, index: usize) -> Result<image::GrayImage> {
    let d = vol.dims();
    let len = d.axis(axis.index());
    if index >= len {
        return Err(Error::Bounds { index, len });
    }
    let (w, h) = match axis {
        Axis::X => (d.ny, d.nz),
        Axis::Y => (d.nx, d.nz),
        Axis::Z => (d.nx, d.ny),
    };
    let at = |c: usize, r: usize| match axis {
        Axis::X => vol.get(index, c, r),
        Axis::Y => vol.get(c, index, r),
        Axis::Z => vol.get(c, r, index),
    };
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for r in 0..h {
        for c in 0..w {
            let v = at(c, r);
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    let img = image::GrayImage::from_fn(w as u32, h as u32, |c, r| {
        let v = at(c as usize, r as usize);
        let level = if hi > lo {
            (255.0 * (v - lo) / (hi - lo)).round() as u8
        } else {
            128
        };
        image::Luma([level])
    });
    Ok(img)
}

/// Writes a slice as PNG (`.png`) or binary PGM (anything else).
pub fn export_slice(vol: &Volume3D, axis: Axis, index: usize, path: &Path) -> Result<()> {
    let img = slice_image(vol, axis, index)?;
    let format = match path.extension().and_then(|e| e.to_str()) {
        Some(ext) if ext.eq_ignore_ascii_case("png") => image::ImageFormat::Png,
        _ => image::ImageFormat::Pnm,
    };
    img.save_with_format(path, format).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Format(other.to_string()),
    })
}
