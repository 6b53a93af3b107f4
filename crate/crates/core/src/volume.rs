//! Voxel rasters and the LNV file format.
//!
//! A [`Volume`] is a dense 3D grid of `f32` values in x-fastest order with a
//! physical per-axis spacing in millimetres. There is no world origin; all
//! geometry in this crate is grid-relative. A [`Mask`] is the binary
//! counterpart used for lesion foregrounds and placement regions.
//!
//! The on-disk format (extension `.lnv`) is a single UTF-8 JSON header line
//! terminated by `\n`, followed by the raw little-endian `f32` payload in the
//! same x-fastest order. Round-trips are bit-exact, which the dataset
//! manifest hashing relies on.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Interpretation of the stored values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unit {
    /// Hounsfield units stored as float.
    Hu,
    /// Truncated signed distance values; negative inside the shape.
    Sdf,
    /// Intensities affinely mapped into [-1, 1].
    Normalized,
}

impl Unit {
    fn tag(self) -> &'static str {
        match self {
            Unit::Hu => "HU",
            Unit::Sdf => "SDF",
            Unit::Normalized => "NORM",
        }
    }

    fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "HU" => Some(Unit::Hu),
            "SDF" => Some(Unit::Sdf),
            "NORM" => Some(Unit::Normalized),
            _ => None,
        }
    }
}

/// Dense scalar raster with millimetre spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: (usize, usize, usize),
    spacing: (f64, f64, f64),
    unit: Unit,
    values: Vec<f32>,
}

/// Binary raster sharing the geometry conventions of [`Volume`].
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    dims: (usize, usize, usize),
    spacing: (f64, f64, f64),
    values: Vec<u8>,
}

fn check_dims(dims: (usize, usize, usize)) -> Result<usize> {
    let (nx, ny, nz) = dims;
    if nx == 0 || ny == 0 || nz == 0 {
        return Err(Error::arg("dims", format!("all axes must be >= 1, got {dims:?}")));
    }
    nx.checked_mul(ny)
        .and_then(|p| p.checked_mul(nz))
        .ok_or_else(|| Error::arg("dims", format!("voxel count overflows usize: {dims:?}")))
}

fn check_spacing(spacing: (f64, f64, f64)) -> Result<()> {
    for (axis, s) in [spacing.0, spacing.1, spacing.2].into_iter().enumerate() {
        if !s.is_finite() || s <= 0.0 {
            return Err(Error::arg(
                "spacing",
                format!("axis {axis} spacing must be finite and > 0, got {s}"),
            ));
        }
    }
    Ok(())
}

impl Volume {
    /// Builds a volume after validating the grid invariants: positive dims,
    /// finite positive spacing, value count matching dims, and for
    /// [`Unit::Normalized`] every value inside [-1, 1].
    pub fn from_parts(
        dims: (usize, usize, usize),
        spacing: (f64, f64, f64),
        unit: Unit,
        values: Vec<f32>,
    ) -> Result<Self> {
        let count = check_dims(dims)?;
        check_spacing(spacing)?;
        if values.len() != count {
            return Err(Error::arg(
                "values",
                format!("expected {count} voxels for dims {dims:?}, got {}", values.len()),
            ));
        }
        if unit == Unit::Normalized {
            for (i, v) in values.iter().enumerate() {
                if !(-1.0..=1.0).contains(v) {
                    return Err(Error::arg(
                        "values",
                        format!("normalized voxel {i} = {v} outside [-1, 1]"),
                    ));
                }
            }
        }
        Ok(Volume {
            dims,
            spacing,
            unit,
            values,
        })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn spacing(&self) -> (f64, f64, f64) {
        self.spacing
    }

    pub fn unit(&self) -> Unit {
        self.unit
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn voxel_count(&self) -> usize {
        self.values.len()
    }

    /// Linear index of voxel (i, j, k); x varies fastest.
    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        debug_assert!(i < self.dims.0 && j < self.dims.1 && k < self.dims.2);
        i + self.dims.0 * (j + self.dims.1 * k)
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> f32 {
        self.values[self.index(i, j, k)]
    }
}

impl Mask {
    /// Builds a mask after validating that every value is 0 or 1.
    pub fn from_parts(
        dims: (usize, usize, usize),
        spacing: (f64, f64, f64),
        values: Vec<u8>,
    ) -> Result<Self> {
        let count = check_dims(dims)?;
        check_spacing(spacing)?;
        if values.len() != count {
            return Err(Error::arg(
                "values",
                format!("expected {count} voxels for dims {dims:?}, got {}", values.len()),
            ));
        }
        if let Some(i) = values.iter().position(|&v| v > 1) {
            return Err(Error::arg("values", format!("mask voxel {i} is {}, not 0/1", values[i])));
        }
        Ok(Mask {
            dims,
            spacing,
            values,
        })
    }

    /// All-background mask over the given geometry.
    pub fn empty(dims: (usize, usize, usize), spacing: (f64, f64, f64)) -> Result<Self> {
        let count = check_dims(dims)?;
        check_spacing(spacing)?;
        Ok(Mask {
            dims,
            spacing,
            values: vec![0; count],
        })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn spacing(&self) -> (f64, f64, f64) {
        self.spacing
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        debug_assert!(i < self.dims.0 && j < self.dims.1 && k < self.dims.2);
        i + self.dims.0 * (j + self.dims.1 * k)
    }

    #[inline]
    pub fn is_set(&self, i: usize, j: usize, k: usize) -> bool {
        self.values[self.index(i, j, k)] == 1
    }

    pub fn foreground_count(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1).count()
    }

    /// Sets voxel (i, j, k) to foreground. Used when accumulating placed
    /// lesions into an occupancy mask.
    pub fn set(&mut self, i: usize, j: usize, k: usize) {
        let idx = self.index(i, j, k);
        self.values[idx] = 1;
    }
}

// ---------------------------------------------------------------------------
// LNV i/o
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LnvHeader {
    magic: String,
    dims: [u64; 3],
    spacing: [f64; 3],
    dtype: String,
    unit: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tau: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    norm_scale: Option<f64>,
}

pub(crate) struct LnvPayload {
    pub dims: (usize, usize, usize),
    pub spacing: (f64, f64, f64),
    pub unit_tag: String,
    pub tau: Option<f32>,
    pub norm_scale: Option<f64>,
    pub values: Vec<f32>,
}

pub(crate) fn write_lnv(
    path: &Path,
    dims: (usize, usize, usize),
    spacing: (f64, f64, f64),
    unit_tag: &str,
    tau: Option<f32>,
    norm_scale: Option<f64>,
    values: &[f32],
) -> Result<()> {
    if let Some(index) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteVoxel { index });
    }
    let header = LnvHeader {
        magic: "LNV1".to_string(),
        dims: [dims.0 as u64, dims.1 as u64, dims.2 as u64],
        spacing: [spacing.0, spacing.1, spacing.2],
        dtype: "f32".to_string(),
        unit: unit_tag.to_string(),
        tau,
        norm_scale,
    };
    let header_line = serde_json::to_string(&header)
        .map_err(|e| Error::arg("header", e.to_string()))?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(header_line.as_bytes())
        .and_then(|_| w.write_all(b"\n"))
        .map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::with_capacity(values.len() * 4);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub(crate) fn read_lnv(path: &Path) -> Result<LnvPayload> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);

    let mut header_bytes = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        match r.read(&mut byte) {
            Ok(0) => {
                return Err(Error::header(path, "magic", "file ended before header newline"))
            }
            Ok(_) => {
                if byte[0] == b'\n' {
                    break;
                }
                header_bytes.push(byte[0]);
                if header_bytes.len() > 64 * 1024 {
                    return Err(Error::header(path, "magic", "header line exceeds 64 KiB"));
                }
            }
            Err(e) => return Err(Error::io(path, e)),
        }
    }
    let header_text = std::str::from_utf8(&header_bytes)
        .map_err(|_| Error::header(path, "magic", "header is not UTF-8"))?;
    let header: LnvHeader = serde_json::from_str(header_text).map_err(|e| {
        // serde names unknown/missing keys in its message; surface that.
        Error::header(path, "header", e.to_string())
    })?;

    if header.magic != "LNV1" {
        return Err(Error::header(path, "magic", format!("expected \"LNV1\", got \"{}\"", header.magic)));
    }
    if header.dtype != "f32" {
        return Err(Error::header(path, "dtype", format!("expected \"f32\", got \"{}\"", header.dtype)));
    }
    for (axis, s) in header.spacing.into_iter().enumerate() {
        if !s.is_finite() {
            return Err(Error::NonFiniteSpacing { path: path.to_path_buf(), axis });
        }
        if s <= 0.0 {
            return Err(Error::header(path, "spacing", format!("axis {axis} spacing {s} must be > 0")));
        }
    }
    let dims_usize = (
        usize::try_from(header.dims[0]).unwrap_or(0),
        usize::try_from(header.dims[1]).unwrap_or(0),
        usize::try_from(header.dims[2]).unwrap_or(0),
    );
    let expected = match check_dims(dims_usize) {
        Ok(c) => c,
        Err(_) => {
            return Err(Error::header(path, "dims", format!("invalid dims {:?}", header.dims)))
        }
    };

    let mut payload = Vec::new();
    r.read_to_end(&mut payload).map_err(|e| Error::io(path, e))?;
    if payload.len() != expected * 4 {
        return Err(Error::PayloadLengthMismatch {
            path: path.to_path_buf(),
            expected,
            found: payload.len() / 4,
        });
    }
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();

    Ok(LnvPayload {
        dims: dims_usize,
        spacing: (header.spacing[0], header.spacing[1], header.spacing[2]),
        unit_tag: header.unit,
        tau: header.tau,
        norm_scale: header.norm_scale,
        values,
    })
}

/// Writes a volume to `path` in the LNV format. Fails on any non-finite
/// voxel; the format carries data, not sentinels.
pub fn save_volume(path: impl AsRef<Path>, volume: &Volume) -> Result<()> {
    write_lnv(
        path.as_ref(),
        volume.dims,
        volume.spacing,
        volume.unit.tag(),
        None,
        None,
        &volume.values,
    )
}

/// Reads a volume written by [`save_volume`]. Accepts `HU`, `NORM` and `SDF`
/// unit tags; use the typed loaders in [`crate::sdf`] when the truncation
/// metadata of an SDF grid matters.
pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let raw = read_lnv(path)?;
    let unit = Unit::from_tag(&raw.unit_tag)
        .ok_or_else(|| Error::header(path, "unit", format!("unsupported unit \"{}\"", raw.unit_tag)))?;
    Volume::from_parts(raw.dims, raw.spacing, unit, raw.values)
        .map_err(|e| lift_parts_error(path, e))
}

/// Writes a mask as an LNV file with unit tag `MASK` and 0.0/1.0 payload.
pub fn save_mask(path: impl AsRef<Path>, mask: &Mask) -> Result<()> {
    let values: Vec<f32> = mask.values.iter().map(|&v| v as f32).collect();
    write_lnv(path.as_ref(), mask.dims, mask.spacing, "MASK", None, None, &values)
}

/// Reads a mask; every payload value must be exactly 0.0 or 1.0.
pub fn load_mask(path: impl AsRef<Path>) -> Result<Mask> {
    let path = path.as_ref();
    let raw = read_lnv(path)?;
    if raw.unit_tag != "MASK" {
        return Err(Error::header(path, "unit", format!("expected \"MASK\", got \"{}\"", raw.unit_tag)));
    }
    let mut values = Vec::with_capacity(raw.values.len());
    for (i, v) in raw.values.iter().enumerate() {
        if *v == 0.0 {
            values.push(0u8);
        } else if *v == 1.0 {
            values.push(1u8);
        } else {
            return Err(Error::InvalidPayload {
                path: path.to_path_buf(),
                detail: format!("mask voxel {i} is {v}, expected exactly 0.0 or 1.0"),
            });
        }
    }
    Mask::from_parts(raw.dims, raw.spacing, values).map_err(|e| lift_parts_error(path, e))
}

/// Rewrites constructor argument errors as format errors carrying the path,
/// so loader callers see a file diagnostic rather than an API misuse one.
fn lift_parts_error(path: &Path, e: Error) -> Error {
    match e {
        Error::InvalidArgument { what, detail } => Error::InvalidPayload {
            path: path.to_path_buf(),
            detail: format!("{what}: {detail}"),
        },
        other => other,
    }
}

// ---------------------------------------------------------------------------
// Intensity operations
// ---------------------------------------------------------------------------

fn check_window(lo: f32, hi: f32) -> Result<()> {
    if !lo.is_finite() || !hi.is_finite() || lo >= hi {
        return Err(Error::arg("window", format!("need finite lo < hi, got [{lo}, {hi}]")));
    }
    Ok(())
}

/// Clamps every voxel of an HU volume into `[lo, hi]`. Idempotent.
pub fn clamp_hu(volume: &Volume, lo: f32, hi: f32) -> Result<Volume> {
    if volume.unit != Unit::Hu {
        return Err(Error::arg("unit", "clamp_hu expects an HU volume"));
    }
    check_window(lo, hi)?;
    let values = volume.values.iter().map(|&v| v.clamp(lo, hi)).collect();
    Volume::from_parts(volume.dims, volume.spacing, Unit::Hu, values)
}

/// Clamps to `[lo, hi]` and maps that window affinely onto [-1, 1].
pub fn normalize_hu(volume: &Volume, lo: f32, hi: f32) -> Result<Volume> {
    if volume.unit != Unit::Hu {
        return Err(Error::arg("unit", "normalize_hu expects an HU volume"));
    }
    check_window(lo, hi)?;
    let span = hi - lo;
    let values = volume
        .values
        .iter()
        .map(|&v| 2.0 * ((v.clamp(lo, hi) - lo) / span) - 1.0)
        .collect();
    Volume::from_parts(volume.dims, volume.spacing, Unit::Normalized, values)
}

/// Inverse of [`normalize_hu`] over the same window; recovers the clamped HU
/// values up to float rounding.
pub fn denormalize_hu(volume: &Volume, lo: f32, hi: f32) -> Result<Volume> {
    if volume.unit != Unit::Normalized {
        return Err(Error::arg("unit", "denormalize_hu expects a normalized volume"));
    }
    check_window(lo, hi)?;
    let span = hi - lo;
    let values = volume
        .values
        .iter()
        .map(|&v| lo + (v + 1.0) * span / 2.0)
        .collect();
    Volume::from_parts(volume.dims, volume.spacing, Unit::Hu, values)
}

// ---------------------------------------------------------------------------
// Patch operations
// ---------------------------------------------------------------------------

fn check_patch_bounds(
    outer: (usize, usize, usize),
    origin: (usize, usize, usize),
    inner: (usize, usize, usize),
) -> Result<()> {
    let fits = origin.0.checked_add(inner.0).is_some_and(|e| e <= outer.0)
        && origin.1.checked_add(inner.1).is_some_and(|e| e <= outer.1)
        && origin.2.checked_add(inner.2).is_some_and(|e| e <= outer.2);
    if !fits {
        return Err(Error::OutOfBounds {
            detail: format!("patch dims {inner:?} at origin {origin:?} exceed volume dims {outer:?}"),
        });
    }
    Ok(())
}

/// Maximum absolute per-axis spacing difference tolerated when pasting a
/// patch into a destination grid.
pub const SPACING_TOL_MM: f64 = 1e-9;

fn spacing_matches(a: (f64, f64, f64), b: (f64, f64, f64)) -> bool {
    (a.0 - b.0).abs() <= SPACING_TOL_MM
        && (a.1 - b.1).abs() <= SPACING_TOL_MM
        && (a.2 - b.2).abs() <= SPACING_TOL_MM
}

/// Copies the axis-aligned box `[origin, origin + dims)` out of a volume.
pub fn extract_patch(
    volume: &Volume,
    origin: (usize, usize, usize),
    dims: (usize, usize, usize),
) -> Result<Volume> {
    check_dims(dims)?;
    check_patch_bounds(volume.dims, origin, dims)?;
    let mut values = Vec::with_capacity(dims.0 * dims.1 * dims.2);
    for k in 0..dims.2 {
        for j in 0..dims.1 {
            let row = volume.index(origin.0, origin.1 + j, origin.2 + k);
            values.extend_from_slice(&volume.values[row..row + dims.0]);
        }
    }
    Volume::from_parts(dims, volume.spacing, volume.unit, values)
}

/// Writes `patch` into `volume` at `origin`. The units must agree and the
/// spacings must match within [`SPACING_TOL_MM`].
pub fn paste_patch(volume: &mut Volume, patch: &Volume, origin: (usize, usize, usize)) -> Result<()> {
    if volume.unit != patch.unit {
        return Err(Error::arg(
            "unit",
            format!("cannot paste {:?} patch into {:?} volume", patch.unit, volume.unit),
        ));
    }
    if !spacing_matches(volume.spacing, patch.spacing) {
        return Err(Error::SpacingMismatch {
            expected: [volume.spacing.0, volume.spacing.1, volume.spacing.2],
            found: [patch.spacing.0, patch.spacing.1, patch.spacing.2],
            tol: SPACING_TOL_MM,
        });
    }
    check_patch_bounds(volume.dims, origin, patch.dims)?;
    for k in 0..patch.dims.2 {
        for j in 0..patch.dims.1 {
            let src = patch.index(0, j, k);
            let dst = volume.index(origin.0, origin.1 + j, origin.2 + k);
            volume.values[dst..dst + patch.dims.0]
                .copy_from_slice(&patch.values[src..src + patch.dims.0]);
        }
    }
    Ok(())
}

/// ORs the foreground of `patch` into `mask` at `origin`. Background voxels
/// of the patch leave the destination untouched.
pub fn paste_mask(mask: &mut Mask, patch: &Mask, origin: (usize, usize, usize)) -> Result<()> {
    if !spacing_matches(mask.spacing, patch.spacing) {
        return Err(Error::SpacingMismatch {
            expected: [mask.spacing.0, mask.spacing.1, mask.spacing.2],
            found: [patch.spacing.0, patch.spacing.1, patch.spacing.2],
            tol: SPACING_TOL_MM,
        });
    }
    check_patch_bounds(mask.dims, origin, patch.dims)?;
    for k in 0..patch.dims.2 {
        for j in 0..patch.dims.1 {
            for i in 0..patch.dims.0 {
                if patch.is_set(i, j, k) {
                    mask.set(origin.0 + i, origin.1 + j, origin.2 + k);
                }
            }
        }
    }
    Ok(())
}
