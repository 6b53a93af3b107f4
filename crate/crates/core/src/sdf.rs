//! Truncated signed distance fields and the geometry that supports them.
//!
//! Shapes travel through the pipeline as [`TsdfGrid`]s: signed distance to
//! the mask surface in millimetres, divided by a normalization scale and
//! clamped to `[-tau, tau]`. Inside is negative, so `value < 0` recovers the
//! binary mask exactly.
//!
//! The distance transform is the separable lower-envelope algorithm; per-axis
//! squared step lengths make it exact for anisotropic spacing. With unit
//! steps the result is integer-valued squared voxel distance.

use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::{read_lnv, write_lnv, Mask};

/// Default truncation bound for TSDF values.
pub const DEFAULT_TAU: f32 = 0.2;

/// Valid range for [`scale_shape`] factors.
pub const SCALE_FACTOR_RANGE: (f64, f64) = (0.05, 20.0);

/// Truncated signed distance field over a regular grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TsdfGrid {
    dims: (usize, usize, usize),
    spacing: (f64, f64, f64),
    tau: f32,
    norm_scale: f64,
    values: Vec<f32>,
}

impl TsdfGrid {
    /// Validates the truncation invariants: `tau > 0`, `norm_scale > 0`, and
    /// every value within `[-tau, tau]`.
    pub fn from_parts(
        dims: (usize, usize, usize),
        spacing: (f64, f64, f64),
        tau: f32,
        norm_scale: f64,
        values: Vec<f32>,
    ) -> Result<Self> {
        if !(tau.is_finite() && tau > 0.0) {
            return Err(Error::arg("tau", format!("must be finite and > 0, got {tau}")));
        }
        if !(norm_scale.is_finite() && norm_scale > 0.0) {
            return Err(Error::arg(
                "norm_scale",
                format!("must be finite and > 0, got {norm_scale}"),
            ));
        }
        // Reuse the Mask constructor checks for dims/spacing consistency.
        let count = {
            let probe = Mask::empty(dims, spacing)?;
            probe.values().len()
        };
        if values.len() != count {
            return Err(Error::arg(
                "values",
                format!("expected {count} voxels for dims {dims:?}, got {}", values.len()),
            ));
        }
        for (i, v) in values.iter().enumerate() {
            if !v.is_finite() || v.abs() > tau {
                return Err(Error::arg(
                    "values",
                    format!("voxel {i} = {v} outside [-{tau}, {tau}]"),
                ));
            }
        }
        Ok(TsdfGrid {
            dims,
            spacing,
            tau,
            norm_scale,
            values,
        })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn spacing(&self) -> (f64, f64, f64) {
        self.spacing
    }

    pub fn tau(&self) -> f32 {
        self.tau
    }

    pub fn norm_scale(&self) -> f64 {
        self.norm_scale
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

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

/// Default normalization scale for a patch geometry: half the physical
/// extent along the shortest axis, in millimetres.
pub fn default_norm_scale(dims: (usize, usize, usize), spacing: (f64, f64, f64)) -> f64 {
    let ex = dims.0 as f64 * spacing.0;
    let ey = dims.1 as f64 * spacing.1;
    let ez = dims.2 as f64 * spacing.2;
    ex.min(ey).min(ez) / 2.0
}

// ---------------------------------------------------------------------------
// Distance transform
// ---------------------------------------------------------------------------

/// One lower-envelope pass along a line of squared distances.
///
/// `f` holds the squared distances so far, `step2` the squared physical step
/// between neighbouring samples. Parabolas rooted at infinite samples never
/// enter the envelope, so lines without any finite entry stay infinite.
fn envelope_pass(f: &[f64], step2: f64, out: &mut [f64], roots: &mut Vec<usize>, bounds: &mut Vec<f64>) {
    let n = f.len();
    roots.clear();
    bounds.clear();

    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        if roots.is_empty() {
            roots.push(q);
            bounds.push(f64::NEG_INFINITY);
            bounds.push(f64::INFINITY);
            continue;
        }
        // Intersection of the parabola rooted at q with the rightmost
        // envelope parabola, in index coordinates.
        loop {
            let p = *roots.last().unwrap();
            let fq = f[q] + step2 * (q * q) as f64;
            let fp = f[p] + step2 * (p * p) as f64;
            let s = (fq - fp) / (2.0 * step2 * (q - p) as f64);
            if s <= bounds[roots.len() - 1] {
                roots.pop();
                bounds.pop();
                if roots.is_empty() {
                    roots.push(q);
                    bounds.push(f64::NEG_INFINITY);
                    bounds.push(f64::INFINITY);
                    break;
                }
            } else {
                *bounds.last_mut().unwrap() = s;
                roots.push(q);
                bounds.push(f64::INFINITY);
                break;
            }
        }
    }

    if roots.is_empty() {
        out[..n].fill(f64::INFINITY);
        return;
    }
    let mut k = 0usize;
    for q in 0..n {
        while bounds[k + 1] < q as f64 {
            k += 1;
        }
        let p = roots[k];
        let d = q as f64 - p as f64;
        out[q] = step2 * d * d + f[p];
    }
}

/// Exact squared Euclidean distance transform to a seed set over a grid with
/// per-axis step lengths. Voxels with no seed anywhere come out as
/// `f64::INFINITY`.
fn edt3(
    dims: (usize, usize, usize),
    is_seed: impl Fn(usize) -> bool,
    steps: (f64, f64, f64),
) -> Vec<f64> {
    let (nx, ny, nz) = dims;
    let count = nx * ny * nz;
    let mut dist: Vec<f64> = (0..count)
        .map(|i| if is_seed(i) { 0.0 } else { f64::INFINITY })
        .collect();

    let nmax = nx.max(ny).max(nz);
    let mut line = vec![0.0f64; nmax];
    let mut out = vec![0.0f64; nmax];
    let mut roots: Vec<usize> = Vec::with_capacity(nmax);
    let mut bounds: Vec<f64> = Vec::with_capacity(nmax + 1);

    // x pass
    let sx2 = steps.0 * steps.0;
    for k in 0..nz {
        for j in 0..ny {
            let base = nx * (j + ny * k);
            line[..nx].copy_from_slice(&dist[base..base + nx]);
            envelope_pass(&line[..nx], sx2, &mut out[..nx], &mut roots, &mut bounds);
            dist[base..base + nx].copy_from_slice(&out[..nx]);
        }
    }

    // y pass
    let sy2 = steps.1 * steps.1;
    for k in 0..nz {
        for i in 0..nx {
            for j in 0..ny {
                line[j] = dist[i + nx * (j + ny * k)];
            }
            envelope_pass(&line[..ny], sy2, &mut out[..ny], &mut roots, &mut bounds);
            for j in 0..ny {
                dist[i + nx * (j + ny * k)] = out[j];
            }
        }
    }

    // z pass
    let sz2 = steps.2 * steps.2;
    for j in 0..ny {
        for i in 0..nx {
            for k in 0..nz {
                line[k] = dist[i + nx * (j + ny * k)];
            }
            envelope_pass(&line[..nz], sz2, &mut out[..nz], &mut roots, &mut bounds);
            for k in 0..nz {
                dist[i + nx * (j + ny * k)] = out[k];
            }
        }
    }

    dist
}

/// Squared distance (in voxel index units) from every voxel to the nearest
/// foreground voxel. Exact; integer-valued in float. A mask without any
/// foreground yields `f64::INFINITY` everywhere, which is above the
/// `nx^2 + ny^2 + nz^2` bound any real distance can reach.
pub fn edt_squared(mask: &Mask) -> Vec<f64> {
    let values = mask.values();
    edt3(mask.dims(), |i| values[i] == 1, (1.0, 1.0, 1.0))
}

/// Squared distance in millimetres to the nearest seed voxel, where the seed
/// set is the mask foreground (`seeds_foreground`) or background.
pub fn edt_squared_weighted(mask: &Mask, seeds_foreground: bool, steps: (f64, f64, f64)) -> Vec<f64> {
    let values = mask.values();
    if seeds_foreground {
        edt3(mask.dims(), |i| values[i] == 1, steps)
    } else {
        edt3(mask.dims(), |i| values[i] == 0, steps)
    }
}

// ---------------------------------------------------------------------------
// Mask <-> TSDF
// ---------------------------------------------------------------------------

/// Converts a binary mask into a truncated signed distance field.
///
/// Outside voxels carry `+sqrt(d^2 to foreground)`, inside voxels
/// `-sqrt(d^2 to background)`, both in millimetres via the grid spacing,
/// divided by `norm_scale` and clamped to `[-tau, tau]`. Needs at least one
/// foreground and one background voxel; a surface always exists afterwards.
pub fn mask_to_tsdf(mask: &Mask, tau: f32, norm_scale: f64) -> Result<TsdfGrid> {
    let fg = mask.foreground_count();
    if fg == 0 {
        return Err(Error::EmptyMask);
    }
    if fg == mask.values().len() {
        return Err(Error::FullMask);
    }
    let spacing = mask.spacing();
    let to_fg = edt_squared_weighted(mask, true, spacing);
    let to_bg = edt_squared_weighted(mask, false, spacing);
    let tau_f64 = tau as f64;
    let values: Vec<f32> = mask
        .values()
        .iter()
        .enumerate()
        .map(|(i, &m)| {
            let signed = if m == 1 { -to_bg[i].sqrt() } else { to_fg[i].sqrt() };
            (signed / norm_scale).clamp(-tau_f64, tau_f64) as f32
        })
        .collect();
    TsdfGrid::from_parts(mask.dims(), spacing, tau, norm_scale, values)
}

/// Recovers the binary mask: foreground wherever the value is negative.
/// Zero is background, so `mask_to_tsdf` followed by `tsdf_to_mask` is the
/// identity (inside voxels are at least one voxel from the background).
pub fn tsdf_to_mask(tsdf: &TsdfGrid) -> Mask {
    let values = tsdf.values().iter().map(|&v| u8::from(v < 0.0)).collect();
    Mask::from_parts(tsdf.dims(), tsdf.spacing(), values)
        .expect("tsdf geometry is already validated")
}

// ---------------------------------------------------------------------------
// Long axis
// ---------------------------------------------------------------------------

/// Collects foreground voxels that touch the background through a
/// 6-neighbourhood; the grid border counts as background.
fn surface_voxels(mask: &Mask) -> Vec<(usize, usize, usize)> {
    let (nx, ny, nz) = mask.dims();
    let mut surface = Vec::new();
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                if !mask.is_set(i, j, k) {
                    continue;
                }
                let exposed = i == 0
                    || j == 0
                    || k == 0
                    || i == nx - 1
                    || j == ny - 1
                    || k == nz - 1
                    || !mask.is_set(i - 1, j, k)
                    || !mask.is_set(i + 1, j, k)
                    || !mask.is_set(i, j - 1, k)
                    || !mask.is_set(i, j + 1, k)
                    || !mask.is_set(i, j, k - 1)
                    || !mask.is_set(i, j, k + 1);
                if exposed {
                    surface.push((i, j, k));
                }
            }
        }
    }
    surface
}

/// Longest axis of the mask in millimetres: the maximum pairwise Euclidean
/// distance between surface voxel centres. A single-voxel mask reports the
/// mean voxel spacing as a size floor.
pub fn long_axis_mm(mask: &Mask) -> Result<f64> {
    if mask.foreground_count() == 0 {
        return Err(Error::EmptyMask);
    }
    let surface = surface_voxels(mask);
    let (sx, sy, sz) = mask.spacing();
    if surface.len() == 1 {
        return Ok((sx + sy + sz) / 3.0);
    }
    let pts: Vec<[f64; 3]> = surface
        .iter()
        .map(|&(i, j, k)| [i as f64 * sx, j as f64 * sy, k as f64 * sz])
        .collect();
    let mut best = 0.0f64;
    for a in 0..pts.len() {
        let pa = pts[a];
        for pb in &pts[a + 1..] {
            let dx = pa[0] - pb[0];
            let dy = pa[1] - pb[1];
            let dz = pa[2] - pb[2];
            let d2 = dx * dx + dy * dy + dz * dz;
            if d2 > best {
                best = d2;
            }
        }
    }
    Ok(best.sqrt())
}

// ---------------------------------------------------------------------------
// Connectivity
// ---------------------------------------------------------------------------

/// Number of 6-connected foreground components.
pub fn count_components_6(mask: &Mask) -> usize {
    let (nx, ny, nz) = mask.dims();
    let values = mask.values();
    let mut seen = vec![false; values.len()];
    let mut components = 0;
    let mut stack = Vec::new();
    for start in 0..values.len() {
        if values[start] == 0 || seen[start] {
            continue;
        }
        components += 1;
        seen[start] = true;
        stack.push(start);
        while let Some(idx) = stack.pop() {
            let i = idx % nx;
            let j = (idx / nx) % ny;
            let k = idx / (nx * ny);
            let mut visit = |ii: usize, jj: usize, kk: usize| {
                let n = ii + nx * (jj + ny * kk);
                if values[n] == 1 && !seen[n] {
                    seen[n] = true;
                    stack.push(n);
                }
            };
            if i > 0 {
                visit(i - 1, j, k);
            }
            if i + 1 < nx {
                visit(i + 1, j, k);
            }
            if j > 0 {
                visit(i, j - 1, k);
            }
            if j + 1 < ny {
                visit(i, j + 1, k);
            }
            if k > 0 {
                visit(i, j, k - 1);
            }
            if k + 1 < nz {
                visit(i, j, k + 1);
            }
        }
    }
    components
}

// ---------------------------------------------------------------------------
// Scaling
// ---------------------------------------------------------------------------

/// Trilinear sample of the field at a fractional voxel coordinate. Corners
/// outside the grid read as `+tau` (far outside the shape).
fn sample_trilinear(t: &TsdfGrid, p: [f64; 3]) -> f64 {
    let (nx, ny, nz) = t.dims();
    let tau = t.tau() as f64;
    let x0 = p[0].floor();
    let y0 = p[1].floor();
    let z0 = p[2].floor();
    let fx = p[0] - x0;
    let fy = p[1] - y0;
    let fz = p[2] - z0;

    let corner = |dx: i64, dy: i64, dz: i64| -> f64 {
        let i = x0 as i64 + dx;
        let j = y0 as i64 + dy;
        let k = z0 as i64 + dz;
        if i < 0 || j < 0 || k < 0 || i >= nx as i64 || j >= ny as i64 || k >= nz as i64 {
            tau
        } else {
            t.at(i as usize, j as usize, k as usize) as f64
        }
    };

    let lerp = |a: f64, b: f64, f: f64| a + (b - a) * f;
    let c00 = lerp(corner(0, 0, 0), corner(1, 0, 0), fx);
    let c10 = lerp(corner(0, 1, 0), corner(1, 1, 0), fx);
    let c01 = lerp(corner(0, 0, 1), corner(1, 0, 1), fx);
    let c11 = lerp(corner(0, 1, 1), corner(1, 1, 1), fx);
    let c0 = lerp(c00, c10, fy);
    let c1 = lerp(c01, c11, fy);
    lerp(c0, c1, fz)
}

/// Rescales the implicit shape by `factor` about its foreground centroid.
///
/// Output voxel `x` samples the input at `centroid + (x - centroid)/factor`
/// (trilinear, out-of-grid reads `+tau`), re-clamped to `[-tau, tau]`.
/// `factor == 1.0` returns the input unchanged. Fails if the factor is
/// outside [`SCALE_FACTOR_RANGE`] or the scaled shape reaches the grid
/// border, i.e. any border voxel would land inside the shape.
pub fn scale_shape(t: &TsdfGrid, factor: f64) -> Result<TsdfGrid> {
    let (lo, hi) = SCALE_FACTOR_RANGE;
    if !factor.is_finite() || factor < lo || factor > hi {
        return Err(Error::FactorOutOfRange { factor, lo, hi });
    }
    if factor == 1.0 {
        return Ok(t.clone());
    }

    let mask = tsdf_to_mask(t);
    if mask.foreground_count() == 0 {
        return Err(Error::EmptyMask);
    }
    let (nx, ny, nz) = t.dims();
    let mut cx = 0.0f64;
    let mut cy = 0.0f64;
    let mut cz = 0.0f64;
    let mut n = 0.0f64;
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                if mask.is_set(i, j, k) {
                    cx += i as f64;
                    cy += j as f64;
                    cz += k as f64;
                    n += 1.0;
                }
            }
        }
    }
    cx /= n;
    cy /= n;
    cz /= n;

    let tau = t.tau() as f64;
    let mut values = Vec::with_capacity(t.values().len());
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let p = [
                    cx + (i as f64 - cx) / factor,
                    cy + (j as f64 - cy) / factor,
                    cz + (k as f64 - cz) / factor,
                ];
                let v = sample_trilinear(t, p).clamp(-tau, tau);
                values.push(v as f32);
            }
        }
    }
    let out = TsdfGrid::from_parts(t.dims(), t.spacing(), t.tau(), t.norm_scale(), values)?;

    // A shape that reaches the border was clipped by the grid.
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let border =
                    i == 0 || j == 0 || k == 0 || i == nx - 1 || j == ny - 1 || k == nz - 1;
                if border && out.at(i, j, k) < 0.0 {
                    return Err(Error::ShapeExceedsGrid);
                }
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// i/o
// ---------------------------------------------------------------------------

/// Writes a TSDF grid as an LNV file with unit `SDF` and the truncation
/// metadata (`tau`, `norm_scale`) in the header.
pub fn save_tsdf(path: impl AsRef<Path>, tsdf: &TsdfGrid) -> Result<()> {
    write_lnv(
        path.as_ref(),
        tsdf.dims,
        tsdf.spacing,
        "SDF",
        Some(tsdf.tau),
        Some(tsdf.norm_scale),
        &tsdf.values,
    )
}

/// Reads a TSDF grid, requiring unit `SDF`, the truncation metadata, and
/// every value within the stated bound.
pub fn load_tsdf(path: impl AsRef<Path>) -> Result<TsdfGrid> {
    let path = path.as_ref();
    let raw = read_lnv(path)?;
    if raw.unit_tag != "SDF" {
        return Err(Error::header(path, "unit", format!("expected \"SDF\", got \"{}\"", raw.unit_tag)));
    }
    let tau = raw
        .tau
        .ok_or_else(|| Error::header(path, "tau", "missing for SDF unit"))?;
    let norm_scale = raw
        .norm_scale
        .ok_or_else(|| Error::header(path, "norm_scale", "missing for SDF unit"))?;
    TsdfGrid::from_parts(raw.dims, raw.spacing, tau, norm_scale, raw.values).map_err(|e| match e {
        Error::InvalidArgument { what, detail } => Error::InvalidPayload {
            path: path.to_path_buf(),
            detail: format!("{what}: {detail}"),
        },
        other => other,
    })
}
