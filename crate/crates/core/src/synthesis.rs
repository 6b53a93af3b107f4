//! Lesion placement and dataset assembly.
//!
//! This module turns trained pieces (shape model, shape refiner, texture
//! model, and their codecs) into composited CT volumes. Placement scans a
//! background for soft-tissue sites, shape synthesis samples and rescales a
//! lesion to a target long axis, texture synthesis fills it conditioned on
//! the shape, and blending feathers the result into the CT with an
//! EDT-derived weight. `assemble_dataset` orchestrates the whole loop and
//! writes a manifest that `verify_assembly` can re-check from files alone.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{apply_adapter, AdapterNet};
use crate::codec::{CodecKind, LinearCodec};
use crate::diffusion::{reverse_sample, DdpmCheckpoint};
use crate::error::{Error, Result};
use crate::rng::{derive_rng, stream};
use crate::sdf::{
    count_components_6, edt_squared, edt_squared_weighted, long_axis_mm, mask_to_tsdf,
    scale_shape, tsdf_to_mask, TsdfGrid,
};
use crate::volume::{
    extract_patch, load_mask, load_volume, paste_mask, save_mask, save_volume, Mask, Unit, Volume,
    SPACING_TOL_MM,
};

/// Default HU window considered soft tissue when scoring placement sites.
pub const DEFAULT_HU_WINDOW: (f64, f64) = (-175.0, 250.0);

/// Default minimum fraction of probe-ball voxels that must be soft tissue.
pub const DEFAULT_MIN_SOFT_FRACTION: f64 = 0.9;

/// Default dilation of existing lesions, in voxels, when checking clearance.
pub const DEFAULT_MARGIN_VOXELS: usize = 2;

/// Default scan stride, in voxels, of the placement grid.
pub const DEFAULT_STRIDE: usize = 4;

/// Default feather width of the blend, in millimetres.
pub const DEFAULT_FEATHER_MM: f64 = 2.0;

/// Default sampling range of lesion long axes, in millimetres.
pub const DEFAULT_AXIS_RANGE_MM: (f64, f64) = (1.7, 30.0);

/// Default retry budget for shape synthesis and per-lesion placement.
pub const DEFAULT_MAX_RETRIES: usize = 10;

/// Default probe radii, ascending, in millimetres.
pub fn default_radius_ladder_mm() -> Vec<f64> {
    vec![2.0, 4.0, 6.0, 8.0, 10.0, 12.0, 14.0, 16.0]
}

/// Knobs governing placement scanning, retry budgets, and blending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlacementConfig {
    /// HU interval counted as soft tissue.
    pub hu_window: (f64, f64),
    /// Minimum in-window fraction inside the probe ball.
    pub min_soft_fraction: f64,
    /// Existing lesions are dilated by this many voxels before the
    /// disjointness check.
    pub margin_voxels: usize,
    /// Placement grid stride in voxels.
    pub stride: usize,
    /// Probe radii in millimetres, strictly increasing.
    pub radius_ladder_mm: Vec<f64>,
    /// Feather width of the blend in millimetres. Zero means a hard paste.
    pub feather_mm: f64,
    /// Uniform sampling range of target long axes in millimetres.
    pub axis_range_mm: (f64, f64),
    /// Retry budget for shape synthesis and per-lesion placement.
    pub max_retries: usize,
}

impl Default for PlacementConfig {
    fn default() -> Self {
        PlacementConfig {
            hu_window: DEFAULT_HU_WINDOW,
            min_soft_fraction: DEFAULT_MIN_SOFT_FRACTION,
            margin_voxels: DEFAULT_MARGIN_VOXELS,
            stride: DEFAULT_STRIDE,
            radius_ladder_mm: default_radius_ladder_mm(),
            feather_mm: DEFAULT_FEATHER_MM,
            axis_range_mm: DEFAULT_AXIS_RANGE_MM,
            max_retries: DEFAULT_MAX_RETRIES,
        }
    }
}

impl PlacementConfig {
    /// Checks every field for finiteness and ordering, naming the offender.
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.hu_window;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::arg("hu_window", format!("invalid window [{lo}, {hi}]")));
        }
        if !(self.min_soft_fraction.is_finite()
            && self.min_soft_fraction > 0.0
            && self.min_soft_fraction <= 1.0)
        {
            return Err(Error::arg(
                "min_soft_fraction",
                format!("{} is outside (0, 1]", self.min_soft_fraction),
            ));
        }
        if self.stride == 0 {
            return Err(Error::arg("stride", "stride must be at least 1 voxel"));
        }
        if self.radius_ladder_mm.is_empty() {
            return Err(Error::arg("radius_ladder_mm", "ladder must not be empty"));
        }
        let mut prev = 0.0;
        for &r in &self.radius_ladder_mm {
            if !(r.is_finite() && r > prev) {
                return Err(Error::arg(
                    "radius_ladder_mm",
                    format!("radii must be finite, positive, strictly increasing; got {r} after {prev}"),
                ));
            }
            prev = r;
        }
        if !(self.feather_mm.is_finite() && self.feather_mm >= 0.0) {
            return Err(Error::arg("feather_mm", format!("{} is not a width", self.feather_mm)));
        }
        let (alo, ahi) = self.axis_range_mm;
        if !(alo.is_finite() && ahi.is_finite() && alo > 0.0 && alo < ahi) {
            return Err(Error::arg(
                "axis_range_mm",
                format!("invalid axis range [{alo}, {ahi}]"),
            ));
        }
        if self.max_retries == 0 {
            return Err(Error::arg("max_retries", "retry budget must be at least 1"));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Placement scanning
// ---------------------------------------------------------------------------

/// A voxel where a lesion may be centred, with the size it can accommodate.
#[derive(Debug, Clone, PartialEq)]
pub struct PlacementCandidate {
    /// Voxel coordinates of the site.
    pub center: (usize, usize, usize),
    /// Twice the largest qualifying probe radius.
    pub max_long_axis_mm: f64,
    /// In-window fraction of the probe ball at that radius.
    pub soft_tissue_fraction: f64,
}

/// Lattice offsets of probe balls grouped into annuli: entry `r` holds the
/// offsets whose distance falls in `(ladder[r-1], ladder[r]]`.
fn ball_annuli(spacing: (f64, f64, f64), ladder: &[f64]) -> Vec<Vec<(isize, isize, isize)>> {
    let r_max = *ladder.last().expect("validated non-empty");
    let reach = |s: f64| (r_max / s).floor() as isize;
    let (ri, rj, rk) = (reach(spacing.0), reach(spacing.1), reach(spacing.2));
    let mut annuli = vec![Vec::new(); ladder.len()];
    for dk in -rk..=rk {
        for dj in -rj..=rj {
            for di in -ri..=ri {
                let d2 = (di as f64 * spacing.0).powi(2)
                    + (dj as f64 * spacing.1).powi(2)
                    + (dk as f64 * spacing.2).powi(2);
                if let Some(slot) = ladder.iter().position(|&r| d2 <= r * r) {
                    annuli[slot].push((di, dj, dk));
                }
            }
        }
    }
    annuli
}

/// Per-centre soft-tissue fractions over the radius ladder, computed once per
/// background so repeated clearance checks stay cheap.
struct SoftTissueField {
    centers: Vec<(usize, usize, usize)>,
    /// `fractions[c][r]` is the in-window fraction of the in-grid probe ball
    /// of radius `ladder[r]` around `centers[c]`.
    fractions: Vec<Vec<f64>>,
}

fn scan_soft_tissue(ct: &Volume, region: &Mask, cfg: &PlacementConfig) -> Result<SoftTissueField> {
    let dims = ct.dims();
    let (nx, ny, nz) = dims;
    let (lo, hi) = cfg.hu_window;
    let in_window: Vec<bool> = ct
        .values()
        .iter()
        .map(|&v| (v as f64) >= lo && (v as f64) <= hi)
        .collect();
    let annuli = ball_annuli(ct.spacing(), &cfg.radius_ladder_mm);
    let mut centers = Vec::new();
    let mut fractions = Vec::new();
    for k in (0..nz).step_by(cfg.stride) {
        for j in (0..ny).step_by(cfg.stride) {
            for i in (0..nx).step_by(cfg.stride) {
                if !region.is_set(i, j, k) {
                    continue;
                }
                let mut in_count = 0usize;
                let mut total = 0usize;
                let mut per_rung = Vec::with_capacity(annuli.len());
                for annulus in &annuli {
                    for &(di, dj, dk) in annulus {
                        let x = i as isize + di;
                        let y = j as isize + dj;
                        let z = k as isize + dk;
                        if x < 0 || y < 0 || z < 0 {
                            continue;
                        }
                        let (x, y, z) = (x as usize, y as usize, z as usize);
                        if x >= nx || y >= ny || z >= nz {
                            continue;
                        }
                        total += 1;
                        if in_window[(z * ny + y) * nx + x] {
                            in_count += 1;
                        }
                    }
                    // The innermost annulus always contains the centre voxel,
                    // so the denominator is never zero.
                    per_rung.push(in_count as f64 / total as f64);
                }
                centers.push((i, j, k));
                fractions.push(per_rung);
            }
        }
    }
    Ok(SoftTissueField { centers, fractions })
}

/// Squared distance in millimetres from every voxel to the existing lesion
/// mask dilated by `margin` voxels. An empty mask yields infinite clearance.
fn clearance_sq_mm(existing: &Mask, margin: usize) -> Result<Vec<f64>> {
    let dims = existing.dims();
    let spacing = existing.spacing();
    if existing.foreground_count() == 0 {
        return Ok(vec![f64::INFINITY; dims.0 * dims.1 * dims.2]);
    }
    let d2 = edt_squared(existing);
    let m2 = (margin * margin) as f64;
    let mut dilated = Mask::empty(dims, spacing)?;
    let mut idx = 0;
    for k in 0..dims.2 {
        for j in 0..dims.1 {
            for i in 0..dims.0 {
                if d2[idx] <= m2 {
                    dilated.set(i, j, k);
                }
                idx += 1;
            }
        }
    }
    let steps = (
        spacing.0 * spacing.0,
        spacing.1 * spacing.1,
        spacing.2 * spacing.2,
    );
    Ok(edt_squared_weighted(&dilated, true, steps))
}

fn candidates_from(
    field: &SoftTissueField,
    clearance_sq: &[f64],
    dims: (usize, usize, usize),
    cfg: &PlacementConfig,
) -> Vec<PlacementCandidate> {
    let (nx, ny, _) = dims;
    let mut out = Vec::new();
    for (center, per_rung) in field.centers.iter().zip(&field.fractions) {
        let (i, j, k) = *center;
        let clear = clearance_sq[(k * ny + j) * nx + i];
        let mut best = None;
        for (ri, &r) in cfg.radius_ladder_mm.iter().enumerate().rev() {
            if per_rung[ri] >= cfg.min_soft_fraction && clear > r * r {
                best = Some((r, per_rung[ri]));
                break;
            }
        }
        if let Some((r, fraction)) = best {
            out.push(PlacementCandidate {
                center: *center,
                max_long_axis_mm: 2.0 * r,
                soft_tissue_fraction: fraction,
            });
        }
    }
    out
}

fn check_same_geometry(
    what: &str,
    dims: (usize, usize, usize),
    spacing: (f64, f64, f64),
    other_dims: (usize, usize, usize),
    other_spacing: (f64, f64, f64),
) -> Result<()> {
    if dims != other_dims {
        return Err(Error::arg(
            what,
            format!("grid {other_dims:?} does not match expected {dims:?}"),
        ));
    }
    let close = |a: f64, b: f64| (a - b).abs() <= SPACING_TOL_MM;
    if !(close(spacing.0, other_spacing.0)
        && close(spacing.1, other_spacing.1)
        && close(spacing.2, other_spacing.2))
    {
        return Err(Error::SpacingMismatch {
            expected: [spacing.0, spacing.1, spacing.2],
            found: [other_spacing.0, other_spacing.1, other_spacing.2],
            tol: SPACING_TOL_MM,
        });
    }
    Ok(())
}

/// Scans a background CT for lesion sites.
///
/// A site appears on the stride grid, lies inside `region`, and admits at
/// least the smallest probe radius. A radius qualifies when the in-grid probe
/// ball is soft tissue (HU inside `cfg.hu_window`) in at least
/// `cfg.min_soft_fraction` of its voxels and stays disjoint from `existing`
/// dilated by `cfg.margin_voxels`. The reported size is twice the largest
/// qualifying radius. Candidates come back in scan order (x fastest), so the
/// result is deterministic.
pub fn find_candidates(
    ct: &Volume,
    region: &Mask,
    existing: &Mask,
    cfg: &PlacementConfig,
) -> Result<Vec<PlacementCandidate>> {
    cfg.validate()?;
    if ct.unit() != Unit::Hu {
        return Err(Error::arg("ct", "placement scans expect an HU volume"));
    }
    check_same_geometry("region mask", ct.dims(), ct.spacing(), region.dims(), region.spacing())?;
    check_same_geometry(
        "existing lesion mask",
        ct.dims(),
        ct.spacing(),
        existing.dims(),
        existing.spacing(),
    )?;
    let field = scan_soft_tissue(ct, region, cfg)?;
    let clearance = clearance_sq_mm(existing, cfg.margin_voxels)?;
    Ok(candidates_from(&field, &clearance, ct.dims(), cfg))
}

/// Draws a target long axis uniformly from `range_mm` (inclusive).
pub fn sample_target_long_axis(rng: &mut ChaCha8Rng, range_mm: (f64, f64)) -> Result<f64> {
    let (lo, hi) = range_mm;
    if !(lo.is_finite() && hi.is_finite() && lo > 0.0 && lo < hi) {
        return Err(Error::arg("axis_range_mm", format!("invalid range [{lo}, {hi}]")));
    }
    Ok(rng.gen_range(lo..=hi))
}

// ---------------------------------------------------------------------------
// Shape and texture synthesis
// ---------------------------------------------------------------------------

/// A sampled lesion shape at its target size.
#[derive(Debug, Clone)]
pub struct ShapeSample {
    /// Refined, rescaled shape field.
    pub grid: TsdfGrid,
    /// Foreground of `grid`.
    pub mask: Mask,
    /// Measured long axis of `mask`.
    pub long_axis_mm: f64,
    /// Rescale factor that mapped the sampled shape onto the target.
    pub scale_factor: f64,
    /// Number of sampling attempts consumed, including the successful one.
    pub tries: usize,
}

fn voxel_diagonal_mm(spacing: (f64, f64, f64)) -> f64 {
    (spacing.0 * spacing.0 + spacing.1 * spacing.1 + spacing.2 * spacing.2).sqrt()
}

/// Samples one lesion shape and rescales it to `target_mm`.
///
/// Each attempt draws a latent from the shape model, decodes it, refines it
/// with the adapter, and rescales the result so the measured long axis hits
/// the target. Attempts whose mask is empty, disconnected (6-connectivity),
/// unscalable, or further than two voxel diagonals from the target are
/// rejected; after `max_tries` failures the collected reasons are returned in
/// the error. Retries advance `rng`, so a fixed seed replays the whole
/// attempt sequence.
pub fn synth_shape(
    model: &DdpmCheckpoint,
    codec: &LinearCodec,
    adapter: &AdapterNet,
    target_mm: f64,
    max_tries: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ShapeSample> {
    let CodecKind::Shape { tau, .. } = codec.kind() else {
        return Err(Error::arg("codec", "shape synthesis needs a shape codec"));
    };
    if adapter.tau() != tau {
        return Err(Error::arg(
            "adapter",
            format!("adapter clamps at {} but the codec clamps at {tau}", adapter.tau()),
        ));
    }
    if model.net.latent_dim() != codec.latent_dim() {
        return Err(Error::arg(
            "model",
            format!(
                "model latent width {} does not match codec width {}",
                model.net.latent_dim(),
                codec.latent_dim()
            ),
        ));
    }
    if model.net.cond_dim() != 0 {
        return Err(Error::arg("model", "shape synthesis uses an unconditional model"));
    }
    if !(target_mm.is_finite() && target_mm > 0.0) {
        return Err(Error::arg("target_mm", format!("{target_mm} is not a length")));
    }
    if max_tries == 0 {
        return Err(Error::arg("max_tries", "retry budget must be at least 1"));
    }
    let tol = 2.0 * voxel_diagonal_mm(codec.spacing());
    let mut reasons: Vec<String> = Vec::new();
    for attempt in 1..=max_tries {
        let z_std = reverse_sample(&model.net, &model.schedule, None, rng)?;
        let z = model.destandardize(&z_std)?;
        let raw = codec.decode_shape(&z)?;
        let refined = apply_adapter(adapter, &raw)?;
        let mask = tsdf_to_mask(&refined);
        if mask.foreground_count() == 0 {
            reasons.push(format!("attempt {attempt}: decoded mask is empty"));
            continue;
        }
        let parts = count_components_6(&mask);
        if parts != 1 {
            reasons.push(format!("attempt {attempt}: decoded mask has {parts} components"));
            continue;
        }
        let measured = long_axis_mm(&mask)?;
        let factor = target_mm / measured;
        let scaled = match scale_shape(&refined, factor) {
            Ok(s) => s,
            Err(e) => {
                reasons.push(format!("attempt {attempt}: rescale by {factor:.3} failed ({e})"));
                continue;
            }
        };
        let final_mask = tsdf_to_mask(&scaled);
        if final_mask.foreground_count() == 0 {
            reasons.push(format!("attempt {attempt}: mask vanished after rescale"));
            continue;
        }
        let parts = count_components_6(&final_mask);
        if parts != 1 {
            reasons.push(format!("attempt {attempt}: rescaled mask has {parts} components"));
            continue;
        }
        let realized = long_axis_mm(&final_mask)?;
        if (realized - target_mm).abs() > tol {
            reasons.push(format!(
                "attempt {attempt}: realized {realized:.2} mm is over {tol:.2} mm from target {target_mm:.2} mm"
            ));
            continue;
        }
        return Ok(ShapeSample {
            grid: scaled,
            mask: final_mask,
            long_axis_mm: realized,
            scale_factor: factor,
            tries: attempt,
        });
    }
    Err(Error::RetriesExhausted {
        tries: max_tries,
        reasons: reasons.join("; "),
    })
}

/// Samples a texture patch conditioned on a lesion mask.
///
/// The mask is re-embedded through the shape codec to form the conditioning
/// vector, standardized with the scale stored in the texture model, and the
/// sampled latent is decoded through the texture codec, which clamps the
/// result to [-1, 1].
pub fn synth_texture(
    model: &DdpmCheckpoint,
    texture_codec: &LinearCodec,
    shape_codec: &LinearCodec,
    mask: &Mask,
    rng: &mut ChaCha8Rng,
) -> Result<Volume> {
    let CodecKind::Shape { tau, norm_scale } = shape_codec.kind() else {
        return Err(Error::arg("shape_codec", "conditioning needs a shape codec"));
    };
    if texture_codec.kind() != CodecKind::Texture {
        return Err(Error::arg("texture_codec", "texture synthesis needs a texture codec"));
    }
    if model.net.latent_dim() != texture_codec.latent_dim() {
        return Err(Error::arg(
            "model",
            format!(
                "model latent width {} does not match texture codec width {}",
                model.net.latent_dim(),
                texture_codec.latent_dim()
            ),
        ));
    }
    if model.net.cond_dim() != shape_codec.latent_dim() {
        return Err(Error::arg(
            "model",
            format!(
                "model conditioning width {} does not match shape codec width {}",
                model.net.cond_dim(),
                shape_codec.latent_dim()
            ),
        ));
    }
    check_same_geometry(
        "lesion mask",
        shape_codec.dims(),
        shape_codec.spacing(),
        mask.dims(),
        mask.spacing(),
    )?;
    check_same_geometry(
        "texture codec grid",
        shape_codec.dims(),
        shape_codec.spacing(),
        texture_codec.dims(),
        texture_codec.spacing(),
    )?;
    let tsdf = mask_to_tsdf(mask, tau, norm_scale)?;
    let cond_raw = shape_codec.encode_shape(&tsdf)?;
    let cond = model.standardize_cond(&cond_raw)?;
    let z_std = reverse_sample(&model.net, &model.schedule, Some(&cond), rng)?;
    let z = model.destandardize(&z_std)?;
    texture_codec.decode_texture(&z)
}

// ---------------------------------------------------------------------------
// Compositing
// ---------------------------------------------------------------------------

/// Hashes of the artifacts that produced a sample, for provenance.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHashes {
    pub shape_codec: String,
    pub shape_model: String,
    pub adapter: String,
    pub texture_codec: String,
    pub texture_model: String,
}

/// Where a sample came from: the sub-seeds of its random streams, the shape
/// rescale factor, and the artifact hashes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub shape_seed: u64,
    pub texture_seed: u64,
    pub scale_factor: f64,
    pub checkpoint_hashes: CheckpointHashes,
}

/// A lesion ready for compositing: its mask, its texture, and where both
/// came from.
#[derive(Debug, Clone)]
pub struct SynthSample {
    pub mask_patch: Mask,
    pub texture_patch: Volume,
    /// Long axis of `mask_patch`, measured at construction.
    pub long_axis_mm: f64,
    pub provenance: Provenance,
}

impl SynthSample {
    /// Bundles a mask and texture after checking they share a grid. The long
    /// axis is measured here so it always matches the stored mask.
    pub fn new(mask_patch: Mask, texture_patch: Volume, provenance: Provenance) -> Result<Self> {
        if texture_patch.unit() != Unit::Normalized {
            return Err(Error::arg("texture_patch", "texture must be a normalized volume"));
        }
        check_same_geometry(
            "texture patch",
            mask_patch.dims(),
            mask_patch.spacing(),
            texture_patch.dims(),
            texture_patch.spacing(),
        )?;
        let long_axis = long_axis_mm(&mask_patch)?;
        Ok(SynthSample {
            mask_patch,
            texture_patch,
            long_axis_mm: long_axis,
            provenance,
        })
    }
}

/// Voxel at which a patch of `patch_dims` centred on `center` begins, or
/// `None` when the patch does not fit inside `outer_dims`.
fn patch_origin(
    center: (usize, usize, usize),
    patch_dims: (usize, usize, usize),
    outer_dims: (usize, usize, usize),
) -> Option<(usize, usize, usize)> {
    let origin_axis = |c: usize, p: usize, n: usize| -> Option<usize> {
        let start = c.checked_sub(p / 2)?;
        (start + p <= n).then_some(start)
    };
    Some((
        origin_axis(center.0, patch_dims.0, outer_dims.0)?,
        origin_axis(center.1, patch_dims.1, outer_dims.1)?,
        origin_axis(center.2, patch_dims.2, outer_dims.2)?,
    ))
}

/// Feathers a sampled lesion into a CT volume around `center`.
///
/// The blend weight of each patch voxel is `1 - d / feather_mm` clamped to
/// [0, 1], where `d` is the millimetre distance to the lesion mask, so mask
/// voxels blend at full weight. A zero feather paths the texture in hard.
/// The texture is mapped from [-1, 1] onto `hu_window` before mixing. Voxels
/// with zero weight, including everything outside the patch box, keep their
/// exact bit pattern.
pub fn blend(
    ct: &Volume,
    sample: &SynthSample,
    center: (usize, usize, usize),
    feather_mm: f64,
    hu_window: (f64, f64),
) -> Result<Volume> {
    if ct.unit() != Unit::Hu {
        return Err(Error::arg("ct", "blend targets an HU volume"));
    }
    if !(feather_mm.is_finite() && feather_mm >= 0.0) {
        return Err(Error::arg("feather_mm", format!("{feather_mm} is not a width")));
    }
    let (lo, hi) = hu_window;
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(Error::arg("hu_window", format!("invalid window [{lo}, {hi}]")));
    }
    let close = |a: f64, b: f64| (a - b).abs() <= SPACING_TOL_MM;
    let (cs, ps) = (ct.spacing(), sample.mask_patch.spacing());
    if !(close(cs.0, ps.0) && close(cs.1, ps.1) && close(cs.2, ps.2)) {
        return Err(Error::SpacingMismatch {
            expected: [cs.0, cs.1, cs.2],
            found: [ps.0, ps.1, ps.2],
            tol: SPACING_TOL_MM,
        });
    }
    let patch_dims = sample.mask_patch.dims();
    let Some(origin) = patch_origin(center, patch_dims, ct.dims()) else {
        return Err(Error::OutOfBounds {
            detail: format!(
                "patch {patch_dims:?} centred on {center:?} does not fit in volume {:?}",
                ct.dims()
            ),
        });
    };
    let spacing = ct.spacing();
    let steps = (
        spacing.0 * spacing.0,
        spacing.1 * spacing.1,
        spacing.2 * spacing.2,
    );
    let dist_sq = edt_squared_weighted(&sample.mask_patch, true, steps);
    let (nx, ny, _) = ct.dims();
    let mut values = ct.values().to_vec();
    let mut idx = 0;
    for k in 0..patch_dims.2 {
        for j in 0..patch_dims.1 {
            for i in 0..patch_dims.0 {
                let d = dist_sq[idx].sqrt();
                let w = if feather_mm > 0.0 {
                    (1.0 - d / feather_mm).clamp(0.0, 1.0)
                } else if d == 0.0 {
                    1.0
                } else {
                    0.0
                };
                if w > 0.0 {
                    let tex = f64::from(sample.texture_patch.at(i, j, k)).clamp(-1.0, 1.0);
                    let tex_hu = lo + (tex + 1.0) / 2.0 * (hi - lo);
                    let target =
                        ((origin.2 + k) * ny + (origin.1 + j)) * nx + (origin.0 + i);
                    let old = f64::from(values[target]);
                    values[target] = (w * tex_hu + (1.0 - w) * old) as f32;
                }
                idx += 1;
            }
        }
    }
    Volume::from_parts(ct.dims(), ct.spacing(), Unit::Hu, values)
}

// ---------------------------------------------------------------------------
// Dataset assembly
// ---------------------------------------------------------------------------

/// Everything trained that assembly needs, plus artifact hashes for the
/// manifest.
pub struct SynthesisStack<'a> {
    pub shape_model: &'a DdpmCheckpoint,
    pub shape_codec: &'a LinearCodec,
    pub adapter: &'a AdapterNet,
    pub texture_model: &'a DdpmCheckpoint,
    pub texture_codec: &'a LinearCodec,
    pub hashes: CheckpointHashes,
}

/// One background CT to populate with lesions.
pub struct BackgroundInput {
    /// Identifier used in file names; letters, digits, `-`, and `_` only.
    pub id: String,
    pub ct: Volume,
    pub region: Mask,
    /// How many lesions to place.
    pub lesion_count: usize,
}

/// Files written for one background.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestBackground {
    pub id: String,
    /// Copy of the input CT, before any compositing.
    pub source_ct: String,
    pub region: String,
    /// CT after all lesions were blended in.
    pub composited: String,
    /// Union of all placed lesion masks.
    pub lesion_union: String,
}

/// Relative paths of the per-lesion outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntryFiles {
    /// Crop of the final composited CT around the lesion.
    pub volume: String,
    /// Lesion mask on the patch grid.
    pub mask: String,
}

/// One placed lesion. Entries appear in placement order, which the clearance
/// re-check in [`verify_assembly`] relies on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    /// Id of the background this lesion went into.
    pub background: String,
    pub center: [usize; 3],
    pub target_mm: f64,
    pub realized_mm: f64,
    /// Probe radius whose constraints this placement satisfied.
    pub probe_radius_mm: f64,
    pub soft_tissue_fraction: f64,
    pub shape_seed: u64,
    pub texture_seed: u64,
    pub scale_factor: f64,
    pub checkpoint_hashes: CheckpointHashes,
    pub files: EntryFiles,
}

/// Index of an assembled dataset; everything a consumer or checker needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub seed: u64,
    pub config_hash: String,
    pub placement: PlacementConfig,
    pub backgrounds: Vec<ManifestBackground>,
    pub entries: Vec<ManifestEntry>,
}

/// Manifest format version written by this build.
pub const MANIFEST_VERSION: u32 = 1;

/// Name of the manifest file inside the output directory.
pub const MANIFEST_FILE: &str = "manifest.json";

fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

/// In-window fraction of the in-grid probe ball around `center`. Mirrors the
/// scan in [`find_candidates`] so the checker recomputes the same quantity.
fn probe_fraction(ct: &Volume, center: (usize, usize, usize), r_mm: f64, window: (f64, f64)) -> f64 {
    let (nx, ny, nz) = ct.dims();
    let spacing = ct.spacing();
    let reach = |s: f64| (r_mm / s).floor() as isize;
    let (ri, rj, rk) = (reach(spacing.0), reach(spacing.1), reach(spacing.2));
    let mut in_count = 0usize;
    let mut total = 0usize;
    for dk in -rk..=rk {
        for dj in -rj..=rj {
            for di in -ri..=ri {
                let d2 = (di as f64 * spacing.0).powi(2)
                    + (dj as f64 * spacing.1).powi(2)
                    + (dk as f64 * spacing.2).powi(2);
                if d2 > r_mm * r_mm {
                    continue;
                }
                let x = center.0 as isize + di;
                let y = center.1 as isize + dj;
                let z = center.2 as isize + dk;
                if x < 0 || y < 0 || z < 0 {
                    continue;
                }
                let (x, y, z) = (x as usize, y as usize, z as usize);
                if x >= nx || y >= ny || z >= nz {
                    continue;
                }
                total += 1;
                let v = f64::from(ct.at(x, y, z));
                if v >= window.0 && v <= window.1 {
                    in_count += 1;
                }
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        in_count as f64 / total as f64
    }
}

/// Populates backgrounds with synthesized lesions and writes the dataset.
///
/// Per lesion the loop draws a target long axis, synthesizes a shape at that
/// size, picks uniformly among placement candidates large enough for it
/// (resampling the target when none qualify), synthesizes a conditioned
/// texture, and blends the result into the running composite. Each lesion
/// consumes fresh sub-seeds from a master stream, recorded in the manifest,
/// so a rerun with the same inputs writes byte-identical files.
pub fn assemble_dataset(
    stack: &SynthesisStack,
    backgrounds: &[BackgroundInput],
    cfg: &PlacementConfig,
    seed: u64,
    config_hash: &str,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    cfg.validate()?;
    if backgrounds.is_empty() {
        return Err(Error::arg("backgrounds", "assembly needs at least one background"));
    }
    let mut seen = HashSet::new();
    for bg in backgrounds {
        if !valid_id(&bg.id) {
            return Err(Error::arg(
                "backgrounds",
                format!("background id {:?} is not a safe file stem", bg.id),
            ));
        }
        if !seen.insert(bg.id.as_str()) {
            return Err(Error::arg("backgrounds", format!("duplicate background id {:?}", bg.id)));
        }
    }
    let patch_dims = stack.shape_codec.dims();
    check_same_geometry(
        "texture codec grid",
        patch_dims,
        stack.shape_codec.spacing(),
        stack.texture_codec.dims(),
        stack.texture_codec.spacing(),
    )?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut master = derive_rng(seed, &[stream::ASSEMBLY]);
    let mut manifest_backgrounds = Vec::new();
    let mut entries: Vec<ManifestEntry> = Vec::new();
    for bg in backgrounds {
        check_same_geometry(
            "region mask",
            bg.ct.dims(),
            bg.ct.spacing(),
            bg.region.dims(),
            bg.region.spacing(),
        )?;
        let close = |a: f64, b: f64| (a - b).abs() <= SPACING_TOL_MM;
        let (cs, ps) = (bg.ct.spacing(), stack.shape_codec.spacing());
        if !(close(cs.0, ps.0) && close(cs.1, ps.1) && close(cs.2, ps.2)) {
            return Err(Error::SpacingMismatch {
                expected: [cs.0, cs.1, cs.2],
                found: [ps.0, ps.1, ps.2],
                tol: SPACING_TOL_MM,
            });
        }
        let field = scan_soft_tissue(&bg.ct, &bg.region, cfg)?;
        let mut existing = Mask::empty(bg.ct.dims(), bg.ct.spacing())?;
        let mut composite = bg.ct.clone();
        let mut placed: Vec<(ManifestEntry, SynthSample, (usize, usize, usize))> = Vec::new();
        for lesion_idx in 0..bg.lesion_count {
            let shape_seed: u64 = master.gen();
            let texture_seed: u64 = master.gen();
            let mut axis_rng = derive_rng(shape_seed, &[stream::TARGET_AXIS]);
            let mut pick_rng = derive_rng(shape_seed, &[stream::CANDIDATE_PICK]);
            let mut shape_rng = derive_rng(shape_seed, &[stream::SHAPE_SAMPLE]);
            let mut texture_rng = derive_rng(texture_seed, &[stream::TEXTURE_SAMPLE]);
            let clearance = clearance_sq_mm(&existing, cfg.margin_voxels)?;
            let candidates: Vec<PlacementCandidate> =
                candidates_from(&field, &clearance, bg.ct.dims(), cfg)
                    .into_iter()
                    .filter(|c| patch_origin(c.center, patch_dims, bg.ct.dims()).is_some())
                    .collect();
            let mut reasons: Vec<String> = Vec::new();
            let mut outcome = None;
            let mut candidates_only = true;
            for attempt in 1..=cfg.max_retries {
                let target = sample_target_long_axis(&mut axis_rng, cfg.axis_range_mm)?;
                let qualifying: Vec<&PlacementCandidate> = candidates
                    .iter()
                    .filter(|c| c.max_long_axis_mm >= target)
                    .collect();
                if qualifying.is_empty() {
                    reasons.push(format!("attempt {attempt}: no site admits {target:.2} mm"));
                    continue;
                }
                let shape = match synth_shape(
                    stack.shape_model,
                    stack.shape_codec,
                    stack.adapter,
                    target,
                    cfg.max_retries,
                    &mut shape_rng,
                ) {
                    Ok(s) => s,
                    Err(Error::RetriesExhausted { reasons: why, .. }) => {
                        candidates_only = false;
                        reasons.push(format!("attempt {attempt}: shape synthesis failed ({why})"));
                        continue;
                    }
                    Err(e) => return Err(e),
                };
                let site = qualifying[pick_rng.gen_range(0..qualifying.len())];
                let texture = synth_texture(
                    stack.texture_model,
                    stack.texture_codec,
                    stack.shape_codec,
                    &shape.mask,
                    &mut texture_rng,
                )?;
                let sample = SynthSample::new(
                    shape.mask.clone(),
                    texture,
                    Provenance {
                        shape_seed,
                        texture_seed,
                        scale_factor: shape.scale_factor,
                        checkpoint_hashes: stack.hashes.clone(),
                    },
                )?;
                outcome = Some((target, site.clone(), sample));
                break;
            }
            let Some((target, site, sample)) = outcome else {
                if candidates_only {
                    let last_target = reasons
                        .last()
                        .and_then(|r| r.split_whitespace().rev().nth(1).and_then(|s| s.parse().ok()))
                        .unwrap_or(f64::NAN);
                    return Err(Error::NoQualifyingCandidate {
                        target_mm: last_target,
                        tries: cfg.max_retries,
                    });
                }
                return Err(Error::RetriesExhausted {
                    tries: cfg.max_retries,
                    reasons: format!(
                        "background {:?} lesion {}: {}",
                        bg.id,
                        lesion_idx,
                        reasons.join("; ")
                    ),
                });
            };
            composite = blend(&composite, &sample, site.center, cfg.feather_mm, cfg.hu_window)?;
            let origin = patch_origin(site.center, patch_dims, bg.ct.dims())
                .expect("candidates were filtered for patch fit");
            paste_mask(&mut existing, &sample.mask_patch, origin)?;
            let entry = ManifestEntry {
                background: bg.id.clone(),
                center: [site.center.0, site.center.1, site.center.2],
                target_mm: target,
                realized_mm: sample.long_axis_mm,
                probe_radius_mm: site.max_long_axis_mm / 2.0,
                soft_tissue_fraction: site.soft_tissue_fraction,
                shape_seed,
                texture_seed,
                scale_factor: sample.provenance.scale_factor,
                checkpoint_hashes: stack.hashes.clone(),
                files: EntryFiles {
                    volume: format!("{}_lesion{lesion_idx:03}_vol.lnv", bg.id),
                    mask: format!("{}_lesion{lesion_idx:03}_mask.lnv", bg.id),
                },
            };
            placed.push((entry, sample, origin));
        }
        let bg_files = ManifestBackground {
            id: bg.id.clone(),
            source_ct: format!("{}_source.lnv", bg.id),
            region: format!("{}_region.lnv", bg.id),
            composited: format!("{}_composited.lnv", bg.id),
            lesion_union: format!("{}_lesions.lnv", bg.id),
        };
        save_volume(out_dir.join(&bg_files.source_ct), &bg.ct)?;
        save_mask(out_dir.join(&bg_files.region), &bg.region)?;
        save_volume(out_dir.join(&bg_files.composited), &composite)?;
        save_mask(out_dir.join(&bg_files.lesion_union), &existing)?;
        for (entry, sample, origin) in placed {
            let crop = extract_patch(&composite, origin, patch_dims)?;
            save_volume(out_dir.join(&entry.files.volume), &crop)?;
            save_mask(out_dir.join(&entry.files.mask), &sample.mask_patch)?;
            entries.push(entry);
        }
        manifest_backgrounds.push(bg_files);
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        seed,
        config_hash: config_hash.to_string(),
        placement: cfg.clone(),
        backgrounds: manifest_backgrounds,
        entries,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::arg("manifest", format!("serialization failed: {e}")))?;
    let path = out_dir.join(MANIFEST_FILE);
    fs::write(&path, format!("{json}\n")).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

// ---------------------------------------------------------------------------
// Post-hoc verification
// ---------------------------------------------------------------------------

/// What [`verify_assembly`] checked.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssemblyCheckReport {
    pub backgrounds_checked: usize,
    pub entries_checked: usize,
}

fn fail(detail: impl Into<String>) -> Error {
    Error::VerificationFailed { detail: detail.into() }
}

fn manifest_path(out_dir: &Path, rel: &str) -> Result<PathBuf> {
    let p = Path::new(rel);
    if p.is_absolute() || rel.split('/').any(|part| part == "..") {
        return Err(fail(format!("manifest path {rel:?} escapes the dataset directory")));
    }
    Ok(out_dir.join(p))
}

/// Re-checks an assembled dataset from its files alone.
///
/// Verifies, for every entry: the centre lies in the region, the probe ball
/// on the source CT meets the soft-tissue fraction, the recorded long axis
/// matches the mask, the mask stays clear of previously placed lesions
/// dilated by the margin, and the volume crop equals the composited CT
/// bit-for-bit. Per background the union of entry masks must equal the
/// stored union mask.
pub fn verify_assembly(out_dir: &Path) -> Result<AssemblyCheckReport> {
    let path = out_dir.join(MANIFEST_FILE);
    let raw = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&raw)
        .map_err(|e| fail(format!("manifest does not parse: {e}")))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(fail(format!(
            "manifest version {} is not supported (expected {MANIFEST_VERSION})",
            manifest.version
        )));
    }
    manifest
        .placement
        .validate()
        .map_err(|e| fail(format!("manifest placement config is invalid: {e}")))?;
    let cfg = &manifest.placement;
    let mut report = AssemblyCheckReport {
        backgrounds_checked: 0,
        entries_checked: 0,
    };
    for bg in &manifest.backgrounds {
        let source = load_volume(manifest_path(out_dir, &bg.source_ct)?)?;
        let region = load_mask(manifest_path(out_dir, &bg.region)?)?;
        let composited = load_volume(manifest_path(out_dir, &bg.composited)?)?;
        let union = load_mask(manifest_path(out_dir, &bg.lesion_union)?)?;
        check_same_geometry(
            "region mask",
            source.dims(),
            source.spacing(),
            region.dims(),
            region.spacing(),
        )
        .map_err(|e| fail(format!("background {:?}: {e}", bg.id)))?;
        if composited.dims() != source.dims() || union.dims() != source.dims() {
            return Err(fail(format!(
                "background {:?}: output grids disagree with the source grid",
                bg.id
            )));
        }
        let mut rebuilt = Mask::empty(source.dims(), source.spacing())?;
        let mut prior: Vec<(Mask, (usize, usize, usize))> = Vec::new();
        for (pos, entry) in manifest
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.background == bg.id)
        {
            let tag = format!("entry {pos} (background {:?})", bg.id);
            let mask = load_mask(manifest_path(out_dir, &entry.files.mask)?)?;
            let volume = load_volume(manifest_path(out_dir, &entry.files.volume)?)?;
            if volume.dims() != mask.dims() {
                return Err(fail(format!("{tag}: mask and volume grids disagree")));
            }
            let center = (entry.center[0], entry.center[1], entry.center[2]);
            let Some(origin) = patch_origin(center, mask.dims(), source.dims()) else {
                return Err(fail(format!("{tag}: patch does not fit at {center:?}")));
            };
            if !region.is_set(center.0, center.1, center.2) {
                return Err(fail(format!("{tag}: centre {center:?} is outside the region")));
            }
            let fraction = probe_fraction(&source, center, entry.probe_radius_mm, cfg.hu_window);
            if fraction + 1e-12 < cfg.min_soft_fraction {
                return Err(fail(format!(
                    "{tag}: probe ball is only {fraction:.3} soft tissue (needs {})",
                    cfg.min_soft_fraction
                )));
            }
            let measured = long_axis_mm(&mask).map_err(|e| fail(format!("{tag}: {e}")))?;
            if (measured - entry.realized_mm).abs() > 1e-6 {
                return Err(fail(format!(
                    "{tag}: recorded long axis {} mm but the mask measures {measured} mm",
                    entry.realized_mm
                )));
            }
            // Clearance against everything placed before this entry, exactly
            // as the placement scan saw it.
            let clearance = clearance_sq_mm(&rebuilt, cfg.margin_voxels)?;
            let (nx, ny, _) = source.dims();
            let clear = clearance[(center.2 * ny + center.1) * nx + center.0];
            if clear <= entry.probe_radius_mm * entry.probe_radius_mm {
                return Err(fail(format!(
                    "{tag}: probe ball touches an earlier lesion (clearance {:.2} mm)",
                    clear.sqrt()
                )));
            }
            for (other, other_origin) in &prior {
                if masks_overlap(&mask, origin, other, *other_origin) {
                    return Err(fail(format!("{tag}: mask overlaps an earlier lesion")));
                }
            }
            let crop = extract_patch(&composited, origin, mask.dims())?;
            if crop.values().iter().map(|v| v.to_bits()).ne(
                volume.values().iter().map(|v| v.to_bits()),
            ) {
                return Err(fail(format!(
                    "{tag}: stored volume crop differs from the composited CT"
                )));
            }
            paste_mask(&mut rebuilt, &mask, origin)?;
            prior.push((mask, origin));
            report.entries_checked += 1;
        }
        if rebuilt.values() != union.values() {
            return Err(fail(format!(
                "background {:?}: union of entry masks differs from the stored union",
                bg.id
            )));
        }
        report.backgrounds_checked += 1;
    }
    let known: HashSet<&str> = manifest.backgrounds.iter().map(|b| b.id.as_str()).collect();
    for entry in &manifest.entries {
        if !known.contains(entry.background.as_str()) {
            return Err(fail(format!(
                "entry references unknown background {:?}",
                entry.background
            )));
        }
    }
    Ok(report)
}

/// True when the foregrounds of two placed patches share a voxel.
fn masks_overlap(
    a: &Mask,
    a_origin: (usize, usize, usize),
    b: &Mask,
    b_origin: (usize, usize, usize),
) -> bool {
    let lo = |a0: usize, b0: usize| a0.max(b0);
    let hi = |a0: usize, ad: usize, b0: usize, bd: usize| (a0 + ad).min(b0 + bd);
    let (adims, bdims) = (a.dims(), b.dims());
    let x0 = lo(a_origin.0, b_origin.0);
    let x1 = hi(a_origin.0, adims.0, b_origin.0, bdims.0);
    let y0 = lo(a_origin.1, b_origin.1);
    let y1 = hi(a_origin.1, adims.1, b_origin.1, bdims.1);
    let z0 = lo(a_origin.2, b_origin.2);
    let z1 = hi(a_origin.2, adims.2, b_origin.2, bdims.2);
    for z in z0..z1 {
        for y in y0..y1 {
            for x in x0..x1 {
                if a.is_set(x - a_origin.0, y - a_origin.1, z - a_origin.2)
                    && b.is_set(x - b_origin.0, y - b_origin.1, z - b_origin.2)
                {
                    return true;
                }
            }
        }
    }
    false
}
