//! Linear latent codec for shape and texture patches.
//!
//! A [`LinearCodec`] is the mean of a training set plus the top-`d` right
//! singular directions of the centered data matrix, found by orthogonalized
//! block power iteration. Encoding projects onto the basis, decoding
//! reconstructs and clamps back into the valid value range of the payload
//! kind (`[-tau, tau]` for distance fields, `[-1, 1]` for normalized
//! intensities). Diffusion runs in this latent space instead of voxel space.

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::artifact::{read_artifact, write_artifact};
use crate::error::{Error, Result};
use crate::rng::{derive_rng, stream};
use crate::sdf::TsdfGrid;
use crate::volume::{Unit, Volume};

/// Latent coordinates produced by [`LinearCodec::encode_flat`] and friends.
pub type LatentCode = Vec<f64>;

/// Convergence tolerance on the per-sweep singular value change.
pub const FIT_TOL: f64 = 1e-8;

/// Hard cap on power iteration sweeps.
pub const FIT_MAX_SWEEPS: usize = 1000;

/// Maximum deviation of the fitted basis from orthonormality, checked after
/// fitting and after loading from disk.
pub const ORTHO_TOL: f64 = 1e-6;

/// What kind of payload the codec was fit on, with the metadata needed to
/// rebuild typed grids on decode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CodecKind {
    Shape { tau: f32, norm_scale: f64 },
    Texture,
}

impl CodecKind {
    fn clamp_bound(self) -> f64 {
        match self {
            CodecKind::Shape { tau, .. } => tau as f64,
            CodecKind::Texture => 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LinearCodec {
    dims: (usize, usize, usize),
    spacing: (f64, f64, f64),
    kind: CodecKind,
    latent_dim: usize,
    mean: Vec<f64>,
    /// Row-major `latent_dim x voxel_count`, rows orthonormal.
    basis: Vec<f64>,
    /// Descending, non-negative.
    singular: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Modified Gram-Schmidt with one re-orthogonalization pass. Rank-deficient
/// rows are replaced by the first canonical directions that keep the set
/// orthonormal, so degenerate training data still yields a valid basis.
fn orthonormalize_rows(basis: &mut [f64], d: usize, v: usize) {
    let mut filler = 0usize;
    for j in 0..d {
        for _pass in 0..2 {
            let (head, tail) = basis.split_at_mut(j * v);
            let row = &mut tail[..v];
            for p in 0..j {
                let prev = &head[p * v..(p + 1) * v];
                let c = dot(prev, row);
                for (r, q) in row.iter_mut().zip(prev) {
                    *r -= c * q;
                }
            }
        }
        let n = norm(&basis[j * v..(j + 1) * v]);
        if n > 1e-12 {
            for x in &mut basis[j * v..(j + 1) * v] {
                *x /= n;
            }
            continue;
        }
        // Deflated to nothing: take the next canonical direction with a
        // healthy residual after projecting out the accepted rows.
        loop {
            assert!(filler < v, "cannot complete orthonormal basis");
            let e = filler;
            filler += 1;
            let (head, tail) = basis.split_at_mut(j * v);
            let row = &mut tail[..v];
            row.fill(0.0);
            row[e] = 1.0;
            for p in 0..j {
                let prev = &head[p * v..(p + 1) * v];
                let c = dot(prev, row);
                for (r, q) in row.iter_mut().zip(prev) {
                    *r -= c * q;
                }
            }
            let n = norm(row);
            if n > 0.5 {
                for x in row.iter_mut() {
                    *x /= n;
                }
                break;
            }
        }
    }
}

/// Checks `|<b_i, b_j> - delta_ij| <= tol` over all row pairs.
fn max_orthonormality_defect(basis: &[f64], d: usize, v: usize) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..d {
        for j in i..d {
            let g = dot(&basis[i * v..(i + 1) * v], &basis[j * v..(j + 1) * v]);
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((g - target).abs());
        }
    }
    worst
}

impl LinearCodec {
    /// Fits a codec on flattened rows. `rows` is `n x v` row-major and gets
    /// centered in place.
    fn fit_flat(
        mut rows: Vec<f64>,
        n: usize,
        v: usize,
        latent_dim: usize,
        dims: (usize, usize, usize),
        spacing: (f64, f64, f64),
        kind: CodecKind,
    ) -> Result<Self> {
        if latent_dim == 0 {
            return Err(Error::arg("latent_dim", "must be >= 1"));
        }
        if latent_dim > v {
            return Err(Error::arg(
                "latent_dim",
                format!("{latent_dim} exceeds voxel count {v}"),
            ));
        }
        if n < latent_dim + 1 {
            return Err(Error::TooFewSamples {
                needed: latent_dim + 1,
                found: n,
            });
        }

        let mut mean = vec![0.0f64; v];
        for r in 0..n {
            for (m, x) in mean.iter_mut().zip(&rows[r * v..(r + 1) * v]) {
                *m += x;
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        for r in 0..n {
            for (x, m) in rows[r * v..(r + 1) * v].iter_mut().zip(&mean) {
                *x -= m;
            }
        }

        // Deterministic init; the fit takes no rng from the caller.
        let mut rng = derive_rng(0, &[stream::CODEC_INIT]);
        let mut basis: Vec<f64> = (0..latent_dim * v)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        orthonormalize_rows(&mut basis, latent_dim, v);

        let mut projected = vec![0.0f64; n * latent_dim]; // X B^T, column j per latent
        let mut singular = vec![f64::INFINITY; latent_dim];
        let mut scratch = vec![0.0f64; latent_dim * v];

        let project = |basis: &[f64], projected: &mut [f64]| {
            for r in 0..n {
                let row = &rows[r * v..(r + 1) * v];
                for j in 0..latent_dim {
                    projected[r * latent_dim + j] = dot(&basis[j * v..(j + 1) * v], row);
                }
            }
        };
        project(&basis, &mut projected);

        for _sweep in 0..FIT_MAX_SWEEPS {
            // scratch_j = X^T (X b_j)
            scratch.fill(0.0);
            for r in 0..n {
                let row = &rows[r * v..(r + 1) * v];
                for j in 0..latent_dim {
                    let y = projected[r * latent_dim + j];
                    if y != 0.0 {
                        let dst = &mut scratch[j * v..(j + 1) * v];
                        for (d_, x) in dst.iter_mut().zip(row) {
                            *d_ += y * x;
                        }
                    }
                }
            }
            basis.copy_from_slice(&scratch);
            orthonormalize_rows(&mut basis, latent_dim, v);
            project(&basis, &mut projected);

            let mut worst_change = 0.0f64;
            for j in 0..latent_dim {
                let mut s2 = 0.0;
                for r in 0..n {
                    let y = projected[r * latent_dim + j];
                    s2 += y * y;
                }
                let s = s2.sqrt();
                let change = (s - singular[j]).abs();
                if change > worst_change {
                    worst_change = change;
                }
                singular[j] = s;
            }
            if worst_change <= FIT_TOL {
                break;
            }
        }

        // Order components by singular value, then fix each row's sign so the
        // first entry of noticeable magnitude is positive. Both are pure
        // relabelings; they make the artifact stable for hashing.
        let mut order: Vec<usize> = (0..latent_dim).collect();
        order.sort_by(|&a, &b| singular[b].partial_cmp(&singular[a]).unwrap().then(a.cmp(&b)));
        let mut sorted_basis = vec![0.0f64; latent_dim * v];
        let mut sorted_singular = vec![0.0f64; latent_dim];
        for (dst, &src) in order.iter().enumerate() {
            sorted_basis[dst * v..(dst + 1) * v].copy_from_slice(&basis[src * v..(src + 1) * v]);
            sorted_singular[dst] = singular[src];
        }
        for j in 0..latent_dim {
            let row = &mut sorted_basis[j * v..(j + 1) * v];
            let lead = row.iter().find(|x| x.abs() > 1e-9).copied().unwrap_or(1.0);
            if lead < 0.0 {
                for x in row.iter_mut() {
                    *x = -*x;
                }
            }
        }

        let defect = max_orthonormality_defect(&sorted_basis, latent_dim, v);
        debug_assert!(defect <= ORTHO_TOL, "orthonormality defect {defect}");

        Ok(LinearCodec {
            dims,
            spacing,
            kind,
            latent_dim,
            mean,
            basis: sorted_basis,
            singular: sorted_singular,
        })
    }

    /// Fits a shape codec on TSDF grids sharing one geometry. Needs at least
    /// `latent_dim + 1` grids.
    pub fn fit_shapes(grids: &[TsdfGrid], latent_dim: usize) -> Result<Self> {
        let first = grids
            .first()
            .ok_or(Error::TooFewSamples { needed: latent_dim + 1, found: 0 })?;
        let dims = first.dims();
        let spacing = first.spacing();
        let kind = CodecKind::Shape {
            tau: first.tau(),
            norm_scale: first.norm_scale(),
        };
        let v = first.values().len();
        let mut rows = Vec::with_capacity(grids.len() * v);
        for g in grids {
            if g.dims() != dims {
                return Err(Error::DimsMismatch { expected: dims, found: g.dims() });
            }
            if g.spacing() != spacing || g.tau() != first.tau() || g.norm_scale() != first.norm_scale() {
                return Err(Error::arg(
                    "grids",
                    "training grids must share spacing, tau and norm_scale",
                ));
            }
            rows.extend(g.values().iter().map(|&x| x as f64));
        }
        Self::fit_flat(rows, grids.len(), v, latent_dim, dims, spacing, kind)
    }

    /// Fits a texture codec on normalized intensity patches.
    pub fn fit_textures(patches: &[Volume], latent_dim: usize) -> Result<Self> {
        let first = patches
            .first()
            .ok_or(Error::TooFewSamples { needed: latent_dim + 1, found: 0 })?;
        if first.unit() != Unit::Normalized {
            return Err(Error::arg("patches", "texture codec expects normalized volumes"));
        }
        let dims = first.dims();
        let spacing = first.spacing();
        let v = first.values().len();
        let mut rows = Vec::with_capacity(patches.len() * v);
        for p in patches {
            if p.unit() != Unit::Normalized {
                return Err(Error::arg("patches", "texture codec expects normalized volumes"));
            }
            if p.dims() != dims {
                return Err(Error::DimsMismatch { expected: dims, found: p.dims() });
            }
            if p.spacing() != spacing {
                return Err(Error::arg("patches", "training patches must share spacing"));
            }
            rows.extend(p.values().iter().map(|&x| x as f64));
        }
        Self::fit_flat(rows, patches.len(), v, latent_dim, dims, spacing, CodecKind::Texture)
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn spacing(&self) -> (f64, f64, f64) {
        self.spacing
    }

    pub fn kind(&self) -> CodecKind {
        self.kind
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn voxel_count(&self) -> usize {
        self.mean.len()
    }

    pub fn singular_values(&self) -> &[f64] {
        &self.singular
    }

    /// Projects flattened values onto the basis: `z = B (x - mean)`.
    pub fn encode_flat(&self, values: &[f32]) -> Result<LatentCode> {
        let v = self.mean.len();
        if values.len() != v {
            return Err(Error::arg(
                "values",
                format!("expected {v} voxels, got {}", values.len()),
            ));
        }
        let centered: Vec<f64> = values
            .iter()
            .zip(&self.mean)
            .map(|(&x, m)| x as f64 - m)
            .collect();
        Ok((0..self.latent_dim)
            .map(|j| dot(&self.basis[j * v..(j + 1) * v], &centered))
            .collect())
    }

    /// Reconstructs `mean + B^T z` and clamps into the payload range.
    pub fn decode_flat(&self, code: &[f64]) -> Result<Vec<f32>> {
        if code.len() != self.latent_dim {
            return Err(Error::arg(
                "code",
                format!("expected {} latents, got {}", self.latent_dim, code.len()),
            ));
        }
        let v = self.mean.len();
        let bound = self.kind.clamp_bound();
        let mut out = self.mean.clone();
        for (j, &z) in code.iter().enumerate() {
            if z != 0.0 {
                let row = &self.basis[j * v..(j + 1) * v];
                for (o, b) in out.iter_mut().zip(row) {
                    *o += z * b;
                }
            }
        }
        Ok(out.into_iter().map(|x| x.clamp(-bound, bound) as f32).collect())
    }

    pub fn encode_shape(&self, grid: &TsdfGrid) -> Result<LatentCode> {
        match self.kind {
            CodecKind::Shape { tau, norm_scale } => {
                if grid.dims() != self.dims {
                    return Err(Error::DimsMismatch { expected: self.dims, found: grid.dims() });
                }
                if grid.tau() != tau || grid.norm_scale() != norm_scale {
                    return Err(Error::arg(
                        "grid",
                        "tau/norm_scale do not match the codec's training geometry",
                    ));
                }
                self.encode_flat(grid.values())
            }
            CodecKind::Texture => Err(Error::arg("codec", "texture codec cannot encode shapes")),
        }
    }

    pub fn decode_shape(&self, code: &[f64]) -> Result<TsdfGrid> {
        match self.kind {
            CodecKind::Shape { tau, norm_scale } => {
                let values = self.decode_flat(code)?;
                TsdfGrid::from_parts(self.dims, self.spacing, tau, norm_scale, values)
            }
            CodecKind::Texture => Err(Error::arg("codec", "texture codec cannot decode shapes")),
        }
    }

    pub fn encode_texture(&self, patch: &Volume) -> Result<LatentCode> {
        match self.kind {
            CodecKind::Texture => {
                if patch.unit() != Unit::Normalized {
                    return Err(Error::arg("patch", "expected a normalized volume"));
                }
                if patch.dims() != self.dims {
                    return Err(Error::DimsMismatch { expected: self.dims, found: patch.dims() });
                }
                self.encode_flat(patch.values())
            }
            CodecKind::Shape { .. } => Err(Error::arg("codec", "shape codec cannot encode textures")),
        }
    }

    pub fn decode_texture(&self, code: &[f64]) -> Result<Volume> {
        match self.kind {
            CodecKind::Texture => {
                let values = self.decode_flat(code)?;
                Volume::from_parts(self.dims, self.spacing, Unit::Normalized, values)
            }
            CodecKind::Shape { .. } => Err(Error::arg("codec", "shape codec cannot decode textures")),
        }
    }

    /// Per-coordinate standard deviation of the training latents implied by
    /// the fit: `sigma_j^2 = s_j^2 / (n - 1)` needs `n`, which the codec does
    /// not store, so this takes the codes of the actual training set.
    pub fn empirical_latent_std(codes: &[LatentCode]) -> Result<Vec<f64>> {
        let n = codes.len();
        if n < 2 {
            return Err(Error::TooFewRows { needed: 2, found: n });
        }
        let d = codes[0].len();
        let mut mean = vec![0.0f64; d];
        for c in codes {
            for (m, z) in mean.iter_mut().zip(c) {
                *m += z;
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut var = vec![0.0f64; d];
        for c in codes {
            for ((v, z), m) in var.iter_mut().zip(c).zip(&mean) {
                let e = z - m;
                *v += e * e;
            }
        }
        Ok(var.into_iter().map(|v| (v / (n - 1) as f64).sqrt()).collect())
    }
}

// ---------------------------------------------------------------------------
// i/o
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CodecHeader {
    magic: String,
    kind: String,
    dims: [u64; 3],
    spacing: [f64; 3],
    latent_dim: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tau: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    norm_scale: Option<f64>,
}

/// Writes the codec as a `.codec` artifact: JSON header line, then mean,
/// basis rows and singular values as little-endian `f32`.
pub fn save_codec(path: impl AsRef<Path>, codec: &LinearCodec) -> Result<()> {
    let (kind, tau, norm_scale) = match codec.kind {
        CodecKind::Shape { tau, norm_scale } => ("shape", Some(tau), Some(norm_scale)),
        CodecKind::Texture => ("texture", None, None),
    };
    let header = CodecHeader {
        magic: "LNC1".to_string(),
        kind: kind.to_string(),
        dims: [codec.dims.0 as u64, codec.dims.1 as u64, codec.dims.2 as u64],
        spacing: [codec.spacing.0, codec.spacing.1, codec.spacing.2],
        latent_dim: codec.latent_dim as u64,
        tau,
        norm_scale,
    };
    let header_line =
        serde_json::to_string(&header).map_err(|e| Error::arg("header", e.to_string()))?;
    let mut payload: Vec<f32> = Vec::with_capacity(
        codec.mean.len() + codec.basis.len() + codec.singular.len(),
    );
    payload.extend(codec.mean.iter().map(|&x| x as f32));
    payload.extend(codec.basis.iter().map(|&x| x as f32));
    payload.extend(codec.singular.iter().map(|&x| x as f32));
    write_artifact(path.as_ref(), &header_line, &payload)
}

/// Reads a `.codec` artifact and re-validates the basis invariants.
pub fn load_codec(path: impl AsRef<Path>) -> Result<LinearCodec> {
    let path = path.as_ref();
    let (header_line, payload) = read_artifact(path)?;
    let header: CodecHeader = serde_json::from_str(&header_line)
        .map_err(|e| Error::header(path, "header", e.to_string()))?;
    if header.magic != "LNC1" {
        return Err(Error::header(path, "magic", format!("expected \"LNC1\", got \"{}\"", header.magic)));
    }
    let kind = match header.kind.as_str() {
        "shape" => {
            let tau = header
                .tau
                .ok_or_else(|| Error::header(path, "tau", "missing for shape codec"))?;
            let norm_scale = header
                .norm_scale
                .ok_or_else(|| Error::header(path, "norm_scale", "missing for shape codec"))?;
            if !(tau > 0.0 && norm_scale > 0.0) {
                return Err(Error::header(path, "tau", "tau and norm_scale must be > 0"));
            }
            CodecKind::Shape { tau, norm_scale }
        }
        "texture" => CodecKind::Texture,
        other => {
            return Err(Error::header(path, "kind", format!("unsupported kind \"{other}\"")))
        }
    };
    let dims = (
        header.dims[0] as usize,
        header.dims[1] as usize,
        header.dims[2] as usize,
    );
    let v = dims
        .0
        .checked_mul(dims.1)
        .and_then(|p| p.checked_mul(dims.2))
        .filter(|&c| c > 0)
        .ok_or_else(|| Error::header(path, "dims", format!("invalid dims {:?}", header.dims)))?;
    let d = header.latent_dim as usize;
    if d == 0 || d > v {
        return Err(Error::header(path, "latent_dim", format!("invalid latent_dim {d} for {v} voxels")));
    }
    let expected = v + d * v + d;
    if payload.len() != expected {
        return Err(Error::PayloadLengthMismatch {
            path: path.to_path_buf(),
            expected,
            found: payload.len(),
        });
    }
    for (axis, s) in header.spacing.into_iter().enumerate() {
        if !s.is_finite() || s <= 0.0 {
            return Err(Error::header(path, "spacing", format!("axis {axis} spacing {s} must be > 0")));
        }
    }

    let mean: Vec<f64> = payload[..v].iter().map(|&x| x as f64).collect();
    let basis: Vec<f64> = payload[v..v + d * v].iter().map(|&x| x as f64).collect();
    let singular: Vec<f64> = payload[v + d * v..].iter().map(|&x| x as f64).collect();

    if singular.iter().any(|s| !s.is_finite() || *s < 0.0) {
        return Err(Error::InvalidPayload {
            path: path.to_path_buf(),
            detail: "singular values must be finite and non-negative".into(),
        });
    }
    if singular.windows(2).any(|w| w[0] < w[1]) {
        return Err(Error::InvalidPayload {
            path: path.to_path_buf(),
            detail: "singular values must be non-increasing".into(),
        });
    }
    let defect = max_orthonormality_defect(&basis, d, v);
    if defect > ORTHO_TOL {
        return Err(Error::InvalidPayload {
            path: path.to_path_buf(),
            detail: format!("basis orthonormality defect {defect:.3e} exceeds {ORTHO_TOL:.0e}"),
        });
    }

    Ok(LinearCodec {
        dims,
        spacing: (header.spacing[0], header.spacing[1], header.spacing[2]),
        kind,
        latent_dim: d,
        mean,
        basis,
        singular,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const TAU: f32 = 0.2;

    fn grid_from_values(values: Vec<f32>) -> TsdfGrid {
        TsdfGrid::from_parts((4, 4, 4), (1.0, 1.0, 1.0), TAU, 8.0, values).unwrap()
    }

    /// Orthogonal unit patterns over 64 voxels (disjoint supports).
    fn patterns() -> [Vec<f64>; 3] {
        let mut u1 = vec![0.0; 64];
        let mut u2 = vec![0.0; 64];
        let mut u3 = vec![0.0; 64];
        for i in 0..16 {
            u1[i] = 0.25;
            u2[16 + i] = 0.25;
            u3[32 + i] = 0.25;
        }
        [u1, u2, u3]
    }

    fn synthetic_grids(coeffs: &[[f64; 3]]) -> Vec<TsdfGrid> {
        let [u1, u2, u3] = patterns();
        coeffs
            .iter()
            .map(|c| {
                let values: Vec<f32> = (0..64)
                    .map(|i| {
                        let x = 0.02 + c[0] * u1[i] + c[1] * u2[i] + c[2] * u3[i];
                        x as f32
                    })
                    .collect();
                grid_from_values(values)
            })
            .collect()
    }

    #[test]
    fn identical_grids_roundtrip_exactly() {
        let g = grid_from_values(vec![0.05; 64]);
        let grids = vec![g.clone(), g.clone(), g.clone(), g.clone()];
        let codec = LinearCodec::fit_shapes(&grids, 2).unwrap();
        let z = codec.encode_shape(&g).unwrap();
        let back = codec.decode_shape(&z).unwrap();
        assert_eq!(back.values(), g.values());
    }

    #[test]
    fn three_dim_subspace_is_reconstructed() {
        // 8 samples spanning a 3-dimensional affine subspace.
        let coeffs: Vec<[f64; 3]> = vec![
            [0.08, 0.0, 0.0],
            [-0.08, 0.0, 0.0],
            [0.0, 0.06, 0.0],
            [0.0, -0.06, 0.0],
            [0.0, 0.0, 0.05],
            [0.0, 0.0, -0.05],
            [0.04, 0.03, 0.02],
            [-0.04, -0.03, -0.02],
        ];
        let grids = synthetic_grids(&coeffs);
        let codec = LinearCodec::fit_shapes(&grids, 3).unwrap();
        for g in &grids {
            let back = codec.decode_shape(&codec.encode_shape(g).unwrap()).unwrap();
            for (a, b) in back.values().iter().zip(g.values()) {
                assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn singular_values_match_construction() {
        // Coefficients sum to zero per pattern, so the mean is the constant
        // field and the singular values are the column norms of the
        // coefficient matrix (patterns are orthonormal).
        let coeffs: Vec<[f64; 3]> = vec![
            [2.0 * 0.04, 0.0, 0.0],
            [-2.0 * 0.04, 0.0, 0.0],
            [0.04, 0.0, 0.0],
            [-0.04, 0.0, 0.0],
            [0.0, 0.03, 0.0],
            [0.0, -0.03, 0.0],
        ];
        let grids = synthetic_grids(&coeffs);
        let codec = LinearCodec::fit_shapes(&grids, 3).unwrap();
        let s = codec.singular_values();
        let expected0 = (10.0f64).sqrt() * 0.04;
        let expected1 = (2.0f64).sqrt() * 0.03;
        assert!((s[0] - expected0).abs() < 1e-7, "s0 {} vs {expected0}", s[0]);
        assert!((s[1] - expected1).abs() < 1e-7, "s1 {} vs {expected1}", s[1]);
        assert!(s[2] < 1e-7, "s2 {}", s[2]);
    }

    #[test]
    fn encode_of_mean_grid_is_zero() {
        let coeffs: Vec<[f64; 3]> =
            vec![[0.05, 0.0, 0.0], [-0.05, 0.0, 0.0], [0.0, 0.04, 0.0], [0.0, -0.04, 0.0]];
        let grids = synthetic_grids(&coeffs);
        let codec = LinearCodec::fit_shapes(&grids, 2).unwrap();
        // The mean of the training set is the constant 0.02 field.
        let mean_grid = grid_from_values(vec![0.02; 64]);
        let z = codec.encode_shape(&mean_grid).unwrap();
        for c in z {
            assert!(c.abs() < 1e-7, "coordinate {c}");
        }
    }

    #[test]
    fn decode_of_zero_code_is_mean() {
        let coeffs: Vec<[f64; 3]> =
            vec![[0.05, 0.0, 0.0], [-0.05, 0.0, 0.0], [0.0, 0.04, 0.0], [0.0, -0.04, 0.0]];
        let grids = synthetic_grids(&coeffs);
        let codec = LinearCodec::fit_shapes(&grids, 2).unwrap();
        let decoded = codec.decode_shape(&vec![0.0, 0.0]).unwrap();
        for (i, v) in decoded.values().iter().enumerate() {
            let expected = if i < 32 { 0.02 } else { 0.02 };
            assert!((v - expected).abs() < 1e-6, "voxel {i}: {v}");
        }
    }

    #[test]
    fn projection_is_idempotent() {
        let coeffs: Vec<[f64; 3]> = vec![
            [0.07, 0.01, 0.0],
            [-0.03, 0.05, 0.01],
            [0.02, -0.06, 0.03],
            [-0.06, 0.0, -0.04],
            [0.05, 0.02, 0.02],
        ];
        let grids = synthetic_grids(&coeffs);
        let codec = LinearCodec::fit_shapes(&grids, 2).unwrap();
        let once = codec.decode_shape(&codec.encode_shape(&grids[0]).unwrap()).unwrap();
        let twice = codec.decode_shape(&codec.encode_shape(&once).unwrap()).unwrap();
        for (a, b) in twice.values().iter().zip(once.values()) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn encode_is_non_expansive() {
        let coeffs: Vec<[f64; 3]> = vec![
            [0.07, 0.01, 0.0],
            [-0.03, 0.05, 0.01],
            [0.02, -0.06, 0.03],
            [-0.06, 0.0, -0.04],
        ];
        let grids = synthetic_grids(&coeffs);
        let codec = LinearCodec::fit_shapes(&grids, 3).unwrap();
        for g in &grids {
            let z = codec.encode_shape(g).unwrap();
            let z_norm: f64 = z.iter().map(|x| x * x).sum::<f64>().sqrt();
            let centered: f64 = g
                .values()
                .iter()
                .enumerate()
                .map(|(i, &x)| {
                    let e = x as f64 - codec.mean[i];
                    e * e
                })
                .sum::<f64>()
                .sqrt();
            assert!(z_norm <= centered + 1e-12, "{z_norm} > {centered}");
        }
    }

    #[test]
    fn reconstruction_error_is_monotone_in_latent_dim() {
        // Random-ish blobs spanning more than 4 dimensions.
        let mut grids = Vec::new();
        for s in 0..10u64 {
            let mut state = s.wrapping_mul(0x9E3779B97F4A7C15) | 1;
            let values: Vec<f32> = (0..64)
                .map(|_| {
                    state = state
                        .wrapping_mul(6364136223846793005)
                        .wrapping_add(1442695040888963407);
                    (((state >> 40) as f64 / (1u64 << 24) as f64) - 0.5) as f32 * 0.2
                })
                .collect();
            grids.push(grid_from_values(values));
        }
        let mut prev = f64::INFINITY;
        for d in [1usize, 2, 4, 8] {
            let codec = LinearCodec::fit_shapes(&grids, d).unwrap();
            let mut err = 0.0f64;
            for g in &grids {
                let back = codec.decode_shape(&codec.encode_shape(g).unwrap()).unwrap();
                err += back
                    .values()
                    .iter()
                    .zip(g.values())
                    .map(|(a, b)| ((a - b) as f64).powi(2))
                    .sum::<f64>();
            }
            assert!(err <= prev + 1e-9, "error grew at d={d}: {err} > {prev}");
            prev = err;
        }
    }

    #[test]
    fn basis_is_orthonormal() {
        let coeffs: Vec<[f64; 3]> = vec![
            [0.07, 0.01, 0.0],
            [-0.03, 0.05, 0.01],
            [0.02, -0.06, 0.03],
            [-0.06, 0.0, -0.04],
            [0.01, 0.02, 0.05],
        ];
        let grids = synthetic_grids(&coeffs);
        let codec = LinearCodec::fit_shapes(&grids, 3).unwrap();
        let defect = max_orthonormality_defect(&codec.basis, 3, 64);
        assert!(defect <= ORTHO_TOL, "defect {defect}");
    }

    #[test]
    fn too_few_samples_is_an_error() {
        let g = grid_from_values(vec![0.05; 64]);
        let grids = vec![g.clone(), g];
        match LinearCodec::fit_shapes(&grids, 2) {
            Err(Error::TooFewSamples { needed, found }) => {
                assert_eq!(needed, 3);
                assert_eq!(found, 2);
            }
            other => panic!("expected too-few-samples, got {other:?}"),
        }
    }

    #[test]
    fn mismatched_grid_dims_are_rejected() {
        let a = grid_from_values(vec![0.05; 64]);
        let b = TsdfGrid::from_parts((2, 4, 4), (1.0, 1.0, 1.0), TAU, 8.0, vec![0.05; 32]).unwrap();
        let grids = vec![a.clone(), b, a.clone(), a];
        assert!(matches!(
            LinearCodec::fit_shapes(&grids, 2),
            Err(Error::DimsMismatch { .. })
        ));
    }

    #[test]
    fn decode_clamps_into_tau() {
        let coeffs: Vec<[f64; 3]> =
            vec![[0.08, 0.0, 0.0], [-0.08, 0.0, 0.0], [0.0, 0.08, 0.0], [0.0, -0.08, 0.0]];
        let grids = synthetic_grids(&coeffs);
        let codec = LinearCodec::fit_shapes(&grids, 2).unwrap();
        // Far outside the training range; decode must stay within [-tau, tau].
        let wild = vec![50.0, -50.0];
        let decoded = codec.decode_shape(&wild).unwrap();
        for v in decoded.values() {
            assert!(v.abs() <= TAU);
        }
    }

    #[test]
    fn file_roundtrip_preserves_behaviour() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("shape.codec");
        let coeffs: Vec<[f64; 3]> = vec![
            [0.07, 0.01, 0.0],
            [-0.03, 0.05, 0.01],
            [0.02, -0.06, 0.03],
            [-0.06, 0.0, -0.04],
        ];
        let grids = synthetic_grids(&coeffs);
        let codec = LinearCodec::fit_shapes(&grids, 3).unwrap();
        save_codec(&path, &codec).unwrap();
        let loaded = load_codec(&path).unwrap();
        assert_eq!(loaded.latent_dim(), 3);
        assert_eq!(loaded.dims(), codec.dims());
        for g in &grids {
            let a = codec.decode_shape(&codec.encode_shape(g).unwrap()).unwrap();
            let b = loaded.decode_shape(&loaded.encode_shape(g).unwrap()).unwrap();
            for (x, y) in a.values().iter().zip(b.values()) {
                assert!((x - y).abs() < 1e-5, "{x} vs {y}");
            }
        }

        // Saving twice produces identical bytes.
        let path2 = dir.path().join("shape2.codec");
        save_codec(&path2, &codec).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn texture_codec_clamps_to_unit_interval() {
        let mut patches = Vec::new();
        for s in 0..6u64 {
            let mut state = s.wrapping_mul(0xD1B54A32D192ED03) | 1;
            let values: Vec<f32> = (0..27)
                .map(|_| {
                    state = state
                        .wrapping_mul(6364136223846793005)
                        .wrapping_add(1442695040888963407);
                    (((state >> 40) as f64 / (1u64 << 24) as f64) - 0.5) as f32
                })
                .collect();
            patches.push(
                Volume::from_parts((3, 3, 3), (1.0, 1.0, 1.0), Unit::Normalized, values).unwrap(),
            );
        }
        let codec = LinearCodec::fit_textures(&patches, 2).unwrap();
        let decoded = codec.decode_texture(&vec![100.0, -100.0]).unwrap();
        for v in decoded.values() {
            assert!(v.abs() <= 1.0);
        }
        // Shape API must refuse texture codecs.
        assert!(codec.decode_shape(&vec![0.0, 0.0]).is_err());
    }

    #[test]
    fn latent_std_of_training_codes() {
        let coeffs: Vec<[f64; 3]> = vec![
            [0.06, 0.0, 0.0],
            [-0.06, 0.0, 0.0],
            [0.03, 0.04, 0.0],
            [-0.03, -0.04, 0.0],
        ];
        let grids = synthetic_grids(&coeffs);
        let codec = LinearCodec::fit_shapes(&grids, 2).unwrap();
        let codes: Vec<LatentCode> =
            grids.iter().map(|g| codec.encode_shape(g).unwrap()).collect();
        let std = LinearCodec::empirical_latent_std(&codes).unwrap();
        assert_eq!(std.len(), 2);
        for s in std {
            assert!(s.is_finite() && s > 0.0);
        }
    }
}
