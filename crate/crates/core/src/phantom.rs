//! Procedural stand-in data.
//!
//! Clinical volumes cannot ship with the repository, so this module builds
//! the three ingredients every end-to-end run needs: blobby lesion masks
//! (unions of overlapping randomized ellipsoids), soft-tissue CT backgrounds
//! with air and bone pockets that exercise the placement constraints, and
//! normalized texture patches whose interior is brighter than their
//! surroundings. Everything is driven by a caller-supplied seeded stream, so
//! generated corpora are reproducible byte for byte.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::volume::{Mask, Unit, Volume};

/// Foreground never comes closer to the patch border than this many voxels,
/// leaving room for the distance band and for modest rescaling.
pub const BLOB_MARGIN: usize = 3;

/// Rotation matrix from a uniformly random unit quaternion.
fn random_rotation(rng: &mut ChaCha8Rng) -> [[f64; 3]; 3] {
    let mut q = [0.0f64; 4];
    loop {
        for v in &mut q {
            *v = rng.sample(StandardNormal);
        }
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 1e-9 {
            for v in &mut q {
                *v /= n;
            }
            break;
        }
    }
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

struct Ellipsoid {
    center: (f64, f64, f64),
    semi_axes: (f64, f64, f64),
    rotation: [[f64; 3]; 3],
}

impl Ellipsoid {
    fn contains(&self, x: f64, y: f64, z: f64) -> bool {
        let p = (x - self.center.0, y - self.center.1, z - self.center.2);
        let r = &self.rotation;
        // Rotate into the ellipsoid frame (transpose applied to the offset).
        let u = (
            r[0][0] * p.0 + r[1][0] * p.1 + r[2][0] * p.2,
            r[0][1] * p.0 + r[1][1] * p.1 + r[2][1] * p.2,
            r[0][2] * p.0 + r[1][2] * p.1 + r[2][2] * p.2,
        );
        let (a, b, c) = self.semi_axes;
        (u.0 / a).powi(2) + (u.1 / b).powi(2) + (u.2 / c).powi(2) <= 1.0
    }
}

/// Builds a connected blobby mask from 1 to 3 overlapping randomized
/// ellipsoids, kept [`BLOB_MARGIN`] voxels away from every border.
pub fn blob_mask(
    dims: (usize, usize, usize),
    spacing: (f64, f64, f64),
    rng: &mut ChaCha8Rng,
) -> Result<Mask> {
    let (nx, ny, nz) = dims;
    let min_dim = nx.min(ny).min(nz);
    if min_dim < 4 * BLOB_MARGIN {
        return Err(Error::arg(
            "dims",
            format!("need at least {} voxels per axis, got {dims:?}", 4 * BLOB_MARGIN),
        ));
    }

    let mut mask = Mask::empty(dims, spacing)?;
    let jitter = min_dim as f64 * 0.08;
    let mut anchor = (
        nx as f64 / 2.0 + rng.gen_range(-jitter..=jitter),
        ny as f64 / 2.0 + rng.gen_range(-jitter..=jitter),
        nz as f64 / 2.0 + rng.gen_range(-jitter..=jitter),
    );

    let count = rng.gen_range(1..=3usize);
    let lo = nx.min(ny).min(nz) as f64 / 8.0;
    let hi = nx.min(ny).min(nz) as f64 / 3.4;
    for blob in 0..count {
        let base = rng.gen_range(lo..=hi);
        let semi_axes = (
            base * rng.gen_range(0.6..=1.4),
            base * rng.gen_range(0.6..=1.4),
            base * rng.gen_range(0.6..=1.4),
        );
        let e = Ellipsoid { center: anchor, semi_axes, rotation: random_rotation(rng) };

        for z in BLOB_MARGIN..nz - BLOB_MARGIN {
            for y in BLOB_MARGIN..ny - BLOB_MARGIN {
                for x in BLOB_MARGIN..nx - BLOB_MARGIN {
                    if e.contains(x as f64, y as f64, z as f64) {
                        mask.set(x, y, z);
                    }
                }
            }
        }

        if blob + 1 < count {
            // Anchor the next ellipsoid at a random voxel of the union so
            // far, which keeps the whole shape 6-connected.
            let fg: Vec<(usize, usize, usize)> = foreground_voxels(&mask);
            if fg.is_empty() {
                break;
            }
            let (x, y, z) = fg[rng.gen_range(0..fg.len())];
            anchor = (x as f64, y as f64, z as f64);
        }
    }

    // A degenerate draw (tiny ellipsoid between lattice points) could miss
    // every voxel center; stamp the anchor's nearest in-margin voxel.
    if mask.foreground_count() == 0 {
        let cx = (anchor.0.round() as usize).clamp(BLOB_MARGIN, nx - BLOB_MARGIN - 1);
        let cy = (anchor.1.round() as usize).clamp(BLOB_MARGIN, ny - BLOB_MARGIN - 1);
        let cz = (anchor.2.round() as usize).clamp(BLOB_MARGIN, nz - BLOB_MARGIN - 1);
        mask.set(cx, cy, cz);
    }
    Ok(mask)
}

fn foreground_voxels(mask: &Mask) -> Vec<(usize, usize, usize)> {
    let (nx, ny, nz) = mask.dims();
    let mut out = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if mask.is_set(x, y, z) {
                    out.push((x, y, z));
                }
            }
        }
    }
    out
}

/// A CT background plus the region mask that placement is allowed inside.
pub struct Background {
    pub ct: Volume,
    pub region: Mask,
}

/// Builds a mostly soft-tissue CT volume: a gently varying base near 40 HU
/// with a few air and bone pockets, plus an ellipsoidal generation region
/// covering the center. The pockets give the placement constraints real
/// rejections to work against.
pub fn soft_tissue_background(
    dims: (usize, usize, usize),
    spacing: (f64, f64, f64),
    rng: &mut ChaCha8Rng,
) -> Result<Background> {
    let (nx, ny, nz) = dims;
    if nx < 16 || ny < 16 || nz < 16 {
        return Err(Error::arg("dims", format!("need at least 16 voxels per axis, got {dims:?}")));
    }

    // Smooth base field: mean soft tissue plus a few low-frequency modes.
    struct Mode {
        freq: (f64, f64, f64),
        phase: f64,
        amp: f64,
    }
    let modes: Vec<Mode> = (0..4)
        .map(|_| Mode {
            freq: (
                rng.gen_range(1..=2u32) as f64,
                rng.gen_range(1..=2u32) as f64,
                rng.gen_range(1..=2u32) as f64,
            ),
            phase: rng.gen_range(0.0..std::f64::consts::TAU),
            amp: rng.gen_range(5.0..=22.0),
        })
        .collect();

    struct Pocket {
        center: (f64, f64, f64),
        radius: f64,
        hu: f64,
    }
    let mut pockets = Vec::new();
    let n_air = rng.gen_range(1..=3usize);
    let n_bone = rng.gen_range(1..=3usize);
    for i in 0..n_air + n_bone {
        let hu = if i < n_air {
            rng.gen_range(-950.0..=-700.0)
        } else {
            rng.gen_range(400.0..=1100.0)
        };
        pockets.push(Pocket {
            center: (
                rng.gen_range(0.0..nx as f64),
                rng.gen_range(0.0..ny as f64),
                rng.gen_range(0.0..nz as f64),
            ),
            radius: rng.gen_range(3.0..=(nx.min(ny).min(nz) as f64 / 5.0)),
            hu,
        });
    }

    let mut values = Vec::with_capacity(nx * ny * nz);
    let mut region = Mask::empty(dims, spacing)?;
    let rc = (nx as f64 / 2.0, ny as f64 / 2.0, nz as f64 / 2.0);
    let rr = (nx as f64 * 0.40, ny as f64 * 0.40, nz as f64 * 0.42);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let mut hu = 40.0;
                for m in &modes {
                    let arg = std::f64::consts::TAU
                        * (m.freq.0 * x as f64 / nx as f64
                            + m.freq.1 * y as f64 / ny as f64
                            + m.freq.2 * z as f64 / nz as f64)
                        + m.phase;
                    hu += m.amp * arg.cos();
                }
                hu += rng.gen_range(-8.0..=8.0);
                for p in &pockets {
                    let d2 = (x as f64 - p.center.0).powi(2)
                        + (y as f64 - p.center.1).powi(2)
                        + (z as f64 - p.center.2).powi(2);
                    if d2 <= p.radius * p.radius {
                        hu = p.hu + rng.gen_range(-30.0..=30.0);
                    }
                }
                values.push(hu.clamp(-1000.0, 1500.0) as f32);

                let e = ((x as f64 - rc.0) / rr.0).powi(2)
                    + ((y as f64 - rc.1) / rr.1).powi(2)
                    + ((z as f64 - rc.2) / rr.2).powi(2);
                if e <= 1.0 {
                    region.set(x, y, z);
                }
            }
        }
    }

    let ct = Volume::from_parts(dims, spacing, Unit::Hu, values)?;
    Ok(Background { ct, region })
}

/// Builds a normalized texture patch for a lesion mask: a brighter interior
/// over a dimmer surround, with a smooth illumination mode and fine noise.
pub fn texture_patch(mask: &Mask, rng: &mut ChaCha8Rng) -> Result<Volume> {
    let (nx, ny, nz) = mask.dims();
    let inside_level = rng.gen_range(0.35..=0.60);
    let outside_level = rng.gen_range(-0.15..=0.05);
    let mode_amp = rng.gen_range(0.02..=0.08);
    let mode_freq = (
        rng.gen_range(1..=2u32) as f64,
        rng.gen_range(1..=2u32) as f64,
        rng.gen_range(1..=2u32) as f64,
    );
    let mode_phase = rng.gen_range(0.0..std::f64::consts::TAU);

    let mut values = Vec::with_capacity(nx * ny * nz);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let level = if mask.is_set(x, y, z) { inside_level } else { outside_level };
                let arg = std::f64::consts::TAU
                    * (mode_freq.0 * x as f64 / nx as f64
                        + mode_freq.1 * y as f64 / ny as f64
                        + mode_freq.2 * z as f64 / nz as f64)
                    + mode_phase;
                let v = level + mode_amp * arg.cos() + rng.gen_range(-0.05..=0.05);
                values.push(v.clamp(-0.95, 0.95) as f32);
            }
        }
    }
    Volume::from_parts(mask.dims(), mask.spacing(), Unit::Normalized, values)
}
