//! Explicit-space shape refiner.
//!
//! Decoding a noisy latent code loses surface detail, so a small 3D
//! convolutional residual network is trained to map noisy reconstructions
//! back toward their clean distance fields: `out = clamp(in + residual(in))`.
//! The residual path is two 3x3x3 convolutions (1 -> 8 -> 1 channels) with a
//! SiLU in between, zero-padded so dims are preserved. Training pairs come
//! from [`make_noisy_recon`], which perturbs codes in latent space the same
//! way late sampler steps do.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::artifact::{read_artifact, write_artifact};
use crate::codec::LinearCodec;
use crate::error::{Error, Result};
use crate::nn::{silu, silu_prime, Adam};
use crate::rng::{derive_rng, stream};
use crate::sdf::TsdfGrid;

/// Hidden channel count of the residual path.
pub const HIDDEN_CHANNELS: usize = 8;
/// Cubic kernel edge length.
pub const KERNEL: usize = 3;

const TAPS: usize = KERNEL * KERNEL * KERNEL;
/// conv1 weights + conv1 bias + conv2 weights + conv2 bias.
const PARAM_COUNT: usize = HIDDEN_CHANNELS * TAPS + HIDDEN_CHANNELS + HIDDEN_CHANNELS * TAPS + 1;

const W1: usize = 0;
const B1: usize = W1 + HIDDEN_CHANNELS * TAPS;
const W2: usize = B1 + HIDDEN_CHANNELS;
const B2: usize = W2 + HIDDEN_CHANNELS * TAPS;

/// Grid-to-grid residual refiner with a clamped identity skip connection.
#[derive(Debug, Clone)]
pub struct AdapterNet {
    tau: f32,
    params: Vec<f64>,
}

/// Gathers the 27-neighborhood of `(x, y, z)` into `buf`, reading zeros
/// outside the grid (zero padding).
#[inline]
fn gather_taps(
    values: &[f64],
    dims: (usize, usize, usize),
    x: usize,
    y: usize,
    z: usize,
    buf: &mut [f64; TAPS],
) {
    let (nx, ny, nz) = dims;
    let mut k = 0;
    for dz in 0..KERNEL {
        let zz = z as isize + dz as isize - 1;
        for dy in 0..KERNEL {
            let yy = y as isize + dy as isize - 1;
            for dx in 0..KERNEL {
                let xx = x as isize + dx as isize - 1;
                buf[k] = if xx >= 0
                    && yy >= 0
                    && zz >= 0
                    && (xx as usize) < nx
                    && (yy as usize) < ny
                    && (zz as usize) < nz
                {
                    values[(zz as usize * ny + yy as usize) * nx + xx as usize]
                } else {
                    0.0
                };
                k += 1;
            }
        }
    }
}

/// Scatter-adds `weight * contribution` over the 27-neighborhood, the adjoint
/// of [`gather_taps`].
#[inline]
fn scatter_taps(
    acc: &mut [f64],
    dims: (usize, usize, usize),
    x: usize,
    y: usize,
    z: usize,
    weights: &[f64],
    scale: f64,
) {
    let (nx, ny, nz) = dims;
    let mut k = 0;
    for dz in 0..KERNEL {
        let zz = z as isize + dz as isize - 1;
        for dy in 0..KERNEL {
            let yy = y as isize + dy as isize - 1;
            for dx in 0..KERNEL {
                let xx = x as isize + dx as isize - 1;
                if xx >= 0
                    && yy >= 0
                    && zz >= 0
                    && (xx as usize) < nx
                    && (yy as usize) < ny
                    && (zz as usize) < nz
                {
                    acc[(zz as usize * ny + yy as usize) * nx + xx as usize] +=
                        scale * weights[k];
                }
                k += 1;
            }
        }
    }
}

/// Intermediates of one forward pass kept for backpropagation.
struct ForwardTrace {
    input: Vec<f64>,
    /// Pre-activations of the hidden channels, channel-major.
    pre: Vec<f64>,
    /// Pre-clamp residual sums.
    raw: Vec<f64>,
    /// Clamped outputs.
    out: Vec<f64>,
}

impl AdapterNet {
    /// Fresh net: random first conv, zeroed second conv, so the initial
    /// refiner is exactly the identity.
    pub fn new(tau: f32, rng: &mut ChaCha8Rng) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::arg("tau", "must be positive and finite"));
        }
        let mut params = vec![0.0f64; PARAM_COUNT];
        let std = (2.0 / TAPS as f64).sqrt();
        for p in &mut params[W1..B1] {
            *p = rng.sample::<f64, _>(StandardNormal) * std;
        }
        Ok(AdapterNet { tau, params })
    }

    pub fn from_params(tau: f32, params: Vec<f64>) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::arg("tau", "must be positive and finite"));
        }
        if params.len() != PARAM_COUNT {
            return Err(Error::arg(
                "params",
                format!("expected {PARAM_COUNT} coefficients, got {}", params.len()),
            ));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::arg("params", "coefficients must be finite"));
        }
        Ok(AdapterNet { tau, params })
    }

    pub fn tau(&self) -> f32 {
        self.tau
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        PARAM_COUNT
    }

    fn forward_trace(&self, grid: &TsdfGrid) -> ForwardTrace {
        let dims = grid.dims();
        let (nx, ny, nz) = dims;
        let n = nx * ny * nz;
        let input: Vec<f64> = grid.values().iter().map(|&v| v as f64).collect();
        let tau = self.tau as f64;

        let mut pre = vec![0.0f64; HIDDEN_CHANNELS * n];
        let mut taps = [0.0f64; TAPS];
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let v = (z * ny + y) * nx + x;
                    gather_taps(&input, dims, x, y, z, &mut taps);
                    for c in 0..HIDDEN_CHANNELS {
                        let w = &self.params[W1 + c * TAPS..W1 + (c + 1) * TAPS];
                        let mut acc = self.params[B1 + c];
                        for k in 0..TAPS {
                            acc += w[k] * taps[k];
                        }
                        pre[c * n + v] = acc;
                    }
                }
            }
        }

        let hidden: Vec<f64> = pre.iter().map(|&s| silu(s)).collect();
        let mut raw = vec![0.0f64; n];
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let v = (z * ny + y) * nx + x;
                    let mut acc = self.params[B2];
                    for c in 0..HIDDEN_CHANNELS {
                        gather_taps(&hidden[c * n..(c + 1) * n], dims, x, y, z, &mut taps);
                        let w = &self.params[W2 + c * TAPS..W2 + (c + 1) * TAPS];
                        for k in 0..TAPS {
                            acc += w[k] * taps[k];
                        }
                    }
                    raw[v] = input[v] + acc;
                }
            }
        }

        let out: Vec<f64> = raw.iter().map(|&u| u.clamp(-tau, tau)).collect();
        ForwardTrace { input, pre, raw, out }
    }

    /// Backpropagates `d_out` (gradient with respect to the clamped output)
    /// into the parameter gradient accumulator.
    fn backward(
        &self,
        dims: (usize, usize, usize),
        trace: &ForwardTrace,
        d_out: &[f64],
        grad: &mut [f64],
    ) {
        let (nx, ny, nz) = dims;
        let n = nx * ny * nz;
        let tau = self.tau as f64;
        let mut taps = [0.0f64; TAPS];

        // Clamp passes gradient only strictly inside the band.
        let d_raw: Vec<f64> = trace
            .raw
            .iter()
            .zip(d_out)
            .map(|(&u, &d)| if u.abs() < tau { d } else { 0.0 })
            .collect();

        let hidden: Vec<f64> = trace.pre.iter().map(|&s| silu(s)).collect();
        let mut d_hidden = vec![0.0f64; HIDDEN_CHANNELS * n];
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let v = (z * ny + y) * nx + x;
                    let d = d_raw[v];
                    if d == 0.0 {
                        continue;
                    }
                    grad[B2] += d;
                    for c in 0..HIDDEN_CHANNELS {
                        gather_taps(&hidden[c * n..(c + 1) * n], dims, x, y, z, &mut taps);
                        let wg = &mut grad[W2 + c * TAPS..W2 + (c + 1) * TAPS];
                        for k in 0..TAPS {
                            wg[k] += d * taps[k];
                        }
                        scatter_taps(
                            &mut d_hidden[c * n..(c + 1) * n],
                            dims,
                            x,
                            y,
                            z,
                            &self.params[W2 + c * TAPS..W2 + (c + 1) * TAPS],
                            d,
                        );
                    }
                }
            }
        }

        for c in 0..HIDDEN_CHANNELS {
            let pre_c = &trace.pre[c * n..(c + 1) * n];
            let dh_c = &d_hidden[c * n..(c + 1) * n];
            for z in 0..nz {
                for y in 0..ny {
                    for x in 0..nx {
                        let v = (z * ny + y) * nx + x;
                        let ds = dh_c[v] * silu_prime(pre_c[v]);
                        if ds == 0.0 {
                            continue;
                        }
                        grad[B1 + c] += ds;
                        gather_taps(&trace.input, dims, x, y, z, &mut taps);
                        let wg = &mut grad[W1 + c * TAPS..W1 + (c + 1) * TAPS];
                        for k in 0..TAPS {
                            wg[k] += ds * taps[k];
                        }
                    }
                }
            }
        }
    }
}

/// Runs the refiner on a grid. Output dims, spacing, tau and norm scale are
/// inherited from the input; values stay within the truncation band by
/// construction.
pub fn apply_adapter(net: &AdapterNet, grid: &TsdfGrid) -> Result<TsdfGrid> {
    if net.tau != grid.tau() {
        return Err(Error::arg(
            "grid",
            format!("adapter trained for tau {}, grid has {}", net.tau, grid.tau()),
        ));
    }
    let trace = net.forward_trace(grid);
    let values: Vec<f32> = trace.out.iter().map(|&v| v as f32).collect();
    TsdfGrid::from_parts(grid.dims(), grid.spacing(), grid.tau(), grid.norm_scale(), values)
}

/// Decodes `encode(M) + sigma .* g` with per-coordinate noise scales,
/// producing the corrupted reconstruction the adapter learns to repair.
pub fn make_noisy_recon(
    grid: &TsdfGrid,
    codec: &LinearCodec,
    sigma: &[f64],
    rng: &mut ChaCha8Rng,
) -> Result<TsdfGrid> {
    if sigma.len() != codec.latent_dim() {
        return Err(Error::arg(
            "sigma",
            format!("expected {} scales, got {}", codec.latent_dim(), sigma.len()),
        ));
    }
    if sigma.iter().any(|s| !s.is_finite() || *s < 0.0) {
        return Err(Error::arg("sigma", "scales must be finite and non-negative"));
    }
    let mut z = codec.encode_shape(grid)?;
    for (c, s) in z.iter_mut().zip(sigma) {
        *c += s * rng.sample::<f64, _>(StandardNormal);
    }
    codec.decode_shape(&z)
}

/// Which norm the training objective uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AdapterLossKind {
    #[serde(rename = "l1")]
    MeanAbsolute,
    #[serde(rename = "l2")]
    MeanSquared,
}

/// Mean per-voxel reconstruction penalty of `net` on one pair, with optional
/// gradient accumulation.
pub fn adapter_loss(
    clean: &TsdfGrid,
    noisy: &TsdfGrid,
    net: &AdapterNet,
    kind: AdapterLossKind,
    grad: Option<&mut [f64]>,
) -> Result<f64> {
    if clean.dims() != noisy.dims() {
        return Err(Error::DimsMismatch { expected: clean.dims(), found: noisy.dims() });
    }
    if clean.tau() != net.tau || noisy.tau() != net.tau {
        return Err(Error::arg("pair", "tau must match the adapter"));
    }
    let dims = clean.dims();
    let n = clean.values().len() as f64;
    let trace = net.forward_trace(noisy);
    let mut loss = 0.0f64;
    let mut d_out = vec![0.0f64; clean.values().len()];
    for (i, (&m, &o)) in clean.values().iter().zip(&trace.out).enumerate() {
        let diff = o - m as f64;
        match kind {
            AdapterLossKind::MeanAbsolute => {
                loss += diff.abs();
                d_out[i] = diff.signum() / n;
            }
            AdapterLossKind::MeanSquared => {
                loss += diff * diff;
                d_out[i] = 2.0 * diff / n;
            }
        }
    }
    if let Some(grad) = grad {
        net.backward(dims, &trace, &d_out, grad);
    }
    Ok(loss / n)
}

/// Knobs of [`train_adapter`].
#[derive(Debug, Clone)]
pub struct AdapterTrainOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Weight of the adapter term in the reported combined objective.
    pub lambda: f64,
    pub loss_kind: AdapterLossKind,
    pub seed: u64,
}

impl Default for AdapterTrainOptions {
    fn default() -> Self {
        AdapterTrainOptions {
            steps: 150,
            batch_size: 8,
            lr: 1e-3,
            lambda: 1.0,
            loss_kind: AdapterLossKind::MeanAbsolute,
            seed: 0,
        }
    }
}

/// Outcome of adapter training. `initial_loss` is the whole-set loss of the
/// untrained (identity) refiner, so `final_loss < initial_loss` means the
/// adapter beats leaving reconstructions untouched.
#[derive(Debug, Clone)]
pub struct AdapterTrainReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub step_losses: Vec<f64>,
    /// `diffusion_loss + lambda * final_loss` when a diffusion loss was
    /// supplied for the combined objective readout.
    pub combined_total: Option<f64>,
}

fn eval_pairs(
    net: &AdapterNet,
    pairs: &[(TsdfGrid, TsdfGrid)],
    kind: AdapterLossKind,
) -> Result<f64> {
    let mut total = 0.0;
    for (clean, noisy) in pairs {
        total += adapter_loss(clean, noisy, net, kind, None)?;
    }
    Ok(total / pairs.len() as f64)
}

/// Trains the refiner on `(clean, noisy)` pairs. The denoiser and the
/// adapter share no parameters, so this runs as its own phase; a diffusion
/// loss passed in is only folded into the reported combined total.
pub fn train_adapter(
    pairs: &[(TsdfGrid, TsdfGrid)],
    opts: &AdapterTrainOptions,
    diffusion_loss: Option<f64>,
) -> Result<(AdapterNet, AdapterTrainReport)> {
    let first = pairs.first().ok_or(Error::TooFewRows { needed: 1, found: 0 })?;
    let tau = first.0.tau();
    let dims = first.0.dims();
    for (clean, noisy) in pairs {
        if clean.dims() != dims || noisy.dims() != dims {
            return Err(Error::DimsMismatch {
                expected: dims,
                found: if clean.dims() != dims { clean.dims() } else { noisy.dims() },
            });
        }
        if clean.tau() != tau || noisy.tau() != tau {
            return Err(Error::arg("pairs", "all pairs must share one tau"));
        }
    }
    if opts.steps == 0 || opts.batch_size == 0 {
        return Err(Error::arg("options", "steps and batch_size must be >= 1"));
    }
    if !(opts.lr.is_finite() && opts.lr > 0.0) {
        return Err(Error::arg("lr", "must be a positive finite number"));
    }
    if !(opts.lambda.is_finite() && opts.lambda >= 0.0) {
        return Err(Error::arg("lambda", "must be finite and non-negative"));
    }

    let mut init_rng = derive_rng(opts.seed, &[stream::NET_INIT, 2]);
    let mut net = AdapterNet::new(tau, &mut init_rng)?;
    let initial_loss = eval_pairs(&net, pairs, opts.loss_kind)?;

    let n = pairs.len();
    let mut opt = Adam::new(net.param_count(), opts.lr);
    let mut grad = vec![0.0f64; net.param_count()];
    let mut indices: Vec<usize> = (0..n).collect();
    let mut step_losses = Vec::with_capacity(opts.steps);

    for step in 0..opts.steps {
        let mut batch_rng = derive_rng(opts.seed, &[stream::ADAPTER_PAIRS, step as u64]);
        let take = opts.batch_size.min(n);
        for i in 0..take {
            let j = batch_rng.gen_range(i..n);
            indices.swap(i, j);
        }

        grad.fill(0.0);
        let mut loss = 0.0;
        for &i in &indices[..take] {
            let (clean, noisy) = &pairs[i];
            loss += adapter_loss(clean, noisy, &net, opts.loss_kind, Some(&mut grad))?;
        }
        loss /= take as f64;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        // Per-pair losses were averaged after gradient accumulation, so
        // rescale the gradient to match the mean.
        for g in &mut grad {
            *g /= take as f64;
        }
        step_losses.push(loss);
        opt.step(&mut net.params, &grad)?;
    }

    let final_loss = eval_pairs(&net, pairs, opts.loss_kind)?;
    let combined_total = diffusion_loss.map(|dl| dl + opts.lambda * final_loss);
    Ok((net, AdapterTrainReport { initial_loss, final_loss, step_losses, combined_total }))
}

// ---------------------------------------------------------------------------
// i/o
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdapterHeader {
    magic: String,
    kernel: u64,
    hidden_channels: u64,
    tau: f32,
}

/// Writes an `.adpt` checkpoint: JSON header plus the flat coefficients.
pub fn save_adapter(path: impl AsRef<Path>, net: &AdapterNet) -> Result<()> {
    let header = AdapterHeader {
        magic: "LNA1".to_string(),
        kernel: KERNEL as u64,
        hidden_channels: HIDDEN_CHANNELS as u64,
        tau: net.tau,
    };
    let header_line =
        serde_json::to_string(&header).map_err(|e| Error::arg("header", e.to_string()))?;
    let payload: Vec<f32> = net.params.iter().map(|&p| p as f32).collect();
    write_artifact(path.as_ref(), &header_line, &payload)
}

/// Reads an `.adpt` checkpoint.
pub fn load_adapter(path: impl AsRef<Path>) -> Result<AdapterNet> {
    let path = path.as_ref();
    let (header_line, payload) = read_artifact(path)?;
    let header: AdapterHeader = serde_json::from_str(&header_line)
        .map_err(|e| Error::header(path, "header", e.to_string()))?;
    if header.magic != "LNA1" {
        return Err(Error::header(path, "magic", format!("expected \"LNA1\", got \"{}\"", header.magic)));
    }
    if header.kernel != KERNEL as u64 || header.hidden_channels != HIDDEN_CHANNELS as u64 {
        return Err(Error::header(
            path,
            "architecture",
            format!(
                "expected kernel {KERNEL} with {HIDDEN_CHANNELS} hidden channels, got {} and {}",
                header.kernel, header.hidden_channels
            ),
        ));
    }
    if payload.len() != PARAM_COUNT {
        return Err(Error::PayloadLengthMismatch {
            path: path.to_path_buf(),
            expected: PARAM_COUNT,
            found: payload.len(),
        });
    }
    AdapterNet::from_params(header.tau, payload.iter().map(|&p| p as f64).collect())
        .map_err(|e| Error::InvalidPayload { path: path.to_path_buf(), detail: e.to_string() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sdf::mask_to_tsdf;
    use crate::volume::Mask;

    const TAU: f32 = 0.2;

    fn grid_from_values(dims: (usize, usize, usize), values: Vec<f32>) -> TsdfGrid {
        TsdfGrid::from_parts(dims, (1.0, 1.0, 1.0), TAU, 8.0, values).unwrap()
    }

    fn lcg_values(n: usize, seed: u64, scale: f32) -> Vec<f32> {
        let mut state = seed.wrapping_mul(0x9E3779B97F4A7C15) | 1;
        (0..n)
            .map(|_| {
                state = state
                    .wrapping_mul(6364136223846793005)
                    .wrapping_add(1442695040888963407);
                (((state >> 40) as f64 / (1u64 << 24) as f64) - 0.5) as f32 * scale
            })
            .collect()
    }

    /// Ball-ish blob masks for small training sets.
    fn blob_grid(dims: (usize, usize, usize), seed: u64) -> TsdfGrid {
        let (nx, ny, nz) = dims;
        let cx = nx as f64 / 2.0 + (seed % 3) as f64 - 1.0;
        let cy = ny as f64 / 2.0 + (seed % 2) as f64;
        let cz = nz as f64 / 2.0;
        let r = nx as f64 / 4.0 + (seed % 4) as f64 * 0.5;
        let mut mask = Mask::empty(dims, (1.0, 1.0, 1.0)).unwrap();
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let d2 = (x as f64 - cx).powi(2)
                        + (y as f64 - cy).powi(2)
                        + (z as f64 - cz).powi(2);
                    if d2 <= r * r {
                        mask.set(x, y, z);
                    }
                }
            }
        }
        mask_to_tsdf(&mask, TAU, 8.0).unwrap()
    }

    #[test]
    fn fresh_adapter_is_identity() {
        let mut rng = derive_rng(1, &[stream::NET_INIT, 2]);
        let net = AdapterNet::new(TAU, &mut rng).unwrap();
        let grid = grid_from_values((5, 4, 3), lcg_values(60, 9, 0.3));
        let out = apply_adapter(&net, &grid).unwrap();
        assert_eq!(out.values(), grid.values());
        assert_eq!(out.dims(), grid.dims());
    }

    #[test]
    fn identity_adapter_loss_is_mean_absolute_difference() {
        let mut rng = derive_rng(1, &[stream::NET_INIT, 2]);
        let net = AdapterNet::new(TAU, &mut rng).unwrap();
        let clean = grid_from_values((4, 4, 4), lcg_values(64, 3, 0.3));
        let noisy = grid_from_values((4, 4, 4), lcg_values(64, 4, 0.3));
        let loss = adapter_loss(&clean, &noisy, &net, AdapterLossKind::MeanAbsolute, None).unwrap();
        let expected: f64 = clean
            .values()
            .iter()
            .zip(noisy.values())
            .map(|(a, b)| (*a as f64 - *b as f64).abs())
            .sum::<f64>()
            / 64.0;
        assert!((loss - expected).abs() < 1e-12, "{loss} vs {expected}");
    }

    #[test]
    fn equal_pair_identity_loss_is_zero() {
        let mut rng = derive_rng(1, &[stream::NET_INIT, 2]);
        let net = AdapterNet::new(TAU, &mut rng).unwrap();
        let g = grid_from_values((4, 4, 4), lcg_values(64, 3, 0.3));
        let loss = adapter_loss(&g, &g, &net, AdapterLossKind::MeanAbsolute, None).unwrap();
        assert_eq!(loss, 0.0);
    }

    /// Randomizes every parameter so the finite-difference probe exercises
    /// both convolutions, then keeps values away from the clamp and the L1
    /// kink where the subgradient is ambiguous.
    fn gradient_check(kind: AdapterLossKind) {
        let mut rng = derive_rng(3, &[stream::NET_INIT, 2]);
        let mut net = AdapterNet::new(TAU, &mut rng).unwrap();
        for (i, p) in net.params.iter_mut().enumerate() {
            *p = 0.03 * (((i * 2654435761) % 17) as f64 / 17.0 - 0.45);
        }
        let clean = grid_from_values((4, 4, 4), lcg_values(64, 5, 0.25));
        let noisy = grid_from_values((4, 4, 4), lcg_values(64, 6, 0.25));

        // Confirm the configuration is away from non-differentiable points.
        let trace = net.forward_trace(&noisy);
        for (&u, &m) in trace.raw.iter().zip(clean.values()) {
            assert!((u.abs() - TAU as f64).abs() > 1e-3, "too close to clamp");
            assert!((u.clamp(-TAU as f64, TAU as f64) - m as f64).abs() > 1e-4, "on the L1 kink");
        }

        let mut grad = vec![0.0; net.param_count()];
        adapter_loss(&clean, &noisy, &net, kind, Some(&mut grad)).unwrap();

        let h = 1e-5;
        for i in 0..net.param_count() {
            let mut plus = net.clone();
            plus.params[i] += h;
            let lp = adapter_loss(&clean, &noisy, &plus, kind, None).unwrap();
            let mut minus = net.clone();
            minus.params[i] -= h;
            let lm = adapter_loss(&clean, &noisy, &minus, kind, None).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            let err = (grad[i] - fd).abs();
            assert!(err <= 1e-3 * (1.0 + fd.abs()), "param {i}: {} vs {fd}", grad[i]);
        }
    }

    #[test]
    fn l1_gradient_matches_finite_differences() {
        gradient_check(AdapterLossKind::MeanAbsolute);
    }

    #[test]
    fn l2_gradient_matches_finite_differences() {
        gradient_check(AdapterLossKind::MeanSquared);
    }

    fn toy_codec(dims: (usize, usize, usize)) -> (LinearCodec, Vec<TsdfGrid>) {
        let grids: Vec<TsdfGrid> = (0..12).map(|s| blob_grid(dims, s)).collect();
        let codec = LinearCodec::fit_shapes(&grids, 4).unwrap();
        (codec, grids)
    }

    #[test]
    fn zero_sigma_recon_is_codec_roundtrip() {
        let (codec, grids) = toy_codec((8, 8, 8));
        let mut rng = derive_rng(0, &[stream::ADAPTER_PAIRS, 7]);
        let recon = make_noisy_recon(&grids[0], &codec, &[0.0; 4], &mut rng).unwrap();
        let direct = codec.decode_shape(&codec.encode_shape(&grids[0]).unwrap()).unwrap();
        assert_eq!(recon.values(), direct.values());
    }

    #[test]
    fn noisy_recon_is_deterministic() {
        let (codec, grids) = toy_codec((8, 8, 8));
        let sigma = [0.05; 4];
        let mut r1 = derive_rng(4, &[stream::ADAPTER_PAIRS, 1]);
        let a = make_noisy_recon(&grids[1], &codec, &sigma, &mut r1).unwrap();
        let mut r2 = derive_rng(4, &[stream::ADAPTER_PAIRS, 1]);
        let b = make_noisy_recon(&grids[1], &codec, &sigma, &mut r2).unwrap();
        assert_eq!(a.values(), b.values());
    }

    #[test]
    fn noise_magnitude_matches_monte_carlo_expectation() {
        // With an orthonormal basis and no clamping, re-encoding the noisy
        // reconstruction recovers z + sigma*g exactly, so the expected
        // squared code displacement is d * sigma^2. Patterns are built small
        // enough that the decode clamp never engages.
        let mut u = vec![0.0f64; 64];
        for (i, v) in u.iter_mut().enumerate() {
            *v = if i < 32 { 0.05 } else { -0.05 };
        }
        let grids: Vec<TsdfGrid> = (0..8)
            .map(|s| {
                let coef = (s as f64 - 3.5) / 3.5 * 0.5;
                let values: Vec<f32> =
                    (0..64).map(|i| (coef * u[i] + 0.01 * ((i % 5) as f64 - 2.0) / 2.0) as f32).collect();
                grid_from_values((4, 4, 4), values)
            })
            .collect();
        let codec = LinearCodec::fit_shapes(&grids, 4).unwrap();
        let sigma = 0.01;
        let d = 4.0;
        let reps = 400;
        let mut total = 0.0;
        for rep in 0..reps {
            let mut rng = derive_rng(9, &[stream::ADAPTER_PAIRS, rep]);
            let z0 = codec.encode_shape(&grids[0]).unwrap();
            let recon = make_noisy_recon(&grids[0], &codec, &[sigma; 4], &mut rng).unwrap();
            let z1 = codec.encode_shape(&recon).unwrap();
            total += z0.iter().zip(&z1).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
        let mean = total / reps as f64;
        let expected = d * sigma * sigma;
        // 4 sigma of the chi-square Monte-Carlo mean.
        let band = 4.0 * (2.0 / (d * reps as f64)).sqrt() * expected;
        assert!((mean - expected).abs() <= band, "{mean} vs {expected} (band {band})");
    }

    #[test]
    fn training_on_identical_pairs_stays_identity() {
        let dims = (6, 6, 6);
        let pairs: Vec<(TsdfGrid, TsdfGrid)> =
            (0..6).map(|s| (blob_grid(dims, s), blob_grid(dims, s))).collect();
        let opts = AdapterTrainOptions {
            steps: 40,
            batch_size: 3,
            lr: 1e-3,
            ..AdapterTrainOptions::default()
        };
        let (_, report) = train_adapter(&pairs, &opts, None).unwrap();
        assert_eq!(report.initial_loss, 0.0);
        assert!(report.final_loss <= 1e-3, "drifted to {}", report.final_loss);
    }

    #[test]
    fn training_beats_identity_baseline() {
        let dims = (8, 8, 8);
        let (codec, grids) = toy_codec(dims);
        let codes: Vec<_> = grids.iter().map(|g| codec.encode_shape(g).unwrap()).collect();
        let std = LinearCodec::empirical_latent_std(&codes).unwrap();
        let sigma: Vec<f64> = std.iter().map(|s| 0.5 * s).collect();
        let pairs: Vec<(TsdfGrid, TsdfGrid)> = grids
            .iter()
            .enumerate()
            .map(|(i, g)| {
                let mut rng = derive_rng(10, &[stream::ADAPTER_PAIRS, i as u64]);
                (g.clone(), make_noisy_recon(g, &codec, &sigma, &mut rng).unwrap())
            })
            .collect();
        let opts = AdapterTrainOptions {
            steps: 120,
            batch_size: 6,
            lr: 3e-3,
            ..AdapterTrainOptions::default()
        };
        let (net, report) = train_adapter(&pairs, &opts, Some(2.5)).unwrap();
        assert!(
            report.final_loss < report.initial_loss,
            "identity baseline {} not beaten by {}",
            report.initial_loss,
            report.final_loss
        );
        assert!((report.combined_total.unwrap() - (2.5 + report.final_loss)).abs() < 1e-12);

        // Thresholded refinement should disagree with the clean masks no
        // more than the raw reconstructions do, in aggregate.
        let mut raw_disagree = 0usize;
        let mut refined_disagree = 0usize;
        for (clean, noisy) in &pairs {
            let refined = apply_adapter(&net, noisy).unwrap();
            for ((&c, &r), &f) in clean.values().iter().zip(noisy.values()).zip(refined.values())
            {
                if (c < 0.0) != (r < 0.0) {
                    raw_disagree += 1;
                }
                if (c < 0.0) != (f < 0.0) {
                    refined_disagree += 1;
                }
            }
        }
        assert!(
            refined_disagree <= raw_disagree,
            "refined {refined_disagree} vs raw {raw_disagree}"
        );
    }

    #[test]
    fn training_is_deterministic() {
        let dims = (6, 6, 6);
        let pairs: Vec<(TsdfGrid, TsdfGrid)> =
            (0..4).map(|s| (blob_grid(dims, s), blob_grid(dims, s + 4))).collect();
        let opts = AdapterTrainOptions { steps: 15, batch_size: 2, ..Default::default() };
        let (a, ra) = train_adapter(&pairs, &opts, None).unwrap();
        let (b, rb) = train_adapter(&pairs, &opts, None).unwrap();
        assert_eq!(a.params(), b.params());
        assert_eq!(ra.step_losses, rb.step_losses);
    }

    #[test]
    fn saturating_residual_clamps_to_band() {
        let mut rng = derive_rng(1, &[stream::NET_INIT, 2]);
        let mut net = AdapterNet::new(TAU, &mut rng).unwrap();
        // A huge output bias forces every raw value far beyond tau.
        net.params[B2] = 100.0;
        let grid = grid_from_values((4, 4, 4), lcg_values(64, 2, 0.3));
        let out = apply_adapter(&net, &grid).unwrap();
        for &v in out.values() {
            assert_eq!(v, TAU);
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("refine.adpt");
        let mut rng = derive_rng(12, &[stream::NET_INIT, 2]);
        let mut net = AdapterNet::new(TAU, &mut rng).unwrap();
        for (i, p) in net.params.iter_mut().enumerate() {
            *p += 0.001 * (i % 13) as f64;
        }
        save_adapter(&path, &net).unwrap();
        let loaded = load_adapter(&path).unwrap();
        assert_eq!(loaded.tau(), TAU);

        let grid = grid_from_values((5, 5, 5), lcg_values(125, 8, 0.25));
        let a = apply_adapter(&net, &grid).unwrap();
        let b = apply_adapter(&loaded, &grid).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((x - y).abs() < 1e-5);
        }

        let path2 = dir.path().join("refine2.adpt");
        save_adapter(&path2, &net).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn mismatched_tau_is_rejected() {
        let mut rng = derive_rng(1, &[stream::NET_INIT, 2]);
        let net = AdapterNet::new(0.3, &mut rng).unwrap();
        let grid = grid_from_values((4, 4, 4), lcg_values(64, 2, 0.3));
        assert!(apply_adapter(&net, &grid).is_err());
    }
}
