//! Denoising diffusion over latent codes.
//!
//! The generative model is a small noise-prediction network trained with the
//! standard forward corruption `z_t = sqrt(abar_t) z_0 + sqrt(1 - abar_t) e`
//! under a linear beta schedule, and sampled with the ancestral reverse
//! update. Codes are expected to be standardized per coordinate before
//! training; the checkpoint carries the scale so sampling can undo it.
//!
//! Training noise is derived from the item identity rather than drawn from a
//! shared sequential stream, so the loss of a batch does not depend on the
//! order its items happen to be visited in.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::artifact::{read_artifact, write_artifact};
use crate::error::{Error, Result};
use crate::nn::{Adam, Mlp};
use crate::rng::{derive_rng, stream};

/// Number of diffusion steps used by the shipped pipeline.
pub const DEFAULT_T_COUNT: usize = 200;
/// Linear schedule endpoints.
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;
/// Width of the sinusoidal timestep embedding.
pub const DEFAULT_TIME_DIM: usize = 16;

/// Variance schedule of the forward corruption process.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    /// `alpha_bars[t]` is the cumulative product of `1 - beta` up to and
    /// including step `t`; index 0 holds the empty product 1.
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Betas interpolated linearly from `beta_start` at t = 1 to `beta_end`
    /// at t = `t_count`.
    pub fn linear(t_count: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_count < 2 {
            return Err(Error::arg("t_count", "need at least 2 steps"));
        }
        let ok = |b: f64| b.is_finite() && b > 0.0 && b < 1.0;
        if !ok(beta_start) || !ok(beta_end) || beta_start > beta_end {
            return Err(Error::arg(
                "beta",
                format!("need 0 < beta_start <= beta_end < 1, got {beta_start} and {beta_end}"),
            ));
        }
        let mut betas = Vec::with_capacity(t_count);
        let mut alpha_bars = Vec::with_capacity(t_count + 1);
        alpha_bars.push(1.0);
        for i in 0..t_count {
            let frac = i as f64 / (t_count - 1) as f64;
            let beta = beta_start + (beta_end - beta_start) * frac;
            alpha_bars.push(alpha_bars[i] * (1.0 - beta));
            betas.push(beta);
        }
        Ok(NoiseSchedule { betas, alpha_bars })
    }

    pub fn default_linear() -> Self {
        Self::linear(DEFAULT_T_COUNT, DEFAULT_BETA_START, DEFAULT_BETA_END)
            .expect("default constants are valid")
    }

    pub fn t_count(&self) -> usize {
        self.betas.len()
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.t_count() {
            return Err(Error::TimestepOutOfRange { t, t_count: self.t_count() });
        }
        Ok(())
    }

    /// Beta at step `t` (1-based).
    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        Ok(self.betas[t - 1])
    }

    /// Cumulative signal retention after `t` steps; `alpha_bar(0)` is 1.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t > self.t_count() {
            return Err(Error::TimestepOutOfRange { t, t_count: self.t_count() });
        }
        Ok(self.alpha_bars[t])
    }

    /// Corrupts `z0` to step `t` with the given unit noise.
    pub fn forward_sample(&self, z0: &[f64], noise: &[f64], t: usize) -> Result<Vec<f64>> {
        self.check_t(t)?;
        if z0.len() != noise.len() {
            return Err(Error::arg(
                "noise",
                format!("expected {} values, got {}", z0.len(), noise.len()),
            ));
        }
        let ab = self.alpha_bars[t];
        let signal = ab.sqrt();
        let spread = (1.0 - ab).sqrt();
        Ok(z0
            .iter()
            .zip(noise)
            .map(|(z, e)| signal * z + spread * e)
            .collect())
    }
}

/// Sinusoidal embedding of a timestep: `time_dim / 2` sine/cosine pairs with
/// geometrically spaced frequencies from 1 down to 1/10000.
pub fn time_embedding(t: usize, time_dim: usize) -> Vec<f64> {
    assert!(time_dim >= 2 && time_dim % 2 == 0, "time_dim must be even and >= 2");
    let pairs = time_dim / 2;
    let mut out = Vec::with_capacity(time_dim);
    for i in 0..pairs {
        let denom = (pairs - 1).max(1) as f64;
        let omega = (-(10000.0f64).ln() * i as f64 / denom).exp();
        let arg = omega * t as f64;
        out.push(arg.sin());
        out.push(arg.cos());
    }
    out
}

/// Noise-prediction network: an MLP over `[z_t, time_embedding, cond]`.
#[derive(Debug, Clone)]
pub struct DenoiserNet {
    latent_dim: usize,
    cond_dim: usize,
    time_dim: usize,
    mlp: Mlp,
}

impl DenoiserNet {
    /// `cond_dim` of zero builds an unconditional model. The final layer is
    /// zeroed so the untrained net predicts no noise.
    pub fn new(
        latent_dim: usize,
        cond_dim: usize,
        hidden_dims: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if latent_dim == 0 {
            return Err(Error::arg("latent_dim", "must be >= 1"));
        }
        if hidden_dims.is_empty() {
            return Err(Error::arg("hidden_dims", "need at least one hidden layer"));
        }
        let time_dim = DEFAULT_TIME_DIM;
        let mut dims = Vec::with_capacity(hidden_dims.len() + 2);
        dims.push(latent_dim + time_dim + cond_dim);
        dims.extend_from_slice(hidden_dims);
        dims.push(latent_dim);
        let mut mlp = Mlp::new(&dims, rng)?;
        mlp.zero_final_layer();
        Ok(DenoiserNet { latent_dim, cond_dim, time_dim, mlp })
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn cond_dim(&self) -> usize {
        self.cond_dim
    }

    pub fn hidden_dims(&self) -> &[usize] {
        let dims = self.mlp.dims();
        &dims[1..dims.len() - 1]
    }

    pub fn param_count(&self) -> usize {
        self.mlp.param_count()
    }

    fn assemble_input(&self, z_t: &[f64], t: usize, cond: Option<&[f64]>) -> Result<Vec<f64>> {
        if z_t.len() != self.latent_dim {
            return Err(Error::arg(
                "z_t",
                format!("expected {} latents, got {}", self.latent_dim, z_t.len()),
            ));
        }
        let cond = match (self.cond_dim, cond) {
            (0, None) => &[][..],
            (0, Some(_)) => {
                return Err(Error::arg("cond", "model is unconditional"));
            }
            (d, Some(c)) if c.len() == d => c,
            (d, got) => {
                return Err(Error::arg(
                    "cond",
                    format!("expected {d} conditioning values, got {:?}", got.map(|c| c.len())),
                ));
            }
        };
        let mut input = Vec::with_capacity(self.latent_dim + self.time_dim + self.cond_dim);
        input.extend_from_slice(z_t);
        input.extend(time_embedding(t, self.time_dim));
        input.extend_from_slice(cond);
        Ok(input)
    }

    /// Predicted noise for a corrupted code at step `t`.
    pub fn predict(&self, z_t: &[f64], t: usize, cond: Option<&[f64]>) -> Result<Vec<f64>> {
        self.mlp.forward(&self.assemble_input(z_t, t, cond)?)
    }
}

/// One training example: a stable identity plus the standardized code and
/// optional conditioning vector. The identity keys the per-item noise stream.
pub struct TrainItem<'a> {
    pub id: u64,
    pub z0: &'a [f64],
    pub cond: Option<&'a [f64]>,
}

/// Mean over items of the summed squared noise-prediction error, plus
/// parameter gradients accumulated into `grad` when it is given.
///
/// The timestep and noise of each item are derived from `(seed, step, id)`,
/// never from shared mutable state.
fn batch_loss(
    net: &DenoiserNet,
    schedule: &NoiseSchedule,
    items: &[TrainItem<'_>],
    seed: u64,
    noise_tag: u64,
    step: u64,
    mut grad: Option<&mut [f64]>,
) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::arg("items", "batch must not be empty"));
    }
    let n = items.len() as f64;
    let mut total = 0.0f64;
    for item in items {
        let mut rng = derive_rng(seed, &[noise_tag, step, item.id]);
        let t = rng.gen_range(1..=schedule.t_count());
        let noise: Vec<f64> = (0..net.latent_dim)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let z_t = schedule.forward_sample(item.z0, &noise, t)?;
        let input = net.assemble_input(&z_t, t, item.cond)?;
        if let Some(grad) = grad.as_deref_mut() {
            let trace = net.mlp.forward_cached(&input)?;
            let residual: Vec<f64> = trace
                .output()
                .iter()
                .zip(&noise)
                .map(|(p, e)| p - e)
                .collect();
            total += residual.iter().map(|r| r * r).sum::<f64>();
            let d_out: Vec<f64> = residual.iter().map(|r| 2.0 * r / n).collect();
            net.mlp.backward(&trace, &d_out, grad)?;
        } else {
            let pred = net.mlp.forward(&input)?;
            total += pred
                .iter()
                .zip(&noise)
                .map(|(p, e)| (p - e) * (p - e))
                .sum::<f64>();
        }
    }
    Ok(total / n)
}

/// Knobs of [`train_denoiser`].
#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub hidden_dims: Vec<usize>,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            steps: 3000,
            batch_size: 32,
            lr: 1e-3,
            hidden_dims: vec![128, 128],
            seed: 0,
        }
    }
}

/// Outcome of a training run. The evaluation losses are computed on a fixed
/// derived noise set, so the before/after comparison is free of minibatch
/// sampling variance.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub initial_eval_loss: f64,
    pub final_eval_loss: f64,
    pub step_losses: Vec<f64>,
}

impl TrainReport {
    /// Fraction of the initial evaluation loss removed by training.
    pub fn loss_drop(&self) -> f64 {
        if self.initial_eval_loss <= 0.0 {
            return 0.0;
        }
        1.0 - self.final_eval_loss / self.initial_eval_loss
    }
}

fn validate_training_set(data: &[Vec<f64>], cond: Option<&[Vec<f64>]>) -> Result<(usize, usize)> {
    let first = data
        .first()
        .ok_or(Error::TooFewRows { needed: 1, found: 0 })?;
    let d = first.len();
    if d == 0 {
        return Err(Error::arg("data", "codes must have at least one coordinate"));
    }
    for (i, z) in data.iter().enumerate() {
        if z.len() != d {
            return Err(Error::arg("data", format!("row {i} has {} coords, expected {d}", z.len())));
        }
        if z.iter().any(|x| !x.is_finite()) {
            return Err(Error::arg("data", format!("row {i} contains a non-finite value")));
        }
    }
    let c = match cond {
        None => 0,
        Some(cs) => {
            if cs.len() != data.len() {
                return Err(Error::arg(
                    "cond",
                    format!("{} conditioning rows for {} codes", cs.len(), data.len()),
                ));
            }
            let c = cs.first().map(|v| v.len()).unwrap_or(0);
            if c == 0 {
                return Err(Error::arg("cond", "conditioning rows must not be empty"));
            }
            for (i, v) in cs.iter().enumerate() {
                if v.len() != c {
                    return Err(Error::arg(
                        "cond",
                        format!("row {i} has {} coords, expected {c}", v.len()),
                    ));
                }
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(Error::arg("cond", format!("row {i} contains a non-finite value")));
                }
            }
            c
        }
    };
    Ok((d, c))
}

fn make_items<'a>(
    data: &'a [Vec<f64>],
    cond: Option<&'a [Vec<f64>]>,
    indices: &[usize],
) -> Vec<TrainItem<'a>> {
    indices
        .iter()
        .map(|&i| TrainItem {
            id: i as u64,
            z0: &data[i],
            cond: cond.map(|c| c[i].as_slice()),
        })
        .collect()
}

/// Fixed-noise evaluation loss over the whole dataset, `reps` corruption
/// draws per item.
pub fn evaluate_loss(
    net: &DenoiserNet,
    schedule: &NoiseSchedule,
    data: &[Vec<f64>],
    cond: Option<&[Vec<f64>]>,
    seed: u64,
    reps: usize,
) -> Result<f64> {
    validate_training_set(data, cond)?;
    if reps == 0 {
        return Err(Error::arg("reps", "must be >= 1"));
    }
    let all: Vec<usize> = (0..data.len()).collect();
    let items = make_items(data, cond, &all);
    let mut total = 0.0;
    for rep in 0..reps {
        total += batch_loss(net, schedule, &items, seed, stream::EVAL_NOISE, rep as u64, None)?;
    }
    Ok(total / reps as f64)
}

/// Trains a noise-prediction network on standardized codes. Pass
/// conditioning rows to get a conditional model with `cond_dim` equal to
/// their width.
pub fn train_denoiser(
    data: &[Vec<f64>],
    cond: Option<&[Vec<f64>]>,
    schedule: &NoiseSchedule,
    opts: &TrainOptions,
) -> Result<(DenoiserNet, TrainReport)> {
    let (latent_dim, cond_dim) = validate_training_set(data, cond)?;
    if opts.batch_size == 0 || opts.steps == 0 {
        return Err(Error::arg("options", "steps and batch_size must be >= 1"));
    }
    if !(opts.lr.is_finite() && opts.lr > 0.0) {
        return Err(Error::arg("lr", "must be a positive finite number"));
    }

    let mut init_rng = derive_rng(opts.seed, &[stream::NET_INIT]);
    let net = DenoiserNet::new(latent_dim, cond_dim, &opts.hidden_dims, &mut init_rng)?;
    let mut net = net;

    let initial_eval_loss = evaluate_loss(&net, schedule, data, cond, opts.seed, 8)?;

    let n = data.len();
    let mut opt = Adam::new(net.param_count(), opts.lr);
    let mut grad = vec![0.0f64; net.param_count()];
    let mut indices: Vec<usize> = (0..n).collect();
    let mut step_losses = Vec::with_capacity(opts.steps);

    for step in 0..opts.steps {
        let mut batch_rng = derive_rng(opts.seed, &[stream::TRAIN_BATCH, step as u64]);
        let take = opts.batch_size.min(n);
        // Partial Fisher-Yates: the first `take` entries become a uniform
        // sample without replacement.
        for i in 0..take {
            let j = batch_rng.gen_range(i..n);
            indices.swap(i, j);
        }
        let items = make_items(data, cond, &indices[..take]);

        grad.fill(0.0);
        let loss = batch_loss(
            &net,
            schedule,
            &items,
            opts.seed,
            stream::TRAIN_NOISE,
            step as u64,
            Some(&mut grad),
        )?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        step_losses.push(loss);
        opt.step(net.mlp.params_mut(), &grad)?;
    }

    let final_eval_loss = evaluate_loss(&net, schedule, data, cond, opts.seed, 8)?;
    Ok((net, TrainReport { initial_eval_loss, final_eval_loss, step_losses }))
}

/// Ancestral reverse-process sampler. Starts from unit Gaussian noise drawn
/// from `rng` and walks the schedule back to a clean standardized code.
pub fn reverse_sample(
    net: &DenoiserNet,
    schedule: &NoiseSchedule,
    cond: Option<&[f64]>,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let d = net.latent_dim();
    let mut z: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    for t in (1..=schedule.t_count()).rev() {
        let eps_hat = net.predict(&z, t, cond)?;
        let beta = schedule.beta(t)?;
        let alpha = 1.0 - beta;
        let ab = schedule.alpha_bar(t)?;
        let coeff = beta / (1.0 - ab).sqrt();
        let sigma = beta.sqrt();
        for i in 0..d {
            let mean = (z[i] - coeff * eps_hat[i]) / alpha.sqrt();
            let xi: f64 = if t > 1 { rng.sample(StandardNormal) } else { 0.0 };
            z[i] = mean + sigma * xi;
        }
        if z.iter().any(|x| !x.is_finite()) {
            let norm = z.iter().map(|x| x * x).sum::<f64>().sqrt();
            return Err(Error::NonFiniteState { step: t, norm });
        }
    }
    Ok(z)
}

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

/// A trained denoiser bundled with its schedule and the standardization
/// scales of its training data.
#[derive(Debug, Clone)]
pub struct DdpmCheckpoint {
    pub net: DenoiserNet,
    pub schedule: NoiseSchedule,
    /// Per-coordinate standard deviation the codes were divided by.
    pub data_scale: Vec<f64>,
    /// Same for the conditioning vectors of a conditional model.
    pub cond_scale: Option<Vec<f64>>,
}

impl DdpmCheckpoint {
    /// Standardizes a raw code with the stored scale.
    pub fn standardize(&self, code: &[f64]) -> Result<Vec<f64>> {
        scale_by(code, &self.data_scale, true)
    }

    /// Maps a standardized code back to raw latent units.
    pub fn destandardize(&self, code: &[f64]) -> Result<Vec<f64>> {
        scale_by(code, &self.data_scale, false)
    }

    pub fn standardize_cond(&self, cond: &[f64]) -> Result<Vec<f64>> {
        let scale = self
            .cond_scale
            .as_ref()
            .ok_or_else(|| Error::arg("cond", "model is unconditional"))?;
        scale_by(cond, scale, true)
    }
}

fn scale_by(code: &[f64], scale: &[f64], divide: bool) -> Result<Vec<f64>> {
    if code.len() != scale.len() {
        return Err(Error::arg(
            "code",
            format!("expected {} coordinates, got {}", scale.len(), code.len()),
        ));
    }
    Ok(code
        .iter()
        .zip(scale)
        .map(|(z, s)| if divide { z / s } else { z * s })
        .collect())
}

/// Computes the per-coordinate scale used for standardization. Degenerate
/// coordinates get scale 1 so division is always safe.
pub fn standardization_scale(rows: &[Vec<f64>]) -> Result<Vec<f64>> {
    let n = rows.len();
    if n < 2 {
        return Err(Error::TooFewRows { needed: 2, found: n });
    }
    let d = rows[0].len();
    let mut mean = vec![0.0f64; d];
    for r in rows {
        for (m, z) in mean.iter_mut().zip(r) {
            *m += z;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut var = vec![0.0f64; d];
    for r in rows {
        for ((v, z), m) in var.iter_mut().zip(r).zip(&mean) {
            let e = z - m;
            *v += e * e;
        }
    }
    Ok(var
        .into_iter()
        .map(|v| {
            let s = (v / (n - 1) as f64).sqrt();
            if s > 1e-12 {
                s
            } else {
                1.0
            }
        })
        .collect())
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DdpmHeader {
    magic: String,
    latent_dim: u64,
    cond_dim: u64,
    time_dim: u64,
    hidden_dims: Vec<u64>,
    t_count: u64,
    beta_start: f64,
    beta_end: f64,
    data_scale: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cond_scale: Option<Vec<f64>>,
}

/// Writes a `.ddpm` checkpoint: JSON header line plus the flat network
/// coefficients as little-endian `f32`.
pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &DdpmCheckpoint) -> Result<()> {
    let net = &ckpt.net;
    if ckpt.data_scale.len() != net.latent_dim() {
        return Err(Error::arg("data_scale", "length must match the latent width"));
    }
    match (&ckpt.cond_scale, net.cond_dim()) {
        (None, 0) => {}
        (Some(s), c) if s.len() == c && c > 0 => {}
        _ => return Err(Error::arg("cond_scale", "length must match the conditioning width")),
    }
    let t_count = ckpt.schedule.t_count();
    let header = DdpmHeader {
        magic: "LND1".to_string(),
        latent_dim: net.latent_dim() as u64,
        cond_dim: net.cond_dim() as u64,
        time_dim: net.time_dim as u64,
        hidden_dims: net.hidden_dims().iter().map(|&h| h as u64).collect(),
        t_count: t_count as u64,
        beta_start: ckpt.schedule.beta(1).expect("t_count >= 2"),
        beta_end: ckpt.schedule.beta(t_count).expect("t_count >= 2"),
        data_scale: ckpt.data_scale.clone(),
        cond_scale: ckpt.cond_scale.clone(),
    };
    let header_line =
        serde_json::to_string(&header).map_err(|e| Error::arg("header", e.to_string()))?;
    let payload: Vec<f32> = net.mlp.params().iter().map(|&p| p as f32).collect();
    write_artifact(path.as_ref(), &header_line, &payload)
}

/// Reads a `.ddpm` checkpoint and rebuilds the network and schedule.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<DdpmCheckpoint> {
    let path = path.as_ref();
    let (header_line, payload) = read_artifact(path)?;
    let header: DdpmHeader = serde_json::from_str(&header_line)
        .map_err(|e| Error::header(path, "header", e.to_string()))?;
    if header.magic != "LND1" {
        return Err(Error::header(path, "magic", format!("expected \"LND1\", got \"{}\"", header.magic)));
    }
    let latent_dim = header.latent_dim as usize;
    let cond_dim = header.cond_dim as usize;
    let time_dim = header.time_dim as usize;
    if latent_dim == 0 {
        return Err(Error::header(path, "latent_dim", "must be >= 1"));
    }
    if time_dim < 2 || time_dim % 2 != 0 {
        return Err(Error::header(path, "time_dim", "must be even and >= 2"));
    }
    if header.hidden_dims.is_empty() || header.hidden_dims.iter().any(|&h| h == 0) {
        return Err(Error::header(path, "hidden_dims", "must be non-empty positive widths"));
    }
    if header.data_scale.len() != latent_dim
        || header.data_scale.iter().any(|s| !s.is_finite() || *s <= 0.0)
    {
        return Err(Error::header(path, "data_scale", "must be positive and match latent_dim"));
    }
    match (&header.cond_scale, cond_dim) {
        (None, 0) => {}
        (Some(s), c) if c > 0 && s.len() == c && s.iter().all(|x| x.is_finite() && *x > 0.0) => {}
        _ => {
            return Err(Error::header(path, "cond_scale", "must be positive and match cond_dim"));
        }
    }

    let schedule = NoiseSchedule::linear(header.t_count as usize, header.beta_start, header.beta_end)
        .map_err(|e| Error::header(path, "schedule", e.to_string()))?;

    let mut dims = Vec::with_capacity(header.hidden_dims.len() + 2);
    dims.push(latent_dim + time_dim + cond_dim);
    dims.extend(header.hidden_dims.iter().map(|&h| h as usize));
    dims.push(latent_dim);
    let params: Vec<f64> = payload.iter().map(|&p| p as f64).collect();
    let mlp = Mlp::from_params(&dims, params).map_err(|e| Error::InvalidPayload {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;

    Ok(DdpmCheckpoint {
        net: DenoiserNet { latent_dim, cond_dim, time_dim, mlp },
        schedule,
        data_scale: header.data_scale,
        cond_scale: header.cond_scale,
    })
}
