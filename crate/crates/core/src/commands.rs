//! Pipeline commands.
//!
//! Each function here backs one CLI subcommand: it resolves files, delegates
//! the math to the library modules, writes its outputs, and drops a run log
//! recording the config hash and the hash of every checkpoint it read or
//! wrote. All file listings are sorted, so reruns touch files in the same
//! order and outputs are byte-identical under a fixed seed.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::adapter::{
    load_adapter, make_noisy_recon, save_adapter, train_adapter, AdapterTrainOptions,
};
use crate::codec::{load_codec, save_codec, CodecKind, LinearCodec};
use crate::config::PipelineConfig;
use crate::diffusion::{
    load_checkpoint, save_checkpoint, standardization_scale, train_denoiser, DdpmCheckpoint,
    NoiseSchedule, TrainOptions, TrainReport,
};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_ipr, long_axis_report, FeatureSet, IprReport, LongAxisReport, SetLabel};
use crate::phantom::{blob_mask, soft_tissue_background, texture_patch};
use crate::rng::{derive_rng, sha256_hex, stream};
use crate::sdf::{load_tsdf, mask_to_tsdf, save_tsdf};
use crate::synthesis::{
    assemble_dataset, BackgroundInput, CheckpointHashes, DatasetManifest, SynthesisStack,
};
use crate::volume::{load_mask, save_mask, save_volume};

/// Extension of TSDF grid files.
pub const TSDF_EXT: &str = "tsdf";

/// Extension of raster volume and mask files.
pub const VOLUME_EXT: &str = "lnv";

/// One checkpoint a command read or wrote, with its content hash.
#[derive(Debug, Clone, Serialize)]
pub struct CheckpointRef {
    pub role: String,
    pub path: String,
    pub sha256: String,
}

/// Record of one command invocation, written next to its outputs.
#[derive(Debug, Clone, Serialize)]
pub struct RunLog {
    pub command: String,
    pub seed: u64,
    pub config_hash: String,
    pub checkpoints: Vec<CheckpointRef>,
    pub outputs: Vec<String>,
}

impl RunLog {
    fn new(command: &str, cfg: &PipelineConfig) -> Self {
        RunLog {
            command: command.to_string(),
            seed: cfg.seed,
            config_hash: cfg.hash(),
            checkpoints: Vec::new(),
            outputs: Vec::new(),
        }
    }

    fn add_checkpoint(&mut self, role: &str, path: &Path) -> Result<()> {
        self.checkpoints.push(CheckpointRef {
            role: role.to_string(),
            path: path.display().to_string(),
            sha256: file_hash(path)?,
        });
        Ok(())
    }

    fn add_output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    /// Writes the log as pretty JSON. `at` should sit next to the command's
    /// primary outputs.
    fn write(&self, at: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .expect("run log serialization cannot fail");
        fs::write(at, format!("{json}\n")).map_err(|e| Error::io(at, e))
    }
}

/// SHA-256 of a file's bytes, hex-encoded.
pub fn file_hash(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Files in `dir` with the given extension, sorted by name so processing
/// order never depends on the directory's physical layout.
pub fn list_files(dir: impl AsRef<Path>, ext: &str) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && path.extension().and_then(|e| e.to_str()) == Some(ext) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn stem_of(path: &Path) -> String {
    path.file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or_default()
        .to_string()
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn run_log_path(out_dir: &Path, command: &str) -> PathBuf {
    out_dir.join(format!("{command}_runlog.json"))
}

// ---------------------------------------------------------------------------
// tsdf
// ---------------------------------------------------------------------------

/// Converts every mask in `masks_dir` into a truncated distance field in
/// `out_dir`, using the configured truncation and normalization. Returns the
/// number of files written.
pub fn cmd_tsdf(cfg: &PipelineConfig, masks_dir: &Path, out_dir: &Path) -> Result<usize> {
    cfg.validate()?;
    let files = list_files(masks_dir, VOLUME_EXT)?;
    if files.is_empty() {
        return Err(Error::arg(
            "masks_dir",
            format!("no .{VOLUME_EXT} mask files in {}", masks_dir.display()),
        ));
    }
    ensure_dir(out_dir)?;
    let norm_scale = cfg.geometry.norm_scale_mm();
    let mut log = RunLog::new("tsdf", cfg);
    for path in &files {
        let mask = load_mask(path)?;
        let tsdf = mask_to_tsdf(&mask, cfg.geometry.tau, norm_scale)?;
        let out = out_dir.join(format!("{}.{TSDF_EXT}", stem_of(path)));
        save_tsdf(&out, &tsdf)?;
        log.add_output(&out);
    }
    log.write(&run_log_path(out_dir, "tsdf"))?;
    Ok(files.len())
}

// ---------------------------------------------------------------------------
// fit-codec
// ---------------------------------------------------------------------------

/// What [`cmd_fit_codec`] trained.
#[derive(Debug, Clone, Serialize)]
pub struct FitCodecReport {
    pub kind: String,
    pub items: usize,
    pub latent_dim: usize,
    /// Largest and smallest retained singular values.
    pub singular_top: f64,
    pub singular_bottom: f64,
}

/// Fits a linear codec on the contents of `in_dir`.
///
/// Directories of `.tsdf` files yield a shape codec at the configured shape
/// latent width; directories of normalized `.lnv` patches yield a texture
/// codec at the texture width.
pub fn cmd_fit_codec(cfg: &PipelineConfig, in_dir: &Path, out_path: &Path) -> Result<FitCodecReport> {
    cfg.validate()?;
    let tsdfs = list_files(in_dir, TSDF_EXT)?;
    let codec = if !tsdfs.is_empty() {
        let grids = tsdfs.iter().map(load_tsdf).collect::<Result<Vec<_>>>()?;
        LinearCodec::fit_shapes(&grids, cfg.codec.shape_latent_dim)?
    } else {
        let patches = list_files(in_dir, VOLUME_EXT)?;
        if patches.is_empty() {
            return Err(Error::arg(
                "in_dir",
                format!("no .{TSDF_EXT} or .{VOLUME_EXT} files in {}", in_dir.display()),
            ));
        }
        let volumes = patches
            .iter()
            .map(crate::volume::load_volume)
            .collect::<Result<Vec<_>>>()?;
        LinearCodec::fit_textures(&volumes, cfg.codec.texture_latent_dim)?
    };
    if let Some(dir) = out_path.parent() {
        if !dir.as_os_str().is_empty() {
            ensure_dir(dir)?;
        }
    }
    save_codec(out_path, &codec)?;
    let kind = match codec.kind() {
        CodecKind::Shape { .. } => "shape",
        CodecKind::Texture => "texture",
    };
    let singular = codec.singular_values();
    let report = FitCodecReport {
        kind: kind.to_string(),
        items: if tsdfs.is_empty() {
            list_files(in_dir, VOLUME_EXT)?.len()
        } else {
            tsdfs.len()
        },
        latent_dim: codec.latent_dim(),
        singular_top: singular.first().copied().unwrap_or(0.0),
        singular_bottom: singular.last().copied().unwrap_or(0.0),
    };
    let mut log = RunLog::new("fit-codec", cfg);
    log.add_checkpoint("codec", out_path)?;
    log.add_output(out_path);
    log.write(&sibling_run_log(out_path, "fit-codec"))?;
    Ok(report)
}

fn sibling_run_log(out_path: &Path, command: &str) -> PathBuf {
    let stem = stem_of(out_path);
    let dir = out_path.parent().unwrap_or_else(|| Path::new("."));
    dir.join(format!("{stem}_{command}_runlog.json"))
}

// ---------------------------------------------------------------------------
// train-shape / train-texture
// ---------------------------------------------------------------------------

/// Loss summary of a denoiser training run.
#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub items: usize,
    pub steps: usize,
    pub initial_eval_loss: f64,
    pub final_eval_loss: f64,
    /// Fraction of the initial evaluation loss removed.
    pub loss_drop: f64,
}

fn train_options(cfg: &PipelineConfig) -> TrainOptions {
    TrainOptions {
        steps: cfg.training.steps,
        batch_size: cfg.training.batch_size,
        lr: cfg.training.lr,
        hidden_dims: cfg.training.hidden_dims.clone(),
        seed: cfg.seed,
    }
}

fn write_loss_trace(path: &Path, report: &TrainReport) -> Result<()> {
    let mut csv = String::from("step,loss\n");
    for (i, loss) in report.step_losses.iter().enumerate() {
        csv.push_str(&format!("{},{}\n", i + 1, loss));
    }
    fs::write(path, csv).map_err(|e| Error::io(path, e))
}

fn standardize_rows(rows: &[Vec<f64>], scale: &[f64]) -> Vec<Vec<f64>> {
    rows.iter()
        .map(|row| row.iter().zip(scale).map(|(v, s)| v / s).collect())
        .collect()
}

fn loss_trace_path(out_path: &Path) -> PathBuf {
    let stem = stem_of(out_path);
    let dir = out_path.parent().unwrap_or_else(|| Path::new("."));
    dir.join(format!("{stem}_loss.csv"))
}

/// Trains the unconditional shape denoiser on the latents of `tsdf_dir`.
pub fn cmd_train_shape(
    cfg: &PipelineConfig,
    tsdf_dir: &Path,
    codec_path: &Path,
    out_path: &Path,
) -> Result<TrainSummary> {
    cfg.validate()?;
    let codec = load_codec(codec_path)?;
    if !matches!(codec.kind(), CodecKind::Shape { .. }) {
        return Err(Error::arg("codec", "shape training needs a shape codec"));
    }
    let files = list_files(tsdf_dir, TSDF_EXT)?;
    if files.is_empty() {
        return Err(Error::arg(
            "tsdf_dir",
            format!("no .{TSDF_EXT} files in {}", tsdf_dir.display()),
        ));
    }
    let codes = files
        .iter()
        .map(|p| codec.encode_shape(&load_tsdf(p)?))
        .collect::<Result<Vec<_>>>()?;
    let scale = standardization_scale(&codes)?;
    let standardized = standardize_rows(&codes, &scale);
    let schedule = NoiseSchedule::linear(
        cfg.schedule.t_count,
        cfg.schedule.beta_start,
        cfg.schedule.beta_end,
    )?;
    let opts = train_options(cfg);
    let (net, report) = train_denoiser(&standardized, None, &schedule, &opts)?;
    let ckpt = DdpmCheckpoint {
        net,
        schedule,
        data_scale: scale,
        cond_scale: None,
    };
    if let Some(dir) = out_path.parent() {
        if !dir.as_os_str().is_empty() {
            ensure_dir(dir)?;
        }
    }
    save_checkpoint(out_path, &ckpt)?;
    let trace = loss_trace_path(out_path);
    write_loss_trace(&trace, &report)?;
    let mut log = RunLog::new("train-shape", cfg);
    log.add_checkpoint("shape_codec", codec_path)?;
    log.add_checkpoint("shape_model", out_path)?;
    log.add_output(out_path);
    log.add_output(&trace);
    log.write(&sibling_run_log(out_path, "train-shape"))?;
    Ok(TrainSummary {
        items: codes.len(),
        steps: opts.steps,
        initial_eval_loss: report.initial_eval_loss,
        final_eval_loss: report.final_eval_loss,
        loss_drop: report.loss_drop(),
    })
}

/// Trains the conditional texture denoiser.
///
/// Texture patches come from `patch_dir`; each must have a mask of the same
/// file stem in `mask_dir`, which is embedded through the shape codec to form
/// the conditioning vector.
pub fn cmd_train_texture(
    cfg: &PipelineConfig,
    patch_dir: &Path,
    mask_dir: &Path,
    shape_codec_path: &Path,
    texture_codec_path: &Path,
    out_path: &Path,
) -> Result<TrainSummary> {
    cfg.validate()?;
    let shape_codec = load_codec(shape_codec_path)?;
    let CodecKind::Shape { tau, norm_scale } = shape_codec.kind() else {
        return Err(Error::arg("shape_codec", "conditioning needs a shape codec"));
    };
    let texture_codec = load_codec(texture_codec_path)?;
    if texture_codec.kind() != CodecKind::Texture {
        return Err(Error::arg("texture_codec", "texture training needs a texture codec"));
    }
    let patches = list_files(patch_dir, VOLUME_EXT)?;
    if patches.is_empty() {
        return Err(Error::arg(
            "patch_dir",
            format!("no .{VOLUME_EXT} files in {}", patch_dir.display()),
        ));
    }
    let mut tex_codes = Vec::with_capacity(patches.len());
    let mut cond_codes = Vec::with_capacity(patches.len());
    for path in &patches {
        let patch = crate::volume::load_volume(path)?;
        tex_codes.push(texture_codec.encode_texture(&patch)?);
        let mask_path = mask_dir.join(format!("{}.{VOLUME_EXT}", stem_of(path)));
        let mask = load_mask(&mask_path)?;
        let tsdf = mask_to_tsdf(&mask, tau, norm_scale)?;
        cond_codes.push(shape_codec.encode_shape(&tsdf)?);
    }
    let tex_scale = standardization_scale(&tex_codes)?;
    let cond_scale = standardization_scale(&cond_codes)?;
    let std_tex = standardize_rows(&tex_codes, &tex_scale);
    let std_cond = standardize_rows(&cond_codes, &cond_scale);
    let schedule = NoiseSchedule::linear(
        cfg.schedule.t_count,
        cfg.schedule.beta_start,
        cfg.schedule.beta_end,
    )?;
    let opts = train_options(cfg);
    let (net, report) = train_denoiser(&std_tex, Some(&std_cond), &schedule, &opts)?;
    let ckpt = DdpmCheckpoint {
        net,
        schedule,
        data_scale: tex_scale,
        cond_scale: Some(cond_scale),
    };
    if let Some(dir) = out_path.parent() {
        if !dir.as_os_str().is_empty() {
            ensure_dir(dir)?;
        }
    }
    save_checkpoint(out_path, &ckpt)?;
    let trace = loss_trace_path(out_path);
    write_loss_trace(&trace, &report)?;
    let mut log = RunLog::new("train-texture", cfg);
    log.add_checkpoint("shape_codec", shape_codec_path)?;
    log.add_checkpoint("texture_codec", texture_codec_path)?;
    log.add_checkpoint("texture_model", out_path)?;
    log.add_output(out_path);
    log.add_output(&trace);
    log.write(&sibling_run_log(out_path, "train-texture"))?;
    Ok(TrainSummary {
        items: tex_codes.len(),
        steps: opts.steps,
        initial_eval_loss: report.initial_eval_loss,
        final_eval_loss: report.final_eval_loss,
        loss_drop: report.loss_drop(),
    })
}

// ---------------------------------------------------------------------------
// train-adapter
// ---------------------------------------------------------------------------

/// Loss summary of an adapter training run. The initial loss doubles as the
/// identity-refiner baseline, since a fresh adapter is exactly the identity.
#[derive(Debug, Clone, Serialize)]
pub struct AdapterSummary {
    pub pairs: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Trains the shape refiner on (clean, noisy-reconstruction) pairs.
///
/// Noisy partners perturb each latent coordinate with Gaussian noise of
/// `sigma_scale` times its empirical standard deviation before decoding, so
/// the adapter sees the kind of damage latent sampling inflicts.
pub fn cmd_train_adapter(
    cfg: &PipelineConfig,
    tsdf_dir: &Path,
    codec_path: &Path,
    out_path: &Path,
) -> Result<AdapterSummary> {
    cfg.validate()?;
    let codec = load_codec(codec_path)?;
    if !matches!(codec.kind(), CodecKind::Shape { .. }) {
        return Err(Error::arg("codec", "adapter training needs a shape codec"));
    }
    let files = list_files(tsdf_dir, TSDF_EXT)?;
    if files.is_empty() {
        return Err(Error::arg(
            "tsdf_dir",
            format!("no .{TSDF_EXT} files in {}", tsdf_dir.display()),
        ));
    }
    let grids = files.iter().map(load_tsdf).collect::<Result<Vec<_>>>()?;
    let codes = grids
        .iter()
        .map(|g| codec.encode_shape(g))
        .collect::<Result<Vec<_>>>()?;
    let latent_std = LinearCodec::empirical_latent_std(&codes)?;
    let sigma: Vec<f64> = latent_std.iter().map(|s| cfg.training.sigma_scale * s).collect();
    let mut pairs = Vec::with_capacity(grids.len());
    for (i, grid) in grids.iter().enumerate() {
        let mut rng = derive_rng(cfg.seed, &[stream::ADAPTER_NOISE, i as u64]);
        let noisy = make_noisy_recon(grid, &codec, &sigma, &mut rng)?;
        pairs.push((grid.clone(), noisy));
    }
    let opts = AdapterTrainOptions {
        steps: cfg.training.adapter_steps,
        batch_size: cfg.training.adapter_batch_size,
        lr: cfg.training.adapter_lr,
        lambda: cfg.training.lambda,
        loss_kind: cfg.training.adapter_loss,
        seed: cfg.seed,
    };
    let (net, report) = train_adapter(&pairs, &opts, None)?;
    if let Some(dir) = out_path.parent() {
        if !dir.as_os_str().is_empty() {
            ensure_dir(dir)?;
        }
    }
    save_adapter(out_path, &net)?;
    let mut log = RunLog::new("train-adapter", cfg);
    log.add_checkpoint("shape_codec", codec_path)?;
    log.add_checkpoint("adapter", out_path)?;
    log.add_output(out_path);
    log.write(&sibling_run_log(out_path, "train-adapter"))?;
    Ok(AdapterSummary {
        pairs: pairs.len(),
        initial_loss: report.initial_loss,
        final_loss: report.final_loss,
    })
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

/// The five artifact paths a synthesis run consumes.
#[derive(Debug, Clone)]
pub struct StackPaths {
    pub shape_codec: PathBuf,
    pub shape_model: PathBuf,
    pub adapter: PathBuf,
    pub texture_codec: PathBuf,
    pub texture_model: PathBuf,
}

fn background_inputs(bg_dir: &Path, lesions: usize) -> Result<Vec<BackgroundInput>> {
    let files = list_files(bg_dir, VOLUME_EXT)?;
    let mut out = Vec::new();
    for path in &files {
        let stem = stem_of(path);
        if stem.ends_with("_region") {
            continue;
        }
        let region_path = bg_dir.join(format!("{stem}_region.{VOLUME_EXT}"));
        if !region_path.is_file() {
            return Err(Error::arg(
                "backgrounds",
                format!("{} has no matching {}", path.display(), region_path.display()),
            ));
        }
        out.push(BackgroundInput {
            id: stem,
            ct: crate::volume::load_volume(path)?,
            region: load_mask(&region_path)?,
            lesion_count: lesions,
        });
    }
    if out.is_empty() {
        return Err(Error::arg(
            "backgrounds",
            format!("no background volumes in {}", bg_dir.display()),
        ));
    }
    Ok(out)
}

/// Synthesizes lesions into every background of `bg_dir` and writes the
/// dataset (volumes, masks, manifest, run log) to `out_dir`.
pub fn cmd_synth(
    cfg: &PipelineConfig,
    bg_dir: &Path,
    paths: &StackPaths,
    lesions_per_background: usize,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    cfg.validate()?;
    if lesions_per_background == 0 {
        return Err(Error::arg("count", "need at least one lesion per background"));
    }
    let shape_codec = load_codec(&paths.shape_codec)?;
    let shape_model = load_checkpoint(&paths.shape_model)?;
    let adapter = load_adapter(&paths.adapter)?;
    let texture_codec = load_codec(&paths.texture_codec)?;
    let texture_model = load_checkpoint(&paths.texture_model)?;
    let hashes = CheckpointHashes {
        shape_codec: file_hash(&paths.shape_codec)?,
        shape_model: file_hash(&paths.shape_model)?,
        adapter: file_hash(&paths.adapter)?,
        texture_codec: file_hash(&paths.texture_codec)?,
        texture_model: file_hash(&paths.texture_model)?,
    };
    let stack = SynthesisStack {
        shape_model: &shape_model,
        shape_codec: &shape_codec,
        adapter: &adapter,
        texture_model: &texture_model,
        texture_codec: &texture_codec,
        hashes,
    };
    let backgrounds = background_inputs(bg_dir, lesions_per_background)?;
    let manifest = assemble_dataset(
        &stack,
        &backgrounds,
        &cfg.placement,
        cfg.seed,
        &cfg.hash(),
        out_dir,
    )?;
    let mut log = RunLog::new("synth", cfg);
    log.add_checkpoint("shape_codec", &paths.shape_codec)?;
    log.add_checkpoint("shape_model", &paths.shape_model)?;
    log.add_checkpoint("adapter", &paths.adapter)?;
    log.add_checkpoint("texture_codec", &paths.texture_codec)?;
    log.add_checkpoint("texture_model", &paths.texture_model)?;
    log.add_output(&out_dir.join(crate::synthesis::MANIFEST_FILE));
    log.write(&run_log_path(out_dir, "synth"))?;
    Ok(manifest)
}

// ---------------------------------------------------------------------------
// eval-ipr / measure
// ---------------------------------------------------------------------------

fn mask_features(dir: &Path, codec: &LinearCodec, label: SetLabel) -> Result<FeatureSet> {
    let CodecKind::Shape { tau, norm_scale } = codec.kind() else {
        return Err(Error::arg("codec", "feature extraction needs a shape codec"));
    };
    let files = list_files(dir, VOLUME_EXT)?;
    if files.is_empty() {
        return Err(Error::arg(
            "masks",
            format!("no .{VOLUME_EXT} mask files in {}", dir.display()),
        ));
    }
    let mut rows = Vec::with_capacity(files.len());
    for path in &files {
        let mask = load_mask(path)?;
        let tsdf = mask_to_tsdf(&mask, tau, norm_scale)?;
        rows.push(codec.encode_shape(&tsdf)?);
    }
    FeatureSet::from_rows(label, &rows)
}

/// Embeds both mask sets through the shape codec and reports improved
/// precision and recall. When `out_path` is given the JSON report is written
/// there along with a run log.
pub fn cmd_eval_ipr(
    cfg: &PipelineConfig,
    real_dir: &Path,
    fake_dir: &Path,
    codec_path: &Path,
    out_path: Option<&Path>,
) -> Result<IprReport> {
    cfg.validate()?;
    let codec = load_codec(codec_path)?;
    let real = mask_features(real_dir, &codec, SetLabel::Real)?;
    let fake = mask_features(fake_dir, &codec, SetLabel::Fake)?;
    let report = evaluate_ipr(&real, &fake, cfg.metrics.k)?;
    if let Some(path) = out_path {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                ensure_dir(dir)?;
            }
        }
        fs::write(path, format!("{}\n", report.to_json())).map_err(|e| Error::io(path, e))?;
        let mut log = RunLog::new("eval-ipr", cfg);
        log.add_checkpoint("shape_codec", codec_path)?;
        log.add_output(path);
        log.write(&sibling_run_log(path, "eval-ipr"))?;
    }
    Ok(report)
}

/// Measures the long axes of every mask in `mask_dir`. When `out_dir` is
/// given, writes `histogram.csv` and `summary.json` there.
pub fn cmd_measure(
    cfg: &PipelineConfig,
    mask_dir: &Path,
    out_dir: Option<&Path>,
) -> Result<LongAxisReport> {
    cfg.validate()?;
    let files = list_files(mask_dir, VOLUME_EXT)?;
    if files.is_empty() {
        return Err(Error::arg(
            "masks",
            format!("no .{VOLUME_EXT} mask files in {}", mask_dir.display()),
        ));
    }
    let masks = files.iter().map(load_mask).collect::<Result<Vec<_>>>()?;
    let report = long_axis_report(&masks, cfg.metrics.histogram_bins)?;
    if let Some(dir) = out_dir {
        ensure_dir(dir)?;
        let hist = dir.join("histogram.csv");
        fs::write(&hist, report.histogram_csv()).map_err(|e| Error::io(&hist, e))?;
        let summary = dir.join("summary.json");
        fs::write(&summary, format!("{}\n", report.summary_json()))
            .map_err(|e| Error::io(&summary, e))?;
        let mut log = RunLog::new("measure", cfg);
        log.add_output(&hist);
        log.add_output(&summary);
        log.write(&run_log_path(dir, "measure"))?;
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// gen-phantom
// ---------------------------------------------------------------------------

/// What [`cmd_gen_phantom`] wrote.
#[derive(Debug, Clone, Serialize)]
pub struct PhantomReport {
    pub shapes: usize,
    pub backgrounds: usize,
}

/// Generates the bundled toy dataset: blobby lesion masks with matching
/// texture patches (on the configured patch grid) and soft-tissue background
/// CTs with region masks. Everything derives from `cfg.seed`, so the corpus
/// is reproducible.
pub fn cmd_gen_phantom(
    cfg: &PipelineConfig,
    out_dir: &Path,
    n_shapes: usize,
    n_backgrounds: usize,
    bg_dims: (usize, usize, usize),
) -> Result<PhantomReport> {
    cfg.validate()?;
    if n_shapes == 0 || n_backgrounds == 0 {
        return Err(Error::arg("counts", "need at least one shape and one background"));
    }
    let masks_dir = out_dir.join("masks");
    let textures_dir = out_dir.join("textures");
    let bg_dir = out_dir.join("backgrounds");
    ensure_dir(&masks_dir)?;
    ensure_dir(&textures_dir)?;
    ensure_dir(&bg_dir)?;
    let dims = cfg.geometry.dims();
    let spacing = cfg.geometry.spacing();
    let mut log = RunLog::new("gen-phantom", cfg);
    for i in 0..n_shapes {
        let mut rng = derive_rng(cfg.seed, &[stream::PHANTOM, 0, i as u64]);
        let mask = blob_mask(dims, spacing, &mut rng)?;
        let tex = texture_patch(&mask, &mut rng)?;
        let mask_path = masks_dir.join(format!("shape_{i:03}.{VOLUME_EXT}"));
        let tex_path = textures_dir.join(format!("shape_{i:03}.{VOLUME_EXT}"));
        save_mask(&mask_path, &mask)?;
        save_volume(&tex_path, &tex)?;
        log.add_output(&mask_path);
        log.add_output(&tex_path);
    }
    for i in 0..n_backgrounds {
        let mut rng = derive_rng(cfg.seed, &[stream::PHANTOM, 1, i as u64]);
        let bg = soft_tissue_background(bg_dims, spacing, &mut rng)?;
        let ct_path = bg_dir.join(format!("bg_{i:02}.{VOLUME_EXT}"));
        let region_path = bg_dir.join(format!("bg_{i:02}_region.{VOLUME_EXT}"));
        save_volume(&ct_path, &bg.ct)?;
        save_mask(&region_path, &bg.region)?;
        log.add_output(&ct_path);
        log.add_output(&region_path);
    }
    log.write(&run_log_path(out_dir, "gen-phantom"))?;
    Ok(PhantomReport {
        shapes: n_shapes,
        backgrounds: n_backgrounds,
    })
}
