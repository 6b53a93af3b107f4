//! Command line front end for the lnforge pipeline.
//!
//! Every subcommand reads one TOML config, runs a library command, and prints
//! a short human summary; all heavy lifting and file layout lives in
//! `lnforge::commands`. Exit code 1 with a single `error[category] ...` line
//! on any failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use lnforge::commands::{
    cmd_eval_ipr, cmd_fit_codec, cmd_gen_phantom, cmd_measure, cmd_synth, cmd_train_adapter,
    cmd_train_shape, cmd_train_texture, cmd_tsdf, StackPaths,
};
use lnforge::config::PipelineConfig;
use lnforge::error::Result;

#[derive(Parser)]
#[command(
    name = "lnforge",
    about = "Synthetic lymph-node CT volume generation",
    version
)]
struct Cli {
    /// Pipeline configuration file (TOML). Defaults when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Print per-step detail where a command has any.
    #[arg(long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the bundled toy dataset (masks, textures, backgrounds).
    GenPhantom {
        /// Output directory; gains masks/, textures/ and backgrounds/.
        #[arg(long, default_value = "data")]
        out: PathBuf,
        /// Number of lesion shapes (with matching texture patches).
        #[arg(long, default_value_t = 64)]
        shapes: usize,
        /// Number of background CT volumes.
        #[arg(long, default_value_t = 2)]
        backgrounds: usize,
        /// Background grid size as X,Y,Z voxels.
        #[arg(long, value_delimiter = ',', default_value = "48,48,32")]
        bg_dims: Vec<usize>,
    },
    /// Convert binary masks into truncated signed distance fields.
    Tsdf {
        /// Directory of .lnv mask files.
        #[arg(long)]
        masks: PathBuf,
        /// Output directory for .tsdf files.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a linear codec on .tsdf grids (shape) or .lnv patches (texture).
    FitCodec {
        /// Directory of training inputs.
        #[arg(long)]
        inputs: PathBuf,
        /// Output codec file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the unconditional latent shape denoiser.
    TrainShape {
        /// Directory of .tsdf training shapes.
        #[arg(long)]
        tsdf: PathBuf,
        /// Shape codec fit by fit-codec.
        #[arg(long)]
        codec: PathBuf,
        /// Output checkpoint file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the distance-field refiner on noisy reconstructions.
    TrainAdapter {
        /// Directory of .tsdf training shapes.
        #[arg(long)]
        tsdf: PathBuf,
        /// Shape codec fit by fit-codec.
        #[arg(long)]
        codec: PathBuf,
        /// Output adapter file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the shape-conditioned texture denoiser.
    TrainTexture {
        /// Directory of normalized .lnv texture patches.
        #[arg(long)]
        patches: PathBuf,
        /// Directory of mask files pairing each patch by file stem.
        #[arg(long)]
        masks: PathBuf,
        /// Shape codec (conditioning embedder).
        #[arg(long)]
        shape_codec: PathBuf,
        /// Texture codec fit by fit-codec.
        #[arg(long)]
        texture_codec: PathBuf,
        /// Output checkpoint file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Synthesize lesions into background CTs and write a dataset.
    Synth {
        /// Directory of background volumes; each <id>.lnv needs a
        /// <id>_region.lnv placement mask beside it.
        #[arg(long)]
        backgrounds: PathBuf,
        /// Shape codec file.
        #[arg(long)]
        shape_codec: PathBuf,
        /// Shape denoiser checkpoint.
        #[arg(long)]
        shape_model: PathBuf,
        /// Adapter file.
        #[arg(long)]
        adapter: PathBuf,
        /// Texture codec file.
        #[arg(long)]
        texture_codec: PathBuf,
        /// Texture denoiser checkpoint.
        #[arg(long)]
        texture_model: PathBuf,
        /// Lesions to place in each background.
        #[arg(long, default_value_t = 4)]
        count: usize,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Verify a synthesized dataset against its manifest.
    Verify {
        /// Dataset directory containing manifest.json.
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Improved precision/recall between two mask collections.
    EvalIpr {
        /// Directory of reference masks.
        #[arg(long)]
        real: PathBuf,
        /// Directory of generated masks.
        #[arg(long)]
        fake: PathBuf,
        /// Shape codec used as the feature embedder.
        #[arg(long)]
        codec: PathBuf,
        /// Optional JSON report path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Long-axis statistics over a directory of masks.
    Measure {
        /// Directory of .lnv mask files.
        #[arg(long)]
        masks: PathBuf,
        /// Optional output directory for histogram.csv and summary.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::GenPhantom {
            out,
            shapes,
            backgrounds,
            bg_dims,
        } => {
            let [x, y, z] = bg_dims.as_slice() else {
                return Err(lnforge::error::Error::InvalidArgument {
                    what: "bg_dims".into(),
                    detail: "expected three comma-separated voxel counts, e.g. 48,48,32".into(),
                });
            };
            let report = cmd_gen_phantom(&cfg, out, *shapes, *backgrounds, (*x, *y, *z))?;
            println!(
                "wrote {} shapes and {} backgrounds to {}",
                report.shapes,
                report.backgrounds,
                out.display()
            );
        }
        Command::Tsdf { masks, out } => {
            let n = cmd_tsdf(&cfg, masks, out)?;
            println!("converted {n} masks to {}", out.display());
        }
        Command::FitCodec { inputs, out } => {
            let report = cmd_fit_codec(&cfg, inputs, out)?;
            println!(
                "fit {} codec on {} items, latent {} (singular values {:.4}..{:.4})",
                report.kind,
                report.items,
                report.latent_dim,
                report.singular_bottom,
                report.singular_top
            );
        }
        Command::TrainShape { tsdf, codec, out } => {
            let s = cmd_train_shape(&cfg, tsdf, codec, out)?;
            println!(
                "trained shape denoiser on {} items for {} steps: eval loss {:.6} -> {:.6} ({:.1}% drop)",
                s.items,
                s.steps,
                s.initial_eval_loss,
                s.final_eval_loss,
                100.0 * s.loss_drop
            );
        }
        Command::TrainAdapter { tsdf, codec, out } => {
            let s = cmd_train_adapter(&cfg, tsdf, codec, out)?;
            println!(
                "trained adapter on {} pairs: loss {:.6} -> {:.6}",
                s.pairs, s.initial_loss, s.final_loss
            );
        }
        Command::TrainTexture {
            patches,
            masks,
            shape_codec,
            texture_codec,
            out,
        } => {
            let s = cmd_train_texture(&cfg, patches, masks, shape_codec, texture_codec, out)?;
            println!(
                "trained texture denoiser on {} items for {} steps: eval loss {:.6} -> {:.6} ({:.1}% drop)",
                s.items,
                s.steps,
                s.initial_eval_loss,
                s.final_eval_loss,
                100.0 * s.loss_drop
            );
        }
        Command::Synth {
            backgrounds,
            shape_codec,
            shape_model,
            adapter,
            texture_codec,
            texture_model,
            count,
            out,
        } => {
            let paths = StackPaths {
                shape_codec: shape_codec.clone(),
                shape_model: shape_model.clone(),
                adapter: adapter.clone(),
                texture_codec: texture_codec.clone(),
                texture_model: texture_model.clone(),
            };
            let manifest = cmd_synth(&cfg, backgrounds, &paths, *count, out)?;
            println!(
                "synthesized {} lesions across {} backgrounds into {}",
                manifest.entries.len(),
                manifest.backgrounds.len(),
                out.display()
            );
            if cli.verbose {
                for e in &manifest.entries {
                    println!(
                        "  {} at {:?}: target {:.2} mm, realized {:.2} mm",
                        e.background, e.center, e.target_mm, e.realized_mm
                    );
                }
            }
        }
        Command::Verify { dataset } => {
            let report = lnforge::synthesis::verify_assembly(dataset)?;
            println!(
                "verified {} backgrounds and {} entries in {}",
                report.backgrounds_checked,
                report.entries_checked,
                dataset.display()
            );
        }
        Command::EvalIpr {
            real,
            fake,
            codec,
            out,
        } => {
            let report = cmd_eval_ipr(&cfg, real, fake, codec, out.as_deref())?;
            println!(
                "improved precision {:.4}, improved recall {:.4} ({} real, {} fake, k={})",
                report.ip, report.ir, report.n_real, report.n_fake, report.k
            );
        }
        Command::Measure { masks, out } => {
            let report = cmd_measure(&cfg, masks, out.as_deref())?;
            println!(
                "{} masks: long axis {:.2}..{:.2} mm, {:.0}% in the 3-10 mm band",
                report.axes_mm.len(),
                report.min_mm,
                report.max_mm,
                100.0 * report.fraction_3_to_10_mm
            );
            if cli.verbose {
                for (i, a) in report.axes_mm.iter().enumerate() {
                    println!("  mask {i}: {a:.2} mm");
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}] {e}", e.category());
            ExitCode::FAILURE
        }
    }
}
