use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use diffexplain::bundle::{build_bundle, read_bundle, write_bundle, EncoderConfig, Engine, PredictorConfig, RunConfig};
use diffexplain::dxt::DxtTensor;
use diffexplain::latent_imaging::{decode_linear, fit_decoder, upscale, LinearDecoder, RgbImage, UpscaleMode};
use diffexplain::sampler::{Sampler, Trajectory};
use diffexplain::scheduler::{LatentShape, LatentTensor};
use diffexplain::text_encoding::{Conditioner, DEFAULT_EMBED_DIM};
use diffexplain::tokenizer::Vocabulary;
use diffexplain::trajectory_projection::{project_trajectories, UmapParams};

#[derive(Parser)]
#[command(name = "diffexplain", version, about = "Precompute data for an interactive diffusion explainer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Tokenize a prompt; prints `index<TAB>id<TAB>token` per line up to the
    /// end marker.
    Tokenize {
        #[arg(long)]
        prompt: String,
        /// Print ids, tokens and source spans as one JSON object instead.
        #[arg(long)]
        json: bool,
        #[arg(long, requires = "merges")]
        vocab: Option<PathBuf>,
        #[arg(long, requires = "vocab")]
        merges: Option<PathBuf>,
    },
    /// Run one guided trajectory and write it as a DXT file.
    Sample {
        #[arg(long)]
        prompt: String,
        /// Key used to look up ingested tensors.
        #[arg(long, default_value = "prompt")]
        key: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        steps: usize,
        #[arg(long, default_value_t = 7.0)]
        guidance: f64,
        /// `synthetic` or `ingested:<replay pack dir>`.
        #[arg(long, default_value = "synthetic")]
        predictor: PredictorConfig,
        /// Tensor pack of text representations; synthetic encoder when absent.
        #[arg(long)]
        encoder_pack: Option<PathBuf>,
        /// Latent shape as `C,H,W`.
        #[arg(long, default_value = "4,64,64")]
        latent_shape: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Embed trajectories jointly in 2D and write polylines as JSON.
    Project {
        #[arg(long, num_args = 1.., required = true)]
        trajectories: Vec<PathBuf>,
        #[arg(long, default_value_t = 15)]
        neighbors: usize,
        #[arg(long, default_value_t = 0.1)]
        min_dist: f64,
        #[arg(long, default_value_t = 1.0)]
        spread: f64,
        #[arg(long, default_value_t = 500)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build an explainer bundle.
    Bundle {
        /// Run configuration JSON; the demo configuration when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        include_latents: bool,
    },
    /// Check a bundle against the format and its internal references.
    Validate {
        #[arg(long)]
        bundle: PathBuf,
    },
    /// Render one step of a trajectory file as a PNG.
    Render {
        #[arg(long)]
        trajectory: PathBuf,
        /// Step index; the final latent when absent.
        #[arg(long)]
        step: Option<usize>,
        #[arg(long, default_value_t = 512)]
        width: usize,
        #[arg(long, value_enum, default_value_t = Mode::Bilinear)]
        mode: Mode,
        #[arg(long)]
        decoder: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a linear decoder from latent/image pairs given as `latent.dxt=image.png`.
    FitDecoder {
        #[arg(long = "pair", num_args = 1.., required = true)]
        pairs: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Nearest,
    Bilinear,
}

impl From<Mode> for UpscaleMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Nearest => UpscaleMode::Nearest,
            Mode::Bilinear => UpscaleMode::Bilinear,
        }
    }
}

fn parse_shape(s: &str) -> Result<[usize; 3]> {
    let dims: Vec<usize> = s
        .split(',')
        .map(|d| d.trim().parse())
        .collect::<std::result::Result<_, _>>()
        .with_context(|| format!("latent shape {s:?} is not C,H,W"))?;
    match dims[..] {
        [c, h, w] if c > 0 && h > 0 && w > 0 => Ok([c, h, w]),
        _ => bail!("latent shape {s:?} is not three positive integers"),
    }
}

fn load_latent(path: &PathBuf) -> Result<LatentTensor> {
    let (dims, data, _) = DxtTensor::load(path)?.into_parts();
    match dims[..] {
        [c, h, w] => Ok(LatentTensor::from_vec(LatentShape::new(c, h, w), data)?),
        _ => bail!("{}: expected a [C, H, W] latent, found shape {dims:?}", path.display()),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Tokenize {
            prompt,
            json,
            vocab,
            merges,
        } => {
            let vocab = match (vocab, merges) {
                (Some(v), Some(m)) => Vocabulary::load(
                    fs::File::open(&v).with_context(|| v.display().to_string())?,
                    fs::File::open(&m).with_context(|| m.display().to_string())?,
                )?,
                _ => Vocabulary::clip(),
            };
            let seq = vocab.tokenize(&prompt);
            if !json {
                for (i, &id) in seq.ids()[..=seq.end_position()].iter().enumerate() {
                    println!("{i}\t{id}\t{}", vocab.token(id).unwrap_or_default());
                }
                return Ok(());
            }
            let tokens: Vec<_> = seq.content_ids().iter().map(|&id| vocab.token(id).unwrap_or_default()).collect();
            let spans: Vec<_> = seq.spans().iter().map(|s| s.map(|s| [s.start, s.end])).collect();
            let out = serde_json::json!({
                "ids": seq.ids(),
                "content_len": seq.content_len(),
                "tokens": tokens,
                "spans": spans,
            });
            println!("{out}");
        }
        Command::Sample {
            prompt,
            key,
            seed,
            steps,
            guidance,
            predictor,
            encoder_pack,
            latent_shape,
            out,
        } => {
            let mut config = RunConfig {
                latent_shape: parse_shape(&latent_shape)?,
                predictor,
                ..RunConfig::default()
            };
            config.schedule.inference_steps = steps;
            if let Some(pack) = encoder_pack {
                config.encoder = EncoderConfig::Ingested { pack };
            } else {
                config.encoder = EncoderConfig::Synthetic {
                    seed: 0,
                    embed_dim: DEFAULT_EMBED_DIM,
                };
            }
            let engine = Engine::from_config(&config)?;
            let conditioner = Conditioner::new(&engine.vocab, engine.encoder.as_ref());
            let sampler = Sampler {
                schedule: &engine.schedule,
                shape: engine.shape,
                conditioner: &conditioner,
                predictor: engine.predictor.as_ref(),
            };
            let trajectory = sampler.run(&key, &prompt, seed, &sampler.guidance(guidance)?)?;
            trajectory.to_dxt()?.save(&out)?;
            eprintln!("wrote {} latents to {}", trajectory.latents.len(), out.display());
        }
        Command::Project {
            trajectories,
            neighbors,
            min_dist,
            spread,
            epochs,
            seed,
            out,
        } => {
            let loaded = trajectories
                .iter()
                .map(|p| Trajectory::from_dxt(DxtTensor::load(p)?).with_context(|| p.display().to_string()))
                .collect::<Result<Vec<_>>>()?;
            let params = UmapParams {
                n_neighbors: neighbors,
                min_dist,
                spread,
                epochs,
                ..UmapParams::default()
            };
            let (polylines, _) = project_trajectories(&loaded, &params, seed)?;
            fs::write(&out, serde_json::to_string_pretty(&polylines)?).with_context(|| out.display().to_string())?;
        }
        Command::Bundle {
            config,
            out,
            include_latents,
        } => {
            let mut config = match config {
                Some(path) => RunConfig::load(&path)?,
                None => RunConfig::default(),
            };
            config.include_latents |= include_latents;
            let bundle = build_bundle(&config)?;
            write_bundle(&bundle, &out)?;
            eprintln!("wrote {} prompts to {}", bundle.prompts.len(), out.display());
        }
        Command::Validate { bundle } => {
            let b = read_bundle(&bundle)?;
            println!(
                "ok: version {}, {} prompts, {} projections",
                b.version,
                b.prompts.len(),
                b.projections.len()
            );
        }
        Command::Render {
            trajectory,
            step,
            width,
            mode,
            decoder,
            out,
        } => {
            let t = Trajectory::from_dxt(DxtTensor::load(&trajectory)?)?;
            let step = step.unwrap_or(t.latents.len() - 1);
            let latent = t
                .latents
                .get(step)
                .with_context(|| format!("step {step} out of range 0..{}", t.latents.len()))?;
            let decoder = match decoder {
                Some(p) => LinearDecoder::load(p)?,
                None => LinearDecoder::default_rgb(),
            };
            let small = decode_linear(latent, &decoder)?;
            let height = width * small.height() / small.width();
            upscale(&small, width, height, mode.into())?.save_png(&out)?;
        }
        Command::FitDecoder { pairs, out } => {
            let loaded = pairs
                .iter()
                .map(|p| {
                    let (latent, image) = p
                        .split_once('=')
                        .with_context(|| format!("pair {p:?} is not latent.dxt=image.png"))?;
                    Ok((load_latent(&latent.into())?, RgbImage::load_png(image)?))
                })
                .collect::<Result<Vec<_>>>()?;
            let fit = fit_decoder(&loaded, [-1.0, 1.0])?;
            fs::write(&out, fit.decoder.to_json()).with_context(|| out.display().to_string())?;
            eprintln!("fitted on {} pairs, training MAE {:.3}", fit.samples, fit.train_mae);
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
