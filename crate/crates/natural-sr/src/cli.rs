//! Command-line surface. Every subcommand prints the fully resolved
//! config document at startup (parse it back to reproduce the run), takes
//! its randomness from `--seed`, and is bit-reproducible with
//! `--threads 1`.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::config::{load_config, RunConfig};
use crate::data::load_images_dir;
use crate::dct::DctLayout;
use crate::error::{Error, Result};
use crate::eval::{plausibility, psnr, psnr_luma, ssim, EvalReport, EvalRow};
use crate::gradcheck;
use crate::networks::forward_sr;
use crate::nmd::{nmd_score, trace_csv, train_nmd, CurriculumState};
use crate::pngio::{load_image, save_image};
use crate::resample::{degrade, interpolate, ResamplerSpec};
use crate::synth::{synth_blurry, synth_noisy, verify_membership, extract_patches, NoiseBand};
use crate::tensor::Image;
use crate::train::{frsr_trace_csv, natsr_trace_csv, train_frsr, train_natsr};

pub const DATA_DIR_ENV: &str = "NATURAL_SR_DATA_DIR";

#[derive(Parser)]
#[command(name = "natural-sr", version, about = "Manifold-aware single-image super-resolution")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Config file (TOML); defaults apply when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides worker thread counts; 1 forces determinism
    #[arg(long)]
    threads: Option<usize>,
    /// Dataset directory of PNG images; falls back to $NATURAL_SR_DATA_DIR
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write HR / blurry / noisy sample triples and a manifest
    Synthesize {
        #[command(flatten)]
        common: Common,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
        /// Number of sample triples
        #[arg(long, default_value_t = 4)]
        count: usize,
        /// Blend factor for the blurry set; config curriculum start if omitted
        #[arg(long)]
        alpha: Option<f64>,
        /// Noise level for the noisy set; config curriculum start if omitted
        #[arg(long)]
        sigma: Option<f64>,
    },
    /// Train the naturalness discriminator with its curriculum
    TrainNmd {
        #[command(flatten)]
        common: Common,
        /// Checkpoint path to write
        #[arg(long)]
        out: PathBuf,
        /// Optional CSV trace path
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Patch pool size drawn from the dataset
        #[arg(long, default_value_t = 40)]
        pool: usize,
    },
    /// Train the reconstruction-only generator
    TrainFrsr {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Train the full generator against naturalness and adversarial losses
    TrainNatsr {
        #[command(flatten)]
        common: Common,
        /// Trained naturalness-discriminator checkpoint
        #[arg(long)]
        nmd: PathBuf,
        /// Generator checkpoint to warm-start from; cold init if omitted
        #[arg(long)]
        warm: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Optional adversarial-discriminator checkpoint path
        #[arg(long)]
        disc_out: Option<PathBuf>,
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Apply a generator checkpoint to one image
    SuperResolve {
        /// Generator checkpoint
        #[arg(long)]
        ckpt: PathBuf,
        /// Input LR image (PNG)
        #[arg(long = "in")]
        input: PathBuf,
        /// Output SR image (PNG)
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Score a generator (or plain interpolation) over a dataset
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Generator checkpoint; scores interpolation when omitted
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Optional naturalness checkpoint adding an nmd column
        #[arg(long)]
        nmd: Option<PathBuf>,
        /// Optional CSV output path
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tile-averaged naturalness score of images
    ScoreNmd {
        /// Naturalness-discriminator checkpoint
        #[arg(long)]
        ckpt: PathBuf,
        /// Images to score
        #[arg(required = true)]
        images: Vec<PathBuf>,
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Degradation-consistency PSNR between an SR image and its LR source
    CheckPlausibility {
        #[arg(long)]
        sr: PathBuf,
        #[arg(long)]
        lr: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference verification of every differentiable op
    GradCheck {
        /// Check a single op instead of the full registry
        #[arg(long)]
        op: Option<String>,
        #[arg(long, default_value_t = gradcheck::DEFAULT_EPS)]
        eps: f64,
    },
}

/// Entry point for the binary.
pub fn run() -> i32 {
    run_cli(std::env::args())
}

/// Parses and dispatches; returns the process exit code. Usage errors
/// print help text and exit 2, runtime failures exit 1.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.cmd) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e);
            1
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Synthesize { common, out, count, alpha, sigma } => {
            let cfg = resolve_config(&common)?;
            synthesize(&cfg, &data_dir(&common)?, &out, count, alpha, sigma)
        }
        Cmd::TrainNmd { common, out, trace, pool } => {
            let cfg = resolve_config(&common)?;
            cmd_train_nmd(&cfg, &data_dir(&common)?, &out, trace.as_deref(), pool)
        }
        Cmd::TrainFrsr { common, out, trace } => {
            let cfg = resolve_config(&common)?;
            cmd_train_frsr(&cfg, &data_dir(&common)?, &out, trace.as_deref())
        }
        Cmd::TrainNatsr { common, nmd, warm, out, disc_out, trace } => {
            let cfg = resolve_config(&common)?;
            cmd_train_natsr(
                &cfg,
                &data_dir(&common)?,
                &nmd,
                warm.as_deref(),
                &out,
                disc_out.as_deref(),
                trace.as_deref(),
            )
        }
        Cmd::SuperResolve { ckpt, input, out, threads } => {
            let gen = load_checkpoint(&ckpt)?.to_generator()?;
            let lr = load_image(&input)?;
            let sr = forward_sr(&gen, &lr, threads.max(1))?;
            save_image(&sr, &out)?;
            println!(
                "{} {}x{} -> {} {}x{} (x{})",
                input.display(),
                lr.width(),
                lr.height(),
                out.display(),
                sr.width(),
                sr.height(),
                gen.scale
            );
            Ok(())
        }
        Cmd::Evaluate { common, ckpt, nmd, out } => {
            let cfg = resolve_config(&common)?;
            cmd_evaluate(&cfg, &data_dir(&common)?, ckpt.as_deref(), nmd.as_deref(), out.as_deref())
        }
        Cmd::ScoreNmd { ckpt, images, threads } => {
            let net = load_checkpoint(&ckpt)?.to_nmd()?;
            let mut total = 0.0;
            for path in &images {
                let img = load_image(path)?;
                let s = nmd_score(&net, &img, threads.max(1))?;
                total += s;
                println!("{} {:.4}", path.display(), s);
            }
            println!("mean {:.4}", total / images.len() as f64);
            Ok(())
        }
        Cmd::CheckPlausibility { sr, lr, common } => {
            let cfg = resolve_config(&common)?;
            let sr_img = load_image(&sr)?;
            let lr_img = load_image(&lr)?;
            let spec = infer_spec(&cfg, &sr_img, &lr_img)?;
            let db = plausibility(&sr_img, &lr_img, &spec)?;
            println!("plausibility {:.4} dB", db);
            Ok(())
        }
        Cmd::GradCheck { op, eps } => {
            let reports = match op {
                Some(name) => vec![gradcheck::grad_check(&name, eps)?],
                None => gradcheck::run_all(eps)?,
            };
            print!("{}", gradcheck::report_table(&reports));
            if reports.iter().all(|r| r.passed()) {
                Ok(())
            } else {
                Err(Error::invalid("gradient check failed"))
            }
        }
    }
}

fn resolve_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => load_config(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.override_seed(seed);
    }
    if let Some(threads) = common.threads {
        cfg.override_threads(threads.max(1));
    }
    println!("# resolved config");
    println!("{}", cfg.echo());
    Ok(cfg)
}

fn data_dir(common: &Common) -> Result<PathBuf> {
    if let Some(d) = &common.data {
        return Ok(d.clone());
    }
    if let Ok(d) = std::env::var(DATA_DIR_ENV) {
        if !d.is_empty() {
            return Ok(PathBuf::from(d));
        }
    }
    Err(Error::invalid(format!("no dataset directory: pass --data or set {}", DATA_DIR_ENV)))
}

fn load_dataset(dir: &Path) -> Result<Vec<Image>> {
    Ok(load_images_dir(dir)?.into_iter().map(|(_, img)| img).collect())
}

/// Scale inferred from the image pair; the config supplies the kernel.
fn infer_spec(cfg: &RunConfig, sr: &Image, lr: &Image) -> Result<ResamplerSpec> {
    if lr.height() == 0 || sr.height() % lr.height() != 0 {
        return Err(Error::invalid(format!(
            "SR height {} is not an integer multiple of LR height {}",
            sr.height(),
            lr.height()
        )));
    }
    ResamplerSpec::new(sr.height() / lr.height(), cfg.kernel)
}

#[derive(Serialize)]
struct ManifestSample {
    hr: String,
    blurry: String,
    noisy: String,
    blurry_membership_db: f64,
    noisy_membership_db: f64,
    noisy_clip_fraction: f64,
}

#[derive(Serialize)]
struct Manifest {
    seed: u64,
    scale: usize,
    kernel: String,
    patch: usize,
    alpha: f64,
    sigma: f64,
    samples: Vec<ManifestSample>,
}

fn synthesize(
    cfg: &RunConfig,
    data: &Path,
    out: &Path,
    count: usize,
    alpha: Option<f64>,
    sigma: Option<f64>,
) -> Result<()> {
    let start = CurriculumState::new();
    let alpha = alpha.unwrap_or(start.alpha);
    let sigma = sigma.unwrap_or(start.sigma);
    let spec = cfg.spec()?;
    let layout = DctLayout::new(8)?;
    let images = load_dataset(data)?;
    let patch = cfg.nmd.patch;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let patches = extract_patches(&images, patch, spec.scale, count, &mut rng)?;
    std::fs::create_dir_all(out)?;
    let mut samples = Vec::with_capacity(count);
    for (i, hr) in patches.iter().enumerate() {
        let lr = degrade(hr, &spec)?;
        let blurry = synth_blurry(hr, alpha, &spec)?;
        let noisy = synth_noisy(hr, sigma, &layout, NoiseBand::MaskBins, &mut rng)?;
        let names = (
            format!("sample{}_hr.png", i),
            format!("sample{}_blurry.png", i),
            format!("sample{}_noisy.png", i),
        );
        save_image(hr, &out.join(&names.0))?;
        save_image(&blurry.image, &out.join(&names.1))?;
        save_image(&noisy.image, &out.join(&names.2))?;
        samples.push(ManifestSample {
            hr: names.0,
            blurry: names.1,
            noisy: names.2,
            blurry_membership_db: verify_membership(&blurry.image, &lr, &spec)?,
            noisy_membership_db: verify_membership(&noisy.image, &lr, &spec)?,
            noisy_clip_fraction: noisy.clip_fraction,
        });
    }
    let manifest = Manifest {
        seed: cfg.seed,
        scale: spec.scale,
        kernel: format!("{:?}", cfg.kernel).to_lowercase(),
        patch,
        alpha,
        sigma,
        samples,
    };
    let text = toml::to_string_pretty(&manifest)
        .map_err(|e| Error::invalid(format!("manifest serialization: {}", e)))?;
    std::fs::write(out.join("manifest.toml"), text)?;
    println!("wrote {} sample triples to {}", count, out.display());
    Ok(())
}

fn cmd_train_nmd(
    cfg: &RunConfig,
    data: &Path,
    out: &Path,
    trace: Option<&Path>,
    pool_size: usize,
) -> Result<()> {
    let spec = cfg.spec()?;
    let images = load_dataset(data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let pool = extract_patches(&images, cfg.nmd.patch, spec.scale, pool_size, &mut rng)?;
    let outcome = train_nmd(&pool, &cfg.nmd, &cfg.nmd_train, &spec, cfg.seed)?;
    save_checkpoint(
        &Checkpoint::from_nmd(&outcome.net, Some(&outcome.curriculum), Some(&outcome.adam)),
        out,
    )?;
    if let Some(path) = trace {
        std::fs::write(path, trace_csv(&outcome.trace))?;
    }
    println!(
        "trained {} steps, final loss {:.6}, alpha {:.2}, sigma {:.6}, checkpoint {}",
        outcome.steps_run,
        outcome.final_loss,
        outcome.curriculum.alpha,
        outcome.curriculum.sigma,
        out.display()
    );
    Ok(())
}

fn cmd_train_frsr(cfg: &RunConfig, data: &Path, out: &Path, trace: Option<&Path>) -> Result<()> {
    let dataset = load_dataset(data)?;
    let outcome = train_frsr(&dataset, &cfg.generator, &cfg.train)?;
    save_checkpoint(&Checkpoint::from_generator(&outcome.generator, Some(&outcome.adam)), out)?;
    if let Some(path) = trace {
        std::fs::write(path, frsr_trace_csv(&outcome.trace))?;
    }
    if let Some(d) = outcome.diverged {
        println!(
            "DIVERGED at step {}; checkpoint restored from step {}",
            d.at_step, d.restored_step
        );
    }
    println!(
        "baseline {:.3} dB, final {:.3} dB, checkpoint {}",
        outcome.baseline_psnr,
        outcome.final_val_psnr,
        out.display()
    );
    Ok(())
}

fn cmd_train_natsr(
    cfg: &RunConfig,
    data: &Path,
    nmd_path: &Path,
    warm_path: Option<&Path>,
    out: &Path,
    disc_out: Option<&Path>,
    trace: Option<&Path>,
) -> Result<()> {
    let dataset = load_dataset(data)?;
    let nmd = load_checkpoint(nmd_path)?.to_nmd()?;
    let warm = match warm_path {
        Some(p) => Some(load_checkpoint(p)?.to_generator()?),
        None => None,
    };
    let outcome = train_natsr(
        &dataset,
        &cfg.generator,
        &cfg.gan,
        &nmd,
        warm.as_ref(),
        &cfg.train,
        &cfg.weights,
    )?;
    save_checkpoint(&Checkpoint::from_generator(&outcome.generator, Some(&outcome.adam_g)), out)?;
    if let Some(path) = disc_out {
        save_checkpoint(
            &Checkpoint::from_discriminator(&outcome.discriminator, Some(&outcome.adam_d)),
            path,
        )?;
    }
    if let Some(path) = trace {
        std::fs::write(path, natsr_trace_csv(&outcome.trace))?;
    }
    if let Some(d) = outcome.diverged {
        println!(
            "DIVERGED at step {}; checkpoint restored from step {}",
            d.at_step, d.restored_step
        );
    }
    if let Some(last) = outcome.trace.last() {
        println!(
            "final val psnr {:.3} dB, nmd {:.4}, plausibility {:.3} dB{}",
            last.val_psnr,
            last.nmd_mean,
            last.plausibility,
            if last.collapse_warning { " [collapse warning]" } else { "" }
        );
    }
    println!("checkpoint {}", out.display());
    Ok(())
}

fn cmd_evaluate(
    cfg: &RunConfig,
    data: &Path,
    ckpt: Option<&Path>,
    nmd_path: Option<&Path>,
    out: Option<&Path>,
) -> Result<()> {
    let spec = cfg.spec()?;
    let named = load_images_dir(data)?;
    let gen = match ckpt {
        Some(p) => Some(load_checkpoint(p)?.to_generator()?),
        None => None,
    };
    let scorer = match nmd_path {
        Some(p) => Some(load_checkpoint(p)?.to_nmd()?),
        None => None,
    };
    let method = match (&gen, ckpt) {
        (Some(_), Some(p)) => p
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "generator".into()),
        _ => "interpolate".into(),
    };
    if let Some(g) = &gen {
        if g.scale != spec.scale {
            return Err(Error::Config(format!(
                "checkpoint is x{} but the config says x{}",
                g.scale, spec.scale
            )));
        }
    }
    let mut metrics = vec![
        "psnr".to_string(),
        "psnr_y".to_string(),
        "ssim".to_string(),
        "plausibility".to_string(),
    ];
    if scorer.is_some() {
        metrics.push("nmd".to_string());
    }
    let threads = cfg.train.threads.max(1);
    let mut rows = Vec::with_capacity(named.len());
    for (name, img) in &named {
        let h = (img.height() / spec.scale) * spec.scale;
        let w = (img.width() / spec.scale) * spec.scale;
        if h == 0 || w == 0 {
            return Err(Error::invalid(format!("{} is smaller than one LR pixel", name)));
        }
        let hr = img.crop(0, 0, h, w)?;
        let lr = degrade(&hr, &spec)?;
        let sr = match &gen {
            Some(g) => forward_sr(g, &lr, threads)?,
            None => interpolate(&lr, &spec)?.clamp01(),
        };
        let mut values = vec![
            psnr(&sr, &hr, 1.0)?,
            psnr_luma(&sr, &hr, 1.0)?,
            ssim(&sr, &hr)?,
            plausibility(&sr, &lr, &spec)?,
        ];
        if let Some(net) = &scorer {
            values.push(nmd_score(net, &sr, threads)?);
        }
        rows.push(EvalRow { name: name.clone(), values });
    }
    let report = EvalReport::new(method, data.display().to_string(), metrics, rows)?;
    print!("{}", report.table());
    if let Some(path) = out {
        std::fs::write(path, report.csv())?;
    }
    Ok(())
}
