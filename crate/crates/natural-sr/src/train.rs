//! The two training regimes: reconstruction-only generator training and
//! the full perception-oriented run with naturalness and adversarial
//! terms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::psnr;
use crate::graph::Tape;
use crate::losses::{natural_loss, ragan_losses, recon_loss, total_loss, LossWeights};
use crate::networks::{forward_sr, Discriminator, FrlConfig, GanDiscConfig, Generator};
use crate::nmd::{nmd_score, NmdNet};
use crate::optim::{adam_step, AdamState};
use crate::resample::{degrade, interpolate, KernelKind, ResamplerSpec};
use crate::synth::extract_patches;
use crate::tensor::Image;

/// Mean-logit separation treated as discriminator runaway.
pub const COLLAPSE_GAP: f64 = 20.0;
/// Consecutive steps above the gap before the trace carries a warning.
pub const COLLAPSE_STEPS: u32 = 50;

/// Shared knobs for both training regimes. Patch size is in LR pixels;
/// the HR patch is `lr_patch * scale` and must tile into 8x8 blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr_patch: usize,
    pub scale: usize,
    pub kernel: KernelKind,
    pub batch: usize,
    pub steps: u64,
    pub lr: f64,
    /// Fraction of total steps after which the learning rate halves once.
    pub halve_at: f64,
    pub eval_every: u64,
    /// Images held out of patch sampling for validation.
    pub eval_images: usize,
    pub threads: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            lr_patch: 12,
            scale: 4,
            kernel: KernelKind::Bicubic,
            batch: 4,
            steps: 240,
            lr: 1e-3,
            halve_at: 0.5,
            eval_every: 40,
            eval_images: 3,
            threads: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let spec = self.spec()?;
        let hr_patch = self.lr_patch * spec.scale;
        if hr_patch % 8 != 0 {
            return Err(Error::Config(format!(
                "HR patch {} (lr_patch {} x scale {}) must tile into 8x8 blocks",
                hr_patch, self.lr_patch, self.scale
            )));
        }
        if self.lr_patch == 0 {
            return Err(Error::Config("lr_patch must be positive".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive and finite, got {}", self.lr)));
        }
        if !(self.halve_at > 0.0 && self.halve_at <= 1.0) {
            return Err(Error::Config(format!("halve_at must be in (0, 1], got {}", self.halve_at)));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be positive".into()));
        }
        if self.eval_images == 0 {
            return Err(Error::Config("eval_images must be positive".into()));
        }
        Ok(())
    }

    pub fn spec(&self) -> Result<ResamplerSpec> {
        ResamplerSpec::new(self.scale, self.kernel)
    }

    pub fn hr_patch(&self) -> usize {
        self.lr_patch * self.scale
    }
}

/// Two plateaus: the configured rate, then half of it from the halving
/// step onward.
pub fn lr_schedule(cfg: &TrainConfig, step: u64) -> f64 {
    let halve_step = ((cfg.steps as f64) * cfg.halve_at).floor().max(1.0) as u64;
    if step <= halve_step {
        cfg.lr
    } else {
        cfg.lr * 0.5
    }
}

#[derive(Debug, Clone)]
pub struct FrsrTraceRow {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub val_psnr: f64,
}

pub fn frsr_trace_csv(rows: &[FrsrTraceRow]) -> String {
    let mut out = String::from("step,loss,lr,val_psnr\n");
    for r in rows {
        out.push_str(&format!("{},{:.6},{:.6},{:.4}\n", r.step, r.loss, r.lr, r.val_psnr));
    }
    out
}

/// Step and last-good-step of an aborted run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Divergence {
    pub at_step: u64,
    pub restored_step: u64,
}

pub struct FrsrOutcome {
    pub generator: Generator,
    pub adam: AdamState,
    pub trace: Vec<FrsrTraceRow>,
    /// Mean validation PSNR of plain interpolation, the floor any useful
    /// model must beat.
    pub baseline_psnr: f64,
    pub final_val_psnr: f64,
    pub diverged: Option<Divergence>,
}

struct DataPipe<'a> {
    train: &'a [Image],
    val_hr: Vec<Image>,
    val_lr: Vec<Image>,
    spec: ResamplerSpec,
    hr_patch: usize,
}

impl<'a> DataPipe<'a> {
    fn new(dataset: &'a [Image], cfg: &TrainConfig) -> Result<DataPipe<'a>> {
        let spec = cfg.spec()?;
        if dataset.len() <= cfg.eval_images {
            return Err(Error::invalid(format!(
                "dataset of {} leaves no training images after holding out {}",
                dataset.len(),
                cfg.eval_images
            )));
        }
        let (val, train) = dataset.split_at(cfg.eval_images);
        let mut val_hr = Vec::with_capacity(val.len());
        let mut val_lr = Vec::with_capacity(val.len());
        for img in val {
            let h = (img.height() / spec.scale) * spec.scale;
            let w = (img.width() / spec.scale) * spec.scale;
            if h == 0 || w == 0 {
                return Err(Error::shape(
                    "train",
                    format!("validation image {}x{} smaller than scale {}", img.height(), img.width(), spec.scale),
                ));
            }
            let hr = img.crop(0, 0, h, w)?;
            val_lr.push(degrade(&hr, &spec)?);
            val_hr.push(hr);
        }
        Ok(DataPipe { train, val_hr, val_lr, spec, hr_patch: cfg.hr_patch() })
    }

    fn batch(&self, count: usize, rng: &mut ChaCha8Rng) -> Result<(Vec<Image>, Vec<Image>)> {
        let hr = extract_patches(self.train, self.hr_patch, self.spec.scale, count, rng)?;
        let lr = hr.iter().map(|p| degrade(p, &self.spec)).collect::<Result<Vec<_>>>()?;
        Ok((hr, lr))
    }

    fn baseline_psnr(&self) -> Result<f64> {
        let mut total = 0.0;
        for (hr, lr) in self.val_hr.iter().zip(&self.val_lr) {
            total += psnr(&interpolate(lr, &self.spec)?, hr, 1.0)?;
        }
        Ok(total / self.val_hr.len() as f64)
    }

    fn val_psnr(&self, gen: &Generator, threads: usize) -> Result<f64> {
        let mut total = 0.0;
        for (hr, lr) in self.val_hr.iter().zip(&self.val_lr) {
            total += psnr(&forward_sr(gen, lr, threads)?, hr, 1.0)?;
        }
        Ok(total / self.val_hr.len() as f64)
    }
}

/// Derives the per-network seeds from the run seed. Both regimes draw
/// the same tuple so a NatSR run with zeroed extra losses replays the
/// reconstruction-only trajectory bitwise.
fn derive_seeds(seed: u64) -> (u64, u64, u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (rng.gen(), rng.gen(), rng.gen())
}

/// Reconstruction-only training: ADAM on mean absolute error, learning
/// rate halved once, periodic held-out PSNR evaluation. A non-finite
/// loss aborts the run and restores the last evaluated parameters.
pub fn train_frsr(dataset: &[Image], frl: &FrlConfig, cfg: &TrainConfig) -> Result<FrsrOutcome> {
    cfg.validate()?;
    frl.validate()?;
    let (g_seed, _d_seed, data_seed) = derive_seeds(cfg.seed);
    let pipe = DataPipe::new(dataset, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(data_seed);
    let mut gen = Generator::init(frl.clone(), cfg.scale, g_seed)?;
    let mut adam = AdamState::new();
    let baseline = pipe.baseline_psnr()?;
    let mut trace = Vec::new();
    let mut snapshot = (gen.params.clone(), adam.clone(), 0u64);
    let mut val = f64::NAN;
    for step in 1..=cfg.steps {
        let (hr, lr) = pipe.batch(cfg.batch, &mut rng)?;
        let mut tape = Tape::new(cfg.threads);
        let x = tape.constant(Image::batch(&lr)?);
        let y = tape.constant(Image::batch(&hr)?);
        let sr = gen.forward(&mut tape, x)?;
        let loss = recon_loss(&mut tape, sr, y)?;
        let loss_value = tape.value(loss).item();
        if !loss_value.is_finite() {
            let (params, state, good) = snapshot;
            gen.params = params;
            adam = state;
            return Ok(FrsrOutcome {
                generator: gen,
                adam,
                trace,
                baseline_psnr: baseline,
                final_val_psnr: val,
                diverged: Some(Divergence { at_step: step, restored_step: good }),
            });
        }
        let grads = tape.backward(loss)?;
        let named = tape.param_grads(&grads);
        adam_step(&mut gen.params, &named, &mut adam, lr_schedule(cfg, step))?;
        if step % cfg.eval_every == 0 || step == cfg.steps {
            val = pipe.val_psnr(&gen, cfg.threads)?;
            trace.push(FrsrTraceRow { step, loss: loss_value, lr: lr_schedule(cfg, step), val_psnr: val });
            snapshot = (gen.params.clone(), adam.clone(), step);
        }
    }
    Ok(FrsrOutcome {
        generator: gen,
        adam,
        trace,
        baseline_psnr: baseline,
        final_val_psnr: val,
        diverged: None,
    })
}

#[derive(Debug, Clone)]
pub struct NatsrTraceRow {
    pub step: u64,
    pub recon: f64,
    pub natural: f64,
    pub adv_g: f64,
    pub adv_d: f64,
    pub val_psnr: f64,
    pub nmd_mean: f64,
    pub plausibility: f64,
    pub collapse_warning: bool,
}

pub fn natsr_trace_csv(rows: &[NatsrTraceRow]) -> String {
    let mut out =
        String::from("step,recon,natural,adv_g,adv_d,val_psnr,nmd_mean,plausibility,collapse_warning\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.4},{:.4},{:.4},{}\n",
            r.step,
            r.recon,
            r.natural,
            r.adv_g,
            r.adv_d,
            r.val_psnr,
            r.nmd_mean,
            r.plausibility,
            r.collapse_warning as u8
        ));
    }
    out
}

pub struct NatsrOutcome {
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub adam_g: AdamState,
    pub adam_d: AdamState,
    pub trace: Vec<NatsrTraceRow>,
    pub baseline_psnr: f64,
    pub diverged: Option<Divergence>,
}

/// Full perception-oriented training. Each step updates the
/// discriminator on its relativistic loss with detached generator
/// outputs, then the generator on the weighted total; the naturalness
/// scorer stays frozen throughout. Evaluations log validation PSNR, the
/// mean naturalness score of generator outputs, and LR-consistency.
pub fn train_natsr(
    dataset: &[Image],
    frl: &FrlConfig,
    disc_cfg: &GanDiscConfig,
    nmd: &NmdNet,
    warm_start: Option<&Generator>,
    cfg: &TrainConfig,
    weights: &LossWeights,
) -> Result<NatsrOutcome> {
    cfg.validate()?;
    frl.validate()?;
    disc_cfg.validate()?;
    weights.validate()?;
    let (g_seed, d_seed, data_seed) = derive_seeds(cfg.seed);
    let pipe = DataPipe::new(dataset, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(data_seed);
    let mut gen = match warm_start {
        Some(g) => {
            if g.scale != cfg.scale {
                return Err(Error::Config(format!(
                    "warm-start generator is x{} but the run is x{}",
                    g.scale, cfg.scale
                )));
            }
            g.clone()
        }
        None => Generator::init(frl.clone(), cfg.scale, g_seed)?,
    };
    let mut disc = Discriminator::init(disc_cfg.clone(), d_seed)?;
    let mut scorer = nmd.clone();
    scorer.params.freeze();
    if cfg.hr_patch() < scorer.config.patch {
        return Err(Error::Config(format!(
            "HR patch {} is smaller than the naturalness scorer patch {}",
            cfg.hr_patch(),
            scorer.config.patch
        )));
    }
    let mut adam_g = AdamState::new();
    let mut adam_d = AdamState::new();
    let baseline = pipe.baseline_psnr()?;
    let mut trace = Vec::new();
    let mut snapshot = (gen.params.clone(), disc.params.clone(), adam_g.clone(), adam_d.clone(), 0u64);
    let mut collapse_streak = 0u32;
    let mut collapse_warning = false;
    let use_natural = weights.lambda2 != 0.0;
    let use_adv = weights.lambda3 != 0.0;
    for step in 1..=cfg.steps {
        let (hr, lr) = pipe.batch(cfg.batch, &mut rng)?;
        let hr_batch = Image::batch(&hr)?;
        let step_lr = lr_schedule(cfg, step);

        // Generator graph first: its unclamped outputs double as the
        // detached fakes for the discriminator update.
        let mut tape_g = Tape::new(cfg.threads);
        let xg = tape_g.constant(Image::batch(&lr)?);
        let yg = tape_g.constant(hr_batch.clone());
        let sr = gen.forward(&mut tape_g, xg)?;
        let sr_images = Image::from_batch(tape_g.value(sr))?;
        let recon = recon_loss(&mut tape_g, sr, yg)?;
        let recon_v = tape_g.value(recon).item();

        // Discriminator step on [real | detached fake].
        let mut adv_d_v = 0.0;
        if use_adv {
            let mut tape_d = Tape::new(cfg.threads);
            let mut both = hr.clone();
            both.extend(sr_images.iter().cloned());
            let xd = tape_d.constant(Image::batch(&both)?);
            let logits = disc.forward(&mut tape_d, xd)?;
            let real = tape_d.slice_batch(logits, 0, cfg.batch)?;
            let fake = tape_d.slice_batch(logits, cfg.batch, 2 * cfg.batch)?;
            let (_, l_d) = ragan_losses(&mut tape_d, real, fake)?;
            adv_d_v = tape_d.value(l_d).item();
            let gap = (tape_d.value(real).mean() - tape_d.value(fake).mean()).abs();
            collapse_streak = if gap > COLLAPSE_GAP { collapse_streak + 1 } else { 0 };
            if collapse_streak >= COLLAPSE_STEPS {
                collapse_warning = true;
            }
            if !adv_d_v.is_finite() {
                return Ok(diverged_outcome(snapshot, gen, disc, trace, baseline, step));
            }
            let grads = tape_d.backward(l_d)?;
            let named = tape_d.param_grads(&grads);
            adam_step(&mut disc.params, &named, &mut adam_d, step_lr)?;
        }

        // Generator step on the weighted total, with the updated
        // discriminator and the scorer both frozen.
        let mut natural_v = 0.0;
        let mut adv_g_v = 0.0;
        let natural = if use_natural {
            let n = natural_loss(&mut tape_g, &scorer, sr)?;
            natural_v = tape_g.value(n).item();
            n
        } else {
            tape_g.constant(crate::tensor::Tensor::scalar(0.0))
        };
        let adv_g = if use_adv {
            let yreal = tape_g.constant(hr_batch.clone());
            let real_logits = disc.forward_frozen(&mut tape_g, yreal)?;
            let fake_logits = disc.forward_frozen(&mut tape_g, sr)?;
            let (l_g, _) = ragan_losses(&mut tape_g, real_logits, fake_logits)?;
            adv_g_v = tape_g.value(l_g).item();
            l_g
        } else {
            tape_g.constant(crate::tensor::Tensor::scalar(0.0))
        };
        let total = total_loss(&mut tape_g, recon, natural, adv_g, weights)?;
        let total_v = tape_g.value(total).item();
        if !total_v.is_finite() {
            return Ok(diverged_outcome(snapshot, gen, disc, trace, baseline, step));
        }
        let grads = tape_g.backward(total)?;
        let named = tape_g.param_grads(&grads);
        adam_step(&mut gen.params, &named, &mut adam_g, step_lr)?;

        if step % cfg.eval_every == 0 || step == cfg.steps {
            let (val_psnr, nmd_mean, plaus) = natsr_eval(&gen, &scorer, &pipe, cfg.threads)?;
            trace.push(NatsrTraceRow {
                step,
                recon: recon_v,
                natural: natural_v,
                adv_g: adv_g_v,
                adv_d: adv_d_v,
                val_psnr,
                nmd_mean,
                plausibility: plaus,
                collapse_warning,
            });
            snapshot = (gen.params.clone(), disc.params.clone(), adam_g.clone(), adam_d.clone(), step);
        }
    }
    Ok(NatsrOutcome {
        generator: gen,
        discriminator: disc,
        adam_g,
        adam_d,
        trace,
        baseline_psnr: baseline,
        diverged: None,
    })
}

type Snapshot = (crate::optim::ParamSet, crate::optim::ParamSet, AdamState, AdamState, u64);

fn diverged_outcome(
    snapshot: Snapshot,
    mut gen: Generator,
    mut disc: Discriminator,
    trace: Vec<NatsrTraceRow>,
    baseline: f64,
    step: u64,
) -> NatsrOutcome {
    let (gp, dp, adam_g, adam_d, good) = snapshot;
    gen.params = gp;
    disc.params = dp;
    NatsrOutcome {
        generator: gen,
        discriminator: disc,
        adam_g,
        adam_d,
        trace,
        baseline_psnr: baseline,
        diverged: Some(Divergence { at_step: step, restored_step: good }),
    }
}

fn natsr_eval(
    gen: &Generator,
    scorer: &NmdNet,
    pipe: &DataPipe,
    threads: usize,
) -> Result<(f64, f64, f64)> {
    let mut psnr_total = 0.0;
    let mut nmd_total = 0.0;
    let mut plaus_total = 0.0;
    for (hr, lr) in pipe.val_hr.iter().zip(&pipe.val_lr) {
        let sr = forward_sr(gen, lr, threads)?;
        psnr_total += psnr(&sr, hr, 1.0)?;
        nmd_total += nmd_score(scorer, &sr, threads)?;
        plaus_total += crate::eval::plausibility(&sr, lr, &pipe.spec)?;
    }
    let n = pipe.val_hr.len() as f64;
    Ok((psnr_total / n, nmd_total / n, plaus_total / n))
}
