//! Natural-manifold discriminator: a small conv net that scores how
//! natural an HR patch looks, plus the curriculum that hardens its
//! negatives as accuracy rises.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dct::DctLayout;
use crate::error::{Error, Result};
use crate::graph::{NodeId, PadMode, Tape};
use crate::optim::{adam_step, AdamState, ParamSet};
use crate::resample::ResamplerSpec;
use crate::synth::{make_nmd_batch, synth_blurry, synth_noisy, NoiseBand};
use crate::tensor::{Image, Tensor};

pub const PRED_CLAMP: f64 = 1e-7;
pub const ALPHA_INIT: f64 = 0.5;
pub const ALPHA_STEP: f64 = 0.1;
pub const ALPHA_MAX: f64 = 0.8;
pub const SIGMA_INIT: f64 = 0.1;
pub const SIGMA_DECAY: f64 = 0.8;
/// Final noise level from fourteen 0.8x decays of 0.1.
pub const SIGMA_FLOOR: f64 = 0.0044;
pub const AVA_WINDOW: usize = 10;
pub const ACC_THRESHOLD: f64 = 0.95;

/// Conv stage widths and the input patch size. Stages are 3x3 convs with
/// ReLU; a 2x2 max-pool sits between consecutive stages; the head is a
/// 1x1 conv to one channel, global average pooling, and a sigmoid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NmdConfig {
    pub widths: Vec<usize>,
    pub patch: usize,
}

impl Default for NmdConfig {
    fn default() -> NmdConfig {
        NmdConfig { widths: vec![32, 64, 64, 128, 128], patch: 32 }
    }
}

impl NmdConfig {
    /// Small preset sized for CPU-bound test runs.
    pub fn desk() -> NmdConfig {
        NmdConfig { widths: vec![8, 16, 32], patch: 32 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() {
            return Err(Error::Config("nmd widths must not be empty".into()));
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(Error::Config("nmd widths must be positive".into()));
        }
        let pools = self.widths.len() - 1;
        let divisor = 1usize << pools;
        if self.patch % divisor != 0 || self.patch / divisor == 0 {
            return Err(Error::Config(format!(
                "patch {} collapses to zero spatial extent before the head \
                 ({} pools need a multiple of {})",
                self.patch, pools, divisor
            )));
        }
        Ok(())
    }

    /// Closed-form trainable parameter count.
    pub fn param_count(&self) -> usize {
        let mut total = 0;
        let mut cin = 3;
        for &w in &self.widths {
            total += 3 * 3 * cin * w + w;
            cin = w;
        }
        total + cin + 1
    }
}

/// He-normal conv weight, fan-in = kh*kw*cin.
pub(crate) fn he_conv(kh: usize, kw: usize, cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let std = (2.0 / (kh * kw * cin) as f64).sqrt();
    let data = (0..kh * kw * cin * cout)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::from_vec(&[kh, kw, cin, cout], data).unwrap()
}

#[derive(Debug, Clone)]
pub struct NmdNet {
    pub config: NmdConfig,
    pub params: ParamSet,
}

impl NmdNet {
    pub fn init(config: NmdConfig, seed: u64) -> Result<NmdNet> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut cin = 3;
        for (i, &w) in config.widths.iter().enumerate() {
            params.insert(&format!("stage{}.conv", i), he_conv(3, 3, cin, w, &mut rng), true);
            params.insert(&format!("stage{}.bias", i), Tensor::zeros(&[w]), true);
            cin = w;
        }
        params.insert("head.conv", he_conv(1, 1, cin, 1, &mut rng), true);
        params.insert("head.bias", Tensor::zeros(&[1]), true);
        Ok(NmdNet { config, params })
    }

    /// Scores a batch: output node has shape [b, 1, 1, 1] with values in
    /// (0, 1). Parameter leaves inherit their trainable flags, so a frozen
    /// set contributes no gradient entries.
    pub fn forward(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let mut cur = x;
        let last = self.config.widths.len() - 1;
        for i in 0..self.config.widths.len() {
            let wname = format!("stage{}.conv", i);
            let bname = format!("stage{}.bias", i);
            let w = self.param_node(tape, &wname)?;
            let b = self.param_node(tape, &bname)?;
            cur = tape.conv2d(cur, w, Some(b), 1, PadMode::Zero, Tape::same_pad(3, 3))?;
            cur = tape.relu(cur);
            if i != last {
                cur = tape.max_pool2(cur)?;
            }
        }
        let hw = self.param_node(tape, "head.conv")?;
        let hb = self.param_node(tape, "head.bias")?;
        cur = tape.conv2d(cur, hw, Some(hb), 1, PadMode::Zero, [0, 0, 0, 0])?;
        cur = tape.global_avg_pool(cur)?;
        Ok(tape.sigmoid(cur))
    }

    fn param_node(&self, tape: &mut Tape, name: &str) -> Result<NodeId> {
        let p = self.params.get(name)?;
        Ok(tape.param(name, p.value.clone(), p.trainable))
    }

    /// Plain forward pass on a stack of images; returns one score per image.
    pub fn score_batch(&self, images: &[Image], threads: usize) -> Result<Vec<f64>> {
        let mut tape = Tape::new(threads);
        let x = tape.var(Image::batch(images)?);
        let out = self.forward(&mut tape, x)?;
        Ok(tape.value(out).data().to_vec())
    }
}

/// Mean naturalness score of an image: a single forward pass when the
/// image matches the configured patch size, otherwise the mean over a
/// patch-sized tiling (edge tiles anchored to the far border).
pub fn nmd_score(net: &NmdNet, image: &Image, threads: usize) -> Result<f64> {
    let p = net.config.patch;
    if image.height() < p || image.width() < p {
        return Err(Error::shape(
            "nmd_score",
            format!("image {}x{} smaller than patch {}", image.height(), image.width(), p),
        ));
    }
    let mut tiles = Vec::new();
    for y0 in tile_origins(image.height(), p) {
        for x0 in tile_origins(image.width(), p) {
            tiles.push(image.crop(y0, x0, p, p)?);
        }
    }
    let scores = net.score_batch(&tiles, threads)?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

fn tile_origins(extent: usize, patch: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (0..=extent.saturating_sub(patch)).step_by(patch).collect();
    let last = extent - patch;
    if *out.last().unwrap() != last {
        out.push(last);
    }
    out
}

/// Binary cross entropy over a batch laid out naturals-first. `labels`
/// must be 1.0 for naturals, 0.0 for negatives, in that order. Returns
/// half the sum of the two one-sided mean log losses, which equals the
/// per-sample mean for balanced batches (the worked values: all-0.5
/// predictions give ln 2; a perfect split gives ~1e-7).
pub fn nmd_bce_loss(tape: &mut Tape, preds: NodeId, labels: &[f64]) -> Result<NodeId> {
    let batch = tape.value(preds).shape()[0];
    if labels.len() != batch {
        return Err(Error::shape(
            "nmd_bce_loss",
            format!("{} labels for batch {}", labels.len(), batch),
        ));
    }
    for &l in labels {
        if l != 0.0 && l != 1.0 {
            return Err(Error::invalid(format!("label must be 0 or 1, got {}", l)));
        }
    }
    let naturals = labels.iter().take_while(|&&l| l == 1.0).count();
    if labels[naturals..].iter().any(|&l| l == 1.0) {
        return Err(Error::invalid("batch must be ordered naturals first"));
    }
    if naturals == 0 || naturals == batch {
        return Err(Error::invalid("both classes must be present"));
    }
    let nat = tape.slice_batch(preds, 0, naturals)?;
    let neg = tape.slice_batch(preds, naturals, batch)?;
    let nat_c = tape.clamp(nat, PRED_CLAMP, 1.0 - PRED_CLAMP);
    let nat_ln = tape.ln(nat_c);
    let nat_mean = tape.mean_all(nat_ln);
    let one_minus = {
        let negated = tape.scale(neg, -1.0);
        tape.add_const(negated, 1.0)
    };
    let neg_c = tape.clamp(one_minus, PRED_CLAMP, 1.0 - PRED_CLAMP);
    let neg_ln = tape.ln(neg_c);
    let neg_mean = tape.mean_all(neg_ln);
    let sum = tape.add(nat_mean, neg_mean)?;
    Ok(tape.scale(sum, -0.5))
}

/// Scalar twin of [`nmd_bce_loss`] for validation bookkeeping.
pub fn bce_scalar(preds: &[f64], naturals: usize) -> Result<f64> {
    if naturals == 0 || naturals >= preds.len() {
        return Err(Error::invalid("both classes must be present"));
    }
    let clamp = |p: f64| p.clamp(PRED_CLAMP, 1.0 - PRED_CLAMP);
    let nat: f64 =
        preds[..naturals].iter().map(|&p| clamp(p).ln()).sum::<f64>() / naturals as f64;
    let neg: f64 = preds[naturals..].iter().map(|&p| clamp(1.0 - p).ln()).sum::<f64>()
        / (preds.len() - naturals) as f64;
    Ok(-0.5 * (nat + neg))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CurriculumEvents {
    pub alpha_updated: bool,
    pub sigma_updated: bool,
    /// True when an update side was skipped because its window was not
    /// full yet.
    pub partial_window: bool,
}

/// Rolling curriculum over the two negative generators. Each validation
/// round records one accuracy per negative type; once a ten-entry window
/// averages at or above 95%, that knob hardens and its window clears.
#[derive(Debug, Clone, PartialEq)]
pub struct CurriculumState {
    pub alpha: f64,
    pub sigma: f64,
    pub blurry_window: VecDeque<f64>,
    pub noisy_window: VecDeque<f64>,
    pub alpha_updates: u32,
    pub sigma_updates: u32,
}

impl Default for CurriculumState {
    fn default() -> CurriculumState {
        CurriculumState::new()
    }
}

impl CurriculumState {
    pub fn new() -> CurriculumState {
        CurriculumState {
            alpha: ALPHA_INIT,
            sigma: SIGMA_INIT,
            blurry_window: VecDeque::with_capacity(AVA_WINDOW),
            noisy_window: VecDeque::with_capacity(AVA_WINDOW),
            alpha_updates: 0,
            sigma_updates: 0,
        }
    }

    pub fn record(&mut self, blurry_acc: f64, noisy_acc: f64) {
        push_window(&mut self.blurry_window, blurry_acc);
        push_window(&mut self.noisy_window, noisy_acc);
    }

    /// Both knobs at their hardest: blend 0.8, noise at or below the floor.
    pub fn is_complete(&self) -> bool {
        self.alpha >= ALPHA_MAX && self.sigma <= SIGMA_FLOOR
    }
}

fn push_window(w: &mut VecDeque<f64>, v: f64) {
    if w.len() == AVA_WINDOW {
        w.pop_front();
    }
    w.push_back(v);
}

fn window_mean(w: &VecDeque<f64>) -> f64 {
    w.iter().sum::<f64>() / w.len() as f64
}

/// Applies the two update rules. A side with a partial window is left
/// alone and flagged; a side already at its endpoint never changes.
pub fn curriculum_update(state: &mut CurriculumState) -> CurriculumEvents {
    let mut ev = CurriculumEvents::default();
    if state.blurry_window.len() < AVA_WINDOW {
        ev.partial_window = true;
    } else if window_mean(&state.blurry_window) >= ACC_THRESHOLD && state.alpha < ALPHA_MAX {
        state.alpha = (state.alpha + ALPHA_STEP).min(ALPHA_MAX);
        // Snap to the endpoint so repeated float steps (0.5 + 3 x 0.1
        // lands just under 0.8) cannot buy an extra update.
        if state.alpha > ALPHA_MAX - 1e-9 {
            state.alpha = ALPHA_MAX;
        }
        state.blurry_window.clear();
        state.alpha_updates += 1;
        ev.alpha_updated = true;
    }
    if state.noisy_window.len() < AVA_WINDOW {
        ev.partial_window = true;
    } else if window_mean(&state.noisy_window) >= ACC_THRESHOLD && state.sigma > SIGMA_FLOOR {
        state.sigma *= SIGMA_DECAY;
        state.noisy_window.clear();
        state.sigma_updates += 1;
        ev.sigma_updated = true;
    }
    ev
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NmdTrainConfig {
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    /// Validation cadence in optimizer steps.
    pub val_every: u64,
    /// Images per class in each validation accuracy measurement.
    pub val_samples: usize,
    pub threads: usize,
}

impl Default for NmdTrainConfig {
    fn default() -> NmdTrainConfig {
        NmdTrainConfig { steps: 2000, batch: 8, lr: 1e-3, val_every: 50, val_samples: 8, threads: 1 }
    }
}

impl NmdTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be positive".into()));
        }
        if self.batch == 0 || self.batch % 2 != 0 {
            return Err(Error::Config(format!("batch must be even and positive, got {}", self.batch)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive and finite, got {}", self.lr)));
        }
        if self.val_every == 0 {
            return Err(Error::Config("val_every must be positive".into()));
        }
        if self.val_samples == 0 {
            return Err(Error::Config("val_samples must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct NmdTraceRow {
    pub step: u64,
    pub loss: f64,
    pub alpha: f64,
    pub sigma: f64,
    pub blurry_acc: f64,
    pub noisy_acc: f64,
    pub alpha_updated: bool,
    pub sigma_updated: bool,
}

pub fn trace_csv(rows: &[NmdTraceRow]) -> String {
    let mut out = String::from("step,loss,alpha,sigma,blurry_acc,noisy_acc,alpha_updated,sigma_updated\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.6},{:.4},{:.6},{:.4},{:.4},{},{}\n",
            r.step, r.loss, r.alpha, r.sigma, r.blurry_acc, r.noisy_acc, r.alpha_updated as u8,
            r.sigma_updated as u8
        ));
    }
    out
}

pub struct NmdTrainOutcome {
    pub net: NmdNet,
    pub curriculum: CurriculumState,
    pub adam: AdamState,
    pub trace: Vec<NmdTraceRow>,
    pub steps_run: u64,
    pub final_loss: f64,
}

/// Trains the discriminator on a patch pool: ADAM on the BCE over
/// half-natural batches, negatives split between the two generators at
/// the curriculum's current difficulty. Validation accuracy is measured
/// per negative type every `val_every` steps and drives the curriculum.
/// Stops early when the curriculum is complete.
pub fn train_nmd(
    pool: &[Image],
    config: &NmdConfig,
    tcfg: &NmdTrainConfig,
    spec: &ResamplerSpec,
    seed: u64,
) -> Result<NmdTrainOutcome> {
    config.validate()?;
    tcfg.validate()?;
    if pool.len() < 5 {
        return Err(Error::invalid(format!(
            "patch pool of {} is too small for a held-out validation split",
            pool.len()
        )));
    }
    for p in pool {
        if p.height() != config.patch || p.width() != config.patch {
            return Err(Error::shape(
                "train_nmd",
                format!("pool patch {}x{} does not match config patch {}", p.height(), p.width(), config.patch),
            ));
        }
    }
    let val_len = (pool.len() / 5).max(1);
    let (val_pool, train_pool) = pool.split_at(val_len);
    let layout = DctLayout::new(8)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = NmdNet::init(config.clone(), rng.gen())?;
    let mut adam = AdamState::new();
    let mut curriculum = CurriculumState::new();
    let mut trace = Vec::new();
    let mut final_loss = f64::NAN;
    let mut steps_run = 0;
    for step in 1..=tcfg.steps {
        let batch = make_nmd_batch(
            train_pool,
            curriculum.alpha,
            curriculum.sigma,
            tcfg.batch,
            &layout,
            spec,
            &mut rng,
        )?;
        let labels: Vec<f64> =
            batch.labels.iter().map(|l| if l.is_natural() { 1.0 } else { 0.0 }).collect();
        let mut tape = Tape::new(tcfg.threads);
        let x = tape.var(batch.x);
        let preds = net.forward(&mut tape, x)?;
        let loss = nmd_bce_loss(&mut tape, preds, &labels)?;
        let loss_value = tape.value(loss).item();
        if !loss_value.is_finite() {
            return Err(Error::Diverged { step, last_good_step: step.saturating_sub(1) });
        }
        let grads = tape.backward(loss)?;
        let named = tape.param_grads(&grads);
        adam_step(&mut net.params, &named, &mut adam, tcfg.lr)?;
        final_loss = loss_value;
        steps_run = step;
        if step % tcfg.val_every == 0 {
            let blurry_acc = validate_accuracy(&net, val_pool, &curriculum, false, &layout, spec, tcfg, &mut rng)?;
            let noisy_acc = validate_accuracy(&net, val_pool, &curriculum, true, &layout, spec, tcfg, &mut rng)?;
            curriculum.record(blurry_acc, noisy_acc);
            let ev = curriculum_update(&mut curriculum);
            trace.push(NmdTraceRow {
                step,
                loss: loss_value,
                alpha: curriculum.alpha,
                sigma: curriculum.sigma,
                blurry_acc,
                noisy_acc,
                alpha_updated: ev.alpha_updated,
                sigma_updated: ev.sigma_updated,
            });
            if curriculum.is_complete() {
                break;
            }
        }
    }
    Ok(NmdTrainOutcome { net, curriculum, adam, trace, steps_run, final_loss })
}

/// Classification accuracy on one negative type: naturals must score
/// above 1/2, negatives below.
#[allow(clippy::too_many_arguments)]
fn validate_accuracy(
    net: &NmdNet,
    val_pool: &[Image],
    curriculum: &CurriculumState,
    noisy: bool,
    layout: &DctLayout,
    spec: &ResamplerSpec,
    tcfg: &NmdTrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let n = tcfg.val_samples;
    let mut images = Vec::with_capacity(2 * n);
    for _ in 0..n {
        images.push(val_pool[rng.gen_range(0..val_pool.len())].clone());
    }
    for _ in 0..n {
        let hr = &val_pool[rng.gen_range(0..val_pool.len())];
        let img = if noisy {
            synth_noisy(hr, curriculum.sigma, layout, NoiseBand::MaskBins, rng)?.image
        } else {
            synth_blurry(hr, curriculum.alpha, spec)?.image
        };
        images.push(img);
    }
    let scores = net.score_batch(&images, tcfg.threads)?;
    let mut correct = 0usize;
    for (i, &s) in scores.iter().enumerate() {
        let natural = i < n;
        if (natural && s > 0.5) || (!natural && s < 0.5) {
            correct += 1;
        }
    }
    Ok(correct as f64 / scores.len() as f64)
}
