//! SR generator (dense blocks inside a fractal skip topology) and the
//! spectrally normalized GAN discriminator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{NodeId, PadMode, Tape};
use crate::nmd::he_conv;
use crate::optim::ParamSet;
use crate::tensor::{Image, Tensor};

/// Dense block: `convs` 3x3 convolutions, each fed the concatenation of
/// the block input and every previous conv output, fused back to the
/// feature width by a 1x1 conv and added to the input under a scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RdBlockConfig {
    pub convs: usize,
    pub growth: usize,
    /// Output width of the 1x1 fusion conv. Must equal the surrounding
    /// feature width; `None` means "match it".
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fusion_width: Option<usize>,
    pub residual_scale: f64,
}

impl Default for RdBlockConfig {
    fn default() -> RdBlockConfig {
        RdBlockConfig { convs: 4, growth: 32, fusion_width: None, residual_scale: 0.1 }
    }
}

/// Generator shape: feature width, fractal depth (2^depth blocks), and
/// the block recipe. The upsampler is one (conv, depth-to-space) stage
/// per factor of two in the target scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrlConfig {
    pub features: usize,
    pub depth: usize,
    pub block: RdBlockConfig,
}

impl Default for FrlConfig {
    fn default() -> FrlConfig {
        FrlConfig { features: 64, depth: 3, block: RdBlockConfig::default() }
    }
}

impl FrlConfig {
    /// Small preset sized for CPU-bound test runs.
    pub fn desk() -> FrlConfig {
        FrlConfig { features: 32, depth: 2, block: RdBlockConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.features == 0 {
            return Err(Error::Config("features must be positive".into()));
        }
        if self.depth > 6 {
            return Err(Error::Config(format!(
                "depth {} would unroll {} blocks; the cap is 6",
                self.depth,
                1usize << self.depth
            )));
        }
        if self.block.convs == 0 || self.block.growth == 0 {
            return Err(Error::Config("block convs and growth must be positive".into()));
        }
        if let Some(fw) = self.block.fusion_width {
            if fw != self.features {
                return Err(Error::Config(format!(
                    "fusion width {} must equal feature width {}",
                    fw, self.features
                )));
            }
        }
        if !(self.block.residual_scale.is_finite() && self.block.residual_scale >= 0.0) {
            return Err(Error::Config("residual_scale must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn block_count(&self) -> usize {
        1usize << self.depth
    }
}

#[derive(Debug, Clone)]
pub struct Generator {
    pub config: FrlConfig,
    pub scale: usize,
    pub params: ParamSet,
}

fn upsampler_stages(scale: usize) -> Result<usize> {
    match scale {
        2 => Ok(1),
        4 => Ok(2),
        s => Err(Error::Config(format!("scale must be 2 or 4, got {}", s))),
    }
}

impl Generator {
    pub fn init(config: FrlConfig, scale: usize, seed: u64) -> Result<Generator> {
        config.validate()?;
        let stages = upsampler_stages(scale)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let f = config.features;
        params.insert("head.conv", he_conv(3, 3, 3, f, &mut rng), true);
        params.insert("head.bias", Tensor::zeros(&[f]), true);
        for b in 0..config.block_count() {
            for k in 1..=config.block.convs {
                let cin = f + (k - 1) * config.block.growth;
                params.insert(
                    &format!("block{}.conv{}", b, k),
                    he_conv(3, 3, cin, config.block.growth, &mut rng),
                    true,
                );
                params.insert(
                    &format!("block{}.conv{}.bias", b, k),
                    Tensor::zeros(&[config.block.growth]),
                    true,
                );
            }
            let fused_in = f + config.block.convs * config.block.growth;
            params.insert(&format!("block{}.fuse", b), he_conv(1, 1, fused_in, f, &mut rng), true);
            params.insert(&format!("block{}.fuse.bias", b), Tensor::zeros(&[f]), true);
        }
        for j in 0..stages {
            params.insert(&format!("up{}.conv", j), he_conv(3, 3, f, 4 * f, &mut rng), true);
            params.insert(&format!("up{}.bias", j), Tensor::zeros(&[4 * f]), true);
        }
        params.insert("out.conv", he_conv(3, 3, f, 3, &mut rng), true);
        params.insert("out.bias", Tensor::zeros(&[3]), true);
        Ok(Generator { config, scale, params })
    }

    fn param_node(&self, tape: &mut Tape, name: &str) -> Result<NodeId> {
        let p = self.params.get(name)?;
        Ok(tape.param(name, p.value.clone(), p.trainable))
    }

    fn conv(
        &self,
        tape: &mut Tape,
        x: NodeId,
        wname: &str,
        bname: &str,
        k: usize,
    ) -> Result<NodeId> {
        let w = self.param_node(tape, wname)?;
        let b = self.param_node(tape, bname)?;
        tape.conv2d(x, w, Some(b), 1, PadMode::Zero, Tape::same_pad(k, k))
    }

    /// One dense block: output = x + scale * fuse([x, c1, ..., cn]).
    pub fn rdblock_forward(&self, tape: &mut Tape, x: NodeId, idx: usize) -> Result<NodeId> {
        let mut features = vec![x];
        for k in 1..=self.config.block.convs {
            let cat = tape.concat_channels(&features)?;
            let conv = self.conv(
                tape,
                cat,
                &format!("block{}.conv{}", idx, k),
                &format!("block{}.conv{}.bias", idx, k),
                3,
            )?;
            features.push(tape.relu(conv));
        }
        let cat = tape.concat_channels(&features)?;
        let fused = self.conv(
            tape,
            cat,
            &format!("block{}.fuse", idx),
            &format!("block{}.fuse.bias", idx),
            1,
        )?;
        let scaled = tape.scale(fused, self.config.block.residual_scale);
        tape.add(x, scaled)
    }

    /// The fractal unit: U(0) is a dense block; U(k) wraps two chained
    /// copies of U(k-1) in a skip, consuming distinct blocks in order.
    fn unit(&self, tape: &mut Tape, x: NodeId, depth: usize, next: &mut usize) -> Result<NodeId> {
        if depth == 0 {
            let idx = *next;
            *next += 1;
            return self.rdblock_forward(tape, x, idx);
        }
        let first = self.unit(tape, x, depth - 1, next)?;
        let second = self.unit(tape, first, depth - 1, next)?;
        tape.add(x, second)
    }

    /// Unclamped SR forward pass on an LR batch.
    pub fn forward(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let f = self.conv(tape, x, "head.conv", "head.bias", 3)?;
        let mut next = 0;
        let body = self.unit(tape, f, self.config.depth, &mut next)?;
        debug_assert_eq!(next, self.config.block_count());
        let g = tape.add(f, body)?;
        let mut cur = g;
        for j in 0..upsampler_stages(self.scale)? {
            cur = self.conv(tape, cur, &format!("up{}.conv", j), &format!("up{}.bias", j), 3)?;
            cur = tape.depth_to_space(cur, 2)?;
        }
        self.conv(tape, cur, "out.conv", "out.bias", 3)
    }
}

/// Inference entry point: batches a single LR image through the
/// generator and clamps to [0, 1] at the output boundary.
pub fn forward_sr(gen: &Generator, lr: &Image, threads: usize) -> Result<Image> {
    let mut tape = Tape::new(threads);
    let x = tape.var(Image::batch(std::slice::from_ref(lr))?);
    let out = gen.forward(&mut tape, x)?;
    let imgs = Image::from_batch(tape.value(out))?;
    Ok(imgs.into_iter().next().unwrap().clamp01())
}

/// Discriminator shape: stride-2 3x3 conv stages (no pooling), spectral
/// normalization on every weight, and an unbounded scalar logit head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GanDiscConfig {
    pub widths: Vec<usize>,
}

impl Default for GanDiscConfig {
    fn default() -> GanDiscConfig {
        GanDiscConfig { widths: vec![32, 64, 64, 128, 128] }
    }
}

impl GanDiscConfig {
    pub fn desk() -> GanDiscConfig {
        GanDiscConfig { widths: vec![8, 16, 32] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.iter().any(|&w| w == 0) {
            return Err(Error::Config("discriminator widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Discriminator {
    pub config: GanDiscConfig,
    pub params: ParamSet,
}

impl Discriminator {
    pub fn init(config: GanDiscConfig, seed: u64) -> Result<Discriminator> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut cin = 3;
        for (i, &w) in config.widths.iter().enumerate() {
            params.insert(&format!("stage{}.conv", i), he_conv(3, 3, cin, w, &mut rng), true);
            params.insert(&format!("stage{}.bias", i), Tensor::zeros(&[w]), true);
            params.insert_state(&format!("stage{}.conv.sn_u", i), init_u(w, &mut rng));
            cin = w;
        }
        params.insert("head.conv", he_conv(1, 1, cin, 1, &mut rng), true);
        params.insert("head.bias", Tensor::zeros(&[1]), true);
        params.insert_state("head.conv.sn_u", init_u(1, &mut rng));
        Ok(Discriminator { config, params })
    }

    /// Spectrally normalized conv: one power iteration updates the
    /// persistent `u` state so repeated forwards converge on the top
    /// singular direction.
    fn sn_conv(
        &mut self,
        tape: &mut Tape,
        x: NodeId,
        name: &str,
        stride: usize,
        pad: crate::graph::PadSpec,
        persist: bool,
    ) -> Result<NodeId> {
        let wname = format!("{}.conv", name);
        let bname = if name == "head" { "head.bias".to_string() } else { format!("{}.bias", name) };
        let uname = format!("{}.conv.sn_u", name);
        let p = self.params.get(&wname)?;
        let trainable = p.trainable;
        let w = tape.param(&wname, p.value.clone(), trainable);
        let mut u = self.params.value(&uname)?.data().to_vec();
        let sn = tape.spectral_norm(w, &mut u, 1)?;
        if persist {
            let ulen = u.len();
            self.params.insert_state(&uname, Tensor::from_vec(&[ulen], u)?);
        }
        let b = self.param_node(tape, &bname)?;
        let padded = if pad == [0, 0, 0, 0] { x } else { tape.pad(x, PadMode::Zero, pad)? };
        let conv = tape.conv2d_valid(padded, sn, stride)?;
        tape.bias_add(conv, b)
    }

    fn param_node(&self, tape: &mut Tape, name: &str) -> Result<NodeId> {
        let p = self.params.get(name)?;
        Ok(tape.param(name, p.value.clone(), p.trainable))
    }

    /// Unbounded logit per image, shape [b, 1, 1, 1]. The first stage
    /// keeps full resolution; later stages downsample by stride 2.
    pub fn forward(&mut self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        self.forward_impl(tape, x, true)
    }

    /// Forward pass for use inside another network's update: weights
    /// enter as frozen leaves (no gradient entries) and the power
    /// iteration runs on a scratch copy of `u`, leaving state untouched.
    pub fn forward_frozen(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let mut scratch = self.clone();
        scratch.params.freeze();
        scratch.forward_impl(tape, x, false)
    }

    fn forward_impl(&mut self, tape: &mut Tape, x: NodeId, persist: bool) -> Result<NodeId> {
        let mut cur = x;
        for i in 0..self.config.widths.len() {
            let stride = if i == 0 { 1 } else { 2 };
            cur = self.sn_conv(tape, cur, &format!("stage{}", i), stride, Tape::same_pad(3, 3), persist)?;
            cur = tape.relu(cur);
        }
        cur = self.sn_conv(tape, cur, "head", 1, [0, 0, 0, 0], persist)?;
        tape.global_avg_pool(cur)
    }
}

fn init_u(len: usize, rng: &mut ChaCha8Rng) -> Tensor {
    use rand_distr::StandardNormal;
    use rand::Rng;
    let mut v: Vec<f64> = (0..len).map(|_| rng.sample(StandardNormal)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    for x in &mut v {
        *x /= norm;
    }
    Tensor::from_vec(&[len], v).unwrap()
}
