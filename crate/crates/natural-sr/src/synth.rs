//! Synthetic off-manifold samples.
//!
//! Natural HR images sit on one side of a decision problem; this module
//! manufactures the other side. Blurry negatives interpolate between a
//! bicubic reconstruction and the original (`alpha` controls how close to
//! natural they sit). Noisy negatives inject Gaussian noise into the
//! highest-frequency row and column of each blockwise-DCT tile, so the
//! perturbation is invisible to the degradation operator but off-manifold
//! in the HR domain.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dct::DctLayout;
use crate::error::{Error, Result};
use crate::resample::{degrade, interpolate, lowpass, KernelKind, ResamplerSpec};
use crate::tensor::{Image, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ManifoldLabel {
    Natural,
    Blurry,
    Noisy,
}

impl ManifoldLabel {
    pub fn is_natural(self) -> bool {
        self == ManifoldLabel::Natural
    }
}

/// Where the injected DCT noise is allowed to live.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseBand {
    /// Exactly the masked coefficients (last row and column per tile).
    MaskBins,
    /// Masked coefficients, then projected onto the complement of the
    /// ideal low-pass band for the given scale. With an ideal kernel the
    /// degradation of such noise is identically zero, which makes
    /// membership exact instead of approximate.
    AboveCutoff(usize),
}

#[derive(Debug, Clone)]
pub struct BlurrySample {
    pub image: Image,
    pub alpha: f64,
}

#[derive(Debug, Clone)]
pub struct NoisySample {
    pub image: Image,
    pub sigma: f64,
    /// Fraction of pixels clipped when mapping back to [0, 1]. Anything
    /// above about 1% distorts the injected spectrum noticeably.
    pub clip_fraction: f64,
}

/// Blurry negative: `(1 - alpha) * interpolate(degrade(hr)) + alpha * hr`.
/// `alpha = 1` reproduces `hr` exactly; `alpha = 0` is the pure bicubic
/// reconstruction.
pub fn synth_blurry(hr: &Image, alpha: f64, spec: &ResamplerSpec) -> Result<BlurrySample> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha must be in [0, 1], got {}", alpha)));
    }
    let lr = degrade(hr, spec)?;
    let up = interpolate(&lr, spec)?;
    let data = up
        .data()
        .iter()
        .zip(hr.data())
        .map(|(&u, &h)| (1.0 - alpha) * u + alpha * h)
        .collect();
    let image = Image::from_vec(hr.height(), hr.width(), hr.channels(), data)?;
    Ok(BlurrySample { image, alpha })
}

/// Noisy negative: `hr` plus zero-mean Gaussian noise of standard
/// deviation `sigma` injected into the masked DCT coefficients of every
/// tile and channel, clipped back to [0, 1]. The pixel-domain noise level
/// is `sigma * sqrt(mask_len / block^2)` before clipping.
pub fn synth_noisy(
    hr: &Image,
    sigma: f64,
    layout: &DctLayout,
    band: NoiseBand,
    rng: &mut ChaCha8Rng,
) -> Result<NoisySample> {
    if sigma < 0.0 {
        return Err(Error::invalid(format!("sigma must be >= 0, got {}", sigma)));
    }
    let n = layout.block();
    if hr.height() % n != 0 || hr.width() % n != 0 {
        return Err(Error::shape(
            "synth_noisy",
            format!("{}x{} not divisible by block {}", hr.height(), hr.width(), n),
        ));
    }
    let mask = layout.last_row_col_mask();
    let mut coefs = Image::zeros(hr.height(), hr.width(), hr.channels());
    for ch in 0..hr.channels() {
        for by in (0..hr.height()).step_by(n) {
            for bx in (0..hr.width()).step_by(n) {
                for &(u, v) in &mask {
                    let z: f64 = rng.sample(StandardNormal);
                    *coefs.at_mut(by + u, bx + v, ch) = sigma * z;
                }
            }
        }
    }
    let mut noise = layout.inverse(&coefs)?;
    if let NoiseBand::AboveCutoff(scale) = band {
        let spec = ResamplerSpec::new(scale, KernelKind::Ideal)?;
        let low = lowpass(&noise, &spec)?;
        for (nv, lv) in noise.data_mut().iter_mut().zip(low.data()) {
            *nv -= lv;
        }
    }
    let mut clipped = 0usize;
    let data: Vec<f64> = hr
        .data()
        .iter()
        .zip(noise.data())
        .map(|(&h, &nv)| {
            let raw = h + nv;
            if !(0.0..=1.0).contains(&raw) {
                clipped += 1;
            }
            raw.clamp(0.0, 1.0)
        })
        .collect();
    let clip_fraction = clipped as f64 / data.len() as f64;
    let image = Image::from_vec(hr.height(), hr.width(), hr.channels(), data)?;
    Ok(NoisySample { image, sigma, clip_fraction })
}

/// LR-consistency of a candidate HR image: PSNR between
/// `degrade(candidate)` and the reference LR image, RGB domain, peak 1.
pub fn verify_membership(candidate: &Image, lr: &Image, spec: &ResamplerSpec) -> Result<f64> {
    if candidate.height() != lr.height() * spec.scale
        || candidate.width() != lr.width() * spec.scale
        || candidate.channels() != lr.channels()
    {
        return Err(Error::shape(
            "verify_membership",
            format!(
                "candidate {}x{}x{} is not lr {}x{}x{} times scale {}",
                candidate.height(),
                candidate.width(),
                candidate.channels(),
                lr.height(),
                lr.width(),
                lr.channels(),
                spec.scale
            ),
        ));
    }
    let lr_cand = degrade(candidate, spec)?;
    crate::eval::psnr(&lr_cand, lr, 1.0)
}

/// Random HR crops whose origins are multiples of `scale`, so the LR grid
/// of every patch aligns with the LR grid of its source image.
pub fn extract_patches(
    images: &[Image],
    patch: usize,
    scale: usize,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Image>> {
    if images.is_empty() {
        return Err(Error::invalid("extract_patches: empty image list"));
    }
    if patch % scale != 0 {
        return Err(Error::Config(format!(
            "patch {} not divisible by scale {}",
            patch, scale
        )));
    }
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let img = &images[rng.gen_range(0..images.len())];
        if img.height() < patch || img.width() < patch {
            return Err(Error::shape(
                "extract_patches",
                format!("image {}x{} smaller than patch {}", img.height(), img.width(), patch),
            ));
        }
        let max_y = (img.height() - patch) / scale;
        let max_x = (img.width() - patch) / scale;
        let y0 = rng.gen_range(0..=max_y) * scale;
        let x0 = rng.gen_range(0..=max_x) * scale;
        out.push(img.crop(y0, x0, patch, patch)?);
    }
    Ok(out)
}

/// One discriminator batch: the first half is natural patches (label
/// Natural), the second half splits between blurry and noisy negatives at
/// the current curriculum level, blurry first.
pub struct NmdBatch {
    pub x: Tensor,
    pub labels: Vec<ManifoldLabel>,
    pub naturals: usize,
}

pub fn make_nmd_batch(
    pool: &[Image],
    alpha: f64,
    sigma: f64,
    batch: usize,
    layout: &DctLayout,
    spec: &ResamplerSpec,
    rng: &mut ChaCha8Rng,
) -> Result<NmdBatch> {
    if batch == 0 || batch % 2 != 0 {
        return Err(Error::invalid(format!("batch must be even and positive, got {}", batch)));
    }
    if pool.is_empty() {
        return Err(Error::invalid("make_nmd_batch: empty patch pool"));
    }
    let naturals = batch / 2;
    let negatives = batch - naturals;
    let blurry = negatives.div_ceil(2);
    let noisy = negatives - blurry;
    let mut images = Vec::with_capacity(batch);
    let mut labels = Vec::with_capacity(batch);
    let pick = |rng: &mut ChaCha8Rng| pool[rng.gen_range(0..pool.len())].clone();
    for _ in 0..naturals {
        images.push(pick(rng));
        labels.push(ManifoldLabel::Natural);
    }
    for _ in 0..blurry {
        let hr = pick(rng);
        images.push(synth_blurry(&hr, alpha, spec)?.image);
        labels.push(ManifoldLabel::Blurry);
    }
    for _ in 0..noisy {
        let hr = pick(rng);
        images.push(synth_noisy(&hr, sigma, layout, NoiseBand::MaskBins, rng)?.image);
        labels.push(ManifoldLabel::Noisy);
    }
    Ok(NmdBatch { x: Image::batch(&images)?, labels, naturals })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::toy_images;
    use rand::SeedableRng;

    fn margin_image(h: usize, w: usize, seed: u64) -> Image {
        // Textured image compressed into [0.3, 0.7] so noise never clips.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = toy_images(1, h, w, &mut rng).remove(0);
        img.map(|v| 0.3 + 0.4 * v)
    }

    #[test]
    fn blurry_endpoints() {
        let spec = ResamplerSpec::bicubic(4).unwrap();
        let hr = margin_image(32, 32, 1);
        let at_one = synth_blurry(&hr, 1.0, &spec).unwrap();
        assert_eq!(at_one.image, hr);
        let at_zero = synth_blurry(&hr, 0.0, &spec).unwrap();
        let recon = interpolate(&degrade(&hr, &spec).unwrap(), &spec).unwrap();
        assert_eq!(at_zero.image, recon);
        assert!(synth_blurry(&hr, 1.2, &spec).is_err());
        assert!(synth_blurry(&hr, -0.1, &spec).is_err());
    }

    #[test]
    fn blurry_membership_is_exact_in_ideal_mode() {
        let spec = ResamplerSpec::ideal(4).unwrap();
        let hr = margin_image(64, 64, 2);
        let lr = degrade(&hr, &spec).unwrap();
        for alpha in [0.0, 0.3, 0.8] {
            let sample = synth_blurry(&hr, alpha, &spec).unwrap();
            let lr_a = degrade(&sample.image, &spec).unwrap();
            assert!(
                lr_a.max_abs_diff(&lr) < 1e-6,
                "alpha {}: {}",
                alpha,
                lr_a.max_abs_diff(&lr)
            );
            assert!(verify_membership(&sample.image, &lr, &spec).unwrap() >= 99.0);
        }
    }

    #[test]
    fn membership_of_the_original_hits_the_sentinel() {
        let spec = ResamplerSpec::bicubic(4).unwrap();
        let hr = margin_image(32, 32, 20);
        let lr = degrade(&hr, &spec).unwrap();
        assert_eq!(verify_membership(&hr, &lr, &spec).unwrap(), 99.0);
        assert!(verify_membership(&hr, &hr, &spec).is_err());
    }

    #[test]
    fn noisy_difference_lives_in_masked_bins() {
        let layout = DctLayout::new(8).unwrap();
        let hr = margin_image(32, 32, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = synth_noisy(&hr, 0.05, &layout, NoiseBand::MaskBins, &mut rng).unwrap();
        assert_eq!(s.clip_fraction, 0.0);
        let diff = Image::from_vec(
            32,
            32,
            3,
            s.image.data().iter().zip(hr.data()).map(|(a, b)| a - b).collect(),
        )
        .unwrap();
        let coefs = layout.forward(&diff).unwrap();
        let mask = layout.last_row_col_mask();
        for ch in 0..3 {
            for by in (0..32).step_by(8) {
                for bx in (0..32).step_by(8) {
                    for u in 0..8 {
                        for v in 0..8 {
                            if !mask.contains(&(u, v)) {
                                assert!(
                                    coefs.at(by + u, bx + v, ch).abs() < 1e-12,
                                    "unexpected energy at ({}, {})",
                                    u,
                                    v
                                );
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn noisy_pixel_std_matches_prediction() {
        let layout = DctLayout::new(8).unwrap();
        let hr = margin_image(64, 64, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let sigma = 0.05;
        let s = synth_noisy(&hr, sigma, &layout, NoiseBand::MaskBins, &mut rng).unwrap();
        let n = 64 * 64 * 3;
        let var: f64 = s
            .image
            .data()
            .iter()
            .zip(hr.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n as f64;
        let predicted = sigma * (15.0f64 / 64.0).sqrt();
        let measured = var.sqrt();
        assert!(
            (measured / predicted - 1.0).abs() < 0.05,
            "measured {} vs predicted {}",
            measured,
            predicted
        );
    }

    #[test]
    fn noisy_membership_exact_with_bandlimited_injection() {
        let layout = DctLayout::new(8).unwrap();
        let spec = ResamplerSpec::ideal(4).unwrap();
        let hr = margin_image(64, 64, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let s = synth_noisy(&hr, 0.1, &layout, NoiseBand::AboveCutoff(4), &mut rng).unwrap();
        assert_eq!(s.clip_fraction, 0.0, "clipping would break exactness");
        let lr_n = degrade(&s.image, &spec).unwrap();
        let lr = degrade(&hr, &spec).unwrap();
        assert!(lr_n.max_abs_diff(&lr) < 1e-6, "max err {}", lr_n.max_abs_diff(&lr));
    }

    #[test]
    fn clipping_is_tracked() {
        let layout = DctLayout::new(8).unwrap();
        let hr = Image::from_vec(8, 8, 1, vec![0.99; 64]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let s = synth_noisy(&hr, 0.5, &layout, NoiseBand::MaskBins, &mut rng).unwrap();
        assert!(s.clip_fraction > 0.0);
        assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn batch_composition_eight_is_four_two_two() {
        let layout = DctLayout::new(8).unwrap();
        let spec = ResamplerSpec::bicubic(4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let pool = toy_images(4, 32, 32, &mut rng);
        let b = make_nmd_batch(&pool, 0.5, 0.1, 8, &layout, &spec, &mut rng).unwrap();
        assert_eq!(b.x.shape(), &[8, 32, 32, 3]);
        assert_eq!(b.naturals, 4);
        let blurry = b.labels.iter().filter(|l| **l == ManifoldLabel::Blurry).count();
        let noisy = b.labels.iter().filter(|l| **l == ManifoldLabel::Noisy).count();
        assert_eq!((blurry, noisy), (2, 2));
        assert!(b.labels[..4].iter().all(|l| l.is_natural()));
        assert!(make_nmd_batch(&pool, 0.5, 0.1, 7, &layout, &spec, &mut rng).is_err());
    }

    #[test]
    fn patch_offsets_align_to_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let images = toy_images(2, 40, 40, &mut rng);
        let patches = extract_patches(&images, 16, 4, 10, &mut rng).unwrap();
        assert_eq!(patches.len(), 10);
        for p in &patches {
            assert_eq!((p.height(), p.width()), (16, 16));
        }
        assert!(extract_patches(&images, 18, 4, 1, &mut rng).is_err());
    }
}
