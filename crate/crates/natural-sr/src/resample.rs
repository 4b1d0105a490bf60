//! Resampling operators that tie the HR and LR grids together.
//!
//! The degradation model is `lr = downsample(lowpass(hr))`: a low-pass
//! filter followed by decimation that keeps sample 0 of every block of `s`.
//! Interpolation is the reverse path, `lowpass(upsample_zero(lr)) * s`,
//! realized in polyphase form. Two kernels are supported:
//!
//! * `Bicubic` - Keys cubic convolution (a = -0.5), widened by `s` on the
//!   degrade path so it acts as an anti-alias filter with cutoff `pi/s`.
//!   Boundaries reflect without repeating the edge sample.
//! * `Ideal` - DFT-implemented brick wall at `pi/s` (periodic boundary).
//!   Frequency bins strictly below the cutoff pass, everything at or above
//!   it is zeroed, which makes the filter an exact projection: `h(h(x)) =
//!   h(x)` and `degrade(interpolate(lr)) = lr` for any band-limited `lr`.
//!   This mode exists so manifold-membership derivations can be tested
//!   exactly; `Bicubic` is what training uses.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::reflect_index;
use crate::tensor::Image;

/// Keys cubic convolution kernel with a = -0.5. Support is (-2, 2); exact
/// zero at nonzero integers, one at the origin.
pub fn keys(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        (A + 2.0) * x * x * x - (A + 3.0) * x * x + 1.0
    } else if x < 2.0 {
        A * x * x * x - 5.0 * A * x * x + 8.0 * A * x - 4.0 * A
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    Bicubic,
    Ideal,
}

impl std::fmt::Display for KernelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            KernelKind::Bicubic => write!(f, "bicubic"),
            KernelKind::Ideal => write!(f, "ideal"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResamplerSpec {
    pub scale: usize,
    pub kernel: KernelKind,
}

impl ResamplerSpec {
    pub fn new(scale: usize, kernel: KernelKind) -> Result<ResamplerSpec> {
        if scale != 2 && scale != 4 {
            return Err(Error::Config(format!("scale must be 2 or 4, got {}", scale)));
        }
        Ok(ResamplerSpec { scale, kernel })
    }

    pub fn bicubic(scale: usize) -> Result<ResamplerSpec> {
        ResamplerSpec::new(scale, KernelKind::Bicubic)
    }

    pub fn ideal(scale: usize) -> Result<ResamplerSpec> {
        ResamplerSpec::new(scale, KernelKind::Ideal)
    }
}

/// Keys taps organized for polyphase use.
///
/// `phases[p]` holds the four interpolation taps applied to LR samples
/// `q+2, q+1, q, q-1` when producing HR sample `s*q + p`; each phase sums
/// to one. `anti_alias` is the degrade-path filter `keys(j/s)/s` for
/// `j in [-(2s-1), 2s-1]`, normalized to unit sum.
#[derive(Debug, Clone)]
pub struct PolyphaseKernel {
    pub scale: usize,
    pub phases: Vec<Vec<f64>>,
    pub anti_alias: Vec<f64>,
}

pub fn make_kernel(scale: usize) -> Result<PolyphaseKernel> {
    if scale != 2 && scale != 4 {
        return Err(Error::Config(format!("scale must be 2 or 4, got {}", scale)));
    }
    let s = scale as f64;
    let mut phases = Vec::with_capacity(scale);
    for p in 0..scale {
        let frac = p as f64 / s;
        let mut taps: Vec<f64> = (-2..=1).map(|t| keys(t as f64 + frac)).collect();
        let sum: f64 = taps.iter().sum();
        for t in taps.iter_mut() {
            *t /= sum;
        }
        phases.push(taps);
    }
    let half = 2 * scale - 1;
    let mut anti_alias: Vec<f64> =
        (-(half as isize)..=half as isize).map(|j| keys(j as f64 / s)).collect();
    let sum: f64 = anti_alias.iter().sum();
    for t in anti_alias.iter_mut() {
        *t /= sum;
    }
    Ok(PolyphaseKernel { scale, phases, anti_alias })
}

// ── Axis helpers ────────────────────────────────────────────────────────

/// Symmetric FIR along a 1-D signal with reflect boundary. `taps` has odd
/// length; its center aligns with the output sample.
fn fir_reflect(src: &[f64], taps: &[f64]) -> Vec<f64> {
    let n = src.len();
    let half = taps.len() / 2;
    assert!(half < n, "signal of {} too short for {} taps", n, taps.len());
    let mut out = vec![0.0; n];
    for (i, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (j, t) in taps.iter().enumerate() {
            let src_idx = reflect_index(i as isize + j as isize - half as isize, n);
            acc += t * src[src_idx];
        }
        *o = acc;
    }
    out
}

/// Polyphase interpolation along a 1-D signal: length n -> n*s.
fn interp_axis(src: &[f64], k: &PolyphaseKernel) -> Vec<f64> {
    let n = src.len();
    let s = k.scale;
    let mut out = vec![0.0; n * s];
    for q in 0..n {
        for (p, taps) in k.phases.iter().enumerate() {
            let mut acc = 0.0;
            for (ti, t) in taps.iter().enumerate() {
                // Tap ti multiplies lr[q - (ti - 2)] = lr[q + 2 - ti].
                let src_idx = reflect_index(q as isize + 2 - ti as isize, n);
                acc += t * src[src_idx];
            }
            out[q * s + p] = acc;
        }
    }
    out
}

/// Brick-wall low-pass along a 1-D signal: DFT bins with frequency index
/// at or above n/(2s) are zeroed; strictly lower bins pass untouched.
fn ideal_axis(src: &[f64], scale: usize) -> Vec<f64> {
    let n = src.len();
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let mut buf: Vec<Complex<f64>> = src.iter().map(|&v| Complex::new(v, 0.0)).collect();
    fwd.process(&mut buf);
    for (kk, b) in buf.iter_mut().enumerate() {
        let freq = kk.min(n - kk);
        if 2 * scale * freq >= n {
            *b = Complex::new(0.0, 0.0);
        }
    }
    inv.process(&mut buf);
    buf.iter().map(|c| c.re / n as f64).collect()
}

fn map_rows_then_cols(
    img: &Image,
    row_len_out: usize,
    col_len_out: usize,
    f: &dyn Fn(&[f64]) -> Vec<f64>,
) -> Image {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    // Rows first.
    let mut mid = Image::zeros(h, row_len_out, c);
    let mut scratch = vec![0.0; w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                scratch[x] = img.at(y, x, ch);
            }
            let row = f(&scratch);
            debug_assert_eq!(row.len(), row_len_out);
            for (x, v) in row.iter().enumerate() {
                *mid.at_mut(y, x, ch) = *v;
            }
        }
    }
    // Then columns.
    let mut out = Image::zeros(col_len_out, row_len_out, c);
    let mut scratch = vec![0.0; h];
    for ch in 0..c {
        for x in 0..row_len_out {
            for y in 0..h {
                scratch[y] = mid.at(y, x, ch);
            }
            let col = f(&scratch);
            debug_assert_eq!(col.len(), col_len_out);
            for (y, v) in col.iter().enumerate() {
                *out.at_mut(y, x, ch) = *v;
            }
        }
    }
    out
}

// ── Operators ───────────────────────────────────────────────────────────

/// Low-pass filters the image in place (same extents): Keys anti-alias FIR
/// in bicubic mode, brick wall in ideal mode.
pub fn lowpass(img: &Image, spec: &ResamplerSpec) -> Result<Image> {
    match spec.kernel {
        KernelKind::Bicubic => {
            let k = make_kernel(spec.scale)?;
            let half = k.anti_alias.len() / 2;
            if half >= img.height() || half >= img.width() {
                return Err(Error::shape(
                    "lowpass",
                    format!(
                        "{}x{} too small for {}-tap filter",
                        img.height(),
                        img.width(),
                        k.anti_alias.len()
                    ),
                ));
            }
            Ok(map_rows_then_cols(img, img.width(), img.height(), &|s| {
                fir_reflect(s, &k.anti_alias)
            }))
        }
        KernelKind::Ideal => Ok(map_rows_then_cols(img, img.width(), img.height(), &|s| {
            ideal_axis(s, spec.scale)
        })),
    }
}

/// Keeps sample 0 of every block of `s` along both axes. Extents must be
/// divisible by `s`.
pub fn downsample(img: &Image, scale: usize) -> Result<Image> {
    if scale == 0 || img.height() % scale != 0 || img.width() % scale != 0 {
        return Err(Error::shape(
            "downsample",
            format!("{}x{} not divisible by {}", img.height(), img.width(), scale),
        ));
    }
    let (oh, ow, c) = (img.height() / scale, img.width() / scale, img.channels());
    let mut out = Image::zeros(oh, ow, c);
    for y in 0..oh {
        for x in 0..ow {
            for ch in 0..c {
                *out.at_mut(y, x, ch) = img.at(y * scale, x * scale, ch);
            }
        }
    }
    Ok(out)
}

/// Places each sample at index `s*i`, zeros elsewhere.
pub fn upsample_zero(img: &Image, scale: usize) -> Image {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let mut out = Image::zeros(h * scale, w * scale, c);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                *out.at_mut(y * scale, x * scale, ch) = img.at(y, x, ch);
            }
        }
    }
    out
}

/// `lowpass(upsample_zero(lr))` with per-axis gain `s`. In bicubic mode the
/// HR samples that land on the LR grid reproduce the LR values exactly.
pub fn interpolate(lr: &Image, spec: &ResamplerSpec) -> Result<Image> {
    match spec.kernel {
        KernelKind::Bicubic => {
            let k = make_kernel(spec.scale)?;
            if lr.height() < 3 || lr.width() < 3 {
                return Err(Error::shape(
                    "interpolate",
                    format!("{}x{} too small for cubic support", lr.height(), lr.width()),
                ));
            }
            Ok(map_rows_then_cols(
                lr,
                lr.width() * spec.scale,
                lr.height() * spec.scale,
                &|s| interp_axis(s, &k),
            ))
        }
        KernelKind::Ideal => {
            let up = upsample_zero(lr, spec.scale);
            let gain = spec.scale as f64;
            let filtered = map_rows_then_cols(&up, up.width(), up.height(), &|s| {
                let mut v = ideal_axis(s, spec.scale);
                for x in v.iter_mut() {
                    *x *= gain;
                }
                v
            });
            Ok(filtered)
        }
    }
}

/// The canonical degradation `lr = downsample(lowpass(hr))`. Every LR
/// image used downstream comes from this operator.
pub fn degrade(hr: &Image, spec: &ResamplerSpec) -> Result<Image> {
    if hr.height() % spec.scale != 0 || hr.width() % spec.scale != 0 {
        return Err(Error::shape(
            "degrade",
            format!(
                "{}x{} not divisible by scale {}",
                hr.height(),
                hr.width(),
                spec.scale
            ),
        ));
    }
    let filtered = lowpass(hr, spec)?;
    downsample(&filtered, spec.scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, c: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..h * w * c).map(|_| rng.gen_range(0.0..1.0)).collect();
        Image::from_vec(h, w, c, data).unwrap()
    }

    #[test]
    fn keys_closed_form() {
        assert_eq!(keys(0.0), 1.0);
        assert_eq!(keys(1.0), 0.0);
        assert_eq!(keys(2.0), 0.0);
        assert_eq!(keys(-1.0), 0.0);
        // Hand-evaluated polynomial values.
        assert!((keys(0.25) - 0.8671875).abs() < 1e-15);
        assert!((keys(0.5) - 0.5625).abs() < 1e-15);
        assert!((keys(0.75) - 0.2265625).abs() < 1e-15);
        assert!((keys(1.25) - -0.0703125).abs() < 1e-15);
        assert!((keys(1.5) - -0.0625).abs() < 1e-15);
        assert!((keys(1.75) - -0.0234375).abs() < 1e-15);
    }

    #[test]
    fn kernel_phase_zero_is_identity_tap() {
        for scale in [2, 4] {
            let k = make_kernel(scale).unwrap();
            assert_eq!(k.phases[0], vec![0.0, 0.0, 1.0, 0.0]);
        }
    }

    #[test]
    fn kernel_phases_match_closed_form_and_sum_to_one() {
        let k = make_kernel(4).unwrap();
        for (p, taps) in k.phases.iter().enumerate() {
            let frac = p as f64 / 4.0;
            for (ti, t) in taps.iter().enumerate() {
                let expect = keys(ti as f64 - 2.0 + frac);
                assert!((t - expect).abs() < 1e-12, "phase {} tap {}", p, ti);
            }
            let sum: f64 = taps.iter().sum();
            assert!((sum - 1.0).abs() < 1e-15);
        }
        let aa_sum: f64 = k.anti_alias.iter().sum();
        assert!((aa_sum - 1.0).abs() < 1e-15);
        assert_eq!(k.anti_alias.len(), 15);
        // Symmetry of the anti-alias taps.
        for j in 0..k.anti_alias.len() / 2 {
            assert_eq!(k.anti_alias[j], k.anti_alias[k.anti_alias.len() - 1 - j]);
        }
    }

    #[test]
    fn make_kernel_rejects_unsupported_scale() {
        assert!(make_kernel(3).is_err());
        assert!(make_kernel(0).is_err());
    }

    #[test]
    fn constant_preservation() {
        let img = Image::from_vec(16, 16, 1, vec![0.37; 256]).unwrap();
        for spec in [ResamplerSpec::bicubic(4).unwrap(), ResamplerSpec::ideal(4).unwrap()] {
            let lp = lowpass(&img, &spec).unwrap();
            assert!(lp.max_abs_diff(&img) < 1e-12, "{:?}", spec.kernel);
            let up = interpolate(&img, &spec).unwrap();
            let flat = Image::from_vec(64, 64, 1, vec![0.37; 64 * 64]).unwrap();
            assert!(up.max_abs_diff(&flat) < 1e-12, "{:?}", spec.kernel);
            let down = degrade(&img, &spec).unwrap();
            let small = Image::from_vec(4, 4, 1, vec![0.37; 16]).unwrap();
            assert!(down.max_abs_diff(&small) < 1e-12, "{:?}", spec.kernel);
        }
    }

    #[test]
    fn degrade_is_linear() {
        let spec = ResamplerSpec::bicubic(4).unwrap();
        let a = random_image(16, 16, 2, 1);
        let b = random_image(16, 16, 2, 2);
        let combo = Image::from_vec(
            16,
            16,
            2,
            a.data().iter().zip(b.data()).map(|(x, y)| 0.3 * x + 0.7 * y).collect(),
        )
        .unwrap();
        let da = degrade(&a, &spec).unwrap();
        let db = degrade(&b, &spec).unwrap();
        let dc = degrade(&combo, &spec).unwrap();
        let expect = Image::from_vec(
            4,
            4,
            2,
            da.data().iter().zip(db.data()).map(|(x, y)| 0.3 * x + 0.7 * y).collect(),
        )
        .unwrap();
        assert!(dc.max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn interpolation_preserves_on_grid_samples() {
        let lr = random_image(7, 9, 3, 3);
        for scale in [2, 4] {
            let spec = ResamplerSpec::bicubic(scale).unwrap();
            let hr = interpolate(&lr, &spec).unwrap();
            assert_eq!(hr.height(), 7 * scale);
            for y in 0..7 {
                for x in 0..9 {
                    for c in 0..3 {
                        assert_eq!(hr.at(y * scale, x * scale, c), lr.at(y, x, c));
                    }
                }
            }
        }
    }

    #[test]
    fn downsample_inverts_zero_upsample() {
        let x = random_image(6, 5, 2, 4);
        let up = upsample_zero(&x, 4);
        assert_eq!(up.height(), 24);
        let back = downsample(&up, 4).unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn downsample_rejects_indivisible() {
        let x = random_image(7, 8, 1, 5);
        assert!(downsample(&x, 4).is_err());
    }

    #[test]
    fn ideal_filter_is_idempotent() {
        let spec = ResamplerSpec::ideal(4).unwrap();
        let x = random_image(32, 24, 1, 6);
        let once = lowpass(&x, &spec).unwrap();
        let twice = lowpass(&once, &spec).unwrap();
        assert!(twice.max_abs_diff(&once) < 1e-9);
    }

    #[test]
    fn ideal_spectrum_above_cutoff_is_zero() {
        let spec = ResamplerSpec::ideal(4).unwrap();
        let x = random_image(32, 1, 1, 7);
        let filtered = lowpass(&x, &spec).unwrap();
        let col: Vec<f64> = (0..32).map(|y| filtered.at(y, 0, 0)).collect();
        // Direct DFT of the filtered column.
        let n = 32;
        for k in 0..n {
            let freq = k.min(n - k);
            if 2 * 4 * freq >= n {
                let (mut re, mut im) = (0.0, 0.0);
                for (t, v) in col.iter().enumerate() {
                    let ang = -2.0 * std::f64::consts::PI * (k * t) as f64 / n as f64;
                    re += v * ang.cos();
                    im += v * ang.sin();
                }
                assert!(
                    (re * re + im * im).sqrt() < 1e-9,
                    "bin {} has magnitude {}",
                    k,
                    (re * re + im * im).sqrt()
                );
            }
        }
    }

    #[test]
    fn ideal_degrade_interpolate_reconstructs_canonical_lr() {
        let spec = ResamplerSpec::ideal(4).unwrap();
        let hr = random_image(64, 64, 3, 8);
        let lr = degrade(&hr, &spec).unwrap();
        let rt = degrade(&interpolate(&lr, &spec).unwrap(), &spec).unwrap();
        assert!(rt.max_abs_diff(&lr) < 1e-9, "max err {}", rt.max_abs_diff(&lr));
    }

    #[test]
    fn spec_rejects_scale_three() {
        assert!(ResamplerSpec::new(3, KernelKind::Bicubic).is_err());
    }
}
