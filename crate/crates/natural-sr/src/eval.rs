//! Full-reference quality metrics and report assembly.

use crate::error::{Error, Result};
use crate::resample::{degrade, ResamplerSpec};
use crate::synth::verify_membership;
use crate::tensor::Image;

/// PSNR values at or above this are reported as the sentinel itself,
/// covering the identical-image case where MSE is zero.
pub const PSNR_SENTINEL: f64 = 99.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn check_same_shape(op: &'static str, a: &Image, b: &Image) -> Result<()> {
    if (a.height(), a.width(), a.channels()) != (b.height(), b.width(), b.channels()) {
        return Err(Error::shape(
            op,
            format!(
                "{}x{}x{} vs {}x{}x{}",
                a.height(),
                a.width(),
                a.channels(),
                b.height(),
                b.width(),
                b.channels()
            ),
        ));
    }
    Ok(())
}

fn mse(a: &Image, b: &Image) -> f64 {
    let n = a.data().len() as f64;
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<f64>()
        / n
}

/// RGB-domain PSNR in dB, capped at the 99 dB sentinel.
pub fn psnr(a: &Image, b: &Image, peak: f64) -> Result<f64> {
    check_same_shape("psnr", a, b)?;
    if peak <= 0.0 {
        return Err(Error::invalid(format!("peak must be positive, got {}", peak)));
    }
    let err = mse(a, b);
    if err == 0.0 {
        return Ok(PSNR_SENTINEL);
    }
    Ok((10.0 * (peak * peak / err).log10()).min(PSNR_SENTINEL))
}

/// ITU-R BT.601 luma of an RGB image.
pub fn luma(img: &Image) -> Result<Image> {
    if img.channels() != 3 {
        return Err(Error::shape("luma", format!("need 3 channels, got {}", img.channels())));
    }
    let mut out = Image::zeros(img.height(), img.width(), 1);
    for y in 0..img.height() {
        for x in 0..img.width() {
            *out.at_mut(y, x, 0) =
                0.299 * img.at(y, x, 0) + 0.587 * img.at(y, x, 1) + 0.114 * img.at(y, x, 2);
        }
    }
    Ok(out)
}

/// Luma-domain PSNR, for comparability with common SISR reporting.
pub fn psnr_luma(a: &Image, b: &Image, peak: f64) -> Result<f64> {
    check_same_shape("psnr_luma", a, b)?;
    psnr(&luma(a)?, &luma(b)?, peak)
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as isize;
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for dy in -half..=half {
        for dx in -half..=half {
            let r2 = (dy * dy + dx * dx) as f64;
            w.push((-r2 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
        }
    }
    let sum: f64 = w.iter().sum();
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Mean SSIM over the valid region (no padding), averaged across
/// channels. Gaussian window 11x11, sigma 1.5, K1 0.01, K2 0.03, peak 1.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_same_shape("ssim", a, b)?;
    if a.height() < SSIM_WINDOW || a.width() < SSIM_WINDOW {
        return Err(Error::shape(
            "ssim",
            format!("{}x{} smaller than the {0}x{0} window", a.height(), SSIM_WINDOW),
        ));
    }
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let w = gaussian_window();
    let out_h = a.height() - SSIM_WINDOW + 1;
    let out_w = a.width() - SSIM_WINDOW + 1;
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..a.channels() {
        for oy in 0..out_h {
            for ox in 0..out_w {
                let mut mu_a = 0.0;
                let mut mu_b = 0.0;
                let mut aa = 0.0;
                let mut bb = 0.0;
                let mut ab = 0.0;
                let mut wi = 0;
                for dy in 0..SSIM_WINDOW {
                    for dx in 0..SSIM_WINDOW {
                        let wv = w[wi];
                        wi += 1;
                        let va = a.at(oy + dy, ox + dx, ch);
                        let vb = b.at(oy + dy, ox + dx, ch);
                        mu_a += wv * va;
                        mu_b += wv * vb;
                        aa += wv * va * va;
                        bb += wv * vb * vb;
                        ab += wv * va * vb;
                    }
                }
                let var_a = aa - mu_a * mu_a;
                let var_b = bb - mu_b * mu_b;
                let cov = ab - mu_a * mu_b;
                let num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2);
                let den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2);
                total += num / den;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// LR-consistency in dB: RGB-PSNR between `degrade(sr)` and `lr`.
pub fn plausibility(sr: &Image, lr: &Image, spec: &ResamplerSpec) -> Result<f64> {
    verify_membership(sr, lr, spec)
}

/// Crops `border` pixels from every side, a common SISR convention
/// before FR-IQA. `border = 0` is the identity.
pub fn shave(img: &Image, border: usize) -> Result<Image> {
    if img.height() <= 2 * border || img.width() <= 2 * border {
        return Err(Error::shape(
            "shave",
            format!("{}x{} too small for border {}", img.height(), img.width(), border),
        ));
    }
    img.crop(border, border, img.height() - 2 * border, img.width() - 2 * border)
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::invalid("mean_std: empty set"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

#[derive(Debug, Clone)]
pub struct EvalRow {
    pub name: String,
    pub values: Vec<f64>,
}

/// Per-image metric rows plus aggregates, serializable as CSV and as an
/// aligned text table.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub method: String,
    pub dataset: String,
    pub metrics: Vec<String>,
    pub rows: Vec<EvalRow>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl EvalReport {
    pub fn new(
        method: impl Into<String>,
        dataset: impl Into<String>,
        metrics: Vec<String>,
        rows: Vec<EvalRow>,
    ) -> Result<EvalReport> {
        if rows.is_empty() {
            return Err(Error::invalid("EvalReport: no rows"));
        }
        for row in &rows {
            if row.values.len() != metrics.len() {
                return Err(Error::invalid(format!(
                    "row {} has {} values for {} metrics",
                    row.name,
                    row.values.len(),
                    metrics.len()
                )));
            }
        }
        let mut mean = Vec::with_capacity(metrics.len());
        let mut std = Vec::with_capacity(metrics.len());
        for m in 0..metrics.len() {
            let col: Vec<f64> = rows.iter().map(|r| r.values[m]).collect();
            let (mu, sd) = mean_std(&col)?;
            mean.push(mu);
            std.push(sd);
        }
        Ok(EvalReport { method: method.into(), dataset: dataset.into(), metrics, rows, mean, std })
    }

    pub fn csv(&self) -> String {
        let mut out = String::from("name");
        for m in &self.metrics {
            out.push(',');
            out.push_str(m);
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.name);
            for v in &row.values {
                out.push_str(&format!(",{:.6}", v));
            }
            out.push('\n');
        }
        for (label, stats) in [("mean", &self.mean), ("std", &self.std)] {
            out.push_str(label);
            for v in stats.iter() {
                out.push_str(&format!(",{:.6}", v));
            }
            out.push('\n');
        }
        out
    }

    pub fn table(&self) -> String {
        let name_w = self
            .rows
            .iter()
            .map(|r| r.name.len())
            .chain(["image".len(), "mean +/- std".len()])
            .max()
            .unwrap();
        let col_w = self.metrics.iter().map(|m| m.len().max(17)).collect::<Vec<_>>();
        let mut out = format!("method {}  dataset {}\n", self.method, self.dataset);
        out.push_str(&format!("{:<name_w$}", "image"));
        for (m, w) in self.metrics.iter().zip(&col_w) {
            out.push_str(&format!("  {:>w$}", m, w = w));
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str(&format!("{:<name_w$}", row.name));
            for (v, w) in row.values.iter().zip(&col_w) {
                out.push_str(&format!("  {:>w$.4}", v, w = w));
            }
            out.push('\n');
        }
        out.push_str(&format!("{:<name_w$}", "mean +/- std"));
        for ((mu, sd), w) in self.mean.iter().zip(&self.std).zip(&col_w) {
            out.push_str(&format!("  {:>w$}", format!("{:.4} +/- {:.4}", mu, sd), w = w));
        }
        out.push('\n');
        out
    }
}

#[derive(Debug, Clone)]
pub struct MethodScore {
    pub method: String,
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

/// Aggregates per-method naturalness scores into mean +/- std rows,
/// one per method set.
pub fn nmd_report(sets: &[(String, Vec<f64>)]) -> Result<Vec<MethodScore>> {
    let mut out = Vec::with_capacity(sets.len());
    for (method, scores) in sets {
        if scores.is_empty() {
            return Err(Error::invalid(format!("nmd_report: empty set for {}", method)));
        }
        let (mean, std) = mean_std(scores)?;
        out.push(MethodScore { method: method.clone(), mean, std, count: scores.len() });
    }
    Ok(out)
}

pub fn format_nmd_table(rows: &[MethodScore]) -> String {
    let name_w = rows.iter().map(|r| r.method.len()).chain(["method".len()]).max().unwrap();
    let mut out = format!("{:<name_w$}  {:>7}  {}\n", "method", "images", "score");
    for r in rows {
        out.push_str(&format!(
            "{:<name_w$}  {:>7}  {:.3} +/- {:.3}\n",
            r.method, r.count, r.mean, r.std
        ));
    }
    out
}

/// Convenience wrapper: degrades `sr_set`'s references and compares.
pub fn batch_plausibility(
    pairs: &[(Image, Image)],
    spec: &ResamplerSpec,
) -> Result<Vec<f64>> {
    pairs.iter().map(|(sr, lr)| plausibility(sr, lr, spec)).collect()
}

/// Degrade helper re-exported for report call sites that hold HR only.
pub fn reference_lr(hr: &Image, spec: &ResamplerSpec) -> Result<Image> {
    degrade(hr, spec)
}
