//! Distribution, image-quality and overlap metrics plus report assembly.

mod distance;
mod report;

use serde::{Deserialize, Serialize};

use crate::error::{shape_check, Error, Result};
use crate::grid::{Image, Mask};

pub use distance::{boundary, hausdorff, hd95, percentile};
pub use report::{evaluate_stage, report_timestamp, MetricsConfig, MetricsReport, RegionMetrics, StageInputs};

/// Two-sample Kolmogorov-Smirnov statistic: the largest gap between the two
/// empirical CDFs.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Argument("K-S statistic needs two nonempty samples".into()));
    }
    if a.iter().chain(b).any(|v| v.is_nan()) {
        return Err(Error::Argument("K-S samples contain NaN".into()));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    Ok(d)
}

/// Convenience wrapper over `f32` pixel samples.
pub fn ks_statistic_f32(a: &[f32], b: &[f32]) -> Result<f64> {
    let widen = |s: &[f32]| s.iter().map(|&v| v as f64).collect::<Vec<_>>();
    ks_statistic(&widen(a), &widen(b))
}

/// Peak signal-to-noise ratio in dB; identical images give `f64::INFINITY`.
pub fn psnr(a: &Image, b: &Image, peak: f64) -> Result<f64> {
    shape_check("psnr", a.dims(), b.dims())?;
    if !(peak > 0.0) {
        return Err(Error::Argument(format!("psnr peak must be positive, got {peak}")));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / a.len() as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SsimWindow {
    Uniform,
    /// Gaussian weights with the given standard deviation (pixels).
    Gaussian(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    pub window: usize,
    pub k1: f64,
    pub k2: f64,
    pub peak: f64,
    pub kind: SsimWindow,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 7,
            k1: 0.01,
            k2: 0.03,
            peak: 1.0,
            kind: SsimWindow::Uniform,
        }
    }
}

/// Mean SSIM over every fully contained `window x window` position.
pub fn ssim(a: &Image, b: &Image, p: &SsimParams) -> Result<f64> {
    shape_check("ssim", a.dims(), b.dims())?;
    let (rows, cols) = a.dims();
    let w = p.window;
    if w == 0 || w % 2 == 0 {
        return Err(Error::Argument(format!("ssim window must be odd, got {w}")));
    }
    if w > rows || w > cols {
        return Err(Error::Argument(format!("ssim window {w} larger than {rows}x{cols} image")));
    }
    let weights: Vec<f64> = match p.kind {
        SsimWindow::Uniform => vec![1.0 / (w * w) as f64; w * w],
        SsimWindow::Gaussian(sigma) => {
            if !(sigma > 0.0) {
                return Err(Error::Argument("gaussian ssim window needs sigma > 0".into()));
            }
            let h = (w / 2) as f64;
            let raw: Vec<f64> = (0..w * w)
                .map(|i| {
                    let (dy, dx) = ((i / w) as f64 - h, (i % w) as f64 - h);
                    (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp()
                })
                .collect();
            let z: f64 = raw.iter().sum();
            raw.into_iter().map(|v| v / z).collect()
        }
    };
    let c1 = (p.k1 * p.peak).powi(2);
    let c2 = (p.k2 * p.peak).powi(2);
    let (ad, bd) = (a.data(), b.data());
    let mut total = 0.0;
    for r0 in 0..=rows - w {
        for c0 in 0..=cols - w {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dr in 0..w {
                for dc in 0..w {
                    let k = (r0 + dr) * cols + c0 + dc;
                    let wt = weights[dr * w + dc];
                    let (x, y) = (ad[k] as f64, bd[k] as f64);
                    ma += wt * x;
                    mb += wt * y;
                    saa += wt * x * x;
                    sbb += wt * y * y;
                    sab += wt * x * y;
                }
            }
            let va = saa - ma * ma;
            let vb = sbb - mb * mb;
            let cov = sab - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
    }
    Ok(total / ((rows - w + 1) * (cols - w + 1)) as f64)
}

/// Dice overlap; two empty masks score 1.
pub fn dice(a: &Mask, b: &Mask) -> Result<f64> {
    shape_check("dice", a.dims(), b.dims())?;
    let (sa, sb) = (a.count(), b.count());
    if sa + sb == 0 {
        return Ok(1.0);
    }
    let both = a.data().iter().zip(b.data()).filter(|(&x, &y)| x && y).count();
    Ok(2.0 * both as f64 / (sa + sb) as f64)
}
