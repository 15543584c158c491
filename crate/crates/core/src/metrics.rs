//! Full-reference quality metrics.

use std::fmt::Write as _;

use crate::error::{dim_err, Result};
use crate::image::RadianceImage;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_same(a: &RadianceImage, b: &RadianceImage) -> Result<()> {
    if !a.same_size(b.height(), b.width()) {
        return Err(dim_err!(
            "{}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        ));
    }
    Ok(())
}

pub fn mse(a: &RadianceImage, b: &RadianceImage) -> Result<f64> {
    check_same(a, b)?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(sum / a.data().len() as f64)
}

/// `10 log10(1 / mse)` in dB for data in `[0, 1]`. Identical images give
/// `f64::INFINITY`.
pub fn psnr(a: &RadianceImage, b: &RadianceImage) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / m).log10()
    })
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filtering of a `h x w` plane.
fn filter(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps
                .iter()
                .enumerate()
                .map(|(i, t)| t * plane[y * w + x + i])
                .sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps
                .iter()
                .enumerate()
                .map(|(i, t)| t * rows[(y + i) * ow + x])
                .sum();
        }
    }
    out
}

fn channel(img: &RadianceImage, c: usize) -> Vec<f64> {
    img.data().iter().skip(c).step_by(3).copied().collect()
}

/// Mean SSIM over every valid 11x11 window position and the three channels,
/// with a Gaussian window (sigma 1.5) and dynamic range 1.
pub fn ssim(a: &RadianceImage, b: &RadianceImage) -> Result<f64> {
    check_same(a, b)?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(dim_err!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        ));
    }
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..3 {
        let x = channel(a, c);
        let y = channel(b, c);
        let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
        let mx = filter(&x, h, w, &taps);
        let my = filter(&y, h, w, &taps);
        let mxx = filter(&prod(&x, &x), h, w, &taps);
        let myy = filter(&prod(&y, &y), h, w, &taps);
        let mxy = filter(&prod(&x, &y), h, w, &taps);
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = mxx[i] - ux * ux;
            let vy = myy[i] - uy * uy;
            let cov = mxy[i] - ux * uy;
            total += ((2.0 * ux * uy + c1) * (2.0 * cov + c2))
                / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        count += mx.len();
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct QualityRow {
    pub id: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

/// Per-image scores and their means.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct QualityReport {
    pub rows: Vec<QualityRow>,
}

impl QualityReport {
    pub fn push(
        &mut self,
        id: impl Into<String>,
        pred: &RadianceImage,
        truth: &RadianceImage,
    ) -> Result<()> {
        self.rows.push(QualityRow {
            id: id.into(),
            psnr_db: psnr(pred, truth)?,
            ssim: ssim(pred, truth)?,
        });
        Ok(())
    }

    /// Mean PSNR; infinite if any pair is identical.
    pub fn psnr_db(&self) -> f64 {
        self.rows.iter().map(|r| r.psnr_db).sum::<f64>() / self.rows.len().max(1) as f64
    }

    pub fn ssim(&self) -> f64 {
        self.rows.iter().map(|r| r.ssim).sum::<f64>() / self.rows.len().max(1) as f64
    }

    /// Whitespace-separated table: a header, one row per image, a `mean` row.
    /// Infinite PSNR prints as `inf`.
    pub fn to_table(&self) -> String {
        let fmt_psnr = |p: f64| {
            if p.is_infinite() {
                "inf".to_string()
            } else {
                format!("{p:.4}")
            }
        };
        let width = self
            .rows
            .iter()
            .map(|r| r.id.len())
            .max()
            .unwrap_or(0)
            .max(4);
        let mut out = format!("{:<width$}  {:>10}  {:>8}\n", "id", "psnr_db", "ssim");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<width$}  {:>10}  {:>8.6}",
                r.id,
                fmt_psnr(r.psnr_db),
                r.ssim
            );
        }
        let _ = writeln!(
            out,
            "{:<width$}  {:>10}  {:>8.6}",
            "mean",
            fmt_psnr(self.psnr_db()),
            self.ssim()
        );
        out
    }
}
