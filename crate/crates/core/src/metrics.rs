//! PSNR and single-scale SSIM on RGB images.
//!
//! SSIM uses an 11x11 Gaussian window (sigma 1.5), K1 = 0.01, K2 = 0.03 and a
//! dynamic range of 1, evaluated at every position where the window fits and
//! averaged over positions and then over the three channels.

use std::fmt;

use crate::data::Image;
use crate::error::{Error, Result};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn same_size(a: &Image, b: &Image) -> Result<()> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(Error::dim(format!(
            "images differ in size: {}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in decibels with peak 1. Identical images give
/// `f64::INFINITY`.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    same_size(a, b)?;
    let n = a.pixels().len() as f64;
    let mse = a
        .pixels()
        .iter()
        .zip(b.pixels())
        .map(|(&x, &y)| {
            let d = x.clamp(0.0, 1.0) as f64 - y.clamp(0.0, 1.0) as f64;
            d * d
        })
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(-10.0 * mse.log10())
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let r = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Valid-region separable filtering of a `w x h` plane.
fn filter_valid(plane: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w - SSIM_WINDOW + 1, h - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    same_size(a, b)?;
    let (w, h) = (a.width(), a.height());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::dim(format!(
            "SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {w}x{h}"
        )));
    }
    let k = gaussian_kernel();
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let mut total = 0.0;
    for ch in 0..3 {
        let x: Vec<f64> = a.pixels().iter().skip(ch).step_by(3).map(|&v| v as f64).collect();
        let y: Vec<f64> = b.pixels().iter().skip(ch).step_by(3).map(|&v| v as f64).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let (mx, my) = (filter_valid(&x, w, h, &k), filter_valid(&y, w, h, &k));
        let (sxx, syy, sxy) = (
            filter_valid(&xx, w, h, &k),
            filter_valid(&yy, w, h, &k),
            filter_valid(&xy, w, h, &k),
        );
        let mut sum = 0.0;
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            sum += ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        total += sum / mx.len() as f64;
    }
    Ok(total / 3.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub id: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    pub fn push(&mut self, id: impl Into<String>, output: &Image, reference: &Image) -> Result<()> {
        self.rows.push(MetricRow {
            id: id.into(),
            psnr: psnr(output, reference)?,
            ssim: ssim(output, reference)?,
        });
        Ok(())
    }

    /// Arithmetic means in row order; `None` when empty.
    pub fn mean(&self) -> Option<(f64, f64)> {
        if self.rows.is_empty() {
            return None;
        }
        let n = self.rows.len() as f64;
        let p = self.rows.iter().map(|r| r.psnr).sum::<f64>() / n;
        let s = self.rows.iter().map(|r| r.ssim).sum::<f64>() / n;
        Some((p, s))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,psnr,ssim\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{}\n", r.id, r.psnr, r.ssim));
        }
        out
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.rows.iter().map(|r| r.id.len()).max().unwrap_or(2).max(4);
        writeln!(f, "{:<width$}  {:>9}  {:>7}", "id", "PSNR(dB)", "SSIM")?;
        for r in &self.rows {
            writeln!(f, "{:<width$}  {:>9.3}  {:>7.4}", r.id, r.psnr, r.ssim)?;
        }
        if let Some((p, s)) = self.mean() {
            writeln!(f, "{:<width$}  {:>9.3}  {:>7.4}", "mean", p, s)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat(v: f32) -> Image {
        Image::filled(16, 12, [v; 3]).unwrap()
    }

    #[test]
    fn closed_form_psnr() {
        assert!((psnr(&flat(0.0), &flat(0.5)).unwrap() - 6.0206).abs() < 1e-3);
        assert!((psnr(&flat(0.2), &flat(0.3)).unwrap() - 20.0).abs() < 1e-3);
        assert_eq!(psnr(&flat(0.4), &flat(0.4)).unwrap(), f64::INFINITY);
    }

    #[test]
    fn ssim_identity_and_small_images() {
        let img = Image::from_fn(13, 15, |x, y| [x as f32 / 13.0, y as f32 / 15.0, 0.5]).unwrap();
        assert_eq!(ssim(&img, &img).unwrap(), 1.0);
        assert!(ssim(&flat(0.1).crop(0, 0, 10, 10).unwrap(), &flat(0.1).crop(0, 0, 10, 10).unwrap()).is_err());
    }

    #[test]
    fn report_mean_and_csv() {
        let mut r = MetricReport::default();
        r.push("a", &flat(0.0), &flat(0.5)).unwrap();
        r.push("b", &flat(0.2), &flat(0.3)).unwrap();
        let (p, _) = r.mean().unwrap();
        assert!((p - (r.rows[0].psnr + r.rows[1].psnr) / 2.0).abs() < 1e-12);
        assert_eq!(r.to_csv().lines().count(), 3);
        assert!(r.to_string().contains("mean"));
    }
}
