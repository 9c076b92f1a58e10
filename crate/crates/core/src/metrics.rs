//! Frame-wise image quality and hot-pixel correction.
//!
//! Both volumes are divided by their own global mean before comparison.
//! The peak value is the maximum of the normalized ground truth over the
//! whole volume. SSIM uses an 11×11 Gaussian window (σ = 1.5), K1 = 0.01,
//! K2 = 0.03, evaluated where the window fits inside the frame.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{check_same_shape, DenseVolume, Shape3};

/// Reported for frames that match exactly.
pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl Summary {
    /// Sample standard deviation (n − 1); zero for a single value.
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = if xs.len() > 1 {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self {
            mean,
            std,
            min: xs.iter().copied().fold(f64::INFINITY, f64::min),
            max: xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub settings: String,
    pub psnr: Vec<f64>,
    pub ssim: Vec<f64>,
    pub psnr_summary: Summary,
    pub ssim_summary: Summary,
}

impl MetricReport {
    /// `frame,psnr,ssim` rows.
    pub fn csv(&self) -> String {
        let mut out = String::from("frame,psnr,ssim\n");
        for (i, (p, s)) in self.psnr.iter().zip(&self.ssim).enumerate() {
            out.push_str(&format!("{i},{p},{s}\n"));
        }
        out
    }
}

pub fn settings_header() -> String {
    format!(
        "unit-mean normalization per volume; peak = max of normalized ground truth; psnr cap {PSNR_CAP} dB; \
         ssim gaussian {SSIM_WINDOW}x{SSIM_WINDOW} sigma {SSIM_SIGMA}, k1 {SSIM_K1}, k2 {SSIM_K2}, valid region"
    )
}

fn unit_mean(v: &DenseVolume) -> Vec<f64> {
    let m = v.mean();
    let scale = if m != 0.0 { 1.0 / m } else { 1.0 };
    v.values().iter().map(|&x| f64::from(x) * scale).collect()
}

/// Normalized prediction, normalized ground truth and the peak value.
fn prepare(pred: &DenseVolume, gt: &DenseVolume) -> Result<(Vec<f64>, Vec<f64>, f64)> {
    check_same_shape(gt.shape(), pred.shape())?;
    if !(gt.mean() > 0.0) {
        return Err(Error::InvalidArgument("ground truth mean must be positive".into()));
    }
    let g = unit_mean(gt);
    let peak = g.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok((unit_mean(pred), g, peak))
}

/// `10·log10(peak² / MSE)` from an already computed MSE, capped.
pub fn psnr_from_mse(peak: f64, mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (peak * peak / mse).log10()).min(PSNR_CAP)
    }
}

pub fn psnr_frames(pred: &DenseVolume, gt: &DenseVolume) -> Result<Vec<f64>> {
    let (p, g, peak) = prepare(pred, gt)?;
    let n = gt.shape().frame_len();
    Ok(p
        .chunks(n)
        .zip(g.chunks(n))
        .map(|(a, b)| {
            let mse = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n as f64;
            psnr_from_mse(peak, mse)
        })
        .collect())
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of an `h × w` image.
fn filter_valid(img: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * img[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM of one frame pair with dynamic range `range`.
pub fn ssim_frame(a: &[f64], b: &[f64], h: usize, w: usize, range: f64) -> Result<f64> {
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "{h}x{w} frame is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let k = gaussian_window();
    let c1 = (SSIM_K1 * range).powi(2);
    let c2 = (SSIM_K2 * range).powi(2);
    let prod = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p * q).collect() };
    let mu_a = filter_valid(a, h, w, &k);
    let mu_b = filter_valid(b, h, w, &k);
    let aa = filter_valid(&prod(a, a), h, w, &k);
    let bb = filter_valid(&prod(b, b), h, w, &k);
    let ab = filter_valid(&prod(a, b), h, w, &k);
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / n as f64)
}

pub fn ssim_frames(pred: &DenseVolume, gt: &DenseVolume) -> Result<Vec<f64>> {
    let (p, g, peak) = prepare(pred, gt)?;
    let s = gt.shape();
    let n = s.frame_len();
    (0..s.t)
        .into_par_iter()
        .map(|t| ssim_frame(&p[t * n..(t + 1) * n], &g[t * n..(t + 1) * n], s.h, s.w, peak))
        .collect()
}

pub fn metric_report(pred: &DenseVolume, gt: &DenseVolume) -> Result<MetricReport> {
    let psnr = psnr_frames(pred, gt)?;
    let ssim = ssim_frames(pred, gt)?;
    Ok(MetricReport {
        settings: settings_header(),
        psnr_summary: Summary::of(&psnr),
        ssim_summary: Summary::of(&ssim),
        psnr,
        ssim,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct HotPixelFix {
    pub corrected: DenseVolume,
    /// `(y, x)` of every flagged pixel.
    pub flagged: Vec<(usize, usize)>,
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

/// Values of the up to eight neighbours of `(y, x)` in an `h × w` image.
fn neighbours(img: &[f64], h: usize, w: usize, y: usize, x: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(8);
    for yy in y.saturating_sub(1)..(y + 2).min(h) {
        for xx in x.saturating_sub(1)..(x + 2).min(w) {
            if (yy, xx) != (y, x) {
                out.push(img[yy * w + xx]);
            }
        }
    }
    out
}

/// Flags pixels whose temporal mean exceeds the median of their 3×3
/// neighbourhood by more than `z` robust deviations, then replaces them in
/// every frame by the median of their neighbours.
///
/// The deviation scale is `1.4826 · MAD` of the residuals (mean minus local
/// median) over the whole image, falling back to the mean absolute
/// deviation when more than half the residuals are identical.
pub fn hot_pixel_correct(v: &DenseVolume, z: f64) -> Result<HotPixelFix> {
    let s: Shape3 = v.shape();
    if s.t < 2 {
        return Err(Error::InvalidArgument("hot-pixel detection needs at least two frames".into()));
    }
    let (h, w, n) = (s.h, s.w, s.frame_len());
    let mut mean = vec![0.0f64; n];
    for t in 0..s.t {
        for (m, &x) in mean.iter_mut().zip(v.frame(t)) {
            *m += f64::from(x);
        }
    }
    mean.iter_mut().for_each(|m| *m /= s.t as f64);
    let resid: Vec<f64> = (0..n)
        .map(|i| {
            let nb = neighbours(&mean, h, w, i / w, i % w);
            if nb.is_empty() {
                0.0
            } else {
                mean[i] - median(&mut nb.clone())
            }
        })
        .collect();
    let center = median(&mut resid.clone());
    let mut dev: Vec<f64> = resid.iter().map(|r| (r - center).abs()).collect();
    let mut scale = 1.4826 * median(&mut dev);
    if scale == 0.0 {
        scale = 1.4826 * dev.iter().sum::<f64>() / n as f64;
    }
    let flagged: Vec<(usize, usize)> = (0..n)
        .filter(|&i| resid[i] - center > z * scale)
        .map(|i| (i / w, i % w))
        .collect();
    let mut values = v.values().to_vec();
    for t in 0..s.t {
        let frame: Vec<f64> = v.frame(t).iter().map(|&x| f64::from(x)).collect();
        for &(y, x) in &flagged {
            let mut nb = neighbours(&frame, h, w, y, x);
            if !nb.is_empty() {
                values[s.index(t, y, x)] = median(&mut nb) as f32;
            }
        }
    }
    Ok(HotPixelFix {
        corrected: DenseVolume::from_vec(s, values)?,
        flagged,
    })
}
