//! 1-bit quanta stacks from dense reference videos.
//!
//! Reference values `n_i` are taken as proportional to the photon rate. A
//! single scale `q` maps the reference mean onto the requested mean rate,
//! `λ_i = q·n_i`, and each voxel is drawn as Bernoulli(1 − e^−λ_i), which is
//! the distribution of a Poisson(λ_i) draw clipped at one.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{tags, RandomSource};
use crate::volume::{BitVolume, DenseVolume, Shape3};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    /// Target mean photon rate per pixel per frame.
    pub mean_rate: f64,
    pub seed: u64,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mean_rate > 0.0) || !self.mean_rate.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "mean_rate must be positive, got {}",
                self.mean_rate
            )));
        }
        Ok(())
    }

    pub fn run(&self, reference: &DenseVolume) -> Result<BitVolume> {
        self.validate()?;
        simulate_quanta(reference, self.mean_rate, &RandomSource::new(self.seed))
    }
}

/// Scale `q` such that `mean(q·reference) = mean_rate`.
pub fn rate_scale(reference: &DenseVolume, mean_rate: f64) -> Result<f64> {
    let mean = reference.mean();
    if !(mean > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "reference mean must be positive, got {mean}"
        )));
    }
    Ok(mean_rate / mean)
}

/// Draws a binary stack from `reference` scaled to `mean_rate`.
///
/// Frame `t` draws from the stream `src.derive(SIMULATE_FRAME, t)`, one
/// uniform per voxel, so output is independent of thread count.
pub fn simulate_quanta(reference: &DenseVolume, mean_rate: f64, src: &RandomSource) -> Result<BitVolume> {
    if let Some(i) = reference.values().iter().position(|&v| v < 0.0) {
        return Err(Error::InvalidArgument(format!(
            "reference value at element {i} is negative"
        )));
    }
    let shape = reference.shape();
    let q = if reference.values().iter().all(|&v| v == 0.0) {
        0.0
    } else {
        rate_scale(reference, mean_rate)?
    };
    let frame_len = shape.frame_len();
    let frames: Vec<Vec<bool>> = (0..shape.t)
        .into_par_iter()
        .map(|t| {
            let mut rng = src.derive(tags::SIMULATE_FRAME, t as u64).rng();
            reference
                .frame(t)
                .iter()
                .map(|&n| {
                    let p1 = -(-(q * f64::from(n))).exp_m1();
                    rng.gen::<f64>() < p1
                })
                .collect()
        })
        .collect();
    let mut flags = Vec::with_capacity(shape.len());
    for f in frames {
        debug_assert_eq!(f.len(), frame_len);
        flags.extend(f);
    }
    BitVolume::from_flags(shape, &flags)
}

/// Parameters of the built-in synthetic scene: a static smooth texture
/// with a bright Gaussian blob moving across it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToySceneConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Blob displacement in pixels per frame, (vy, vx).
    pub velocity: (f64, f64),
    pub blob_sigma: f64,
    pub blob_amplitude: f64,
    /// Spatial period of the background texture, in pixels.
    pub texture_period: f64,
}

impl Default for ToySceneConfig {
    fn default() -> Self {
        Self {
            frames: 128,
            height: 64,
            width: 64,
            velocity: (0.15, 0.35),
            blob_sigma: 5.0,
            blob_amplitude: 3.0,
            texture_period: 24.0,
        }
    }
}

/// Renders the toy scene. Values are positive; the blob bounces off the
/// frame borders.
pub fn toy_scene(cfg: &ToySceneConfig) -> Result<DenseVolume> {
    let shape = Shape3::new(cfg.frames, cfg.height, cfg.width)?;
    let (h, w) = (cfg.height as f64, cfg.width as f64);
    let k = std::f64::consts::TAU / cfg.texture_period;
    let margin = 2.0 * cfg.blob_sigma;
    let bounce = |start: f64, v: f64, t: f64, len: f64| {
        let lo = margin.min(len / 2.0);
        let span = (len - 2.0 * lo).max(1e-9);
        let s = (start - lo + v * t).rem_euclid(2.0 * span);
        lo + if s > span { 2.0 * span - s } else { s }
    };
    DenseVolume::from_fn(shape, |t, y, x| {
        let (yf, xf) = (y as f64, x as f64);
        let texture = 1.0
            + 0.45 * (k * xf).sin() * (0.7 * k * yf).cos()
            + 0.25 * (0.5 * k * (xf + yf)).cos();
        let cy = bounce(h * 0.35, cfg.velocity.0, t as f64, h);
        let cx = bounce(w * 0.3, cfg.velocity.1, t as f64, w);
        let d2 = (yf - cy).powi(2) + (xf - cx).powi(2);
        let blob = cfg.blob_amplitude * (-d2 / (2.0 * cfg.blob_sigma.powi(2))).exp();
        (0.2 + texture.max(0.0) + blob) as f32
    })
}
