//! Tiled whole-volume inference.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{forward, ModelState, Tensor5};
use crate::rng::{tags, RandomSource};
use crate::stats::{check_probability, thin};
use crate::volume::{BitVolume, CropSpec, DenseVolume, Shape3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Combine {
    Mean,
    Median,
}

/// How logits become intensities. Only one scheme exists: per-tile softmax
/// scaled to the tile's (unbiased) photon count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntensityScale {
    PhotonPreserving,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferConfig {
    pub tile: Shape3,
    /// Fraction of a tile shared with its neighbour along each axis.
    pub overlap: f64,
    pub shots: usize,
    /// Thinning probability of each shot; 1 feeds the raw data.
    pub shot_p: f64,
    pub combine: Combine,
    pub intensity: IntensityScale,
    pub seed: u64,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            tile: Shape3 { t: 16, h: 64, w: 64 },
            overlap: 0.5,
            shots: 1,
            shot_p: 1.0,
            combine: Combine::Mean,
            intensity: IntensityScale::PhotonPreserving,
            seed: 0,
        }
    }
}

impl InferConfig {
    pub fn validate(&self) -> Result<()> {
        self.tile.validate()?;
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(Error::InvalidConfig(format!("overlap {} not in [0, 1)", self.overlap)));
        }
        if self.shots == 0 {
            return Err(Error::InvalidConfig("shots must be at least 1".into()));
        }
        if !(self.shot_p > 0.0 && self.shot_p <= 1.0) {
            return Err(Error::InvalidProbability(self.shot_p));
        }
        Ok(())
    }
}

fn axis_starts(dim: usize, tile: usize, overlap: f64) -> Vec<usize> {
    let stride = ((tile as f64 * (1.0 - overlap)).floor() as usize).max(1);
    let mut out = vec![0];
    let mut pos = 0;
    while pos + tile < dim {
        pos = (pos + stride).min(dim - tile);
        out.push(pos);
    }
    out
}

/// Tiles in t-major, then y, then x order. Neighbouring tiles are
/// `tile·(1 − overlap)` apart; the last tile on each axis is clamped to the
/// volume edge.
pub fn tile_plan(shape: Shape3, cfg: &InferConfig) -> Result<Vec<CropSpec>> {
    cfg.validate()?;
    CropSpec::new([0, 0, 0], cfg.tile).check_inside(shape)?;
    let ts = axis_starts(shape.t, cfg.tile.t, cfg.overlap);
    let ys = axis_starts(shape.h, cfg.tile.h, cfg.overlap);
    let xs = axis_starts(shape.w, cfg.tile.w, cfg.overlap);
    let mut out = Vec::with_capacity(ts.len() * ys.len() * xs.len());
    for &t in &ts {
        for &y in &ys {
            for &x in &xs {
                out.push(CropSpec::new([t, y, x], cfg.tile));
            }
        }
    }
    Ok(out)
}

/// `softmax(logits) · photon_count`, computed in f64.
pub fn logits_to_intensity(logits: &DenseVolume, photon_count: f64) -> Result<DenseVolume> {
    if !(photon_count >= 0.0 && photon_count.is_finite()) {
        return Err(Error::InvalidArgument(format!("photon count {photon_count}")));
    }
    let z = logits.values();
    let zmax = z.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(f64::from(v)));
    let e: Vec<f64> = z.iter().map(|&v| (f64::from(v) - zmax).exp()).collect();
    let total: f64 = e.iter().sum();
    let scale = photon_count / total;
    DenseVolume::from_vec(logits.shape(), e.iter().map(|&v| (v * scale) as f32).collect())
}

/// Network logits of one crop of `bits`.
pub fn tile_logits(m: &ModelState, bits: &BitVolume, crop: &CropSpec) -> Result<DenseVolume> {
    let input = bits.crop(crop)?;
    let out = forward(m, &Tensor5::from_bits(&[&input])?, false)?;
    DenseVolume::from_vec(crop.size, out.logits.data().to_vec())
}

/// Tiled prediction from `bits`, each tile's intensity scaled to its
/// popcount times `count_scale`; overlaps are averaged uniformly.
pub fn predict_bits(m: &ModelState, bits: &BitVolume, cfg: &InferConfig, count_scale: f64) -> Result<DenseVolume> {
    let shape = bits.shape();
    let plan = tile_plan(shape, cfg)?;
    m.config().check_input(cfg.tile)?;
    let tiles: Vec<DenseVolume> = plan
        .par_iter()
        .map(|c| {
            let count = bits.crop(c)?.popcount() as f64 * count_scale;
            logits_to_intensity(&tile_logits(m, bits, c)?, count)
        })
        .collect::<Result<_>>()?;
    let mut sum = vec![0.0f64; shape.len()];
    let mut cover = vec![0u32; shape.len()];
    for (c, tile) in plan.iter().zip(&tiles) {
        let [t0, y0, x0] = c.origin;
        let ts = c.size;
        for t in 0..ts.t {
            for y in 0..ts.h {
                let src = &tile.values()[ts.index(t, y, 0)..ts.index(t, y, 0) + ts.w];
                let dst = shape.index(t0 + t, y0 + y, x0);
                for (x, &v) in src.iter().enumerate() {
                    sum[dst + x] += f64::from(v);
                    cover[dst + x] += 1;
                }
            }
        }
    }
    let values = sum
        .iter()
        .zip(&cover)
        .map(|(&s, &n)| (s / f64::from(n)) as f32)
        .collect();
    DenseVolume::from_vec(shape, values)
}

/// Single prediction from the raw data.
pub fn predict(m: &ModelState, raw: &BitVolume, cfg: &InferConfig) -> Result<DenseVolume> {
    predict_bits(m, raw, cfg, 1.0)
}

/// Mean (or median) over `cfg.shots` independent thinnings of `raw` at
/// `cfg.shot_p`. Photon counts are divided by `shot_p` so every shot
/// estimates the same intensity scale.
pub fn multi_shot(m: &ModelState, raw: &BitVolume, cfg: &InferConfig) -> Result<DenseVolume> {
    combine(&shot_predictions(m, raw, cfg)?, cfg.combine)
}

/// The individual shots behind [`multi_shot`], before combination.
pub fn shot_predictions(m: &ModelState, raw: &BitVolume, cfg: &InferConfig) -> Result<Vec<DenseVolume>> {
    cfg.validate()?;
    check_probability(cfg.shot_p)?;
    let src = RandomSource::new(cfg.seed);
    (0..cfg.shots)
        .map(|k| {
            let (input, _) = thin(raw, cfg.shot_p, &mut src.derive(tags::SHOT, k as u64).rng())?;
            predict_bits(m, &input, cfg, 1.0 / cfg.shot_p)
        })
        .collect()
}

/// Voxel-wise mean or median of equally shaped volumes.
pub fn combine(vols: &[DenseVolume], how: Combine) -> Result<DenseVolume> {
    let first = vols
        .first()
        .ok_or_else(|| Error::InvalidArgument("nothing to combine".into()))?
        .shape();
    for v in vols {
        crate::volume::check_same_shape(first, v.shape())?;
    }
    let n = vols.len();
    let values = (0..first.len())
        .map(|i| match how {
            Combine::Mean => (vols.iter().map(|v| f64::from(v.values()[i])).sum::<f64>() / n as f64) as f32,
            Combine::Median => {
                let mut xs: Vec<f32> = vols.iter().map(|v| v.values()[i]).collect();
                xs.sort_by(f32::total_cmp);
                if n % 2 == 1 {
                    xs[n / 2]
                } else {
                    ((f64::from(xs[n / 2 - 1]) + f64::from(xs[n / 2])) / 2.0) as f32
                }
            }
        })
        .collect();
    DenseVolume::from_vec(first, values)
}
