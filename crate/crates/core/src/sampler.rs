//! Training triples from a binary stack.
//!
//! Each draw picks a thinning probability `p`, an in-bounds crop, splits the
//! crop's detections into input and target, and masks out every voxel that
//! carries an input detection.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::thin;
use crate::volume::{BitVolume, CropSpec, Shape3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PMode {
    Uniform,
    /// Always `p_max`.
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub crop: Shape3,
    pub p_min: f64,
    pub p_max: f64,
    pub p_mode: PMode,
    pub augment_flip_transpose: bool,
}

/// Largest default thinning probability; close enough to one that raw data
/// can be fed to the trained network directly.
pub const DEFAULT_P_MAX: f64 = 0.999_999;

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            crop: Shape3 { t: 16, h: 64, w: 64 },
            p_min: 0.0,
            p_max: DEFAULT_P_MAX,
            p_mode: PMode::Uniform,
            augment_flip_transpose: false,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        self.crop.validate()?;
        if !(0.0 <= self.p_min && self.p_min <= self.p_max && self.p_max <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "need 0 <= p_min <= p_max <= 1, got [{}, {}]",
                self.p_min, self.p_max
            )));
        }
        Ok(())
    }

    pub fn fits(&self, data: Shape3) -> Result<()> {
        CropSpec::new([0, 0, 0], self.crop).check_inside(data)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitTriple {
    pub input: BitVolume,
    pub target: BitVolume,
    pub mask: BitVolume,
}

impl SplitTriple {
    /// Splits `raw` at probability `p` and derives the complement mask.
    pub fn split<R: Rng + ?Sized>(raw: &BitVolume, p: f64, rng: &mut R) -> Result<Self> {
        let (input, target) = thin(raw, p, rng)?;
        let mask = input.complement();
        Ok(Self { input, target, mask })
    }

    pub fn shape(&self) -> Shape3 {
        self.input.shape()
    }

    /// The crop this triple was split from.
    pub fn raw(&self) -> BitVolume {
        self.input.or(&self.target).expect("triple volumes share a shape")
    }

    /// Checks `input AND target = 0`, `mask = NOT input`, and, when given,
    /// `input OR target = raw`.
    pub fn check(&self, raw: Option<&BitVolume>) -> bool {
        let disjoint = matches!(self.input.and(&self.target), Ok(v) if v.popcount() == 0);
        let mask_ok = self.mask == self.input.complement();
        let union_ok = raw.is_none_or(|r| matches!(self.input.or(&self.target), Ok(u) if &u == r));
        disjoint && mask_ok && union_ok
    }
}

pub fn draw_p<R: Rng + ?Sized>(cfg: &SamplerConfig, rng: &mut R) -> f64 {
    match cfg.p_mode {
        PMode::Fixed => cfg.p_max,
        PMode::Uniform => cfg.p_min + (cfg.p_max - cfg.p_min) * rng.gen::<f64>(),
    }
}

/// Uniform in-bounds crop origin.
pub fn draw_crop<R: Rng + ?Sized>(data: Shape3, size: Shape3, rng: &mut R) -> Result<CropSpec> {
    CropSpec::new([0, 0, 0], size).check_inside(data)?;
    let origin = [
        rng.gen_range(0..=data.t - size.t),
        rng.gen_range(0..=data.h - size.h),
        rng.gen_range(0..=data.w - size.w),
    ];
    Ok(CropSpec::new(origin, size))
}

/// Draws p, then the crop origin, then the thinning, all from `rng`.
pub fn sample_triple<R: Rng + ?Sized>(
    data: &BitVolume,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<(SplitTriple, f64, CropSpec)> {
    cfg.validate()?;
    let p = draw_p(cfg, rng);
    let crop = draw_crop(data.shape(), cfg.crop, rng)?;
    let raw = data.crop(&crop)?;
    let mut triple = SplitTriple::split(&raw, p, rng)?;
    if cfg.augment_flip_transpose {
        triple = augment(&triple, rng)?;
    }
    Ok((triple, p, crop))
}

/// Spatial symmetry applied identically to all three volumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SpatialOp {
    pub flip_y: bool,
    pub flip_x: bool,
    /// Swap y and x; needs a square crop.
    pub transpose: bool,
}

pub fn apply_op(v: &BitVolume, op: SpatialOp) -> Result<BitVolume> {
    let s = v.shape();
    if op.transpose && s.h != s.w {
        return Err(Error::InvalidArgument(format!(
            "transpose needs a square crop, got {}x{}",
            s.h, s.w
        )));
    }
    if op == SpatialOp::default() {
        return Ok(v.clone());
    }
    let mut out = BitVolume::zeros(s);
    for i in v.iter_ones() {
        let t = i / s.frame_len();
        let mut y = (i / s.w) % s.h;
        let mut x = i % s.w;
        if op.flip_y {
            y = s.h - 1 - y;
        }
        if op.flip_x {
            x = s.w - 1 - x;
        }
        if op.transpose {
            std::mem::swap(&mut y, &mut x);
        }
        out.set_linear(s.index(t, y, x), true);
    }
    Ok(out)
}

pub fn apply_op_triple(t: &SplitTriple, op: SpatialOp) -> Result<SplitTriple> {
    Ok(SplitTriple {
        input: apply_op(&t.input, op)?,
        target: apply_op(&t.target, op)?,
        mask: apply_op(&t.mask, op)?,
    })
}

/// Random flips, plus a random transpose. Non-square crops are rejected
/// because the transpose may be drawn.
pub fn augment<R: Rng + ?Sized>(t: &SplitTriple, rng: &mut R) -> Result<SplitTriple> {
    let s = t.shape();
    if s.h != s.w {
        return Err(Error::InvalidArgument(format!(
            "flip/transpose augmentation needs a square crop, got {}x{}",
            s.h, s.w
        )));
    }
    let op = SpatialOp {
        flip_y: rng.gen(),
        flip_x: rng.gen(),
        transpose: rng.gen(),
    };
    apply_op_triple(t, op)
}
