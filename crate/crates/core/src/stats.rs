//! Photon statistics of 1-bit detectors.
//!
//! A pixel exposed to Poisson(λ) photons reports 1 whenever at least one
//! photon arrived, so each voxel is Bernoulli(1 − e^−λ). Thinning routes each
//! detection to an input or a target volume; superposition and temporal
//! binning sum binary frames back into counts.

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::rng::{tags, RandomSource};
use crate::volume::{check_same_shape, BitVolume, DenseVolume, Shape3};

/// Detector response to a Poisson rate, truncated at one count.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruncatedPoisson {
    lambda: f64,
}

impl TruncatedPoisson {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "rate must be finite and non-negative, got {lambda}"
            )));
        }
        Ok(Self { lambda })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// P(k = 0) = e^−λ
    pub fn p0(&self) -> f64 {
        (-self.lambda).exp()
    }

    /// P(k = 1) = 1 − e^−λ, computed without cancellation for small λ.
    pub fn p1(&self) -> f64 {
        -(-self.lambda).exp_m1()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> bool {
        rng.gen::<f64>() < self.p1()
    }
}

pub fn activation_prob(lambda: f64) -> Result<f64> {
    Ok(TruncatedPoisson::new(lambda)?.p1())
}

pub(crate) fn check_probability(p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::InvalidProbability(p))
    }
}

/// Splits every detection of `raw` into `input` (probability `p`) or
/// `target`.
///
/// One uniform draw is consumed per 1-voxel, in linear voxel order; zero
/// voxels consume nothing.
pub fn thin<R: Rng + ?Sized>(raw: &BitVolume, p: f64, rng: &mut R) -> Result<(BitVolume, BitVolume)> {
    check_probability(p)?;
    let bytes = raw.as_bytes();
    let mut input = vec![0u8; bytes.len()];
    let mut target = vec![0u8; bytes.len()];
    for (i, &byte) in bytes.iter().enumerate() {
        let mut b = byte;
        while b != 0 {
            let bit = 1u8 << b.trailing_zeros();
            b &= b - 1;
            if rng.gen::<f64>() < p {
                input[i] |= bit;
            } else {
                target[i] |= bit;
            }
        }
    }
    let shape = raw.shape();
    Ok((
        BitVolume::from_bytes(shape, input)?,
        BitVolume::from_bytes(shape, target)?,
    ))
}

/// Voxel-wise count of detections across equally shaped volumes.
pub fn superpose(vs: &[BitVolume]) -> Result<DenseVolume> {
    let first = vs
        .first()
        .ok_or_else(|| Error::InvalidArgument("superpose needs at least one volume".into()))?;
    let shape = first.shape();
    let mut counts = vec![0u32; shape.len()];
    for v in vs {
        check_same_shape(shape, v.shape())?;
        for i in v.iter_ones() {
            counts[i] += 1;
        }
    }
    DenseVolume::from_vec(shape, counts.into_iter().map(|c| c as f32).collect())
}

/// Sums consecutive windows of `n` frames. A trailing partial window is
/// dropped. Counts are Binomial(n, 1 − e^−λ), not Poisson.
pub fn bin_temporal(v: &BitVolume, n: usize) -> Result<DenseVolume> {
    let s = v.shape();
    if n == 0 {
        return Err(Error::InvalidArgument("bin window must be >= 1".into()));
    }
    if n > s.t {
        return Err(Error::InvalidArgument(format!(
            "bin window {n} exceeds frame count {}",
            s.t
        )));
    }
    let out_shape = Shape3::new(s.t / n, s.h, s.w)?;
    let frame = s.frame_len();
    let mut counts = vec![0u32; out_shape.len()];
    let kept = out_shape.t * n * frame;
    for i in v.iter_ones().take_while(|&i| i < kept) {
        let t = i / frame;
        counts[(t / n) * frame + i % frame] += 1;
    }
    DenseVolume::from_vec(out_shape, counts.into_iter().map(|c| c as f32).collect())
}

/// Per-frame intensity estimate from temporal binning: every frame gets
/// its window's mean detection rate. Frames in the dropped trailing window
/// reuse the last complete window.
pub fn binning_estimate(v: &BitVolume, n: usize) -> Result<DenseVolume> {
    let binned = bin_temporal(v, n)?;
    let s = v.shape();
    let windows = binned.shape().t;
    let inv = 1.0 / n as f32;
    let mut values = Vec::with_capacity(s.len());
    for t in 0..s.t {
        let w = (t / n).min(windows - 1);
        values.extend(binned.frame(w).iter().map(|&c| c * inv));
    }
    DenseVolume::from_vec(s, values)
}

/// Pearson correlation of two equally long binary sequences given as
/// paired flags. Returns `None` when either side is constant.
pub fn binary_correlation(pairs: impl Iterator<Item = (bool, bool)>) -> Option<f64> {
    let (mut n, mut sa, mut sb, mut sab) = (0f64, 0f64, 0f64, 0f64);
    for (a, b) in pairs {
        let (a, b) = (f64::from(u8::from(a)), f64::from(u8::from(b)));
        n += 1.0;
        sa += a;
        sb += b;
        sab += a * b;
    }
    let cov = sab / n - (sa / n) * (sb / n);
    let va = sa / n - (sa / n).powi(2);
    let vb = sb / n - (sb / n).powi(2);
    if va <= 0.0 || vb <= 0.0 {
        None
    } else {
        Some(cov / (va * vb).sqrt())
    }
}

/// Outcome of one statistical check.
#[derive(Debug, Clone, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Two-sided critical value of the standard normal at α = 0.01.
pub const Z_CRIT_001: f64 = 2.575_829_303_548_901;

/// Executable versions of the detector-statistics claims: thinning
/// partition, activation rates, the Bernoulli / clipped-Poisson equivalence,
/// thinned marginals, and the perfect anti-correlation of split pairs.
pub fn battery(seed: u64) -> Vec<CheckOutcome> {
    let src = RandomSource::new(seed);
    let mut out = vec![partition_check(&src.derive(tags::BATTERY, 0), 10_000)];
    for (k, &lambda) in [0.01, 0.0625, 0.5].iter().enumerate() {
        out.push(activation_rate_check(
            &src.derive(tags::BATTERY, 10 + k as u64),
            lambda,
            1_000_000,
        ));
        out.push(poisson_clip_check(
            &src.derive(tags::BATTERY, 20 + k as u64),
            lambda,
            1_000_000,
        ));
    }
    out.push(thinned_marginal_check(&src.derive(tags::BATTERY, 30), 0.3, 200_000));
    out.push(split_correlation_check(&src.derive(tags::BATTERY, 31), 0.5));
    out
}

/// Thins `count` random small volumes at random p and checks
/// `input AND target = 0`, `input OR target = raw` on every one.
pub fn partition_check(src: &RandomSource, count: usize) -> CheckOutcome {
    let mut rng = src.rng();
    let mut failures = 0usize;
    let mut voxels = 0usize;
    for _ in 0..count {
        let shape = Shape3::new(rng.gen_range(1..=4), rng.gen_range(1..=8), rng.gen_range(1..=9))
            .expect("non-empty");
        let density: f64 = rng.gen();
        let flags: Vec<bool> = (0..shape.len()).map(|_| rng.gen::<f64>() < density).collect();
        let raw = BitVolume::from_flags(shape, &flags).expect("sized");
        let p: f64 = rng.gen();
        let (inp, tar) = thin(&raw, p, &mut rng).expect("valid p");
        voxels += shape.len();
        let ok = inp.and(&tar).expect("same shape").popcount() == 0
            && inp.or(&tar).expect("same shape") == raw;
        if !ok {
            failures += 1;
        }
    }
    CheckOutcome {
        name: "thin_partition".into(),
        passed: failures == 0,
        detail: format!("{count} volumes, {voxels} voxels, {failures} violations"),
    }
}

/// Empirical activation rate of constant-rate sampling against
/// 1 − e^−λ with a 3σ binomial interval.
pub fn activation_rate_check(src: &RandomSource, lambda: f64, draws: usize) -> CheckOutcome {
    let p = activation_prob(lambda).expect("valid rate");
    let mut rng = src.rng();
    let d = TruncatedPoisson::new(lambda).expect("valid rate");
    let ones = (0..draws).filter(|_| d.sample(&mut rng)).count();
    let rate = ones as f64 / draws as f64;
    let sigma = (p * (1.0 - p) / draws as f64).sqrt();
    CheckOutcome {
        name: format!("activation_rate(lambda={lambda})"),
        passed: (rate - p).abs() <= 3.0 * sigma,
        detail: format!("empirical {rate:.6}, expected {p:.6} +- {:.6}", 3.0 * sigma),
    }
}

/// Two-proportion z-test of Bernoulli(1 − e^−λ) against Poisson(λ)
/// clipped at one.
pub fn poisson_clip_check(src: &RandomSource, lambda: f64, draws: usize) -> CheckOutcome {
    let mut rng = src.rng();
    let d = TruncatedPoisson::new(lambda).expect("valid rate");
    let bern = (0..draws).filter(|_| d.sample(&mut rng)).count() as f64;
    let poisson = Poisson::new(lambda).expect("positive rate");
    let clipped = (0..draws).filter(|_| poisson.sample(&mut rng) >= 1.0).count() as f64;
    let n = draws as f64;
    let pooled = (bern + clipped) / (2.0 * n);
    let se = (pooled * (1.0 - pooled) * 2.0 / n).sqrt();
    let z = if se > 0.0 { (bern - clipped) / n / se } else { 0.0 };
    CheckOutcome {
        name: format!("bernoulli_vs_poisson_clip(lambda={lambda})"),
        passed: z.abs() < Z_CRIT_001,
        detail: format!(
            "bernoulli {:.6}, clipped poisson {:.6}, z = {z:.3}",
            bern / n,
            clipped / n
        ),
    }
}

/// Fraction of detections routed to the input converges to p.
pub fn thinned_marginal_check(src: &RandomSource, p: f64, ones: usize) -> CheckOutcome {
    let raw = BitVolume::ones(Shape3::new(1, 1, ones).expect("non-empty"));
    let (inp, _) = thin(&raw, p, &mut src.rng()).expect("valid p");
    let frac = inp.popcount() as f64 / ones as f64;
    let sigma = (p * (1.0 - p) / ones as f64).sqrt();
    CheckOutcome {
        name: format!("thinned_marginal(p={p})"),
        passed: (frac - p).abs() <= 3.0 * sigma,
        detail: format!("empirical {frac:.6}, expected {p} +- {:.6}", 3.0 * sigma),
    }
}

/// Over detected voxels the split pair is exactly anti-correlated, so the
/// two halves are never conditionally independent.
pub fn split_correlation_check(src: &RandomSource, p: f64) -> CheckOutcome {
    let mut rng = src.rng();
    let shape = Shape3::new(8, 32, 32).expect("non-empty");
    let flags: Vec<bool> = (0..shape.len()).map(|_| rng.gen::<f64>() < 0.2).collect();
    let raw = BitVolume::from_flags(shape, &flags).expect("sized");
    let (inp, tar) = thin(&raw, p, &mut rng).expect("valid p");
    let corr = binary_correlation(raw.iter_ones().map(|i| (inp.get_linear(i), tar.get_linear(i))));
    CheckOutcome {
        name: "split_anticorrelation".into(),
        passed: corr == Some(-1.0) || corr.is_some_and(|c| (c + 1.0).abs() < 1e-12),
        detail: format!("correlation over detected voxels = {corr:?}"),
    }
}
