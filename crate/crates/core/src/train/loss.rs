use crate::error::{Error, Result};
use crate::nn::Tensor5;
use crate::volume::{check_same_shape, BitVolume};

/// Masked cross-entropy of one batch.
#[derive(Debug, Clone)]
pub struct LossOutput {
    /// Sum over samples of the unnormalized loss.
    pub raw: f64,
    /// Total target weight `W` over the batch.
    pub weight: f64,
    /// Gradient of `raw / weight` with respect to the logits.
    pub grad: Tensor5,
}

impl LossOutput {
    /// Loss per counted target photon; zero when nothing was counted.
    pub fn per_photon(&self) -> f64 {
        if self.weight > 0.0 {
            self.raw / self.weight
        } else {
            0.0
        }
    }
}

/// Loss and logit gradient of a single volume.
///
/// The softmax runs over the voxels where `mask` is set; masked-out voxels
/// take no part in the normalization and get zero gradient. With
/// `w = mask · target` and `W = Σ w`:
///
/// ```text
/// loss = −Σ_{mask} w_i · log softmax_mask(z)_i
/// grad = mask ⊙ (W · softmax_mask(z) − w)
/// ```
pub fn masked_cross_entropy_sample(logits: &[f32], target: &BitVolume, mask: &BitVolume) -> Result<(f64, f64, Vec<f64>)> {
    check_same_shape(target.shape(), mask.shape())?;
    if logits.len() != target.shape().len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} logits", target.shape().len()),
            found: format!("{}", logits.len()),
        });
    }
    let mut grad = vec![0.0f64; logits.len()];
    let mut w_total = 0.0f64;
    let mut wz = 0.0f64;
    let mut zmax = f64::NEG_INFINITY;
    for i in mask.iter_ones() {
        let z = f64::from(logits[i]);
        zmax = zmax.max(z);
        if target.get_linear(i) {
            w_total += 1.0;
            wz += z;
        }
    }
    if w_total == 0.0 {
        return Ok((0.0, 0.0, grad));
    }
    let mut denom = 0.0f64;
    for i in mask.iter_ones() {
        let e = (f64::from(logits[i]) - zmax).exp();
        grad[i] = e;
        denom += e;
    }
    let lse = zmax + denom.ln();
    let loss = w_total * lse - wz;
    for i in mask.iter_ones() {
        let w = if target.get_linear(i) { 1.0 } else { 0.0 };
        grad[i] = w_total * grad[i] / denom - w;
    }
    Ok((loss, w_total, grad))
}

/// Batched form: softmax per sample, loss normalized by the batch's total
/// target weight.
pub fn masked_cross_entropy(logits: &Tensor5, targets: &[&BitVolume], masks: &[&BitVolume]) -> Result<LossOutput> {
    let dims = logits.dims();
    if dims[1] != 1 || targets.len() != dims[0] || masks.len() != dims[0] {
        return Err(Error::ShapeMismatch {
            expected: format!("{} single-channel samples", dims[0]),
            found: format!("{} targets, {} masks, {} channels", targets.len(), masks.len(), dims[1]),
        });
    }
    let mut raw = 0.0;
    let mut weight = 0.0;
    let mut grads = Vec::with_capacity(dims[0]);
    for b in 0..dims[0] {
        check_same_shape(logits.spatial(), targets[b].shape())?;
        let (l, w, g) = masked_cross_entropy_sample(logits.sample(b), targets[b], masks[b])?;
        raw += l;
        weight += w;
        grads.push(g);
    }
    let scale = if weight > 0.0 { 1.0 / weight } else { 0.0 };
    let data = grads.into_iter().flatten().map(|g| (g * scale) as f32).collect();
    Ok(LossOutput {
        raw,
        weight,
        grad: Tensor5::from_vec(dims, data)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RandomSource;
    use crate::volume::Shape3;
    use rand::Rng;

    fn vol(flags: &[bool]) -> BitVolume {
        BitVolume::from_flags(Shape3::new(1, 1, flags.len()).unwrap(), flags).unwrap()
    }

    #[test]
    fn empty_mask_gives_zero() {
        let t = vol(&[true, false, true]);
        let m = vol(&[false; 3]);
        let (l, w, g) = masked_cross_entropy_sample(&[1.0, 2.0, 3.0], &t, &m).unwrap();
        assert_eq!((l, w), (0.0, 0.0));
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn uniform_logits_single_photon() {
        let n = 50;
        let mut flags = vec![false; n];
        flags[17] = true;
        let (l, w, _) = masked_cross_entropy_sample(&vec![0.3; n], &vol(&flags), &vol(&vec![true; n])).unwrap();
        assert_eq!(w, 1.0);
        assert!((l - (n as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn two_voxel_gradient() {
        let (_, _, g) = masked_cross_entropy_sample(&[0.0, 0.0], &vol(&[true, false]), &vol(&[true, true])).unwrap();
        assert_eq!(g, vec![-0.5, 0.5]);
        // central differences in f64
        let f = |a: f64, b: f64| -> f64 { -(a - (a.exp() + b.exp()).ln()) };
        let eps = 1e-5;
        let d0 = (f(eps, 0.0) - f(-eps, 0.0)) / (2.0 * eps);
        let d1 = (f(0.0, eps) - f(0.0, -eps)) / (2.0 * eps);
        assert!((d0 + 0.5).abs() < 1e-6 && (d1 - 0.5).abs() < 1e-6);
    }

    #[test]
    fn full_mask_is_plain_cross_entropy() {
        let mut rng = RandomSource::new(3).rng();
        let n = 64;
        let z: Vec<f32> = (0..n).map(|_| rng.gen::<f32>() * 4.0 - 2.0).collect();
        let t: Vec<bool> = (0..n).map(|_| rng.gen::<f64>() < 0.1).collect();
        let (l, _, _) = masked_cross_entropy_sample(&z, &vol(&t), &vol(&vec![true; n])).unwrap();
        let log_z: f64 = z.iter().map(|&v| f64::from(v).exp()).sum::<f64>().ln();
        let want: f64 = t
            .iter()
            .zip(&z)
            .filter(|(t, _)| **t)
            .map(|(_, &v)| -(f64::from(v) - log_z))
            .sum();
        assert!((l - want).abs() < 1e-12);
    }

    #[test]
    fn masked_voxels_are_excluded() {
        // a masked-out voxel with a huge logit changes nothing
        let t = vol(&[true, false, false]);
        let m = vol(&[true, true, false]);
        let (a, _, ga) = masked_cross_entropy_sample(&[0.5, -0.2, 0.0], &t, &m).unwrap();
        let (b, _, gb) = masked_cross_entropy_sample(&[0.5, -0.2, 30.0], &t, &m).unwrap();
        assert_eq!(a, b);
        assert_eq!(ga, gb);
        assert_eq!(ga[2], 0.0);
    }

    #[test]
    fn gradient_sums_to_zero_and_matches_closed_form() {
        let mut rng = RandomSource::new(4).rng();
        let n = 300;
        let z: Vec<f32> = (0..n).map(|_| rng.gen::<f32>() * 6.0 - 3.0).collect();
        let t: Vec<bool> = (0..n).map(|_| rng.gen::<f64>() < 0.2).collect();
        let m: Vec<bool> = (0..n).map(|_| rng.gen::<f64>() < 0.7).collect();
        let (_, w, g) = masked_cross_entropy_sample(&z, &vol(&t), &vol(&m)).unwrap();
        let sum: f64 = g.iter().sum();
        assert!(sum.abs() < 1e-6 * w);
        let denom: f64 = (0..n).filter(|&i| m[i]).map(|i| f64::from(z[i]).exp()).sum();
        for i in 0..n {
            let want = if m[i] {
                w * f64::from(z[i]).exp() / denom - f64::from(u8::from(t[i]))
            } else {
                0.0
            };
            assert!((g[i] - want).abs() < 1e-9, "{i}");
        }
    }

    #[test]
    fn batch_normalizes_by_total_weight() {
        let s = Shape3::new(1, 2, 2).unwrap();
        let t1 = BitVolume::from_flags(s, &[true, false, false, false]).unwrap();
        let t2 = BitVolume::from_flags(s, &[true, true, false, false]).unwrap();
        let m = BitVolume::ones(s);
        let logits = Tensor5::from_vec([2, 1, 1, 2, 2], vec![0.0; 8]).unwrap();
        let out = masked_cross_entropy(&logits, &[&t1, &t2], &[&m, &m]).unwrap();
        assert_eq!(out.weight, 3.0);
        assert!((out.per_photon() - 4f64.ln()).abs() < 1e-12);
        assert!(masked_cross_entropy(&logits, &[&t1], &[&m]).is_err());
    }
}
