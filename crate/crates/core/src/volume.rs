//! Binary and dense (t, h, w) volumes.
//!
//! Voxels are linearized `t * (h * w) + y * w + x`. A [`BitVolume`] packs one
//! voxel per bit, LSB-first within each byte, as a single contiguous
//! bitstream; bits past the last voxel in the final byte are always zero.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape3 {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape3 {
    pub fn new(t: usize, h: usize, w: usize) -> Result<Self> {
        let invalid = |reason| Error::InvalidShape { t, h, w, reason };
        if t == 0 || h == 0 || w == 0 {
            return Err(invalid("all dimensions must be at least 1"));
        }
        t.checked_mul(h)
            .and_then(|th| th.checked_mul(w))
            .ok_or_else(|| invalid("element count overflows"))?;
        Ok(Self { t, h, w })
    }

    pub fn len(&self) -> usize {
        self.t * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn frame_len(&self) -> usize {
        self.h * self.w
    }

    #[inline]
    pub fn index(&self, t: usize, y: usize, x: usize) -> usize {
        (t * self.h + y) * self.w + x
    }

    pub fn checked_index(&self, t: usize, y: usize, x: usize) -> Result<usize> {
        if t < self.t && y < self.h && x < self.w {
            Ok(self.index(t, y, x))
        } else {
            Err(Error::IndexOutOfRange {
                t,
                y,
                x,
                shape: self.to_string(),
            })
        }
    }

    /// Checks the format invariants without the constructor's `>= 1` rule
    /// being bypassed by deserialization.
    pub fn validate(&self) -> Result<()> {
        Shape3::new(self.t, self.h, self.w).map(|_| ())
    }
}

impl fmt::Display for Shape3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.t, self.h, self.w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CropSpec {
    /// (t0, y0, x0)
    pub origin: [usize; 3],
    pub size: Shape3,
}

impl CropSpec {
    pub fn new(origin: [usize; 3], size: Shape3) -> Self {
        Self { origin, size }
    }

    pub fn full(shape: Shape3) -> Self {
        Self {
            origin: [0, 0, 0],
            size: shape,
        }
    }

    pub fn check_inside(&self, parent: Shape3) -> Result<()> {
        let [t0, y0, x0] = self.origin;
        let fits = |o: usize, n: usize, dim: usize| o.checked_add(n).is_some_and(|end| end <= dim);
        if fits(t0, self.size.t, parent.t)
            && fits(y0, self.size.h, parent.h)
            && fits(x0, self.size.w, parent.w)
        {
            Ok(())
        } else {
            Err(Error::CropOutOfBounds {
                origin: self.origin,
                size: self.size.to_string(),
                parent: parent.to_string(),
            })
        }
    }
}

fn padding_mask(len: usize) -> u8 {
    match len % 8 {
        0 => 0,
        r => !((1u8 << r) - 1),
    }
}

/// Bit-packed binary photon-event stack.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct BitVolume {
    shape: Shape3,
    bits: Vec<u8>,
}

impl fmt::Debug for BitVolume {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BitVolume")
            .field("shape", &self.shape)
            .field("ones", &self.popcount())
            .finish()
    }
}

impl BitVolume {
    pub fn zeros(shape: Shape3) -> Self {
        Self {
            shape,
            bits: vec![0; shape.len().div_ceil(8)],
        }
    }

    pub fn ones(shape: Shape3) -> Self {
        let mut bits = vec![0xff; shape.len().div_ceil(8)];
        if let Some(last) = bits.last_mut() {
            *last &= !padding_mask(shape.len());
        }
        Self { shape, bits }
    }

    /// Wraps an already packed buffer, rejecting wrong lengths and set
    /// padding bits.
    pub fn from_bytes(shape: Shape3, bits: Vec<u8>) -> Result<Self> {
        let expected = shape.len().div_ceil(8);
        if bits.len() < expected {
            return Err(Error::Truncated {
                expected,
                found: bits.len(),
            });
        }
        if bits.len() > expected {
            return Err(Error::TrailingData(bits.len() - expected));
        }
        if bits.last().is_some_and(|&b| b & padding_mask(shape.len()) != 0) {
            return Err(Error::NonzeroPadding);
        }
        Ok(Self { shape, bits })
    }

    pub fn from_fn(shape: Shape3, mut f: impl FnMut(usize, usize, usize) -> bool) -> Self {
        let mut v = Self::zeros(shape);
        for t in 0..shape.t {
            for y in 0..shape.h {
                for x in 0..shape.w {
                    if f(t, y, x) {
                        v.set_linear(shape.index(t, y, x), true);
                    }
                }
            }
        }
        v
    }

    /// Packs a slice of per-voxel flags in linear order.
    pub fn from_flags(shape: Shape3, flags: &[bool]) -> Result<Self> {
        if flags.len() != shape.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} voxels", shape.len()),
                found: format!("{} voxels", flags.len()),
            });
        }
        let mut v = Self::zeros(shape);
        for (byte, chunk) in v.bits.iter_mut().zip(flags.chunks(8)) {
            *byte = chunk
                .iter()
                .enumerate()
                .fold(0u8, |acc, (i, &b)| acc | (u8::from(b) << i));
        }
        Ok(v)
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bits
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.bits
    }

    #[inline]
    pub fn get_linear(&self, i: usize) -> bool {
        (self.bits[i >> 3] >> (i & 7)) & 1 == 1
    }

    #[inline]
    pub fn set_linear(&mut self, i: usize, b: bool) {
        let mask = 1u8 << (i & 7);
        if b {
            self.bits[i >> 3] |= mask;
        } else {
            self.bits[i >> 3] &= !mask;
        }
    }

    pub fn get(&self, t: usize, y: usize, x: usize) -> Result<bool> {
        Ok(self.get_linear(self.shape.checked_index(t, y, x)?))
    }

    pub fn set(&mut self, t: usize, y: usize, x: usize, b: bool) -> Result<()> {
        let i = self.shape.checked_index(t, y, x)?;
        self.set_linear(i, b);
        Ok(())
    }

    /// Number of 1-voxels.
    pub fn popcount(&self) -> u64 {
        let mut chunks = self.bits.chunks_exact(8);
        let wide: u64 = chunks
            .by_ref()
            .map(|c| u64::from(u64::from_le_bytes(c.try_into().unwrap()).count_ones()))
            .sum();
        wide + chunks
            .remainder()
            .iter()
            .map(|b| u64::from(b.count_ones()))
            .sum::<u64>()
    }

    /// Linear indices of 1-voxels in increasing order.
    pub fn iter_ones(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits.iter().enumerate().flat_map(|(bi, &byte)| {
            let mut b = byte;
            std::iter::from_fn(move || {
                if b == 0 {
                    return None;
                }
                let bit = b.trailing_zeros() as usize;
                b &= b - 1;
                Some(bi * 8 + bit)
            })
        })
    }

    /// Bitwise complement, padding kept zero.
    pub fn complement(&self) -> Self {
        let mut bits: Vec<u8> = self.bits.iter().map(|b| !b).collect();
        if let Some(last) = bits.last_mut() {
            *last &= !padding_mask(self.shape.len());
        }
        Self {
            shape: self.shape,
            bits,
        }
    }

    fn zip_bytes(&self, other: &Self, f: impl Fn(u8, u8) -> u8) -> Result<Self> {
        check_same_shape(self.shape, other.shape)?;
        Ok(Self {
            shape: self.shape,
            bits: self
                .bits
                .iter()
                .zip(&other.bits)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn and(&self, other: &Self) -> Result<Self> {
        self.zip_bytes(other, |a, b| a & b)
    }

    pub fn or(&self, other: &Self) -> Result<Self> {
        self.zip_bytes(other, |a, b| a | b)
    }

    /// `self AND NOT other`.
    pub fn and_not(&self, other: &Self) -> Result<Self> {
        self.zip_bytes(other, |a, b| a & !b)
    }

    pub fn to_dense(&self) -> DenseVolume {
        let mut values = vec![0.0f32; self.shape.len()];
        for i in self.iter_ones() {
            values[i] = 1.0;
        }
        DenseVolume {
            shape: self.shape,
            values,
        }
    }

    pub fn crop(&self, c: &CropSpec) -> Result<Self> {
        c.check_inside(self.shape)?;
        let [t0, y0, x0] = c.origin;
        let s = c.size;
        let mut out = Self::zeros(s);
        let mut dst = 0;
        for t in 0..s.t {
            for y in 0..s.h {
                let src = self.shape.index(t0 + t, y0 + y, x0);
                copy_bits(&self.bits, src, &mut out.bits, dst, s.w);
                dst += s.w;
            }
        }
        Ok(out)
    }

    /// Frames `[start, end)` as a new volume.
    pub fn frames(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end {
            return Err(Error::InvalidArgument(format!(
                "empty frame range {start}..{end}"
            )));
        }
        let size = Shape3::new(end - start, self.shape.h, self.shape.w)?;
        self.crop(&CropSpec::new([start, 0, 0], size))
    }
}

/// Copies `n` bits from `src` starting at bit `from` into `dst` starting at
/// bit `to`. Destination bits outside the range are untouched.
pub(crate) fn copy_bits(src: &[u8], from: usize, dst: &mut [u8], to: usize, n: usize) {
    let mut i = 0;
    // Byte-aligned fast path when both cursors share alignment.
    while i < n {
        let s = from + i;
        let d = to + i;
        if s.is_multiple_of(8) && d.is_multiple_of(8) && n - i >= 8 {
            let bytes = (n - i) / 8;
            dst[d / 8..d / 8 + bytes].copy_from_slice(&src[s / 8..s / 8 + bytes]);
            i += bytes * 8;
            continue;
        }
        let bit = (src[s >> 3] >> (s & 7)) & 1;
        let mask = 1u8 << (d & 7);
        if bit == 1 {
            dst[d >> 3] |= mask;
        } else {
            dst[d >> 3] &= !mask;
        }
        i += 1;
    }
}

pub(crate) fn check_same_shape(a: Shape3, b: Shape3) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::ShapeMismatch {
            expected: a.to_string(),
            found: b.to_string(),
        })
    }
}

/// Real-valued (t, h, w) stack: reference videos, rate maps, reconstructions.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseVolume {
    shape: Shape3,
    values: Vec<f32>,
}

impl DenseVolume {
    pub fn zeros(shape: Shape3) -> Self {
        Self {
            shape,
            values: vec![0.0; shape.len()],
        }
    }

    pub fn filled(shape: Shape3, value: f32) -> Self {
        Self {
            shape,
            values: vec![value; shape.len()],
        }
    }

    pub fn from_vec(shape: Shape3, values: Vec<f32>) -> Result<Self> {
        if values.len() != shape.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} values", shape.len()),
                found: format!("{} values", values.len()),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self { shape, values })
    }

    pub fn from_fn(shape: Shape3, mut f: impl FnMut(usize, usize, usize) -> f32) -> Result<Self> {
        let mut values = Vec::with_capacity(shape.len());
        for t in 0..shape.t {
            for y in 0..shape.h {
                for x in 0..shape.w {
                    values.push(f(t, y, x));
                }
            }
        }
        Self::from_vec(shape, values)
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn get(&self, t: usize, y: usize, x: usize) -> Result<f32> {
        Ok(self.values[self.shape.checked_index(t, y, x)?])
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.shape.frame_len();
        &self.values[t * n..(t + 1) * n]
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().map(|&v| f64::from(v)).sum::<f64>() / self.values.len() as f64
    }

    pub fn max(&self) -> f32 {
        self.values.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn min(&self) -> f32 {
        self.values.iter().copied().fold(f32::INFINITY, f32::min)
    }

    /// Same volume with every value multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            shape: self.shape,
            values: self
                .values
                .iter()
                .map(|&v| (f64::from(v) * factor) as f32)
                .collect(),
        }
    }

    pub fn crop(&self, c: &CropSpec) -> Result<Self> {
        c.check_inside(self.shape)?;
        let [t0, y0, x0] = c.origin;
        let s = c.size;
        let mut values = Vec::with_capacity(s.len());
        for t in 0..s.t {
            for y in 0..s.h {
                let start = self.shape.index(t0 + t, y0 + y, x0);
                values.extend_from_slice(&self.values[start..start + s.w]);
            }
        }
        Ok(Self { shape: s, values })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn shape(t: usize, h: usize, w: usize) -> Shape3 {
        Shape3::new(t, h, w).unwrap()
    }

    #[test]
    fn shape_rejects_zero_and_overflow() {
        assert!(Shape3::new(0, 1, 1).is_err());
        assert!(Shape3::new(1, usize::MAX, 2).is_err());
    }

    #[test]
    fn set_first_voxel_packs_lsb_first() {
        let mut v = BitVolume::zeros(shape(1, 1, 8));
        v.set(0, 0, 0, true).unwrap();
        assert_eq!(v.as_bytes(), &[0b0000_0001]);
    }

    #[test]
    fn zero_volume_reads_zero() {
        let v = BitVolume::zeros(shape(3, 4, 5));
        for t in 0..3 {
            for y in 0..4 {
                for x in 0..5 {
                    assert!(!v.get(t, y, x).unwrap());
                }
            }
        }
    }

    #[test]
    fn set_get_every_voxel_round_trips() {
        let s = shape(4, 4, 8);
        for t in 0..s.t {
            for y in 0..s.h {
                for x in 0..s.w {
                    let mut v = BitVolume::zeros(s);
                    v.set(t, y, x, true).unwrap();
                    assert!(v.get(t, y, x).unwrap());
                    assert_eq!(v.popcount(), 1);
                    assert_eq!(v.iter_ones().collect::<Vec<_>>(), vec![s.index(t, y, x)]);
                }
            }
        }
        let mut v = BitVolume::zeros(s);
        v.set(2, 3, 5, true).unwrap();
        assert!(v.get(2, 3, 5).unwrap());
        assert_eq!(v.popcount(), 1);
    }

    #[test]
    fn out_of_range_index_errors() {
        let mut v = BitVolume::zeros(shape(2, 2, 2));
        assert!(matches!(v.get(2, 0, 0), Err(Error::IndexOutOfRange { .. })));
        assert!(v.set(0, 0, 2, true).is_err());
    }

    #[test]
    fn popcount_edges() {
        assert_eq!(BitVolume::zeros(shape(8, 8, 8)).popcount(), 0);
        let ones = BitVolume::ones(shape(3, 3, 3));
        assert_eq!(ones.popcount(), 27);
        assert_eq!(ones.as_bytes().len(), 4);
        assert_eq!(ones.as_bytes()[3], 0b0000_0111);
    }

    #[test]
    fn from_bytes_rejects_padding_and_length() {
        let s = shape(1, 1, 3);
        assert!(matches!(
            BitVolume::from_bytes(s, vec![0b1000]),
            Err(Error::NonzeroPadding)
        ));
        assert!(matches!(
            BitVolume::from_bytes(s, vec![]),
            Err(Error::Truncated { .. })
        ));
        assert!(matches!(
            BitVolume::from_bytes(s, vec![0, 0]),
            Err(Error::TrailingData(1))
        ));
        assert!(BitVolume::from_bytes(s, vec![0b111]).is_ok());
    }

    #[test]
    fn crop_edges() {
        let s = shape(3, 5, 7);
        let v = BitVolume::from_fn(s, |t, y, x| (t + 2 * y + 3 * x) % 4 == 0);
        assert_eq!(v.crop(&CropSpec::full(s)).unwrap(), v);
        let one = v.crop(&CropSpec::new([2, 4, 6], shape(1, 1, 1))).unwrap();
        assert_eq!(one.get(0, 0, 0).unwrap(), v.get(2, 4, 6).unwrap());
        assert!(matches!(
            v.crop(&CropSpec::new([1, 0, 0], shape(3, 1, 1))),
            Err(Error::CropOutOfBounds { .. })
        ));
        let d = v.to_dense();
        assert!(d.crop(&CropSpec::new([0, 0, 5], shape(1, 1, 3))).is_err());
    }

    fn arb_volume() -> impl Strategy<Value = (Shape3, Vec<bool>)> {
        (1usize..5, 1usize..7, 1usize..19).prop_flat_map(|(t, h, w)| {
            (
                Just(shape(t, h, w)),
                proptest::collection::vec(any::<bool>(), t * h * w),
            )
        })
    }

    proptest! {
        #[test]
        fn pack_unpack_bijection((s, flags) in arb_volume()) {
            let v = BitVolume::from_flags(s, &flags).unwrap();
            for (i, &f) in flags.iter().enumerate() {
                prop_assert_eq!(v.get_linear(i), f);
            }
            let naive = flags.iter().filter(|&&f| f).count() as u64;
            prop_assert_eq!(v.popcount(), naive);
            let again = BitVolume::from_bytes(s, v.as_bytes().to_vec()).unwrap();
            prop_assert_eq!(again, v.clone());
            let c = v.complement();
            prop_assert_eq!(c.popcount() + v.popcount(), s.len() as u64);
            prop_assert_eq!(v.and(&c).unwrap().popcount(), 0);
        }

        #[test]
        fn crop_matches_naive_indexing(
            (s, flags) in arb_volume(),
            a in any::<[u16; 6]>(),
        ) {
            let v = BitVolume::from_flags(s, &flags).unwrap();
            let pick = |dim: usize, r0: u16, r1: u16| {
                let o = r0 as usize % dim;
                let n = 1 + r1 as usize % (dim - o);
                (o, n)
            };
            let (t0, ct) = pick(s.t, a[0], a[1]);
            let (y0, ch) = pick(s.h, a[2], a[3]);
            let (x0, cw) = pick(s.w, a[4], a[5]);
            let c = CropSpec::new([t0, y0, x0], shape(ct, ch, cw));
            let bits = v.crop(&c).unwrap();
            let dense = v.to_dense().crop(&c).unwrap();
            for t in 0..ct {
                for y in 0..ch {
                    for x in 0..cw {
                        let want = flags[s.index(t0 + t, y0 + y, x0 + x)];
                        prop_assert_eq!(bits.get(t, y, x).unwrap(), want);
                        prop_assert_eq!(dense.get(t, y, x).unwrap(), f32::from(u8::from(want)));
                    }
                }
            }
        }
    }
}
