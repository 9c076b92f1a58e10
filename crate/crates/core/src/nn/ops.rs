//! Per-sample layer primitives with explicit backward passes.
//!
//! Feature maps are `[channel][t][y][x]`, contiguous.

use super::real::{gemm, Mat, Real};
use crate::volume::Shape3;

#[derive(Debug, Clone, PartialEq)]
pub struct Feat<T> {
    pub c: usize,
    pub s: Shape3,
    pub data: Vec<T>,
}

impl<T: Real> Feat<T> {
    pub fn zeros(c: usize, s: Shape3) -> Self {
        Self {
            c,
            s,
            data: vec![T::zero(); c * s.len()],
        }
    }

    pub fn channel(&self, ch: usize) -> &[T] {
        let v = self.s.len();
        &self.data[ch * v..(ch + 1) * v]
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!((self.c, self.s), (other.c, other.s));
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }
}

// ------------------------------------------------------------------ conv

/// 3D convolution, stride 1, "same" zero padding, odd kernel
/// `(kt, ks, ks)`. Weights are `[cout][cin][kt][ks][ks]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub kt: usize,
    pub ks: usize,
}

impl ConvGeom {
    pub fn kvol(&self) -> usize {
        self.kt * self.ks * self.ks
    }

    pub fn weight_len(&self) -> usize {
        self.cout * self.cin * self.kvol()
    }
}

/// Lowers frame `t` of `x` into `col`, shaped `[cin*kvol][h*w]`.
fn im2col_frame<T: Real>(g: &ConvGeom, x: &Feat<T>, t: usize, col: &mut [T]) {
    let s = x.s;
    let (h, w) = (s.h, s.w);
    let hw = h * w;
    let (pt, ps) = (g.kt / 2, g.ks / 2);
    let mut row = 0;
    for ci in 0..g.cin {
        let chan = x.channel(ci);
        for dt in 0..g.kt {
            let st = t as isize + dt as isize - pt as isize;
            for dy in 0..g.ks {
                for dx in 0..g.ks {
                    let dst = &mut col[row * hw..(row + 1) * hw];
                    row += 1;
                    if st < 0 || st >= s.t as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let frame = &chan[st as usize * hw..(st as usize + 1) * hw];
                    let ox = dx as isize - ps as isize;
                    let (x_lo, x_hi) = (
                        (-ox).max(0) as usize,
                        (w as isize - ox).min(w as isize).max(0) as usize,
                    );
                    for y in 0..h {
                        let sy = y as isize + dy as isize - ps as isize;
                        let drow = &mut dst[y * w..(y + 1) * w];
                        if sy < 0 || sy >= h as isize || x_lo >= x_hi {
                            drow.fill(T::zero());
                            continue;
                        }
                        let srow = &frame[sy as usize * w..(sy as usize + 1) * w];
                        drow[..x_lo].fill(T::zero());
                        drow[x_hi..].fill(T::zero());
                        let a = (x_lo as isize + ox) as usize;
                        drow[x_lo..x_hi].copy_from_slice(&srow[a..a + (x_hi - x_lo)]);
                    }
                }
            }
        }
    }
}

/// Blocked transpose of a row-major `rows × cols` matrix.
fn transpose<T: Copy>(src: &[T], rows: usize, cols: usize, dst: &mut [T]) {
    const B: usize = 32;
    for r0 in (0..rows).step_by(B) {
        for c0 in (0..cols).step_by(B) {
            for r in r0..(r0 + B).min(rows) {
                for c in c0..(c0 + B).min(cols) {
                    dst[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
}

pub fn conv_forward<T: Real>(g: &ConvGeom, weight: &[T], bias: &[T], x: &Feat<T>) -> Feat<T> {
    debug_assert_eq!(x.c, g.cin);
    debug_assert_eq!(weight.len(), g.weight_len());
    let s = x.s;
    let v = s.len();
    let mut out = Feat::zeros(g.cout, s);
    for (co, chunk) in out.data.chunks_mut(v).enumerate() {
        chunk.fill(bias[co]);
    }
    let kc = g.cin * g.kvol();
    let wm = Mat::row_major(0, g.cout, kc, kc);
    if g.kvol() == 1 {
        gemm(
            weight,
            wm,
            &x.data,
            Mat::row_major(0, g.cin, v, v),
            T::one(),
            &mut out.data,
            Mat::row_major(0, g.cout, v, v),
        );
        return out;
    }
    let hw = s.frame_len();
    let mut col = vec![T::zero(); kc * hw];
    for t in 0..s.t {
        im2col_frame(g, x, t, &mut col);
        // out^T = col^T · w^T keeps the long pixel axis as GEMM rows
        gemm(
            &col,
            Mat::row_major(0, kc, hw, hw).t(),
            weight,
            wm.t(),
            T::one(),
            &mut out.data,
            Mat::row_major(t * hw, g.cout, hw, v).t(),
        );
    }
    out
}

/// Returns the input gradient; weight and bias gradients are accumulated
/// into `gw`, `gb`.
pub fn conv_backward<T: Real>(
    g: &ConvGeom,
    weight: &[T],
    x: &Feat<T>,
    gout: &Feat<T>,
    gw: &mut [T],
    gb: &mut [T],
) -> Feat<T> {
    let s = x.s;
    let v = s.len();
    for (co, chunk) in gout.data.chunks(v).enumerate() {
        let sum = chunk.iter().fold(0.0f64, |a, &b| a + b.to_f64());
        gb[co] = gb[co] + T::of(sum);
    }
    let kc = g.cin * g.kvol();
    let wm = Mat::row_major(0, g.cout, kc, kc);
    let mut gx = Feat::zeros(g.cin, s);
    if g.kvol() == 1 {
        gemm(
            &gout.data,
            Mat::row_major(0, g.cout, v, v),
            &x.data,
            Mat::row_major(0, g.cin, v, v).t(),
            T::one(),
            gw,
            wm,
        );
        gemm(
            weight,
            wm.t(),
            &gout.data,
            Mat::row_major(0, g.cout, v, v),
            T::zero(),
            &mut gx.data,
            Mat::row_major(0, g.cin, v, v),
        );
        return gx;
    }
    let hw = s.frame_len();
    let mut col = vec![T::zero(); kc * hw];
    let mut col_t = vec![T::zero(); kc * hw];
    for t in 0..s.t {
        im2col_frame(g, x, t, &mut col);
        // GEMM packing is far faster on a contiguous [pixel][tap] operand
        transpose(&col, kc, hw, &mut col_t);
        gemm(
            &gout.data,
            Mat::row_major(t * hw, g.cout, hw, v),
            &col_t,
            Mat::row_major(0, hw, kc, kc),
            T::one(),
            gw,
            wm,
        );
    }
    // the input gradient of a stride-1 "same" convolution is the
    // convolution of the output gradient with the flipped, transposed kernel
    let flipped = ConvGeom {
        cin: g.cout,
        cout: g.cin,
        ..*g
    };
    let kv = g.kvol();
    let mut wf = vec![T::zero(); weight.len()];
    for co in 0..g.cout {
        for ci in 0..g.cin {
            for k in 0..kv {
                wf[(ci * g.cout + co) * kv + (kv - 1 - k)] = weight[(co * g.cin + ci) * kv + k];
            }
        }
    }
    conv_forward(&flipped, &wf, &vec![T::zero(); g.cin], gout)
}

// ------------------------------------------------------------ group norm

pub const NORM_EPS: f64 = 1e-5;

/// Per-group `(mean, 1/sqrt(var + eps))`.
#[derive(Debug, Clone)]
pub struct NormStats {
    pub groups: usize,
    pub mean: Vec<f64>,
    pub rstd: Vec<f64>,
}

/// Normalizes each group of `c / groups` channels over all its channels and
/// voxels, then applies the per-channel affine. A constant group maps to
/// exactly zero before the affine.
pub fn group_norm_forward<T: Real>(
    x: &Feat<T>,
    groups: usize,
    scale: &[T],
    shift: &[T],
) -> (Feat<T>, NormStats) {
    debug_assert_eq!(x.c % groups, 0);
    let v = x.s.len();
    let n = x.c / groups * v;
    let mut out = Feat::zeros(x.c, x.s);
    let mut mean = Vec::with_capacity(groups);
    let mut rstd = Vec::with_capacity(groups);
    for g in 0..groups {
        let xs = &x.data[g * n..(g + 1) * n];
        let first = xs[0];
        let m = if xs.iter().all(|&a| a == first) {
            first.to_f64()
        } else {
            xs.iter().fold(0.0, |a, &b| a + b.to_f64()) / n as f64
        };
        let var = xs
            .iter()
            .fold(0.0, |a, &b| a + (b.to_f64() - m).powi(2))
            / n as f64;
        let r = 1.0 / (var + NORM_EPS).sqrt();
        mean.push(m);
        rstd.push(r);
        let (tm, tr) = (T::of(m), T::of(r));
        let ys = &mut out.data[g * n..(g + 1) * n];
        for (ci, (yc, xc)) in ys.chunks_mut(v).zip(xs.chunks(v)).enumerate() {
            let ch = g * (x.c / groups) + ci;
            let (a, b) = (scale[ch], shift[ch]);
            for (y, &xv) in yc.iter_mut().zip(xc) {
                *y = a * ((xv - tm) * tr) + b;
            }
        }
    }
    (out, NormStats { groups, mean, rstd })
}

/// Returns the input gradient; accumulates affine gradients.
pub fn group_norm_backward<T: Real>(
    x: &Feat<T>,
    stats: &NormStats,
    scale: &[T],
    gy: &Feat<T>,
    gscale: &mut [T],
    gshift: &mut [T],
) -> Feat<T> {
    let v = x.s.len();
    let cpg = x.c / stats.groups;
    let n = cpg * v;
    let mut gx = Feat::zeros(x.c, x.s);
    for g in 0..stats.groups {
        let (m, r) = (stats.mean[g], stats.rstd[g]);
        let (mut sum_d, mut sum_dx) = (0.0f64, 0.0f64);
        for ci in 0..cpg {
            let ch = g * cpg + ci;
            let (xs, gs) = (x.channel(ch), gy.channel(ch));
            let (mut ds, mut dsh) = (0.0f64, 0.0f64);
            let a = scale[ch].to_f64();
            for (&xv, &gv) in xs.iter().zip(gs) {
                let xhat = (xv.to_f64() - m) * r;
                let gv = gv.to_f64();
                ds += gv * xhat;
                dsh += gv;
                sum_d += gv * a;
                sum_dx += gv * a * xhat;
            }
            gscale[ch] = gscale[ch] + T::of(ds);
            gshift[ch] = gshift[ch] + T::of(dsh);
        }
        let (mean_d, mean_dx) = (sum_d / n as f64, sum_dx / n as f64);
        for ci in 0..cpg {
            let ch = g * cpg + ci;
            let a = scale[ch].to_f64();
            let xs = x.channel(ch);
            let gs = gy.channel(ch);
            let out = &mut gx.data[ch * v..(ch + 1) * v];
            for ((o, &xv), &gv) in out.iter_mut().zip(xs).zip(gs) {
                let xhat = (xv.to_f64() - m) * r;
                *o = T::of(r * (gv.to_f64() * a - mean_d - xhat * mean_dx));
            }
        }
    }
    gx
}

// ------------------------------------------------------------------ GELU

const INV_SQRT2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact (erf-based) GELU.
pub fn gelu<T: Real>(x: &Feat<T>) -> Feat<T> {
    let half = T::of(0.5);
    let k = T::of(INV_SQRT2);
    Feat {
        c: x.c,
        s: x.s,
        data: x
            .data
            .iter()
            .map(|&v| half * v * (T::one() + (v * k).erf()))
            .collect(),
    }
}

pub fn gelu_backward<T: Real>(x: &Feat<T>, gy: &Feat<T>) -> Feat<T> {
    let half = T::of(0.5);
    let k = T::of(INV_SQRT2);
    let c = T::of(INV_SQRT_2PI);
    Feat {
        c: x.c,
        s: x.s,
        data: x
            .data
            .iter()
            .zip(&gy.data)
            .map(|(&v, &g)| {
                let d = half * (T::one() + (v * k).erf()) + v * c * (-(v * v) * half).exp();
                g * d
            })
            .collect(),
    }
}

// -------------------------------------------------------------- max pool

/// Max pool with window `(pt, 2, 2)` and equal stride. Returns the argmax
/// (flat input index) of each output; ties go to the first in scan order.
pub fn max_pool<T: Real>(x: &Feat<T>, pt: usize) -> (Feat<T>, Vec<u32>) {
    let s = x.s;
    let os = Shape3 {
        t: s.t / pt,
        h: s.h / 2,
        w: s.w / 2,
    };
    let mut out = Feat::zeros(x.c, os);
    let mut arg = vec![0u32; out.data.len()];
    let mut o = 0;
    for c in 0..x.c {
        let base = c * s.len();
        for t in 0..os.t {
            for y in 0..os.h {
                for xx in 0..os.w {
                    let mut best = T::neg_infinity();
                    let mut bi = 0;
                    for dt in 0..pt {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let i = base + s.index(t * pt + dt, 2 * y + dy, 2 * xx + dx);
                                if x.data[i] > best {
                                    best = x.data[i];
                                    bi = i;
                                }
                            }
                        }
                    }
                    out.data[o] = best;
                    arg[o] = bi as u32;
                    o += 1;
                }
            }
        }
    }
    (out, arg)
}

pub fn max_pool_backward<T: Real>(input_c: usize, input_s: Shape3, arg: &[u32], gy: &Feat<T>) -> Feat<T> {
    let mut gx = Feat::zeros(input_c, input_s);
    for (&i, &g) in arg.iter().zip(&gy.data) {
        gx.data[i as usize] = gx.data[i as usize] + g;
    }
    gx
}

// --------------------------------------------------------- pixel shuffle

/// Sub-pixel upsampling by 2 in (h, w), and in t when `temporal`.
///
/// Output channel `c` at `(rt·t + a, 2y + i, 2x + j)` reads input channel
/// `c·f + (a·2 + i)·2 + j` at `(t, y, x)` with `f = 8` (temporal) or 4.
pub fn pixel_shuffle<T: Real>(x: &Feat<T>, temporal: bool) -> Feat<T> {
    let rt = if temporal { 2 } else { 1 };
    let f = rt * 4;
    let s = x.s;
    let os = Shape3 {
        t: s.t * rt,
        h: s.h * 2,
        w: s.w * 2,
    };
    let oc = x.c / f;
    let mut out = Feat::zeros(oc, os);
    for c in 0..oc {
        for a in 0..rt {
            for i in 0..2 {
                for j in 0..2 {
                    let src = x.channel(c * f + (a * 2 + i) * 2 + j);
                    let dst_base = c * os.len();
                    for t in 0..s.t {
                        for y in 0..s.h {
                            let srow = &src[s.index(t, y, 0)..s.index(t, y, 0) + s.w];
                            let drow = dst_base + os.index(t * rt + a, 2 * y + i, j);
                            for (xx, &v) in srow.iter().enumerate() {
                                out.data[drow + 2 * xx] = v;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Exact inverse of [`pixel_shuffle`]; also its backward pass.
pub fn pixel_unshuffle<T: Real>(y: &Feat<T>, temporal: bool) -> Feat<T> {
    let rt = if temporal { 2 } else { 1 };
    let f = rt * 4;
    let os = y.s;
    let s = Shape3 {
        t: os.t / rt,
        h: os.h / 2,
        w: os.w / 2,
    };
    let mut out = Feat::zeros(y.c * f, s);
    for c in 0..y.c {
        let src = y.channel(c);
        for a in 0..rt {
            for i in 0..2 {
                for j in 0..2 {
                    let dst_base = (c * f + (a * 2 + i) * 2 + j) * s.len();
                    for t in 0..s.t {
                        for yy in 0..s.h {
                            let srow = os.index(t * rt + a, 2 * yy + i, j);
                            let drow = dst_base + s.index(t, yy, 0);
                            for xx in 0..s.w {
                                out.data[drow + xx] = src[srow + 2 * xx];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn concat<T: Real>(a: &Feat<T>, b: &Feat<T>) -> Feat<T> {
    debug_assert_eq!(a.s, b.s);
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Feat {
        c: a.c + b.c,
        s: a.s,
        data,
    }
}

pub fn split<T: Real>(x: &Feat<T>, first: usize) -> (Feat<T>, Feat<T>) {
    let n = first * x.s.len();
    (
        Feat {
            c: first,
            s: x.s,
            data: x.data[..n].to_vec(),
        },
        Feat {
            c: x.c - first,
            s: x.s,
            data: x.data[n..].to_vec(),
        },
    )
}
