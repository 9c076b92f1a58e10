//! Hybrid 3D/2D residual U-Net.
//!
//! Level `l` has `start_features · depth_scale^l` channels. The first
//! `z_conv_levels` levels convolve with 3×3×3 kernels, deeper levels with
//! 1×3×3 so the temporal receptive field stops growing. Pooling into a 3D
//! level is 2×2×2, into a 2D level 1×2×2; upsampling mirrors that with a
//! pixel shuffle (channel factor 8 or 4) followed by a 1×1×1 convolution.
//!
//! Every block is three convolutions, each followed by group norm and GELU,
//! with the output of the first added back after the second:
//!
//! ```text
//! h1 = gelu(norm(conv1(x)))
//! h2 = gelu(norm(conv2(h1))) + h1
//! h3 = gelu(norm(conv3(h2)))
//! ```

use serde::{Deserialize, Serialize};

use super::ops::{self, ConvGeom, Feat, NormStats};
use super::real::Real;
use crate::error::{Error, Result};
use crate::volume::Shape3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpMode {
    PixelShuffle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DownMode {
    MaxPool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Gelu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub depth: usize,
    pub start_features: usize,
    pub depth_scale: usize,
    /// Number of leading levels that use 3D kernels.
    pub z_conv_levels: usize,
    pub group_norm: bool,
    /// Number of groups per normalization layer.
    pub norm_groups: usize,
    pub up_mode: UpMode,
    pub down_mode: DownMode,
    pub activation: Activation,
}

impl Default for ModelConfig {
    /// Desk-scale network.
    fn default() -> Self {
        Self {
            depth: 3,
            start_features: 8,
            depth_scale: 2,
            z_conv_levels: 1,
            group_norm: true,
            norm_groups: 4,
            up_mode: UpMode::PixelShuffle,
            down_mode: DownMode::MaxPool,
            activation: Activation::Gelu,
        }
    }
}

impl ModelConfig {
    /// The full-size network: depth 5, 32 features, two 3D levels, eight
    /// normalization groups.
    pub fn full() -> Self {
        Self {
            depth: 5,
            start_features: 32,
            depth_scale: 2,
            z_conv_levels: 2,
            group_norm: true,
            norm_groups: 8,
            ..Self::default()
        }
    }

    pub fn channels(&self, level: usize) -> usize {
        self.start_features * self.depth_scale.pow(level as u32)
    }

    pub fn is_3d(&self, level: usize) -> bool {
        level < self.z_conv_levels
    }

    /// Number of poolings that also halve the temporal axis.
    pub fn temporal_pools(&self) -> usize {
        (1..self.depth).filter(|&l| self.is_3d(l)).count()
    }

    pub fn spatial_multiple(&self) -> usize {
        1 << (self.depth - 1)
    }

    pub fn temporal_multiple(&self) -> usize {
        1 << self.temporal_pools()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.depth == 0 || self.start_features == 0 || self.depth_scale == 0 {
            return bad("depth, start_features and depth_scale must be >= 1".into());
        }
        if self.z_conv_levels > self.depth {
            return bad(format!(
                "z_conv_levels {} exceeds depth {}",
                self.z_conv_levels, self.depth
            ));
        }
        if self.group_norm {
            if self.norm_groups == 0 {
                return bad("norm_groups must be >= 1".into());
            }
            for l in 0..self.depth {
                if !self.channels(l).is_multiple_of(self.norm_groups) {
                    return bad(format!(
                        "level {l} has {} channels, not divisible by {} groups",
                        self.channels(l),
                        self.norm_groups
                    ));
                }
            }
        }
        for l in 1..self.depth {
            let f = if self.is_3d(l) { 8 } else { 4 };
            if !self.channels(l).is_multiple_of(f) {
                return bad(format!(
                    "level {l} has {} channels, not divisible by the pixel-shuffle factor {f}",
                    self.channels(l)
                ));
            }
        }
        Ok(())
    }

    /// Checks a crop or tile shape against the pooling pyramid.
    pub fn check_input(&self, s: Shape3) -> Result<()> {
        let (sm, tm) = (self.spatial_multiple(), self.temporal_multiple());
        if !s.h.is_multiple_of(sm) || !s.w.is_multiple_of(sm) || !s.t.is_multiple_of(tm) {
            return Err(Error::ShapeMismatch {
                expected: format!("t divisible by {tm}, h and w divisible by {sm}"),
                found: s.to_string(),
            });
        }
        Ok(())
    }

    /// Architecture fingerprint stored in checkpoints.
    pub fn fingerprint(&self) -> String {
        format!(
            "resunet-d{}-f{}-s{}-z{}-gn{}-ps-mp-gelu-p{}",
            self.depth,
            self.start_features,
            self.depth_scale,
            self.z_conv_levels,
            if self.group_norm { self.norm_groups } else { 0 },
            self.parameter_count()
        )
    }

    /// Closed-form parameter count.
    ///
    /// With `C_l` channels and kernel volume `K_l` (27 for 3D levels, 9 for
    /// 2D) at level `l`, `n = 2` norm parameters per channel when group
    /// norm is on (else 0), and `conv(i, o, k) = o·i·k + o`:
    ///
    /// ```text
    /// down_l = conv(C_{l-1}, C_l, K_l) + 2·conv(C_l, C_l, K_l) + 3·n·C_l   (C_{-1} = 1)
    /// up_l   = conv(C_{l+1}/r_l, C_l, 1) + conv(2C_l, C_l, K_l)
    ///          + 2·conv(C_l, C_l, K_l) + 3·n·C_l                           (l < depth-1)
    /// head   = conv(C_0, 1, 1)
    /// ```
    ///
    /// where `r_l` is 8 if level `l+1` is 3D and 4 otherwise.
    pub fn parameter_count(&self) -> usize {
        let conv = |i: usize, o: usize, k: usize| o * i * k + o;
        let n = if self.group_norm { 2 } else { 0 };
        let k = |l: usize| if self.is_3d(l) { 27 } else { 9 };
        let mut total = conv(self.channels(0), 1, 1);
        for l in 0..self.depth {
            let c = self.channels(l);
            let cin = if l == 0 { 1 } else { self.channels(l - 1) };
            total += conv(cin, c, k(l)) + 2 * conv(c, c, k(l)) + 3 * n * c;
            if l + 1 < self.depth {
                let r = if self.is_3d(l + 1) { 8 } else { 4 };
                total += conv(self.channels(l + 1) / r, c, 1)
                    + conv(2 * c, c, k(l))
                    + 2 * conv(c, c, k(l))
                    + 3 * n * c;
            }
        }
        total
    }
}

/// Named parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvLayer {
    geom: ConvGeom,
    weight: usize,
    bias: usize,
}

#[derive(Debug, Clone, Copy)]
struct NormLayer {
    scale: usize,
    shift: usize,
}

#[derive(Debug, Clone)]
struct Block {
    convs: [ConvLayer; 3],
    norms: Option<[NormLayer; 3]>,
}

#[derive(Debug, Clone)]
struct UpPath {
    temporal: bool,
    post: ConvLayer,
    block: Block,
}

#[derive(Debug, Clone)]
struct Level {
    temporal_pool: bool,
    down: Block,
    up: Option<UpPath>,
}

/// Layer graph with parameter indices, built from a [`ModelConfig`].
#[derive(Debug, Clone)]
pub struct Arch {
    cfg: ModelConfig,
    levels: Vec<Level>,
    head: ConvLayer,
    specs: Vec<ParamSpec>,
    groups: usize,
}

struct Builder {
    specs: Vec<ParamSpec>,
}

impl Builder {
    fn conv(&mut self, name: &str, geom: ConvGeom) -> ConvLayer {
        let weight = self.specs.len();
        self.specs.push(ParamSpec {
            name: format!("{name}.weight"),
            shape: vec![geom.cout, geom.cin, geom.kt, geom.ks, geom.ks],
        });
        self.specs.push(ParamSpec {
            name: format!("{name}.bias"),
            shape: vec![geom.cout],
        });
        ConvLayer {
            geom,
            weight,
            bias: weight + 1,
        }
    }

    fn norm(&mut self, name: &str, c: usize) -> NormLayer {
        let scale = self.specs.len();
        self.specs.push(ParamSpec {
            name: format!("{name}.scale"),
            shape: vec![c],
        });
        self.specs.push(ParamSpec {
            name: format!("{name}.shift"),
            shape: vec![c],
        });
        NormLayer {
            scale,
            shift: scale + 1,
        }
    }

    fn block(&mut self, prefix: &str, cin: usize, c: usize, kt: usize, norm: bool) -> Block {
        let g = |cin| ConvGeom { cin, cout: c, kt, ks: 3 };
        let mut convs = Vec::with_capacity(3);
        let mut norms = Vec::with_capacity(3);
        for (i, ci) in [cin, c, c].into_iter().enumerate() {
            convs.push(self.conv(&format!("{prefix}.conv{}", i + 1), g(ci)));
            if norm {
                norms.push(self.norm(&format!("{prefix}.norm{}", i + 1), c));
            }
        }
        Block {
            convs: convs.try_into().unwrap(),
            norms: norm.then(|| norms.try_into().unwrap()),
        }
    }
}

impl Arch {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut b = Builder { specs: Vec::new() };
        let kt = |l: usize| if cfg.is_3d(l) { 3 } else { 1 };
        let mut levels = Vec::with_capacity(cfg.depth);
        for l in 0..cfg.depth {
            let cin = if l == 0 { 1 } else { cfg.channels(l - 1) };
            let down = b.block(&format!("down{l}"), cin, cfg.channels(l), kt(l), cfg.group_norm);
            levels.push(Level {
                temporal_pool: l > 0 && cfg.is_3d(l),
                down,
                up: None,
            });
        }
        for l in (0..cfg.depth.saturating_sub(1)).rev() {
            let c = cfg.channels(l);
            let temporal = cfg.is_3d(l + 1);
            let r = if temporal { 8 } else { 4 };
            let post = b.conv(
                &format!("up{l}.shuffle_conv"),
                ConvGeom {
                    cin: cfg.channels(l + 1) / r,
                    cout: c,
                    kt: 1,
                    ks: 1,
                },
            );
            let block = b.block(&format!("up{l}"), 2 * c, c, kt(l), cfg.group_norm);
            levels[l].up = Some(UpPath {
                temporal,
                post,
                block,
            });
        }
        let head = b.conv(
            "head",
            ConvGeom {
                cin: cfg.channels(0),
                cout: 1,
                kt: 1,
                ks: 1,
            },
        );
        Ok(Self {
            cfg: *cfg,
            levels,
            head,
            specs: b.specs,
            groups: cfg.norm_groups,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn head_bias(&self) -> usize {
        self.head.bias
    }

    /// Indices of normalization scale parameters.
    pub fn is_norm_scale(&self, index: usize) -> bool {
        self.specs[index].name.ends_with(".scale")
    }

    pub fn is_norm_shift(&self, index: usize) -> bool {
        self.specs[index].name.ends_with(".shift")
    }

    pub fn is_bias(&self, index: usize) -> bool {
        self.specs[index].name.ends_with(".bias")
    }

    /// Fan-in of a convolution weight or bias tensor.
    pub fn fan_in(&self, index: usize) -> Option<usize> {
        let s = &self.specs[index];
        if s.name.ends_with(".weight") {
            Some(s.shape[1..].iter().product())
        } else if s.name.ends_with(".bias") {
            let w = &self.specs[index - 1];
            Some(w.shape[1..].iter().product())
        } else {
            None
        }
    }
}

/// Intermediate values of one block, kept for the backward pass.
struct BlockCache<T> {
    x: Feat<T>,
    pre: [Feat<T>; 3],
    stats: [Option<NormStats>; 3],
    post_norm: [Feat<T>; 3],
    acts: [Feat<T>; 3],
}

struct UpCache<T> {
    shuffled: Feat<T>,
    block: BlockCache<T>,
}

struct PoolCache {
    c: usize,
    s: Shape3,
    arg: Vec<u32>,
}

/// Per-sample forward cache.
pub struct SampleCache<T> {
    input_shape: Shape3,
    pools: Vec<Option<PoolCache>>,
    downs: Vec<BlockCache<T>>,
    ups: Vec<Option<UpCache<T>>>,
    head_in: Feat<T>,
}

impl<T> SampleCache<T> {
    pub fn input_shape(&self) -> Shape3 {
        self.input_shape
    }
}

fn block_forward<T: Real>(
    arch: &Arch,
    blk: &Block,
    params: &[Vec<T>],
    x: Feat<T>,
    keep: bool,
) -> (Feat<T>, Option<BlockCache<T>>) {
    let mut pres = Vec::with_capacity(3);
    let mut stats = Vec::with_capacity(3);
    let mut posts = Vec::with_capacity(3);
    let mut acts: Vec<Feat<T>> = Vec::with_capacity(3);
    let mut cur = x.clone();
    for i in 0..3 {
        let conv = &blk.convs[i];
        let a = ops::conv_forward(&conv.geom, &params[conv.weight], &params[conv.bias], &cur);
        let (b, st) = match &blk.norms {
            Some(n) => {
                let (b, st) = ops::group_norm_forward(&a, arch.groups, &params[n[i].scale], &params[n[i].shift]);
                (b, Some(st))
            }
            None => (a.clone(), None),
        };
        let mut h = ops::gelu(&b);
        if i == 1 {
            h.add_assign(&acts[0]);
        }
        if keep {
            pres.push(a);
            stats.push(st);
            posts.push(b);
        }
        acts.push(h.clone());
        cur = h;
    }
    let cache = keep.then(|| BlockCache {
        x,
        pre: pres.try_into().ok().unwrap(),
        stats: stats.try_into().ok().unwrap(),
        post_norm: posts.try_into().ok().unwrap(),
        acts: acts.try_into().ok().unwrap(),
    });
    (cur, cache)
}

fn block_backward<T: Real>(
    blk: &Block,
    params: &[Vec<T>],
    cache: &BlockCache<T>,
    gout: Feat<T>,
    grads: &mut [Vec<T>],
) -> Feat<T> {
    let mut g = gout;
    let mut residual: Option<Feat<T>> = None;
    for i in (0..3).rev() {
        if i == 0 {
            if let Some(r) = residual.take() {
                g.add_assign(&r);
            }
        }
        if i == 1 {
            residual = Some(g.clone());
        }
        let gb = ops::gelu_backward(&cache.post_norm[i], &g);
        let ga = match (&blk.norms, &cache.stats[i]) {
            (Some(n), Some(st)) => {
                let (gs, rest) = split_two(grads, n[i].scale, n[i].shift);
                ops::group_norm_backward(&cache.pre[i], st, &params[n[i].scale], &gb, gs, rest)
            }
            _ => gb,
        };
        let input = if i == 0 { &cache.x } else { &cache.acts[i - 1] };
        let conv = &blk.convs[i];
        let (gw, gbias) = split_two(grads, conv.weight, conv.bias);
        g = ops::conv_backward(&conv.geom, &params[conv.weight], input, &ga, gw, gbias);
    }
    g
}

/// Two distinct mutable entries of the gradient list.
fn split_two<T>(v: &mut [Vec<T>], a: usize, b: usize) -> (&mut [T], &mut [T]) {
    assert!(a < b);
    let (lo, hi) = v.split_at_mut(b);
    (&mut lo[a], &mut hi[0])
}

/// Runs one sample `[1][t][h][w]` through the network, returning logits
/// `[1][t][h][w]` and, when `keep`, the cache for [`backward_sample`].
pub fn forward_sample<T: Real>(
    arch: &Arch,
    params: &[Vec<T>],
    x: Feat<T>,
    keep: bool,
) -> (Feat<T>, Option<SampleCache<T>>) {
    let depth = arch.levels.len();
    let input_shape = x.s;
    let mut pools = Vec::with_capacity(depth);
    let mut downs = Vec::with_capacity(depth);
    let mut skips: Vec<Feat<T>> = Vec::with_capacity(depth);
    let mut h = x;
    for (l, level) in arch.levels.iter().enumerate() {
        if l > 0 {
            let pt = if level.temporal_pool { 2 } else { 1 };
            let (p, arg) = ops::max_pool(&h, pt);
            pools.push(keep.then_some(PoolCache { c: h.c, s: h.s, arg }));
            h = p;
        } else {
            pools.push(None);
        }
        let (out, cache) = block_forward(arch, &level.down, params, h, keep);
        if let Some(c) = cache {
            downs.push(c);
        }
        if l + 1 < depth {
            skips.push(out.clone());
        }
        h = out;
    }
    let mut ups: Vec<Option<UpCache<T>>> = (0..depth).map(|_| None).collect();
    for l in (0..depth.saturating_sub(1)).rev() {
        let up = arch.levels[l].up.as_ref().expect("non-bottom level has an up path");
        let shuffled = ops::pixel_shuffle(&h, up.temporal);
        let u = ops::conv_forward(&up.post.geom, &params[up.post.weight], &params[up.post.bias], &shuffled);
        let cat = ops::concat(&u, &skips[l]);
        let (out, cache) = block_forward(arch, &up.block, params, cat, keep);
        if let Some(c) = cache {
            ups[l] = Some(UpCache { shuffled, block: c });
        }
        h = out;
    }
    let logits = ops::conv_forward(&arch.head.geom, &params[arch.head.weight], &params[arch.head.bias], &h);
    let cache = keep.then_some(SampleCache {
        input_shape,
        pools,
        downs,
        ups,
        head_in: h,
    });
    (logits, cache)
}

/// Gradients of all parameters for one sample, given the logit gradient.
pub fn backward_sample<T: Real>(
    arch: &Arch,
    params: &[Vec<T>],
    cache: &SampleCache<T>,
    glogits: &Feat<T>,
) -> Vec<Vec<T>> {
    let mut grads: Vec<Vec<T>> = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
    let depth = arch.levels.len();
    let (gw, gb) = split_two(&mut grads, arch.head.weight, arch.head.bias);
    let mut g = ops::conv_backward(&arch.head.geom, &params[arch.head.weight], &cache.head_in, glogits, gw, gb);
    let mut gskips: Vec<Option<Feat<T>>> = (0..depth).map(|_| None).collect();
    for l in 0..depth.saturating_sub(1) {
        let up = arch.levels[l].up.as_ref().expect("up path");
        let uc = cache.ups[l].as_ref().expect("up cache");
        let gcat = block_backward(&up.block, params, &uc.block, g, &mut grads);
        let (gu, gskip) = ops::split(&gcat, up.post.geom.cout);
        gskips[l] = Some(gskip);
        let (gw, gb) = split_two(&mut grads, up.post.weight, up.post.bias);
        let gshuf = ops::conv_backward(&up.post.geom, &params[up.post.weight], &uc.shuffled, &gu, gw, gb);
        g = ops::pixel_unshuffle(&gshuf, up.temporal);
    }
    for l in (0..depth).rev() {
        if let Some(gs) = gskips[l].take() {
            g.add_assign(&gs);
        }
        g = block_backward(&arch.levels[l].down, params, &cache.downs[l], g, &mut grads);
        if let Some(pc) = &cache.pools[l] {
            g = ops::max_pool_backward(pc.c, pc.s, &pc.arg, &g);
        }
    }
    grads
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_count_formula_matches_arch() {
        for cfg in [
            ModelConfig::default(),
            ModelConfig::full(),
            ModelConfig {
                depth: 2,
                group_norm: false,
                ..Default::default()
            },
            ModelConfig {
                depth: 4,
                z_conv_levels: 3,
                start_features: 8,
                norm_groups: 2,
                ..Default::default()
            },
            ModelConfig {
                depth: 1,
                z_conv_levels: 0,
                ..Default::default()
            },
        ] {
            let arch = Arch::new(&cfg).unwrap();
            let total: usize = arch.specs().iter().map(ParamSpec::len).sum();
            assert_eq!(total, cfg.parameter_count(), "{cfg:?}");
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let base = ModelConfig::default();
        assert!(ModelConfig { z_conv_levels: 4, ..base }.validate().is_err());
        assert!(ModelConfig { norm_groups: 3, ..base }.validate().is_err());
        assert!(ModelConfig { depth: 0, ..base }.validate().is_err());
        // 3D level 1 with 12 channels cannot feed an 8-way pixel shuffle
        assert!(ModelConfig {
            start_features: 6,
            z_conv_levels: 2,
            norm_groups: 2,
            ..base
        }
        .validate()
        .is_err());
    }

    #[test]
    fn input_divisibility() {
        let cfg = ModelConfig::default();
        assert!(cfg.check_input(Shape3 { t: 5, h: 8, w: 12 }).is_ok());
        assert!(cfg.check_input(Shape3 { t: 5, h: 6, w: 12 }).is_err());
        let p = ModelConfig::full();
        assert_eq!((p.spatial_multiple(), p.temporal_multiple()), (16, 2));
        assert!(p.check_input(Shape3 { t: 3, h: 16, w: 16 }).is_err());
    }
}
