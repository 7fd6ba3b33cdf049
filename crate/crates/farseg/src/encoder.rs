//! Multi-branch encoder: residual backbone, feature-pyramid top-down path,
//! and global scene pooling.
//!
//! The backbone emits feature maps at strides 4/8/16/32 relative to the
//! input. The top-down path projects each to a common channel width `d` with
//! a learnable 1x1 lateral convolution and adds a 2x nearest-neighbor
//! upsampling of the level above, so deep semantics flow down into the
//! high-resolution maps. The deepest map is also pooled into one vector per
//! image, which the relation module later embeds as the scene
//! representation.

use ndarray::{Array2, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    self, ops, param::join_path, resize, Conv2d, ConvBnRelu, InitRng, Param, ParamSet, Scalar,
};

/// Pyramid level indices; level `i` lives at stride `2^i`.
pub const LEVELS: [usize; 4] = [2, 3, 4, 5];

pub fn level_index(level: usize) -> usize {
    assert!((2..=5).contains(&level), "pyramid level {level} out of range");
    level - 2
}

/// Backbone stage outputs at strides 4/8/16/32, plus the input extent that
/// produced them.
pub struct BackboneFeatures<T> {
    /// Index 0 holds level 2 (stride 4) ... index 3 holds level 5 (stride 32).
    pub maps: [Array4<T>; 4],
    pub input_hw: (usize, usize),
}

impl<T: Scalar> BackboneFeatures<T> {
    pub fn level(&self, level: usize) -> &Array4<T> {
        &self.maps[level_index(level)]
    }
}

/// Top-down pyramid: every level has the same channel count.
pub struct FeaturePyramid<T> {
    pub maps: [Array4<T>; 4],
}

impl<T: Scalar> FeaturePyramid<T> {
    pub fn level(&self, level: usize) -> &Array4<T> {
        &self.maps[level_index(level)]
    }

    pub fn channels(&self) -> usize {
        self.maps[0].dim().1
    }
}

/// Per-image global context: the spatial mean of the deepest backbone map.
pub struct SceneContext<T> {
    /// Shape `[batch, channels(C5)]`.
    pub pooled: Array2<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Basic,
    Bottleneck,
}

/// Residual backbone shape: per-stage output widths and block counts.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct BackboneConfig {
    pub stem_width: usize,
    /// 3 or 7.
    pub stem_kernel: usize,
    /// 3x3/2 max pooling after the stem (the classic deep-resnet stem); when
    /// absent, stage 1 strides instead so level 2 still sits at stride 4.
    pub stem_pool: bool,
    /// Output channels of the four stages (after expansion for bottlenecks).
    pub widths: [usize; 4],
    pub blocks: [usize; 4],
    pub block: BlockKind,
}

impl BackboneConfig {
    /// Desk-scale default: small enough to train on one CPU core.
    pub fn tiny() -> Self {
        BackboneConfig {
            stem_width: 8,
            stem_kernel: 3,
            stem_pool: false,
            widths: [8, 16, 32, 64],
            blocks: [1, 1, 1, 1],
            block: BlockKind::Basic,
        }
    }

    /// Structural twin of ResNet-50. Weights can be imported through the
    /// checkpoint container; nothing in the test suite depends on them.
    pub fn resnet50() -> Self {
        BackboneConfig {
            stem_width: 64,
            stem_kernel: 7,
            stem_pool: true,
            widths: [256, 512, 1024, 2048],
            blocks: [3, 4, 6, 3],
            block: BlockKind::Bottleneck,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny()),
            "resnet50" => Ok(Self::resnet50()),
            other => Err(Error::Config(format!("unknown backbone preset `{other}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stem_kernel != 3 && self.stem_kernel != 7 {
            return Err(Error::Config(format!(
                "stem kernel must be 3 or 7, got {}",
                self.stem_kernel
            )));
        }
        if self.widths.iter().any(|&w| w == 0) || self.blocks.iter().any(|&b| b == 0) {
            return Err(Error::Config("backbone widths/blocks must be positive".into()));
        }
        if self.block == BlockKind::Bottleneck && self.widths.iter().any(|&w| w % 4 != 0) {
            return Err(Error::Config(
                "bottleneck stage widths must be divisible by the expansion factor 4".into(),
            ));
        }
        Ok(())
    }
}

struct ResidualBlock<T> {
    cbr1: ConvBnRelu<T>,
    cbr2: Option<ConvBnRelu<T>>, // bottleneck middle 3x3
    conv_last: Conv2d<T>,
    bn_last: nn::BatchNorm2d<T>,
    shortcut: Option<(Conv2d<T>, nn::BatchNorm2d<T>)>,
}

pub struct ResidualBlockCache<T> {
    c1: nn::ConvBnReluCache<T>,
    c2: Option<nn::ConvBnReluCache<T>>,
    pre_bn_last: nn::BnCache<T>,
    short_bn: Option<nn::BnCache<T>>,
    /// Post-activation block output (also the ReLU mask).
    pub y: Array4<T>,
}

impl<T: Scalar> ResidualBlock<T> {
    fn new(kind: BlockKind, c_in: usize, width: usize, stride: usize, init: &mut InitRng) -> Self {
        let needs_proj = stride != 1 || c_in != width;
        let shortcut = needs_proj.then(|| {
            (
                Conv2d::new(c_in, width, 1, stride, 0, false, init),
                nn::BatchNorm2d::new(width),
            )
        });
        match kind {
            BlockKind::Basic => ResidualBlock {
                cbr1: ConvBnRelu::new(c_in, width, 3, stride, 1, init),
                cbr2: None,
                conv_last: Conv2d::new(width, width, 3, 1, 1, false, init),
                bn_last: nn::BatchNorm2d::new(width),
                shortcut,
            },
            BlockKind::Bottleneck => {
                let mid = width / 4;
                ResidualBlock {
                    cbr1: ConvBnRelu::new(c_in, mid, 1, 1, 0, init),
                    cbr2: Some(ConvBnRelu::new(mid, mid, 3, stride, 1, init)),
                    conv_last: Conv2d::new(mid, width, 1, 1, 0, false, init),
                    bn_last: nn::BatchNorm2d::new(width),
                    shortcut,
                }
            }
        }
    }

    fn forward_train(&mut self, x: &Array4<T>) -> ResidualBlockCache<T> {
        let c1 = self.cbr1.forward_train(x);
        let c2 = self.cbr2.as_mut().map(|b| b.forward_train(&c1.y));
        let main_in = c2.as_ref().map_or(&c1.y, |c| &c.y);
        let main = self.conv_last.forward(main_in);
        let (main, pre_bn_last) = self.bn_last.forward_train(&main);
        let (short, short_bn) = match self.shortcut.as_mut() {
            Some((conv, bn)) => {
                let s = conv.forward(x);
                let (s, cache) = bn.forward_train(&s);
                (s, Some(cache))
            }
            None => (x.clone(), None),
        };
        let mut y = main + &short;
        ops::relu_inplace(&mut y);
        ResidualBlockCache {
            c1,
            c2,
            pre_bn_last,
            short_bn,
            y,
        }
    }

    fn forward_eval(&self, x: &Array4<T>) -> Array4<T> {
        let mut h = self.cbr1.forward_eval(x);
        if let Some(b) = &self.cbr2 {
            h = b.forward_eval(&h);
        }
        let main = self.bn_last.forward_eval(&self.conv_last.forward(&h));
        let short = match &self.shortcut {
            Some((conv, bn)) => bn.forward_eval(&conv.forward(x)),
            None => x.clone(),
        };
        let mut y = main + &short;
        ops::relu_inplace(&mut y);
        y
    }

    fn backward(
        &mut self,
        x: &Array4<T>,
        cache: &ResidualBlockCache<T>,
        dy: &Array4<T>,
        need_dx: bool,
    ) -> Option<Array4<T>> {
        let dsum = ops::relu_backward(&cache.y, dy);
        let dmain = self.bn_last.backward(&cache.pre_bn_last, &dsum);
        let main_in = cache.c2.as_ref().map_or(&cache.c1.y, |c| &c.y);
        let d_main_in = self.conv_last.backward(main_in, &dmain, true).unwrap();
        let d_c1_out = match (self.cbr2.as_mut(), cache.c2.as_ref()) {
            (Some(block), Some(c2)) => block.backward(&cache.c1.y, c2, &d_main_in, true).unwrap(),
            _ => d_main_in,
        };
        let want_input_grad = need_dx || self.shortcut.is_none();
        let d_x_main = self.cbr1.backward(x, &cache.c1, &d_c1_out, want_input_grad);
        match (self.shortcut.as_mut(), cache.short_bn.as_ref()) {
            (Some((conv, bn)), Some(short_cache)) => {
                let d_short = bn.backward(short_cache, &dsum);
                let d_x_short = conv.backward(x, &d_short, need_dx);
                match (d_x_main, d_x_short) {
                    (Some(a), Some(b)) => Some(a + b),
                    _ => None,
                }
            }
            _ => {
                // identity shortcut
                d_x_main.map(|a| a + &dsum)
            }
        }
    }
}

impl<T: Scalar> ParamSet<T> for ResidualBlock<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.cbr1.visit_params(&join_path(prefix, "cbr1"), f);
        if let Some(b) = self.cbr2.as_mut() {
            b.visit_params(&join_path(prefix, "cbr2"), f);
        }
        self.conv_last.visit_params(&join_path(prefix, "conv_last"), f);
        self.bn_last.visit_params(&join_path(prefix, "bn_last"), f);
        if let Some((conv, bn)) = self.shortcut.as_mut() {
            conv.visit_params(&join_path(prefix, "shortcut.conv"), f);
            bn.visit_params(&join_path(prefix, "shortcut.bn"), f);
        }
    }
}

/// Residual backbone emitting the four stage outputs.
pub struct Backbone<T> {
    pub config: BackboneConfig,
    stem: ConvBnRelu<T>,
    stages: [Vec<ResidualBlock<T>>; 4],
}

pub struct BackboneCache<T> {
    stem: nn::ConvBnReluCache<T>,
    pool_arg: Option<Array4<u32>>,
    pool_out: Option<Array4<T>>,
    blocks: [Vec<ResidualBlockCache<T>>; 4],
}

impl<T: Scalar> Backbone<T> {
    pub fn new(config: BackboneConfig, init: &mut InitRng) -> Result<Self> {
        config.validate()?;
        let stem_pad = config.stem_kernel / 2;
        let stem = ConvBnRelu::new(3, config.stem_width, config.stem_kernel, 2, stem_pad, init);
        let mut stages: [Vec<ResidualBlock<T>>; 4] = Default::default();
        let mut c_in = config.stem_width;
        for (si, stage) in stages.iter_mut().enumerate() {
            let width = config.widths[si];
            // Stage 1 keeps resolution when the stem already pooled to
            // stride 4; otherwise it downsamples.
            let first_stride = if si == 0 && config.stem_pool { 1 } else { 2 };
            for bi in 0..config.blocks[si] {
                let stride = if bi == 0 { first_stride } else { 1 };
                stage.push(ResidualBlock::new(config.block, c_in, width, stride, init));
                c_in = width;
            }
        }
        Ok(Backbone {
            config,
            stem,
            stages,
        })
    }

    /// Rejects inputs whose spatial size the stride-32 pyramid cannot
    /// represent exactly.
    pub fn check_input(x_dim: (usize, usize, usize, usize)) -> Result<()> {
        let (_, c, h, w) = x_dim;
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 input channels, got {c}")));
        }
        if h % 32 != 0 {
            return Err(Error::Shape(format!(
                "input height {h} is not divisible by 32"
            )));
        }
        if w % 32 != 0 {
            return Err(Error::Shape(format!(
                "input width {w} is not divisible by 32"
            )));
        }
        Ok(())
    }

    pub fn forward_train(&mut self, x: &Array4<T>) -> Result<(BackboneFeatures<T>, BackboneCache<T>)> {
        Self::check_input(x.dim())?;
        let (_, _, h, w) = x.dim();
        let stem = self.stem.forward_train(x);
        let (pool_out, pool_arg) = if self.config.stem_pool {
            let (y, arg) = ops::max_pool_3x3_s2(&stem.y);
            (Some(y), Some(arg))
        } else {
            (None, None)
        };
        let mut cur = pool_out.clone().unwrap_or_else(|| stem.y.clone());
        let mut blocks: [Vec<ResidualBlockCache<T>>; 4] = Default::default();
        let mut maps: Vec<Array4<T>> = Vec::with_capacity(4);
        for (si, stage) in self.stages.iter_mut().enumerate() {
            for block in stage.iter_mut() {
                let cache = block.forward_train(&cur);
                cur = cache.y.clone();
                blocks[si].push(cache);
            }
            maps.push(cur.clone());
        }
        let features = BackboneFeatures {
            maps: maps.try_into().map_err(|_| Error::Shape("stage count".into()))?,
            input_hw: (h, w),
        };
        Ok((
            features,
            BackboneCache {
                stem,
                pool_arg,
                pool_out,
                blocks,
            },
        ))
    }

    pub fn forward_eval(&self, x: &Array4<T>) -> Result<BackboneFeatures<T>> {
        Self::check_input(x.dim())?;
        let (_, _, h, w) = x.dim();
        let mut cur = self.stem.forward_eval(x);
        if self.config.stem_pool {
            cur = ops::max_pool_3x3_s2(&cur).0;
        }
        let mut maps: Vec<Array4<T>> = Vec::with_capacity(4);
        for stage in &self.stages {
            for block in stage {
                cur = block.forward_eval(&cur);
            }
            maps.push(cur.clone());
        }
        Ok(BackboneFeatures {
            maps: maps.try_into().map_err(|_| Error::Shape("stage count".into()))?,
            input_hw: (h, w),
        })
    }

    /// Backpropagates the per-level gradients `d_maps` (aligned with
    /// `BackboneFeatures::maps`). Gradients never flow into the image.
    pub fn backward(&mut self, x: &Array4<T>, cache: &BackboneCache<T>, d_maps: [Array4<T>; 4]) {
        let mut d_stage_out: Option<Array4<T>> = None;
        let [d2, d3, d4, d5] = d_maps;
        let mut level_grads = [Some(d2), Some(d3), Some(d4), Some(d5)];
        for si in (0..4).rev() {
            let mut grad = level_grads[si].take().unwrap();
            if let Some(upper) = d_stage_out.take() {
                grad += &upper;
            }
            let stage = &mut self.stages[si];
            let caches = &cache.blocks[si];
            for bi in (0..stage.len()).rev() {
                let input: &Array4<T> = if bi > 0 {
                    &caches[bi - 1].y
                } else if si > 0 {
                    &cache.blocks[si - 1].last().unwrap().y
                } else if let Some(p) = &cache.pool_out {
                    p
                } else {
                    &cache.stem.y
                };
                grad = stage[bi].backward(input, &caches[bi], &grad, true).unwrap();
            }
            d_stage_out = Some(grad);
        }
        let mut d_stem_out = d_stage_out.unwrap();
        if let (Some(arg), Some(_)) = (&cache.pool_arg, &cache.pool_out) {
            let (_, _, sh, sw) = cache.stem.y.dim();
            d_stem_out = ops::max_pool_3x3_s2_backward(arg, &d_stem_out, (sh, sw));
        }
        self.stem.backward(x, &cache.stem, &d_stem_out, false);
    }
}

impl<T: Scalar> ParamSet<T> for Backbone<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.stem.visit_params(&join_path(prefix, "stem"), f);
        for (si, stage) in self.stages.iter_mut().enumerate() {
            for (bi, block) in stage.iter_mut().enumerate() {
                block.visit_params(&join_path(prefix, &format!("stage{}.block{bi}", si + 1)), f);
            }
        }
    }
}

/// Top-down pyramid built from lateral 1x1 projections plus nearest-neighbor
/// upsampling of the level above; the top level is the projection alone.
pub struct TopDownPyramid<T> {
    laterals: [Conv2d<T>; 4],
}

impl<T: Scalar> TopDownPyramid<T> {
    pub fn new(in_widths: [usize; 4], d: usize, init: &mut InitRng) -> Self {
        let laterals = in_widths.map(|c_in| Conv2d::new(c_in, d, 1, 1, 0, true, init));
        TopDownPyramid { laterals }
    }

    pub fn channels(&self) -> usize {
        self.laterals[0].c_out()
    }

    pub fn forward(&self, features: &BackboneFeatures<T>) -> FeaturePyramid<T> {
        let mut maps: [Option<Array4<T>>; 4] = Default::default();
        let mut above: Option<Array4<T>> = None;
        for li in (0..4).rev() {
            let mut p = self.laterals[li].forward(&features.maps[li]);
            if let Some(above) = &above {
                p += &resize::upsample_nearest_x2(above);
            }
            above = Some(p.clone());
            maps[li] = Some(p);
        }
        FeaturePyramid {
            maps: maps.map(Option::unwrap),
        }
    }

    /// `d_pyramid` holds gradients for P2..P5; returns gradients for C2..C5.
    pub fn backward(
        &mut self,
        features: &BackboneFeatures<T>,
        d_pyramid: [Array4<T>; 4],
    ) -> [Array4<T>; 4] {
        let [d2, d3, d4, d5] = d_pyramid;
        let mut dp = [Some(d2), Some(d3), Some(d4), Some(d5)];
        let mut d_maps: [Option<Array4<T>>; 4] = Default::default();
        for li in 0..4 {
            let grad = dp[li].take().unwrap();
            if li + 1 < 4 {
                let up = resize::upsample_nearest_x2_backward(&grad);
                *dp[li + 1].as_mut().unwrap() += &up;
            }
            d_maps[li] =
                Some(self.laterals[li].backward(&features.maps[li], &grad, true).unwrap());
        }
        d_maps.map(Option::unwrap)
    }
}

impl<T: Scalar> ParamSet<T> for TopDownPyramid<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (li, lateral) in self.laterals.iter_mut().enumerate() {
            lateral.visit_params(&join_path(prefix, &format!("lateral{}", li + 2)), f);
        }
    }
}

/// Spatial mean of the deepest backbone map, one vector per image.
pub fn scene_pool<T: Scalar>(features: &BackboneFeatures<T>) -> SceneContext<T> {
    let c5 = features.level(5);
    let (b, c, h, w) = c5.dim();
    let n = T::from_usize(h * w);
    let mut pooled = Array2::zeros((b, c));
    for bi in 0..b {
        for ci in 0..c {
            pooled[[bi, ci]] = c5.index_axis(Axis(0), bi).index_axis(Axis(0), ci).sum() / n;
        }
    }
    SceneContext { pooled }
}

/// Gradient of [`scene_pool`]: spreads each vector entry uniformly over the
/// spatial positions it averaged.
pub fn scene_pool_backward<T: Scalar>(
    d_pooled: &Array2<T>,
    c5_dim: (usize, usize, usize, usize),
) -> Array4<T> {
    let (b, c, h, w) = c5_dim;
    let n = T::from_usize(h * w);
    let mut d = Array4::zeros((b, c, h, w));
    for bi in 0..b {
        for ci in 0..c {
            let g = d_pooled[[bi, ci]] / n;
            d.index_axis_mut(Axis(0), bi)
                .index_axis_mut(Axis(0), ci)
                .fill(g);
        }
    }
    d
}
