//! Light-weight decoder: recovers spatial resolution per pyramid level and
//! fuses the levels into full-resolution class logits.
//!
//! Level `i` passes through `i - 2` upsampling units, each a 3x3
//! conv/batch-norm/ReLU transform followed by 2x bilinear upsampling, so all
//! levels land at stride 4. Level 2 needs no upsampling and gets the
//! transform alone. The four results are averaged pointwise, classified by a
//! 1x1 convolution, and bilinearly upsampled 4x back to the input size.

use ndarray::Array4;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    param::join_path, resize, Conv2d, ConvBnRelu, ConvBnReluCache, InitRng, Param, ParamSet,
    Scalar,
};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct DecoderConfig {
    /// Channels of the incoming gated pyramid features.
    pub in_channels: usize,
    /// Width of the decoder transforms.
    pub out_channels: usize,
    pub num_classes: usize,
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.out_channels == 0 {
            return Err(Error::Config("decoder out_channels must be >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        Ok(())
    }
}

/// One pyramid level's decoder: a chain of transforms with interleaved 2x
/// bilinear upsampling.
struct LevelDecoder<T> {
    transforms: Vec<ConvBnRelu<T>>,
    /// Number of 2x upsampling steps (equals `level - 2`).
    upsamples: usize,
}

pub struct LevelDecoderCache<T> {
    transforms: Vec<ConvBnReluCache<T>>,
    /// Output after each upsampling step (same order as transforms).
    upsampled: Vec<Array4<T>>,
}

impl<T: Scalar> LevelDecoder<T> {
    fn new(level: usize, cfg: &DecoderConfig, init: &mut InitRng) -> Self {
        let upsamples = level - 2;
        let n_transforms = upsamples.max(1);
        let mut transforms = Vec::with_capacity(n_transforms);
        let mut c_in = cfg.in_channels;
        for _ in 0..n_transforms {
            transforms.push(ConvBnRelu::new(c_in, cfg.out_channels, 3, 1, 1, init));
            c_in = cfg.out_channels;
        }
        LevelDecoder {
            transforms,
            upsamples,
        }
    }

    fn forward_train(&mut self, x: &Array4<T>) -> LevelDecoderCache<T> {
        let mut caches = Vec::with_capacity(self.transforms.len());
        let mut upsampled = Vec::new();
        let mut cur = x.clone();
        for (ti, t) in self.transforms.iter_mut().enumerate() {
            let cache = t.forward_train(&cur);
            cur = if ti < self.upsamples {
                let (_, _, h, w) = cache.y.dim();
                let up = resize::resize_bilinear(&cache.y, 2 * h, 2 * w);
                upsampled.push(up.clone());
                up
            } else {
                cache.y.clone()
            };
            caches.push(cache);
        }
        LevelDecoderCache {
            transforms: caches,
            upsampled,
        }
    }

    fn forward_eval(&self, x: &Array4<T>) -> Array4<T> {
        let mut cur = x.clone();
        for (ti, t) in self.transforms.iter().enumerate() {
            cur = t.forward_eval(&cur);
            if ti < self.upsamples {
                let (_, _, h, w) = cur.dim();
                cur = resize::resize_bilinear(&cur, 2 * h, 2 * w);
            }
        }
        cur
    }

    fn output(&self, cache: &LevelDecoderCache<T>) -> Array4<T> {
        if self.upsamples > 0 {
            cache.upsampled.last().unwrap().clone()
        } else {
            cache.transforms.last().unwrap().y.clone()
        }
    }

    fn backward(&mut self, x: &Array4<T>, cache: &LevelDecoderCache<T>, dy: &Array4<T>) -> Array4<T> {
        let mut grad = dy.clone();
        for ti in (0..self.transforms.len()).rev() {
            if ti < self.upsamples {
                let (_, _, h, w) = cache.transforms[ti].y.dim();
                grad = resize::resize_bilinear_backward(&grad, h, w);
            }
            let input: &Array4<T> = if ti == 0 {
                x
            } else if ti - 1 < self.upsamples {
                &cache.upsampled[ti - 1]
            } else {
                &cache.transforms[ti - 1].y
            };
            grad = self.transforms[ti]
                .backward(input, &cache.transforms[ti], &grad, true)
                .unwrap();
        }
        grad
    }
}

impl<T: Scalar> ParamSet<T> for LevelDecoder<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (ti, t) in self.transforms.iter_mut().enumerate() {
            t.visit_params(&join_path(prefix, &format!("unit{ti}")), f);
        }
    }
}

pub struct Decoder<T> {
    pub config: DecoderConfig,
    levels: [LevelDecoder<T>; 4],
    classifier: Conv2d<T>,
}

pub struct DecoderCache<T> {
    levels: [LevelDecoderCache<T>; 4],
    mean: Array4<T>,
    class_logits_hw: (usize, usize),
}

impl<T: Scalar> Decoder<T> {
    pub fn new(config: DecoderConfig, init: &mut InitRng) -> Result<Self> {
        config.validate()?;
        let levels = [2, 3, 4, 5].map(|level| LevelDecoder::new(level, &config, init));
        let classifier = Conv2d::new(config.out_channels, config.num_classes, 1, 1, 0, true, init);
        Ok(Decoder {
            config,
            levels,
            classifier,
        })
    }

    /// Upsampling units applied to the given pyramid level.
    pub fn upsample_units(&self, level: usize) -> usize {
        self.levels[crate::encoder::level_index(level)].upsamples
    }

    pub fn forward_train(
        &mut self,
        gated: &[Array4<T>; 4],
        out_hw: (usize, usize),
    ) -> (Array4<T>, DecoderCache<T>) {
        let mut caches: Vec<LevelDecoderCache<T>> = Vec::with_capacity(4);
        for (li, level) in self.levels.iter_mut().enumerate() {
            caches.push(level.forward_train(&gated[li]));
        }
        let decoded: Vec<Array4<T>> = self
            .levels
            .iter()
            .zip(&caches)
            .map(|(l, c)| l.output(c))
            .collect();
        let mean = mean_maps(&decoded);
        let logits_s4 = self.classifier.forward(&mean);
        let (_, _, h4, w4) = logits_s4.dim();
        let logits = resize::resize_bilinear(&logits_s4, out_hw.0, out_hw.1);
        (
            logits,
            DecoderCache {
                levels: caches.try_into().unwrap_or_else(|_| unreachable!()),
                mean,
                class_logits_hw: (h4, w4),
            },
        )
    }

    pub fn forward_eval(&self, gated: &[Array4<T>; 4], out_hw: (usize, usize)) -> Array4<T> {
        let decoded: Vec<Array4<T>> = self
            .levels
            .iter()
            .zip(gated)
            .map(|(l, z)| l.forward_eval(z))
            .collect();
        let mean = mean_maps(&decoded);
        let logits_s4 = self.classifier.forward(&mean);
        resize::resize_bilinear(&logits_s4, out_hw.0, out_hw.1)
    }

    pub fn backward(
        &mut self,
        gated: &[Array4<T>; 4],
        cache: &DecoderCache<T>,
        d_logits: &Array4<T>,
    ) -> [Array4<T>; 4] {
        let (h4, w4) = cache.class_logits_hw;
        let d_s4 = resize::resize_bilinear_backward(d_logits, h4, w4);
        let d_mean = self.classifier.backward(&cache.mean, &d_s4, true).unwrap();
        let quarter = T::from_f64(0.25);
        let d_each = d_mean.mapv(|v| v * quarter);
        let mut out: [Option<Array4<T>>; 4] = Default::default();
        for li in 0..4 {
            out[li] = Some(self.levels[li].backward(&gated[li], &cache.levels[li], &d_each));
        }
        out.map(Option::unwrap)
    }
}

impl<T: Scalar> ParamSet<T> for Decoder<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (li, level) in self.levels.iter_mut().enumerate() {
            level.visit_params(&join_path(prefix, &format!("level{}", li + 2)), f);
        }
        self.classifier
            .visit_params(&join_path(prefix, "classifier"), f);
    }
}

/// Pointwise mean of equally-shaped maps.
pub fn mean_maps<T: Scalar>(maps: &[Array4<T>]) -> Array4<T> {
    let mut acc = maps[0].clone();
    for m in &maps[1..] {
        assert_eq!(m.dim(), acc.dim(), "decoded levels disagree on shape");
        acc += m;
    }
    let inv = T::one() / T::from_usize(maps.len());
    acc.mapv_inplace(|v| v * inv);
    acc
}
