//! The full segmentation network: encoder, relation module, and decoder
//! wired together with a hand-written backward pass.

use ndarray::Array4;
use serde::{Deserialize, Serialize};

use crate::decoder::{Decoder, DecoderCache, DecoderConfig};
use crate::encoder::{
    scene_pool, scene_pool_backward, Backbone, BackboneCache, BackboneConfig, BackboneFeatures,
    FeaturePyramid, SceneContext, TopDownPyramid,
};
use crate::error::Result;
use crate::nn::{param::join_path, InitRng, Param, ParamSet, Scalar};
use crate::relation::{RelationCache, RelationConfig, RelationModule, RelationSet};

/// Backbone selection in config files: a preset name or an explicit shape.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum BackboneSpec {
    Preset(String),
    Custom(BackboneConfig),
}

impl BackboneSpec {
    pub fn resolve(&self) -> Result<BackboneConfig> {
        match self {
            BackboneSpec::Preset(name) => BackboneConfig::preset(name),
            BackboneSpec::Custom(cfg) => {
                cfg.validate()?;
                Ok(cfg.clone())
            }
        }
    }
}

fn default_scale_aware() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneSpec,
    /// Channel width `d` of every pyramid level.
    pub fpn_channels: usize,
    /// Shared-space dimension of the relation module.
    pub embed_dim: usize,
    #[serde(default = "default_scale_aware")]
    pub scale_aware: bool,
    pub decoder_channels: usize,
    pub num_classes: usize,
}

impl ModelConfig {
    /// Paper-scale defaults: ResNet-50 shape, 256-wide pyramid and embedding.
    pub fn full() -> Self {
        ModelConfig {
            backbone: BackboneSpec::Preset("resnet50".into()),
            fpn_channels: 256,
            embed_dim: 256,
            scale_aware: true,
            decoder_channels: 128,
            num_classes: 16,
        }
    }

    /// Desk-scale defaults matching the `tiny` training profile.
    pub fn tiny(num_classes: usize) -> Self {
        ModelConfig {
            backbone: BackboneSpec::Preset("tiny".into()),
            fpn_channels: 32,
            embed_dim: 32,
            scale_aware: true,
            decoder_channels: 32,
            num_classes,
        }
    }
}

pub struct FarSeg<T> {
    pub backbone: Backbone<T>,
    pub pyramid: TopDownPyramid<T>,
    pub relation: RelationModule<T>,
    pub decoder: Decoder<T>,
}

/// Everything the backward pass needs, plus the intermediates the white-box
/// tests and the heatmap exporter read.
pub struct ForwardCache<T> {
    pub features: BackboneFeatures<T>,
    backbone: BackboneCache<T>,
    pub pyramid: FeaturePyramid<T>,
    pub scene: SceneContext<T>,
    pub relation_set: RelationSet<T>,
    relation: RelationCache<T>,
    decoder: DecoderCache<T>,
}

/// Inference outputs: logits plus the per-level relation maps.
pub struct EvalOutput<T> {
    pub logits: Array4<T>,
    pub relation: [Array4<T>; 4],
}

impl<T: Scalar> FarSeg<T> {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut init = InitRng::new(seed);
        let backbone_cfg = config.backbone.resolve()?;
        let widths = backbone_cfg.widths;
        let backbone = Backbone::new(backbone_cfg, &mut init)?;
        let pyramid = TopDownPyramid::new(widths, config.fpn_channels, &mut init);
        let relation = RelationModule::new(
            widths[3],
            config.fpn_channels,
            RelationConfig {
                embed_dim: config.embed_dim,
                scale_aware: config.scale_aware,
            },
            &mut init,
        )?;
        let decoder = Decoder::new(
            DecoderConfig {
                in_channels: config.fpn_channels,
                out_channels: config.decoder_channels,
                num_classes: config.num_classes,
            },
            &mut init,
        )?;
        Ok(FarSeg {
            backbone,
            pyramid,
            relation,
            decoder,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.decoder.config.num_classes
    }

    pub fn forward_train(&mut self, x: &Array4<T>) -> Result<(Array4<T>, ForwardCache<T>)> {
        let (_, _, h, w) = x.dim();
        let (features, backbone_cache) = self.backbone.forward_train(x)?;
        let pyramid = self.pyramid.forward(&features);
        let scene = scene_pool(&features);
        let (relation_set, relation_cache) = self.relation.forward_train(&pyramid, &scene);
        let (logits, decoder_cache) = self.decoder.forward_train(&relation_set.gated, (h, w));
        Ok((
            logits,
            ForwardCache {
                features,
                backbone: backbone_cache,
                pyramid,
                scene,
                relation_set,
                relation: relation_cache,
                decoder: decoder_cache,
            },
        ))
    }

    pub fn forward_eval(&self, x: &Array4<T>) -> Result<EvalOutput<T>> {
        let (_, _, h, w) = x.dim();
        let features = self.backbone.forward_eval(x)?;
        let pyramid = self.pyramid.forward(&features);
        let scene = scene_pool(&features);
        let relation_set = self.relation.forward_eval(&pyramid, &scene);
        let logits = self.decoder.forward_eval(&relation_set.gated, (h, w));
        Ok(EvalOutput {
            logits,
            relation: relation_set.relation,
        })
    }

    /// Accumulates parameter gradients for a logits gradient produced by the
    /// loss. Call `nn::zero_grads` first when not accumulating across
    /// batches.
    pub fn backward(&mut self, x: &Array4<T>, cache: &ForwardCache<T>, d_logits: &Array4<T>) {
        let d_gated = self
            .decoder
            .backward(&cache.relation_set.gated, &cache.decoder, d_logits);
        let (d_pyramid, d_pooled) =
            self.relation
                .backward(&cache.pyramid, &cache.scene, &cache.relation, d_gated);
        let mut d_features = self.pyramid.backward(&cache.features, d_pyramid);
        let c5_dim = cache.features.maps[3].dim();
        d_features[3] += &scene_pool_backward(&d_pooled, c5_dim);
        self.backbone.backward(x, &cache.backbone, d_features);
    }
}

impl<T: Scalar> ParamSet<T> for FarSeg<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.backbone.visit_params(&join_path(prefix, "backbone"), f);
        self.pyramid.visit_params(&join_path(prefix, "pyramid"), f);
        self.relation.visit_params(&join_path(prefix, "relation"), f);
        self.decoder.visit_params(&join_path(prefix, "decoder"), f);
    }
}
