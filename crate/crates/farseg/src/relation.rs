//! Foreground-scene relation module.
//!
//! A per-image scene embedding `u` (projected from the pooled deepest
//! features) is compared against every spatial position of each pyramid
//! level after the level is projected into the same `embed_dim`-dimensional
//! space. The channelwise inner product yields a single-channel relation map
//! per level; its sigmoid gates a re-encoded copy of the level, amplifying
//! positions whose content co-occurs with the scene and damping the rest.

use ndarray::{Array2, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::encoder::{FeaturePyramid, SceneContext};
use crate::error::{Error, Result};
use crate::nn::{
    ops, param::join_path, ConvBnRelu, ConvBnReluCache, InitRng, Linear, Param, ParamSet, Scalar,
};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct RelationConfig {
    /// Dimension of the shared space both projections land in.
    pub embed_dim: usize,
    /// One projection per pyramid level (true) or a single shared one.
    pub scale_aware: bool,
}

impl RelationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 {
            return Err(Error::Config("relation embed_dim must be >= 1".into()));
        }
        Ok(())
    }
}

/// All per-level outputs of the module. The intermediates are part of the
/// public contract: heatmap export reads `relation`, and white-box tests
/// recompute `gated` from the pieces.
pub struct RelationSet<T> {
    /// Level features projected into the shared space.
    pub projected: [Array4<T>; 4],
    /// Scene embedding `[batch, embed_dim]`, identical across levels.
    pub scene_embedding: Array2<T>,
    /// Single-channel relation maps `[batch, 1, H_i, W_i]`.
    pub relation: [Array4<T>; 4],
    /// Re-encoded level features before gating.
    pub encoded: [Array4<T>; 4],
    /// Gated output features: `sigmoid(relation) * encoded`.
    pub gated: [Array4<T>; 4],
}

pub struct RelationCache<T> {
    projection: [ConvBnReluCache<T>; 4],
    encoder: [ConvBnReluCache<T>; 4],
    gate: [Array4<T>; 4],
    scene_embedding: Array2<T>,
}

pub struct RelationModule<T> {
    pub config: RelationConfig,
    scene_embed: Linear<T>,
    /// Four per-level projections when scale-aware, otherwise one shared.
    projections: Vec<ConvBnRelu<T>>,
    encoders: [ConvBnRelu<T>; 4],
}

impl<T: Scalar> RelationModule<T> {
    pub fn new(
        scene_channels: usize,
        d: usize,
        config: RelationConfig,
        init: &mut InitRng,
    ) -> Result<Self> {
        config.validate()?;
        let scene_embed = Linear::new(scene_channels, config.embed_dim, init);
        let n_proj = if config.scale_aware { 4 } else { 1 };
        let projections = (0..n_proj)
            .map(|_| ConvBnRelu::new(d, config.embed_dim, 1, 1, 0, init))
            .collect();
        let encoders = [(); 4].map(|_| ConvBnRelu::new(d, d, 1, 1, 0, init));
        Ok(RelationModule {
            config,
            scene_embed,
            projections,
            encoders,
        })
    }

    /// Number of distinct projection parameter sets (4 when scale-aware).
    pub fn projection_count(&self) -> usize {
        self.projections.len()
    }

    fn projection_mut(&mut self, level_idx: usize) -> &mut ConvBnRelu<T> {
        if self.config.scale_aware {
            &mut self.projections[level_idx]
        } else {
            &mut self.projections[0]
        }
    }

    fn projection(&self, level_idx: usize) -> &ConvBnRelu<T> {
        if self.config.scale_aware {
            &self.projections[level_idx]
        } else {
            &self.projections[0]
        }
    }

    /// Projects the pooled scene vector into the shared space.
    pub fn embed_scene(&self, scene: &SceneContext<T>) -> Array2<T> {
        self.scene_embed.forward(&scene.pooled)
    }

    pub fn forward_train(
        &mut self,
        pyramid: &FeaturePyramid<T>,
        scene: &SceneContext<T>,
    ) -> (RelationSet<T>, RelationCache<T>) {
        let u = self.embed_scene(scene);
        self.forward_train_with_embedding(pyramid, u)
    }

    /// Training forward with the scene embedding supplied directly; the
    /// gradient-verification tests drive the module through this entry.
    pub fn forward_train_with_embedding(
        &mut self,
        pyramid: &FeaturePyramid<T>,
        u: Array2<T>,
    ) -> (RelationSet<T>, RelationCache<T>) {
        let mut projection: Vec<ConvBnReluCache<T>> = Vec::with_capacity(4);
        let mut encoder: Vec<ConvBnReluCache<T>> = Vec::with_capacity(4);
        let mut relation: Vec<Array4<T>> = Vec::with_capacity(4);
        let mut gate: Vec<Array4<T>> = Vec::with_capacity(4);
        let mut gated: Vec<Array4<T>> = Vec::with_capacity(4);
        for li in 0..4 {
            let v = &pyramid.maps[li];
            let p = self.projection_mut(li).forward_train(v);
            let r = relation_map(&u, &p.y);
            let g = ops::sigmoid(&r);
            let e = self.encoders[li].forward_train(v);
            gated.push(apply_gate(&g, &e.y));
            relation.push(r);
            gate.push(g);
            projection.push(p);
            encoder.push(e);
        }
        let set = RelationSet {
            projected: std::array::from_fn(|i| projection[i].y.clone()),
            scene_embedding: u.clone(),
            relation: std::array::from_fn(|i| relation[i].clone()),
            encoded: std::array::from_fn(|i| encoder[i].y.clone()),
            gated: gated.try_into().unwrap_or_else(|_| unreachable!()),
        };
        let cache = RelationCache {
            projection: projection.try_into().unwrap_or_else(|_| unreachable!()),
            encoder: encoder.try_into().unwrap_or_else(|_| unreachable!()),
            gate: gate.try_into().unwrap_or_else(|_| unreachable!()),
            scene_embedding: u,
        };
        (set, cache)
    }

    pub fn forward_eval(
        &self,
        pyramid: &FeaturePyramid<T>,
        scene: &SceneContext<T>,
    ) -> RelationSet<T> {
        let u = self.embed_scene(scene);
        let mut projected: Vec<Array4<T>> = Vec::with_capacity(4);
        let mut relation: Vec<Array4<T>> = Vec::with_capacity(4);
        let mut encoded: Vec<Array4<T>> = Vec::with_capacity(4);
        let mut gated: Vec<Array4<T>> = Vec::with_capacity(4);
        for li in 0..4 {
            let v = &pyramid.maps[li];
            let p = self.projection(li).forward_eval(v);
            let r = relation_map(&u, &p);
            let g = ops::sigmoid(&r);
            let e = self.encoders[li].forward_eval(v);
            gated.push(apply_gate(&g, &e));
            projected.push(p);
            relation.push(r);
            encoded.push(e);
        }
        RelationSet {
            projected: projected.try_into().unwrap_or_else(|_| unreachable!()),
            scene_embedding: u,
            relation: relation.try_into().unwrap_or_else(|_| unreachable!()),
            encoded: encoded.try_into().unwrap_or_else(|_| unreachable!()),
            gated: gated.try_into().unwrap_or_else(|_| unreachable!()),
        }
    }

    /// Backpropagates gradients of the gated outputs; returns gradients for
    /// the pyramid levels and accumulates parameter gradients (including the
    /// scene projection, whose input gradient is returned for the pooled
    /// scene vector).
    pub fn backward(
        &mut self,
        pyramid: &FeaturePyramid<T>,
        scene: &SceneContext<T>,
        cache: &RelationCache<T>,
        d_gated: [Array4<T>; 4],
    ) -> ([Array4<T>; 4], Array2<T>) {
        let (d_pyramid, du) = self.backward_with_embedding(pyramid, cache, d_gated);
        let d_pooled = self.scene_embed.backward(&scene.pooled, &du);
        (d_pyramid, d_pooled)
    }

    /// Backward stopping at the scene embedding: returns pyramid gradients
    /// and the gradient with respect to the embedding itself.
    pub fn backward_with_embedding(
        &mut self,
        pyramid: &FeaturePyramid<T>,
        cache: &RelationCache<T>,
        d_gated: [Array4<T>; 4],
    ) -> ([Array4<T>; 4], Array2<T>) {
        let (batch, d_u) = cache.scene_embedding.dim();
        let mut du = Array2::<T>::zeros((batch, d_u));
        let mut d_pyramid: [Option<Array4<T>>; 4] = Default::default();
        for (li, dz) in d_gated.into_iter().enumerate() {
            let v = &pyramid.maps[li];
            let g = &cache.gate[li];
            let e = &cache.encoder[li].y;
            let (b, c, h, w) = dz.dim();

            // Split the product rule: gradient into the encoder branch and
            // into the single-channel gate.
            let d_encoded = apply_gate(g, &dz);
            let mut d_gate = Array4::<T>::zeros((b, 1, h, w));
            for bi in 0..b {
                for ci in 0..c {
                    let dzc = dz.index_axis(Axis(0), bi);
                    let dzc = dzc.index_axis(Axis(0), ci);
                    let ec = e.index_axis(Axis(0), bi);
                    let ec = ec.index_axis(Axis(0), ci);
                    let mut out = d_gate.index_axis_mut(Axis(0), bi);
                    let mut out = out.index_axis_mut(Axis(0), 0);
                    ndarray::Zip::from(&mut out).and(&dzc).and(&ec).for_each(
                        |o, &dv, &ev| {
                            *o += dv * ev;
                        },
                    );
                }
            }
            // through the sigmoid
            let dr = ops::sigmoid_backward(g, &d_gate);

            // relation map: r = sum_c u_c * proj_c
            let proj = &cache.projection[li].y;
            let mut d_proj = Array4::<T>::zeros(proj.raw_dim());
            for bi in 0..b {
                let drb = dr.index_axis(Axis(0), bi);
                let drb = drb.index_axis(Axis(0), 0);
                for ci in 0..d_u {
                    let uc = cache.scene_embedding[[bi, ci]];
                    let pc = proj.index_axis(Axis(0), bi);
                    let pc = pc.index_axis(Axis(0), ci);
                    let mut dpc = d_proj.index_axis_mut(Axis(0), bi);
                    let mut dpc = dpc.index_axis_mut(Axis(0), ci);
                    let mut acc = T::zero();
                    ndarray::Zip::from(&mut dpc).and(&drb).and(&pc).for_each(
                        |dp, &drv, &pv| {
                            *dp = uc * drv;
                            acc += drv * pv;
                        },
                    );
                    du[[bi, ci]] += acc;
                }
            }

            let d_v_enc = self.encoders[li]
                .backward(v, &cache.encoder[li], &d_encoded, true)
                .unwrap();
            let d_v_proj = self
                .projection_mut(li)
                .backward(v, &cache.projection[li], &d_proj, true)
                .unwrap();
            d_pyramid[li] = Some(d_v_enc + d_v_proj);
        }
        (d_pyramid.map(Option::unwrap), du)
    }
}

impl<T: Scalar> ParamSet<T> for RelationModule<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.scene_embed
            .visit_params(&join_path(prefix, "scene_embed"), f);
        if self.config.scale_aware {
            for (li, p) in self.projections.iter_mut().enumerate() {
                p.visit_params(&join_path(prefix, &format!("projection{}", li + 2)), f);
            }
        } else {
            self.projections[0].visit_params(&join_path(prefix, "projection_shared"), f);
        }
        for (li, e) in self.encoders.iter_mut().enumerate() {
            e.visit_params(&join_path(prefix, &format!("encoder{}", li + 2)), f);
        }
    }
}

/// Channelwise inner product between the scene embedding and every spatial
/// position: `r[b, 0, y, x] = sum_c u[b, c] * projected[b, c, y, x]`.
pub fn relation_map<T: Scalar>(u: &Array2<T>, projected: &Array4<T>) -> Array4<T> {
    let (b, c, h, w) = projected.dim();
    assert_eq!(
        u.dim(),
        (b, c),
        "scene embedding does not match projected features"
    );
    let mut r = Array4::zeros((b, 1, h, w));
    for bi in 0..b {
        let mut rb = r.index_axis_mut(Axis(0), bi);
        let mut rb = rb.index_axis_mut(Axis(0), 0);
        for ci in 0..c {
            let uc = u[[bi, ci]];
            let pc = projected.index_axis(Axis(0), bi);
            let pc = pc.index_axis(Axis(0), ci);
            ndarray::Zip::from(&mut rb).and(&pc).for_each(|rv, &pv| {
                *rv += uc * pv;
            });
        }
    }
    r
}

/// Broadcasts a single-channel gate across all channels of `features`.
pub fn apply_gate<T: Scalar>(gate: &Array4<T>, features: &Array4<T>) -> Array4<T> {
    let (b, c, h, w) = features.dim();
    assert_eq!(gate.dim(), (b, 1, h, w), "gate must be single-channel");
    let mut out = features.clone();
    for bi in 0..b {
        let gb = gate.index_axis(Axis(0), bi);
        let gb = gb.index_axis(Axis(0), 0);
        for ci in 0..c {
            let mut oc = out.index_axis_mut(Axis(0), bi);
            let mut oc = oc.index_axis_mut(Axis(0), ci);
            ndarray::Zip::from(&mut oc).and(&gb).for_each(|ov, &gv| {
                *ov *= gv;
            });
        }
    }
    out
}
