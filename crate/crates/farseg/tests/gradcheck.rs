//! Finite-difference verification of every backward pass, in double
//! precision where central differences resolve far below the target
//! tolerances.

use farseg::encoder::{scene_pool, scene_pool_backward, BackboneFeatures, FeaturePyramid};
use farseg::model::{BackboneSpec, FarSeg, ModelConfig};
use farseg::nn::gradcheck::{max_rel_error, numeric_grad};
use farseg::nn::{self, zero_grads, BatchNorm2d, InitRng, Linear, ParamSet, Scalar};
use farseg::relation::{RelationConfig, RelationModule};
use ndarray::{Array2, Array4, ArrayD, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random4(rng: &mut ChaCha8Rng, dim: (usize, usize, usize, usize)) -> Array4<f64> {
    Array4::from_shape_simple_fn(dim, || rng.random_range(-1.0..1.0))
}

fn random2(rng: &mut ChaCha8Rng, dim: (usize, usize)) -> Array2<f64> {
    Array2::from_shape_simple_fn(dim, || rng.random_range(-1.0..1.0))
}

#[test]
fn batchnorm_train_backward_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut bn = BatchNorm2d::<f64>::new(3);
    bn.gamma.value = ArrayD::from_shape_simple_fn(ndarray::IxDyn(&[3]), || rng.random_range(0.5..1.5));
    bn.beta.value = ArrayD::from_shape_simple_fn(ndarray::IxDyn(&[3]), || rng.random_range(-0.5..0.5));
    let x = random4(&mut rng, (2, 3, 4, 5));
    let proj = random4(&mut rng, (2, 3, 4, 5));

    let (_, cache) = bn.forward_train(&x);
    let dx = bn.backward(&cache, &proj);

    let num_dx = numeric_grad(&x.clone().into_dyn(), 1e-5, |xd| {
        let x4: Array4<f64> = xd.clone().into_dimensionality().unwrap();
        (&bn.forward_train(&x4).0 * &proj).sum()
    });
    let err = max_rel_error(&dx.into_dyn(), &num_dx, 1e-8);
    assert!(err < 1e-6, "bn dx err {err}");

    let g0 = bn.gamma.value.clone();
    let num_dg = numeric_grad(&g0, 1e-5, |gd| {
        bn.gamma.value = gd.clone();
        (&bn.forward_train(&x).0 * &proj).sum()
    });
    bn.gamma.value = g0;
    let err = max_rel_error(&bn.gamma.grad, &num_dg, 1e-8);
    assert!(err < 1e-6, "bn dgamma err {err}");

    let num_db = numeric_grad(&bn.beta.value.clone(), 1e-5, |bd| {
        bn.beta.value = bd.clone();
        (&bn.forward_train(&x).0 * &proj).sum()
    });
    let err = max_rel_error(&bn.beta.grad, &num_db, 1e-8);
    assert!(err < 1e-6, "bn dbeta err {err}");
}

#[test]
fn linear_backward_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut init = InitRng::new(17);
    let mut lin = Linear::<f64>::new(4, 3, &mut init);
    let x = random2(&mut rng, (5, 4));
    let proj = random2(&mut rng, (5, 3));

    let dx = lin.backward(&x, &proj);
    let num_dx = numeric_grad(&x.clone().into_dyn(), 1e-5, |xd| {
        let x2: Array2<f64> = xd.clone().into_dimensionality().unwrap();
        (&lin.forward(&x2) * &proj).sum()
    });
    assert!(max_rel_error(&dx.into_dyn(), &num_dx, 1e-8) < 1e-6);

    let w0 = lin.weight.value.clone();
    let num_dw = numeric_grad(&w0, 1e-5, |wd| {
        lin.weight.value = wd.clone();
        (&lin.forward(&x) * &proj).sum()
    });
    lin.weight.value = w0;
    assert!(max_rel_error(&lin.weight.grad, &num_dw, 1e-8) < 1e-6);
}

#[test]
fn resize_and_pool_backward_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random4(&mut rng, (1, 2, 4, 6));

    // bilinear, non-integer ratio included
    for (oh, ow) in [(8usize, 12usize), (7, 9), (2, 3)] {
        let proj = random4(&mut rng, (1, 2, oh, ow));
        let dx = farseg::nn::resize::resize_bilinear_backward(&proj, 4, 6);
        let num = numeric_grad(&x.clone().into_dyn(), 1e-5, |xd| {
            let x4: Array4<f64> = xd.clone().into_dimensionality().unwrap();
            (&farseg::nn::resize::resize_bilinear(&x4, oh, ow) * &proj).sum()
        });
        let err = max_rel_error(&dx.into_dyn(), &num, 1e-8);
        assert!(err < 1e-6, "bilinear {oh}x{ow} err {err}");
    }

    let proj = random4(&mut rng, (1, 2, 8, 12));
    let dx = farseg::nn::resize::upsample_nearest_x2_backward(&proj);
    let num = numeric_grad(&x.clone().into_dyn(), 1e-5, |xd| {
        let x4: Array4<f64> = xd.clone().into_dimensionality().unwrap();
        (&farseg::nn::resize::upsample_nearest_x2(&x4) * &proj).sum()
    });
    assert!(max_rel_error(&dx.into_dyn(), &num, 1e-8) < 1e-6);

    // max pooling: offset inputs so argmax ties cannot straddle the probe
    let x = Array4::from_shape_simple_fn((1, 2, 7, 7), || rng.random_range(-1.0..1.0));
    let (y, arg) = farseg::nn::ops::max_pool_3x3_s2(&x);
    let proj = random4(&mut rng, (1, 2, y.dim().2, y.dim().3));
    let dx = farseg::nn::ops::max_pool_3x3_s2_backward(&arg, &proj, (7, 7));
    let num = numeric_grad(&x.clone().into_dyn(), 1e-6, |xd| {
        let x4: Array4<f64> = xd.clone().into_dimensionality().unwrap();
        (&farseg::nn::ops::max_pool_3x3_s2(&x4).0 * &proj).sum()
    });
    assert!(max_rel_error(&dx.into_dyn(), &num, 1e-8) < 1e-6);
}

/// The relation-module property from the module contract: the gradient of a
/// scalar function of the gated output with respect to the scene embedding
/// `u` and the level features `v` matches central finite differences to
/// better than 1e-4 on a 1 x d x 4 x 4 instance in double precision.
#[test]
fn relation_module_gradients_wrt_embedding_and_features() {
    let d = 6usize;
    let d_u = 5usize;
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut init = InitRng::new(8);
    let mut module = RelationModule::<f64>::new(
        d,
        d,
        RelationConfig {
            embed_dim: d_u,
            scale_aware: true,
        },
        &mut init,
    )
    .unwrap();

    let pyramid = FeaturePyramid {
        maps: [
            random4(&mut rng, (1, d, 4, 4)),
            random4(&mut rng, (1, d, 4, 4)),
            random4(&mut rng, (1, d, 2, 2)),
            random4(&mut rng, (1, d, 2, 2)),
        ],
    };
    let u = random2(&mut rng, (1, d_u));
    let projs: Vec<Array4<f64>> = pyramid
        .maps
        .iter()
        .map(|m| random4(&mut rng, m.dim()))
        .collect();

    let loss = |module: &mut RelationModule<f64>, pyramid: &FeaturePyramid<f64>, u: &Array2<f64>| {
        let (set, _) = module.forward_train_with_embedding(pyramid, u.clone());
        set.gated
            .iter()
            .zip(&projs)
            .map(|(z, p)| (z * p).sum())
            .sum::<f64>()
    };

    zero_grads(&mut module);
    let (_, cache) = module.forward_train_with_embedding(&pyramid, u.clone());
    let d_gated: [Array4<f64>; 4] = std::array::from_fn(|i| projs[i].clone());
    let (d_pyramid, du) = module.backward_with_embedding(&pyramid, &cache, d_gated);

    let num_du = numeric_grad(&u.clone().into_dyn(), 1e-5, |ud| {
        let u2: Array2<f64> = ud.clone().into_dimensionality().unwrap();
        loss(&mut module, &pyramid, &u2)
    });
    let err = max_rel_error(&du.into_dyn(), &num_du, 1e-8);
    assert!(err < 1e-4, "du err {err}");

    for li in 0..4 {
        let num_dv = numeric_grad(&pyramid.maps[li].clone().into_dyn(), 1e-5, |vd| {
            let mut p2 = FeaturePyramid {
                maps: pyramid.maps.clone(),
            };
            p2.maps[li] = vd.clone().into_dimensionality().unwrap();
            loss(&mut module, &p2, &u)
        });
        let err = max_rel_error(&d_pyramid[li].clone().into_dyn(), &num_dv, 1e-8);
        assert!(err < 1e-4, "dv level {} err {err}", li + 2);
    }
}

#[test]
fn scene_pool_backward_is_uniform_spread() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let c5 = random4(&mut rng, (2, 3, 2, 2));
    let features = BackboneFeatures {
        maps: [c5.clone(), c5.clone(), c5.clone(), c5.clone()],
        input_hw: (64, 64),
    };
    let proj = random2(&mut rng, (2, 3));
    let d = scene_pool_backward(&proj, c5.dim());
    let num = numeric_grad(&c5.clone().into_dyn(), 1e-5, |xd| {
        let x4: Array4<f64> = xd.clone().into_dimensionality().unwrap();
        let f = BackboneFeatures {
            maps: [
                features.maps[0].clone(),
                features.maps[1].clone(),
                features.maps[2].clone(),
                x4,
            ],
            input_hw: (64, 64),
        };
        (&scene_pool(&f).pooled * &proj).sum()
    });
    assert!(max_rel_error(&d.into_dyn(), &num, 1e-8) < 1e-6);
}

/// End-to-end check: a scalar function of the full model's logits is
/// differentiated through decoder, relation module, pyramid, and backbone;
/// sampled parameter gradients from the hand-written backward must match
/// finite differences.
#[test]
fn full_model_parameter_gradients_match_finite_differences() {
    let config = ModelConfig {
        backbone: BackboneSpec::Custom(farseg::encoder::BackboneConfig {
            stem_width: 4,
            stem_kernel: 3,
            stem_pool: false,
            widths: [4, 4, 6, 6],
            blocks: [1, 1, 1, 1],
            block: farseg::encoder::BlockKind::Basic,
        }),
        fpn_channels: 4,
        embed_dim: 4,
        scale_aware: true,
        decoder_channels: 4,
        num_classes: 3,
    };
    let mut model = FarSeg::<f64>::new(&config, 1234).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let x = random4(&mut rng, (2, 3, 32, 32));
    let proj = random4(&mut rng, (2, 3, 32, 32));

    zero_grads(&mut model);
    let (_, cache) = model.forward_train(&x).unwrap();
    let d_logits = proj.clone();
    model.backward(&x, &cache, &d_logits);

    // Collect analytic gradients for a sample of elements from every
    // trainable tensor, then compare against central differences.
    struct Sample {
        name: String,
        flat_index: usize,
        analytic: f64,
    }
    let mut samples: Vec<Sample> = Vec::new();
    let mut pick = ChaCha8Rng::seed_from_u64(5);
    model.visit_params("", &mut |name, p| {
        if p.kind != nn::ParamKind::Trainable {
            return;
        }
        let n = p.len();
        let idx = pick.random_range(0..n);
        samples.push(Sample {
            name: name.to_owned(),
            flat_index: idx,
            analytic: p.grad.as_slice().unwrap()[idx],
        });
    });
    assert!(samples.len() > 60, "expected a deep parameter tree");

    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut worst_name = String::new();
    for s in &samples {
        let mut eval = |delta: f64| -> f64 {
            model.visit_params("", &mut |name, p| {
                if name == s.name {
                    p.value.as_slice_mut().unwrap()[s.flat_index] += delta;
                }
            });
            let (logits, _) = model.forward_train(&x).unwrap();
            model.visit_params("", &mut |name, p| {
                if name == s.name {
                    p.value.as_slice_mut().unwrap()[s.flat_index] -= delta;
                }
            });
            (&logits * &proj).sum()
        };
        let numeric = (eval(h) - eval(-h)) / (2.0 * h);
        // Some gradients are exactly zero by construction (a bias feeding a
        // batch norm); there only absolute agreement is meaningful.
        if (s.analytic - numeric).abs() < 1e-7 {
            continue;
        }
        let denom = (s.analytic.abs() + numeric.abs()).max(1e-6);
        let err = (s.analytic - numeric).abs() / denom;
        if err > worst {
            worst = err;
            worst_name = s.name.clone();
        }
    }
    assert!(
        worst < 1e-4,
        "worst parameter-gradient mismatch {worst} at {worst_name}"
    );
}

/// Loss gradient with respect to the logits on a 2x4x3x3 double-precision
/// instance, with `Z` held at its center-point value inside the perturbation
/// (matching the stop-gradient treatment of the normalization constant).
#[test]
fn fa_loss_gradient_matches_finite_differences() {
    use farseg::loss::{fa_loss_frozen_z, fa_loss_with_grad, Annealing, LossConfig};
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let logits = random4(&mut rng, (2, 4, 3, 3));
    let mut labels = ndarray::Array3::<u8>::zeros((2, 3, 3));
    for v in labels.iter_mut() {
        *v = rng.random_range(0..4) as u8;
    }
    // one ignored pixel to exercise the masking path
    labels[[1, 2, 2]] = 255;

    for (gamma, t) in [(2.0, 40usize), (0.5, 0), (5.0, 10_000), (0.0, 99)] {
        let cfg = LossConfig {
            gamma,
            annealing: Annealing::Cosine,
            annealing_step: 120,
            decay_factor: 0.9,
            normalize: true,
            ignore_label: Some(255),
        };
        let (breakdown, grad) = fa_loss_with_grad(&logits, &labels, &cfg, t).unwrap();
        let z = breakdown.z_value;
        let num = numeric_grad(&logits.clone().into_dyn(), 1e-6, |ld| {
            let l4: Array4<f64> = ld.clone().into_dimensionality().unwrap();
            fa_loss_frozen_z(&l4, &labels, &cfg, t, z).unwrap().total
        });
        let err = max_rel_error(&grad.into_dyn(), &num, 1e-8);
        assert!(err < 1e-4, "gamma {gamma} t {t}: loss grad err {err}");
    }
}

/// Batch independence: gradients for one image are unaffected by swapping
/// the other image in the batch (batch norm couples activations, not the
/// backward bookkeeping per se, so run with identical second images).
#[test]
fn relation_outputs_swap_with_batch_order() {
    let config = ModelConfig::tiny(4);
    let model = FarSeg::<f64>::new(&config, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let a = random4(&mut rng, (1, 3, 32, 32));
    let b = random4(&mut rng, (1, 3, 32, 32));
    let mut ab = Array4::zeros((2, 3, 32, 32));
    ab.index_axis_mut(Axis(0), 0).assign(&a.index_axis(Axis(0), 0));
    ab.index_axis_mut(Axis(0), 1).assign(&b.index_axis(Axis(0), 0));
    let mut ba = Array4::zeros((2, 3, 32, 32));
    ba.index_axis_mut(Axis(0), 0).assign(&b.index_axis(Axis(0), 0));
    ba.index_axis_mut(Axis(0), 1).assign(&a.index_axis(Axis(0), 0));

    let out_ab = model.forward_eval(&ab).unwrap();
    let out_ba = model.forward_eval(&ba).unwrap();
    for li in 0..4 {
        let r_ab_0 = out_ab.relation[li].index_axis(Axis(0), 0);
        let r_ba_1 = out_ba.relation[li].index_axis(Axis(0), 1);
        assert_eq!(r_ab_0, r_ba_1, "relation maps must swap with the batch");
        let r_ab_1 = out_ab.relation[li].index_axis(Axis(0), 1);
        let r_ba_0 = out_ba.relation[li].index_axis(Axis(0), 0);
        assert_eq!(r_ab_1, r_ba_0);
    }
}
