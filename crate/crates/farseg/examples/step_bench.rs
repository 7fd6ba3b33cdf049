//! Times one optimizer step at the desk-scale training shape.

use farseg::loss::{fa_loss_with_grad, LossConfig};
use farseg::model::{FarSeg, ModelConfig};
use farseg::nn::{zero_grads, SgdMomentum};
use ndarray::{Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let config = ModelConfig::tiny(4);
    let mut model = FarSeg::<f32>::new(&config, 7).unwrap();
    let mut opt = SgdMomentum::<f32>::new(0.9, 1e-4);
    let x = Array4::from_shape_simple_fn((8, 3, 64, 64), || rng.random_range(-1.0f32..1.0));
    let mut labels = Array3::<u8>::zeros((8, 64, 64));
    for v in labels.iter_mut() {
        *v = rng.random_range(0..4) as u8;
    }
    let loss_cfg = LossConfig { annealing_step: 400, ..LossConfig::default() };

    // warmup
    for _ in 0..3 {
        step(&mut model, &mut opt, &x, &labels, &loss_cfg);
    }
    let n = 20;
    let t0 = Instant::now();
    for _ in 0..n {
        step(&mut model, &mut opt, &x, &labels, &loss_cfg);
    }
    let dt = t0.elapsed().as_secs_f64() / n as f64;
    println!("tiny-profile step: {:.1} ms  ({:.0} steps/min)", dt * 1e3, 60.0 / dt);

    let t0 = Instant::now();
    let _ = model.forward_eval(&x).unwrap();
    println!("eval batch fwd:   {:.1} ms", t0.elapsed().as_secs_f64() * 1e3);
}

fn step(
    model: &mut FarSeg<f32>,
    opt: &mut SgdMomentum<f32>,
    x: &Array4<f32>,
    labels: &Array3<u8>,
    loss_cfg: &LossConfig,
) {
    zero_grads(model);
    let (logits, cache) = model.forward_train(x).unwrap();
    let (_b, grad) = fa_loss_with_grad(&logits, labels, loss_cfg, 100).unwrap();
    model.backward(x, &cache, &grad);
    opt.step(model, 0.007);
}
