#![allow(dead_code)]

use rml_lab::model::{Architecture, ModelState};
use rml_lab::numerics::{Matrix, RngStream};

/// Largest relative error between the analytic gradient and a central
/// difference of `(1/B) Σ w_i ℓ_i`, over every parameter entry.
pub fn gradient_error(model: &ModelState, x: &Matrix, labels: &[usize], weights: &[f64], h: f64) -> f64 {
    let objective = |m: &ModelState| -> f64 {
        let losses = m.losses(x, labels).unwrap();
        losses.iter().zip(weights).map(|(l, w)| l * w).sum::<f64>() / labels.len() as f64
    };
    let (_, grads) = model.loss_and_grad(x, labels, weights).unwrap();
    let mut worst: f64 = 0.0;
    for (p, grad) in grads.iter().enumerate() {
        for j in 0..grad.data().len() {
            let mut plus = model.clone();
            plus.params_mut()[p].data_mut()[j] += h;
            let mut minus = model.clone();
            minus.params_mut()[p].data_mut()[j] -= h;
            let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
            let an = grad.data()[j];
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    worst
}

/// A random model and batch for the gradient check.
pub fn random_case(arch: Architecture, rng: &mut RngStream) -> (ModelState, Matrix, Vec<usize>, Vec<f64>) {
    let d = 1 + rng.below(6);
    let c = 2 + rng.below(4);
    let b = 1 + rng.below(8);
    let model = ModelState::init(arch, d, c, rng);
    let x = Matrix::from_vec(b, d, (0..b * d).map(|_| 4.0 * rng.next_f64() - 2.0).collect()).unwrap();
    let labels = (0..b).map(|_| rng.below(c)).collect();
    let weights = (0..b).map(|_| rng.next_f64()).collect();
    (model, x, labels, weights)
}

/// Worst gradient error over `cases` random cases of each architecture.
pub fn gradient_sweep(cases: usize, seed: u64) -> f64 {
    let mut rng = RngStream::new(seed, 77);
    let mut worst: f64 = 0.0;
    for arch in [Architecture::Linear, Architecture::Mlp { hidden: 5 }] {
        for _ in 0..cases {
            let (m, x, y, w) = random_case(arch, &mut rng);
            worst = worst.max(gradient_error(&m, &x, &y, &w, 1e-5));
        }
    }
    worst
}
