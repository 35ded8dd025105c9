//! Small differentiable classifiers with hand-written backpropagation.

mod checkpoint;
mod optim;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use optim::{sgd_step, CosineSchedule, OptimizerConfig, OptimizerState};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{cross_entropy_of, softmax_inplace, standard_normal, Matrix, RngStream, LOSS_FLOOR};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Architecture {
    /// Softmax regression.
    Linear,
    /// One tanh hidden layer.
    Mlp { hidden: usize },
}

/// Parameters of a classifier.
///
/// `Linear`: `[W (d×c), b (1×c)]`. `Mlp`: `[W1 (d×h), b1 (1×h), W2 (h×c), b2 (1×c)]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    architecture: Architecture,
    dim: usize,
    classes: usize,
    params: Vec<Matrix>,
}

impl ModelState {
    pub fn zeros(architecture: Architecture, dim: usize, classes: usize) -> Self {
        let params = param_shapes(architecture, dim, classes)
            .into_iter()
            .map(|(r, c)| Matrix::zeros(r, c))
            .collect();
        Self {
            architecture,
            dim,
            classes,
            params,
        }
    }

    /// Weights `~ N(0, 1/fan_in)`, biases zero.
    pub fn init(architecture: Architecture, dim: usize, classes: usize, rng: &mut RngStream) -> Self {
        let mut model = Self::zeros(architecture, dim, classes);
        for (i, p) in model.params.iter_mut().enumerate() {
            if i % 2 == 1 {
                continue;
            }
            let sd = 1.0 / (p.rows() as f64).sqrt();
            p.data_mut().iter_mut().for_each(|v| *v = sd * standard_normal(rng));
        }
        model
    }

    pub fn from_params(
        architecture: Architecture,
        dim: usize,
        classes: usize,
        params: Vec<Matrix>,
    ) -> Result<Self> {
        let shapes = param_shapes(architecture, dim, classes);
        let actual: Vec<_> = params.iter().map(Matrix::shape).collect();
        if shapes != actual {
            return Err(Error::invalid(format!(
                "parameter shapes {actual:?} do not match {architecture:?} (expected {shapes:?})"
            )));
        }
        Ok(Self {
            architecture,
            dim,
            classes,
            params,
        })
    }

    pub fn architecture(&self) -> Architecture {
        self.architecture
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn params(&self) -> &[Matrix] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Matrix] {
        &mut self.params
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(Matrix::is_finite)
    }

    fn check_input(&self, features: &Matrix) -> Result<()> {
        if features.cols() != self.dim {
            return Err(Error::invalid(format!(
                "feature dimension {} does not match model dimension {}",
                features.cols(),
                self.dim
            )));
        }
        Ok(())
    }

    /// Logits, plus the hidden activations for the MLP.
    fn logits_with_hidden(&self, features: &Matrix) -> Result<(Matrix, Option<Matrix>)> {
        self.check_input(features)?;
        match self.architecture {
            Architecture::Linear => {
                let mut z = features.matmul(&self.params[0])?;
                z.add_row_broadcast(&self.params[1]);
                Ok((z, None))
            }
            Architecture::Mlp { .. } => {
                let mut h = features.matmul(&self.params[0])?;
                h.add_row_broadcast(&self.params[1]);
                h.map_inplace(f64::tanh);
                let mut z = h.matmul(&self.params[2])?;
                z.add_row_broadcast(&self.params[3]);
                Ok((z, Some(h)))
            }
        }
    }

    pub fn logits(&self, features: &Matrix) -> Result<Matrix> {
        Ok(self.logits_with_hidden(features)?.0)
    }

    /// Row-wise class probabilities.
    pub fn forward(&self, features: &Matrix) -> Result<Matrix> {
        let mut z = self.logits(features)?;
        for r in 0..z.rows() {
            if let Some(bad) = z.row(r).iter().position(|v| !v.is_finite()) {
                return Err(Error::NumericalFailure {
                    index: r,
                    message: format!("non-finite logit for class {bad}"),
                });
            }
            softmax_inplace(z.row_mut(r));
        }
        Ok(z)
    }

    pub fn predict(&self, features: &Matrix) -> Result<Vec<usize>> {
        let z = self.logits(features)?;
        Ok((0..z.rows()).map(|r| argmax(z.row(r))).collect())
    }

    /// Plain per-sample cross-entropy.
    pub fn losses(&self, features: &Matrix, labels: &[usize]) -> Result<Vec<f64>> {
        let probs = self.forward(features)?;
        check_labels(labels, probs.rows(), self.classes)?;
        Ok(labels
            .iter()
            .enumerate()
            .map(|(i, &y)| cross_entropy_of(probs.get(i, y)))
            .collect())
    }

    /// Per-sample plain CE and the gradient of `(1/B) Σ w_i ℓ_i`.
    pub fn loss_and_grad(
        &self,
        features: &Matrix,
        labels: &[usize],
        weights: &[f64],
    ) -> Result<(Vec<f64>, Vec<Matrix>)> {
        self.loss_and_grad_with(features, labels, |_| Ok(weights.to_vec()))
    }

    /// Like [`ModelState::loss_and_grad`], with weights derived from this
    /// forward pass's losses.
    pub fn loss_and_grad_with<F>(&self, features: &Matrix, labels: &[usize], weigh: F) -> Result<(Vec<f64>, Vec<Matrix>)>
    where
        F: FnOnce(&[f64]) -> Result<Vec<f64>>,
    {
        let batch = features.rows();
        check_labels(labels, batch, self.classes)?;
        let (logits, hidden) = self.logits_with_hidden(features)?;
        let mut dz = logits;
        let mut losses = Vec::with_capacity(batch);
        for (i, &y) in labels.iter().enumerate() {
            let row = dz.row_mut(i);
            softmax_inplace(row);
            let loss = cross_entropy_of(row[y]);
            if !loss.is_finite() || row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NumericalFailure {
                    index: i,
                    message: format!("non-finite loss {loss}"),
                });
            }
            losses.push(loss);
        }
        let weights = weigh(&losses)?;
        if weights.len() != batch {
            return Err(Error::invalid(format!("{} weights for batch of {batch}", weights.len())));
        }
        if let Some(i) = weights.iter().position(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::invalid(format!("weight {} at {i} is not finite and nonnegative", weights[i])));
        }
        for (i, &y) in labels.iter().enumerate() {
            let row = dz.row_mut(i);
            let p_y = row[y];
            // d/dz of -ln(p_y + floor) is p_y/(p_y+floor) · (p - e_y); zero where clamped.
            let scale = if losses[i] > 0.0 {
                weights[i] / batch as f64 * p_y / (p_y + LOSS_FLOOR)
            } else {
                0.0
            };
            row[y] -= 1.0;
            row.iter_mut().for_each(|v| *v *= scale);
        }
        let grads = match self.architecture {
            Architecture::Linear => vec![features.t_matmul(&dz)?, dz.column_sums()],
            Architecture::Mlp { .. } => {
                let h = hidden.expect("mlp forward keeps hidden activations");
                let d_w2 = h.t_matmul(&dz)?;
                let d_b2 = dz.column_sums();
                let mut dh = dz.matmul_t(&self.params[2])?;
                for (g, a) in dh.data_mut().iter_mut().zip(h.data()) {
                    *g *= 1.0 - a * a;
                }
                vec![features.t_matmul(&dh)?, dh.column_sums(), d_w2, d_b2]
            }
        };
        Ok((losses, grads))
    }
}

fn param_shapes(architecture: Architecture, dim: usize, classes: usize) -> Vec<(usize, usize)> {
    match architecture {
        Architecture::Linear => vec![(dim, classes), (1, classes)],
        Architecture::Mlp { hidden } => vec![(dim, hidden), (1, hidden), (hidden, classes), (1, classes)],
    }
}

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::invalid(format!("{} labels for {rows} rows", labels.len())));
    }
    if let Some(y) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::invalid(format!("label {y} out of range for {classes} classes")));
    }
    Ok(())
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = j;
        }
    }
    best
}

/// Momentum-teacher update: `teacher ← (1 − λ)·student + λ·teacher`.
pub fn ema_update(teacher: &mut ModelState, student: &ModelState, lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!("ema weight {lambda} outside [0, 1]")));
    }
    if teacher.architecture != student.architecture
        || teacher.dim != student.dim
        || teacher.classes != student.classes
    {
        return Err(Error::invalid("teacher and student architectures differ"));
    }
    for (t, s) in teacher.params.iter_mut().zip(&student.params) {
        for (tv, sv) in t.data_mut().iter_mut().zip(s.data()) {
            *tv = (1.0 - lambda) * sv + lambda * *tv;
        }
    }
    Ok(())
}
