use serde::{Deserialize, Serialize};

use crate::autodiff::tape::ParamSet;
use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamHyper {
    pub fn with_lr(lr: f64) -> Self {
        AdamHyper {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction; one pair of moment buffers per parameter.
#[derive(Debug, Clone)]
pub struct Adam {
    pub hyper: AdamHyper,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamSet, hyper: AdamHyper) -> Self {
        let zeros = |p: &crate::autodiff::tape::Parameter| Tensor::zeros(p.value.rows(), p.value.cols());
        Adam {
            hyper,
            step: 0,
            first: params.iter().map(zeros).collect(),
            second: params.iter().map(zeros).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one update from the gradients currently held in `params`.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        if params.len() != self.first.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer tracks {} parameters, got {}",
                self.first.len(),
                params.len()
            )));
        }
        for (p, m) in params.iter().zip(&self.first) {
            if p.value.shape() != m.shape() || p.grad.shape() != m.shape() {
                return Err(Error::Shape {
                    op: "adam_step",
                    left: p.value.shape(),
                    right: m.shape(),
                });
            }
        }
        self.step += 1;
        let AdamHyper {
            lr,
            beta1,
            beta2,
            eps,
        } = self.hyper;
        let t = self.step as f64;
        let c1 = 1.0 - beta1.powf(t);
        let c2 = 1.0 - beta2.powf(t);
        for ((p, m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            let values = p.value.data_mut();
            for (((x, &g), mi), vi) in values
                .iter_mut()
                .zip(p.grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * g;
                *vi = beta2 * *vi + (1.0 - beta2) * g * g;
                let update = lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
                if update != 0.0 {
                    *x -= update;
                }
            }
        }
        Ok(())
    }
}

/// Joint L2 norm of every gradient in the set.
pub fn global_grad_norm(params: &ParamSet) -> f64 {
    params.iter().map(|p| p.grad.sum_of_squares()).sum::<f64>().sqrt()
}

/// Rescale all gradients so their joint L2 norm is at most `max_norm`.
///
/// Returns the norm before clipping. Gradients already within the bound are untouched.
pub fn clip_global_norm(params: &mut ParamSet, max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "clip norm must be positive, got {max_norm}"
        )));
    }
    let norm = global_grad_norm(params);
    if norm > max_norm {
        let factor = max_norm / norm;
        for p in params.iter_mut() {
            p.grad.scale_in_place(factor);
        }
    }
    Ok(norm)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: Tensor, grad: Tensor) -> ParamSet {
        let mut ps = ParamSet::new();
        let id = ps.add("w", value);
        ps.get_mut(id).grad = grad;
        ps
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut ps = single(Tensor::row_vector(&[1.0, -2.0]), Tensor::zeros(1, 2));
        let before = ps.clone();
        let mut adam = Adam::new(&ps, AdamHyper::default());
        for _ in 0..5 {
            adam.step(&mut ps).unwrap();
        }
        assert_eq!(ps.iter().next().unwrap().value, before.iter().next().unwrap().value);
        assert_eq!(adam.step_count(), 5);
    }

    #[test]
    fn zero_lr_is_bit_identical() {
        let mut ps = single(Tensor::row_vector(&[0.3, -0.7, 0.0]), Tensor::row_vector(&[1.0, -4.0, 2.5]));
        let before = ps.clone();
        let mut adam = Adam::new(&ps, AdamHyper::with_lr(0.0));
        for _ in 0..10 {
            adam.step(&mut ps).unwrap();
        }
        let (a, b) = (&ps.iter().next().unwrap().value, &before.iter().next().unwrap().value);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn first_step_magnitude_is_lr() {
        // m̂ = g, v̂ = g², so the step is lr·g/(|g| + eps).
        let g = 0.37;
        let lr = 1e-3;
        let mut ps = single(Tensor::scalar(1.0), Tensor::scalar(g));
        let mut adam = Adam::new(&ps, AdamHyper::with_lr(lr));
        adam.step(&mut ps).unwrap();
        let expected = 1.0 - lr * g / (g + 1e-8);
        assert!((ps.iter().next().unwrap().value.data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn constant_gradient_step_approaches_lr() {
        let lr = 1e-3;
        let mut ps = single(Tensor::scalar(0.0), Tensor::scalar(2.0));
        let mut adam = Adam::new(&ps, AdamHyper::with_lr(lr));
        let mut last = 0.0;
        for _ in 0..2000 {
            let before = ps.iter().next().unwrap().value.data()[0];
            adam.step(&mut ps).unwrap();
            last = before - ps.iter().next().unwrap().value.data()[0];
        }
        assert!((last - lr).abs() < 1e-9, "last step {last}");
    }

    #[test]
    fn shape_mismatch_is_error() {
        let mut ps = single(Tensor::zeros(2, 2), Tensor::zeros(2, 2));
        let mut adam = Adam::new(&ps, AdamHyper::default());
        ps.get_mut(crate::autodiff::ParamId(0)).grad = Tensor::zeros(1, 2);
        assert!(matches!(adam.step(&mut ps), Err(Error::Shape { .. })));
    }

    #[test]
    fn clip_below_bound_is_untouched() {
        let mut ps = single(Tensor::zeros(1, 2), Tensor::row_vector(&[0.3, 0.4]));
        let norm = clip_global_norm(&mut ps, 5.0).unwrap();
        assert_eq!(norm, 0.5);
        assert_eq!(ps.iter().next().unwrap().grad, Tensor::row_vector(&[0.3, 0.4]));
    }

    #[test]
    fn clip_scales_by_ratio() {
        let mut ps = single(Tensor::zeros(1, 2), Tensor::row_vector(&[6.0, 8.0]));
        clip_global_norm(&mut ps, 5.0).unwrap();
        assert_eq!(ps.iter().next().unwrap().grad, Tensor::row_vector(&[3.0, 4.0]));
        assert!(global_grad_norm(&ps) <= 5.0 + 1e-12);
    }

    #[test]
    fn clip_rejects_nonpositive_bound() {
        let mut ps = single(Tensor::zeros(1, 1), Tensor::zeros(1, 1));
        assert!(clip_global_norm(&mut ps, 0.0).is_err());
    }
}
