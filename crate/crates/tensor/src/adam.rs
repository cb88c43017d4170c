use crate::error::{Result, TensorError};
use crate::layers::Param;

/// Adam with bias correction. Defaults follow the Keras convention
/// (`beta1 = 0.9`, `beta2 = 0.999`, `epsilon = 1e-7`).
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
    step: u64,
    moments: Vec<Option<(Vec<f32>, Vec<f32>)>>,
}

impl AdamState {
    pub fn new(learning_rate: f32) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-7,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update to every trainable parameter using its accumulated
    /// gradient (a missing gradient counts as zero). Frozen parameters are
    /// never touched.
    pub fn step(&mut self, params: &mut [Param]) -> Result<()> {
        assert!(
            self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0,
            "Adam betas must lie in (0, 1)"
        );
        if self.moments.len() < params.len() {
            self.moments.resize(params.len(), None);
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - (self.beta1 as f64).powi(t);
        let c2 = 1.0 - (self.beta2 as f64).powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.learning_rate, self.epsilon);
        for (p, slot) in params.iter_mut().zip(self.moments.iter_mut()) {
            if !p.tensor.requires_grad() {
                continue;
            }
            let len = p.tensor.len();
            let (m, v) = slot.get_or_insert_with(|| (vec![0.0; len], vec![0.0; len]));
            if m.len() != len {
                return Err(TensorError::ShapeMismatch {
                    op: "adam_step",
                    lhs: p.tensor.shape().to_vec(),
                    rhs: vec![m.len()],
                });
            }
            let (grad, data) = p.tensor.grad_and_data_mut();
            if let Some(g) = grad {
                if g.len() != len {
                    return Err(TensorError::ShapeMismatch {
                        op: "adam_step",
                        lhs: vec![len],
                        rhs: vec![g.len()],
                    });
                }
            }
            for i in 0..len {
                let gi = grad.map_or(0.0, |g| g[i]);
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let m_hat = (m[i] as f64 / c1) as f32;
                let v_hat = (v[i] as f64 / c2) as f32;
                data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn param(name: &str, data: Vec<f32>, trainable: bool) -> Param {
        let n = data.len();
        Param {
            name: name.into(),
            tensor: Tensor::new(vec![n], data).unwrap().with_requires_grad(trainable),
        }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut ps = vec![param("a", vec![1.0, -2.0], true)];
        ps[0].tensor.accumulate_grad(&[0.0, 0.0]).unwrap();
        let mut adam = AdamState::new(0.000574);
        adam.step(&mut ps).unwrap();
        assert_eq!(ps[0].tensor.data(), &[1.0, -2.0]);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn first_step_matches_bias_corrected_formula() {
        // step 1: m̂ = g, v̂ = g², so Δ = −lr·g/(|g| + ε)
        let lr = 0.000574f32;
        let g = 0.3f32;
        let mut ps = vec![param("a", vec![1.0], true)];
        ps[0].tensor.accumulate_grad(&[g]).unwrap();
        let mut adam = AdamState::new(lr);
        adam.step(&mut ps).unwrap();
        let expected = 1.0 - lr * g / (g.abs() + 1e-7);
        assert!((ps[0].tensor.data()[0] - expected).abs() < 1e-7);
        assert!((ps[0].tensor.data()[0] - (1.0 - lr)).abs() < 1e-6);
    }

    #[test]
    fn frozen_parameter_is_bit_identical() {
        let mut ps = vec![param("a", vec![0.25], true), param("b", vec![0.75], false)];
        let mut adam = AdamState::new(0.01);
        for _ in 0..50 {
            ps[0].tensor.zero_grad();
            ps[0].tensor.accumulate_grad(&[1.0]).unwrap();
            ps[1].tensor.accumulate_grad(&[1.0]).unwrap();
            adam.step(&mut ps).unwrap();
        }
        assert_eq!(ps[1].tensor.data()[0].to_bits(), 0.75f32.to_bits());
        assert!(ps[0].tensor.data()[0] < 0.25);
    }
}
