use std::collections::HashMap;

use super::Tensor;

/// Adam with bias correction. Moment buffers are keyed by parameter name and
/// created lazily on the first step that touches a parameter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: u64,
    moments: HashMap<String, (Vec<f32>, Vec<f32>)>,
}

impl AdamState {
    pub fn new(lr: f32) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, moments: HashMap::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Advance the shared step counter; call once per batch before `update`.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Update one named parameter with its gradient at the current step.
    pub fn update(&mut self, name: &str, param: &mut Tensor, grad: &[f32]) {
        assert!(self.step > 0, "adam: update before begin_step");
        assert_eq!(param.numel(), grad.len(), "adam: grad shape for {}", name);
        let t = self.step as f64;
        let bc1 = 1.0 - (self.beta1 as f64).powf(t);
        let bc2 = 1.0 - (self.beta2 as f64).powf(t);
        let (m, v) = self
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
        let data = param.data_mut();
        for i in 0..grad.len() {
            let g = grad[i];
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = m[i] as f64 / bc1;
            let v_hat = v[i] as f64 / bc2;
            data[i] -= (self.lr as f64 * m_hat / (v_hat.sqrt() + self.eps as f64)) as f32;
        }
    }

    /// Apply one update across named (parameter, gradient) pairs. All pairs
    /// share the same step counter, which advances once per call.
    pub fn step<'a, I>(&mut self, pairs: I)
    where
        I: IntoIterator<Item = (&'a str, &'a mut Tensor, &'a [f32])>,
    {
        self.begin_step();
        for (name, param, grad) in pairs {
            self.update(name, param, grad);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameter_unchanged() {
        let mut adam = AdamState::new(0.1);
        let mut p = Tensor::new(&[2], vec![1.5, -0.5]).unwrap();
        let g = vec![0.0, 0.0];
        adam.step(vec![("p", &mut p, g.as_slice())]);
        assert_eq!(p.data(), &[1.5, -0.5]);
    }

    #[test]
    fn first_step_with_unit_gradient_moves_by_lr() {
        // Bias correction makes the first update m_hat/ (sqrt(v_hat)+eps) = g/(|g|+eps),
        // so a constant gradient of 1.0 moves the weight by almost exactly lr.
        let mut adam = AdamState::new(0.1);
        let mut p = Tensor::new(&[1], vec![2.0]).unwrap();
        let g = vec![1.0];
        adam.step(vec![("p", &mut p, g.as_slice())]);
        assert!((p.data()[0] - 1.9).abs() < 1e-6, "got {}", p.data()[0]);
    }

    #[test]
    fn matches_reference_implementation_over_two_steps() {
        // Independent scalar reference, updated by hand.
        let (lr, b1, b2, eps) = (0.01f64, 0.9f64, 0.999f64, 1e-8f64);
        let grads = [0.3f64, -0.7f64];
        let mut theta = 1.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for (i, &g) in grads.iter().enumerate() {
            let t = (i + 1) as f64;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - b1.powf(t));
            let v_hat = v / (1.0 - b2.powf(t));
            theta -= lr * m_hat / (v_hat.sqrt() + eps);
        }

        let mut adam = AdamState::new(0.01);
        let mut p = Tensor::new(&[1], vec![1.0]).unwrap();
        for &g in &grads {
            let gv = vec![g as f32];
            adam.step(vec![("p", &mut p, gv.as_slice())]);
        }
        assert!(
            (p.data()[0] as f64 - theta).abs() < 1e-6,
            "adam {} vs reference {}",
            p.data()[0],
            theta
        );
    }
}
