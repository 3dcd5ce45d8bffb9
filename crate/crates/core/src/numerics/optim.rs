use super::tensor::Tensor;

/// Adam with decoupled weight decay. Decay applies only to matrices;
/// biases and normalization gains are left alone.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of `params` from `grads`, matched by position.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.second = self.first.clone();
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let decay = if p.shape().len() >= 2 {
                self.weight_decay
            } else {
                0.0
            };
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = g.data()[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *w -= self.lr * (mhat / (vhat.sqrt() + self.eps) + decay * *w);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_a_bowl() {
        let mut x = Tensor::vector(vec![3.0, -2.0]);
        let mut opt = AdamW::new(0.1, 0.0);
        for _ in 0..500 {
            let g = x.map(|v| 2.0 * v);
            opt.step(&mut [&mut x], &[g]);
        }
        assert!(x.data().iter().all(|v| v.abs() < 1e-2), "{:?}", x.data());
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut x = Tensor::vector(vec![1.0]);
        let mut opt = AdamW::new(1e-4, 0.0);
        opt.step(&mut [&mut x], &[Tensor::vector(vec![5.0])]);
        assert!((x.data()[0] - (1.0 - 1e-4)).abs() < 1e-9);
    }
}
