use super::params::ParamStore;
use super::tensor::Tensor;
use super::AutodiffError;

/// Adam with bias correction and an optional global-norm gradient clip.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale gradients whose global L2 norm exceeds this. Off by default.
    pub clip_norm: Option<f64>,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store
            .values()
            .iter()
            .map(|t| Tensor::zeros(t.rows(), t.cols()))
            .collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn with_clip_norm(mut self, clip: Option<f64>) -> Self {
        self.clip_norm = clip;
        self
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.v
    }

    /// One update. Parameters and moments are untouched if any gradient is
    /// non-finite.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: f64) -> Result<(), AutodiffError> {
        if !(lr >= 0.0) || !lr.is_finite() {
            return Err(AutodiffError::InvalidLearningRate(lr));
        }
        assert_eq!(grads.len(), store.len(), "gradients not aligned with parameters");
        for (id, g) in store.ids().zip(grads) {
            if !g.is_finite() {
                return Err(AutodiffError::NonFiniteGradient {
                    name: store.name(id).to_string(),
                });
            }
        }
        let clip = match self.clip_norm {
            Some(max) => {
                let norm = grads
                    .iter()
                    .flat_map(|g| g.data())
                    .map(|x| x * x)
                    .sum::<f64>()
                    .sqrt();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };

        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let p = store.get_mut(id).data_mut();
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            for (((pi, mi), vi), &gi) in p.iter_mut().zip(m).zip(v).zip(grads[k].data()) {
                let gi = gi * clip;
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *pi -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// `lr0 · gamma^(round - 1)`, the per-round exponential schedule.
pub fn exp_lr_decay(lr0: f64, gamma: f64, round: usize) -> f64 {
    debug_assert!(gamma > 0.0 && gamma <= 1.0, "gamma must lie in (0, 1]");
    debug_assert!(round >= 1, "rounds are 1-based");
    lr0 * gamma.powi(round.saturating_sub(1) as i32)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(x: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("x", Tensor::scalar(x)).unwrap();
        s
    }

    #[test]
    fn first_step_is_signed_lr() {
        for &g in &[0.3, -2.0, 1e-3] {
            let mut s = scalar_store(1.0);
            let mut adam = Adam::new(&s);
            adam.step(&mut s, &[Tensor::scalar(g)], 0.01).unwrap();
            let expected = 1.0 - 0.01 * g / (g.abs() + 1e-8);
            assert!((s.values()[0].item() - expected).abs() < 1e-15);
            assert_eq!(adam.steps(), 1);
        }
    }

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let mut s = scalar_store(2.0);
        let mut adam = Adam::new(&s);
        adam.step(&mut s, &[Tensor::scalar(1.0)], 0.1).unwrap();
        let after_one = s.values()[0].item();
        let m1 = adam.first_moments()[0].item();
        let v1 = adam.second_moments()[0].item();
        adam.step(&mut s, &[Tensor::scalar(0.0)], 0.0).unwrap();
        assert_eq!(s.values()[0].item(), after_one);
        assert!((adam.first_moments()[0].item() - 0.9 * m1).abs() < 1e-15);
        assert!((adam.second_moments()[0].item() - 0.999 * v1).abs() < 1e-15);
    }

    #[test]
    fn constant_gradient_converges_to_lr_sign() {
        let mut s = scalar_store(0.0);
        let mut adam = Adam::new(&s);
        let mut prev = 0.0;
        let mut step = 0.0;
        for _ in 0..5000 {
            adam.step(&mut s, &[Tensor::scalar(-0.7)], 1e-3).unwrap();
            let now = s.values()[0].item();
            step = now - prev;
            prev = now;
        }
        // m_hat / sqrt(v_hat) -> g/|g| for a constant g
        assert!((step - 1e-3).abs() < 1e-9, "step {step}");
    }

    #[test]
    fn lr_zero_is_identity() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::new(2, 2, vec![1.0, -2.0, 3.0, 0.5]).unwrap()).unwrap();
        let before = s.snapshot();
        let mut adam = Adam::new(&s);
        let g = Tensor::new(2, 2, vec![0.1, 0.2, -0.3, 4.0]).unwrap();
        for _ in 0..10 {
            adam.step(&mut s, std::slice::from_ref(&g), 0.0).unwrap();
        }
        assert_eq!(s.snapshot(), before);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut s = ParamStore::new();
        s.add("a", Tensor::scalar(0.0)).unwrap();
        s.add("layer.w", Tensor::scalar(0.0)).unwrap();
        let mut adam = Adam::new(&s);
        let err = adam
            .step(&mut s, &[Tensor::scalar(1.0), Tensor::scalar(f64::NAN)], 0.1)
            .unwrap_err();
        assert!(matches!(err, AutodiffError::NonFiniteGradient { ref name } if name == "layer.w"));
        assert_eq!(adam.steps(), 0);
        assert_eq!(s.values()[0].item(), 0.0);
    }

    #[test]
    fn clip_rescales_large_gradients() {
        let mut s = scalar_store(0.0);
        let mut adam = Adam::new(&s).with_clip_norm(Some(1.0));
        adam.step(&mut s, &[Tensor::scalar(100.0)], 0.1).unwrap();
        assert!((adam.first_moments()[0].item() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn lr_decay_schedule() {
        assert_eq!(exp_lr_decay(0.001, 0.95, 1), 0.001);
        assert!((exp_lr_decay(0.002, 0.95, 3) - 0.001805).abs() < 1e-15);
        assert_eq!(exp_lr_decay(0.004, 1.0, 7), 0.004);
    }
}
