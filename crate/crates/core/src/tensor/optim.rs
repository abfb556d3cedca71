use super::{ParamStore, Result, Scalar, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment buffers, one per parameter, plus the step count.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState<T = f32> {
    pub first_moment: ParamStore<T>,
    pub second_moment: ParamStore<T>,
    pub step: u64,
}

#[derive(Clone, Debug)]
pub struct Adam<T = f32> {
    pub config: AdamConfig,
    pub state: AdamState<T>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            state: AdamState {
                first_moment: ParamStore::new(),
                second_moment: ParamStore::new(),
                step: 0,
            },
        }
    }

    /// One bias-corrected Adam update over every tensor in `params`.
    ///
    /// Moments decay for every coordinate, but a coordinate whose gradient
    /// is exactly zero is left untouched, so a zero gradient is a no-op on
    /// the parameters regardless of accumulated state.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &ParamStore<T>) -> Result<()> {
        for (name, p) in params.iter() {
            let g = grads
                .get(name)
                .ok_or_else(|| TensorError::MissingGrad(name.to_string()))?;
            if g.shape() != p.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "adam_step",
                    expected: p.shape().to_vec(),
                    actual: g.shape().to_vec(),
                });
            }
        }
        self.state.step += 1;
        let t = self.state.step as i32;
        let c = &self.config;
        let b1 = T::from_f64_lossy(c.beta1);
        let b2 = T::from_f64_lossy(c.beta2);
        let bias1 = T::from_f64_lossy(1.0 - c.beta1.powi(t));
        let bias2 = T::from_f64_lossy(1.0 - c.beta2.powi(t));
        let lr = T::from_f64_lossy(c.lr);
        let eps = T::from_f64_lossy(c.eps);
        for (name, p) in params.iter_mut() {
            let g = grads.get(name).expect("checked above");
            if !self.state.first_moment.contains(name) {
                self.state.first_moment.insert(name, Tensor::zeros(p.shape()));
                self.state.second_moment.insert(name, Tensor::zeros(p.shape()));
            }
            let m = self.state.first_moment.get_mut(name).unwrap().data_mut();
            let v = self.state.second_moment.get_mut(name).unwrap().data_mut();
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mv = b1 * *mv + (T::one() - b1) * gv;
                *vv = b2 * *vv + (T::one() - b2) * gv * gv;
                if gv != T::zero() {
                    let m_hat = *mv / bias1;
                    let v_hat = *vv / bias2;
                    *pv -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::scalar(value));
        s
    }

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let mut adam = Adam::<f64>::new(AdamConfig::default());
        let mut params = single(1.5);
        adam.step(&mut params, &single(0.3)).unwrap();
        let after_first = params.get("w").unwrap().item();
        let m_before = adam.state.first_moment.get("w").unwrap().item();
        adam.step(&mut params, &single(0.0)).unwrap();
        assert_eq!(params.get("w").unwrap().item(), after_first);
        let m_after = adam.state.first_moment.get("w").unwrap().item();
        assert!((m_after - 0.9 * m_before).abs() < 1e-15);
        assert_eq!(adam.state.step, 2);
    }

    #[test]
    fn first_step_matches_closed_form() {
        // m̂ = g, v̂ = g², so Δ = -lr·g/(|g| + eps).
        let mut adam = Adam::<f64>::new(AdamConfig::default());
        let mut params = single(2.0);
        let g = -0.25;
        adam.step(&mut params, &single(g)).unwrap();
        let expected = 2.0 - 1e-4 * g / (g.abs() + 1e-8);
        assert!((params.get("w").unwrap().item() - expected).abs() < 1e-15);
    }

    #[test]
    fn missing_gradient_names_parameter() {
        let mut adam = Adam::<f64>::new(AdamConfig::default());
        let mut params = single(1.0);
        params.insert("conv.kernel", Tensor::scalar(0.0));
        let err = adam.step(&mut params, &single(0.1)).unwrap_err();
        assert_eq!(err, TensorError::MissingGrad("conv.kernel".into()));
        assert_eq!(adam.state.step, 0);
    }

    #[test]
    fn quadratic_descends_monotonically_after_warmup() {
        let mut adam = Adam::<f64>::new(AdamConfig {
            lr: 0.01,
            ..AdamConfig::default()
        });
        let mut params = single(3.0);
        let mut losses = Vec::new();
        for _ in 0..500 {
            let w = params.get("w").unwrap().item();
            losses.push(w * w);
            adam.step(&mut params, &single(2.0 * w)).unwrap();
        }
        for pair in losses[10..].windows(2) {
            assert!(pair[1] < pair[0], "{} !< {}", pair[1], pair[0]);
        }
    }
}
