use super::params::ParamStore;
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment estimates for every parameter of a store.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor<T>> = params.iter().map(|(_, _, p)| Tensor::zeros(p.shape())).collect();
        Self {
            config,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One bias-corrected Adam update. Parameters without a gradient are
    /// left untouched; any non-finite gradient aborts before anything changes.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Option<Tensor<T>>]) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::Config(format!(
                "adam: {} gradients and {} moments for {} parameters",
                grads.len(),
                self.m.len(),
                params.len()
            )));
        }
        for (id, g) in params.ids().zip(grads) {
            if let Some(g) = g {
                if g.shape() != params.value(id).shape() {
                    return Err(Error::shape("adam_step", params.value(id).shape(), g.shape()));
                }
                if !g.all_finite() {
                    return Err(Error::NonFiniteGradient(params.name(id).to_string()));
                }
            }
        }
        self.t += 1;
        let c = self.config;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let bc1 = T::of(1.0 - c.beta1.powi(self.t as i32));
        let bc2 = T::of(1.0 - c.beta2.powi(self.t as i32));
        let (lr, eps) = (T::of(c.lr), T::of(c.epsilon));
        for (id, g) in params.ids().collect::<Vec<_>>().into_iter().zip(grads) {
            let Some(g) = g else { continue };
            let i = id.index();
            let p = params.value_mut(id).data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((pe, me), ve), &ge) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                *me = b1 * *me + (T::one() - b1) * ge;
                *ve = b2 * *ve + (T::one() - b2) * ge * ge;
                let m_hat = *me / bc1;
                let v_hat = *ve / bc2;
                *pe -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Rescales gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Option<Tensor<T>>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.data().iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = T::of(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ParamId;

    fn store(values: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.register("w", Tensor::from_f64(&[values.len()], values).unwrap()).unwrap();
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = store(&[0.5, -1.0]);
        let mut adam = AdamState::new(&p, AdamConfig::default());
        adam.step(&mut p, &[Some(Tensor::zeros(&[2]))]).unwrap();
        assert_eq!(p.value(ParamId(0)).data(), &[0.5, -1.0]);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let mut p = store(&[0.5, -1.0]);
        let cfg = AdamConfig { lr: 0.0, ..AdamConfig::default() };
        let mut adam = AdamState::new(&p, cfg);
        adam.step(&mut p, &[Some(Tensor::from_f64(&[2], &[3.0, -2.0]).unwrap())]).unwrap();
        assert_eq!(p.value(ParamId(0)).data(), &[0.5, -1.0]);
    }

    #[test]
    fn first_step_matches_closed_form() {
        // m̂ = g and v̂ = g² after one step, so Δ = lr·g/(|g|+ε).
        let cfg = AdamConfig::default();
        for g in [3.0, -0.02, 1e-3] {
            let mut p = store(&[1.0]);
            let mut adam = AdamState::new(&p, cfg);
            adam.step(&mut p, &[Some(Tensor::from_f64(&[1], &[g]).unwrap())]).unwrap();
            let delta = 1.0 - p.value(ParamId(0)).item();
            let expected = cfg.lr * g / (g.abs() + cfg.epsilon);
            assert!((delta - expected).abs() < 1e-12, "g={g}: {delta} vs {expected}");
        }
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let mut p = store(&[1.0]);
        let mut adam = AdamState::new(&p, AdamConfig::default());
        let err = adam
            .step(&mut p, &[Some(Tensor::from_f64(&[1], &[f64::NAN]).unwrap())])
            .unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(ref n) if n == "w"));
        assert_eq!(p.value(ParamId(0)).item(), 1.0);
        assert_eq!(adam.steps(), 0);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut g: Vec<Option<Tensor<f64>>> = vec![
            Some(Tensor::from_f64(&[2], &[3.0, 0.0]).unwrap()),
            None,
            Some(Tensor::from_f64(&[1], &[4.0]).unwrap()),
        ];
        let before = clip_global_norm(&mut g, 1.0);
        assert!((before - 5.0).abs() < 1e-12);
        let after: f64 = g.iter().flatten().flat_map(|t| t.data().to_vec()).map(|v| v * v).sum();
        assert!((after.sqrt() - 1.0).abs() < 1e-12);
    }
}
