use super::{Encoder, Real};
use crate::{Error, Result};

/// Momentum SGD with L2 weight decay:
/// `v <- momentum * v + g + wd * w`, `w <- w - lr * v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd<T = f32> {
    pub lr: T,
    pub momentum: T,
    pub weight_decay: T,
    velocity: Vec<T>,
}

impl<T: Real> Sgd<T> {
    pub fn new(param_count: usize, lr: T, momentum: T, weight_decay: T) -> Self {
        Self { lr, momentum, weight_decay, velocity: vec![T::zero(); param_count] }
    }

    pub fn velocity(&self) -> &[T] {
        &self.velocity
    }

    pub fn set_velocity(&mut self, velocity: Vec<T>) -> Result<()> {
        if velocity.len() != self.velocity.len() {
            return Err(Error::ShapeMismatch(format!("velocity of {} for {} parameters", velocity.len(), self.velocity.len())));
        }
        self.velocity = velocity;
        Ok(())
    }

    /// Updates `params` in place. A non-finite gradient leaves everything untouched.
    pub fn step(&mut self, params: &mut [T], grads: &[T]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.velocity.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} parameters, {} gradients, {} velocity slots",
                params.len(),
                grads.len(),
                self.velocity.len()
            )));
        }
        if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::Divergence { index });
        }
        for ((w, &g), v) in params.iter_mut().zip(grads).zip(self.velocity.iter_mut()) {
            *v = self.momentum * *v + g + self.weight_decay * *w;
            *w = *w - self.lr * *v;
        }
        Ok(())
    }
}

/// One stateless momentum-SGD step (fresh zero velocity).
pub fn sgd_step<T: Real>(params: &mut [T], grads: &[T], lr: T, momentum: T, weight_decay: T) -> Result<()> {
    Sgd::new(params.len(), lr, momentum, weight_decay).step(params, grads)
}

/// `key <- mu * key + (1 - mu) * query`, elementwise.
pub fn momentum_update<T: Real>(key: &mut Encoder<T>, query: &Encoder<T>, mu: T) -> Result<()> {
    if key.arch() != query.arch() {
        return Err(Error::ArchitectureMismatch("key and query encoders differ".into()));
    }
    let rest = T::one() - mu;
    for (k, &q) in key.params_mut().iter_mut().zip(query.params()) {
        *k = mu * *k + rest * q;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::EncoderArch;

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let mut w = vec![1.0f32, -2.0];
        sgd_step(&mut w, &[0.3, 0.4], 0.0, 0.9, 0.1).unwrap();
        assert_eq!(w, vec![1.0, -2.0]);
    }

    #[test]
    fn plain_step_arithmetic() {
        let mut w = vec![1.0f64];
        sgd_step(&mut w, &[0.5], 0.1, 0.0, 0.0).unwrap();
        assert!((w[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn momentum_accumulates() {
        let mut opt = Sgd::new(1, 0.1f64, 0.9, 0.0);
        let mut w = vec![0.0];
        opt.step(&mut w, &[1.0]).unwrap();
        opt.step(&mut w, &[1.0]).unwrap();
        // v1 = 1, v2 = 1.9 -> w = -0.1 - 0.19
        assert!((w[0] + 0.29).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_is_divergence() {
        let mut w = vec![1.0f32, 1.0];
        let err = sgd_step(&mut w, &[0.0, f32::NAN], 0.1, 0.0, 0.0).unwrap_err();
        assert!(err.to_string().contains("divergence detected"));
        assert_eq!(w, vec![1.0, 1.0]);
    }

    #[test]
    fn momentum_update_endpoints_and_contraction() {
        let arch = EncoderArch::tiny(2, 2);
        let query = Encoder::<f64>::init(arch.clone(), 1).unwrap();
        let original = Encoder::<f64>::init(arch.clone(), 2).unwrap();

        let mut key = original.clone();
        momentum_update(&mut key, &query, 1.0).unwrap();
        assert_eq!(key, original);

        momentum_update(&mut key, &query, 0.0).unwrap();
        assert_eq!(key, query);

        let mut key = original.clone();
        momentum_update(&mut key, &query, 0.5).unwrap();
        let dist = |a: &Encoder<f64>| a.params().iter().zip(query.params()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        assert!((dist(&key) - 0.5 * dist(&original)).abs() < 1e-12);

        let mut scalar = Encoder::<f64>::from_params(arch.clone(), vec![2.0; arch.param_count()]).unwrap();
        let ones = Encoder::<f64>::from_params(arch.clone(), vec![1.0; arch.param_count()]).unwrap();
        momentum_update(&mut scalar, &ones, 0.5).unwrap();
        assert!(scalar.params().iter().all(|&v| v == 1.5));

        let mut other = Encoder::<f64>::init(EncoderArch::tiny(3, 2), 0).unwrap();
        assert!(momentum_update(&mut other, &query, 0.5).is_err());
    }
}
