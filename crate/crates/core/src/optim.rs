//! Adam with bias-corrected moments and no weight decay.

use crate::model::ModelParams;
use crate::tensor::Real;

#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &ModelParams<T>, lr: f64) -> Self {
        let zeros: Vec<Vec<T>> = params.tensors.iter().map(|t| vec![T::zero(); t.len()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update; `grads[i]` is `None` for tensors that received no gradient.
    pub fn step(&mut self, params: &mut ModelParams<T>, grads: &[Option<&[T]>]) {
        self.step += 1;
        let t = self.step as i32;
        let b1 = T::lit(self.beta1);
        let b2 = T::lit(self.beta2);
        let c1 = T::lit(1.0 - self.beta1.powi(t));
        let c2 = T::lit(1.0 - self.beta2.powi(t));
        let lr = T::lit(self.lr);
        let eps = T::lit(self.eps);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, p) in params.tensors[i].data.iter_mut().enumerate() {
                m[j] = b1 * m[j] + (T::one() - b1) * g[j];
                v[j] = b2 * v[j] + (T::one() - b2) * g[j] * g[j];
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                *p -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut p = ModelParams::<f64>::init(ModelConfig::default()).unwrap();
        let before = p.tensors[0].data[0];
        let g: Vec<f64> = vec![0.5; p.tensors[0].len()];
        let mut grads: Vec<Option<&[f64]>> = vec![None; p.tensors.len()];
        grads[0] = Some(&g);
        let mut opt = Adam::new(&p, 1e-3);
        let other = p.tensors[1].clone();
        opt.step(&mut p, &grads);
        assert!((before - p.tensors[0].data[0] - 1e-3).abs() < 1e-9);
        assert_eq!(p.tensors[1], other);
        assert_eq!(opt.steps(), 1);
    }
}
