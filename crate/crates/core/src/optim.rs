//! AdamW with decoupled weight decay, gradient clipping and schedules.

use std::f64::consts::PI;

use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
    decay: Vec<bool>,
    steps: u64,
}

impl<T: Scalar> AdamW<T> {
    /// Weight decay applies to matrices and kernels (rank ≥ 2) only; biases,
    /// norm affine terms, temperatures and the class token are not decayed.
    pub fn new(params: &ParamSet<T>) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            first: params.iter().map(|(_, t)| Tensor::zeros(t.shape().to_vec())).collect(),
            second: params.iter().map(|(_, t)| Tensor::zeros(t.shape().to_vec())).collect(),
            decay: params.iter().map(|(_, t)| t.rank() >= 2).collect(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[Tensor<T>], lr: f64, weight_decay: f64) {
        assert_eq!(grads.len(), self.first.len(), "gradient list does not match parameters");
        self.steps += 1;
        let t = self.steps as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - self.beta1), T::lit(1.0 - self.beta2));
        let step_size = T::lit(lr / bc1);
        let denom_scale = T::lit(1.0 / bc2.sqrt());
        let eps = T::lit(self.eps);
        for (i, ((_, p), g)) in params.iter_mut().zip(grads).enumerate() {
            if self.decay[i] && weight_decay > 0.0 {
                let keep = T::lit(1.0 - lr * weight_decay);
                p.data_mut().iter_mut().for_each(|w| *w *= keep);
            }
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + one_b1 * gi;
                *vi = b2 * *vi + one_b2 * gi * gi;
                *w -= step_size * *mi / (vi.sqrt() * denom_scale + eps);
            }
        }
    }
}

/// Scales `grads` so their joint L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| {
            let v = v.to_f64().unwrap();
            v * v
        })
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = T::lit(max_norm / norm);
        grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= s));
    }
    norm
}

/// Half-cosine interpolation from `start` (step 0) to `end` (step `total`).
pub fn cosine(step: usize, total: usize, start: f64, end: f64) -> f64 {
    if total == 0 {
        return end;
    }
    let frac = step.min(total) as f64 / total as f64;
    end + 0.5 * (start - end) * (1.0 + (PI * frac).cos())
}

/// Linear ramp to `base` over `warmup` steps, then cosine decay to `final_value`
/// at step `total`.
pub fn warmup_cosine(step: usize, total: usize, warmup: usize, base: f64, final_value: f64) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    cosine(step - warmup, total.saturating_sub(warmup), base, final_value)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_reaches_base_then_decays() {
        let total = 100;
        assert!((warmup_cosine(9, total, 10, 5e-4, 1e-6) - 5e-4).abs() < 1e-15);
        assert!((warmup_cosine(10, total, 10, 5e-4, 1e-6) - 5e-4).abs() < 1e-15);
        assert!((warmup_cosine(0, total, 10, 5e-4, 1e-6) - 5e-5).abs() < 1e-15);
        assert!((warmup_cosine(total, total, 10, 5e-4, 1e-6) - 1e-6).abs() < 1e-15);
        let mut prev = f64::INFINITY;
        for s in 10..=total {
            let v = warmup_cosine(s, total, 10, 5e-4, 1e-6);
            assert!(v <= prev);
            prev = v;
        }
    }

    #[test]
    fn weight_decay_schedule_endpoints() {
        assert!((cosine(0, 50, 0.04, 0.4) - 0.04).abs() < 1e-15);
        assert!((cosine(50, 50, 0.04, 0.4) - 0.4).abs() < 1e-15);
        assert!((cosine(25, 50, 0.04, 0.4) - 0.22).abs() < 1e-12);
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut p = ParamSet::<f64>::new();
        p.insert("w", Tensor::new(vec![1, 2], vec![1.0, -1.0]).unwrap());
        p.insert("b", Tensor::new(vec![2], vec![0.5, 0.5]).unwrap());
        let mut opt = AdamW::new(&p);
        let g = vec![
            Tensor::new(vec![1, 2], vec![3.0, -0.2]).unwrap(),
            Tensor::new(vec![2], vec![1.0, 0.0]).unwrap(),
        ];
        opt.step(&mut p, &g, 0.1, 0.5);
        // decoupled decay shrinks w by (1 - 0.05) before the unit-size Adam step
        let w = p.get("w").unwrap().data();
        assert!((w[0] - (0.95 - 0.1)).abs() < 1e-6);
        assert!((w[1] - (-0.95 + 0.1)).abs() < 1e-6);
        let b = p.get("b").unwrap().data();
        assert!((b[0] - 0.4).abs() < 1e-6);
        assert_eq!(b[1], 0.5);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = vec![Tensor::<f32>::new(vec![2], vec![3.0, 4.0]).unwrap()];
        let n = clip_global_norm(&mut g, 1.0);
        assert!((n - 5.0).abs() < 1e-6);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-6);
        let n2 = clip_global_norm(&mut g, 3.0);
        assert!((n2 - 1.0).abs() < 1e-6);
        assert!((g[0].data()[1] - 0.8).abs() < 1e-6);
    }
}
