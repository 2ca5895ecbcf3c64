use serde::{Deserialize, Serialize};

use crate::numerics::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam with decoupled weight decay. Moments are kept in single precision
/// alongside the parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub weight_decay: f64,
    /// Number of updates applied so far.
    pub t: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(params: &[Tensor<f32>], weight_decay: f64) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.len()]).collect();
        Self { weight_decay, t: 0, m: zeros(), v: zeros() }
    }

    /// One update. `decay[i]` selects which parameters receive weight decay;
    /// a missing gradient counts as zero.
    pub fn update(&mut self, params: &mut [Tensor<f32>], grads: &[Option<Tensor<f32>>], decay: &[bool], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let g = grads[i].as_ref().map(|g| g.data());
            let wd = if decay[i] { self.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, x) in p.data_mut().iter_mut().enumerate() {
                let gj = g.map_or(0.0, |g| g[j] as f64);
                let mj = BETA1 * m[j] as f64 + (1.0 - BETA1) * gj;
                let vj = BETA2 * v[j] as f64 + (1.0 - BETA2) * gj * gj;
                m[j] = mj as f32;
                v[j] = vj as f32;
                let step = (mj / bc1) / ((vj / bc2).sqrt() + ADAM_EPS) + wd * *x as f64;
                *x = (*x as f64 - lr * step) as f32;
            }
        }
    }
}

/// Global L2 norm of all gradients.
pub fn global_norm(grads: &[Option<Tensor<f32>>]) -> f64 {
    grads.iter().flatten().flat_map(|g| g.data()).map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Option<Tensor<f32>>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let c = (max_norm / norm) as f32;
        for g in grads.iter_mut().flatten() {
            for x in g.data_mut() {
                *x *= c;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_the_gradient_sign() {
        let mut p = vec![Tensor::new(&[3], vec![1.0f32, -2.0, 0.5]).unwrap()];
        let g = vec![Some(Tensor::new(&[3], vec![0.3f32, -4.0, 0.0]).unwrap())];
        let mut opt = AdamW::new(&p, 0.0);
        opt.update(&mut p, &g, &[true], 0.1);
        let d = p[0].data();
        assert!((d[0] - 0.9).abs() < 1e-6 && (d[1] + 1.9).abs() < 1e-6 && d[2] == 0.5);
    }

    #[test]
    fn decay_is_decoupled_and_masked() {
        let mut p = vec![Tensor::new(&[1], vec![2.0f32]).unwrap(), Tensor::new(&[1], vec![2.0f32]).unwrap()];
        let g = vec![None, None];
        let mut opt = AdamW::new(&p, 0.5);
        opt.update(&mut p, &g, &[true, false], 0.1);
        assert!((p[0].data()[0] - 1.9).abs() < 1e-6);
        assert_eq!(p[1].data()[0], 2.0);
    }

    #[test]
    fn clipping_caps_the_global_norm() {
        let mut g = vec![Some(Tensor::new(&[2], vec![3.0f32, 0.0]).unwrap()), Some(Tensor::new(&[1], vec![4.0f32]).unwrap())];
        assert!((clip_global_norm(&mut g, 1.0) - 5.0).abs() < 1e-9);
        assert!((global_norm(&g) - 1.0).abs() < 1e-6);
        let before = g.clone();
        clip_global_norm(&mut g, 10.0);
        assert_eq!(g, before);
    }
}
