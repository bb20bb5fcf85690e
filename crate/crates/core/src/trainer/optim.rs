//! RMSProp and global-norm gradient clipping.

use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RmsProp {
    pub lr: f64,
    pub rho: f64,
    pub eps: f64,
}

impl Default for RmsProp {
    fn default() -> Self {
        Self {
            lr: 4e-4,
            rho: 0.9,
            eps: 1e-8,
        }
    }
}

/// Zeroed squared-gradient accumulators shaped like `params`.
pub fn rmsprop_state(params: &[Tensor]) -> Vec<Vec<f64>> {
    params.iter().map(|t| vec![0.0; t.len()]).collect()
}

/// `s ← ρs + (1−ρ)g²`, then `p ← p − lr·g/√(s+ε)`, elementwise.
pub fn rmsprop_step(params: &mut [Tensor], grads: &[Vec<f64>], state: &mut [Vec<f64>], opt: &RmsProp) {
    for ((p, g), s) in params.iter_mut().zip(grads).zip(state.iter_mut()) {
        for ((p, &g), s) in p.data_mut().iter_mut().zip(g).zip(s.iter_mut()) {
            *s = opt.rho * *s + (1.0 - opt.rho) * g * g;
            *p -= opt.lr * g / (*s + opt.eps).sqrt();
        }
    }
}

/// Euclidean norm over every gradient entry.
pub fn global_norm(grads: &[Vec<f64>]) -> f64 {
    grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm` (0 disables
/// clipping). Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let k = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= k);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_example() {
        let mut p = vec![Tensor::from_vec(vec![1.0])];
        let mut s = rmsprop_state(&p);
        rmsprop_step(&mut p, &[vec![1.0]], &mut s, &RmsProp::default());
        assert!((s[0][0] - 0.1).abs() < 1e-15);
        let step = 1.0 - p[0].data()[0];
        assert!((step - 4e-4 / (0.1f64 + 1e-8).sqrt()).abs() < 1e-15);
        assert!((step - 1.2649e-3).abs() < 1e-7);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = vec![Tensor::from_vec(vec![0.3, -2.0])];
        let mut s = rmsprop_state(&p);
        rmsprop_step(&mut p, &[vec![0.0, 0.0]], &mut s, &RmsProp::default());
        assert_eq!(p[0].data(), &[0.3, -2.0]);
    }

    #[test]
    fn repeated_steps_are_deterministic() {
        let run = || {
            let mut p = vec![Tensor::from_vec(vec![0.5, 0.25, -1.0])];
            let mut s = rmsprop_state(&p);
            for k in 0..5 {
                let g = vec![0.1 * k as f64, -0.3, 2.0];
                rmsprop_step(&mut p, &[g], &mut s, &RmsProp::default());
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn clipping() {
        let mut g = vec![vec![3.0], vec![4.0]];
        assert_eq!(clip_global_norm(&mut g, 10.0), 5.0);
        assert_eq!(g, vec![vec![3.0], vec![4.0]]);
        clip_global_norm(&mut g, 1.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-15);
        let mut big = vec![vec![300.0, 400.0]];
        clip_global_norm(&mut big, 0.0);
        assert_eq!(big[0], vec![300.0, 400.0]);
    }
}
