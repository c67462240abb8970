//! Adam with bias correction, operating on flat parameter slices.

use ndarray::{Array, Dimension};

use crate::promptbank::Theta;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// One Adam update of `params` in place; `t` is the 1-based step count.
pub fn adam_update(params: &mut [f64], grads: &[f64], m: &mut [f64], v: &mut [f64], t: u64, lr: f64) {
    let bc1 = 1.0 - BETA1.powi(t as i32);
    let bc2 = 1.0 - BETA2.powi(t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = BETA1 * m[i] + (1.0 - BETA1) * g;
        v[i] = BETA2 * v[i] + (1.0 - BETA2) * g * g;
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        params[i] -= lr * mhat / (vhat.sqrt() + EPS);
    }
}

/// Moments for a single array parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<D: Dimension> {
    pub m: Array<f64, D>,
    pub v: Array<f64, D>,
    pub t: u64,
}

impl<D: Dimension> AdamState<D> {
    pub fn zeros_like(p: &Array<f64, D>) -> Self {
        Self { m: Array::zeros(p.raw_dim()), v: Array::zeros(p.raw_dim()), t: 0 }
    }

    pub fn step(&mut self, param: &mut Array<f64, D>, grad: &Array<f64, D>, lr: f64) {
        self.t += 1;
        adam_update(
            param.as_slice_mut().expect("standard layout"),
            grad.as_slice().expect("standard layout"),
            self.m.as_slice_mut().expect("standard layout"),
            self.v.as_slice_mut().expect("standard layout"),
            self.t,
            lr,
        );
    }
}

/// Moments for one prompt-bank channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaAdam {
    pub m: Theta,
    pub v: Theta,
    pub t: u64,
}

impl ThetaAdam {
    pub fn zeros_like(theta: &Theta) -> Self {
        Self { m: Theta::zeros_like(theta), v: Theta::zeros_like(theta), t: 0 }
    }

    pub fn step(&mut self, theta: &mut Theta, grad: &Theta, lr: f64) {
        self.t += 1;
        let t = self.t;
        for (((p, g), m), v) in theta
            .slices_mut()
            .into_iter()
            .zip(grad.slices())
            .zip(self.m.slices_mut())
            .zip(self.v.slices_mut())
        {
            adam_update(p, g, m, v, t, lr);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut p = [1.0, -2.0, 0.0];
        let g = [0.5, -3.0, 0.0];
        let mut m = [0.0; 3];
        let mut v = [0.0; 3];
        adam_update(&mut p, &g, &mut m, &mut v, 1, 0.1);
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 1.9).abs() < 1e-6);
        assert_eq!(p[2], 0.0);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut x = ndarray::arr1(&[3.0, -4.0]);
        let mut st = AdamState::zeros_like(&x);
        for _ in 0..2000 {
            let g = &x * 2.0;
            st.step(&mut x, &g, 0.05);
        }
        assert!(x.iter().all(|v| v.abs() < 1e-2));
    }
}
