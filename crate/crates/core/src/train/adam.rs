//! Adam with bias correction and L2 weight decay folded into the gradient.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moments per parameter tensor, in parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<f32>>) -> Self {
        let (m, v) = params.into_iter().map(|p| (vec![0.0; p.len()], vec![0.0; p.len()])).unzip();
        Self { step: 0, m, v }
    }
}

/// One Adam update. Leaves parameters and state untouched and returns
/// `NonFinite` if any gradient is NaN or infinite.
pub fn adam_step(
    params: &mut [&mut Tensor<f32>],
    grads: &[&Tensor<f32>],
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape(format!(
            "adam: {} parameters, {} gradients, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || state.m[i].len() != p.len() || state.v[i].len() != p.len() {
            return Err(Error::shape(format!("adam: tensor {i} shape mismatch")));
        }
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient of parameter tensor {i}")));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = (1.0 - BETA1.powi(t)) as f32;
    let c2 = (1.0 - BETA2.powi(t)) as f32;
    let (b1, b2, eps, lr, wd) = (BETA1 as f32, BETA2 as f32, ADAM_EPS as f32, lr as f32, weight_decay as f32);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            let g = g + wd * *w;
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let mhat = *m / c1;
            let vhat = *v / c2;
            *w -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(xs: &[f32]) -> Tensor<f32> {
        Tensor::from_vec(&[xs.len()], xs.to_vec()).unwrap()
    }

    fn step(w: &mut Tensor<f32>, g: &Tensor<f32>, s: &mut AdamState, lr: f64, wd: f64) -> Result<()> {
        adam_step(&mut [w], &[g], s, lr, wd)
    }

    #[test]
    fn zero_gradient_is_a_null_update() {
        let mut w = t(&[1.0, -2.0, 3.0]);
        let mut s = AdamState::new([&w]);
        for _ in 0..5 {
            step(&mut w, &t(&[0.0; 3]), &mut s, 1e-3, 0.0).unwrap();
        }
        assert_eq!(w, t(&[1.0, -2.0, 3.0]));
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut w = t(&[0.0, 0.0, 0.0]);
        let mut s = AdamState::new([&w]);
        step(&mut w, &t(&[0.5, -3.0, 1e-3]), &mut s, 1e-2, 0.0).unwrap();
        for (x, sign) in w.data().iter().zip([-1.0, 1.0, -1.0]) {
            // |g| / (|g| + eps) is ~1 except for tiny gradients
            assert!((x - sign * 1e-2).abs() < 1e-6, "{x}");
        }
    }

    #[test]
    fn quadratic_converges() {
        // f(w) = |w|^2, gradient 2w
        let mut w = t(&[1.0]);
        let mut s = AdamState::new([&w]);
        let mut reached = None;
        for i in 1..=200 {
            let g = t(&[2.0 * w.data()[0]]);
            step(&mut w, &g, &mut s, 0.1, 0.0).unwrap();
            if w.data()[0].abs() < 1e-3 && reached.is_none() {
                reached = Some(i);
            }
        }
        assert!(reached.is_some(), "final {}", w.data()[0]);
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut w = t(&[1.0, 2.0]);
        let mut s = AdamState::new([&w]);
        assert!(matches!(step(&mut w, &t(&[f32::NAN, 0.0]), &mut s, 1e-3, 0.0), Err(Error::NonFinite(_))));
        assert_eq!(w, t(&[1.0, 2.0]));
        assert_eq!(s.step, 0);
    }

    #[test]
    fn weight_decay_shrinks_norm() {
        let mut w = t(&[0.8, -0.4, 0.1]);
        let mut s = AdamState::new([&w]);
        let norm = |w: &Tensor<f32>| w.data().iter().map(|x| x * x).sum::<f32>();
        let mut prev = norm(&w);
        for _ in 0..50 {
            step(&mut w, &t(&[0.0; 3]), &mut s, 1e-3, 1e-2).unwrap();
            let n = norm(&w);
            assert!(n < prev);
            prev = n;
        }
    }

    proptest! {
        #[test]
        fn sign_flip_flips_updates(gs in proptest::collection::vec(-5.0f32..5.0, 1..8), steps in 1usize..5) {
            let w0 = t(&vec![0.0; gs.len()]);
            let (mut a, mut b) = (w0.clone(), w0.clone());
            let (mut sa, mut sb) = (AdamState::new([&a]), AdamState::new([&b]));
            let g = t(&gs);
            let neg = g.map(|x| -x);
            for _ in 0..steps {
                step(&mut a, &g, &mut sa, 1e-2, 0.0).unwrap();
                step(&mut b, &neg, &mut sb, 1e-2, 0.0).unwrap();
            }
            for ((x, y), w) in a.data().iter().zip(b.data()).zip(w0.data()) {
                prop_assert_eq!(x - w, -(y - w));
            }
        }
    }
}
