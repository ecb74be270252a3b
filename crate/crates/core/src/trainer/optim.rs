//! AdamW with decoupled weight decay applied to weight matrices only.

use crate::error::{Error, Result};
use crate::model::{HeadParams, ParamKind};

#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub m: HeadParams,
    pub v: HeadParams,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimState {
    pub fn new(params: &HeadParams) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

fn same_shape(a: &HeadParams, b: &HeadParams) -> bool {
    let sa: Vec<usize> = a.tensors().iter().map(|t| t.2.len()).collect();
    let sb: Vec<usize> = b.tensors().iter().map(|t| t.2.len()).collect();
    sa == sb
}

/// One AdamW update:
/// `p ← p − lr · m̂ / (√v̂ + eps) − lr · wd · p` (decay only on weights).
pub fn adamw_step(
    params: &mut HeadParams,
    grads: &HeadParams,
    state: &mut OptimState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if !same_shape(params, grads) || !same_shape(params, &state.m) {
        return Err(Error::Shape("optimizer state, gradients and parameters differ in shape".into()));
    }
    state.t += 1;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let t = i32::try_from(state.t).unwrap_or(i32::MAX);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let grads = grads.tensors();
    let mut ms = state.m.tensors_mut();
    let mut vs = state.v.tensors_mut();
    for (k, (_, kind, p)) in params.tensors_mut().into_iter().enumerate() {
        let g = grads[k].2;
        let m = &mut *ms[k].2;
        let v = &mut *vs[k].2;
        let decay = if kind == ParamKind::Weight { weight_decay } else { 0.0 };
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= lr * (m_hat / (v_hat.sqrt() + eps)) + lr * decay * p[i];
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_heads;

    fn setup() -> (HeadParams, OptimState) {
        let p = init_heads(&[3], 2, 4, 1).unwrap();
        let s = OptimState::new(&p);
        (p, s)
    }

    #[test]
    fn zero_grad_decays_weights_only() {
        let (mut p, mut s) = setup();
        p.b_reg = 0.7;
        let before = p.clone();
        let g = p.zeros_like();
        adamw_step(&mut p, &g, &mut s, 1e-3, 0.02).unwrap();
        for (a, b) in p.heads[0].w1.iter().zip(&before.heads[0].w1) {
            assert_eq!(*a, b - 1e-3 * 0.02 * b);
            assert!((a - b * (1.0 - 2e-5)).abs() <= 1e-15 * b.abs());
        }
        assert_eq!(p.b_reg, 0.7);
        assert_eq!(p.heads[0].norm1_gain, before.heads[0].norm1_gain);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn zero_grad_zero_decay_is_stationary() {
        let (mut p, mut s) = setup();
        let before = p.clone();
        let g = p.zeros_like();
        for _ in 0..5 {
            adamw_step(&mut p, &g, &mut s, 1e-2, 0.0).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn constant_gradient_gives_unit_steps() {
        let (mut p, mut s) = setup();
        let mut g = p.zeros_like();
        g.b_reg = 0.3;
        let lr = 1e-3;
        let mut last = p.b_reg;
        for _ in 0..200 {
            adamw_step(&mut p, &g, &mut s, lr, 0.0).unwrap();
            let step = last - p.b_reg;
            assert!((step - lr).abs() < 1e-9, "{step}");
            last = p.b_reg;
        }
    }

    #[test]
    fn shape_mismatch() {
        let (mut p, mut s) = setup();
        let g = init_heads(&[5], 2, 4, 1).unwrap();
        assert!(adamw_step(&mut p, &g, &mut s, 1e-3, 0.0).is_err());
    }
}
