//! Adam with coupled L2 on the embedding tables.

use crate::encoder::{lit, ModelParams, ParamGrads, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Added as `l2_reg * theta` to user/item embedding gradients only.
    pub l2_reg: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            l2_reg: 0.0,
        }
    }
}

/// First and second moments mirroring every parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: ModelParams<T>,
    pub v: ModelParams<T>,
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        AdamState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// The tensor holding a non-finite gradient entry, if any.
pub fn first_non_finite<T: Real>(grads: &ParamGrads<T>) -> Option<Tensor> {
    Tensor::ALL
        .into_iter()
        .find(|&t| grads.tensor(t).iter().any(|x| !x.is_finite()))
}

/// One bias-corrected Adam update. Leaves everything untouched and returns
/// the offending tensor if a gradient is not finite.
pub fn adam_step<T: Real>(
    params: &mut ModelParams<T>,
    grads: &ParamGrads<T>,
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<(), Tensor> {
    if let Some(t) = first_non_finite(grads) {
        return Err(t);
    }
    state.step += 1;
    let t_step = state.step as i32;
    let b1: T = lit(cfg.beta1);
    let b2: T = lit(cfg.beta2);
    let one = T::one();
    let lr: T = lit(cfg.learning_rate);
    let eps: T = lit(cfg.eps);
    let l2: T = lit(cfg.l2_reg);
    let bc1 = one - b1.powi(t_step);
    let bc2 = one - b2.powi(t_step);
    let pad_start = params.num_items * params.dim;

    for tensor in Tensor::ALL {
        let len = match tensor {
            Tensor::ItemEmb => pad_start,
            _ => params.tensor(tensor).len(),
        };
        let decay = tensor.is_embedding() && cfg.l2_reg > 0.0;
        let g = &grads.tensor(tensor)[..len];
        let m = &mut state.m.tensor_mut(tensor)[..len];
        let v = &mut state.v.tensor_mut(tensor)[..len];
        let theta = &mut params.tensor_mut(tensor)[..len];
        for i in 0..len {
            let gi = if decay { g[i] + l2 * theta[i] } else { g[i] };
            m[i] = b1 * m[i] + (one - b1) * gi;
            v[i] = b2 * v[i] + (one - b2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            theta[i] = theta[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelParams<f64> {
        let mut p = ModelParams::zeros(2, 2, 2);
        for (i, x) in p.user_emb.iter_mut().enumerate() {
            *x = 0.5 + i as f64;
        }
        for x in p.item_emb[..4].iter_mut() {
            *x = -0.25;
        }
        p.proj = vec![1.0, 0.2, 0.3, 1.0];
        p.query = vec![0.7, -0.7];
        p.w1 = vec![0.1; 4];
        p
    }

    #[test]
    fn zero_gradient_no_decay_is_a_no_op() {
        let mut p = tiny();
        let before = p.clone();
        let g = p.zeros_like();
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &g, &mut s, &AdamConfig::default()).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = ModelParams::<f64>::zeros(1, 0, 1);
        p.user_emb = vec![2.0];
        let mut g = p.zeros_like();
        g.user_emb = vec![1.0];
        let mut s = AdamState::new(&p);
        let cfg = AdamConfig {
            learning_rate: 0.1,
            ..Default::default()
        };
        adam_step(&mut p, &g, &mut s, &cfg).unwrap();
        // m_hat = 1, v_hat = 1 -> step = lr / (1 + eps)
        assert!((p.user_emb[0] - (2.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_touches_embeddings_only() {
        let mut p = tiny();
        let before = p.clone();
        let g = p.zeros_like();
        let mut s = AdamState::new(&p);
        let cfg = AdamConfig {
            learning_rate: 1e-2,
            l2_reg: 1e-3,
            ..Default::default()
        };
        adam_step(&mut p, &g, &mut s, &cfg).unwrap();
        for u in 0..2 {
            assert!(crate::encoder::norm(p.user(u)) < crate::encoder::norm(before.user(u)));
        }
        assert!(crate::encoder::norm(p.item(0)) < crate::encoder::norm(before.item(0)));
        assert_eq!(p.item(2), before.item(2));
        for t in [Tensor::Proj, Tensor::Query, Tensor::W1, Tensor::B1, Tensor::W2, Tensor::B2] {
            assert_eq!(p.tensor(t), before.tensor(t), "{t}");
        }
    }

    #[test]
    fn padding_row_is_frozen() {
        let mut p = tiny();
        let mut g = p.zeros_like();
        for x in g.item_emb.iter_mut() {
            *x = 1.0;
        }
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &g, &mut s, &AdamConfig::default()).unwrap();
        assert_eq!(p.item(2), &[0.0, 0.0]);
    }

    #[test]
    fn non_finite_gradient_aborts_without_mutation() {
        let mut p = tiny();
        let before = p.clone();
        let mut g = p.zeros_like();
        g.w1[2] = f64::NAN;
        let mut s = AdamState::new(&p);
        assert_eq!(adam_step(&mut p, &g, &mut s, &AdamConfig::default()), Err(Tensor::W1));
        assert_eq!(p, before);
        assert_eq!(s.step, 0);
    }
}
