//! AdamW with bias correction and decoupled weight decay.

use crate::tensor::{Float, Param, ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moments of one tensor, with its own step count.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments<F> {
    pub m: Tensor<F>,
    pub v: Tensor<F>,
    pub t: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<F> {
    pub cfg: AdamWConfig,
    /// Indexed like the parameter store; `None` until the first update.
    pub state: Vec<Option<Moments<F>>>,
}

/// One update of a single tensor. `p` is decayed in place when `decay` is set.
pub fn adamw_update<F: Float>(
    p: &mut Tensor<F>,
    g: &Tensor<F>,
    mom: &mut Moments<F>,
    cfg: &AdamWConfig,
    lr: f64,
    decay: bool,
) {
    mom.t += 1;
    let t = mom.t as i32;
    let (b1, b2) = (F::lit(cfg.beta1), F::lit(cfg.beta2));
    let c1 = F::lit(1.0 - cfg.beta1.powi(t));
    let c2 = F::lit(1.0 - cfg.beta2.powi(t));
    let (lr_f, eps) = (F::lit(lr), F::lit(cfg.eps));
    let wd = F::lit(if decay { lr * cfg.weight_decay } else { 0.0 });
    let (one, m, v) = (F::one(), mom.m.data_mut(), mom.v.data_mut());
    for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
        *mi = b1 * *mi + (one - b1) * gi;
        *vi = b2 * *vi + (one - b2) * gi * gi;
        let m_hat = *mi / c1;
        let v_hat = *vi / c2;
        *x = *x - wd * *x - lr_f * m_hat / (v_hat.sqrt() + eps);
    }
}

impl<F: Float> AdamW<F> {
    pub fn new(cfg: AdamWConfig, n_params: usize) -> Self {
        AdamW {
            cfg,
            state: vec![None; n_params],
        }
    }

    /// Updates every trainable tensor that has a gradient and is not
    /// `skip`ped. Skipped tensors keep their moments and step count.
    pub fn step(&mut self, store: &mut ParamStore<F>, lr: f64, skip: impl Fn(&Param<F>) -> bool) {
        if self.state.len() < store.len() {
            self.state.resize(store.len(), None);
        }
        for (id, p) in store.iter_mut() {
            if !p.trainable || skip(p) {
                continue;
            }
            let Some(g) = p.grad.as_ref() else { continue };
            let decay = p.decays();
            let mom = self.state[id.0].get_or_insert_with(|| Moments {
                m: Tensor::zeros(p.value.shape()),
                v: Tensor::zeros(p.value.shape()),
                t: 0,
            });
            adamw_update(&mut p.value, g, mom, &self.cfg, lr, decay);
        }
    }
}

/// Scales all gradients of trainable, unskipped tensors so their joint L2
/// norm is at most `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm<F: Float>(store: &mut ParamStore<F>, max_norm: f64, skip: impl Fn(&Param<F>) -> bool) -> f64 {
    let total: f64 = store
        .iter()
        .filter(|(_, p)| p.trainable && !skip(p))
        .filter_map(|(_, p)| p.grad.as_ref())
        .map(|g| g.sum_sq().as_f64())
        .sum::<f64>()
        .sqrt();
    if total > max_norm {
        let s = F::lit(max_norm / total);
        for (_, p) in store.iter_mut() {
            if p.trainable && !skip(p) {
                if let Some(g) = p.grad.as_mut() {
                    g.data_mut().iter_mut().for_each(|x| *x = *x * s);
                }
            }
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    fn moments(n: usize) -> Moments<f64> {
        Moments {
            m: Tensor::zeros(&[n]),
            v: Tensor::zeros(&[n]),
            t: 0,
        }
    }

    #[test]
    fn zero_grad_without_decay_leaves_param() {
        let cfg = AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() };
        let mut p = Tensor::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap();
        let before = p.clone();
        let mut m = moments(3);
        for _ in 0..5 {
            adamw_update(&mut p, &Tensor::zeros(&[3]), &mut m, &cfg, 1e-3, true);
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
        let cfg = AdamWConfig::default();
        let mut p = Tensor::from_f64(&[1], &[0.5]).unwrap();
        let mut m = moments(1);
        adamw_update(&mut p, &Tensor::from_f64(&[1], &[1.0]).unwrap(), &mut m, &cfg, 1e-3, false);
        let want = 0.5 - 1e-3 / (1.0 + 1e-8);
        assert!((p.data()[0] - want).abs() < 1e-15);
        assert!((0.5 - p.data()[0] - 1e-3).abs() < 1e-10);
    }

    #[test]
    fn bias_correction_against_hand_evaluation() {
        let cfg = AdamWConfig::default();
        let mut p = Tensor::<f64>::from_f64(&[1, 1], &[2.0]).unwrap();
        let mut m = Moments { m: Tensor::zeros(&[1, 1]), v: Tensor::zeros(&[1, 1]), t: 0 };
        let grads = [0.3, -0.1];
        let (mut x, mut m1, mut v1) = (2.0f64, 0.0f64, 0.0f64);
        for (t, g) in grads.iter().enumerate() {
            adamw_update(&mut p, &Tensor::from_f64(&[1, 1], &[*g]).unwrap(), &mut m, &cfg, 1e-2, true);
            m1 = 0.9 * m1 + 0.1 * g;
            v1 = 0.999 * v1 + 0.001 * g * g;
            let k = (t + 1) as i32;
            let mh = m1 / (1.0 - 0.9f64.powi(k));
            let vh = v1 / (1.0 - 0.999f64.powi(k));
            x = x - 1e-2 * 0.01 * x - 1e-2 * mh / (vh.sqrt() + 1e-8);
        }
        assert!((p.data()[0] - x).abs() < 1e-14);
        assert_eq!(m.t, 2);
    }

    #[test]
    fn skipped_and_frozen_params_keep_value_and_moments() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", Tensor::full(&[2, 2], 1.0), Some(0));
        let b = store.add("b", Tensor::full(&[2, 2], 1.0), Some(1));
        let c = store.add("c", Tensor::full(&[2], 1.0), None);
        store.get_mut(c).trainable = false;
        for id in [a, b, c] {
            store.get_mut(id).grad = Some(Tensor::full(store.value(id).shape(), 0.5));
        }
        let mut opt = AdamW::new(AdamWConfig::default(), store.len());
        opt.step(&mut store, 1e-3, |p| p.layer == Some(1));
        assert_ne!(store.value(a), &Tensor::full(&[2, 2], 1.0));
        assert_eq!(store.value(b), &Tensor::full(&[2, 2], 1.0));
        assert_eq!(store.value(c), &Tensor::full(&[2], 1.0));
        assert!(opt.state[a.0].is_some() && opt.state[b.0].is_none() && opt.state[c.0].is_none());
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", Tensor::zeros(&[2]), None);
        store.get_mut(a).grad = Some(Tensor::from_f64(&[2], &[3.0, 4.0]).unwrap());
        assert_eq!(clip_grad_norm(&mut store, 1.0, |_| false), 5.0);
        let g = store.get(a).grad.as_ref().unwrap();
        assert!((g.sum_sq().sqrt() - 1.0f64).abs() < 1e-12);
        assert_eq!(clip_grad_norm(&mut store, 10.0, |_| false), 1.0);
    }
}
