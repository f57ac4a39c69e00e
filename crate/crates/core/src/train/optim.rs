//! Adam with decoupled weight decay.

use crate::error::{invalid, Result};
use crate::params::ParamSet;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First and second moment estimates shaped like the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<P> {
    pub hyper: AdamHyper,
    pub m: P,
    pub v: P,
    pub step: u64,
}

impl<P: ParamSet + Clone> AdamW<P> {
    pub fn new(params: &P, hyper: AdamHyper) -> Self {
        Self {
            hyper,
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    /// `θ ← θ(1 − lr·wd) − lr·m̂/(√v̂ + ε)` with bias-corrected moments.
    pub fn update(&mut self, params: &mut P, grad: &P) -> Result<()> {
        let (ps, gs) = (params.named_params(), grad.named_params());
        if ps.len() != gs.len() || ps.iter().zip(&gs).any(|(a, b)| a.1.shape() != b.1.shape()) {
            return Err(invalid("gradient does not match the parameters"));
        }
        drop((ps, gs));
        let h = self.hyper;
        self.step += 1;
        let (b1, b2) = (h.beta1, h.beta2);
        self.m.zip_mut_with(grad, &mut |_, m, g| {
            m.data_mut().iter_mut().zip(g.data()).for_each(|(m, g)| *m = b1 * *m + (1.0 - b1) * g)
        })?;
        self.v.zip_mut_with(grad, &mut |_, v, g| {
            v.data_mut().iter_mut().zip(g.data()).for_each(|(v, g)| *v = b2 * *v + (1.0 - b2) * g * g)
        })?;
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let (ms, vs) = (self.m.named_params(), self.v.named_params());
        if ms.len() != params.named_params().len() {
            return Err(invalid("optimizer state does not match the parameters"));
        }
        let mut idx = 0;
        params.visit_mut("", &mut |_, p| {
            let (m, v) = (ms[idx].1.data(), vs[idx].1.data());
            for ((p, m), v) in p.data_mut().iter_mut().zip(m).zip(v) {
                *p -= h.lr * h.weight_decay * *p;
                *p -= h.lr * (m / bc1) / ((v / bc2).sqrt() + h.eps);
            }
            idx += 1;
        });
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn matches_scalar_reference() {
        let hyper = AdamHyper {
            lr: 0.05,
            weight_decay: 0.01,
            ..Default::default()
        };
        let mut p = Tensor::vector(vec![2.0, -1.0]);
        let mut opt = AdamW::new(&p, hyper);
        // reference for coordinate 0 on f(x) = x²
        let (mut x, mut m, mut v) = (2.0f64, 0.0f64, 0.0f64);
        for k in 1..=25 {
            let g = p.scale(2.0);
            opt.update(&mut p, &g).unwrap();
            let gx = 2.0 * x;
            x -= 0.05 * 0.01 * x;
            m = 0.9 * m + 0.1 * gx;
            v = 0.999 * v + 0.001 * gx * gx;
            let (mh, vh) = (m / (1.0 - 0.9f64.powi(k)), v / (1.0 - 0.999f64.powi(k)));
            x -= 0.05 * mh / (vh.sqrt() + 1e-8);
            assert!((p.data()[0] - x).abs() < 1e-15, "step {k}");
        }
        assert!(p.data()[0].abs() < 2.0 && p.data()[1].abs() < 1.0);
    }

    #[test]
    fn decay_only_shrinks_without_gradient() {
        let hyper = AdamHyper {
            lr: 0.1,
            weight_decay: 0.5,
            ..Default::default()
        };
        let mut p = Tensor::vector(vec![4.0]);
        let mut opt = AdamW::new(&p, hyper);
        opt.update(&mut p, &Tensor::zeros(&[1])).unwrap();
        assert_eq!(p.data()[0], 4.0 * (1.0 - 0.05));
        assert!(opt.update(&mut p, &Tensor::zeros(&[2])).is_err());
    }
}
