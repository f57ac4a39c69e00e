//! Dense linear maps and depthwise causal convolutions over `[L × C]` rows.

use crate::error::{ensure_shape, Result};
use crate::numerics::{randn_scaled, Rng, Tensor};
use crate::params::{join, ParamSet};

/// `y = x·Wᵀ + b` with `W: [out × in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn zeros(input: usize, output: usize, bias: bool) -> Self {
        Self {
            weight: Tensor::zeros(&[output, input]),
            bias: bias.then(|| Tensor::zeros(&[output])),
        }
    }

    /// Weights `N(0, 1/in)`, zero bias.
    pub fn init(rng: &mut Rng, input: usize, output: usize, bias: bool) -> Result<Self> {
        let std = (1.0 / input as f64).sqrt();
        Ok(Self {
            weight: randn_scaled(rng, &[output, input], std)?,
            bias: bias.then(|| Tensor::zeros(&[output])),
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (inp, out) = (self.in_dim(), self.out_dim());
        ensure_shape("linear", &[inp], &[x.cols()])?;
        let rows = x.rows();
        let mut y = Vec::with_capacity(rows * out);
        let w = self.weight.data();
        for r in 0..rows {
            let xr = x.row(r);
            for o in 0..out {
                let wr = &w[o * inp..(o + 1) * inp];
                let mut acc = self.bias.as_ref().map_or(0.0, |b| b.data()[o]);
                for (a, b) in xr.iter().zip(wr) {
                    acc += a * b;
                }
                y.push(acc);
            }
        }
        Tensor::new(vec![rows, out], y)
    }

    /// Accumulates parameter gradients into `grad` and returns `∂/∂x`.
    pub fn backward(&self, x: &Tensor, gy: &Tensor, grad: &mut Linear) -> Result<Tensor> {
        let (inp, out) = (self.in_dim(), self.out_dim());
        ensure_shape("linear backward", &[x.rows(), out], gy.shape())?;
        let w = self.weight.data();
        let mut gx = Tensor::zeros(&[x.rows(), inp]);
        for r in 0..x.rows() {
            let xr = x.row(r);
            let gr = gy.row(r);
            let gxr = gx.row_mut(r);
            let gw = grad.weight.data_mut();
            for (o, &g) in gr.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                let wr = &w[o * inp..(o + 1) * inp];
                let gwr = &mut gw[o * inp..(o + 1) * inp];
                for i in 0..inp {
                    gxr[i] += g * wr[i];
                    gwr[i] += g * xr[i];
                }
            }
            if let Some(gb) = grad.bias.as_mut() {
                for (b, &g) in gb.data_mut().iter_mut().zip(gr) {
                    *b += g;
                }
            }
        }
        Ok(gx)
    }
}

impl ParamSet for Linear {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(join(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(join(prefix, "bias"), b);
        }
    }
}

/// Depthwise 1-D convolution, causal along the row axis:
/// `y[t, c] = b[c] + Σₖ w[c, k]·x[t − (K−1) + k, c]` with zero padding.
#[derive(Clone, Debug, PartialEq)]
pub struct CausalConv {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl CausalConv {
    pub fn init(rng: &mut Rng, channels: usize, width: usize) -> Result<Self> {
        let std = (1.0 / width as f64).sqrt();
        Ok(Self {
            weight: randn_scaled(rng, &[channels, width], std)?,
            bias: Tensor::zeros(&[channels]),
        })
    }

    pub fn channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (c, k) = (self.channels(), self.width());
        ensure_shape("causal conv", &[c], &[x.cols()])?;
        let l = x.rows();
        let w = self.weight.data();
        let mut y = Tensor::zeros(&[l, c]);
        let yd = y.data_mut();
        for t in 0..l {
            for ch in 0..c {
                let mut acc = self.bias.data()[ch];
                for j in 0..k {
                    if let Some(src) = (t + j).checked_sub(k - 1) {
                        acc += w[ch * k + j] * x.data()[src * c + ch];
                    }
                }
                yd[t * c + ch] = acc;
            }
        }
        Ok(y)
    }

    pub fn backward(&self, x: &Tensor, gy: &Tensor, grad: &mut CausalConv) -> Result<Tensor> {
        let (c, k) = (self.channels(), self.width());
        ensure_shape("causal conv backward", x.shape(), gy.shape())?;
        let l = x.rows();
        let w = self.weight.data();
        let mut gx = Tensor::zeros(&[l, c]);
        for t in 0..l {
            for ch in 0..c {
                let g = gy.data()[t * c + ch];
                grad.bias.data_mut()[ch] += g;
                for j in 0..k {
                    if let Some(src) = (t + j).checked_sub(k - 1) {
                        gx.data_mut()[src * c + ch] += w[ch * k + j] * g;
                        grad.weight.data_mut()[ch * k + j] += g * x.data()[src * c + ch];
                    }
                }
            }
        }
        Ok(gx)
    }
}

impl ParamSet for CausalConv {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, grad_rel_error, randn};

    fn weighted(y: &Tensor, w: &Tensor) -> f64 {
        y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn linear_adjoint() {
        let mut rng = Rng::new(1);
        let mut lin = Linear::init(&mut rng, 5, 3, true).unwrap();
        lin.bias = Some(randn(&mut rng, &[3]).unwrap());
        let x = randn(&mut rng, &[4, 5]).unwrap();
        let gy = randn(&mut rng, &[4, 3]).unwrap();
        let mut grad = lin.zeros_like();
        let gx = lin.backward(&x, &gy, &mut grad).unwrap();

        let fx = finite_diff_grad(|x| Ok(weighted(&lin.forward(x)?, &gy)), &x, 1e-5).unwrap();
        assert!(grad_rel_error(&gx, &fx) < 1e-7);
        let fp = finite_diff_grad(
            |p| {
                let mut l = lin.clone();
                l.assign_flat(p)?;
                Ok(weighted(&l.forward(&x)?, &gy))
            },
            &lin.flatten(),
            1e-5,
        )
        .unwrap();
        assert!(grad_rel_error(&grad.flatten(), &fp) < 1e-7);
    }

    #[test]
    fn conv_is_causal_and_adjoint() {
        let mut rng = Rng::new(2);
        let mut conv = CausalConv::init(&mut rng, 3, 4).unwrap();
        conv.bias = randn(&mut rng, &[3]).unwrap();
        let x = randn(&mut rng, &[6, 3]).unwrap();
        let y = conv.forward(&x).unwrap();
        let mut x2 = x.clone();
        x2.row_mut(4).iter_mut().for_each(|v| *v += 1.0);
        let y2 = conv.forward(&x2).unwrap();
        for t in 0..4 {
            assert_eq!(y.row(t), y2.row(t));
        }

        let gy = randn(&mut rng, &[6, 3]).unwrap();
        let mut grad = conv.zeros_like();
        let gx = conv.backward(&x, &gy, &mut grad).unwrap();
        let fx = finite_diff_grad(|x| Ok(weighted(&conv.forward(x)?, &gy)), &x, 1e-5).unwrap();
        assert!(grad_rel_error(&gx, &fx) < 1e-7);
        let fp = finite_diff_grad(
            |p| {
                let mut c = conv.clone();
                c.assign_flat(p)?;
                Ok(weighted(&c.forward(&x)?, &gy))
            },
            &conv.flatten(),
            1e-5,
        )
        .unwrap();
        assert!(grad_rel_error(&grad.flatten(), &fp) < 1e-7);
    }
}
