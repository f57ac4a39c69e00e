//! Named parameter traversal shared by checkpoints, optimizers, EMA and the
//! gradient checks.
//!
//! Gradients are stored in the same struct type as the parameters they
//! belong to, so pairing a model with its gradient is a positional zip over
//! the visit order.

use crate::error::{invalid, Result};
use crate::numerics::Tensor;

pub trait ParamSet {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor));

    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.visit("", &mut |n, t| out.push((n, t)));
        out
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.numel());
        n
    }

    /// Copy with every tensor zeroed; the gradient accumulator for `self`.
    fn zeros_like(&self) -> Self
    where
        Self: Clone,
    {
        let mut z = self.clone();
        z.visit_mut("", &mut |_, t| t.fill(0.0));
        z
    }

    fn flatten(&self) -> Tensor {
        let mut data = Vec::with_capacity(self.num_params());
        self.visit("", &mut |_, t| data.extend_from_slice(t.data()));
        Tensor::vector(data)
    }

    fn assign_flat(&mut self, flat: &Tensor) -> Result<()> {
        let need = self.num_params();
        if flat.numel() != need {
            return Err(invalid(format!(
                "flat parameter vector has {} values, expected {need}",
                flat.numel()
            )));
        }
        let mut off = 0;
        self.visit_mut("", &mut |_, t| {
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat.data()[off..off + n]);
            off += n;
        });
        Ok(())
    }

    /// Applies `f(mine, theirs)` to positionally paired tensors.
    fn zip_mut_with(&mut self, other: &Self, f: &mut dyn FnMut(&str, &mut Tensor, &Tensor)) -> Result<()>
    where
        Self: Sized,
    {
        let theirs = other.named_params();
        let mut idx = 0;
        let mut err = None;
        self.visit_mut("", &mut |name, t| {
            match theirs.get(idx) {
                Some((_, o)) if o.shape() == t.shape() => f(&name, t, o),
                _ => {
                    err.get_or_insert_with(|| invalid(format!("parameter layout mismatch at {name}")));
                }
            }
            idx += 1;
        });
        if idx != theirs.len() {
            err.get_or_insert_with(|| invalid("parameter count mismatch"));
        }
        err.map_or(Ok(()), Err)
    }

    /// `self += s·other`
    fn add_scaled(&mut self, s: f64, other: &Self) -> Result<()>
    where
        Self: Sized,
    {
        self.zip_mut_with(other, &mut |_, a, b| {
            a.data_mut()
                .iter_mut()
                .zip(b.data())
                .for_each(|(x, y)| *x += s * y)
        })
    }

    fn scale_all(&mut self, s: f64) {
        self.visit_mut("", &mut |_, t| t.data_mut().iter_mut().for_each(|v| *v *= s));
    }

    fn sum_sq(&self) -> f64 {
        let mut acc = 0.0;
        self.visit("", &mut |_, t| acc += t.sum_sq());
        acc
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl ParamSet for Tensor {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(prefix.to_string(), self)
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(prefix.to_string(), self)
    }
}

/// Adds `N(0, std²)` noise to every parameter. Used to move zero-initialized
/// layers off their special values before gradient checks.
pub fn jitter<P: ParamSet + ?Sized>(p: &mut P, rng: &mut crate::numerics::Rng, std: f64) {
    p.visit_mut("", &mut |_, t| {
        for v in t.data_mut() {
            *v += std * rng.normal();
        }
    });
}
