//! DDPM noise schedule, training loss, ancestral sampler with classifier-free
//! guidance, and weight EMA.
//!
//! Timesteps are 1-indexed: `t ∈ 1..=T`, with `ᾱ_0 = 1`.

use crate::error::{ensure_shape, invalid, Result};
use crate::model::{Denoiser, DimModel};
use crate::numerics::{randn, Rng, Tensor};
use crate::params::ParamSet;

pub const DEFAULT_TIMESTEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    posterior_var: Vec<f64>,
    /// Posterior mean coefficient on `z_0`.
    coef_z0: Vec<f64>,
    /// Posterior mean coefficient on `z_t`.
    coef_zt: Vec<f64>,
}

/// Linear β from `beta_start` (t = 1) to `beta_end` (t = T).
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(invalid("schedule needs at least one step"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(invalid(format!(
            "need 0 < beta_start ≤ beta_end < 1, got [{beta_start}, {beta_end}]"
        )));
    }
    let beta: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for a in &alpha {
        acc *= a;
        alpha_bar.push(acc);
    }
    let mut posterior_var = Vec::with_capacity(steps);
    let mut coef_z0 = Vec::with_capacity(steps);
    let mut coef_zt = Vec::with_capacity(steps);
    for i in 0..steps {
        let prev = if i == 0 { 1.0 } else { alpha_bar[i - 1] };
        let (v, c0, ct) = posterior_coefficients(alpha_bar[i], prev, beta[i]);
        posterior_var.push(v);
        coef_z0.push(c0);
        coef_zt.push(ct);
    }
    Ok(NoiseSchedule {
        beta,
        alpha,
        alpha_bar,
        posterior_var,
        coef_z0,
        coef_zt,
    })
}

/// `(β̃, coef_z0, coef_zt)` for a transition `ᾱ_prev → ᾱ_t` with step
/// variance `β = 1 − ᾱ_t/ᾱ_prev`.
fn posterior_coefficients(alpha_bar: f64, alpha_bar_prev: f64, beta: f64) -> (f64, f64, f64) {
    let denom = 1.0 - alpha_bar;
    let var = (1.0 - alpha_bar_prev) / denom * beta;
    let c0 = alpha_bar_prev.sqrt() * beta / denom;
    let ct = (1.0 - beta).sqrt() * (1.0 - alpha_bar_prev) / denom;
    (var, c0, ct)
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        make_schedule(DEFAULT_TIMESTEPS, DEFAULT_BETA_START, DEFAULT_BETA_END).expect("default schedule is valid")
    }
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn idx(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return Err(invalid(format!("timestep {t} outside 1..={}", self.steps())));
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.beta[self.idx(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(self.alpha[self.idx(t)?])
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        Ok(self.alpha_bar[self.idx(t)?])
    }

    pub fn posterior_var(&self, t: usize) -> Result<f64> {
        Ok(self.posterior_var[self.idx(t)?])
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }
}

/// `√ᾱ_t·z0 + √(1−ᾱ_t)·ε`
pub fn q_sample(z0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    ensure_shape("q_sample noise", z0.shape(), eps.shape())?;
    let ab = sched.alpha_bar(sched.idx(t)? + 1)?;
    let (s0, s1) = (ab.sqrt(), (1.0 - ab).sqrt());
    z0.zip_map(eps, |z, e| s0 * z + s1 * e)
}

/// Mean and variance of `q(z_{t−1} | z_t, z_0)` for `t ≥ 2`.
pub fn posterior_params(z_t: &Tensor, z0: &Tensor, t: usize, sched: &NoiseSchedule) -> Result<(Tensor, f64)> {
    if t < 2 {
        return Err(invalid(format!("posterior needs t ≥ 2, got {t}")));
    }
    let i = sched.idx(t)?;
    ensure_shape("posterior", z_t.shape(), z0.shape())?;
    let (c0, ct) = (sched.coef_z0[i], sched.coef_zt[i]);
    Ok((z0.zip_map(z_t, |a, b| c0 * a + ct * b)?, sched.posterior_var[i]))
}

/// `ε_u + s·(ε_c − ε_u)`. At `s = 1` the result is `ε_c` bit for bit; the
/// rounding of `u + (c − u)` would otherwise leave ulp-level differences.
pub fn cfg_combine(eps_cond: &Tensor, eps_uncond: &Tensor, s: f64) -> Result<Tensor> {
    ensure_shape("cfg_combine", eps_cond.shape(), eps_uncond.shape())?;
    if s == 1.0 {
        return Ok(eps_cond.clone());
    }
    eps_cond.zip_map(eps_uncond, |c, u| u + s * (c - u))
}

/// `mean((ε − ε̂)²)` for `ε̂ = model(q_sample(z0, t, ε), t, y)`; parameter
/// gradients accumulate into `grad`.
pub fn loss_simple(
    model: &DimModel,
    sched: &NoiseSchedule,
    z0: &Tensor,
    t: usize,
    eps: &Tensor,
    y: Option<usize>,
    grad: &mut DimModel,
) -> Result<f64> {
    let z_t = q_sample(z0, t, eps, sched)?;
    let (pred, cache) = model.forward_cached(&z_t, t, y)?;
    let n = eps.numel() as f64;
    let diff = pred.sub(eps)?;
    model.backward(&cache, &diff.scale(2.0 / n), grad)?;
    Ok(diff.sum_sq() / n)
}

/// Loss value without gradients.
pub fn loss_simple_value<D: Denoiser + ?Sized>(
    model: &D,
    sched: &NoiseSchedule,
    z0: &Tensor,
    t: usize,
    eps: &Tensor,
    y: Option<usize>,
) -> Result<f64> {
    let z_t = q_sample(z0, t, eps, sched)?;
    let pred = model.predict_eps(&z_t, t, y)?;
    Ok(pred.sub(eps)?.sum_sq() / eps.numel() as f64)
}

/// Reverse-process mean implied by a noise prediction:
/// `(z_t − β_t/√(1−ᾱ_t)·ε̂)/√α_t`.
pub fn mean_from_eps(z_t: &Tensor, eps_hat: &Tensor, t: usize, sched: &NoiseSchedule) -> Result<Tensor> {
    let (b, a, ab) = (sched.beta(t)?, sched.alpha(t)?, sched.alpha_bar(t)?);
    let k = b / (1.0 - ab).sqrt();
    let s = 1.0 / a.sqrt();
    z_t.zip_map(eps_hat, |z, e| s * (z - k * e))
}

/// `KL(N(μ_q, v_q I) ‖ N(μ_p, v_p I))` summed over coordinates.
pub fn gaussian_kl(mu_q: &Tensor, var_q: f64, mu_p: &Tensor, var_p: f64) -> Result<f64> {
    ensure_shape("gaussian_kl", mu_q.shape(), mu_p.shape())?;
    let n = mu_q.numel() as f64;
    let sq = mu_q.sub(mu_p)?.sum_sq();
    Ok(0.5 * (n * ((var_p / var_q).ln() + var_q / var_p - 1.0) + sq / var_p))
}

/// Weight `λ_t = β_t²/(2σ_t²·α_t·(1−ᾱ_t))` with `σ_t² = β̃_t`, so that the KL
/// term equals `λ_t·‖ε − ε̂‖²` up to a parameter-free constant.
pub fn kl_eps_weight(t: usize, sched: &NoiseSchedule) -> Result<f64> {
    if t < 2 {
        return Err(invalid("KL weight needs t ≥ 2"));
    }
    let (b, a, ab, v) = (sched.beta(t)?, sched.alpha(t)?, sched.alpha_bar(t)?, sched.posterior_var(t)?);
    Ok(b * b / (2.0 * v * a * (1.0 - ab)))
}

/// Timesteps visited by a sampler with `steps` evaluations, ascending,
/// evenly strided over `1..=T` and always including `T`.
pub fn respaced_timesteps(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > total {
        return Err(invalid(format!("sampling steps must be in 1..={total}, got {steps}")));
    }
    if steps == 1 {
        return Ok(vec![total]);
    }
    Ok((0..steps)
        .map(|i| 1 + (i * (total - 1) + (steps - 1) / 2) / (steps - 1))
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleOptions {
    pub steps: usize,
    pub cfg_scale: f64,
    /// Clamp the `z_0` estimate to `[−1, 1]` (raw image mode only).
    pub clamp: bool,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self {
            steps: 250,
            cfg_scale: 1.5,
            clamp: false,
        }
    }
}

/// Guided noise prediction; a single conditional pass when guidance is a
/// no-op (`s = 1`) or there is no label.
pub fn guided_eps<D: Denoiser + ?Sized>(
    model: &D,
    z: &Tensor,
    t: usize,
    y: Option<usize>,
    cfg_scale: f64,
) -> Result<Tensor> {
    match y {
        Some(label) if cfg_scale != 1.0 => {
            let cond = model.predict_eps(z, t, Some(label))?;
            let uncond = model.predict_eps(z, t, None)?;
            cfg_combine(&cond, &uncond, cfg_scale)
        }
        _ => model.predict_eps(z, t, y),
    }
}

/// Ancestral sampling from `z_T ~ N(0, I)`.
///
/// With fewer steps than the schedule, the chain visits
/// [`respaced_timesteps`] and each transition uses `β' = 1 − ᾱ_t/ᾱ_prev`;
/// adjacent timesteps reuse the schedule's own β so `steps == T` is the
/// unmodified chain.
pub fn ddpm_sample<D: Denoiser + ?Sized>(
    model: &D,
    sched: &NoiseSchedule,
    shape: &[usize],
    y: Option<usize>,
    opts: &SampleOptions,
    rng: &mut Rng,
) -> Result<Tensor> {
    if !(opts.cfg_scale >= 0.0 && opts.cfg_scale.is_finite()) {
        return Err(invalid(format!("cfg scale must be a finite value ≥ 0, got {}", opts.cfg_scale)));
    }
    let ts = respaced_timesteps(sched.steps(), opts.steps)?;
    let mut z = randn(rng, shape)?;
    for k in (0..ts.len()).rev() {
        let t = ts[k];
        let prev = if k == 0 { 0 } else { ts[k - 1] };
        let eps = guided_eps(model, &z, t, y, opts.cfg_scale)?;
        let ab = sched.alpha_bar(t)?;
        let ab_prev = sched.alpha_bar(prev)?;
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        let mut z0 = z.zip_map(&eps, |zt, e| (zt - sb * e) / sa)?;
        if opts.clamp {
            z0 = z0.map(|v| v.clamp(-1.0, 1.0));
        }
        let beta = if prev + 1 == t { sched.beta(t)? } else { 1.0 - ab / ab_prev };
        let (var, c0, ct) = posterior_coefficients(ab, ab_prev, beta);
        let mean = z0.zip_map(&z, |a, b| c0 * a + ct * b)?;
        if k == 0 {
            z = mean;
        } else {
            let noise = randn(rng, shape)?;
            let sd = var.sqrt();
            z = mean.zip_map(&noise, |m, n| m + sd * n)?;
        }
    }
    Ok(z)
}

/// Exponential moving average of a parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaState<P> {
    pub shadow: P,
    pub decay: f64,
}

impl<P: ParamSet + Clone> EmaState<P> {
    pub fn new(params: &P, decay: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(invalid(format!("EMA decay must be in [0, 1], got {decay}")));
        }
        Ok(Self {
            shadow: params.clone(),
            decay,
        })
    }

    /// `shadow ← decay·shadow + (1 − decay)·params`
    pub fn update(&mut self, params: &P) -> Result<()> {
        let d = self.decay;
        self.shadow.zip_mut_with(params, &mut |_, s, p| {
            s.data_mut()
                .iter_mut()
                .zip(p.data())
                .for_each(|(a, b)| *a = d * *a + (1.0 - d) * b)
        })
    }
}

pub fn ema_update<P: ParamSet + Clone>(ema: &mut EmaState<P>, params: &P) -> Result<()> {
    ema.update(params)
}
