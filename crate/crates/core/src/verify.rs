//! Self-check suite: every numerical identity the implementation relies on,
//! each compared against an oracle that shares no code with the checked path.
//!
//! [`CheckOptions::zoh`] lets callers swap in a deliberately broken
//! discretizer to confirm the suite notices.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use crate::block::{dim_block_backward, dim_block_forward, BlockDims, DimBlockParams};
use crate::diffusion::{cfg_combine, loss_simple, loss_simple_value, make_schedule, posterior_params, EmaState};
use crate::efficiency::{flops_dim, gflops_report, count_config_ops, Arch, TERM_READOUT, TERM_STATE_UPDATE};
use crate::error::Result;
use crate::model::{build_model, ModelConfig, SizeTag};
use crate::numerics::{finite_diff_grad, grad_rel_error, rand_uniform, randn, Rng, Tensor};
use crate::params::{jitter, ParamSet};
use crate::patchify::{depatchify, patchify, PatchGrid};
use crate::ssm::{
    linear_scan_associative, linear_scan_with, selective_scan_backward, selective_scan_with, ScanSystem, SsmParams, Zoh,
};
use crate::train::checkpoint::{decode_checkpoint, encode_checkpoint, Checkpoint, Manifest};
use crate::train::config::RunConfig;

/// Soft budget for the whole suite; exceeding it only prints a warning.
pub const SOFT_BUDGET: Duration = Duration::from_secs(300);

#[derive(Clone, Copy, Debug)]
pub struct CheckOptions {
    pub zoh: Zoh,
    pub seed: u64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            zoh: Zoh::default(),
            seed: 2024,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub measured: String,
    pub tolerance: String,
    pub elapsed: Duration,
}

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub results: Vec<CheckResult>,
    pub elapsed: Duration,
}

impl CheckReport {
    pub fn all_passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn failures(&self) -> Vec<&'static str> {
        self.results.iter().filter(|r| !r.passed).map(|r| r.name).collect()
    }

    pub fn result(&self, name: &str) -> Option<&CheckResult> {
        self.results.iter().find(|r| r.name == name)
    }

    pub fn over_budget(&self) -> bool {
        self.elapsed > SOFT_BUDGET
    }

    pub fn to_table(&self) -> String {
        let w = self.results.iter().map(|r| r.name.len()).max().unwrap_or(5).max(5);
        let m = self.results.iter().map(|r| r.measured.len()).max().unwrap_or(8).max(8);
        let mut out = format!("{:<w$}  {:<6}  {:<m$}  {}\n", "check", "status", "measured", "tolerance");
        for r in &self.results {
            let status = if r.passed { "PASS" } else { "FAIL" };
            let _ = writeln!(out, "{:<w$}  {:<6}  {:<m$}  {}", r.name, status, r.measured, r.tolerance);
        }
        let passed = self.results.iter().filter(|r| r.passed).count();
        let _ = writeln!(out, "{passed}/{} checks passed in {:.1} s", self.results.len(), self.elapsed.as_secs_f64());
        out
    }
}

struct Outcome {
    passed: bool,
    measured: String,
    tolerance: String,
}

fn within(err: f64, tol: f64) -> Outcome {
    Outcome {
        passed: err <= tol,
        measured: format!("max err {err:.2e}"),
        tolerance: format!("≤ {tol:.0e}"),
    }
}

fn exact(ok: bool, what: &str) -> Outcome {
    Outcome {
        passed: ok,
        measured: if ok { what.to_string() } else { format!("not {what}") },
        tolerance: "exact".into(),
    }
}

type CheckFn = fn(&CheckOptions) -> Result<Outcome>;

const CHECKS: &[(&str, CheckFn)] = &[
    ("zoh_closed_form", zoh_closed_form),
    ("scan_vs_kernel", scan_vs_kernel),
    ("scan_associative", scan_associative),
    ("scan_causality", scan_causality),
    ("scan_stability", scan_stability),
    ("grad_selective_scan", grad_selective_scan),
    ("grad_block", grad_block),
    ("grad_model", grad_model),
    ("grad_loss_simple", grad_loss_simple),
    ("ddpm_alpha_bar_recursion", ddpm_alpha_bar_recursion),
    ("ddpm_marginal_monte_carlo", ddpm_marginal_monte_carlo),
    ("ddpm_posterior_bayes", ddpm_posterior_bayes),
    ("cfg_identities", cfg_identities),
    ("ema_closed_form", ema_closed_form),
    ("patchify_roundtrip", patchify_roundtrip),
    ("checkpoint_roundtrip", checkpoint_roundtrip),
    ("config_roundtrip", config_roundtrip),
    ("model_ladder_counts", model_ladder_counts),
    ("flops_linear_scaling", flops_linear_scaling),
];

pub fn check_names() -> Vec<&'static str> {
    CHECKS.iter().map(|c| c.0).collect()
}

/// Runs every check; an error inside a check counts as a failure of that
/// check only.
pub fn run_checks(opts: &CheckOptions) -> CheckReport {
    run_selected(opts, |_| true)
}

/// Runs the checks whose names appear in `names`, in suite order.
pub fn run_named(opts: &CheckOptions, names: &[&str]) -> CheckReport {
    run_selected(opts, |n| names.contains(&n))
}

fn run_selected(opts: &CheckOptions, keep: impl Fn(&str) -> bool) -> CheckReport {
    let start = Instant::now();
    let results = CHECKS
        .iter()
        .filter(|(name, _)| keep(name))
        .map(|(name, f)| {
            let t0 = Instant::now();
            let o = f(opts).unwrap_or_else(|e| Outcome {
                passed: false,
                measured: format!("error: {e}"),
                tolerance: "-".into(),
            });
            CheckResult {
                name,
                passed: o.passed,
                measured: o.measured,
                tolerance: o.tolerance,
                elapsed: t0.elapsed(),
            }
        })
        .collect();
    CheckReport {
        results,
        elapsed: start.elapsed(),
    }
}

/// `(e^{Δa}, expm1(Δa)/a·b)` straight from the definition.
fn zoh_reference(a: f64, delta: f64, b: f64) -> (f64, f64) {
    ((delta * a).exp(), (delta * a).exp_m1() / a * b)
}

fn rel(x: f64, reference: f64) -> f64 {
    (x - reference).abs() / reference.abs().max(f64::MIN_POSITIVE)
}

fn zoh_closed_form(o: &CheckOptions) -> Result<Outcome> {
    let mut rng = Rng::new(o.seed);
    let mut worst = 0.0f64;
    for i in 0..1200 {
        let a = -(0.01 + 20.0 * rng.uniform());
        // the last 200 triples land in the series branch
        let delta = if i < 1000 {
            1e-4 + rng.uniform()
        } else {
            (1e-12 + 1e-9 * rng.uniform()) / a.abs()
        };
        let b = rng.normal();
        let (ab, bb) = o.zoh.discretize(a, delta, b)?;
        let (ra, rb) = zoh_reference(a, delta, b);
        worst = worst.max(rel(ab, ra)).max(rel(bb, rb));
    }
    Ok(within(worst, 1e-12))
}

fn scan_vs_kernel(o: &CheckOptions) -> Result<Outcome> {
    let mut rng = Rng::new(o.seed + 1);
    let n = 16;
    let mut worst = 0.0f64;
    for l in [1usize, 2, 16, 64] {
        for d in [1usize, 4] {
            let a = Tensor::from_fn(&[d, n], |i| -((i % n + 1) as f64) * (0.5 + rng.uniform()));
            let steps: Vec<f64> = (0..d).map(|_| (1e-3f64.ln() + 4.6 * rng.uniform()).exp()).collect();
            let b_row = randn(&mut rng, &[n])?;
            let c_row = randn(&mut rng, &[n])?;
            let delta = Tensor::from_fn(&[l, d], |i| steps[i % d]);
            let b = Tensor::from_fn(&[l, n], |i| b_row.data()[i % n]);
            let c = Tensor::from_fn(&[l, n], |i| c_row.data()[i % n]);
            let x = randn(&mut rng, &[l, d])?;
            let sys = ScanSystem {
                a: &a,
                delta: &delta,
                b: &b,
                c: &c,
                d_skip: None,
            };
            let y = linear_scan_with(&x, &sys, &o.zoh)?;
            for (ch, &step) in steps.iter().enumerate() {
                // kernel K_k = Σ_j c_j ā_j^k b̄_j, then causal convolution
                let (mut pow, mut k) = (vec![0.0; n], vec![0.0; l]);
                let mut a_bar = vec![0.0; n];
                for j in 0..n {
                    let (ab, bb) = zoh_reference(a.data()[ch * n + j], step, b_row.data()[j]);
                    a_bar[j] = ab;
                    pow[j] = bb;
                }
                for kk in k.iter_mut() {
                    *kk = (0..n).map(|j| c_row.data()[j] * pow[j]).sum();
                    for j in 0..n {
                        pow[j] *= a_bar[j];
                    }
                }
                for t in 0..l {
                    let conv: f64 = (0..=t).map(|s| k[t - s] * x.data()[s * d + ch]).sum();
                    worst = worst.max((y.data()[t * d + ch] - conv).abs());
                }
            }
        }
    }
    Ok(within(worst, 1e-10))
}

fn random_system(rng: &mut Rng, l: usize, d: usize, n: usize) -> Result<[Tensor; 5]> {
    Ok([
        rand_uniform(rng, &[d, n], -4.0, -0.05)?,
        rand_uniform(rng, &[l, d], 1e-3, 0.5)?,
        randn(rng, &[l, n])?,
        randn(rng, &[l, n])?,
        randn(rng, &[d])?,
    ])
}

fn scan_associative(o: &CheckOptions) -> Result<Outcome> {
    let mut rng = Rng::new(o.seed + 2);
    let [a, delta, b, c, s] = random_system(&mut rng, 64, 4, 16)?;
    let sys = ScanSystem {
        a: &a,
        delta: &delta,
        b: &b,
        c: &c,
        d_skip: Some(&s),
    };
    let x = randn(&mut rng, &[64, 4])?;
    let seq = linear_scan_with(&x, &sys, &o.zoh)?;
    let par = linear_scan_associative(&x, &sys)?;
    Ok(within(seq.max_abs_diff(&par)?, 1e-10))
}

fn scan_causality(o: &CheckOptions) -> Result<Outcome> {
    let mut rng = Rng::new(o.seed + 3);
    let mut p = SsmParams::init(&mut rng, 4, 8, 1)?;
    jitter(&mut p, &mut rng, 0.1);
    let x = randn(&mut rng, &[12, 4])?;
    let y = selective_scan_with(&x, &p, &o.zoh)?;
    let mut ok = true;
    for t in [0usize, 5, 11] {
        let mut probe = x.clone();
        for v in probe.row_mut(t) {
            *v += 1.0;
        }
        let yp = selective_scan_with(&probe, &p, &o.zoh)?;
        ok &= (0..t).all(|s| yp.row(s) == y.row(s));
        ok &= yp.row(t) != y.row(t);
    }
    Ok(exact(ok, "prefix unchanged"))
}

fn scan_stability(o: &CheckOptions) -> Result<Outcome> {
    let mut rng = Rng::new(o.seed + 4);
    let [a, delta, b, c, s] = random_system(&mut rng, 4096, 2, 16)?;
    let sys = ScanSystem {
        a: &a,
        delta: &delta,
        b: &b,
        c: &c,
        d_skip: Some(&s),
    };
    let y = linear_scan_with(&randn(&mut rng, &[4096, 2])?, &sys, &o.zoh)?;
    Ok(Outcome {
        passed: y.is_finite(),
        measured: format!("max |y| {:.2e}", y.max_abs()),
        tolerance: "finite".into(),
    })
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

const FD_STEP: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;
const GRAD_INSTANCES: u64 = 5;

fn grad_selective_scan(o: &CheckOptions) -> Result<Outcome> {
    let mut worst = 0.0f64;
    for k in 0..GRAD_INSTANCES {
        let mut rng = Rng::new(o.seed + 100 + k);
        let mut p = SsmParams::init(&mut rng, 2, 3, 1)?;
        jitter(&mut p, &mut rng, 0.2);
        let x = randn(&mut rng, &[4, 2])?;
        let w = randn(&mut rng, &[4, 2])?;
        let (gx, gp) = selective_scan_backward(&x, &p, &w)?;
        let fx = finite_diff_grad(|x| Ok(dot(&selective_scan_with(x, &p, &Zoh::default())?, &w)), &x, FD_STEP)?;
        let fp = finite_diff_grad(
            |flat| {
                let mut q = p.clone();
                q.assign_flat(flat)?;
                Ok(dot(&selective_scan_with(&x, &q, &Zoh::default())?, &w))
            },
            &p.flatten(),
            FD_STEP,
        )?;
        worst = worst.max(grad_rel_error(&gx, &fx)).max(grad_rel_error(&gp.flatten(), &fp));
    }
    Ok(within(worst, GRAD_TOL))
}

fn grad_block(o: &CheckOptions) -> Result<Outcome> {
    let dims = BlockDims {
        d_model: 4,
        state: 3,
        delta_rank: 1,
        conv_width: 4,
        adaln: true,
    };
    let mut worst = 0.0f64;
    for k in 0..GRAD_INSTANCES {
        let mut rng = Rng::new(o.seed + 200 + k);
        let mut p = DimBlockParams::init(&mut rng, &dims)?;
        jitter(&mut p, &mut rng, 0.2);
        let x = randn(&mut rng, &[4, 4])?;
        let c = randn(&mut rng, &[4])?;
        let w = randn(&mut rng, &[4, 4])?;
        let (gt, gc, gp) = dim_block_backward(&x, &c, &p, &w)?;
        let ft = finite_diff_grad(|x| Ok(dot(&dim_block_forward(x, &c, &p)?, &w)), &x, FD_STEP)?;
        let fc = finite_diff_grad(|c| Ok(dot(&dim_block_forward(&x, c, &p)?, &w)), &c, FD_STEP)?;
        let fp = finite_diff_grad(
            |flat| {
                let mut q = p.clone();
                q.assign_flat(flat)?;
                Ok(dot(&dim_block_forward(&x, &c, &q)?, &w))
            },
            &p.flatten(),
            FD_STEP,
        )?;
        worst = worst
            .max(grad_rel_error(&gt, &ft))
            .max(grad_rel_error(&gc, &fc))
            .max(grad_rel_error(&gp.flatten(), &fp));
    }
    Ok(within(worst, GRAD_TOL))
}

fn micro_model(seed: u64) -> Result<crate::model::DimModel> {
    let mut cfg = ModelConfig::micro(2, 8, 2, [1, 4, 4, 1], 3);
    cfg.ssm_state_n = 3;
    cfg.time_freq_dim = 8;
    let mut rng = Rng::new(seed);
    let mut m = build_model(&cfg, &mut rng)?;
    jitter(&mut m, &mut rng, 0.3);
    Ok(m)
}

fn grad_model(o: &CheckOptions) -> Result<Outcome> {
    let mut worst = 0.0f64;
    for k in 0..GRAD_INSTANCES {
        let m = micro_model(o.seed + 300 + k)?;
        let mut rng = Rng::new(o.seed + 350 + k);
        let z = randn(&mut rng, &[1, 4, 4, 1])?;
        let (t, y) = (1 + rng.below(1000), Some(rng.below(3)));
        let (out, cache) = m.forward_cached(&z, t, y)?;
        let mut grad = m.zeros_like();
        m.backward(&cache, &out.scale(2.0), &mut grad)?;
        let numeric = finite_diff_grad(
            |theta| {
                let mut probe = m.clone();
                probe.assign_flat(theta)?;
                Ok(probe.forward(&z, t, y)?.sum_sq())
            },
            &m.flatten(),
            FD_STEP,
        )?;
        worst = worst.max(grad_rel_error(&grad.flatten(), &numeric));
    }
    Ok(within(worst, GRAD_TOL))
}

fn grad_loss_simple(o: &CheckOptions) -> Result<Outcome> {
    let sched = make_schedule(1000, 1e-4, 0.02)?;
    let mut worst = 0.0f64;
    for k in 0..GRAD_INSTANCES {
        let m = micro_model(o.seed + 400 + k)?;
        let mut rng = Rng::new(o.seed + 450 + k);
        let z0 = randn(&mut rng, &[1, 4, 4, 1])?;
        let eps = randn(&mut rng, &[1, 4, 4, 1])?;
        let t = 1 + rng.below(1000);
        let y = (k % 2 == 0).then_some(1);
        let mut grad = m.zeros_like();
        loss_simple(&m, &sched, &z0, t, &eps, y, &mut grad)?;
        let numeric = finite_diff_grad(
            |theta| {
                let mut probe = m.clone();
                probe.assign_flat(theta)?;
                loss_simple_value(&probe, &sched, &z0, t, &eps, y)
            },
            &m.flatten(),
            FD_STEP,
        )?;
        worst = worst.max(grad_rel_error(&grad.flatten(), &numeric));
    }
    Ok(within(worst, GRAD_TOL))
}

fn ddpm_alpha_bar_recursion(_: &CheckOptions) -> Result<Outcome> {
    let sched = make_schedule(1000, 1e-4, 0.02)?;
    let mut ok = sched.alpha_bar(0)? == 1.0;
    for t in 1..=1000 {
        ok &= sched.alpha_bar(t)? == sched.alpha_bar(t - 1)? * (1.0 - sched.beta(t)?);
        ok &= sched.alpha_bar(t)? < sched.alpha_bar(t - 1)?;
        ok &= sched.posterior_var(t)? <= sched.beta(t)?;
    }
    Ok(exact(ok, "ᾱ_t = ᾱ_{t−1}·α_t"))
}

fn ddpm_marginal_monte_carlo(o: &CheckOptions) -> Result<Outcome> {
    let sched = make_schedule(1000, 1e-4, 0.02)?;
    let mut rng = Rng::new(o.seed + 5);
    let (n, z0) = (100_000usize, 0.7);
    let mut worst_sigma = 0.0f64;
    for t in [1usize, 25, 200] {
        let ab = sched.alpha_bar(t)?;
        let (mut s1, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let mut z = z0;
            for k in 1..=t {
                let b = sched.beta(k)?;
                z = (1.0 - b).sqrt() * z + b.sqrt() * rng.normal();
            }
            s1 += z;
            s2 += z * z;
        }
        let mean = s1 / n as f64;
        let var = s2 / n as f64 - mean * mean;
        let (mu, v) = (ab.sqrt() * z0, 1.0 - ab);
        let se_mean = (v / n as f64).sqrt();
        let se_var = v * (2.0 / n as f64).sqrt();
        let closed = q_sample_scalar(z0, t, &sched)?;
        worst_sigma = worst_sigma
            .max((mean - mu).abs() / se_mean)
            .max((var - v).abs() / se_var)
            .max((closed - mu).abs() / se_mean);
    }
    Ok(Outcome {
        passed: worst_sigma <= 4.0,
        measured: format!("worst {worst_sigma:.2} σ"),
        tolerance: "≤ 4 σ".into(),
    })
}

/// Mean of `q(z_t | z_0)` through the library path (zero noise).
fn q_sample_scalar(z0: f64, t: usize, sched: &crate::diffusion::NoiseSchedule) -> Result<f64> {
    let z = crate::diffusion::q_sample(&Tensor::vector(vec![z0]), t, &Tensor::zeros(&[1]), sched)?;
    Ok(z.data()[0])
}

fn ddpm_posterior_bayes(o: &CheckOptions) -> Result<Outcome> {
    let sched = make_schedule(1000, 1e-4, 0.02)?;
    let mut rng = Rng::new(o.seed + 6);
    let mut worst = 0.0f64;
    for t in [2usize, 3, 10, 100, 500, 999, 1000] {
        let (z0, zt) = (rng.normal(), rng.normal());
        let (ab_prev, a, b) = (sched.alpha_bar(t - 1)?, 1.0 - sched.beta(t)?, sched.beta(t)?);
        // prior z_{t−1} ~ N(√ᾱ_{t−1} z0, 1 − ᾱ_{t−1}); likelihood z_t ~ N(√α z_{t−1}, β)
        let precision = 1.0 / (1.0 - ab_prev) + a / b;
        let var = 1.0 / precision;
        let mean = var * (ab_prev.sqrt() * z0 / (1.0 - ab_prev) + a.sqrt() * zt / b);
        let (m, v) = posterior_params(&Tensor::vector(vec![zt]), &Tensor::vector(vec![z0]), t, &sched)?;
        worst = worst.max((m.data()[0] - mean).abs()).max((v - var).abs());
    }
    Ok(within(worst, 1e-12))
}

fn cfg_identities(o: &CheckOptions) -> Result<Outcome> {
    let mut rng = Rng::new(o.seed + 7);
    let c = randn(&mut rng, &[64])?;
    let u = randn(&mut rng, &[64])?;
    let ok = cfg_combine(&c, &u, 1.0)? == c
        && cfg_combine(&c, &u, 0.0)? == u
        && [0.0, 0.5, 1.5, 4.0].iter().all(|&s| cfg_combine(&c, &c, s).map(|r| r == c).unwrap_or(false));
    Ok(exact(ok, "s=1 → cond, s=0 → uncond"))
}

fn ema_closed_form(o: &CheckOptions) -> Result<Outcome> {
    let mut rng = Rng::new(o.seed + 8);
    let shadow0 = randn(&mut rng, &[32])?;
    let param = randn(&mut rng, &[32])?;
    let (d, k) = (0.9f64, 100);
    let mut ema = EmaState::new(&shadow0, d)?;
    for _ in 0..k {
        ema.update(&param)?;
    }
    let dk = d.powi(k);
    let expect = shadow0.zip_map(&param, |s, p| dk * s + (1.0 - dk) * p)?;
    Ok(within(ema.shadow.max_abs_diff(&expect)?, 1e-12))
}

fn patchify_roundtrip(o: &CheckOptions) -> Result<Outcome> {
    let mut rng = Rng::new(o.seed + 9);
    let mut ok = true;
    for (shape, p) in [
        ([1usize, 8, 8, 4], 2usize),
        ([1, 16, 8, 3], 4),
        ([1, 16, 16, 1], 8),
        ([8, 16, 16, 1], 2),
    ] {
        let z = randn(&mut rng, &shape)?;
        let grid = PatchGrid::for_latent(&shape, p)?;
        let tokens = patchify(&z, &grid)?;
        ok &= tokens.shape() == [grid.total_tokens(), p * p * shape[3]];
        ok &= depatchify(&tokens, &grid)? == z;
    }
    Ok(exact(ok, "bit-exact"))
}

fn checkpoint_roundtrip(o: &CheckOptions) -> Result<Outcome> {
    let m = micro_model(o.seed + 10)?;
    let mut rng = Rng::new(o.seed + 11);
    let mut v = m.zeros_like();
    jitter(&mut v, &mut rng, 1e-3);
    let ck = Checkpoint {
        manifest: Manifest {
            step: 7,
            config: RunConfig::parse("")?.to_text(),
            model: m.config.clone(),
            rng: rng.state(),
            data_kind: "latent".into(),
            ema_decay: Some(0.999),
            optimizer_step: 7,
        },
        ema: Some(m.clone()),
        moments: Some((m.zeros_like(), v)),
        model: m,
    };
    let bytes = encode_checkpoint(&ck)?;
    let back = decode_checkpoint(&bytes)?;
    Ok(exact(back == ck && encode_checkpoint(&back)? == bytes, "bit-exact"))
}

fn config_roundtrip(_: &CheckOptions) -> Result<Outcome> {
    let cfg = RunConfig::parse("[model]\nsize = B\npatch = 4\n[optimizer]\nlearning_rate = 3e-4\n[run]\nseed = 11\n")?;
    let text = cfg.to_text();
    let again = RunConfig::parse(&text)?;
    Ok(exact(again == cfg && again.to_text() == text, "fixed point"))
}

/// Reference parameter counts (millions) for S/4, B/4, L/4, XL/4.
pub const REFERENCE_PARAMS_M: [f64; 4] = [33.71, 134.37, 473.73, 673.82];

fn model_ladder_counts(_: &CheckOptions) -> Result<Outcome> {
    let mut worst = 0.0f64;
    let mut dims_ok = true;
    let mut counts = Vec::new();
    for ((tag, want), reference) in SizeTag::LADDER
        .iter()
        .zip([(16, 384), (16, 768), (32, 1024), (36, 1152)])
        .zip(REFERENCE_PARAMS_M)
    {
        let cfg = ModelConfig::preset(*tag, 4)?;
        dims_ok &= (cfg.layers, cfg.hidden_d) == want;
        let count = cfg.param_count() as f64 / 1e6;
        worst = worst.max((count / reference - 1.0).abs());
        counts.push(count);
    }
    let ratio = counts[2] / counts[1];
    let ratio_dev = (ratio / (473.73 / 134.37) - 1.0).abs();
    Ok(Outcome {
        passed: dims_ok && worst <= 0.15 && ratio_dev <= 0.10,
        measured: format!("max dev {:.1}%, L/B {ratio:.3}", 100.0 * worst),
        tolerance: "±15%, ratio ±10%".into(),
    })
}

fn flops_linear_scaling(_: &CheckOptions) -> Result<Outcome> {
    let mut ok = true;
    for (l, d) in [(256u64, 384u64), (1024, 1152), (4096, 768)] {
        ok &= flops_dim(4 * l, d, 16) == 4 * flops_dim(l, d, 16);
        ok &= flops_dim(l, 2 * d, 16) == 2 * flops_dim(l, d, 16);
    }
    let cfg = ModelConfig::preset(SizeTag::XL, 2)?;
    let grid = cfg.grid()?;
    let walk = count_config_ops(&cfg, &grid);
    let per_direction = (walk.term(TERM_STATE_UPDATE).unwrap_or(0) + walk.term(TERM_READOUT).unwrap_or(0) / 2) / 2;
    ok &= per_direction == cfg.layers as u128 * flops_dim(walk.l, cfg.hidden_d as u64, 16);
    let report = gflops_report(&[Arch::Dim], &cfg, &[256, 512, 1024, 2048])?;
    let ratios = report.ratios("dim").unwrap_or_default();
    let worst = ratios.iter().map(|r| (r - 4.0).abs()).fold(0.0, f64::max);
    Ok(Outcome {
        passed: ok && ratios.len() == 3 && worst <= 0.05,
        measured: format!("resolution ratio dev {worst:.3}"),
        tolerance: "f(4L)=4f(L), ratios 4±0.05".into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fresh_build_passes_every_check() {
        let report = run_checks(&CheckOptions::default());
        assert!(report.all_passed(), "{}", report.to_table());
        assert_eq!(report.results.len(), check_names().len());
        assert!(report.to_table().contains("scan_vs_kernel"));
    }

    #[test]
    fn corrupted_series_threshold_is_caught_by_name() {
        let opts = CheckOptions {
            zoh: Zoh { series_threshold: 1.0 },
            ..Default::default()
        };
        let r = scan_vs_kernel(&opts).unwrap();
        assert!(!r.passed, "{}", r.measured);
        assert!(scan_vs_kernel(&CheckOptions::default()).unwrap().passed);
    }
}
