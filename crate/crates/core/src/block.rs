//! Bidirectional selective-scan block.
//!
//! ```text
//! u        = LN(tokens)·(1 + scale) + shift
//! (v, g)   = in_proj(u)                          // D → 2·D_inner
//! y_f      = scan_f(silu(conv_f(v)))
//! y_b      = rev(scan_b(silu(conv_b(rev(v)))))
//! combined = ((1 + w_f)⊙y_f + (1 + w_b)⊙y_b) ⊙ silu(g)
//! out      = tokens + (1 + gate)⊙out_proj(combined)
//! ```
//!
//! `(shift, scale, gate, w_f, w_b)` come from `cond_mod(silu(cond))`, which is
//! zero-initialized together with `out_proj`, so a fresh block is the
//! identity and conditioning starts as a no-op.

use crate::error::{ensure_shape, invalid, Result};
use crate::layers::{CausalConv, Linear};
use crate::numerics::ops::{layer_norm, layer_norm_backward, silu_grad_scalar, silu_scalar, LayerNormCache};
use crate::numerics::{Rng, Tensor};
use crate::params::{join, ParamSet};
use crate::ssm::{
    selective_scan, selective_scan_backward_cached, selective_scan_cached, SelectiveCache, SsmParams,
};

/// Shape hyper-parameters of one block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockDims {
    pub d_model: usize,
    pub state: usize,
    pub delta_rank: usize,
    pub conv_width: usize,
    /// Adaptive-norm conditioning; when false the block ignores `cond`.
    pub adaln: bool,
}

impl BlockDims {
    pub fn d_inner(&self) -> usize {
        2 * self.d_model
    }

    /// Width of the modulation vector: shift, scale, gate (`D` each) and the
    /// two direction weights (`D_inner` each).
    pub fn mod_width(&self) -> usize {
        3 * self.d_model + 2 * self.d_inner()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DimBlockParams {
    pub in_proj: Linear,
    pub conv_fwd: CausalConv,
    pub conv_bwd: CausalConv,
    pub ssm_fwd: SsmParams,
    pub ssm_bwd: SsmParams,
    pub out_proj: Linear,
    pub cond_mod: Option<Linear>,
}

impl DimBlockParams {
    pub fn init(rng: &mut Rng, dims: &BlockDims) -> Result<Self> {
        let (d, di) = (dims.d_model, dims.d_inner());
        if d == 0 || dims.conv_width == 0 {
            return Err(invalid("block width and conv width must be positive"));
        }
        Ok(Self {
            in_proj: Linear::init(rng, d, 2 * di, false)?,
            conv_fwd: CausalConv::init(rng, di, dims.conv_width)?,
            conv_bwd: CausalConv::init(rng, di, dims.conv_width)?,
            ssm_fwd: SsmParams::init(rng, di, dims.state, dims.delta_rank)?,
            ssm_bwd: SsmParams::init(rng, di, dims.state, dims.delta_rank)?,
            out_proj: Linear::zeros(di, d, false),
            cond_mod: dims.adaln.then(|| Linear::zeros(d, dims.mod_width(), true)),
        })
    }

    pub fn d_model(&self) -> usize {
        self.in_proj.in_dim()
    }

    pub fn d_inner(&self) -> usize {
        self.out_proj.in_dim()
    }

    /// Copies every forward-direction parameter onto its backward twin
    /// (convolution, SSM and the direction weight rows of `cond_mod`).
    pub fn mirror_directions(&mut self) {
        self.conv_bwd = self.conv_fwd.clone();
        self.ssm_bwd = self.ssm_fwd.clone();
        let (d, di) = (self.d_model(), self.d_inner());
        if let Some(cm) = self.cond_mod.as_mut() {
            let cols = cm.in_dim();
            let w = cm.weight.data_mut();
            w.copy_within(3 * d * cols..(3 * d + di) * cols, (3 * d + di) * cols);
            if let Some(b) = cm.bias.as_mut() {
                b.data_mut().copy_within(3 * d..3 * d + di, 3 * d + di);
            }
        }
    }
}

impl ParamSet for DimBlockParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.in_proj.visit(&join(prefix, "in_proj"), f);
        self.conv_fwd.visit(&join(prefix, "conv_fwd"), f);
        self.conv_bwd.visit(&join(prefix, "conv_bwd"), f);
        self.ssm_fwd.visit(&join(prefix, "ssm_fwd"), f);
        self.ssm_bwd.visit(&join(prefix, "ssm_bwd"), f);
        self.out_proj.visit(&join(prefix, "out_proj"), f);
        if let Some(cm) = &self.cond_mod {
            cm.visit(&join(prefix, "cond_mod"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.in_proj.visit_mut(&join(prefix, "in_proj"), f);
        self.conv_fwd.visit_mut(&join(prefix, "conv_fwd"), f);
        self.conv_bwd.visit_mut(&join(prefix, "conv_bwd"), f);
        self.ssm_fwd.visit_mut(&join(prefix, "ssm_fwd"), f);
        self.ssm_bwd.visit_mut(&join(prefix, "ssm_bwd"), f);
        self.out_proj.visit_mut(&join(prefix, "out_proj"), f);
        if let Some(cm) = &mut self.cond_mod {
            cm.visit_mut(&join(prefix, "cond_mod"), f);
        }
    }
}

/// Intermediates of one forward pass.
#[derive(Clone, Debug)]
pub struct BlockCache {
    tokens_shape: Vec<usize>,
    cond: Tensor,
    cond_act: Tensor,
    modulation: Vec<f64>,
    ln: LayerNormCache,
    u: Tensor,
    v: Tensor,
    g: Tensor,
    v_rev: Tensor,
    conv_f: Tensor,
    conv_b: Tensor,
    scan_f: SelectiveCache,
    scan_b: SelectiveCache,
    y_f: Tensor,
    y_b: Tensor,
    sum: Tensor,
    combined: Tensor,
    o: Tensor,
}

fn modulation(params: &DimBlockParams, cond: &Tensor) -> Result<(Tensor, Vec<f64>)> {
    let d = params.d_model();
    ensure_shape("block cond", &[d], cond.shape())?;
    cond.ensure_finite("block conditioning vector")?;
    let act = cond.map(silu_scalar).reshape(&[1, d])?;
    let m = match &params.cond_mod {
        Some(cm) => cm.forward(&act)?.into_data(),
        None => vec![0.0; 3 * d + 2 * params.d_inner()],
    };
    Ok((act, m))
}

fn split_halves(vg: &Tensor, di: usize) -> Result<(Tensor, Tensor)> {
    let l = vg.rows();
    let mut v = Vec::with_capacity(l * di);
    let mut g = Vec::with_capacity(l * di);
    for r in 0..l {
        let row = vg.row(r);
        v.extend_from_slice(&row[..di]);
        g.extend_from_slice(&row[di..]);
    }
    Ok((Tensor::new(vec![l, di], v)?, Tensor::new(vec![l, di], g)?))
}

fn forward_impl(
    tokens: &Tensor,
    cond: &Tensor,
    params: &DimBlockParams,
    taped: bool,
) -> Result<(Tensor, Option<BlockCache>)> {
    let (d, di) = (params.d_model(), params.d_inner());
    if tokens.rank() != 2 || tokens.rows() == 0 {
        return Err(invalid("block input must be a non-empty [L × D] sequence"));
    }
    ensure_shape("block tokens", &[d], &[tokens.cols()])?;
    let (cond_act, m) = modulation(params, cond)?;
    let (shift, rest) = m.split_at(d);
    let (scale, rest) = rest.split_at(d);
    let (gate, rest) = rest.split_at(d);
    let (w_f, w_b) = rest.split_at(di);

    let ln = layer_norm(tokens);
    let mut u = ln.normalized.clone();
    for r in 0..u.rows() {
        for (j, x) in u.row_mut(r).iter_mut().enumerate() {
            *x = *x * (1.0 + scale[j]) + shift[j];
        }
    }
    let vg = params.in_proj.forward(&u)?;
    let (v, g) = split_halves(&vg, di)?;

    let conv_f = params.conv_fwd.forward(&v)?;
    let v_rev = v.reverse_rows();
    let conv_b = params.conv_bwd.forward(&v_rev)?;
    let (y_f, y_b_rev, scans) = if taped {
        let (y_f, scan_f) = selective_scan_cached(&conv_f.map(silu_scalar), &params.ssm_fwd)?;
        let (y_b_rev, scan_b) = selective_scan_cached(&conv_b.map(silu_scalar), &params.ssm_bwd)?;
        (y_f, y_b_rev, Some((scan_f, scan_b)))
    } else {
        let y_f = selective_scan(&conv_f.map(silu_scalar), &params.ssm_fwd)?;
        let y_b_rev = selective_scan(&conv_b.map(silu_scalar), &params.ssm_bwd)?;
        (y_f, y_b_rev, None)
    };
    let y_b = y_b_rev.reverse_rows();

    let mut sum = y_f.clone();
    let mut combined = y_f.clone();
    for r in 0..sum.rows() {
        let (yf, yb, gr) = (y_f.row(r), y_b.row(r), g.row(r));
        let srow = sum.row_mut(r);
        for j in 0..di {
            srow[j] = (1.0 + w_f[j]) * yf[j] + (1.0 + w_b[j]) * yb[j];
        }
        let crow = combined.row_mut(r);
        for j in 0..di {
            crow[j] = sum.data()[r * di + j] * silu_scalar(gr[j]);
        }
    }
    let o = params.out_proj.forward(&combined)?;
    let mut out = tokens.clone();
    for r in 0..out.rows() {
        let orow = o.row(r);
        for (j, x) in out.row_mut(r).iter_mut().enumerate() {
            *x += (1.0 + gate[j]) * orow[j];
        }
    }
    out.ensure_finite("block forward")?;
    let Some((scan_f, scan_b)) = scans else {
        return Ok((out, None));
    };
    let cache = BlockCache {
        tokens_shape: tokens.shape().to_vec(),
        cond: cond.clone(),
        cond_act,
        modulation: m,
        ln,
        u,
        v,
        g,
        v_rev,
        conv_f,
        conv_b,
        scan_f,
        scan_b,
        y_f,
        y_b,
        sum,
        combined,
        o,
    };
    Ok((out, Some(cache)))
}

/// Applies one block to `tokens: [L × D]` under conditioning `cond: [D]`.
pub fn dim_block_forward(tokens: &Tensor, cond: &Tensor, params: &DimBlockParams) -> Result<Tensor> {
    Ok(forward_impl(tokens, cond, params, false)?.0)
}

pub fn dim_block_forward_cached(
    tokens: &Tensor,
    cond: &Tensor,
    params: &DimBlockParams,
) -> Result<(Tensor, BlockCache)> {
    let (out, cache) = forward_impl(tokens, cond, params, true)?;
    Ok((out, cache.expect("taped forward")))
}

fn col_sums_of_product(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let c = a.cols();
    let mut out = vec![0.0; c];
    for (chunk_a, chunk_b) in a.data().chunks(c).zip(b.data().chunks(c)) {
        for j in 0..c {
            out[j] += chunk_a[j] * chunk_b[j];
        }
    }
    out
}

/// Adjoint from a cached forward. Parameter gradients accumulate into
/// `grad`; returns `(∂/∂tokens, ∂/∂cond)`.
pub fn dim_block_backward_cached(
    cache: &BlockCache,
    params: &DimBlockParams,
    grad_out: &Tensor,
    grad: &mut DimBlockParams,
) -> Result<(Tensor, Tensor)> {
    ensure_shape("block backward", &cache.tokens_shape, grad_out.shape())?;
    let (d, di) = (params.d_model(), params.d_inner());
    let m = &cache.modulation;
    let (scale, gate) = (&m[d..2 * d], &m[2 * d..3 * d]);
    let (w_f, w_b) = (&m[3 * d..3 * d + di], &m[3 * d + di..]);
    let l = grad_out.rows();

    let mut g_tokens = grad_out.clone();
    let mut g_o = grad_out.clone();
    for r in 0..l {
        for (j, x) in g_o.row_mut(r).iter_mut().enumerate() {
            *x *= 1.0 + gate[j];
        }
    }
    let g_gate = col_sums_of_product(grad_out, &cache.o);
    let g_comb = params.out_proj.backward(&cache.combined, &g_o, &mut grad.out_proj)?;

    let mut g_sum = g_comb.clone();
    let mut g_vg = Tensor::zeros(&[l, 2 * di]);
    for r in 0..l {
        let (gc, s, gr) = (g_comb.row(r), cache.sum.row(r), cache.g.row(r));
        let gsr = g_sum.row_mut(r);
        for j in 0..di {
            gsr[j] = gc[j] * silu_scalar(gr[j]);
        }
        let gvg = g_vg.row_mut(r);
        for j in 0..di {
            gvg[di + j] = gc[j] * s[j] * silu_grad_scalar(gr[j]);
        }
    }
    let g_wf = col_sums_of_product(&g_sum, &cache.y_f);
    let g_wb = col_sums_of_product(&g_sum, &cache.y_b);
    let mut g_yf = g_sum.clone();
    let mut g_yb = g_sum;
    for r in 0..l {
        for (j, x) in g_yf.row_mut(r).iter_mut().enumerate() {
            *x *= 1.0 + w_f[j];
        }
        for (j, x) in g_yb.row_mut(r).iter_mut().enumerate() {
            *x *= 1.0 + w_b[j];
        }
    }

    let g_sf = selective_scan_backward_cached(&cache.scan_f, &params.ssm_fwd, &g_yf, &mut grad.ssm_fwd)?;
    let g_cf = g_sf.zip_map(&cache.conv_f, |g, x| g * silu_grad_scalar(x))?;
    let g_v = params.conv_fwd.backward(&cache.v, &g_cf, &mut grad.conv_fwd)?;

    let g_sb = selective_scan_backward_cached(
        &cache.scan_b,
        &params.ssm_bwd,
        &g_yb.reverse_rows(),
        &mut grad.ssm_bwd,
    )?;
    let g_cb = g_sb.zip_map(&cache.conv_b, |g, x| g * silu_grad_scalar(x))?;
    let g_v_rev = params.conv_bwd.backward(&cache.v_rev, &g_cb, &mut grad.conv_bwd)?;
    let g_v = g_v.add(&g_v_rev.reverse_rows())?;
    for r in 0..l {
        g_vg.row_mut(r)[..di].copy_from_slice(g_v.row(r));
    }

    let g_u = params.in_proj.backward(&cache.u, &g_vg, &mut grad.in_proj)?;
    let g_shift: Vec<f64> = {
        let mut s = vec![0.0; d];
        for r in 0..l {
            for (acc, v) in s.iter_mut().zip(g_u.row(r)) {
                *acc += v;
            }
        }
        s
    };
    let g_scale = col_sums_of_product(&g_u, &cache.ln.normalized);
    let mut g_n = g_u;
    for r in 0..l {
        for (j, x) in g_n.row_mut(r).iter_mut().enumerate() {
            *x *= 1.0 + scale[j];
        }
    }
    g_tokens.axpy(1.0, &layer_norm_backward(&cache.ln, &g_n))?;

    let g_cond = match (&params.cond_mod, grad.cond_mod.as_mut()) {
        (Some(cm), Some(gcm)) => {
            let mut gm = Vec::with_capacity(m.len());
            gm.extend_from_slice(&g_shift);
            gm.extend_from_slice(&g_scale);
            gm.extend_from_slice(&g_gate);
            gm.extend_from_slice(&g_wf);
            gm.extend_from_slice(&g_wb);
            let gm = Tensor::new(vec![1, m.len()], gm)?;
            let g_act = cm.backward(&cache.cond_act, &gm, gcm)?;
            Tensor::vector(
                g_act
                    .data()
                    .iter()
                    .zip(cache.cond.data())
                    .map(|(g, &c)| g * silu_grad_scalar(c))
                    .collect(),
            )
        }
        _ => Tensor::zeros(&[d]),
    };
    Ok((g_tokens, g_cond))
}

/// Exact adjoint of [`dim_block_forward`]: `(∂/∂tokens, ∂/∂cond, ∂/∂params)`.
pub fn dim_block_backward(
    tokens: &Tensor,
    cond: &Tensor,
    params: &DimBlockParams,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, DimBlockParams)> {
    let (_, cache) = dim_block_forward_cached(tokens, cond, params)?;
    let mut grad = params.zeros_like();
    let (gt, gc) = dim_block_backward_cached(&cache, params, grad_out, &mut grad)?;
    Ok((gt, gc, grad))
}
