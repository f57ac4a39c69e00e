//! The full noise-prediction network.
//!
//! `z_t → patchify → patch_embed + positions (+ conditioning token) →
//! blocks → adaptive final norm → head → depatchify`. The conditioning
//! vector is `time_mlp(sincos(t)) + class_table[y]`; row `num_classes` of the
//! table is the null label used for unconditional prediction.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::block::{dim_block_backward_cached, dim_block_forward, dim_block_forward_cached, BlockCache, BlockDims, DimBlockParams};
use crate::error::{ensure_shape, invalid, Result};
use crate::layers::Linear;
use crate::numerics::ops::{layer_norm, layer_norm_backward, silu_grad_scalar, silu_scalar, LayerNormCache};
use crate::numerics::{randn_scaled, Rng, Tensor};
use crate::params::{join, ParamSet};
use crate::patchify::{depatchify, embed_tokens, patchify, position_table, PatchGrid};
use crate::ssm::default_delta_rank;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SizeTag {
    S,
    B,
    L,
    XL,
    /// Free `(layers, hidden_d)`; used for desk-scale models.
    Custom,
}

impl SizeTag {
    pub const LADDER: [SizeTag; 4] = [SizeTag::S, SizeTag::B, SizeTag::L, SizeTag::XL];

    /// `(layers, hidden_d)` of a ladder size.
    pub fn dims(self) -> Option<(usize, usize)> {
        match self {
            SizeTag::S => Some((16, 384)),
            SizeTag::B => Some((16, 768)),
            SizeTag::L => Some((32, 1024)),
            SizeTag::XL => Some((36, 1152)),
            SizeTag::Custom => None,
        }
    }
}

impl fmt::Display for SizeTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SizeTag::S => "S",
            SizeTag::B => "B",
            SizeTag::L => "L",
            SizeTag::XL => "XL",
            SizeTag::Custom => "custom",
        };
        f.write_str(s)
    }
}

impl FromStr for SizeTag {
    type Err = crate::DimError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "S" => Ok(SizeTag::S),
            "B" => Ok(SizeTag::B),
            "L" => Ok(SizeTag::L),
            "XL" => Ok(SizeTag::XL),
            "CUSTOM" => Ok(SizeTag::Custom),
            _ => Err(invalid(format!("unknown model size '{s}' (expected S, B, L, XL or custom)"))),
        }
    }
}

pub const VALID_PATCHES: [usize; 3] = [2, 4, 8];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub size_tag: SizeTag,
    pub layers: usize,
    pub hidden_d: usize,
    pub patch: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    /// 1 for images.
    pub frames: usize,
    pub latent_height: usize,
    pub latent_width: usize,
    pub ssm_state_n: usize,
    /// 0 selects `ceil(2·hidden_d / 16)`.
    pub delta_rank: usize,
    pub conv_width: usize,
    /// Number of diffusion steps; valid timesteps are `1..=timesteps`.
    pub timesteps: usize,
    pub time_freq_dim: usize,
    /// Prepend the conditioning vector as token 0.
    pub class_token: bool,
    /// Adaptive-norm conditioning inside blocks and the final layer.
    pub adaln: bool,
}

impl ModelConfig {
    /// Ladder size with 256×256 images seen through an 8× latent encoder.
    pub fn preset(tag: SizeTag, patch: usize) -> Result<Self> {
        let (layers, hidden_d) = tag
            .dims()
            .ok_or_else(|| invalid("custom size has no preset dimensions"))?;
        let cfg = Self {
            size_tag: tag,
            layers,
            hidden_d,
            patch,
            in_channels: 4,
            num_classes: 1000,
            frames: 1,
            latent_height: 32,
            latent_width: 32,
            ssm_state_n: 16,
            delta_rank: 0,
            conv_width: 4,
            timesteps: 1000,
            time_freq_dim: 256,
            class_token: true,
            adaln: true,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Small custom model for tests and desk-scale runs.
    pub fn micro(layers: usize, hidden_d: usize, patch: usize, latent: [usize; 4], num_classes: usize) -> Self {
        let [frames, h, w, c] = latent;
        Self {
            size_tag: SizeTag::Custom,
            layers,
            hidden_d,
            patch,
            in_channels: c,
            num_classes,
            frames,
            latent_height: h,
            latent_width: w,
            ssm_state_n: 16,
            delta_rank: 0,
            conv_width: 4,
            timesteps: 1000,
            time_freq_dim: 32,
            class_token: true,
            adaln: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some((layers, d)) = self.size_tag.dims() {
            if (self.layers, self.hidden_d) != (layers, d) {
                return Err(invalid(format!(
                    "size {} requires {layers} layers of width {d}, got {} × {}",
                    self.size_tag, self.layers, self.hidden_d
                )));
            }
        }
        if !VALID_PATCHES.contains(&self.patch) {
            return Err(invalid(format!("patch size {} is not one of 2, 4, 8", self.patch)));
        }
        if self.layers == 0 || self.hidden_d == 0 || !self.hidden_d.is_multiple_of(4) {
            return Err(invalid("need at least one layer and a hidden width divisible by 4"));
        }
        if self.in_channels == 0 || self.ssm_state_n == 0 || self.conv_width == 0 || self.timesteps == 0 {
            return Err(invalid("channels, state size, conv width and timesteps must be positive"));
        }
        if self.time_freq_dim == 0 || !self.time_freq_dim.is_multiple_of(2) {
            return Err(invalid("time frequency width must be a positive even number"));
        }
        if !self.class_token && !self.adaln {
            return Err(invalid("at least one of class_token and adaln must be enabled"));
        }
        PatchGrid::new(self.frames, self.latent_height, self.latent_width, self.in_channels, self.patch)?;
        Ok(())
    }

    pub fn d_inner(&self) -> usize {
        2 * self.hidden_d
    }

    pub fn effective_delta_rank(&self) -> usize {
        if self.delta_rank == 0 {
            default_delta_rank(self.d_inner())
        } else {
            self.delta_rank
        }
    }

    pub fn block_dims(&self) -> BlockDims {
        BlockDims {
            d_model: self.hidden_d,
            state: self.ssm_state_n,
            delta_rank: self.effective_delta_rank(),
            conv_width: self.conv_width,
            adaln: self.adaln,
        }
    }

    pub fn grid(&self) -> Result<PatchGrid> {
        PatchGrid::new(self.frames, self.latent_height, self.latent_width, self.in_channels, self.patch)
    }

    pub fn latent_shape(&self) -> [usize; 4] {
        [self.frames, self.latent_height, self.latent_width, self.in_channels]
    }

    pub fn token_dim(&self) -> usize {
        self.patch * self.patch * self.in_channels
    }

    /// Parameter names and shapes in visit order, without allocating weights.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, di, n) = (self.hidden_d, self.d_inner(), self.ssm_state_n);
        let (r, k, f, p) = (self.effective_delta_rank(), self.conv_width, self.time_freq_dim, self.token_dim());
        let mut out = Vec::new();
        let mut push = |name: String, shape: &[usize]| out.push((name, shape.to_vec()));
        let linear = |push: &mut dyn FnMut(String, &[usize]), name: &str, i: usize, o: usize, bias: bool| {
            push(join(name, "weight"), &[o, i]);
            if bias {
                push(join(name, "bias"), &[o]);
            }
        };
        linear(&mut push, "patch_embed", p, d, true);
        linear(&mut push, "time_in", f, d, true);
        linear(&mut push, "time_out", d, d, true);
        push("class_table".into(), &[self.num_classes + 1, d]);
        let mod_width = self.block_dims().mod_width();
        for b in 0..self.layers {
            let pre = format!("blocks.{b}");
            linear(&mut push, &join(&pre, "in_proj"), d, 2 * di, false);
            for conv in ["conv_fwd", "conv_bwd"] {
                push(join(&join(&pre, conv), "weight"), &[di, k]);
                push(join(&join(&pre, conv), "bias"), &[di]);
            }
            for ssm in ["ssm_fwd", "ssm_bwd"] {
                let s = join(&pre, ssm);
                push(join(&s, "a_log"), &[di, n]);
                push(join(&s, "d_skip"), &[di]);
                linear(&mut push, &join(&s, "x_proj"), di, r + 2 * n, false);
                linear(&mut push, &join(&s, "delta_proj"), r, di, true);
            }
            linear(&mut push, &join(&pre, "out_proj"), di, d, false);
            if self.adaln {
                linear(&mut push, &join(&pre, "cond_mod"), d, mod_width, true);
            }
        }
        if self.adaln {
            linear(&mut push, "final_mod", d, 2 * d, true);
        }
        linear(&mut push, "head", d, p, true);
        out
    }

    /// Exact scalar parameter count of [`build_model`]'s output.
    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DimModel {
    pub config: ModelConfig,
    pub patch_embed: Linear,
    pub time_in: Linear,
    pub time_out: Linear,
    /// `[(num_classes + 1) × D]`, last row is the null label.
    pub class_table: Tensor,
    pub blocks: Vec<DimBlockParams>,
    pub final_mod: Option<Linear>,
    pub head: Linear,
}

pub fn build_model(cfg: &ModelConfig, rng: &mut Rng) -> Result<DimModel> {
    cfg.validate()?;
    let d = cfg.hidden_d;
    let patch_embed = Linear::init(rng, cfg.token_dim(), d, true)?;
    let time_in = Linear::init(rng, cfg.time_freq_dim, d, true)?;
    let time_out = Linear::init(rng, d, d, true)?;
    let class_table = randn_scaled(rng, &[cfg.num_classes + 1, d], 0.02)?;
    let dims = cfg.block_dims();
    let blocks = (0..cfg.layers)
        .map(|_| DimBlockParams::init(rng, &dims))
        .collect::<Result<Vec<_>>>()?;
    Ok(DimModel {
        config: cfg.clone(),
        patch_embed,
        time_in,
        time_out,
        class_table,
        blocks,
        final_mod: cfg.adaln.then(|| Linear::zeros(d, 2 * d, true)),
        head: Linear::zeros(d, cfg.token_dim(), true),
    })
}

/// `[cos(t·ω₀) … cos(t·ω_{F/2−1}), sin(t·ω₀) … ]` with `ωᵢ = 10000^{−i/(F/2)}`.
pub fn timestep_embedding(t: f64, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let (s, c) = (t * freq).sin_cos();
        out[i] = c;
        out[half + i] = s;
    }
    Tensor::vector(out)
}

/// Anything that predicts the noise in `z_t`.
pub trait Denoiser {
    fn predict_eps(&self, z: &Tensor, t: usize, y: Option<usize>) -> Result<Tensor>;
}

impl Denoiser for DimModel {
    fn predict_eps(&self, z: &Tensor, t: usize, y: Option<usize>) -> Result<Tensor> {
        self.forward(z, t, y)
    }
}

/// Intermediates of [`DimModel::forward_cached`].
#[derive(Clone, Debug)]
pub struct ModelCache {
    grid: PatchGrid,
    patches: Tensor,
    label: usize,
    t_freq: Tensor,
    t_pre: Tensor,
    t_act: Tensor,
    cond: Tensor,
    cond_act: Tensor,
    blocks: Vec<BlockCache>,
    ln: LayerNormCache,
    final_modulation: Vec<f64>,
    modulated: Tensor,
}

struct Conditioning {
    label: usize,
    t_freq: Tensor,
    t_pre: Tensor,
    t_act: Tensor,
    cond: Tensor,
}

impl DimModel {
    pub fn d_model(&self) -> usize {
        self.config.hidden_d
    }

    pub fn null_label(&self) -> usize {
        self.config.num_classes
    }

    fn conditioning(&self, t: usize, y: Option<usize>) -> Result<Conditioning> {
        let cfg = &self.config;
        if t == 0 || t > cfg.timesteps {
            return Err(invalid(format!("timestep {t} outside 1..={}", cfg.timesteps)));
        }
        let label = match y {
            Some(y) if y >= cfg.num_classes => {
                return Err(invalid(format!("class label {y} outside 0..{}", cfg.num_classes)))
            }
            Some(y) => y,
            None => cfg.num_classes,
        };
        let t_freq = timestep_embedding(t as f64, cfg.time_freq_dim);
        let t_pre = self.time_in.forward(&t_freq)?;
        let t_act = t_pre.map(silu_scalar);
        let mut cond = self.time_out.forward(&t_act)?.reshape(&[cfg.hidden_d])?;
        for (c, e) in cond.data_mut().iter_mut().zip(self.class_table.row(label)) {
            *c += e;
        }
        Ok(Conditioning {
            label,
            t_freq,
            t_pre,
            t_act,
            cond,
        })
    }

    fn embed(&self, z: &Tensor, cond: &Tensor) -> Result<(PatchGrid, Tensor, Tensor)> {
        if z.rank() != 4 {
            return Err(invalid(format!("latent must be [T × H × W × C], got {:?}", z.shape())));
        }
        let grid = PatchGrid::for_latent(z.shape(), self.config.patch)?;
        ensure_shape("latent channels", &[self.config.in_channels], &[grid.channels])?;
        z.ensure_finite("model input")?;
        let patches = patchify(z, &grid)?;
        let pos = position_table(&grid, self.d_model())?;
        let class_tok = self.config.class_token.then_some(cond);
        let x = embed_tokens(&patches, &self.patch_embed, &pos, class_tok)?;
        Ok((grid, patches, x))
    }

    fn final_modulation(&self, cond: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        let d = self.d_model();
        let act = cond.map(silu_scalar).reshape(&[1, d])?;
        let m = match &self.final_mod {
            Some(fm) => fm.forward(&act)?.into_data(),
            None => vec![0.0; 2 * d],
        };
        Ok((act, m))
    }

    fn body_rows(&self, x: Tensor) -> Result<Tensor> {
        if !self.config.class_token {
            return Ok(x);
        }
        let (l, d) = (x.rows() - 1, x.cols());
        Tensor::new(vec![l, d], x.into_data().split_off(d))
    }

    fn head_out(&self, x: Tensor, cond: &Tensor) -> Result<(LayerNormCache, Tensor, Vec<f64>, Tensor)> {
        let body = self.body_rows(x)?;
        let (cond_act, m) = self.final_modulation(cond)?;
        let d = self.d_model();
        let ln = layer_norm(&body);
        let mut modulated = ln.normalized.clone();
        for r in 0..modulated.rows() {
            for (j, v) in modulated.row_mut(r).iter_mut().enumerate() {
                *v = *v * (1.0 + m[d + j]) + m[j];
            }
        }
        Ok((ln, modulated, m, cond_act))
    }

    /// Predicted noise, same shape as `z`.
    pub fn forward(&self, z: &Tensor, t: usize, y: Option<usize>) -> Result<Tensor> {
        let c = self.conditioning(t, y)?;
        let (grid, _, mut x) = self.embed(z, &c.cond)?;
        for block in &self.blocks {
            x = dim_block_forward(&x, &c.cond, block)?;
        }
        let (_, modulated, _, _) = self.head_out(x, &c.cond)?;
        depatchify(&self.head.forward(&modulated)?, &grid)
    }

    pub fn forward_cached(&self, z: &Tensor, t: usize, y: Option<usize>) -> Result<(Tensor, ModelCache)> {
        let c = self.conditioning(t, y)?;
        let (grid, patches, mut x) = self.embed(z, &c.cond)?;
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (next, cache) = dim_block_forward_cached(&x, &c.cond, block)?;
            caches.push(cache);
            x = next;
        }
        let (ln, modulated, final_modulation, cond_act) = self.head_out(x, &c.cond)?;
        let out = depatchify(&self.head.forward(&modulated)?, &grid)?;
        let cache = ModelCache {
            grid,
            patches,
            label: c.label,
            t_freq: c.t_freq,
            t_pre: c.t_pre,
            t_act: c.t_act,
            cond: c.cond,
            cond_act,
            blocks: caches,
            ln,
            final_modulation,
            modulated,
        };
        Ok((out, cache))
    }

    /// Accumulates `∂(⟨grad_out, forward⟩)/∂θ` into `grad`.
    pub fn backward(&self, cache: &ModelCache, grad_out: &Tensor, grad: &mut DimModel) -> Result<()> {
        let d = self.d_model();
        let g_tokens = patchify(grad_out, &cache.grid)?;
        let g_mod = self.head.backward(&cache.modulated, &g_tokens, &mut grad.head)?;

        let m = &cache.final_modulation;
        let mut g_fm = vec![0.0; 2 * d];
        let mut g_ln = g_mod.clone();
        for r in 0..g_mod.rows() {
            let (gm, n) = (g_mod.row(r), cache.ln.normalized.row(r));
            for j in 0..d {
                g_fm[j] += gm[j];
                g_fm[d + j] += gm[j] * n[j];
            }
            for (j, g) in g_ln.row_mut(r).iter_mut().enumerate() {
                *g *= 1.0 + m[d + j];
            }
        }
        let g_body = layer_norm_backward(&cache.ln, &g_ln);

        let mut g_cond = vec![0.0; d];
        if let (Some(fm), Some(gfm)) = (&self.final_mod, grad.final_mod.as_mut()) {
            let g_act = fm.backward(&cache.cond_act, &Tensor::new(vec![1, 2 * d], g_fm)?, gfm)?;
            for (j, g) in g_cond.iter_mut().enumerate() {
                *g += g_act.data()[j] * silu_grad_scalar(cache.cond.data()[j]);
            }
        }

        let mut g_x = if self.config.class_token {
            let mut data = vec![0.0; d];
            data.extend_from_slice(g_body.data());
            Tensor::new(vec![g_body.rows() + 1, d], data)?
        } else {
            g_body
        };
        for ((block, bcache), bgrad) in self.blocks.iter().zip(&cache.blocks).zip(grad.blocks.iter_mut()).rev() {
            let (gt, gc) = dim_block_backward_cached(bcache, block, &g_x, bgrad)?;
            g_x = gt;
            g_cond.iter_mut().zip(gc.data()).for_each(|(a, b)| *a += b);
        }

        let g_proj = if self.config.class_token {
            g_cond.iter_mut().zip(g_x.row(0)).for_each(|(a, b)| *a += b);
            self.body_rows(g_x)?
        } else {
            g_x
        };
        self.patch_embed.backward(&cache.patches, &g_proj, &mut grad.patch_embed)?;

        for (a, b) in grad.class_table.row_mut(cache.label).iter_mut().zip(&g_cond) {
            *a += b;
        }
        let g_cond = Tensor::new(vec![1, d], g_cond)?;
        let g_act = self.time_out.backward(&cache.t_act, &g_cond, &mut grad.time_out)?;
        let g_pre = g_act.zip_map(&cache.t_pre, |g, x| g * silu_grad_scalar(x))?;
        self.time_in.backward(&cache.t_freq, &g_pre, &mut grad.time_in)?;
        Ok(())
    }
}

impl ParamSet for DimModel {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.patch_embed.visit(&join(prefix, "patch_embed"), f);
        self.time_in.visit(&join(prefix, "time_in"), f);
        self.time_out.visit(&join(prefix, "time_out"), f);
        f(join(prefix, "class_table"), &self.class_table);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{i}")), f);
        }
        if let Some(fm) = &self.final_mod {
            fm.visit(&join(prefix, "final_mod"), f);
        }
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.patch_embed.visit_mut(&join(prefix, "patch_embed"), f);
        self.time_in.visit_mut(&join(prefix, "time_in"), f);
        self.time_out.visit_mut(&join(prefix, "time_out"), f);
        f(join(prefix, "class_table"), &mut self.class_table);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("blocks.{i}")), f);
        }
        if let Some(fm) = &mut self.final_mod {
            fm.visit_mut(&join(prefix, "final_mod"), f);
        }
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}
