//! Operation counts: closed-form per-block costs for attention, the dense
//! SSM baseline and the bidirectional selective scan, a shape-driven walker
//! over the concrete network, and the resolution-sweep report.
//!
//! Conventions: a multiply-add is 2 operations; bias adds are 1. The walker
//! counts dense maps, convolutions and scan arithmetic; norms, activations and
//! elementwise gating are left out.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use crate::error::{invalid, Result};
use crate::model::{DimModel, ModelConfig};
use crate::patchify::PatchGrid;

/// Spatial downsampling of the latent encoder the ladder assumes.
pub const LATENT_DOWNSAMPLE: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arch {
    Dit,
    DiffuSsm,
    Dim,
}

impl Arch {
    pub const ALL: [Arch; 3] = [Arch::Dit, Arch::DiffuSsm, Arch::Dim];
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::Dit => "dit",
            Arch::DiffuSsm => "diffussm",
            Arch::Dim => "dim",
        })
    }
}

impl FromStr for Arch {
    type Err = crate::DimError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dit" => Ok(Arch::Dit),
            "diffussm" => Ok(Arch::DiffuSsm),
            "dim" => Ok(Arch::Dim),
            _ => Err(invalid(format!("unknown architecture '{s}' (valid: dit, diffussm, dim, all)"))),
        }
    }
}

/// Attention block: `4LD² + 2L²D`.
pub fn flops_dit(l: u64, d: u64) -> u128 {
    let (l, d) = (l as u128, d as u128);
    4 * l * d * d + 2 * l * l * d
}

/// Dense-SSM block: `7.5·L·D²`, halves rounded up.
pub fn flops_diffussm(l: u64, d: u64) -> u128 {
    let (l, d) = (l as u128, d as u128);
    (15 * l * d * d).div_ceil(2)
}

/// Selective-scan block: `3L(2D)N + L(2D)N = 8NLD`.
pub fn flops_dim(l: u64, d: u64, n: u64) -> u128 {
    8 * n as u128 * l as u128 * d as u128
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostTerm {
    pub description: String,
    pub count: u128,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostModel {
    pub arch: Arch,
    pub l: u64,
    pub d: u64,
    pub layers: u64,
    pub n: Option<u64>,
    pub terms: Vec<CostTerm>,
    pub total: u128,
}

impl CostModel {
    fn new(arch: Arch, l: u64, d: u64, layers: u64, n: Option<u64>, terms: Vec<(String, u128)>) -> Self {
        let terms: Vec<CostTerm> = terms
            .into_iter()
            .map(|(description, count)| CostTerm { description, count })
            .collect();
        let total = terms.iter().map(|t| t.count).sum();
        Self {
            arch,
            l,
            d,
            layers,
            n,
            terms,
            total,
        }
    }

    pub fn term(&self, description: &str) -> Option<u128> {
        self.terms.iter().find(|t| t.description == description).map(|t| t.count)
    }
}

/// Closed-form cost of `layers` blocks at sequence length `l`.
pub fn analytic_cost(arch: Arch, l: u64, d: u64, layers: u64, n: u64) -> CostModel {
    let k = layers as u128;
    let (l1, d1, n1) = (l as u128, d as u128, n as u128);
    let terms = match arch {
        Arch::Dit => vec![
            ("projections 4LD²".to_string(), k * 4 * l1 * d1 * d1),
            ("attention 2L²D".to_string(), k * 2 * l1 * l1 * d1),
        ],
        Arch::DiffuSsm => vec![("dense ssm 7.5LD²".to_string(), k * flops_diffussm(l, d))],
        Arch::Dim => vec![
            ("state update 3L(2D)N".to_string(), k * 3 * l1 * 2 * d1 * n1),
            ("readout L(2D)N".to_string(), k * l1 * 2 * d1 * n1),
        ],
    };
    CostModel::new(arch, l, d, layers, (arch == Arch::Dim).then_some(n), terms)
}

pub const TERM_STATE_UPDATE: &str = "blocks.scan.state_update";
pub const TERM_READOUT: &str = "blocks.scan.readout";

/// Walks one forward pass of a model with configuration `cfg` on `grid`.
///
/// Needs only shapes, so it also covers sizes too large to allocate.
pub fn count_config_ops(cfg: &ModelConfig, grid: &PatchGrid) -> CostModel {
    let u = |x: usize| x as u128;
    let (d, di, n) = (u(cfg.hidden_d), u(cfg.d_inner()), u(cfg.ssm_state_n));
    let (r, kw, f) = (u(cfg.effective_delta_rank()), u(cfg.conv_width), u(cfg.time_freq_dim));
    let layers = u(cfg.layers);
    let l = u(grid.total_tokens());
    let lt = l + u(usize::from(cfg.class_token));
    let pdim = u(grid.token_dim());
    let linear = |rows: u128, i: u128, o: u128, bias: bool| rows * (2 * i * o + if bias { o } else { 0 });
    let mod_w = u(cfg.block_dims().mod_width());
    let dirs = 2;

    let mut terms = vec![
        ("patch_embed".to_string(), linear(l, pdim, d, true)),
        ("time_mlp".to_string(), linear(1, f, d, true) + linear(1, d, d, true)),
    ];
    let mut block = |name: &str, per_block: u128| terms.push((format!("blocks.{name}"), layers * per_block));
    if cfg.adaln {
        block("cond_mod", linear(1, d, mod_w, true));
    }
    block("in_proj", linear(lt, d, 2 * di, false));
    block("conv", dirs * lt * di * (2 * kw + 1));
    block("x_proj", dirs * linear(lt, di, r + 2 * n, false));
    block("delta_proj", dirs * linear(lt, r, di, true));
    block("scan.discretize", dirs * 2 * lt * di * n);
    block("scan.state_update", dirs * 3 * lt * di * n);
    block("scan.readout", dirs * 2 * lt * di * n);
    block("scan.skip", dirs * 2 * lt * di);
    block("out_proj", linear(lt, di, d, false));
    if cfg.adaln {
        terms.push(("final_mod".to_string(), linear(1, d, 2 * d, true)));
    }
    terms.push(("head".to_string(), linear(l, d, pdim, true)));
    CostModel::new(
        Arch::Dim,
        lt as u64,
        d as u64,
        cfg.layers as u64,
        Some(n as u64),
        terms,
    )
}

pub fn count_model_ops(model: &DimModel, grid: &PatchGrid) -> CostModel {
    count_config_ops(&model.config, grid)
}

/// One row of the resolution sweep.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReportRow {
    pub label: String,
    pub counts: Vec<u128>,
    pub notes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GflopsReport {
    pub model: String,
    pub resolutions: Vec<usize>,
    pub tokens: Vec<usize>,
    pub rows: Vec<ReportRow>,
}

/// Attention score matrices beyond this many fp32 bytes per layer are
/// flagged in the report.
const ATTENTION_NOTE_BYTES: u128 = 1 << 30;

/// Sweeps `resolutions` (pixels per side) for every architecture in `archs`
/// at the width and depth of `cfg`.
pub fn gflops_report(archs: &[Arch], cfg: &ModelConfig, resolutions: &[usize]) -> Result<GflopsReport> {
    if resolutions.is_empty() {
        return Err(invalid("resolution list is empty"));
    }
    if archs.is_empty() {
        return Err(invalid("architecture list is empty"));
    }
    let mut grids = Vec::new();
    for &res in resolutions {
        let step = LATENT_DOWNSAMPLE * cfg.patch;
        if res == 0 || res % step != 0 {
            return Err(invalid(format!(
                "resolution {res} must be a positive multiple of {step} (latent /{LATENT_DOWNSAMPLE}, patch {})",
                cfg.patch
            )));
        }
        let side = res / LATENT_DOWNSAMPLE;
        grids.push(PatchGrid::new(1, side, side, cfg.in_channels, cfg.patch)?);
    }
    let tokens: Vec<usize> = grids.iter().map(|g| g.total_tokens()).collect();
    let (d, layers, n) = (cfg.hidden_d as u64, cfg.layers as u64, cfg.ssm_state_n as u64);
    let mut rows = Vec::new();
    for arch in archs {
        let analytic: Vec<u128> = tokens
            .iter()
            .map(|&l| analytic_cost(*arch, l as u64, d, layers, n).total)
            .collect();
        let notes = tokens
            .iter()
            .map(|&l| {
                let bytes = 4 * (l as u128) * (l as u128);
                if *arch == Arch::Dit && bytes >= ATTENTION_NOTE_BYTES {
                    format!("{:.0} GiB of fp32 attention scores per layer", bytes as f64 / (1u128 << 30) as f64)
                } else {
                    String::new()
                }
            })
            .collect();
        rows.push(ReportRow {
            label: arch.to_string(),
            counts: analytic.clone(),
            notes,
        });
        if *arch == Arch::Dim {
            rows.push(ReportRow {
                label: "dim_both_directions".into(),
                counts: analytic.iter().map(|c| 2 * c).collect(),
                notes: vec![String::new(); tokens.len()],
            });
            rows.push(ReportRow {
                label: "dim_walker".into(),
                counts: grids.iter().map(|g| count_config_ops(cfg, g).total).collect(),
                notes: vec![String::new(); tokens.len()],
            });
        }
    }
    Ok(GflopsReport {
        model: format!("{}/{} (layers {}, width {})", cfg.size_tag, cfg.patch, cfg.layers, cfg.hidden_d),
        resolutions: resolutions.to_vec(),
        tokens,
        rows,
    })
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn gflops(count: u128) -> String {
    format!("{:.2}", count as f64 / 1e9)
}

impl GflopsReport {
    pub fn row(&self, label: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// `count[i+1] / count[i]` for one row.
    pub fn ratios(&self, label: &str) -> Option<Vec<f64>> {
        self.row(label)
            .map(|r| r.counts.windows(2).map(|w| w[1] as f64 / w[0] as f64).collect())
    }

    /// Exact operation counts, one row per architecture and one column per
    /// resolution.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("arch");
        for res in &self.resolutions {
            out.push(',');
            out.push_str(&csv_field(&format!("{res}x{res}")));
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str(&csv_field(&row.label));
            for c in &row.counts {
                let _ = write!(out, ",{c}");
            }
            out.push('\n');
        }
        out
    }

    pub fn to_markdown(&self) -> String {
        let mut out = format!("### GFLOPs sweep, {}\n\n", self.model);
        out.push_str("| arch | resolution | tokens | GFLOPs | ratio to previous | note |\n");
        out.push_str("|---|---|---|---|---|---|\n");
        for row in &self.rows {
            for (i, (&res, &count)) in self.resolutions.iter().zip(&row.counts).enumerate() {
                let ratio = if i == 0 {
                    "-".to_string()
                } else {
                    format!("{:.3}", count as f64 / row.counts[i - 1] as f64)
                };
                let _ = writeln!(
                    out,
                    "| {} | {res}x{res} | {} | {} | {ratio} | {} |",
                    row.label,
                    self.tokens[i],
                    gflops(count),
                    row.notes[i]
                );
            }
        }
        out.push_str(
            "\nCounts are per forward pass summed over all blocks; a multiply-add counts as 2 operations. \
             `dim` is the closed-form 8NLD per block, which matches one scan direction; \
             `dim_both_directions` doubles it; `dim_walker` walks every dense map, convolution and scan \
             of the concrete network.\n",
        );
        out
    }
}
