//! Run configuration: `key = value` lines grouped under `[section]` headers.
//!
//! `#` starts a comment. Every key has a default and unknown sections or keys
//! are rejected. [`RunConfig::to_text`] writes every key, so parsing its
//! output yields the same configuration.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{DimError, Result};
use crate::model::{ModelConfig, SizeTag};

use super::data::DatasetSpec;

fn config_err(line: usize, msg: impl std::fmt::Display) -> DimError {
    DimError::Config(format!("line {line}: {msg}"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSection {
    pub size: SizeTag,
    /// `None` takes the size preset (or 2 for custom).
    pub layers: Option<usize>,
    /// `None` takes the size preset (or 32 for custom).
    pub hidden: Option<usize>,
    pub patch: usize,
    pub state: usize,
    /// 0 selects `ceil(2·hidden/16)`.
    pub delta_rank: usize,
    pub conv_width: usize,
    pub time_freq_dim: usize,
    pub class_token: bool,
    pub adaln: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            size: SizeTag::Custom,
            layers: None,
            hidden: None,
            patch: 2,
            state: 16,
            delta_rank: 0,
            conv_width: 4,
            time_freq_dim: 256,
            class_token: true,
            adaln: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSection {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Probability of replacing the label with the null label while training.
    pub cfg_dropout: f64,
}

impl Default for DiffusionSection {
    fn default() -> Self {
        Self {
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            cfg_dropout: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerSection {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub ema_decay: f64,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 256,
            steps: 1000,
            ema_decay: 0.9999,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSection {
    pub seed: u64,
    pub output: String,
    /// 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    pub log_every: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seed: 0,
            output: "runs/default".into(),
            checkpoint_every: 0,
            log_every: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelSection,
    pub diffusion: DiffusionSection,
    pub optimizer: OptimizerSection,
    pub data: DatasetSpec,
    pub run: RunSection,
}

fn parse<T: FromStr>(line: usize, key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| config_err(line, format!("cannot parse '{value}' for key '{key}'")))
}

fn parse_bool(line: usize, key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(config_err(line, format!("'{key}' must be true or false, got '{value}'"))),
    }
}

fn unquote(value: &str) -> &str {
    value
        .strip_prefix('"')
        .and_then(|v| v.strip_suffix('"'))
        .unwrap_or(value)
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let n = i + 1;
            let line = match raw.find('#') {
                Some(p) if !raw[..p].contains('"') => &raw[..p],
                _ => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| config_err(n, "unterminated section header"))?
                    .trim();
                if !["model", "diffusion", "optimizer", "data", "run"].contains(&name) {
                    return Err(config_err(n, format!("unknown section [{name}]")));
                }
                section = name.to_string();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| config_err(n, format!("expected 'key = value', got '{line}'")))?;
            let (key, value) = (key.trim(), unquote(value.trim()));
            if section.is_empty() {
                return Err(config_err(n, format!("key '{key}' appears before any [section]")));
            }
            cfg.set(n, &section, key, value)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| DimError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    fn set(&mut self, n: usize, section: &str, key: &str, v: &str) -> Result<()> {
        let (m, d, o, data, r) = (
            &mut self.model,
            &mut self.diffusion,
            &mut self.optimizer,
            &mut self.data,
            &mut self.run,
        );
        match (section, key) {
            ("model", "size") => m.size = v.parse().map_err(|e| config_err(n, e))?,
            ("model", "layers") => m.layers = Some(parse(n, key, v)?),
            ("model", "hidden") => m.hidden = Some(parse(n, key, v)?),
            ("model", "patch") => m.patch = parse(n, key, v)?,
            ("model", "state") => m.state = parse(n, key, v)?,
            ("model", "delta_rank") => m.delta_rank = parse(n, key, v)?,
            ("model", "conv_width") => m.conv_width = parse(n, key, v)?,
            ("model", "time_freq_dim") => m.time_freq_dim = parse(n, key, v)?,
            ("model", "class_token") => m.class_token = parse_bool(n, key, v)?,
            ("model", "adaln") => m.adaln = parse_bool(n, key, v)?,
            ("diffusion", "timesteps") => d.timesteps = parse(n, key, v)?,
            ("diffusion", "beta_start") => d.beta_start = parse(n, key, v)?,
            ("diffusion", "beta_end") => d.beta_end = parse(n, key, v)?,
            ("diffusion", "cfg_dropout") => d.cfg_dropout = parse(n, key, v)?,
            ("optimizer", "learning_rate") => o.learning_rate = parse(n, key, v)?,
            ("optimizer", "weight_decay") => o.weight_decay = parse(n, key, v)?,
            ("optimizer", "beta1") => o.beta1 = parse(n, key, v)?,
            ("optimizer", "beta2") => o.beta2 = parse(n, key, v)?,
            ("optimizer", "eps") => o.eps = parse(n, key, v)?,
            ("optimizer", "batch_size") => o.batch_size = parse(n, key, v)?,
            ("optimizer", "steps") => o.steps = parse(n, key, v)?,
            ("optimizer", "ema_decay") => o.ema_decay = parse(n, key, v)?,
            ("data", "name") => data.name = v.to_string(),
            ("data", "mu") => data.mu = parse(n, key, v)?,
            ("data", "sigma") => data.sigma = parse(n, key, v)?,
            ("data", "path") => data.path = Some(v.to_string()),
            ("data", "hflip") => data.hflip = parse_bool(n, key, v)?,
            ("run", "seed") => r.seed = parse(n, key, v)?,
            ("run", "output") => r.output = v.to_string(),
            ("run", "checkpoint_every") => r.checkpoint_every = parse(n, key, v)?,
            ("run", "log_every") => r.log_every = parse(n, key, v)?,
            _ => return Err(config_err(n, format!("unknown key '{key}' in [{section}]"))),
        }
        Ok(())
    }

    /// Every key, in a fixed order. Floats use the shortest exact form.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let (m, d, o, data, r) = (&self.model, &self.diffusion, &self.optimizer, &self.data, &self.run);
        let _ = writeln!(s, "[model]\nsize = {}", m.size);
        if let Some(l) = m.layers {
            let _ = writeln!(s, "layers = {l}");
        }
        if let Some(h) = m.hidden {
            let _ = writeln!(s, "hidden = {h}");
        }
        let _ = writeln!(
            s,
            "patch = {}\nstate = {}\ndelta_rank = {}\nconv_width = {}\ntime_freq_dim = {}\nclass_token = {}\nadaln = {}\n",
            m.patch, m.state, m.delta_rank, m.conv_width, m.time_freq_dim, m.class_token, m.adaln
        );
        let _ = writeln!(
            s,
            "[diffusion]\ntimesteps = {}\nbeta_start = {:?}\nbeta_end = {:?}\ncfg_dropout = {:?}\n",
            d.timesteps, d.beta_start, d.beta_end, d.cfg_dropout
        );
        let _ = writeln!(
            s,
            "[optimizer]\nlearning_rate = {:?}\nweight_decay = {:?}\nbeta1 = {:?}\nbeta2 = {:?}\neps = {:?}\nbatch_size = {}\nsteps = {}\nema_decay = {:?}\n",
            o.learning_rate, o.weight_decay, o.beta1, o.beta2, o.eps, o.batch_size, o.steps, o.ema_decay
        );
        let _ = writeln!(s, "[data]\nname = {}\nmu = {:?}\nsigma = {:?}", data.name, data.mu, data.sigma);
        if let Some(p) = &data.path {
            let _ = writeln!(s, "path = \"{p}\"");
        }
        let _ = writeln!(s, "hflip = {}\n", data.hflip);
        let _ = write!(
            s,
            "[run]\nseed = {}\noutput = \"{}\"\ncheckpoint_every = {}\nlog_every = {}\n",
            r.seed, r.output, r.checkpoint_every, r.log_every
        );
        s
    }

    /// Range checks that do not need the dataset.
    pub fn validate(&self) -> Result<()> {
        let (d, o) = (&self.diffusion, &self.optimizer);
        let bad = |msg: &str| Err(DimError::Config(msg.to_string()));
        if !(0.0..=1.0).contains(&d.cfg_dropout) {
            return bad("cfg_dropout must be in [0, 1]");
        }
        if !(o.learning_rate > 0.0) || o.weight_decay < 0.0 || o.eps <= 0.0 {
            return bad("learning_rate and eps must be positive and weight_decay non-negative");
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return bad("beta1 and beta2 must be in [0, 1)");
        }
        if !(0.0..=1.0).contains(&o.ema_decay) {
            return bad("ema_decay must be in [0, 1]");
        }
        if o.batch_size == 0 || self.run.log_every == 0 {
            return bad("batch_size and log_every must be positive");
        }
        crate::diffusion::make_schedule(d.timesteps, d.beta_start, d.beta_end)
            .map_err(|e| DimError::Config(e.to_string()))?;
        Ok(())
    }

    /// Model configuration for data of shape `[T, H, W, C]` with
    /// `num_classes` labels.
    pub fn model_config(&self, latent: [usize; 4], num_classes: usize) -> Result<ModelConfig> {
        let m = &self.model;
        let (layers, hidden) = match m.size.dims() {
            Some((l, h)) => (m.layers.unwrap_or(l), m.hidden.unwrap_or(h)),
            None => (m.layers.unwrap_or(2), m.hidden.unwrap_or(32)),
        };
        let [frames, h, w, c] = latent;
        let cfg = ModelConfig {
            size_tag: m.size,
            layers,
            hidden_d: hidden,
            patch: m.patch,
            in_channels: c,
            num_classes,
            frames,
            latent_height: h,
            latent_width: w,
            ssm_state_n: m.state,
            delta_rank: m.delta_rank,
            conv_width: m.conv_width,
            timesteps: self.diffusion.timesteps,
            time_freq_dim: m.time_freq_dim,
            class_token: m.class_token,
            adaln: m.adaln,
        };
        cfg.validate().map_err(|e| DimError::Config(e.to_string()))?;
        Ok(cfg)
    }
}
