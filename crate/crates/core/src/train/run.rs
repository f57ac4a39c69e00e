//! Training loop: batch draw, random timesteps, label dropout, loss,
//! AdamW step, EMA update, metrics and checkpoints.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::diffusion::{loss_simple, make_schedule, EmaState, NoiseSchedule};
use crate::error::{DimError, Result};
use crate::model::{build_model, DimModel};
use crate::numerics::{randn, Rng, Tensor};
use crate::params::ParamSet;

use super::checkpoint::{save_checkpoint, Checkpoint, Manifest};
use super::config::RunConfig;
use super::data::{hflip, DataKind, Dataset};
use super::map_chunks;
use super::optim::{AdamHyper, AdamW};

/// RNG lane for parameter initialization; lane 0 drives the data stream.
const INIT_LANE: u64 = 1;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.dimc";

pub fn kind_name(kind: DataKind) -> &'static str {
    match kind {
        DataKind::Latent => "latent",
        DataKind::Image => "image",
        DataKind::Video => "video",
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub step: u64,
    pub loss: f64,
    pub grad_norm: f64,
}

struct Item {
    x0: Tensor,
    t: usize,
    y: Option<usize>,
    eps: Tensor,
}

pub struct Trainer {
    pub config: RunConfig,
    pub dataset: Dataset,
    pub schedule: NoiseSchedule,
    pub model: DimModel,
    pub ema: EmaState<DimModel>,
    pub optimizer: AdamW<DimModel>,
    pub rng: Rng,
    pub step: u64,
    pub threads: usize,
}

fn hyper(cfg: &RunConfig) -> AdamHyper {
    let o = &cfg.optimizer;
    AdamHyper {
        lr: o.learning_rate,
        beta1: o.beta1,
        beta2: o.beta2,
        eps: o.eps,
        weight_decay: o.weight_decay,
    }
}

impl Trainer {
    /// Fresh run; fails before touching the filesystem if the config or
    /// dataset is invalid.
    pub fn new(config: RunConfig, threads: usize) -> Result<Self> {
        config.validate()?;
        let dataset = Dataset::from_spec(&config.data)?;
        let mcfg = config.model_config(dataset.shape, dataset.num_classes)?;
        let d = &config.diffusion;
        let schedule = make_schedule(d.timesteps, d.beta_start, d.beta_end)?;
        let model = build_model(&mcfg, &mut Rng::for_lane(config.run.seed, INIT_LANE))?;
        let ema = EmaState::new(&model, config.optimizer.ema_decay)?;
        let optimizer = AdamW::new(&model, hyper(&config));
        Ok(Self {
            rng: Rng::for_lane(config.run.seed, 0),
            config,
            dataset,
            schedule,
            model,
            ema,
            optimizer,
            step: 0,
            threads: threads.max(1),
        })
    }

    /// Continues from a checkpoint. The model shape implied by `config` must
    /// match the checkpoint; step budget and logging options may differ.
    pub fn resume(config: RunConfig, ck: Checkpoint, threads: usize) -> Result<Self> {
        let mut tr = Self::new(config, threads)?;
        if tr.model.config != ck.manifest.model {
            return Err(DimError::Config(
                "checkpoint model does not match the configuration".into(),
            ));
        }
        tr.rng = Rng::from_state(&ck.manifest.rng)?;
        tr.step = ck.manifest.step;
        tr.ema.shadow = ck.ema.unwrap_or_else(|| ck.model.clone());
        tr.model = ck.model;
        if let Some((m, v)) = ck.moments {
            tr.optimizer.m = m;
            tr.optimizer.v = v;
        }
        tr.optimizer.step = ck.manifest.optimizer_step;
        Ok(tr)
    }

    fn draw_batch(&mut self) -> Result<Vec<Item>> {
        let (b, t_max) = (self.config.optimizer.batch_size, self.schedule.steps());
        let (p_drop, flip) = (self.config.diffusion.cfg_dropout, self.config.data.hflip);
        let mut items = Vec::with_capacity(b);
        for _ in 0..b {
            let (mut x0, label) = self.dataset.sample(&mut self.rng);
            if flip && self.rng.bernoulli(0.5) {
                x0 = hflip(&x0);
            }
            let t = 1 + self.rng.below(t_max);
            let y = (!self.rng.bernoulli(p_drop)).then_some(label);
            let eps = randn(&mut self.rng, x0.shape())?;
            items.push(Item { x0, t, y, eps });
        }
        Ok(items)
    }

    /// Batch-mean loss and its gradient.
    pub fn loss_and_grad(&mut self) -> Result<(f64, DimModel)> {
        let items = self.draw_batch()?;
        let (model, sched) = (&self.model, &self.schedule);
        let parts = map_chunks(&items, self.threads, |_, chunk| -> Result<(f64, DimModel)> {
            let mut grad = model.zeros_like();
            let mut loss = 0.0;
            for it in chunk {
                loss += loss_simple(model, sched, &it.x0, it.t, &it.eps, it.y, &mut grad)?;
            }
            Ok((loss, grad))
        });
        let mut total = 0.0;
        let mut grad: Option<DimModel> = None;
        for part in parts {
            let (l, g) = part?;
            total += l;
            match grad.as_mut() {
                None => grad = Some(g),
                Some(acc) => acc.add_scaled(1.0, &g)?,
            }
        }
        let mut grad = grad.expect("batch is non-empty");
        let inv = 1.0 / items.len() as f64;
        grad.scale_all(inv);
        Ok((total * inv, grad))
    }

    pub fn train_step(&mut self) -> Result<StepStats> {
        let (loss, grad) = self.loss_and_grad()?;
        if !loss.is_finite() {
            return Err(DimError::NonFinite(format!("training loss at step {}", self.step + 1)));
        }
        let grad_norm = grad.sum_sq().sqrt();
        self.optimizer.update(&mut self.model, &grad)?;
        self.ema.update(&self.model)?;
        self.step += 1;
        Ok(StepStats {
            step: self.step,
            loss,
            grad_norm,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            manifest: Manifest {
                step: self.step,
                config: self.config.to_text(),
                model: self.model.config.clone(),
                rng: self.rng.state(),
                data_kind: kind_name(self.dataset.kind).into(),
                ema_decay: Some(self.ema.decay),
                optimizer_step: self.optimizer.step,
            },
            model: self.model.clone(),
            ema: Some(self.ema.shadow.clone()),
            moments: Some((self.optimizer.m.clone(), self.optimizer.v.clone())),
        }
    }

    pub fn tokens_per_item(&self) -> usize {
        let g = self.model.config.grid().map(|g| g.total_tokens()).unwrap_or(0);
        g + usize::from(self.model.config.class_token)
    }
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub first_step: u64,
    pub last_step: u64,
    pub losses: Vec<f64>,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub resume: Option<PathBuf>,
    pub threads: usize,
    /// Progress lines on stderr every this many steps (0 = silent).
    pub progress_every: usize,
}

/// Runs the loop up to `optimizer.steps`, writing metrics, periodic
/// checkpoints and a final `checkpoint.dimc` under `run.output`.
pub fn train(config: RunConfig, opts: &TrainOptions) -> Result<TrainSummary> {
    let mut tr = match &opts.resume {
        Some(path) => {
            let ck = super::checkpoint::load_checkpoint(path)?;
            Trainer::resume(config, ck, opts.threads)?
        }
        None => Trainer::new(config, opts.threads)?,
    };
    let out = PathBuf::from(&tr.config.run.output);
    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join("config.txt"), tr.config.to_text())?;
    let metrics_path = out.join(METRICS_FILE);
    let mut metrics = OpenOptions::new()
        .create(true)
        .append(opts.resume.is_some())
        .write(true)
        .truncate(opts.resume.is_none())
        .open(&metrics_path)?;
    let first_step = tr.step;
    let total = tr.config.optimizer.steps as u64;
    let tokens = (tr.tokens_per_item() * tr.config.optimizer.batch_size) as f64;
    let (log_every, ck_every) = (tr.config.run.log_every as u64, tr.config.run.checkpoint_every as u64);
    let start = Instant::now();
    let mut losses = Vec::new();
    while tr.step < total {
        let t0 = Instant::now();
        let s = tr.train_step()?;
        losses.push(s.loss);
        let dt = t0.elapsed().as_secs_f64();
        if s.step % log_every == 0 || s.step == total {
            let rec = serde_json::json!({
                "step": s.step,
                "loss": s.loss,
                "grad_norm": s.grad_norm,
                "wall_clock_s": start.elapsed().as_secs_f64(),
                "tokens_per_sec": if dt > 0.0 { tokens / dt } else { 0.0 },
            });
            writeln!(metrics, "{rec}")?;
        }
        if opts.progress_every > 0 && s.step % opts.progress_every as u64 == 0 {
            eprintln!("step {} loss {:.5} grad_norm {:.4}", s.step, s.loss, s.grad_norm);
        }
        if ck_every > 0 && s.step % ck_every == 0 && s.step < total {
            save_checkpoint(&out.join(format!("checkpoint_{:08}.dimc", s.step)), &tr.checkpoint())?;
        }
    }
    metrics.flush()?;
    let ck_path = out.join(CHECKPOINT_FILE);
    save_checkpoint(&ck_path, &tr.checkpoint())?;
    Ok(TrainSummary {
        first_step,
        last_step: tr.step,
        losses,
        checkpoint: ck_path,
        metrics: metrics_path,
    })
}

pub fn cmd_train(config_path: &Path, opts: &TrainOptions) -> Result<TrainSummary> {
    train(RunConfig::load(config_path)?, opts)
}

/// Loss column of a metrics file.
pub fn read_losses(path: &Path) -> Result<Vec<(u64, f64)>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let v: serde_json::Value =
                serde_json::from_str(l).map_err(|e| DimError::Format(format!("metrics line: {e}")))?;
            match (v["step"].as_u64(), v["loss"].as_f64()) {
                (Some(s), Some(x)) => Ok((s, x)),
                _ => Err(DimError::Format(format!("metrics line lacks step/loss: {l}"))),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(dir: &Path, steps: usize) -> RunConfig {
        let text = format!(
            "[model]\nlayers = 1\nhidden = 8\nstate = 4\ntime_freq_dim = 8\n\
             [optimizer]\nlearning_rate = 0.003\nbatch_size = 4\nsteps = {steps}\nema_decay = 0.9\n\
             [run]\nseed = 9\noutput = \"{}\"\n",
            dir.display()
        );
        RunConfig::parse(&text).unwrap()
    }

    #[test]
    fn resume_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        let opts = TrainOptions {
            threads: 1,
            ..Default::default()
        };
        let full = train(toy(&a, 6), &opts).unwrap();
        train(toy(&b, 3), &opts).unwrap();
        let resumed = train(
            toy(&b, 6),
            &TrainOptions {
                resume: Some(b.join(CHECKPOINT_FILE)),
                ..opts.clone()
            },
        )
        .unwrap();
        assert_eq!(resumed.first_step, 3);
        assert_eq!(full.losses[3..], resumed.losses[..]);
        assert_eq!(read_losses(&full.metrics).unwrap(), read_losses(&resumed.metrics).unwrap());
        let (x, y) = (
            super::super::checkpoint::load_checkpoint(&full.checkpoint).unwrap(),
            super::super::checkpoint::load_checkpoint(&resumed.checkpoint).unwrap(),
        );
        assert_eq!((x.model, x.ema, x.moments), (y.model, y.ema, y.moments));
        assert_eq!(x.manifest.rng, y.manifest.rng);
        assert_eq!(x.manifest.step, 6);
    }

    #[test]
    fn thread_count_changes_only_rounding() {
        let dir = tempfile::tempdir().unwrap();
        let mut one = Trainer::new(toy(dir.path(), 1), 1).unwrap();
        let mut three = Trainer::new(toy(dir.path(), 1), 3).unwrap();
        let (la, ga) = one.loss_and_grad().unwrap();
        let (lb, gb) = three.loss_and_grad().unwrap();
        assert!((la - lb).abs() <= 1e-12 * la.abs());
        assert!(ga.flatten().max_abs_diff(&gb.flatten()).unwrap() <= 1e-6 * ga.flatten().max_abs());
    }

    #[test]
    fn bad_inputs_fail_before_writing() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("never");
        let mut cfg = toy(&out, 2);
        cfg.data.name = "nope".into();
        assert!(train(cfg, &TrainOptions::default()).is_err());
        assert!(!out.exists());
        let missing = cmd_train(&dir.path().join("absent.cfg"), &TrainOptions::default());
        assert!(missing.is_err());
    }
}
