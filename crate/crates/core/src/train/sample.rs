//! Sampling from a checkpoint and writing the results.

use std::path::{Path, PathBuf};

use crate::diffusion::{ddpm_sample, make_schedule, NoiseSchedule, SampleOptions};
use crate::error::{invalid, DimError, Result};
use crate::model::{Denoiser, DimModel};
use crate::numerics::{write_tensor, DType, Rng, Tensor};

use super::checkpoint::load_checkpoint;
use super::config::RunConfig;
use super::map_chunks;
use super::ppm::{tile, write_ppm};

pub const SAMPLES_TENSOR: &str = "samples.dimt";

/// Draws one sample per entry of `labels`; item `i` uses RNG lane `i` of
/// `seed`, so results do not depend on the thread count.
pub fn sample_many<D: Denoiser + Sync + ?Sized>(
    model: &D,
    sched: &NoiseSchedule,
    shape: &[usize],
    labels: &[Option<usize>],
    opts: &SampleOptions,
    seed: u64,
    threads: usize,
) -> Result<Vec<Tensor>> {
    let idx: Vec<usize> = (0..labels.len()).collect();
    let parts = map_chunks(&idx, threads, |_, chunk| {
        chunk
            .iter()
            .map(|&i| ddpm_sample(model, sched, shape, labels[i], opts, &mut Rng::for_lane(seed, i as u64)))
            .collect::<Result<Vec<_>>>()
    });
    let mut out = Vec::with_capacity(labels.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct SampleRequest {
    pub checkpoint: PathBuf,
    pub count: usize,
    /// `None` samples unconditionally.
    pub class: Option<usize>,
    pub cfg_scale: f64,
    pub steps: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub threads: usize,
}

#[derive(Clone, Debug)]
pub struct SampleOutcome {
    pub samples: Vec<Tensor>,
    pub files: Vec<PathBuf>,
    pub used_ema: bool,
}

fn frame(sample: &Tensor, t: usize) -> Result<Tensor> {
    let s = sample.shape();
    let n = s[1] * s[2] * s[3];
    Tensor::new(vec![s[1], s[2], s[3]], sample.data()[t * n..(t + 1) * n].to_vec())
}

pub fn write_outputs(samples: &[Tensor], kind: &str, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    let first = samples.first().ok_or_else(|| invalid("no samples to write"))?;
    let mut shape = vec![samples.len()];
    shape.extend_from_slice(first.shape());
    let flat: Vec<f64> = samples.iter().flat_map(|s| s.data().iter().copied()).collect();
    let path = out_dir.join(SAMPLES_TENSOR);
    let mut f = std::fs::File::create(&path)?;
    write_tensor(&mut f, &Tensor::new(shape, flat)?, DType::F64)?;
    let mut files = vec![path];
    let cols = (samples.len() as f64).sqrt().ceil() as usize;
    match kind {
        "image" => {
            let frames = samples.iter().map(|s| frame(s, 0)).collect::<Result<Vec<_>>>()?;
            let p = out_dir.join("samples.ppm");
            write_ppm(&p, &tile(&frames, cols)?)?;
            files.push(p);
        }
        "video" => {
            for t in 0..first.shape()[0] {
                let frames = samples.iter().map(|s| frame(s, t)).collect::<Result<Vec<_>>>()?;
                let p = out_dir.join(format!("frame_{t:03}.ppm"));
                write_ppm(&p, &tile(&frames, cols)?)?;
                files.push(p);
            }
        }
        _ => {}
    }
    Ok(files)
}

/// Loads a checkpoint, samples with its EMA weights (falling back to the raw
/// weights with a warning on stderr) and writes the outputs.
pub fn cmd_sample(req: &SampleRequest) -> Result<SampleOutcome> {
    if req.count == 0 {
        return Err(invalid("sample count must be positive"));
    }
    let ck = load_checkpoint(&req.checkpoint)?;
    let run = RunConfig::parse(&ck.manifest.config)?;
    let d = &run.diffusion;
    let sched = make_schedule(d.timesteps, d.beta_start, d.beta_end)?;
    let cfg = &ck.manifest.model;
    if let Some(c) = req.class {
        if c >= cfg.num_classes {
            return Err(DimError::InvalidArgument(format!(
                "class {c} outside 0..{} for this checkpoint",
                cfg.num_classes
            )));
        }
    }
    let used_ema = ck.ema.is_some();
    let model: DimModel = match ck.ema {
        Some(e) => e,
        None => {
            eprintln!("warning: checkpoint has no EMA weights; sampling with the raw training weights");
            ck.model
        }
    };
    let opts = SampleOptions {
        steps: req.steps,
        cfg_scale: req.cfg_scale,
        clamp: ck.manifest.data_kind != "latent",
    };
    let labels = vec![req.class; req.count];
    let samples = sample_many(&model, &sched, &cfg.latent_shape(), &labels, &opts, req.seed, req.threads)?;
    let files = write_outputs(&samples, &ck.manifest.data_kind, &req.out_dir)?;
    Ok(SampleOutcome {
        samples,
        files,
        used_ema,
    })
}
