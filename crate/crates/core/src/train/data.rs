//! Built-in synthetic datasets and a PPM directory loader.
//!
//! Every sample is a `[T × H × W × C]` tensor plus an integer label.

use std::path::Path;

use crate::error::{invalid, DimError, Result};
use crate::numerics::{Rng, Tensor};

use super::ppm::read_ppm;

pub const DATASET_NAMES: [&str; 4] = ["two_mode_latent", "checker_images", "moving_bar_video", "ppm_dir"];

/// Dataset section of the run configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub name: String,
    /// Mode offset for `two_mode_latent`.
    pub mu: f64,
    /// Per-pixel standard deviation for `two_mode_latent`.
    pub sigma: f64,
    /// Directory of `.ppm` files for `ppm_dir`.
    pub path: Option<String>,
    /// Random horizontal flips during training.
    pub hflip: bool,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            name: "two_mode_latent".into(),
            mu: 0.8,
            sigma: 0.1,
            path: None,
            hflip: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataKind {
    /// Unbounded values; no clamping while sampling.
    Latent,
    /// Values in `[−1, 1]`, single frame.
    Image,
    /// Values in `[−1, 1]`, several frames.
    Video,
}

#[derive(Clone, Debug)]
enum Source {
    TwoMode { mu: f64, sigma: f64 },
    Checker,
    MovingBar,
    Images(Vec<Tensor>),
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub kind: DataKind,
    pub shape: [usize; 4],
    pub num_classes: usize,
    source: Source,
}

pub const BAR_FRAMES: usize = 8;
pub const BAR_SIZE: usize = 16;
pub const BAR_WIDTH: usize = 2;

impl Dataset {
    pub fn from_spec(spec: &DatasetSpec) -> Result<Self> {
        match spec.name.as_str() {
            "two_mode_latent" => Self::two_mode(spec.mu, spec.sigma),
            "checker_images" => Ok(Self {
                kind: DataKind::Image,
                shape: [1, 32, 32, 3],
                num_classes: 4,
                source: Source::Checker,
            }),
            "moving_bar_video" => Ok(Self {
                kind: DataKind::Video,
                shape: [BAR_FRAMES, BAR_SIZE, BAR_SIZE, 1],
                num_classes: 2,
                source: Source::MovingBar,
            }),
            "ppm_dir" => {
                let dir = spec
                    .path
                    .as_deref()
                    .ok_or_else(|| DimError::Config("ppm_dir needs data.path".into()))?;
                Self::ppm_dir(Path::new(dir))
            }
            other => Err(DimError::Config(format!(
                "unknown dataset '{other}' (valid: {})",
                DATASET_NAMES.join(", ")
            ))),
        }
    }

    /// 8×8×1 latents from `N(+μ, σ²I)` (label 0) or `N(−μ, σ²I)` (label 1).
    pub fn two_mode(mu: f64, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && mu.is_finite()) {
            return Err(invalid("two_mode_latent needs finite mu and sigma > 0"));
        }
        Ok(Self {
            kind: DataKind::Latent,
            shape: [1, 8, 8, 1],
            num_classes: 2,
            source: Source::TwoMode { mu, sigma },
        })
    }

    pub fn ppm_dir(dir: &Path) -> Result<Self> {
        let mut paths: Vec<_> = std::fs::read_dir(dir)
            .map_err(|e| DimError::Config(format!("cannot read {}: {e}", dir.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("ppm")))
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(DimError::Config(format!("no .ppm files in {}", dir.display())));
        }
        let images = paths.iter().map(|p| read_ppm(p)).collect::<Result<Vec<_>>>()?;
        let shape = images[0].shape().to_vec();
        if let Some((p, _)) = paths.iter().zip(&images).find(|(_, im)| im.shape() != shape) {
            return Err(DimError::Config(format!(
                "{} has a different size from {}",
                p.display(),
                paths[0].display()
            )));
        }
        Ok(Self {
            kind: DataKind::Image,
            shape: [shape[0], shape[1], shape[2], shape[3]],
            num_classes: 1,
            source: Source::Images(images),
        })
    }

    pub fn sample(&self, rng: &mut Rng) -> (Tensor, usize) {
        match &self.source {
            Source::TwoMode { mu, sigma } => {
                let label = rng.below(2);
                let centre = if label == 0 { *mu } else { -mu };
                let x = Tensor::from_fn(&self.shape, |_| centre + sigma * rng.normal());
                (x, label)
            }
            Source::Checker => {
                let label = rng.below(4);
                (checker(label, rng), label)
            }
            Source::MovingBar => {
                let label = rng.below(2);
                let start = rng.below(BAR_SIZE);
                (moving_bar(label, start), label)
            }
            Source::Images(images) => (images[rng.below(images.len())].clone(), 0),
        }
    }

    /// Flat centre of mode `label` for `two_mode_latent`.
    pub fn mode_centre(&self, label: usize) -> Option<f64> {
        match self.source {
            Source::TwoMode { mu, .. } => Some(if label == 0 { mu } else { -mu }),
            _ => None,
        }
    }
}

/// 32×32×3 pattern of class `label`: 0 and 1 are checkerboards with 4- and
/// 8-pixel cells, 2 is vertical stripes, 3 is diagonal stripes. Phase and
/// the colour pair are random.
fn checker(label: usize, rng: &mut Rng) -> Tensor {
    let cell = if label == 1 { 8 } else { 4 };
    let (ox, oy) = (rng.below(2 * cell), rng.below(2 * cell));
    let colour: Vec<f64> = (0..3).map(|_| 0.4 + 0.6 * rng.uniform()).collect();
    let sign: Vec<f64> = (0..3).map(|_| if rng.bernoulli(0.5) { 1.0 } else { -1.0 }).collect();
    Tensor::from_fn(&[1, 32, 32, 3], |i| {
        let (pix, c) = (i / 3, i % 3);
        let (y, x) = (pix / 32 + oy, pix % 32 + ox);
        let on = match label {
            0 | 1 => (x / cell + y / cell) % 2 == 0,
            2 => (x / cell) % 2 == 0,
            _ => ((x + y) / cell) % 2 == 0,
        };
        let v = sign[c] * colour[c];
        if on {
            v
        } else {
            -v
        }
    })
}

/// Vertical bar of width [`BAR_WIDTH`] (value 1 on −1) that moves one pixel
/// per frame, right for label 0 and left for label 1, wrapping around.
pub fn moving_bar(label: usize, start: usize) -> Tensor {
    Tensor::from_fn(&[BAR_FRAMES, BAR_SIZE, BAR_SIZE, 1], |i| {
        let t = i / (BAR_SIZE * BAR_SIZE);
        let x = i % BAR_SIZE;
        let pos = if label == 0 {
            (start + t) % BAR_SIZE
        } else {
            (start + BAR_SIZE * BAR_FRAMES - t) % BAR_SIZE
        };
        if (x + BAR_SIZE - pos) % BAR_SIZE < BAR_WIDTH {
            1.0
        } else {
            -1.0
        }
    })
}

/// Mirrors every frame along the width axis.
pub fn hflip(x: &Tensor) -> Tensor {
    let s = x.shape();
    let (w, c) = (s[2], s[3]);
    Tensor::from_fn(s, |i| {
        let (row, rem) = (i / (w * c), i % (w * c));
        let (col, ch) = (rem / c, rem % c);
        x.data()[row * w * c + (w - 1 - col) * c + ch]
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_mode_class_means() {
        let ds = Dataset::two_mode(0.8, 0.1).unwrap();
        let mut rng = Rng::new(1);
        let (mut sum, mut count) = (0.0, 0usize);
        for _ in 0..10_000 {
            let (x, y) = ds.sample(&mut rng);
            if y == 0 {
                sum += x.data()[0];
                count += 1;
            }
        }
        let mean = sum / count as f64;
        assert!((mean - 0.8).abs() < 4.0 * 0.1 / (count as f64).sqrt(), "{mean}");
        assert!((count as f64 / 10_000.0 - 0.5).abs() < 0.02);
    }

    #[test]
    fn bar_shifts_one_pixel_per_frame() {
        for label in 0..2 {
            for start in [0, 7, 15] {
                let clip = moving_bar(label, start);
                let frame = |t: usize| &clip.data()[t * 256..(t + 1) * 256];
                for t in 0..BAR_FRAMES - 1 {
                    let (a, b) = (frame(t), frame(t + 1));
                    assert_ne!(a, b);
                    for y in 0..16 {
                        for x in 0..16 {
                            let src = if label == 0 { (x + 15) % 16 } else { (x + 1) % 16 };
                            assert_eq!(b[y * 16 + x], a[y * 16 + src]);
                        }
                    }
                }
                assert_eq!(clip.data().iter().filter(|&&v| v == 1.0).count(), BAR_FRAMES * 16 * BAR_WIDTH);
            }
        }
    }

    #[test]
    fn seeded_streams_repeat() {
        for name in ["two_mode_latent", "checker_images", "moving_bar_video"] {
            let ds = Dataset::from_spec(&DatasetSpec {
                name: name.into(),
                ..Default::default()
            })
            .unwrap();
            let draw = |seed| {
                let mut rng = Rng::new(seed);
                (0..5).map(|_| ds.sample(&mut rng)).collect::<Vec<_>>()
            };
            let (a, b) = (draw(3), draw(3));
            for ((xa, ya), (xb, yb)) in a.iter().zip(&b) {
                assert_eq!((xa, ya), (xb, yb));
                assert_eq!(xa.shape(), &ds.shape);
                assert!(*ya < ds.num_classes);
            }
        }
        let err = Dataset::from_spec(&DatasetSpec {
            name: "imagenet".into(),
            ..Default::default()
        })
        .unwrap_err()
        .to_string();
        assert!(err.contains("two_mode_latent"));
    }

    #[test]
    fn checker_values_are_bounded() {
        let mut rng = Rng::new(2);
        for label in 0..4 {
            let x = checker(label, &mut rng);
            assert!(x.data().iter().all(|v| v.abs() <= 1.0));
            assert!(x.data().iter().any(|&v| v > 0.0) && x.data().iter().any(|&v| v < 0.0));
        }
    }

    #[test]
    fn hflip_is_an_involution() {
        let x = Tensor::from_fn(&[2, 3, 4, 2], |i| i as f64);
        let f = hflip(&x);
        assert_eq!(f.data()[0..2], [6.0, 7.0]);
        assert_eq!(hflip(&f), x);
    }
}
