//! Latent ⇄ token sequence conversion.
//!
//! Latents are `[T × H × W × C]` (images use `T = 1`). Tokens are ordered
//! `(frame, patch row, patch col)` lexicographically and each token flattens
//! its `P × P × C` patch row-major, channel last. This order is also the
//! 1-D order the bidirectional scans walk.

use crate::error::{ensure_shape, invalid, Result};
use crate::layers::Linear;
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch: usize,
}

impl PatchGrid {
    pub fn new(frames: usize, height: usize, width: usize, channels: usize, patch: usize) -> Result<Self> {
        if frames == 0 || height == 0 || width == 0 || channels == 0 || patch == 0 {
            return Err(invalid("patch grid dimensions must be positive"));
        }
        if !height.is_multiple_of(patch) {
            return Err(invalid(format!(
                "latent height {height} is not divisible by patch size {patch}"
            )));
        }
        if !width.is_multiple_of(patch) {
            return Err(invalid(format!(
                "latent width {width} is not divisible by patch size {patch}"
            )));
        }
        Ok(Self {
            frames,
            height,
            width,
            channels,
            patch,
        })
    }

    /// Grid matching a `[T × H × W × C]` latent.
    pub fn for_latent(shape: &[usize], patch: usize) -> Result<Self> {
        match shape {
            &[t, h, w, c] => Self::new(t, h, w, c, patch),
            _ => Err(invalid(format!("latent must be [T × H × W × C], got {shape:?}"))),
        }
    }

    pub fn rows(&self) -> usize {
        self.height / self.patch
    }

    pub fn cols(&self) -> usize {
        self.width / self.patch
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.rows() * self.cols()
    }

    pub fn total_tokens(&self) -> usize {
        self.frames * self.tokens_per_frame()
    }

    pub fn token_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn latent_shape(&self) -> [usize; 4] {
        [self.frames, self.height, self.width, self.channels]
    }

    /// Flat latent offset of element `e` of token `tok`.
    #[inline]
    fn source_index(&self, tok: usize, e: usize) -> usize {
        let (p, c) = (self.patch, self.channels);
        let per_frame = self.tokens_per_frame();
        let (t, rem) = (tok / per_frame, tok % per_frame);
        let (pr, pc) = (rem / self.cols(), rem % self.cols());
        let (i, rem) = (e / (p * c), e % (p * c));
        let (j, ch) = (rem / c, rem % c);
        let (y, x) = (pr * p + i, pc * p + j);
        ((t * self.height + y) * self.width + x) * c + ch
    }
}

pub fn patchify(z: &Tensor, grid: &PatchGrid) -> Result<Tensor> {
    ensure_shape("patchify", &grid.latent_shape(), z.shape())?;
    let (l, k) = (grid.total_tokens(), grid.token_dim());
    let src = z.data();
    let mut out = Vec::with_capacity(l * k);
    for tok in 0..l {
        for e in 0..k {
            out.push(src[grid.source_index(tok, e)]);
        }
    }
    Tensor::new(vec![l, k], out)
}

pub fn depatchify(tokens: &Tensor, grid: &PatchGrid) -> Result<Tensor> {
    let (l, k) = (grid.total_tokens(), grid.token_dim());
    ensure_shape("depatchify", &[l, k], tokens.shape())?;
    let mut out = Tensor::zeros(&grid.latent_shape());
    let dst = out.data_mut();
    for tok in 0..l {
        for (e, &v) in tokens.row(tok).iter().enumerate() {
            dst[grid.source_index(tok, e)] = v;
        }
    }
    Ok(out)
}

/// `[sin(p·ω₀) … sin(p·ω_{d/2−1}), cos(p·ω₀) … cos(p·ω_{d/2−1})]` with
/// `ωᵢ = 10000^{−2i/d}`.
pub fn sincos_1d(position: f64, dim: usize, out: &mut [f64]) {
    debug_assert!(dim.is_multiple_of(2) && out.len() == dim);
    let half = dim / 2;
    for i in 0..half {
        let omega = 10000f64.powf(-2.0 * i as f64 / dim as f64);
        let (s, c) = (position * omega).sin_cos();
        out[i] = s;
        out[half + i] = c;
    }
}

/// Fixed sinusoidal position table `[L_total × D]`.
///
/// The first `D/2` columns encode the patch row and the last `D/2` the patch
/// column. Video grids (`frames > 1`) add a full-width 1-D encoding of the
/// frame index on top.
pub fn position_table(grid: &PatchGrid, dim: usize) -> Result<Tensor> {
    if dim == 0 || !dim.is_multiple_of(4) {
        return Err(invalid(format!("embedding width {dim} must be a positive multiple of 4")));
    }
    let half = dim / 2;
    let mut table = Tensor::zeros(&[grid.total_tokens(), dim]);
    let mut temporal = vec![0.0; dim];
    for t in 0..grid.frames {
        if grid.frames > 1 {
            sincos_1d(t as f64, dim, &mut temporal);
        }
        for r in 0..grid.rows() {
            for c in 0..grid.cols() {
                let tok = (t * grid.rows() + r) * grid.cols() + c;
                let row = table.row_mut(tok);
                sincos_1d(r as f64, half, &mut row[..half]);
                sincos_1d(c as f64, half, &mut row[half..]);
                if grid.frames > 1 {
                    row.iter_mut().zip(&temporal).for_each(|(a, b)| *a += b);
                }
            }
        }
    }
    Ok(table)
}

/// Projects patches to width `D`, adds positions, and (optionally) prepends
/// the conditioning token as row 0.
pub fn embed_tokens(
    patches: &Tensor,
    proj: &Linear,
    pos: &Tensor,
    class_token: Option<&Tensor>,
) -> Result<Tensor> {
    let l = patches.rows();
    let d = proj.out_dim();
    if pos.rows() < l {
        return Err(invalid(format!(
            "position table has {} rows but {l} tokens need embedding",
            pos.rows()
        )));
    }
    ensure_shape("embed positions", &[d], &[pos.cols()])?;
    let projected = proj.forward(patches)?;
    let offset = usize::from(class_token.is_some());
    let mut out = Tensor::zeros(&[l + offset, d]);
    if let Some(ct) = class_token {
        ensure_shape("class token", &[d], ct.shape())?;
        out.row_mut(0).copy_from_slice(ct.data());
    }
    for r in 0..l {
        let (p, q) = (projected.row(r), pos.row(r));
        for (o, (a, b)) in out.row_mut(r + offset).iter_mut().zip(p.iter().zip(q)) {
            *o = a + b;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{randn, Rng};
    use proptest::prelude::{prop_assert_eq, prop_oneof, proptest, Just, ProptestConfig, Strategy};

    #[test]
    fn first_token_holds_top_left_patch() {
        let grid = PatchGrid::new(1, 4, 4, 1, 2).unwrap();
        let z = Tensor::from_fn(&[1, 4, 4, 1], |i| i as f64);
        let tok = patchify(&z, &grid).unwrap();
        assert_eq!(tok.shape(), &[4, 4]);
        // pixels (0,0),(0,1),(1,0),(1,1) = flat 0,1,4,5
        assert_eq!(tok.row(0), &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(tok.row(1), &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(tok.row(2), &[8.0, 9.0, 12.0, 13.0]);
    }

    #[test]
    fn channels_are_innermost() {
        let grid = PatchGrid::new(1, 2, 2, 3, 2).unwrap();
        let z = Tensor::from_fn(&[1, 2, 2, 3], |i| i as f64);
        assert_eq!(patchify(&z, &grid).unwrap().row(0), z.data());
    }

    #[test]
    fn video_token_count() {
        let grid = PatchGrid::new(16, 32, 32, 4, 2).unwrap();
        assert_eq!(grid.tokens_per_frame(), 256);
        assert_eq!(grid.total_tokens(), 4096);
        let clip = PatchGrid::new(8, 16, 16, 1, 2).unwrap();
        assert_eq!(clip.total_tokens(), 512);
    }

    #[test]
    fn indivisible_axis_is_named() {
        let err = PatchGrid::new(1, 6, 8, 1, 4).unwrap_err().to_string();
        assert!(err.contains("height"), "{err}");
        let err = PatchGrid::new(1, 8, 6, 1, 4).unwrap_err().to_string();
        assert!(err.contains("width"), "{err}");
    }

    #[test]
    fn constant_tokens_give_constant_latent() {
        let grid = PatchGrid::new(2, 8, 8, 2, 4).unwrap();
        let tokens = Tensor::full(&[grid.total_tokens(), grid.token_dim()], 0.25);
        let z = depatchify(&tokens, &grid).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.25));
        assert!(depatchify(&Tensor::zeros(&[3, grid.token_dim()]), &grid).is_err());
    }

    #[test]
    fn position_origin_is_sin_zero_cos_one() {
        let grid = PatchGrid::new(1, 8, 8, 1, 2).unwrap();
        let pos = position_table(&grid, 16).unwrap();
        assert_eq!(pos.row(0), &[0., 0., 0., 0., 1., 1., 1., 1., 0., 0., 0., 0., 1., 1., 1., 1.]);
        assert_eq!(pos, position_table(&grid, 16).unwrap());
        assert!(position_table(&grid, 10).is_err());
    }

    #[test]
    fn frames_differ_only_by_temporal_code() {
        let grid = PatchGrid::new(3, 4, 4, 1, 2).unwrap();
        let d = 8;
        let pos = position_table(&grid, d).unwrap();
        let per = grid.tokens_per_frame();
        let mut t1 = vec![0.0; d];
        let mut t2 = vec![0.0; d];
        sincos_1d(1.0, d, &mut t1);
        sincos_1d(2.0, d, &mut t2);
        for tok in 0..per {
            let diff: Vec<f64> = pos.row(per + tok).iter().zip(pos.row(2 * per + tok)).map(|(a, b)| b - a).collect();
            for j in 0..d {
                assert!((diff[j] - (t2[j] - t1[j])).abs() < 1e-14);
            }
            assert_ne!(pos.row(per + tok), pos.row(2 * per + tok));
        }
    }

    #[test]
    fn embedding_is_additive() {
        let grid = PatchGrid::new(1, 4, 4, 1, 2).unwrap();
        let pos = position_table(&grid, 8).unwrap();
        let proj = Linear::init(&mut Rng::new(1), grid.token_dim(), 8, true).unwrap();
        let patches = Tensor::zeros(&[4, 4]);
        let out = embed_tokens(&patches, &proj, &pos, Some(&Tensor::zeros(&[8]))).unwrap();
        assert_eq!(out.rows(), 5);
        assert!(out.row(0).iter().all(|&v| v == 0.0));
        for r in 0..4 {
            assert_eq!(out.row(r + 1), pos.row(r));
        }
        let short = position_table(&PatchGrid::new(1, 2, 2, 1, 2).unwrap(), 8).unwrap();
        assert!(embed_tokens(&patches, &proj, &short, None).is_err());
    }

    fn grids() -> impl Strategy<Value = PatchGrid> {
        (prop_oneof![Just(2usize), Just(4), Just(8)], 1usize..3, 1usize..4, 1usize..4, 1usize..4)
            .prop_map(|(p, t, hm, wm, c)| PatchGrid::new(t, hm * p, wm * p, c, p).unwrap())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn roundtrip_is_bit_exact(grid in grids(), seed in 0u64..10_000) {
            let z = randn(&mut Rng::new(seed), &grid.latent_shape()).unwrap();
            let tokens = patchify(&z, &grid).unwrap();
            prop_assert_eq!(tokens.rows(), grid.frames * (grid.height / grid.patch) * (grid.width / grid.patch));
            prop_assert_eq!(&depatchify(&tokens, &grid).unwrap(), &z);
            prop_assert_eq!(patchify(&depatchify(&tokens, &grid).unwrap(), &grid).unwrap(), tokens);
        }
    }
}
