//! Attention-derived guidance: the bicubic pixel weight map used to weight
//! gradients, and the Top-K patch selection in its pixel and feature forms.
//!
//! All artifacts are plain constants. They are computed from the clean
//! frame and never differentiated through.

use std::io::Write;

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::io::round_to_u8;
use crate::tensor::{Real, Tensor};

/// Keys cubic convolution parameter.
pub const KEYS_A: f64 = -0.5;

/// Keys cubic convolution kernel with `a = -0.5`.
pub fn keys_kernel(x: f64) -> f64 {
    let a = KEYS_A;
    let x = x.abs();
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    } else {
        0.0
    }
}

/// Nonnegative attention weights at image resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelWeightMap {
    pub values: Tensor<f64>,
}

impl PixelWeightMap {
    pub fn uniform(height: usize, width: usize, value: f64) -> Self {
        Self {
            values: Tensor::full(&[height, width], value),
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            values: self.values.map(|v| v * factor),
        }
    }

    pub fn height(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }

    /// Binary graymap (P5), values scaled so the maximum maps to 255.
    pub fn write_pgm<W: Write>(&self, out: W) -> Result<()> {
        let max = self.values.max_abs();
        let scale = if max > 0.0 { 1.0 / max } else { 0.0 };
        let bytes: Vec<u8> = self.values.data().iter().map(|&v| round_to_u8(v * scale)).collect();
        crate::io::write_pgm(out, self.width(), self.height(), &bytes)
    }
}

/// Binary selection over patches.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchMask {
    bits: Vec<bool>,
    k_count: usize,
}

impl PatchMask {
    pub fn from_bits(bits: Vec<bool>) -> Self {
        let k_count = bits.iter().filter(|&&b| b).count();
        Self { bits, k_count }
    }

    pub fn full(n: usize) -> Self {
        Self::from_bits(vec![true; n])
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn k_count(&self) -> usize {
        self.k_count
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn selected(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i)
    }
}

/// Patch selection upsampled to image resolution, `[H, W]` of 0/1.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelMask {
    pub bits: Tensor<f64>,
}

impl PixelMask {
    pub fn ones_count(&self) -> usize {
        self.bits.data().iter().filter(|&&v| v != 0.0).count()
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        self.bits.data()[y * self.bits.shape()[1] + x] != 0.0
    }

    /// Binary bitmap (P4); selected pixels are written as 1 (black).
    pub fn write_pbm<W: Write>(&self, out: W) -> Result<()> {
        let (h, w) = (self.bits.shape()[0], self.bits.shape()[1]);
        let bits: Vec<bool> = self.bits.data().iter().map(|&v| v != 0.0).collect();
        crate::io::write_pbm(out, w, h, &bits)
    }
}

/// Per-patch loss mask, broadcast over the feature channels when applied.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FlatFeatureMask {
    bits: Vec<bool>,
}

impl FlatFeatureMask {
    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn k_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// The mask expanded to a `[N, channels]` tensor of 0/1.
    pub fn expand<R: Real>(&self, channels: usize) -> Tensor<R> {
        Tensor::from_fn(&[self.bits.len(), channels], |i| {
            if self.bits[i / channels] {
                R::one()
            } else {
                R::zero()
            }
        })
    }

    /// `features ⊙ mask`, zeroing every unselected patch row.
    pub fn apply<R: Real>(&self, features: &Tensor<R>) -> Result<Tensor<R>> {
        let shape = features.shape();
        if shape.len() != 2 || shape[0] != self.bits.len() {
            return Err(Error::shape("flat_mask_apply", shape, &[self.bits.len()]));
        }
        features.zip_map(&self.expand(shape[1]), |f, m| f * m)
    }
}

/// Row-major reshape of `g²` patch scores into a `g×g` grid.
pub fn scores_to_grid<R: Real>(scores: &Tensor<R>) -> Result<Tensor<R>> {
    let n = scores.numel();
    let g = (n as f64).sqrt().round() as usize;
    if g * g != n {
        return Err(Error::invalid("scores_to_grid", format!("{n} patches do not form a square grid")));
    }
    scores.clone().reshaped(&[g, g])
}

/// Bicubic upsampling with the Keys kernel, half-pixel centers and clamped
/// edge samples. Negative lobes are clamped so the result is a valid weight.
pub fn bicubic_resize(grid: &Tensor<f64>, height: usize, width: usize) -> Result<PixelWeightMap> {
    let shape = grid.shape();
    if shape.len() != 2 {
        return Err(Error::invalid("bicubic_resize", format!("expected a 2-D grid, got {shape:?}")));
    }
    let (gh, gw) = (shape[0], shape[1]);
    if gh < 2 || gw < 2 {
        return Err(Error::invalid("bicubic_resize", "grid must be at least 2x2"));
    }
    if height < gh || width < gw {
        return Err(Error::invalid(
            "bicubic_resize",
            format!("target {height}x{width} is smaller than the {gh}x{gw} grid"),
        ));
    }
    let ys = taps(gh, height);
    let xs = taps(gw, width);
    let src = grid.data();
    let mut out = Vec::with_capacity(height * width);
    for (yi, yw) in &ys {
        for (xi, xw) in &xs {
            let mut acc = 0.0;
            for (&r, &wy) in yi.iter().zip(yw) {
                for (&c, &wx) in xi.iter().zip(xw) {
                    acc += wy * wx * src[r * gw + c];
                }
            }
            out.push(acc.max(0.0));
        }
    }
    Ok(PixelWeightMap {
        values: Tensor::new(&[height, width], out)?,
    })
}

/// Source indices (clamped) and kernel weights of the four taps for every
/// output coordinate along one axis.
fn taps(src_len: usize, dst_len: usize) -> Vec<([usize; 4], [f64; 4])> {
    let ratio = src_len as f64 / dst_len as f64;
    (0..dst_len)
        .map(|d| {
            let s = (d as f64 + 0.5) * ratio - 0.5;
            let base = s.floor();
            let t = s - base;
            let mut idx = [0usize; 4];
            let mut w = [0.0; 4];
            for j in 0..4 {
                let i = base as isize - 1 + j as isize;
                idx[j] = i.clamp(0, src_len as isize - 1) as usize;
                w[j] = keys_kernel(t - (j as f64 - 1.0));
            }
            (idx, w)
        })
        .collect()
}

/// `ceil(ratio · n)`, at least one.
pub fn topk_count(ratio: f64, n: usize) -> usize {
    ((ratio * n as f64).ceil() as usize).clamp(1, n)
}

/// Selects the `ceil(ratio·N)` highest scores; ties go to the smaller index.
pub fn topk_mask<R: Real>(scores: &Tensor<R>, ratio: f64) -> Result<PatchMask> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::invalid("topk_mask", format!("ratio {ratio} outside (0, 1]")));
    }
    let n = scores.numel();
    let k = topk_count(ratio, n);
    let s = scores.data();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| s[j].partial_cmp(&s[i]).unwrap_or(std::cmp::Ordering::Equal).then(i.cmp(&j)));
    let mut bits = vec![false; n];
    for &i in &order[..k] {
        bits[i] = true;
    }
    Ok(PatchMask { bits, k_count: k })
}

/// Nearest-neighbour block fill of a patch mask to image resolution.
pub fn mask_to_pixels(mask: &PatchMask, config: &EncoderConfig) -> Result<PixelMask> {
    if mask.len() != config.num_patches() {
        return Err(Error::invalid(
            "mask_to_pixels",
            format!("mask has {} patches, encoder grid has {}", mask.len(), config.num_patches()),
        ));
    }
    let (h, w, p, gw) = (config.image_h, config.image_w, config.patch_size, config.grid_w());
    let bits = Tensor::from_fn(&[h, w], |i| {
        let (y, x) = (i / w, i % w);
        if mask.bits[(y / p) * gw + x / p] {
            1.0
        } else {
            0.0
        }
    });
    Ok(PixelMask { bits })
}

pub fn flatten_mask(mask: &PatchMask) -> FlatFeatureMask {
    FlatFeatureMask {
        bits: mask.bits.clone(),
    }
}

/// Everything the attack strategies consume, derived from one set of scores.
#[derive(Clone, Debug, PartialEq)]
pub struct Guidance {
    pub scores: Tensor<f64>,
    pub weight_map: PixelWeightMap,
    pub patch_mask: PatchMask,
    pub pixel_mask: PixelMask,
    pub feature_mask: FlatFeatureMask,
}

impl Guidance {
    pub fn from_scores<R: Real>(scores: &Tensor<R>, ratio: f64, config: &EncoderConfig) -> Result<Self> {
        let scores = scores.cast::<f64>();
        if scores.numel() != config.num_patches() {
            return Err(Error::shape("guidance", scores.shape(), &[config.num_patches()]));
        }
        let grid = scores
            .clone()
            .reshaped(&[config.grid_h(), config.grid_w()])?;
        let weight_map = bicubic_resize(&grid, config.image_h, config.image_w)?;
        let patch_mask = topk_mask(&scores, ratio)?;
        let pixel_mask = mask_to_pixels(&patch_mask, config)?;
        let feature_mask = flatten_mask(&patch_mask);
        Ok(Self {
            scores,
            weight_map,
            patch_mask,
            pixel_mask,
            feature_mask,
        })
    }

    /// Guidance that leaves every strategy equivalent to the plain attack:
    /// unit weights and a full mask.
    pub fn neutral(config: &EncoderConfig) -> Self {
        let n = config.num_patches();
        let patch_mask = PatchMask::full(n);
        Self {
            scores: Tensor::full(&[n], 1.0 / n as f64),
            weight_map: PixelWeightMap::uniform(config.image_h, config.image_w, 1.0),
            pixel_mask: mask_to_pixels(&patch_mask, config).expect("grid matches"),
            feature_mask: flatten_mask(&patch_mask),
            patch_mask,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_is_row_major() {
        let s = Tensor::new(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let g = scores_to_grid(&s).unwrap();
        assert_eq!(g.shape(), &[2, 2]);
        assert_eq!(g.data(), &[1.0, 2.0, 3.0, 4.0]);
        let big = Tensor::<f64>::zeros(&[256]);
        assert_eq!(scores_to_grid(&big).unwrap().shape(), &[16, 16]);
        assert!(scores_to_grid(&Tensor::<f64>::zeros(&[5])).is_err());
    }

    #[test]
    fn kernel_values() {
        assert_eq!(keys_kernel(0.0), 1.0);
        assert_eq!(keys_kernel(1.0), 0.0);
        assert_eq!(keys_kernel(2.0), 0.0);
        // a = -0.5: k(0.5) = 1.5·0.125 − 2.5·0.25 + 1
        assert!((keys_kernel(0.5) - 0.5625).abs() < 1e-15);
        assert!((keys_kernel(1.5) + 0.0625).abs() < 1e-15);
    }

    #[test]
    fn constant_grid_stays_constant() {
        let g = Tensor::full(&[8, 8], 0.37);
        let m = bicubic_resize(&g, 64, 64).unwrap();
        assert!(m.values.data().iter().all(|v| (v - 0.37).abs() < 1e-12));
    }

    #[test]
    fn resize_rejects_degenerate_sizes() {
        assert!(bicubic_resize(&Tensor::zeros(&[1, 1]), 4, 4).is_err());
        assert!(bicubic_resize(&Tensor::zeros(&[4, 4]), 2, 8).is_err());
    }

    #[test]
    fn topk_counts_and_ties() {
        let s = Tensor::<f64>::zeros(&[256]);
        assert_eq!(topk_mask(&s, 0.1).unwrap().k_count(), 26);
        let s = Tensor::<f64>::full(&[10], 0.5);
        let m = topk_mask(&s, 0.3).unwrap();
        assert_eq!(m.selected().collect::<Vec<_>>(), vec![0, 1, 2]);
        assert!(topk_mask(&s, 1.0).unwrap().bits().iter().all(|&b| b));
        assert!(topk_mask(&s, 0.0).is_err());
        assert!(topk_mask(&s, 1.5).is_err());
    }

    #[test]
    fn topk_prefers_large_scores() {
        let s = Tensor::new(&[5], vec![0.1, 0.9, 0.3, 0.9, 0.5]).unwrap();
        let m = topk_mask(&s, 0.5).unwrap();
        assert_eq!(m.selected().collect::<Vec<_>>(), vec![1, 3, 4]);
    }

    #[test]
    fn pixel_mask_block_fill() {
        let cfg = EncoderConfig::default();
        let mut bits = vec![false; 64];
        bits[9] = true;
        let pm = mask_to_pixels(&PatchMask::from_bits(bits), &cfg).unwrap();
        assert_eq!(pm.ones_count(), 64);
        for y in 0..64 {
            for x in 0..64 {
                assert_eq!(pm.contains(y, x), (8..16).contains(&y) && (8..16).contains(&x));
            }
        }
        let full = mask_to_pixels(&PatchMask::full(64), &cfg).unwrap();
        assert_eq!(full.ones_count(), 64 * 64);
        assert!(mask_to_pixels(&PatchMask::full(10), &cfg).is_err());
    }

    #[test]
    fn flat_mask_zeroes_unselected_rows() {
        let scores = Tensor::from_fn(&[256], |i| ((i * 37) % 256) as f64);
        let pm = topk_mask(&scores, 0.1).unwrap();
        let flat = flatten_mask(&pm);
        assert_eq!(flat.bits(), pm.bits());
        let f = Tensor::<f64>::ones(&[256, 96]);
        let masked = flat.apply(&f).unwrap();
        let zeros = masked.data().iter().filter(|&&v| v == 0.0).count();
        assert_eq!(zeros, (256 - 26) * 96);
        let live_rows = masked.data().chunks(96).filter(|r| r.iter().all(|&v| v == 1.0)).count();
        assert_eq!(live_rows, 26);
    }

    #[test]
    fn guidance_artifacts_agree() {
        let cfg = EncoderConfig::default();
        let scores = Tensor::from_fn(&[64], |i| ((i * 13) % 64) as f64 / 64.0);
        let g = Guidance::from_scores(&scores, 0.1, &cfg).unwrap();
        assert_eq!(g.patch_mask.k_count(), 7);
        assert_eq!(g.pixel_mask.ones_count(), 7 * 64);
        for p in 0..64 {
            let (py, px) = (p / 8, p % 8);
            assert_eq!(g.pixel_mask.contains(py * 8 + 3, px * 8 + 5), g.feature_mask.bits()[p]);
        }
        assert!(g.weight_map.values.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn exports_have_netpbm_headers() {
        let cfg = EncoderConfig::default();
        let g = Guidance::neutral(&cfg);
        let mut pgm = Vec::new();
        g.weight_map.write_pgm(&mut pgm).unwrap();
        assert!(pgm.starts_with(b"P5\n64 64\n255\n"));
        assert_eq!(pgm.len(), 13 + 64 * 64);
        assert!(pgm[13..].iter().all(|&b| b == 255));
        let mut pbm = Vec::new();
        g.pixel_mask.write_pbm(&mut pbm).unwrap();
        assert!(pbm.starts_with(b"P4\n64 64\n"));
        assert_eq!(pbm.len(), 9 + 64 * 8);
    }
}
