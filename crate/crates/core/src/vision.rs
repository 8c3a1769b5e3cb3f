//! Frozen stand-ins for the two visual towers.
//!
//! The local encoder maps every patch independently, so a row of its output
//! depends on exactly one patch. The global encoder embeds patches, adds
//! positional embeddings, then runs `mixing_depth` full-attention blocks whose
//! output replaces the content stream (no residual), so single-patch detail
//! is averaged across all tokens while the positional signal is re-injected
//! after every block.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{gelu, layer_norm, masked_attention, BoolMatrix, Rng, Scalar, Tensor2D};
use crate::params::NamedTensors;

/// Square RGB image, row-major `(y, x, channel)` with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    size: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height != width {
            return Err(Error::Validation(format!(
                "images must be square, got {height}x{width}"
            )));
        }
        if data.len() != height * width * 3 {
            return Err(Error::Dimension(format!(
                "{} values for a {height}x{width}x3 image",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Validation(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self { size: height, data })
    }

    pub fn filled(size: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(size * size * 3);
        for _ in 0..size * size {
            data.extend_from_slice(&rgb);
        }
        Self { size, data }
    }

    #[inline]
    pub fn size(&self) -> usize {
        self.size
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.size + x) * 3 + c]
    }

    /// Sets a pixel channel, clamping into `[0, 1]`.
    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.size + x) * 3 + c] = v.clamp(0.0, 1.0);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VisionConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub d_glo: usize,
    pub d_loc: usize,
    pub mixing_depth: usize,
}

impl Default for VisionConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch_size: 8,
            d_glo: 64,
            d_loc: 48,
            mixing_depth: 2,
        }
    }
}

impl VisionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.d_glo == 0 || self.d_loc == 0 {
            return Err(Error::Config("encoder widths must be positive".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Tokens per image, identical for both encoders.
    pub fn n_tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }
}

/// Splits an image into non-overlapping `p x p` patches in raster order; each
/// row is one patch flattened as `(y, x, channel)`.
pub fn patchify<T: Scalar>(img: &Image, p: usize) -> Result<Tensor2D<T>> {
    let size = img.size();
    if p == 0 || size % p != 0 {
        return Err(Error::Config(format!(
            "image side {size} is not divisible by patch size {p}"
        )));
    }
    let grid = size / p;
    let mut out = Tensor2D::zeros(grid * grid, p * p * 3);
    for gy in 0..grid {
        for gx in 0..grid {
            let row = out.row_mut(gy * grid + gx);
            let mut idx = 0;
            for y in 0..p {
                for x in 0..p {
                    for c in 0..3 {
                        row[idx] = T::of(img.get(gy * p + y, gx * p + x, c) as f64);
                        idx += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &Tensor2D<f32>, p: usize) -> Result<Image> {
    let grid = (patches.rows() as f64).sqrt() as usize;
    if grid * grid != patches.rows() || patches.cols() != p * p * 3 {
        return Err(Error::Dimension(format!(
            "{:?} is not a square grid of {p}x{p} patches",
            patches.shape()
        )));
    }
    let size = grid * p;
    let mut data = vec![0.0f32; size * size * 3];
    for gy in 0..grid {
        for gx in 0..grid {
            let row = patches.row(gy * grid + gx);
            let mut idx = 0;
            for y in 0..p {
                for x in 0..p {
                    for c in 0..3 {
                        data[((gy * p + y) * size + gx * p + x) * 3 + c] = row[idx];
                        idx += 1;
                    }
                }
            }
        }
    }
    Image::new(size, size, data)
}

fn gaussian<T: Scalar>(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Tensor2D<T> {
    let data = (0..rows * cols).map(|_| T::of(rng.normal() * std)).collect();
    Tensor2D::from_vec(rows, cols, data).expect("length matches shape")
}

const TEXTURE_GAIN: f64 = 4.0;

/// Per-patch encoder: affine map, GELU, per-token normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalEncoder<T = f32> {
    pub weight: Tensor2D<T>,
    pub bias: Tensor2D<T>,
}

impl<T: Scalar> LocalEncoder<T> {
    /// The first half of the output channels are plain random projections.
    /// The second half are texture filters: zero mean per color channel
    /// over the patch, so they ignore flat color and respond only to
    /// variation inside the patch.
    pub fn init(cfg: &VisionConfig, rng: &mut Rng) -> Self {
        let fan_in = cfg.patch_dim();
        let std = (1.0 / fan_in as f64).sqrt();
        let mut weight: Tensor2D<T> = gaussian(rng, fan_in, cfg.d_loc, std);
        let pixels = fan_in / 3;
        for col in cfg.d_loc / 2..cfg.d_loc {
            for ch in 0..3 {
                let mean = (0..pixels)
                    .map(|px| weight.get(px * 3 + ch, col).as_f64())
                    .sum::<f64>()
                    / pixels as f64;
                for px in 0..pixels {
                    let w = weight.get(px * 3 + ch, col).as_f64();
                    weight.set(px * 3 + ch, col, T::of((w - mean) * TEXTURE_GAIN));
                }
            }
        }
        Self {
            weight,
            bias: gaussian(rng, 1, cfg.d_loc, 0.5),
        }
    }

    pub fn patch_size(&self) -> usize {
        ((self.weight.rows() / 3) as f64).sqrt() as usize
    }

    pub fn cast<U: Scalar>(&self) -> LocalEncoder<U> {
        LocalEncoder {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
        }
    }
}

impl<T: Scalar> NamedTensors<T> for LocalEncoder<T> {
    fn named(&self) -> Vec<(String, &Tensor2D<T>)> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor2D<T>)> {
        vec![
            ("weight".into(), &mut self.weight),
            ("bias".into(), &mut self.bias),
        ]
    }
}

/// Dense patch-wise features, `N x d_loc`.
pub fn encode_local<T: Scalar>(img: &Image, enc: &LocalEncoder<T>) -> Result<Tensor2D<T>> {
    let patches = patchify::<T>(img, enc.patch_size())?;
    let mut z = patches.matmul(&enc.weight)?;
    z.add_row_broadcast(&enc.bias);
    let act = z.map(gelu);
    Ok(layer_norm(&act, None, None).0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixingBlock<T = f32> {
    pub wq: Tensor2D<T>,
    pub wk: Tensor2D<T>,
    pub wv: Tensor2D<T>,
}

/// Patch embedding, positional embedding and full-attention mixing blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalEncoder<T = f32> {
    pub patch_weight: Tensor2D<T>,
    pub patch_bias: Tensor2D<T>,
    pub pos: Tensor2D<T>,
    pub blocks: Vec<MixingBlock<T>>,
}

impl<T: Scalar> GlobalEncoder<T> {
    pub fn init(cfg: &VisionConfig, rng: &mut Rng) -> Self {
        let fan_in = cfg.patch_dim();
        let d = cfg.d_glo;
        let inv = (1.0 / d as f64).sqrt();
        Self {
            patch_weight: gaussian(rng, fan_in, d, (1.0 / fan_in as f64).sqrt()),
            patch_bias: gaussian(rng, 1, d, 0.1),
            pos: gaussian(rng, cfg.n_tokens(), d, 1.0),
            blocks: (0..cfg.mixing_depth)
                .map(|_| MixingBlock {
                    // Small query/key weights keep the attention close to a
                    // uniform average over all patches.
                    wq: gaussian(rng, d, d, 0.1 * inv),
                    wk: gaussian(rng, d, d, 0.1 * inv),
                    wv: gaussian(rng, d, d, inv),
                })
                .collect(),
        }
    }

    pub fn patch_size(&self) -> usize {
        ((self.patch_weight.rows() / 3) as f64).sqrt() as usize
    }

    pub fn cast<U: Scalar>(&self) -> GlobalEncoder<U> {
        GlobalEncoder {
            patch_weight: self.patch_weight.cast(),
            patch_bias: self.patch_bias.cast(),
            pos: self.pos.cast(),
            blocks: self
                .blocks
                .iter()
                .map(|b| MixingBlock {
                    wq: b.wq.cast(),
                    wk: b.wk.cast(),
                    wv: b.wv.cast(),
                })
                .collect(),
        }
    }
}

impl<T: Scalar> NamedTensors<T> for GlobalEncoder<T> {
    fn named(&self) -> Vec<(String, &Tensor2D<T>)> {
        let mut out = vec![
            ("patch_weight".into(), &self.patch_weight),
            ("patch_bias".into(), &self.patch_bias),
            ("pos".into(), &self.pos),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}.wq"), &b.wq));
            out.push((format!("block{i}.wk"), &b.wk));
            out.push((format!("block{i}.wv"), &b.wv));
        }
        out
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor2D<T>)> {
        let mut out = vec![
            ("patch_weight".into(), &mut self.patch_weight),
            ("patch_bias".into(), &mut self.patch_bias),
            ("pos".into(), &mut self.pos),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("block{i}.wq"), &mut b.wq));
            out.push((format!("block{i}.wk"), &mut b.wk));
            out.push((format!("block{i}.wv"), &mut b.wv));
        }
        out
    }
}

/// Holistic features, `N x d_glo`; with `mixing_depth >= 1` every row
/// depends on every patch.
pub fn encode_global<T: Scalar>(img: &Image, enc: &GlobalEncoder<T>) -> Result<Tensor2D<T>> {
    let patches = patchify::<T>(img, enc.patch_size())?;
    if patches.rows() != enc.pos.rows() {
        return Err(Error::Dimension(format!(
            "{} patches but {} positional embeddings",
            patches.rows(),
            enc.pos.rows()
        )));
    }
    let mut h = patches.matmul(&enc.patch_weight)?;
    h.add_row_broadcast(&enc.patch_bias);
    h.add_assign(&enc.pos);
    let all = BoolMatrix::new(h.rows(), h.rows(), true);
    for block in &enc.blocks {
        let q = h.matmul(&block.wq)?;
        let k = h.matmul(&block.wk)?;
        let v = h.matmul(&block.wv)?;
        let mixed = masked_attention(&q, &k, &v, &all)?;
        h = layer_norm(&mixed, None, None).0;
        h.add_assign(&enc.pos);
    }
    Ok(h)
}
