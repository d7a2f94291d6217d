//! Per-image transforms on `(height, width, 3)` tensors with values in `[0, 1]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHANNELS: usize = 3;

fn dims(image: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match image.shape() {
        &[h, w, CHANNELS] => Ok((h, w)),
        other => Err(Error::shape(op, format!("expected (height, width, 3), got {other:?}"))),
    }
}

/// 8-bit RGB to `[0, 1]` floats by division by 255.
pub fn normalize(pixels: &[u8], height: usize, width: usize) -> Result<Tensor> {
    Tensor::new(
        vec![height, width, CHANNELS],
        pixels.iter().map(|&p| p as f32 / 255.0).collect(),
    )
}

pub fn normalize_rgb(img: &image::RgbImage) -> Tensor {
    normalize(img.as_raw(), img.height() as usize, img.width() as usize).expect("rgb buffer is h·w·3")
}

/// Bilinear resampling to `(r, r, 3)` with half-pixel centres and edge clamping.
pub fn resample(image: &Tensor, r: usize) -> Result<Tensor> {
    resize(image, r, r)
}

pub fn resize(image: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (h, w) = dims(image, "resample")?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument("resample target must be non-empty".into()));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(image.clone());
    }
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f32)> {
        let scale = inp as f32 / out as f32;
        (0..out)
            .map(|o| {
                let src = ((o as f32 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f32);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, src - i0 as f32)
            })
            .collect()
    };
    let ys = taps(out_h, h);
    let xs = taps(out_w, w);
    let src = image.data();
    let px = |y: usize, x: usize, c: usize| src[(y * w + x) * CHANNELS + c];
    let mut out = Vec::with_capacity(out_h * out_w * CHANNELS);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for c in 0..CHANNELS {
                let top = px(y0, x0, c) * (1.0 - fx) + px(y0, x1, c) * fx;
                let bottom = px(y1, x0, c) * (1.0 - fx) + px(y1, x1, c) * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Tensor::new(vec![out_h, out_w, CHANNELS], out)
}

pub fn flip_horizontal(image: &Tensor) -> Result<Tensor> {
    let (h, w) = dims(image, "flip")?;
    let src = image.data();
    let mut out = Vec::with_capacity(src.len());
    for y in 0..h {
        for x in (0..w).rev() {
            out.extend_from_slice(&src[(y * w + x) * CHANNELS..][..CHANNELS]);
        }
    }
    Tensor::new(vec![h, w, CHANNELS], out)
}

pub fn flip_vertical(image: &Tensor) -> Result<Tensor> {
    let (h, w) = dims(image, "flip")?;
    let row = w * CHANNELS;
    let src = image.data();
    let mut out = Vec::with_capacity(src.len());
    for y in (0..h).rev() {
        out.extend_from_slice(&src[y * row..][..row]);
    }
    Tensor::new(vec![h, w, CHANNELS], out)
}

/// Rotate clockwise by `quarter_turns × 90°`.
pub fn rotate(image: &Tensor, quarter_turns: usize) -> Result<Tensor> {
    let mut img = image.clone();
    for _ in 0..quarter_turns % 4 {
        let (h, w) = dims(&img, "rotate")?;
        let src = img.data();
        let mut out = vec![0.0; src.len()];
        // new shape (w, h): out[x][h-1-y] = src[y][x]
        for y in 0..h {
            for x in 0..w {
                let dst = (x * h + (h - 1 - y)) * CHANNELS;
                out[dst..dst + CHANNELS].copy_from_slice(&src[(y * w + x) * CHANNELS..][..CHANNELS]);
            }
        }
        img = Tensor::new(vec![w, h, CHANNELS], out)?;
    }
    Ok(img)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationConfig {
    pub horizontal_flip: bool,
    pub vertical_flip: bool,
    pub rotate: bool,
    /// Brightness is scaled by a factor drawn from `1 ± brightness`; 0 disables.
    pub brightness: f32,
}

impl AugmentationConfig {
    pub fn none() -> Self {
        Self { horizontal_flip: false, vertical_flip: false, rotate: false, brightness: 0.0 }
    }

    pub fn is_identity(&self) -> bool {
        !self.horizontal_flip && !self.vertical_flip && !self.rotate && self.brightness == 0.0
    }
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self { horizontal_flip: true, vertical_flip: true, rotate: true, brightness: 0.1 }
    }
}

/// Apply each enabled transform independently with probability ½, driven
/// entirely by `seed`.
pub fn augment(image: &Tensor, cfg: &AugmentationConfig, seed: u64) -> Result<Tensor> {
    dims(image, "augment")?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // draw every coin regardless of flags so enabling one transform does not
    // reshuffle the others
    let coins: [bool; 4] = std::array::from_fn(|_| rng.gen_bool(0.5));
    let turns = rng.gen_range(1..=3usize);
    let factor = 1.0 + rng.gen_range(-1.0f32..=1.0) * cfg.brightness;

    let mut img = image.clone();
    if cfg.horizontal_flip && coins[0] {
        img = flip_horizontal(&img)?;
    }
    if cfg.vertical_flip && coins[1] {
        img = flip_vertical(&img)?;
    }
    if cfg.rotate && coins[2] {
        img = rotate(&img, turns)?;
    }
    if cfg.brightness > 0.0 && coins[3] {
        img = img.map(|v| (v * factor).clamp(0.0, 1.0));
    }
    Ok(img)
}
