//! Synthetic stand-in for segmented blood-smear cell images.
//!
//! Every sample is a pink cell disc on a black field, with a few smooth
//! low-contrast blobs in the cytoplasm. Parasitized samples additionally
//! carry one to three small dark-violet dots near the cell centre. The dots
//! barely move the image mean, so the classes are told apart by local
//! structure rather than global intensity.

use ::image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::image::{normalize_rgb, resample};
use super::{mix_seed, DatasetManifest, SampleRecord, SampleSource, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const NATIVE_MIN: u32 = 56;
pub const NATIVE_MAX: u32 = 72;

/// Native-size dimensions `(height, width)` for a sample seed.
pub fn synth_dims(seed: u64) -> (u32, u32) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    dims_from(&mut rng)
}

// near-square frames: the cell stays round after resampling to r×r
fn dims_from(rng: &mut ChaCha8Rng) -> (u32, u32) {
    let h = rng.gen_range(NATIVE_MIN..=NATIVE_MAX);
    let w = (h as i32 + rng.gen_range(-3..=3)) as u32;
    (h, w)
}

pub fn synth_rgb(seed: u64, label: u8) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = dims_from(&mut rng);
    let side = h.min(w) as f32;
    let cy = h as f32 / 2.0 + rng.gen_range(-1.5..1.5);
    let cx = w as f32 / 2.0 + rng.gen_range(-1.5..1.5);
    let radius = 0.42 * side * rng.gen_range(0.97..1.03);
    let tint: [f32; 3] = std::array::from_fn(|_| rng.gen_range(-0.03..0.03));
    let base = [0.80 + tint[0], 0.60 + tint[1], 0.66 + tint[2]];

    struct Blob {
        y: f32,
        x: f32,
        sigma: f32,
        amp: f32,
    }
    let blobs: Vec<Blob> = (0..3)
        .map(|_| {
            let (dy, dx) = point_in_disc(&mut rng, 0.7 * radius);
            Blob {
                y: cy + dy,
                x: cx + dx,
                sigma: radius * rng.gen_range(0.3..0.5),
                amp: rng.gen_range(-0.04..0.04),
            }
        })
        .collect();

    let dots: Vec<(f32, f32, f32)> = if label == 1 {
        let count = rng.gen_range(1..=3);
        (0..count)
            .map(|_| {
                let (dy, dx) = point_in_disc(&mut rng, 0.2 * radius);
                (cy + dy, cx + dx, 0.08 * side * rng.gen_range(0.8..1.2))
            })
            .collect()
    } else {
        Vec::new()
    };
    const DOT: [f32; 3] = [0.35, 0.12, 0.45];

    let mut img = RgbImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let (fy, fx) = (y as f32 + 0.5, x as f32 + 0.5);
            let d = ((fy - cy).powi(2) + (fx - cx).powi(2)).sqrt();
            let cell_alpha = (radius - d + 0.75).clamp(0.0, 1.5) / 1.5;
            let shade: f32 = blobs
                .iter()
                .map(|b| {
                    let r2 = (fy - b.y).powi(2) + (fx - b.x).powi(2);
                    b.amp * (-r2 / (2.0 * b.sigma * b.sigma)).exp()
                })
                .sum();
            let mut rgb = base.map(|c| (c + shade) * cell_alpha);
            for &(dy, dx, dr) in &dots {
                let dd = ((fy - dy).powi(2) + (fx - dx).powi(2)).sqrt();
                let a = (dr - dd + 0.5).clamp(0.0, 1.0) * cell_alpha;
                for c in 0..3 {
                    rgb[c] = rgb[c] * (1.0 - a) + DOT[c] * a;
                }
            }
            img.put_pixel(x, y, Rgb(rgb.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)));
        }
    }
    img
}

fn point_in_disc(rng: &mut ChaCha8Rng, r: f32) -> (f32, f32) {
    let rho = r * rng.gen::<f32>().sqrt();
    let theta = rng.gen_range(0.0..std::f32::consts::TAU);
    (rho * theta.sin(), rho * theta.cos())
}

/// Native-resolution synthetic sample, normalized to `[0, 1]`.
pub fn synth_image(seed: u64, label: u8) -> Tensor {
    normalize_rgb(&synth_rgb(seed, label))
}

/// Balanced manifest of `n` synthetic records with alternating labels.
pub fn synth_manifest(n: usize, seed: u64) -> DatasetManifest {
    let records = (0..n)
        .map(|i| {
            let sample_seed = mix_seed(seed, i as u64);
            let (h, w) = synth_dims(sample_seed);
            SampleRecord {
                id: format!("synth-{i:06}"),
                source: SampleSource::Synthetic { seed: sample_seed },
                label: (i % 2) as u8,
                height: h as usize,
                width: w as usize,
                split: Split::Unassigned,
            }
        })
        .collect();
    DatasetManifest::new(records)
}

#[derive(Clone, Debug, PartialEq)]
pub struct InMemoryDataset {
    pub ids: Vec<String>,
    pub labels: Vec<u8>,
    /// One `(r, r, 3)` tensor per sample.
    pub images: Vec<Tensor>,
}

/// `n` synthetic samples resampled to `r×r`; `n` must be even and ≥ 2.
pub fn synth_dataset(n: usize, r: usize, seed: u64) -> Result<InMemoryDataset> {
    if n < 2 || !n.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("synthetic dataset size {n} must be even and >= 2")));
    }
    let manifest = synth_manifest(n, seed);
    let mut ds = InMemoryDataset { ids: Vec::new(), labels: Vec::new(), images: Vec::new() };
    for rec in &manifest.records {
        let SampleSource::Synthetic { seed } = rec.source else { unreachable!() };
        ds.ids.push(rec.id.clone());
        ds.labels.push(rec.label);
        ds.images.push(resample(&synth_image(seed, rec.label), r)?);
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dims_match_generated_image() {
        for s in 0..5 {
            let (h, w) = synth_dims(s);
            let img = synth_rgb(s, 1);
            assert_eq!((img.height(), img.width()), (h, w));
        }
    }

    #[test]
    fn odd_or_tiny_sizes_rejected() {
        assert!(synth_dataset(3, 32, 0).is_err());
        assert!(synth_dataset(0, 32, 0).is_err());
    }

    #[test]
    fn parasitized_differs_from_uninfected_only_by_dots() {
        // same seed: identical geometry and shading, dots are the only change
        let clean = synth_image(11, 0);
        let dotted = synth_image(11, 1);
        let changed = clean.data().iter().zip(dotted.data()).filter(|(a, b)| a != b).count();
        assert!(changed > 0);
        assert!(changed < clean.numel() / 10);
    }
}
