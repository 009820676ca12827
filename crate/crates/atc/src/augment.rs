//! Stochastic image augmentations.
//!
//! Random shift translates each image by up to `pad` whole pixels with edge
//! replication; subpixel random shift translates by a continuous offset
//! below one pixel using bilinear interpolation, cheap enough to apply to
//! compressed latent images during policy training.
//!
//! One offset is drawn per image and shared across its channels (and any
//! stacked frames), keeping the content of one observation coherent. Anchor
//! and positive batches are augmented by independent calls.

use serde::{Deserialize, Serialize};

use crate::error::{AtcError, Result};
use crate::numerics::{par, Tensor};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomShiftSpec {
    /// Maximum shift, in whole pixels, per coordinate.
    pub pad: usize,
    /// Probability of augmenting each image at all.
    pub apply_probability: f32,
}

impl Default for RandomShiftSpec {
    fn default() -> Self {
        RandomShiftSpec { pad: 4, apply_probability: 1.0 }
    }
}

impl RandomShiftSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.apply_probability) {
            return Err(AtcError::config(format!(
                "apply_probability {} outside [0, 1]",
                self.apply_probability
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubpixelShiftSpec {
    /// Maximum displacement per coordinate, in pixels; at most 1 so the
    /// 1-pixel edge padding always covers the sampled neighborhood.
    pub max_displacement: f32,
}

impl Default for SubpixelShiftSpec {
    fn default() -> Self {
        SubpixelShiftSpec { max_displacement: 0.5 }
    }
}

impl SubpixelShiftSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.max_displacement) {
            return Err(AtcError::config(format!(
                "max_displacement {} outside [0, 1]",
                self.max_displacement
            )));
        }
        Ok(())
    }
}

/// Translate one plane by whole pixels, replicating edge values.
pub fn shift_plane(src: &[f32], h: usize, w: usize, dy: i32, dx: i32, dst: &mut [f32]) {
    // columns [x_lo, x_hi) map in bounds; outside that, the edge replicates
    let x_lo = (-dx).clamp(0, w as i32) as usize;
    let x_hi = (w as i32 - dx).clamp(0, w as i32) as usize;
    for y in 0..h {
        let sy = (y as i32 + dy).clamp(0, h as i32 - 1) as usize;
        let src_row = &src[sy * w..(sy + 1) * w];
        let dst_row = &mut dst[y * w..(y + 1) * w];
        dst_row[..x_lo].fill(src_row[0]);
        if x_hi > x_lo {
            let s0 = (x_lo as i32 + dx) as usize;
            dst_row[x_lo..x_hi].copy_from_slice(&src_row[s0..s0 + (x_hi - x_lo)]);
        }
        dst_row[x_hi..].fill(src_row[w - 1]);
    }
}

/// Bilinear sample of one plane at a continuous offset with edge clamping:
/// each output pixel is the linearly weighted average of the four nearest
/// input pixels around (y + dy, x + dx).
pub fn bilinear_shift_plane(src: &[f32], h: usize, w: usize, dy: f32, dx: f32, dst: &mut [f32]) {
    let fetch = |y: i32, x: i32| -> f32 {
        let cy = y.clamp(0, h as i32 - 1) as usize;
        let cx = x.clamp(0, w as i32 - 1) as usize;
        src[cy * w + cx]
    };
    for y in 0..h {
        let sy = y as f32 + dy;
        let y0 = sy.floor();
        let wy = sy - y0;
        let y0 = y0 as i32;
        for x in 0..w {
            let sx = x as f32 + dx;
            let x0 = sx.floor();
            let wx = sx - x0;
            let x0 = x0 as i32;
            dst[y * w + x] = (1.0 - wy) * (1.0 - wx) * fetch(y0, x0)
                + (1.0 - wy) * wx * fetch(y0, x0 + 1)
                + wy * (1.0 - wx) * fetch(y0 + 1, x0)
                + wy * wx * fetch(y0 + 1, x0 + 1);
        }
    }
}

/// Offset drawn for each image of a batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DrawnShift {
    pub dy: i32,
    pub dx: i32,
    pub applied: bool,
}

/// Draw per-image integer offsets. Sampling is separated from application so
/// the pixel work can run in parallel without touching the stream.
pub fn draw_shifts(n: usize, spec: &RandomShiftSpec, rng: &mut Rng) -> Vec<DrawnShift> {
    (0..n)
        .map(|_| {
            if rng.bernoulli(spec.apply_probability) {
                let pad = spec.pad as i32;
                DrawnShift { dy: rng.range_i32(-pad, pad), dx: rng.range_i32(-pad, pad), applied: true }
            } else {
                DrawnShift { dy: 0, dx: 0, applied: false }
            }
        })
        .collect()
}

/// Random shift over a `[n, c, h, w]` batch.
pub fn random_shift(batch: &Tensor, spec: &RandomShiftSpec, rng: &mut Rng) -> Result<Tensor> {
    spec.validate()?;
    let [n, c, h, w] = batch.shape()[..] else {
        return Err(AtcError::config(format!("random_shift expects [n, c, h, w], got {:?}", batch.shape())));
    };
    if 2 * spec.pad >= h.min(w) {
        return Err(AtcError::config(format!(
            "shift pad {} too large for {}x{} images",
            spec.pad, h, w
        )));
    }
    let shifts = draw_shifts(n, spec, rng);
    let mut out = vec![0.0f32; batch.numel()];
    let src = batch.data();
    par::for_each_chunk_mut(&mut out, par::IMAGE_CHUNK * c * h * w, |ci, block| {
        let n0 = ci * par::IMAGE_CHUNK;
        for (i, img_out) in block.chunks_mut(c * h * w).enumerate() {
            let s = shifts[n0 + i];
            let img_src = &src[(n0 + i) * c * h * w..(n0 + i + 1) * c * h * w];
            if !s.applied || (s.dy == 0 && s.dx == 0) {
                img_out.copy_from_slice(img_src);
                continue;
            }
            for ch in 0..c {
                shift_plane(&img_src[ch * h * w..(ch + 1) * h * w], h, w, s.dy, s.dx, &mut img_out[ch * h * w..(ch + 1) * h * w]);
            }
        }
    });
    Tensor::from_vec(vec![n, c, h, w], out)
}

/// Subpixel random shift over a `[n, c, h, w]` batch of (latent) images.
pub fn subpixel_random_shift(batch: &Tensor, spec: &SubpixelShiftSpec, rng: &mut Rng) -> Result<Tensor> {
    spec.validate()?;
    let [n, c, h, w] = batch.shape()[..] else {
        return Err(AtcError::config(format!(
            "subpixel_random_shift expects [n, c, h, w], got {:?}",
            batch.shape()
        )));
    };
    if h < 2 || w < 2 {
        return Err(AtcError::config(format!("subpixel shift needs at least 2x2 images, got {h}x{w}")));
    }
    let offsets: Vec<(f32, f32)> = (0..n)
        .map(|_| (rng.symmetric_f32(spec.max_displacement), rng.symmetric_f32(spec.max_displacement)))
        .collect();
    let mut out = vec![0.0f32; batch.numel()];
    let src = batch.data();
    par::for_each_chunk_mut(&mut out, par::IMAGE_CHUNK * c * h * w, |ci, block| {
        let n0 = ci * par::IMAGE_CHUNK;
        for (i, img_out) in block.chunks_mut(c * h * w).enumerate() {
            let (dy, dx) = offsets[n0 + i];
            let img_src = &src[(n0 + i) * c * h * w..(n0 + i + 1) * c * h * w];
            for ch in 0..c {
                bilinear_shift_plane(&img_src[ch * h * w..(ch + 1) * h * w], h, w, dy, dx, &mut img_out[ch * h * w..(ch + 1) * h * w]);
            }
        }
    });
    Tensor::from_vec(vec![n, c, h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles;

    fn ramp_image(c: usize, h: usize, w: usize) -> Tensor {
        let data: Vec<f32> = (0..c * h * w).map(|i| i as f32 / (c * h * w) as f32).collect();
        Tensor::from_vec(vec![1, c, h, w], data).unwrap()
    }

    #[test]
    fn zero_offset_is_identity() {
        let img = ramp_image(2, 6, 6);
        let mut out = vec![0.0f32; 36];
        shift_plane(&img.data()[..36], 6, 6, 0, 0, &mut out);
        assert_eq!(out, img.data()[..36]);
        let mut out2 = vec![0.0f32; 36];
        bilinear_shift_plane(&img.data()[..36], 6, 6, 0.0, 0.0, &mut out2);
        assert_eq!(out2, img.data()[..36]);
    }

    #[test]
    fn constant_images_are_invariant() {
        let t = Tensor::from_vec(vec![4, 3, 10, 10], vec![0.37; 4 * 300]).unwrap();
        let spec = RandomShiftSpec { pad: 4, apply_probability: 1.0 };
        let mut rng = Rng::from_seed(0);
        let out = random_shift(&t, &spec, &mut rng).unwrap();
        assert_eq!(out.data(), t.data());
    }

    #[test]
    fn matches_pad_then_crop_reference() {
        let h = 4;
        let w = 4;
        let img: Vec<f32> = (0..16).map(|i| i as f32).collect();
        for dy in -2i32..=2 {
            for dx in -2i32..=2 {
                let mut got = vec![0.0f32; 16];
                shift_plane(&img, h, w, dy, dx, &mut got);
                let want = oracles::shift_pad_crop_ref(&img, h, w, 2, dy, dx);
                assert_eq!(got, want, "offset ({dy}, {dx})");
            }
        }
    }

    #[test]
    fn pad_too_large_is_config_error() {
        let t = Tensor::zeros(vec![1, 1, 8, 8]);
        let spec = RandomShiftSpec { pad: 4, apply_probability: 1.0 };
        assert!(random_shift(&t, &spec, &mut Rng::from_seed(1)).is_err());
    }

    #[test]
    fn subpixel_integer_displacement_equals_integer_shift() {
        let h = 5;
        let w = 7;
        let img: Vec<f32> = (0..h * w).map(|i| ((i * 13) % 29) as f32 / 29.0).collect();
        for (dy, dx) in [(1.0f32, 0.0f32), (0.0, 1.0), (-1.0, 0.0), (1.0, -1.0)] {
            let mut got = vec![0.0f32; h * w];
            bilinear_shift_plane(&img, h, w, dy, dx, &mut got);
            let mut want = vec![0.0f32; h * w];
            shift_plane(&img, h, w, dy as i32, dx as i32, &mut want);
            assert_eq!(got, want, "displacement ({dy}, {dx})");
        }
    }

    #[test]
    fn subpixel_ramp_half_pixel() {
        // 1-d ramp [0, 1, 2, 3] shifted by +0.5 -> [0.5, 1.5, 2.5, 3.0]
        let img = vec![0.0f32, 1.0, 2.0, 3.0];
        let mut out = vec![0.0f32; 4];
        bilinear_shift_plane(&img, 1, 4, 0.0, 0.5, &mut out);
        assert_eq!(out, vec![0.5, 1.5, 2.5, 3.0]);
    }

    #[test]
    fn subpixel_matches_oracle_on_random_offsets() {
        let h = 6;
        let w = 6;
        let img: Vec<f32> = (0..36).map(|i| ((i * 7) % 11) as f32 / 11.0).collect();
        let mut rng = Rng::from_seed(3);
        for _ in 0..50 {
            let dy = rng.symmetric_f32(1.0);
            let dx = rng.symmetric_f32(1.0);
            let mut got = vec![0.0f32; 36];
            bilinear_shift_plane(&img, h, w, dy, dx, &mut got);
            let want = oracles::bilinear_shift_ref(&img, h, w, dy as f64, dx as f64);
            for (g, wv) in got.iter().zip(&want) {
                assert!((g - wv).abs() < 1e-5, "dy {dy} dx {dx}: {g} vs {wv}");
            }
        }
    }

    #[test]
    fn subpixel_is_continuous_in_displacement() {
        let h = 8;
        let w = 8;
        let img: Vec<f32> = (0..64).map(|i| (i as f32 * 0.71).sin().abs()).collect();
        let eps = 1e-3f32;
        for base in [-0.9f32, -0.4, 0.0, 0.3, 0.8] {
            let mut a = vec![0.0f32; 64];
            let mut b = vec![0.0f32; 64];
            bilinear_shift_plane(&img, h, w, base, 0.2, &mut a);
            bilinear_shift_plane(&img, h, w, base + eps, 0.2, &mut b);
            let max_delta = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
            // lipschitz constant bounded by 2 * max|pixel| here
            assert!(max_delta <= 4.0 * eps, "jump {max_delta} at base {base}");
        }
    }

    #[test]
    fn range_is_preserved_for_unit_inputs() {
        let mut rng = Rng::from_seed(5);
        let data: Vec<f32> = (0..2 * 3 * 9 * 9).map(|_| rng.uniform_f32()).collect();
        let t = Tensor::from_vec(vec![2, 3, 9, 9], data).unwrap();
        let shifted = random_shift(&t, &RandomShiftSpec::default(), &mut rng).unwrap();
        let sub = subpixel_random_shift(&shifted, &SubpixelShiftSpec::default(), &mut rng).unwrap();
        assert_eq!(sub.shape(), t.shape());
        assert!(sub.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn apply_probability_fraction_within_binomial_bounds() {
        let n = 10_000;
        let p = 0.5f64;
        let spec = RandomShiftSpec { pad: 4, apply_probability: p as f32 };
        let mut rng = Rng::from_seed(12);
        let shifts = draw_shifts(n, &spec, &mut rng);
        // an applied (0,0) draw leaves the image unchanged, so the altered
        // fraction targets p * (1 - 1/(2 pad + 1)^2)
        let altered = shifts.iter().filter(|s| s.applied && (s.dy != 0 || s.dx != 0)).count() as f64;
        let q = p * (1.0 - 1.0 / 81.0);
        let sigma = (q * (1.0 - q) / n as f64).sqrt();
        assert!(
            (altered / n as f64 - q).abs() <= 3.0 * sigma,
            "altered fraction {} vs {q} (sigma {sigma})",
            altered / n as f64
        );
    }
}
