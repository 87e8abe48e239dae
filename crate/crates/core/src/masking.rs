//! Grid-aligned block masks for the reconstruction task.
//!
//! The image is partitioned into non-overlapping `block_size × block_size`
//! cells; `round(mask_ratio × num_blocks)` of them are chosen uniformly without
//! replacement and occluded. Bit value 1 means "masked".

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::data::ImageSample;
use crate::error::{Result, RgfsError};
use crate::rng::rng_from;
use crate::tensor::Tensor3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskConfig {
    pub block_size: usize,
    pub mask_ratio: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            block_size: 8,
            mask_ratio: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockMask {
    pub height: usize,
    pub width: usize,
    pub block_size: usize,
    pub mask_ratio: f64,
    pub seed: u64,
    /// Row-major `H × W`, 1 = masked.
    pub bits: Vec<u8>,
}

impl BlockMask {
    pub fn num_blocks(&self) -> usize {
        (self.height / self.block_size) * (self.width / self.block_size)
    }

    pub fn masked_blocks(&self) -> usize {
        quantized_blocks(self.num_blocks(), self.mask_ratio)
    }

    pub fn masked_pixels(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 1).count()
    }

    pub fn masked_fraction(&self) -> f64 {
        self.masked_pixels() as f64 / self.bits.len() as f64
    }

    #[inline]
    pub fn is_masked(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x] == 1
    }

    /// Binary PGM (P5), masked pixels white.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.bits.iter().map(|&b| if b == 1 { 255 } else { 0 }));
        out
    }
}

fn quantized_blocks(num_blocks: usize, ratio: f64) -> usize {
    ((num_blocks as f64) * ratio).round() as usize
}

/// Draws a block mask for an `H × W` grid.
pub fn generate_block_mask(
    height: usize,
    width: usize,
    block_size: usize,
    mask_ratio: f64,
    seed: u64,
) -> Result<BlockMask> {
    if block_size == 0 || !height.is_multiple_of(block_size) || !width.is_multiple_of(block_size) {
        return Err(RgfsError::Config(format!(
            "mask block_size {block_size} must divide the image size {height}x{width}"
        )));
    }
    if !(0.0..=1.0).contains(&mask_ratio) {
        return Err(RgfsError::Config(format!(
            "mask_ratio must be within [0, 1], got {mask_ratio}"
        )));
    }
    let (by, bx) = (height / block_size, width / block_size);
    let num = by * bx;
    let k = quantized_blocks(num, mask_ratio);
    let mut bits = vec![0u8; height * width];
    let mut rng = rng_from(seed);
    for b in index::sample(&mut rng, num, k) {
        let (y0, x0) = ((b / bx) * block_size, (b % bx) * block_size);
        for y in y0..y0 + block_size {
            bits[y * width + x0..y * width + x0 + block_size].fill(1);
        }
    }
    Ok(BlockMask {
        height,
        width,
        block_size,
        mask_ratio,
        seed,
        bits,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedImage {
    pub pixels: Tensor3,
    pub source_id: String,
    pub mask: BlockMask,
}

/// `x ⊙ (1 − M)` with the mask broadcast over channels.
pub fn mask_tensor(pixels: &Tensor3, mask: &BlockMask) -> Result<Tensor3> {
    if pixels.height != mask.height || pixels.width != mask.width {
        return Err(RgfsError::Shape(format!(
            "mask is {}x{}, image is {}x{}",
            mask.height, mask.width, pixels.height, pixels.width
        )));
    }
    let mut out = pixels.clone();
    let plane = pixels.plane();
    for c in 0..pixels.channels {
        for (v, &b) in out.data[c * plane..(c + 1) * plane].iter_mut().zip(&mask.bits) {
            if b == 1 {
                *v = 0.0;
            }
        }
    }
    Ok(out)
}

pub fn apply_mask(image: &ImageSample, mask: &BlockMask) -> Result<MaskedImage> {
    Ok(MaskedImage {
        pixels: mask_tensor(&image.pixels, mask)?,
        source_id: image.source_id.clone(),
        mask: mask.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn sample(c: usize, h: usize, w: usize, seed: u64) -> ImageSample {
        let mut rng = rng_from(seed);
        let data = (0..c * h * w).map(|_| rng.random::<f64>()).collect();
        ImageSample::new(Tensor3::from_vec(c, h, w, data), 0, "t").unwrap()
    }

    #[test]
    fn ratio_zero_is_identity() {
        let m = generate_block_mask(16, 16, 4, 0.0, 3).unwrap();
        assert_eq!(m.masked_pixels(), 0);
        let s = sample(3, 16, 16, 1);
        assert_eq!(apply_mask(&s, &m).unwrap().pixels, s.pixels);
    }

    #[test]
    fn ratio_one_blanks_everything() {
        let m = generate_block_mask(16, 16, 4, 1.0, 3).unwrap();
        assert_eq!(m.masked_pixels(), 256);
        let s = sample(3, 16, 16, 1);
        assert!(apply_mask(&s, &m).unwrap().pixels.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sixteen_of_sixty_four_blocks() {
        let m = generate_block_mask(64, 64, 8, 0.25, 11).unwrap();
        assert_eq!(m.num_blocks(), 64);
        assert_eq!(m.masked_blocks(), 16);
        assert_eq!(m.bits.iter().filter(|&&b| b == 1).count(), 1024);
    }

    #[test]
    fn single_pixel_blocks() {
        let s = ImageSample::new(Tensor3::from_vec(2, 2, 2, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8]), 0, "t").unwrap();
        let m = BlockMask {
            height: 2,
            width: 2,
            block_size: 1,
            mask_ratio: 0.25,
            seed: 0,
            bits: vec![1, 0, 0, 0],
        };
        let out = apply_mask(&s, &m).unwrap().pixels;
        assert_eq!(out.data, vec![0.0, 0.2, 0.3, 0.4, 0.0, 0.6, 0.7, 0.8]);
    }

    #[test]
    fn errors() {
        assert!(generate_block_mask(64, 64, 7, 0.25, 0).is_err());
        assert!(generate_block_mask(64, 64, 8, 1.5, 0).is_err());
        let m = generate_block_mask(8, 8, 4, 0.5, 0).unwrap();
        assert!(apply_mask(&sample(1, 16, 16, 0), &m).is_err());
    }

    #[test]
    fn pgm_header_and_payload() {
        let m = generate_block_mask(8, 8, 4, 0.25, 5).unwrap();
        let pgm = m.to_pgm();
        let header = b"P5\n8 8\n255\n";
        assert_eq!(&pgm[..header.len()], header);
        assert_eq!(pgm[header.len()..].iter().filter(|&&b| b == 255).count(), 16);
    }

    proptest! {
        #[test]
        fn unmasked_unchanged_masked_zero(seed in any::<u64>(), ratio in 0.0f64..=1.0) {
            let s = sample(3, 16, 16, seed);
            let m = generate_block_mask(16, 16, 4, ratio, seed).unwrap();
            let out = apply_mask(&s, &m).unwrap().pixels;
            for c in 0..3 {
                for y in 0..16 {
                    for x in 0..16 {
                        let v = out.get(c, y, x);
                        if m.is_masked(y, x) {
                            prop_assert_eq!(v, 0.0);
                        } else {
                            prop_assert_eq!(v.to_bits(), s.pixels.get(c, y, x).to_bits());
                        }
                    }
                }
            }
            let again = mask_tensor(&out, &m).unwrap();
            prop_assert_eq!(again, out);
        }
    }
}
