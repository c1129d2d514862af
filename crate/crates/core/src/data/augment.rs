//! Random crops with flips and right-angle rotations, applied identically to
//! both images of a pair.

use rand::Rng;

use super::{Image, ImagePair};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentSpec {
    pub crop_size: usize,
    pub enable_flip: bool,
    pub enable_rotation: bool,
    pub seed: u64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        AugmentSpec {
            crop_size: 512,
            enable_flip: true,
            enable_rotation: true,
            seed: 0,
        }
    }
}

impl AugmentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.crop_size == 0 {
            return Err(Error::contract("crop size must be positive"));
        }
        Ok(())
    }
}

/// Geometry of one sampled patch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchTransform {
    pub x0: usize,
    pub y0: usize,
    pub flip: bool,
    pub quarter_turns: u8,
}

impl PatchTransform {
    /// Draws a transform for an image of `width x height`, which must already
    /// be at least `spec.crop_size` on both sides.
    pub fn sample<R: Rng + ?Sized>(width: usize, height: usize, spec: &AugmentSpec, rng: &mut R) -> Self {
        let x0 = rng.gen_range(0..=width - spec.crop_size);
        let y0 = rng.gen_range(0..=height - spec.crop_size);
        let flip = spec.enable_flip && rng.gen::<bool>();
        let quarter_turns = if spec.enable_rotation { rng.gen_range(0..4u8) } else { 0 };
        PatchTransform {
            x0,
            y0,
            flip,
            quarter_turns,
        }
    }

    pub fn apply(&self, image: &Image, crop_size: usize) -> Result<Image> {
        let mut patch = image.crop(self.x0, self.y0, crop_size, crop_size)?;
        if self.flip {
            patch = patch.flip_horizontal();
        }
        Ok(patch.rotate90(self.quarter_turns))
    }
}

fn pad_to(image: &Image, size: usize) -> Image {
    let extra_w = size.saturating_sub(image.width());
    let extra_h = size.saturating_sub(image.height());
    if extra_w == 0 && extra_h == 0 {
        return image.clone();
    }
    image.reflect_pad(extra_w / 2, extra_h / 2, extra_w - extra_w / 2, extra_h - extra_h / 2)
}

/// Crops the same window out of both images and applies the same flip and
/// rotation. Pairs smaller than the crop are reflect-padded about the center.
pub fn sample_patch<R: Rng + ?Sized>(pair: &ImagePair, spec: &AugmentSpec, rng: &mut R) -> Result<(Image, Image)> {
    spec.validate()?;
    let (w, h) = (pair.input.width(), pair.input.height());
    let (input, target) = if w < spec.crop_size || h < spec.crop_size {
        log::warn!(
            "pair `{}` is {w}x{h}, smaller than crop {}; reflect-padding",
            pair.id,
            spec.crop_size
        );
        (pad_to(&pair.input, spec.crop_size), pad_to(&pair.target, spec.crop_size))
    } else {
        (pair.input.clone(), pair.target.clone())
    };
    let t = PatchTransform::sample(input.width(), input.height(), spec, rng);
    Ok((t.apply(&input, spec.crop_size)?, t.apply(&target, spec.crop_size)?))
}
