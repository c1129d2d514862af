//! Synthetic dark/bright pairs for smoke tests and demos.

use std::path::Path;

use ctxnet_core::data::{write_image, Image};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{io, Result};

/// Smooth, colourful reference image built from a few random plane waves.
pub fn reference(width: usize, height: usize, rng: &mut impl Rng) -> Image {
    let waves: Vec<[f32; 5]> = (0..4)
        .map(|_| {
            [
                rng.gen_range(-6.0..6.0),
                rng.gen_range(-6.0..6.0),
                rng.gen_range(0.0..6.3),
                rng.gen_range(0.05..0.2),
                rng.gen_range(0.0..3.0),
            ]
        })
        .collect();
    let base: [f32; 3] = [rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7)];
    Image::from_fn(width, height, |x, y| {
        let (u, v) = (x as f32 / width as f32, y as f32 / height as f32);
        let mut px = base;
        for (c, p) in px.iter_mut().enumerate() {
            for w in &waves {
                *p += w[3] * (w[0] * u + w[1] * v + w[2] + w[4] * c as f32).sin();
            }
        }
        px
    })
    .expect("positive extents")
}

/// Darkened, gamma-shifted and noisy version of `reference`.
pub fn degrade(reference: &Image, rng: &mut impl Rng) -> Image {
    let gain: f32 = rng.gen_range(0.15..0.3);
    let noise: f32 = 0.01;
    Image::from_fn(reference.width(), reference.height(), |x, y| {
        reference
            .get(x, y)
            .map(|v| gain * v.powf(1.3) + rng.gen_range(-noise..noise))
    })
    .expect("positive extents")
}

/// Writes `count` pairs as `<root>/{input,target}/synth_<k>.png`.
pub fn generate(root: &Path, count: usize, width: usize, height: usize, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for side in ["input", "target"] {
        let dir = root.join(side);
        std::fs::create_dir_all(&dir).map_err(|e| io(&dir, e))?;
    }
    for k in 0..count {
        let target = reference(width, height, &mut rng);
        let input = degrade(&target, &mut rng);
        let name = format!("synth_{k:04}.png");
        write_image(&root.join("input").join(&name), &input)?;
        write_image(&root.join("target").join(&name), &target)?;
    }
    Ok(())
}
