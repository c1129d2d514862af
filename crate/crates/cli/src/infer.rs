//! Whole-image inference with reflect padding and optional feathered tiles.

use std::path::Path;

use ctxnet_core::blocks::infer_config;
use ctxnet_core::data::Image;
use ctxnet_core::{ContextNet, ParamStore, Shape, Tensor};

use crate::checkpoint::{sidecar_path, Checkpoint};
use crate::config::RunConfig;
use crate::error::{Error, Result};

pub struct Model {
    pub net: ContextNet,
    pub params: ParamStore<f32>,
}

impl Model {
    pub fn new(net: ContextNet, params: ParamStore<f32>) -> Result<Self> {
        net.check_params(&params)
            .map_err(|e| Error::Incompatible(e.to_string()))?;
        Ok(Model { net, params })
    }

    /// Uses the configuration sidecar when present, otherwise reconstructs
    /// the architecture from parameter names and shapes.
    pub fn load(path: &Path) -> Result<Self> {
        let ckpt = Checkpoint::load(path)?;
        let side = sidecar_path(path);
        let config = if side.exists() {
            RunConfig::load(&side)?.network
        } else {
            log::warn!("no {} next to checkpoint; inferring architecture", side.display());
            infer_config(&ckpt.params).map_err(|e| Error::Incompatible(e.to_string()))?
        };
        Model::new(ContextNet::new(config)?, ckpt.params)
    }

    pub fn divisor(&self) -> usize {
        self.net.config().divisor()
    }

    /// Runs on an image whose extents are multiples of the divisor.
    fn run(&self, image: &Image) -> Result<Image> {
        let out = self.net.infer(&self.params, &image.to_tensor())?;
        Ok(Image::from_tensor(&out, 0)?)
    }

    pub fn enhance(&self, image: &Image, tile: Option<usize>) -> Result<Image> {
        let d = self.divisor();
        let (w, h) = (image.width(), image.height());
        let (pw, ph) = (w.div_ceil(d) * d, h.div_ceil(d) * d);
        let padded = if (pw, ph) == (w, h) {
            image.clone()
        } else {
            image.reflect_pad(0, 0, pw - w, ph - h)
        };
        let out = match tile {
            None => self.run(&padded)?,
            Some(t) => self.run_tiled(&padded, t)?,
        };
        Ok(out.crop(0, 0, w, h)?)
    }

    /// Overlap used between neighbouring tiles of size `tile`.
    pub fn tile_overlap(&self, tile: usize) -> usize {
        let d = self.divisor();
        (tile / 4).div_ceil(d).max(1) * d
    }

    /// Image context added on each side of a tile before it is run; only the
    /// tile itself is kept from the output. Covers the receptive field of the
    /// convolutional path, so tiles reproduce whole-image inference.
    pub fn tile_context(&self) -> usize {
        let d = self.divisor();
        self.net.config().receptive_radius().div_ceil(d) * d
    }

    /// Tiles with context margins, feathered where they overlap. The
    /// bottleneck non-local block needs every position at once, so with
    /// global context the bottleneck features are first assembled tile by
    /// tile, the block runs once on the full low-resolution map, and the
    /// decoder then runs per tile on crops of the result.
    fn run_tiled(&self, image: &Image, tile: usize) -> Result<Image> {
        let d = self.divisor();
        if tile % d != 0 || tile < 2 * d {
            return Err(Error::InvalidConfig(format!(
                "tile size {tile} must be a multiple of {d} and at least {}",
                2 * d
            )));
        }
        let overlap = self.tile_overlap(tile);
        if overlap >= tile {
            return Err(Error::InvalidConfig(format!("tile size {tile} leaves no room past the {overlap} px overlap")));
        }
        if !self.net.config().extra_global_context_levels.is_empty() {
            log::warn!("encoder non-local blocks see one tile at a time; tiled output will differ from whole-image");
        }
        let context = self.tile_context();
        let (w, h) = (image.width(), image.height());
        let (tw, th) = (tile.min(w), tile.min(h));
        let windows: Vec<Window> = tile_starts(h, tile, tile - overlap)
            .into_iter()
            .flat_map(|y0| tile_starts(w, tile, tile - overlap).into_iter().map(move |x0| (x0, y0)))
            .map(|(x0, y0)| Window {
                x0,
                y0,
                wx: x0.saturating_sub(context),
                wy: y0.saturating_sub(context),
                wx1: (x0 + tw + context).min(w),
                wy1: (y0 + th + context).min(h),
            })
            .collect();
        let crop = |win: &Window| image.crop(win.wx, win.wy, win.wx1 - win.wx, win.wy1 - win.wy).map(|i| i.to_tensor());

        let bottleneck = match self.net.global_context {
            None => None,
            Some(_) => {
                let c = self.net.config().width(self.net.config().num_stages);
                let mut full = Tensor::zeros(Shape::new(1, c, h / d, w / d));
                for win in &windows {
                    let z = self.net.infer_bottleneck(&self.params, &crop(win)?)?;
                    paste(&mut full, &z, win, tw / d, th / d, d);
                }
                Some(self.net.infer_global_context(&self.params, &full)?)
            }
        };

        let mut acc = vec![0.0f64; 3 * w * h];
        let mut weight = vec![0.0f64; w * h];
        for win in &windows {
            let input = crop(win)?;
            let out = match &bottleneck {
                None => self.net.infer(&self.params, &input)?,
                Some(z) => {
                    let z = cut(z, win.wy / d, win.wx / d, (win.wy1 - win.wy) / d, (win.wx1 - win.wx) / d);
                    self.net.infer_from_bottleneck(&self.params, &input, &z)?
                }
            };
            let out = Image::from_tensor(&out, 0)?;
            for ty in 0..th {
                let wgt_y = ramp(ty, th, overlap, win.y0 == 0, win.y0 + th == h);
                for tx in 0..tw {
                    let wgt = wgt_y * ramp(tx, tw, overlap, win.x0 == 0, win.x0 + tw == w);
                    let i = (win.y0 + ty) * w + win.x0 + tx;
                    weight[i] += wgt;
                    let px = out.get(win.x0 - win.wx + tx, win.y0 - win.wy + ty);
                    for (c, v) in px.into_iter().enumerate() {
                        acc[3 * i + c] += wgt * v as f64;
                    }
                }
            }
        }
        let pixels = acc
            .iter()
            .enumerate()
            .map(|(k, &v)| (v / weight[k / 3]) as f32)
            .collect();
        Ok(Image::new(w, h, pixels)?)
    }
}

/// A tile `(x0, y0)` and the larger window `[wx, wx1) x [wy, wy1)` it is run in.
struct Window {
    x0: usize,
    y0: usize,
    wx: usize,
    wy: usize,
    wx1: usize,
    wy1: usize,
}

/// Copies the tile part of window features `z` (at stride `d`) into `full`.
fn paste(full: &mut Tensor<f32>, z: &Tensor<f32>, win: &Window, tw: usize, th: usize, d: usize) {
    let [_, c, fh, fw] = full.shape().0;
    let (ox, oy) = ((win.x0 - win.wx) / d, (win.y0 - win.wy) / d);
    let (gx, gy) = (win.x0 / d, win.y0 / d);
    for ch in 0..c {
        for y in 0..th.min(fh - gy) {
            for x in 0..tw.min(fw - gx) {
                let k = full.offset([0, ch, gy + y, gx + x]);
                full.data_mut()[k] = z.at([0, ch, oy + y, ox + x]);
            }
        }
    }
}

fn cut(t: &Tensor<f32>, y0: usize, x0: usize, h: usize, w: usize) -> Tensor<f32> {
    Tensor::from_fn(Shape::new(1, t.shape().c(), h, w), |[_, c, y, x]| t.at([0, c, y0 + y, x0 + x]))
}

fn tile_starts(len: usize, tile: usize, stride: usize) -> Vec<usize> {
    if len <= tile {
        return vec![0];
    }
    let mut starts: Vec<usize> = (0..).map(|k| k * stride).take_while(|&s| s + tile < len).collect();
    starts.push(len - tile);
    starts
}

/// Linear feather over `overlap` pixels at tile edges that are not image edges.
fn ramp(i: usize, len: usize, overlap: usize, at_start: bool, at_end: bool) -> f64 {
    let mut v = 1.0f64;
    if !at_start {
        v = v.min((i + 1) as f64 / (overlap + 1) as f64);
    }
    if !at_end {
        v = v.min((len - i) as f64 / (overlap + 1) as f64);
    }
    v
}

pub fn infer_file(checkpoint: &Path, input: &Path, output: &Path, tile: Option<usize>) -> Result<()> {
    let model = Model::load(checkpoint)?;
    let image = ctxnet_core::data::read_image(input)?;
    let out = model.enhance(&image, tile)?;
    ctxnet_core::data::write_image(output, &out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn starts_cover_the_extent() {
        assert_eq!(tile_starts(64, 32, 24), vec![0, 24, 32]);
        assert_eq!(tile_starts(32, 32, 24), vec![0]);
        assert_eq!(tile_starts(16, 32, 24), vec![0]);
    }

    #[test]
    fn ramp_is_positive_and_flat_inside() {
        assert_eq!(ramp(0, 32, 8, true, false), 1.0);
        assert!(ramp(0, 32, 8, false, false) > 0.0);
        assert_eq!(ramp(16, 32, 8, false, false), 1.0);
    }
}
