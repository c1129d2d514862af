//! Images, codecs, paired datasets and augmentation.

pub mod augment;
pub mod dataset;
pub mod png;
pub mod ppm;
pub mod prefetch;

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub use augment::{sample_patch, AugmentSpec, PatchTransform};
pub use dataset::{load_pairs, scan_dataset, DatasetLayout, DatasetScan, PairEntry};
pub use prefetch::{Batch, BatchSampler, Prefetcher};

/// RGB image with interleaved, row-major samples in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<f32>,
}

/// Byte quantization used on export: clamp to `[0, 1]`, scale, round half up.
#[inline]
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::dim(format!("image extents must be positive, got {width}x{height}")));
        }
        if pixels.len() != 3 * width * height {
            return Err(Error::dim(format!(
                "{} samples do not fit a {width}x{height} RGB image",
                pixels.len()
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::contract(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Image { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Result<Self> {
        let pixels = (0..width * height).flat_map(|_| rgb).collect();
        Image::new(width, height, pixels)
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Result<Self> {
        let mut pixels = Vec::with_capacity(3 * width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.extend(f(x, y).map(|v| v.clamp(0.0, 1.0)));
            }
        }
        Image::new(width, height, pixels)
    }

    /// From 8-bit interleaved RGB.
    pub fn from_bytes(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        Image::new(width, height, bytes.iter().map(|&b| b as f32 / 255.0).collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.pixels.iter().map(|&v| quantize(v)).collect()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        let i = 3 * (y * self.width + x);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = 3 * (y * self.width + x);
        self.pixels[i..i + 3].copy_from_slice(&rgb.map(|v| v.clamp(0.0, 1.0)));
    }

    /// `(1, 3, H, W)` planar tensor.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let (w, h) = (self.width, self.height);
        Tensor::from_fn(Shape::new(1, 3, h, w), |[_, c, y, x]| self.pixels[3 * (y * w + x) + c])
    }

    /// Reads batch item `index` of a `(N, 3, H, W)` tensor, clamping to `[0, 1]`.
    pub fn from_tensor(t: &Tensor<f32>, index: usize) -> Result<Self> {
        let [n, c, h, w] = t.shape().0;
        if c != 3 || index >= n {
            return Err(Error::dim(format!("cannot read image {index} from tensor {}", t.shape())));
        }
        let mut pixels = Vec::with_capacity(3 * h * w);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..3 {
                    pixels.push(t.at([index, ch, y, x]).clamp(0.0, 1.0));
                }
            }
        }
        Image::new(w, h, pixels)
    }

    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<Self> {
        if x0 + width > self.width || y0 + height > self.height {
            return Err(Error::dim(format!(
                "crop {width}x{height}+{x0}+{y0} exceeds {}x{}",
                self.width, self.height
            )));
        }
        let mut pixels = Vec::with_capacity(3 * width * height);
        for y in y0..y0 + height {
            let start = 3 * (y * self.width + x0);
            pixels.extend_from_slice(&self.pixels[start..start + 3 * width]);
        }
        Image::new(width, height, pixels)
    }

    fn remap(&self, width: usize, height: usize, src: impl Fn(usize, usize) -> (usize, usize)) -> Self {
        let mut pixels = Vec::with_capacity(3 * width * height);
        for y in 0..height {
            for x in 0..width {
                let (sx, sy) = src(x, y);
                pixels.extend(self.get(sx, sy));
            }
        }
        Image { width, height, pixels }
    }

    /// Mirror left-right.
    pub fn flip_horizontal(&self) -> Self {
        let w = self.width;
        self.remap(w, self.height, |x, y| (w - 1 - x, y))
    }

    /// Mirror top-bottom.
    pub fn flip_vertical(&self) -> Self {
        let h = self.height;
        self.remap(self.width, h, |x, y| (x, h - 1 - y))
    }

    /// Rotates counter-clockwise by `quarter_turns * 90` degrees.
    pub fn rotate90(&self, quarter_turns: u8) -> Self {
        let (w, h) = (self.width, self.height);
        match quarter_turns % 4 {
            0 => self.clone(),
            1 => self.remap(h, w, |x, y| (w - 1 - y, x)),
            2 => self.remap(w, h, |x, y| (w - 1 - x, h - 1 - y)),
            _ => self.remap(h, w, |x, y| (y, h - 1 - x)),
        }
    }

    /// Extends every side by mirroring about the edge pixels (the edge row or
    /// column itself is not repeated).
    pub fn reflect_pad(&self, left: usize, top: usize, right: usize, bottom: usize) -> Self {
        let (w, h) = (self.width, self.height);
        self.remap(w + left + right, h + top + bottom, |x, y| {
            (
                reflect_index(x as isize - left as isize, w),
                reflect_index(y as isize - top as isize, h),
            )
        })
    }
}

/// Mirror index into `0..n` without repeating the edge sample.
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

/// Aligned degraded / reference pair.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair {
    pub id: String,
    pub input: Image,
    pub target: Image,
}

impl ImagePair {
    pub fn new(id: impl Into<String>, input: Image, target: Image) -> Result<Self> {
        let id = id.into();
        if input.width() != target.width() || input.height() != target.height() {
            return Err(Error::Pair {
                file: id,
                message: format!(
                    "input is {}x{} but target is {}x{}",
                    input.width(),
                    input.height(),
                    target.width(),
                    target.height()
                ),
            });
        }
        Ok(ImagePair { id, input, target })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImageFormat {
    Png,
    Ppm,
}

impl ImageFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .unwrap_or_default();
        match ext.as_str() {
            "png" => Ok(ImageFormat::Png),
            "ppm" => Ok(ImageFormat::Ppm),
            _ => Err(Error::UnsupportedFormat(format!(
                "cannot infer image format from `{}`",
                path.display()
            ))),
        }
    }

    pub fn sniff(bytes: &[u8]) -> Result<Self> {
        if bytes.starts_with(&png::SIGNATURE) {
            Ok(ImageFormat::Png)
        } else if bytes.starts_with(b"P6") {
            Ok(ImageFormat::Ppm)
        } else if bytes.len() >= 2 && bytes[0] == b'P' && bytes[1].is_ascii_digit() {
            Err(Error::UnsupportedFormat(format!(
                "netpbm variant P{} (only binary P6 is supported)",
                bytes[1] as char
            )))
        } else {
            Err(Error::parse(0, "unrecognized image signature"))
        }
    }
}

pub fn decode_image(bytes: &[u8]) -> Result<Image> {
    match ImageFormat::sniff(bytes)? {
        ImageFormat::Png => png::decode(bytes),
        ImageFormat::Ppm => ppm::decode(bytes),
    }
}

pub fn encode_image(image: &Image, format: ImageFormat) -> Vec<u8> {
    match format {
        ImageFormat::Png => png::encode(image),
        ImageFormat::Ppm => ppm::encode(image),
    }
}

/// Reads `(width, height)` from the header without decoding pixels.
pub fn probe_dimensions(bytes: &[u8]) -> Result<(usize, usize)> {
    match ImageFormat::sniff(bytes)? {
        ImageFormat::Png => png::probe(bytes),
        ImageFormat::Ppm => ppm::probe(bytes),
    }
}

pub fn read_image(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes)
}

pub fn write_image(path: &Path, image: &Image) -> Result<()> {
    let format = ImageFormat::from_path(path)?;
    std::fs::write(path, encode_image(image, format)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numbered(w: usize, h: usize) -> Image {
        Image::from_fn(w, h, |x, y| [x as f32 / 16.0, y as f32 / 16.0, 0.0]).unwrap()
    }

    #[test]
    fn half_exports_to_128() {
        assert_eq!(quantize(0.5), 128);
        assert_eq!(quantize(-0.2), 0);
        assert_eq!(quantize(1.7), 255);
        for b in 0..=255u8 {
            assert_eq!(quantize(b as f32 / 255.0), b);
        }
    }

    #[test]
    fn rotation_by_half_turn_is_double_flip() {
        let img = numbered(5, 3);
        assert_eq!(img.rotate90(2), img.flip_horizontal().flip_vertical());
        assert_eq!(img.rotate90(1).rotate90(3), img);
        assert_eq!(img.rotate90(1).width(), 3);
    }

    #[test]
    fn quarter_turn_is_counter_clockwise() {
        let img = numbered(3, 2);
        let r = img.rotate90(1);
        // the top-right corner moves to the top-left
        assert_eq!(r.get(0, 0), img.get(2, 0));
        assert_eq!(r.get(1, 2), img.get(0, 1));
    }

    #[test]
    fn reflect_indices() {
        let got: Vec<usize> = (-4..8).map(|i| reflect_index(i, 4)).collect();
        assert_eq!(got, vec![2, 3, 2, 1, 0, 1, 2, 3, 2, 1, 0, 1]);
        assert_eq!(reflect_index(5, 1), 0);
    }

    #[test]
    fn tensor_roundtrip() {
        let img = numbered(4, 3);
        let t = img.to_tensor();
        assert_eq!(t.shape(), Shape::new(1, 3, 3, 4));
        assert_eq!(Image::from_tensor(&t, 0).unwrap(), img);
    }

    #[test]
    fn pair_dimension_mismatch() {
        let err = ImagePair::new("a.png", numbered(4, 4), numbered(4, 5)).unwrap_err();
        assert!(err.to_string().contains("a.png"));
    }

    #[test]
    fn rejects_out_of_range_pixels() {
        assert!(Image::new(1, 1, vec![0.0, 1.5, 0.0]).is_err());
    }
}
