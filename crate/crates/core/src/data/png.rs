//! 8-bit RGB/RGBA PNG, non-interlaced. Alpha is dropped on decode.

use std::io::{Read, Write};

use flate2::read::ZlibDecoder;
use flate2::write::ZlibEncoder;
use flate2::Compression;

use super::Image;
use crate::error::{Error, Result};

pub const SIGNATURE: [u8; 8] = [0x89, b'P', b'N', b'G', b'\r', b'\n', 0x1a, b'\n'];

const COLOR_RGB: u8 = 2;
const COLOR_RGBA: u8 = 6;

struct Chunk<'a> {
    kind: [u8; 4],
    data: &'a [u8],
    offset: usize,
}

struct Chunks<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Chunks<'a> {
    fn new(bytes: &'a [u8]) -> Result<Self> {
        if bytes.len() < SIGNATURE.len() || bytes[..8] != SIGNATURE {
            return Err(Error::parse(0, "missing PNG signature"));
        }
        Ok(Chunks { bytes, pos: 8 })
    }

    fn next_chunk(&mut self) -> Result<Option<Chunk<'a>>> {
        let offset = self.pos;
        if offset == self.bytes.len() {
            return Ok(None);
        }
        if self.bytes.len() - offset < 12 {
            return Err(Error::parse(offset, "truncated chunk header"));
        }
        let len = u32::from_be_bytes(self.bytes[offset..offset + 4].try_into().unwrap()) as usize;
        let kind: [u8; 4] = self.bytes[offset + 4..offset + 8].try_into().unwrap();
        let end = offset
            .checked_add(12)
            .and_then(|v| v.checked_add(len))
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::parse(offset, format!("chunk `{}` runs past end of data", kind_str(&kind))))?;
        let data = &self.bytes[offset + 8..offset + 8 + len];
        let stored = u32::from_be_bytes(self.bytes[end - 4..end].try_into().unwrap());
        let mut hasher = crc32fast::Hasher::new();
        hasher.update(&kind);
        hasher.update(data);
        if hasher.finalize() != stored {
            return Err(Error::parse(end - 4, format!("CRC mismatch in chunk `{}`", kind_str(&kind))));
        }
        self.pos = end;
        Ok(Some(Chunk { kind, data, offset }))
    }
}

fn kind_str(kind: &[u8; 4]) -> String {
    String::from_utf8_lossy(kind).into_owned()
}

struct Header {
    width: usize,
    height: usize,
    channels: usize,
}

fn parse_header(chunk: &Chunk<'_>) -> Result<Header> {
    if &chunk.kind != b"IHDR" {
        return Err(Error::parse(chunk.offset, "first chunk is not IHDR"));
    }
    let d = chunk.data;
    if d.len() != 13 {
        return Err(Error::parse(chunk.offset, format!("IHDR has {} bytes, expected 13", d.len())));
    }
    let width = u32::from_be_bytes(d[0..4].try_into().unwrap()) as usize;
    let height = u32::from_be_bytes(d[4..8].try_into().unwrap()) as usize;
    let (depth, color, compression, filter, interlace) = (d[8], d[9], d[10], d[11], d[12]);
    if width == 0 || height == 0 {
        return Err(Error::parse(chunk.offset + 8, "zero image extent"));
    }
    if depth != 8 {
        return Err(Error::UnsupportedFormat(format!("PNG bit depth {depth} (only 8 is supported)")));
    }
    let channels = match color {
        COLOR_RGB => 3,
        COLOR_RGBA => 4,
        other => {
            return Err(Error::UnsupportedFormat(format!(
                "PNG color type {other} (only RGB and RGBA are supported)"
            )))
        }
    };
    if compression != 0 || filter != 0 {
        return Err(Error::parse(chunk.offset + 18, "unknown compression or filter method"));
    }
    if interlace != 0 {
        return Err(Error::UnsupportedFormat("interlaced PNG".into()));
    }
    Ok(Header {
        width,
        height,
        channels,
    })
}

pub fn probe(bytes: &[u8]) -> Result<(usize, usize)> {
    let mut chunks = Chunks::new(bytes)?;
    let first = chunks
        .next_chunk()?
        .ok_or_else(|| Error::parse(8, "no chunks after signature"))?;
    let h = parse_header(&first)?;
    Ok((h.width, h.height))
}

pub fn decode(bytes: &[u8]) -> Result<Image> {
    let mut chunks = Chunks::new(bytes)?;
    let first = chunks
        .next_chunk()?
        .ok_or_else(|| Error::parse(8, "no chunks after signature"))?;
    let header = parse_header(&first)?;

    let mut compressed = Vec::new();
    let mut idat_offset = None;
    let mut seen_end = false;
    while let Some(chunk) = chunks.next_chunk()? {
        match &chunk.kind {
            b"IDAT" => {
                idat_offset.get_or_insert(chunk.offset);
                compressed.extend_from_slice(chunk.data);
            }
            b"IEND" => {
                seen_end = true;
                break;
            }
            b"PLTE" => return Err(Error::UnsupportedFormat("palette PNG".into())),
            kind if kind[0].is_ascii_uppercase() && &chunk.kind != b"IHDR" => {
                return Err(Error::parse(
                    chunk.offset,
                    format!("unknown critical chunk `{}`", kind_str(kind)),
                ))
            }
            _ => {}
        }
    }
    let idat_offset = idat_offset.ok_or_else(|| Error::parse(chunks.pos, "no IDAT chunk"))?;
    if !seen_end {
        return Err(Error::parse(chunks.pos, "missing IEND chunk"));
    }

    let stride = header.width * header.channels;
    let expected = header.height * (stride + 1);
    let mut raw = Vec::with_capacity(expected);
    ZlibDecoder::new(compressed.as_slice())
        .take(expected as u64 + 1)
        .read_to_end(&mut raw)
        .map_err(|e| Error::parse(idat_offset, format!("corrupt image data: {e}")))?;
    if raw.len() < expected {
        return Err(Error::parse(
            idat_offset,
            format!("image data truncated: {} of {expected} bytes", raw.len()),
        ));
    }

    let pixels = unfilter(&raw[..expected], header.height, stride, header.channels, idat_offset)?;
    if header.channels == 4 {
        log::warn!("dropping PNG alpha channel");
    }
    let rgb: Vec<u8> = pixels
        .chunks_exact(header.channels)
        .flat_map(|px| [px[0], px[1], px[2]])
        .collect();
    Image::from_bytes(header.width, header.height, &rgb)
}

fn paeth(a: u8, b: u8, c: u8) -> u8 {
    let p = a as i16 + b as i16 - c as i16;
    let (pa, pb, pc) = ((p - a as i16).abs(), (p - b as i16).abs(), (p - c as i16).abs());
    if pa <= pb && pa <= pc {
        a
    } else if pb <= pc {
        b
    } else {
        c
    }
}

fn unfilter(raw: &[u8], height: usize, stride: usize, bpp: usize, offset: usize) -> Result<Vec<u8>> {
    let mut out = vec![0u8; height * stride];
    let mut prev = vec![0u8; stride];
    for y in 0..height {
        let line = &raw[y * (stride + 1)..(y + 1) * (stride + 1)];
        let (filter, src) = (line[0], &line[1..]);
        let row = &mut out[y * stride..(y + 1) * stride];
        for x in 0..stride {
            let a = if x >= bpp { row[x - bpp] } else { 0 };
            let b = prev[x];
            let c = if x >= bpp { prev[x - bpp] } else { 0 };
            let predicted = match filter {
                0 => 0,
                1 => a,
                2 => b,
                3 => ((a as u16 + b as u16) / 2) as u8,
                4 => paeth(a, b, c),
                f => return Err(Error::parse(offset, format!("invalid filter type {f} on row {y}"))),
            };
            row[x] = src[x].wrapping_add(predicted);
        }
        prev.copy_from_slice(row);
    }
    Ok(out)
}

/// Picks, per row, the filter with the smallest sum of absolute residuals.
fn filter_rows(rgb: &[u8], height: usize, stride: usize) -> Vec<u8> {
    const BPP: usize = 3;
    let mut out = Vec::with_capacity(height * (stride + 1));
    let zeros = vec![0u8; stride];
    let mut candidate = vec![0u8; stride];
    let mut best = vec![0u8; stride];
    for y in 0..height {
        let row = &rgb[y * stride..(y + 1) * stride];
        let prev = if y == 0 { &zeros[..] } else { &rgb[(y - 1) * stride..y * stride] };
        let mut best_filter = 0u8;
        let mut best_cost = u64::MAX;
        for filter in 0..5u8 {
            for x in 0..stride {
                let a = if x >= BPP { row[x - BPP] } else { 0 };
                let b = prev[x];
                let c = if x >= BPP { prev[x - BPP] } else { 0 };
                let predicted = match filter {
                    0 => 0,
                    1 => a,
                    2 => b,
                    3 => ((a as u16 + b as u16) / 2) as u8,
                    _ => paeth(a, b, c),
                };
                candidate[x] = row[x].wrapping_sub(predicted);
            }
            let cost: u64 = candidate.iter().map(|&v| (v as i8).unsigned_abs() as u64).sum();
            if cost < best_cost {
                best_cost = cost;
                best_filter = filter;
                best.copy_from_slice(&candidate);
            }
        }
        out.push(best_filter);
        out.extend_from_slice(&best);
    }
    out
}

fn write_chunk(out: &mut Vec<u8>, kind: &[u8; 4], data: &[u8]) {
    out.extend_from_slice(&(data.len() as u32).to_be_bytes());
    out.extend_from_slice(kind);
    out.extend_from_slice(data);
    let mut hasher = crc32fast::Hasher::new();
    hasher.update(kind);
    hasher.update(data);
    out.extend_from_slice(&hasher.finalize().to_be_bytes());
}

pub fn encode(image: &Image) -> Vec<u8> {
    let (w, h) = (image.width(), image.height());
    let rgb = image.to_bytes();
    let filtered = filter_rows(&rgb, h, 3 * w);

    let mut zlib = ZlibEncoder::new(Vec::new(), Compression::default());
    zlib.write_all(&filtered).expect("in-memory write");
    let compressed = zlib.finish().expect("in-memory write");

    let mut ihdr = Vec::with_capacity(13);
    ihdr.extend_from_slice(&(w as u32).to_be_bytes());
    ihdr.extend_from_slice(&(h as u32).to_be_bytes());
    ihdr.extend_from_slice(&[8, COLOR_RGB, 0, 0, 0]);

    let mut out = SIGNATURE.to_vec();
    write_chunk(&mut out, b"IHDR", &ihdr);
    write_chunk(&mut out, b"IDAT", &compressed);
    write_chunk(&mut out, b"IEND", &[]);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient(w: usize, h: usize) -> Image {
        let bytes: Vec<u8> = (0..3 * w * h).map(|i| (i * 37 % 256) as u8).collect();
        Image::from_bytes(w, h, &bytes).unwrap()
    }

    fn rgba_png(w: u32, h: u32, rgba: &[u8]) -> Vec<u8> {
        let mut raw = Vec::new();
        for row in rgba.chunks_exact(4 * w as usize) {
            raw.push(0);
            raw.extend_from_slice(row);
        }
        let mut z = ZlibEncoder::new(Vec::new(), Compression::default());
        z.write_all(&raw).unwrap();
        let mut ihdr = Vec::new();
        ihdr.extend_from_slice(&w.to_be_bytes());
        ihdr.extend_from_slice(&h.to_be_bytes());
        ihdr.extend_from_slice(&[8, COLOR_RGBA, 0, 0, 0]);
        let mut out = SIGNATURE.to_vec();
        write_chunk(&mut out, b"IHDR", &ihdr);
        write_chunk(&mut out, b"IDAT", &z.finish().unwrap());
        write_chunk(&mut out, b"IEND", &[]);
        out
    }

    #[test]
    fn roundtrip() {
        let img = gradient(17, 9);
        let bytes = encode(&img);
        assert_eq!(decode(&bytes).unwrap(), img);
        assert_eq!(probe(&bytes).unwrap(), (17, 9));
    }

    #[test]
    fn rgba_drops_alpha() {
        let bytes = rgba_png(2, 1, &[255, 0, 0, 10, 0, 255, 0, 200]);
        let img = decode(&bytes).unwrap();
        assert_eq!(img.pixels(), &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn bad_signature_at_offset_zero() {
        let err = decode(b"\x89PNX\r\n\x1a\n").unwrap_err();
        assert!(matches!(err, Error::Parse { offset: 0, .. }), "{err}");
    }

    #[test]
    fn truncated_file_reports_chunk_offset() {
        let bytes = encode(&gradient(8, 8));
        let cut = &bytes[..bytes.len() - 20];
        match decode(cut).unwrap_err() {
            Error::Parse { offset, .. } => assert_eq!(offset, 33, "IDAT starts after the 25-byte IHDR chunk"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn crc_corruption_detected() {
        let mut bytes = encode(&gradient(4, 4));
        bytes[20] ^= 0xff;
        assert!(matches!(decode(&bytes).unwrap_err(), Error::Parse { offset: 29, .. }));
    }

    #[test]
    fn unsupported_depth() {
        let mut ihdr = Vec::new();
        ihdr.extend_from_slice(&1u32.to_be_bytes());
        ihdr.extend_from_slice(&1u32.to_be_bytes());
        ihdr.extend_from_slice(&[16, COLOR_RGB, 0, 0, 0]);
        let mut bytes = SIGNATURE.to_vec();
        write_chunk(&mut bytes, b"IHDR", &ihdr);
        assert!(matches!(decode(&bytes).unwrap_err(), Error::UnsupportedFormat(_)));
    }
}
