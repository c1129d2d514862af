//! Binary PPM (P6) with maxval 255.

use super::Image;
use crate::error::{Error, Result};

struct Header {
    width: usize,
    height: usize,
    data_offset: usize,
}

fn skip_space_and_comments(bytes: &[u8], mut pos: usize) -> usize {
    loop {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
        } else {
            return pos;
        }
    }
}

fn read_number(bytes: &[u8], pos: usize, what: &str) -> Result<(usize, usize)> {
    let start = skip_space_and_comments(bytes, pos);
    let mut end = start;
    while end < bytes.len() && bytes[end].is_ascii_digit() {
        end += 1;
    }
    if end == start {
        return Err(Error::parse(start, format!("expected {what}")));
    }
    let value = std::str::from_utf8(&bytes[start..end])
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .ok_or_else(|| Error::parse(start, format!("{what} out of range")))?;
    Ok((value, end))
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    if !bytes.starts_with(b"P6") {
        return Err(Error::parse(0, "missing P6 magic"));
    }
    let (width, pos) = read_number(bytes, 2, "width")?;
    let (height, pos) = read_number(bytes, pos, "height")?;
    let (maxval, pos) = read_number(bytes, pos, "maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::parse(2, "zero image extent"));
    }
    if maxval != 255 {
        return Err(Error::UnsupportedFormat(format!("PPM maxval {maxval} (only 255 is supported)")));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => {}
        _ => return Err(Error::parse(pos, "expected whitespace after maxval")),
    }
    Ok(Header {
        width,
        height,
        data_offset: pos + 1,
    })
}

pub fn probe(bytes: &[u8]) -> Result<(usize, usize)> {
    let h = parse_header(bytes)?;
    Ok((h.width, h.height))
}

pub fn decode(bytes: &[u8]) -> Result<Image> {
    let h = parse_header(bytes)?;
    let needed = h
        .width
        .checked_mul(h.height)
        .and_then(|v| v.checked_mul(3))
        .ok_or_else(|| Error::parse(2, "image extents overflow"))?;
    let available = bytes.len() - h.data_offset;
    if available < needed {
        return Err(Error::parse(
            bytes.len(),
            format!("raster truncated: {available} of {needed} bytes"),
        ));
    }
    Image::from_bytes(h.width, h.height, &bytes[h.data_offset..h.data_offset + needed])
}

pub fn encode(image: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.extend(image.to_bytes());
    out
}
