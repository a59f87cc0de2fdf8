//! Binary netpbm I/O: P6 colour images and P5 grayscale maps, 8-bit.
//!
//! Images are `h×w×3` tensors and gray maps `h×w` tensors with values in
//! `[0, 1]`; samples are written as `⌊255·v + 0.5⌋` clamped to `0..=255`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub fn to_u8(v: f64) -> u8 {
    (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

fn header(magic: &str, width: usize, height: usize) -> Vec<u8> {
    format!("{magic}\n{width} {height}\n255\n").into_bytes()
}

pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let [h, w, 3] = image.shape() else {
        return Err(Error::Image(format!("expected h×w×3 image, got {:?}", image.shape())));
    };
    let mut out = header("P6", *w, *h);
    out.extend(image.data().iter().map(|&v| to_u8(v)));
    Ok(out)
}

pub fn encode_pgm(map: &Tensor) -> Result<Vec<u8>> {
    let [h, w] = map.shape() else {
        return Err(Error::Image(format!("expected h×w map, got {:?}", map.shape())));
    };
    let mut out = header("P5", *w, *h);
    out.extend(map.data().iter().map(|&v| to_u8(v)));
    Ok(out)
}

struct Header {
    magic: [u8; 2],
    width: usize,
    height: usize,
    maxval: usize,
    offset: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(Error::Image("not a netpbm file".into()));
    }
    let magic = [bytes[0], bytes[1]];
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Image("malformed netpbm header".into()));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Image("malformed netpbm header".into()))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Image("malformed netpbm header".into()));
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 || maxval == 0 || maxval > 255 {
        return Err(Error::Image(format!("unsupported dimensions {width}x{height} maxval {maxval}")));
    }
    Ok(Header {
        magic,
        width,
        height,
        maxval,
        offset: pos + 1,
    })
}

fn decode(bytes: &[u8], magic: &[u8; 2], channels: usize) -> Result<Tensor> {
    let h = parse_header(bytes)?;
    if &h.magic != magic {
        return Err(Error::Image(format!(
            "expected {}, found {}",
            String::from_utf8_lossy(magic),
            String::from_utf8_lossy(&h.magic)
        )));
    }
    let n = h.width * h.height * channels;
    let raster = bytes
        .get(h.offset..h.offset + n)
        .ok_or_else(|| Error::Image(format!("truncated raster: need {n} bytes")))?;
    let scale = h.maxval as f64;
    let data = raster.iter().map(|&b| b as f64 / scale).collect();
    let shape = if channels == 1 {
        vec![h.height, h.width]
    } else {
        vec![h.height, h.width, channels]
    };
    Tensor::new(shape, data)
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    decode(bytes, b"P6", 3)
}

pub fn decode_pgm(bytes: &[u8]) -> Result<Tensor> {
    decode(bytes, b"P5", 1)
}

pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    let bytes = encode_ppm(image)?;
    fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn write_pgm(path: &Path, map: &Tensor) -> Result<()> {
    let bytes = encode_pgm(map)?;
    fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    decode_ppm(&bytes)
}

pub fn read_pgm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    decode_pgm(&bytes)
}
