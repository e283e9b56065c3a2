//! Binary PPM (P6, maxval 255) codec.

use thiserror::Error;

/// Planar 8-bit image, `[C,H,W]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), channels * height * width);
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn plane(&self, c: usize) -> &[u8] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PpmError {
    #[error("not a binary PPM (expected \"P6\")")]
    BadMagic,
    #[error("malformed PPM header: {0}")]
    BadHeader(&'static str),
    #[error("unsupported maxval {0} (only 255 is accepted)")]
    UnsupportedMaxval(u32),
    #[error("image dimensions {width}x{height} are too large")]
    TooLarge { width: usize, height: usize },
    #[error("pixel data truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
}

/// Largest accepted side length; bounds allocation on hostile headers.
pub const MAX_SIDE: usize = 1 << 14;

fn skip_space_and_comments(buf: &[u8], mut pos: usize) -> usize {
    loop {
        while pos < buf.len() && buf[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < buf.len() && buf[pos] == b'#' {
            while pos < buf.len() && buf[pos] != b'\n' && buf[pos] != b'\r' {
                pos += 1;
            }
        } else {
            return pos;
        }
    }
}

fn read_number(buf: &[u8], pos: usize) -> Result<(u32, usize), PpmError> {
    let start = skip_space_and_comments(buf, pos);
    let mut end = start;
    let mut value: u32 = 0;
    while end < buf.len() && buf[end].is_ascii_digit() {
        value = value
            .checked_mul(10)
            .and_then(|v| v.checked_add((buf[end] - b'0') as u32))
            .ok_or(PpmError::BadHeader("number overflows"))?;
        end += 1;
    }
    if end == start {
        return Err(PpmError::BadHeader("expected a decimal number"));
    }
    Ok((value, end))
}

/// Decodes a P6 image into planar RGB.
pub fn decode_ppm(buf: &[u8]) -> Result<Image, PpmError> {
    if buf.len() < 2 || &buf[..2] != b"P6" {
        return Err(PpmError::BadMagic);
    }
    let (width, pos) = read_number(buf, 2)?;
    let (height, pos) = read_number(buf, pos)?;
    let (maxval, pos) = read_number(buf, pos)?;
    if maxval != 255 {
        return Err(PpmError::UnsupportedMaxval(maxval));
    }
    // exactly one whitespace byte separates the header from the raster
    match buf.get(pos) {
        Some(b) if b.is_ascii_whitespace() => {}
        _ => return Err(PpmError::BadHeader("missing separator before pixel data")),
    }
    let (width, height) = (width as usize, height as usize);
    if width == 0 || height == 0 {
        return Err(PpmError::BadHeader("zero dimension"));
    }
    if width > MAX_SIDE || height > MAX_SIDE {
        return Err(PpmError::TooLarge { width, height });
    }
    let raster = &buf[pos + 1..];
    let expected = width * height * 3;
    if raster.len() < expected {
        return Err(PpmError::Truncated {
            expected,
            found: raster.len(),
        });
    }
    let n = width * height;
    let mut data = vec![0u8; expected];
    for (i, px) in raster[..expected].chunks_exact(3).enumerate() {
        data[i] = px[0];
        data[n + i] = px[1];
        data[2 * n + i] = px[2];
    }
    Ok(Image::new(3, height, width, data))
}

/// Encodes a 3-channel planar image as P6.
pub fn encode_ppm(img: &Image) -> Vec<u8> {
    assert_eq!(img.channels, 3, "PPM holds RGB only");
    let n = img.height * img.width;
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.reserve(n * 3);
    for i in 0..n {
        out.extend([img.data[i], img.data[n + i], img.data[2 * n + i]]);
    }
    out
}
