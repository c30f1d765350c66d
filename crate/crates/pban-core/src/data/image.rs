//! Image decode/encode (PNG subset and binary PPM) and patch extraction.

use std::fs;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{PbanError, Result};
use crate::tensor::Tensor;

/// An RGB image as a [3,H,W] tensor with values in [0,1].
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRGB {
    pub width: usize,
    pub height: usize,
    pub pixels: Tensor<f32>,
}

impl ImageRGB {
    /// Wraps an existing [3,H,W] tensor, enforcing the value range.
    pub fn from_pixels(pixels: Tensor<f32>) -> Result<ImageRGB> {
        let shape = pixels.shape();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(PbanError::Dimension {
                op: "ImageRGB",
                msg: format!("expected [3,H,W] pixels, got {shape:?}"),
            });
        }
        if pixels.as_slice().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(PbanError::Data("image values must lie in [0,1]".into()));
        }
        Ok(ImageRGB {
            width: shape[2],
            height: shape[1],
            pixels,
        })
    }

    fn from_bytes(width: usize, height: usize, f: impl Fn(usize, usize) -> f32) -> ImageRGB {
        // f(channel, pixel index) in [0,1].
        let plane = width * height;
        let pixels = Tensor::from_fn(&[3, height, width], |i| f(i / plane, i % plane));
        ImageRGB { width, height, pixels }
    }
}

/// Decodes PNG (8-bit RGB/RGBA/grayscale) or binary PPM (P6, maxval 255)
/// bytes into [0,1] RGB. Alpha is dropped; grayscale is replicated across
/// the three channels.
pub fn decode_image(bytes: &[u8]) -> Result<ImageRGB> {
    if bytes.starts_with(&[0x89, b'P', b'N', b'G']) {
        decode_png(bytes)
    } else if bytes.starts_with(b"P6") {
        decode_ppm(bytes)
    } else {
        let magic: String = bytes
            .iter()
            .take(4)
            .map(|&b| if b.is_ascii_graphic() { b as char } else { '.' })
            .collect();
        Err(PbanError::Format(format!(
            "unsupported image format (magic \"{magic}\"); expected PNG or P6 PPM"
        )))
    }
}

/// Reads and decodes an image file.
pub fn read_image(path: &Path) -> Result<ImageRGB> {
    let bytes = fs::read(path).map_err(|e| PbanError::io(path, e))?;
    decode_image(&bytes)
}

fn decode_png(bytes: &[u8]) -> Result<ImageRGB> {
    let mut decoder = png::Decoder::new(bytes);
    // Expand palette and low-bit grayscale to 8 bits; 16-bit stays 16-bit
    // and is rejected below.
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder
        .read_info()
        .map_err(|e| PbanError::Decode(format!("png header: {e}")))?;
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| PbanError::Decode(format!("png data: {e}")))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(PbanError::Format(format!(
            "only 8-bit PNG is supported, got {:?}",
            info.bit_depth
        )));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let data = &buf[..info.buffer_size()];
    let norm = |b: u8| b as f32 / 255.0;
    let img = match info.color_type {
        png::ColorType::Rgb => ImageRGB::from_bytes(w, h, |c, p| norm(data[3 * p + c])),
        png::ColorType::Rgba => ImageRGB::from_bytes(w, h, |c, p| norm(data[4 * p + c])),
        png::ColorType::Grayscale => ImageRGB::from_bytes(w, h, |_, p| norm(data[p])),
        png::ColorType::GrayscaleAlpha => ImageRGB::from_bytes(w, h, |_, p| norm(data[2 * p])),
        other => {
            return Err(PbanError::Format(format!(
                "unsupported PNG color type {other:?}"
            )))
        }
    };
    Ok(img)
}

struct PpmHeader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> PpmHeader<'a> {
    /// Advances past whitespace and '#' comments.
    fn skip_separators(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b' ' | b'\t' | b'\r' | b'\n' => self.pos += 1,
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                _ => return,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_separators();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(PbanError::Format(format!("ppm header: missing {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| PbanError::Format(format!("ppm header: bad {what}")))
    }
}

fn decode_ppm(bytes: &[u8]) -> Result<ImageRGB> {
    let mut h = PpmHeader { bytes, pos: 2 };
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval = h.number("maxval")?;
    if maxval != 255 {
        return Err(PbanError::Format(format!(
            "ppm maxval must be 255, got {maxval}"
        )));
    }
    // Exactly one whitespace byte separates the header from the raster.
    let pos = h.pos + 1;
    if h.pos >= bytes.len() || !bytes[h.pos].is_ascii_whitespace() {
        return Err(PbanError::Format("ppm header: missing raster separator".into()));
    }
    let need = 3 * width * height;
    let data = bytes
        .get(pos..pos + need)
        .ok_or_else(|| PbanError::Decode(format!(
            "ppm raster truncated: need {need} bytes, have {}",
            bytes.len().saturating_sub(pos)
        )))?;
    Ok(ImageRGB::from_bytes(width, height, |c, p| {
        data[3 * p + c] as f32 / 255.0
    }))
}

/// Serializes to binary PPM (P6, maxval 255), rounding to the nearest byte.
pub fn encode_ppm(img: &ImageRGB) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    let px = img.pixels.as_slice();
    let plane = img.width * img.height;
    for p in 0..plane {
        for c in 0..3 {
            out.push((px[c * plane + p] * 255.0).round() as u8);
        }
    }
    out
}

pub fn write_ppm(path: &Path, img: &ImageRGB) -> Result<()> {
    fs::write(path, encode_ppm(img)).map_err(|e| PbanError::io(path, e))
}

/// Writes one 8-bit grayscale PNG; `gray` is row-major, length w*h.
pub fn write_gray_png(path: &Path, gray: &[u8], width: usize, height: usize) -> Result<()> {
    if gray.len() != width * height {
        return Err(PbanError::Dimension {
            op: "write_gray_png",
            msg: format!("buffer length {} vs {width}x{height}", gray.len()),
        });
    }
    let file = fs::File::create(path).map_err(|e| PbanError::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc
        .write_header()
        .map_err(|e| PbanError::Format(format!("png encode: {e}")))?;
    writer
        .write_image_data(gray)
        .map_err(|e| PbanError::Format(format!("png encode: {e}")))?;
    Ok(())
}

/// Non-overlapping row-major grid of square patches as [3,size,size]
/// tensors; right and bottom remainders are discarded. An image smaller
/// than one patch yields an empty list.
pub fn extract_patches(img: &ImageRGB, size: usize) -> Result<Vec<Tensor<f32>>> {
    if size == 0 {
        return Err(PbanError::Parameter("patch size must be positive".into()));
    }
    let rows = img.height / size;
    let cols = img.width / size;
    let src = img.pixels.as_slice();
    let plane = img.width * img.height;
    let mut out = Vec::with_capacity(rows * cols);
    for py in 0..rows {
        for px in 0..cols {
            let mut data = vec![0f32; 3 * size * size];
            for c in 0..3 {
                for y in 0..size {
                    let srow = (py * size + y) * img.width + px * size;
                    let drow = c * size * size + y * size;
                    data[drow..drow + size]
                        .copy_from_slice(&src[c * plane + srow..c * plane + srow + size]);
                }
            }
            out.push(Tensor::new(vec![3, size, size], data)?);
        }
    }
    Ok(out)
}
