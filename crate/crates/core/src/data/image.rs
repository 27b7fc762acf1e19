//! 8-bit PNG and binary PPM (P6) reading and writing.

use std::io::Cursor;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

const PNG_SIGNATURE: &[u8] = b"\x89PNG\r\n\x1a\n";

/// 8-bit interleaved pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawImage {
    pub width: usize,
    pub height: usize,
    /// 1 (gray) or 3 (RGB).
    pub channels: usize,
    pub data: Vec<u8>,
}

/// Value in [0, 1] to a byte, clamping and rounding half away from zero.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

impl RawImage {
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let c = self.channels;
        Tensor::from_fn([1, c, self.height, self.width], |[_, ch, y, x]| {
            T::from_f64(f64::from(self.data[(y * self.width + x) * c + ch]) / 255.0)
        })
    }

    /// Item `b` of a `[B, C, H, W]` tensor with C in {1, 3}.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>, b: usize) -> Result<Self> {
        let [_, c, h, w] = t.shape();
        if c != 1 && c != 3 {
            return Err(Error::shape("save_image", "1 or 3 channels", c));
        }
        let mut data = vec![0u8; h * w * c];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    data[(y * w + x) * c + ch] = quantize(t.at(b, ch, y, x).as_f64());
                }
            }
        }
        Ok(Self {
            width: w,
            height: h,
            channels: c,
            data,
        })
    }
}

pub fn decode_png(bytes: &[u8]) -> std::result::Result<RawImage, String> {
    let mut dec = png::Decoder::new(Cursor::new(bytes));
    dec.set_transformations(png::Transformations::EXPAND);
    let mut reader = dec.read_info().map_err(|e| e.to_string())?;
    let size = reader.output_buffer_size().ok_or("image too large")?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| e.to_string())?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(format!("unsupported bit depth {:?}", info.bit_depth));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let src_c = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => return Err(format!("unsupported color type {other:?}")),
    };
    let out_c = if src_c <= 2 { 1 } else { 3 };
    let mut data = Vec::with_capacity(w * h * out_c);
    for y in 0..h {
        let row = &buf[y * info.line_size..];
        for x in 0..w {
            data.extend_from_slice(&row[x * src_c..x * src_c + out_c]);
        }
    }
    Ok(RawImage {
        width: w,
        height: h,
        channels: out_c,
        data,
    })
}

pub fn encode_png(img: &RawImage) -> Vec<u8> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width as u32, img.height as u32);
        enc.set_color(if img.channels == 1 {
            png::ColorType::Grayscale
        } else {
            png::ColorType::Rgb
        });
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().expect("in-memory write");
        w.write_image_data(&img.data).expect("in-memory write");
    }
    out
}

/// Parse a binary PPM with maxval 255.
pub fn decode_ppm(bytes: &[u8]) -> std::result::Result<RawImage, String> {
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in &mut fields {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err("truncated header".into()),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or("malformed header")?;
    }
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err("malformed header".into());
    }
    let data = &bytes[pos + 1..];
    if data.len() < w * h * 3 {
        return Err(format!("truncated pixel data: {} of {} bytes", data.len(), w * h * 3));
    }
    Ok(RawImage {
        width: w,
        height: h,
        channels: 3,
        data: data[..w * h * 3].to_vec(),
    })
}

pub fn encode_ppm(img: &RawImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    if img.channels == 3 {
        out.extend_from_slice(&img.data);
    } else {
        out.extend(img.data.iter().flat_map(|&v| [v, v, v]));
    }
    out
}

pub fn decode_image(bytes: &[u8]) -> std::result::Result<RawImage, String> {
    if bytes.starts_with(PNG_SIGNATURE) {
        decode_png(bytes)
    } else if bytes.starts_with(b"P6") {
        decode_ppm(bytes)
    } else {
        Err("unsupported format (expected PNG or binary PPM)".into())
    }
}

pub fn read_raw(path: impl AsRef<Path>) -> Result<RawImage> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes).map_err(|r| Error::format(path, r))
}

/// RGB image as `[1, 3, H, W]` in [0, 1]; gray files are replicated.
pub fn load_image<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let raw = read_raw(path)?;
    let t = raw.to_tensor::<T>();
    if raw.channels == 3 {
        return Ok(t);
    }
    Ok(Tensor::from_fn([1, 3, raw.height, raw.width], |[_, _, y, x]| {
        t.at(0, 0, y, x)
    }))
}

/// Binary mask `[1, 1, H, W]`: 1 where the first channel exceeds one half.
pub fn load_mask<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let raw = read_raw(path)?;
    let c = raw.channels;
    Ok(Tensor::from_fn([1, 1, raw.height, raw.width], |[_, _, y, x]| {
        if raw.data[(y * raw.width + x) * c] > 127 {
            T::one()
        } else {
            T::zero()
        }
    }))
}

/// Write item `b`; the format follows the extension (`.ppm` or PNG).
pub fn save_image<T: Scalar>(t: &Tensor<T>, b: usize, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let raw = RawImage::from_tensor(t, b)?;
    let is_ppm = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("ppm"));
    let bytes = if is_ppm { encode_ppm(&raw) } else { encode_png(&raw) };
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
