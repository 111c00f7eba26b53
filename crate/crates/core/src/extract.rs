//! Images, bilinear token extraction and PPM/PNG I/O.

use std::io::Cursor;
use std::path::Path;

use crate::encoding::{encode_patch, EncodingConfig};
use crate::error::{Error, Result};
use crate::geometry::{ImageSpec, Patch, PatchSet};

/// Channel-major (`c`, then rows, then columns) pixels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub spec: ImageSpec,
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn new(spec: ImageSpec, pixels: Vec<f64>) -> Result<Self> {
        let expected = spec.width * spec.height * spec.channels;
        if pixels.len() != expected {
            return Err(Error::DimensionMismatch(format!(
                "expected {expected} pixel values, got {}",
                pixels.len()
            )));
        }
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("image contains non-finite values"));
        }
        Ok(Self { spec, pixels })
    }

    pub fn filled(spec: ImageSpec, value: f64) -> Self {
        Self {
            spec,
            pixels: vec![value; spec.width * spec.height * spec.channels],
        }
    }

    #[inline]
    pub fn get(&self, c: usize, x: usize, y: usize) -> f64 {
        let s = &self.spec;
        self.pixels[(c * s.height + y) * s.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, x: usize, y: usize, v: f64) {
        let s = self.spec;
        self.pixels[(c * s.height + y) * s.width + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.spec.pixel_count();
        &self.pixels[c * n..(c + 1) * n]
    }

    /// Luma (BT.601) for RGB, identity for single-channel images.
    pub fn to_gray(&self) -> Vec<f64> {
        if self.spec.channels == 1 {
            return self.pixels.clone();
        }
        let (r, g, b) = (self.plane(0), self.plane(1), self.plane(2));
        r.iter()
            .zip(g)
            .zip(b)
            .map(|((r, g), b)| 0.299 * r + 0.587 * g + 0.114 * b)
            .collect()
    }

    /// Axis-aligned crop at integer offsets; the window must lie inside.
    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Result<Image> {
        if x + w > self.spec.width || y + h > self.spec.height {
            return Err(Error::invalid("crop window exceeds image"));
        }
        let spec = ImageSpec::new(w, h, self.spec.channels)?;
        let mut out = Vec::with_capacity(w * h * spec.channels);
        for c in 0..spec.channels {
            for yy in y..y + h {
                for xx in x..x + w {
                    out.push(self.get(c, xx, yy));
                }
            }
        }
        Image::new(spec, out)
    }

    /// Bilinear resize to `width x height` with the same half-pixel
    /// convention used for tokens.
    pub fn resize(&self, width: usize, height: usize) -> Result<Image> {
        let spec = ImageSpec::new(width, height, self.spec.channels)?;
        let sx = self.spec.width as f64 / width as f64;
        let sy = self.spec.height as f64 / height as f64;
        let mut out = vec![0.0; width * height * spec.channels];
        for c in 0..spec.channels {
            for v in 0..height {
                let fy = (v as f64 + 0.5) * sy - 0.5;
                for u in 0..width {
                    let fx = (u as f64 + 0.5) * sx - 0.5;
                    out[(c * height + v) * width + u] = self.sample(c, fx, fy);
                }
            }
        }
        Image::new(spec, out)
    }

    /// Bilinear read at a continuous position with border replication.
    #[inline]
    pub fn sample(&self, c: usize, fx: f64, fy: f64) -> f64 {
        let (w, h) = (self.spec.width, self.spec.height);
        let fx = fx.clamp(0.0, (w - 1) as f64);
        let fy = fy.clamp(0.0, (h - 1) as f64);
        let x0 = fx.floor() as usize;
        let y0 = fy.floor() as usize;
        let x1 = (x0 + 1).min(w - 1);
        let y1 = (y0 + 1).min(h - 1);
        let ax = fx - x0 as f64;
        let ay = fy - y0 as f64;
        let plane = self.plane(c);
        let top = (1.0 - ax) * plane[y0 * w + x0] + ax * plane[y0 * w + x1];
        let bottom = (1.0 - ax) * plane[y1 * w + x0] + ax * plane[y1 * w + x1];
        (1.0 - ay) * top + ay * bottom
    }
}

/// One extracted patch: `r x r x C` pixels (channel-major), the patch it
/// came from and its positional encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct Token {
    pub pixels: Vec<f64>,
    pub patch: Patch,
    pub encoding: Vec<f64>,
}

/// Ordered tokens of one image.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TokenBatch {
    pub tokens: Vec<Token>,
}

impl TokenBatch {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

impl From<Vec<Token>> for TokenBatch {
    fn from(tokens: Vec<Token>) -> Self {
        Self { tokens }
    }
}

/// Resample the `r s x r s` footprint of `p` to `r x r`. Output pixel
/// `(u, v)` reads source position `(x + (u + 0.5) s - 0.5, y + (v + 0.5) s - 0.5)`.
pub fn bilinear_sample(img: &Image, p: &Patch, r: usize) -> Vec<f64> {
    let channels = img.spec.channels;
    let mut out = vec![0.0; r * r * channels];
    for c in 0..channels {
        let dst = &mut out[c * r * r..(c + 1) * r * r];
        for v in 0..r {
            let fy = p.y + (v as f64 + 0.5) * p.s - 0.5;
            for u in 0..r {
                let fx = p.x + (u as f64 + 0.5) * p.s - 0.5;
                dst[v * r + u] = img.sample(c, fx, fy);
            }
        }
    }
    out
}

pub fn extract_tokens(img: &Image, set: &PatchSet, cfg: &EncodingConfig) -> Vec<Token> {
    set.patches
        .iter()
        .map(|p| Token {
            pixels: bilinear_sample(img, p, set.r),
            patch: *p,
            encoding: encode_patch(p, set.r, cfg),
        })
        .collect()
}

/// Like [`extract_tokens`] for a set expressed in a native frame while the
/// pixels come from `source`, which is `factor` times larger. Encodings use
/// the native coordinates.
pub fn extract_tokens_scaled(
    source: &Image,
    factor: f64,
    set: &PatchSet,
    cfg: &EncodingConfig,
) -> Vec<Token> {
    set.patches
        .iter()
        .map(|p| {
            let src_patch = Patch {
                x: p.x * factor,
                y: p.y * factor,
                s: p.s * factor,
                source: p.source,
            };
            Token {
                pixels: bilinear_sample(source, &src_patch, set.r),
                patch: *p,
                encoding: encode_patch(p, set.r, cfg),
            }
        })
        .collect()
}

fn quantize(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Interleave channel-major pixels into 8-bit row-major samples.
fn to_interleaved_u8(img: &Image) -> Vec<u8> {
    let s = img.spec;
    let mut out = Vec::with_capacity(s.pixel_count() * s.channels);
    for y in 0..s.height {
        for x in 0..s.width {
            for c in 0..s.channels {
                out.push(quantize(img.get(c, x, y)));
            }
        }
    }
    out
}

fn from_interleaved_u8(spec: ImageSpec, data: &[u8]) -> Result<Image> {
    let mut img = Image::filled(spec, 0.0);
    let ch = spec.channels;
    for (i, px) in data.chunks_exact(ch).enumerate() {
        let (x, y) = (i % spec.width, i / spec.width);
        for (c, &b) in px.iter().enumerate() {
            img.set(c, x, y, b as f64 / 255.0);
        }
    }
    Ok(img)
}

/// Encode as binary PPM (`P6`) for RGB or PGM (`P5`) for single-channel.
pub fn encode_pnm(img: &Image) -> Vec<u8> {
    let magic = if img.spec.channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.spec.width, img.spec.height).into_bytes();
    out.extend(to_interleaved_u8(img));
    out
}

struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderCursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::parse(start, format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| Error::parse(start, format!("{what} out of range")))
    }
}

/// Decode binary `P6` (RGB) or `P5` (gray) with maxval <= 255.
pub fn decode_pnm(bytes: &[u8]) -> Result<Image> {
    if bytes.len() < 2 {
        return Err(Error::parse(0, "missing magic number"));
    }
    let channels = match &bytes[..2] {
        b"P6" => 3,
        b"P5" => 1,
        _ => return Err(Error::parse(0, "expected P6 or P5 magic")),
    };
    let mut cur = HeaderCursor { bytes, pos: 2 };
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval_at = cur.pos;
    let maxval = cur.number("maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::parse(maxval_at, format!("unsupported maxval {maxval}")));
    }
    if cur.pos >= bytes.len() || !bytes[cur.pos].is_ascii_whitespace() {
        return Err(Error::parse(cur.pos, "expected whitespace before raster"));
    }
    let data_start = cur.pos + 1;
    let spec = ImageSpec::new(width, height, channels)
        .map_err(|e| Error::parse(2, e.to_string()))?;
    let need = width * height * channels;
    let available = bytes.len() - data_start;
    if available < need {
        return Err(Error::parse(
            bytes.len(),
            format!("raster truncated: {available} of {need} bytes"),
        ));
    }
    let raster = &bytes[data_start..data_start + need];
    if maxval == 255 {
        return from_interleaved_u8(spec, raster);
    }
    let scaled: Vec<u8> = raster
        .iter()
        .map(|&b| ((b as f64 * 255.0 / maxval as f64).round()) as u8)
        .collect();
    from_interleaved_u8(spec, &scaled)
}

pub fn encode_png(img: &Image) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.spec.width as u32, img.spec.height as u32);
        enc.set_color(if img.spec.channels == 3 {
            png::ColorType::Rgb
        } else {
            png::ColorType::Grayscale
        });
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
        writer
            .write_image_data(&to_interleaved_u8(img))
            .map_err(|e| Error::Png(e.to_string()))?;
    }
    Ok(out)
}

/// Decode an 8-bit, non-interlaced RGB or grayscale PNG.
pub fn decode_png(bytes: &[u8]) -> Result<Image> {
    let decoder = png::Decoder::new(Cursor::new(bytes));
    let mut reader = decoder.read_info().map_err(|e| Error::Png(e.to_string()))?;
    let info = reader.info();
    if info.interlaced {
        return Err(Error::Png("interlaced PNG is not supported".into()));
    }
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Png(format!("unsupported bit depth {:?}", info.bit_depth)));
    }
    let channels = match info.color_type {
        png::ColorType::Rgb => 3,
        png::ColorType::Grayscale => 1,
        other => return Err(Error::Png(format!("unsupported color type {other:?}"))),
    };
    let spec = ImageSpec::new(info.width as usize, info.height as usize, channels)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Png("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let frame = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Png(e.to_string()))?;
    buf.truncate(frame.buffer_size());
    from_interleaved_u8(spec, &buf)
}

fn is_png(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

/// Load by content: PNG signature or PNM magic.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(b"\x89PNG") {
        decode_png(&bytes)
    } else {
        decode_pnm(&bytes)
    }
}

/// Save as PNG when the extension is `.png`, PPM/PGM otherwise.
pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = if is_png(path) {
        encode_png(img)?
    } else {
        encode_pnm(img)
    };
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
