//! PNG and binary PNM (P5/P6) images, 8 bits per sample.

use std::path::Path;

use hfd_core::ImageBuffer;

use crate::error::{io_at, HfdError, Result};

/// Refuse anything larger than this many samples.
pub const MAX_SAMPLES: usize = 1 << 28;

fn bad(msg: impl Into<String>) -> HfdError {
    HfdError::Image(msg.into())
}

fn check_size(w: usize, h: usize, c: usize) -> Result<()> {
    match w.checked_mul(h).and_then(|p| p.checked_mul(c)) {
        Some(n) if n > 0 && n <= MAX_SAMPLES => Ok(()),
        Some(0) => Err(bad("empty image")),
        _ => Err(bad("dimension overflow")),
    }
}

pub fn load_image(path: &Path) -> Result<ImageBuffer> {
    let bytes = std::fs::read(path).map_err(io_at(path))?;
    decode_image(&bytes)
}

/// Decodes PNG or PNM by sniffing the first bytes.
pub fn decode_image(bytes: &[u8]) -> Result<ImageBuffer> {
    if bytes.starts_with(b"\x89PNG") {
        decode_png(bytes)
    } else if bytes.starts_with(b"P5") || bytes.starts_with(b"P6") {
        decode_pnm(bytes)
    } else {
        Err(bad("unsupported format"))
    }
}

/// Writes PNM for `.ppm`/`.pgm`/`.pnm` extensions and PNG otherwise.
pub fn save_image(img: &ImageBuffer, path: &Path) -> Result<()> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    let bytes = match ext.as_str() {
        "ppm" | "pgm" | "pnm" => encode_pnm(img)?,
        _ => encode_png(img)?,
    };
    std::fs::write(path, bytes).map_err(io_at(path))
}

pub fn decode_png(bytes: &[u8]) -> Result<ImageBuffer> {
    let mut dec = png::Decoder::new(bytes);
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(|e| bad(e.to_string()))?;
    let (w, h) = (reader.info().width as usize, reader.info().height as usize);
    check_size(w, h, 4)?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let frame = reader.next_frame(&mut buf).map_err(|e| bad(e.to_string()))?;
    let data = &buf[..frame.buffer_size()];
    let (src_c, keep) = match frame.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        png::ColorType::Indexed => return Err(bad("unexpanded palette")),
    };
    if frame.bit_depth != png::BitDepth::Eight {
        return Err(bad("unsupported bit depth"));
    }
    let px: Vec<u8> = data.chunks_exact(src_c).flat_map(|p| p[..keep].iter().copied()).collect();
    Ok(ImageBuffer::from_u8(h, w, keep, &px)?)
}

pub fn encode_png(img: &ImageBuffer) -> Result<Vec<u8>> {
    let color = match img.channels() {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        c => return Err(bad(format!("cannot write {c} channels"))),
    };
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width() as u32, img.height() as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().map_err(|e| bad(e.to_string()))?;
        w.write_image_data(&img.to_u8()).map_err(|e| bad(e.to_string()))?;
    }
    Ok(out)
}

fn pnm_header(bytes: &[u8]) -> Result<([usize; 3], usize)> {
    // Magic, width, height, maxval, separated by whitespace and comments.
    let mut fields = Vec::with_capacity(4);
    let mut i = 0;
    while fields.len() < 4 {
        match bytes.get(i) {
            None => return Err(bad("truncated header")),
            Some(b'#') => {
                while bytes.get(i).is_some_and(|&b| b != b'\n') {
                    i += 1;
                }
            }
            Some(b) if b.is_ascii_whitespace() => i += 1,
            Some(_) => {
                let start = i;
                while bytes.get(i).is_some_and(|b| !b.is_ascii_whitespace()) {
                    i += 1;
                }
                fields.push(std::str::from_utf8(&bytes[start..i]).map_err(|_| bad("bad header"))?);
            }
        }
    }
    // Exactly one whitespace byte follows the maxval.
    if !bytes.get(i).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(bad("truncated header"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let c = if fields[0] == "P6" { 3 } else { 1 };
    let (w, h, max) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if max != 255 {
        return Err(bad("only 8-bit PNM is supported"));
    }
    Ok(([w, h, c], i + 1))
}

pub fn decode_pnm(bytes: &[u8]) -> Result<ImageBuffer> {
    let ([w, h, c], off) = pnm_header(bytes)?;
    check_size(w, h, c)?;
    let n = w * h * c;
    let body = bytes.get(off..off + n).ok_or_else(|| bad("truncated pixel data"))?;
    Ok(ImageBuffer::from_u8(h, w, c, body)?)
}

pub fn encode_pnm(img: &ImageBuffer) -> Result<Vec<u8>> {
    let magic = match img.channels() {
        1 => "P5",
        3 => "P6",
        c => return Err(bad(format!("cannot write {c} channels"))),
    };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend_from_slice(&img.to_u8());
    Ok(out)
}
