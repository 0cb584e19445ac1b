//! Stage-one codec: box-mean analysis, uniform scalar quantization, an
//! adaptive order-0 arithmetic coder, and the `HFDC` container.
//!
//! # Container layout (little-endian)
//!
//! | bytes | field |
//! |-------|-------|
//! | 4 | magic `HFDC` |
//! | 1 | version (1) |
//! | 1 | flags (bit 0: residual-energy section present) |
//! | 4 | width |
//! | 4 | height |
//! | 1 | channels |
//! | 1 | downsample |
//! | 8 | delta (`f64`) |
//! | 4 | payload length |
//! | 4 | payload CRC-32 |
//! | n | payload |
//!
//! followed, when flag bit 0 is set, by `length u32 | CRC-32 u32 | bytes` of
//! the residual-energy section.
//!
//! An entropy-coded payload starts with `alphabet u16 | count u32` and then
//! the arithmetic-coded bits.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{check_len, invalid, Error, Result};
use crate::image::ImageBuffer;
use crate::math;

pub const MAGIC: [u8; 4] = *b"HFDC";
pub const VERSION: u8 = 1;
/// Symbols must lie in `0..MAX_ALPHABET` (12 bits).
pub const MAX_ALPHABET: u32 = 4096;
const FLAG_SIDE: u8 = 1;
const HEADER_LEN: usize = 4 + 1 + 1 + 4 + 4 + 1 + 1 + 8 + 4 + 4;

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CodecConfig {
    pub downsample: usize,
    pub delta: f64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            downsample: 4,
            delta: 1.0 / 32.0,
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        if ![2, 4, 8].contains(&self.downsample) {
            return Err(invalid("downsample must be 2, 4 or 8"));
        }
        if !(self.delta.is_finite() && self.delta >= 1.0 / (MAX_ALPHABET - 1) as f64) {
            return Err(invalid("delta must be finite and at least 1/4095"));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Adaptive frequency model

const INCREMENT: u32 = 32;
const MAX_TOTAL: u32 = 1 << 16;

/// Order-0 adaptive model: counts start at 1, grow by 32, and are halved
/// (rounding up) once the total would exceed 2^16.
struct Model {
    tree: Vec<u32>,
    freq: Vec<u32>,
    total: u32,
}

impl Model {
    fn new(alphabet: usize) -> Self {
        let mut m = Self {
            tree: vec![0; alphabet + 1],
            freq: vec![1; alphabet],
            total: alphabet as u32,
        };
        m.rebuild();
        m
    }

    fn rebuild(&mut self) {
        self.tree.iter_mut().for_each(|t| *t = 0);
        for i in 0..self.freq.len() {
            let mut j = i + 1;
            while j < self.tree.len() {
                self.tree[j] += self.freq[i];
                j += j & j.wrapping_neg();
            }
        }
        self.total = self.freq.iter().sum();
    }

    /// Sum of frequencies of symbols below `s`.
    fn cum(&self, s: usize) -> u32 {
        let mut j = s;
        let mut acc = 0;
        while j > 0 {
            acc += self.tree[j];
            j &= j - 1;
        }
        acc
    }

    /// Symbol whose interval contains `target` (< total).
    fn find(&self, target: u32) -> usize {
        let n = self.tree.len() - 1;
        let mut pos = 0;
        let mut rem = target;
        let mut step = n.next_power_of_two();
        while step > 0 {
            let next = pos + step;
            if next <= n && self.tree[next] <= rem {
                pos = next;
                rem -= self.tree[next];
            }
            step >>= 1;
        }
        pos
    }

    fn update(&mut self, s: usize) {
        if self.total + INCREMENT > MAX_TOTAL {
            for f in &mut self.freq {
                *f = f.div_ceil(2);
            }
            self.freq[s] += INCREMENT;
            self.rebuild();
            return;
        }
        self.freq[s] += INCREMENT;
        self.total += INCREMENT;
        let mut j = s + 1;
        while j < self.tree.len() {
            self.tree[j] += INCREMENT;
            j += j & j.wrapping_neg();
        }
    }
}

/// Ideal code length in bits of `symbols` under the adaptive model.
pub fn adaptive_cross_entropy_bits(symbols: &[u32], alphabet: usize) -> Result<f64> {
    if alphabet == 0 || alphabet > MAX_ALPHABET as usize {
        return Err(invalid("alphabet size must be in 1..=4096"));
    }
    let mut m = Model::new(alphabet);
    let mut bits = 0.0;
    for &s in symbols {
        let s = s as usize;
        if s >= alphabet {
            return Err(Error::AlphabetOverflow {
                symbol: s as u32,
                limit: alphabet as u32,
            });
        }
        bits -= math::log2(m.freq[s] as f64 / m.total as f64);
        m.update(s);
    }
    Ok(bits)
}

// ---------------------------------------------------------------------------
// Binary arithmetic coder with 32-bit registers

const TOP: u64 = (1 << 32) - 1;
const HALF: u64 = 1 << 31;
const QUARTER: u64 = 1 << 30;

struct BitWriter {
    bytes: Vec<u8>,
    acc: u8,
    n: u8,
}

impl BitWriter {
    fn push(&mut self, bit: bool) {
        self.acc = (self.acc << 1) | bit as u8;
        self.n += 1;
        if self.n == 8 {
            self.bytes.push(self.acc);
            self.acc = 0;
            self.n = 0;
        }
    }

    fn finish(mut self) -> Vec<u8> {
        if self.n > 0 {
            self.acc <<= 8 - self.n;
            self.bytes.push(self.acc);
        }
        self.bytes
    }
}

struct Encoder {
    low: u64,
    high: u64,
    pending: u64,
    out: BitWriter,
}

impl Encoder {
    fn new() -> Self {
        Self {
            low: 0,
            high: TOP,
            pending: 0,
            out: BitWriter {
                bytes: Vec::new(),
                acc: 0,
                n: 0,
            },
        }
    }

    fn emit(&mut self, bit: bool) {
        self.out.push(bit);
        while self.pending > 0 {
            self.out.push(!bit);
            self.pending -= 1;
        }
    }

    fn encode(&mut self, lo: u32, hi: u32, total: u32) {
        let range = self.high - self.low + 1;
        self.high = self.low + range * hi as u64 / total as u64 - 1;
        self.low += range * lo as u64 / total as u64;
        loop {
            if self.high < HALF {
                self.emit(false);
            } else if self.low >= HALF {
                self.emit(true);
                self.low -= HALF;
                self.high -= HALF;
            } else if self.low >= QUARTER && self.high < 3 * QUARTER {
                self.pending += 1;
                self.low -= QUARTER;
                self.high -= QUARTER;
            } else {
                break;
            }
            self.low <<= 1;
            self.high = (self.high << 1) | 1;
        }
    }

    fn finish(mut self) -> Vec<u8> {
        self.pending += 1;
        let bit = self.low >= QUARTER;
        self.emit(bit);
        self.out.finish()
    }
}

struct Decoder<'a> {
    bytes: &'a [u8],
    pos: usize,
    low: u64,
    high: u64,
    value: u64,
}

/// Bits the decoder may read past the end of the data before the stream is
/// declared truncated.
const SLACK_BITS: usize = 64;

impl<'a> Decoder<'a> {
    fn new(bytes: &'a [u8]) -> Result<Self> {
        let mut d = Self {
            bytes,
            pos: 0,
            low: 0,
            high: TOP,
            value: 0,
        };
        for _ in 0..32 {
            d.value = (d.value << 1) | d.bit()?;
        }
        Ok(d)
    }

    fn bit(&mut self) -> Result<u64> {
        let i = self.pos;
        self.pos += 1;
        if i / 8 < self.bytes.len() {
            Ok(((self.bytes[i / 8] >> (7 - i % 8)) & 1) as u64)
        } else if i < self.bytes.len() * 8 + SLACK_BITS {
            Ok(0)
        } else {
            Err(Error::Truncated)
        }
    }

    fn decode(&mut self, model: &Model) -> Result<usize> {
        let total = model.total as u64;
        let range = self.high - self.low + 1;
        let scaled = ((self.value - self.low + 1) * total - 1) / range;
        if scaled >= total {
            return Err(Error::Corrupt("arithmetic decoder out of range".into()));
        }
        let s = model.find(scaled as u32);
        if s >= model.freq.len() {
            return Err(Error::Corrupt("arithmetic decoder out of range".into()));
        }
        let lo = model.cum(s) as u64;
        let hi = lo + model.freq[s] as u64;
        self.high = self.low + range * hi / total - 1;
        self.low += range * lo / total;
        loop {
            if self.high < HALF {
            } else if self.low >= HALF {
                self.low -= HALF;
                self.high -= HALF;
                self.value -= HALF;
            } else if self.low >= QUARTER && self.high < 3 * QUARTER {
                self.low -= QUARTER;
                self.high -= QUARTER;
                self.value -= QUARTER;
            } else {
                break;
            }
            self.low <<= 1;
            self.high = (self.high << 1) | 1;
            self.value = (self.value << 1) | self.bit()?;
        }
        Ok(s)
    }
}

/// Entropy-codes `symbols` (each `< 4096`). The alphabet size is taken as
/// `max + 1` and stored in the payload header with the symbol count.
pub fn entropy_code(symbols: &[u32]) -> Result<Vec<u8>> {
    if let Some(&bad) = symbols.iter().find(|&&s| s >= MAX_ALPHABET) {
        return Err(Error::AlphabetOverflow {
            symbol: bad,
            limit: MAX_ALPHABET,
        });
    }
    let count = u32::try_from(symbols.len()).map_err(|_| invalid("too many symbols"))?;
    let alphabet = symbols.iter().max().map_or(0, |m| m + 1);
    let mut out = Vec::with_capacity(6 + symbols.len() / 2);
    out.extend_from_slice(&(alphabet as u16).to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    if symbols.is_empty() {
        return Ok(out);
    }
    let mut model = Model::new(alphabet as usize);
    let mut enc = Encoder::new();
    for &s in symbols {
        let s = s as usize;
        let lo = model.cum(s);
        enc.encode(lo, lo + model.freq[s], model.total);
        model.update(s);
    }
    out.extend_from_slice(&enc.finish());
    Ok(out)
}

/// Inverse of [`entropy_code`]; `count` must equal the stored count.
pub fn entropy_decode(bytes: &[u8], count: usize) -> Result<Vec<u32>> {
    if bytes.len() < 6 {
        return Err(Error::Truncated);
    }
    let alphabet = u16::from_le_bytes([bytes[0], bytes[1]]) as usize;
    let stored = u32::from_le_bytes([bytes[2], bytes[3], bytes[4], bytes[5]]) as usize;
    if stored != count {
        return Err(Error::CountMismatch { declared: count, stored });
    }
    if count == 0 {
        return Ok(Vec::new());
    }
    if alphabet == 0 || alphabet > MAX_ALPHABET as usize {
        return Err(Error::Corrupt("bad alphabet size".into()));
    }
    let mut model = Model::new(alphabet);
    let mut dec = Decoder::new(&bytes[6..])?;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let s = dec.decode(&model)?;
        model.update(s);
        out.push(s as u32);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Transforms

/// Latent grid size for an axis of `n` pixels.
fn grid(n: usize, d: usize) -> usize {
    n.div_ceil(d)
}

/// Planar latents: per channel, the mean of each `d x d` block (partial
/// blocks at the right/bottom edge average the pixels they contain).
pub fn analysis(img: &ImageBuffer, d: usize) -> Vec<f64> {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let (gh, gw) = (grid(h, d), grid(w, d));
    let mut sums = vec![0.0; c * gh * gw];
    let data = img.data();
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                sums[(ch * gh + y / d) * gw + x / d] += data[(y * w + x) * c + ch];
            }
        }
    }
    for ch in 0..c {
        for by in 0..gh {
            for bx in 0..gw {
                let n = (h.min((by + 1) * d) - by * d) * (w.min((bx + 1) * d) - bx * d);
                sums[(ch * gh + by) * gw + bx] /= n as f64;
            }
        }
    }
    sums
}

/// Bilinear upsampling of the latent grid followed by a per-block offset
/// that restores each block mean exactly, so `analysis(synthesis(l)) == l`.
pub fn synthesis(latents: &[f64], h: usize, w: usize, c: usize, d: usize) -> Result<ImageBuffer> {
    let (gh, gw) = (grid(h, d), grid(w, d));
    check_len(c * gh * gw, latents.len())?;
    let coord = |p: usize, n: usize| -> (usize, usize, f64) {
        let u = ((p as f64 + 0.5) / d as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = math::floor(u) as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, u - i0 as f64)
    };
    let mut out = vec![0.0; h * w * c];
    for y in 0..h {
        let (y0, y1, fy) = coord(y, gh);
        for x in 0..w {
            let (x0, x1, fx) = coord(x, gw);
            for ch in 0..c {
                let l = |gy: usize, gx: usize| latents[(ch * gh + gy) * gw + gx];
                let top = l(y0, x0) * (1.0 - fx) + l(y0, x1) * fx;
                let bot = l(y1, x0) * (1.0 - fx) + l(y1, x1) * fx;
                out[(y * w + x) * c + ch] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    let img = ImageBuffer::from_vec(h, w, c, out)?;
    let means = analysis(&img, d);
    let mut data = img.into_vec();
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let k = (ch * gh + y / d) * gw + x / d;
                data[(y * w + x) * c + ch] += latents[k] - means[k];
            }
        }
    }
    ImageBuffer::from_vec(h, w, c, data)
}

/// `round(l / delta)` per latent; values must fall in `0..4096`.
pub fn quantize(latents: &[f64], delta: f64) -> Result<Vec<u32>> {
    latents
        .iter()
        .map(|&l| {
            let q = math::round(l / delta);
            if !(0.0..MAX_ALPHABET as f64).contains(&q) {
                Err(Error::AlphabetOverflow {
                    symbol: q.clamp(0.0, u32::MAX as f64) as u32,
                    limit: MAX_ALPHABET,
                })
            } else {
                Ok(q as u32)
            }
        })
        .collect()
}

/// Midpoint reconstruction `q * delta`.
pub fn dequantize(q: &[u32], delta: f64) -> Vec<f64> {
    q.iter().map(|&q| q as f64 * delta).collect()
}

// ---------------------------------------------------------------------------
// Container

#[derive(Clone, Debug, PartialEq)]
pub struct Bitstream {
    pub width: u32,
    pub height: u32,
    pub channels: u8,
    pub config: CodecConfig,
    pub payload: Vec<u8>,
    /// Entropy-coded residual-energy map, if present.
    pub side: Option<Vec<u8>>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::Truncated)?;
        if end > self.b.len() {
            return Err(Error::Truncated);
        }
        let s = &self.b[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        let s = self.take(4)?;
        Ok(u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
    }

    fn f64(&mut self) -> Result<f64> {
        let mut a = [0u8; 8];
        a.copy_from_slice(self.take(8)?);
        Ok(f64::from_le_bytes(a))
    }

    fn section(&mut self) -> Result<Vec<u8>> {
        let len = self.u32()? as usize;
        let crc = self.u32()?;
        let data = self.take(len)?;
        if crc32fast::hash(data) != crc {
            return Err(Error::Corrupt("checksum mismatch".into()));
        }
        Ok(data.to_vec())
    }
}

impl Bitstream {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.byte_len());
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.push(if self.side.is_some() { FLAG_SIDE } else { 0 });
        put_u32(&mut out, self.width);
        put_u32(&mut out, self.height);
        out.push(self.channels);
        out.push(self.config.downsample as u8);
        out.extend_from_slice(&self.config.delta.to_le_bytes());
        for section in core::iter::once(&self.payload).chain(self.side.as_ref()) {
            put_u32(&mut out, section.len() as u32);
            put_u32(&mut out, crc32fast::hash(section));
            out.extend_from_slice(section);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { b: bytes, pos: 0 };
        if r.take(4).map_err(|_| Error::BadMagic)? != MAGIC {
            return Err(Error::BadMagic);
        }
        let version = r.u8()?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let flags = r.u8()?;
        if flags & !FLAG_SIDE != 0 {
            return Err(Error::Corrupt("unknown flags".into()));
        }
        let width = r.u32()?;
        let height = r.u32()?;
        let channels = r.u8()?;
        let downsample = r.u8()? as usize;
        let delta = r.f64()?;
        let config = CodecConfig { downsample, delta };
        config.validate().map_err(|_| Error::Corrupt("bad codec parameters".into()))?;
        if width == 0 || height == 0 || channels == 0 {
            return Err(Error::Corrupt("empty image".into()));
        }
        let payload = r.section()?;
        let side = if flags & FLAG_SIDE != 0 { Some(r.section()?) } else { None };
        if r.pos != bytes.len() {
            return Err(Error::Corrupt("trailing bytes".into()));
        }
        Ok(Self {
            width,
            height,
            channels,
            config,
            payload,
            side,
        })
    }

    /// Total serialized size, header included.
    pub fn byte_len(&self) -> usize {
        HEADER_LEN + self.payload.len() + self.side.as_ref().map_or(0, |s| 8 + s.len())
    }

    pub fn bpp(&self) -> f64 {
        bpp(self.byte_len(), self.width as usize, self.height as usize)
    }

    pub fn latent_count(&self) -> usize {
        let d = self.config.downsample;
        self.channels as usize * grid(self.height as usize, d) * grid(self.width as usize, d)
    }

    pub fn latents(&self) -> Result<Vec<u32>> {
        entropy_decode(&self.payload, self.latent_count())
    }
}

/// Bits per pixel for a stream of `bytes` total length.
pub fn bpp(bytes: usize, width: usize, height: usize) -> f64 {
    8.0 * bytes as f64 / (width * height) as f64
}

/// Deterministic stage-one encoder.
pub fn encode(img: &ImageBuffer, config: &CodecConfig) -> Result<Bitstream> {
    config.validate()?;
    let (h, w, c) = (img.height(), img.width(), img.channels());
    if h < config.downsample || w < config.downsample {
        return Err(invalid("image smaller than the downsampling factor"));
    }
    if c == 0 || c > 255 || h > u32::MAX as usize || w > u32::MAX as usize {
        return Err(invalid("unsupported image dimensions"));
    }
    let q = quantize(&analysis(img, config.downsample), config.delta)?;
    Ok(Bitstream {
        width: w as u32,
        height: h as u32,
        channels: c as u8,
        config: *config,
        payload: entropy_code(&q)?,
        side: None,
    })
}

/// Stage-one reconstruction (not clamped, so re-encoding reproduces the
/// same latents).
pub fn decode(bs: &Bitstream) -> Result<ImageBuffer> {
    let q = bs.latents()?;
    let d = bs.config.downsample;
    synthesis(
        &dequantize(&q, bs.config.delta),
        bs.height as usize,
        bs.width as usize,
        bs.channels as usize,
        d,
    )
}

// ---------------------------------------------------------------------------
// Residual-energy side channel

pub const ENERGY_FACTOR: usize = 8;
pub const ENERGY_LEVELS: u8 = 4;
pub const ENERGY_MAX: f64 = 0.25;

/// Coarse map of `mean_c |x_mse - x|` at 1/8 resolution, quantized to four
/// levels over `[0, 0.25]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualEnergyMap {
    pub grid_height: usize,
    pub grid_width: usize,
    pub levels: Vec<u8>,
}

impl ResidualEnergyMap {
    pub fn step() -> f64 {
        ENERGY_MAX / (ENERGY_LEVELS - 1) as f64
    }

    pub fn values(&self) -> Vec<f64> {
        self.levels.iter().map(|&l| l as f64 * Self::step()).collect()
    }

    /// Nearest-neighbour expansion to a single-channel planar image.
    pub fn upsample(&self, height: usize, width: usize) -> Vec<f64> {
        let vals = self.values();
        let mut out = vec![0.0; height * width];
        for y in 0..height {
            for x in 0..width {
                let gy = (y / ENERGY_FACTOR).min(self.grid_height - 1);
                let gx = (x / ENERGY_FACTOR).min(self.grid_width - 1);
                out[y * width + x] = vals[gy * self.grid_width + gx];
            }
        }
        out
    }
}

pub fn residual_energy_map(x: &ImageBuffer, x_mse: &ImageBuffer) -> Result<ResidualEnergyMap> {
    if x.dims() != x_mse.dims() {
        return Err(Error::ShapeMismatch {
            expected: x.data().len(),
            got: x_mse.data().len(),
        });
    }
    let (h, w, c) = (x.height(), x.width(), x.channels());
    let mag: Vec<f64> = x
        .data()
        .chunks(c)
        .zip(x_mse.data().chunks(c))
        .map(|(a, b)| a.iter().zip(b).map(|(a, b)| (a - b).abs()).sum::<f64>() / c as f64)
        .collect();
    let pooled = analysis(&ImageBuffer::from_vec(h, w, 1, mag)?, ENERGY_FACTOR);
    let step = ResidualEnergyMap::step();
    Ok(ResidualEnergyMap {
        grid_height: grid(h, ENERGY_FACTOR),
        grid_width: grid(w, ENERGY_FACTOR),
        levels: pooled
            .iter()
            .map(|&v| math::round(v / step).clamp(0.0, (ENERGY_LEVELS - 1) as f64) as u8)
            .collect(),
    })
}

/// Map plus its entropy-coded side-channel bytes.
pub fn residual_energy_encode(x: &ImageBuffer, x_mse: &ImageBuffer) -> Result<(ResidualEnergyMap, Vec<u8>)> {
    let map = residual_energy_map(x, x_mse)?;
    let symbols: Vec<u32> = map.levels.iter().map(|&l| l as u32).collect();
    let bytes = entropy_code(&symbols)?;
    Ok((map, bytes))
}

pub fn residual_energy_decode(bytes: &[u8], height: usize, width: usize) -> Result<ResidualEnergyMap> {
    let (gh, gw) = (grid(height, ENERGY_FACTOR), grid(width, ENERGY_FACTOR));
    let symbols = entropy_decode(bytes, gh * gw)?;
    if symbols.iter().any(|&s| s >= ENERGY_LEVELS as u32) {
        return Err(Error::Corrupt("residual level out of range".into()));
    }
    Ok(ResidualEnergyMap {
        grid_height: gh,
        grid_width: gw,
        levels: symbols.into_iter().map(|s| s as u8).collect(),
    })
}

/// Encodes `img` and appends the residual-energy section.
pub fn encode_with_energy(img: &ImageBuffer, config: &CodecConfig) -> Result<Bitstream> {
    let mut bs = encode(img, config)?;
    let x_mse = decode(&bs)?;
    bs.side = Some(residual_energy_encode(img, &x_mse)?.1);
    Ok(bs)
}

impl Bitstream {
    pub fn residual_energy(&self) -> Result<Option<ResidualEnergyMap>> {
        self.side
            .as_ref()
            .map(|s| residual_energy_decode(s, self.height as usize, self.width as usize))
            .transpose()
    }
}
