//! Netpbm image I/O and the binary perturbation record.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// 8-bit RGB image as stored in a binary PPM (P6, maxval 255).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageFile {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB samples, row-major.
    pub samples: Vec<u8>,
}

/// Real-valued pixel to 8 bits, round-half-to-even after clamping to [0, 1].
pub fn round_to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round_ties_even() as u8
}

fn format_err(format: &'static str, reason: impl Into<String>) -> Error {
    Error::Format {
        format,
        reason: reason.into(),
    }
}

/// Reads the next whitespace-separated header token, skipping `#` comments.
fn header_token(bytes: &[u8], pos: &mut usize) -> Result<String> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() && bytes[*pos] != b'#' {
        *pos += 1;
    }
    if start == *pos {
        return Err(format_err("ppm", "truncated header"));
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

fn header_number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    let tok = header_token(bytes, pos)?;
    tok.parse::<usize>()
        .map_err(|_| format_err("ppm", format!("bad {what} `{tok}`")))
}

impl ImageFile {
    pub fn parse_ppm(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        if header_token(bytes, &mut pos)? != "P6" {
            return Err(format_err("ppm", "expected magic P6"));
        }
        let width = header_number(bytes, &mut pos, "width")?;
        let height = header_number(bytes, &mut pos, "height")?;
        let maxval = header_number(bytes, &mut pos, "maxval")?;
        if width == 0 || height == 0 {
            return Err(format_err("ppm", "zero image dimension"));
        }
        if maxval != 255 {
            return Err(format_err("ppm", format!("only maxval 255 is supported, got {maxval}")));
        }
        // exactly one whitespace byte separates the header from the raster
        if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
            return Err(format_err("ppm", "missing raster"));
        }
        pos += 1;
        let len = width * height * 3;
        let raster = &bytes[pos..];
        if raster.len() != len {
            return Err(format_err(
                "ppm",
                format!("expected {len} raster bytes, found {}", raster.len()),
            ));
        }
        Ok(Self {
            width,
            height,
            samples: raster.to_vec(),
        })
    }

    pub fn read_ppm<Rd: Read>(mut input: Rd) -> Result<Self> {
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes)?;
        Self::parse_ppm(&bytes)
    }

    /// Canonical P6 encoding: `P6\n<w> <h>\n255\n` followed by the raster.
    pub fn write_ppm<W: Write>(&self, mut out: W) -> Result<()> {
        write!(out, "P6\n{} {}\n255\n", self.width, self.height)?;
        out.write_all(&self.samples)?;
        Ok(())
    }

    /// Channel-planar `[3, H, W]` tensor with values in [0, 1].
    pub fn to_tensor<R: Real>(&self) -> Tensor<R> {
        let (h, w) = (self.height, self.width);
        let denom = R::from_f64_lossy(255.0);
        Tensor::from_fn(&[3, h, w], |i| {
            let (c, p) = (i / (h * w), i % (h * w));
            R::from_u8(self.samples[p * 3 + c]).expect("u8") / denom
        })
    }

    pub fn from_tensor<R: Real>(image: &Tensor<R>) -> Result<Self> {
        let shape = image.shape();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(Error::shape("image_export", shape, &[3, 0, 0]));
        }
        let (h, w) = (shape[1], shape[2]);
        let data = image.data();
        let mut samples = Vec::with_capacity(3 * h * w);
        for p in 0..h * w {
            for c in 0..3 {
                samples.push(round_to_u8(data[c * h * w + p].to_f64_lossy()));
            }
        }
        Ok(Self {
            width: w,
            height: h,
            samples,
        })
    }
}

pub fn write_pgm<W: Write>(mut out: W, width: usize, height: usize, gray: &[u8]) -> Result<()> {
    assert_eq!(gray.len(), width * height);
    write!(out, "P5\n{width} {height}\n255\n")?;
    out.write_all(gray)?;
    Ok(())
}

/// Packed bitmap; each row is padded to a whole byte, most significant bit first.
pub fn write_pbm<W: Write>(mut out: W, width: usize, height: usize, bits: &[bool]) -> Result<()> {
    assert_eq!(bits.len(), width * height);
    write!(out, "P4\n{width} {height}\n")?;
    for row in bits.chunks_exact(width) {
        let packed: Vec<u8> = row
            .chunks(8)
            .map(|chunk| {
                chunk
                    .iter()
                    .enumerate()
                    .fold(0u8, |acc, (i, &b)| acc | ((b as u8) << (7 - i)))
            })
            .collect();
        out.write_all(&packed)?;
    }
    Ok(())
}

const RECORD_MAGIC: &[u8; 8] = b"ADVLAPRT";
const RECORD_VERSION: u32 = 1;

/// Everything needed to inspect one attack after the fact.
///
/// Layout (little endian): magic `ADVLAPRT`, version `u32`, then `u32`
/// height, width, patch size, strategy code, followed by `f64` blobs:
/// perturbation `[3,H,W]`, clean image `[3,H,W]`, attention weight map
/// `[H,W]` and Top-K pixel mask `[H,W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationRecord {
    pub height: usize,
    pub width: usize,
    pub patch_size: usize,
    pub strategy_code: u32,
    pub perturbation: Tensor<f64>,
    pub clean: Tensor<f64>,
    pub weight_map: Tensor<f64>,
    pub pixel_mask: Tensor<f64>,
}

impl PerturbationRecord {
    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(RECORD_MAGIC)?;
        for v in [
            RECORD_VERSION,
            self.height as u32,
            self.width as u32,
            self.patch_size as u32,
            self.strategy_code,
        ] {
            out.write_all(&v.to_le_bytes())?;
        }
        for t in [&self.perturbation, &self.clean, &self.weight_map, &self.pixel_mask] {
            for v in t.data() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read<Rd: Read>(mut input: Rd) -> Result<Self> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != RECORD_MAGIC {
            return Err(format_err("perturbation record", "bad magic"));
        }
        let mut header = [0u32; 5];
        let mut word = [0u8; 4];
        for h in header.iter_mut() {
            input.read_exact(&mut word)?;
            *h = u32::from_le_bytes(word);
        }
        if header[0] != RECORD_VERSION {
            return Err(format_err("perturbation record", "unsupported version"));
        }
        let (height, width) = (header[1] as usize, header[2] as usize);
        if height == 0 || width == 0 {
            return Err(format_err("perturbation record", "zero image dimension"));
        }
        let mut read_tensor = |shape: &[usize]| -> Result<Tensor<f64>> {
            let n: usize = shape.iter().product();
            let mut buf = vec![0u8; n * 8];
            input.read_exact(&mut buf)?;
            let data = buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            Tensor::new(shape, data)
        };
        let perturbation = read_tensor(&[3, height, width])?;
        let clean = read_tensor(&[3, height, width])?;
        let weight_map = read_tensor(&[height, width])?;
        let pixel_mask = read_tensor(&[height, width])?;
        Ok(Self {
            height,
            width,
            patch_size: header[3] as usize,
            strategy_code: header[4],
            perturbation,
            clean,
            weight_map,
            pixel_mask,
        })
    }
}
