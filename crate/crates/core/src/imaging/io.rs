//! Netpbm graymaps (P2/P5) and the lossless `TVWF` float container.
//!
//! `TVWF` layout (all little-endian): bytes 0..4 magic `TVWF`, 4..8 `u32`
//! width, 8..12 `u32` height, 12..16 `u32` reserved (zero), then
//! `width * height` `f64` samples in row-major order.

use crate::grid::{Grid, GridError, ScalarField};
use std::fs;
use std::path::Path;
use thiserror::Error;

pub const TVWF_MAGIC: &[u8; 4] = b"TVWF";
const TVWF_HEADER_LEN: usize = 16;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("unsupported maxval {0} (expected 1..=65535)")]
    UnsupportedMaxval(u32),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Grid(#[from] GridError),
}

fn parse_err(offset: usize, message: impl Into<String>) -> ImageError {
    ImageError::Parse {
        offset,
        message: message.into(),
    }
}

/// Grayscale pixels, nominally in `[0, 1]`. Values are only clamped when
/// written to a quantized format.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self, ImageError> {
        if pixels.len() != width * height {
            return Err(ImageError::Shape(format!(
                "{width}x{height} image needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn from_field(u: &ScalarField) -> Self {
        Self {
            width: u.grid().nx(),
            height: u.grid().ny(),
            pixels: u.values().to_vec(),
        }
    }

    pub fn to_field(&self, h: f64) -> Result<ScalarField, ImageError> {
        let grid = Grid::new(self.width, self.height, h)?;
        Ok(ScalarField::new(grid, self.pixels.clone())?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PgmEncoding {
    /// P2
    Ascii,
    /// P5
    Binary,
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn skip_whitespace_and_comments(&mut self) {
        while self.pos < self.data.len() {
            match self.data[self.pos] {
                b'#' => {
                    while self.pos < self.data.len() && self.data[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn read_uint(&mut self, what: &str) -> Result<u32, ImageError> {
        self.skip_whitespace_and_comments();
        let start = self.pos;
        while self.pos < self.data.len() && self.data[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(if start >= self.data.len() {
                parse_err(start, format!("unexpected end of data while reading {what}"))
            } else {
                parse_err(start, format!("expected {what}, found byte 0x{:02x}", self.data[start]))
            });
        }
        std::str::from_utf8(&self.data[start..self.pos])
            .expect("ascii digits")
            .parse::<u32>()
            .map_err(|_| parse_err(start, format!("{what} out of range")))
    }
}

/// Parses a P2 or P5 graymap from memory.
pub fn read_pgm(data: &[u8]) -> Result<ImageBuffer, ImageError> {
    if data.len() < 2 || data[0] != b'P' || !(data[1] == b'2' || data[1] == b'5') {
        return Err(parse_err(0, "not a P2/P5 graymap"));
    }
    let encoding = if data[1] == b'2' {
        PgmEncoding::Ascii
    } else {
        PgmEncoding::Binary
    };
    let mut cur = Cursor { data, pos: 2 };
    let width = cur.read_uint("width")? as usize;
    let height = cur.read_uint("height")? as usize;
    let maxval_offset = cur.pos;
    let maxval = cur.read_uint("maxval")?;
    if maxval == 0 || maxval > 65535 {
        return Err(ImageError::UnsupportedMaxval(maxval));
    }
    if width == 0 || height == 0 {
        return Err(parse_err(maxval_offset, "zero image dimension"));
    }
    let count = width * height;
    let scale = f64::from(maxval);
    let mut pixels = Vec::with_capacity(count);
    match encoding {
        PgmEncoding::Ascii => {
            for _ in 0..count {
                cur.skip_whitespace_and_comments();
                let at = cur.pos;
                let v = cur.read_uint("sample")?;
                if v > maxval {
                    return Err(parse_err(at, format!("sample {v} exceeds maxval {maxval}")));
                }
                pixels.push(f64::from(v) / scale);
            }
        }
        PgmEncoding::Binary => {
            // Exactly one whitespace byte separates the header from the raster.
            if cur.pos >= data.len() || !data[cur.pos].is_ascii_whitespace() {
                return Err(parse_err(cur.pos, "missing whitespace after maxval"));
            }
            let start = cur.pos + 1;
            let bytes_per = if maxval < 256 { 1 } else { 2 };
            let needed = count * bytes_per;
            if data.len() < start + needed {
                return Err(parse_err(
                    data.len(),
                    format!("truncated raster: need {needed} bytes from offset {start}"),
                ));
            }
            for k in 0..count {
                let at = start + k * bytes_per;
                let v = if bytes_per == 1 {
                    u32::from(data[at])
                } else {
                    u32::from(u16::from_be_bytes([data[at], data[at + 1]]))
                };
                if v > maxval {
                    return Err(parse_err(at, format!("sample {v} exceeds maxval {maxval}")));
                }
                pixels.push(f64::from(v) / scale);
            }
        }
    }
    ImageBuffer::new(width, height, pixels)
}

/// Encodes a graymap; pixels are clamped to `[0, 1]` and rounded to the
/// nearest level.
pub fn write_pgm(buf: &ImageBuffer, encoding: PgmEncoding, maxval: u16) -> Result<Vec<u8>, ImageError> {
    if maxval == 0 {
        return Err(ImageError::UnsupportedMaxval(0));
    }
    let m = f64::from(maxval);
    let levels: Vec<u16> = buf
        .pixels
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * m).round() as u16)
        .collect();
    let magic = match encoding {
        PgmEncoding::Ascii => "P2",
        PgmEncoding::Binary => "P5",
    };
    let mut out = format!("{magic}\n{} {}\n{maxval}\n", buf.width, buf.height).into_bytes();
    match encoding {
        PgmEncoding::Ascii => {
            for row in levels.chunks(buf.width) {
                let line: Vec<String> = row.iter().map(u16::to_string).collect();
                out.extend_from_slice(line.join(" ").as_bytes());
                out.push(b'\n');
            }
        }
        PgmEncoding::Binary => {
            for &l in &levels {
                if maxval < 256 {
                    out.push(l as u8);
                } else {
                    out.extend_from_slice(&l.to_be_bytes());
                }
            }
        }
    }
    Ok(out)
}

pub fn write_tvwf(buf: &ImageBuffer) -> Vec<u8> {
    let mut out = Vec::with_capacity(TVWF_HEADER_LEN + 8 * buf.pixels.len());
    out.extend_from_slice(TVWF_MAGIC);
    out.extend_from_slice(&(buf.width as u32).to_le_bytes());
    out.extend_from_slice(&(buf.height as u32).to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    for v in &buf.pixels {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn read_tvwf(data: &[u8]) -> Result<ImageBuffer, ImageError> {
    if data.len() < TVWF_HEADER_LEN {
        return Err(parse_err(data.len(), "truncated TVWF header"));
    }
    if &data[0..4] != TVWF_MAGIC {
        return Err(parse_err(0, "bad TVWF magic"));
    }
    let word = |at: usize| u32::from_le_bytes(data[at..at + 4].try_into().expect("4 bytes"));
    let (width, height, reserved) = (word(4) as usize, word(8) as usize, word(12));
    if reserved != 0 {
        return Err(parse_err(12, format!("reserved header word is {reserved}, expected 0")));
    }
    let expected = TVWF_HEADER_LEN + 8 * width * height;
    if data.len() < expected {
        return Err(parse_err(
            data.len(),
            format!("truncated TVWF payload: expected {expected} bytes"),
        ));
    }
    if data.len() > expected {
        return Err(parse_err(expected, "trailing bytes after TVWF payload"));
    }
    let pixels = data[TVWF_HEADER_LEN..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    ImageBuffer::new(width, height, pixels)
}

fn io_err(path: &Path, source: std::io::Error) -> ImageError {
    ImageError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Reads a P2/P5 graymap or a TVWF file, dispatching on the leading bytes.
pub fn read_image(path: &Path) -> Result<ImageBuffer, ImageError> {
    let data = fs::read(path).map_err(|e| io_err(path, e))?;
    if data.starts_with(TVWF_MAGIC) {
        read_tvwf(&data)
    } else {
        read_pgm(&data)
    }
}

/// Writes `buf` as binary PGM (maxval 255) when the extension is `.pgm`,
/// and as TVWF otherwise.
pub fn write_image(buf: &ImageBuffer, path: &Path) -> Result<(), ImageError> {
    let is_pgm = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("pgm"));
    let bytes = if is_pgm {
        write_pgm(buf, PgmEncoding::Binary, 255)?
    } else {
        write_tvwf(buf)
    };
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}
