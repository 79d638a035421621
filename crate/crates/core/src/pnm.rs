//! Binary PPM (P6) and PGM (P5) images with maxval 255.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// An 8-bit image with `channels` interleaved samples per pixel (1 or 3).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image8 {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

impl Image8 {
    pub fn new(width: usize, height: usize, channels: usize, pixels: Vec<u8>) -> Self {
        assert_eq!(pixels.len(), width * height * channels);
        assert!(channels == 1 || channels == 3);
        Image8 {
            width,
            height,
            channels,
            pixels,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 3 { "P6" } else { "P5" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    /// Parses P5 or P6 bytes; `path` only labels errors.
    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0, path };
        let magic = cur.token()?;
        let channels = match magic.as_slice() {
            b"P5" => 1,
            b"P6" => 3,
            _ => return Err(cur.err(0, "expected magic P5 or P6")),
        };
        let width = cur.number()?;
        let height = cur.number()?;
        let maxval_at = cur.pos;
        let maxval = cur.number()?;
        if maxval != 255 {
            return Err(cur.err(maxval_at, &format!("unsupported maxval {maxval}")));
        }
        if width == 0 || height == 0 {
            return Err(cur.err(maxval_at, "zero image dimension"));
        }
        // exactly one whitespace byte separates the header from the raster
        match bytes.get(cur.pos) {
            Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
            _ => return Err(cur.err(cur.pos, "missing whitespace after header")),
        }
        let need = width * height * channels;
        let raster = &bytes[cur.pos..];
        if raster.len() < need {
            return Err(cur.err(
                bytes.len(),
                &format!("truncated raster: need {need} bytes, found {}", raster.len()),
            ));
        }
        Ok(Image8::new(width, height, channels, raster[..need].to_vec()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Cursor<'_> {
    fn err(&self, offset: usize, msg: &str) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            offset,
            msg: msg.to_string(),
        }
    }

    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' {
                        break;
                    }
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn token(&mut self) -> Result<Vec<u8>> {
        self.skip_space();
        let start = self.pos;
        while let Some(&b) = self.bytes.get(self.pos) {
            if b.is_ascii_whitespace() {
                break;
            }
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err(start, "unexpected end of header"));
        }
        Ok(self.bytes[start..self.pos].to_vec())
    }

    fn number(&mut self) -> Result<usize> {
        let tok = self.token()?;
        let start = self.pos - tok.len();
        std::str::from_utf8(&tok)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| self.err(start, "expected a decimal number"))
    }
}
