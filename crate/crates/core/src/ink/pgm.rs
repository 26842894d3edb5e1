//! Plain (P2) and binary (P5) PGM. Files store ink as black (0), so the
//! internal intensity `v` maps to `round(255 · (1 − v))`.

use super::LineImage;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PgmEncoding {
    /// ASCII `P2`.
    Plain,
    /// Raw bytes `P5`.
    Binary,
}

pub fn write_pgm(image: &LineImage, encoding: PgmEncoding) -> Vec<u8> {
    let (w, h) = (image.width(), image.height());
    let gray = image.pixels().iter().map(|&v| (255.0 * (1.0 - v)).round() as u8);
    match encoding {
        PgmEncoding::Plain => {
            let mut out = format!("P2\n{w} {h}\n255\n");
            for y in 0..h {
                let row: Vec<String> = image.row(y).iter().map(|&v| ((255.0 * (1.0 - v)).round() as u8).to_string()).collect();
                out.push_str(&row.join(" "));
                out.push('\n');
            }
            out.into_bytes()
        }
        PgmEncoding::Binary => {
            let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
            out.extend(gray);
            out
        }
    }
}

/// Header tokenizer that skips `#` comments.
struct Tokens<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Tokens<'a> {
    fn next(&mut self) -> Result<&'a str> {
        loop {
            while self.pos < self.buf.len() && self.buf[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
            if self.pos < self.buf.len() && self.buf[self.pos] == b'#' {
                while self.pos < self.buf.len() && self.buf[self.pos] != b'\n' {
                    self.pos += 1;
                }
                continue;
            }
            break;
        }
        let start = self.pos;
        while self.pos < self.buf.len() && !self.buf[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::format("truncated PGM"));
        }
        std::str::from_utf8(&self.buf[start..self.pos]).map_err(|_| Error::format("non-ASCII PGM header"))
    }

    fn number(&mut self) -> Result<usize> {
        self.next()?.parse().map_err(|_| Error::format("bad number in PGM"))
    }
}

pub fn read_pgm(bytes: &[u8]) -> Result<LineImage> {
    let mut tok = Tokens { buf: bytes, pos: 0 };
    let magic = tok.next()?;
    let binary = match magic {
        "P2" => false,
        "P5" => true,
        other => return Err(Error::format(format!("unsupported PGM magic {other:?}"))),
    };
    let w = tok.number()?;
    let h = tok.number()?;
    let maxval = tok.number()?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::format(format!("unsupported PGM maxval {maxval}")));
    }
    let scale = maxval as f64;
    let mut pixels = Vec::with_capacity(w * h);
    if binary {
        // Exactly one whitespace byte separates the header from the raster.
        let start = tok.pos + 1;
        let data = bytes.get(start..start + w * h).ok_or_else(|| Error::format("truncated P5 raster"))?;
        pixels.extend(data.iter().map(|&g| 1.0 - (g as f64 / scale).min(1.0)));
    } else {
        for _ in 0..w * h {
            let g = tok.number()? as f64;
            pixels.push(1.0 - (g / scale).min(1.0));
        }
    }
    LineImage::from_pixels(w, h, pixels)
}
