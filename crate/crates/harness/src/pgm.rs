//! Binary greymap (P5, maxval 255) reading and writing.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use dualscan_core::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

pub fn write_pgm<W: Write>(img: &Pgm, mut out: W) -> Result<()> {
    if img.pixels.len() != img.width * img.height {
        return Err(Error::Format(format!(
            "{} pixels for a {}x{} image",
            img.pixels.len(),
            img.width,
            img.height
        )));
    }
    write!(out, "P5\n{} {}\n255\n", img.width, img.height)?;
    out.write_all(&img.pixels)?;
    Ok(())
}

fn header_token<R: BufRead>(r: &mut R) -> Result<String> {
    let mut tok = String::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte)? == 0 {
            return Err(Error::Format("truncated PGM header".into()));
        }
        match byte[0] {
            b'#' if tok.is_empty() => {
                let mut skip = Vec::new();
                r.read_until(b'\n', &mut skip)?;
            }
            c if c.is_ascii_whitespace() => {
                if !tok.is_empty() {
                    return Ok(tok);
                }
            }
            c => tok.push(c as char),
        }
    }
}

pub fn read_pgm<R: Read>(r: R) -> Result<Pgm> {
    let mut r = BufReader::new(r);
    if header_token(&mut r)? != "P5" {
        return Err(Error::Format("not a binary PGM (P5)".into()));
    }
    let mut num = |what: &str| -> Result<usize> {
        let t = header_token(&mut r)?;
        t.parse().map_err(|_| Error::Format(format!("bad PGM {what} `{t}`")))
    };
    let (width, height, maxval) = (num("width")?, num("height")?, num("maxval")?);
    if maxval != 255 {
        return Err(Error::Format(format!("PGM maxval {maxval}, expected 255")));
    }
    let mut pixels = vec![0u8; width * height];
    r.read_exact(&mut pixels).map_err(|_| Error::Format("truncated PGM pixel data".into()))?;
    Ok(Pgm { width, height, pixels })
}

pub fn save_pgm(img: &Pgm, path: impl AsRef<Path>) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write_pgm(img, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_pgm(path: impl AsRef<Path>) -> Result<Pgm> {
    read_pgm(std::fs::File::open(path)?)
}

/// Maps `values` linearly from `[lo, hi]` onto 0–255, clamping outside.
pub fn heatmap(values: &[f64], width: usize, height: usize, lo: f64, hi: f64) -> Pgm {
    let span = if hi > lo { hi - lo } else { 1.0 };
    let pixels = values
        .iter()
        .map(|&v| (((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    Pgm { width, height, pixels }
}
