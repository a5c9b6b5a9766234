//! Binary PGM (`P5`, maxval 255) masks. Foreground is written as 255 and
//! read back from any value of at least 128.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Grid;

pub fn encode_mask(mask: &Grid) -> Result<Vec<u8>> {
    if mask.channels() != 1 {
        return Err(Error::contract("PGM masks have one channel"));
    }
    let mut out = format!("P5\n{} {}\n255\n", mask.width(), mask.height()).into_bytes();
    out.extend(
        mask.data()
            .iter()
            .map(|&v| if v >= 0.5 { 255u8 } else { 0 }),
    );
    Ok(out)
}

pub fn decode_mask(bytes: &[u8]) -> Result<Grid> {
    let mut pos = 0;
    let mut fields = [0usize; 3];
    if bytes.get(..2) != Some(b"P5") {
        return Err(Error::format(0, "not a binary PGM (P5)"));
    }
    pos += 2;
    for (k, field) in fields.iter_mut().enumerate() {
        // whitespace and comments before each header number
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        *field = text
            .parse()
            .map_err(|_| Error::format(start as u64, format!("bad PGM header field {k}")))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::format(
            pos as u64,
            format!("maxval {maxval}, expected 255"),
        ));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::format(
            pos as u64,
            "missing separator after the PGM header",
        ));
    }
    pos += 1;
    let n = width
        .checked_mul(height)
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::format(pos as u64, format!("bad PGM size {width}x{height}")))?;
    let pixels = &bytes[pos..];
    if pixels.len() != n {
        return Err(Error::format(
            (pos + pixels.len().min(n)) as u64,
            format!("expected {n} pixels, found {}", pixels.len()),
        ));
    }
    let data = pixels
        .iter()
        .map(|&p| if p >= 128 { 1.0 } else { 0.0 })
        .collect();
    Grid::new(height, width, 1, data)
}

pub fn write_mask(path: &Path, mask: &Grid) -> Result<()> {
    std::fs::write(path, encode_mask(mask)?)?;
    Ok(())
}

pub fn read_mask(path: &Path) -> Result<Grid> {
    decode_mask(&std::fs::read(path)?)
}
