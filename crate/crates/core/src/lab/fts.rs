//! `FTS1` feature files.
//!
//! Layout: the magic `FTS1`, a little-endian `u32` layer count, then a
//! `u32` row count and `u32` column count per layer, then every layer's
//! values as little-endian `f32` in row-major order.

use std::path::Path;

use crate::correlation::TokenMatrix;
use crate::error::{Error, Result};
use crate::segmenter::LayerStack;
use crate::tensor::Matrix;

pub const MAGIC: &[u8; 4] = b"FTS1";

/// Serializes matrices. Every value must be exactly representable as `f32`.
pub fn encode_layers(layers: &[&Matrix]) -> Result<Vec<u8>> {
    let count =
        u32::try_from(layers.len()).map_err(|_| Error::contract("too many layers for FTS1"))?;
    let payload: usize = layers.iter().map(|m| m.data().len() * 4).sum();
    let mut out = Vec::with_capacity(8 + 8 * layers.len() + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&count.to_le_bytes());
    for m in layers {
        for n in [m.rows(), m.cols()] {
            let n = u32::try_from(n).map_err(|_| Error::contract("layer dimension exceeds u32"))?;
            out.extend_from_slice(&n.to_le_bytes());
        }
    }
    for (l, m) in layers.iter().enumerate() {
        for &v in m.data() {
            let f = v as f32;
            if f64::from(f) != v {
                return Err(Error::contract(format!(
                    "layer {l} holds {v}, which is not an f32 value"
                )));
            }
            out.extend_from_slice(&f.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let end = self.pos + N;
        let chunk = self.bytes.get(self.pos..end).ok_or_else(|| {
            Error::format(self.pos as u64, format!("truncated while reading {what}"))
        })?;
        self.pos = end;
        Ok(chunk.try_into().expect("length checked"))
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take::<4>(what)?) as usize)
    }
}

pub fn decode_layers(bytes: &[u8]) -> Result<Vec<Matrix>> {
    let mut r = Reader { bytes, pos: 0 };
    if &r.take::<4>("magic")? != MAGIC {
        return Err(Error::format(0, "bad magic, expected FTS1"));
    }
    let count_at = r.pos as u64;
    let count = r.u32("layer count")?;
    if count == 0 {
        return Err(Error::format(count_at, "layer count is zero"));
    }
    // the header alone must fit in the file before anything is allocated
    if count.saturating_mul(8) > bytes.len().saturating_sub(r.pos) {
        return Err(Error::format(
            count_at,
            format!("{count} layer headers exceed the file size"),
        ));
    }
    let mut dims = Vec::with_capacity(count);
    let mut remaining = bytes.len() - r.pos - count * 8;
    for l in 0..count {
        let at = r.pos as u64;
        let rows = r.u32("row count")?;
        let cols = r.u32("column count")?;
        if rows == 0 || cols == 0 {
            return Err(Error::format(at, format!("layer {l} is {rows}x{cols}")));
        }
        let size = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(4))
            .filter(|&n| n <= remaining)
            .ok_or_else(|| {
                Error::format(
                    at,
                    format!("layer {l} of {rows}x{cols} exceeds the file size"),
                )
            })?;
        remaining -= size;
        dims.push((rows, cols));
    }
    let mut layers = Vec::with_capacity(count);
    for (l, &(rows, cols)) in dims.iter().enumerate() {
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            let at = r.pos as u64;
            let v = f32::from_le_bytes(r.take::<4>("values")?);
            if !v.is_finite() {
                return Err(Error::format(
                    at,
                    format!("layer {l} holds a non-finite value"),
                ));
            }
            data.push(f64::from(v));
        }
        layers.push(Matrix::new(rows, cols, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::format(
            r.pos as u64,
            "trailing bytes after the last layer",
        ));
    }
    Ok(layers)
}

pub fn encode_stack(stack: &LayerStack) -> Result<Vec<u8>> {
    encode_layers(
        &stack
            .layers()
            .iter()
            .map(|t| t.values())
            .collect::<Vec<_>>(),
    )
}

pub fn decode_stack(bytes: &[u8]) -> Result<LayerStack> {
    let layers = decode_layers(bytes)?
        .into_iter()
        .map(TokenMatrix::new)
        .collect::<Result<Vec<_>>>()?;
    LayerStack::new(layers)
}

pub fn write_features(path: &Path, stack: &LayerStack) -> Result<()> {
    std::fs::write(path, encode_stack(stack)?)?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<LayerStack> {
    decode_stack(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn stack(sides: &[usize], d: usize, seed: u64) -> LayerStack {
        let mut k = seed as f64;
        let layers = sides
            .iter()
            .map(|&s| {
                TokenMatrix::new(Matrix::from_fn(s * s, d, |i, j| {
                    k += 1.0;
                    ((k * 0.37 + (i * d + j) as f64).sin() * 3.0) as f32 as f64
                }))
                .unwrap()
            })
            .collect();
        LayerStack::new(layers).unwrap()
    }

    #[test]
    fn hand_checked_bytes() {
        let m = Matrix::new(1, 2, vec![1.0, -2.0]).unwrap();
        let bytes = encode_layers(&[&m]).unwrap();
        let mut expected = b"FTS1".to_vec();
        expected.extend([1, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0]);
        expected.extend([0x00, 0x00, 0x80, 0x3f, 0x00, 0x00, 0x00, 0xc0]);
        assert_eq!(bytes, expected);
        assert_eq!(decode_layers(&bytes).unwrap(), vec![m]);
    }

    #[test]
    fn round_trip() {
        let s = stack(&[2, 4], 3, 9);
        assert_eq!(decode_stack(&encode_stack(&s).unwrap()).unwrap(), s);
    }

    #[test]
    fn every_truncation_fails() {
        let bytes = encode_stack(&stack(&[1, 2], 2, 1)).unwrap();
        for cut in 0..bytes.len() {
            let err = decode_layers(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::Format { .. }), "cut {cut}: {err}");
        }
    }

    #[test]
    fn errors_carry_offsets() {
        let mut bytes = encode_stack(&stack(&[1], 2, 1)).unwrap();
        bytes[0] = b'X';
        assert!(matches!(
            decode_layers(&bytes),
            Err(Error::Format { offset: 0, .. })
        ));
        // rows * cols overflows the file
        let mut huge = b"FTS1".to_vec();
        huge.extend(1u32.to_le_bytes());
        huge.extend(u32::MAX.to_le_bytes());
        huge.extend(u32::MAX.to_le_bytes());
        assert!(matches!(
            decode_layers(&huge),
            Err(Error::Format { offset: 8, .. })
        ));
        let mut many = b"FTS1".to_vec();
        many.extend(u32::MAX.to_le_bytes());
        assert!(matches!(
            decode_layers(&many),
            Err(Error::Format { offset: 4, .. })
        ));
        let mut extra = encode_stack(&stack(&[1], 2, 1)).unwrap();
        let end = extra.len() as u64;
        extra.push(0);
        assert!(
            matches!(decode_layers(&extra), Err(Error::Format { offset, .. }) if offset == end)
        );
    }

    #[test]
    fn nan_payload_is_rejected() {
        let mut bytes = encode_layers(&[&Matrix::zeros(1, 1)]).unwrap();
        bytes[16..20].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(
            decode_layers(&bytes),
            Err(Error::Format { offset: 16, .. })
        ));
    }

    #[test]
    fn non_f32_values_are_refused() {
        let m = Matrix::new(1, 1, vec![0.1]).unwrap();
        assert!(matches!(encode_layers(&[&m]), Err(Error::Contract(_))));
    }

    proptest! {
        #[test]
        fn decode_inverts_encode(
            sides in prop::collection::vec(1usize..5, 1..4),
            d in 1usize..5,
            seed in any::<u64>(),
            bits in prop::collection::vec(any::<u32>(), 0..8),
        ) {
            let mut s = stack(&sides, d, seed);
            // splice raw finite f32 bit patterns into the first layer
            let mut layers = s.into_layers();
            let mut first = layers[0].values().clone();
            for (slot, b) in first.data_mut().iter_mut().zip(bits) {
                let f = f32::from_bits(b);
                if f.is_finite() {
                    *slot = f64::from(f);
                }
            }
            layers[0] = TokenMatrix::new(first).unwrap();
            s = LayerStack::new(layers).unwrap();
            let back = decode_stack(&encode_stack(&s).unwrap()).unwrap();
            for (a, b) in back.layers().iter().zip(s.layers()) {
                let same = a.values().data().iter().zip(b.values().data()).all(|(x, y)| x.to_bits() == y.to_bits());
                prop_assert!(same);
            }
        }
    }
}
