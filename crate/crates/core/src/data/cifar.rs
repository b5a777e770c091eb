//! CIFAR-100 binary format: whole 3074-byte records of
//! `coarse label (1) | fine label (1) | 3072 pixel bytes` where the pixels
//! are three 32x32 channel planes, row-major, R then G then B.

use std::fs;
use std::path::Path;

use super::LabeledImageSet;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const RECORD_BYTES: usize = 3074;
pub const SIDE: usize = 32;
pub const CHANNELS: usize = 3;
pub const NUM_CLASSES: usize = 100;

/// Parse records from an in-memory byte image; pixels scale to `[0, 1]`.
pub fn parse_records<T: Scalar>(bytes: &[u8]) -> Result<LabeledImageSet<T>> {
    if !bytes.len().is_multiple_of(RECORD_BYTES) {
        let offset = (bytes.len() / RECORD_BYTES) * RECORD_BYTES;
        return Err(Error::Format(format!(
            "truncated CIFAR-100 record at byte offset {offset} (file has {} bytes, records are {RECORD_BYTES})",
            bytes.len()
        )));
    }
    let count = bytes.len() / RECORD_BYTES;
    let mut data = Vec::with_capacity(count * CHANNELS * SIDE * SIDE);
    let mut labels = Vec::with_capacity(count);
    let scale = 1.0 / 255.0;
    for r in 0..count {
        let rec = &bytes[r * RECORD_BYTES..(r + 1) * RECORD_BYTES];
        // rec[0] is the coarse label, unused here.
        let fine = rec[1] as usize;
        if fine >= NUM_CLASSES {
            return Err(Error::Format(format!(
                "record {r}: fine label {fine} out of range (0..{NUM_CLASSES})"
            )));
        }
        labels.push(fine);
        for &px in &rec[2..] {
            data.push(T::from_f64(px as f64 * scale));
        }
    }
    LabeledImageSet::new(
        Tensor::new(vec![count, CHANNELS, SIDE, SIDE], data)?,
        labels,
        NUM_CLASSES,
    )
}

pub fn load_cifar100_binary<T: Scalar>(path: &Path) -> Result<LabeledImageSet<T>> {
    parse_records(&fs::read(path)?)
}

/// Serialize a set back to the raw record format (coarse byte written as
/// zero). Round-trips sets that came from `parse_records` bitwise.
pub fn encode_records<T: Scalar>(set: &LabeledImageSet<T>) -> Result<Vec<u8>> {
    let s = set.images().shape();
    if (s[1], s[2], s[3]) != (CHANNELS, SIDE, SIDE) {
        return Err(Error::shape(
            "cifar_encode",
            format!("expected [n, 3, 32, 32] images, got {:?}", s),
        ));
    }
    let mut out = Vec::with_capacity(set.len() * RECORD_BYTES);
    let pixels = CHANNELS * SIDE * SIDE;
    for i in 0..set.len() {
        out.push(0u8);
        out.push(set.label(i) as u8);
        let img = &set.images().data()[i * pixels..(i + 1) * pixels];
        for &v in img {
            out.push((v.as_f64() * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(fine: u8, fill: u8) -> Vec<u8> {
        let mut rec = vec![0u8; RECORD_BYTES];
        rec[0] = 7; // coarse label, ignored
        rec[1] = fine;
        for b in rec[2..].iter_mut() {
            *b = fill;
        }
        rec
    }

    #[test]
    fn empty_file_gives_empty_set() {
        let set = parse_records::<f32>(&[]).unwrap();
        assert!(set.is_empty());
    }

    #[test]
    fn single_record_of_full_pixels() {
        let set = parse_records::<f32>(&record(7, 255)).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set.label(0), 7);
        assert!(set.images().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn truncated_file_reports_offset() {
        let mut bytes = record(1, 10);
        bytes.extend(record(2, 20));
        bytes.truncate(RECORD_BYTES + 100);
        let err = parse_records::<f32>(&bytes).unwrap_err();
        assert!(err.to_string().contains(&RECORD_BYTES.to_string()), "{err}");
    }

    #[test]
    fn round_trip_is_bitwise() {
        let mut bytes = Vec::new();
        for i in 0..3u8 {
            let mut rec = record(i, 0);
            for (j, b) in rec[2..].iter_mut().enumerate() {
                *b = ((j as u32 * 31 + i as u32 * 7) % 256) as u8;
            }
            rec[0] = i; // arbitrary coarse byte, dropped on load
            bytes.extend(rec);
        }
        let set = parse_records::<f32>(&bytes).unwrap();
        let re = encode_records(&set).unwrap();
        // Coarse byte is zeroed on re-encode; compare everything else.
        for r in 0..3 {
            let a = &bytes[r * RECORD_BYTES + 1..(r + 1) * RECORD_BYTES];
            let b = &re[r * RECORD_BYTES + 1..(r + 1) * RECORD_BYTES];
            assert_eq!(a, b, "record {r}");
        }
        // And a full second round-trip is exact.
        assert_eq!(encode_records(&parse_records::<f32>(&re).unwrap()).unwrap(), re);
    }
}
