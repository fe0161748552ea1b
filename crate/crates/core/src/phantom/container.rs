//! Raw float container: one UTF-8 JSON header line followed by
//! little-endian `f32` samples in row-major order.

use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use super::Volume;
use crate::error::{Error, Result};

const DTYPE: &str = "f32le";
const ORDER: &str = "row-major";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    shape: Vec<usize>,
    dtype: String,
    order: String,
}

/// Serializes `data` with the given shape.
pub fn encode(shape: &[usize], data: &[f32]) -> Result<Vec<u8>> {
    let count: usize = shape.iter().product();
    if count != data.len() {
        return Err(Error::Shape(format!(
            "shape {shape:?} holds {count} values but {} were given",
            data.len()
        )));
    }
    let header = Header {
        shape: shape.to_vec(),
        dtype: DTYPE.into(),
        order: ORDER.into(),
    };
    let mut out = serde_json::to_vec(&header).expect("header serializes");
    out.push(b'\n');
    out.reserve(data.len() * 4);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Parses a container, returning `(shape, values)`.
pub fn decode(bytes: &[u8]) -> Result<(Vec<usize>, Vec<f32>)> {
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::parse(bytes.len(), "missing header newline"))?;
    let text = std::str::from_utf8(&bytes[..newline])
        .map_err(|e| Error::parse(e.valid_up_to(), "header is not UTF-8"))?;
    let header: Header = serde_json::from_str(text).map_err(|e| {
        Error::parse(
            e.column().saturating_sub(1),
            format!("malformed header: {e}"),
        )
    })?;
    if header.dtype != DTYPE {
        return Err(Error::parse(
            0,
            format!("unsupported dtype {:?}", header.dtype),
        ));
    }
    if header.order != ORDER {
        return Err(Error::parse(
            0,
            format!("unsupported order {:?}", header.order),
        ));
    }
    if header.shape.is_empty() || header.shape.contains(&0) {
        return Err(Error::parse(0, format!("invalid shape {:?}", header.shape)));
    }
    let count = header
        .shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::parse(0, "shape overflows"))?;
    let start = newline + 1;
    let payload = &bytes[start..];
    let expected = count * 4;
    if payload.len() < expected {
        return Err(Error::parse(
            bytes.len(),
            format!(
                "truncated payload: expected {expected} bytes, found {}",
                payload.len()
            ),
        ));
    }
    if payload.len() > expected {
        return Err(Error::parse(
            start + expected,
            "trailing bytes after payload",
        ));
    }
    let mut values = Vec::with_capacity(count);
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
        if !v.is_finite() {
            return Err(Error::parse(start + 4 * i, format!("non-finite value {v}")));
        }
        values.push(v);
    }
    Ok((header.shape, values))
}

pub fn write_array(path: &Path, shape: &[usize], data: &[f32]) -> Result<()> {
    let bytes = encode(shape, data)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_array(path: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

fn check_unit_range(values: &[f32], header_len: usize) -> Result<()> {
    match values.iter().position(|v| !(0.0..=1.0).contains(v)) {
        Some(i) => Err(Error::parse(
            header_len + 4 * i,
            format!("value {} outside [0, 1]", values[i]),
        )),
        None => Ok(()),
    }
}

fn header_len(bytes: &[u8]) -> usize {
    bytes.iter().position(|&b| b == b'\n').map_or(0, |p| p + 1)
}

pub fn write_volume(volume: &Volume, path: &Path) -> Result<()> {
    let data = volume.data();
    let flat: Vec<f32> = data.iter().copied().collect();
    write_array(path, &volume.shape(), &flat)
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (shape, values) = decode(&bytes)?;
    if shape.len() != 3 {
        return Err(Error::parse(
            0,
            format!("expected a 3-D shape, got {shape:?}"),
        ));
    }
    check_unit_range(&values, header_len(&bytes))?;
    let arr =
        Array3::from_shape_vec((shape[0], shape[1], shape[2]), values).expect("validated length");
    Volume::new(arr).map_err(|e| Error::parse(0, e.to_string()))
}

pub fn write_image(image: &Array2<f32>, path: &Path) -> Result<()> {
    let (h, w) = image.dim();
    let flat: Vec<f32> = image.iter().copied().collect();
    write_array(path, &[h, w], &flat)
}

pub fn read_image(path: &Path) -> Result<Array2<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (shape, values) = decode(&bytes)?;
    if shape.len() != 2 {
        return Err(Error::parse(
            0,
            format!("expected a 2-D shape, got {shape:?}"),
        ));
    }
    check_unit_range(&values, header_len(&bytes))?;
    Ok(Array2::from_shape_vec((shape[0], shape[1]), values).expect("validated length"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::generate_phantom;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let bytes = encode(&[2, 1, 1], &[1.0, 0.5]).unwrap();
        let text = b"{\"shape\":[2,1,1],\"dtype\":\"f32le\",\"order\":\"row-major\"}\n";
        assert_eq!(&bytes[..text.len()], text);
        assert_eq!(&bytes[text.len()..], &[0, 0, 0x80, 0x3f, 0, 0, 0, 0x3f]);
    }

    #[test]
    fn volume_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.vol");
        let v = generate_phantom(5, 12, 4).unwrap();
        write_volume(&v, &path).unwrap();
        assert_eq!(read_volume(&path).unwrap(), v);
    }

    #[test]
    fn truncated_payload() {
        let mut bytes = encode(&[2, 2, 2], &[0.0; 8]).unwrap();
        bytes.truncate(bytes.len() - 4);
        let err = decode(&bytes).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }), "{err}");
        assert!(err.to_string().contains("truncated"));
    }

    #[test]
    fn non_json_header() {
        let mut bytes = b"P5 8 8 255\n".to_vec();
        bytes.extend_from_slice(&[0; 16]);
        assert!(matches!(decode(&bytes), Err(Error::Parse { .. })));
        assert!(matches!(
            decode(b"no newline at all"),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn non_finite_payload_names_offset() {
        let bytes = encode(&[3], &[0.0, f32::NAN, 1.0]).unwrap();
        let hl = header_len(&bytes);
        match decode(&bytes) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, hl + 4),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn wrong_rank_or_range_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("img");
        write_array(&p, &[2, 2], &[0.0, 0.1, 0.2, 0.3]).unwrap();
        assert!(read_image(&p).is_ok());
        assert!(matches!(read_volume(&p), Err(Error::Parse { .. })));
        write_array(&p, &[2, 2], &[0.0, 1.5, 0.2, 0.3]).unwrap();
        assert!(matches!(read_image(&p), Err(Error::Parse { .. })));
        assert!(matches!(
            read_image(&dir.path().join("missing")),
            Err(Error::Io { .. })
        ));
    }

    proptest! {
        #[test]
        fn arbitrary_finite_arrays_round_trip(
            shape in proptest::collection::vec(1usize..5, 1..4),
            seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let n: usize = shape.iter().product();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f32> = (0..n).map(|_| f32::from_bits(rng.random::<u32>() & 0x7f7f_ffff) * if rng.random() { 1.0 } else { -1.0 }).collect();
            let (s, d) = decode(&encode(&shape, &data).unwrap()).unwrap();
            prop_assert_eq!(s, shape);
            prop_assert_eq!(d.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), data.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }
    }
}
