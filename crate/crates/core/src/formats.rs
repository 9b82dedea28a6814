//! On-disk formats: the `CIAN1` tensor container and binary Netpbm
//! (PGM `P5`, PPM `P6`, maxval 255).

use std::fs;
use std::path::Path;

use crate::error::{CianError, Result};
use crate::mask::SeedMask;
use crate::tensor::{DType, Real, Tensor};

pub const TENSOR_MAGIC: &[u8; 5] = b"CIAN1";

/// Serialize a tensor: magic, dtype tag, rank, little-endian `u32` dims,
/// little-endian data.
pub fn encode_tensor<T: Real>(t: &Tensor<T>) -> Result<Vec<u8>> {
    let ndim =
        u8::try_from(t.shape().len()).map_err(|_| CianError::invalid("tensor rank exceeds 255"))?;
    let width = if T::DTYPE == DType::F32 { 4 } else { 8 };
    let mut out = Vec::with_capacity(7 + 4 * ndim as usize + width * t.len());
    out.extend_from_slice(TENSOR_MAGIC);
    out.push(T::DTYPE as u8);
    out.push(ndim);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| CianError::invalid("tensor dim exceeds u32"))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    Ok(out)
}

/// Parse a `CIAN1` buffer whose dtype must match `T`.
pub fn decode_tensor<T: Real>(bytes: &[u8]) -> Result<Tensor<T>> {
    let err = |r: &str| CianError::format("CIAN1", r);
    if bytes.len() < 7 || &bytes[..5] != TENSOR_MAGIC {
        return Err(err("missing CIAN1 magic"));
    }
    let dtype = match bytes[5] {
        0 => DType::F32,
        1 => DType::F64,
        other => return Err(err(&format!("unknown dtype tag {other}"))),
    };
    if dtype != T::DTYPE {
        return Err(err(&format!(
            "stored dtype {dtype:?}, requested {:?}",
            T::DTYPE
        )));
    }
    let ndim = bytes[6] as usize;
    let header = 7 + 4 * ndim;
    if bytes.len() < header {
        return Err(err("truncated dimension list"));
    }
    let shape: Vec<usize> = bytes[7..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    let width = if dtype == DType::F32 { 4 } else { 8 };
    let count: usize = shape.iter().product();
    if bytes.len() != header + count * width {
        return Err(err(&format!(
            "expected {} data bytes for shape {shape:?}, found {}",
            count * width,
            bytes.len() - header
        )));
    }
    let data = bytes[header..]
        .chunks_exact(width)
        .map(T::read_le)
        .collect();
    Tensor::new(&shape, data)
}

pub fn write_tensor<T: Real>(path: &Path, t: &Tensor<T>) -> Result<()> {
    fs::write(path, encode_tensor(t)?)?;
    Ok(())
}

pub fn read_tensor<T: Real>(path: &Path) -> Result<Tensor<T>> {
    decode_tensor(&fs::read(path)?)
}

fn encode_netpbm(magic: &str, width: usize, height: usize, data: &[u8]) -> Vec<u8> {
    let mut out = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(data);
    out
}

/// Parse a binary Netpbm header and return `(width, height, payload)`.
fn decode_netpbm<'a>(
    bytes: &'a [u8],
    magic: &[u8; 2],
    channels: usize,
    format: &'static str,
) -> Result<(usize, usize, &'a [u8])> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(CianError::format(format, "bad magic number"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // whitespace and comments
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
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| CianError::format(format, "malformed header"))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(CianError::format(
            format,
            format!("unsupported maxval {maxval}"),
        ));
    }
    if width == 0 || height == 0 {
        return Err(CianError::format(format, "zero-sized image"));
    }
    // exactly one whitespace byte separates the header from the raster
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(CianError::format(format, "missing header terminator"));
    }
    pos += 1;
    let payload = &bytes[pos..];
    if payload.len() != width * height * channels {
        return Err(CianError::format(
            format,
            format!(
                "expected {} raster bytes, found {}",
                width * height * channels,
                payload.len()
            ),
        ));
    }
    Ok((width, height, payload))
}

pub fn encode_pgm(width: usize, height: usize, data: &[u8]) -> Result<Vec<u8>> {
    if data.len() != width * height {
        return Err(CianError::invalid("PGM raster size mismatch"));
    }
    Ok(encode_netpbm("P5", width, height, data))
}

/// Returns `(width, height, raster)`.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let (w, h, data) = decode_netpbm(bytes, b"P5", 1, "PGM")?;
    Ok((w, h, data.to_vec()))
}

/// Masks are stored with the class id as the gray value (255 = IGNORE).
pub fn encode_mask(mask: &SeedMask) -> Vec<u8> {
    encode_netpbm("P5", mask.width(), mask.height(), mask.labels())
}

pub fn decode_mask(bytes: &[u8]) -> Result<SeedMask> {
    let (w, h, data) = decode_pgm(bytes)?;
    SeedMask::new(h, w, data)
}

pub fn write_mask(path: &Path, mask: &SeedMask) -> Result<()> {
    fs::write(path, encode_mask(mask))?;
    Ok(())
}

pub fn read_mask(path: &Path) -> Result<SeedMask> {
    decode_mask(&fs::read(path)?)
}

/// Quantize a value in `[0, 1]` to a byte.
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Write an `H×W` map of values in `[0, 1]` as an 8-bit graymap.
pub fn encode_gray(map: &Tensor<f32>) -> Result<Vec<u8>> {
    let (h, w) = match map.shape() {
        [h, w] | [h, w, 1] => (*h, *w),
        other => {
            return Err(CianError::invalid(format!(
                "graymap needs H×W, got {other:?}"
            )))
        }
    };
    encode_pgm(
        w,
        h,
        &map.data().iter().map(|&v| quantize(v)).collect::<Vec<_>>(),
    )
}

/// Inverse of [`encode_gray`]: bytes map to `v / 255`, shape `H×W`.
pub fn decode_gray(bytes: &[u8]) -> Result<Tensor<f32>> {
    let (w, h, data) = decode_pgm(bytes)?;
    Tensor::new(
        &[h, w],
        data.into_iter().map(|b| b as f32 / 255.0).collect(),
    )
}

/// Encode an `H×W×3` image with values in `[0, 1]` as `P6`.
pub fn encode_ppm(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let (h, w, c) = image.dims3()?;
    if c != 3 {
        return Err(CianError::invalid(format!("PPM needs 3 channels, got {c}")));
    }
    let raster: Vec<u8> = image.data().iter().map(|&v| quantize(v)).collect();
    Ok(encode_netpbm("P6", w, h, &raster))
}

/// Decode a `P6` image to `H×W×3` floats `v / 255`.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let (w, h, data) = decode_netpbm(bytes, b"P6", 3, "PPM")?;
    Tensor::new(&[h, w, 3], data.iter().map(|&b| b as f32 / 255.0).collect())
}

pub fn write_ppm(path: &Path, image: &Tensor<f32>) -> Result<()> {
    fs::write(path, encode_ppm(image)?)?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<Tensor<f32>> {
    decode_ppm(&fs::read(path)?)
}

/// Render a row-stochastic `rows×cols` weight matrix as a graymap, each row
/// rescaled so its maximum maps to 255.
pub fn encode_affinity<T: Real>(weights: &[T], rows: usize, cols: usize) -> Result<Vec<u8>> {
    if weights.len() != rows * cols || rows == 0 || cols == 0 {
        return Err(CianError::invalid("affinity raster size mismatch"));
    }
    let mut raster = Vec::with_capacity(rows * cols);
    for row in weights.chunks(cols) {
        let max = row.iter().fold(T::zero(), |m, &v| m.max(v));
        for &v in row {
            let scaled = if max > T::zero() {
                (v / max).as_f64()
            } else {
                0.0
            };
            raster.push(quantize(scaled as f32));
        }
    }
    encode_pgm(cols, rows, &raster)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::IGNORE;
    use proptest::prelude::*;

    #[test]
    fn tensor_header_layout() {
        let t = Tensor::<f32>::new(&[2, 1], vec![1.0, -2.5]).unwrap();
        let bytes = encode_tensor(&t).unwrap();
        assert_eq!(&bytes[..5], b"CIAN1");
        assert_eq!(bytes[5], 0);
        assert_eq!(bytes[6], 2);
        assert_eq!(&bytes[7..11], &2u32.to_le_bytes());
        assert_eq!(&bytes[11..15], &1u32.to_le_bytes());
        assert_eq!(&bytes[15..19], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 23);
    }

    #[test]
    fn tensor_dtype_mismatch_is_error() {
        let t = Tensor::<f64>::zeros(&[3]);
        let bytes = encode_tensor(&t).unwrap();
        assert_eq!(bytes[5], 1);
        assert!(decode_tensor::<f32>(&bytes).is_err());
        assert!(decode_tensor::<f64>(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn pgm_header_and_comments() {
        let bytes = encode_pgm(3, 1, &[0, 7, 255]).unwrap();
        assert_eq!(&bytes[..11], b"P5\n3 1\n255\n");
        let with_comment = b"P5\n# made by hand\n3 1\n255\n\x00\x07\xff";
        assert_eq!(decode_pgm(with_comment).unwrap(), (3, 1, vec![0, 7, 255]));
        assert!(decode_pgm(b"P5\n3 1\n65535\n\x00\x00").is_err());
        assert!(decode_pgm(b"P6\n1 1\n255\n\x00").is_err());
    }

    #[test]
    fn affinity_rows_scaled_by_max() {
        let bytes = encode_affinity(&[0.25f64, 0.5, 0.25, 0.1, 0.1, 0.8], 2, 3).unwrap();
        let (w, h, raster) = decode_pgm(&bytes).unwrap();
        assert_eq!((w, h), (3, 2));
        assert_eq!(raster, vec![128, 255, 128, 32, 32, 255]);
    }

    proptest! {
        #[test]
        fn tensor_roundtrip_f32(shape in proptest::collection::vec(1usize..5, 1..4), seed in any::<u32>()) {
            let t = Tensor::<f32>::from_fn(&shape, |i| ((i as u32).wrapping_mul(seed) as f32).sin() * 1e3);
            prop_assert_eq!(decode_tensor::<f32>(&encode_tensor(&t).unwrap()).unwrap(), t);
        }

        #[test]
        fn tensor_roundtrip_f64(vals in proptest::collection::vec(-1e6f64..1e6, 1..20)) {
            let t = Tensor::<f64>::new(&[vals.len()], vals).unwrap();
            prop_assert_eq!(decode_tensor::<f64>(&encode_tensor(&t).unwrap()).unwrap(), t);
        }

        #[test]
        fn mask_and_image_roundtrip(h in 1usize..9, w in 1usize..9, raster in proptest::collection::vec(any::<u8>(), 64*3)) {
            let labels: Vec<u8> = raster[..h * w].iter().map(|&b| if b > 250 { IGNORE } else { b % 4 }).collect();
            let mask = SeedMask::new(h, w, labels).unwrap();
            let bytes = encode_mask(&mask);
            let back = decode_mask(&bytes).unwrap();
            prop_assert_eq!(&back, &mask);
            prop_assert_eq!(encode_mask(&back), bytes);

            let img = Tensor::<f32>::new(&[h, w, 3], raster[..h * w * 3].iter().map(|&b| b as f32 / 255.0).collect()).unwrap();
            let bytes = encode_ppm(&img).unwrap();
            let back = decode_ppm(&bytes).unwrap();
            prop_assert_eq!(&back, &img);
            prop_assert_eq!(encode_ppm(&back).unwrap(), bytes);
        }
    }
}
