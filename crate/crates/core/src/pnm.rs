//! Binary PPM (P6) and PGM (P5) codecs.
//!
//! Color layers are written as 8-bit P6, single-channel maps as 16-bit P5
//! (big-endian samples, as the format requires). Samples are quantized with
//! round-to-nearest, so `encode(decode(bytes)) == bytes` for every file this
//! module writes.

use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{Plane, RadianceImage};

pub fn encode_ppm(img: &RadianceImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.data().iter().map(|&v| quantize(v, 255) as u8));
    out
}

pub fn encode_ppm16(img: &RadianceImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n65535\n", img.width(), img.height()).into_bytes();
    for &v in img.data() {
        out.extend_from_slice(&(quantize(v, 65535) as u16).to_be_bytes());
    }
    out
}

pub fn encode_pgm16(plane: &Plane) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n65535\n", plane.width(), plane.height()).into_bytes();
    for &v in plane.data() {
        out.extend_from_slice(&(quantize(v, 65535) as u16).to_be_bytes());
    }
    out
}

pub fn decode_ppm(bytes: &[u8]) -> Result<RadianceImage, String> {
    let (header, body) = parse_header(bytes, b"P6")?;
    let samples = read_samples(body, header.width * header.height * 3, header.maxval)?;
    RadianceImage::from_vec(header.height, header.width, samples).map_err(|e| e.to_string())
}

pub fn decode_pgm(bytes: &[u8]) -> Result<Plane, String> {
    let (header, body) = parse_header(bytes, b"P5")?;
    let samples = read_samples(body, header.width * header.height, header.maxval)?;
    Plane::from_vec(header.height, header.width, samples).map_err(|e| e.to_string())
}

pub fn write_ppm(path: &Path, img: &RadianceImage) -> Result<()> {
    std::fs::write(path, encode_ppm(img)).map_err(|e| Error::io(path, e))
}

pub fn write_ppm16(path: &Path, img: &RadianceImage) -> Result<()> {
    std::fs::write(path, encode_ppm16(img)).map_err(|e| Error::io(path, e))
}

pub fn write_pgm16(path: &Path, plane: &Plane) -> Result<()> {
    std::fs::write(path, encode_pgm16(plane)).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<RadianceImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes).map_err(|r| Error::format(path, r))
}

pub fn read_pgm(path: &Path) -> Result<Plane> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes).map_err(|r| Error::format(path, r))
}

/// Rounds a color image onto the 8-bit grid it would be stored with.
pub fn quantize_ppm(img: &RadianceImage) -> RadianceImage {
    let data = img
        .data()
        .iter()
        .map(|&v| quantize(v, 255) as f64 / 255.0)
        .collect();
    RadianceImage::from_vec(img.height(), img.width(), data).expect("same size")
}

pub fn quantize_ppm16(img: &RadianceImage) -> RadianceImage {
    let data = img
        .data()
        .iter()
        .map(|&v| quantize(v, 65535) as f64 / 65535.0)
        .collect();
    RadianceImage::from_vec(img.height(), img.width(), data).expect("same size")
}

/// Rounds a map onto the 16-bit grid it would be stored with.
pub fn quantize_pgm16(plane: &Plane) -> Plane {
    let data = plane
        .data()
        .iter()
        .map(|&v| quantize(v, 65535) as f64 / 65535.0)
        .collect();
    Plane::from_vec(plane.height(), plane.width(), data).expect("same size")
}

fn quantize(v: f64, maxval: u32) -> u32 {
    (v.clamp(0.0, 1.0) * maxval as f64).round() as u32
}

struct Header {
    width: usize,
    height: usize,
    maxval: u32,
}

fn parse_header<'a>(bytes: &'a [u8], magic: &[u8; 2]) -> Result<(Header, &'a [u8]), String> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(format!(
            "expected magic {}",
            std::str::from_utf8(magic).unwrap_or("?")
        ));
    }
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for field in &mut fields {
        // whitespace and `#` comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err("truncated header".into()),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format!("bad header field at byte {start}"))?;
    }
    // exactly one whitespace byte separates header and raster
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err("missing whitespace after maxval".into()),
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(format!("empty image {width}x{height}"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(format!("maxval {maxval} out of range"));
    }
    Ok((
        Header {
            width: width as usize,
            height: height as usize,
            maxval,
        },
        &bytes[pos..],
    ))
}

fn read_samples(body: &[u8], count: usize, maxval: u32) -> Result<Vec<f64>, String> {
    let wide = maxval > 255;
    let need = if wide { count * 2 } else { count };
    if body.len() != need {
        return Err(format!("raster has {} bytes, expected {need}", body.len()));
    }
    let scale = maxval as f64;
    Ok(if wide {
        body.chunks_exact(2)
            .map(|b| (u16::from_be_bytes([b[0], b[1]]) as f64 / scale).min(1.0))
            .collect()
    } else {
        body.iter().map(|&b| (b as f64 / scale).min(1.0)).collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ppm_header_is_canonical() {
        let img = RadianceImage::filled(2, 3, [1.0, 0.0, 0.5]).unwrap();
        let bytes = encode_ppm(&img);
        assert!(bytes.starts_with(b"P6\n3 2\n255\n"));
        assert_eq!(bytes.len(), 11 + 18);
        assert_eq!(&bytes[11..14], &[255, 0, 128]);
    }

    #[test]
    fn pgm_is_sixteen_bit_big_endian() {
        let p = Plane::from_vec(1, 2, vec![1.0, 0.5]).unwrap();
        let bytes = encode_pgm16(&p);
        assert!(bytes.starts_with(b"P5\n2 1\n65535\n"));
        let raster = &bytes[bytes.len() - 4..];
        assert_eq!(raster, &[0xff, 0xff, 0x80, 0x00]);
    }

    #[test]
    fn sixteen_bit_ppm_round_trips_its_quantization() {
        let img = RadianceImage::from_fn(3, 2, |y, x| [y as f64 / 3.0, x as f64 * 0.37, 0.123456])
            .unwrap();
        let bytes = encode_ppm16(&img);
        assert!(bytes.starts_with(b"P6\n2 3\n65535\n"));
        assert_eq!(decode_ppm(&bytes).unwrap(), quantize_ppm16(&img));
        let q = quantize_ppm16(&img);
        assert_eq!(encode_ppm16(&q), bytes);
    }

    #[test]
    fn decoder_accepts_comments_and_8bit_pgm() {
        let mut bytes = b"P5 # a comment\n2 # more\n1\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 255]);
        let p = decode_pgm(&bytes).unwrap();
        assert_eq!(p.data(), &[0.0, 1.0]);
    }

    #[test]
    fn decoder_rejects_garbage() {
        assert!(decode_ppm(b"P5\n1 1\n255\n\0").is_err());
        assert!(decode_ppm(b"P6\n1 1\n255\n\0").is_err());
        assert!(decode_pgm(b"P5\n0 1\n255\n").is_err());
        assert!(decode_pgm(b"P5\n1 1\n70000\n\0\0").is_err());
    }

    proptest! {
        #[test]
        fn ppm_bytes_round_trip(raster in proptest::collection::vec(any::<u8>(), 5 * 4 * 3)) {
            let mut bytes = b"P6\n5 4\n255\n".to_vec();
            bytes.extend_from_slice(&raster);
            let img = decode_ppm(&bytes).unwrap();
            prop_assert_eq!(encode_ppm(&img), bytes);
            prop_assert_eq!(quantize_ppm(&img), img);
        }

        #[test]
        fn pgm_bytes_round_trip(raster in proptest::collection::vec(any::<u8>(), 3 * 7 * 2)) {
            let mut bytes = b"P5\n7 3\n65535\n".to_vec();
            bytes.extend_from_slice(&raster);
            let p = decode_pgm(&bytes).unwrap();
            prop_assert_eq!(encode_pgm16(&p), bytes);
        }
    }
}
