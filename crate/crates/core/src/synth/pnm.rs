//! Binary PPM (P6) and PGM (P5) with 8-bit samples.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn write(path: &Path, magic: &str, w: usize, h: usize, data: &[f64]) -> Result<()> {
    let mut buf = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    buf.extend(data.iter().map(|&v| to_byte(v)));
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Writes an `[h, w, 3]` image with values in `[0, 1]`.
pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    match *image.shape() {
        [h, w, 3] => write(path, "P6", w, h, image.data()),
        ref s => Err(Error::dim("write_ppm", s, &[0, 0, 3])),
    }
}

/// Writes an `[h, w]` map with values in `[0, 1]`.
pub fn write_pgm(path: &Path, map: &Tensor) -> Result<()> {
    match *map.shape() {
        [h, w] => write(path, "P5", w, h, map.data()),
        ref s => Err(Error::dim("write_pgm", s, &[0, 0])),
    }
}

fn read(path: &Path, magic: &[u8], channels: usize) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::format(path, msg);
    if !bytes.starts_with(magic) {
        return Err(bad("unexpected magic number"));
    }
    let mut at = magic.len();
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(at) {
                Some(b'#') => {
                    while bytes.get(at).is_some_and(|&b| b != b'\n') {
                        at += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => at += 1,
                Some(_) => break,
                None => return Err(bad("truncated header")),
            }
        }
        let start = at;
        while bytes.get(at).is_some_and(u8::is_ascii_digit) {
            at += 1;
        }
        *field = std::str::from_utf8(&bytes[start..at])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("malformed header"))?;
    }
    let [w, h, max] = fields;
    if max != 255 {
        return Err(bad("only 8-bit samples are supported"));
    }
    at += 1;
    let n = w * h * channels;
    let body = bytes.get(at..at + n).ok_or_else(|| bad("truncated pixel data"))?;
    let data = body.iter().map(|&b| b as f64 / 255.0).collect();
    let shape = if channels == 1 {
        vec![h, w]
    } else {
        vec![h, w, channels]
    };
    Tensor::new(shape, data).map_err(|e| Error::format(path, e.to_string()))
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    read(path, b"P6", 3)
}

pub fn read_pgm(path: &Path) -> Result<Tensor> {
    read(path, b"P5", 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantized_images_round_trip_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let img = Tensor::from_fn(&[4, 5, 3], |i| ((i * 37) % 256) as f64 / 255.0);
        let p = dir.path().join("a.ppm");
        write_ppm(&p, &img).unwrap();
        assert!(read_ppm(&p).unwrap().bitwise_eq(&img));
        let mask = Tensor::from_fn(&[4, 5], |i| (i % 2) as f64);
        let p = dir.path().join("m.pgm");
        write_pgm(&p, &mask).unwrap();
        assert!(read_pgm(&p).unwrap().bitwise_eq(&mask));
        assert!(read_ppm(&p).is_err());
    }
}
