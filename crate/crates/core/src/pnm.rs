//! Binary PGM (`P5`) and PPM (`P6`) images. Samples are mapped to `[0, 1]`
//! by dividing by the header's maxval.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{Grid, Tensor3};

struct Header {
    magic: [u8; 2],
    width: usize,
    height: usize,
    maxval: usize,
    data_start: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(Error::format(0, "not a PNM file"));
    }
    let magic = [bytes[0], bytes[1]];
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
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
        if start == pos {
            return Err(Error::format(pos, "expected a decimal header field"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| Error::format(start, "header field out of range"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::format(pos, "expected whitespace after maxval"));
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(Error::format(2, "zero image dimension"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(Error::format(2, format!("maxval {maxval} out of range")));
    }
    Ok(Header {
        magic,
        width,
        height,
        maxval,
        data_start: pos + 1,
    })
}

fn samples(bytes: &[u8], h: &Header, channels: usize) -> Result<Vec<f64>> {
    let wide = h.maxval > 255;
    let n = h.width * h.height * channels;
    let need = n * if wide { 2 } else { 1 };
    let data = &bytes[h.data_start..];
    if data.len() < need {
        return Err(Error::format(bytes.len(), format!("truncated pixel data: {} of {need} bytes", data.len())));
    }
    let max = h.maxval as f64;
    Ok(if wide {
        data[..need]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / max)
            .collect()
    } else {
        data[..need].iter().map(|&b| b as f64 / max).collect()
    })
}

pub fn decode_pgm(bytes: &[u8]) -> Result<Grid> {
    let h = parse_header(bytes)?;
    if &h.magic != b"P5" {
        return Err(Error::format(0, "expected binary PGM (P5)"));
    }
    Grid::from_vec(h.height, h.width, samples(bytes, &h, 1)?)
}

/// Reads a P5 or P6 file into a 1- or 3-channel tensor.
pub fn decode_image(bytes: &[u8]) -> Result<Tensor3> {
    let h = parse_header(bytes)?;
    match &h.magic {
        b"P5" => Ok(Tensor3::from_grid(&decode_pgm(bytes)?)),
        b"P6" => {
            let interleaved = samples(bytes, &h, 3)?;
            let plane = h.width * h.height;
            let mut data = vec![0.0; 3 * plane];
            for (i, px) in interleaved.chunks_exact(3).enumerate() {
                for c in 0..3 {
                    data[c * plane + i] = px[c];
                }
            }
            Tensor3::from_vec(3, h.height, h.width, data)
        }
        _ => Err(Error::format(0, "expected P5 or P6")),
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes a grid as 8-bit PGM, clamping to `[0, 1]`.
pub fn encode_pgm(g: &Grid) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", g.width(), g.height()).into_bytes();
    out.extend(g.as_slice().iter().map(|&v| quantize(v)));
    out
}

/// Encodes interleaved 8-bit RGB.
pub fn encode_ppm(width: usize, height: usize, rgb: &[[u8; 3]]) -> Vec<u8> {
    assert_eq!(rgb.len(), width * height);
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend(rgb.iter().flatten());
    out
}

pub fn read_pgm(path: &Path) -> Result<Grid> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes).map_err(|e| e.in_file(path))
}

pub fn read_image(path: &Path) -> Result<Tensor3> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes).map_err(|e| e.in_file(path))
}

pub fn write_pgm(path: &Path, g: &Grid) -> Result<()> {
    fs::write(path, encode_pgm(g)).map_err(|e| Error::io(path, e))
}

pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[[u8; 3]]) -> Result<()> {
    fs::write(path, encode_ppm(width, height, rgb)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip_on_quantized_values() {
        let g = Grid::from_fn(3, 5, |r, c| ((r * 5 + c) * 17 % 256) as f64 / 255.0);
        assert_eq!(decode_pgm(&encode_pgm(&g)).unwrap(), g);
    }

    #[test]
    fn header_comments_and_wide_samples() {
        let mut bytes = b"P5 # comment\n2 1\n# another\n65535\n".to_vec();
        bytes.extend([0xff, 0xff, 0x00, 0x00]);
        let g = decode_pgm(&bytes).unwrap();
        assert_eq!(g.as_slice(), &[1.0, 0.0]);
    }

    #[test]
    fn ppm_planes() {
        let bytes = encode_ppm(2, 1, &[[255, 0, 0], [0, 0, 255]]);
        let t = decode_image(&bytes).unwrap();
        assert_eq!(t.channels, 3);
        assert_eq!(t.channel(0), &[1.0, 0.0]);
        assert_eq!(t.channel(2), &[0.0, 1.0]);
    }

    #[test]
    fn malformed_inputs() {
        assert!(decode_pgm(b"P2\n1 1\n255\n0").is_err());
        assert!(decode_pgm(b"P5\n2 2\n255\n\x00").is_err());
        assert!(decode_pgm(b"P5\n0 2\n255\n").is_err());
        assert!(decode_pgm(b"P5\nx").is_err());
    }
}
