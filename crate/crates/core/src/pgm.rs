//! Netpbm greyscale images (P2 text and P5 binary).
//!
//! Grey level `p` out of `maxval` maps to the pixel value `2p/maxval − 1`,
//! so black is −1, white is +1 and mid-grey (the padding value) is 0.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn bad(detail: impl Into<String>) -> Error {
    Error::format("PGM image", detail)
}

/// Parses a P2 or P5 image into a `[1, height, width]` tensor.
pub fn parse_pgm(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0;
    let mut header = Vec::with_capacity(4);
    while header.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        header.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ASCII"))?);
    }
    let binary = match header[0] {
        "P5" => true,
        "P2" => false,
        other => return Err(bad(format!("unsupported magic `{other}`"))),
    };
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("bad header field `{s}`")));
    let (width, height, maxval) = (num(header[1])?, num(header[2])?, num(header[3])?);
    if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
        return Err(bad("dimensions and maxval must be positive, maxval <= 65535"));
    }
    let n = width * height;
    let levels: Vec<usize> = if binary {
        let data = bytes.get(pos + 1..).unwrap_or(&[]);
        let wide = maxval > 255;
        let need = if wide { 2 * n } else { n };
        if data.len() < need {
            return Err(bad("truncated pixel data"));
        }
        if wide {
            data[..need]
                .chunks_exact(2)
                .map(|c| (c[0] as usize) << 8 | c[1] as usize)
                .collect()
        } else {
            data[..n].iter().map(|&b| b as usize).collect()
        }
    } else {
        let text = std::str::from_utf8(&bytes[pos..]).map_err(|_| bad("P2 body is not ASCII"))?;
        let values = text
            .split_ascii_whitespace()
            .take(n)
            .map(num)
            .collect::<Result<Vec<_>>>()?;
        if values.len() < n {
            return Err(bad("truncated pixel data"));
        }
        values
    };
    if levels.iter().any(|&p| p > maxval) {
        return Err(bad("pixel above maxval"));
    }
    let scale = maxval as f64;
    Tensor::from_vec(
        vec![1, height, width],
        levels.iter().map(|&p| 2.0 * p as f64 / scale - 1.0).collect(),
    )
}

/// Encodes `[1, h, w]` as 8-bit P5, clamping values to [−1, 1].
pub fn encode_pgm(image: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = match image.shape() {
        [1, h, w] => (*h, *w),
        other => {
            return Err(Error::ShapeMismatch {
                op: "encode_pgm",
                left: other.to_vec(),
                right: vec![1, 0, 0],
            })
        }
    };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(
        image
            .data()
            .iter()
            .map(|&v| ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8),
    );
    Ok(out)
}

pub fn read_pgm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::unreadable(path, e))?;
    parse_pgm(&bytes)
}

pub fn write_pgm(path: &Path, image: &Tensor) -> Result<()> {
    fs::write(path, encode_pgm(image)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn p2_levels() {
        let t = parse_pgm(b"P2\n# c\n3 1\n4\n0 2 4\n").unwrap();
        assert_eq!(t.shape(), &[1, 1, 3]);
        assert_eq!(t.data(), &[-1.0, 0.0, 1.0]);
    }

    #[test]
    fn p5_round_trip_is_within_one_level() {
        let img = Tensor::from_vec(vec![1, 2, 2], vec![-1.0, 1.0, 0.3, 2.0]).unwrap();
        let back = parse_pgm(&encode_pgm(&img).unwrap()).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a.clamp(-1.0, 1.0) - b).abs() <= 1.0 / 127.5);
        }
    }

    #[test]
    fn rejects_garbage() {
        assert!(parse_pgm(b"P6\n1 1\n255\n\0\0\0").is_err());
        assert!(parse_pgm(b"P5\n2 2\n255\n\0").is_err());
        assert!(parse_pgm(b"P2\n1 1\n3\n9\n").is_err());
        assert!(parse_pgm(b"").is_err());
    }
}
