//! Entropy heatmaps as binary 8-bit PGM (`P5`) images.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::ProbabilityMap;
use crate::uncertainty::pixel_dispersion;

/// `round(255 · E / ln C)` with halves rounded up.
pub fn gray_value(entropy: f64, classes: usize) -> u8 {
    let scaled = 255.0 * entropy / (classes as f64).ln();
    (scaled + 0.5).floor().clamp(0.0, 255.0) as u8
}

pub fn entropy_image(probs: &ProbabilityMap) -> Vec<u8> {
    let c = probs.classes();
    probs.rows().map(|row| gray_value(pixel_dispersion(row).0, c)).collect()
}

pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Parses the `P5` files written by [`encode_pgm`] into `(width, height, pixels)`.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PGM header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(Error::Format("only 8-bit P5 images are supported".into()));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|e| Error::Format(format!("bad PGM extent {s:?}: {e}")));
    let (w, h) = (parse(&fields[1])?, parse(&fields[2])?);
    let body = &bytes[(pos + 1).min(bytes.len())..];
    if body.len() != w * h {
        return Err(Error::Format(format!("PGM body has {} bytes, expected {}", body.len(), w * h)));
    }
    Ok((w, h, body.to_vec()))
}

pub fn export_entropy_heatmap(probs: &ProbabilityMap, path: &Path) -> Result<()> {
    let bytes = encode_pgm(probs.width(), probs.height(), &entropy_image(probs));
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn rounding_is_half_up() {
        assert_eq!(gray_value(0.5 * 4f64.ln(), 4), 128);
        assert_eq!(gray_value(0.0, 4), 0);
        assert_eq!(gray_value(4f64.ln(), 4), 255);
        assert_eq!(gray_value(2.0 * 4f64.ln(), 4), 255);
    }

    #[test]
    fn uniform_and_one_hot_maps() {
        assert!(entropy_image(&ProbabilityMap::uniform(3, 2, 4)).iter().all(|&v| v == 255));
        let onehot = ProbabilityMap::new(Tensor::new(vec![1, 2, 3], vec![0.0, 1.0, 0.0, 1.0, 0.0, 0.0]).unwrap()).unwrap();
        assert_eq!(entropy_image(&onehot), vec![0, 0]);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.pgm");
        export_entropy_heatmap(&ProbabilityMap::uniform(3, 5, 4), &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5\n5 3\n255\n"));
        let (w, h, px) = decode_pgm(&bytes).unwrap();
        assert_eq!((w, h), (5, 3));
        assert_eq!(px, vec![255; 15]);
        assert!(decode_pgm(b"P2\n1 1\n255\n\x00").is_err());
        assert!(decode_pgm(b"P5\n2 2\n255\n\x00").is_err());
        assert!(export_entropy_heatmap(&ProbabilityMap::uniform(1, 1, 2), &dir.path().join("no/such/dir.pgm")).is_err());
    }
}
