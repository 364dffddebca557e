//! Binary PGM (P5) and PPM (P6) with maxval 255.

use std::path::Path;

use crate::error::{Error, Result};

use super::Image;

pub fn encode_pnm(img: &Image) -> Vec<u8> {
    let magic = if img.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn write_pnm(path: &Path, img: &Image) -> Result<()> {
    std::fs::write(path, encode_pnm(img)).map_err(|e| Error::io(path, e))
}

pub fn read_pnm(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pnm(&bytes, path)
}

/// Parses a binary PNM; `path` is only used for diagnostics.
pub fn decode_pnm(bytes: &[u8], path: &Path) -> Result<Image> {
    let bad = |msg: &str| Error::MalformedHeader {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("header ends early"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII header"))?);
    }
    // exactly one whitespace byte separates the header from the raster
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(bad("missing separator after maxval"));
    }
    pos += 1;
    let channels = match fields[0] {
        "P5" => 1,
        "P6" => 3,
        other => return Err(bad(&format!("unsupported magic {other:?}"))),
    };
    let dim = |s: &str, what: &str| -> Result<usize> {
        s.parse::<usize>()
            .ok()
            .filter(|&v| v > 0)
            .ok_or_else(|| bad(&format!("invalid {what} {s:?}")))
    };
    let width = dim(fields[1], "width")?;
    let height = dim(fields[2], "height")?;
    if fields[3] != "255" {
        return Err(bad(&format!("maxval must be 255, got {}", fields[3])));
    }
    let expected = width * height * channels;
    let payload = &bytes[pos..];
    if payload.len() < expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            found: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(bad(&format!(
            "{} trailing bytes after raster",
            payload.len() - expected
        )));
    }
    Image::new(width, height, channels, payload.to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_bytes() {
        let img = Image::new(3, 2, 3, (0..18).collect()).unwrap();
        let bytes = encode_pnm(&img);
        assert!(bytes.starts_with(b"P6\n3 2\n255\n"));
        assert_eq!(decode_pnm(&bytes, Path::new("x.ppm")).unwrap(), img);
    }

    #[test]
    fn comments_in_header() {
        let bytes = b"P5\n# made by hand\n2 1\n255\n\x01\x02";
        let img = decode_pnm(bytes, Path::new("c.pgm")).unwrap();
        assert_eq!(img.data, vec![1, 2]);
    }

    #[test]
    fn truncated_names_file_and_count() {
        let bytes = b"P5\n4 4\n255\n\x00\x00";
        let err = decode_pnm(bytes, Path::new("cut.pgm")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("cut.pgm") && msg.contains("16"), "{msg}");
        assert!(matches!(err, Error::Truncated { expected: 16, found: 2, .. }));
    }

    #[test]
    fn malformed_magic() {
        let err = decode_pnm(b"P2\n1 1\n255\n0", Path::new("m.pgm")).unwrap_err();
        assert!(matches!(err, Error::MalformedHeader { .. }));
    }
}
