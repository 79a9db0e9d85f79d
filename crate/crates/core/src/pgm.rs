//! Binary 8-bit portable graymap (P5) files.

use std::path::Path;

use crate::archive::write_atomic;
use crate::error::{Error, Result};
use crate::tensor::FeatureMap;

/// Map `[-1, 1]` linearly onto `0..=255`, clamping outside values.
pub fn to_byte(v: f32) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round()) as u8
}

pub fn from_byte(b: u8) -> f32 {
    b as f32 / 127.5 - 1.0
}

/// Encode one `(1, 1, h, w)` item as P5 bytes.
pub fn encode(item: &FeatureMap) -> Result<Vec<u8>> {
    let [b, c, h, w] = item.dims4()?;
    if b != 1 || c != 1 {
        return Err(Error::shape("graymap item", &[1, 1, h, w], item.shape()));
    }
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(item.data().iter().map(|&v| to_byte(v)));
    Ok(out)
}

pub fn write(path: &Path, item: &FeatureMap) -> Result<()> {
    write_atomic(path, &encode(item)?)
}

/// Decode P5 bytes into a `(1, 1, h, w)` map in `[-1, 1]`.
pub fn decode(bytes: &[u8]) -> Result<FeatureMap> {
    let bad = |m: &str| Error::Config(format!("graymap: {m}"));
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
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
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("bad header"))?);
    }
    if fields[0] != "P5" {
        return Err(bad("only binary P5 files are supported"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, max) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if max != 255 {
        return Err(bad("only 8-bit files are supported"));
    }
    let data = bytes
        .get(pos + 1..)
        .ok_or_else(|| bad("missing pixel data"))?;
    if data.len() != w * h {
        return Err(bad(&format!(
            "expected {} pixels, found {}",
            w * h,
            data.len()
        )));
    }
    FeatureMap::new([1, 1, h, w], data.iter().map(|&b| from_byte(b)).collect())
}

pub fn read(path: &Path) -> Result<FeatureMap> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_mapping_is_linear_and_clamped() {
        assert_eq!(to_byte(-1.0), 0);
        assert_eq!(to_byte(1.0), 255);
        assert_eq!(to_byte(0.0), 128);
        assert_eq!(to_byte(7.0), 255);
        assert_eq!(from_byte(0), -1.0);
        assert_eq!(from_byte(255), 1.0);
        for b in 0..=255u8 {
            assert_eq!(to_byte(from_byte(b)), b);
        }
    }

    #[test]
    fn encode_decode_round_trip() {
        let m = FeatureMap::from_fn([1, 1, 3, 5], |i| from_byte((i * 17) as u8));
        let bytes = encode(&m).unwrap();
        assert!(bytes.starts_with(b"P5\n5 3\n255\n"));
        assert_eq!(decode(&bytes).unwrap(), m);
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        assert!(encode(&FeatureMap::zeros([2, 1, 3, 5])).is_err());
    }
}
