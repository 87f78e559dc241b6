//! Minimal reader/writer for 1-D little-endian float `.npy` arrays (format
//! version 1.0), as used for per-frame clearance scores.

const MAGIC: &[u8] = b"\x93NUMPY";

fn header_field<'a>(header: &'a str, key: &str) -> Option<&'a str> {
    let start = header.find(&format!("'{key}'"))? + key.len() + 2;
    let rest = header[start..].trim_start().strip_prefix(':')?.trim_start();
    Some(rest)
}

/// Parses a float32/float64 vector. Errors carry a plain description; the
/// caller attaches the path.
pub fn parse_f64_vector(bytes: &[u8]) -> std::result::Result<Vec<f64>, String> {
    if bytes.len() < 10 || &bytes[..6] != MAGIC {
        return Err("not an .npy file".into());
    }
    if bytes[6] != 1 {
        return Err(format!("unsupported .npy version {}.{}", bytes[6], bytes[7]));
    }
    let hlen = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let header = std::str::from_utf8(bytes.get(10..10 + hlen).ok_or("truncated header")?).map_err(|_| "header is not text")?;
    let descr = header_field(header, "descr").ok_or("missing descr")?;
    let width = if descr.starts_with("'<f4'") {
        4
    } else if descr.starts_with("'<f8'") {
        8
    } else {
        return Err(format!("unsupported dtype {}", descr.split(',').next().unwrap_or(descr)));
    };
    let fortran = header_field(header, "fortran_order").ok_or("missing fortran_order")?;
    if fortran.starts_with("True") {
        return Err("fortran order not supported".into());
    }
    let shape = header_field(header, "shape").ok_or("missing shape")?;
    let inner = shape.strip_prefix('(').and_then(|s| s.split(')').next()).ok_or("malformed shape")?;
    let dims: Vec<usize> = inner
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| format!("bad dimension '{s}'")))
        .collect::<std::result::Result<_, _>>()?;
    let n: usize = dims.iter().product();
    if dims.len() > 1 && dims.iter().filter(|&&d| d != 1).count() > 1 {
        return Err(format!("expected a vector, got shape {dims:?}"));
    }
    let payload = &bytes[10 + hlen..];
    if payload.len() != n * width {
        return Err(format!("payload of {} bytes for {n} values", payload.len()));
    }
    Ok(payload
        .chunks_exact(width)
        .map(|c| if width == 4 { f32::from_le_bytes(c.try_into().unwrap()) as f64 } else { f64::from_le_bytes(c.try_into().unwrap()) })
        .collect())
}

/// Serializes a float64 vector.
pub fn encode_f64_vector(values: &[f64]) -> Vec<u8> {
    let mut header = format!("{{'descr': '<f8', 'fortran_order': False, 'shape': ({},), }}", values.len());
    // Pad so magic + version + length + header ends on a 64-byte boundary.
    let total = MAGIC.len() + 4 + header.len() + 1;
    header.push_str(&" ".repeat((64 - total % 64) % 64));
    header.push('\n');
    let mut out = Vec::with_capacity(10 + header.len() + 8 * values.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_f8() {
        let v = vec![0.25, 1.0, 0.0, 0.123456789];
        let bytes = encode_f64_vector(&v);
        assert_eq!((bytes.len() - 8 * v.len()) % 64, 0);
        assert_eq!(parse_f64_vector(&bytes).unwrap(), v);
    }

    #[test]
    fn reads_f4() {
        let header = "{'descr': '<f4', 'fortran_order': False, 'shape': (2,), }";
        let mut bytes = MAGIC.to_vec();
        bytes.extend_from_slice(&[1, 0]);
        bytes.extend_from_slice(&(header.len() as u16).to_le_bytes());
        bytes.extend_from_slice(header.as_bytes());
        bytes.extend_from_slice(&0.5f32.to_le_bytes());
        bytes.extend_from_slice(&0.75f32.to_le_bytes());
        assert_eq!(parse_f64_vector(&bytes).unwrap(), vec![0.5, 0.75]);
    }

    #[test]
    fn rejects_ints_and_garbage() {
        let mut b = encode_f64_vector(&[1.0]);
        let pos = b.windows(4).position(|w| w == b"<f8'").unwrap();
        b[pos + 1] = b'i';
        assert!(parse_f64_vector(&b).is_err());
        assert!(parse_f64_vector(b"hello world").is_err());
    }
}
