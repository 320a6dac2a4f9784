//! Hashing and filesystem helpers shared across modules.

use sha2::{Digest, Sha256};
use std::io::Read;
use std::path::Path;

/// Hex-encoded SHA-256 of a byte slice.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hex_encode(&hasher.finalize())
}

/// Hex-encoded SHA-256 of a file's contents.
pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    let mut file = std::fs::File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 65536];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex_encode(&hasher.finalize()))
}

fn hex_encode(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Wrap a heading angle into (-pi, pi].
pub fn wrap_angle(theta: f64) -> f64 {
    let mut t = theta % std::f64::consts::TAU;
    if t <= -std::f64::consts::PI {
        t += std::f64::consts::TAU;
    } else if t > std::f64::consts::PI {
        t -= std::f64::consts::TAU;
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wrap_angle_range() {
        for k in -20..20 {
            let t = wrap_angle(0.7 + k as f64 * 1.3);
            assert!(t > -std::f64::consts::PI && t <= std::f64::consts::PI);
        }
        assert_eq!(wrap_angle(std::f64::consts::PI), std::f64::consts::PI);
        assert_eq!(
            wrap_angle(-std::f64::consts::PI),
            std::f64::consts::PI,
            "-pi wraps to pi"
        );
    }

    #[test]
    fn sha256_known_vector() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
