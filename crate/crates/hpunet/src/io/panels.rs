//! Binary PPM/PGM panel exporters.
//!
//! Label maps render as P6 color pixmaps through a fixed 16-color palette
//! (label 0 is black; higher labels wrap modulo 16). Grayscale images render
//! as P5. Both formats are uncompressed with byte-exact headers
//! (`P6\n{W} {H}\n255\n`), so identical inputs always produce identical files.

use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum PanelError {
    #[error("panel data length {got} does not match {width}x{height}")]
    LengthMismatch {
        width: usize,
        height: usize,
        got: usize,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Fixed label palette: index 0 black, then 15 high-contrast colors.
pub const PALETTE: [[u8; 3]; 16] = [
    [0, 0, 0],
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [220, 190, 255],
    [170, 110, 40],
    [255, 250, 200],
    [128, 0, 0],
];

pub fn palette_color(label: usize) -> [u8; 3] {
    PALETTE[label % PALETTE.len()]
}

fn check_len(width: usize, height: usize, got: usize) -> Result<(), PanelError> {
    if got != width * height {
        return Err(PanelError::LengthMismatch { width, height, got });
    }
    Ok(())
}

/// Encodes a row-major label map as a P6 pixmap.
pub fn ppm_label_bytes(width: usize, height: usize, labels: &[u8]) -> Result<Vec<u8>, PanelError> {
    check_len(width, height, labels.len())?;
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.reserve(labels.len() * 3);
    for &l in labels {
        out.extend_from_slice(&palette_color(l as usize));
    }
    Ok(out)
}

/// Encodes a row-major grayscale image as a P5 pixmap.
pub fn pgm_bytes(width: usize, height: usize, gray: &[u8]) -> Result<Vec<u8>, PanelError> {
    check_len(width, height, gray.len())?;
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(gray);
    Ok(out)
}

/// Maps unit-range floats to 8-bit gray, clamping out-of-range values.
pub fn gray_from_unit(values: &[f32]) -> Vec<u8> {
    values
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

pub fn write_ppm_labels(
    path: &Path,
    width: usize,
    height: usize,
    labels: &[u8],
) -> Result<(), PanelError> {
    let bytes = ppm_label_bytes(width, height, labels)?;
    std::fs::write(path, bytes).map_err(|source| PanelError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_pgm(
    path: &Path,
    width: usize,
    height: usize,
    gray: &[u8],
) -> Result<(), PanelError> {
    let bytes = pgm_bytes(width, height, gray)?;
    std::fs::write(path, bytes).map_err(|source| PanelError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_header_is_byte_exact_and_label0_black() {
        let bytes = ppm_label_bytes(2, 1, &[0, 1]).unwrap();
        assert!(bytes.starts_with(b"P6\n2 1\n255\n"));
        let body = &bytes[b"P6\n2 1\n255\n".len()..];
        assert_eq!(body, &[0, 0, 0, 230, 25, 75]);
    }

    #[test]
    fn pgm_header_and_payload() {
        let bytes = pgm_bytes(3, 2, &[0, 10, 20, 30, 40, 250]).unwrap();
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(&bytes[b"P5\n3 2\n255\n".len()..], &[0, 10, 20, 30, 40, 250]);
    }

    #[test]
    fn re_export_is_identical() {
        let labels: Vec<u8> = (0..64).map(|i| (i * 7 % 19) as u8).collect();
        let a = ppm_label_bytes(8, 8, &labels).unwrap();
        let b = ppm_label_bytes(8, 8, &labels).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn wrong_length_is_rejected() {
        assert!(matches!(
            ppm_label_bytes(4, 4, &[0; 3]),
            Err(PanelError::LengthMismatch { .. })
        ));
        assert!(matches!(
            pgm_bytes(4, 4, &[0; 17]),
            Err(PanelError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn labels_wrap_modulo_palette() {
        assert_eq!(palette_color(16), PALETTE[0]);
        assert_eq!(palette_color(17), PALETTE[1]);
    }

    #[test]
    fn gray_mapping_clamps() {
        assert_eq!(gray_from_unit(&[-0.5, 0.0, 0.5, 1.0, 2.0]), vec![0, 0, 128, 255, 255]);
    }

    #[test]
    fn file_writers_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ppm");
        write_ppm_labels(&p, 2, 2, &[0, 1, 2, 3]).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), ppm_label_bytes(2, 2, &[0, 1, 2, 3]).unwrap());
    }
}
