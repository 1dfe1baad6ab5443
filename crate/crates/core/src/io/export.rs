//! Grayscale PGM and CSV image export. Both write the top image row first
//! (largest `y`), so files display the domain upright.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{check_len, Error, Result};
use crate::io::pdis::{manifest_path, render_manifest, Manifest};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImageFormat {
    Pgm,
    Csv,
}

impl ImageFormat {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pgm" => Ok(ImageFormat::Pgm),
            "csv" => Ok(ImageFormat::Csv),
            _ => Err(Error::InvalidConfig(format!("unknown image format {s:?} (pgm or csv)"))),
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            ImageFormat::Pgm => "pgm",
            ImageFormat::Csv => "csv",
        }
    }
}

/// Row-major image stored from the lower-left cell, as on the inverse grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Image<'a> {
    pub nx: usize,
    pub ny: usize,
    pub values: &'a [f64],
}

/// 16-bit level of `v` under the linear map `[0, peak] → [0, 65535]`.
pub fn pgm_level(v: f64, peak: f64) -> u16 {
    ((v / peak).clamp(0.0, 1.0) * 65535.0).round() as u16
}

pub fn pgm_bytes(img: &Image<'_>, peak: f64) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n65535\n", img.nx, img.ny).into_bytes();
    for iy in (0..img.ny).rev() {
        for &v in &img.values[iy * img.nx..(iy + 1) * img.nx] {
            // 16-bit PGM samples are big-endian
            out.extend_from_slice(&pgm_level(v, peak).to_be_bytes());
        }
    }
    out
}

/// 17 significant digits per value, enough to round-trip any f64.
pub fn csv_text(img: &Image<'_>) -> String {
    let mut out = String::new();
    for iy in (0..img.ny).rev() {
        let row = &img.values[iy * img.nx..(iy + 1) * img.nx];
        for (i, v) in row.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            write!(out, "{v:.16e}").expect("write to string");
        }
        out.push('\n');
    }
    out
}

/// Writes the image and a manifest recording the mapping.
pub fn export_image(img: &Image<'_>, path: &Path, format: ImageFormat, peak: f64) -> Result<()> {
    check_len("image", img.nx * img.ny, img.values.len())?;
    if let Some(i) = img.values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Domain(format!("image value {i} is not finite")));
    }
    let mut m = Manifest::new();
    m.insert("format".into(), format.extension().into());
    m.insert("nx".into(), img.nx.to_string());
    m.insert("ny".into(), img.ny.to_string());
    m.insert("row_order".into(), "top-down".into());
    match format {
        ImageFormat::Pgm => {
            if !(peak > 0.0 && peak.is_finite()) {
                return Err(Error::InvalidConfig(format!("PGM peak must be positive, got {peak}")));
            }
            m.insert("mapping".into(), "linear".into());
            m.insert("peak".into(), peak.to_string());
            m.insert("maxval".into(), "65535".into());
            fs::write(path, pgm_bytes(img, peak))?;
        }
        ImageFormat::Csv => {
            m.insert("digits".into(), "17".into());
            fs::write(path, csv_text(img))?;
        }
    }
    fs::write(manifest_path(path), render_manifest(&m)?)?;
    Ok(())
}

/// Reads a CSV written by [`export_image`] back into grid order.
pub fn read_csv_image(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let text = fs::read_to_string(path)?;
    let rows: Vec<Vec<f64>> = text
        .lines()
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.split(',')
                .map(|v| v.trim().parse::<f64>().map_err(|_| Error::Format(format!("bad CSV value {v:?}"))))
                .collect()
        })
        .collect::<Result<_>>()?;
    let ny = rows.len();
    let nx = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != nx) {
        return Err(Error::Format("ragged CSV rows".into()));
    }
    Ok((nx, ny, rows.into_iter().rev().flatten().collect()))
}
