//! Cube files: a JSON header next to a raw little-endian `f64` payload.
//!
//! `scene.json` holds `{rows, cols, bands, dtype: "f64", order: "bip",
//! wavelengths?}` and `scene.bin` holds `rows * cols * bands` values in
//! band-interleaved-by-pixel order.

use std::fs;
use std::path::{Path, PathBuf};

use bayesfuse_core::ImageCube;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CubeHeader {
    pub rows: usize,
    pub cols: usize,
    pub bands: usize,
    pub dtype: String,
    pub order: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wavelengths: Option<Vec<f64>>,
}

/// The `.json` and `.bin` paths for any of `stem`, `stem.json`, `stem.bin`.
pub fn cube_paths(path: &Path) -> (PathBuf, PathBuf) {
    let stem = match path.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("bin") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    let with = |ext: &str| {
        let mut s = stem.clone().into_os_string();
        s.push(".");
        s.push(ext);
        PathBuf::from(s)
    };
    (with("json"), with("bin"))
}

pub fn write_cube(path: &Path, cube: &ImageCube, wavelengths: Option<&[f64]>) -> CliResult<(PathBuf, PathBuf)> {
    if let Some(w) = wavelengths {
        if w.len() != cube.bands() {
            return Err(CliError::user(format!("{} wavelengths for {} bands", w.len(), cube.bands())));
        }
    }
    let (json, bin) = cube_paths(path);
    let header = CubeHeader {
        rows: cube.rows(),
        cols: cube.cols(),
        bands: cube.bands(),
        dtype: "f64".into(),
        order: "bip".into(),
        wavelengths: wavelengths.map(<[f64]>::to_vec),
    };
    let mut payload = Vec::with_capacity(cube.as_slice().len() * 8);
    for v in cube.as_slice() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(&json, serde_json::to_string_pretty(&header)? + "\n")?;
    fs::write(&bin, payload)?;
    Ok((json, bin))
}

pub fn read_cube(path: &Path) -> CliResult<(ImageCube, Option<Vec<f64>>)> {
    let (json, bin) = cube_paths(path);
    let text = fs::read_to_string(&json).map_err(|e| CliError::user(format!("{}: {e}", json.display())))?;
    let header: CubeHeader =
        serde_json::from_str(&text).map_err(|e| CliError::user(format!("{}: {e}", json.display())))?;
    if header.dtype != "f64" || header.order != "bip" {
        return Err(CliError::user(format!(
            "{}: unsupported dtype/order {}/{}",
            json.display(),
            header.dtype,
            header.order
        )));
    }
    let payload = fs::read(&bin).map_err(|e| CliError::user(format!("{}: {e}", bin.display())))?;
    let expect = header.rows * header.cols * header.bands * 8;
    if payload.len() != expect {
        return Err(CliError::user(format!("{}: {} bytes, header implies {expect}", bin.display(), payload.len())));
    }
    let data = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    let cube = ImageCube::new(header.rows, header.cols, header.bands, data)
        .map_err(|e| CliError::user(format!("{}: {e}", bin.display())))?;
    if let Some(w) = &header.wavelengths {
        if w.len() != header.bands {
            return Err(CliError::user(format!("{}: wavelength count differs from bands", json.display())));
        }
    }
    Ok((cube, header.wavelengths))
}
