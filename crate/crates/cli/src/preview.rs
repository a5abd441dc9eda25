//! RGB composite previews.

use std::io::BufWriter;
use std::path::Path;

use bayesfuse_core::ImageCube;

use crate::error::{CliError, CliResult};

const RGB_NM: [f64; 3] = [650.0, 550.0, 450.0];

/// Bands nearest 650/550/450 nm when wavelengths are known, otherwise the
/// bands at 20%, 50% and 80% of the spectral depth.
pub fn default_rgb_bands(bands: usize, wavelengths: Option<&[f64]>) -> [usize; 3] {
    match wavelengths {
        Some(w) if w.len() == bands && bands > 0 => RGB_NM.map(|target| {
            (0..bands).min_by(|&a, &b| (w[a] - target).abs().total_cmp(&(w[b] - target).abs())).unwrap()
        }),
        _ => [0.2, 0.5, 0.8].map(|f: f64| ((f * bands as f64) as usize).min(bands.saturating_sub(1))),
    }
}

/// 8-bit interleaved RGB with each channel min-max stretched independently.
pub fn rgb_composite(cube: &ImageCube, bands: [usize; 3]) -> CliResult<Vec<u8>> {
    if let Some(b) = bands.iter().find(|&&b| b >= cube.bands()) {
        return Err(CliError::user(format!("preview band {b} out of range for {} bands", cube.bands())));
    }
    let channels: Vec<Vec<f64>> = bands.iter().map(|&b| cube.band(b)).collect();
    let n = cube.n_pixels();
    let mut out = vec![0u8; 3 * n];
    for (c, data) in channels.iter().enumerate() {
        let finite = data.iter().copied().filter(|v| v.is_finite());
        let lo = finite.clone().fold(f64::INFINITY, f64::min);
        let hi = finite.fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        for (i, v) in data.iter().enumerate() {
            let t = if span > 0.0 && v.is_finite() { (v - lo) / span } else { 0.0 };
            out[3 * i + c] = (t * 255.0).round().clamp(0.0, 255.0) as u8;
        }
    }
    Ok(out)
}

pub fn write_preview(path: &Path, cube: &ImageCube, bands: [usize; 3]) -> CliResult<()> {
    let pixels = rgb_composite(cube, bands)?;
    let file = std::fs::File::create(path)?;
    let mut enc = png::Encoder::new(BufWriter::new(file), cube.cols() as u32, cube.rows() as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let png_err = |e: png::EncodingError| CliError::user(format!("{}: {e}", path.display()));
    let mut w = enc.write_header().map_err(png_err)?;
    w.write_image_data(&pixels).map_err(png_err)?;
    w.finish().map_err(png_err)?;
    Ok(())
}
