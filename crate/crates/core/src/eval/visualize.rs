//! Band panels for display: per image LL, LH, HL, HH and the summed detail.

use std::path::Path;

use candle_core::Tensor;
use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::wavelet::{haar_decompose, FrequencyBands};

pub const PANELS: [&str; 5] = ["ll", "lh", "hl", "hh", "detail"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridMeta {
    pub rows: usize,
    pub cols: usize,
    pub panel_order: Vec<String>,
    pub panel_height: usize,
    pub panel_width: usize,
    /// Display value `v` of the LL panel is `(ll / 2 + 1) * 127.5`.
    pub ll_scale: f64,
    /// Detail panels show `|band| / detail_scale * 255`, clamped; one scale for the grid.
    pub detail_scale: f64,
    pub normalization: String,
}

/// The five panels of every image, each `(N, C, H/2, W/2)`.
pub fn band_panels(images: &Tensor) -> Result<[Tensor; 5]> {
    let FrequencyBands { ll, lh, hl, hh } = haar_decompose(images)?;
    let detail = ((&lh + &hl)? + &hh)?;
    Ok([ll, lh, hl, hh, detail])
}

/// Mean squared value of each band over the whole batch, as fractions of the total.
pub fn band_energy_fractions(images: &Tensor) -> Result<[f64; 4]> {
    let b = haar_decompose(images)?;
    let e: Vec<f64> = [&b.ll, &b.lh, &b.hl, &b.hh]
        .iter()
        .map(|t| -> Result<f64> { Ok(t.sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?) })
        .collect::<Result<_>>()?;
    let total: f64 = e.iter().sum();
    if total == 0.0 {
        return Ok([0.0; 4]);
    }
    Ok([e[0] / total, e[1] / total, e[2] / total, e[3] / total])
}

/// Fraction of energy outside LL.
pub fn high_frequency_fraction(images: &Tensor) -> Result<f64> {
    let f = band_energy_fractions(images)?;
    Ok(f[1] + f[2] + f[3])
}

fn abs_max(t: &Tensor) -> Result<f64> {
    Ok(t.abs()?.max_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}

/// Renders `(N, C, H, W)` images into an RGB grid with one row per image and
/// five panel columns. Single-channel images are shown in gray.
pub fn render_band_grid(images: &Tensor) -> Result<(RgbImage, GridMeta)> {
    let (n, c, h, w) = images.dims4().map_err(|_| shape_err!("expected (N, C, H, W), got {:?}", images.dims()))?;
    if c != 1 && c != 3 {
        return Err(shape_err!("band grids need 1 or 3 channels, got {c}"));
    }
    let panels = band_panels(images)?;
    let detail_scale = panels[1..]
        .iter()
        .map(abs_max)
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    let detail_scale = if detail_scale > 0.0 { detail_scale } else { 1.0 };
    let (ph, pw) = (h / 2, w / 2);
    let mut grid = RgbImage::new((pw * 5) as u32, (ph * n) as u32);
    for (col, panel) in panels.iter().enumerate() {
        let values = panel.to_dtype(candle_core::DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        for img in 0..n {
            for y in 0..ph {
                for x in 0..pw {
                    let mut px = [0u8; 3];
                    for (ch, slot) in px.iter_mut().enumerate() {
                        let src = if c == 1 { 0 } else { ch };
                        let v = values[((img * c + src) * ph + y) * pw + x] as f64;
                        let display = if col == 0 {
                            (v / 2.0 + 1.0) * 127.5
                        } else {
                            v.abs() / detail_scale * 255.0
                        };
                        *slot = display.round().clamp(0.0, 255.0) as u8;
                    }
                    grid.put_pixel((col * pw + x) as u32, (img * ph + y) as u32, Rgb(px));
                }
            }
        }
    }
    let meta = GridMeta {
        rows: n,
        cols: 5,
        panel_order: PANELS.iter().map(|s| s.to_string()).collect(),
        panel_height: ph,
        panel_width: pw,
        ll_scale: 0.5,
        detail_scale,
        normalization: "ll: (v/2+1)*127.5; detail panels: |v|/detail_scale*255".into(),
    };
    Ok((grid, meta))
}

/// Writes `{stem}.png` and `{stem}.json` into `dir`.
pub fn visualize_bands(images: &Tensor, dir: &Path, stem: &str) -> Result<GridMeta> {
    let (grid, meta) = render_band_grid(images)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    grid.save(dir.join(format!("{stem}.png")))?;
    let json = dir.join(format!("{stem}.json"));
    std::fs::write(&json, serde_json::to_string_pretty(&meta)? + "\n").map_err(|e| Error::io(&json, e))?;
    Ok(meta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn constant_image_has_blank_detail() {
        let x = Tensor::full(0.3f32, (2, 3, 8, 8), &Device::Cpu).unwrap();
        let (grid, meta) = render_band_grid(&x).unwrap();
        assert_eq!((grid.width(), grid.height()), (20, 8));
        assert_eq!((meta.rows, meta.cols), (2, 5));
        for (x, _, p) in grid.enumerate_pixels() {
            if x >= 4 {
                assert_eq!(p.0, [0, 0, 0]);
            }
        }
    }

    #[test]
    fn vertical_edge_lands_in_width_detail() {
        // Columns alternate -1 / 1: every 2x2 block differs only across width.
        let data: Vec<f32> = (0..64).map(|i| if i % 2 == 0 { -1.0 } else { 1.0 }).collect();
        let x = Tensor::from_vec(data, (1, 1, 8, 8), &Device::Cpu).unwrap();
        let f = band_energy_fractions(&x).unwrap();
        // LH is high-pass along height, HL along width.
        assert!((f[2] - 1.0).abs() < 1e-12, "{f:?}");
        assert_eq!(f[1], 0.0);
        assert_eq!(f[3], 0.0);

        let step: Vec<f32> = (0..64).map(|i| if i % 8 < 3 { -1.0 } else { 1.0 }).collect();
        let x = Tensor::from_vec(step, (1, 1, 8, 8), &Device::Cpu).unwrap();
        let f = band_energy_fractions(&x).unwrap();
        assert!(f[2] > 0.0);
        assert_eq!((f[1], f[3]), (0.0, 0.0));
    }

    #[test]
    fn grid_files_written() {
        let dir = tempfile::tempdir().unwrap();
        let x = Tensor::randn(0f32, 0.5, (3, 3, 16, 16), &Device::Cpu).unwrap();
        let meta = visualize_bands(&x, dir.path(), "grid").unwrap();
        let img = image::open(dir.path().join("grid.png")).unwrap();
        assert_eq!((img.width(), img.height()), (40, 24));
        let back: GridMeta = serde_json::from_str(&std::fs::read_to_string(dir.path().join("grid.json")).unwrap()).unwrap();
        assert_eq!(back, meta);
    }
}
