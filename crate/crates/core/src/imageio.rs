//! PNG persistence for grids, masks and visual overlays.

use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use crate::grid::{BinaryMask, Grid};
use crate::{Error, Result};

/// Quantizes to the 16-bit level grid so that PNG storage is lossless.
pub fn quantize16(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 65535.0).round() / 65535.0
}

fn parent_dirs(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    Ok(())
}

/// 16-bit grayscale PNG; values are clamped to `[0, 1]`.
pub fn write_gray16(path: &Path, grid: &Grid) -> Result<()> {
    parent_dirs(path)?;
    let (h, w) = grid.dims();
    let buf: Vec<u16> = grid
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(w as u32, h as u32, buf).expect("buffer matches dims");
    img.save(path).map_err(|e| Error::persistence(path, e))
}

pub fn read_gray16(path: &Path) -> Result<Grid> {
    let img = image::open(path).map_err(|e| Error::persistence(path, e))?.into_luma16();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f64 / 65535.0).collect();
    Ok(Grid::new(h as usize, w as usize, data))
}

/// 8-bit mask PNG with foreground = 255.
pub fn write_mask(path: &Path, mask: &BinaryMask) -> Result<()> {
    parent_dirs(path)?;
    let (h, w) = mask.dims();
    let buf = mask.data().iter().map(|&b| if b { 255u8 } else { 0 }).collect();
    let img = GrayImage::from_raw(w as u32, h as u32, buf).expect("buffer matches dims");
    img.save(path).map_err(|e| Error::persistence(path, e))
}

pub fn read_mask(path: &Path) -> Result<BinaryMask> {
    let img = image::open(path).map_err(|e| Error::persistence(path, e))?.into_luma8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v >= 128).collect();
    Ok(BinaryMask::new(h as usize, w as usize, data))
}

/// Heatmap of `map` alpha-blended over the grayscale `image`.
pub fn write_overlay(path: &Path, image: &Grid, map: &Grid, alpha: f64) -> Result<()> {
    parent_dirs(path)?;
    let (h, w) = image.dims();
    let mut img = RgbImage::new(w as u32, h as u32);
    for r in 0..h {
        for c in 0..w {
            let g = image.get(r, c).clamp(0.0, 1.0);
            let m = map.get(r, c).clamp(0.0, 1.0);
            let heat = jet(m);
            let a = alpha * m;
            let px = [0, 1, 2].map(|k| (((1.0 - a) * g + a * heat[k]) * 255.0).round() as u8);
            img.put_pixel(c as u32, r as u32, Rgb(px));
        }
    }
    img.save(path).map_err(|e| Error::persistence(path, e))
}

/// Blue-to-red colormap.
fn jet(v: f64) -> [f64; 3] {
    let f = |x: f64| (1.5 - (4.0 * v - x).abs()).clamp(0.0, 1.0);
    [f(3.0), f(2.0), f(1.0)]
}

pub fn write_rgb(path: &Path, width: usize, height: usize, pixels: Vec<u8>) -> Result<()> {
    parent_dirs(path)?;
    let img = RgbImage::from_raw(width as u32, height as u32, pixels).expect("buffer matches dims");
    img.save(path).map_err(|e| Error::persistence(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gray16_round_trip_is_exact_on_quantized_values() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let g = Grid::from_fn(5, 7, |r, c| quantize16((r * 7 + c) as f64 / 34.0));
        write_gray16(&p, &g).unwrap();
        assert_eq!(read_gray16(&p).unwrap(), g);
    }

    #[test]
    fn mask_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        let m = BinaryMask::from_fn(4, 6, |r, c| (r + c) % 3 == 0);
        write_mask(&p, &m).unwrap();
        assert_eq!(read_mask(&p).unwrap(), m);
    }
}
