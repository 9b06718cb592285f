//! PNG persistence and pixel-range conversions.
//!
//! Images live in `[0, 1]` (C, H, W) tensors; the denoiser works in `[-1, 1]`.

use std::path::Path;

use candle_core::{Device, Tensor};
use image::{ImageBuffer, Luma, Rgb, RgbImage};

use crate::error::{bail_arg, LabError, Result};

pub fn to_model_space(img: &Tensor) -> Result<Tensor> {
    Ok(img.affine(2.0, -1.0)?)
}

pub fn to_unit_range(x: &Tensor) -> Result<Tensor> {
    Ok(x.affine(0.5, 0.5)?.clamp(0f32, 1f32)?)
}

/// Rounds to the 8-bit grid so PNG round trips are lossless.
pub fn quantize_u8(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

pub fn save_rgb_png(img: &Tensor, path: &Path) -> Result<()> {
    let (c, h, w) = img.dims3()?;
    if c != 3 {
        bail_arg!("expected 3 channels, got {c}");
    }
    let data = img.flatten_all()?.to_vec1::<f32>()?;
    let buf: RgbImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        let px = |ch: usize| (data[ch * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([px(0), px(1), px(2)])
    });
    ensure_parent(path)?;
    buf.save(path)?;
    Ok(())
}

pub fn load_rgb_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0f32; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        for ch in 0..3 {
            data[ch * h * w + i] = px.0[ch] as f32 / 255.0;
        }
    }
    Ok(Tensor::from_vec(data, (3, h, w), &Device::Cpu)?)
}

/// 16-bit grayscale PNG of a `[0, 1]` map stored row-major.
pub fn save_gray16_png(values: &[f32], h: usize, w: usize, path: &Path) -> Result<()> {
    if values.len() != h * w {
        bail_arg!("mask has {} values, expected {}", values.len(), h * w);
    }
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let v = values[y as usize * w + x as usize].clamp(0.0, 1.0);
        Luma([(v * 65535.0).round() as u16])
    });
    ensure_parent(path)?;
    buf.save(path)?;
    Ok(())
}

pub fn load_gray16_png(path: &Path) -> Result<(Vec<f32>, usize, usize)> {
    let img = image::open(path)?.to_luma16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let values = img.pixels().map(|p| p.0[0] as f32 / 65535.0).collect();
    Ok((values, h, w))
}

/// Horizontal strip of equally sized `[0, 1]` images, separated by a 1px gap.
pub fn save_grid_png(rows: &[Vec<Tensor>], path: &Path) -> Result<()> {
    let first = rows
        .iter()
        .flat_map(|r| r.iter())
        .next()
        .ok_or_else(|| LabError::InvalidArgument("empty grid".into()))?;
    let (_, h, w) = first.dims3()?;
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let gw = cols * (w + 1);
    let gh = rows.len() * (h + 1);
    let mut canvas: RgbImage = ImageBuffer::from_pixel(gw as u32, gh as u32, Rgb([255, 255, 255]));
    for (ri, row) in rows.iter().enumerate() {
        for (ci, img) in row.iter().enumerate() {
            let d = img.flatten_all()?.to_vec1::<f32>()?;
            let (c, ih, iw) = img.dims3()?;
            if (ih, iw) != (h, w) {
                bail_arg!("grid images must share a size");
            }
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    let px = |ch: usize| {
                        let ch = if c == 1 { 0 } else { ch };
                        (d[ch * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8
                    };
                    canvas.put_pixel(
                        (ci * (w + 1) + x) as u32,
                        (ri * (h + 1) + y) as u32,
                        Rgb([px(0), px(1), px(2)]),
                    );
                }
            }
        }
    }
    ensure_parent(path)?;
    canvas.save(path)?;
    Ok(())
}

pub(crate) fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_roundtrip_is_lossless_on_u8_grid() {
        let dir = tempfile::tempdir().unwrap();
        let vals: Vec<f32> = (0..3 * 4 * 5).map(|i| quantize_u8(i as f32 / 60.0)).collect();
        let t = Tensor::from_vec(vals.clone(), (3, 4, 5), &Device::Cpu).unwrap();
        let p = dir.path().join("x.png");
        save_rgb_png(&t, &p).unwrap();
        let back = load_rgb_png(&p).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(back, vals);
    }

    #[test]
    fn gray16_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let vals = vec![0.0, 0.25, 0.5, 1.0];
        let p = dir.path().join("m.png");
        save_gray16_png(&vals, 2, 2, &p).unwrap();
        let (back, h, w) = load_gray16_png(&p).unwrap();
        assert_eq!((h, w), (2, 2));
        for (a, b) in back.iter().zip(&vals) {
            assert!((a - b).abs() < 1e-4);
        }
    }
}
