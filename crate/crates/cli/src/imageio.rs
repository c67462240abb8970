use std::path::Path;

use anyhow::{bail, Context, Result};
use image::{GrayImage, ImageBuffer, Luma, Rgb};
use ndarray::{Array3, ArrayView2, ArrayView3};

/// Reads an image as a channel-first RGB array scaled to [0, 1].
pub fn read_image(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path).with_context(|| format!("cannot read image {}", path.display()))?.into_rgb32f();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
        f64::from(img.get_pixel(x as u32, y as u32)[c])
    }))
}

/// Writes a 3-channel image as 16-bit RGB, clamping to [0, 1].
pub fn write_rgb16(path: &Path, img: &ArrayView3<f64>) -> Result<()> {
    let (c, h, w) = img.dim();
    if c != 3 {
        bail!("expected 3 channels, got {c}");
    }
    let buf: ImageBuffer<Rgb<u16>, Vec<u16>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let px = |ch: usize| (img[[ch, y as usize, x as usize]].clamp(0.0, 1.0) * 65535.0).round() as u16;
        Rgb([px(0), px(1), px(2)])
    });
    buf.save(path).with_context(|| format!("cannot write {}", path.display()))
}

/// Writes a [0, 1] map as 8-bit grayscale.
pub fn write_gray8(path: &Path, map: &ArrayView2<f64>) -> Result<()> {
    let (h, w) = map.dim();
    let buf: GrayImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        Luma([(map[[y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8])
    });
    buf.save(path).with_context(|| format!("cannot write {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rgb16_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let img = Array3::from_shape_fn((3, 5, 7), |(c, y, x)| (c * 35 + y * 7 + x) as f64 / 105.0);
        write_rgb16(&path, &img.view()).unwrap();
        let back = read_image(&path).unwrap();
        assert_eq!(back.dim(), (3, 5, 7));
        let worst = (&back - &img).iter().fold(0.0f64, |m, d| m.max(d.abs()));
        assert!(worst <= 0.5 / 65535.0 + 1e-7, "{worst}");
    }

    #[test]
    fn gray8_clamps_and_rounds() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.png");
        let map = ndarray::array![[0.0, 0.5, 1.0], [-1.0, 2.0, 0.1]];
        write_gray8(&path, &map.view()).unwrap();
        let back = image::open(&path).unwrap().into_luma8();
        let raw: Vec<u8> = back.pixels().map(|p| p[0]).collect();
        assert_eq!(raw, vec![0, 128, 255, 0, 255, 26]);
    }

    #[test]
    fn unreadable_image_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.png");
        std::fs::write(&path, b"not a png").unwrap();
        assert!(read_image(&path).is_err());
        assert!(read_image(&dir.path().join("missing.png")).is_err());
    }
}
