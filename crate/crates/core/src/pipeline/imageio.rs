use std::path::Path;

use image::{ImageBuffer, Rgb};

use crate::datamodel::Image;
use crate::error::{Error, Result};

/// File extensions recognised as images.
pub const IMAGE_EXTENSIONS: &[&str] = &["png", "bmp"];

/// Reads an RGB image; the id is the file stem.
pub fn load_image(path: &Path) -> Result<Image> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "image file not found"),
        ));
    }
    let rgb = image::open(path)?.to_rgb32f();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut px = vec![0f32; 3 * h * w];
    for (x, y, p) in rgb.enumerate_pixels() {
        for c in 0..3 {
            px[(c * h + y as usize) * w + x as usize] = p[c].clamp(0.0, 1.0);
        }
    }
    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Image::new(id, h, w, px)
}

/// Writes an 8-bit RGB image; the format follows the extension.
pub fn save_image(image: &Image, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let (h, w) = (image.height(), image.width());
    let buf: ImageBuffer<Rgb<u8>, Vec<u8>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let q = |c| (image.get(c, y as usize, x as usize) * 255.0).round() as u8;
        Rgb([q(0), q(1), q(2)])
    });
    buf.save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_exact_on_8_bit_values() {
        let px: Vec<f32> = (0..3 * 16 * 20).map(|i| (i % 256) as f32 / 255.0).collect();
        let img = Image::new("x", 16, 20, px).unwrap();
        let dir = tempfile::tempdir().unwrap();
        for ext in IMAGE_EXTENSIONS {
            let path = dir.path().join(format!("x.{ext}"));
            save_image(&img, &path).unwrap();
            let back = load_image(&path).unwrap();
            assert_eq!(back.id(), "x");
            assert_eq!(back.dims(), img.dims());
            for (a, b) in back.pixels().iter().zip(img.pixels()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
        assert!(matches!(load_image(&dir.path().join("nope.png")), Err(Error::Io { .. })));
    }
}
