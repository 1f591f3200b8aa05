//! 8-bit sRGB PNG input/output. Byte `b` maps to `b / 255.0`; saving clamps
//! to [0, 1] and rounds, so `save(load(x))` re-encodes the identical pixel
//! bytes. Higher bit depths are rejected with a structured error.

use std::path::Path;

use image::{DynamicImage, ImageBuffer, Rgb};

use crate::error::{Error, Result};
use crate::model::Image;
use crate::tensor::Plane;

pub fn load_png(path: &Path) -> Result<Image> {
    let dynimg = image::open(path)?;
    let rgb = match dynimg {
        DynamicImage::ImageRgb8(img) => img,
        DynamicImage::ImageRgba8(img) => DynamicImage::ImageRgba8(img).to_rgb8(),
        DynamicImage::ImageLuma8(img) => DynamicImage::ImageLuma8(img).to_rgb8(),
        DynamicImage::ImageLumaA8(img) => DynamicImage::ImageLumaA8(img).to_rgb8(),
        DynamicImage::ImageRgb16(_)
        | DynamicImage::ImageRgba16(_)
        | DynamicImage::ImageLuma16(_)
        | DynamicImage::ImageLumaA16(_) => {
            return Err(Error::UnsupportedFormat(format!(
                "16-bit PNG not supported: {}",
                path.display()
            )))
        }
        other => {
            return Err(Error::UnsupportedFormat(format!(
                "unsupported pixel format {:?}: {}",
                other.color(),
                path.display()
            )))
        }
    };
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    if w == 0 || h == 0 {
        return Err(Error::UnsupportedFormat(format!("empty image: {}", path.display())));
    }
    let mut planes = [Plane::zeros(h, w), Plane::zeros(h, w), Plane::zeros(h, w)];
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..3 {
            planes[c].set(y as usize, x as usize, px.0[c] as f64 / 255.0);
        }
    }
    Image::new(planes)
}

pub fn save_png(path: &Path, img: &Image) -> Result<()> {
    let (h, w) = img.shape();
    let mut buf: ImageBuffer<Rgb<u8>, Vec<u8>> = ImageBuffer::new(w as u32, h as u32);
    for (x, y, px) in buf.enumerate_pixels_mut() {
        for c in 0..3 {
            let v = img.plane(c).at(y as usize, x as usize);
            px.0[c] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    buf.save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn roundtrip_is_byte_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        // start from quantized values so the first save is lossless
        let img = Image::new(std::array::from_fn(|_| {
            Plane::from_fn(7, 5, |_, _| rng.random_range(0..=255u32) as f64 / 255.0)
        }))
        .unwrap();
        save_png(&path, &img).unwrap();
        let loaded = load_png(&path).unwrap();
        let path2 = dir.path().join("img2.png");
        save_png(&path2, &loaded).unwrap();
        // decoded pixel bytes identical
        let a = image::open(&path).unwrap().to_rgb8();
        let b = image::open(&path2).unwrap().to_rgb8();
        assert_eq!(a.as_raw(), b.as_raw());
        // value 1.0 saves as byte 255
        assert!(loaded.plane(0).data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn full_white_is_byte_255() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("white.png");
        save_png(&path, &Image::constant(2, 2, 1.0)).unwrap();
        let raw = image::open(&path).unwrap().to_rgb8();
        assert!(raw.as_raw().iter().all(|&b| b == 255));
    }

    #[test]
    fn sixteen_bit_png_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("deep.png");
        let img16: ImageBuffer<image::Luma<u16>, Vec<u16>> =
            ImageBuffer::from_fn(4, 4, |x, y| image::Luma([(x * 1000 + y) as u16]));
        img16.save(&path).unwrap();
        match load_png(&path) {
            Err(Error::UnsupportedFormat(msg)) => assert!(msg.contains("16-bit")),
            other => panic!("expected UnsupportedFormat, got {other:?}"),
        }
    }
}
