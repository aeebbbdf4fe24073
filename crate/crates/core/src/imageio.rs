//! 8-bit image files: RGB PNG plus a binary PGM fallback for grayscale maps.

use std::fs;
use std::path::Path;

use image::{ImageBuffer, Rgb};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Saves `[3, H, W]` values in [0, 1] as an RGB PNG.
pub fn save_rgb_png(path: &Path, image: &Tensor) -> Result<()> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::shape("save_rgb_png", s, &[3, 0, 0]));
    }
    let (h, w) = (s[1], s[2]);
    let d = image.data();
    let buf = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let at = |c: usize| to_u8(d[(c * h + y as usize) * w + x as usize]);
        Rgb([at(0), at(1), at(2)])
    });
    buf.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Loads an RGB PNG as `[3, H, W]` in [0, 1].
pub fn load_rgb_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = p[c] as f32 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data)
}

/// Saves `[H, W]` values in [0, 1] as a binary PGM.
pub fn save_pgm(path: &Path, map: &Tensor) -> Result<()> {
    let s = map.shape();
    if s.len() != 2 {
        return Err(Error::shape("save_pgm", s, &[0, 0]));
    }
    let mut bytes = format!("P5\n{} {}\n255\n", s[1], s[0]).into_bytes();
    bytes.extend(map.data().iter().map(|&v| to_u8(v)));
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Rounds values to the nearest 8-bit level so PNG round trips are exact.
pub fn quantize(t: &mut Tensor) {
    for v in t.data_mut() {
        *v = to_u8(*v) as f32 / 255.0;
    }
}
