use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::model::{averaged_attention, ModelConfig, ModelOutput};
use crate::synth::Sample;
use crate::tensor::Tensor;

const SCALE: u32 = 4;
const GAP: u32 = 4;
const TEXT_SCALE: u32 = 2;

/// Blue at 0 through green to red at 1.
pub fn colormap(t: f32) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0);
    let r = (1.5 - (4.0 * t - 3.0).abs()).clamp(0.0, 1.0);
    let g = (1.5 - (4.0 * t - 2.0).abs()).clamp(0.0, 1.0);
    let b = (1.5 - (4.0 * t - 1.0).abs()).clamp(0.0, 1.0);
    [(r * 255.0) as u8, (g * 255.0) as u8, (b * 255.0) as u8]
}

/// Grid cell whose window centre is nearest to pixel coordinate `v`.
fn nearest_cell(v: usize, patch: usize, stride: usize, cells: usize) -> usize {
    let c = (2 * v + 1) as f32 / 2.0 - patch as f32 / 2.0;
    ((c / stride as f32).round().max(0.0) as usize).min(cells - 1)
}

/// Head- and layer-averaged attention of part `p` upsampled to `[H, W]`.
pub fn attention_image(avg: &Tensor, p: usize, cfg: &ModelConfig) -> Tensor {
    let (nh, nw) = cfg.grid();
    let n = nh * nw;
    let row = &avg.data()[p * n..(p + 1) * n];
    Tensor::from_fn(&[cfg.image_h, cfg.image_w], |i| {
        let (y, x) = (i / cfg.image_w, i % cfg.image_w);
        let cy = nearest_cell(y, cfg.patch_size, cfg.stride, nh);
        let cx = nearest_cell(x, cfg.patch_size, cfg.stride, nw);
        row[cy * nw + cx]
    })
}

const GLYPHS: [(char, [u8; 5]); 11] = [
    ('0', [0b111, 0b101, 0b101, 0b101, 0b111]),
    ('1', [0b010, 0b110, 0b010, 0b010, 0b111]),
    ('2', [0b111, 0b001, 0b111, 0b100, 0b111]),
    ('3', [0b111, 0b001, 0b111, 0b001, 0b111]),
    ('4', [0b101, 0b101, 0b111, 0b001, 0b001]),
    ('5', [0b111, 0b100, 0b111, 0b001, 0b111]),
    ('6', [0b111, 0b100, 0b111, 0b101, 0b111]),
    ('7', [0b111, 0b001, 0b010, 0b010, 0b010]),
    ('8', [0b111, 0b101, 0b111, 0b101, 0b111]),
    ('9', [0b111, 0b101, 0b111, 0b001, 0b111]),
    ('.', [0b000, 0b000, 0b000, 0b000, 0b010]),
];

fn draw_text(img: &mut RgbImage, text: &str, x0: u32, y0: u32, color: Rgb<u8>) {
    let mut x = x0;
    for ch in text.chars() {
        if let Some((_, rows)) = GLYPHS.iter().find(|(c, _)| *c == ch) {
            for (r, bits) in rows.iter().enumerate() {
                for c in 0..3 {
                    if bits >> (2 - c) & 1 == 1 {
                        for dy in 0..TEXT_SCALE {
                            for dx in 0..TEXT_SCALE {
                                let (px, py) = (x + c * TEXT_SCALE + dx, y0 + r as u32 * TEXT_SCALE + dy);
                                if px < img.width() && py < img.height() {
                                    img.put_pixel(px, py, color);
                                }
                            }
                        }
                    }
                }
            }
        }
        x += 4 * TEXT_SCALE;
    }
}

fn border(img: &mut RgbImage, x0: u32, y0: u32, w: u32, h: u32, color: Rgb<u8>) {
    for t in 0..2 {
        for x in x0..x0 + w {
            img.put_pixel(x, y0 + t, color);
            img.put_pixel(x, y0 + h - 1 - t, color);
        }
        for y in y0..y0 + h {
            img.put_pixel(x0 + t, y, color);
            img.put_pixel(x0 + w - 1 - t, y, color);
        }
    }
}

/// Input image followed by one attention panel per part; each panel's
/// visibility score is printed beneath it, in red with a red frame when below
/// 0.5.
pub fn render_panel(sample: &Sample, out: &ModelOutput, cfg: &ModelConfig) -> Result<RgbImage> {
    let avg = averaged_attention(&out.ca_attn)?;
    let p = avg.shape()[0];
    let (h, w) = (cfg.image_h as u32, cfg.image_w as u32);
    let (ph, pw) = (h * SCALE, w * SCALE);
    let text_h = 5 * TEXT_SCALE + 2 * GAP;
    let width = (p as u32 + 1) * (pw + GAP) + GAP;
    let mut img = RgbImage::from_pixel(width, ph + 2 * GAP + text_h, Rgb([255, 255, 255]));
    let px = |c: usize, y: u32, x: u32| sample.image.at(&[c, y as usize, x as usize]);
    let blit = |img: &mut RgbImage, x0: u32, f: &dyn Fn(u32, u32) -> [u8; 3]| {
        for y in 0..ph {
            for x in 0..pw {
                img.put_pixel(x0 + x, GAP + y, Rgb(f(y / SCALE, x / SCALE)));
            }
        }
    };
    blit(&mut img, GAP, &|y, x| std::array::from_fn(|c| (px(c, y, x) * 255.0).round() as u8));
    for q in 0..p {
        let map = attention_image(&avg, q, cfg);
        let peak = map.data().iter().copied().fold(f32::MIN_POSITIVE, f32::max);
        let x0 = GAP + (q as u32 + 1) * (pw + GAP);
        blit(&mut img, x0, &|y, x| {
            let heat = colormap(map.at(&[y as usize, x as usize]) / peak);
            let lum = 0.299 * px(0, y, x) + 0.587 * px(1, y, x) + 0.114 * px(2, y, x);
            std::array::from_fn(|c| (0.7 * heat[c] as f32 + 0.3 * lum * 255.0).round() as u8)
        });
        let v = out.visibility.data()[q];
        let occluded = v < 0.5;
        let color = if occluded { Rgb([220, 0, 0]) } else { Rgb([0, 0, 0]) };
        if occluded {
            border(&mut img, x0, GAP, pw, ph, color);
        }
        draw_text(&mut img, &format!("{v:.2}"), x0 + 2, ph + 2 * GAP, color);
    }
    Ok(img)
}

pub fn save_panel(path: &Path, img: &RgbImage) -> Result<()> {
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Renders samples `ids` of `split` into `dir`, one PNG each.
pub fn visualize_samples(
    dir: &Path,
    split: &str,
    samples: &[Sample],
    outputs: &[ModelOutput],
    ids: &[usize],
    cfg: &ModelConfig,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    ids.iter()
        .zip(outputs)
        .map(|(&i, out)| {
            let path = dir.join(format!("{split}_{i:05}.png"));
            save_panel(&path, &render_panel(&samples[i], out, cfg)?)?;
            Ok(path)
        })
        .collect()
}
