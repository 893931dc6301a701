//! Frame strips with trajectory overlays: ground truth in red, generated in blue.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{CovarError, Result};
use crate::tensor::Tensor;
use crate::toyworld::Resolution;

pub const GT_COLOR: [u8; 3] = [220, 30, 30];
pub const GEN_COLOR: [u8; 3] = [30, 60, 230];

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn draw_line(img: &mut RgbImage, x0: f32, y0: f32, x1: f32, y1: f32, color: [u8; 3], x_off: u32, tile_w: u32) {
    let n = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
    for i in 0..=n {
        let f = i as f32 / n as f32;
        let (x, y) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        if x < 0.0 || y < 0.0 || x >= tile_w as f32 || y >= img.height() as f32 {
            continue;
        }
        img.put_pixel(x_off + x as u32, y as u32, Rgb(color));
    }
}

/// Horizontally concatenated `T×3×H×W` frames, each upscaled by `scale`,
/// with the `(x, y)` action paths drawn on every tile.
pub fn frame_strip(
    video: &Tensor<f32>,
    gt_actions: Option<&Tensor<f32>>,
    gen_actions: &Tensor<f32>,
    scale: u32,
) -> Result<RgbImage> {
    let s = video.shape();
    if s.len() != 4 || s[1] != 3 {
        return Err(CovarError::Shape(format!("{s:?} is not T×3×H×W")));
    }
    let (t, h, w) = (s[0], s[2], s[3]);
    let scale = scale.max(1);
    let (tw, th) = (w as u32 * scale, h as u32 * scale);
    let mut img = RgbImage::new(tw * t as u32, th);
    let res = Resolution { height: h, width: w };
    for f in 0..t {
        let frame = video.index0_slice(f);
        for y in 0..th {
            for x in 0..tw {
                let (sy, sx) = ((y / scale) as usize, (x / scale) as usize);
                let px = |c: usize| to_u8(frame[c * h * w + sy * w + sx]);
                img.put_pixel(f as u32 * tw + x, y, Rgb([px(0), px(1), px(2)]));
            }
        }
        for (actions, color) in gt_actions.map(|a| (a, GT_COLOR)).into_iter().chain([(gen_actions, GEN_COLOR)]) {
            let pts: Vec<(f32, f32)> = actions
                .data()
                .chunks(actions.shape()[1])
                .map(|r| {
                    let (cx, cy) = res.to_pixel([r[0], r[1]]);
                    (cx * scale as f32, cy * scale as f32)
                })
                .collect();
            for seg in pts.windows(2) {
                draw_line(&mut img, seg[0].0, seg[0].1, seg[1].0, seg[1].1, color, f as u32 * tw, tw);
            }
        }
    }
    Ok(img)
}

pub fn save_strip(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strip_layout_and_overlay() {
        let video = Tensor::full([3, 3, 8, 8], 0.5f32);
        let gt = Tensor::new(vec![3, 3], vec![-0.5, -0.5, 0.0, 0.5, -0.5, 0.0, 0.5, 0.5, 0.0]).unwrap();
        let img = frame_strip(&video, Some(&gt), &gt.map(|v| -v), 2).unwrap();
        assert_eq!(img.dimensions(), (48, 16));
        let has = |c: [u8; 3]| img.pixels().any(|p| p.0 == c);
        assert!(has(GT_COLOR) && has(GEN_COLOR));
        assert_eq!(img.get_pixel(0, 0).0, [128, 128, 128]);
    }
}
