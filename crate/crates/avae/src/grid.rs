//! Tiling image batches into a single PNG: samples, reconstructions and
//! interpolation strips all leave the program through here.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Maps a normalized value to its 8-bit code. Exact inverse of `b / 255`
/// for every byte `b`, so lattice values survive a write/read cycle.
pub fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Tiles `[B,C,H,W]` images row-major into an ⌈B/columns⌉×columns grid and
/// writes a PNG. Cells past the last image stay black.
pub fn save_image_grid(images: &Tensor<f32>, columns: usize, path: &Path) -> Result<()> {
    let shape = images.shape();
    if shape.len() != 4 {
        return Err(Error::Dimension(format!("image grid wants [B,C,H,W], got {shape:?}")));
    }
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if c != 1 && c != 3 {
        return Err(Error::Dimension(format!("image grid supports 1 or 3 channels, got {c}")));
    }
    if columns == 0 {
        return Err(Error::Usage("image grid needs at least one column".into()));
    }
    let rows = b.div_ceil(columns);
    let (gh, gw) = (rows * h, columns * w);

    let data = images.data();
    let per_image = c * h * w;
    let mut canvas = vec![0u8; gh * gw * c];
    for i in 0..b {
        let (row, col) = (i / columns, i % columns);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let v = data[i * per_image + ch * h * w + y * w + x];
                    let gx = col * w + x;
                    let gy = row * h + y;
                    canvas[(gy * gw + gx) * c + ch] = to_byte(v);
                }
            }
        }
    }

    let ok = match c {
        1 => image::GrayImage::from_raw(gw as u32, gh as u32, canvas)
            .expect("canvas matches dimensions")
            .save(path),
        _ => image::RgbImage::from_raw(gw as u32, gh as u32, canvas)
            .expect("canvas matches dimensions")
            .save(path),
    };
    ok.map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Reads a PNG back into a normalized `[1,C,H,W]` tensor (test and tooling
/// helper; the training loader lives in the dataset module).
pub fn load_image(path: &Path, channels: usize) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = Vec::with_capacity(channels * h * w);
    match channels {
        1 => {
            let gray = img.to_luma8();
            data.extend(gray.pixels().map(|p| p.0[0] as f32 / 255.0));
        }
        3 => {
            let rgb = img.to_rgb8();
            for ch in 0..3 {
                data.extend(rgb.pixels().map(|p| p.0[ch] as f32 / 255.0));
            }
        }
        n => return Err(Error::Usage(format!("unsupported channel count {n}"))),
    }
    Tensor::new(vec![1, channels, h, w], data)
}
