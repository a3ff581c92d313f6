//! Single-image inference: forward at the working resolution, resize the
//! fused probability map back to the source resolution, write a grayscale
//! PNG (soft map by default, 0/255 when a threshold is given).

use crate::data::{normalize_image, rgb_to_chw};
use crate::{Error, Result};
use nusg_core::blocks::Mode;
use nusg_core::model::Model;
use nusg_core::tensor::{Graph, Tensor};
use std::path::Path;

pub fn infer_to_png(
    model: &Model<f32>,
    image_path: &Path,
    out_path: &Path,
    size: usize,
    threshold: Option<f64>,
) -> Result<()> {
    let rgb = image::open(image_path)
        .map_err(|e| Error::Image {
            path: image_path.to_path_buf(),
            detail: e.to_string(),
        })?
        .to_rgb8();
    let (w0, h0) = rgb.dimensions();
    let (w0, h0) = (w0 as usize, h0 as usize);
    let mut img = rgb_to_chw(&rgb).resize_bilinear(size, size)?;
    normalize_image(&mut img);
    let x = Tensor::new(&[1, 3, size, size], img.into_data())?;
    let mut g = Graph::new();
    let xid = g.constant(x);
    let fwd = model.forward(&mut g, xid, Mode::Eval)?;
    let fused = g.tensor(fwd.outputs.fused).resize_bilinear(h0, w0)?;

    let bytes: Vec<u8> = match threshold {
        Some(t) => fused
            .data()
            .iter()
            .map(|&v| if v as f64 >= t { 255u8 } else { 0u8 })
            .collect(),
        None => fused
            .data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect(),
    };
    let png = image::GrayImage::from_raw(w0 as u32, h0 as u32, bytes)
        .expect("sized buffer");
    png.save_with_format(out_path, image::ImageFormat::Png)
        .map_err(|e| Error::Image {
            path: out_path.to_path_buf(),
            detail: e.to_string(),
        })
}
