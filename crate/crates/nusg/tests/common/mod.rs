//! Synthetic datasets for the integration and acceptance tests.

#![allow(dead_code)]

use std::path::{Path, PathBuf};

/// Deterministic xorshift so fixtures never depend on crate RNGs.
pub struct TinyRng(u64);

impl TinyRng {
    pub fn new(seed: u64) -> Self {
        Self(seed.max(1))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0 ^= self.0 << 13;
        self.0 ^= self.0 >> 7;
        self.0 ^= self.0 << 17;
        self.0
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }
}

/// A bright elliptical "eye" region over a textured dark background, with
/// its exact mask. Distinct geometry per index.
pub fn eye_pair(index: usize, w: u32, h: u32) -> (image::RgbImage, image::GrayImage) {
    let mut rng = TinyRng::new(0xabcd + index as u64 * 7919);
    let (cw, ch) = (w as f64 / 2.0, h as f64 / 2.0);
    let cx = cw + (rng.uniform() - 0.5) * w as f64 * 0.2;
    let cy = ch + (rng.uniform() - 0.5) * h as f64 * 0.2;
    let rx = w as f64 * (0.28 + 0.08 * rng.uniform());
    let ry = h as f64 * (0.20 + 0.08 * rng.uniform());
    let mut img = image::RgbImage::new(w, h);
    let mut mask = image::GrayImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let dx = (x as f64 - cx) / rx;
            let dy = (y as f64 - cy) / ry;
            let inside = dx * dx + dy * dy <= 1.0;
            let noise = (rng.uniform() * 24.0) as u8;
            if inside {
                img.put_pixel(x, y, image::Rgb([200 + noise / 4, 180 + noise / 4, 170]));
                mask.put_pixel(x, y, image::Luma([255]));
            } else {
                let base = 40 + ((x + 2 * y) % 31) as u8;
                img.put_pixel(x, y, image::Rgb([base + noise, base / 2 + noise, base / 3]));
                mask.put_pixel(x, y, image::Luma([0]));
            }
        }
    }
    (img, mask)
}

/// Write `n` image/mask pairs under root/images and root/masks.
pub fn write_eye_dataset(root: &Path, n: usize, w: u32, h: u32) -> Vec<String> {
    std::fs::create_dir_all(root.join("images")).unwrap();
    std::fs::create_dir_all(root.join("masks")).unwrap();
    let mut stems = Vec::new();
    for i in 0..n {
        let stem = format!("eye{i:04}");
        let (img, mask) = eye_pair(i, w, h);
        img.save(root.join("images").join(format!("{stem}.png"))).unwrap();
        mask.save(root.join("masks").join(format!("{stem}.png"))).unwrap();
        stems.push(stem);
    }
    stems
}

/// A tree of `n` matched stems with zero-byte files: enough for discovery
/// and split arithmetic, which never decode pixels.
pub fn write_stub_dataset(root: &Path, n: usize) -> PathBuf {
    std::fs::create_dir_all(root.join("images")).unwrap();
    std::fs::create_dir_all(root.join("masks")).unwrap();
    for i in 0..n {
        let stem = format!("s{i:05}");
        std::fs::write(root.join("images").join(format!("{stem}.png")), b"").unwrap();
        std::fs::write(root.join("masks").join(format!("{stem}.png")), b"").unwrap();
    }
    root.to_path_buf()
}

pub fn write_gray_png(path: &Path, w: u32, h: u32, bytes: &[u8]) {
    image::GrayImage::from_raw(w, h, bytes.to_vec())
        .unwrap()
        .save(path)
        .unwrap();
}
