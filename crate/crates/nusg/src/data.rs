//! Dataset discovery, deterministic splitting, sample loading and
//! mask-consistent augmentation.
//!
//! Layout on disk: `root/images/*.{png,jpg,jpeg}` with matching-stem masks
//! in `root/masks/*.png`. Images resize bilinearly, masks by nearest
//! neighbour (then re-binarized), so labels never go fractional.

use crate::{Error, Result};
use nusg_core::rng::mix_seed;
use nusg_core::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// Fixed channel normalization applied after the [0,1] scaling; keeping the
/// constants independent of the dataset keeps checkpoints portable.
pub const CHANNEL_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const CHANNEL_STD: [f32; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleRecord {
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
    pub stem: String,
}

fn stem_of(p: &Path) -> Option<String> {
    p.file_stem().map(|s| s.to_string_lossy().into_owned())
}

fn list_dir(dir: &Path, exts: &[&str]) -> Result<BTreeMap<String, PathBuf>> {
    let mut out: BTreeMap<String, PathBuf> = BTreeMap::new();
    let entries = std::fs::read_dir(dir).map_err(Error::io(dir))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .map(|e| exts.contains(&e.to_string_lossy().to_lowercase().as_str()))
                .unwrap_or(false)
        })
        .collect();
    paths.sort();
    for p in paths {
        if let Some(stem) = stem_of(&p) {
            out.entry(stem).or_insert(p);
        }
    }
    Ok(out)
}

/// Discover image/mask pairs under `root`. Returns the matched records
/// sorted by stem plus the paths of unmatched files (warning manifest).
pub fn scan_dataset(root: &Path) -> Result<(Vec<SampleRecord>, Vec<PathBuf>)> {
    let images = list_dir(&root.join("images"), &["png", "jpg", "jpeg"])?;
    let masks = list_dir(&root.join("masks"), &["png"])?;
    let mut records = Vec::new();
    let mut warnings = Vec::new();
    for (stem, image_path) in &images {
        match masks.get(stem) {
            Some(mask_path) => records.push(SampleRecord {
                image_path: image_path.clone(),
                mask_path: mask_path.clone(),
                stem: stem.clone(),
            }),
            None => warnings.push(image_path.clone()),
        }
    }
    for (stem, mask_path) in &masks {
        if !images.contains_key(stem) {
            warnings.push(mask_path.clone());
        }
    }
    if records.is_empty() {
        return Err(Error::Data(format!(
            "no image/mask pairs found under {}",
            root.display()
        )));
    }
    Ok((records, warnings))
}

/// One unmatched path per line.
pub fn write_warning_manifest(path: &Path, warnings: &[PathBuf]) -> Result<()> {
    let mut text = String::new();
    for w in warnings {
        text.push_str(&w.display().to_string());
        text.push('\n');
    }
    std::fs::write(path, text).map_err(Error::io(path))
}

/// Seeded shuffle followed by a prefix split; |train| = round(fraction*N),
/// clamped so both halves stay non-empty.
pub fn split(
    records: &[SampleRecord],
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<SampleRecord>, Vec<SampleRecord>)> {
    if records.len() < 2 {
        return Err(Error::Data(format!(
            "need at least 2 records to split, got {}",
            records.len()
        )));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Data(format!(
            "train fraction {train_fraction} outside (0, 1)"
        )));
    }
    let mut shuffled: Vec<SampleRecord> = records.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shuffled.shuffle(&mut rng);
    let n = shuffled.len();
    let n_train = ((train_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let test = shuffled.split_off(n_train);
    Ok((shuffled, test))
}

fn decode(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

pub fn rgb_to_chw(img: &image::RgbImage) -> Tensor<f32> {
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut data = vec![0f32; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        let (x, y) = (x as usize, y as usize);
        for c in 0..3 {
            data[c * h * w + y * w + x] = px.0[c] as f32 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data).expect("sized buffer")
}

fn nearest_index_table(in_dim: usize, out_dim: usize) -> Vec<usize> {
    let scale = in_dim as f64 / out_dim as f64;
    (0..out_dim)
        .map(|o| (((o as f64 + 0.5) * scale).floor() as usize).min(in_dim - 1))
        .collect()
}

fn nearest_resize_gray(img: &image::GrayImage, out_h: usize, out_w: usize) -> Vec<u8> {
    let (w, h) = img.dimensions();
    let ys = nearest_index_table(h as usize, out_h);
    let xs = nearest_index_table(w as usize, out_w);
    let mut out = Vec::with_capacity(out_h * out_w);
    for &y in &ys {
        for &x in &xs {
            out.push(img.get_pixel(x as u32, y as u32).0[0]);
        }
    }
    out
}

/// Binarize at gray value 128: 128..=255 is foreground.
fn binarize(gray: &[u8]) -> Vec<f32> {
    gray.iter().map(|&v| if v >= 128 { 1.0 } else { 0.0 }).collect()
}

/// Load, resize and normalize one pair: the image becomes 3×H×W
/// (bilinear, [0,1], then channel-normalized), the mask 1×H×W in {0, 1}
/// (nearest neighbour, binarized at gray 128).
pub fn load_sample(record: &SampleRecord, size: (usize, usize)) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let (h, w) = size;
    let rgb = decode(&record.image_path)?.to_rgb8();
    let mut img = rgb_to_chw(&rgb).resize_bilinear(h, w)?;
    normalize_image(&mut img);
    let gray = decode(&record.mask_path)?.to_luma8();
    let mask = Tensor::new(&[1, h, w], binarize(&nearest_resize_gray(&gray, h, w)))?;
    Ok((img, mask))
}

pub fn normalize_image(img: &mut Tensor<f32>) {
    let [c, h, w] = img.shape()[..] else { panic!("CHW") };
    assert_eq!(c, 3);
    let data = img.data_mut();
    for ch in 0..3 {
        let (m, s) = (CHANNEL_MEAN[ch], CHANNEL_STD[ch]);
        for v in &mut data[ch * h * w..(ch + 1) * h * w] {
            *v = (*v - m) / s;
        }
    }
}

/// Binary mask at its native resolution (bypass-mode ground truth).
pub fn load_mask_native(path: &Path) -> Result<Tensor<f32>> {
    let gray = decode(path)?.to_luma8();
    let (w, h) = gray.dimensions();
    Ok(Tensor::new(
        &[1, h as usize, w as usize],
        binarize(gray.as_raw()),
    )?)
}

/// Grayscale probability map: 0..255 mapped to [0, 1].
pub fn load_gray_prob(path: &Path) -> Result<Tensor<f32>> {
    let gray = decode(path)?.to_luma8();
    let (w, h) = gray.dimensions();
    let data: Vec<f32> = gray.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
    Ok(Tensor::new(&[1, h as usize, w as usize], data)?)
}

/// Augmentation knobs; a probability of 0 disables a transform. Zoom is
/// zoom-in only (scale >= 1) followed by a center crop back to size.
#[derive(Debug, Clone, Copy)]
pub struct AugmentPolicy {
    pub hflip_p: f64,
    pub vflip_p: f64,
    pub zoom_p: f64,
    pub zoom_max: f64,
    pub rotate_p: f64,
    /// Rotation is drawn uniformly from [-rotate_deg, +rotate_deg].
    pub rotate_deg: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            hflip_p: 0.5,
            vflip_p: 0.5,
            zoom_p: 0.5,
            zoom_max: 1.3,
            rotate_p: 0.5,
            rotate_deg: 15.0,
        }
    }
}

impl AugmentPolicy {
    pub fn disabled() -> Self {
        Self {
            hflip_p: 0.0,
            vflip_p: 0.0,
            zoom_p: 0.0,
            zoom_max: 1.0,
            rotate_p: 0.0,
            rotate_deg: 0.0,
        }
    }
}

/// RNG stream for one augmented sample; (seed, epoch, index) fully
/// determines the bytes no matter which worker runs it.
pub fn sample_rng(seed: u64, epoch: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(seed, epoch, index))
}

pub fn flip_horizontal(t: &Tensor<f32>) -> Tensor<f32> {
    let [c, h, w] = t.shape()[..] else { panic!("CHW") };
    let src = t.data();
    let mut out = vec![0f32; src.len()];
    for ch in 0..c {
        for y in 0..h {
            let base = (ch * h + y) * w;
            for x in 0..w {
                out[base + x] = src[base + (w - 1 - x)];
            }
        }
    }
    Tensor::new(&[c, h, w], out).expect("same size")
}

pub fn flip_vertical(t: &Tensor<f32>) -> Tensor<f32> {
    let [c, h, w] = t.shape()[..] else { panic!("CHW") };
    let src = t.data();
    let mut out = vec![0f32; src.len()];
    for ch in 0..c {
        for y in 0..h {
            let dst = (ch * h + y) * w;
            let from = (ch * h + (h - 1 - y)) * w;
            out[dst..dst + w].copy_from_slice(&src[from..from + w]);
        }
    }
    Tensor::new(&[c, h, w], out).expect("same size")
}

fn center_crop(t: &Tensor<f32>, out_h: usize, out_w: usize) -> Tensor<f32> {
    let [c, h, w] = t.shape()[..] else { panic!("CHW") };
    let (oy, ox) = ((h - out_h) / 2, (w - out_w) / 2);
    let src = t.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        for y in 0..out_h {
            let base = (ch * h + oy + y) * w + ox;
            out.extend_from_slice(&src[base..base + out_w]);
        }
    }
    Tensor::new(&[c, out_h, out_w], out).expect("sized")
}

fn nearest_resize_tensor(t: &Tensor<f32>, out_h: usize, out_w: usize) -> Tensor<f32> {
    let [c, h, w] = t.shape()[..] else { panic!("CHW") };
    let ys = nearest_index_table(h, out_h);
    let xs = nearest_index_table(w, out_w);
    let src = t.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        for &y in &ys {
            for &x in &xs {
                out.push(src[(ch * h + y) * w + x]);
            }
        }
    }
    Tensor::new(&[c, out_h, out_w], out).expect("sized")
}

/// Rotate counterclockwise by `radians`; bilinear sampling with coordinates
/// clamped to the image (edge fill).
fn rotate_bilinear(t: &Tensor<f32>, radians: f64) -> Tensor<f32> {
    let [c, h, w] = t.shape()[..] else { panic!("CHW") };
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = (-radians).sin_cos();
    let src = t.data();
    let mut out = vec![0f32; src.len()];
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            let sy = (cos * dy - sin * dx + cy).clamp(0.0, (h - 1) as f64);
            let sx = (sin * dy + cos * dx + cx).clamp(0.0, (w - 1) as f64);
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (fy, fx) = ((sy - y0 as f64) as f32, (sx - x0 as f64) as f32);
            for ch in 0..c {
                let p = |yy: usize, xx: usize| src[(ch * h + yy) * w + xx];
                let top = (1.0 - fx) * p(y0, x0) + fx * p(y0, x1);
                let bot = (1.0 - fx) * p(y1, x0) + fx * p(y1, x1);
                out[(ch * h + y) * w + x] = (1.0 - fy) * top + fy * bot;
            }
        }
    }
    Tensor::new(&[c, h, w], out).expect("same size")
}

/// Rotate a mask with nearest sampling; out-of-frame pixels become 0.
fn rotate_nearest_zero(t: &Tensor<f32>, radians: f64) -> Tensor<f32> {
    let [c, h, w] = t.shape()[..] else { panic!("CHW") };
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = (-radians).sin_cos();
    let src = t.data();
    let mut out = vec![0f32; src.len()];
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            let sy = (cos * dy - sin * dx + cy).round();
            let sx = (sin * dy + cos * dx + cx).round();
            if sy < 0.0 || sy >= h as f64 || sx < 0.0 || sx >= w as f64 {
                continue;
            }
            for ch in 0..c {
                out[(ch * h + y) * w + x] = src[(ch * h + sy as usize) * w + sx as usize];
            }
        }
    }
    Tensor::new(&[c, h, w], out).expect("same size")
}

fn rebinarize(mask: &mut Tensor<f32>) {
    for v in mask.data_mut() {
        *v = if *v >= 0.5 { 1.0 } else { 0.0 };
    }
}

/// Apply the enabled transforms in a fixed order (mirror, vertical flip,
/// zoom-in + center crop, rotate), each with its probability, the same
/// geometry applied to the image (bilinear) and the mask (nearest,
/// re-binarized). Shapes never change.
pub fn augment(
    image: &Tensor<f32>,
    mask: &Tensor<f32>,
    policy: &AugmentPolicy,
    rng: &mut ChaCha8Rng,
) -> (Tensor<f32>, Tensor<f32>) {
    let mut img = image.clone();
    let mut msk = mask.clone();
    let [_, h, w] = image.shape()[..] else { panic!("CHW") };

    if rng.gen::<f64>() < policy.hflip_p {
        img = flip_horizontal(&img);
        msk = flip_horizontal(&msk);
    }
    if rng.gen::<f64>() < policy.vflip_p {
        img = flip_vertical(&img);
        msk = flip_vertical(&msk);
    }
    if rng.gen::<f64>() < policy.zoom_p && policy.zoom_max > 1.0 {
        let s = 1.0 + rng.gen::<f64>() * (policy.zoom_max - 1.0);
        let (rh, rw) = (
            ((h as f64 * s).round() as usize).max(h),
            ((w as f64 * s).round() as usize).max(w),
        );
        img = center_crop(&img.resize_bilinear(rh, rw).expect("zoom"), h, w);
        msk = center_crop(&nearest_resize_tensor(&msk, rh, rw), h, w);
        rebinarize(&mut msk);
    }
    if rng.gen::<f64>() < policy.rotate_p && policy.rotate_deg > 0.0 {
        let deg = (rng.gen::<f64>() * 2.0 - 1.0) * policy.rotate_deg;
        let rad = deg.to_radians();
        img = rotate_bilinear(&img, rad);
        msk = rotate_nearest_zero(&msk, rad);
        rebinarize(&mut msk);
    }
    (img, msk)
}

/// Stack loaded (image, mask) pairs into N×3×H×W / N×1×H×W batches.
pub fn stack_batch(samples: &[(Tensor<f32>, Tensor<f32>)]) -> (Tensor<f32>, Tensor<f32>) {
    let n = samples.len();
    let [_, h, w] = samples[0].0.shape()[..] else { panic!("CHW") };
    let mut images = Vec::with_capacity(n * 3 * h * w);
    let mut masks = Vec::with_capacity(n * h * w);
    for (img, msk) in samples {
        images.extend_from_slice(img.data());
        masks.extend_from_slice(msk.data());
    }
    (
        Tensor::new(&[n, 3, h, w], images).expect("sized"),
        Tensor::new(&[n, 1, h, w], masks).expect("sized"),
    )
}
