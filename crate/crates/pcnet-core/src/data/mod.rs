//! Dataset ingestion and preprocessing: class-per-folder image trees, the
//! procedural synthetic texture set, train/test splitting, augmentation and
//! per-channel standardization.
//!
//! Images are stored channel-first as `f32` in `[0, 1]`. Standardization
//! statistics always come from the train split and are applied to both
//! splits; augmentation happens on the raw image before standardization and
//! never touches the test split.

pub mod synthetic;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::path::Path;

/// RGB image, channel-first `[3 * h * w]`, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    pub pixels: Vec<f32>,
}

impl Image {
    pub fn new(h: usize, w: usize) -> Self {
        Image {
            h,
            w,
            pixels: vec![0.0; 3 * h * w],
        }
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.pixels[(c * self.h + y) * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.pixels[(c * self.h + y) * self.w + x] = v;
    }
}

#[derive(Clone, Debug)]
pub struct Item {
    pub image: Image,
    pub label: usize,
    /// Origin of the item: a filesystem path or a `synth://` identifier.
    pub source: String,
}

/// A labeled image collection with dense labels `0..N-1`.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub items: Vec<Item>,
    pub class_names: Vec<String>,
    pub input_size: (usize, usize),
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.items.iter().map(|it| it.label).collect()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Content hash over geometry, class names, labels and pixels.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update((self.input_size.0 as u64).to_le_bytes());
        hasher.update((self.input_size.1 as u64).to_le_bytes());
        for name in &self.class_names {
            hasher.update(name.as_bytes());
            hasher.update([0u8]);
        }
        for item in &self.items {
            hasher.update((item.label as u64).to_le_bytes());
            for &p in &item.image.pixels {
                hasher.update(p.to_le_bytes());
            }
        }
        let digest = hasher.finalize();
        let mut out = String::with_capacity(64);
        for b in digest {
            write!(out, "{:02x}", b).expect("writing to string");
        }
        out
    }
}

const IMAGE_EXTENSIONS: &[&str] = &["png", "ppm", "pgm", "pbm", "pnm", "bmp"];

/// Loads a `root/<class_name>/<image files>` tree. Classes and files are
/// ordered lexicographically; every image is decoded to RGB, resized with
/// bilinear interpolation when its extents differ from `input_size`, and
/// scaled to `[0, 1]`.
pub fn load_folder_dataset(root: &Path, input_size: (usize, usize)) -> Result<Dataset> {
    if !root.is_dir() {
        return Err(Error::Data(format!(
            "dataset root '{}' is not a directory",
            root.display()
        )));
    }
    let mut class_dirs: Vec<(String, std::path::PathBuf)> = Vec::new();
    let entries = std::fs::read_dir(root).map_err(|e| Error::io(root.display().to_string(), e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(root.display().to_string(), e))?;
        let path = entry.path();
        if path.is_dir() {
            let name = entry.file_name().to_string_lossy().into_owned();
            class_dirs.push((name, path));
        }
    }
    if class_dirs.is_empty() {
        return Err(Error::Data(format!(
            "no class subdirectories under {}",
            root.display()
        )));
    }
    class_dirs.sort_by(|a, b| a.0.cmp(&b.0));

    let mut items = Vec::new();
    let mut class_names = Vec::new();
    for (label, (name, dir)) in class_dirs.iter().enumerate() {
        let mut files: Vec<std::path::PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir.display().to_string(), e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.is_file()
                    && p.extension()
                        .and_then(|e| e.to_str())
                        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
                        .unwrap_or(false)
            })
            .collect();
        if files.is_empty() {
            return Err(Error::Data(format!(
                "class folder '{}' contains no decodable images",
                name
            )));
        }
        files.sort();
        for path in files {
            let image = decode_image(&path, input_size)?;
            items.push(Item {
                image,
                label,
                source: path.display().to_string(),
            });
        }
        class_names.push(name.clone());
    }
    Ok(Dataset {
        items,
        class_names,
        input_size,
    })
}

fn decode_image(path: &Path, input_size: (usize, usize)) -> Result<Image> {
    let decoded = image::open(path)
        .map_err(|e| Error::Data(format!("cannot decode '{}': {}", path.display(), e)))?;
    let rgb = decoded.to_rgb8();
    let (th, tw) = input_size;
    let rgb = if (rgb.height() as usize, rgb.width() as usize) != (th, tw) {
        image::imageops::resize(
            &rgb,
            tw as u32,
            th as u32,
            image::imageops::FilterType::Triangle,
        )
    } else {
        rgb
    };
    let mut img = Image::new(th, tw);
    for y in 0..th {
        for x in 0..tw {
            let p = rgb.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                img.set(c, y, x, p.0[c] as f32 / 255.0);
            }
        }
    }
    Ok(img)
}

/// Writes the dataset as a `root/<class_name>/NNNN.png` tree.
pub fn write_dataset_tree(dataset: &Dataset, root: &Path) -> Result<()> {
    for (label, name) in dataset.class_names.iter().enumerate() {
        let dir = root.join(name);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        let mut counter = 0usize;
        for item in dataset.items.iter().filter(|it| it.label == label) {
            let path = dir.join(format!("{:04}.png", counter));
            save_png(&item.image, &path)?;
            counter += 1;
        }
    }
    Ok(())
}

pub fn save_png(img: &Image, path: &Path) -> Result<()> {
    let mut rgb = image::RgbImage::new(img.w as u32, img.h as u32);
    for y in 0..img.h {
        for x in 0..img.w {
            let px = [
                (img.get(0, y, x).clamp(0.0, 1.0) * 255.0).round() as u8,
                (img.get(1, y, x).clamp(0.0, 1.0) * 255.0).round() as u8,
                (img.get(2, y, x).clamp(0.0, 1.0) * 255.0).round() as u8,
            ];
            rgb.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    rgb.save(path)
        .map_err(|e| Error::Data(format!("cannot write '{}': {}", path.display(), e)))
}

// ── augmentation ─────────────────────────────────────────────────────────

/// Training-time augmentation policy: rotation then optional flips.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentPolicy {
    /// Maximum rotation magnitude in degrees; angles draw uniformly from
    /// `[-max, max]`.
    pub rotate_max_deg: f64,
    /// Apply a constant `+rotate_max_deg` rotation instead of a uniform draw.
    pub fixed_rotation: bool,
    pub hflip: bool,
    pub vflip: bool,
    pub seed: u64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            rotate_max_deg: 30.0,
            fixed_rotation: false,
            hflip: true,
            vflip: true,
            seed: 0,
        }
    }
}

/// Symmetric reflection of an index into `0..n` (edge pixels repeat once).
fn reflect_index(mut i: isize, n: usize) -> usize {
    let n = n as isize;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i as usize;
        }
    }
}

fn bilinear_reflect(img: &Image, c: usize, sy: f64, sx: f64) -> f32 {
    let y0 = sy.floor();
    let x0 = sx.floor();
    let fy = (sy - y0) as f32;
    let fx = (sx - x0) as f32;
    let y0 = y0 as isize;
    let x0 = x0 as isize;
    let p = |dy: isize, dx: isize| -> f32 {
        img.get(c, reflect_index(y0 + dy, img.h), reflect_index(x0 + dx, img.w))
    };
    let top = p(0, 0) * (1.0 - fx) + p(0, 1) * fx;
    let bottom = p(1, 0) * (1.0 - fx) + p(1, 1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Rotates around the image center by `degrees` (bilinear, reflect borders).
pub fn rotate(img: &Image, degrees: f64) -> Image {
    if degrees == 0.0 {
        return img.clone();
    }
    let rad = degrees.to_radians();
    let (sin, cos) = rad.sin_cos();
    let cy = (img.h as f64 - 1.0) / 2.0;
    let cx = (img.w as f64 - 1.0) / 2.0;
    let mut out = Image::new(img.h, img.w);
    for c in 0..3 {
        for y in 0..img.h {
            for x in 0..img.w {
                let dy = y as f64 - cy;
                let dx = x as f64 - cx;
                let sx = cos * dx + sin * dy + cx;
                let sy = -sin * dx + cos * dy + cy;
                out.set(c, y, x, bilinear_reflect(img, c, sy, sx));
            }
        }
    }
    out
}

pub fn hflip(img: &Image) -> Image {
    let mut out = Image::new(img.h, img.w);
    for c in 0..3 {
        for y in 0..img.h {
            for x in 0..img.w {
                out.set(c, y, x, img.get(c, y, img.w - 1 - x));
            }
        }
    }
    out
}

pub fn vflip(img: &Image) -> Image {
    let mut out = Image::new(img.h, img.w);
    for c in 0..3 {
        for y in 0..img.h {
            for x in 0..img.w {
                out.set(c, y, x, img.get(c, img.h - 1 - y, x));
            }
        }
    }
    out
}

/// Parameters of one augmentation application.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentDraw {
    pub angle_deg: f64,
    pub hflip: bool,
    pub vflip: bool,
}

/// Draws the per-image augmentation parameters. Draw order is fixed: angle
/// (when rotation is enabled and not fixed), then the horizontal and vertical
/// coin flips (when enabled).
pub fn draw_augment<R: Rng>(policy: &AugmentPolicy, rng: &mut R) -> AugmentDraw {
    let angle_deg = if policy.rotate_max_deg == 0.0 {
        0.0
    } else if policy.fixed_rotation {
        policy.rotate_max_deg
    } else {
        rng.gen_range(-policy.rotate_max_deg..=policy.rotate_max_deg)
    };
    AugmentDraw {
        angle_deg,
        hflip: policy.hflip && rng.gen_bool(0.5),
        vflip: policy.vflip && rng.gen_bool(0.5),
    }
}

pub fn apply_augment(img: &Image, draw: &AugmentDraw) -> Image {
    let mut out = rotate(img, draw.angle_deg);
    if draw.hflip {
        out = hflip(&out);
    }
    if draw.vflip {
        out = vflip(&out);
    }
    out
}

/// Rotation then optional flips, all parameters drawn from `rng`.
pub fn augment<R: Rng>(img: &Image, policy: &AugmentPolicy, rng: &mut R) -> Image {
    let draw = draw_augment(policy, rng);
    apply_augment(img, &draw)
}

// ── split and standardization ────────────────────────────────────────────

/// Stratified train/test partition: per class, `round(fraction * n)` items go
/// to train. Errors if any class would land empty on either side.
pub fn split(dataset: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train fraction must be in (0, 1), got {}",
            train_fraction
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train_items = Vec::new();
    let mut test_items = Vec::new();
    for label in 0..dataset.num_classes() {
        let mut members: Vec<usize> = dataset
            .items
            .iter()
            .enumerate()
            .filter(|(_, it)| it.label == label)
            .map(|(i, _)| i)
            .collect();
        let n = members.len();
        let n_train = (train_fraction * n as f64).round() as usize;
        if n_train == 0 || n_train >= n {
            return Err(Error::Data(format!(
                "class '{}' with {} items cannot be split at fraction {} (train side would get {})",
                dataset.class_names[label], n, train_fraction, n_train
            )));
        }
        // Shuffle, then take the first n_train for training.
        for i in 0..n {
            let j = rng.gen_range(i..n);
            members.swap(i, j);
        }
        for (pos, &idx) in members.iter().enumerate() {
            if pos < n_train {
                train_items.push(dataset.items[idx].clone());
            } else {
                test_items.push(dataset.items[idx].clone());
            }
        }
    }
    let train = Dataset {
        items: train_items,
        class_names: dataset.class_names.clone(),
        input_size: dataset.input_size,
    };
    let test = Dataset {
        items: test_items,
        class_names: dataset.class_names.clone(),
        input_size: dataset.input_size,
    };
    Ok((train, test))
}

/// CSV manifest `path,label,split` describing a concrete partition.
pub fn split_manifest(train: &Dataset, test: &Dataset) -> String {
    let mut out = String::from("path,label,split\n");
    for item in &train.items {
        out.push_str(&format!("{},{},train\n", item.source, item.label));
    }
    for item in &test.items {
        out.push_str(&format!("{},{},test\n", item.source, item.label));
    }
    out
}

/// Per-channel mean and standard deviation, computed from a train split.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl ChannelStats {
    /// Identity statistics (no shift, unit scale).
    pub fn identity() -> Self {
        ChannelStats {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }
}

/// Two-pass per-channel statistics over every pixel of the dataset.
pub fn channel_stats(dataset: &Dataset) -> Result<ChannelStats> {
    if dataset.is_empty() {
        return Err(Error::Data("cannot compute statistics of an empty dataset".into()));
    }
    let plane = dataset.input_size.0 * dataset.input_size.1;
    let mut mean = [0.0f64; 3];
    let count = (dataset.len() * plane) as f64;
    for item in &dataset.items {
        for c in 0..3 {
            let slice = &item.image.pixels[c * plane..(c + 1) * plane];
            mean[c] += slice.iter().map(|&v| v as f64).sum::<f64>();
        }
    }
    for m in &mut mean {
        *m /= count;
    }
    let mut var = [0.0f64; 3];
    for item in &dataset.items {
        for c in 0..3 {
            let slice = &item.image.pixels[c * plane..(c + 1) * plane];
            var[c] += slice
                .iter()
                .map(|&v| {
                    let d = v as f64 - mean[c];
                    d * d
                })
                .sum::<f64>();
        }
    }
    let mut std = [0.0f64; 3];
    for c in 0..3 {
        std[c] = (var[c] / count).sqrt();
        if std[c] < 1e-12 {
            // Constant channel: leave it centered but unscaled.
            std[c] = 1.0;
        }
    }
    Ok(ChannelStats { mean, std })
}

/// Standardizes one image into a `[1, 3, H, W]` tensor.
pub fn image_tensor<T: Scalar>(img: &Image, stats: &ChannelStats) -> Tensor<T> {
    batch_tensor(&[img], stats)
}

/// Standardizes a batch of equally sized images into `[B, 3, H, W]`.
pub fn batch_tensor<T: Scalar>(images: &[&Image], stats: &ChannelStats) -> Tensor<T> {
    let (h, w) = (images[0].h, images[0].w);
    let plane = h * w;
    let mut data = Vec::with_capacity(images.len() * 3 * plane);
    for img in images {
        debug_assert_eq!((img.h, img.w), (h, w));
        for c in 0..3 {
            let mean = T::from_f64(stats.mean[c]);
            let std = T::from_f64(stats.std[c]);
            for &p in &img.pixels[c * plane..(c + 1) * plane] {
                data.push((T::from_f64(p as f64) - mean) / std);
            }
        }
    }
    Tensor::from_vec(&[images.len(), 3, h, w], data).expect("consistent extents")
}
