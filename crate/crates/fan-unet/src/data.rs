//! Dataset ingestion for image/mask folders, the synthetic periodic-texture
//! generator, and paired augmentation.
//!
//! Expected layout: `<root>/<split>/images/*.{png,jpg}` with masks of the
//! same stem under `<root>/<split>/masks/*.png`. An optional
//! `<root>/<split>/manifest.csv` (header `image_path,mask_path`, paths
//! relative to `<root>`) overrides folder discovery.

use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{c, fl, Element, Tensor};

/// Mask pixels above this 8-bit value count as foreground.
pub const MASK_THRESHOLD: u8 = 127;

// ── Manifest ─────────────────────────────────────────────────────────

/// A resolved list of (image, mask) file pairs for one split.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub split: String,
    pub pairs: Vec<(PathBuf, PathBuf)>,
    pub resolution: usize,
}

impl DatasetManifest {
    /// Discover pairs under `<root>/<split>/`, honoring `manifest.csv` when
    /// present. Pairs are sorted by image filename.
    pub fn discover(root: &Path, split: &str, resolution: usize) -> Result<Self> {
        let split_dir = root.join(split);
        let csv = split_dir.join("manifest.csv");
        let mut pairs = if csv.exists() {
            Self::from_csv(root, &csv)?
        } else {
            Self::from_folders(&split_dir)?
        };
        if pairs.is_empty() {
            return Err(Error::Ingestion {
                path: split_dir,
                msg: "no image/mask pairs found".into(),
            });
        }
        pairs.sort();
        for (img, mask) in &pairs {
            for p in [img, mask] {
                if !p.exists() {
                    return Err(Error::Ingestion { path: p.clone(), msg: "file does not exist".into() });
                }
            }
        }
        Ok(DatasetManifest { root: root.to_path_buf(), split: split.to_string(), pairs, resolution })
    }

    fn from_csv(root: &Path, csv: &Path) -> Result<Vec<(PathBuf, PathBuf)>> {
        let text = std::fs::read_to_string(csv)?;
        let mut pairs = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || (lineno == 0 && line.starts_with("image_path")) {
                continue;
            }
            let (img, mask) = line.split_once(',').ok_or_else(|| Error::Ingestion {
                path: csv.to_path_buf(),
                msg: format!("line {} is not 'image_path,mask_path'", lineno + 1),
            })?;
            pairs.push((root.join(img.trim()), root.join(mask.trim())));
        }
        Ok(pairs)
    }

    fn from_folders(split_dir: &Path) -> Result<Vec<(PathBuf, PathBuf)>> {
        let images_dir = split_dir.join("images");
        let masks_dir = split_dir.join("masks");
        let entries = std::fs::read_dir(&images_dir).map_err(|e| Error::Ingestion {
            path: images_dir.clone(),
            msg: e.to_string(),
        })?;
        let mut pairs = Vec::new();
        for entry in entries {
            let path = entry?.path();
            let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
            if !matches!(ext.as_str(), "png" | "jpg" | "jpeg") {
                continue;
            }
            let stem = path.file_stem().and_then(|s| s.to_str()).ok_or_else(|| Error::Ingestion {
                path: path.clone(),
                msg: "unreadable file stem".into(),
            })?;
            let mask = masks_dir.join(format!("{stem}.png"));
            if !mask.exists() {
                return Err(Error::Pairing(format!(
                    "image {} has no mask at {}",
                    path.display(),
                    mask.display()
                )));
            }
            pairs.push((path, mask));
        }
        Ok(pairs)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

// ── Decoded samples and batches ──────────────────────────────────────

/// One decoded sample: `image` is `[3 * r * r]` in [0,1], `mask` is
/// `[r * r]` of {0,1}, both row-major CHW.
#[derive(Debug, Clone)]
pub struct Sample<E: Element> {
    pub image: Vec<E>,
    pub mask: Vec<E>,
    pub id: String,
}

/// Paired image/mask tensors with their sample identifiers.
#[derive(Debug, Clone)]
pub struct SegmentationBatch<E: Element> {
    /// `[B, 3, H, W]` in [0, 1]
    pub images: Tensor<E>,
    /// `[B, 1, H, W]` of {0, 1}
    pub masks: Tensor<E>,
    pub ids: Vec<String>,
}

impl<E: Element> SegmentationBatch<E> {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Decode one image/mask pair to the target resolution: bilinear for the
/// image, nearest-neighbor for the mask, binarized above [`MASK_THRESHOLD`].
pub fn load_pair<E: Element>(image_path: &Path, mask_path: &Path, resolution: usize) -> Result<Sample<E>> {
    let img = image::open(image_path).map_err(|e| Error::Ingestion {
        path: image_path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let mask = image::open(mask_path).map_err(|e| Error::Ingestion {
        path: mask_path.to_path_buf(),
        msg: e.to_string(),
    })?;
    if img.width() != mask.width() || img.height() != mask.height() {
        return Err(Error::Pairing(format!(
            "{} is {}x{} but mask {} is {}x{}",
            image_path.display(),
            img.width(),
            img.height(),
            mask_path.display(),
            mask.width(),
            mask.height()
        )));
    }
    let r = resolution as u32;
    let img = image::imageops::resize(&img.to_rgb8(), r, r, FilterType::Triangle);
    let mask = image::imageops::resize(&mask.to_luma8(), r, r, FilterType::Nearest);

    let n = resolution * resolution;
    let mut image_data = vec![E::zero(); 3 * n];
    for (i, px) in img.pixels().enumerate() {
        for ch in 0..3 {
            image_data[ch * n + i] = c::<E>(px.0[ch] as f64 / 255.0);
        }
    }
    let mask_data: Vec<E> = mask
        .pixels()
        .map(|p| if p.0[0] > MASK_THRESHOLD { E::one() } else { E::zero() })
        .collect();
    let id = image_path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("sample")
        .to_string();
    Ok(Sample { image: image_data, mask: mask_data, id })
}

/// Decode a standalone image (no mask) into a `[1, 3, r, r]` tensor in [0,1].
pub fn load_image<E: Element>(path: &Path, resolution: usize) -> Result<Tensor<E>> {
    let img = image::open(path).map_err(|e| Error::Ingestion {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let r = resolution as u32;
    let img = image::imageops::resize(&img.to_rgb8(), r, r, FilterType::Triangle);
    let n = resolution * resolution;
    let mut data = vec![E::zero(); 3 * n];
    for (i, px) in img.pixels().enumerate() {
        for ch in 0..3 {
            data[ch * n + i] = c::<E>(px.0[ch] as f64 / 255.0);
        }
    }
    Ok(Tensor::new(data, &[1, 3, resolution, resolution])?)
}

/// All samples of a split decoded into memory.
#[derive(Debug, Clone)]
pub struct LoadedDataset<E: Element> {
    pub samples: Vec<Sample<E>>,
    pub resolution: usize,
}

impl<E: Element> LoadedDataset<E> {
    pub fn load(manifest: &DatasetManifest) -> Result<Self> {
        let samples = manifest
            .pairs
            .iter()
            .map(|(img, mask)| load_pair(img, mask, manifest.resolution))
            .collect::<Result<Vec<_>>>()?;
        Ok(LoadedDataset { samples, resolution: manifest.resolution })
    }

    pub fn from_samples(samples: Vec<Sample<E>>, resolution: usize) -> Self {
        LoadedDataset { samples, resolution }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Deterministic sample order for one epoch: identity when `seed` is
    /// `None`, otherwise a seeded Fisher-Yates shuffle.
    pub fn epoch_order(&self, seed: Option<u64>) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.samples.len()).collect();
        if let Some(s) = seed {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            for i in (1..order.len()).rev() {
                order.swap(i, rng.gen_range(0..=i));
            }
        }
        order
    }

    /// Assemble batches following `order`.
    pub fn batches(&self, batch_size: usize, order: &[usize]) -> Vec<SegmentationBatch<E>> {
        assert!(batch_size >= 1, "batch size must be positive");
        let r = self.resolution;
        order
            .chunks(batch_size)
            .map(|chunk| {
                let b = chunk.len();
                let mut images = Vec::with_capacity(b * 3 * r * r);
                let mut masks = Vec::with_capacity(b * r * r);
                let mut ids = Vec::with_capacity(b);
                for &i in chunk {
                    images.extend_from_slice(&self.samples[i].image);
                    masks.extend_from_slice(&self.samples[i].mask);
                    ids.push(self.samples[i].id.clone());
                }
                SegmentationBatch {
                    images: Tensor::new(images, &[b, 3, r, r]).unwrap(),
                    masks: Tensor::new(masks, &[b, 1, r, r]).unwrap(),
                    ids,
                }
            })
            .collect()
    }
}

/// Load a split and batch it in a fixed seeded order.
pub fn load_dataset<E: Element>(
    manifest: &DatasetManifest,
    batch_size: usize,
    shuffle_seed: Option<u64>,
) -> Result<Vec<SegmentationBatch<E>>> {
    let ds = LoadedDataset::<E>::load(manifest)?;
    let order = ds.epoch_order(shuffle_seed);
    Ok(ds.batches(batch_size, &order))
}

// ── Synthetic data ───────────────────────────────────────────────────

/// Generate `n` samples of sinusoidal texture with an elliptical region
/// carrying a distinct (higher) frequency band; the mask marks the ellipse.
/// Pure function of its arguments; image values lie in [0,1] and the mask
/// area fraction stays within [0.05, 0.4] by construction.
pub fn synthetic_dataset<E: Element>(n: usize, resolution: usize, seed: u64) -> Vec<Sample<E>> {
    assert!(n >= 1, "need at least one sample");
    assert!(resolution >= 32, "resolution must be at least 32");
    let r = resolution;
    let rf = r as f64;
    let tau = std::f64::consts::TAU;

    (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64 + 1);

            let bg_freq = rng.gen_range(2.0..6.0);
            let bg_angle: f64 = rng.gen_range(0.0..std::f64::consts::PI);
            let bg_phase = rng.gen_range(0.0..tau);
            let le_freq = rng.gen_range(9.0..15.0);
            let le_angle: f64 = rng.gen_range(0.0..std::f64::consts::PI);
            let le_phase = rng.gen_range(0.0..tau);

            let cx = rng.gen_range(0.35..0.65) * rf;
            let cy = rng.gen_range(0.35..0.65) * rf;
            let rx = rng.gen_range(0.15..0.32) * rf;
            let ry = rng.gen_range(0.15..0.32) * rf;
            let rot: f64 = rng.gen_range(0.0..std::f64::consts::PI);
            let (rot_s, rot_c) = rot.sin_cos();

            let n_px = r * r;
            let mut image = vec![E::zero(); 3 * n_px];
            let mut mask = vec![E::zero(); n_px];
            for y in 0..r {
                for x in 0..r {
                    let (xf, yf) = (x as f64, y as f64);
                    let dx = xf - cx;
                    let dy = yf - cy;
                    let u = (dx * rot_c + dy * rot_s) / rx;
                    let v = (-dx * rot_s + dy * rot_c) / ry;
                    let inside = u * u + v * v <= 1.0;
                    if inside {
                        mask[y * r + x] = E::one();
                    }
                    let (freq, angle, phase) = if inside {
                        (le_freq, le_angle, le_phase)
                    } else {
                        (bg_freq, bg_angle, bg_phase)
                    };
                    let coord = (xf * angle.cos() + yf * angle.sin()) / rf;
                    for ch in 0..3 {
                        let shifted = phase + ch as f64 * 0.7;
                        let val = 0.5 + 0.45 * (tau * freq * coord + shifted).sin();
                        image[ch * n_px + y * r + x] = c::<E>(val);
                    }
                }
            }
            Sample { image, mask, id: format!("synth_{i:04}") }
        })
        .collect()
}

/// Write samples to the standard folder layout under `<root>/<split>/`.
pub fn export_dataset<E: Element>(samples: &[Sample<E>], root: &Path, split: &str, resolution: usize) -> Result<()> {
    let images_dir = root.join(split).join("images");
    let masks_dir = root.join(split).join("masks");
    std::fs::create_dir_all(&images_dir)?;
    std::fs::create_dir_all(&masks_dir)?;
    let r = resolution as u32;
    let n_px = resolution * resolution;
    for s in samples {
        let mut img = image::RgbImage::new(r, r);
        for (i, px) in img.pixels_mut().enumerate() {
            for ch in 0..3 {
                px.0[ch] = (fl(s.image[ch * n_px + i]) * 255.0).round().clamp(0.0, 255.0) as u8;
            }
        }
        img.save(images_dir.join(format!("{}.png", s.id)))?;
        let mut m = image::GrayImage::new(r, r);
        for (i, px) in m.pixels_mut().enumerate() {
            px.0[0] = if s.mask[i] == E::one() { 255 } else { 0 };
        }
        m.save(masks_dir.join(format!("{}.png", s.id)))?;
    }
    Ok(())
}

// ── Augmentation ─────────────────────────────────────────────────────

fn flip_h_plane<E: Element>(plane: &mut [E], h: usize, w: usize) {
    for y in 0..h {
        plane[y * w..(y + 1) * w].reverse();
    }
}

fn flip_v_plane<E: Element>(plane: &mut [E], h: usize, w: usize) {
    for y in 0..h / 2 {
        for x in 0..w {
            plane.swap(y * w + x, (h - 1 - y) * w + x);
        }
    }
}

/// Counter-clockwise quarter turn of a square plane.
fn rot90_plane<E: Element>(plane: &[E], n: usize) -> Vec<E> {
    let mut out = vec![E::zero(); n * n];
    for y in 0..n {
        for x in 0..n {
            out[(n - 1 - x) * n + y] = plane[y * n + x];
        }
    }
    out
}

/// Horizontal flip of every plane of a CHW buffer.
pub fn flip_horizontal<E: Element>(data: &mut [E], channels: usize, h: usize, w: usize) {
    for ch in 0..channels {
        flip_h_plane(&mut data[ch * h * w..(ch + 1) * h * w], h, w);
    }
}

/// Vertical flip of every plane of a CHW buffer.
pub fn flip_vertical<E: Element>(data: &mut [E], channels: usize, h: usize, w: usize) {
    for ch in 0..channels {
        flip_v_plane(&mut data[ch * h * w..(ch + 1) * h * w], h, w);
    }
}

/// `k` quarter turns of a square CHW buffer.
pub fn rotate90<E: Element>(data: &mut [E], channels: usize, n: usize, k: usize) {
    for _ in 0..k % 4 {
        for ch in 0..channels {
            let plane = rot90_plane(&data[ch * n * n..(ch + 1) * n * n], n);
            data[ch * n * n..(ch + 1) * n * n].copy_from_slice(&plane);
        }
    }
}

/// Seeded flips and quarter turns, applied identically to each sample's
/// image and mask.
pub fn augment<E: Element>(batch: &SegmentationBatch<E>, seed: u64) -> SegmentationBatch<E> {
    let shape = batch.images.shape().to_vec();
    let (b, h, w) = (shape[0], shape[2], shape[3]);
    assert_eq!(h, w, "augmentation expects square samples");
    let mut images = batch.images.to_vec();
    let mut masks = batch.masks.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plane = h * w;
    for i in 0..b {
        let img = &mut images[i * 3 * plane..(i + 1) * 3 * plane];
        let msk = &mut masks[i * plane..(i + 1) * plane];
        if rng.gen_bool(0.5) {
            flip_horizontal(img, 3, h, w);
            flip_horizontal(msk, 1, h, w);
        }
        if rng.gen_bool(0.5) {
            flip_vertical(img, 3, h, w);
            flip_vertical(msk, 1, h, w);
        }
        let k = rng.gen_range(0..4usize);
        rotate90(img, 3, h, k);
        rotate90(msk, 1, h, k);
    }
    SegmentationBatch {
        images: Tensor::new(images, &shape).unwrap(),
        masks: Tensor::new(masks, batch.masks.shape()).unwrap(),
        ids: batch.ids.clone(),
    }
}
