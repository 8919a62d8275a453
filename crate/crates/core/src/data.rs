//! Image-folder datasets: indexing, crops, Lab pairs and deterministic batching.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use image::imageops::{self, FilterType};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use walkdir::WalkDir;

use crate::autograd::Tensor;
use crate::colorspace::{rgb_to_lab, ChromaMap, GrayImage, RgbImage};
use crate::error::{Error, Result};

pub mod synth;

/// Optional file in a dataset root listing one image path per line.
pub const MANIFEST: &str = "manifest.txt";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    /// Random crops, shuffled batches, last partial batch dropped.
    Train,
    /// Center crops, sequential batches, everything kept.
    Val,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CachePolicy {
    /// Decode from disk on every access.
    None,
    /// Keep resized images in memory after the first decode.
    Memory,
}

#[derive(Debug)]
pub struct DatasetIndex {
    root: PathBuf,
    files: Vec<PathBuf>,
    split: Split,
    cache_policy: CachePolicy,
    warnings: Vec<String>,
    cache: Mutex<HashMap<(usize, usize), Arc<RgbImage>>>,
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        .unwrap_or(false)
}

/// Lists PNG/JPEG files under `root` (or those named in its manifest),
/// dropping unreadable or empty images with a warning.
pub fn build_index(root: &Path, split: Split) -> Result<DatasetIndex> {
    if !root.is_dir() {
        return Err(Error::Dataset(format!("{} is not a readable directory", root.display())));
    }
    let manifest = root.join(MANIFEST);
    let mut candidates: Vec<PathBuf> = if manifest.is_file() {
        std::fs::read_to_string(&manifest)
            .map_err(|e| Error::io(&manifest, e))?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(|l| root.join(l))
            .collect()
    } else {
        WalkDir::new(root)
            .follow_links(true)
            .into_iter()
            .filter_map(|e| e.ok())
            .filter(|e| e.file_type().is_file() && is_image(e.path()))
            .map(|e| e.into_path())
            .collect()
    };
    candidates.sort();
    let mut files = Vec::with_capacity(candidates.len());
    let mut warnings = Vec::new();
    for path in candidates {
        match image::image_dimensions(&path) {
            Ok((w, h)) if w > 0 && h > 0 => files.push(path),
            Ok(_) => warnings.push(format!("skipping {}: zero-pixel image", path.display())),
            Err(e) => warnings.push(format!("skipping {}: {e}", path.display())),
        }
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    if files.is_empty() {
        return Err(Error::Dataset(format!("no readable images under {}", root.display())));
    }
    Ok(DatasetIndex {
        root: root.to_path_buf(),
        files,
        split,
        cache_policy: CachePolicy::Memory,
        warnings,
        cache: Mutex::new(HashMap::new()),
    })
}

/// Resizes so the shorter side equals `side`, keeping the aspect ratio.
pub fn resize_shorter_side(img: &RgbImage, side: usize) -> Result<RgbImage> {
    let (w, h) = (img.width(), img.height());
    let short = w.min(h);
    if short == side {
        return Ok(img.clone());
    }
    let (nw, nh) = if w <= h {
        (side, ((h as f64 * side as f64 / w as f64).round() as usize).max(side))
    } else {
        (((w as f64 * side as f64 / h as f64).round() as usize).max(side), side)
    };
    let buf: image::Rgb32FImage = image::ImageBuffer::from_raw(
        w as u32,
        h as u32,
        img.data().iter().map(|&v| v as f32).collect(),
    )
    .expect("buffer size matches image");
    let out = imageops::resize(&buf, nw as u32, nh as u32, FilterType::Triangle);
    RgbImage::new(
        nw,
        nh,
        out.into_raw().into_iter().map(|v| (v as f64).clamp(0.0, 1.0)).collect(),
    )
}

impl DatasetIndex {
    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn files(&self) -> &[PathBuf] {
        &self.files
    }

    pub fn len(&self) -> usize {
        self.files.len()
    }

    pub fn is_empty(&self) -> bool {
        self.files.is_empty()
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    pub fn with_cache(mut self, policy: CachePolicy) -> Self {
        self.cache_policy = policy;
        self
    }

    /// Messages for files dropped while indexing.
    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    /// Image `i` with its shorter side resized to `side`.
    pub fn resized(&self, i: usize, side: usize) -> Result<Arc<RgbImage>> {
        if let Some(img) = self.cache.lock().expect("cache lock").get(&(i, side)) {
            return Ok(img.clone());
        }
        let path = self
            .files
            .get(i)
            .ok_or_else(|| Error::Dataset(format!("index {i} out of range ({} items)", self.len())))?;
        let img = Arc::new(resize_shorter_side(&RgbImage::load(path)?, side)?);
        if self.cache_policy == CachePolicy::Memory {
            self.cache.lock().expect("cache lock").insert((i, side), img.clone());
        }
        Ok(img)
    }

    /// A `crop x crop` Lab pair from item `i`: random window in train mode,
    /// centered in val mode.
    pub fn sample_pair<R: Rng + ?Sized>(&self, i: usize, crop: usize, rng: &mut R) -> Result<(GrayImage, ChromaMap)> {
        if crop == 0 {
            return Err(Error::Invalid("crop size must be positive".into()));
        }
        let img = self.resized(i, crop)?;
        let (sx, sy) = (img.width() - crop, img.height() - crop);
        let (x0, y0) = match self.split {
            Split::Train => (rng.random_range(0..=sx), rng.random_range(0..=sy)),
            Split::Val => (sx / 2, sy / 2),
        };
        rgb_to_lab(&img.crop(x0, y0, crop, crop)?)
    }

    /// Item order for one epoch: a shuffle seeded by `(seed, epoch)` in train
    /// mode (partial tail dropped), file order in val mode.
    pub fn batches(&self, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
        assert!(batch_size > 0, "batch size must be positive");
        let mut order: Vec<usize> = (0..self.len()).collect();
        match self.split {
            Split::Train => {
                order.shuffle(&mut epoch_rng(seed, epoch, u64::MAX));
                order.chunks_exact(batch_size).map(<[usize]>::to_vec).collect()
            }
            Split::Val => order.chunks(batch_size).map(<[usize]>::to_vec).collect(),
        }
    }

    /// Loads the pairs for `ids`. Each crop position depends only on
    /// `(seed, epoch, id)`, so loading can run in parallel. Items that fail to
    /// decode are skipped with a warning.
    pub fn load_batch(&self, ids: &[usize], crop: usize, seed: u64, epoch: u64) -> Result<Batch> {
        let loaded: Vec<Option<(GrayImage, ChromaMap)>> = ids
            .par_iter()
            .map(|&i| {
                let mut rng = epoch_rng(seed, epoch, i as u64);
                match self.sample_pair(i, crop, &mut rng) {
                    Ok(p) => Some(p),
                    Err(e) => {
                        log::warn!("skipping {}: {e}", self.files[i].display());
                        None
                    }
                }
            })
            .collect();
        let (gray, chroma): (Vec<_>, Vec<_>) = loaded.into_iter().flatten().unzip();
        if gray.is_empty() {
            return Err(Error::Dataset("every item of the batch failed to load".into()));
        }
        Ok(Batch { gray, chroma })
    }
}

/// Per-(seed, epoch, item) generator; `item = u64::MAX` is the shuffle stream.
fn epoch_rng(seed: u64, epoch: u64, item: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ item);
    rng
}

/// Aligned gray and chroma crops.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub gray: Vec<GrayImage>,
    pub chroma: Vec<ChromaMap>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.gray.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gray.is_empty()
    }

    /// `([N, 1, H, W], [N, 2, H, W])`.
    pub fn tensors(&self) -> Result<(Tensor, Tensor)> {
        Ok((GrayImage::batch(&self.gray)?, ChromaMap::batch(&self.chroma)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_png(dir: &Path, name: &str, w: u32, h: u32, rgb: [u8; 3]) {
        image::RgbImage::from_pixel(w, h, image::Rgb(rgb)).save(dir.join(name)).unwrap();
    }

    fn folder(n: usize) -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        for i in 0..n {
            write_png(dir.path(), &format!("img{i:02}.png"), 40, 24, [(i * 20) as u8, 90, 200]);
        }
        dir
    }

    #[test]
    fn index_lists_sorted_images() {
        let dir = folder(8);
        std::fs::write(dir.path().join("notes.txt"), "x").unwrap();
        let idx = build_index(dir.path(), Split::Train).unwrap();
        assert_eq!(idx.len(), 8);
        let names: Vec<_> = idx.files().iter().map(|p| p.file_name().unwrap().to_owned()).collect();
        let mut sorted = names.clone();
        sorted.sort();
        assert_eq!(names, sorted);
    }

    #[test]
    fn empty_directory_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(build_index(dir.path(), Split::Train).is_err());
        assert!(build_index(&dir.path().join("missing"), Split::Train).is_err());
    }

    #[test]
    fn corrupt_file_is_skipped_with_warning() {
        let dir = folder(4);
        std::fs::write(dir.path().join("broken.png"), b"not a png").unwrap();
        let idx = build_index(dir.path(), Split::Train).unwrap();
        assert_eq!(idx.len(), 4);
        assert_eq!(idx.warnings().len(), 1);
    }

    #[test]
    fn manifest_overrides_listing() {
        let dir = folder(3);
        std::fs::write(dir.path().join(MANIFEST), "img02.png\nimg00.png\n").unwrap();
        let idx = build_index(dir.path(), Split::Val).unwrap();
        assert_eq!(idx.len(), 2);
        assert!(idx.files()[0].ends_with("img00.png"));
    }

    #[test]
    fn crop_geometry() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = image::RgbImage::new(512, 256);
        for (x, _, p) in img.enumerate_pixels_mut() {
            *p = image::Rgb([(x / 2) as u8, 100, 50]);
        }
        img.save(dir.path().join("wide.png")).unwrap();
        let idx = build_index(dir.path(), Split::Train).unwrap();
        let resized = idx.resized(0, 256).unwrap();
        assert_eq!((resized.width(), resized.height()), (512, 256));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..5 {
            let (g, c) = idx.sample_pair(0, 256, &mut rng).unwrap();
            assert_eq!((g.width(), g.height(), c.width(), c.height()), (256, 256, 256, 256));
        }
        let small = idx.resized(0, 64).unwrap();
        assert_eq!((small.width(), small.height()), (128, 64));
    }

    #[test]
    fn val_crops_are_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = image::RgbImage::new(50, 30);
        for (x, y, p) in img.enumerate_pixels_mut() {
            *p = image::Rgb([(x * 5) as u8, (y * 8) as u8, 77]);
        }
        img.save(dir.path().join("a.png")).unwrap();
        let idx = build_index(dir.path(), Split::Val).unwrap();
        let a = idx.sample_pair(0, 16, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = idx.sample_pair(0, 16, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn gray_source_has_zero_chroma() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = image::GrayImage::new(20, 20);
        for (x, y, p) in img.enumerate_pixels_mut() {
            *p = image::Luma([(x * 10 + y) as u8]);
        }
        img.save(dir.path().join("g.png")).unwrap();
        let idx = build_index(dir.path(), Split::Val).unwrap();
        let (_, c) = idx.sample_pair(0, 16, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(c.data().iter().all(|v| v.abs() < 1e-3));
    }

    #[test]
    fn batch_counts_and_order() {
        let dir = folder(10);
        let train = build_index(dir.path(), Split::Train).unwrap();
        let b = train.batches(4, 7, 0);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4]);
        assert_eq!(b, train.batches(4, 7, 0));
        assert_ne!(b, train.batches(4, 8, 0));
        assert_ne!(b, train.batches(4, 7, 1));
        let val = build_index(dir.path(), Split::Val).unwrap();
        assert_eq!(val.batches(4, 7, 0).iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
    }

    #[test]
    fn loaded_batches_are_reproducible() {
        let dir = folder(6);
        let idx = build_index(dir.path(), Split::Train).unwrap();
        let ids = &idx.batches(3, 1, 0)[0];
        let a = idx.load_batch(ids, 16, 1, 0).unwrap();
        let b = idx.load_batch(ids, 16, 1, 0).unwrap();
        assert_eq!(a, b);
        let (g, c) = a.tensors().unwrap();
        assert_eq!(g.shape(), &[3, 1, 16, 16]);
        assert_eq!(c.shape(), &[3, 2, 16, 16]);
    }
}
