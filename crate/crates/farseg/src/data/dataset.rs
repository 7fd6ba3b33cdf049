//! On-disk dataset layout and loading.
//!
//! A dataset directory holds `images/` and `masks/` with matching file
//! stems; images are 8-bit RGB rasters, masks single-channel 8-bit rasters
//! whose value is the class id (255 reserved for ignore). Generators add a
//! `manifest.json` describing how the data was produced.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct LabeledSample {
    pub stem: String,
    /// `[H, W, 3]` RGB.
    pub image: Array3<u8>,
    /// `[H, W]` class ids.
    pub mask: Array2<u8>,
}

#[derive(Debug, Default, Clone)]
pub struct Dataset {
    pub samples: Vec<LabeledSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Problems found while pairing images with masks.
#[derive(Debug, Default)]
pub struct LoadReport {
    pub loaded: usize,
    /// Image stems with no matching mask.
    pub missing_masks: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct LoadOptions {
    /// When set, masks must stay below this class count (ignore excepted).
    pub num_classes: Option<usize>,
    pub ignore_label: Option<u8>,
    /// Abort on missing masks instead of reporting them.
    pub strict: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            num_classes: None,
            ignore_label: Some(255),
            strict: false,
        }
    }
}

pub fn image_path(root: &Path, stem: &str) -> PathBuf {
    root.join("images").join(format!("{stem}.png"))
}

pub fn mask_path(root: &Path, stem: &str) -> PathBuf {
    root.join("masks").join(format!("{stem}.png"))
}

pub fn read_image(path: &Path) -> Result<Array3<u8>> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    Array3::from_shape_vec((h as usize, w as usize, 3), img.into_raw())
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

pub fn read_mask(path: &Path) -> Result<Array2<u8>> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .to_luma8();
    let (w, h) = img.dimensions();
    Array2::from_shape_vec((h as usize, w as usize), img.into_raw())
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

pub fn write_image(path: &Path, data: &Array3<u8>) -> Result<()> {
    let (h, w, c) = data.dim();
    assert_eq!(c, 3, "images are RGB");
    let buf: Vec<u8> = data.iter().copied().collect();
    let img = image::RgbImage::from_raw(w as u32, h as u32, buf)
        .expect("buffer matches dimensions");
    img.save(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

pub fn write_mask(path: &Path, data: &Array2<u8>) -> Result<()> {
    let (h, w) = data.dim();
    let buf: Vec<u8> = data.iter().copied().collect();
    let img = image::GrayImage::from_raw(w as u32, h as u32, buf)
        .expect("buffer matches dimensions");
    img.save(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Writes the `images/` + `masks/` layout plus a manifest.
pub fn save_dataset(
    root: &Path,
    samples: &[LabeledSample],
    manifest: Option<&serde_json::Value>,
) -> Result<()> {
    fs::create_dir_all(root.join("images")).map_err(|e| Error::io(root, e))?;
    fs::create_dir_all(root.join("masks")).map_err(|e| Error::io(root, e))?;
    for s in samples {
        write_image(&image_path(root, &s.stem), &s.image)?;
        write_mask(&mask_path(root, &s.stem), &s.mask)?;
    }
    if let Some(manifest) = manifest {
        let path = root.join("manifest.json");
        let text = serde_json::to_string_pretty(manifest)
            .map_err(|e| Error::Data(format!("manifest: {e}")))?;
        fs::write(&path, text).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Loads every image/mask pair under `root`, matching by stem.
pub fn load_dataset(root: &Path, options: &LoadOptions) -> Result<(Dataset, LoadReport)> {
    let images_dir = root.join("images");
    if !images_dir.is_dir() {
        return Err(Error::Data(format!(
            "{} does not contain an images/ directory",
            root.display()
        )));
    }
    let mut stems: Vec<String> = Vec::new();
    for entry in fs::read_dir(&images_dir).map_err(|e| Error::io(&images_dir, e))? {
        let entry = entry.map_err(|e| Error::io(&images_dir, e))?;
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                stems.push(stem.to_owned());
            }
        }
    }
    stems.sort();
    if stems.is_empty() {
        log::warn!("{}: empty dataset (no PNG images found)", images_dir.display());
    }

    let mut dataset = Dataset::default();
    let mut report = LoadReport::default();
    for stem in stems {
        let mpath = mask_path(root, &stem);
        if !mpath.is_file() {
            if options.strict {
                return Err(Error::Data(format!(
                    "missing mask for image `{stem}` (strict mode)"
                )));
            }
            report.missing_masks.push(stem);
            continue;
        }
        let image = read_image(&image_path(root, &stem))?;
        let mask = read_mask(&mpath)?;
        if image.dim().0 != mask.dim().0 || image.dim().1 != mask.dim().1 {
            return Err(Error::Data(format!(
                "image and mask for `{stem}` disagree on size: {:?} vs {:?}",
                (image.dim().0, image.dim().1),
                mask.dim()
            )));
        }
        if let Some(k) = options.num_classes {
            if let Some(&bad) = mask
                .iter()
                .find(|&&v| (v as usize) >= k && Some(v) != options.ignore_label)
            {
                return Err(Error::Data(format!(
                    "mask for `{stem}` contains label {bad} outside the {k}-class range"
                )));
            }
        }
        dataset.samples.push(LabeledSample { stem, image, mask });
        report.loaded += 1;
    }
    if !report.missing_masks.is_empty() {
        log::warn!(
            "{} images without masks: {}",
            report.missing_masks.len(),
            report.missing_masks.join(", ")
        );
    }
    Ok((dataset, report))
}

/// Loader pinned to the aerial-benchmark layout: 15 foreground categories
/// plus background, ignore label 255.
pub fn load_isaid(root: &Path, strict: bool) -> Result<(Dataset, LoadReport)> {
    load_dataset(
        root,
        &LoadOptions {
            num_classes: Some(16),
            ignore_label: Some(255),
            strict,
        },
    )
}

/// Class-id histogram over every mask in the dataset.
pub fn class_histogram(dataset: &Dataset) -> BTreeMap<u8, u64> {
    let mut hist = BTreeMap::new();
    for s in &dataset.samples {
        for &v in s.mask.iter() {
            *hist.entry(v).or_insert(0) += 1;
        }
    }
    hist
}
