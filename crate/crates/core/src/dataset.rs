//! Locating fundus images, manual segmentations and FOV masks on disk.
//!
//! Two layouts are recognised:
//!
//! * DRIVE style: `images/`, `1st_manual/` and optionally `mask/`, files
//!   paired by the leading digits of their names (`21_training.ppm` ↔
//!   `21_manual1.pgm`).
//! * Flat, as written by `retseg synth`: `NN_image.ppm`, `NN_manual.pbm`,
//!   `NN_fov.pbm` side by side.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::imagio::{read_netpbm, write_netpbm, BinaryImage, Image, RgbImage};
use crate::pipeline::PipelineError;
use crate::synth::{generate, SynthConfig};

const IMAGE_EXTS: &[&str] = &["ppm", "pgm", "pbm", "pnm"];

/// Leading ASCII digits of a file stem, or the whole stem when it has none.
pub fn pairing_key(stem: &str) -> String {
    let digits: String = stem.chars().take_while(|c| c.is_ascii_digit()).collect();
    if digits.is_empty() {
        stem.to_string()
    } else {
        digits
    }
}

fn sort_key(key: &str) -> (u64, String) {
    (key.parse().unwrap_or(u64::MAX), key.to_string())
}

pub fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Netpbm files directly inside `dir`, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    let entries = fs::read_dir(dir).map_err(|e| PipelineError::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| PipelineError::io(dir, e))?.path();
        let ext = path
            .extension()
            .map(|e| e.to_string_lossy().to_ascii_lowercase());
        if path.is_file() && ext.is_some_and(|e| IMAGE_EXTS.contains(&e.as_str())) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Files of `dir` keyed by [`pairing_key`]; the first name wins on collisions.
pub fn index_dir(dir: &Path) -> Result<BTreeMap<String, PathBuf>, PipelineError> {
    let mut map = BTreeMap::new();
    for path in list_images(dir)? {
        map.entry(pairing_key(&file_stem(&path))).or_insert(path);
    }
    Ok(map)
}

/// Like [`index_dir`], but a file whose stem satisfies `prefer` replaces one
/// that does not.
pub fn index_preferring(
    dir: &Path,
    prefer: impl Fn(&str) -> bool,
) -> Result<BTreeMap<String, PathBuf>, PipelineError> {
    let mut map: BTreeMap<String, (bool, PathBuf)> = BTreeMap::new();
    for path in list_images(dir)? {
        let stem = file_stem(&path);
        let hit = prefer(&stem);
        let key = pairing_key(&stem);
        match map.get(&key) {
            Some((prev, _)) if *prev || !hit => {}
            _ => {
                map.insert(key, (hit, path));
            }
        }
    }
    Ok(map.into_iter().map(|(k, (_, p))| (k, p)).collect())
}

pub fn is_truth_stem(stem: &str) -> bool {
    stem.contains("_manual")
}

pub fn is_mask_stem(stem: &str) -> bool {
    stem.ends_with("_fov") || stem.contains("_mask")
}

/// Manual segmentations under `dir`, or under `dir/1st_manual` if present.
pub fn index_truths(dir: &Path) -> Result<BTreeMap<String, PathBuf>, PipelineError> {
    let sub = dir.join("1st_manual");
    index_preferring(if sub.is_dir() { &sub } else { dir }, is_truth_stem)
}

/// FOV masks under `dir`, or under `dir/mask` if present.
pub fn index_masks(dir: &Path) -> Result<BTreeMap<String, PathBuf>, PipelineError> {
    let sub = dir.join("mask");
    index_preferring(if sub.is_dir() { &sub } else { dir }, is_mask_stem)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetEntry {
    pub key: String,
    pub id: String,
    pub image: PathBuf,
    pub truth: Option<PathBuf>,
    pub mask: Option<PathBuf>,
}

/// Pairs images with truths and masks. Entries are ordered by numeric key.
pub fn discover(dir: &Path, mask_dir: Option<&Path>) -> Result<Vec<DatasetEntry>, PipelineError> {
    let drive_images = dir.join("images");
    let mut entries = Vec::new();
    if drive_images.is_dir() {
        let truths = match dir.join("1st_manual") {
            d if d.is_dir() => index_dir(&d)?,
            _ => BTreeMap::new(),
        };
        let masks = match mask_dir
            .map(Path::to_path_buf)
            .unwrap_or_else(|| dir.join("mask"))
        {
            d if d.is_dir() => index_masks(&d)?,
            _ => BTreeMap::new(),
        };
        for (key, image) in index_dir(&drive_images)? {
            entries.push(DatasetEntry {
                id: file_stem(&image),
                truth: truths.get(&key).cloned(),
                mask: masks.get(&key).cloned(),
                key,
                image,
            });
        }
    } else {
        let masks = match mask_dir {
            Some(d) => index_masks(d)?,
            None => BTreeMap::new(),
        };
        let mut groups: BTreeMap<String, DatasetEntry> = BTreeMap::new();
        let mut truths = BTreeMap::new();
        let mut fovs = BTreeMap::new();
        for path in list_images(dir)? {
            let stem = file_stem(&path);
            let key = pairing_key(&stem);
            if is_truth_stem(&stem) {
                truths.entry(key).or_insert(path);
            } else if is_mask_stem(&stem) {
                fovs.entry(key).or_insert(path);
            } else {
                groups.entry(key.clone()).or_insert(DatasetEntry {
                    key,
                    id: stem,
                    image: path,
                    truth: None,
                    mask: None,
                });
            }
        }
        for (key, e) in groups.iter_mut() {
            e.truth = truths.get(key).cloned();
            e.mask = masks.get(key).or_else(|| fovs.get(key)).cloned();
        }
        entries.extend(groups.into_values());
    }
    entries.sort_by_key(|e| sort_key(&e.key));
    Ok(entries)
}

pub fn read_image_file(path: &Path) -> Result<Image, PipelineError> {
    let bytes = fs::read(path).map_err(|e| PipelineError::io(path, e))?;
    read_netpbm(&bytes).map_err(|source| PipelineError::Codec {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_image_file(path: &Path, image: &Image) -> Result<(), PipelineError> {
    fs::write(path, write_netpbm(image, false)).map_err(|e| PipelineError::io(path, e))
}

pub fn read_rgb(path: &Path) -> Result<RgbImage, PipelineError> {
    match read_image_file(path)? {
        Image::Rgb(c) => Ok(c),
        other => Err(PipelineError::WrongKind {
            path: path.to_path_buf(),
            expected: "PPM colour image",
            found: kind_name(&other),
        }),
    }
}

/// Reads a mask-like image; see [`Image::to_mask`] for the gray/colour rule.
pub fn read_mask(path: &Path) -> Result<BinaryImage, PipelineError> {
    Ok(read_image_file(path)?.to_mask())
}

pub fn kind_name(img: &Image) -> &'static str {
    match img {
        Image::Gray(_) => "PGM",
        Image::Rgb(_) => "PPM",
        Image::Binary(_) => "PBM",
    }
}

/// One fundus image with its reference segmentation.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: RgbImage,
    pub truth: BinaryImage,
    pub mask: Option<BinaryImage>,
}

pub fn load_sample(entry: &DatasetEntry) -> Result<Sample, PipelineError> {
    let truth_path = entry
        .truth
        .as_ref()
        .ok_or_else(|| PipelineError::MissingCounterpart(entry.id.clone()))?;
    Ok(Sample {
        id: entry.id.clone(),
        image: read_rgb(&entry.image)?,
        truth: read_mask(truth_path)?,
        mask: entry.mask.as_deref().map(read_mask).transpose()?,
    })
}

/// Name stem of the `index`-th (0-based) synthetic sample: `01`, `02`, ...
pub fn synth_stem(index: usize) -> String {
    format!("{:02}", index + 1)
}

/// `count` synthetic samples seeded `base_seed + index`.
pub fn synth_samples(cfg: &SynthConfig, count: usize) -> Result<Vec<Sample>, PipelineError> {
    (0..count)
        .map(|i| {
            let s = generate(&SynthConfig {
                seed: cfg.seed.wrapping_add(i as u64),
                ..*cfg
            })?;
            Ok(Sample {
                id: format!("{}_image", synth_stem(i)),
                image: s.image,
                truth: s.truth,
                mask: Some(s.fov),
            })
        })
        .collect()
}

/// Writes `NN_image.ppm`, `NN_manual.pbm` and `NN_fov.pbm` for each sample.
pub fn write_synth_dataset(
    cfg: &SynthConfig,
    count: usize,
    out: &Path,
) -> Result<Vec<PathBuf>, PipelineError> {
    fs::create_dir_all(out).map_err(|e| PipelineError::io(out, e))?;
    let mut written = Vec::new();
    for (i, s) in synth_samples(cfg, count)?.into_iter().enumerate() {
        let stem = synth_stem(i);
        let files = [
            (format!("{stem}_image.ppm"), Image::Rgb(s.image)),
            (format!("{stem}_manual.pbm"), Image::Binary(s.truth)),
            (
                format!("{stem}_fov.pbm"),
                Image::Binary(s.mask.expect("synthetic samples carry a FOV")),
            ),
        ];
        for (name, img) in files {
            let path = out.join(name);
            write_image_file(&path, &img)?;
            written.push(path);
        }
    }
    Ok(written)
}
