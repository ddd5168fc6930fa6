//! CSV manifests (`path,label,mask_path`) of PNG images and masks.
//!
//! Paths are relative to the manifest's directory. Masks are 8-bit
//! grayscale with background 0, disc 128 and cup 255.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Image, LabeledSample, Mask, MaskedSample};
use crate::error::{Error, Result};

/// Gray levels used for background, disc and cup in mask files.
pub const MASK_FILE_LEVELS: [u8; 3] = [0, 128, 255];

const NUM_WORKERS_ENV: &str = "L2TKT_NUM_WORKERS";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub label: Option<u8>,
    pub mask_path: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
    /// Manifest file stem, e.g. `train`.
    pub split: Option<String>,
}

#[derive(Deserialize, Serialize)]
struct Row {
    path: String,
    label: String,
    mask_path: String,
}

impl DatasetManifest {
    pub fn read(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let mut reader = csv::Reader::from_path(path)?;
        let headers = reader.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["path", "label", "mask_path"] {
            return Err(Error::invalid(format!(
                "{}: manifest header must be `path,label,mask_path`",
                path.display()
            )));
        }
        let mut entries = Vec::new();
        for (i, row) in reader.deserialize::<Row>().enumerate() {
            let row = row?;
            let label = match row.label.trim() {
                "" => None,
                "0" => Some(0),
                "1" => Some(1),
                other => {
                    return Err(Error::invalid(format!(
                        "{} row {}: label `{other}` is not 0 or 1",
                        path.display(),
                        i + 1
                    )))
                }
            };
            let mask_path = Some(row.mask_path.trim().to_string()).filter(|s| !s.is_empty());
            entries.push(ManifestEntry {
                path: row.path.trim().to_string(),
                label,
                mask_path,
            });
        }
        Ok(Self {
            root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
            entries,
            split: path.file_stem().map(|s| s.to_string_lossy().into_owned()),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for e in &self.entries {
            w.serialize(Row {
                path: e.path.clone(),
                label: e.label.map(|l| l.to_string()).unwrap_or_default(),
                mask_path: e.mask_path.clone().unwrap_or_default(),
            })?;
        }
        if self.entries.is_empty() {
            w.write_record(["path", "label", "mask_path"])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }
}

fn workers() -> usize {
    std::env::var(NUM_WORKERS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

/// Order-preserving map over entries on up to `L2TKT_NUM_WORKERS` threads.
fn parallel_map<T: Send>(
    entries: &[ManifestEntry],
    f: impl Fn(usize, &ManifestEntry) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    let n_workers = workers().min(entries.len().max(1));
    if n_workers <= 1 {
        return entries.iter().enumerate().map(|(i, e)| f(i, e)).collect();
    }
    let chunk = entries.len().div_ceil(n_workers);
    std::thread::scope(|scope| {
        let handles: Vec<_> = entries
            .chunks(chunk)
            .enumerate()
            .map(|(c, part)| {
                let f = &f;
                scope.spawn(move || {
                    part.iter()
                        .enumerate()
                        .map(|(j, e)| f(c * chunk + j, e))
                        .collect::<Result<Vec<T>>>()
                })
            })
            .collect();
        let mut out = Vec::with_capacity(entries.len());
        for h in handles {
            out.extend(h.join().expect("loader thread panicked")?);
        }
        Ok(out)
    })
}

fn read_image(path: &Path) -> Result<Image> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0f32; 3 * w * h];
    for (x, y, px) in img.enumerate_pixels() {
        for ch in 0..3 {
            data[ch * w * h + y as usize * w + x as usize] = px[ch] as f32 / 255.0;
        }
    }
    Image::new(3, h, w, data)
}

fn read_mask(path: &Path, image: &Image) -> Result<Mask> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_luma8();
    let dims = (img.width(), img.height());
    let image_dims = (image.width as u32, image.height as u32);
    if dims != image_dims {
        return Err(Error::MaskSize {
            path: path.to_path_buf(),
            image: image_dims,
            mask: dims,
        });
    }
    let mut codes = Vec::with_capacity(img.len());
    for (x, y, px) in img.enumerate_pixels() {
        let code = MASK_FILE_LEVELS
            .iter()
            .position(|&lvl| lvl == px[0])
            .ok_or_else(|| Error::MaskValue {
                value: px[0],
                row: y,
                col: x,
                path: path.to_path_buf(),
            })?;
        codes.push(code as u8);
    }
    Mask::new(image.height, image.width, codes)
}

/// Loads every entry with a label. Sample ids are manifest row indices.
pub fn load_labeled_dataset(manifest: &DatasetManifest) -> Result<Vec<LabeledSample>> {
    parallel_map(&manifest.entries, |i, e| {
        let label = e.label.ok_or_else(|| {
            Error::invalid(format!("manifest row {} ({}) has no label", i + 1, e.path))
        })?;
        Ok(LabeledSample {
            id: i as u64,
            image: read_image(&manifest.resolve(&e.path))?,
            label,
        })
    })
}

/// Loads every entry with a mask. Masks whose cup extends beyond the disc
/// are accepted with a warning on stderr.
pub fn load_masked_dataset(manifest: &DatasetManifest) -> Result<Vec<MaskedSample>> {
    parallel_map(&manifest.entries, |i, e| {
        let mask_rel = e.mask_path.as_deref().ok_or_else(|| {
            Error::invalid(format!("manifest row {} ({}) has no mask", i + 1, e.path))
        })?;
        let image = read_image(&manifest.resolve(&e.path))?;
        let mask = read_mask(&manifest.resolve(mask_rel), &image)?;
        if !mask.cup_within_disc() {
            eprintln!("warning: cup extends beyond disc in {mask_rel}");
        }
        Ok(MaskedSample {
            id: i as u64,
            image,
            mask,
        })
    })
}

fn write_png(
    path: &Path,
    width: usize,
    height: usize,
    buf: &[u8],
    color: image::ExtendedColorType,
) -> Result<()> {
    image::save_buffer_with_format(
        path,
        buf,
        width as u32,
        height as u32,
        color,
        image::ImageFormat::Png,
    )
    .map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn image_bytes(img: &Image) -> Result<Vec<u8>> {
    if img.channels != 3 {
        return Err(Error::Channels {
            expected: 3,
            actual: img.channels,
        });
    }
    let plane = img.height * img.width;
    let mut buf = Vec::with_capacity(3 * plane);
    for p in 0..plane {
        for ch in 0..3 {
            buf.push((img.data[ch * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(buf)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes `<dir>/<name>/<id>.png` for each sample plus the manifest
/// `<dir>/<name>.csv`.
pub fn write_labeled_dataset(dir: &Path, name: &str, samples: &[LabeledSample]) -> Result<PathBuf> {
    let img_dir = dir.join(name);
    create_dir(&img_dir)?;
    let mut entries = Vec::with_capacity(samples.len());
    for s in samples {
        let rel = format!("{name}/{:05}.png", s.id);
        write_png(
            &dir.join(&rel),
            s.image.width,
            s.image.height,
            &image_bytes(&s.image)?,
            image::ExtendedColorType::Rgb8,
        )?;
        entries.push(ManifestEntry {
            path: rel,
            label: Some(s.label),
            mask_path: None,
        });
    }
    let manifest_path = dir.join(format!("{name}.csv"));
    DatasetManifest {
        root: dir.to_path_buf(),
        entries,
        split: Some(name.to_string()),
    }
    .write(&manifest_path)?;
    Ok(manifest_path)
}

/// Writes images, masks (`<dir>/<name>/masks/<id>.png`) and the manifest.
pub fn write_masked_dataset(dir: &Path, name: &str, samples: &[MaskedSample]) -> Result<PathBuf> {
    let mask_dir = dir.join(name).join("masks");
    create_dir(&mask_dir)?;
    let mut entries = Vec::with_capacity(samples.len());
    for s in samples {
        let rel = format!("{name}/{:05}.png", s.id);
        let mask_rel = format!("{name}/masks/{:05}.png", s.id);
        write_png(
            &dir.join(&rel),
            s.image.width,
            s.image.height,
            &image_bytes(&s.image)?,
            image::ExtendedColorType::Rgb8,
        )?;
        let levels: Vec<u8> = s
            .mask
            .codes
            .iter()
            .map(|&c| MASK_FILE_LEVELS[c as usize])
            .collect();
        write_png(
            &dir.join(&mask_rel),
            s.mask.width,
            s.mask.height,
            &levels,
            image::ExtendedColorType::L8,
        )?;
        entries.push(ManifestEntry {
            path: rel,
            label: None,
            mask_path: Some(mask_rel),
        });
    }
    let manifest_path = dir.join(format!("{name}.csv"));
    DatasetManifest {
        root: dir.to_path_buf(),
        entries,
        split: Some(name.to_string()),
    }
    .write(&manifest_path)?;
    Ok(manifest_path)
}
