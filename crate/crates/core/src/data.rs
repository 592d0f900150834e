//! Dataset manifests and image preprocessing.
//!
//! A manifest is either a CSV with a `path,label` header, a directory with
//! one sub-directory per class, or a Tiny ImageNet style validation folder
//! (`images/` plus `val_annotations.txt`). Entries are always ordered by path
//! and class ids by class name, so the same inputs give the same ids.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::par::{self, Execution};
use crate::vit::Image;

pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "bmp"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: i64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    /// Class names by id, when the layout provides them.
    pub class_names: Option<Vec<String>>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn labels(&self) -> Vec<i64> {
        self.entries.iter().map(|e| e.label).collect()
    }

    pub fn num_classes(&self) -> usize {
        self.entries.iter().map(|e| e.label).collect::<BTreeSet<_>>().len()
    }

    fn finish(mut entries: Vec<ManifestEntry>, class_names: Option<Vec<String>>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Manifest("no images found".into()));
        }
        entries.sort_by(|a, b| a.path.cmp(&b.path));
        for w in entries.windows(2) {
            if w[0].path == w[1].path {
                return Err(Error::Manifest(format!("duplicate entry {}", w[0].path.display())));
            }
        }
        let ids: BTreeSet<i64> = entries.iter().map(|e| e.label).collect();
        let contiguous = ids.iter().enumerate().all(|(i, &id)| id == i as i64);
        if !contiguous {
            return Err(Error::Manifest(format!(
                "class ids must be contiguous from 0, found {:?}",
                ids.iter().take(10).collect::<Vec<_>>()
            )));
        }
        Ok(Self { entries, class_names })
    }
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn sorted_dir(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        out.push(entry.map_err(|e| Error::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

fn from_csv(path: &Path) -> Result<DatasetManifest> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Manifest(e.to_string()))?
        .clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Manifest(format!("CSV header lacks a `{name}` column")))
    };
    let (pc, lc) = (col("path")?, col("label")?);
    let mut entries = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Manifest(e.to_string()))?;
        let raw = record.get(pc).unwrap_or("").trim();
        let label: i64 = record
            .get(lc)
            .unwrap_or("")
            .trim()
            .parse()
            .map_err(|_| Error::Manifest(format!("row {}: label is not an integer", line + 2)))?;
        let p = Path::new(raw);
        let full = if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        if !full.is_file() {
            return Err(Error::Manifest(format!("row {}: {} does not exist", line + 2, full.display())));
        }
        entries.push(ManifestEntry { path: full, label });
    }
    DatasetManifest::finish(entries, None)
}

fn from_val_annotations(dir: &Path, ann: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(ann).map_err(|e| Error::io(ann, e))?;
    let mut pairs = Vec::new();
    for (line, l) in text.lines().enumerate() {
        if l.trim().is_empty() {
            continue;
        }
        let mut cols = l.split('\t');
        let (file, class) = match (cols.next(), cols.next()) {
            (Some(f), Some(c)) => (f.trim(), c.trim()),
            _ => return Err(Error::Manifest(format!("{} line {}: expected file<TAB>class", ann.display(), line + 1))),
        };
        pairs.push((dir.join("images").join(file), class.to_string()));
    }
    let classes: Vec<String> = pairs.iter().map(|p| p.1.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let ids: BTreeMap<&str, i64> = classes.iter().enumerate().map(|(i, c)| (c.as_str(), i as i64)).collect();
    let entries = pairs
        .iter()
        .map(|(p, c)| {
            if !p.is_file() {
                return Err(Error::Manifest(format!("{} does not exist", p.display())));
            }
            Ok(ManifestEntry {
                path: p.clone(),
                label: ids[c.as_str()],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    DatasetManifest::finish(entries, Some(classes))
}

fn from_class_dirs(dir: &Path) -> Result<DatasetManifest> {
    let mut classes = Vec::new();
    let mut entries = Vec::new();
    for sub in sorted_dir(dir)?.into_iter().filter(|p| p.is_dir()) {
        let files: Vec<PathBuf> = sorted_dir(&sub)?.into_iter().filter(|p| p.is_file() && is_image(p)).collect();
        if files.is_empty() {
            continue;
        }
        let label = classes.len() as i64;
        classes.push(sub.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default());
        entries.extend(files.into_iter().map(|path| ManifestEntry { path, label }));
    }
    DatasetManifest::finish(entries, Some(classes))
}

/// Load a manifest from a CSV file or a directory layout.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    if path.is_file() {
        return from_csv(path);
    }
    if !path.is_dir() {
        return Err(Error::Manifest(format!("{} is neither a file nor a directory", path.display())));
    }
    let ann = path.join("val_annotations.txt");
    if ann.is_file() && path.join("images").is_dir() {
        from_val_annotations(path, &ann)
    } else {
        from_class_dirs(path)
    }
}

/// Bilinear resize of an `h × w × 3` image with half-pixel centers and edge
/// clamping.
pub fn resize_bilinear(src: &[f32], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f32> {
    assert_eq!(src.len(), h * w * 3, "source is not h × w × 3");
    let axis = |out: usize, inp: usize| -> Vec<(usize, usize, f32)> {
        let scale = inp as f32 / out as f32;
        (0..out)
            .map(|o| {
                let s = ((o as f32 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f32);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, s - i0 as f32)
            })
            .collect()
    };
    let ys = axis(out_h, h);
    let xs = axis(out_w, w);
    let at = |y: usize, x: usize, c: usize| src[(y * w + x) * 3 + c];
    let lerp = |a: f32, b: f32, t: f32| a + (b - a) * t;
    let mut out = Vec::with_capacity(out_h * out_w * 3);
    for &(y0, y1, ty) in &ys {
        for &(x0, x1, tx) in &xs {
            for c in 0..3 {
                let top = lerp(at(y0, x0, c), at(y0, x1, c), tx);
                let bottom = lerp(at(y1, x0, c), at(y1, x1, c), tx);
                out.push(lerp(top, bottom, ty));
            }
        }
    }
    out
}

/// Square-resize RGB bytes (`h × w × 3`) and apply ImageNet normalization.
pub fn preprocess_rgb(rgb: &[u8], h: usize, w: usize, size: usize) -> Result<Image> {
    if rgb.len() != h * w * 3 || h == 0 || w == 0 {
        return Err(Error::Shape(format!("{} bytes is not a {h}x{w} RGB image", rgb.len())));
    }
    let unit: Vec<f32> = rgb.iter().map(|&b| b as f32 / 255.0).collect();
    let mut data = if h == size && w == size {
        unit
    } else {
        resize_bilinear(&unit, h, w, size, size)
    };
    for px in data.chunks_exact_mut(3) {
        for c in 0..3 {
            px[c] = (px[c] - IMAGENET_MEAN[c]) / IMAGENET_STD[c];
        }
    }
    Image::new(size, data)
}

/// Decode an encoded image (PNG, JPEG, BMP) and preprocess it.
pub fn preprocess(bytes: &[u8], size: usize) -> Result<Image> {
    let img = image::load_from_memory(bytes).map_err(|e| Error::Decode {
        path: PathBuf::new(),
        reason: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    preprocess_rgb(rgb.as_raw(), h as usize, w as usize, size)
}

pub fn preprocess_file(path: &Path, size: usize) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    preprocess(&bytes, size).map_err(|e| match e {
        Error::Decode { reason, .. } => Error::Decode {
            path: path.to_path_buf(),
            reason,
        },
        other => other,
    })
}

/// Load and preprocess every manifest entry, in manifest order.
pub fn load_images(manifest: &DatasetManifest, size: usize, exec: Execution) -> Result<Vec<Image>> {
    par::try_map_range(exec, manifest.len(), |i| preprocess_file(&manifest.entries[i].path, size))
}
