//! Dataset manifests, image files and IDX digit files.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};

use oodkit_core::dataset::Sample;
use oodkit_core::imaging::resize_bilinear;
use oodkit_core::tensor::Tensor;

use crate::error::{create_dir, read_bytes, Error, Result};

pub const MANIFEST_FILE: &str = "manifest.csv";
const HEADER: [&str; 3] = ["path", "label", "split"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Calibrate,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Calibrate => "calibrate",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "calibrate" => Some(Split::Calibrate),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    /// 1-based data row; the header is row 0.
    pub row: usize,
    pub path: String,
    /// Class name or index as written; empty for unlabelled images.
    pub label: String,
    pub split: Split,
}

/// Class names in index order plus the index of the malignant class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMap {
    pub names: Vec<String>,
    pub malignant: usize,
}

impl ClassMap {
    /// Classes named `"0"`..`"k-1"`, malignant last.
    pub fn numeric(k: usize) -> Self {
        ClassMap {
            names: (0..k).map(|i| i.to_string()).collect(),
            malignant: k.saturating_sub(1),
        }
    }

    pub fn new(names: Vec<String>, malignant: usize) -> Result<Self> {
        if malignant >= names.len() {
            return Err(Error::Usage(format!(
                "malignant class {malignant} outside the {} configured classes",
                names.len()
            )));
        }
        Ok(ClassMap { names, malignant })
    }

    /// Name lookup first, then a bare index.
    pub fn resolve(&self, label: &str) -> Option<usize> {
        self.names
            .iter()
            .position(|n| n == label)
            .or_else(|| label.parse::<usize>().ok().filter(|i| *i < self.names.len()))
    }
}

#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub path: PathBuf,
    pub rows: Vec<ManifestRow>,
}

/// One decoded image with its manifest context.
#[derive(Debug, Clone)]
pub struct Item {
    pub id: String,
    pub image: Tensor,
    pub label: Option<usize>,
}

impl DatasetManifest {
    /// Reads a manifest CSV, or `manifest.csv` inside a directory.
    pub fn read(path: &Path) -> Result<Self> {
        let path = if path.is_dir() {
            path.join(MANIFEST_FILE)
        } else {
            path.to_path_buf()
        };
        let bytes = read_bytes(&path)?;
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(bytes.as_slice());
        let header = reader.headers().map_err(|e| Error::parse(&path, e))?;
        if header.iter().collect::<Vec<_>>() != HEADER {
            return Err(Error::parse(&path, format!("header must be {}", HEADER.join(","))));
        }
        let mut rows = Vec::new();
        for (i, record) in reader.records().enumerate() {
            let row = i + 1;
            let record = record.map_err(|e| Error::row(&path, row, e))?;
            let split = Split::parse(&record[2])
                .ok_or_else(|| Error::row(&path, row, format!("unknown split {:?}", &record[2])))?;
            if record[0].is_empty() {
                return Err(Error::row(&path, row, "empty path"));
            }
            rows.push(ManifestRow {
                row,
                path: record[0].to_string(),
                label: record[1].to_string(),
                split,
            });
        }
        let manifest = DatasetManifest { path, rows };
        manifest.check_disjoint()?;
        Ok(manifest)
    }

    /// Every image path appears once, so no image sits in two splits.
    pub fn check_disjoint(&self) -> Result<()> {
        let mut seen: HashMap<&str, &ManifestRow> = HashMap::new();
        for r in &self.rows {
            if let Some(first) = seen.insert(&r.path, r) {
                return Err(Error::row(
                    &self.path,
                    r.row,
                    format!("{} already listed at row {} ({} split)", r.path, first.row, first.split),
                ));
            }
        }
        Ok(())
    }

    pub fn root(&self) -> &Path {
        self.path.parent().unwrap_or(Path::new("."))
    }

    pub fn rows_in(&self, split: Option<Split>) -> impl Iterator<Item = &ManifestRow> {
        self.rows.iter().filter(move |r| split.is_none_or(|s| r.split == s))
    }

    pub fn label_of(&self, row: &ManifestRow, classes: &ClassMap) -> Result<Option<usize>> {
        if row.label.is_empty() {
            return Ok(None);
        }
        classes
            .resolve(&row.label)
            .map(Some)
            .ok_or_else(|| Error::row(&self.path, row.row, format!("unknown label {:?}", row.label)))
    }

    /// Decodes one row at native resolution.
    pub fn decode(&self, row: &ManifestRow) -> Result<Tensor> {
        let file = self.root().join(&row.path);
        let bytes =
            std::fs::read(&file).map_err(|e| Error::row(&self.path, row.row, format!("{}: {e}", file.display())))?;
        decode_gray(&bytes).map_err(|e| Error::row(&self.path, row.row, format!("{}: {e}", file.display())))
    }

    /// Images of `split` (all rows if `None`) resized to `size x size`, in
    /// manifest order.
    pub fn load(&self, size: usize, split: Option<Split>, classes: &ClassMap) -> Result<Vec<Item>> {
        self.rows_in(split)
            .map(|row| {
                let label = self.label_of(row, classes)?;
                let image = self.decode(row)?;
                let image = if image.shape()[1] == size && image.shape()[2] == size {
                    image
                } else {
                    resize_bilinear(&image, size, size)?
                };
                Ok(Item {
                    id: row.path.clone(),
                    image,
                    label,
                })
            })
            .collect()
    }
}

/// Training samples; every item must carry a label.
pub fn labelled(items: Vec<Item>, source: &Path) -> Result<Vec<Sample>> {
    items
        .into_iter()
        .map(|it| match it.label {
            Some(label) => Ok(Sample {
                id: it.id,
                image: it.image,
                label,
            }),
            None => Err(Error::parse(source, format!("{} has no label", it.id))),
        })
        .collect()
}

/// Grayscale `[1, h, w]` tensor in `[0, 1]`. Color input is converted to luma.
pub fn decode_gray(bytes: &[u8]) -> std::result::Result<Tensor, String> {
    let img = image::load_from_memory(bytes).map_err(|e| e.to_string())?.to_luma8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|p| f64::from(p) / 255.0).collect();
    Tensor::new(&[1, h as usize, w as usize], data).map_err(|e| e.to_string())
}

/// Writes a `[1, h, w]` tensor as an 8-bit grayscale PNG.
pub fn write_png(path: &Path, image: &Tensor) -> Result<()> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 1 {
        return Err(Error::Internal(format!("cannot write image of shape {s:?}")));
    }
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    let pixels = image
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let buf = image::GrayImage::from_raw(s[2] as u32, s[1] as u32, pixels)
        .ok_or_else(|| Error::Internal("image buffer size".into()))?;
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::write(path, std::io::Error::other(e)))
}

/// Writes `path,label,split` rows with a header.
pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    let mut emit = |fields: &[&str]| w.write_record(fields).map_err(|e| Error::write(path, e.into()));
    emit(&HEADER)?;
    for r in rows {
        emit(&[&r.path, &r.label, r.split.name()])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::write(path, e.into_error()))?;
    crate::error::write_bytes(path, &bytes)
}

/// IDX digit files, keeping only `digits` and relabelling them `0..digits.len()`.
/// Images are resized to `size x size`.
pub fn load_idx_subset(images: &Path, labels: &Path, digits: &[u8], size: usize) -> Result<Vec<Sample>> {
    let img = read_bytes(images)?;
    let lab = read_bytes(labels)?;
    let samples = oodkit_core::idx::load_idx(&img, &lab, "idx_").map_err(|e| Error::parse(images, e))?;
    samples
        .into_iter()
        .filter_map(|s| {
            let pos = digits.iter().position(|d| usize::from(*d) == s.label)?;
            Some((s, pos))
        })
        .map(|(s, pos)| {
            let image = if s.image.shape()[1] == size && s.image.shape()[2] == size {
                s.image
            } else {
                resize_bilinear(&s.image, size, size)?
            };
            Ok(Sample {
                id: s.id,
                image,
                label: pos,
            })
        })
        .collect()
}
