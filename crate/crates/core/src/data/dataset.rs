use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// The five KDEF camera angles, in file-name code form.
pub const KDEF_ANGLES: [&str; 5] = ["FL", "HL", "S", "HR", "FR"];

/// A labeled face crop with pixel values in `[0, 1]`, shaped `(3, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub label: usize,
    pub subject_id: Option<String>,
    pub source_path: PathBuf,
}

/// One indexed image file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entry {
    pub path: PathBuf,
    pub label: usize,
    pub subject_id: Option<String>,
}

/// Files that could not be decoded, with the decoder's message.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BadFile {
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoadOptions {
    /// Drop undecodable files (reported in [`DatasetIndex::bad_files`])
    /// instead of failing.
    pub skip_bad: bool,
    /// KDEF angle codes to keep; files whose names do not follow the KDEF
    /// pattern are always kept.
    pub kdef_angles: Vec<String>,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            skip_bad: false,
            kdef_angles: KDEF_ANGLES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

/// A dataset laid out as `root/<class_name>/*.{png,jpg,jpeg}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub root: PathBuf,
    /// Class names, sorted; the label of a class is its position here.
    pub classes: Vec<String>,
    /// Entries sorted by path.
    pub entries: Vec<Entry>,
    pub bad_files: Vec<BadFile>,
}

impl DatasetIndex {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.label).collect()
    }

    pub fn subjects(&self) -> Vec<Option<String>> {
        self.entries.iter().map(|e| e.subject_id.clone()).collect()
    }

    /// Per-class sample counts.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes.len()];
        for e in &self.entries {
            counts[e.label] += 1;
        }
        counts
    }

    /// Decodes entry `i` at its native resolution.
    pub fn load_sample(&self, i: usize) -> Result<Sample> {
        let e = self
            .entries
            .get(i)
            .ok_or_else(|| Error::Data(format!("sample index {i} out of range ({} samples)", self.len())))?;
        Ok(Sample {
            image: super::preprocess::read_image(&e.path)?,
            label: e.label,
            subject_id: e.subject_id.clone(),
            source_path: e.path.clone(),
        })
    }
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

/// KDEF file stem `AF01ANS` / `BM23HAFL`: session, sex, two-digit id,
/// expression code, angle code.
fn parse_kdef(stem: &str) -> Option<(String, String)> {
    let b = stem.as_bytes();
    if !(7..=8).contains(&b.len()) {
        return None;
    }
    let ok = matches!(b[0], b'A' | b'B')
        && matches!(b[1], b'F' | b'M')
        && b[2].is_ascii_digit()
        && b[3].is_ascii_digit()
        && b[4..].iter().all(|c| c.is_ascii_uppercase());
    let angle = &stem[6..];
    if ok && KDEF_ANGLES.contains(&angle) {
        Some((stem[1..4].to_string(), angle.to_string()))
    } else {
        None
    }
}

/// Subject id from a file name: the KDEF person code, or the text before the
/// first `_` (fixture names look like `s03_000.png`).
pub fn subject_from_name(path: &Path) -> Option<String> {
    let stem = path.file_stem()?.to_str()?;
    if let Some((subject, _)) = parse_kdef(stem) {
        return Some(subject);
    }
    stem.split_once('_').map(|(s, _)| s.to_string()).filter(|s| !s.is_empty())
}

/// Indexes `root`, verifying that every image header decodes.
///
/// Class directories are sorted and become labels `0..K`; files inside each
/// are sorted by path, so the order is identical across runs and platforms.
pub fn load_dataset(root: impl AsRef<Path>, options: &LoadOptions) -> Result<DatasetIndex> {
    let root = root.as_ref();
    if !root.is_dir() {
        return Err(Error::Config(format!("dataset root {} does not exist or is not a directory", root.display())));
    }
    let mut class_dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|d| d.ok().map(|d| d.path()))
        .filter(|p| p.is_dir())
        .collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(Error::Data(format!("{} has no class sub-directories", root.display())));
    }

    let mut classes = Vec::with_capacity(class_dirs.len());
    let mut entries = Vec::new();
    let mut bad_files = Vec::new();
    for (label, dir) in class_dirs.iter().enumerate() {
        let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        let mut files: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|d| d.ok().map(|d| d.path()))
            .filter(|p| p.is_file() && is_image(p))
            .filter(|p| {
                let angle = p.file_stem().and_then(|s| s.to_str()).and_then(parse_kdef).map(|(_, a)| a);
                angle.map_or(true, |a| options.kdef_angles.iter().any(|k| *k == a))
            })
            .collect();
        files.sort();
        if files.is_empty() {
            log::warn!("class directory {} contains no images", dir.display());
        }
        for path in files {
            match image::ImageReader::open(&path).and_then(|r| r.with_guessed_format()) {
                Ok(r) => match r.into_dimensions() {
                    Ok(_) => entries.push(Entry {
                        subject_id: subject_from_name(&path),
                        path,
                        label,
                    }),
                    Err(e) => bad_files.push(BadFile {
                        path,
                        reason: e.to_string(),
                    }),
                },
                Err(e) => bad_files.push(BadFile {
                    path,
                    reason: e.to_string(),
                }),
            }
        }
        classes.push(name);
    }

    if !bad_files.is_empty() {
        let list: Vec<String> = bad_files
            .iter()
            .map(|b| format!("{}: {}", b.path.display(), b.reason))
            .collect();
        if options.skip_bad {
            log::warn!("skipping {} unreadable images:\n{}", bad_files.len(), list.join("\n"));
        } else {
            return Err(Error::Data(format!(
                "{} unreadable images (pass --skip-bad to ignore them):\n{}",
                bad_files.len(),
                list.join("\n")
            )));
        }
    }
    if entries.is_empty() {
        return Err(Error::Data(format!("no readable images under {}", root.display())));
    }
    Ok(DatasetIndex {
        root: root.to_path_buf(),
        classes,
        entries,
        bad_files,
    })
}
