use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{DatasetManifest, SampleRecord, SampleSource, Split, LABEL_PARASITIZED, LABEL_UNINFECTED};
use crate::error::{Error, Result};

pub const PARASITIZED_DIR: &str = "Parasitized";
pub const UNINFECTED_DIR: &str = "Uninfected";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScanReport {
    /// Files that could not be decoded, with the reason.
    pub skipped: Vec<(PathBuf, String)>,
    pub warnings: Vec<String>,
}

impl ScanReport {
    /// Plain-text skip report, one file per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for w in &self.warnings {
            writeln!(s, "warning: {w}").unwrap();
        }
        for (p, why) in &self.skipped {
            writeln!(s, "skipped {}: {why}", p.display()).unwrap();
        }
        s
    }
}

/// Index every decodable image under `root/Parasitized` (label 1) and
/// `root/Uninfected` (label 0), ordered by path.
pub fn scan_dataset(root: &Path) -> Result<(DatasetManifest, ScanReport)> {
    if !root.is_dir() {
        return Err(Error::io(
            root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset root is not a directory"),
        ));
    }
    let mut report = ScanReport::default();
    let mut records = Vec::new();
    for (dir, label) in [(PARASITIZED_DIR, LABEL_PARASITIZED), (UNINFECTED_DIR, LABEL_UNINFECTED)] {
        let class_root = root.join(dir);
        if !class_root.is_dir() {
            report.warnings.push(format!("class directory {} not found", class_root.display()));
            continue;
        }
        let mut files = Vec::new();
        collect_files(&class_root, &mut files)?;
        files.sort();
        for path in files {
            match ::image::open(&path) {
                Ok(img) => {
                    let rel = path.strip_prefix(root).unwrap_or(&path);
                    records.push(SampleRecord {
                        id: rel.to_string_lossy().replace('\\', "/"),
                        source: SampleSource::Path(path.clone()),
                        label,
                        height: img.height() as usize,
                        width: img.width() as usize,
                        split: Split::Unassigned,
                    });
                }
                Err(e) => report.skipped.push((path, e.to_string())),
            }
        }
    }
    records.sort_by(|a, b| a.id.cmp(&b.id));
    if records.is_empty() {
        report.warnings.push(format!("no readable images under {}", root.display()));
    }
    Ok((DatasetManifest::new(records), report))
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_dir() {
            collect_files(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}
