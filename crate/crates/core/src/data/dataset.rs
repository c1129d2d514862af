//! Paired dataset discovery: `root/input/<stem>.{png,ppm}` matched against
//! `root/target/<stem>.{png,ppm}`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use super::{probe_dimensions, read_image, ImagePair};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DatasetLayout {
    #[default]
    PairedDirs,
}

impl std::str::FromStr for DatasetLayout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paired-dirs" => Ok(DatasetLayout::PairedDirs),
            other => Err(Error::contract(format!("unknown dataset layout `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairEntry {
    pub id: String,
    pub input: PathBuf,
    pub target: PathBuf,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetScan {
    pub pairs: Vec<PairEntry>,
    /// Files present on only one side.
    pub unmatched: Vec<PathBuf>,
}

fn list_images(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        if !matches!(ext.as_deref(), Some("png") | Some("ppm")) || !path.is_file() {
            continue;
        }
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        if let Some(prev) = out.insert(stem.to_owned(), path.clone()) {
            return Err(Error::Dataset(format!(
                "`{}` and `{}` share the stem `{stem}`",
                prev.display(),
                path.display()
            )));
        }
    }
    Ok(out)
}

fn dimensions(path: &Path) -> Result<(usize, usize)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    probe_dimensions(&bytes)
}

/// Pairs sorted by stem, independent of directory enumeration order.
pub fn scan_dataset(root: &Path, layout: DatasetLayout) -> Result<DatasetScan> {
    let DatasetLayout::PairedDirs = layout;
    let inputs = list_images(&root.join("input"))?;
    let mut targets = list_images(&root.join("target"))?;

    let mut scan = DatasetScan::default();
    for (stem, input) in inputs {
        match targets.remove(&stem) {
            Some(target) => {
                let (a, b) = (dimensions(&input)?, dimensions(&target)?);
                if a != b {
                    let file = input
                        .file_name()
                        .map(|f| f.to_string_lossy().into_owned())
                        .unwrap_or(stem);
                    return Err(Error::Pair {
                        file,
                        message: format!(
                            "input is {}x{} but target is {}x{}",
                            a.0, a.1, b.0, b.1
                        ),
                    });
                }
                scan.pairs.push(PairEntry {
                    id: stem,
                    input,
                    target,
                });
            }
            None => scan.unmatched.push(input),
        }
    }
    scan.unmatched.extend(targets.into_values());
    for path in &scan.unmatched {
        log::warn!("no counterpart for `{}`", path.display());
    }
    if scan.pairs.is_empty() {
        return Err(Error::Dataset(format!("no image pairs found under `{}`", root.display())));
    }
    Ok(scan)
}

pub fn load_pairs(entries: &[PairEntry]) -> Result<Vec<ImagePair>> {
    entries
        .iter()
        .map(|e| ImagePair::new(e.id.clone(), read_image(&e.input)?, read_image(&e.target)?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{write_image, Image};

    fn layout(names: &[(&str, usize, usize)]) -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("input")).unwrap();
        std::fs::create_dir(dir.path().join("target")).unwrap();
        for &(name, w, h) in names {
            let img = Image::filled(4, 4, [0.1, 0.2, 0.3]).unwrap();
            write_image(&dir.path().join("input").join(name), &img).unwrap();
            let tgt = Image::filled(w, h, [0.5; 3]).unwrap();
            write_image(&dir.path().join("target").join(name), &tgt).unwrap();
        }
        dir
    }

    #[test]
    fn two_pairs_in_order() {
        let dir = layout(&[("b.png", 4, 4), ("a.png", 4, 4)]);
        let scan = scan_dataset(dir.path(), DatasetLayout::PairedDirs).unwrap();
        let ids: Vec<_> = scan.pairs.iter().map(|p| p.id.as_str()).collect();
        assert_eq!(ids, ["a", "b"]);
        assert_eq!(load_pairs(&scan.pairs).unwrap().len(), 2);
    }

    #[test]
    fn mismatch_names_file() {
        let dir = layout(&[("a.png", 5, 4)]);
        let err = scan_dataset(dir.path(), DatasetLayout::PairedDirs).unwrap_err();
        assert!(matches!(&err, Error::Pair { file, .. } if file == "a.png"), "{err}");
    }

    #[test]
    fn empty_is_dataset_error() {
        let dir = layout(&[]);
        assert!(matches!(
            scan_dataset(dir.path(), DatasetLayout::PairedDirs).unwrap_err(),
            Error::Dataset(_)
        ));
    }

    #[test]
    fn unmatched_files_are_listed() {
        let dir = layout(&[("a.png", 4, 4)]);
        let img = Image::filled(4, 4, [0.0; 3]).unwrap();
        write_image(&dir.path().join("input").join("lonely.ppm"), &img).unwrap();
        let scan = scan_dataset(dir.path(), DatasetLayout::PairedDirs).unwrap();
        assert_eq!(scan.pairs.len(), 1);
        assert_eq!(scan.unmatched.len(), 1);
    }
}
