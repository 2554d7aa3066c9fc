use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::image::ImageFormat;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, fnv1a64, SplitMix64};

pub const HEADER: &str = "clean_path,sigma,seed,split";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRow {
    pub clean_path: PathBuf,
    pub sigma: u32,
    pub seed: u64,
    pub split: Split,
}

/// One row per corrupted instance.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DatasetManifest {
    pub rows: Vec<ManifestRow>,
}

/// Supported image files directly inside `dir`, sorted by file name.
pub fn list_images(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && ImageFormat::from_path(&path).is_some() {
            out.push(path);
        }
    }
    out.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    Ok(out)
}

/// Per-row noise seed. Folds in the file name rather than the full path so
/// that a corpus produces the same noise wherever it is stored.
pub fn row_seed(base_seed: u64, clean_path: &Path, sigma: u32) -> u64 {
    let name = clean_path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    derive_seed(derive_seed(base_seed, fnv1a64(name.as_bytes())), u64::from(sigma))
}

/// Assigns σ values round-robin over the sorted images, derives row seeds,
/// shuffles the rows with `base_seed` and marks the first
/// `round(split_ratio · n)` rows as training data.
pub fn build_manifest(
    clean_dir: impl AsRef<Path>,
    sigmas: &[u32],
    base_seed: u64,
    split_ratio: f64,
) -> Result<DatasetManifest> {
    let clean_dir = clean_dir.as_ref();
    if sigmas.is_empty() {
        return Err(Error::invalid("sigma set is empty"));
    }
    if let Some(s) = sigmas.iter().find(|&&s| f64::from(s) > super::MAX_SIGMA) {
        return Err(Error::invalid(format!("sigma {s} exceeds {}", super::MAX_SIGMA)));
    }
    if !(0.0..=1.0).contains(&split_ratio) {
        return Err(Error::invalid(format!("split ratio {split_ratio} outside [0, 1]")));
    }
    let images = list_images(clean_dir)?;
    if images.is_empty() {
        return Err(Error::format(clean_dir, "no PNG or PPM images found"));
    }
    let mut rows: Vec<ManifestRow> = images
        .into_iter()
        .enumerate()
        .map(|(i, path)| {
            let sigma = sigmas[i % sigmas.len()];
            ManifestRow {
                seed: row_seed(base_seed, &path, sigma),
                clean_path: path,
                sigma,
                split: Split::Train,
            }
        })
        .collect();
    SplitMix64::new(derive_seed(base_seed, 0x5417)).shuffle(&mut rows);
    let n_train = (split_ratio * rows.len() as f64).round() as usize;
    for (i, row) in rows.iter_mut().enumerate() {
        row.split = if i < n_train { Split::Train } else { Split::Test };
    }
    Ok(DatasetManifest { rows })
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRow> {
        self.rows.iter().filter(move |r| r.split == split)
    }

    /// Distinct σ values with their row counts, ascending.
    pub fn sigma_counts(&self) -> Vec<(u32, usize)> {
        let mut counts = std::collections::BTreeMap::new();
        for r in &self.rows {
            *counts.entry(r.sigma).or_insert(0) += 1;
        }
        counts.into_iter().collect()
    }

    /// Rows whose clean file does not exist.
    pub fn missing_files(&self, split: Split) -> Vec<PathBuf> {
        self.split(split)
            .filter(|r| !r.clean_path.is_file())
            .map(|r| r.clean_path.clone())
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for r in &self.rows {
            if !seen.insert((&r.clean_path, r.sigma, r.seed)) {
                return Err(Error::invalid(format!(
                    "duplicate manifest row for {} at sigma {}",
                    r.clean_path.display(),
                    r.sigma
                )));
            }
            if f64::from(r.sigma) > super::MAX_SIGMA {
                return Err(Error::invalid(format!("sigma {} out of range", r.sigma)));
            }
        }
        Ok(())
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut out = String::from(HEADER);
        out.push('\n');
        for r in &self.rows {
            let path = r
                .clean_path
                .to_str()
                .ok_or_else(|| Error::invalid("manifest paths must be UTF-8"))?;
            if path.contains([',', '\n', '\r']) {
                return Err(Error::invalid(format!(
                    "path '{path}' contains a comma or line break"
                )));
            }
            out.push_str(&format!("{path},{},{},{}\n", r.sigma, r.seed, r.split));
        }
        Ok(out)
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.split('\n');
        match lines.next() {
            Some(h) if h == HEADER => {}
            other => {
                return Err(Error::invalid(format!(
                    "manifest header must be '{HEADER}', got {other:?}"
                )))
            }
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let bad = |what: &str| Error::invalid(format!("manifest line {}: {what}", i + 2));
            let fields: Vec<&str> = line.split(',').collect();
            let [path, sigma, seed, split] = fields[..] else {
                return Err(bad("expected 4 fields"));
            };
            rows.push(ManifestRow {
                clean_path: PathBuf::from(path),
                sigma: sigma.parse().map_err(|_| bad("bad sigma"))?,
                seed: seed.parse().map_err(|_| bad("bad seed"))?,
                split: split.parse().map_err(|_| bad("bad split"))?,
            });
        }
        let m = Self { rows };
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }

    /// Reads a manifest. Relative clean paths are resolved against the
    /// manifest's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m = Self::parse_csv(&text).map_err(|e| Error::format(path, e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for r in &mut m.rows {
            if r.clean_path.is_relative() {
                r.clean_path = base.join(&r.clean_path);
            }
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{save_image, RgbImage};

    fn corpus(n: usize) -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        for i in 0..n {
            let img = RgbImage::filled(4, 4, [i as u8, 0, 0]);
            save_image(&img, dir.path().join(format!("img{i:04}.ppm"))).unwrap();
        }
        dir
    }

    #[test]
    fn balanced_sigma_assignment() {
        let dir = corpus(102);
        let sigmas: Vec<u32> = (0..=50).collect();
        let m = build_manifest(dir.path(), &sigmas, 7, 0.8).unwrap();
        let counts = m.sigma_counts();
        assert_eq!(counts.len(), 51);
        assert!(counts.iter().all(|&(_, n)| n == 2));
        assert_eq!(m.split(Split::Train).count(), 82);
    }

    #[test]
    fn deterministic_and_round_trips() {
        let dir = corpus(10);
        let a = build_manifest(dir.path(), &[5, 25], 3, 0.5).unwrap();
        let b = build_manifest(dir.path(), &[5, 25], 3, 0.5).unwrap();
        assert_eq!(a.to_csv().unwrap(), b.to_csv().unwrap());
        assert_eq!(DatasetManifest::parse_csv(&a.to_csv().unwrap()).unwrap(), a);
        let c = build_manifest(dir.path(), &[5, 25], 4, 0.5).unwrap();
        assert_ne!(a.to_csv().unwrap(), c.to_csv().unwrap());
    }

    #[test]
    fn empty_directory_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(build_manifest(dir.path(), &[0], 0, 1.0).is_err());
    }

    #[test]
    fn seeds_ignore_corpus_location() {
        let a = row_seed(1, Path::new("/x/y/img.png"), 10);
        let b = row_seed(1, Path::new("other/img.png"), 10);
        assert_eq!(a, b);
        assert_ne!(a, row_seed(1, Path::new("img.png"), 11));
    }

    #[test]
    fn parse_rejects_malformed() {
        assert!(DatasetManifest::parse_csv("path,sigma\n").is_err());
        let dup = format!("{HEADER}\na.png,1,2,train\na.png,1,2,test\n");
        assert!(DatasetManifest::parse_csv(&dup).is_err());
        let bad = format!("{HEADER}\na.png,x,2,train\n");
        assert!(DatasetManifest::parse_csv(&bad).is_err());
    }
}
