//! Directory-per-class datasets and class-level splits.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ppm::decode_ppm;
use crate::error::{Error, Result};

/// One image on disk. `variant > 0` marks a logical augmented copy of the
/// same file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub path: PathBuf,
    pub class_name: String,
    pub class_id: usize,
    pub variant: usize,
}

/// A file that was found but not usable.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedFile {
    pub path: PathBuf,
    pub reason: String,
}

/// Which part of the class split to draw from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitSection {
    Base,
    Validation,
    Test,
    All,
}

impl SplitSection {
    pub fn name(self) -> &'static str {
        match self {
            SplitSection::Base => "base",
            SplitSection::Validation => "validation",
            SplitSection::Test => "test",
            SplitSection::All => "all",
        }
    }
}

/// Disjoint class-id sets.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSplit {
    pub base: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

impl ClassSplit {
    pub fn is_disjoint(&self) -> bool {
        let mut seen = BTreeSet::new();
        self.base
            .iter()
            .chain(&self.validation)
            .chain(&self.test)
            .all(|c| seen.insert(*c))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub records: Vec<ImageRecord>,
    pub classes: Vec<String>,
    pub split: ClassSplit,
    pub image_size: usize,
    pub skipped: Vec<SkippedFile>,
    by_class: Vec<Vec<usize>>,
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?;
    entries.sort();
    Ok(entries)
}

fn file_name(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Scan `root/<class>/<image>.ppm`. Classes and files are ordered
/// lexicographically; undecodable or non-PPM files go to the skip report.
/// Every class starts in the base split.
pub fn scan_dataset(root: &Path, image_size: usize) -> Result<DatasetManifest> {
    if !root.is_dir() {
        return Err(Error::Data(format!("dataset root {} is not a directory", root.display())));
    }
    let mut records = Vec::new();
    let mut classes = Vec::new();
    let mut skipped = Vec::new();
    for dir in sorted_entries(root)? {
        if !dir.is_dir() {
            continue;
        }
        let class_name = file_name(&dir);
        if class_name.starts_with('.') {
            continue;
        }
        let class_id = classes.len();
        let mut count = 0;
        for file in sorted_entries(&dir)? {
            if !file.is_file() {
                continue;
            }
            let is_ppm = file.extension().is_some_and(|e| e.eq_ignore_ascii_case("ppm"));
            if !is_ppm {
                skipped.push(SkippedFile {
                    path: file,
                    reason: "unsupported format".into(),
                });
                continue;
            }
            match std::fs::read(&file).map_err(|e| e.to_string()).and_then(|b| decode_ppm(&b).map_err(|e| e.to_string())) {
                Ok(_) => {
                    records.push(ImageRecord {
                        path: file,
                        class_name: class_name.clone(),
                        class_id,
                        variant: 0,
                    });
                    count += 1;
                }
                Err(reason) => skipped.push(SkippedFile { path: file, reason }),
            }
        }
        if count == 0 {
            return Err(Error::Data(format!("class `{class_name}` has no readable images")));
        }
        classes.push(class_name);
    }
    if classes.is_empty() {
        return Err(Error::Data(format!("dataset root {} contains no class directories", root.display())));
    }
    for s in &skipped {
        log::warn!("skipped {}: {}", s.path.display(), s.reason);
    }
    let split = ClassSplit {
        base: (0..classes.len()).collect(),
        ..Default::default()
    };
    DatasetManifest::new(records, classes, split, image_size, skipped)
}

impl DatasetManifest {
    pub fn new(
        records: Vec<ImageRecord>,
        classes: Vec<String>,
        split: ClassSplit,
        image_size: usize,
        skipped: Vec<SkippedFile>,
    ) -> Result<Self> {
        let mut by_class = vec![Vec::new(); classes.len()];
        for (i, r) in records.iter().enumerate() {
            if r.class_id >= classes.len() || classes[r.class_id] != r.class_name {
                return Err(Error::Data(format!("record {} has inconsistent class `{}`", r.path.display(), r.class_name)));
            }
            by_class[r.class_id].push(i);
        }
        if let Some(c) = by_class.iter().position(Vec::is_empty) {
            return Err(Error::Data(format!("class `{}` has no images", classes[c])));
        }
        let manifest = Self {
            records,
            classes,
            split,
            image_size,
            skipped,
            by_class,
        };
        manifest.validate_split(&manifest.split)?;
        Ok(manifest)
    }

    fn validate_split(&self, split: &ClassSplit) -> Result<()> {
        if !split.is_disjoint() {
            return Err(Error::Data("split sections overlap".into()));
        }
        let all = split.base.iter().chain(&split.validation).chain(&split.test);
        if let Some(c) = all.into_iter().find(|&&c| c >= self.classes.len()) {
            return Err(Error::Data(format!("split refers to unknown class id {c}")));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Record indices of class `class_id`, in manifest order.
    pub fn records_of_class(&self, class_id: usize) -> &[usize] {
        &self.by_class[class_id]
    }

    pub fn section_classes(&self, section: SplitSection) -> Vec<usize> {
        match section {
            SplitSection::Base => self.split.base.clone(),
            SplitSection::Validation => self.split.validation.clone(),
            SplitSection::Test => self.split.test.clone(),
            SplitSection::All => (0..self.classes.len()).collect(),
        }
    }

    /// Record indices belonging to `section`, in manifest order.
    pub fn section_records(&self, section: SplitSection) -> Vec<usize> {
        let mut classes = self.section_classes(section);
        classes.sort_unstable();
        let mut out: Vec<usize> = classes.iter().flat_map(|&c| self.by_class[c].iter().copied()).collect();
        out.sort_unstable();
        out
    }

    pub fn with_split(mut self, split: ClassSplit) -> Result<Self> {
        self.validate_split(&split)?;
        self.split = split;
        Ok(self)
    }

    /// Add `multiplier - 1` augmented variants of every base-class original.
    pub fn with_augmented_copies(&self, multiplier: usize) -> Result<Self> {
        if multiplier == 0 {
            return Err(Error::invalid("augment_multiplier", "must be at least 1"));
        }
        let base: BTreeSet<usize> = self.split.base.iter().copied().collect();
        let mut records = self.records.clone();
        for r in &self.records {
            if r.variant == 0 && base.contains(&r.class_id) {
                for v in 1..multiplier {
                    records.push(ImageRecord { variant: v, ..r.clone() });
                }
            }
        }
        Self::new(records, self.classes.clone(), self.split.clone(), self.image_size, self.skipped.clone())
    }

    pub fn class_id(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }
}

/// Seeded shuffle of the class list, then partition into base, validation and test.
pub fn split_classes(manifest: &DatasetManifest, base: usize, validation: usize, test: usize, seed: u64) -> Result<DatasetManifest> {
    let c = manifest.num_classes();
    if base + validation + test > c {
        return Err(Error::Data(format!(
            "split {base}/{validation}/{test} needs {} classes, dataset has {c}",
            base + validation + test
        )));
    }
    let mut order: Vec<usize> = (0..c).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let split = ClassSplit {
        base: order[..base].to_vec(),
        validation: order[base..base + validation].to_vec(),
        test: order[base + validation..base + validation + test].to_vec(),
    };
    manifest.clone().with_split(split)
}

/// Render a split as `[base]`, `[validation]`, `[test]` sections, one class name per line.
pub fn format_split(manifest: &DatasetManifest) -> String {
    let mut out = String::new();
    for (title, ids) in [
        ("base", &manifest.split.base),
        ("validation", &manifest.split.validation),
        ("test", &manifest.split.test),
    ] {
        let _ = writeln!(out, "[{title}]");
        for &id in ids {
            let _ = writeln!(out, "{}", manifest.classes[id]);
        }
    }
    out
}

/// Parse a split file against the manifest's class names.
pub fn parse_split(text: &str, manifest: &DatasetManifest) -> Result<ClassSplit> {
    let mut split = ClassSplit::default();
    let mut current: Option<&mut Vec<usize>> = None;
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            current = Some(match name.trim() {
                "base" => &mut split.base,
                "validation" => &mut split.validation,
                "test" => &mut split.test,
                other => return Err(Error::Data(format!("split file line {}: unknown section `{other}`", n + 1))),
            });
            continue;
        }
        let Some(section) = current.as_deref_mut() else {
            return Err(Error::Data(format!("split file line {}: class outside a section", n + 1)));
        };
        let id = manifest
            .class_id(line)
            .ok_or_else(|| Error::Data(format!("split file line {}: unknown class `{line}`", n + 1)))?;
        section.push(id);
    }
    if !split.is_disjoint() {
        return Err(Error::Data("split file lists a class in more than one section".into()));
    }
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic(counts: &[usize]) -> DatasetManifest {
        let classes: Vec<String> = (0..counts.len()).map(|c| format!("c{c:02}")).collect();
        let mut records = Vec::new();
        for (c, &n) in counts.iter().enumerate() {
            for i in 0..n {
                records.push(ImageRecord {
                    path: PathBuf::from(format!("{}/{i}.ppm", classes[c])),
                    class_name: classes[c].clone(),
                    class_id: c,
                    variant: 0,
                });
            }
        }
        let split = ClassSplit {
            base: (0..counts.len()).collect(),
            ..Default::default()
        };
        DatasetManifest::new(records, classes, split, 32, vec![]).unwrap()
    }

    #[test]
    fn protocol_presets() {
        for (c, b, v, t) in [(11, 6, 0, 5), (38, 25, 0, 13), (100, 64, 16, 20), (7, 7, 0, 0)] {
            let m = split_classes(&synthetic(&vec![2; c]), b, v, t, 1).unwrap();
            assert_eq!((m.split.base.len(), m.split.validation.len(), m.split.test.len()), (b, v, t));
            assert!(m.split.is_disjoint());
        }
        assert!(split_classes(&synthetic(&[1; 5]), 3, 1, 2, 0).is_err());
    }

    #[test]
    fn split_is_seeded() {
        let m = synthetic(&[1; 20]);
        let a = split_classes(&m, 10, 5, 5, 7).unwrap();
        assert_eq!(a, split_classes(&m, 10, 5, 5, 7).unwrap());
        assert_ne!(a.split, split_classes(&m, 10, 5, 5, 8).unwrap().split);
    }

    #[test]
    fn split_file_roundtrip() {
        let m = split_classes(&synthetic(&[1; 8]), 4, 2, 2, 3).unwrap();
        let text = format_split(&m);
        assert!(text.starts_with("[base]\n"));
        assert_eq!(parse_split(&text, &m).unwrap(), m.split);
        assert!(parse_split("[base]\nnope\n", &m).is_err());
        assert!(parse_split("c00\n", &m).is_err());
        assert!(parse_split("[base]\nc00\n[test]\nc00\n", &m).is_err());
    }

    #[test]
    fn augmented_copies_only_for_base() {
        let m = split_classes(&synthetic(&[2, 3, 4]), 1, 0, 2, 0).unwrap();
        let base = m.split.base[0];
        let a = m.with_augmented_copies(3).unwrap();
        assert_eq!(a.len(), m.len() + 2 * m.records_of_class(base).len());
        assert!(a.records.iter().filter(|r| r.variant > 0).all(|r| r.class_id == base));
        assert_eq!(m.with_augmented_copies(1).unwrap(), m);
    }

    #[test]
    fn section_records_follow_split() {
        let m = split_classes(&synthetic(&[2, 3, 4]), 1, 1, 1, 5).unwrap();
        let total: usize = [SplitSection::Base, SplitSection::Validation, SplitSection::Test]
            .iter()
            .map(|&s| m.section_records(s).len())
            .sum();
        assert_eq!(total, 9);
        assert_eq!(m.section_records(SplitSection::All).len(), 9);
    }
}
