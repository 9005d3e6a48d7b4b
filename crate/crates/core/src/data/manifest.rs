use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::cohort::{cohort_from_age, Cohort, Sequence};
use crate::error::{Error, Result};

/// One line of a manifest file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct ManifestLine {
    path: String,
    subject_id: String,
    sequence: Sequence,
    age_days: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleRecord {
    /// Resolved path (relative entries are taken relative to the manifest file).
    pub path: PathBuf,
    pub subject_id: String,
    pub sequence: Sequence,
    pub age_days: u32,
    pub cohort: Cohort,
}

impl SampleRecord {
    pub fn new(
        path: impl Into<PathBuf>,
        subject_id: impl Into<String>,
        sequence: Sequence,
        age_days: u32,
    ) -> Result<Self> {
        Ok(SampleRecord {
            path: path.into(),
            subject_id: subject_id.into(),
            sequence,
            age_days,
            cohort: cohort_from_age(age_days)?,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    pub records: Vec<SampleRecord>,
    pub provenance: Option<String>,
}

impl Manifest {
    pub fn new(records: Vec<SampleRecord>) -> Result<Self> {
        let m = Manifest {
            records,
            provenance: None,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Unique paths and ages inside their cohort windows.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.records {
            if !seen.insert(&r.path) {
                return Err(Error::Manifest(format!("duplicate path {}", r.path.display())));
            }
            if !r.cohort.contains(r.age_days) {
                return Err(Error::Manifest(format!(
                    "{}: age {} outside the {} window",
                    r.path.display(),
                    r.age_days,
                    r.cohort
                )));
            }
            if r.subject_id.is_empty() {
                return Err(Error::Manifest(format!("{}: empty subject_id", r.path.display())));
            }
        }
        Ok(())
    }

    pub fn cohort_counts(&self) -> [usize; 6] {
        let mut counts = [0; 6];
        for r in &self.records {
            counts[r.cohort.index()] += 1;
        }
        counts
    }

    pub fn sequence_counts(&self) -> BTreeMap<Sequence, usize> {
        let mut counts = BTreeMap::new();
        for r in &self.records {
            *counts.entry(r.sequence).or_default() += 1;
        }
        counts
    }

    /// Parse a JSON-lines manifest. Blank lines are skipped; errors carry the line number.
    pub fn read(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(Error::at_path(path))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let mut records = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: ManifestLine = serde_json::from_str(&line)
                .map_err(|e| Error::Manifest(format!("{}:{}: {e}", path.display(), i + 1)))?;
            let p = PathBuf::from(&entry.path);
            let resolved = if p.is_absolute() { p } else { base.join(p) };
            let record = SampleRecord::new(resolved, entry.subject_id, entry.sequence, entry.age_days)
                .map_err(|e| Error::Manifest(format!("{}:{}: {e}", path.display(), i + 1)))?;
            records.push(record);
        }
        if records.is_empty() {
            return Err(Error::EmptyManifest);
        }
        let mut m = Manifest::new(records)?;
        m.provenance = Some(path.display().to_string());
        Ok(m)
    }

    /// Write JSON lines; paths under the manifest's directory are stored relative to it.
    pub fn write(&self, path: &Path) -> Result<()> {
        let base = path.parent().unwrap_or(Path::new(""));
        let mut out = Vec::new();
        for r in &self.records {
            let rel = r.path.strip_prefix(base).unwrap_or(&r.path);
            let line = ManifestLine {
                path: rel.to_string_lossy().into_owned(),
                subject_id: r.subject_id.clone(),
                sequence: r.sequence,
                age_days: r.age_days,
            };
            serde_json::to_writer(&mut out, &line)?;
            out.push(b'\n');
        }
        let mut f = std::fs::File::create(path).map_err(Error::at_path(path))?;
        f.write_all(&out).map_err(Error::at_path(path))
    }

    fn subset(&self, mut idx: Vec<usize>) -> Manifest {
        idx.sort_unstable();
        Manifest {
            records: idx.into_iter().map(|i| self.records[i].clone()).collect(),
            provenance: self.provenance.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitLevel {
    /// Records split independently.
    Scan,
    /// All records of one subject land on the same side.
    Subject,
}

/// Seeded train/validation split. Both halves keep manifest order.
///
/// Scan level puts exactly `round(ratio * n)` records in train. Subject level
/// shuffles subjects and adds each to train while that brings the train count
/// closer to the target.
pub fn split_dataset(m: &Manifest, ratio: f64, seed: u64, level: SplitLevel) -> Result<(Manifest, Manifest)> {
    if m.is_empty() {
        return Err(Error::EmptyManifest);
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid(format!("split ratio {ratio} must be in (0, 1)")));
    }
    let n = m.len();
    let target = (ratio * n as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (train, val) = match level {
        SplitLevel::Scan => {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng);
            let val = idx.split_off(target);
            (idx, val)
        }
        SplitLevel::Subject => {
            let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
            for (i, r) in m.records.iter().enumerate() {
                groups.entry(&r.subject_id).or_default().push(i);
            }
            let mut groups: Vec<Vec<usize>> = groups.into_values().collect();
            groups.shuffle(&mut rng);
            let (mut train, mut val) = (Vec::new(), Vec::new());
            for g in groups {
                let with = (train.len() + g.len()).abs_diff(target);
                if with < train.len().abs_diff(target) {
                    train.extend(g);
                } else {
                    val.extend(g);
                }
            }
            (train, val)
        }
    };
    Ok((m.subset(train), m.subset(val)))
}
