//! Dataset manifests: a CSV of `path,label,split[,mask]` rows plus `# key=value`
//! comment lines for the task and the split seed. Relative paths resolve
//! against the manifest's directory.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::volume::{read_volume, VolumeRecord};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// label 1 = AD, 0 = NC
    #[default]
    AdNc,
    /// label 1 = pMCI, 0 = sMCI
    PmciSmci,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::AdNc => "ad_nc",
            Task::PmciSmci => "pmci_smci",
        })
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ad_nc" => Ok(Task::AdNc),
            "pmci_smci" => Ok(Task::PmciSmci),
            other => Err(Error::Config(format!("unknown task {other:?} (expected ad_nc or pmci_smci)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?} (expected train, val or test)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub subject_id: String,
    /// As written in the manifest (possibly relative).
    pub path: PathBuf,
    pub label: usize,
    pub split: Option<Split>,
    pub mask: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub task: Task,
    pub entries: Vec<ManifestEntry>,
    pub seed: Option<u64>,
    /// Directory relative paths are resolved against.
    pub root: PathBuf,
}

#[derive(Debug, Deserialize)]
struct Row {
    path: String,
    label: usize,
    #[serde(default)]
    split: Option<String>,
    #[serde(default)]
    mask: Option<String>,
    #[serde(default)]
    subject: Option<String>,
}

/// `sub01.nii` and `dir/sub01.vraw` both give `sub01`.
pub fn subject_id_from_path(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

impl DatasetManifest {
    pub fn new(task: Task, root: impl Into<PathBuf>) -> Self {
        DatasetManifest {
            task,
            entries: Vec::new(),
            seed: None,
            root: root.into(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::ManifestNotFound(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, root).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str, root: PathBuf) -> Result<Self> {
        let mut manifest = DatasetManifest::new(Task::default(), root);
        for line in text.lines() {
            let Some(meta) = line.trim().strip_prefix('#') else { continue };
            let Some((key, value)) = meta.split_once('=') else { continue };
            match key.trim() {
                "task" => manifest.task = value.trim().parse()?,
                "seed" => {
                    manifest.seed = Some(
                        value
                            .trim()
                            .parse()
                            .map_err(|_| Error::Config(format!("bad manifest seed {:?}", value.trim())))?,
                    )
                }
                _ => {}
            }
        }
        let mut reader = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .flexible(false)
            .from_reader(text.as_bytes());
        for (i, row) in reader.deserialize::<Row>().enumerate() {
            let row = row.map_err(|e| Error::Config(format!("manifest row {}: {e}", i + 1)))?;
            if row.label > 1 {
                return Err(Error::LabelOutOfRange { label: row.label, classes: 2 });
            }
            let split = match row.split.as_deref() {
                None | Some("") => None,
                Some(s) => Some(s.parse()?),
            };
            let path = PathBuf::from(&row.path);
            manifest.entries.push(ManifestEntry {
                subject_id: row.subject.filter(|s| !s.is_empty()).unwrap_or_else(|| subject_id_from_path(&path)),
                path,
                label: row.label,
                split,
                mask: row.mask.filter(|m| !m.is_empty()).map(PathBuf::from),
            });
        }
        Ok(manifest)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut out = format!("# task={}\n", self.task);
        if let Some(seed) = self.seed {
            out.push_str(&format!("# seed={seed}\n"));
        }
        let with_mask = self.entries.iter().any(|e| e.mask.is_some());
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["subject", "path", "label", "split"];
        if with_mask {
            header.push("mask");
        }
        let csv_err = |e: csv::Error| Error::Config(format!("manifest serialization: {e}"));
        w.write_record(&header).map_err(csv_err)?;
        for e in &self.entries {
            let mut rec = vec![
                e.subject_id.clone(),
                e.path.to_string_lossy().into_owned(),
                e.label.to_string(),
                e.split.map(|s| s.to_string()).unwrap_or_default(),
            ];
            if with_mask {
                rec.push(e.mask.as_ref().map(|m| m.to_string_lossy().into_owned()).unwrap_or_default());
            }
            w.write_record(&rec).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Config(format!("manifest serialization: {e}")))?;
        out.push_str(&String::from_utf8(bytes).expect("csv output is utf-8"));
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn entries_in(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == Some(split)).collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.entries.iter().filter(|e| e.split == Some(split)).count()
    }

    /// Loads and normalizes the volumes of one split in manifest order.
    /// `None` loads every entry.
    pub fn load_records(&self, split: Option<Split>) -> Result<Vec<VolumeRecord>> {
        let chosen: Vec<&ManifestEntry> = self
            .entries
            .iter()
            .filter(|e| split.is_none() || e.split == split)
            .collect();
        chosen
            .par_iter()
            .map(|e| read_volume(&self.resolve(&e.path), &e.subject_id, e.label))
            .collect()
    }

    /// Assigns train/val/test by stratified seeded shuffling; see [`split_counts`].
    pub fn split(&self, fractions: [f64; 3], seed: u64) -> Result<DatasetManifest> {
        validate_fractions(fractions)?;
        let mut by_label: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, e) in self.entries.iter().enumerate() {
            by_label.entry(e.label).or_default().push(i);
        }
        let mut out = self.clone();
        out.seed = Some(seed);
        for (&label, indices) in &by_label {
            let counts = split_counts(indices.len(), fractions);
            for (k, (&f, &c)) in fractions.iter().zip(&counts).enumerate() {
                if f > 0.0 && c == 0 {
                    return Err(Error::InvalidArgument(format!(
                        "class {label} has {} samples, too few to stratify into {} with fraction {f}",
                        indices.len(),
                        Split::ALL[k]
                    )));
                }
            }
            let mut order = indices.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(label as u64);
            order.shuffle(&mut rng);
            let mut it = order.into_iter();
            for (k, &c) in counts.iter().enumerate() {
                for idx in it.by_ref().take(c) {
                    out.entries[idx].split = Some(Split::ALL[k]);
                }
            }
        }
        Ok(out)
    }
}

fn validate_fractions(f: [f64; 3]) -> Result<()> {
    if f.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::InvalidArgument(format!("split fractions must be finite and >= 0, got {f:?}")));
    }
    let sum: f64 = f.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("split fractions must sum to 1, got {f:?} (sum {sum})")));
    }
    Ok(())
}

/// Largest-remainder apportionment of `n` items; ties in the remainder go
/// to the earlier split.
pub fn split_counts(n: usize, fractions: [f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts = [0usize; 3];
    for (c, e) in counts.iter_mut().zip(&exact) {
        *c = (e + 1e-9).floor() as usize;
    }
    let mut left = n.saturating_sub(counts.iter().sum());
    let mut order: Vec<usize> = (0..3).filter(|&k| fractions[k] > 0.0).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - counts[a] as f64;
        let rb = exact[b] - counts[b] as f64;
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &k in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[k] += 1;
        left -= 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest(per_class: usize) -> DatasetManifest {
        let mut m = DatasetManifest::new(Task::AdNc, "/data");
        for label in 0..2 {
            for i in 0..per_class {
                let path = PathBuf::from(format!("c{label}_{i}.nii"));
                m.entries.push(ManifestEntry {
                    subject_id: subject_id_from_path(&path),
                    path,
                    label,
                    split: None,
                    mask: None,
                });
            }
        }
        m
    }

    #[test]
    fn ten_per_class_splits_eight_one_one() {
        let s = manifest(10).split([0.8, 0.1, 0.1], 3).unwrap();
        for label in 0..2 {
            let count = |sp| s.entries.iter().filter(|e| e.label == label && e.split == Some(sp)).count();
            assert_eq!([count(Split::Train), count(Split::Val), count(Split::Test)], [8, 1, 1]);
        }
    }

    #[test]
    fn too_small_class_is_rejected() {
        assert!(manifest(2).split([0.8, 0.1, 0.1], 0).is_err());
        assert!(manifest(10).split([0.8, 0.1, 0.2], 0).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let mut m = manifest(3).split([0.5, 0.0, 0.5], 11).unwrap();
        m.task = Task::PmciSmci;
        m.entries[0].mask = Some("masks/c0_0.nii".into());
        let back = DatasetManifest::parse(&m.to_csv().unwrap(), m.root.clone()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn minimal_three_column_manifest() {
        let m = DatasetManifest::parse("path,label,split\na.nii,1,train\nb.nii,0,\n", "/r".into()).unwrap();
        assert_eq!(m.entries[0].subject_id, "a");
        assert_eq!(m.entries[1].split, None);
        assert_eq!(m.resolve(&m.entries[0].path), PathBuf::from("/r/a.nii"));
    }
}
