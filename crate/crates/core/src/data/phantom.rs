//! Synthetic "brain" phantoms: a bright ellipsoid in noise, with darkened
//! spherical blobs standing in for atrophy. Blob masks and bounding boxes
//! are kept as ground truth for explanation checks.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::manifest::{DatasetManifest, ManifestEntry, Task};
use super::volume::{encode_nifti_typed, RawVolume, VoxelType};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhantomVariant {
    /// Class 1 carries `blob_count` dark blobs, class 0 none.
    #[default]
    Blob,
    /// Both classes carry one blob per hemisphere. In class 1 the two are
    /// mirror images across the W midline; in class 0 the second is placed
    /// independently. Only the relation between distant regions separates
    /// the classes.
    Bilateral,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub grid: usize,
    pub noise_std: f64,
    pub blob_count: usize,
    pub radius_min: f64,
    pub radius_max: f64,
    /// Intensity removed inside a blob (the brain itself is 1).
    pub delta: f64,
    pub variant: PhantomVariant,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            grid: 32,
            noise_std: 0.1,
            blob_count: 1,
            radius_min: 3.0,
            radius_max: 5.0,
            delta: 0.6,
            variant: PhantomVariant::Blob,
            seed: 0,
        }
    }
}

/// Inclusive voxel bounds, (d, h, w).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub min: [usize; 3],
    pub max: [usize; 3],
}

impl BoundingBox {
    pub fn contains(&self, p: [usize; 3]) -> bool {
        (0..3).all(|i| self.min[i] <= p[i] && p[i] <= self.max[i])
    }

    pub fn volume(&self) -> usize {
        (0..3).map(|i| self.max[i] + 1 - self.min[i]).product()
    }

    /// Bounding box of the nonzero voxels of a (D, H, W) array.
    pub fn of_mask(dims: [usize; 3], mask: &[f32]) -> Option<BoundingBox> {
        let [_, h, w] = dims;
        let mut bb: Option<BoundingBox> = None;
        for (i, _) in mask.iter().enumerate().filter(|(_, &v)| v != 0.0) {
            let p = [i / (h * w), (i / w) % h, i % w];
            let b = bb.get_or_insert(BoundingBox { min: p, max: p });
            for k in 0..3 {
                b.min[k] = b.min[k].min(p[k]);
                b.max[k] = b.max[k].max(p[k]);
            }
        }
        bb
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    /// (d, h, w) in voxel units
    pub center: [f64; 3],
    pub radius: f64,
    pub bbox: BoundingBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub subject_id: String,
    pub label: usize,
    pub volume: RawVolume,
    /// 1 inside a ground-truth blob, 0 elsewhere
    pub mask: RawVolume,
    pub blobs: Vec<Blob>,
}

/// Brain ellipsoid semi-axes as fractions of the grid.
const BRAIN_AXES: [f64; 3] = [0.40, 0.44, 0.40];

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.grid < 4 {
            return bad(format!("phantom grid {} is too small (need >= 4)", self.grid));
        }
        if !(self.radius_min > 0.0 && self.radius_min <= self.radius_max) {
            return bad(format!(
                "blob radius range [{}, {}] must satisfy 0 < min <= max",
                self.radius_min, self.radius_max
            ));
        }
        if 2.0 * self.radius_max >= self.grid as f64 {
            return bad(format!(
                "blob radius {} exceeds the {}^3 grid",
                self.radius_max, self.grid
            ));
        }
        let min_axis = BRAIN_AXES.iter().cloned().fold(f64::INFINITY, f64::min) * self.grid as f64;
        let needed = match self.variant {
            PhantomVariant::Blob => self.radius_max,
            // one blob must fit per hemisphere
            PhantomVariant::Bilateral => 2.0 * self.radius_max,
        };
        if needed >= min_axis {
            return bad(format!(
                "blob radius {} does not fit inside the brain region of a {}^3 grid",
                self.radius_max, self.grid
            ));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise std must be finite and >= 0, got {}", self.noise_std));
        }
        if !self.delta.is_finite() {
            return bad(format!("blob delta must be finite, got {}", self.delta));
        }
        if self.variant == PhantomVariant::Blob && self.blob_count == 0 {
            return bad("blob_count must be >= 1".into());
        }
        Ok(())
    }

    fn center(&self) -> [f64; 3] {
        [(self.grid as f64 - 1.0) / 2.0; 3]
    }

    fn axes(&self) -> [f64; 3] {
        BRAIN_AXES.map(|a| a * self.grid as f64)
    }

    /// Distance-like ellipsoid coordinate: < 1 inside the brain.
    fn brain_rho(&self, p: [f64; 3], shrink: f64) -> f64 {
        let c = self.center();
        let a = self.axes();
        (0..3).map(|i| ((p[i] - c[i]) / (a[i] - shrink)).powi(2)).sum()
    }

    /// A blob center such that the whole sphere lies inside the brain,
    /// optionally restricted to one side of the W midline.
    fn sample_center(&self, rng: &mut ChaCha8Rng, radius: f64, side: Option<bool>) -> [f64; 3] {
        let c = self.center();
        let a = self.axes();
        loop {
            let mut p = [0.0; 3];
            for i in 0..3 {
                p[i] = c[i] + rng.random_range(-1.0..1.0) * (a[i] - radius);
            }
            if let Some(left) = side {
                // keep a radius of clearance from the midline
                let off = p[2] - c[2];
                if (left && off > -radius) || (!left && off < radius) {
                    continue;
                }
            }
            if self.brain_rho(p, radius) <= 1.0 {
                return p;
            }
        }
    }

    fn blob(&self, center: [f64; 3], radius: f64) -> Blob {
        let g = self.grid as f64 - 1.0;
        let lo = center.map(|v| (v - radius).ceil().clamp(0.0, g) as usize);
        let hi = center.map(|v| (v + radius).floor().clamp(0.0, g) as usize);
        Blob {
            center,
            radius,
            bbox: BoundingBox { min: lo, max: hi },
        }
    }

    fn blobs_for(&self, label: usize, rng: &mut ChaCha8Rng) -> Vec<Blob> {
        let mut radius = || rng.random_range(self.radius_min..=self.radius_max);
        let r: Vec<f64> = (0..2.max(self.blob_count)).map(|_| radius()).collect();
        match self.variant {
            PhantomVariant::Blob if label == 0 => Vec::new(),
            PhantomVariant::Blob => (0..self.blob_count)
                .map(|k| {
                    let c = self.sample_center(rng, r[k], None);
                    self.blob(c, r[k])
                })
                .collect(),
            PhantomVariant::Bilateral => {
                let first = self.sample_center(rng, r[0], Some(true));
                let mirrored = [first[0], first[1], 2.0 * self.center()[2] - first[2]];
                let second = if label == 1 {
                    mirrored
                } else {
                    // the farthest of a few candidates from the mirror
                    // position, so the pair is clearly asymmetric
                    let dist = |p: &[f64; 3]| (0..3).map(|i| (p[i] - mirrored[i]).powi(2)).sum::<f64>();
                    (0..16)
                        .map(|_| self.sample_center(rng, r[0], Some(false)))
                        .fold(None, |best: Option<[f64; 3]>, p| match best {
                            Some(b) if dist(&b) >= dist(&p) => Some(b),
                            _ => Some(p),
                        })
                        .expect("at least one candidate")
                };
                vec![self.blob(first, r[0]), self.blob(second, r[0])]
            }
        }
    }

    /// One phantom. Everything is a pure function of (seed, label, index).
    pub fn generate_one(&self, label: usize, index: usize) -> Result<Phantom> {
        self.validate()?;
        if label > 1 {
            return Err(Error::LabelOutOfRange { label, classes: 2 });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(((label as u64) << 32) | index as u64);
        let blobs = self.blobs_for(label, &mut rng);
        let n = self.grid;
        let mut data = vec![0f32; n * n * n];
        let mut mask = vec![0f32; n * n * n];
        let noise = Normal::new(0.0, self.noise_std).expect("validated std");
        for d in 0..n {
            for h in 0..n {
                for w in 0..n {
                    let p = [d as f64, h as f64, w as f64];
                    let mut v = if self.brain_rho(p, 0.0) <= 1.0 { 1.0 } else { 0.0 };
                    let inside_blob = blobs
                        .iter()
                        .any(|b| (0..3).map(|i| (p[i] - b.center[i]).powi(2)).sum::<f64>() <= b.radius * b.radius);
                    let i = (d * n + h) * n + w;
                    if inside_blob {
                        v -= self.delta;
                        mask[i] = 1.0;
                    }
                    if self.noise_std > 0.0 {
                        v += noise.sample(&mut rng);
                    }
                    data[i] = v as f32;
                }
            }
        }
        let dims = [n; 3];
        Ok(Phantom {
            subject_id: format!("c{label}_{index:04}"),
            label,
            volume: RawVolume::new(dims, data)?,
            mask: RawVolume::new(dims, mask)?,
            blobs,
        })
    }

    /// `n_per_class` phantoms of each class, class 0 first.
    pub fn generate(&self, n_per_class: usize) -> Result<Vec<Phantom>> {
        self.validate()?;
        if n_per_class == 0 {
            return Err(Error::InvalidArgument("need at least one phantom per class".into()));
        }
        let jobs: Vec<(usize, usize)> = (0..2).flat_map(|l| (0..n_per_class).map(move |i| (l, i))).collect();
        jobs.par_iter().map(|&(l, i)| self.generate_one(l, i)).collect()
    }
}

/// Side record written next to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomIndex {
    pub spec: PhantomSpec,
    pub n_per_class: usize,
    pub subjects: Vec<PhantomSubject>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSubject {
    pub subject_id: String,
    pub label: usize,
    pub volume: PathBuf,
    pub mask: PathBuf,
    pub blobs: Vec<Blob>,
}

pub const PHANTOM_INDEX_FILE: &str = "phantoms.json";
pub const MANIFEST_FILE: &str = "manifest.csv";

impl PhantomIndex {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn subject(&self, id: &str) -> Option<&PhantomSubject> {
        self.subjects.iter().find(|s| s.subject_id == id)
    }
}

/// Writes `volumes/*.nii`, `masks/*.nii`, a split manifest and the phantom
/// index under `dir`, returning the manifest.
pub fn write_phantom_dataset(
    dir: &Path,
    spec: &PhantomSpec,
    n_per_class: usize,
    fractions: [f64; 3],
) -> Result<DatasetManifest> {
    let phantoms = spec.generate(n_per_class)?;
    for sub in ["volumes", "masks"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut manifest = DatasetManifest::new(Task::AdNc, dir);
    let mut subjects = Vec::with_capacity(phantoms.len());
    for ph in &phantoms {
        let rel_vol = PathBuf::from("volumes").join(format!("{}.nii", ph.subject_id));
        let rel_mask = PathBuf::from("masks").join(format!("{}.nii", ph.subject_id));
        for (rel, vol, ty) in [
            (&rel_vol, &ph.volume, VoxelType::Float32),
            (&rel_mask, &ph.mask, VoxelType::Int16),
        ] {
            let p = dir.join(rel);
            fs::write(&p, encode_nifti_typed(vol, ty)).map_err(|e| Error::io(&p, e))?;
        }
        manifest.entries.push(ManifestEntry {
            subject_id: ph.subject_id.clone(),
            path: rel_vol.clone(),
            label: ph.label,
            split: None,
            mask: Some(rel_mask.clone()),
        });
        subjects.push(PhantomSubject {
            subject_id: ph.subject_id.clone(),
            label: ph.label,
            volume: rel_vol,
            mask: rel_mask,
            blobs: ph.blobs.clone(),
        });
    }
    let manifest = manifest.split(fractions, spec.seed)?;
    manifest.save(&dir.join(MANIFEST_FILE))?;
    let index = PhantomIndex {
        spec: spec.clone(),
        n_per_class,
        subjects,
    };
    let p = dir.join(PHANTOM_INDEX_FILE);
    let json = serde_json::to_string_pretty(&index).expect("phantom index serializes");
    fs::write(&p, json).map_err(|e| Error::io(&p, e))?;
    Ok(manifest)
}
