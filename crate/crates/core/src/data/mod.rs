//! Volume files, dataset manifests and synthetic phantoms.

pub mod manifest;
pub mod phantom;
pub mod volume;

pub use manifest::{DatasetManifest, ManifestEntry, Split, Task};
pub use phantom::{write_phantom_dataset, BoundingBox, Phantom, PhantomIndex, PhantomSpec, PhantomVariant};
pub use volume::{normalize, read_raw_volume, read_volume, write_volume, RawVolume, VolumeRecord};
