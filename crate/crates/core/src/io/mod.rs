//! On-disk formats: image manifests, snapshot and dataset containers, and the
//! INI run configuration.

pub mod config;
pub mod container;
pub mod manifest;

pub use config::{parse_layers, ConfigError, RunConfig};
pub use container::{
    load_dataset, load_snapshot, read_snapshot, save_dataset, save_snapshot, write_snapshot, ContainerError,
    DatasetFile, SnapshotHeader,
};
pub use manifest::{load_manifest, Manifest, ManifestError, ManifestRow, Split};
