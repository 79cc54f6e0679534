//! Binary containers: 4-byte magic, `u32` LE version, `u32` LE header length,
//! UTF-8 JSON header, then a little-endian `f32` blob.
//!
//! Snapshots use magic `DCXS`; preprocessed datasets use `DCXD`.

use std::io::{Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{LayerSpec, NetError, Network};
use crate::tensor::{Shape3, Tensor4};
use crate::training::{ScheduleConfig, Snapshot};

pub const SNAPSHOT_MAGIC: &[u8; 4] = b"DCXS";
pub const DATASET_MAGIC: &[u8; 4] = b"DCXD";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes {found:?}, expected {expected:?}")]
    BadMagic { found: [u8; 4], expected: [u8; 4] },
    #[error("format version {0} is not supported")]
    VersionUnsupported(u32),
    #[error("parameter blob has {found} bytes, header declares {expected}")]
    TruncatedBlob { expected: usize, found: usize },
    #[error("{0} bytes follow the declared blob")]
    TrailingBytes(usize),
    #[error("malformed header: {0}")]
    BadHeader(String),
    #[error(transparent)]
    Net(#[from] NetError),
}

fn write_container<W: Write, H: Serialize>(mut w: W, magic: &[u8; 4], header: &H, blob: &[f32]) -> Result<(), ContainerError> {
    let json = serde_json::to_vec(header).map_err(|e| ContainerError::BadHeader(e.to_string()))?;
    let len = u32::try_from(json.len()).map_err(|_| ContainerError::BadHeader("header too large".into()))?;
    let mut bytes = Vec::with_capacity(12 + json.len() + 4 * blob.len());
    bytes.extend_from_slice(magic);
    bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&len.to_le_bytes());
    bytes.extend_from_slice(&json);
    for v in blob {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&bytes)?;
    Ok(())
}

/// Parses a container; `blob_len` reads the expected value count off the header.
fn read_container<R: Read, H: DeserializeOwned>(
    mut r: R,
    magic: &[u8; 4],
    blob_len: impl Fn(&H) -> usize,
) -> Result<(H, Vec<f32>), ContainerError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let short = |what: &str| ContainerError::BadHeader(format!("file ends inside the {what}"));
    let found: [u8; 4] = bytes.get(..4).ok_or_else(|| short("magic"))?.try_into().unwrap();
    if &found != magic {
        return Err(ContainerError::BadMagic { found, expected: *magic });
    }
    let version = u32::from_le_bytes(bytes.get(4..8).ok_or_else(|| short("version"))?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(ContainerError::VersionUnsupported(version));
    }
    let hlen = u32::from_le_bytes(bytes.get(8..12).ok_or_else(|| short("header length"))?.try_into().unwrap()) as usize;
    let json = bytes.get(12..12 + hlen).ok_or_else(|| short("header"))?;
    let header: H = serde_json::from_slice(json).map_err(|e| ContainerError::BadHeader(e.to_string()))?;
    let blob = &bytes[12 + hlen..];
    let expected = 4 * blob_len(&header);
    if blob.len() < expected {
        return Err(ContainerError::TruncatedBlob { expected, found: blob.len() });
    }
    if blob.len() > expected {
        return Err(ContainerError::TrailingBytes(blob.len() - expected));
    }
    let values = blob.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok((header, values))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapshotHeader {
    pub input: Shape3,
    pub layers: Vec<LayerSpec>,
    /// Output shape of every layer.
    pub shapes: Vec<Shape3>,
    pub param_count: usize,
    pub cycle: usize,
    pub epoch: usize,
    /// Absent when not finite.
    pub val_loss: Option<f64>,
    pub val_acc: Option<f64>,
    pub schedule: ScheduleConfig,
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

pub fn write_snapshot<W: Write>(s: &Snapshot, w: W) -> Result<(), ContainerError> {
    let net = &s.network;
    let header = SnapshotHeader {
        input: net.input_shape(),
        layers: net.layers().to_vec(),
        shapes: (0..net.layers().len()).map(|i| net.output_shape(i)).collect(),
        param_count: net.param_count(),
        cycle: s.cycle,
        epoch: s.epoch,
        val_loss: finite(s.val_loss),
        val_acc: finite(s.val_acc),
        schedule: s.schedule,
    };
    write_container(w, SNAPSHOT_MAGIC, &header, &net.flat_params())
}

pub fn read_snapshot<R: Read>(r: R) -> Result<Snapshot, ContainerError> {
    let (header, blob): (SnapshotHeader, _) = read_container(r, SNAPSHOT_MAGIC, |h: &SnapshotHeader| h.param_count)?;
    let mut network = Network::new(header.input, header.layers.clone(), 0)?;
    if network.param_count() != header.param_count {
        return Err(ContainerError::BadHeader(format!(
            "architecture has {} parameters, header declares {}",
            network.param_count(),
            header.param_count
        )));
    }
    let shapes: Vec<Shape3> = (0..network.layers().len()).map(|i| network.output_shape(i)).collect();
    if shapes != header.shapes {
        return Err(ContainerError::BadHeader("layer shapes disagree with the architecture".into()));
    }
    network.set_flat_params(&blob)?;
    Ok(Snapshot {
        network,
        cycle: header.cycle,
        epoch: header.epoch,
        val_loss: header.val_loss.unwrap_or(f64::NAN),
        val_acc: header.val_acc.unwrap_or(f64::NAN),
        schedule: header.schedule,
    })
}

pub fn save_snapshot(s: &Snapshot, path: &Path) -> Result<(), ContainerError> {
    write_snapshot(s, std::io::BufWriter::new(std::fs::File::create(path)?))
}

pub fn load_snapshot(path: &Path) -> Result<Snapshot, ContainerError> {
    read_snapshot(std::fs::File::open(path)?)
}

/// Preprocessed images with their labels and split membership.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetFile {
    pub labels: Vec<String>,
    pub paths: Vec<String>,
    pub targets: Vec<usize>,
    pub is_test: Vec<bool>,
    /// Standardization statistics applied to the tensors.
    pub mean: f64,
    pub std: f64,
    pub tensors: Tensor4,
}

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    labels: Vec<String>,
    paths: Vec<String>,
    targets: Vec<usize>,
    is_test: Vec<bool>,
    mean: f64,
    std: f64,
    sample_shape: Shape3,
}

impl DatasetFile {
    pub fn indices(&self, test: bool) -> Vec<usize> {
        (0..self.paths.len()).filter(|&i| self.is_test[i] == test).collect()
    }
}

pub fn save_dataset(d: &DatasetFile, path: &Path) -> Result<(), ContainerError> {
    let header = DatasetHeader {
        labels: d.labels.clone(),
        paths: d.paths.clone(),
        targets: d.targets.clone(),
        is_test: d.is_test.clone(),
        mean: d.mean,
        std: d.std,
        sample_shape: d.tensors.shape(),
    };
    let w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_container(w, DATASET_MAGIC, &header, d.tensors.as_slice())
}

pub fn load_dataset(path: &Path) -> Result<DatasetFile, ContainerError> {
    let (h, blob): (DatasetHeader, _) =
        read_container(std::fs::File::open(path)?, DATASET_MAGIC, |h: &DatasetHeader| h.paths.len() * h.sample_shape.len())?;
    let n = h.paths.len();
    if h.targets.len() != n || h.is_test.len() != n {
        return Err(ContainerError::BadHeader("per-sample lists differ in length".into()));
    }
    let tensors = Tensor4::from_vec(n, h.sample_shape, blob)?;
    Ok(DatasetFile {
        labels: h.labels,
        paths: h.paths,
        targets: h.targets,
        is_test: h.is_test,
        mean: h.mean,
        std: h.std,
        tensors,
    })
}
