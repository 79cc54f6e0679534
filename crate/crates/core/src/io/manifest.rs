//! `path,label[,split]` CSV manifests.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ManifestError {
    #[error("cannot read manifest: {0}")]
    Io(String),
    #[error("line {line}: {reason}")]
    ParseError { line: u64, reason: String },
    #[error("duplicate path {0}")]
    DuplicatePath(String),
    #[error("manifest has no rows")]
    EmptyManifest,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRow {
    /// Relative to the manifest's directory.
    pub path: String,
    pub label: usize,
    pub split: Option<Split>,
}

/// Labelled image list. Label ids follow first appearance.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
    pub labels: Vec<String>,
}

impl Manifest {
    pub fn label_id(&self, name: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == name)
    }

    /// Adds a row, registering its label if new.
    pub fn push(&mut self, path: &str, label: &str, split: Option<Split>) -> Result<(), ManifestError> {
        if self.rows.iter().any(|r| r.path == path) {
            return Err(ManifestError::DuplicatePath(path.to_string()));
        }
        let id = match self.label_id(label) {
            Some(id) => id,
            None => {
                self.labels.push(label.to_string());
                self.labels.len() - 1
            }
        };
        self.rows.push(ManifestRow { path: path.to_string(), label: id, split });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn label_ids(&self) -> Vec<usize> {
        self.rows.iter().map(|r| r.label).collect()
    }

    pub fn has_splits(&self) -> bool {
        self.rows.iter().any(|r| r.split.is_some())
    }

    pub fn parse<R: Read>(reader: R) -> Result<Self, ManifestError> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(false).flexible(true).trim(csv::Trim::All).from_reader(reader);
        let mut records = rdr.records();
        let header = match records.next() {
            None => return Err(ManifestError::EmptyManifest),
            Some(r) => r.map_err(|e| parse_err(1, e.to_string()))?,
        };
        let cols: Vec<&str> = header.iter().collect();
        let with_split = match cols.as_slice() {
            ["path", "label"] => false,
            ["path", "label", "split"] => true,
            _ => return Err(parse_err(1, format!("expected header `path,label[,split]`, got `{}`", cols.join(",")))),
        };
        let mut manifest = Manifest::default();
        let mut seen = HashSet::new();
        for rec in records {
            let rec = rec.map_err(|e| parse_err(e.position().map_or(0, |p| p.line()), e.to_string()))?;
            let line = rec.position().map_or(0, |p| p.line());
            if rec.iter().all(str::is_empty) {
                continue;
            }
            let want = if with_split { 3 } else { 2 };
            if rec.len() != want {
                return Err(parse_err(line, format!("expected {want} fields, got {}", rec.len())));
            }
            let (path, label) = (&rec[0], &rec[1]);
            if path.is_empty() || label.is_empty() {
                return Err(parse_err(line, "empty path or label".into()));
            }
            let split = if with_split {
                match &rec[2] {
                    "train" => Some(Split::Train),
                    "test" => Some(Split::Test),
                    "" => None,
                    other => return Err(parse_err(line, format!("split must be train or test, got `{other}`"))),
                }
            } else {
                None
            };
            if !seen.insert(path.to_string()) {
                return Err(ManifestError::DuplicatePath(path.to_string()));
            }
            manifest.push(path, label, split)?;
        }
        if manifest.is_empty() {
            return Err(ManifestError::EmptyManifest);
        }
        Ok(manifest)
    }

    pub fn write<W: Write>(&self, writer: W) -> Result<(), ManifestError> {
        let mut w = csv::Writer::from_writer(writer);
        let io = |e: csv::Error| ManifestError::Io(e.to_string());
        let with_split = self.has_splits();
        if with_split {
            w.write_record(["path", "label", "split"]).map_err(io)?;
        } else {
            w.write_record(["path", "label"]).map_err(io)?;
        }
        for r in &self.rows {
            let label = self.labels[r.label].as_str();
            if with_split {
                w.write_record([r.path.as_str(), label, r.split.map_or("", |s| s.name())]).map_err(io)?;
            } else {
                w.write_record([r.path.as_str(), label]).map_err(io)?;
            }
        }
        w.flush().map_err(|e| ManifestError::Io(e.to_string()))
    }
}

fn parse_err(line: u64, reason: String) -> ManifestError {
    ManifestError::ParseError { line, reason }
}

pub fn load_manifest(path: &Path) -> Result<Manifest, ManifestError> {
    let file = std::fs::File::open(path).map_err(|e| ManifestError::Io(format!("{}: {e}", path.display())))?;
    Manifest::parse(file)
}
