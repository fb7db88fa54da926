//! Parameter archive format and the local weights cache.
//!
//! An archive is `PVCKARC1`, a little-endian u64 header length, a JSON
//! header describing the layer stack, then raw little-endian f32 blobs
//! in declaration order. Backbone archives hold only the feature
//! extractor; checkpoint archives additionally carry the classifier
//! head, the trainability flags and the originating spec.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Array4};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::nn::{BatchNorm, Conv2d, Dense, Layer, Network};
use super::{BackboneSpec, ModelError};

const MAGIC: &[u8; 8] = b"PVCKARC1";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerDesc {
    Conv2d {
        out_channels: usize,
        in_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    BatchNorm {
        channels: usize,
        eps: f32,
    },
    Relu,
    MaxPool {
        size: usize,
        stride: usize,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArchiveHeader {
    pub kind: ArchiveKind,
    pub name: String,
    pub feature_channels: usize,
    pub layers: Vec<LayerDesc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head_in_features: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trainable_units: Option<Vec<bool>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<BackboneSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchiveKind {
    Backbone,
    Checkpoint,
}

pub(super) fn layer_desc(layer: &Layer) -> LayerDesc {
    match layer {
        Layer::Conv2d(c) => LayerDesc::Conv2d {
            out_channels: c.out_channels(),
            in_channels: c.in_channels(),
            kernel: c.kernel().0,
            stride: c.stride,
            padding: c.padding,
        },
        Layer::BatchNorm(b) => LayerDesc::BatchNorm {
            channels: b.gamma.len(),
            eps: b.eps,
        },
        Layer::Relu => LayerDesc::Relu,
        Layer::MaxPool { size, stride } => LayerDesc::MaxPool {
            size: *size,
            stride: *stride,
        },
    }
}

fn push_f32s(buf: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn layer_blobs(layer: &Layer, buf: &mut Vec<u8>) {
    match layer {
        Layer::Conv2d(c) => {
            push_f32s(buf, c.weight.as_slice().unwrap());
            push_f32s(buf, c.bias.as_slice().unwrap());
        }
        Layer::BatchNorm(b) => {
            push_f32s(buf, b.gamma.as_slice().unwrap());
            push_f32s(buf, b.beta.as_slice().unwrap());
            push_f32s(buf, b.running_mean.as_slice().unwrap());
            push_f32s(buf, b.running_var.as_slice().unwrap());
        }
        _ => {}
    }
}

fn corrupt(path: &Path, msg: impl Into<String>) -> ModelError {
    ModelError::Archive {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

/// Serialize header + network (+ optional head) to `path`.
pub fn write_archive(
    path: &Path,
    header: &ArchiveHeader,
    network: &Network,
    head: Option<&Dense>,
) -> Result<(), ModelError> {
    let header_json = serde_json::to_vec(header)
        .map_err(|e| corrupt(path, format!("header serialization: {e}")))?;
    let mut blobs = Vec::new();
    for layer in &network.layers {
        layer_blobs(layer, &mut blobs);
    }
    if let Some(dense) = head {
        push_f32s(&mut blobs, dense.weight.as_slice().unwrap());
        push_f32s(&mut blobs, dense.bias.as_slice().unwrap());
    }
    let mut out = Vec::with_capacity(MAGIC.len() + 8 + header_json.len() + blobs.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    out.extend_from_slice(&blobs);
    std::fs::write(path, out).map_err(|e| ModelError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

struct BlobReader<'a> {
    data: &'a [u8],
    offset: usize,
    path: &'a Path,
}

impl<'a> BlobReader<'a> {
    fn take(&mut self, count: usize) -> Result<Vec<f32>, ModelError> {
        let bytes = count * 4;
        if self.offset + bytes > self.data.len() {
            return Err(corrupt(
                self.path,
                format!(
                    "truncated weights: wanted {count} more floats at offset {}",
                    self.offset
                ),
            ));
        }
        let out = self.data[self.offset..self.offset + bytes]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        self.offset += bytes;
        Ok(out)
    }
}

/// Parsed archive: header, network weights, optional head.
pub struct ParsedArchive {
    pub header: ArchiveHeader,
    pub network: Network,
    pub head: Option<Dense>,
}

/// Read and validate an archive file.
pub fn read_archive(path: &Path) -> Result<ParsedArchive, ModelError> {
    let mut file = std::fs::File::open(path).map_err(|e| ModelError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut data = Vec::new();
    file.read_to_end(&mut data).map_err(|e| ModelError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    if data.len() < MAGIC.len() + 8 || &data[..MAGIC.len()] != MAGIC {
        return Err(corrupt(path, "bad magic; not a parameter archive"));
    }
    let header_len =
        u64::from_le_bytes(data[8..16].try_into().unwrap()) as usize;
    if 16 + header_len > data.len() {
        return Err(corrupt(path, "truncated header"));
    }
    let header: ArchiveHeader = serde_json::from_slice(&data[16..16 + header_len])
        .map_err(|e| corrupt(path, format!("header parse: {e}")))?;

    let mut reader = BlobReader {
        data: &data[16 + header_len..],
        offset: 0,
        path,
    };
    let mut layers = Vec::with_capacity(header.layers.len());
    for desc in &header.layers {
        let layer = match *desc {
            LayerDesc::Conv2d {
                out_channels,
                in_channels,
                kernel,
                stride,
                padding,
            } => {
                let weight = reader.take(out_channels * kernel * kernel * in_channels)?;
                let bias = reader.take(out_channels)?;
                Layer::Conv2d(Conv2d {
                    weight: Array4::from_shape_vec(
                        (out_channels, kernel, kernel, in_channels),
                        weight,
                    )
                    .map_err(|e| corrupt(path, e.to_string()))?,
                    bias: Array1::from_vec(bias),
                    stride,
                    padding,
                })
            }
            LayerDesc::BatchNorm { channels, eps } => Layer::BatchNorm(BatchNorm {
                gamma: Array1::from_vec(reader.take(channels)?),
                beta: Array1::from_vec(reader.take(channels)?),
                running_mean: Array1::from_vec(reader.take(channels)?),
                running_var: Array1::from_vec(reader.take(channels)?),
                eps,
            }),
            LayerDesc::Relu => Layer::Relu,
            LayerDesc::MaxPool { size, stride } => Layer::MaxPool { size, stride },
        };
        layers.push(layer);
    }
    let network = Network { layers };

    let head = match header.head_in_features {
        Some(in_features) => {
            let weight = reader.take(in_features)?;
            let bias = reader.take(1)?;
            Some(Dense {
                weight: Array2::from_shape_vec((1, in_features), weight)
                    .map_err(|e| corrupt(path, e.to_string()))?,
                bias: Array1::from_vec(bias),
            })
        }
        None => None,
    };
    if reader.offset != reader.data.len() {
        return Err(corrupt(
            path,
            format!(
                "{} trailing bytes after declared weights",
                reader.data.len() - reader.offset
            ),
        ));
    }
    Ok(ParsedArchive {
        header,
        network,
        head,
    })
}

/// Hex SHA-256 of a file.
pub fn file_digest(path: &Path) -> Result<String, ModelError> {
    let data = std::fs::read(path).map_err(|e| ModelError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(hex::encode(Sha256::digest(&data)))
}

/// Local directory of pretrained archives plus a `weights.lock`
/// recording `name<TAB>source URI<TAB>sha256` per archive.
#[derive(Debug, Clone)]
pub struct WeightsCache {
    dir: PathBuf,
}

/// One `weights.lock` line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LockEntry {
    pub name: String,
    pub uri: String,
    pub digest: String,
}

impl WeightsCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        WeightsCache { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn lock_path(&self) -> PathBuf {
        self.dir.join("weights.lock")
    }

    /// Archive location for a spec: `pretrained_source` resolved
    /// against the cache directory unless already absolute.
    pub fn resolve(&self, spec: &BackboneSpec) -> PathBuf {
        let source = Path::new(&spec.pretrained_source);
        if source.is_absolute() {
            source.to_path_buf()
        } else {
            self.dir.join(source)
        }
    }

    pub fn lock_entries(&self) -> Result<Vec<LockEntry>, ModelError> {
        let path = self.lock_path();
        if !path.exists() {
            return Ok(Vec::new());
        }
        let text = std::fs::read_to_string(&path).map_err(|e| ModelError::Io {
            path: path.clone(),
            source: e,
        })?;
        Ok(text
            .lines()
            .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
            .filter_map(|l| {
                let mut it = l.split('\t');
                Some(LockEntry {
                    name: it.next()?.to_string(),
                    uri: it.next()?.to_string(),
                    digest: it.next()?.to_string(),
                })
            })
            .collect())
    }

    pub fn lock_entry(&self, name: &str) -> Result<Option<LockEntry>, ModelError> {
        Ok(self.lock_entries()?.into_iter().find(|e| e.name == name))
    }

    /// Record (or replace) the lock entry for an archive on disk.
    pub fn record(&self, name: &str, uri: &str, archive: &Path) -> Result<LockEntry, ModelError> {
        std::fs::create_dir_all(&self.dir).map_err(|e| ModelError::Io {
            path: self.dir.clone(),
            source: e,
        })?;
        let digest = file_digest(archive)?;
        let mut entries: Vec<LockEntry> = self
            .lock_entries()?
            .into_iter()
            .filter(|e| e.name != name)
            .collect();
        let entry = LockEntry {
            name: name.to_string(),
            uri: uri.to_string(),
            digest,
        };
        entries.push(entry.clone());
        entries.sort_by(|a, b| a.name.cmp(&b.name));
        let mut body = String::new();
        for e in &entries {
            body.push_str(&format!("{}\t{}\t{}\n", e.name, e.uri, e.digest));
        }
        let path = self.lock_path();
        let mut f = std::fs::File::create(&path).map_err(|e| ModelError::Io {
            path: path.clone(),
            source: e,
        })?;
        f.write_all(body.as_bytes()).map_err(|e| ModelError::Io {
            path,
            source: e,
        })?;
        Ok(entry)
    }

    /// Verify an archive against its lock entry, when one exists.
    pub fn verify(&self, spec: &BackboneSpec) -> Result<(), ModelError> {
        let Some(entry) = self.lock_entry(&spec.name)? else {
            return Ok(());
        };
        let actual = file_digest(&self.resolve(spec))?;
        if actual != entry.digest {
            return Err(ModelError::Integrity {
                name: spec.name.clone(),
                expected: entry.digest,
                actual,
            });
        }
        Ok(())
    }
}
