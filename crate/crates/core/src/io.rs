//! On-disk formats.
//!
//! Embeddings (`WFCE`): magic, `u32` version, `u64` rows, `u64` cols, then
//! `rows * cols` little-endian `f64` in row-major order. Labels live in a
//! sidecar CSV with header `id,y,a`, where `-1` marks an unknown value.
//!
//! Bundles (`WFCM`): magic, `u32` version, `u8` kind, `u64` length of a JSON
//! block holding the config and a tensor layout table, the JSON itself, a
//! `u64` count of parameters, then the parameters as little-endian `f64`.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Result, WfcError};
use crate::nn::{Activation, Dense, MlpParams};

pub const EMBEDDINGS_MAGIC: [u8; 4] = *b"WFCE";
pub const EMBEDDINGS_VERSION: u32 = 1;
pub const BUNDLE_MAGIC: [u8; 4] = *b"WFCM";
pub const BUNDLE_VERSION: u32 = 1;

const EMBEDDINGS_HEADER: usize = 4 + 4 + 8 + 8;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(WfcError::Truncated(format!("missing {what}")));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn magic(&mut self, expected: [u8; 4]) -> Result<()> {
        let found: [u8; 4] = self.take(4, "magic")?.try_into().expect("4 bytes");
        if found != expected {
            return Err(WfcError::BadMagic { expected, found });
        }
        Ok(())
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    /// Exactly `count` trailing `f64` values.
    fn f64_payload(&mut self, count: u64) -> Result<Vec<f64>> {
        let expected = count
            .checked_mul(8)
            .ok_or_else(|| WfcError::Format(format!("payload of {count} values overflows")))?;
        let found = self.remaining() as u64;
        if found < expected {
            return Err(WfcError::Truncated(format!("payload has {found} of {expected} bytes")));
        }
        if found > expected {
            return Err(WfcError::LengthMismatch { expected, found });
        }
        let raw = self.take(expected as usize, "payload")?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

pub fn encode_embeddings(x: &Array2<f64>) -> Vec<u8> {
    let (n, d) = x.dim();
    let mut out = Vec::with_capacity(EMBEDDINGS_HEADER + 8 * n * d);
    out.extend_from_slice(&EMBEDDINGS_MAGIC);
    out.extend_from_slice(&EMBEDDINGS_VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    out.extend_from_slice(&(d as u64).to_le_bytes());
    for v in x.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_embeddings(bytes: &[u8]) -> Result<Array2<f64>> {
    let mut r = Reader { bytes, pos: 0 };
    r.magic(EMBEDDINGS_MAGIC)?;
    let version = r.u32("version")?;
    if version != EMBEDDINGS_VERSION {
        return Err(WfcError::VersionMismatch {
            expected: EMBEDDINGS_VERSION,
            found: version,
        });
    }
    let n = r.u64("row count")?;
    let d = r.u64("column count")?;
    let count = n
        .checked_mul(d)
        .ok_or_else(|| WfcError::Format(format!("{n} x {d} overflows")))?;
    let values = r.f64_payload(count)?;
    Array2::from_shape_vec((n as usize, d as usize), values).map_err(|e| WfcError::Format(e.to_string()))
}

/// Sidecar path for the labels of `embeddings_path`: `foo.wfce` -> `foo.labels.csv`.
pub fn labels_path(embeddings_path: &Path) -> PathBuf {
    embeddings_path.with_extension("labels.csv")
}

#[derive(Serialize, Deserialize)]
struct LabelRow {
    id: u64,
    y: i64,
    a: i64,
}

/// Labels CSV for a dataset; absent columns are written as `-1`.
pub fn encode_labels(dataset: &Dataset) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for i in 0..dataset.len() {
        w.serialize(LabelRow {
            id: dataset.ids()[i],
            y: dataset.y().map_or(-1, |y| y[i] as i64),
            a: dataset.a().map_or(-1, |a| a[i] as i64),
        })
        .map_err(|e| WfcError::Format(e.to_string()))?;
    }
    w.into_inner().map_err(|e| WfcError::Format(e.to_string()))
}

/// Parsed label columns. A column that is `-1` everywhere is absent; a
/// column mixing known and unknown values is rejected.
pub struct Labels {
    pub ids: Vec<u64>,
    pub y: Option<Vec<usize>>,
    pub a: Option<Vec<usize>>,
}

fn column(values: Vec<i64>, name: &str) -> Result<Option<Vec<usize>>> {
    let unknown = values.iter().filter(|&&v| v == -1).count();
    if !values.is_empty() && unknown == values.len() {
        return Ok(None);
    }
    if unknown > 0 {
        return Err(WfcError::Format(format!(
            "column {name} has {unknown} unknown entries among {} rows",
            values.len()
        )));
    }
    values
        .into_iter()
        .map(|v| usize::try_from(v).map_err(|_| WfcError::Format(format!("invalid {name} value {v}"))))
        .collect::<Result<Vec<_>>>()
        .map(Some)
}

pub fn decode_labels(bytes: &[u8]) -> Result<Labels> {
    let mut r = csv::Reader::from_reader(bytes);
    let headers = r.headers().map_err(|e| WfcError::Format(e.to_string()))?;
    if headers.iter().collect::<Vec<_>>() != ["id", "y", "a"] {
        return Err(WfcError::Format(format!("expected header id,y,a, found {headers:?}")));
    }
    let (mut ids, mut ys, mut as_) = (Vec::new(), Vec::new(), Vec::new());
    for row in r.deserialize::<LabelRow>() {
        let row = row.map_err(|e| WfcError::Format(e.to_string()))?;
        ids.push(row.id);
        ys.push(row.y);
        as_.push(row.a);
    }
    Ok(Labels {
        ids,
        y: column(ys, "y")?,
        a: column(as_, "a")?,
    })
}

/// Write the embeddings file and its labels sidecar.
pub fn write_embeddings(dataset: &Dataset, path: &Path) -> Result<()> {
    fs::write(path, encode_embeddings(&dataset.embeddings().to_owned()))?;
    fs::write(labels_path(path), encode_labels(dataset)?)?;
    Ok(())
}

/// Read an embeddings file and, when present, its labels sidecar.
pub fn read_embeddings(path: &Path) -> Result<Dataset> {
    let x = decode_embeddings(&fs::read(path)?)?;
    let sidecar = labels_path(path);
    if !sidecar.exists() {
        return Dataset::from_parts(x, None, None);
    }
    let labels = decode_labels(&fs::read(&sidecar)?)?;
    if labels.ids.len() != x.nrows() {
        return Err(WfcError::Format(format!(
            "labels file has {} rows, embeddings have {}",
            labels.ids.len(),
            x.nrows()
        )));
    }
    Dataset::new(x, labels.y, labels.a, labels.ids)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum BundleKind {
    Demonic = 1,
    Model = 2,
}

impl TryFrom<u8> for BundleKind {
    type Error = WfcError;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            1 => Ok(BundleKind::Demonic),
            2 => Ok(BundleKind::Model),
            other => Err(WfcError::Format(format!("unknown bundle kind {other}"))),
        }
    }
}

/// One entry of the bundle layout table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorLayout {
    pub name: String,
    pub rows: u64,
    pub cols: u64,
    pub offset: u64,
}

#[derive(Serialize, Deserialize)]
struct BundleHeader {
    config: serde_json::Value,
    layout: Vec<TensorLayout>,
}

/// A typed, versioned container of named matrices plus a JSON config.
#[derive(Clone, Debug, PartialEq)]
pub struct Bundle {
    pub kind: BundleKind,
    pub config: serde_json::Value,
    pub tensors: Vec<(String, Array2<f64>)>,
}

impl Bundle {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut layout = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            layout.push(TensorLayout {
                name: name.clone(),
                rows: t.nrows() as u64,
                cols: t.ncols() as u64,
                offset,
            });
            offset += t.len() as u64;
        }
        let header = serde_json::to_vec(&BundleHeader {
            config: self.config.clone(),
            layout,
        })
        .map_err(|e| WfcError::Format(e.to_string()))?;
        let mut out = Vec::with_capacity(header.len() + 8 * offset as usize + 32);
        out.extend_from_slice(&BUNDLE_MAGIC);
        out.extend_from_slice(&BUNDLE_VERSION.to_le_bytes());
        out.push(self.kind as u8);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&offset.to_le_bytes());
        for (_, t) in &self.tensors {
            for v in t.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Bundle> {
        let mut r = Reader { bytes, pos: 0 };
        r.magic(BUNDLE_MAGIC)?;
        let version = r.u32("version")?;
        if version != BUNDLE_VERSION {
            return Err(WfcError::VersionMismatch {
                expected: BUNDLE_VERSION,
                found: version,
            });
        }
        let kind = BundleKind::try_from(r.u8("kind")?)?;
        let json_len = r.u64("config length")?;
        let json_len = usize::try_from(json_len).map_err(|_| WfcError::Format("config length overflows".into()))?;
        let header: BundleHeader =
            serde_json::from_slice(r.take(json_len, "config block")?).map_err(|e| WfcError::Format(e.to_string()))?;
        let count = r.u64("parameter count")?;
        let payload = r.f64_payload(count)?;
        let mut tensors = Vec::with_capacity(header.layout.len());
        for t in header.layout {
            let len = t.rows.checked_mul(t.cols).and_then(|l| l.checked_add(t.offset));
            let end = len.filter(|&e| e <= count).ok_or_else(|| {
                WfcError::Format(format!("tensor {} lies outside the {count}-value payload", t.name))
            })?;
            let values = payload[t.offset as usize..end as usize].to_vec();
            let m = Array2::from_shape_vec((t.rows as usize, t.cols as usize), values)
                .map_err(|e| WfcError::Format(e.to_string()))?;
            tensors.push((t.name, m));
        }
        Ok(Bundle {
            kind,
            config: header.config,
            tensors,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        w.write_all(&self.encode()?)?;
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Bundle> {
        Bundle::decode(&fs::read(path)?)
    }

    pub fn tensor(&self, name: &str) -> Result<&Array2<f64>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| WfcError::Format(format!("bundle has no tensor {name}")))
    }
}

/// Named tensors for a network: `{prefix}.{k}.weight` and `{prefix}.{k}.bias`.
pub fn mlp_tensors(prefix: &str, params: &MlpParams) -> Vec<(String, Array2<f64>)> {
    let mut out = Vec::new();
    for (k, layer) in params.layers().iter().enumerate() {
        out.push((format!("{prefix}.{k}.weight"), layer.weight.clone()));
        let b = layer.bias.clone().insert_axis(ndarray::Axis(0));
        out.push((format!("{prefix}.{k}.bias"), b));
    }
    out
}

/// Inverse of [`mlp_tensors`].
pub fn mlp_from_tensors(bundle: &Bundle, prefix: &str, num_layers: usize, activation: Activation) -> Result<MlpParams> {
    let mut layers = Vec::with_capacity(num_layers);
    for k in 0..num_layers {
        let weight = bundle.tensor(&format!("{prefix}.{k}.weight"))?.clone();
        let bias = bundle.tensor(&format!("{prefix}.{k}.bias"))?;
        if bias.nrows() != 1 {
            return Err(WfcError::Format(format!("bias {prefix}.{k} must be a single row")));
        }
        layers.push(Dense {
            weight,
            bias: bias.row(0).to_owned(),
        });
    }
    MlpParams::from_layers(activation, layers)
}
