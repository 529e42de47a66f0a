//! Feature tensor files (`.fst`) and JSON-lines run manifests.
//!
//! A tensor file is a 32 byte little-endian header followed by the raw
//! row-major payload:
//!
//! | offset | size | field                         |
//! |--------|------|-------------------------------|
//! | 0      | 4    | magic `FSTF`                  |
//! | 4      | 2    | version, u16 = 1              |
//! | 6      | 1    | dtype, u8 (1 = f32, 2 = f64)  |
//! | 7      | 1    | ndim, u8 = 3                  |
//! | 8      | 24   | T, B, C as u64                |
//!
//! Element `(t, b, c)` sits at index `t·B·C + b·C + c`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"FSTF";
pub const VERSION: u16 = 1;
pub const RANK: u8 = 3;
/// Magic, version, dtype, ndim and three u64 dims.
pub const HEADER_BYTES: usize = 4 + 2 + 1 + 1 + 3 * 8;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),
    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),
    #[error("unsupported rank {0}, only 3-d tensors are stored")]
    UnsupportedRank(u8),
    #[error("dimension is zero in {0:?}")]
    ZeroDim([u64; 3]),
    #[error("dimensions {0:?} exceed addressable size")]
    DimOverflow([u64; 3]),
    #[error("truncated header")]
    TruncatedHeader,
    #[error("truncated data: expected {expected} bytes, found {found}")]
    TruncatedData { expected: usize, found: usize },
    #[error("non-finite value at element {index}")]
    NonFinite { index: usize },
    #[error("data length {len} does not match dims {dims:?}")]
    ShapeMismatch { dims: [usize; 3], len: usize },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    #[default]
    F32,
    F64,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 1,
            Dtype::F64 => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(Dtype::F32),
            2 => Some(Dtype::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Tensor shape, time × batch × channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub time: usize,
    pub batch: usize,
    pub channel: usize,
}

impl Dims {
    pub fn new(time: usize, batch: usize, channel: usize) -> Self {
        Self {
            time,
            batch,
            channel,
        }
    }

    pub fn len(&self) -> usize {
        self.time * self.batch * self.channel
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.time, self.batch, self.channel]
    }
}

impl std::fmt::Display for Dims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.time, self.batch, self.channel)
    }
}

impl std::str::FromStr for Dims {
    type Err = String;

    /// Parses `TxBxC`, e.g. `16x12x64`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(['x', 'X']).collect();
        if parts.len() != 3 {
            return Err(format!("expected TxBxC, got {s:?}"));
        }
        let mut v = [0usize; 3];
        for (slot, p) in v.iter_mut().zip(&parts) {
            *slot = p
                .trim()
                .parse()
                .map_err(|_| format!("bad dimension {p:?} in {s:?}"))?;
            if *slot == 0 {
                return Err(format!("zero dimension in {s:?}"));
            }
        }
        Ok(Dims::new(v[0], v[1], v[2]))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> Dtype {
        match self {
            TensorData::F32(_) => Dtype::F32,
            TensorData::F64(_) => Dtype::F64,
        }
    }
}

/// One epoch's feature block, laid out time × batch × channel.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    dims: Dims,
    data: TensorData,
}

impl FeatureTensor {
    pub fn new(dims: Dims, data: TensorData) -> Result<Self, TensorError> {
        if dims.time == 0 || dims.batch == 0 || dims.channel == 0 {
            let d = dims.as_array().map(|x| x as u64);
            return Err(TensorError::ZeroDim(d));
        }
        let expected = dims
            .time
            .checked_mul(dims.batch)
            .and_then(|x| x.checked_mul(dims.channel));
        if expected != Some(data.len()) {
            return Err(TensorError::ShapeMismatch {
                dims: dims.as_array(),
                len: data.len(),
            });
        }
        Ok(Self { dims, data })
    }

    pub fn from_f32(dims: Dims, data: Vec<f32>) -> Result<Self, TensorError> {
        Self::new(dims, TensorData::F32(data))
    }

    pub fn from_f64(dims: Dims, data: Vec<f64>) -> Result<Self, TensorError> {
        Self::new(dims, TensorData::F64(data))
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn dtype(&self) -> Dtype {
        self.data.dtype()
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn index(&self, t: usize, b: usize, c: usize) -> usize {
        let Dims { batch, channel, .. } = self.dims;
        t * batch * channel + b * channel + c
    }

    pub fn get(&self, t: usize, b: usize, c: usize) -> f64 {
        let i = self.index(t, b, c);
        match &self.data {
            TensorData::F32(v) => v[i] as f64,
            TensorData::F64(v) => v[i],
        }
    }

    /// Channel values of frame `(t, b)` widened to f64.
    pub fn channel_slice(&self, t: usize, b: usize) -> Vec<f64> {
        let start = self.index(t, b, 0);
        let end = start + self.dims.channel;
        match &self.data {
            TensorData::F32(v) => v[start..end].iter().map(|&x| x as f64).collect(),
            TensorData::F64(v) => v[start..end].to_vec(),
        }
    }

    pub fn non_finite_count(&self) -> usize {
        match &self.data {
            TensorData::F32(v) => v.iter().filter(|x| !x.is_finite()).count(),
            TensorData::F64(v) => v.iter().filter(|x| !x.is_finite()).count(),
        }
    }

    fn first_non_finite(&self) -> Option<usize> {
        match &self.data {
            TensorData::F32(v) => v.iter().position(|x| !x.is_finite()),
            TensorData::F64(v) => v.iter().position(|x| !x.is_finite()),
        }
    }

    /// Returns a copy with the batch axis reordered so that output batch `i`
    /// holds input batch `order[i]`.
    pub fn permute_batch(&self, order: &[usize]) -> Self {
        assert_eq!(order.len(), self.dims.batch);
        let Dims {
            time,
            batch,
            channel,
        } = self.dims;
        fn gather<T: Copy>(
            v: &[T],
            time: usize,
            batch: usize,
            channel: usize,
            order: &[usize],
        ) -> Vec<T> {
            let mut out = Vec::with_capacity(v.len());
            for t in 0..time {
                for &b in order {
                    let s = t * batch * channel + b * channel;
                    out.extend_from_slice(&v[s..s + channel]);
                }
            }
            out
        }
        let data = match &self.data {
            TensorData::F32(v) => TensorData::F32(gather(v, time, batch, channel, order)),
            TensorData::F64(v) => TensorData::F64(gather(v, time, batch, channel, order)),
        };
        Self {
            dims: self.dims,
            data,
        }
    }

    /// Encoded size in bytes.
    pub fn encoded_len(&self) -> usize {
        HEADER_BYTES + self.dims.len() * self.dtype().size()
    }
}

/// How non-finite payload values are treated on read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReadMode {
    #[default]
    Strict,
    Lenient,
}

/// Result of a lenient read.
#[derive(Debug, Clone, PartialEq)]
pub struct ReadReport {
    pub tensor: FeatureTensor,
    pub non_finite: usize,
}

pub fn write_tensor<W: Write>(t: &FeatureTensor, mut w: W) -> Result<usize, TensorError> {
    let mut header = Vec::with_capacity(HEADER_BYTES);
    header.extend_from_slice(&MAGIC);
    header.extend_from_slice(&VERSION.to_le_bytes());
    header.push(t.dtype().code());
    header.push(RANK);
    for d in t.dims.as_array() {
        header.extend_from_slice(&(d as u64).to_le_bytes());
    }
    w.write_all(&header)?;

    let mut written = header.len();
    let payload: Vec<u8> = match &t.data {
        TensorData::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        TensorData::F64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
    };
    w.write_all(&payload)?;
    written += payload.len();
    w.flush()?;
    Ok(written)
}

pub fn read_tensor<R: Read>(r: R) -> Result<FeatureTensor, TensorError> {
    read_tensor_with(r, ReadMode::Strict).map(|rep| rep.tensor)
}

pub fn read_tensor_with<R: Read>(mut r: R, mode: ReadMode) -> Result<ReadReport, TensorError> {
    let mut header = [0u8; HEADER_BYTES];
    let got = read_up_to(&mut r, &mut header)?;
    if got < 4 {
        return Err(TensorError::TruncatedHeader);
    }
    let magic: [u8; 4] = header[0..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(TensorError::BadMagic(magic));
    }
    if got < HEADER_BYTES {
        return Err(TensorError::TruncatedHeader);
    }
    let version = u16::from_le_bytes([header[4], header[5]]);
    if version != VERSION {
        return Err(TensorError::UnsupportedVersion(version));
    }
    let dtype = Dtype::from_code(header[6]).ok_or(TensorError::UnsupportedDtype(header[6]))?;
    if header[7] != RANK {
        return Err(TensorError::UnsupportedRank(header[7]));
    }
    let mut raw = [0u64; 3];
    for (i, slot) in raw.iter_mut().enumerate() {
        let s = 8 + 8 * i;
        *slot = u64::from_le_bytes(header[s..s + 8].try_into().unwrap());
    }
    if raw.contains(&0) {
        return Err(TensorError::ZeroDim(raw));
    }
    let expected = raw
        .iter()
        .try_fold(1u64, |acc, &d| acc.checked_mul(d))
        .and_then(|n| n.checked_mul(dtype.size() as u64))
        .filter(|&bytes| bytes <= isize::MAX as u64)
        .ok_or(TensorError::DimOverflow(raw))? as usize;

    let mut payload = Vec::new();
    r.take(expected as u64).read_to_end(&mut payload)?;
    if payload.len() < expected {
        return Err(TensorError::TruncatedData {
            expected,
            found: payload.len(),
        });
    }

    let dims = Dims::new(raw[0] as usize, raw[1] as usize, raw[2] as usize);
    let data = match dtype {
        Dtype::F32 => TensorData::F32(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        Dtype::F64 => TensorData::F64(
            payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
    };
    let tensor = FeatureTensor::new(dims, data)?;
    let non_finite = match mode {
        ReadMode::Strict => {
            if let Some(index) = tensor.first_non_finite() {
                return Err(TensorError::NonFinite { index });
            }
            0
        }
        ReadMode::Lenient => tensor.non_finite_count(),
    };
    Ok(ReadReport { tensor, non_finite })
}

fn read_up_to<R: Read>(r: &mut R, buf: &mut [u8]) -> io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}

pub fn write_tensor_file(t: &FeatureTensor, path: &Path) -> Result<usize, TensorError> {
    let f = File::create(path)?;
    write_tensor(t, BufWriter::new(f))
}

pub fn read_tensor_file(path: &Path, mode: ReadMode) -> Result<ReadReport, TensorError> {
    let f = File::open(path)?;
    read_tensor_with(BufReader::new(f), mode)
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("line {line}: {message}")]
    MalformedLine { line: usize, message: String },
    #[error("line {line}: epoch {epoch} does not follow epoch {previous}")]
    NonMonotonicEpochs {
        line: usize,
        previous: u64,
        epoch: u64,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub epoch: u64,
    #[serde(rename = "tensor")]
    pub tensor_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<BTreeMap<String, f64>>,
    #[serde(
        rename = "encoder",
        alias = "encoder_tag",
        default,
        skip_serializing_if = "String::is_empty"
    )]
    pub encoder_tag: String,
}

impl ManifestEntry {
    pub fn new(epoch: u64, tensor_path: impl Into<PathBuf>) -> Self {
        Self {
            epoch,
            tensor_path: tensor_path.into(),
            scores: None,
            encoder_tag: String::new(),
        }
    }

    pub fn score(&self, metric: &str) -> Option<f64> {
        self.scores.as_ref()?.get(metric).copied()
    }
}

/// Ordered epochs of one training run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunManifest {
    pub entries: Vec<ManifestEntry>,
    /// Directory tensor paths are resolved against.
    pub base_dir: PathBuf,
}

impl RunManifest {
    pub fn new(base_dir: impl Into<PathBuf>) -> Self {
        Self {
            entries: Vec::new(),
            base_dir: base_dir.into(),
        }
    }

    /// Appends an entry, enforcing strictly increasing epochs.
    pub fn push(&mut self, entry: ManifestEntry) -> Result<(), ManifestError> {
        if let Some(prev) = self.entries.last() {
            if entry.epoch <= prev.epoch {
                return Err(ManifestError::NonMonotonicEpochs {
                    line: self.entries.len() + 1,
                    previous: prev.epoch,
                    epoch: entry.epoch,
                });
            }
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        self.base_dir.join(&entry.tensor_path)
    }

    /// The run's encoder tag: the first non-empty entry tag.
    pub fn encoder_tag(&self) -> Option<&str> {
        self.entries
            .iter()
            .map(|e| e.encoder_tag.as_str())
            .find(|t| !t.is_empty())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn parse<R: BufRead>(
        reader: R,
        base_dir: impl Into<PathBuf>,
    ) -> Result<Self, ManifestError> {
        let mut manifest = RunManifest::new(base_dir);
        let mut previous: Option<u64> = None;
        for (i, line) in reader.lines().enumerate() {
            let line_no = i + 1;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: ManifestEntry =
                serde_json::from_str(&line).map_err(|e| ManifestError::MalformedLine {
                    line: line_no,
                    message: e.to_string(),
                })?;
            if let Some(prev) = previous {
                if entry.epoch <= prev {
                    return Err(ManifestError::NonMonotonicEpochs {
                        line: line_no,
                        previous: prev,
                        epoch: entry.epoch,
                    });
                }
            }
            previous = Some(entry.epoch);
            manifest.entries.push(entry);
        }
        Ok(manifest)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), ManifestError> {
        for entry in &self.entries {
            let line = serde_json::to_string(entry).map_err(io::Error::other)?;
            writeln!(w, "{line}")?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn load_manifest(path: &Path) -> Result<RunManifest, ManifestError> {
    let f = File::open(path)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    RunManifest::parse(BufReader::new(f), base)
}

pub fn save_manifest(m: &RunManifest, path: &Path) -> Result<(), ManifestError> {
    let f = File::create(path)?;
    m.write_to(BufWriter::new(f))
}
