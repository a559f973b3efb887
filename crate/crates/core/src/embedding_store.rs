//! Embedding and score matrices plus the OSVD binary dump format.
//!
//! Layout of an OSVD file (all integers little-endian):
//!
//! ```text
//! offset  size  field
//!      0     4  magic "OSVD"
//!      4     4  version u32 = 1
//!      8     1  dtype u8 = 1 (f32)
//!      9     3  reserved, zero
//!     12     4  dim u32
//!     16     8  count u64
//!     24     1  flags u8 (bit0 = rows are L2-normalized)
//!     25     7  reserved, zero
//!     32     -  count * dim f32 values, row-major
//! ```
//!
//! Every dump has a JSON-lines sidecar that maps row index to a record id
//! (image id, label string or proposal id).

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"OSVD";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 1;
pub const HEADER_LEN: usize = 32;
const FLAG_NORMALIZED: u8 = 0b1;

/// Rows flagged as normalized must have a norm this close to 1.
pub const NORM_TOLERANCE: f64 = 1e-4;

/// Dense row-major matrix of `count` embeddings of dimension `dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    dim: usize,
    count: usize,
    data: Vec<f32>,
    normalized: bool,
}

impl EmbeddingMatrix {
    pub fn new(dim: usize, count: usize, data: Vec<f32>, normalized: bool) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Shape("embedding dimension must be positive".into()));
        }
        let expected = dim
            .checked_mul(count)
            .ok_or_else(|| Error::Shape(format!("{count} x {dim} overflows")))?;
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "data length {} != {count} x {dim}",
                data.len()
            )));
        }
        let m = Self {
            dim,
            count,
            data,
            normalized,
        };
        if normalized {
            if let Some((i, norm)) = m.first_non_unit_row() {
                return Err(Error::Shape(format!(
                    "row {i} flagged normalized but has norm {norm}"
                )));
            }
        }
        Ok(m)
    }

    pub fn from_rows<R: AsRef<[f32]>>(dim: usize, rows: &[R], normalized: bool) -> Result<Self> {
        let mut data = Vec::with_capacity(dim * rows.len());
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != dim {
                return Err(Error::Shape(format!(
                    "row {i} has length {}, expected {dim}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::new(dim, rows.len(), data, normalized)
    }

    pub fn empty(dim: usize) -> Result<Self> {
        Self::new(dim, 0, Vec::new(), true)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f32]> + '_ {
        self.data.chunks_exact(self.dim)
    }

    /// First `n` rows as a new matrix.
    pub fn prefix(&self, n: usize) -> Result<Self> {
        if n > self.count {
            return Err(Error::Parameter(format!(
                "requested {n} rows from a matrix of {}",
                self.count
            )));
        }
        Ok(Self {
            dim: self.dim,
            count: n,
            data: self.data[..n * self.dim].to_vec(),
            normalized: self.normalized,
        })
    }

    /// Matrix made of the given rows, in the given order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            dim: self.dim,
            count: indices.len(),
            data,
            normalized: self.normalized,
        }
    }

    /// Row-wise concatenation.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        if self.dim != other.dim {
            return Err(Error::Shape(format!(
                "cannot stack dim {} onto dim {}",
                other.dim, self.dim
            )));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Self {
            dim: self.dim,
            count: self.count + other.count,
            data,
            normalized: self.normalized && other.normalized,
        })
    }

    fn first_non_unit_row(&self) -> Option<(usize, f64)> {
        self.rows().enumerate().find_map(|(i, r)| {
            let norm = l2_norm(r);
            let zero = r.iter().all(|&v| v == 0.0);
            (!zero && (norm - 1.0).abs() > NORM_TOLERANCE).then_some((i, norm))
        })
    }
}

pub(crate) fn l2_norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt()
}

/// Divides every nonzero row by its L2 norm. All-zero rows pass through.
pub fn l2_normalize(matrix: &EmbeddingMatrix) -> EmbeddingMatrix {
    let mut data = matrix.data.clone();
    for row in data.chunks_exact_mut(matrix.dim) {
        normalize_in_place(row);
    }
    EmbeddingMatrix {
        dim: matrix.dim,
        count: matrix.count,
        data,
        normalized: true,
    }
}

pub(crate) fn normalize_in_place(row: &mut [f32]) {
    let norm = l2_norm(row);
    if norm > 0.0 {
        for v in row.iter_mut() {
            *v = (f64::from(*v) / norm) as f32;
        }
    }
}

/// Raw per-class scores for a set of predictions; columns follow the query
/// order of the plan, negative slots last.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl ScoreMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if cols == 0 {
            return Err(Error::Shape("score matrix needs at least one column".into()));
        }
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "score data length {} != {rows} x {cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn into_matrix(self) -> EmbeddingMatrix {
        EmbeddingMatrix {
            dim: self.cols,
            count: self.rows,
            data: self.data,
            normalized: false,
        }
    }
}

impl From<EmbeddingMatrix> for ScoreMatrix {
    fn from(m: EmbeddingMatrix) -> Self {
        Self {
            rows: m.count,
            cols: m.dim,
            data: m.data,
        }
    }
}

struct CountingWriter<W> {
    inner: W,
    written: u64,
}

impl<W: Write> CountingWriter<W> {
    fn put(&mut self, bytes: &[u8]) -> Result<()> {
        self.inner.write_all(bytes).map_err(|source| Error::Io {
            offset: self.written,
            source,
        })?;
        self.written += bytes.len() as u64;
        Ok(())
    }
}

/// Writes `matrix` in OSVD format and returns the number of bytes written.
pub fn save_dump<W: Write>(matrix: &EmbeddingMatrix, sink: W) -> Result<u64> {
    let dim = u32::try_from(matrix.dim)
        .map_err(|_| Error::Shape(format!("dim {} does not fit in u32", matrix.dim)))?;
    let mut header = [0u8; HEADER_LEN];
    header[0..4].copy_from_slice(MAGIC);
    header[4..8].copy_from_slice(&VERSION.to_le_bytes());
    header[8] = DTYPE_F32;
    header[12..16].copy_from_slice(&dim.to_le_bytes());
    header[16..24].copy_from_slice(&(matrix.count as u64).to_le_bytes());
    header[24] = if matrix.normalized { FLAG_NORMALIZED } else { 0 };

    let mut w = CountingWriter {
        inner: sink,
        written: 0,
    };
    w.put(&header)?;
    let mut buf = Vec::with_capacity(matrix.dim * 4);
    for row in matrix.rows() {
        buf.clear();
        for v in row {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.put(&buf)?;
    }
    w.inner.flush().map_err(|source| Error::Io {
        offset: w.written,
        source,
    })?;
    Ok(w.written)
}

/// Parses an OSVD stream.
pub fn load_dump<R: Read>(mut source: R) -> Result<EmbeddingMatrix> {
    let mut header = [0u8; HEADER_LEN];
    let mut got = 0;
    while got < HEADER_LEN {
        match source.read(&mut header[got..]) {
            Ok(0) => {
                return Err(Error::Format(format!(
                    "header truncated at {got} of {HEADER_LEN} bytes"
                )))
            }
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(source) => {
                return Err(Error::Io {
                    offset: got as u64,
                    source,
                })
            }
        }
    }
    if &header[0..4] != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}",
            String::from_utf8_lossy(&header[0..4])
        )));
    }
    let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    if header[8] != DTYPE_F32 {
        return Err(Error::Format(format!("unsupported dtype {}", header[8])));
    }
    if header[9..12].iter().chain(&header[25..32]).any(|&b| b != 0) {
        return Err(Error::Format("reserved header bytes are not zero".into()));
    }
    if header[24] & !FLAG_NORMALIZED != 0 {
        return Err(Error::Format(format!("unknown flag bits {:#04x}", header[24])));
    }
    let dim = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(header[16..24].try_into().unwrap());
    let normalized = header[24] & FLAG_NORMALIZED != 0;
    if dim == 0 {
        return Err(Error::Format("dim must be positive".into()));
    }
    let expected = count
        .checked_mul(dim as u64)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Format(format!("{count} x {dim} overflows")))?;

    let mut payload = Vec::new();
    source
        .read_to_end(&mut payload)
        .map_err(|source| Error::Io {
            offset: HEADER_LEN as u64,
            source,
        })?;
    if payload.len() as u64 != expected {
        return Err(Error::Corruption {
            expected,
            actual: payload.len() as u64,
        });
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    EmbeddingMatrix::new(dim, count as usize, data, normalized)
        .map_err(|e| Error::Format(e.to_string()))
}

pub fn save_dump_file(matrix: &EmbeddingMatrix, path: impl AsRef<Path>) -> Result<u64> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::file(path, e))?;
    save_dump(matrix, BufWriter::new(f))
}

pub fn load_dump_file(path: impl AsRef<Path>) -> Result<EmbeddingMatrix> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::file(path, e))?;
    load_dump(BufReader::new(f))
}

/// One line of a dump sidecar.
///
/// `row` is `None` for records that describe an input without a matrix row:
/// a skipped (`missing`) input, or a detection image with zero proposals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SidecarRecord {
    pub row: Option<u64>,
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_id: Option<String>,
    #[serde(default, rename = "box", skip_serializing_if = "Option::is_none")]
    pub bbox: Option<[f64; 4]>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub missing: bool,
}

impl SidecarRecord {
    pub fn row(row: usize, id: impl Into<String>) -> Self {
        Self {
            row: Some(row as u64),
            id: id.into(),
            image_id: None,
            bbox: None,
            missing: false,
        }
    }
}

pub fn write_sidecar<W: Write>(records: &[SidecarRecord], mut sink: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut sink, r)?;
        sink.write_all(b"\n").map_err(|source| Error::Io { offset: 0, source })?;
    }
    sink.flush().map_err(|source| Error::Io { offset: 0, source })
}

pub fn read_sidecar<R: Read>(source: R) -> Result<Vec<SidecarRecord>> {
    let mut text = String::new();
    BufReader::new(source)
        .read_to_string(&mut text)
        .map_err(|source| Error::Io { offset: 0, source })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::Format(format!("sidecar line {}: {e}", n + 1)))
        })
        .collect()
}

/// Sidecar path convention: `foo.osvd` -> `foo.jsonl`.
pub fn sidecar_path(dump: &Path) -> std::path::PathBuf {
    dump.with_extension("jsonl")
}

/// A dump together with its sidecar, with row coverage checked.
#[derive(Debug, Clone)]
pub struct KeyedDump {
    pub matrix: EmbeddingMatrix,
    pub records: Vec<SidecarRecord>,
}

impl KeyedDump {
    pub fn new(matrix: EmbeddingMatrix, records: Vec<SidecarRecord>) -> Result<Self> {
        let warnings = validate_dump(&matrix, &records);
        if let Some(w) = warnings.into_iter().next() {
            return Err(Error::Consistency(w));
        }
        Ok(Self { matrix, records })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let matrix = load_dump_file(path)?;
        let side = sidecar_path(path);
        let f = File::open(&side).map_err(|e| Error::file(&side, e))?;
        Self::new(matrix, read_sidecar(f)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        save_dump_file(&self.matrix, path)?;
        let side = sidecar_path(path);
        let f = File::create(&side).map_err(|e| Error::file(&side, e))?;
        write_sidecar(&self.records, BufWriter::new(f))
    }

    /// Records that own a matrix row, ordered by row.
    pub fn row_records(&self) -> impl Iterator<Item = (usize, &SidecarRecord)> {
        self.records
            .iter()
            .filter_map(|r| r.row.map(|i| (i as usize, r)))
    }
}

/// Checks a dump against its sidecar. Returns human-readable warnings; an
/// empty list means the pair is clean.
pub fn validate_dump(matrix: &EmbeddingMatrix, records: &[SidecarRecord]) -> Vec<String> {
    let mut warnings = Vec::new();
    let mut seen = vec![false; matrix.count()];
    for r in records {
        match r.row {
            Some(i) if (i as usize) < seen.len() => {
                if seen[i as usize] {
                    warnings.push(format!("sidecar maps row {i} twice"));
                }
                seen[i as usize] = true;
                if r.missing {
                    warnings.push(format!("record {} has a row but is marked missing", r.id));
                }
            }
            Some(i) => warnings.push(format!(
                "sidecar row {i} out of range for {} rows",
                matrix.count()
            )),
            None => {}
        }
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        warnings.push(format!("row {i} has no sidecar record"));
    }
    if matrix.is_normalized() {
        if let Some((i, n)) = matrix.first_non_unit_row() {
            warnings.push(format!("row {i} flagged normalized but has norm {n}"));
        }
    }
    if let Some(i) = matrix.data().iter().position(|v| !v.is_finite()) {
        warnings.push(format!("non-finite value at flat index {i}"));
    }
    warnings
}
