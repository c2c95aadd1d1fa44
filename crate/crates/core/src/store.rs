//! Embedding matrices and every on-disk format the toolkit reads or writes.
//!
//! Binary embedding file layout (all integers little-endian):
//!
//! ```text
//! b"EMBV" | u32 version = 1 | u32 count | u32 dims
//! count × (UTF-8 id, NUL terminated)
//! count × dims × f32 (little-endian, row-major)
//! ```
//!
//! The TSV embedding format is one row per line: `id<TAB>v1 v2 ... vd`.
//! Sidecar files (qrels, listings, triplets) are TSV as well; blank lines and
//! lines starting with `#` are ignored in them.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::tsv::{self, Record};

pub const MAGIC: &[u8; 4] = b"EMBV";
pub const VERSION: u32 = 1;

/// Tolerance on the row norm of a matrix flagged as normalized.
pub const UNIT_NORM_TOL: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("malformed header: {0}")]
    Header(String),
    #[error("row {row}: {message}")]
    Parse { row: usize, message: String },
    #[error("row {row}: expected {expected} dimensions, found {found}")]
    DimMismatch {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("row {row}: duplicate id {id:?}")]
    DuplicateId { row: usize, id: String },
    #[error("row {row}: invalid id {id:?} (ids must be non-empty and contain no tab, newline or NUL)")]
    InvalidId { row: usize, id: String },
    #[error("row {row}: non-finite value in column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("zero-norm row {id:?}")]
    ZeroNorm { id: String },
    #[error("line {line}: unknown id {id:?}")]
    UnknownId { line: usize, id: String },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, StoreError>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_owned(),
        source,
    }
}

/// On-disk embedding encodings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Binary,
    Tsv,
}

impl Format {
    /// `.tsv` and `.txt` files are TSV, anything else is binary.
    pub fn from_path(path: &Path) -> Format {
        match path.extension().and_then(|e| e.to_str()) {
            Some("tsv") | Some("txt") => Format::Tsv,
            _ => Format::Binary,
        }
    }
}

/// What [`normalize`] does with an all-zero row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ZeroPolicy {
    #[default]
    Error,
    Skip,
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && !id.contains(['\t', '\n', '\r', '\0'])
}

/// Dense row-major `n × dims` matrix of f32 embeddings keyed by unique string ids.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    ids: Vec<String>,
    dims: usize,
    values: Vec<f32>,
    normalized: bool,
    index: HashMap<String, usize>,
}

impl EmbeddingMatrix {
    /// Builds a matrix from ids and a flat row-major value buffer, checking
    /// every invariant. Errors carry 1-based row numbers.
    pub fn new(ids: Vec<String>, dims: usize, values: Vec<f32>) -> Result<Self> {
        if dims == 0 {
            return Err(StoreError::Invalid("dims must be positive".into()));
        }
        if values.len() != ids.len() * dims {
            return Err(StoreError::Invalid(format!(
                "{} values do not form {} rows of {} dims",
                values.len(),
                ids.len(),
                dims
            )));
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if !valid_id(id) {
                return Err(StoreError::InvalidId {
                    row: i + 1,
                    id: id.clone(),
                });
            }
            if index.insert(id.clone(), i).is_some() {
                return Err(StoreError::DuplicateId {
                    row: i + 1,
                    id: id.clone(),
                });
            }
            let row = &values[i * dims..(i + 1) * dims];
            if let Some(col) = row.iter().position(|v| !v.is_finite()) {
                return Err(StoreError::NonFinite {
                    row: i + 1,
                    col: col + 1,
                });
            }
        }
        Ok(Self {
            ids,
            dims,
            values,
            normalized: false,
            index,
        })
    }

    pub fn from_rows(ids: Vec<String>, rows: &[Vec<f32>]) -> Result<Self> {
        let dims = rows.first().map(Vec::len).unwrap_or(0);
        let mut values = Vec::with_capacity(rows.len() * dims);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != dims {
                return Err(StoreError::DimMismatch {
                    row: i + 1,
                    expected: dims,
                    found: row.len(),
                });
            }
            values.extend_from_slice(row);
        }
        Self::new(ids, dims, values)
    }

    /// An empty matrix with the given width.
    pub fn empty(dims: usize) -> Result<Self> {
        Self::new(Vec::new(), dims, Vec::new())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn id(&self, row: usize) -> &str {
        &self.ids[row]
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.dims..(i + 1) * self.dims]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f32]> + '_ {
        self.values.chunks_exact(self.dims)
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn row_by_id(&self, id: &str) -> Option<&[f32]> {
        self.index_of(id).map(|i| self.row(i))
    }

    /// Rows `indices` in the given order, under new ids.
    pub fn select(&self, indices: &[usize], ids: Vec<String>) -> Result<Self> {
        let mut values = Vec::with_capacity(indices.len() * self.dims);
        for &i in indices {
            values.extend_from_slice(self.row(i));
        }
        let mut out = Self::new(ids, self.dims, values)?;
        out.normalized = self.normalized;
        Ok(out)
    }

    /// Flags the matrix as normalized after checking every row norm.
    pub fn assume_normalized(mut self) -> Result<Self> {
        for (i, row) in self.rows().enumerate() {
            let norm = l2_norm(row);
            if (norm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(StoreError::Invalid(format!(
                    "row {} ({:?}) has norm {norm}, not unit",
                    i + 1,
                    self.ids[i]
                )));
            }
        }
        self.normalized = true;
        Ok(self)
    }
}

pub(crate) fn l2_norm(row: &[f32]) -> f64 {
    row.iter()
        .map(|&v| f64::from(v) * f64::from(v))
        .sum::<f64>()
        .sqrt()
}

/// Result of [`normalize`]: the unit-row matrix plus ids of dropped zero rows.
#[derive(Debug, Clone)]
pub struct Normalized {
    pub matrix: EmbeddingMatrix,
    pub dropped: Vec<String>,
}

/// Divides every row by its L2 norm (computed in f64).
pub fn normalize(matrix: &EmbeddingMatrix, zero_policy: ZeroPolicy) -> Result<Normalized> {
    let dims = matrix.dims;
    let mut ids = Vec::with_capacity(matrix.len());
    let mut values = Vec::with_capacity(matrix.values.len());
    let mut dropped = Vec::new();
    for (id, row) in matrix.ids.iter().zip(matrix.rows()) {
        let norm = l2_norm(row);
        if norm == 0.0 {
            match zero_policy {
                ZeroPolicy::Error => return Err(StoreError::ZeroNorm { id: id.clone() }),
                ZeroPolicy::Skip => {
                    dropped.push(id.clone());
                    continue;
                }
            }
        }
        ids.push(id.clone());
        values.extend(row.iter().map(|&v| (f64::from(v) / norm) as f32));
    }
    let mut out = EmbeddingMatrix::new(ids, dims, values)?;
    out.normalized = true;
    Ok(Normalized { matrix: out, dropped })
}

/// Returns the matrix itself when already normalized, otherwise a normalized
/// copy; zero rows are an error.
pub fn ensure_normalized(matrix: &EmbeddingMatrix) -> Result<std::borrow::Cow<'_, EmbeddingMatrix>> {
    if matrix.is_normalized() {
        Ok(std::borrow::Cow::Borrowed(matrix))
    } else {
        Ok(std::borrow::Cow::Owned(
            normalize(matrix, ZeroPolicy::Error)?.matrix,
        ))
    }
}

pub fn load_embeddings(path: &Path, format: Format) -> Result<EmbeddingMatrix> {
    match format {
        Format::Binary => {
            let bytes = fs::read(path).map_err(io_err(path))?;
            decode_binary(&bytes)
        }
        Format::Tsv => {
            let file = fs::File::open(path).map_err(io_err(path))?;
            read_tsv(BufReader::new(file)).map_err(|e| match e {
                StoreError::Io { source, .. } => StoreError::Io {
                    path: path.to_owned(),
                    source,
                },
                other => other,
            })
        }
    }
}

pub fn save_embeddings(matrix: &EmbeddingMatrix, path: &Path, format: Format) -> Result<()> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    match format {
        Format::Binary => w.write_all(&encode_binary(matrix)),
        Format::Tsv => write_tsv(matrix, &mut w),
    }
    .and_then(|_| w.flush())
    .map_err(io_err(path))
}

pub fn encode_binary(matrix: &EmbeddingMatrix) -> Vec<u8> {
    let id_bytes: usize = matrix.ids.iter().map(|id| id.len() + 1).sum();
    let mut out = Vec::with_capacity(16 + id_bytes + matrix.values.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(matrix.len() as u32).to_le_bytes());
    out.extend_from_slice(&(matrix.dims as u32).to_le_bytes());
    for id in &matrix.ids {
        out.extend_from_slice(id.as_bytes());
        out.push(0);
    }
    for v in &matrix.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| StoreError::Header("file shorter than the 16-byte header".into()))
}

pub fn decode_binary(bytes: &[u8]) -> Result<EmbeddingMatrix> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(StoreError::Header("missing EMBV magic".into()));
    }
    let version = read_u32(bytes, 4)?;
    if version != VERSION {
        return Err(StoreError::Header(format!("unsupported version {version}")));
    }
    let count = read_u32(bytes, 8)? as usize;
    let dims = read_u32(bytes, 12)? as usize;
    if dims == 0 {
        return Err(StoreError::Header("dims must be positive".into()));
    }

    let mut pos = 16;
    let mut ids = Vec::with_capacity(count.min(1 << 20));
    for row in 1..=count {
        let rest = &bytes[pos..];
        let end = rest.iter().position(|&b| b == 0).ok_or(StoreError::Parse {
            row,
            message: "unterminated id".into(),
        })?;
        let id = std::str::from_utf8(&rest[..end]).map_err(|_| StoreError::Parse {
            row,
            message: "id is not valid UTF-8".into(),
        })?;
        ids.push(id.to_owned());
        pos += end + 1;
    }

    let expected = count
        .checked_mul(dims)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| StoreError::Header("count × dims overflows".into()))?;
    let body = &bytes[pos..];
    if body.len() != expected {
        return Err(StoreError::Header(format!(
            "expected {expected} bytes of values, found {}",
            body.len()
        )));
    }
    let values = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    EmbeddingMatrix::new(ids, dims, values)
}

/// Parses the TSV embedding format. Blank lines are skipped; row numbers in
/// errors are line numbers.
pub fn read_tsv<R: BufRead>(reader: R) -> Result<EmbeddingMatrix> {
    let mut ids = Vec::new();
    let mut values = Vec::new();
    let mut dims: Option<usize> = None;
    let mut lines = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let row = i + 1;
        let line = line.map_err(|source| StoreError::Io {
            path: PathBuf::new(),
            source,
        })?;
        let line = line.strip_suffix('\r').unwrap_or(&line);
        if line.trim().is_empty() {
            continue;
        }
        let (id, rest) = line.split_once('\t').ok_or_else(|| StoreError::Parse {
            row,
            message: "expected id<TAB>values".into(),
        })?;
        let start = values.len();
        for (col, tok) in rest.split_ascii_whitespace().enumerate() {
            let v: f32 = tok.parse().map_err(|_| StoreError::Parse {
                row,
                message: format!("cannot parse {tok:?} as a float"),
            })?;
            if !v.is_finite() {
                return Err(StoreError::NonFinite { row, col: col + 1 });
            }
            values.push(v);
        }
        let found = values.len() - start;
        match dims {
            None => dims = Some(found),
            Some(expected) if expected != found => {
                return Err(StoreError::DimMismatch { row, expected, found })
            }
            _ => {}
        }
        ids.push(id.to_owned());
        lines.push(row);
    }
    let dims = dims.ok_or_else(|| StoreError::Header("no rows; dimension unknown".into()))?;
    // Re-map matrix row numbers to file line numbers in errors.
    EmbeddingMatrix::new(ids, dims, values).map_err(|e| match e {
        StoreError::DuplicateId { row, id } => StoreError::DuplicateId {
            row: lines[row - 1],
            id,
        },
        StoreError::InvalidId { row, id } => StoreError::InvalidId {
            row: lines[row - 1],
            id,
        },
        other => other,
    })
}

pub fn write_tsv<W: Write>(matrix: &EmbeddingMatrix, w: &mut W) -> io::Result<()> {
    for (id, row) in matrix.ids.iter().zip(matrix.rows()) {
        write!(w, "{id}\t")?;
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                w.write_all(b" ")?;
            }
            // Display for f32 is the shortest string that parses back exactly.
            write!(w, "{v}")?;
        }
        w.write_all(b"\n")?;
    }
    Ok(())
}

fn read_sidecar(path: &Path) -> Result<Vec<Record>> {
    tsv::read_records(path).map_err(io_err(path))
}

fn parse_gain(rec: &Record, field: &str) -> Result<f64> {
    let gain: f64 = field.trim().parse().map_err(|_| StoreError::Parse {
        row: rec.line,
        message: format!("cannot parse gain {field:?}"),
    })?;
    if !gain.is_finite() || gain < 0.0 {
        return Err(StoreError::Parse {
            row: rec.line,
            message: format!("gain must be finite and non-negative, got {gain}"),
        });
    }
    Ok(gain)
}

/// One relevance judgment.
#[derive(Debug, Clone, PartialEq)]
pub struct Judgment {
    pub doc_id: String,
    pub gain: f64,
}

/// Per-query relevant documents with non-negative gains.
///
/// Every query has at least one judgment with a positive gain.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RelevanceSet {
    entries: BTreeMap<String, Vec<Judgment>>,
}

impl RelevanceSet {
    pub fn from_triples<I, Q, D>(triples: I) -> Result<Self>
    where
        I: IntoIterator<Item = (Q, D, f64)>,
        Q: Into<String>,
        D: Into<String>,
    {
        let mut entries: BTreeMap<String, Vec<Judgment>> = BTreeMap::new();
        for (q, d, gain) in triples {
            let (q, d) = (q.into(), d.into());
            if !gain.is_finite() || gain < 0.0 {
                return Err(StoreError::Invalid(format!(
                    "gain for ({q}, {d}) must be finite and non-negative"
                )));
            }
            let list = entries.entry(q.clone()).or_default();
            if list.iter().any(|j| j.doc_id == d) {
                return Err(StoreError::Invalid(format!("duplicate judgment ({q}, {d})")));
            }
            list.push(Judgment { doc_id: d, gain });
        }
        if let Some((q, _)) = entries.iter().find(|(_, js)| js.iter().all(|j| j.gain <= 0.0)) {
            return Err(StoreError::Invalid(format!(
                "query {q:?} has no judgment with positive gain"
            )));
        }
        Ok(Self { entries })
    }

    pub fn get(&self, query_id: &str) -> Option<&[Judgment]> {
        self.entries.get(query_id).map(Vec::as_slice)
    }

    pub fn queries(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[Judgment])> {
        self.entries.iter().map(|(q, js)| (q.as_str(), js.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Reads a qrels file: `query_id<TAB>doc_id[<TAB>gain]`, gain defaulting to 1.
pub fn load_qrels(path: &Path) -> Result<RelevanceSet> {
    let mut triples = Vec::new();
    let mut seen = HashMap::new();
    for rec in read_sidecar(path)? {
        let gain = match rec.fields.len() {
            2 => 1.0,
            3 => parse_gain(&rec, &rec.fields[2])?,
            n => {
                return Err(StoreError::Parse {
                    row: rec.line,
                    message: format!("expected 2 or 3 fields, found {n}"),
                })
            }
        };
        let (q, d) = (rec.fields[0].clone(), rec.fields[1].clone());
        if q.is_empty() || d.is_empty() {
            return Err(StoreError::Parse {
                row: rec.line,
                message: "empty id".into(),
            });
        }
        if let Some(prev) = seen.insert((q.clone(), d.clone()), rec.line) {
            return Err(StoreError::Parse {
                row: rec.line,
                message: format!("judgment ({q}, {d}) already given on line {prev}"),
            });
        }
        triples.push((q, d, gain));
    }
    RelevanceSet::from_triples(triples)
}

/// A candidate inside a [`Listing`].
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate<'a> {
    pub doc_id: String,
    pub embedding: &'a [f32],
    pub gain: f64,
}

/// One search session: the query embedding and its ordered candidates.
#[derive(Debug, Clone, PartialEq)]
pub struct Listing<'a> {
    pub query_id: String,
    pub query: &'a [f32],
    pub candidates: Vec<Candidate<'a>>,
}

impl<'a> Listing<'a> {
    pub fn new(
        query_id: impl Into<String>,
        query: &'a [f32],
        candidates: Vec<Candidate<'a>>,
    ) -> Result<Self> {
        let query_id = query_id.into();
        if candidates.is_empty() {
            return Err(StoreError::Invalid(format!(
                "listing {query_id:?} has no candidates"
            )));
        }
        for c in &candidates {
            if c.embedding.len() != query.len() {
                return Err(StoreError::Invalid(format!(
                    "listing {query_id:?}: candidate {:?} has {} dims, query has {}",
                    c.doc_id,
                    c.embedding.len(),
                    query.len()
                )));
            }
            if !c.gain.is_finite() || c.gain < 0.0 {
                return Err(StoreError::Invalid(format!(
                    "listing {query_id:?}: candidate {:?} has invalid gain {}",
                    c.doc_id, c.gain
                )));
            }
        }
        Ok(Self {
            query_id,
            query,
            candidates,
        })
    }

    pub fn gains(&self) -> Vec<f64> {
        self.candidates.iter().map(|c| c.gain).collect()
    }
}

/// A row of the listing file, before embeddings are resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct ListingEntry {
    pub line: usize,
    pub doc_id: String,
    pub position: u64,
    pub gain: f64,
}

/// The candidates of one listing as read from disk, sorted by position.
#[derive(Debug, Clone, PartialEq)]
pub struct ListingRows {
    pub listing_id: String,
    pub entries: Vec<ListingEntry>,
}

/// Reads a listing file: `listing_id<TAB>doc_id<TAB>position<TAB>gain`.
/// Listings keep their first-appearance order; candidates are ordered by position.
pub fn load_listings(path: &Path) -> Result<Vec<ListingRows>> {
    let mut order: Vec<ListingRows> = Vec::new();
    let mut slot: HashMap<String, usize> = HashMap::new();
    for rec in read_sidecar(path)? {
        if rec.fields.len() != 4 {
            return Err(StoreError::Parse {
                row: rec.line,
                message: format!("expected 4 fields, found {}", rec.fields.len()),
            });
        }
        let position: u64 = rec.fields[2].trim().parse().map_err(|_| StoreError::Parse {
            row: rec.line,
            message: format!("cannot parse position {:?}", rec.fields[2]),
        })?;
        let gain = parse_gain(&rec, &rec.fields[3])?;
        let lid = rec.fields[0].clone();
        let idx = *slot.entry(lid.clone()).or_insert_with(|| {
            order.push(ListingRows {
                listing_id: lid,
                entries: Vec::new(),
            });
            order.len() - 1
        });
        order[idx].entries.push(ListingEntry {
            line: rec.line,
            doc_id: rec.fields[1].clone(),
            position,
            gain,
        });
    }
    for rows in &mut order {
        rows.entries.sort_by_key(|e| e.position);
        if let Some(w) = rows.entries.windows(2).find(|w| w[0].position == w[1].position) {
            return Err(StoreError::Parse {
                row: w[1].line,
                message: format!("listing {:?} repeats position {}", rows.listing_id, w[1].position),
            });
        }
    }
    Ok(order)
}

/// Binds listing rows to embeddings: the listing id is looked up in `queries`
/// and every doc id in `docs`.
pub fn resolve_listings<'a>(
    rows: &[ListingRows],
    queries: &'a EmbeddingMatrix,
    docs: &'a EmbeddingMatrix,
) -> Result<Vec<Listing<'a>>> {
    rows.iter()
        .map(|lr| {
            let query = queries
                .row_by_id(&lr.listing_id)
                .ok_or_else(|| StoreError::UnknownId {
                    line: lr.entries.first().map_or(0, |e| e.line),
                    id: lr.listing_id.clone(),
                })?;
            let candidates = lr
                .entries
                .iter()
                .map(|e| {
                    let embedding = docs.row_by_id(&e.doc_id).ok_or_else(|| StoreError::UnknownId {
                        line: e.line,
                        id: e.doc_id.clone(),
                    })?;
                    Ok(Candidate {
                        doc_id: e.doc_id.clone(),
                        embedding,
                        gain: e.gain,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Listing::new(lr.listing_id.clone(), query, candidates)
        })
        .collect()
}

/// Row-aligned (anchor, positive, hard negative) embeddings. Row `i` of each
/// matrix belongs to triplet `i`; all three matrices use the triplet ids.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletSet {
    pub anchors: EmbeddingMatrix,
    pub positives: EmbeddingMatrix,
    pub hard_negatives: EmbeddingMatrix,
}

impl TripletSet {
    pub fn new(
        anchors: EmbeddingMatrix,
        positives: EmbeddingMatrix,
        hard_negatives: EmbeddingMatrix,
    ) -> Result<Self> {
        let n = anchors.len();
        let d = anchors.dims();
        for (name, m) in [("positives", &positives), ("hard_negatives", &hard_negatives)] {
            if m.len() != n || m.dims() != d {
                return Err(StoreError::Invalid(format!(
                    "{name} is {}×{}, anchors are {n}×{d}",
                    m.len(),
                    m.dims()
                )));
            }
            if m.ids() != anchors.ids() {
                return Err(StoreError::Invalid(format!(
                    "{name} rows are not aligned with anchors"
                )));
            }
        }
        Ok(Self {
            anchors,
            positives,
            hard_negatives,
        })
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.anchors.dims()
    }

    pub fn triplet_ids(&self) -> &[String] {
        self.anchors.ids()
    }

    /// The triplets at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let ids: Vec<String> = indices.iter().map(|&i| self.anchors.id(i).to_owned()).collect();
        Ok(Self {
            anchors: self.anchors.select(indices, ids.clone())?,
            positives: self.positives.select(indices, ids.clone())?,
            hard_negatives: self.hard_negatives.select(indices, ids)?,
        })
    }
}

/// A row of the triplet file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TripletRecord {
    pub triplet_id: String,
    pub anchor_id: String,
    pub positive_id: String,
    pub negative_id: String,
}

/// Reads a triplet file: `triplet_id<TAB>anchor_id<TAB>positive_id<TAB>negative_id`.
pub fn load_triplet_records(path: &Path) -> Result<Vec<(usize, TripletRecord)>> {
    read_sidecar(path)?
        .into_iter()
        .map(|rec| {
            if rec.fields.len() != 4 {
                return Err(StoreError::Parse {
                    row: rec.line,
                    message: format!("expected 4 fields, found {}", rec.fields.len()),
                });
            }
            let mut f = rec.fields.into_iter();
            let mut next = || f.next().unwrap_or_default();
            Ok((
                rec.line,
                TripletRecord {
                    triplet_id: next(),
                    anchor_id: next(),
                    positive_id: next(),
                    negative_id: next(),
                },
            ))
        })
        .collect()
}

pub fn write_triplet_records<W: Write>(records: &[TripletRecord], w: &mut W) -> io::Result<()> {
    for r in records {
        writeln!(
            w,
            "{}\t{}\t{}\t{}",
            r.triplet_id, r.anchor_id, r.positive_id, r.negative_id
        )?;
    }
    Ok(())
}

/// Resolves triplet records against one embedding matrix.
pub fn resolve_triplets(
    records: &[(usize, TripletRecord)],
    embeddings: &EmbeddingMatrix,
) -> Result<TripletSet> {
    let lookup = |line: usize, id: &str| {
        embeddings.index_of(id).ok_or_else(|| StoreError::UnknownId {
            line,
            id: id.to_owned(),
        })
    };
    let mut ids = Vec::with_capacity(records.len());
    let (mut a, mut p, mut n) = (Vec::new(), Vec::new(), Vec::new());
    for (line, r) in records {
        a.push(lookup(*line, &r.anchor_id)?);
        p.push(lookup(*line, &r.positive_id)?);
        n.push(lookup(*line, &r.negative_id)?);
        ids.push(r.triplet_id.clone());
    }
    TripletSet::new(
        embeddings.select(&a, ids.clone())?,
        embeddings.select(&p, ids.clone())?,
        embeddings.select(&n, ids)?,
    )
}

pub fn load_triplets(path: &Path, embeddings: &EmbeddingMatrix) -> Result<TripletSet> {
    resolve_triplets(&load_triplet_records(path)?, embeddings)
}
