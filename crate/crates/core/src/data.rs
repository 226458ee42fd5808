//! Embeddings, per-sample metadata and trial lists, with their on-disk formats.
//!
//! Embedding file layout (little-endian):
//!
//! ```text
//! "DCAE" | version u32 | n_rows u32 | n_cols u32 | n_rows NUL-terminated UTF-8 ids | f32 row-major matrix
//! ```
//!
//! Version 2 of the same container stores a score matrix: it carries a column
//! id list right after the row ids.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::Mat;

pub const EMBEDDING_MAGIC: &[u8; 4] = b"DCAE";
pub const EMBEDDING_VERSION: u32 = 1;
pub const SCORE_MATRIX_VERSION: u32 = 2;

pub const DEFAULT_FRAMES_PER_SECOND: f64 = 100.0;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    ids: Vec<String>,
    matrix: Mat,
    index: HashMap<String, usize>,
}

impl EmbeddingTable {
    pub fn new(ids: Vec<String>, matrix: Mat) -> Result<Self> {
        if ids.len() != matrix.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "{} ids for {} rows",
                ids.len(),
                matrix.nrows()
            )));
        }
        for (row, r) in matrix.row_iter().enumerate() {
            if let Some(col) = r.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFiniteValue { row, col });
            }
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::DuplicateId(id.clone()));
            }
        }
        Ok(Self { ids, matrix, index })
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn matrix(&self) -> &Mat {
        &self.matrix
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn require_row(&self, id: &str) -> Result<usize> {
        self.row_of(id).ok_or_else(|| Error::UnknownId(id.to_string()))
    }

    /// Rows for `ids`, in that order.
    pub fn select(&self, ids: &[String]) -> Result<Mat> {
        let rows = ids
            .iter()
            .map(|id| self.require_row(id))
            .collect::<Result<Vec<_>>>()?;
        Ok(self.matrix.select_rows(rows.iter()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.len() * (self.dim() * 4 + 8));
        write_header(&mut out, EMBEDDING_VERSION, self.len(), self.dim());
        write_ids(&mut out, &self.ids);
        write_f32_rows(&mut out, &self.matrix);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(bytes);
        let (version, n_rows, n_cols) = read_header(&mut cur)?;
        if version != EMBEDDING_VERSION {
            return Err(Error::MalformedHeader(format!(
                "unsupported embedding format version {version}"
            )));
        }
        let ids = cur.ids(n_rows)?;
        let matrix = cur.f32_matrix(n_rows, n_cols)?;
        cur.expect_end()?;
        Self::new(ids, matrix)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &self.to_bytes())
    }
}

/// Reads and validates an embedding file.
pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingTable> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    EmbeddingTable::from_bytes(&bytes)
}

/// Dense score matrix with row (enrollment) and column (test) ids.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    pub row_ids: Vec<String>,
    pub col_ids: Vec<String>,
    pub scores: Mat,
}

impl ScoreMatrix {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        write_header(
            &mut out,
            SCORE_MATRIX_VERSION,
            self.row_ids.len(),
            self.col_ids.len(),
        );
        write_ids(&mut out, &self.row_ids);
        write_ids(&mut out, &self.col_ids);
        write_f32_rows(&mut out, &self.scores);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(bytes);
        let (version, n_rows, n_cols) = read_header(&mut cur)?;
        if version != SCORE_MATRIX_VERSION {
            return Err(Error::MalformedHeader(format!(
                "expected score-matrix version {SCORE_MATRIX_VERSION}, found {version}"
            )));
        }
        let row_ids = cur.ids(n_rows)?;
        let col_ids = cur.ids(n_cols)?;
        let scores = cur.f32_matrix(n_rows, n_cols)?;
        cur.expect_end()?;
        Ok(Self {
            row_ids,
            col_ids,
            scores,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &self.to_bytes())
    }
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(bytes)
        .map_err(|e| Error::io(path.display().to_string(), e))
}

fn write_header(out: &mut Vec<u8>, version: u32, rows: usize, cols: usize) {
    out.extend_from_slice(EMBEDDING_MAGIC);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&(rows as u32).to_le_bytes());
    out.extend_from_slice(&(cols as u32).to_le_bytes());
}

fn write_ids(out: &mut Vec<u8>, ids: &[String]) {
    for id in ids {
        out.extend_from_slice(id.as_bytes());
        out.push(0);
    }
}

fn write_f32_rows(out: &mut Vec<u8>, m: &Mat) {
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            out.extend_from_slice(&(m[(r, c)] as f32).to_le_bytes());
        }
    }
}

fn read_header(cur: &mut Cursor<'_>) -> Result<(u32, usize, usize)> {
    let magic = cur
        .take(4)
        .map_err(|_| Error::MalformedHeader("file shorter than magic".into()))?;
    if magic != EMBEDDING_MAGIC {
        return Err(Error::MalformedHeader("bad magic bytes".into()));
    }
    let version = cur.u32().map_err(|_| truncated_header())?;
    let rows = cur.u32().map_err(|_| truncated_header())? as usize;
    let cols = cur.u32().map_err(|_| truncated_header())? as usize;
    Ok((version, rows, cols))
}

fn truncated_header() -> Error {
    Error::MalformedHeader("truncated header".into())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::MalformedHeader(format!(
                "unexpected end of file at byte {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn ids(&mut self, n: usize) -> Result<Vec<String>> {
        let mut ids = Vec::with_capacity(n);
        for k in 0..n {
            let rest = &self.bytes[self.pos..];
            let len = rest.iter().position(|&b| b == 0).ok_or_else(|| {
                Error::MalformedHeader(format!("id {k} is not NUL-terminated"))
            })?;
            let id = std::str::from_utf8(&rest[..len])
                .map_err(|_| Error::MalformedHeader(format!("id {k} is not valid UTF-8")))?;
            ids.push(id.to_string());
            self.pos += len + 1;
        }
        Ok(ids)
    }

    fn f32_matrix(&mut self, rows: usize, cols: usize) -> Result<Mat> {
        let raw = self.take(rows * cols * 4)?;
        let mut m = Mat::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                let o = (r * cols + c) * 4;
                let v = f32::from_le_bytes([raw[o], raw[o + 1], raw[o + 2], raw[o + 3]]);
                if !v.is_finite() {
                    return Err(Error::NonFiniteValue { row: r, col: c });
                }
                m[(r, c)] = v as f64;
            }
        }
        Ok(m)
    }

    fn expect_end(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::MalformedHeader(format!(
                "{} trailing bytes after matrix",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleMeta {
    pub sample_id: String,
    pub speaker_id: String,
    pub session_id: String,
    pub domain_id: String,
    pub duration_s: f64,
}

/// Validated metadata for a set of samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Metadata {
    samples: Vec<SampleMeta>,
    index: HashMap<String, usize>,
}

pub const META_COLUMNS: [&str; 5] = [
    "sample_id",
    "speaker_id",
    "session_id",
    "domain_id",
    "duration_s",
];

impl Metadata {
    pub fn new(samples: Vec<SampleMeta>) -> Result<Self> {
        let mut index = HashMap::with_capacity(samples.len());
        let mut session_domain: HashMap<(&str, &str), &str> = HashMap::new();
        for (i, s) in samples.iter().enumerate() {
            if !(s.duration_s.is_finite() && s.duration_s > 0.0) {
                return Err(Error::InvalidMeta(format!(
                    "sample '{}' has non-positive or non-finite duration {}",
                    s.sample_id, s.duration_s
                )));
            }
            if index.insert(s.sample_id.clone(), i).is_some() {
                return Err(Error::DuplicateId(s.sample_id.clone()));
            }
            let key = (s.speaker_id.as_str(), s.session_id.as_str());
            match session_domain.get(&key) {
                Some(dom) if *dom != s.domain_id => {
                    return Err(Error::InvalidMeta(format!(
                        "speaker '{}' session '{}' spans domains '{}' and '{}'",
                        s.speaker_id, s.session_id, dom, s.domain_id
                    )));
                }
                Some(_) => {}
                None => {
                    session_domain.insert(key, s.domain_id.as_str());
                }
            }
        }
        Ok(Self { samples, index })
    }

    pub fn samples(&self) -> &[SampleMeta] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&SampleMeta> {
        self.index.get(id).map(|&i| &self.samples[i])
    }

    pub fn require(&self, id: &str) -> Result<&SampleMeta> {
        self.get(id).ok_or_else(|| Error::UnknownId(id.to_string()))
    }

    /// Checks that every sample has exactly one embedding row.
    pub fn check_against(&self, table: &EmbeddingTable) -> Result<()> {
        for s in &self.samples {
            table.require_row(&s.sample_id)?;
        }
        Ok(())
    }

    /// Parses the metadata TSV. A `duration_frames` column is accepted in
    /// place of `duration_s` and converted with `frames_per_second`.
    pub fn from_tsv(text: &str, frames_per_second: f64) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::MissingColumn("sample_id".into()))?;
        let cols: Vec<&str> = header.split('\t').map(str::trim).collect();
        let find = |name: &str| cols.iter().position(|c| *c == name);
        let mut idx = [0usize; 4];
        for (k, name) in META_COLUMNS[..4].iter().enumerate() {
            idx[k] = find(name).ok_or_else(|| Error::MissingColumn(name.to_string()))?;
        }
        let (dur_col, dur_scale) = match (find("duration_s"), find("duration_frames")) {
            (Some(c), _) => (c, 1.0),
            (None, Some(c)) => (c, 1.0 / frames_per_second),
            (None, None) => return Err(Error::MissingColumn("duration_s".into())),
        };
        let mut samples = Vec::new();
        for (lineno, line) in lines {
            let fields: Vec<&str> = line.split('\t').collect();
            let get = |c: usize| -> Result<&str> {
                fields.get(c).map(|s| s.trim()).ok_or_else(|| {
                    Error::parse(format!("line {}", lineno + 1), "too few columns")
                })
            };
            let duration: f64 = get(dur_col)?.parse().map_err(|_| {
                Error::parse(format!("line {}", lineno + 1), "duration is not a number")
            })?;
            samples.push(SampleMeta {
                sample_id: get(idx[0])?.to_string(),
                speaker_id: get(idx[1])?.to_string(),
                session_id: get(idx[2])?.to_string(),
                domain_id: get(idx[3])?.to_string(),
                duration_s: duration * dur_scale,
            });
        }
        Self::new(samples)
    }

    pub fn load(path: impl AsRef<Path>, frames_per_second: f64) -> Result<Self> {
        let path = path.as_ref();
        let text =
            fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_tsv(&text, frames_per_second)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = META_COLUMNS.join("\t");
        out.push('\n');
        for s in &self.samples {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                s.sample_id, s.speaker_id, s.session_id, s.domain_id, s.duration_s
            ));
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), self.to_tsv().as_bytes())
    }

    /// Distinct domain ids in sorted order.
    pub fn domains(&self) -> Vec<String> {
        let mut d: Vec<String> = self.samples.iter().map(|s| s.domain_id.clone()).collect();
        d.sort();
        d.dedup();
        d
    }

    /// Sample indices grouped by speaker, speakers in sorted order.
    pub fn by_speaker(&self) -> BTreeMap<&str, Vec<usize>> {
        let mut map: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, s) in self.samples.iter().enumerate() {
            map.entry(s.speaker_id.as_str()).or_default().push(i);
        }
        map
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    Target,
    Impostor,
}

impl Label {
    pub fn is_target(self) -> bool {
        matches!(self, Label::Target)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Exclusion {
    CrossDomain,
    SameSessionImpostor,
    SameSessionTarget,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mask {
    Valid,
    Excluded(Exclusion),
}

impl Mask {
    pub fn is_valid(self) -> bool {
        matches!(self, Mask::Valid)
    }
}

/// Label and validity of a pair of samples under the batch trial rules.
pub fn classify_pair(a: &SampleMeta, b: &SampleMeta) -> (Label, Mask) {
    let label = if a.speaker_id == b.speaker_id {
        Label::Target
    } else {
        Label::Impostor
    };
    let same_session = a.session_id == b.session_id;
    let mask = if a.domain_id != b.domain_id {
        Mask::Excluded(Exclusion::CrossDomain)
    } else if same_session && label == Label::Impostor {
        Mask::Excluded(Exclusion::SameSessionImpostor)
    } else if same_session && a.speaker_id == b.speaker_id {
        Mask::Excluded(Exclusion::SameSessionTarget)
    } else {
        Mask::Valid
    };
    (label, mask)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrialSet {
    pub pairs: Vec<(String, String)>,
    pub labels: Vec<Label>,
    pub mask: Vec<Mask>,
}

pub enum TrialPolicy<'a> {
    AllPairs,
    ExplicitKey(&'a str),
}

impl TrialSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn count_valid(&self, label: Label) -> usize {
        self.labels
            .iter()
            .zip(&self.mask)
            .filter(|(l, m)| **l == label && m.is_valid())
            .count()
    }

    /// Parses `enroll<TAB>test<TAB>{tgt|imp}` lines; the label column is
    /// optional when `require_labels` is false (impostor is assumed).
    pub fn parse_key(text: &str, require_labels: bool) -> Result<Self> {
        let mut set = TrialSet::default();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').map(str::trim).collect();
            let loc = || format!("key line {}", lineno + 1);
            if f.len() < 2 {
                return Err(Error::parse(loc(), "expected enroll and test ids"));
            }
            let label = match f.get(2) {
                Some(&"tgt") | Some(&"target") => Label::Target,
                Some(&"imp") | Some(&"nontarget") | Some(&"impostor") => Label::Impostor,
                Some(other) => {
                    return Err(Error::parse(loc(), format!("unknown label '{other}'")))
                }
                None if require_labels => return Err(Error::parse(loc(), "missing label")),
                None => Label::Impostor,
            };
            set.pairs.push((f[0].to_string(), f[1].to_string()));
            set.labels.push(label);
            set.mask.push(Mask::Valid);
        }
        Ok(set)
    }

    pub fn to_key(&self) -> String {
        let mut out = String::new();
        for ((a, b), l) in self.pairs.iter().zip(&self.labels) {
            let tag = if l.is_target() { "tgt" } else { "imp" };
            out.push_str(&format!("{a}\t{b}\t{tag}\n"));
        }
        out
    }

    /// Only the valid trials.
    pub fn valid_only(&self) -> TrialSet {
        let mut out = TrialSet::default();
        for k in 0..self.len() {
            if self.mask[k].is_valid() {
                out.pairs.push(self.pairs[k].clone());
                out.labels.push(self.labels[k]);
                out.mask.push(Mask::Valid);
            }
        }
        out
    }

    /// Resolves ids to row indices of `table`.
    pub fn index_into(&self, table: &EmbeddingTable) -> Result<Vec<IndexedTrial>> {
        self.pairs
            .iter()
            .zip(&self.labels)
            .zip(&self.mask)
            .filter(|(_, m)| m.is_valid())
            .map(|(((a, b), l), _)| {
                Ok(IndexedTrial {
                    enroll: table.require_row(a)?,
                    test: table.require_row(b)?,
                    target: l.is_target(),
                })
            })
            .collect()
    }
}

/// A valid trial referring to rows of a sample matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IndexedTrial {
    pub enroll: usize,
    pub test: usize,
    pub target: bool,
}

/// Builds a trial list from metadata.
///
/// `AllPairs` enumerates every unordered pair once, canonicalized as
/// `(min_id, max_id)` and sorted. `ExplicitKey` takes the pairs of a key file
/// verbatim; every id must resolve and target labels must agree with the
/// speaker ids.
pub fn build_trials(meta: &Metadata, policy: TrialPolicy<'_>) -> Result<TrialSet> {
    match policy {
        TrialPolicy::AllPairs => {
            let mut ids: Vec<&SampleMeta> = meta.samples().iter().collect();
            ids.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
            let mut set = TrialSet::default();
            for i in 0..ids.len() {
                for j in i + 1..ids.len() {
                    let (label, mask) = classify_pair(ids[i], ids[j]);
                    set.pairs
                        .push((ids[i].sample_id.clone(), ids[j].sample_id.clone()));
                    set.labels.push(label);
                    set.mask.push(mask);
                }
            }
            Ok(set)
        }
        TrialPolicy::ExplicitKey(text) => {
            let set = TrialSet::parse_key(text, true)?;
            for ((a, b), l) in set.pairs.iter().zip(&set.labels) {
                let ma = meta.require(a)?;
                let mb = meta.require(b)?;
                if l.is_target() && ma.speaker_id != mb.speaker_id {
                    return Err(Error::InvalidMeta(format!(
                        "target trial ({a}, {b}) has different speakers"
                    )));
                }
            }
            Ok(set)
        }
    }
}
