//! Unified model file: a tagged, versioned binary container.
//!
//! ```text
//! "DCAM" | version u32 | kind u32 | n_records u32 | records...
//! record = tag_len u16 | tag UTF-8 | type u8 | n_dims u8 | dims u64 × n_dims | payload
//! ```
//!
//! Payloads are little-endian: `f64` arrays (type 1), `u64` arrays (type 3) or
//! UTF-8 strings (type 2, `dims = [byte_len]`). Matrices are stored
//! column-major with `dims = [rows, cols]`. Records are written in a fixed
//! order, so equal models give equal bytes.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backend::{Architecture, BackendParams, CalibrationShape};
use crate::calibration::{DurationFeatures, SideTransform};
use crate::data::write_file;
use crate::error::{Error, Result};
use crate::linalg::{Mat, Vector};
use crate::plda::PldaModel;
use crate::training::{Adam, BatchCursor, Checkpoint, CheckpointRef, LogRow, Rotation, SeedResult, TrainState};

pub const MODEL_MAGIC: &[u8; 4] = b"DCAM";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FileKind {
    Model = 1,
    Checkpoint = 2,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F64(Vec<f64>),
    Str(String),
    U64(Vec<u64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub tag: String,
    pub dims: Vec<u64>,
    pub payload: Payload,
}

/// Ordered list of records.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: FileKind,
    pub records: Vec<Record>,
}

impl Container {
    pub fn new(kind: FileKind) -> Self {
        Self {
            kind,
            records: Vec::new(),
        }
    }

    pub fn put_f64(&mut self, tag: &str, dims: &[usize], data: &[f64]) {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        self.records.push(Record {
            tag: tag.into(),
            dims: dims.iter().map(|&d| d as u64).collect(),
            payload: Payload::F64(data.to_vec()),
        });
    }

    pub fn put_u64(&mut self, tag: &str, data: &[u64]) {
        self.records.push(Record {
            tag: tag.into(),
            dims: vec![data.len() as u64],
            payload: Payload::U64(data.to_vec()),
        });
    }

    pub fn put_str(&mut self, tag: &str, s: &str) {
        self.records.push(Record {
            tag: tag.into(),
            dims: vec![s.len() as u64],
            payload: Payload::Str(s.into()),
        });
    }

    fn find(&self, tag: &str) -> Result<&Record> {
        self.records
            .iter()
            .find(|r| r.tag == tag)
            .ok_or_else(|| Error::MalformedHeader(format!("missing record '{tag}'")))
    }

    pub fn has(&self, tag: &str) -> bool {
        self.records.iter().any(|r| r.tag == tag)
    }

    pub fn f64s(&self, tag: &str) -> Result<(&[u64], &[f64])> {
        let r = self.find(tag)?;
        match &r.payload {
            Payload::F64(v) => Ok((&r.dims, v)),
            _ => Err(wrong_type(tag, "f64")),
        }
    }

    pub fn u64s(&self, tag: &str) -> Result<&[u64]> {
        let r = self.find(tag)?;
        match &r.payload {
            Payload::U64(v) => Ok(v),
            _ => Err(wrong_type(tag, "u64")),
        }
    }

    pub fn u64(&self, tag: &str) -> Result<u64> {
        match self.u64s(tag)? {
            [v] => Ok(*v),
            v => Err(Error::MalformedHeader(format!("record '{tag}' has {} values, expected 1", v.len()))),
        }
    }

    pub fn f64(&self, tag: &str) -> Result<f64> {
        match self.f64s(tag)?.1 {
            [v] => Ok(*v),
            v => Err(Error::MalformedHeader(format!("record '{tag}' has {} values, expected 1", v.len()))),
        }
    }

    pub fn str(&self, tag: &str) -> Result<&str> {
        let r = self.find(tag)?;
        match &r.payload {
            Payload::Str(s) => Ok(s),
            _ => Err(wrong_type(tag, "string")),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.kind as u32).to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&(r.tag.len() as u16).to_le_bytes());
            out.extend_from_slice(r.tag.as_bytes());
            let ty: u8 = match r.payload {
                Payload::F64(_) => 1,
                Payload::Str(_) => 2,
                Payload::U64(_) => 3,
            };
            out.push(ty);
            out.push(r.dims.len() as u8);
            for d in &r.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            match &r.payload {
                Payload::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Payload::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Payload::Str(s) => out.extend_from_slice(s.as_bytes()),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Reader { bytes, pos: 0 };
        if cur.take(4).ok() != Some(MODEL_MAGIC.as_slice()) {
            return Err(Error::MalformedHeader("not a model file (bad magic)".into()));
        }
        let version = cur.u32()?;
        if version != MODEL_VERSION {
            return Err(Error::MalformedHeader(format!("unsupported model file version {version}")));
        }
        let kind = match cur.u32()? {
            1 => FileKind::Model,
            2 => FileKind::Checkpoint,
            k => return Err(Error::MalformedHeader(format!("unknown file kind {k}"))),
        };
        let n = cur.u32()? as usize;
        let mut records = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let tl = u16::from_le_bytes(cur.take(2)?.try_into().expect("2 bytes")) as usize;
            let tag = std::str::from_utf8(cur.take(tl)?)
                .map_err(|_| Error::MalformedHeader("record tag is not UTF-8".into()))?
                .to_string();
            let ty = cur.take(1)?[0];
            let nd = cur.take(1)?[0] as usize;
            let dims = (0..nd).map(|_| cur.u64()).collect::<Result<Vec<_>>>()?;
            let count = dims
                .iter()
                .try_fold(1u64, |a, &d| a.checked_mul(d))
                .filter(|&c| c <= bytes.len() as u64)
                .ok_or_else(|| Error::MalformedHeader(format!("record '{tag}' is too large")))?
                as usize;
            let payload = match ty {
                1 => Payload::F64(
                    cur.take(count * 8)?
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect(),
                ),
                3 => Payload::U64(
                    cur.take(count * 8)?
                        .chunks_exact(8)
                        .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect(),
                ),
                2 => Payload::Str(
                    std::str::from_utf8(cur.take(count)?)
                        .map_err(|_| Error::MalformedHeader(format!("record '{tag}' is not UTF-8")))?
                        .to_string(),
                ),
                t => return Err(Error::MalformedHeader(format!("record '{tag}' has unknown type {t}"))),
            };
            records.push(Record { tag, dims, payload });
        }
        if cur.pos != bytes.len() {
            return Err(Error::MalformedHeader(format!("{} trailing bytes", bytes.len() - cur.pos)));
        }
        Ok(Self { kind, records })
    }
}

fn wrong_type(tag: &str, want: &str) -> Error {
    Error::MalformedHeader(format!("record '{tag}' is not of type {want}"))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::MalformedHeader(format!("unexpected end of file at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Where a model came from.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Provenance {
    /// SHA-256 of the resolved configuration text, hex.
    pub config_sha256: String,
    pub seed: u64,
    pub lda_weighted: bool,
}

fn put_mat(c: &mut Container, tag: &str, m: &Mat) {
    c.put_f64(tag, &[m.nrows(), m.ncols()], m.as_slice());
}

fn get_mat(c: &Container, tag: &str) -> Result<Mat> {
    match c.f64s(tag)? {
        ([r, k], v) => Ok(Mat::from_column_slice(*r as usize, *k as usize, v)),
        _ => Err(Error::MalformedHeader(format!("record '{tag}' is not a matrix"))),
    }
}

fn get_vec(c: &Container, tag: &str) -> Result<Vector> {
    Ok(Vector::from_column_slice(c.f64s(tag)?.1))
}

fn features_to(c: &mut Container, prefix: &str, f: &DurationFeatures) {
    c.put_str(&format!("{prefix}features.kind"), f.kind());
    match f {
        DurationFeatures::Log => {}
        DurationFeatures::Bin { thresholds } => {
            c.put_f64(&format!("{prefix}features.thresholds"), &[thresholds.len()], thresholds)
        }
        DurationFeatures::WLog { center, slope } => {
            c.put_f64(&format!("{prefix}features.center"), &[1], &[*center]);
            c.put_f64(&format!("{prefix}features.slope"), &[1], &[*slope]);
        }
    }
}

fn features_from(c: &Container, prefix: &str) -> Result<DurationFeatures> {
    let f = match c.str(&format!("{prefix}features.kind"))? {
        "log" => DurationFeatures::Log,
        "bin" => DurationFeatures::Bin {
            thresholds: c.f64s(&format!("{prefix}features.thresholds"))?.1.to_vec(),
        },
        "wlog" => DurationFeatures::WLog {
            center: c.f64(&format!("{prefix}features.center"))?,
            slope: c.f64(&format!("{prefix}features.slope"))?,
        },
        k => return Err(Error::MalformedHeader(format!("unknown duration feature kind '{k}'"))),
    };
    f.validate()?;
    Ok(f)
}

/// Writes `params` under `prefix`.
pub fn params_to(c: &mut Container, prefix: &str, params: &BackendParams) {
    let shape = shape_of(params);
    c.put_str(&format!("{prefix}arch"), params.arch.name());
    c.put_str(&format!("{prefix}stages"), params.arch.stages().tag());
    c.put_u64(
        &format!("{prefix}dims"),
        &[
            params.input_dim() as u64,
            params.preproc.output_dim() as u64,
            shape.m_dim as u64,
            shape.s_dim as u64,
        ],
    );
    features_to(c, prefix, &shape.features);
    c.put_str(&format!("{prefix}side.transform"), &shape.transform.to_string());
    for (name, g) in params.groups() {
        c.put_f64(&format!("{prefix}{name}"), &[g.len()], g);
    }
    if let Some(p) = &params.plda {
        c.put_f64(&format!("{prefix}plda.mu"), &[p.mu.len()], p.mu.as_slice());
        put_mat(c, &format!("{prefix}plda.b"), &p.b);
        put_mat(c, &format!("{prefix}plda.w"), &p.w);
    }
}

/// Reads parameters written by [`params_to`].
pub fn params_from(c: &Container, prefix: &str) -> Result<BackendParams> {
    let arch: Architecture = c.str(&format!("{prefix}arch"))?.parse()?;
    let stages = c.str(&format!("{prefix}stages"))?;
    if stages != arch.stages().tag() {
        return Err(Error::StageMismatch(format!(
            "architecture {arch} with stage tag '{stages}'"
        )));
    }
    let dims = c.u64s(&format!("{prefix}dims"))?;
    let [input, lda, m_dim, s_dim] = dims else {
        return Err(Error::MalformedHeader("dims record must hold 4 values".into()));
    };
    let shape = CalibrationShape {
        features: features_from(c, prefix)?,
        m_dim: *m_dim as usize,
        s_dim: *s_dim as usize,
        transform: c.str(&format!("{prefix}side.transform"))?.parse::<SideTransform>()?,
    };
    let mut params = BackendParams::zeros(arch, *input as usize, *lda as usize, &shape);
    for (name, g) in params.groups_mut() {
        let (_, v) = c.f64s(&format!("{prefix}{name}"))?;
        if v.len() != g.len() {
            return Err(Error::DimensionMismatch(format!(
                "group {name}: file has {} values, model needs {}",
                v.len(),
                g.len()
            )));
        }
        g.copy_from_slice(v);
    }
    if c.has(&format!("{prefix}plda.mu")) {
        let plda = PldaModel {
            mu: get_vec(c, &format!("{prefix}plda.mu"))?,
            b: get_mat(c, &format!("{prefix}plda.b"))?,
            w: get_mat(c, &format!("{prefix}plda.w"))?,
        };
        plda.validate()?;
        params.plda = Some(plda);
    }
    params.validate()?;
    Ok(params)
}

fn shape_of(params: &BackendParams) -> CalibrationShape {
    let mut shape = CalibrationShape::default();
    if let Some(d) = params.calibrator.duration() {
        shape.features = d.features.clone();
    }
    if let Some(s) = params.calibrator.side_info() {
        shape.m_dim = s.m_dim();
        shape.s_dim = s.z_dim();
        shape.transform = s.transform;
    }
    shape
}

fn provenance_to(c: &mut Container, p: &Provenance) {
    c.put_str("provenance.config_sha256", &p.config_sha256);
    c.put_u64("provenance.seed", &[p.seed]);
    c.put_str("provenance.lda.weighted", if p.lda_weighted { "true" } else { "false" });
}

fn provenance_from(c: &Container) -> Result<Provenance> {
    Ok(Provenance {
        config_sha256: c.str("provenance.config_sha256")?.to_string(),
        seed: c.u64("provenance.seed")?,
        lda_weighted: c.str("provenance.lda.weighted")? == "true",
    })
}

pub fn model_to_bytes(params: &BackendParams, prov: &Provenance) -> Vec<u8> {
    let mut c = Container::new(FileKind::Model);
    params_to(&mut c, "", params);
    provenance_to(&mut c, prov);
    c.to_bytes()
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<(BackendParams, Provenance)> {
    let c = Container::from_bytes(bytes)?;
    if c.kind != FileKind::Model {
        return Err(Error::MalformedHeader("file is a checkpoint, not a model".into()));
    }
    Ok((params_from(&c, "")?, provenance_from(&c)?))
}

pub fn save_model(path: impl AsRef<Path>, params: &BackendParams, prov: &Provenance) -> Result<()> {
    write_file(path.as_ref(), &model_to_bytes(params, prov))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<(BackendParams, Provenance)> {
    model_from_bytes(&read(path.as_ref())?)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))
}

fn rotation_to(c: &mut Container, tag: &str, r: &Rotation) {
    let mut v: Vec<u64> = vec![r.pos as u64];
    v.extend(r.order.iter().map(|&i| i as u64));
    c.put_u64(tag, &v);
}

fn rotation_from(c: &Container, tag: &str) -> Result<Rotation> {
    let v = c.u64s(tag)?;
    let (pos, order) = v
        .split_first()
        .ok_or_else(|| Error::MalformedHeader(format!("empty rotation '{tag}'")))?;
    Ok(Rotation {
        order: order.iter().map(|&i| i as usize).collect(),
        pos: *pos as usize,
    })
}

fn cursor_to(c: &mut Container, cur: &BatchCursor) {
    c.put_u64("cursor.counts", &[cur.groups.len() as u64, cur.sessions.len() as u64]);
    for (i, r) in cur.groups.iter().enumerate() {
        rotation_to(c, &format!("cursor.group.{i}"), r);
    }
    for (i, r) in cur.sessions.iter().enumerate() {
        rotation_to(c, &format!("cursor.session.{i}"), r);
        c.put_u64(&format!("cursor.samples.{i}"), &[cur.samples[i].len() as u64]);
        for (j, r) in cur.samples[i].iter().enumerate() {
            rotation_to(c, &format!("cursor.sample.{i}.{j}"), r);
        }
    }
    let seed = cur.rng.get_seed();
    let words: Vec<u64> = seed.chunks_exact(8).map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
    c.put_u64("cursor.rng.seed", &words);
    c.put_u64("cursor.rng.stream", &[cur.rng.get_stream()]);
    let wp = cur.rng.get_word_pos();
    c.put_u64("cursor.rng.word_pos", &[wp as u64, (wp >> 64) as u64]);
}

fn cursor_from(c: &Container) -> Result<BatchCursor> {
    let counts = c.u64s("cursor.counts")?;
    let [ng, ns] = counts else {
        return Err(Error::MalformedHeader("cursor.counts must hold 2 values".into()));
    };
    let groups = (0..*ng).map(|i| rotation_from(c, &format!("cursor.group.{i}"))).collect::<Result<_>>()?;
    let mut sessions = Vec::new();
    let mut samples = Vec::new();
    for i in 0..*ns {
        sessions.push(rotation_from(c, &format!("cursor.session.{i}"))?);
        let n = c.u64(&format!("cursor.samples.{i}"))?;
        samples.push((0..n).map(|j| rotation_from(c, &format!("cursor.sample.{i}.{j}"))).collect::<Result<_>>()?);
    }
    let words = c.u64s("cursor.rng.seed")?;
    if words.len() != 4 {
        return Err(Error::MalformedHeader("rng seed must hold 4 words".into()));
    }
    let mut seed = [0u8; 32];
    for (k, w) in words.iter().enumerate() {
        seed[k * 8..k * 8 + 8].copy_from_slice(&w.to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(c.u64("cursor.rng.stream")?);
    let wp = c.u64s("cursor.rng.word_pos")?;
    let [lo, hi] = wp else {
        return Err(Error::MalformedHeader("rng word position must hold 2 words".into()));
    };
    rng.set_word_pos((*lo as u128) | ((*hi as u128) << 64));
    Ok(BatchCursor {
        groups,
        sessions,
        samples,
        rng,
    })
}

fn log_to(c: &mut Container, tag: &str, log: &[LogRow]) {
    let mut ints = Vec::with_capacity(log.len() * 4);
    let mut vals = Vec::new();
    for r in log {
        ints.extend([r.seed, r.stage as u64, r.minibatch as u64, r.dev.len() as u64]);
        vals.push(r.train_loss);
        vals.push(r.grad_norm);
        vals.extend(&r.dev);
    }
    c.put_u64(&format!("{tag}.index"), &ints);
    c.put_f64(&format!("{tag}.values"), &[vals.len()], &vals);
}

fn log_from(c: &Container, tag: &str) -> Result<Vec<LogRow>> {
    let ints = c.u64s(&format!("{tag}.index"))?;
    let (_, vals) = c.f64s(&format!("{tag}.values"))?;
    let bad = || Error::MalformedHeader(format!("inconsistent log record '{tag}'"));
    if ints.len() % 4 != 0 {
        return Err(bad());
    }
    let mut pos = 0;
    let mut rows = Vec::new();
    for r in ints.chunks_exact(4) {
        let nd = r[3] as usize;
        let v = vals.get(pos..pos + 2 + nd).ok_or_else(bad)?;
        rows.push(LogRow {
            seed: r[0],
            stage: r[1] as usize,
            minibatch: r[2] as usize,
            train_loss: v[0],
            grad_norm: v[1],
            dev: v[2..].to_vec(),
        });
        pos += 2 + nd;
    }
    if pos != vals.len() {
        return Err(bad());
    }
    Ok(rows)
}

pub fn checkpoint_to_bytes(ck: CheckpointRef<'_>, prov: &Provenance) -> Vec<u8> {
    let mut c = Container::new(FileKind::Checkpoint);
    provenance_to(&mut c, prov);
    c.put_f64("run.init_dev", &[1], &[ck.init_dev]);
    c.put_u64("run.completed", &[ck.completed.len() as u64]);
    for (i, s) in ck.completed.iter().enumerate() {
        c.put_u64(&format!("done.{i}.seed"), &[s.seed]);
        c.put_f64(&format!("done.{i}.dev"), &[1], &[s.dev_metric]);
        params_to(&mut c, &format!("done.{i}."), &s.params);
    }
    log_to(&mut c, "run.log", ck.log);
    let st = ck.state;
    c.put_u64("state.position", &[st.seed, st.stage as u64, st.step as u64, st.adam.t]);
    params_to(&mut c, "params.", &st.params);
    params_to(&mut c, "anchor.", &st.anchor);
    params_to(&mut c, "adam.m.", &st.adam.m);
    params_to(&mut c, "adam.v.", &st.adam.v);
    if let Some((p, m)) = &st.best {
        c.put_f64("best.dev", &[1], &[*m]);
        params_to(&mut c, "best.", p);
    }
    cursor_to(&mut c, &st.cursor);
    log_to(&mut c, "state.log", &st.log);
    c.to_bytes()
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<(Checkpoint, Provenance)> {
    let c = Container::from_bytes(bytes)?;
    if c.kind != FileKind::Checkpoint {
        return Err(Error::MalformedHeader("file is a model, not a checkpoint".into()));
    }
    let n = c.u64("run.completed")?;
    let completed = (0..n)
        .map(|i| {
            Ok(SeedResult {
                seed: c.u64(&format!("done.{i}.seed"))?,
                dev_metric: c.f64(&format!("done.{i}.dev"))?,
                params: params_from(&c, &format!("done.{i}."))?,
            })
        })
        .collect::<Result<_>>()?;
    let pos = c.u64s("state.position")?;
    let [seed, stage, step, t] = pos else {
        return Err(Error::MalformedHeader("state.position must hold 4 values".into()));
    };
    let best = if c.has("best.dev") {
        Some((params_from(&c, "best.")?, c.f64("best.dev")?))
    } else {
        None
    };
    let state = TrainState {
        seed: *seed,
        params: params_from(&c, "params.")?,
        anchor: params_from(&c, "anchor.")?,
        adam: Adam {
            m: params_from(&c, "adam.m.")?,
            v: params_from(&c, "adam.v.")?,
            t: *t,
        },
        cursor: cursor_from(&c)?,
        stage: *stage as usize,
        step: *step as usize,
        best,
        log: log_from(&c, "state.log")?,
    };
    let ck = Checkpoint {
        completed,
        log: log_from(&c, "run.log")?,
        init_dev: c.f64("run.init_dev")?,
        state,
    };
    Ok((ck, provenance_from(&c)?))
}

pub fn save_checkpoint(path: impl AsRef<Path>, ck: CheckpointRef<'_>, prov: &Provenance) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    write_file(&tmp, &checkpoint_to_bytes(ck, prov))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Checkpoint, Provenance)> {
    checkpoint_from_bytes(&read(path.as_ref())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::CalStages;
    use rand::Rng;

    fn random_params(arch: Architecture, shape: &CalibrationShape, seed: u64) -> BackendParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = BackendParams::zeros(arch, 7, 5, shape);
        for (_, g) in p.groups_mut() {
            g.iter_mut().for_each(|v| *v = rng.random_range(-2.0..2.0));
        }
        p
    }

    fn small_shape() -> CalibrationShape {
        CalibrationShape {
            m_dim: 4,
            s_dim: 3,
            ..CalibrationShape::default()
        }
    }

    #[test]
    fn every_architecture_round_trips() {
        let prov = Provenance {
            config_sha256: "ab".repeat(32),
            seed: 17,
            lda_weighted: true,
        };
        for (i, arch) in Architecture::ALL.into_iter().enumerate() {
            let mut shape = small_shape();
            shape.features = match i % 3 {
                0 => DurationFeatures::Log,
                1 => DurationFeatures::default_bins(),
                _ => DurationFeatures::default(),
            };
            shape.transform = SideTransform::LogSoftmax;
            let p = random_params(arch, &shape, i as u64);
            let bytes = model_to_bytes(&p, &prov);
            let (q, pr) = model_from_bytes(&bytes).unwrap();
            assert_eq!(p, q, "{arch}");
            assert_eq!(pr, prov);
            assert_eq!(model_to_bytes(&q, &pr), bytes);
        }
    }

    #[test]
    fn plda_model_is_kept() {
        let mut p = random_params(Architecture::Plda, &small_shape(), 3);
        p.plda = Some(PldaModel {
            mu: Vector::from_element(5, 0.5),
            b: Mat::identity(5, 5) * 2.0,
            w: Mat::identity(5, 5) * 3.0,
        });
        let (q, _) = model_from_bytes(&model_to_bytes(&p, &Provenance::default())).unwrap();
        assert_eq!(q.plda, p.plda);
        assert_eq!(q.calibrator.stages(), CalStages::Global);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let p = random_params(Architecture::DPldaDd, &small_shape(), 1);
        let bytes = model_to_bytes(&p, &Provenance::default());
        assert!(model_from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(model_from_bytes(&bad), Err(Error::MalformedHeader(_))));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(model_from_bytes(&extra).is_err());
    }

    #[test]
    fn stage_tag_must_match_architecture() {
        let p = random_params(Architecture::DPldaSd, &small_shape(), 2);
        let mut c = Container::new(FileKind::Model);
        params_to(&mut c, "", &p);
        provenance_to(&mut c, &Provenance::default());
        for r in &mut c.records {
            if r.tag == "stages" {
                r.payload = Payload::Str("dd".into());
                r.dims = vec![2];
            }
        }
        assert!(matches!(model_from_bytes(&c.to_bytes()), Err(Error::StageMismatch(_))));
    }
}
