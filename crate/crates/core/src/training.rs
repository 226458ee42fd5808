//! Initialization from the generative backend, minibatch construction and
//! the three-stage discriminative training schedule.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::backend::{Architecture, BackendParams, CalibrationShape, build_calibrator};
use crate::calibration::GlobalCal;
use crate::data::{classify_pair, EmbeddingTable, IndexedTrial, Metadata, TrialSet};
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::metrics::{cllr, fit_affine, ScoreSet};
use crate::plda::{fit_plda, to_score_form, EmConfig};
use crate::preproc::{balanced_weights, fit_full_lda, flat_weights, SpeakerWeights, DEFAULT_RIDGE_REL};

/// Samples with their metadata, rows of `x` aligned with `meta.samples()`.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub x: Mat,
    pub meta: Metadata,
}

impl TrainData {
    pub fn new(table: &EmbeddingTable, meta: Metadata) -> Result<Self> {
        let ids: Vec<String> = meta.samples().iter().map(|s| s.sample_id.clone()).collect();
        let x = table.select(&ids)?;
        Ok(Self { x, meta })
    }

    pub fn durations(&self) -> Vec<f64> {
        self.meta.samples().iter().map(|s| s.duration_s).collect()
    }

    fn rows(&self, rows: &[usize]) -> (Mat, Vec<f64>) {
        let x = Mat::from_fn(rows.len(), self.x.ncols(), |r, c| self.x[(rows[r], c)]);
        let d = rows.iter().map(|&r| self.meta.samples()[r].duration_s).collect();
        (x, d)
    }
}

/// A development set: samples plus the valid trials among them.
#[derive(Debug, Clone)]
pub struct DevSet {
    pub name: String,
    pub x: Mat,
    pub durations: Vec<f64>,
    pub trials: Vec<IndexedTrial>,
}

impl DevSet {
    /// Collects the samples referenced by the valid trials of `trials`.
    pub fn new(name: &str, table: &EmbeddingTable, meta: &Metadata, trials: &TrialSet) -> Result<Self> {
        let valid = trials.valid_only();
        let mut index: BTreeMap<String, usize> = BTreeMap::new();
        let mut ids: Vec<String> = Vec::new();
        let mut lookup = |id: &str| -> usize {
            *index.entry(id.to_string()).or_insert_with(|| {
                ids.push(id.to_string());
                ids.len() - 1
            })
        };
        let mut indexed = Vec::with_capacity(valid.len());
        for ((a, b), l) in valid.pairs.iter().zip(&valid.labels) {
            indexed.push(IndexedTrial {
                enroll: lookup(a),
                test: lookup(b),
                target: l.is_target(),
            });
        }
        if indexed.is_empty() {
            return Err(Error::InvalidArgument(format!("dev set '{name}' has no valid trials")));
        }
        let x = table.select(&ids)?;
        let durations = ids
            .iter()
            .map(|id| meta.require(id).map(|s| s.duration_s))
            .collect::<Result<Vec<f64>>>()?;
        Ok(Self {
            name: name.to_string(),
            x,
            durations,
            trials: indexed,
        })
    }

    /// All valid pairs among the samples of `data`.
    pub fn all_pairs(name: &str, data: &TrainData) -> Result<Self> {
        let s = data.meta.samples();
        let mut trials = Vec::new();
        for i in 0..s.len() {
            for j in i + 1..s.len() {
                let (label, mask) = classify_pair(&s[i], &s[j]);
                if mask.is_valid() {
                    trials.push(IndexedTrial {
                        enroll: i,
                        test: j,
                        target: label.is_target(),
                    });
                }
            }
        }
        Ok(Self {
            name: name.to_string(),
            x: data.x.clone(),
            durations: data.durations(),
            trials,
        })
    }

    pub fn llrs(&self, params: &BackendParams) -> Result<Vec<f64>> {
        params.llrs(&self.x, Some(&self.durations), &self.trials)
    }

    pub fn score_set(&self, params: &BackendParams) -> Result<ScoreSet> {
        ScoreSet::new(self.llrs(params)?, self.trials.iter().map(|t| t.target).collect())
    }
}

/// Actual Cllr (bits) at `pi` on every dev set, and their mean.
pub fn dev_metric(params: &BackendParams, devs: &[DevSet], pi: f64) -> Result<(f64, Vec<f64>)> {
    if devs.is_empty() {
        return Err(Error::Config("no development sets".into()));
    }
    let per = devs
        .iter()
        .map(|d| cllr(&d.score_set(params)?, pi))
        .collect::<Result<Vec<f64>>>()?;
    Ok((per.iter().sum::<f64>() / per.len() as f64, per))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BatchMethod {
    #[default]
    Plain,
    DomainBalanced,
}

impl fmt::Display for BatchMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BatchMethod::Plain => "plain",
            BatchMethod::DomainBalanced => "domain_balanced",
        })
    }
}

impl FromStr for BatchMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(BatchMethod::Plain),
            "domain_balanced" | "balanced" => Ok(BatchMethod::DomainBalanced),
            _ => Err(Error::InvalidArgument(format!("unknown batch method '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchSpec {
    pub size: usize,
    pub method: BatchMethod,
}

#[derive(Debug, Clone)]
struct SpeakerEntry {
    /// Sample rows of each session, sessions sorted by id.
    sessions: Vec<Vec<usize>>,
}

/// Speakers eligible for batches, grouped for selection (one group for plain
/// batches, one per domain for balanced ones).
#[derive(Debug, Clone)]
pub struct BatchPlan {
    speakers: Vec<SpeakerEntry>,
    groups: Vec<Vec<usize>>,
    method: BatchMethod,
}

impl BatchPlan {
    pub fn new(meta: &Metadata, method: BatchMethod) -> Result<Self> {
        let mut speakers = Vec::new();
        let mut by_domain: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (spk, rows) in meta.by_speaker() {
            let mut sessions: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
            for &r in &rows {
                sessions.entry(meta.samples()[r].session_id.as_str()).or_default().push(r);
            }
            if sessions.len() < 2 {
                warn!("speaker '{spk}' has fewer than 2 sessions; skipped for batches");
                continue;
            }
            let domain = meta.samples()[rows[0]].domain_id.clone();
            by_domain.entry(domain).or_default().push(speakers.len());
            speakers.push(SpeakerEntry {
                sessions: sessions.into_values().collect(),
            });
        }
        if speakers.len() < 2 {
            return Err(Error::InsufficientSpeakers(speakers.len()));
        }
        let groups = match method {
            BatchMethod::Plain => vec![(0..speakers.len()).collect()],
            BatchMethod::DomainBalanced => by_domain.into_values().collect(),
        };
        Ok(Self {
            speakers,
            groups,
            method,
        })
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn n_speakers(&self) -> usize {
        self.speakers.len()
    }

    /// Speakers drawn from each group for a batch of `size` samples.
    fn speakers_per_group(&self, size: usize) -> Result<usize> {
        let div = 2 * self.groups.len();
        if size == 0 || !size.is_multiple_of(div) {
            return Err(Error::Config(format!(
                "batch size {size} must be a positive multiple of {div} for {} batches",
                self.method
            )));
        }
        let k = size / div;
        if let Some(g) = self.groups.iter().find(|g| g.len() < k) {
            return Err(Error::Config(format!(
                "batch needs {k} speakers per group but a group has only {}",
                g.len()
            )));
        }
        Ok(k)
    }

    /// Largest batch size not above `2·max_speakers` that the plan supports.
    pub fn largest_batch(&self, max_speakers: usize) -> usize {
        let g = self.groups.len();
        let smallest = self.groups.iter().map(Vec::len).min().unwrap_or(0);
        let k = (max_speakers / g).min(smallest).max(1);
        2 * g * k
    }
}

/// A list traversed in order and reshuffled whenever it is exhausted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rotation {
    pub order: Vec<usize>,
    pub pos: usize,
}

impl Rotation {
    fn new(items: Vec<usize>, rng: &mut ChaCha8Rng) -> Self {
        let mut order = items;
        order.shuffle(rng);
        Self { order, pos: 0 }
    }

    fn next(&mut self, rng: &mut ChaCha8Rng) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

/// Traversal state of the speaker, session and sample lists.
#[derive(Debug, Clone)]
pub struct BatchCursor {
    pub groups: Vec<Rotation>,
    pub sessions: Vec<Rotation>,
    pub samples: Vec<Vec<Rotation>>,
    pub rng: ChaCha8Rng,
}

impl BatchCursor {
    /// Checks that the rotations have the shape `plan` would give them.
    pub fn check_plan(&self, plan: &BatchPlan) -> Result<()> {
        let ok = self.groups.len() == plan.groups.len()
            && self.groups.iter().zip(&plan.groups).all(|(r, g)| r.order.len() == g.len())
            && self.sessions.len() == plan.speakers.len()
            && self.samples.len() == plan.speakers.len()
            && plan.speakers.iter().enumerate().all(|(i, s)| {
                self.sessions[i].order.len() == s.sessions.len()
                    && self.samples[i].len() == s.sessions.len()
                    && self.samples[i].iter().zip(&s.sessions).all(|(r, rows)| r.order.len() == rows.len())
            })
            && self.all_rotations().all(|r| r.pos <= r.order.len());
        if ok {
            Ok(())
        } else {
            Err(Error::Config("batch cursor does not match the training data".into()))
        }
    }

    fn all_rotations(&self) -> impl Iterator<Item = &Rotation> {
        self.groups.iter().chain(&self.sessions).chain(self.samples.iter().flatten())
    }

    pub fn new(plan: &BatchPlan, rng: ChaCha8Rng) -> Self {
        let mut rng = rng;
        let groups = plan.groups.iter().map(|g| Rotation::new(g.clone(), &mut rng)).collect();
        let sessions = plan
            .speakers
            .iter()
            .map(|s| Rotation::new((0..s.sessions.len()).collect(), &mut rng))
            .collect();
        let samples = plan
            .speakers
            .iter()
            .map(|s| {
                s.sessions
                    .iter()
                    .map(|rows| Rotation::new(rows.clone(), &mut rng))
                    .collect()
            })
            .collect();
        Self {
            groups,
            sessions,
            samples,
            rng,
        }
    }
}

/// Sample rows of a batch and all valid trials among them (indices into
/// `rows`).
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub rows: Vec<usize>,
    pub trials: Vec<IndexedTrial>,
}

/// Draws the next batch: speakers from each group, two distinct sessions per
/// speaker and one sample per session, then every valid pair.
pub fn make_batch(
    plan: &BatchPlan,
    meta: &Metadata,
    spec: BatchSpec,
    cursor: &mut BatchCursor,
) -> Result<Batch> {
    let k = plan.speakers_per_group(spec.size)?;
    let BatchCursor {
        groups,
        sessions,
        samples,
        rng,
    } = cursor;
    let mut rows = Vec::with_capacity(spec.size);
    for group in groups.iter_mut() {
        let mut chosen: Vec<usize> = Vec::with_capacity(k);
        while chosen.len() < k {
            let spk = group.next(rng);
            if chosen.contains(&spk) {
                continue;
            }
            chosen.push(spk);
        }
        for spk in chosen {
            let first = sessions[spk].next(rng);
            let mut second = sessions[spk].next(rng);
            while second == first {
                second = sessions[spk].next(rng);
            }
            for ses in [first, second] {
                rows.push(samples[spk][ses].next(rng));
            }
        }
    }
    let s = meta.samples();
    let mut trials = Vec::new();
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            let (label, mask) = classify_pair(&s[rows[i]], &s[rows[j]]);
            if mask.is_valid() {
                trials.push(IndexedTrial {
                    enroll: i,
                    test: j,
                    target: label.is_target(),
                });
            }
        }
    }
    Ok(Batch { rows, trials })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SpeakerWeighting {
    #[default]
    Flat,
    Balanced,
}

impl fmt::Display for SpeakerWeighting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SpeakerWeighting::Flat => "flat",
            SpeakerWeighting::Balanced => "balanced",
        })
    }
}

impl FromStr for SpeakerWeighting {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flat" => Ok(SpeakerWeighting::Flat),
            "balanced" => Ok(SpeakerWeighting::Balanced),
            _ => Err(Error::InvalidArgument(format!("unknown speaker weighting '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InitConfig {
    pub lda_dim: usize,
    pub shape: CalibrationShape,
    pub weighting: SpeakerWeighting,
    pub em: EmConfig,
    pub ridge_rel: f64,
    /// Maximum number of speakers whose trials fit the global calibration.
    pub cal_speakers: usize,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            lda_dim: 300,
            shape: CalibrationShape::default(),
            weighting: SpeakerWeighting::Flat,
            em: EmConfig::default(),
            ridge_rel: DEFAULT_RIDGE_REL,
            cal_speakers: 1000,
        }
    }
}

pub fn speaker_weights(meta: &Metadata, weighting: SpeakerWeighting) -> SpeakerWeights {
    match weighting {
        SpeakerWeighting::Flat => flat_weights(meta),
        SpeakerWeighting::Balanced => balanced_weights(meta),
    }
}

/// Generatively trained backend (LDA, PLDA, global calibration) shared by
/// every seed, plus the side-information front end from the trailing LDA
/// directions.
#[derive(Debug, Clone)]
pub struct GenerativeInit {
    pub params: BackendParams,
    pub side_front: crate::preproc::PreprocParams,
    pub global: GlobalCal,
    pub em_trace: Vec<f64>,
}

/// LDA, PLDA EM, closed-form score and global calibration on trials from at
/// most `cal_speakers` speakers.
pub fn generative_init(
    data: &TrainData,
    cfg: &InitConfig,
    method: BatchMethod,
    pi: f64,
    seed: u64,
) -> Result<GenerativeInit> {
    let weights = speaker_weights(&data.meta, cfg.weighting);
    let d = data.x.ncols();
    let n_speakers = data.meta.by_speaker().len();
    if cfg.lda_dim == 0 || cfg.lda_dim > d.min(n_speakers.saturating_sub(1)) {
        return Err(Error::Config(format!(
            "LDA dimension {} must be in 1..={} (D = {d}, {n_speakers} speakers)",
            cfg.lda_dim,
            d.min(n_speakers.saturating_sub(1))
        )));
    }
    let lda = fit_full_lda(&data.x, &data.meta, &weights, cfg.ridge_rel)?;
    let preproc = lda.leading(cfg.lda_dim);
    let w = preproc.apply_rows(&data.x)?;
    let (plda, em_trace) = fit_plda(&w, &data.meta, &weights, cfg.em)?;
    let form = to_score_form(&plda)?;
    let mut params = BackendParams {
        arch: Architecture::Plda,
        preproc,
        form,
        plda: Some(plda),
        calibrator: build_calibrator(
            Architecture::Plda.stages(),
            d,
            &cfg.shape,
            GlobalCal { alpha: 1.0, beta: 0.0 },
        ),
    };

    let plan = BatchPlan::new(&data.meta, method)?;
    let mut cursor = BatchCursor::new(&plan, ChaCha8Rng::seed_from_u64(seed));
    let size = plan.largest_batch(cfg.cal_speakers);
    let batch = make_batch(&plan, &data.meta, BatchSpec { size, method }, &mut cursor)?;
    let (xb, db) = data.rows(&batch.rows);
    let raw = params.llrs(&xb, Some(&db), &batch.trials)?;
    let fit = fit_affine(&ScoreSet::new(raw, batch.trials.iter().map(|t| t.target).collect())?, pi)?;
    if !fit.converged {
        warn!("global calibration did not converge after {} iterations", fit.iterations);
    }
    if fit.alpha <= 0.0 {
        warn!("global calibration scale is not positive ({})", fit.alpha);
    }
    let global = GlobalCal {
        alpha: fit.alpha,
        beta: fit.beta,
    };
    params.calibrator = crate::calibration::Calibrator::Global(global);
    if cfg.shape.m_dim > d || cfg.shape.s_dim > cfg.shape.m_dim {
        return Err(Error::Config(format!(
            "side-information dimensions need S ≤ M ≤ D, got S = {}, M = {}, D = {d}",
            cfg.shape.s_dim, cfg.shape.m_dim
        )));
    }
    let side_front = lda.trailing(cfg.shape.m_dim);
    Ok(GenerativeInit {
        params,
        side_front,
        global,
        em_trace,
    })
}

/// Model of architecture `arch` equivalent to the generative backend, with
/// the side-information reduction drawn from N(0, 0.5²) using `rng`.
pub fn assemble(
    init: &GenerativeInit,
    arch: Architecture,
    shape: &CalibrationShape,
    rng: &mut ChaCha8Rng,
) -> BackendParams {
    let mut params = init.params.clone();
    params.arch = arch;
    params.calibrator = build_calibrator(arch.stages(), params.input_dim(), shape, init.global);
    if let Some(side) = params.calibrator.side_info_mut() {
        side.a_m = init.side_front.a.clone();
        side.b_m = init.side_front.m.clone();
        let normal = Normal::new(0.0, 0.5).expect("valid normal");
        for v in side.a_z.iter_mut() {
            *v = normal.sample(rng);
        }
        for v in side.b_z.iter_mut() {
            *v = normal.sample(rng);
        }
    }
    params
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub s1: usize,
    pub s2: usize,
    pub s3: usize,
    pub lr1: f64,
    pub lr2: f64,
    pub lr3: f64,
    pub batch_size: usize,
    pub batch_method: BatchMethod,
    pub pi_train: f64,
    pub l2_weight: f64,
    /// Per-group L2 weights, matched by group-name prefix (last match wins).
    pub l2_overrides: Vec<(String, f64)>,
    pub grad_clip_norm: f64,
    pub n_seeds: usize,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            s1: 12000,
            s2: 3000,
            s3: 100,
            lr1: 0.0005,
            lr2: 0.001,
            lr3: 0.00001,
            batch_size: 2048,
            batch_method: BatchMethod::Plain,
            pi_train: 0.01,
            l2_weight: 1e-4,
            l2_overrides: Vec::new(),
            grad_clip_norm: 4.0,
            n_seeds: 1,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 || !self.batch_size.is_multiple_of(2) {
            return bad(format!("batch size must be even and positive, got {}", self.batch_size));
        }
        for (name, v) in [("lr1", self.lr1), ("lr2", self.lr2), ("lr3", self.lr3)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.pi_train > 0.0 && self.pi_train < 1.0) {
            return bad(format!("pi_train must be in (0, 1), got {}", self.pi_train));
        }
        if !(self.grad_clip_norm > 0.0) {
            return bad(format!("grad_clip_norm must be positive, got {}", self.grad_clip_norm));
        }
        if self.l2_weight < 0.0 || self.l2_overrides.iter().any(|(_, w)| *w < 0.0) {
            return bad("L2 weights must be non-negative".into());
        }
        if self.n_seeds == 0 {
            return bad("n_seeds must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return bad("invalid Adam parameters".into());
        }
        Ok(())
    }

    pub fn l2_for(&self, group: &str) -> f64 {
        self.l2_overrides
            .iter()
            .rev()
            .find(|(p, _)| group.starts_with(p.as_str()))
            .map(|(_, w)| *w)
            .unwrap_or(self.l2_weight)
    }
}

/// Adam moments with the same layout as the parameters.
#[derive(Debug, Clone)]
pub struct Adam {
    pub m: BackendParams,
    pub v: BackendParams,
    pub t: u64,
}

impl Adam {
    pub fn new(params: &BackendParams) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut BackendParams, grads: &BackendParams, lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let arch = params.arch;
        let g = grads.groups();
        let mut m = self.m.groups_mut();
        let mut v = self.v.groups_mut();
        for (gi, (name, p)) in params.groups_mut().into_iter().enumerate() {
            if !arch.trains_group(&name) {
                continue;
            }
            let (gg, mm, vv) = (g[gi].1, &mut *m[gi].1, &mut *v[gi].1);
            for k in 0..p.len() {
                mm[k] = b1 * mm[k] + (1.0 - b1) * gg[k];
                vv[k] = b2 * vv[k] + (1.0 - b2) * gg[k] * gg[k];
                p[k] -= lr * (mm[k] / c1) / ((vv[k] / c2).sqrt() + cfg.adam_eps);
            }
        }
    }
}

/// Adds the gradient of `Σ_g λ_g ‖θ_g − θ_g⁰‖²` for trained groups.
fn add_l2(grads: &mut BackendParams, params: &BackendParams, anchor: &BackendParams, cfg: &TrainConfig) {
    let p = params.groups();
    let a = anchor.groups();
    for (gi, (name, g)) in grads.groups_mut().into_iter().enumerate() {
        let w = cfg.l2_for(&name);
        if w == 0.0 || !params.arch.trains_group(&name) {
            continue;
        }
        for k in 0..g.len() {
            g[k] += 2.0 * w * (p[gi].1[k] - a[gi].1[k]);
        }
    }
}

fn clip(grads: &mut BackendParams, max_norm: f64) -> f64 {
    let norm = grads
        .groups()
        .iter()
        .flat_map(|(_, g)| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for (_, g) in grads.groups_mut() {
            g.iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub seed: u64,
    pub stage: usize,
    pub minibatch: usize,
    pub train_loss: f64,
    /// Per-dev-set actual Cllr at the training prior (empty in stage 1).
    pub dev: Vec<f64>,
    pub grad_norm: f64,
}

pub fn log_header(devs: &[DevSet]) -> String {
    let mut h = String::from("seed\tstage\tminibatch\ttrain_loss");
    for d in devs {
        h.push_str(&format!("\tdev_cllr01_{}", d.name));
    }
    h.push_str("\tdev_mean\tgrad_norm");
    h
}

impl LogRow {
    pub fn to_tsv(&self, n_dev: usize) -> String {
        let mut r = format!("{}\t{}\t{}\t{:.9}", self.seed, self.stage, self.minibatch, self.train_loss);
        if self.dev.is_empty() {
            for _ in 0..=n_dev {
                r.push_str("\tNA");
            }
        } else {
            for v in &self.dev {
                r.push_str(&format!("\t{v:.9}"));
            }
            r.push_str(&format!("\t{:.9}", self.dev.iter().sum::<f64>() / self.dev.len() as f64));
        }
        r.push_str(&format!("\t{:.9}", self.grad_norm));
        r
    }
}

/// Complete state of one seed's training run; enough to resume.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub seed: u64,
    pub params: BackendParams,
    pub anchor: BackendParams,
    pub adam: Adam,
    pub cursor: BatchCursor,
    /// Current stage (1–3) and minibatches completed within it.
    pub stage: usize,
    pub step: usize,
    /// Best checkpoint of the current selection stage and its dev metric.
    pub best: Option<(BackendParams, f64)>,
    pub log: Vec<LogRow>,
}

impl TrainState {
    pub fn new(params: BackendParams, plan: &BatchPlan, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        Self {
            seed,
            anchor: params.clone(),
            adam: Adam::new(&params),
            cursor: BatchCursor::new(plan, rng),
            params,
            stage: 1,
            step: 0,
            best: None,
            log: Vec::new(),
        }
    }

    pub fn is_finished(&self) -> bool {
        self.stage > 3
    }
}

/// Runs (or resumes) the three-stage schedule. Returns the selected model and
/// its mean dev metric (NaN when no dev sets are given and none is needed).
/// `checkpoint` is called after every minibatch with the current state.
pub fn run_stages(
    state: &mut TrainState,
    data: &TrainData,
    plan: &BatchPlan,
    cfg: &TrainConfig,
    devs: &[DevSet],
    checkpoint: &mut dyn FnMut(&TrainState) -> Result<()>,
) -> Result<(BackendParams, f64)> {
    cfg.validate()?;
    let spec = BatchSpec {
        size: cfg.batch_size,
        method: cfg.batch_method,
    };
    let needs_dev = cfg.s2 + cfg.s3 > 0;
    if needs_dev && devs.is_empty() {
        return Err(Error::Config("stages 2 and 3 need at least one development set".into()));
    }
    if !state.params.arch.is_trained() {
        let dev = if devs.is_empty() { f64::NAN } else { dev_metric(&state.params, devs, cfg.pi_train)?.0 };
        state.stage = 4;
        return Ok((state.params.clone(), dev));
    }
    loop {
        let (len, lr) = match state.stage {
            1 => (cfg.s1, cfg.lr1),
            2 => (cfg.s2, cfg.lr2),
            3 => (cfg.s3, cfg.lr3),
            _ => break,
        };
        if state.stage >= 2 && state.best.is_none() {
            // The starting point of a selection stage is itself a candidate.
            let (m, _) = dev_metric(&state.params, devs, cfg.pi_train)?;
            state.best = Some((state.params.clone(), m));
            state.adam = Adam::new(&state.params);
        }
        if state.step >= len {
            match state.stage {
                1 if !needs_dev => state.stage = 4,
                1 => state.stage = 2,
                2 => {
                    // Stage 3 fine-tunes the stage-2 selection.
                    let (p, m) = state.best.clone().expect("stage 2 selection");
                    state.params = p.clone();
                    state.best = Some((p, m));
                    state.adam = Adam::new(&state.params);
                    state.stage = 3;
                }
                _ => state.stage = 4,
            }
            state.step = 0;
            continue;
        }
        let batch = make_batch(plan, &data.meta, spec, &mut state.cursor)?;
        let (xb, db) = data.rows(&batch.rows);
        let (stage, step) = (state.stage, state.step);
        let (loss, mut grads) = state
            .params
            .loss_and_gradient(&xb, Some(&db), &batch.trials, cfg.pi_train)
            .map_err(|e| match e {
                Error::NonFiniteValue { .. } => Error::Divergence { stage, minibatch: step },
                other => other,
            })?;
        if !loss.is_finite() {
            return Err(Error::Divergence { stage, minibatch: step });
        }
        add_l2(&mut grads, &state.params, &state.anchor, cfg);
        let grad_norm = clip(&mut grads, cfg.grad_clip_norm);
        state.adam.step(&mut state.params, &grads, lr, cfg);
        let dev = if stage >= 2 {
            let (m, per) = dev_metric(&state.params, devs, cfg.pi_train)?;
            if state.best.as_ref().is_some_and(|(_, best)| m < *best) {
                state.best = Some((state.params.clone(), m));
            }
            per
        } else {
            Vec::new()
        };
        state.log.push(LogRow {
            seed: state.seed,
            stage,
            minibatch: step,
            train_loss: loss,
            dev,
            grad_norm,
        });
        state.step += 1;
        checkpoint(state)?;
    }
    match (&state.best, needs_dev) {
        (Some((p, m)), true) => Ok((p.clone(), *m)),
        _ => {
            let m = if devs.is_empty() { f64::NAN } else { dev_metric(&state.params, devs, cfg.pi_train)?.0 };
            Ok((state.params.clone(), m))
        }
    }
}

#[derive(Debug, Clone)]
pub struct SeedResult {
    pub seed: u64,
    pub dev_metric: f64,
    pub params: BackendParams,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: BackendParams,
    pub best_seed: u64,
    pub seeds: Vec<SeedResult>,
    pub log: Vec<LogRow>,
    /// Mean dev metric of the initial model (NaN without dev sets).
    pub init_dev: f64,
}

/// Initializes once, then trains `cfg.n_seeds` runs (seeds `cfg.seed`,
/// `cfg.seed + 1`, ...) and keeps the run with the lowest dev metric.
pub fn train(
    data: &TrainData,
    arch: Architecture,
    init_cfg: &InitConfig,
    cfg: &TrainConfig,
    devs: &[DevSet],
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let init = generative_init(data, init_cfg, cfg.batch_method, cfg.pi_train, cfg.seed)?;
    train_from(&init, data, arch, init_cfg, cfg, devs)
}

/// [`train`] with a precomputed generative initialization.
pub fn train_from(
    init: &GenerativeInit,
    data: &TrainData,
    arch: Architecture,
    init_cfg: &InitConfig,
    cfg: &TrainConfig,
    devs: &[DevSet],
) -> Result<TrainOutcome> {
    train_resumable(init, data, arch, init_cfg, cfg, devs, None, &mut |_| Ok(()))
}

/// Progress of a multi-seed run, enough to resume it bit-exactly.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub completed: Vec<SeedResult>,
    /// Log rows of the completed seeds.
    pub log: Vec<LogRow>,
    pub init_dev: f64,
    pub state: TrainState,
}

/// Borrowed view of a [`Checkpoint`], handed to checkpoint sinks.
#[derive(Debug, Clone, Copy)]
pub struct CheckpointRef<'a> {
    pub completed: &'a [SeedResult],
    pub log: &'a [LogRow],
    pub init_dev: f64,
    pub state: &'a TrainState,
}

impl Checkpoint {
    pub fn as_ref(&self) -> CheckpointRef<'_> {
        CheckpointRef {
            completed: &self.completed,
            log: &self.log,
            init_dev: self.init_dev,
            state: &self.state,
        }
    }
}

/// [`train_from`], optionally continuing from `resume`; `sink` sees the
/// progress after every minibatch.
#[allow(clippy::too_many_arguments)]
pub fn train_resumable(
    init: &GenerativeInit,
    data: &TrainData,
    arch: Architecture,
    init_cfg: &InitConfig,
    cfg: &TrainConfig,
    devs: &[DevSet],
    resume: Option<Checkpoint>,
    sink: &mut dyn FnMut(CheckpointRef<'_>) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let plan = BatchPlan::new(&data.meta, cfg.batch_method)?;
    let (mut seeds, mut log, mut init_dev, mut pending) = match resume {
        Some(c) => {
            let i = c.completed.len();
            let expected = cfg.seed.wrapping_add(i as u64);
            if i >= cfg.n_seeds || c.state.seed != expected || c.state.params.arch != arch {
                return Err(Error::Config(format!(
                    "checkpoint (seed {}, {} completed, {}) does not match this run",
                    c.state.seed, i, c.state.params.arch
                )));
            }
            c.state.cursor.check_plan(&plan)?;
            (c.completed, c.log, c.init_dev, Some(c.state))
        }
        None => (Vec::with_capacity(cfg.n_seeds), Vec::new(), f64::NAN, None),
    };
    for i in seeds.len()..cfg.n_seeds {
        let seed = cfg.seed.wrapping_add(i as u64);
        let mut state = match pending.take() {
            Some(s) => s,
            None => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let params = assemble(init, arch, &init_cfg.shape, &mut rng);
                if i == 0 && !devs.is_empty() {
                    init_dev = dev_metric(&params, devs, cfg.pi_train)?.0;
                }
                TrainState::new(params, &plan, seed)
            }
        };
        let (best, metric) = {
            let (done, prev) = (&seeds, &log);
            run_stages(&mut state, data, &plan, cfg, devs, &mut |st| {
                sink(CheckpointRef {
                    completed: done,
                    log: prev,
                    init_dev,
                    state: st,
                })
            })?
        };
        info!("seed {seed}: dev metric {metric:.6}");
        log.append(&mut state.log);
        seeds.push(SeedResult {
            seed,
            dev_metric: metric,
            params: best,
        });
    }
    let best = seeds
        .iter()
        .enumerate()
        .min_by(|a, b| {
            let (x, y) = (a.1.dev_metric, b.1.dev_metric);
            // NaN (no dev sets) sorts last; ties keep the earlier seed.
            x.partial_cmp(&y).unwrap_or(if x.is_nan() { std::cmp::Ordering::Greater } else { std::cmp::Ordering::Less }).then(a.0.cmp(&b.0))
        })
        .map(|(i, _)| i)
        .expect("at least one seed");
    Ok(TrainOutcome {
        params: seeds[best].params.clone(),
        best_seed: seeds[best].seed,
        seeds,
        log,
        init_dev,
    })
}
