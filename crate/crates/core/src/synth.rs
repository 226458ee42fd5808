//! Synthetic corpora from a two-covariance model with condition effects:
//! per-domain mean shifts and noise scales, and duration-dependent noise.
//!
//! A sample of speaker `s` in domain `d`, session `e`, with duration `t` is
//! `x = y_s + δ_d + o_e + η_d·(t_ref/t)^p·ε`, where `y_s ~ N(μ, B⁻¹)`,
//! `ε ~ N(0, W⁻¹)` and `o_e ~ N(0, κ_ses·W⁻¹)`.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::{EmbeddingTable, IndexedTrial, Metadata, SampleMeta};
use crate::error::{Error, Result};
use crate::linalg::{cholesky, inv_spd, sym_eigen_desc, symmetrize, Mat, Vector};
use crate::plda::PldaModel;

#[derive(Debug, Clone, PartialEq)]
pub struct DomainProfile {
    pub name: String,
    pub n_speakers: usize,
    pub sessions_per_speaker: usize,
    pub samples_per_session: usize,
    /// Multiplier on the within-speaker noise standard deviation.
    pub noise_scale: f64,
    /// Durations are log-uniform in this range (seconds).
    pub duration_range: (f64, f64),
    /// Explicit condition shift; drawn at random when absent.
    pub mean_shift: Option<Vec<f64>>,
}

impl DomainProfile {
    pub fn new(name: &str, n_speakers: usize) -> Self {
        Self {
            name: name.to_string(),
            n_speakers,
            sessions_per_speaker: 3,
            samples_per_session: 2,
            noise_scale: 1.0,
            duration_range: (8.0, 240.0),
            mean_shift: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub dim: usize,
    /// Largest between-speaker variance; the rest decay geometrically.
    pub between_scale: f64,
    pub between_decay: f64,
    /// Average within-speaker variance per dimension.
    pub within_scale: f64,
    /// Session-offset covariance as a multiple of the within covariance.
    pub session_scale: f64,
    /// Standard deviation of randomly drawn domain shifts.
    pub sigma_dom: f64,
    /// Dimension of the subspace domain shifts live in (0 = full space).
    pub condition_rank: usize,
    pub duration_ref: f64,
    /// Exponent `p` of the duration noise factor `(t_ref/t)^p`.
    pub duration_exponent: f64,
    /// Standard deviation of an optional per-speaker shift shared by all of
    /// the speaker's samples (0 disables it).
    pub speaker_shift_scale: f64,
    pub domains: Vec<DomainProfile>,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        let mut domains = vec![
            DomainProfile::new("dom_a", 150),
            DomainProfile::new("dom_b", 150),
            DomainProfile::new("dom_c", 150),
        ];
        domains[0].noise_scale = 0.8;
        domains[2].noise_scale = 1.3;
        Self {
            dim: 40,
            between_scale: 4.0,
            between_decay: 0.93,
            within_scale: 1.0,
            session_scale: 0.0,
            sigma_dom: 1.0,
            condition_rank: 0,
            duration_ref: 30.0,
            duration_exponent: 0.5,
            speaker_shift_scale: 0.0,
            domains,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.dim == 0 {
            return bad("dimension must be positive".into());
        }
        if self.domains.is_empty() {
            return bad("at least one domain is required".into());
        }
        for (name, v) in [
            ("between_scale", self.between_scale),
            ("between_decay", self.between_decay),
            ("within_scale", self.within_scale),
            ("duration_ref", self.duration_ref),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [
            ("session_scale", self.session_scale),
            ("sigma_dom", self.sigma_dom),
            ("speaker_shift_scale", self.speaker_shift_scale),
            ("duration_exponent", self.duration_exponent),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be non-negative, got {v}"));
            }
        }
        if self.condition_rank > self.dim {
            return bad(format!("condition rank {} exceeds dimension {}", self.condition_rank, self.dim));
        }
        let mut names = std::collections::BTreeSet::new();
        for d in &self.domains {
            if !names.insert(d.name.as_str()) {
                return bad(format!("duplicate domain '{}'", d.name));
            }
            if d.n_speakers == 0 || d.sessions_per_speaker == 0 || d.samples_per_session == 0 {
                return bad(format!("domain '{}' needs positive counts", d.name));
            }
            if !(d.noise_scale > 0.0 && d.noise_scale.is_finite()) {
                return bad(format!("domain '{}' noise scale must be positive", d.name));
            }
            let (lo, hi) = d.duration_range;
            if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
                return bad(format!("domain '{}' has invalid duration range ({lo}, {hi})", d.name));
            }
            if let Some(s) = &d.mean_shift {
                if s.len() != self.dim {
                    return bad(format!("domain '{}' shift has dimension {}", d.name, s.len()));
                }
            }
        }
        Ok(())
    }
}

/// Latent variables and parameters behind a synthetic corpus.
#[derive(Debug, Clone)]
pub struct SynthTruth {
    pub spec: SynthSpec,
    /// Base model: speaker mean `μ`, precisions `B` and `W`.
    pub model: PldaModel,
    pub between_cov: Mat,
    pub within_cov: Mat,
    pub domain_shifts: BTreeMap<String, Vector>,
    pub speaker_means: BTreeMap<String, Vector>,
    pub session_offsets: BTreeMap<String, Vector>,
    within_chol: Mat,
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub table: EmbeddingTable,
    pub meta: Metadata,
    pub truth: SynthTruth,
}

fn randn_vec(rng: &mut ChaCha8Rng, n: usize) -> Vector {
    Vector::from_fn(n, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        z
    })
}

fn random_orthogonal(rng: &mut ChaCha8Rng, n: usize) -> Mat {
    let a = Mat::from_fn(n, n, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        z
    });
    let qr = a.qr();
    let mut q = qr.q();
    let r = qr.r();
    for k in 0..n {
        if r[(k, k)] < 0.0 {
            q.column_mut(k).neg_mut();
        }
    }
    q
}

fn log_uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi == lo {
        return lo;
    }
    let u: f64 = rng.random();
    (lo.ln() + u * (hi.ln() - lo.ln())).exp()
}

impl SynthTruth {
    fn domain(&self, name: &str) -> &DomainProfile {
        self.spec
            .domains
            .iter()
            .find(|d| d.name == name)
            .expect("domain of a generated sample")
    }

    /// Standard-deviation multiplier on the within noise of a sample.
    pub fn noise_factor(&self, domain: &str, duration: f64) -> f64 {
        let d = self.domain(domain);
        d.noise_scale * (self.spec.duration_ref / duration).powf(self.spec.duration_exponent)
    }

    fn draw_sample(&self, rng: &mut ChaCha8Rng, s: &SampleMeta) -> Vector {
        let y = &self.speaker_means[&s.speaker_id];
        let shift = &self.domain_shifts[&s.domain_id];
        let ses = &self.session_offsets[&session_key(s)];
        let eps = &self.within_chol * randn_vec(rng, self.spec.dim);
        y + shift + ses + eps * self.noise_factor(&s.domain_id, s.duration_s)
    }

    /// Exact LLRs of trials between rows of `x` described by `meta`, given
    /// the generating parameters (domain shifts, per-sample noise levels).
    /// Per-speaker shifts, when enabled, count as extra speaker variance.
    pub fn oracle_llrs(&self, x: &Mat, meta: &[SampleMeta], trials: &[IndexedTrial]) -> Result<Vec<f64>> {
        let dim = self.spec.dim;
        let mut bc = self.between_cov.clone();
        for i in 0..dim {
            bc[(i, i)] += self.spec.speaker_shift_scale.powi(2);
        }
        // Simultaneous diagonalization: T W⁻¹ Tᵀ = I, T Bc Tᵀ = diag(φ).
        let l_inv = self
            .within_chol
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::NotPositiveDefinite("within covariance".into()))?;
        let (phi, v) = sym_eigen_desc(&symmetrize(&(&l_inv * &bc * l_inv.transpose())));
        let t = v.transpose() * l_inv;
        let n = x.nrows();
        let mut centered = Mat::zeros(n, dim);
        let mut kappa = vec![0.0; n];
        for i in 0..n {
            let s = &meta[i];
            let mean = &self.model.mu + &self.domain_shifts[&s.domain_id];
            let r = &t * (x.row(i).transpose() - mean);
            centered.row_mut(i).copy_from(&r.transpose());
            kappa[i] = self.noise_factor(&s.domain_id, s.duration_s).powi(2) + self.spec.session_scale;
        }
        Ok(trials
            .iter()
            .map(|tr| {
                let (k1, k2) = (kappa[tr.enroll], kappa[tr.test]);
                let mut llr = 0.0;
                for k in 0..dim {
                    let f = phi[k];
                    let a = centered[(tr.enroll, k)];
                    let b = centered[(tr.test, k)];
                    let (c1, c2) = (f + k1, f + k2);
                    let det = c1 * c2 - f * f;
                    let tgt = ((c2 * a * a - 2.0 * f * a * b + c1 * b * b) / det) + det.ln();
                    let imp = a * a / c1 + b * b / c2 + c1.ln() + c2.ln();
                    llr += 0.5 * (imp - tgt);
                }
                llr
            })
            .collect())
    }
}

fn session_key(s: &SampleMeta) -> String {
    format!("{}\u{1f}{}", s.speaker_id, s.session_id)
}

/// Draws a corpus. Speaker, session and sample ids are derived from the
/// domain names; every speaker belongs to a single domain.
pub fn generate(spec: &SynthSpec) -> Result<SynthCorpus> {
    spec.validate()?;
    let dim = spec.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let qb = random_orthogonal(&mut rng, dim);
    let bvals = Vector::from_fn(dim, |k, _| spec.between_scale * spec.between_decay.powi(k as i32));
    let between_cov = symmetrize(&(&qb * Mat::from_diagonal(&bvals) * qb.transpose()));
    let qw = random_orthogonal(&mut rng, dim);
    let wvals = Vector::from_fn(dim, |_, _| spec.within_scale * (0.5 + rng.random::<f64>()));
    let within_cov = symmetrize(&(&qw * Mat::from_diagonal(&wvals) * qw.transpose()));
    let mu = randn_vec(&mut rng, dim) * 0.5;
    let model = PldaModel {
        mu: mu.clone(),
        b: symmetrize(&inv_spd(&between_cov, "between covariance")?),
        w: symmetrize(&inv_spd(&within_cov, "within covariance")?),
    };
    let within_chol = cholesky(&within_cov, "within covariance")?.l();
    let between_chol = cholesky(&between_cov, "between covariance")?.l();

    let rank = if spec.condition_rank == 0 { dim } else { spec.condition_rank };
    let cond_basis = random_orthogonal(&mut rng, dim).columns(0, rank).into_owned();
    let mut domain_shifts = BTreeMap::new();
    for d in &spec.domains {
        let shift = match &d.mean_shift {
            Some(v) => Vector::from_column_slice(v),
            None => &cond_basis * randn_vec(&mut rng, rank) * spec.sigma_dom,
        };
        domain_shifts.insert(d.name.clone(), shift);
    }

    let ses_chol = &within_chol * spec.session_scale.sqrt();
    let mut speaker_means = BTreeMap::new();
    let mut session_offsets = BTreeMap::new();
    let mut samples = Vec::new();
    for d in &spec.domains {
        for s in 0..d.n_speakers {
            let spk = format!("{}-spk{s:04}", d.name);
            let mut y = &mu + &between_chol * randn_vec(&mut rng, dim);
            if spec.speaker_shift_scale > 0.0 {
                y += randn_vec(&mut rng, dim) * spec.speaker_shift_scale;
            }
            speaker_means.insert(spk.clone(), y);
            for e in 0..d.sessions_per_speaker {
                let ses = format!("{spk}-ses{e:02}");
                let meta = SampleMeta {
                    sample_id: String::new(),
                    speaker_id: spk.clone(),
                    session_id: ses.clone(),
                    domain_id: d.name.clone(),
                    duration_s: 1.0,
                };
                session_offsets.insert(session_key(&meta), &ses_chol * randn_vec(&mut rng, dim));
                for k in 0..d.samples_per_session {
                    samples.push(SampleMeta {
                        sample_id: format!("{ses}-utt{k:02}"),
                        duration_s: log_uniform(&mut rng, d.duration_range),
                        ..meta.clone()
                    });
                }
            }
        }
    }
    let truth = SynthTruth {
        spec: spec.clone(),
        model,
        between_cov,
        within_cov,
        domain_shifts,
        speaker_means,
        session_offsets,
        within_chol,
    };
    let mut x = Mat::zeros(samples.len(), dim);
    for (i, s) in samples.iter().enumerate() {
        let v = truth.draw_sample(&mut rng, s);
        x.row_mut(i).copy_from(&v.transpose());
    }
    let ids = samples.iter().map(|s| s.sample_id.clone()).collect();
    Ok(SynthCorpus {
        table: EmbeddingTable::new(ids, x)?,
        meta: Metadata::new(samples)?,
        truth,
    })
}

/// Replaces every sample by `per_sample` chunks with log-uniform durations in
/// `range`, re-drawing the noise for each chunk's duration. Chunks keep the
/// speaker, session and domain of their parent.
pub fn chunk(corpus: &SynthCorpus, range: (f64, f64), per_sample: usize, seed: u64) -> Result<SynthCorpus> {
    let (lo, hi) = range;
    if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
        return Err(Error::InvalidArgument(format!("invalid chunk range ({lo}, {hi})")));
    }
    if per_sample == 0 {
        return Err(Error::InvalidArgument("per_sample must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(corpus.meta.len() * per_sample);
    for s in corpus.meta.samples() {
        for k in 0..per_sample {
            samples.push(SampleMeta {
                sample_id: format!("{}-c{k:02}", s.sample_id),
                duration_s: log_uniform(&mut rng, range),
                ..s.clone()
            });
        }
    }
    let mut x = Mat::zeros(samples.len(), corpus.truth.spec.dim);
    for (i, s) in samples.iter().enumerate() {
        let v = corpus.truth.draw_sample(&mut rng, s);
        x.row_mut(i).copy_from(&v.transpose());
    }
    let ids = samples.iter().map(|s| s.sample_id.clone()).collect();
    Ok(SynthCorpus {
        table: EmbeddingTable::new(ids, x)?,
        meta: Metadata::new(samples)?,
        truth: corpus.truth.clone(),
    })
}

/// The sub-corpus of the samples accepted by `keep`, in their original order.
pub fn select_samples(corpus: &SynthCorpus, keep: impl Fn(&SampleMeta) -> bool) -> Result<SynthCorpus> {
    let samples: Vec<SampleMeta> = corpus.meta.samples().iter().filter(|s| keep(s)).cloned().collect();
    if samples.is_empty() {
        return Err(Error::InvalidArgument("selection is empty".into()));
    }
    let ids: Vec<String> = samples.iter().map(|s| s.sample_id.clone()).collect();
    let x = corpus.table.select(&ids)?;
    Ok(SynthCorpus {
        table: EmbeddingTable::new(ids, x)?,
        meta: Metadata::new(samples)?,
        truth: corpus.truth.clone(),
    })
}

/// The sub-corpus of the given domains.
pub fn select_domains(corpus: &SynthCorpus, domains: &[&str]) -> Result<SynthCorpus> {
    select_samples(corpus, |s| domains.contains(&s.domain_id.as_str()))
}

/// Index of a generated speaker id (`<domain>-spkNNNN`).
pub fn speaker_index(speaker_id: &str) -> Option<usize> {
    speaker_id.rsplit_once("-spk")?.1.parse().ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_trials, TrialPolicy};
    use crate::plda::{oracle_llr, to_score_form};

    fn small_spec() -> SynthSpec {
        let mut s = SynthSpec::default();
        s.dim = 6;
        for d in s.domains.iter_mut() {
            d.n_speakers = 10;
        }
        s
    }

    #[test]
    fn fixed_seed_is_bit_identical() {
        let a = generate(&small_spec()).unwrap();
        let b = generate(&small_spec()).unwrap();
        assert_eq!(a.table, b.table);
        assert_eq!(a.meta, b.meta);
    }

    #[test]
    fn counts_and_ranges() {
        let spec = small_spec();
        let c = generate(&spec).unwrap();
        assert_eq!(c.meta.len(), 3 * 10 * 3 * 2);
        for s in c.meta.samples() {
            assert!(s.duration_s >= 8.0 && s.duration_s <= 240.0);
        }
    }

    #[test]
    fn degenerate_ranges_give_exact_durations() {
        let c = generate(&small_spec()).unwrap();
        let ch = chunk(&c, (12.0, 12.0), 2, 1).unwrap();
        assert!(ch.meta.samples().iter().all(|s| s.duration_s == 12.0));
        assert_eq!(ch.meta.len(), 2 * c.meta.len());
    }

    #[test]
    fn chunks_of_one_parent_never_form_valid_targets() {
        let c = generate(&small_spec()).unwrap();
        let ch = chunk(&c, (4.0, 16.0), 3, 2).unwrap();
        let trials = build_trials(&ch.meta, TrialPolicy::AllPairs).unwrap();
        for (k, (a, b)) in trials.pairs.iter().enumerate() {
            let pa = a.rsplit_once("-c").unwrap().0;
            let pb = b.rsplit_once("-c").unwrap().0;
            if pa == pb {
                assert!(!trials.mask[k].is_valid());
            }
        }
    }

    #[test]
    fn oracle_matches_plain_plda_without_condition_effects() {
        let mut spec = small_spec();
        spec.domains.truncate(1);
        spec.domains[0].mean_shift = Some(vec![0.0; 6]);
        spec.domains[0].noise_scale = 1.0;
        spec.duration_exponent = 0.0;
        let c = generate(&spec).unwrap();
        let trials: Vec<IndexedTrial> = (0..40)
            .map(|k| IndexedTrial {
                enroll: k,
                test: (k * 7 + 3) % c.meta.len(),
                target: false,
            })
            .collect();
        let got = c.truth.oracle_llrs(c.table.matrix(), c.meta.samples(), &trials).unwrap();
        let form = to_score_form(&c.truth.model).unwrap();
        for (t, g) in trials.iter().zip(&got) {
            let x1 = c.table.matrix().row(t.enroll).transpose();
            let x2 = c.table.matrix().row(t.test).transpose();
            let dense = oracle_llr(&c.truth.model, &x1, &x2).unwrap();
            assert!((dense - g).abs() < 1e-8, "{dense} {g}");
            assert!((form.score(&x1, &x2) - g).abs() < 1e-8);
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = small_spec();
        s.domains[0].noise_scale = 0.0;
        assert!(generate(&s).is_err());
        let mut s = small_spec();
        s.domains[1].name = s.domains[0].name.clone();
        assert!(generate(&s).is_err());
    }
}
