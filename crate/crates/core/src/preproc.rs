//! LDA projection, mean shift and length normalization front end.

use std::collections::HashMap;

use crate::data::{EmbeddingTable, Metadata};
use crate::error::{Error, Result};
use crate::linalg::{condition_number, sym_eigen_desc, symmetrize, Mat, Vector};

/// Affine projection followed by L2 length normalization: `w = Norm(A x + m)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PreprocParams {
    /// N×D projection, rows scaled to unit training variance.
    pub a: Mat,
    /// Shift added after projection (the negated projected training mean).
    pub m: Vector,
}

impl PreprocParams {
    pub fn identity(dim: usize) -> Self {
        Self {
            a: Mat::identity(dim, dim),
            m: Vector::zeros(dim),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.a.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.a.nrows()
    }

    /// Projects without normalizing: `A x + m`.
    pub fn project(&self, x: &Vector) -> Vector {
        &self.a * x + &self.m
    }

    /// Applies the front end to the rows of `x`.
    pub fn apply_rows(&self, x: &Mat) -> Result<Mat> {
        if x.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch(format!(
                "embeddings have dimension {}, preprocessing expects {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        let mut u = x * self.a.transpose();
        for mut row in u.row_iter_mut() {
            row += self.m.transpose();
            let n = row.norm();
            if n == 0.0 || !n.is_finite() {
                return Err(Error::DegenerateEmbedding);
            }
            row /= n;
        }
        Ok(u)
    }
}

/// `w = Norm(A x + m)` for a single embedding.
pub fn apply_preproc(params: &PreprocParams, x: &Vector) -> Result<Vector> {
    if x.len() != params.input_dim() {
        return Err(Error::DimensionMismatch(format!(
            "embedding has dimension {}, preprocessing expects {}",
            x.len(),
            params.input_dim()
        )));
    }
    let u = params.project(x);
    let n = u.norm();
    if n == 0.0 || !n.is_finite() {
        return Err(Error::DegenerateEmbedding);
    }
    Ok(u / n)
}

/// Per-speaker weights `c_s`.
pub type SpeakerWeights = HashMap<String, f64>;

pub fn flat_weights(meta: &Metadata) -> SpeakerWeights {
    meta.samples()
        .iter()
        .map(|s| (s.speaker_id.clone(), 1.0))
        .collect()
}

/// Each speaker weighted by the inverse number of speakers in its domain.
pub fn balanced_weights(meta: &Metadata) -> SpeakerWeights {
    let mut speakers_per_domain: HashMap<&str, std::collections::BTreeSet<&str>> = HashMap::new();
    for s in meta.samples() {
        speakers_per_domain
            .entry(s.domain_id.as_str())
            .or_default()
            .insert(s.speaker_id.as_str());
    }
    meta.samples()
        .iter()
        .map(|s| {
            let n = speakers_per_domain[s.domain_id.as_str()].len() as f64;
            (s.speaker_id.clone(), 1.0 / n)
        })
        .collect()
}

/// Speaker-grouped rows with their weights, in sorted speaker order.
#[derive(Debug, Clone)]
pub(crate) struct SpeakerGroups {
    pub rows: Vec<Vec<usize>>,
    pub weights: Vec<f64>,
}

impl SpeakerGroups {
    pub fn from_meta(meta: &Metadata, weights: &SpeakerWeights) -> Result<Self> {
        let mut rows = Vec::new();
        let mut w = Vec::new();
        for (spk, idx) in meta.by_speaker() {
            let c = *weights.get(spk).ok_or_else(|| {
                Error::InvalidArgument(format!("no weight for speaker '{spk}'"))
            })?;
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "weight for speaker '{spk}' must be positive, got {c}"
                )));
            }
            rows.push(idx);
            w.push(c);
        }
        Ok(Self { rows, weights: w })
    }

    pub fn total_weight(&self) -> f64 {
        self.rows
            .iter()
            .zip(&self.weights)
            .map(|(r, c)| c * r.len() as f64)
            .sum()
    }
}

/// Speaker-weighted global mean, between-class and within-class scatter,
/// all normalized by `Σ_s c_s N_s`.
pub(crate) struct WeightedScatter {
    pub mean: Vector,
    pub between: Mat,
    pub within: Mat,
}

pub(crate) fn weighted_scatter(x: &Mat, groups: &SpeakerGroups) -> WeightedScatter {
    let dim = x.ncols();
    let total = groups.total_weight();
    let means: Vec<Vector> = groups
        .rows
        .iter()
        .map(|rows| {
            let mut m = Vector::zeros(dim);
            for &i in rows {
                m += x.row(i).transpose();
            }
            m / rows.len() as f64
        })
        .collect();
    let mut mean = Vector::zeros(dim);
    for ((rows, c), m) in groups.rows.iter().zip(&groups.weights).zip(&means) {
        mean += m * (c * rows.len() as f64);
    }
    mean /= total;

    let mut between = Mat::zeros(dim, dim);
    let mut within = Mat::zeros(dim, dim);
    for ((rows, c), m) in groups.rows.iter().zip(&groups.weights).zip(&means) {
        let d = m - &mean;
        between.ger(c * rows.len() as f64, &d, &d, 1.0);
        let centered = Mat::from_fn(rows.len(), dim, |r, k| x[(rows[r], k)] - m[k]);
        within.gemm_tr(*c, &centered, &centered, 1.0);
    }
    WeightedScatter {
        mean,
        between: symmetrize(&(between / total)),
        within: symmetrize(&(within / total)),
    }
}

/// The complete (D-direction) LDA transform, directions sorted by
/// discriminative power, each row scaled to unit weighted training variance.
#[derive(Debug, Clone)]
pub struct FullLda {
    pub directions: Mat,
    pub eigenvalues: Vector,
    pub mean: Vector,
    pub ridge: f64,
}

impl FullLda {
    fn params_for(&self, rows: std::ops::Range<usize>) -> PreprocParams {
        let a = self.directions.rows(rows.start, rows.len()).into_owned();
        let m = -(&a * &self.mean);
        PreprocParams { a, m }
    }

    /// First `n` directions.
    pub fn leading(&self, n: usize) -> PreprocParams {
        self.params_for(0..n)
    }

    /// Last `m` directions, the ones least useful for speaker discrimination.
    pub fn trailing(&self, m: usize) -> PreprocParams {
        let d = self.directions.nrows();
        self.params_for(d - m..d)
    }
}

/// Default relative ridge, times `trace(S_w)/D`.
pub const DEFAULT_RIDGE_REL: f64 = 1e-6;
const MAX_WITHIN_CONDITION: f64 = 1e10;

pub fn fit_full_lda(
    x: &Mat,
    meta: &Metadata,
    weights: &SpeakerWeights,
    ridge_rel: f64,
) -> Result<FullLda> {
    if x.nrows() != meta.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} embedding rows for {} metadata entries",
            x.nrows(),
            meta.len()
        )));
    }
    let groups = SpeakerGroups::from_meta(meta, weights)?;
    if groups.rows.len() < 2 {
        return Err(Error::InsufficientSpeakers(groups.rows.len()));
    }
    let dim = x.ncols();
    let sc = weighted_scatter(x, &groups);
    let trace = sc.within.trace();
    let mut within = sc.within.clone();
    let mut ridge = 0.0;
    if condition_number(&within) > MAX_WITHIN_CONDITION {
        ridge = ridge_rel * trace / dim as f64;
        if !(ridge > 0.0) {
            return Err(Error::SingularScatter {
                suggested_ridge: DEFAULT_RIDGE_REL.max(ridge_rel),
            });
        }
        for i in 0..dim {
            within[(i, i)] += ridge;
        }
    }
    let (wvals, wvecs) = sym_eigen_desc(&within);
    if wvals[dim - 1] <= 0.0 || !wvals[dim - 1].is_finite() {
        return Err(Error::SingularScatter {
            suggested_ridge: (1e-6 * trace / dim as f64).max(1e-12),
        });
    }
    // Whitening transform T with T S_w Tᵀ = I.
    let whiten = Mat::from_diagonal(&wvals.map(|v| 1.0 / v.sqrt())) * wvecs.transpose();
    let bw = symmetrize(&(&whiten * &sc.between * whiten.transpose()));
    let (evals, evecs) = sym_eigen_desc(&bw);
    let mut directions = evecs.transpose() * &whiten;

    // Row-scale to unit weighted variance around the weighted mean.
    let total = groups.total_weight();
    let centered = Mat::from_fn(x.nrows(), dim, |r, k| x[(r, k)] - sc.mean[k]);
    let proj = &centered * directions.transpose();
    let mut sample_weight = vec![0.0; x.nrows()];
    for (rows, c) in groups.rows.iter().zip(&groups.weights) {
        for &i in rows {
            sample_weight[i] = *c;
        }
    }
    for k in 0..dim {
        let var: f64 = proj
            .column(k)
            .iter()
            .zip(&sample_weight)
            .map(|(p, c)| c * p * p)
            .sum::<f64>()
            / total;
        if var > 0.0 && var.is_finite() {
            let s = 1.0 / var.sqrt();
            directions.row_mut(k).scale_mut(s);
        }
    }
    // Re-apply the sign convention after scaling (scaling is positive, so only
    // the eigenvector convention matters): first significant entry positive.
    for k in 0..dim {
        let mut row = directions.row_mut(k);
        let scale = row.amax();
        if let Some(first) = row.iter().find(|v| v.abs() > 1e-8 * scale).copied() {
            if first < 0.0 {
                row.neg_mut();
            }
        }
    }
    Ok(FullLda {
        directions,
        eigenvalues: evals,
        mean: sc.mean,
        ridge,
    })
}

/// Fits the N-dimensional LDA front end on the samples listed in `meta`.
pub fn fit_lda(
    table: &EmbeddingTable,
    meta: &Metadata,
    weights: &SpeakerWeights,
    n: usize,
) -> Result<PreprocParams> {
    let ids: Vec<String> = meta.samples().iter().map(|s| s.sample_id.clone()).collect();
    let x = table.select(&ids)?;
    let n_speakers = meta.by_speaker().len();
    if n_speakers < 2 {
        return Err(Error::InsufficientSpeakers(n_speakers));
    }
    let max_n = table.dim().min(n_speakers - 1);
    if n == 0 || n > max_n {
        return Err(Error::InvalidArgument(format!(
            "LDA dimension {n} must be in 1..={max_n} (D = {}, {} speakers)",
            table.dim(),
            n_speakers
        )));
    }
    Ok(fit_full_lda(&x, meta, weights, DEFAULT_RIDGE_REL)?.leading(n))
}
