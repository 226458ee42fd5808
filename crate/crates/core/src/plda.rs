//! Two-covariance PLDA: weighted initialization, weighted EM, conversion to the
//! second-order score form, and pairwise scoring.

use log::warn;

use crate::data::Metadata;
use crate::error::{Error, Result};
use crate::linalg::{inv_spd, logdet_spd, spd_repair, symmetrize, Mat, Vector};
use crate::preproc::{weighted_scatter, SpeakerGroups, SpeakerWeights};

/// `y ~ N(mu, B⁻¹)`, `w | y ~ N(y, W⁻¹)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PldaModel {
    pub mu: Vector,
    /// Between-speaker precision.
    pub b: Mat,
    /// Within-speaker precision.
    pub w: Mat,
}

impl PldaModel {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.dim();
        if self.b.shape() != (n, n) || self.w.shape() != (n, n) {
            return Err(Error::DimensionMismatch("PLDA matrices must be N×N".into()));
        }
        if !self.mu.iter().chain(self.b.iter()).chain(self.w.iter()).all(|v| v.is_finite()) {
            return Err(Error::NotPositiveDefinite("PLDA model has non-finite entries".into()));
        }
        crate::linalg::cholesky(&self.b, "between-speaker precision B")?;
        crate::linalg::cholesky(&self.w, "within-speaker precision W")?;
        Ok(())
    }
}

/// Second-order polynomial scoring function
/// `s = 2 w1ᵀΛw2 + w1ᵀΓw1 + w2ᵀΓw2 + (w1 + w2)ᵀc + k`.
///
/// `lambda` and `gamma` are stored unconstrained; scoring uses their symmetric
/// parts.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreForm {
    pub lambda: Mat,
    pub gamma: Mat,
    pub c: Vector,
    pub k: f64,
}

/// Default relative eigenvalue floor for SPD repair.
pub const SPD_FLOOR: f64 = 1e-10;

struct SpeakerStat {
    n: usize,
    sum: Vector,
    weight: f64,
}

/// Sufficient statistics of the weighted two-covariance model.
pub struct PldaTrainer {
    speakers: Vec<SpeakerStat>,
    second_moment: Mat,
    total_samples: f64,
    total_speakers: f64,
    dim: usize,
    groups: SpeakerGroups,
    data: Mat,
}

impl PldaTrainer {
    /// Speakers with fewer than two samples are dropped with a warning.
    pub fn new(w: &Mat, meta: &Metadata, weights: &SpeakerWeights) -> Result<Self> {
        if w.nrows() != meta.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} vectors for {} metadata entries",
                w.nrows(),
                meta.len()
            )));
        }
        let all = SpeakerGroups::from_meta(meta, weights)?;
        let mut groups = SpeakerGroups {
            rows: Vec::new(),
            weights: Vec::new(),
        };
        let mut dropped = 0;
        for (rows, c) in all.rows.into_iter().zip(all.weights) {
            if rows.len() < 2 {
                dropped += 1;
            } else {
                groups.rows.push(rows);
                groups.weights.push(c);
            }
        }
        if dropped > 0 {
            warn!("PLDA: dropped {dropped} speakers with fewer than 2 samples");
        }
        if groups.rows.len() < 2 {
            return Err(Error::InsufficientSpeakers(groups.rows.len()));
        }
        let dim = w.ncols();
        let mut second_moment = Mat::zeros(dim, dim);
        let mut speakers = Vec::with_capacity(groups.rows.len());
        for (rows, &c) in groups.rows.iter().zip(&groups.weights) {
            let sub = w.select_rows(rows.iter());
            second_moment.gemm_tr(c, &sub, &sub, 1.0);
            let sum = sub.row_sum().transpose();
            speakers.push(SpeakerStat {
                n: rows.len(),
                sum,
                weight: c,
            });
        }
        Ok(Self {
            total_samples: groups.total_weight(),
            total_speakers: groups.weights.iter().sum(),
            speakers,
            second_moment: symmetrize(&second_moment),
            dim,
            groups,
            data: w.clone(),
        })
    }

    /// Sample-statistics starting point (weighted global mean, inverse
    /// between- and within-speaker covariances).
    pub fn init(&self) -> Result<PldaModel> {
        let sc = weighted_scatter(&self.data, &self.groups);
        let between = spd_repair(&sc.between, SPD_FLOOR);
        let within = spd_repair(&sc.within, SPD_FLOOR);
        let model = PldaModel {
            mu: sc.mean,
            b: inv_spd(&between, "between-speaker covariance")?,
            w: inv_spd(&within, "within-speaker covariance")?,
        };
        model.validate()?;
        Ok(model)
    }

    /// Posterior precision `B + nW` inverse and log-determinant, cached per n.
    fn posterior_cache(&self, model: &PldaModel) -> Result<Vec<Option<(Mat, f64)>>> {
        let max_n = self.speakers.iter().map(|s| s.n).max().unwrap_or(0);
        let mut cache: Vec<Option<(Mat, f64)>> = vec![None; max_n + 1];
        for s in &self.speakers {
            if cache[s.n].is_none() {
                let l = &model.b + &model.w * s.n as f64;
                let logdet = logdet_spd(&l, "posterior precision")?;
                cache[s.n] = Some((inv_spd(&l, "posterior precision")?, logdet));
            }
        }
        Ok(cache)
    }

    /// Weighted marginal log-likelihood `Σ_s c_s log p(W_s)`.
    pub fn log_likelihood(&self, model: &PldaModel) -> Result<f64> {
        Ok(self.e_step(model)?.0)
    }

    fn e_step(&self, model: &PldaModel) -> Result<(f64, Mat, Mat, Vector, Mat)> {
        let dim = self.dim;
        let cache = self.posterior_cache(model)?;
        let logdet_b = logdet_spd(&model.b, "B")?;
        let logdet_w = logdet_spd(&model.w, "W")?;
        let b_mu = &model.b * &model.mu;
        let mu_b_mu = model.mu.dot(&b_mu);
        let ln2pi = (2.0 * std::f64::consts::PI).ln();

        let mut ll = -0.5 * model.w.component_mul(&self.second_moment).sum();
        let mut r = Mat::zeros(dim, dim); // Σ c n E[yyᵀ]
        let mut p = Mat::zeros(dim, dim); // Σ c E[yyᵀ]
        let mut t = Mat::zeros(dim, dim); // Σ c ŷ fᵀ
        let mut e = Vector::zeros(dim); // Σ c ŷ
        for s in &self.speakers {
            let (l_inv, logdet_l) = cache[s.n].as_ref().expect("cached");
            let rhs = &b_mu + &model.w * &s.sum;
            let y_hat = l_inv * &rhs;
            let n = s.n as f64;
            ll += s.weight
                * (-0.5 * n * dim as f64 * ln2pi + 0.5 * logdet_b + 0.5 * n * logdet_w
                    - 0.5 * logdet_l
                    - 0.5 * mu_b_mu
                    + 0.5 * rhs.dot(&y_hat));
            let mut second = l_inv.clone();
            second.ger(1.0, &y_hat, &y_hat, 1.0);
            r += &second * (s.weight * n);
            p += &second * s.weight;
            t.ger(s.weight, &y_hat, &s.sum, 1.0);
            e += &y_hat * s.weight;
        }
        Ok((ll, r, p, e, t))
    }

    /// One EM iteration. Returns the updated model and the weighted
    /// log-likelihood of the *input* model.
    pub fn step(&self, model: &PldaModel, iteration: usize) -> Result<(PldaModel, f64)> {
        let (ll, r, p, e, t) = self.e_step(model)?;
        let mu = e / self.total_speakers;
        let mut between = p / self.total_speakers;
        between.ger(-1.0, &mu, &mu, 1.0);
        let within = (&self.second_moment - &t - t.transpose() + r) / self.total_samples;
        let collapse = |what: &str| Error::CovarianceCollapse {
            iteration,
            detail: format!("{what} covariance is not positive definite"),
        };
        let b = inv_spd(&symmetrize(&between), "between").map_err(|_| collapse("between"))?;
        let w = inv_spd(&symmetrize(&within), "within").map_err(|_| collapse("within"))?;
        let next = PldaModel { mu, b, w };
        next.validate().map_err(|_| collapse("updated"))?;
        Ok((next, ll))
    }
}

pub fn init_plda(w: &Mat, meta: &Metadata, weights: &SpeakerWeights) -> Result<PldaModel> {
    PldaTrainer::new(w, meta, weights)?.init()
}

/// One weighted EM step; the returned log-likelihood belongs to `model`.
pub fn em_step(
    model: &PldaModel,
    w: &Mat,
    meta: &Metadata,
    weights: &SpeakerWeights,
) -> Result<(PldaModel, f64)> {
    PldaTrainer::new(w, meta, weights)?.step(model, 0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmConfig {
    pub max_iters: usize,
    pub rel_tol: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            max_iters: 20,
            rel_tol: 1e-7,
        }
    }
}

/// Initialization followed by EM. Returns the model and the log-likelihood
/// trace (one entry per evaluated model).
pub fn fit_plda(
    w: &Mat,
    meta: &Metadata,
    weights: &SpeakerWeights,
    cfg: EmConfig,
) -> Result<(PldaModel, Vec<f64>)> {
    let trainer = PldaTrainer::new(w, meta, weights)?;
    let mut model = trainer.init()?;
    let mut trace = Vec::with_capacity(cfg.max_iters + 1);
    for it in 0..cfg.max_iters {
        let (next, ll) = trainer.step(&model, it)?;
        let converged = trace
            .last()
            .is_some_and(|prev: &f64| ((ll - prev) / prev.abs().max(1e-300)).abs() < cfg.rel_tol);
        trace.push(ll);
        model = next;
        if converged {
            break;
        }
    }
    trace.push(trainer.log_likelihood(&model)?);
    Ok((model, trace))
}

/// Closed-form score parameters of a PLDA model.
pub fn to_score_form(model: &PldaModel) -> Result<ScoreForm> {
    model.validate()?;
    let lt = inv_spd(&(&model.b + &model.w * 2.0), "B + 2W")?;
    let gt = inv_spd(&(&model.b + &model.w), "B + W")?;
    let w = &model.w;
    let diff = &lt - &gt;
    let lambda = symmetrize(&(w.transpose() * &lt * w * 0.5));
    let gamma = symmetrize(&(w.transpose() * &diff * w * 0.5));
    let b_mu = &model.b * &model.mu;
    let c = w.transpose() * &diff * &b_mu;
    let k_tilde = -2.0 * logdet_spd(&gt, "(B + W)^-1")? - logdet_spd(&model.b, "B")?
        + logdet_spd(&lt, "(B + 2W)^-1")?
        + model.mu.dot(&b_mu);
    let k = 0.5 * k_tilde + 0.5 * b_mu.dot(&((&lt - &gt * 2.0) * &b_mu));
    Ok(ScoreForm {
        lambda,
        gamma,
        c,
        k,
    })
}

impl ScoreForm {
    pub fn dim(&self) -> usize {
        self.c.len()
    }

    pub fn lambda_sym(&self) -> Mat {
        symmetrize(&self.lambda)
    }

    pub fn gamma_sym(&self) -> Mat {
        symmetrize(&self.gamma)
    }

    /// Score of a single pair.
    pub fn score(&self, w1: &Vector, w2: &Vector) -> f64 {
        let l = self.lambda_sym();
        let g = self.gamma_sym();
        2.0 * w1.dot(&(&l * w2)) + w1.dot(&(&g * w1)) + w2.dot(&(&g * w2))
            + (w1 + w2).dot(&self.c)
            + self.k
    }

    /// Per-row `wᵀΓw + wᵀc`.
    pub(crate) fn self_terms(&self, w: &Mat, gamma: &Mat) -> Vector {
        let wg = w * gamma;
        let wc = w * &self.c;
        Vector::from_fn(w.nrows(), |i, _| w.row(i).dot(&wg.row(i)) + wc[i])
    }
}

pub const DEFAULT_SCORE_BLOCK: usize = 1024;

/// All-vs-all scores between rows of `w1` and rows of `w2`.
pub fn score_pairs(form: &ScoreForm, w1: &Mat, w2: &Mat) -> Result<Mat> {
    score_pairs_blocked(form, w1, w2, DEFAULT_SCORE_BLOCK)
}

pub fn score_pairs_blocked(form: &ScoreForm, w1: &Mat, w2: &Mat, block: usize) -> Result<Mat> {
    let n = form.dim();
    if w1.ncols() != n || w2.ncols() != n {
        return Err(Error::DimensionMismatch(format!(
            "score form has dimension {n}, inputs have {} and {}",
            w1.ncols(),
            w2.ncols()
        )));
    }
    let block = block.max(1);
    let lambda = form.lambda_sym();
    let gamma = form.gamma_sym();
    let q1 = form.self_terms(w1, &gamma);
    let q2 = form.self_terms(w2, &gamma);
    let mut out = Mat::zeros(w1.nrows(), w2.nrows());
    for r0 in (0..w1.nrows()).step_by(block) {
        let rn = block.min(w1.nrows() - r0);
        let left = w1.rows(r0, rn) * &lambda * 2.0;
        for c0 in (0..w2.nrows()).step_by(block) {
            let cn = block.min(w2.nrows() - c0);
            let cross = &left * w2.rows(c0, cn).transpose();
            for i in 0..rn {
                for j in 0..cn {
                    out[(r0 + i, c0 + j)] = cross[(i, j)] + q1[r0 + i] + q2[c0 + j] + form.k;
                }
            }
        }
    }
    Ok(out)
}

/// Direct evaluation of the same-speaker vs different-speaker log-likelihood
/// ratio from the joint 2N-dimensional Gaussians.
pub fn oracle_llr(model: &PldaModel, w1: &Vector, w2: &Vector) -> Result<f64> {
    let n = model.dim();
    let sb = inv_spd(&model.b, "B")?;
    let sw = inv_spd(&model.w, "W")?;
    let tot = &sb + &sw;
    let mut same = Mat::zeros(2 * n, 2 * n);
    let mut diff = Mat::zeros(2 * n, 2 * n);
    for (blk, off) in [(0, 0), (n, n)] {
        same.view_mut((blk, off), (n, n)).copy_from(&tot);
        diff.view_mut((blk, off), (n, n)).copy_from(&tot);
    }
    same.view_mut((0, n), (n, n)).copy_from(&sb);
    same.view_mut((n, 0), (n, n)).copy_from(&sb);
    let mut x = Vector::zeros(2 * n);
    x.rows_mut(0, n).copy_from(&(w1 - &model.mu));
    x.rows_mut(n, n).copy_from(&(w2 - &model.mu));
    let log_gauss = |cov: &Mat, what: &str| -> Result<f64> {
        let chol = crate::linalg::cholesky(cov, what)?;
        let sol = chol.solve(&x);
        let logdet = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        Ok(-0.5 * (logdet + x.dot(&sol)))
    };
    Ok(log_gauss(&same, "same-speaker joint covariance")?
        - log_gauss(&diff, "different-speaker joint covariance")?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SampleMeta;
    use crate::preproc::flat_weights;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    pub(crate) fn random_spd(n: usize, rng: &mut ChaCha8Rng, jitter: f64) -> Mat {
        let a = Mat::from_fn(n, n, |_, _| StandardNormal.sample(rng));
        symmetrize(&(&a * a.transpose() / n as f64 + Mat::identity(n, n) * jitter))
    }

    fn scalar_model() -> PldaModel {
        PldaModel {
            mu: Vector::zeros(1),
            b: Mat::identity(1, 1),
            w: Mat::identity(1, 1),
        }
    }

    #[test]
    fn scalar_score_form_by_hand() {
        let f = to_score_form(&scalar_model()).unwrap();
        assert!((f.lambda[(0, 0)] - 1.0 / 6.0).abs() < 1e-15);
        assert!((f.gamma[(0, 0)] + 1.0 / 12.0).abs() < 1e-15);
        assert_eq!(f.c[0], 0.0);
        let k = 0.5 * (2.0 * 2f64.ln() - 3f64.ln());
        assert!((f.k - k).abs() < 1e-15);
        assert!((f.k - 0.14384).abs() < 1e-5);
    }

    #[test]
    fn scalar_oracle_and_closed_form_agree() {
        let one = Vector::from_vec(vec![1.0]);
        let expected = 0.5 * (4.0f64 / 3.0).ln() + 1.0 / 6.0;
        let oracle = oracle_llr(&scalar_model(), &one, &one).unwrap();
        assert!((oracle - expected).abs() < 1e-12);
        assert!((oracle - 0.31051).abs() < 1e-5);
        let form = to_score_form(&scalar_model()).unwrap();
        let s = score_pairs(&form, &Mat::identity(1, 1), &Mat::identity(1, 1)).unwrap();
        assert!((s[(0, 0)] - oracle).abs() < 1e-10);
    }

    #[test]
    fn random_models_match_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for n in [1, 2, 4, 8] {
            for _ in 0..10 {
                let model = PldaModel {
                    mu: Vector::from_fn(n, |_, _| StandardNormal.sample(&mut rng)),
                    b: random_spd(n, &mut rng, 0.5),
                    w: random_spd(n, &mut rng, 0.5),
                };
                let form = to_score_form(&model).unwrap();
                assert!((&form.lambda - form.lambda.transpose()).amax() < 1e-10);
                assert!((&form.gamma - form.gamma.transpose()).amax() < 1e-10);
                let w1 = Mat::from_fn(5, n, |_, _| StandardNormal.sample(&mut rng));
                let w2 = Mat::from_fn(5, n, |_, _| StandardNormal.sample(&mut rng));
                let s = score_pairs_blocked(&form, &w1, &w2, 2).unwrap();
                for i in 0..5 {
                    for j in 0..5 {
                        let o = oracle_llr(
                            &model,
                            &w1.row(i).transpose(),
                            &w2.row(j).transpose(),
                        )
                        .unwrap();
                        assert!((s[(i, j)] - o).abs() < 1e-8, "n={n} {} vs {o}", s[(i, j)]);
                    }
                }
            }
        }
    }

    #[test]
    fn zero_mean_gives_zero_linear_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = PldaModel {
            mu: Vector::zeros(3),
            b: random_spd(3, &mut rng, 0.3),
            w: random_spd(3, &mut rng, 0.3),
        };
        assert!(to_score_form(&model).unwrap().c.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn scores_are_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let model = PldaModel {
            mu: Vector::from_fn(4, |_, _| StandardNormal.sample(&mut rng)),
            b: random_spd(4, &mut rng, 0.3),
            w: random_spd(4, &mut rng, 0.3),
        };
        let form = to_score_form(&model).unwrap();
        let w = Mat::from_fn(100, 4, |_, _| StandardNormal.sample(&mut rng));
        let s = score_pairs(&form, &w, &w).unwrap();
        assert!((&s - s.transpose()).amax() < 1e-12);
    }

    #[test]
    fn independence_limit_gives_zero_llr() {
        let model = PldaModel {
            mu: Vector::from_vec(vec![0.3, -0.1]),
            b: Mat::identity(2, 2) * 1e12,
            w: Mat::identity(2, 2),
        };
        let llr = oracle_llr(
            &model,
            &Vector::from_vec(vec![1.0, 2.0]),
            &Vector::from_vec(vec![-0.5, 0.7]),
        )
        .unwrap();
        assert!(llr.abs() < 1e-9, "{llr}");
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let form = to_score_form(&scalar_model()).unwrap();
        assert!(matches!(
            score_pairs(&form, &Mat::zeros(2, 2), &Mat::zeros(2, 1)),
            Err(Error::DimensionMismatch(_))
        ));
    }

    fn sample_meta(spk: usize, i: usize) -> SampleMeta {
        SampleMeta {
            sample_id: format!("{spk}_{i}"),
            speaker_id: format!("spk{spk:04}"),
            session_id: format!("{spk}_{i}"),
            domain_id: "d".into(),
            duration_s: 1.0,
        }
    }

    fn draw_corpus(
        model: &PldaModel,
        n_spk: usize,
        per_spk: usize,
        rng: &mut ChaCha8Rng,
    ) -> (Mat, Metadata) {
        let n = model.dim();
        let lb = inv_spd(&model.b, "").unwrap().cholesky().unwrap().l();
        let lw = inv_spd(&model.w, "").unwrap().cholesky().unwrap().l();
        let mut x = Mat::zeros(n_spk * per_spk, n);
        let mut meta = Vec::new();
        for s in 0..n_spk {
            let z = Vector::from_fn(n, |_, _| StandardNormal.sample(rng));
            let y = &model.mu + &lb * z;
            for i in 0..per_spk {
                let e = &lw * Vector::from_fn(n, |_, _| StandardNormal.sample(rng));
                x.set_row(s * per_spk + i, &(&y + e).transpose());
                meta.push(sample_meta(s, i));
            }
        }
        (x, Metadata::new(meta).unwrap())
    }

    #[test]
    fn em_is_monotone_and_recovers_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let truth = PldaModel {
            mu: Vector::from_vec(vec![0.5, -1.0, 0.2]),
            b: random_spd(3, &mut rng, 0.5),
            w: random_spd(3, &mut rng, 1.0),
        };
        let (x, meta) = draw_corpus(&truth, 2000, 5, &mut rng);
        let (model, trace) = fit_plda(
            &x,
            &meta,
            &flat_weights(&meta),
            EmConfig {
                max_iters: 50,
                rel_tol: 0.0,
            },
        )
        .unwrap();
        for pair in trace.windows(2) {
            assert!(pair[1] >= pair[0] - 1e-8 * pair[0].abs(), "{pair:?}");
        }
        let rel = |a: &Mat, b: &Mat| (a - b).norm() / b.norm();
        let sb = inv_spd(&model.b, "").unwrap();
        let sw = inv_spd(&model.w, "").unwrap();
        assert!(rel(&sb, &inv_spd(&truth.b, "").unwrap()) < 0.10);
        assert!(rel(&sw, &inv_spd(&truth.w, "").unwrap()) < 0.10);
    }

    #[test]
    fn doubling_all_weights_keeps_trajectory() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let truth = PldaModel {
            mu: Vector::zeros(2),
            b: random_spd(2, &mut rng, 0.5),
            w: random_spd(2, &mut rng, 1.0),
        };
        let (x, meta) = draw_corpus(&truth, 30, 4, &mut rng);
        let w1 = flat_weights(&meta);
        let w2: SpeakerWeights = w1.iter().map(|(k, v)| (k.clone(), 2.0 * v)).collect();
        let t1 = PldaTrainer::new(&x, &meta, &w1).unwrap();
        let t2 = PldaTrainer::new(&x, &meta, &w2).unwrap();
        let (mut m1, mut m2) = (t1.init().unwrap(), t2.init().unwrap());
        for it in 0..5 {
            m1 = t1.step(&m1, it).unwrap().0;
            m2 = t2.step(&m2, it).unwrap().0;
            assert!((&m1.b - &m2.b).amax() < 1e-9 * m1.b.amax());
            assert!((&m1.w - &m2.w).amax() < 1e-9 * m1.w.amax());
        }
    }

    #[test]
    fn single_speaker_is_rejected() {
        let meta = Metadata::new(vec![sample_meta(0, 0), sample_meta(0, 1)]).unwrap();
        let x = Mat::from_row_slice(2, 1, &[0.1, 0.3]);
        assert!(matches!(
            init_plda(&x, &meta, &flat_weights(&meta)),
            Err(Error::InsufficientSpeakers(1))
        ));
    }
}
