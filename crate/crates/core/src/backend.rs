//! The complete backend: front end, PLDA score form and calibration stack,
//! with a batched forward pass and exact gradients of the training loss.

use std::fmt;
use std::str::FromStr;

use crate::calibration::{
    duration_features, Calibrator, CalStages, DurCalParams, DurationFeatures, GlobalCal,
    PolyBlock, SideInfoParams, SideTransform,
};
use crate::data::IndexedTrial;
use crate::error::{Error, Result};
use crate::linalg::{logit, pairwise_sum, sigmoid, softplus, symmetrize, Mat, Vector};
use crate::plda::{PldaModel, ScoreForm};
use crate::preproc::PreprocParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Architecture {
    /// Generative LDA/PLDA with global calibration; no discriminative steps.
    Plda,
    DPlda,
    DPldaDd,
    DPldaSd,
    DPldaDsd,
    /// Frozen generative front end, trained duration-dependent calibration.
    PldaDd,
    PldaSd,
    PldaDsd,
}

impl Architecture {
    pub const ALL: [Architecture; 8] = [
        Architecture::Plda,
        Architecture::DPlda,
        Architecture::DPldaDd,
        Architecture::DPldaSd,
        Architecture::DPldaDsd,
        Architecture::PldaDd,
        Architecture::PldaSd,
        Architecture::PldaDsd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Architecture::Plda => "plda",
            Architecture::DPlda => "d-plda",
            Architecture::DPldaDd => "d-plda-dd",
            Architecture::DPldaSd => "d-plda-sd",
            Architecture::DPldaDsd => "d-plda-dsd",
            Architecture::PldaDd => "plda-dd",
            Architecture::PldaSd => "plda-sd",
            Architecture::PldaDsd => "plda-dsd",
        }
    }

    pub fn stages(self) -> CalStages {
        match self {
            Architecture::Plda | Architecture::DPlda => CalStages::Global,
            Architecture::DPldaDd | Architecture::PldaDd => CalStages::Dd,
            Architecture::DPldaSd | Architecture::PldaSd => CalStages::Sd,
            Architecture::DPldaDsd | Architecture::PldaDsd => CalStages::Dsd,
        }
    }

    /// Whether LDA and PLDA parameters receive gradient updates.
    pub fn trains_front_end(self) -> bool {
        matches!(
            self,
            Architecture::DPlda
                | Architecture::DPldaDd
                | Architecture::DPldaSd
                | Architecture::DPldaDsd
        )
    }

    /// Whether the architecture has any discriminative training at all.
    pub fn is_trained(self) -> bool {
        self != Architecture::Plda
    }

    /// Whether the named parameter group is updated during training.
    pub fn trains_group(self, group: &str) -> bool {
        if !self.is_trained() {
            return false;
        }
        if group.starts_with("preproc.") || group.starts_with("score.") {
            return self.trains_front_end();
        }
        true
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Architecture {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "dca-plda" {
            return Ok(Architecture::DPldaDsd);
        }
        Architecture::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown architecture '{s}'")))
    }
}

/// Shape of the calibration stages that are not determined by the front end.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationShape {
    pub features: DurationFeatures,
    /// Dimension of the side-information bottleneck input `m`.
    pub m_dim: usize,
    /// Dimension of the side-information vector `z`.
    pub s_dim: usize,
    pub transform: SideTransform,
}

impl Default for CalibrationShape {
    fn default() -> Self {
        Self {
            features: DurationFeatures::default(),
            m_dim: 200,
            s_dim: 6,
            transform: SideTransform::Identity,
        }
    }
}

/// All model parameters. `form.lambda` / `form.gamma` and the polynomial
/// block matrices hold the unconstrained auxiliary matrices; only their
/// symmetric parts enter the computation.
#[derive(Debug, Clone, PartialEq)]
pub struct BackendParams {
    pub arch: Architecture,
    pub preproc: PreprocParams,
    pub form: ScoreForm,
    /// Generative model the score form was derived from, if any.
    pub plda: Option<PldaModel>,
    pub calibrator: Calibrator,
}

fn push_block<'a>(prefix: &str, b: &'a PolyBlock, out: &mut Vec<(String, &'a [f64])>) {
    out.push((format!("{prefix}.lambda"), b.lambda.as_slice()));
    out.push((format!("{prefix}.gamma"), b.gamma.as_slice()));
    out.push((format!("{prefix}.c"), b.c.as_slice()));
    out.push((format!("{prefix}.k"), std::slice::from_ref(&b.k)));
}

fn push_block_mut<'a>(prefix: &str, b: &'a mut PolyBlock, out: &mut Vec<(String, &'a mut [f64])>) {
    let PolyBlock {
        lambda,
        gamma,
        c,
        k,
    } = b;
    out.push((format!("{prefix}.lambda"), lambda.as_mut_slice()));
    out.push((format!("{prefix}.gamma"), gamma.as_mut_slice()));
    out.push((format!("{prefix}.c"), c.as_mut_slice()));
    out.push((format!("{prefix}.k"), std::slice::from_mut(k)));
}

impl BackendParams {
    /// A model of the given architecture with every parameter zero (and
    /// pass-through calibration constants), used for shape queries.
    pub fn zeros(arch: Architecture, input_dim: usize, lda_dim: usize, shape: &CalibrationShape) -> Self {
        let preproc = PreprocParams {
            a: Mat::zeros(lda_dim, input_dim),
            m: Vector::zeros(lda_dim),
        };
        let form = ScoreForm {
            lambda: Mat::zeros(lda_dim, lda_dim),
            gamma: Mat::zeros(lda_dim, lda_dim),
            c: Vector::zeros(lda_dim),
            k: 0.0,
        };
        let calibrator = build_calibrator(arch.stages(), input_dim, shape, GlobalCal { alpha: 1.0, beta: 0.0 });
        Self {
            arch,
            preproc,
            form,
            plda: None,
            calibrator,
        }
    }

    /// Named parameter groups in a fixed order.
    pub fn groups(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = vec![
            ("preproc.a".into(), self.preproc.a.as_slice()),
            ("preproc.m".into(), self.preproc.m.as_slice()),
            ("score.lambda".into(), self.form.lambda.as_slice()),
            ("score.gamma".into(), self.form.gamma.as_slice()),
            ("score.c".into(), self.form.c.as_slice()),
            ("score.k".into(), std::slice::from_ref(&self.form.k)),
        ];
        match &self.calibrator {
            Calibrator::Global(g) => {
                out.push(("global.alpha".into(), std::slice::from_ref(&g.alpha)));
                out.push(("global.beta".into(), std::slice::from_ref(&g.beta)));
            }
            Calibrator::Duration(d) => push_dur(d, &mut out),
            Calibrator::SideInfo(s) => push_side(s, &mut out),
            Calibrator::Both(d, s) => {
                push_dur(d, &mut out);
                push_side(s, &mut out);
            }
        }
        out
    }

    /// Mutable view of [`groups`](Self::groups), same order.
    pub fn groups_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let BackendParams {
            preproc,
            form,
            calibrator,
            ..
        } = self;
        let ScoreForm {
            lambda,
            gamma,
            c,
            k,
        } = form;
        let mut out: Vec<(String, &mut [f64])> = vec![
            ("preproc.a".into(), preproc.a.as_mut_slice()),
            ("preproc.m".into(), preproc.m.as_mut_slice()),
            ("score.lambda".into(), lambda.as_mut_slice()),
            ("score.gamma".into(), gamma.as_mut_slice()),
            ("score.c".into(), c.as_mut_slice()),
            ("score.k".into(), std::slice::from_mut(k)),
        ];
        match calibrator {
            Calibrator::Global(g) => {
                let GlobalCal { alpha, beta } = g;
                out.push(("global.alpha".into(), std::slice::from_mut(alpha)));
                out.push(("global.beta".into(), std::slice::from_mut(beta)));
            }
            Calibrator::Duration(d) => push_dur_mut(d, &mut out),
            Calibrator::SideInfo(s) => push_side_mut(s, &mut out),
            Calibrator::Both(d, s) => {
                push_dur_mut(d, &mut out);
                push_side_mut(s, &mut out);
            }
        }
        out
    }

    /// Same structure with every parameter set to zero.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.plda = None;
        for (_, g) in z.groups_mut() {
            g.fill(0.0);
        }
        z
    }

    /// Total number of parameters of the architecture (counting the full
    /// auxiliary matrices).
    pub fn n_params(&self) -> usize {
        self.groups().iter().map(|(_, g)| g.len()).sum()
    }

    /// Number of parameters updated by training.
    pub fn n_trainable(&self) -> usize {
        self.groups()
            .iter()
            .filter(|(n, _)| self.arch.trains_group(n))
            .map(|(_, g)| g.len())
            .sum()
    }

    pub fn input_dim(&self) -> usize {
        self.preproc.input_dim()
    }

    pub fn validate(&self) -> Result<()> {
        if self.arch.stages() != self.calibrator.stages() {
            return Err(Error::StageMismatch(format!(
                "architecture {} expects {} calibration, model has {}",
                self.arch,
                self.arch.stages().tag(),
                self.calibrator.stages().tag()
            )));
        }
        let n = self.preproc.output_dim();
        if self.form.dim() != n || self.form.lambda.shape() != (n, n) || self.form.gamma.shape() != (n, n) {
            return Err(Error::DimensionMismatch(format!(
                "score form does not match front-end dimension {n}"
            )));
        }
        if let Some(s) = self.calibrator.side_info() {
            if s.input_dim() != self.input_dim() || s.a_z.ncols() != s.m_dim() {
                return Err(Error::DimensionMismatch("side-information branch shapes".into()));
            }
        }
        for (name, g) in self.groups() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument(format!("non-finite value in {name}")));
            }
        }
        Ok(())
    }

    /// Per-sample quantities of the forward pass for the rows of `x`.
    pub fn sample_features(&self, x: &Mat, durations: Option<&[f64]>) -> Result<SampleFeatures> {
        if x.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch(format!(
                "embeddings have dimension {}, model expects {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        let n = x.nrows();
        let (w, u_norm) = normalize_rows(x * self.preproc.a.transpose(), &self.preproc.m)?;
        let e = match self.calibrator.duration() {
            Some(d) => {
                let durs = durations.ok_or_else(|| Error::MissingDuration("(no durations supplied)".into()))?;
                if durs.len() != n {
                    return Err(Error::DimensionMismatch(format!(
                        "{} durations for {n} samples",
                        durs.len()
                    )));
                }
                let dim = d.features.dim();
                let mut e = Mat::zeros(n, dim);
                for (i, &dur) in durs.iter().enumerate() {
                    let f = duration_features(dur, &d.features)?;
                    e.row_mut(i).copy_from(&f.transpose());
                }
                Some(e)
            }
            None => None,
        };
        let side = match self.calibrator.side_info() {
            Some(s) => {
                let (m, v_norm) = normalize_rows(x * s.a_m.transpose(), &s.b_m)?;
                let mut a = &m * s.a_z.transpose();
                for mut row in a.row_iter_mut() {
                    row += s.b_z.transpose();
                }
                let mut z = Mat::zeros(n, s.z_dim());
                for i in 0..n {
                    let zi = s.transform.apply(&a.row(i).transpose());
                    z.row_mut(i).copy_from(&zi.transpose());
                }
                Some(SideCache { m, v_norm, a, z })
            }
            None => None,
        };
        Ok(SampleFeatures { w, u_norm, e, side })
    }

    /// Raw scores, intermediate calibration values and LLRs of `trials`,
    /// whose indices refer to rows of `x`.
    pub fn forward(
        &self,
        x: &Mat,
        durations: Option<&[f64]>,
        trials: &[IndexedTrial],
    ) -> Result<Forward> {
        let feats = self.sample_features(x, durations)?;
        let n = x.nrows();
        if let Some(t) = trials.iter().find(|t| t.enroll >= n || t.test >= n) {
            return Err(Error::InvalidArgument(format!(
                "trial index ({}, {}) outside {n} samples",
                t.enroll, t.test
            )));
        }
        let score = QuadPrep::new(&self.form.lambda, &self.form.gamma, &self.form.c, self.form.k, &feats.w);
        let s: Vec<f64> = trials.iter().map(|t| score.eval(t.enroll, t.test)).collect();
        let mut out = Forward {
            s: s.clone(),
            alpha_d: None,
            beta_d: None,
            alpha_s: None,
            beta_s: None,
            llr: s,
            feats,
        };
        match &self.calibrator {
            Calibrator::Global(g) => {
                for l in out.llr.iter_mut() {
                    *l = g.apply(*l);
                }
            }
            cal => {
                if let (Some(d), Some(e)) = (cal.duration(), out.feats.e.as_ref()) {
                    let a = block_values(&d.alpha, e, trials);
                    let b = block_values(&d.beta, e, trials);
                    for ((l, a), b) in out.llr.iter_mut().zip(&a).zip(&b) {
                        *l = a * *l + b;
                    }
                    out.alpha_d = Some(a);
                    out.beta_d = Some(b);
                }
                if let (Some(si), Some(side)) = (cal.side_info(), out.feats.side.as_ref()) {
                    let a = block_values(&si.alpha, &side.z, trials);
                    let b = block_values(&si.beta, &side.z, trials);
                    for ((l, a), b) in out.llr.iter_mut().zip(&a).zip(&b) {
                        *l = a * *l + b;
                    }
                    out.alpha_s = Some(a);
                    out.beta_s = Some(b);
                }
            }
        }
        if let Some(i) = out.llr.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue { row: i, col: 0 });
        }
        Ok(out)
    }

    /// Calibrated LLRs of `trials`.
    pub fn llrs(&self, x: &Mat, durations: Option<&[f64]>, trials: &[IndexedTrial]) -> Result<Vec<f64>> {
        Ok(self.forward(x, durations, trials)?.llr)
    }

    /// Weighted cross-entropy (nats) at prior `pi` and its exact gradient with
    /// respect to every parameter group. Groups the architecture does not
    /// train get zero gradient.
    pub fn loss_and_gradient(
        &self,
        x: &Mat,
        durations: Option<&[f64]>,
        trials: &[IndexedTrial],
        pi: f64,
    ) -> Result<(f64, BackendParams)> {
        let fw = self.forward(x, durations, trials)?;
        let (loss, dl) = loss_with_gradient(&fw.llr, trials, pi)?;
        let grads = self.backward(x, trials, &fw, &dl)?;
        for (name, g) in grads.groups() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient(name));
            }
        }
        Ok((loss, grads))
    }

    /// Backpropagates per-trial LLR gradients `dl` through the model.
    pub fn backward(
        &self,
        x: &Mat,
        trials: &[IndexedTrial],
        fw: &Forward,
        dl: &[f64],
    ) -> Result<BackendParams> {
        let n = x.nrows();
        let mut grads = self.zeros_like();
        let train_front = self.arch.trains_front_end();
        let train_cal = self.arch.is_trained();

        // Per-trial gradients w.r.t. the raw score and the calibration blocks.
        let mut ds = dl.to_vec();
        let mut dz: Option<Mat> = None;
        match &self.calibrator {
            Calibrator::Global(g) => {
                if let Calibrator::Global(gg) = &mut grads.calibrator {
                    gg.alpha = pairwise_sum(&dl.iter().zip(&fw.s).map(|(d, s)| d * s).collect::<Vec<_>>());
                    gg.beta = pairwise_sum(dl);
                }
                ds.iter_mut().for_each(|d| *d *= g.alpha);
            }
            cal => {
                let mut d_t = dl.to_vec();
                if let (Some(si), Some(side)) = (cal.side_info(), fw.feats.side.as_ref()) {
                    let a = fw.alpha_s.as_ref().expect("side-info forward");
                    // Input to the side-info stage.
                    let t_in: Vec<f64> = match (&fw.alpha_d, &fw.beta_d) {
                        (Some(ad), Some(bd)) => fw.s.iter().zip(ad).zip(bd).map(|((s, a), b)| a * s + b).collect(),
                        _ => fw.s.clone(),
                    };
                    let ga: Vec<f64> = dl.iter().zip(&t_in).map(|(d, t)| d * t).collect();
                    let gs = grads.calibrator.side_info_mut().expect("same structure");
                    let mut dzm = Mat::zeros(n, si.z_dim());
                    block_backward(&si.alpha, &side.z, trials, &ga, &mut gs.alpha, Some(&mut dzm));
                    block_backward(&si.beta, &side.z, trials, dl, &mut gs.beta, Some(&mut dzm));
                    dz = Some(dzm);
                    d_t = dl.iter().zip(a).map(|(d, a)| d * a).collect();
                }
                if let (Some(dc), Some(e)) = (cal.duration(), fw.feats.e.as_ref()) {
                    let a = fw.alpha_d.as_ref().expect("duration forward");
                    let ga: Vec<f64> = d_t.iter().zip(&fw.s).map(|(d, s)| d * s).collect();
                    let gd = grads.calibrator.duration_mut().expect("same structure");
                    block_backward(&dc.alpha, e, trials, &ga, &mut gd.alpha, None);
                    block_backward(&dc.beta, e, trials, &d_t, &mut gd.beta, None);
                    d_t = d_t.iter().zip(a).map(|(d, a)| d * a).collect();
                }
                ds = d_t;
            }
        }

        if let (Some(si), Some(side), Some(dz)) = (self.calibrator.side_info(), fw.feats.side.as_ref(), dz) {
            let gs = grads.calibrator.side_info_mut().expect("same structure");
            side_backward(si, side, x, &dz, gs);
        }

        if train_front {
            let g = dense_pair_gradient(n, trials, &ds);
            let (lam, gam) = (symmetrize(&self.form.lambda), symmetrize(&self.form.gamma));
            let qb = quad_backward(&lam, &gam, &self.form.c, &fw.feats.w, &g);
            grads.form.lambda = qb.d_lambda;
            grads.form.gamma = qb.d_gamma;
            grads.form.c = qb.d_c;
            grads.form.k = qb.d_k;
            // Length-norm backward: dU = (dW − w (w·dW)) / ‖u‖.
            let w = &fw.feats.w;
            let mut du = qb.d_x;
            for i in 0..n {
                let proj = w.row(i).dot(&du.row(i));
                let r = fw.feats.u_norm[i];
                let wi = w.row(i).into_owned();
                let mut row = du.row_mut(i);
                row -= wi * proj;
                row /= r;
            }
            grads.preproc.a = du.transpose() * x;
            grads.preproc.m = Vector::from_iterator(du.ncols(), du.column_iter().map(|c| pairwise_sum(c.as_slice())));
        }
        if !train_cal {
            for (_, g) in grads.groups_mut() {
                g.fill(0.0);
            }
        } else if !train_front {
            for (name, g) in grads.groups_mut() {
                if !self.arch.trains_group(&name) {
                    g.fill(0.0);
                }
            }
        }
        Ok(grads)
    }
}

fn push_dur<'a>(d: &'a DurCalParams, out: &mut Vec<(String, &'a [f64])>) {
    push_block("dur.alpha", &d.alpha, out);
    push_block("dur.beta", &d.beta, out);
}

fn push_dur_mut<'a>(d: &'a mut DurCalParams, out: &mut Vec<(String, &'a mut [f64])>) {
    let DurCalParams { alpha, beta, .. } = d;
    push_block_mut("dur.alpha", alpha, out);
    push_block_mut("dur.beta", beta, out);
}

fn push_side<'a>(s: &'a SideInfoParams, out: &mut Vec<(String, &'a [f64])>) {
    out.push(("side.a_m".into(), s.a_m.as_slice()));
    out.push(("side.b_m".into(), s.b_m.as_slice()));
    out.push(("side.a_z".into(), s.a_z.as_slice()));
    out.push(("side.b_z".into(), s.b_z.as_slice()));
    push_block("side.alpha", &s.alpha, out);
    push_block("side.beta", &s.beta, out);
}

fn push_side_mut<'a>(s: &'a mut SideInfoParams, out: &mut Vec<(String, &'a mut [f64])>) {
    let SideInfoParams {
        a_m,
        b_m,
        a_z,
        b_z,
        alpha,
        beta,
        ..
    } = s;
    out.push(("side.a_m".into(), a_m.as_mut_slice()));
    out.push(("side.b_m".into(), b_m.as_mut_slice()));
    out.push(("side.a_z".into(), a_z.as_mut_slice()));
    out.push(("side.b_z".into(), b_z.as_mut_slice()));
    push_block_mut("side.alpha", alpha, out);
    push_block_mut("side.beta", beta, out);
}

/// Calibrator of the given stages with zero polynomial terms. Single stages
/// and the duration stage of DSD start at `global`; the side-info stage of
/// DSD starts as a pass-through. Side-branch matrices are zero.
pub fn build_calibrator(
    stages: CalStages,
    input_dim: usize,
    shape: &CalibrationShape,
    global: GlobalCal,
) -> Calibrator {
    let dur = |g: GlobalCal| DurCalParams {
        features: shape.features.clone(),
        alpha: PolyBlock::constant(shape.features.dim(), g.alpha),
        beta: PolyBlock::constant(shape.features.dim(), g.beta),
    };
    let side = |g: GlobalCal| SideInfoParams {
        a_m: Mat::zeros(shape.m_dim, input_dim),
        b_m: Vector::zeros(shape.m_dim),
        a_z: Mat::zeros(shape.s_dim, shape.m_dim),
        b_z: Vector::zeros(shape.s_dim),
        transform: shape.transform,
        alpha: PolyBlock::constant(shape.s_dim, g.alpha),
        beta: PolyBlock::constant(shape.s_dim, g.beta),
    };
    let pass = GlobalCal { alpha: 1.0, beta: 0.0 };
    match stages {
        CalStages::Global => Calibrator::Global(global),
        CalStages::Dd => Calibrator::Duration(dur(global)),
        CalStages::Sd => Calibrator::SideInfo(side(global)),
        CalStages::Dsd => Calibrator::Both(dur(global), side(pass)),
    }
}

/// Per-sample cached quantities.
#[derive(Debug, Clone)]
pub struct SampleFeatures {
    /// Length-normalized front-end outputs, one row per sample.
    pub w: Mat,
    u_norm: Vector,
    /// Duration feature rows.
    pub e: Option<Mat>,
    side: Option<SideCache>,
}

impl SampleFeatures {
    /// Side-information vectors, one row per sample.
    pub fn z(&self) -> Option<&Mat> {
        self.side.as_ref().map(|s| &s.z)
    }
}

#[derive(Debug, Clone)]
struct SideCache {
    m: Mat,
    v_norm: Vector,
    a: Mat,
    z: Mat,
}

#[derive(Debug, Clone)]
pub struct Forward {
    pub feats: SampleFeatures,
    /// Raw PLDA scores.
    pub s: Vec<f64>,
    pub alpha_d: Option<Vec<f64>>,
    pub beta_d: Option<Vec<f64>>,
    pub alpha_s: Option<Vec<f64>>,
    pub beta_s: Option<Vec<f64>>,
    pub llr: Vec<f64>,
}

/// Adds `shift` to every row of `proj` and normalizes rows to unit length.
fn normalize_rows(mut proj: Mat, shift: &Vector) -> Result<(Mat, Vector)> {
    let mut norms = Vector::zeros(proj.nrows());
    for (i, mut row) in proj.row_iter_mut().enumerate() {
        row += shift.transpose();
        let n = row.norm();
        if n == 0.0 || !n.is_finite() {
            return Err(Error::DegenerateEmbedding);
        }
        row /= n;
        norms[i] = n;
    }
    Ok((proj, norms))
}

/// Precomputed per-sample parts of `2uᵀΛv + uᵀΓu + vᵀΓv + (u+v)ᵀc + k`.
struct QuadPrep<'a> {
    x: &'a Mat,
    xl: Mat,
    q: Vector,
    k: f64,
}

impl<'a> QuadPrep<'a> {
    fn new(lambda: &Mat, gamma: &Mat, c: &Vector, k: f64, x: &'a Mat) -> Self {
        let l = symmetrize(lambda);
        let g = symmetrize(gamma);
        let xl = x * &l;
        let xg = x * &g;
        let xc = x * c;
        let q = Vector::from_fn(x.nrows(), |i, _| x.row(i).dot(&xg.row(i)) + xc[i]);
        Self { x, xl, q, k }
    }

    fn eval(&self, i: usize, j: usize) -> f64 {
        2.0 * self.xl.row(i).dot(&self.x.row(j)) + self.q[i] + self.q[j] + self.k
    }
}

fn block_values(b: &PolyBlock, x: &Mat, trials: &[IndexedTrial]) -> Vec<f64> {
    let prep = QuadPrep::new(&b.lambda, &b.gamma, &b.c, b.k, x);
    trials.iter().map(|t| prep.eval(t.enroll, t.test)).collect()
}

/// Per-trial gradients gathered into an n×n matrix (duplicates add up).
fn dense_pair_gradient(n: usize, trials: &[IndexedTrial], g: &[f64]) -> Mat {
    let mut m = Mat::zeros(n, n);
    for (t, v) in trials.iter().zip(g) {
        m[(t.enroll, t.test)] += v;
    }
    m
}

struct QuadGrad {
    d_lambda: Mat,
    d_gamma: Mat,
    d_c: Vector,
    d_k: f64,
    d_x: Mat,
}

/// Gradient of `Σ_ij G_ij q(x_i, x_j)` for a symmetric-part quadratic form,
/// with respect to the auxiliary matrices, `c`, `k` and the rows of `x`.
fn quad_backward(lam: &Mat, gam: &Mat, c: &Vector, x: &Mat, g: &Mat) -> QuadGrad {
    let gs = g + g.transpose();
    let r = Vector::from_iterator(gs.nrows(), gs.row_iter().map(|row| row.sum()));
    let gx = &gs * x;
    let d_lambda = x.transpose() * &gx;
    let mut rx = x.clone();
    for (i, mut row) in rx.row_iter_mut().enumerate() {
        row *= r[i];
    }
    let d_gamma = x.transpose() * &rx;
    let d_c = x.transpose() * &r;
    let d_k = pairwise_sum(g.as_slice());
    let mut d_x = gx * lam * 2.0 + rx * gam * 2.0;
    for (i, mut row) in d_x.row_iter_mut().enumerate() {
        row += c.transpose() * r[i];
    }
    QuadGrad {
        d_lambda,
        d_gamma,
        d_c,
        d_k,
        d_x,
    }
}

fn block_backward(
    b: &PolyBlock,
    x: &Mat,
    trials: &[IndexedTrial],
    g: &[f64],
    out: &mut PolyBlock,
    dx: Option<&mut Mat>,
) {
    let gm = dense_pair_gradient(x.nrows(), trials, g);
    let qb = quad_backward(&symmetrize(&b.lambda), &symmetrize(&b.gamma), &b.c, x, &gm);
    out.lambda += qb.d_lambda;
    out.gamma += qb.d_gamma;
    out.c += qb.d_c;
    out.k += qb.d_k;
    if let Some(dx) = dx {
        *dx += qb.d_x;
    }
}

fn side_backward(si: &SideInfoParams, side: &SideCache, x: &Mat, dz: &Mat, out: &mut SideInfoParams) {
    let n = x.nrows();
    let mut da = Mat::zeros(n, si.z_dim());
    for i in 0..n {
        let a = side.a.row(i).transpose();
        let z = side.z.row(i).transpose();
        let d = si.transform.backward(&a, &z, &dz.row(i).transpose());
        da.row_mut(i).copy_from(&d.transpose());
    }
    out.a_z += da.transpose() * &side.m;
    out.b_z += Vector::from_iterator(da.ncols(), da.column_iter().map(|c| c.sum()));
    let mut dv = &da * &si.a_z;
    for i in 0..n {
        let m = side.m.row(i).into_owned();
        let proj = m.dot(&dv.row(i));
        let mut row = dv.row_mut(i);
        row -= m * proj;
        row /= side.v_norm[i];
    }
    out.a_m += dv.transpose() * x;
    out.b_m += Vector::from_iterator(dv.ncols(), dv.column_iter().map(|c| c.sum()));
}

/// Weighted cross-entropy in nats and its gradient per trial LLR.
pub fn loss_with_gradient(llr: &[f64], trials: &[IndexedTrial], pi: f64) -> Result<(f64, Vec<f64>)> {
    if !(pi > 0.0 && pi < 1.0) {
        return Err(Error::InvalidArgument(format!("prior must be in (0, 1), got {pi}")));
    }
    if llr.len() != trials.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} LLRs for {} trials",
            llr.len(),
            trials.len()
        )));
    }
    let n_t = trials.iter().filter(|t| t.target).count();
    let n_i = trials.len() - n_t;
    if n_t == 0 {
        return Err(Error::NoValidTargets);
    }
    if n_i == 0 {
        return Err(Error::NoValidImpostors);
    }
    let gamma = logit(pi);
    let wt = pi / n_t as f64;
    let wi = (1.0 - pi) / n_i as f64;
    let mut terms = Vec::with_capacity(llr.len());
    let mut grad = Vec::with_capacity(llr.len());
    for (l, t) in llr.iter().zip(trials) {
        let a = l + gamma;
        if t.target {
            terms.push(wt * softplus(-a));
            grad.push(-wt * sigmoid(-a));
        } else {
            terms.push(wi * softplus(a));
            grad.push(wi * sigmoid(a));
        }
    }
    Ok((pairwise_sum(&terms), grad))
}
