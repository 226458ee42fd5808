//! Calibration stack: global affine, duration-dependent and
//! side-information-dependent stages.
//!
//! The condition-dependent stages turn a raw score `s` into
//! `α(u1, u2)·s + β(u1, u2)`, where `α` and `β` are symmetric second-order
//! polynomials ([`PolyBlock`]) of per-side condition vectors: duration features
//! `e` or side-information vectors `z`. With both stages the duration stage
//! runs first: `l = α_s·(α_d·s + β_d) + β_s`.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::linalg::{sigmoid, symmetrize, Mat, Vector};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlobalCal {
    pub alpha: f64,
    pub beta: f64,
}

impl GlobalCal {
    pub fn apply(&self, s: f64) -> f64 {
        self.alpha * s + self.beta
    }
}

/// `2uᵀΛv + uᵀΓu + vᵀΓv + (u + v)ᵀc + k` with Λ and Γ taken as the symmetric
/// parts of the stored matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct PolyBlock {
    pub lambda: Mat,
    pub gamma: Mat,
    pub c: Vector,
    pub k: f64,
}

impl PolyBlock {
    pub fn constant(dim: usize, k: f64) -> Self {
        Self {
            lambda: Mat::zeros(dim, dim),
            gamma: Mat::zeros(dim, dim),
            c: Vector::zeros(dim),
            k,
        }
    }

    pub fn dim(&self) -> usize {
        self.c.len()
    }

    pub fn n_params(&self) -> usize {
        let d = self.dim();
        2 * d * d + d + 1
    }

    pub fn eval(&self, u: &Vector, v: &Vector) -> f64 {
        let l = symmetrize(&self.lambda);
        let g = symmetrize(&self.gamma);
        eval_sym(&l, &g, &self.c, self.k, u, v)
    }
}

pub(crate) fn eval_sym(l: &Mat, g: &Mat, c: &Vector, k: f64, u: &Vector, v: &Vector) -> f64 {
    2.0 * u.dot(&(l * v)) + u.dot(&(g * u)) + v.dot(&(g * v)) + (u + v).dot(c) + k
}

/// Checked evaluation of a polynomial block.
pub fn poly_scalar(block: &PolyBlock, u: &Vector, v: &Vector) -> Result<f64> {
    if u.len() != block.dim() || v.len() != block.dim() {
        return Err(Error::DimensionMismatch(format!(
            "block dimension {}, inputs {} and {}",
            block.dim(),
            u.len(),
            v.len()
        )));
    }
    Ok(block.eval(u, v))
}

/// Encoding of a speech duration (seconds) into a feature vector.
#[derive(Debug, Clone, PartialEq)]
pub enum DurationFeatures {
    /// `[log d]`.
    Log,
    /// One-hot bin index; `thresholds` strictly increasing.
    Bin { thresholds: Vec<f64> },
    /// `log d · [σ_sc(d), 1 − σ_sc(d)]` with `σ_sc(d) = σ(s (log d − log c))`.
    WLog { center: f64, slope: f64 },
}

impl Default for DurationFeatures {
    fn default() -> Self {
        DurationFeatures::WLog {
            center: 30.0,
            slope: 2.0,
        }
    }
}

impl DurationFeatures {
    pub fn default_bins() -> Self {
        DurationFeatures::Bin {
            thresholds: vec![8.0, 16.0, 32.0, 64.0, 128.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            DurationFeatures::Log => Ok(()),
            DurationFeatures::Bin { thresholds } => {
                if thresholds.is_empty() || thresholds.windows(2).any(|w| w[1] <= w[0]) {
                    Err(Error::InvalidArgument(
                        "duration thresholds must be non-empty and strictly increasing".into(),
                    ))
                } else {
                    Ok(())
                }
            }
            DurationFeatures::WLog { center, slope } => {
                if *center > 0.0 && *slope > 0.0 {
                    Ok(())
                } else {
                    Err(Error::InvalidArgument(
                        "wlog center and slope must be positive".into(),
                    ))
                }
            }
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            DurationFeatures::Log => 1,
            DurationFeatures::Bin { thresholds } => thresholds.len() + 1,
            DurationFeatures::WLog { .. } => 2,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            DurationFeatures::Log => "log",
            DurationFeatures::Bin { .. } => "bin",
            DurationFeatures::WLog { .. } => "wlog",
        }
    }
}

/// Feature vector for a duration of `d` seconds.
pub fn duration_features(d: f64, kind: &DurationFeatures) -> Result<Vector> {
    if !(d > 0.0 && d.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "duration must be positive, got {d}"
        )));
    }
    Ok(match kind {
        DurationFeatures::Log => Vector::from_element(1, d.ln()),
        DurationFeatures::Bin { thresholds } => {
            let bin = thresholds.iter().take_while(|t| d >= **t).count();
            let mut e = Vector::zeros(thresholds.len() + 1);
            e[bin] = 1.0;
            e
        }
        DurationFeatures::WLog { center, slope } => {
            let ld = d.ln();
            let w = sigmoid(slope * (ld - center.ln()));
            Vector::from_vec(vec![ld * w, ld * (1.0 - w)])
        }
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DurCalParams {
    pub features: DurationFeatures,
    pub alpha: PolyBlock,
    pub beta: PolyBlock,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SideTransform {
    #[default]
    Identity,
    Softmax,
    LogSoftmax,
}

impl SideTransform {
    pub fn apply(self, a: &Vector) -> Vector {
        match self {
            SideTransform::Identity => a.clone(),
            SideTransform::Softmax => softmax(a),
            SideTransform::LogSoftmax => {
                let lse = log_sum_exp(a);
                a.map(|v| v - lse)
            }
        }
    }

    /// Gradient w.r.t. the pre-activation given the gradient w.r.t. the output.
    pub(crate) fn backward(self, a: &Vector, z: &Vector, dz: &Vector) -> Vector {
        match self {
            SideTransform::Identity => dz.clone(),
            SideTransform::Softmax => {
                let inner = z.dot(dz);
                z.component_mul(&dz.map(|g| g - inner))
            }
            SideTransform::LogSoftmax => {
                let p = softmax(a);
                dz - p * dz.sum()
            }
        }
    }
}

impl fmt::Display for SideTransform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SideTransform::Identity => "identity",
            SideTransform::Softmax => "softmax",
            SideTransform::LogSoftmax => "log_softmax",
        })
    }
}

impl FromStr for SideTransform {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(SideTransform::Identity),
            "softmax" => Ok(SideTransform::Softmax),
            "log_softmax" | "logsoftmax" => Ok(SideTransform::LogSoftmax),
            _ => Err(Error::InvalidArgument(format!("unknown side-info transform '{s}'"))),
        }
    }
}

fn log_sum_exp(a: &Vector) -> f64 {
    let max = a.max();
    max + a.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn softmax(a: &Vector) -> Vector {
    let max = a.max();
    let e = a.map(|v| (v - max).exp());
    let s = e.sum();
    e / s
}

/// Side-information branch: `m = Norm(A_m x + b_m)`, `z = f(A_z m + b_z)`,
/// then the α/β blocks of the side-info stage.
#[derive(Debug, Clone, PartialEq)]
pub struct SideInfoParams {
    pub a_m: Mat,
    pub b_m: Vector,
    pub a_z: Mat,
    pub b_z: Vector,
    pub transform: SideTransform,
    pub alpha: PolyBlock,
    pub beta: PolyBlock,
}

impl SideInfoParams {
    pub fn m_dim(&self) -> usize {
        self.b_m.len()
    }

    pub fn z_dim(&self) -> usize {
        self.b_z.len()
    }

    pub fn input_dim(&self) -> usize {
        self.a_m.ncols()
    }
}

/// Side-information vector of a raw embedding.
pub fn side_info_vector(x: &Vector, params: &SideInfoParams) -> Result<Vector> {
    if x.len() != params.input_dim() {
        return Err(Error::DimensionMismatch(format!(
            "embedding dimension {}, side-info branch expects {}",
            x.len(),
            params.input_dim()
        )));
    }
    let v = &params.a_m * x + &params.b_m;
    let n = v.norm();
    if n == 0.0 || !n.is_finite() {
        return Err(Error::DegenerateEmbedding);
    }
    let m = v / n;
    Ok(params.transform.apply(&(&params.a_z * m + &params.b_z)))
}

/// Which calibration stages a model carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CalStages {
    Global,
    /// Duration-dependent only.
    Dd,
    /// Side-information-dependent only.
    Sd,
    /// Duration-dependent followed by side-information-dependent.
    Dsd,
}

impl CalStages {
    pub fn has_duration(self) -> bool {
        matches!(self, CalStages::Dd | CalStages::Dsd)
    }

    pub fn has_side_info(self) -> bool {
        matches!(self, CalStages::Sd | CalStages::Dsd)
    }

    pub fn tag(self) -> &'static str {
        match self {
            CalStages::Global => "global",
            CalStages::Dd => "dd",
            CalStages::Sd => "sd",
            CalStages::Dsd => "dsd",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "global" => Ok(CalStages::Global),
            "dd" => Ok(CalStages::Dd),
            "sd" => Ok(CalStages::Sd),
            "dsd" => Ok(CalStages::Dsd),
            _ => Err(Error::StageMismatch(format!("unknown stage tag '{tag}'"))),
        }
    }
}

/// The calibration parameters of one model. Exactly the stages named by
/// `stages()` are present.
#[derive(Debug, Clone, PartialEq)]
pub enum Calibrator {
    Global(GlobalCal),
    Duration(DurCalParams),
    SideInfo(SideInfoParams),
    Both(DurCalParams, SideInfoParams),
}

impl Calibrator {
    pub fn stages(&self) -> CalStages {
        match self {
            Calibrator::Global(_) => CalStages::Global,
            Calibrator::Duration(_) => CalStages::Dd,
            Calibrator::SideInfo(_) => CalStages::Sd,
            Calibrator::Both(..) => CalStages::Dsd,
        }
    }

    pub fn duration(&self) -> Option<&DurCalParams> {
        match self {
            Calibrator::Duration(d) | Calibrator::Both(d, _) => Some(d),
            _ => None,
        }
    }

    pub fn side_info(&self) -> Option<&SideInfoParams> {
        match self {
            Calibrator::SideInfo(s) | Calibrator::Both(_, s) => Some(s),
            _ => None,
        }
    }

    pub fn duration_mut(&mut self) -> Option<&mut DurCalParams> {
        match self {
            Calibrator::Duration(d) | Calibrator::Both(d, _) => Some(d),
            _ => None,
        }
    }

    pub fn side_info_mut(&mut self) -> Option<&mut SideInfoParams> {
        match self {
            Calibrator::SideInfo(s) | Calibrator::Both(_, s) => Some(s),
            _ => None,
        }
    }

    /// Calibrated LLR of a raw score given per-side condition vectors. The
    /// duration features are ignored by stages without a duration block, and
    /// likewise for the side-information vectors.
    pub fn calibrate(
        &self,
        s: f64,
        e: Option<(&Vector, &Vector)>,
        z: Option<(&Vector, &Vector)>,
    ) -> Result<f64> {
        let need = |what: &str| Error::StageMismatch(format!("{what} required by this model"));
        let check = |b: &PolyBlock, u: &Vector, what: &str| {
            if u.len() == b.dim() {
                Ok(())
            } else {
                Err(Error::StageMismatch(format!(
                    "{what} has dimension {}, block expects {}",
                    u.len(),
                    b.dim()
                )))
            }
        };
        let mut l = s;
        match self {
            Calibrator::Global(g) => return Ok(g.apply(s)),
            Calibrator::Duration(d) | Calibrator::Both(d, _) => {
                let (e1, e2) = e.ok_or_else(|| need("duration features"))?;
                check(&d.alpha, e1, "duration features")?;
                check(&d.alpha, e2, "duration features")?;
                l = d.alpha.eval(e1, e2) * l + d.beta.eval(e1, e2);
            }
            Calibrator::SideInfo(_) => {}
        }
        if let Some(si) = self.side_info() {
            let (z1, z2) = z.ok_or_else(|| need("side-information vectors"))?;
            check(&si.alpha, z1, "side-information vector")?;
            check(&si.alpha, z2, "side-information vector")?;
            l = si.alpha.eval(z1, z2) * l + si.beta.eval(z1, z2);
        }
        Ok(l)
    }
}

/// Calibrated LLR for one trial.
pub fn calibrate(
    s: f64,
    e: Option<(&Vector, &Vector)>,
    z: Option<(&Vector, &Vector)>,
    params: &Calibrator,
) -> Result<f64> {
    params.calibrate(s, e, z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal, StandardNormal};

    fn random_block(d: usize, rng: &mut ChaCha8Rng) -> PolyBlock {
        let mut draw = || -> f64 { StandardNormal.sample(rng) };
        PolyBlock {
            lambda: Mat::from_fn(d, d, |_, _| draw()),
            gamma: Mat::from_fn(d, d, |_, _| draw()),
            c: Vector::from_fn(d, |_, _| draw()),
            k: draw(),
        }
    }

    fn random_side(d_in: usize, m: usize, s: usize, rng: &mut ChaCha8Rng) -> SideInfoParams {
        let n = Normal::new(0.0, 0.5).unwrap();
        SideInfoParams {
            a_m: Mat::from_fn(m, d_in, |_, _| n.sample(rng)),
            b_m: Vector::from_fn(m, |_, _| n.sample(rng)),
            a_z: Mat::from_fn(s, m, |_, _| n.sample(rng)),
            b_z: Vector::from_fn(s, |_, _| n.sample(rng)),
            transform: SideTransform::Identity,
            alpha: PolyBlock::constant(s, 1.0),
            beta: PolyBlock::constant(s, 0.0),
        }
    }

    #[test]
    fn wlog_at_center() {
        let e = duration_features(30.0, &DurationFeatures::default()).unwrap();
        let half = 0.5 * 30f64.ln();
        assert!((e[0] - half).abs() < 1e-12 && (e[1] - half).abs() < 1e-12);
        assert!((e[0] - 1.70060).abs() < 1e-5);
    }

    #[test]
    fn wlog_limits() {
        let kind = DurationFeatures::default();
        let long = duration_features(1e9, &kind).unwrap();
        assert!((long[0] - 1e9f64.ln()).abs() < 1e-6 && long[1].abs() < 1e-6);
        let short = duration_features(1e-9, &kind).unwrap();
        assert!(short[0].abs() < 1e-6 && (short[1] - 1e-9f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn bin_below_first_threshold() {
        let e = duration_features(4.0, &DurationFeatures::default_bins()).unwrap();
        assert_eq!(e.as_slice(), &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let e = duration_features(200.0, &DurationFeatures::default_bins()).unwrap();
        assert_eq!(e[5], 1.0);
    }

    #[test]
    fn non_positive_duration_is_rejected() {
        assert!(duration_features(0.0, &DurationFeatures::Log).is_err());
        assert!(duration_features(-3.0, &DurationFeatures::default()).is_err());
    }

    #[test]
    fn constant_block_and_scalar_expansion() {
        let b = PolyBlock::constant(3, 1.0);
        let u = Vector::from_vec(vec![0.3, -2.0, 5.0]);
        assert_eq!(poly_scalar(&b, &u, &(-&u)).unwrap(), 1.0);
        let (a, g, c0, k) = (0.7, -0.2, 1.5, 0.25);
        let b = PolyBlock {
            lambda: Mat::from_element(1, 1, a),
            gamma: Mat::from_element(1, 1, g),
            c: Vector::from_element(1, c0),
            k,
        };
        let one = Vector::from_element(1, 1.0);
        assert!((poly_scalar(&b, &one, &one).unwrap() - (2.0 * a + 2.0 * g + 2.0 * c0 + k)).abs() < 1e-15);
        assert!(poly_scalar(&b, &one, &Vector::zeros(2)).is_err());
    }

    #[test]
    fn blocks_are_swap_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b = random_block(4, &mut rng);
        for _ in 0..100 {
            let u = Vector::from_fn(4, |_, _| StandardNormal.sample(&mut rng));
            let v = Vector::from_fn(4, |_, _| StandardNormal.sample(&mut rng));
            assert!((b.eval(&u, &v) - b.eval(&v, &u)).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_side_info_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = random_side(5, 4, 3, &mut rng);
        p.a_z = Mat::zeros(3, 4);
        p.b_z = Vector::from_vec(vec![0.1, 0.2, -0.3]);
        let x = Vector::from_fn(5, |_, _| StandardNormal.sample(&mut rng));
        assert_eq!(side_info_vector(&x, &p).unwrap(), p.b_z);
    }

    #[test]
    fn softmax_and_log_softmax_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut p = random_side(5, 4, 3, &mut rng);
        let x = Vector::from_fn(5, |_, _| StandardNormal.sample(&mut rng));
        p.transform = SideTransform::Softmax;
        let z = side_info_vector(&x, &p).unwrap();
        assert!(z.iter().all(|v| *v > 0.0));
        assert!((z.sum() - 1.0).abs() < 1e-12);
        p.transform = SideTransform::LogSoftmax;
        let z = side_info_vector(&x, &p).unwrap();
        assert!(z.iter().all(|v| *v <= 0.0));
        assert!(log_sum_exp(&z).abs() < 1e-12);
        // m itself is unit norm
        let v = &p.a_m * &x + &p.b_m;
        assert!(((&v / v.norm()).norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pass_through_side_stage() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dur = DurCalParams {
            features: DurationFeatures::default(),
            alpha: random_block(2, &mut rng),
            beta: random_block(2, &mut rng),
        };
        let side = random_side(4, 3, 2, &mut rng);
        let both = Calibrator::Both(dur.clone(), side);
        let only = Calibrator::Duration(dur);
        let e1 = duration_features(7.0, &DurationFeatures::default()).unwrap();
        let e2 = duration_features(70.0, &DurationFeatures::default()).unwrap();
        let z1 = Vector::from_vec(vec![0.4, -1.0]);
        let z2 = Vector::from_vec(vec![2.0, 0.5]);
        for s in [-3.0, 0.0, 1.7] {
            let a = both.calibrate(s, Some((&e1, &e2)), Some((&z1, &z2))).unwrap();
            let b = only.calibrate(s, Some((&e1, &e2)), None).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn constant_duration_blocks_equal_global() {
        let g = GlobalCal { alpha: 1.3, beta: -2.1 };
        let cal = Calibrator::Duration(DurCalParams {
            features: DurationFeatures::default(),
            alpha: PolyBlock::constant(2, g.alpha),
            beta: PolyBlock::constant(2, g.beta),
        });
        let e1 = duration_features(5.0, &DurationFeatures::default()).unwrap();
        let e2 = duration_features(50.0, &DurationFeatures::default()).unwrap();
        for s in [-10.0, 0.3, 4.0] {
            assert_eq!(cal.calibrate(s, Some((&e1, &e2)), None).unwrap(), g.apply(s));
        }
    }

    #[test]
    fn trial_swap_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let cal = Calibrator::Both(
            DurCalParams {
                features: DurationFeatures::default(),
                alpha: random_block(2, &mut rng),
                beta: random_block(2, &mut rng),
            },
            SideInfoParams {
                alpha: random_block(3, &mut rng),
                beta: random_block(3, &mut rng),
                ..random_side(4, 3, 3, &mut rng)
            },
        );
        for _ in 0..50 {
            let e1 = Vector::from_fn(2, |_, _| StandardNormal.sample(&mut rng));
            let e2 = Vector::from_fn(2, |_, _| StandardNormal.sample(&mut rng));
            let z1 = Vector::from_fn(3, |_, _| StandardNormal.sample(&mut rng));
            let z2 = Vector::from_fn(3, |_, _| StandardNormal.sample(&mut rng));
            let a = cal.calibrate(0.8, Some((&e1, &e2)), Some((&z1, &z2))).unwrap();
            let b = cal.calibrate(0.8, Some((&e2, &e1)), Some((&z2, &z1))).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn bin_features_give_piecewise_constant_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let kind = DurationFeatures::default_bins();
        let alpha = random_block(6, &mut rng);
        let f = |a: f64, b: f64| {
            alpha.eval(
                &duration_features(a, &kind).unwrap(),
                &duration_features(b, &kind).unwrap(),
            )
        };
        assert_eq!(f(9.0, 70.0), f(15.5, 100.0));
        assert_eq!(f(4.0, 4.0), f(7.9, 1.0));
    }

    #[test]
    fn missing_stage_inputs_are_errors() {
        let cal = Calibrator::Duration(DurCalParams {
            features: DurationFeatures::Log,
            alpha: PolyBlock::constant(1, 1.0),
            beta: PolyBlock::constant(1, 0.0),
        });
        assert!(matches!(cal.calibrate(0.0, None, None), Err(Error::StageMismatch(_))));
    }
}
