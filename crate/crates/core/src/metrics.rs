//! Calibration-sensitive evaluation of LLR scores.
//!
//! All Cllr values are reported in bits, so the uninformative system (every
//! LLR zero) has Cllr 1.0 at π = 0.5. Internal optimization works in nats.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::data::TrialSet;
use crate::error::{Error, Result};
use crate::linalg::{logit, pairwise_sum, sigmoid, softplus};

/// LLRs with target / impostor labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    pub llrs: Vec<f64>,
    /// `true` for target trials.
    pub labels: Vec<bool>,
}

impl ScoreSet {
    pub fn new(llrs: Vec<f64>, labels: Vec<bool>) -> Result<Self> {
        if llrs.len() != labels.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} scores for {} labels",
                llrs.len(),
                labels.len()
            )));
        }
        if let Some(i) = llrs.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue { row: i, col: 0 });
        }
        Ok(Self { llrs, labels })
    }

    pub fn n_targets(&self) -> usize {
        self.labels.iter().filter(|l| **l).count()
    }

    pub fn n_impostors(&self) -> usize {
        self.labels.len() - self.n_targets()
    }

    fn check_both_classes(&self) -> Result<(usize, usize)> {
        let t = self.n_targets();
        let n = self.n_impostors();
        if t == 0 {
            return Err(Error::NoValidTargets);
        }
        if n == 0 {
            return Err(Error::NoValidImpostors);
        }
        Ok((t, n))
    }

    /// Scores transformed by `α s + β`.
    pub fn affine(&self, alpha: f64, beta: f64) -> ScoreSet {
        ScoreSet {
            llrs: self.llrs.iter().map(|s| alpha * s + beta).collect(),
            labels: self.labels.clone(),
        }
    }
}

fn check_prior(pi: f64) -> Result<f64> {
    if pi > 0.0 && pi < 1.0 {
        Ok(logit(pi))
    } else {
        Err(Error::InvalidArgument(format!("prior must be in (0, 1), got {pi}")))
    }
}

/// Prior-weighted binary cross-entropy in nats:
/// `π/T Σ_tgt −log σ(l+γ) + (1−π)/N Σ_imp −log σ(−l−γ)`, `γ = logit(π)`.
pub fn weighted_cross_entropy(scores: &ScoreSet, pi: f64) -> Result<f64> {
    let gamma = check_prior(pi)?;
    let (t, n) = scores.check_both_classes()?;
    let mut tgt = Vec::with_capacity(t);
    let mut imp = Vec::with_capacity(n);
    for (l, is_tgt) in scores.llrs.iter().zip(&scores.labels) {
        if *is_tgt {
            tgt.push(softplus(-(l + gamma)));
        } else {
            imp.push(softplus(l + gamma));
        }
    }
    Ok(pi / t as f64 * pairwise_sum(&tgt) + (1.0 - pi) / n as f64 * pairwise_sum(&imp))
}

/// Entropy of the prior `(pi, 1 - pi)` in nats; `ln 2` at `pi = 0.5`.
pub fn prior_entropy(pi: f64) -> f64 {
    -(pi * pi.ln() + (1.0 - pi) * (1.0 - pi).ln())
}

/// Actual Cllr at prior `pi`: the weighted cross-entropy divided by the
/// prior entropy, so all-zero LLRs score 1.0 at every prior. At `pi = 0.5`
/// this is the cross-entropy in bits.
pub fn cllr(scores: &ScoreSet, pi: f64) -> Result<f64> {
    Ok(weighted_cross_entropy(scores, pi)? / prior_entropy(pi))
}

/// Result of fitting `α s + β` to minimize the weighted cross-entropy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineFit {
    pub alpha: f64,
    pub beta: f64,
    /// Cllr after the transform, normalized as in [`cllr`].
    pub cllr: f64,
    pub converged: bool,
    pub iterations: usize,
}

const AFFINE_GRAD_TOL: f64 = 1e-9;
const AFFINE_MAX_ITERS: usize = 200;

/// Linear logistic regression: Newton's method with backtracking, started
/// from the identity map, stopping at gradient norm below 1e-9.
pub fn fit_affine(scores: &ScoreSet, pi: f64) -> Result<AffineFit> {
    let gamma = check_prior(pi)?;
    let (t, n) = scores.check_both_classes()?;
    let wt = pi / t as f64;
    let wn = (1.0 - pi) / n as f64;
    let objective = |a: f64, b: f64| -> f64 {
        scores
            .llrs
            .iter()
            .zip(&scores.labels)
            .map(|(s, tg)| {
                let l = a * s + b + gamma;
                if *tg {
                    wt * softplus(-l)
                } else {
                    wn * softplus(l)
                }
            })
            .sum()
    };
    let (mut a, mut b) = (1.0, 0.0);
    let mut f = objective(a, b);
    let mut converged = false;
    let mut iterations = 0;
    while iterations < AFFINE_MAX_ITERS {
        let (mut ga, mut gb) = (0.0, 0.0);
        let (mut haa, mut hab, mut hbb) = (0.0, 0.0, 0.0);
        for (s, tg) in scores.llrs.iter().zip(&scores.labels) {
            let l = a * s + b + gamma;
            let p = sigmoid(l);
            let (g, h) = if *tg {
                (-wt * (1.0 - p), wt * p * (1.0 - p))
            } else {
                (wn * p, wn * p * (1.0 - p))
            };
            ga += g * s;
            gb += g;
            haa += h * s * s;
            hab += h * s;
            hbb += h;
        }
        if (ga * ga + gb * gb).sqrt() < AFFINE_GRAD_TOL {
            converged = true;
            break;
        }
        iterations += 1;
        let det = haa * hbb - hab * hab;
        let (mut da, mut db) = if det > 1e-300 && det.is_finite() {
            (-(hbb * ga - hab * gb) / det, -(haa * gb - hab * ga) / det)
        } else {
            (-ga, -gb)
        };
        let slope = ga * da + gb * db;
        if slope >= 0.0 {
            da = -ga;
            db = -gb;
        }
        let mut step = 1.0;
        let mut improved = false;
        for _ in 0..60 {
            let (na, nb) = (a + step * da, b + step * db);
            let nf = objective(na, nb);
            if nf < f && nf <= f + 1e-4 * step * (ga * da + gb * db) {
                a = na;
                b = nb;
                f = nf;
                improved = true;
                break;
            }
            step *= 0.5;
        }
        if !improved {
            // No further decrease representable; treat a tiny gradient as
            // converged, otherwise report failure.
            converged = (ga * ga + gb * gb).sqrt() < 1e-7;
            break;
        }
    }
    Ok(AffineFit {
        alpha: a,
        beta: b,
        cllr: f / prior_entropy(pi),
        converged,
        iterations,
    })
}

/// Minimum Cllr over affine recalibrations of the scores themselves.
pub fn min_cllr_linear(scores: &ScoreSet, pi: f64) -> Result<AffineFit> {
    fit_affine(scores, pi)
}

/// Pool-adjacent-violators LLRs: the optimal monotone non-decreasing map of
/// the scores, returned in the input order. Tied scores share one value.
/// Blocks containing only one class map to ±∞.
pub fn pav_llrs(scores: &ScoreSet) -> Result<Vec<f64>> {
    let (t, n) = scores.check_both_classes()?;
    let blocks = pav_blocks(scores);
    let prior = logit(t as f64 / (t + n) as f64);
    let mut out = vec![0.0; scores.llrs.len()];
    for b in &blocks {
        let llr = if b.targets == 0.0 {
            f64::NEG_INFINITY
        } else if b.targets == b.total {
            f64::INFINITY
        } else {
            logit(b.targets / b.total) - prior
        };
        for &i in &b.members {
            out[i] = llr;
        }
    }
    Ok(out)
}

struct Block {
    targets: f64,
    total: f64,
    members: Vec<usize>,
}

/// PAV blocks in ascending score order.
fn pav_blocks(scores: &ScoreSet) -> Vec<Block> {
    let mut order: Vec<usize> = (0..scores.llrs.len()).collect();
    order.sort_by(|&i, &j| scores.llrs[i].total_cmp(&scores.llrs[j]));
    let mut stack: Vec<Block> = Vec::new();
    let mut k = 0;
    while k < order.len() {
        // Tied scores form one initial block.
        let v = scores.llrs[order[k]];
        let mut block = Block {
            targets: 0.0,
            total: 0.0,
            members: Vec::new(),
        };
        while k < order.len() && scores.llrs[order[k]] == v {
            let i = order[k];
            block.targets += if scores.labels[i] { 1.0 } else { 0.0 };
            block.total += 1.0;
            block.members.push(i);
            k += 1;
        }
        while let Some(prev) = stack.last() {
            if prev.targets / prev.total >= block.targets / block.total {
                let prev = stack.pop().expect("non-empty");
                block.targets += prev.targets;
                block.total += prev.total;
                let mut members = prev.members;
                members.extend(block.members);
                block.members = members;
            } else {
                break;
            }
        }
        stack.push(block);
    }
    stack
}

/// Minimum Cllr over all monotone non-decreasing recalibrations.
pub fn min_cllr_pav(scores: &ScoreSet, pi: f64) -> Result<f64> {
    let gamma = check_prior(pi)?;
    let (t, n) = scores.check_both_classes()?;
    let llrs = pav_llrs(scores)?;
    let mut total = 0.0;
    for (l, tg) in llrs.iter().zip(&scores.labels) {
        // Infinite LLRs only occur on the side they classify correctly.
        total += if *tg {
            if *l == f64::INFINITY {
                0.0
            } else {
                pi / t as f64 * softplus(-(l + gamma))
            }
        } else if *l == f64::NEG_INFINITY {
            0.0
        } else {
            (1.0 - pi) / n as f64 * softplus(l + gamma)
        };
    }
    Ok(total / prior_entropy(pi))
}

/// Bayes decision threshold on LLRs: `log(C_fa / C_miss) − logit(p)`.
pub fn bayes_threshold(p_target: f64, c_miss: f64, c_fa: f64) -> Result<f64> {
    let gamma = check_prior(p_target)?;
    Ok((c_fa / c_miss).ln() - gamma)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThresholdMode {
    /// Threshold at the Bayes decision threshold (scores read as LLRs).
    Bayes,
    /// Best threshold found by sweeping over the scores.
    Sweep,
}

/// Detection cost `p·P_miss + (1 − p)·P_fa` with unity costs. A trial is
/// accepted when its score is at or above the threshold.
pub fn dcf(scores: &ScoreSet, p_target: f64, mode: ThresholdMode) -> Result<f64> {
    check_prior(p_target)?;
    let (t, n) = scores.check_both_classes()?;
    let (t, n) = (t as f64, n as f64);
    match mode {
        ThresholdMode::Bayes => {
            let thr = bayes_threshold(p_target, 1.0, 1.0)?;
            let mut miss = 0.0;
            let mut fa = 0.0;
            for (s, tg) in scores.llrs.iter().zip(&scores.labels) {
                if *tg && *s < thr {
                    miss += 1.0;
                } else if !*tg && *s >= thr {
                    fa += 1.0;
                }
            }
            Ok(p_target * miss / t + (1.0 - p_target) * fa / n)
        }
        ThresholdMode::Sweep => {
            let mut order: Vec<usize> = (0..scores.llrs.len()).collect();
            order.sort_by(|&i, &j| scores.llrs[i].total_cmp(&scores.llrs[j]));
            // Threshold below everything: accept all.
            let mut miss = 0.0;
            let mut fa = n;
            let mut best = p_target * miss / t + (1.0 - p_target) * fa / n;
            let mut k = 0;
            while k < order.len() {
                let v = scores.llrs[order[k]];
                while k < order.len() && scores.llrs[order[k]] == v {
                    if scores.labels[order[k]] {
                        miss += 1.0;
                    } else {
                        fa -= 1.0;
                    }
                    k += 1;
                }
                best = best.min(p_target * miss / t + (1.0 - p_target) * fa / n);
            }
            Ok(best)
        }
    }
}

/// Equal error rate of the ROC convex hull.
pub fn eer(scores: &ScoreSet) -> Result<f64> {
    let (t, n) = scores.check_both_classes()?;
    let blocks = pav_blocks(scores);
    // Sweep from the highest block down: (P_fa, P_miss) hull vertices.
    let mut pfa = vec![0.0];
    let mut pmiss = vec![1.0];
    let (mut acc_t, mut acc_n) = (0.0, 0.0);
    for b in blocks.iter().rev() {
        acc_t += b.targets;
        acc_n += b.total - b.targets;
        pfa.push(acc_n / n as f64);
        pmiss.push(1.0 - acc_t / t as f64);
    }
    let mut best: f64 = 0.0;
    for i in 0..pfa.len() - 1 {
        let (x1, y1, x2, y2) = (pfa[i], pmiss[i], pfa[i + 1], pmiss[i + 1]);
        let seg = if x1 == x2 || y1 == y2 {
            0.0
        } else {
            // Line a·x + b·y = 1 through both points; it meets x = y at 1/(a+b).
            let det = x1 * y2 - x2 * y1;
            if det == 0.0 {
                0.0
            } else {
                let a = (y2 - y1) / det;
                let b = (x1 - x2) / det;
                1.0 / (a + b)
            }
        };
        best = best.max(seg);
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub cllr_p5_act: f64,
    pub cllr_p5_min: f64,
    pub cllr_p5_min_pav: f64,
    pub cllr_p01_act: f64,
    pub cllr_p01_min: f64,
    pub cllr_p01_min_pav: f64,
    pub dcf_act: f64,
    pub dcf_min: f64,
    pub eer: f64,
    pub n_tgt: usize,
    pub n_imp: usize,
}

pub const REPORT_COLUMNS: [&str; 11] = [
    "cllr_p5_act",
    "cllr_p5_min",
    "cllr_p5_min_pav",
    "cllr_p01_act",
    "cllr_p01_min",
    "cllr_p01_min_pav",
    "dcf_act",
    "dcf_min",
    "eer",
    "n_tgt",
    "n_imp",
];

/// Prior of the detection cost function.
pub const DCF_P_TARGET: f64 = 0.01;

impl MetricReport {
    pub fn compute(scores: &ScoreSet) -> Result<Self> {
        let (t, n) = scores.check_both_classes()?;
        Ok(Self {
            cllr_p5_act: cllr(scores, 0.5)?,
            cllr_p5_min: min_cllr_linear(scores, 0.5)?.cllr,
            cllr_p5_min_pav: min_cllr_pav(scores, 0.5)?,
            cllr_p01_act: cllr(scores, 0.01)?,
            cllr_p01_min: min_cllr_linear(scores, 0.01)?.cllr,
            cllr_p01_min_pav: min_cllr_pav(scores, 0.01)?,
            dcf_act: dcf(scores, DCF_P_TARGET, ThresholdMode::Bayes)?,
            dcf_min: dcf(scores, DCF_P_TARGET, ThresholdMode::Sweep)?,
            eer: eer(scores)?,
            n_tgt: t,
            n_imp: n,
        })
    }

    fn values(&self) -> [f64; 11] {
        [
            self.cllr_p5_act,
            self.cllr_p5_min,
            self.cllr_p5_min_pav,
            self.cllr_p01_act,
            self.cllr_p01_min,
            self.cllr_p01_min_pav,
            self.dcf_act,
            self.dcf_min,
            self.eer,
            self.n_tgt as f64,
            self.n_imp as f64,
        ]
    }

    /// Checks `act ≥ min` for every paired metric (slack 1e-10).
    pub fn check_invariants(&self) -> Result<()> {
        let pairs = [
            ("cllr_p5 (linear)", self.cllr_p5_act, self.cllr_p5_min),
            ("cllr_p5 (pav)", self.cllr_p5_act, self.cllr_p5_min_pav),
            ("cllr_p01 (linear)", self.cllr_p01_act, self.cllr_p01_min),
            ("cllr_p01 (pav)", self.cllr_p01_act, self.cllr_p01_min_pav),
            ("dcf", self.dcf_act, self.dcf_min),
        ];
        for (name, act, min) in pairs {
            if act < min - 1e-10 {
                return Err(Error::Invariant(format!(
                    "{name}: actual {act} below minimum {min}"
                )));
            }
        }
        Ok(())
    }

    /// Column-wise mean of several reports (counts are summed).
    pub fn average(reports: &[MetricReport]) -> Option<MetricReport> {
        if reports.is_empty() {
            return None;
        }
        let k = reports.len() as f64;
        let mean = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / k;
        Some(MetricReport {
            cllr_p5_act: mean(|r| r.cllr_p5_act),
            cllr_p5_min: mean(|r| r.cllr_p5_min),
            cllr_p5_min_pav: mean(|r| r.cllr_p5_min_pav),
            cllr_p01_act: mean(|r| r.cllr_p01_act),
            cllr_p01_min: mean(|r| r.cllr_p01_min),
            cllr_p01_min_pav: mean(|r| r.cllr_p01_min_pav),
            dcf_act: mean(|r| r.dcf_act),
            dcf_min: mean(|r| r.dcf_min),
            eer: mean(|r| r.eer),
            n_tgt: reports.iter().map(|r| r.n_tgt).sum(),
            n_imp: reports.iter().map(|r| r.n_imp).sum(),
        })
    }

    pub fn tsv_header() -> String {
        let mut h = String::from("system\tset\tcondition");
        for c in REPORT_COLUMNS {
            h.push('\t');
            h.push_str(c);
        }
        h
    }

    pub fn tsv_row(&self, system: &str, set: &str, condition: &str) -> String {
        let mut row = format!("{system}\t{set}\t{condition}");
        for (i, v) in self.values().iter().enumerate() {
            if i >= 9 {
                let _ = write!(row, "\t{}", *v as usize);
            } else {
                let _ = write!(row, "\t{v:.6}");
            }
        }
        row
    }

    pub fn key_values(&self) -> String {
        let mut out = String::new();
        for (name, v) in REPORT_COLUMNS.iter().zip(self.values()) {
            let _ = writeln!(out, "{name} = {v}");
        }
        out
    }
}

/// Writes `enroll<TAB>test<TAB>llr` lines.
pub fn format_scores(pairs: &[(String, String)], llrs: &[f64]) -> String {
    let mut out = String::new();
    for ((a, b), l) in pairs.iter().zip(llrs) {
        let _ = writeln!(out, "{a}\t{b}\t{l}");
    }
    out
}

/// Parses a score file into `((enroll, test), llr)` entries.
pub fn parse_scores(text: &str) -> Result<Vec<((String, String), f64)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').map(str::trim).collect();
        let loc = || format!("score line {}", n + 1);
        if f.len() != 3 {
            return Err(Error::parse(loc(), "expected enroll, test and llr"));
        }
        let v: f64 = f[2]
            .parse()
            .map_err(|_| Error::parse(loc(), format!("'{}' is not a number", f[2])))?;
        if !v.is_finite() {
            return Err(Error::parse(loc(), "non-finite llr"));
        }
        out.push(((f[0].to_string(), f[1].to_string()), v));
    }
    Ok(out)
}

/// Labels scores with the valid trials of `key`. Every key trial needs a
/// score (in either orientation).
pub fn join_scores(scores: &[((String, String), f64)], key: &TrialSet) -> Result<ScoreSet> {
    let mut by_pair: HashMap<(&str, &str), f64> = HashMap::with_capacity(scores.len());
    for ((a, b), v) in scores {
        if by_pair.insert((a.as_str(), b.as_str()), *v).is_some() {
            return Err(Error::DuplicateId(format!("{a}\t{b}")));
        }
    }
    let key = key.valid_only();
    let mut llrs = Vec::with_capacity(key.len());
    for (a, b) in &key.pairs {
        let v = by_pair
            .get(&(a.as_str(), b.as_str()))
            .or_else(|| by_pair.get(&(b.as_str(), a.as_str())))
            .ok_or_else(|| Error::UnknownId(format!("no score for trial {a} / {b}")))?;
        llrs.push(*v);
    }
    ScoreSet::new(llrs, key.labels.iter().map(|l| l.is_target()).collect())
}
