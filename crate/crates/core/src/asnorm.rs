//! Cohort-based score normalization: S-Norm and adaptive S-Norm (AS-Norm1).

use std::collections::HashSet;
use std::path::Path;

use crate::data::{EmbeddingTable, IndexedTrial, Metadata};
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::plda::{score_pairs_blocked, ScoreForm};
use crate::preproc::PreprocParams;

const SCORE_BLOCK: usize = 256;

/// Mean and population standard deviation of the `n_top` largest scores.
pub fn top_stats(cohort_scores: &[f64], n_top: usize) -> Result<(f64, f64)> {
    let k = cohort_scores.len();
    if n_top == 0 || n_top > k {
        return Err(Error::InvalidArgument(format!(
            "n_top must be in 1..={k}, got {n_top}"
        )));
    }
    if cohort_scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite cohort score".into()));
    }
    let mut sorted = cohort_scores.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let top = &sorted[..n_top];
    let n = n_top as f64;
    let mean = top.iter().sum::<f64>() / n;
    let var = top.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std <= 0.0 || !std.is_finite() {
        return Err(Error::DegenerateCohort);
    }
    Ok((mean, std))
}

/// AS-Norm1: the average of test- and enrollment-normalized scores, each
/// using the top `n_top` cohort scores of its side.
pub fn asnorm1(s: f64, enroll_cohort: &[f64], test_cohort: &[f64], n_top: usize) -> Result<f64> {
    let (me, se) = top_stats(enroll_cohort, n_top)?;
    let (mt, st) = top_stats(test_cohort, n_top)?;
    Ok(0.5 * ((s - mt) / st + (s - me) / se))
}

/// Plain S-Norm: AS-Norm1 over the whole cohort.
pub fn snorm(s: f64, enroll_cohort: &[f64], test_cohort: &[f64]) -> Result<f64> {
    if enroll_cohort.len() != test_cohort.len() {
        return Err(Error::DimensionMismatch(format!(
            "cohort sizes differ: {} vs {}",
            enroll_cohort.len(),
            test_cohort.len()
        )));
    }
    asnorm1(s, enroll_cohort, test_cohort, enroll_cohort.len())
}

/// Parses a cohort list: one sample id per line, blank lines and `#`
/// comments ignored.
pub fn parse_cohort_list(text: &str) -> Result<Vec<String>> {
    let mut seen = HashSet::new();
    let mut ids = Vec::new();
    for line in text.lines() {
        let id = line.trim();
        if id.is_empty() || id.starts_with('#') {
            continue;
        }
        if !seen.insert(id.to_string()) {
            return Err(Error::DuplicateId(id.to_string()));
        }
        ids.push(id.to_string());
    }
    Ok(ids)
}

pub fn load_cohort_list(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_cohort_list(&text)
}

/// Preprocessed cohort embeddings.
#[derive(Debug, Clone)]
pub struct Cohort {
    pub ids: Vec<String>,
    pub domains: Vec<String>,
    pub w: Mat,
}

impl Cohort {
    pub fn new(
        table: &EmbeddingTable,
        meta: Option<&Metadata>,
        ids: &[String],
        preproc: &PreprocParams,
    ) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::InvalidArgument("empty cohort".into()));
        }
        let x = table.select(ids)?;
        let w = preproc.apply_rows(&x)?;
        let domains = match meta {
            Some(m) => ids
                .iter()
                .map(|id| m.require(id).map(|s| s.domain_id.clone()))
                .collect::<Result<_>>()?,
            None => vec![String::new(); ids.len()],
        };
        Ok(Self {
            ids: ids.to_vec(),
            domains,
            w,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Rejects cohorts that share a (speaker, session) with any of `samples`.
    pub fn check_sessions(&self, meta: &Metadata, samples: &[String]) -> Result<()> {
        let mut sessions = HashSet::new();
        for id in samples {
            let s = meta.require(id)?;
            sessions.insert((s.speaker_id.as_str(), s.session_id.as_str()));
        }
        for id in &self.ids {
            let s = meta.require(id)?;
            if sessions.contains(&(s.speaker_id.as_str(), s.session_id.as_str())) {
                return Err(Error::InvalidArgument(format!(
                    "cohort sample '{id}' shares session '{}' of speaker '{}' with a trial sample",
                    s.session_id, s.speaker_id
                )));
            }
        }
        Ok(())
    }

    /// Raw PLDA scores of every row of `w` against the cohort.
    pub fn scores(&self, form: &ScoreForm, w: &Mat) -> Result<Mat> {
        score_pairs_blocked(form, w, &self.w, SCORE_BLOCK)
    }
}

/// Applies AS-Norm1 to raw trial scores given per-sample cohort score rows.
pub fn normalize_trials(
    raw: &[f64],
    trials: &[IndexedTrial],
    cohort_scores: &Mat,
    n_top: usize,
) -> Result<Vec<f64>> {
    if raw.len() != trials.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} scores for {} trials",
            raw.len(),
            trials.len()
        )));
    }
    let rows: Vec<Vec<f64>> = (0..cohort_scores.nrows())
        .map(|r| cohort_scores.row(r).iter().copied().collect())
        .collect();
    let stats = rows
        .iter()
        .map(|r| top_stats(r, n_top))
        .collect::<Result<Vec<_>>>()?;
    raw.iter()
        .zip(trials)
        .map(|(s, t)| {
            let (me, se) = *stats.get(t.enroll).ok_or_else(|| out_of_range(t.enroll))?;
            let (mt, st) = *stats.get(t.test).ok_or_else(|| out_of_range(t.test))?;
            Ok(0.5 * ((s - mt) / st + (s - me) / se))
        })
        .collect()
}

fn out_of_range(i: usize) -> Error {
    Error::DimensionMismatch(format!("trial index {i} has no cohort score row"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn five_score_cohort_example() {
        let c = [1.0, 2.0, 3.0, 4.0, 5.0];
        // top two are {5, 4}: mean 4.5, population std 0.5
        let z = asnorm1(6.0, &c, &c, 2).unwrap();
        assert!((z - 3.0).abs() < 1e-12);
        let z = asnorm1(6.0, &c, &[0.0, 1.0, 2.0, 3.0, 4.0], 2).unwrap();
        assert!((z - 0.5 * (3.0 + 5.0)).abs() < 1e-12);
    }

    #[test]
    fn constant_cohort_is_degenerate() {
        let c = [3.0; 6];
        assert!(matches!(asnorm1(1.0, &c, &c, 6), Err(Error::DegenerateCohort)));
        let c = [1.0, 2.0, 7.0, 7.0];
        assert!(matches!(asnorm1(1.0, &c, &c, 2), Err(Error::DegenerateCohort)));
    }

    #[test]
    fn n_top_out_of_range() {
        let c = [1.0, 2.0];
        assert!(asnorm1(0.0, &c, &c, 3).is_err());
        assert!(asnorm1(0.0, &c, &c, 0).is_err());
    }

    #[test]
    fn symmetric_cohorts_reduce_to_standardization() {
        let c = [-1.0, 1.0, -1.0, 1.0];
        let z = snorm(2.5, &c, &c).unwrap();
        assert!((z - 2.5).abs() < 1e-12);
    }

    #[test]
    fn cohort_list_parsing() {
        let ids = parse_cohort_list("a\n\n# x\n b \n").unwrap();
        assert_eq!(ids, vec!["a", "b"]);
        assert!(matches!(parse_cohort_list("a\na\n"), Err(Error::DuplicateId(_))));
    }

    #[test]
    fn trial_normalization_uses_both_sides() {
        let mut cs = Mat::zeros(2, 3);
        cs.row_mut(0).copy_from_slice(&[0.0, 1.0, 2.0]);
        cs.row_mut(1).copy_from_slice(&[10.0, 12.0, 14.0]);
        let trials = [IndexedTrial { enroll: 0, test: 1, target: true }];
        let z = normalize_trials(&[4.0], &trials, &cs, 3).unwrap();
        let want = asnorm1(4.0, &[0.0, 1.0, 2.0], &[10.0, 12.0, 14.0], 3).unwrap();
        assert_eq!(z[0], want);
    }

    fn cohort() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-10.0..10.0f64, 3..40)
            .prop_filter("spread", |v| v.iter().any(|x| (x - v[0]).abs() > 1e-3))
    }

    proptest! {
        #[test]
        fn monotone_in_score(e in cohort(), t in cohort(), s1 in -20.0..20.0f64, ds in 1e-6..5.0f64, frac in 0.0..1.0f64) {
            let k = e.len().min(t.len());
            let n = ((frac * k as f64) as usize).clamp(2, k);
            let a = asnorm1(s1, &e, &t, n);
            let b = asnorm1(s1 + ds, &e, &t, n);
            if let (Ok(a), Ok(b)) = (a, b) {
                prop_assert!(a < b);
            }
        }

        #[test]
        fn full_cohort_ignores_order(mut e in cohort(), s in -20.0..20.0f64, seed in any::<u64>()) {
            let t = e.iter().map(|v| v * 0.5 + 1.0).collect::<Vec<_>>();
            let a = snorm(s, &e, &t).unwrap();
            let r = (seed % e.len() as u64) as usize;
            e.rotate_left(r);
            e.reverse();
            let b = snorm(s, &e, &t).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
