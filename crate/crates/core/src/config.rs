//! Run configuration in flat `section.key = value` text form.
//!
//! Every key has a default; files and command-line overrides only need the
//! keys they change. Unknown keys are rejected. [`RunConfig::to_text`] writes
//! the fully resolved configuration, one key per line, in a fixed order.

use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::backend::Architecture;
use crate::calibration::{DurationFeatures, SideTransform};
use crate::error::{Error, Result};
use crate::synth::{DomainProfile, SynthSpec};
use crate::training::{InitConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreConfig {
    /// Trials scored per block.
    pub block_size: usize,
    pub asnorm_n_top: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    /// Priors at which actual and minimum Cllr are reported in addition to
    /// the standard columns.
    pub priors: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOptions {
    pub spec: SynthSpec,
    /// Chunking range in seconds; no chunking when absent.
    pub chunk_range: Option<(f64, f64)>,
    pub chunk_per_sample: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub arch: Architecture,
    pub frames_per_second: f64,
    pub init: InitConfig,
    pub train: TrainConfig,
    /// Write a checkpoint every this many minibatches (0 disables).
    pub checkpoint_every: usize,
    pub score: ScoreConfig,
    pub eval: EvalConfig,
    pub synth: SynthOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            arch: Architecture::DPldaDsd,
            frames_per_second: crate::data::DEFAULT_FRAMES_PER_SECOND,
            init: InitConfig::default(),
            train: TrainConfig::default(),
            checkpoint_every: 0,
            score: ScoreConfig {
                block_size: 4096,
                asnorm_n_top: 900,
            },
            eval: EvalConfig { priors: Vec::new() },
            synth: SynthOptions {
                spec: SynthSpec::default(),
                chunk_range: None,
                chunk_per_sample: 1,
            },
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{value}'")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<f64>> {
    if value.is_empty() || value == "none" {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn join(v: &[f64]) -> String {
    if v.is_empty() {
        return "none".into();
    }
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn features_kind(f: &DurationFeatures) -> &'static str {
    f.kind()
}

fn domain_text(d: &DomainProfile) -> String {
    format!(
        "{}:{}:{}:{}:{}:{}:{}",
        d.name,
        d.n_speakers,
        d.sessions_per_speaker,
        d.samples_per_session,
        d.noise_scale,
        d.duration_range.0,
        d.duration_range.1
    )
}

/// `name:speakers:sessions:samples:noise_scale:min_dur:max_dur`, entries
/// separated by `;`.
fn parse_domains(key: &str, value: &str) -> Result<Vec<DomainProfile>> {
    value
        .split(';')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|entry| {
            let f: Vec<&str> = entry.split(':').map(str::trim).collect();
            if f.len() != 7 {
                return Err(Error::Config(format!(
                    "{key}: '{entry}' should be name:speakers:sessions:samples:noise:min_dur:max_dur"
                )));
            }
            let mut d = DomainProfile::new(f[0], parse(key, f[1])?);
            d.sessions_per_speaker = parse(key, f[2])?;
            d.samples_per_session = parse(key, f[3])?;
            d.noise_scale = parse(key, f[4])?;
            d.duration_range = (parse(key, f[5])?, parse(key, f[6])?);
            Ok(d)
        })
        .collect()
}

impl RunConfig {
    /// All keys with their current values, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let i = &self.init;
        let t = &self.train;
        let s = &self.synth.spec;
        let (center, slope) = match &i.shape.features {
            DurationFeatures::WLog { center, slope } => (*center, *slope),
            _ => (30.0, 2.0),
        };
        let thresholds = match &i.shape.features {
            DurationFeatures::Bin { thresholds } => thresholds.clone(),
            _ => match DurationFeatures::default_bins() {
                DurationFeatures::Bin { thresholds } => thresholds,
                _ => unreachable!(),
            },
        };
        let overrides = t
            .l2_overrides
            .iter()
            .map(|(p, w)| format!("{p}:{w}"))
            .collect::<Vec<_>>()
            .join(",");
        vec![
            ("model.arch", self.arch.name().to_string()),
            ("data.frames_per_second", self.frames_per_second.to_string()),
            ("init.lda_dim", i.lda_dim.to_string()),
            ("init.weighting", i.weighting.to_string()),
            ("init.em_max_iters", i.em.max_iters.to_string()),
            ("init.em_rel_tol", i.em.rel_tol.to_string()),
            ("init.ridge_rel", i.ridge_rel.to_string()),
            ("init.cal_speakers", i.cal_speakers.to_string()),
            ("calib.duration_features", features_kind(&i.shape.features).to_string()),
            ("calib.bin_thresholds", join(&thresholds)),
            ("calib.wlog_center", center.to_string()),
            ("calib.wlog_slope", slope.to_string()),
            ("side.m_dim", i.shape.m_dim.to_string()),
            ("side.s_dim", i.shape.s_dim.to_string()),
            ("side.transform", i.shape.transform.to_string()),
            ("train.s1", t.s1.to_string()),
            ("train.s2", t.s2.to_string()),
            ("train.s3", t.s3.to_string()),
            ("train.lr1", t.lr1.to_string()),
            ("train.lr2", t.lr2.to_string()),
            ("train.lr3", t.lr3.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.batch_method", t.batch_method.to_string()),
            ("train.pi", t.pi_train.to_string()),
            ("train.l2_weight", t.l2_weight.to_string()),
            ("train.l2_overrides", if overrides.is_empty() { "none".into() } else { overrides }),
            ("train.grad_clip_norm", t.grad_clip_norm.to_string()),
            ("train.n_seeds", t.n_seeds.to_string()),
            ("train.seed", t.seed.to_string()),
            ("train.adam_beta1", t.adam_beta1.to_string()),
            ("train.adam_beta2", t.adam_beta2.to_string()),
            ("train.adam_eps", t.adam_eps.to_string()),
            ("train.checkpoint_every", self.checkpoint_every.to_string()),
            ("score.block_size", self.score.block_size.to_string()),
            ("score.asnorm_n_top", self.score.asnorm_n_top.to_string()),
            ("eval.priors", join(&self.eval.priors)),
            ("synth.dim", s.dim.to_string()),
            ("synth.between_scale", s.between_scale.to_string()),
            ("synth.between_decay", s.between_decay.to_string()),
            ("synth.within_scale", s.within_scale.to_string()),
            ("synth.session_scale", s.session_scale.to_string()),
            ("synth.sigma_dom", s.sigma_dom.to_string()),
            ("synth.condition_rank", s.condition_rank.to_string()),
            ("synth.duration_ref", s.duration_ref.to_string()),
            ("synth.duration_exponent", s.duration_exponent.to_string()),
            ("synth.speaker_shift_scale", s.speaker_shift_scale.to_string()),
            ("synth.domains", s.domains.iter().map(domain_text).collect::<Vec<_>>().join(";")),
            ("synth.seed", s.seed.to_string()),
            (
                "synth.chunk_range",
                self.synth.chunk_range.map_or("none".into(), |(a, b)| format!("{a},{b}")),
            ),
            ("synth.chunk_per_sample", self.synth.chunk_per_sample.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let i = &mut self.init;
        let t = &mut self.train;
        let s = &mut self.synth.spec;
        match key {
            "model.arch" => self.arch = v.parse().map_err(|e: Error| Error::Config(e.to_string()))?,
            "data.frames_per_second" => self.frames_per_second = parse(key, v)?,
            "init.lda_dim" => i.lda_dim = parse(key, v)?,
            "init.weighting" => i.weighting = v.parse().map_err(|e: Error| Error::Config(e.to_string()))?,
            "init.em_max_iters" => i.em.max_iters = parse(key, v)?,
            "init.em_rel_tol" => i.em.rel_tol = parse(key, v)?,
            "init.ridge_rel" => i.ridge_rel = parse(key, v)?,
            "init.cal_speakers" => i.cal_speakers = parse(key, v)?,
            "calib.duration_features" => {
                i.shape.features = match v {
                    "log" => DurationFeatures::Log,
                    "bin" => DurationFeatures::default_bins(),
                    "wlog" => DurationFeatures::default(),
                    _ => return Err(Error::Config(format!("{key}: expected log, bin or wlog, got '{v}'"))),
                }
            }
            "calib.bin_thresholds" => {
                let th = parse_list(key, v)?;
                if let DurationFeatures::Bin { thresholds } = &mut i.shape.features {
                    *thresholds = th;
                }
            }
            "calib.wlog_center" => {
                if let DurationFeatures::WLog { center, .. } = &mut i.shape.features {
                    *center = parse(key, v)?;
                }
            }
            "calib.wlog_slope" => {
                if let DurationFeatures::WLog { slope, .. } = &mut i.shape.features {
                    *slope = parse(key, v)?;
                }
            }
            "side.m_dim" => i.shape.m_dim = parse(key, v)?,
            "side.s_dim" => i.shape.s_dim = parse(key, v)?,
            "side.transform" => {
                i.shape.transform = v.parse::<SideTransform>().map_err(|e| Error::Config(e.to_string()))?
            }
            "train.s1" => t.s1 = parse(key, v)?,
            "train.s2" => t.s2 = parse(key, v)?,
            "train.s3" => t.s3 = parse(key, v)?,
            "train.lr1" => t.lr1 = parse(key, v)?,
            "train.lr2" => t.lr2 = parse(key, v)?,
            "train.lr3" => t.lr3 = parse(key, v)?,
            "train.batch_size" => t.batch_size = parse(key, v)?,
            "train.batch_method" => t.batch_method = v.parse().map_err(|e: Error| Error::Config(e.to_string()))?,
            "train.pi" => t.pi_train = parse(key, v)?,
            "train.l2_weight" => t.l2_weight = parse(key, v)?,
            "train.l2_overrides" => {
                t.l2_overrides = if v.is_empty() || v == "none" {
                    Vec::new()
                } else {
                    v.split(',')
                        .map(|e| {
                            let (p, w) = e.trim().rsplit_once(':').ok_or_else(|| {
                                Error::Config(format!("{key}: '{e}' should be prefix:weight"))
                            })?;
                            Ok((p.to_string(), parse(key, w)?))
                        })
                        .collect::<Result<_>>()?
                }
            }
            "train.grad_clip_norm" => t.grad_clip_norm = parse(key, v)?,
            "train.n_seeds" => t.n_seeds = parse(key, v)?,
            "train.seed" => t.seed = parse(key, v)?,
            "train.adam_beta1" => t.adam_beta1 = parse(key, v)?,
            "train.adam_beta2" => t.adam_beta2 = parse(key, v)?,
            "train.adam_eps" => t.adam_eps = parse(key, v)?,
            "train.checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "score.block_size" => self.score.block_size = parse(key, v)?,
            "score.asnorm_n_top" => self.score.asnorm_n_top = parse(key, v)?,
            "eval.priors" => self.eval.priors = parse_list(key, v)?,
            "synth.dim" => s.dim = parse(key, v)?,
            "synth.between_scale" => s.between_scale = parse(key, v)?,
            "synth.between_decay" => s.between_decay = parse(key, v)?,
            "synth.within_scale" => s.within_scale = parse(key, v)?,
            "synth.session_scale" => s.session_scale = parse(key, v)?,
            "synth.sigma_dom" => s.sigma_dom = parse(key, v)?,
            "synth.condition_rank" => s.condition_rank = parse(key, v)?,
            "synth.duration_ref" => s.duration_ref = parse(key, v)?,
            "synth.duration_exponent" => s.duration_exponent = parse(key, v)?,
            "synth.speaker_shift_scale" => s.speaker_shift_scale = parse(key, v)?,
            "synth.domains" => s.domains = parse_domains(key, v)?,
            "synth.seed" => s.seed = parse(key, v)?,
            "synth.chunk_range" => {
                self.synth.chunk_range = match parse_list(key, v)?.as_slice() {
                    [] => None,
                    [a, b] => Some((*a, *b)),
                    _ => return Err(Error::Config(format!("{key}: expected 'min,max' or 'none'"))),
                }
            }
            "synth.chunk_per_sample" => self.synth.chunk_per_sample = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        // Feature kinds reset their parameters, so they are applied first.
        let mut lines = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value'", n + 1)))?;
            lines.push((k.trim().to_string(), v.trim().to_string()));
        }
        lines.sort_by_key(|(k, _)| k != "calib.duration_features");
        for (k, v) in lines {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        self.apply_text(kv)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_text(&text)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    /// Hex SHA-256 of [`to_text`](Self::to_text).
    pub fn sha256(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.init.shape.features.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.synth.spec.validate()?;
        if self.init.lda_dim == 0 || self.init.shape.s_dim == 0 || self.init.shape.m_dim == 0 {
            return Err(Error::Config("dimensions must be positive".into()));
        }
        if self.init.shape.s_dim > self.init.shape.m_dim {
            return Err(Error::Config(format!(
                "side.s_dim ({}) exceeds side.m_dim ({})",
                self.init.shape.s_dim, self.init.shape.m_dim
            )));
        }
        if !(self.frames_per_second > 0.0) {
            return Err(Error::Config("data.frames_per_second must be positive".into()));
        }
        if self.score.block_size == 0 || self.score.asnorm_n_top == 0 {
            return Err(Error::Config("score.block_size and score.asnorm_n_top must be positive".into()));
        }
        if self.eval.priors.iter().any(|p| !(*p > 0.0 && *p < 1.0)) {
            return Err(Error::Config("eval.priors must lie in (0, 1)".into()));
        }
        if let Some((a, b)) = self.synth.chunk_range {
            if !(a > 0.0 && a <= b) {
                return Err(Error::Config("synth.chunk_range needs 0 < min <= max".into()));
            }
        }
        if self.synth.chunk_per_sample == 0 {
            return Err(Error::Config("synth.chunk_per_sample must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolved_text_round_trips() {
        let c = RunConfig::default();
        let back = RunConfig::from_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.sha256(), c.sha256());
    }

    #[test]
    fn every_key_is_settable() {
        let c = RunConfig::default();
        for (k, v) in c.entries() {
            let mut d = RunConfig::default();
            d.set(k, &v).unwrap_or_else(|e| panic!("{k}: {e}"));
            assert_eq!(d, c, "{k}");
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let e = RunConfig::from_text("train.s4 = 3").unwrap_err();
        assert!(e.to_string().contains("train.s4"));
        assert!(RunConfig::from_text("train.s1 3").is_err());
        assert!(RunConfig::from_text("train.s1 = many").is_err());
    }

    #[test]
    fn overrides_change_values() {
        let mut c = RunConfig::from_text("# comment\ntrain.s1 = 10  # inline\nmodel.arch = dca-plda\n").unwrap();
        assert_eq!(c.train.s1, 10);
        assert_eq!(c.arch, Architecture::DPldaDsd);
        c.apply_override("train.l2_overrides=side.:0.01,dur.alpha:0").unwrap();
        assert_eq!(c.train.l2_overrides, vec![("side.".to_string(), 0.01), ("dur.alpha".to_string(), 0.0)]);
        c.apply_override("synth.chunk_range = 4,16").unwrap();
        assert_eq!(c.synth.chunk_range, Some((4.0, 16.0)));
        assert_ne!(c.sha256(), RunConfig::default().sha256());
    }

    #[test]
    fn feature_kind_applies_before_its_parameters() {
        let c = RunConfig::from_text("calib.bin_thresholds = 5,10\ncalib.duration_features = bin\n").unwrap();
        assert_eq!(c.init.shape.features, DurationFeatures::Bin { thresholds: vec![5.0, 10.0] });
        let back = RunConfig::from_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn domains_parse() {
        let mut c = RunConfig::default();
        c.set("synth.domains", "x:10:3:2:1.5:4:60; y:5:2:1:1:10:20").unwrap();
        assert_eq!(c.synth.spec.domains.len(), 2);
        assert_eq!(c.synth.spec.domains[1].duration_range, (10.0, 20.0));
        assert!(c.set("synth.domains", "x:10").is_err());
        assert!(c.validate().is_ok());
    }
}
