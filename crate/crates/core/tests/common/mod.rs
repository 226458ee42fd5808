#![allow(dead_code)]

use std::path::Path;

use dca_plda::synth::{generate, select_samples, speaker_index, DomainProfile, SynthCorpus, SynthSpec};
use dca_plda::training::{BatchMethod, DevSet, InitConfig, TrainConfig, TrainData};

pub const TRAIN_DOMAINS: [&str; 3] = ["a", "b", "c"];
pub const HELD: &str = "held";
/// Speakers `0..TRAIN_SPEAKERS` of each training domain train the backend,
/// the rest form its dev sets.
pub const TRAIN_SPEAKERS: usize = 140;
pub const SPEAKERS: usize = 200;

/// Three training domains with wide durations and one held-out domain with
/// short durations, each with its own condition shift.
pub fn desk_spec(seed: u64) -> SynthSpec {
    let mut s = SynthSpec {
        dim: 30,
        seed,
        condition_rank: 4,
        sigma_dom: 1.5,
        session_scale: 2.0,
        ..SynthSpec::default()
    };
    s.domains = [("a", 0.8), ("b", 1.0), ("c", 1.4), (HELD, 1.2)]
        .iter()
        .map(|&(name, eta)| {
            let mut d = DomainProfile::new(name, SPEAKERS);
            d.noise_scale = eta;
            d.duration_range = if name == HELD { (3.0, 15.0) } else { (4.0, 240.0) };
            d
        })
        .collect();
    s
}

pub fn desk_init() -> InitConfig {
    let mut c = InitConfig {
        lda_dim: 20,
        ..InitConfig::default()
    };
    c.shape.m_dim = 10;
    c.shape.s_dim = 3;
    c
}

pub fn desk_train(seed: u64) -> TrainConfig {
    TrainConfig {
        s1: 300,
        s2: 300,
        s3: 20,
        lr1: 0.01,
        lr2: 0.02,
        lr3: 0.0002,
        batch_size: 66,
        batch_method: BatchMethod::DomainBalanced,
        seed,
        ..TrainConfig::default()
    }
}

pub fn speakers(c: &SynthCorpus, domains: &[&str], lo: usize, hi: usize) -> SynthCorpus {
    select_samples(c, |s| {
        let k = speaker_index(&s.speaker_id).expect("generated speaker id");
        domains.contains(&s.domain_id.as_str()) && k >= lo && k < hi
    })
    .unwrap()
}

pub fn data_of(c: &SynthCorpus) -> TrainData {
    TrainData::new(&c.table, c.meta.clone()).unwrap()
}

pub fn dev_of(c: &SynthCorpus, name: &str) -> DevSet {
    DevSet::all_pairs(name, &data_of(c)).unwrap()
}

pub struct DeskSplit {
    pub corpus: SynthCorpus,
    pub train: TrainData,
    /// One dev set per training domain.
    pub devs: Vec<DevSet>,
}

pub fn desk_split(seed: u64) -> DeskSplit {
    let corpus = generate(&desk_spec(seed)).unwrap();
    let train = data_of(&speakers(&corpus, &TRAIN_DOMAINS, 0, TRAIN_SPEAKERS));
    let devs = TRAIN_DOMAINS
        .iter()
        .map(|d| dev_of(&speakers(&corpus, &[d], TRAIN_SPEAKERS, SPEAKERS), d))
        .collect();
    DeskSplit { corpus, train, devs }
}

pub fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn run_cli(args: &[&str]) -> i32 {
    let mut full = vec!["dcaplda"];
    full.extend_from_slice(args);
    dca_plda::cli::run(full)
}

pub fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

/// Writes a small synthetic corpus with `dcaplda synth` into `dir`.
pub fn small_synth(dir: &Path, seed: u64, extra: &[&str]) {
    let seed = format!("synth.seed={seed}");
    let mut args = vec![
        "synth",
        "--all-pairs-key",
        "--set",
        "synth.dim=8",
        "--set",
        "synth.domains=d1:12:2:2:0.8:4:60;d2:12:2:2:1.2:4:60",
        "--set",
        &seed,
    ];
    args.extend_from_slice(extra);
    args.extend_from_slice(&["--out", path_str(dir)]);
    assert_eq!(run_cli(&args), 0);
}
