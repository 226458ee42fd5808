//! Command-line front end: `train`, `score`, `eval`, `synth` and `info`.
//!
//! Exit codes: 0 on success, 2 for invalid input or configuration, 3 for
//! numerical failures.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use sha2::{Digest, Sha256};

use crate::asnorm::{load_cohort_list, normalize_trials, Cohort};
use crate::backend::{Architecture, BackendParams};
use crate::config::RunConfig;
use crate::data::{build_trials, load_embeddings, write_file, EmbeddingTable, IndexedTrial, Metadata, TrialPolicy, TrialSet};
use crate::error::{Error, Result};
use crate::metrics::{cllr, fit_affine, format_scores, join_scores, min_cllr_linear, parse_scores, MetricReport, ScoreSet};
use crate::modelfile::{load_checkpoint, load_model, save_checkpoint, save_model, Provenance};
use crate::synth::{chunk, generate};
use crate::training::{generative_init, log_header, train_resumable, DevSet, TrainData};

#[derive(Debug, Parser)]
#[command(name = "dcaplda", version, about = "PLDA backend with condition-aware calibration")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a backend and write model, log and resolved config.
    Train(TrainArgs),
    /// Score a trial list with a trained model.
    Score(ScoreArgs),
    /// Compute calibration and discrimination metrics for score files.
    Eval(EvalArgs),
    /// Generate a synthetic corpus.
    Synth(SynthArgs),
    /// Print parameter counts per architecture.
    Info(InfoArgs),
}

#[derive(Debug, Args, Clone, Default)]
pub struct ConfigArgs {
    /// Configuration file (`section.key = value` lines).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set train.s1=500`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        for kv in &self.overrides {
            cfg.apply_override(kv)?;
        }
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long)]
    pub meta: PathBuf,
    /// Development set `NAME=EMBEDDINGS,META[,KEY]`; all valid pairs are
    /// used when no key is given. Repeatable.
    #[arg(long = "dev", value_name = "SPEC")]
    pub devs: Vec<String>,
    #[arg(long)]
    pub arch: Option<String>,
    /// Number of training runs with consecutive seeds.
    #[arg(long)]
    pub seeds: Option<usize>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub embeddings: PathBuf,
    /// Metadata with durations (needed by duration-dependent models).
    #[arg(long)]
    pub meta: Option<PathBuf>,
    /// Trial key: `enroll<TAB>test[<TAB>label]`.
    #[arg(long)]
    pub key: PathBuf,
    /// Cohort list; enables AS-Norm of the raw scores.
    #[arg(long)]
    pub cohort: Option<PathBuf>,
    /// Labeled key used to fit a global calibration of normalized scores.
    #[arg(long)]
    pub cal_key: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Test set `NAME=SCORES,KEY`. Repeatable.
    #[arg(long = "trials", value_name = "SPEC", required = true)]
    pub sets: Vec<String>,
    #[arg(long, default_value = "system")]
    pub system: String,
    #[arg(long, default_value = "all")]
    pub condition: String,
    /// Report TSV; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Also write a key with every valid trial of the corpus.
    #[arg(long)]
    pub all_pairs_key: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InfoArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Only this architecture (default: all).
    #[arg(long)]
    pub arch: Option<String>,
    /// Embedding dimension D.
    #[arg(long, default_value_t = 512)]
    pub input_dim: usize,
}

/// Parses `args` (including the program name) and runs the command;
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cmd: &Command) -> Result<()> {
    match cmd {
        Command::Train(a) => cmd_train(a),
        Command::Score(a) => cmd_score(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Info(a) => cmd_info(a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))
}

fn load_meta(path: &Path, cfg: &RunConfig) -> Result<Metadata> {
    Metadata::load(path, cfg.frames_per_second)
}

/// `NAME=A,B[,C]`.
fn split_spec(spec: &str, min: usize, max: usize) -> Result<(String, Vec<PathBuf>)> {
    let (name, rest) = spec
        .split_once('=')
        .ok_or_else(|| Error::InvalidArgument(format!("'{spec}' should look like NAME=PATH,PATH")))?;
    let parts: Vec<PathBuf> = rest.split(',').map(PathBuf::from).collect();
    if name.is_empty() || parts.len() < min || parts.len() > max {
        return Err(Error::InvalidArgument(format!("malformed set specification '{spec}'")));
    }
    Ok((name.to_string(), parts))
}

fn load_dev(spec: &str, cfg: &RunConfig) -> Result<DevSet> {
    let (name, p) = split_spec(spec, 2, 3)?;
    let table = load_embeddings(&p[0])?;
    let meta = load_meta(&p[1], cfg)?;
    meta.check_against(&table)?;
    match p.get(2) {
        Some(k) => {
            let text = read_text(k)?;
            let trials = build_trials(&meta, TrialPolicy::ExplicitKey(&text))?;
            DevSet::new(&name, &table, &meta, &trials)
        }
        None => DevSet::all_pairs(&name, &TrainData::new(&table, meta)?),
    }
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut cfg = a.config.resolve()?;
    if let Some(arch) = &a.arch {
        cfg.arch = arch.parse()?;
    }
    if let Some(n) = a.seeds {
        cfg.train.n_seeds = n;
    }
    cfg.validate()?;
    create_dir(&a.out)?;
    let config_text = cfg.to_text();
    write_file(&a.out.join("config.txt"), config_text.as_bytes())?;
    let prov = Provenance {
        config_sha256: cfg.sha256(),
        seed: cfg.train.seed,
        lda_weighted: true,
    };

    let table = load_embeddings(&a.embeddings)?;
    let meta = load_meta(&a.meta, &cfg)?;
    meta.check_against(&table)?;
    let data = TrainData::new(&table, meta)?;
    let devs = a.devs.iter().map(|s| load_dev(s, &cfg)).collect::<Result<Vec<_>>>()?;
    if cfg.arch.is_trained() && cfg.train.s2 + cfg.train.s3 > 0 && devs.is_empty() {
        return Err(Error::Config("stages 2 and 3 need at least one --dev set".into()));
    }

    let resume = match &a.resume {
        Some(p) => {
            let (ck, ck_prov) = load_checkpoint(p)?;
            if ck_prov.config_sha256 != prov.config_sha256 {
                return Err(Error::Config(format!(
                    "checkpoint {} was written with a different configuration",
                    p.display()
                )));
            }
            Some(ck)
        }
        None => None,
    };

    info!("generative initialization");
    let init = generative_init(&data, &cfg.init, cfg.train.batch_method, cfg.train.pi_train, cfg.train.seed)?;
    let ck_path = a.out.join("checkpoint.dcam");
    let every = cfg.checkpoint_every;
    let outcome = train_resumable(
        &init,
        &data,
        cfg.arch,
        &cfg.init,
        &cfg.train,
        &devs,
        resume,
        &mut |ck| {
            if every > 0 && ck.state.step % every == 0 {
                save_checkpoint(&ck_path, ck, &prov)?;
            }
            Ok(())
        },
    )?;

    let prov = Provenance {
        seed: outcome.best_seed,
        ..prov
    };
    save_model(a.out.join("model.dcam"), &outcome.params, &prov)?;

    let mut log = log_header(&devs);
    log.push('\n');
    for r in &outcome.log {
        log.push_str(&r.to_tsv(devs.len()));
        log.push('\n');
    }
    write_file(&a.out.join("train_log.tsv"), log.as_bytes())?;

    let mut seeds = String::from("seed\tdev_metric\tselected\n");
    for s in &outcome.seeds {
        let _ = writeln!(
            seeds,
            "{}\t{}\t{}",
            s.seed,
            s.dev_metric,
            u8::from(s.seed == outcome.best_seed)
        );
    }
    write_file(&a.out.join("seeds.tsv"), seeds.as_bytes())?;
    info!(
        "{}: kept seed {} ({} parameters)",
        cfg.arch,
        outcome.best_seed,
        outcome.params.n_params()
    );
    Ok(())
}

/// Scores `trials` in blocks, each block evaluating only the rows it uses.
pub fn score_blockwise(
    params: &BackendParams,
    table: &EmbeddingTable,
    durations: Option<&[f64]>,
    trials: &[IndexedTrial],
    block: usize,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(trials.len());
    for chunk in trials.chunks(block.max(1)) {
        let mut rows: Vec<usize> = chunk.iter().flat_map(|t| [t.enroll, t.test]).collect();
        rows.sort_unstable();
        rows.dedup();
        let pos = |r: usize| rows.binary_search(&r).expect("row collected above");
        let local: Vec<IndexedTrial> = chunk
            .iter()
            .map(|t| IndexedTrial {
                enroll: pos(t.enroll),
                test: pos(t.test),
                target: t.target,
            })
            .collect();
        let x = table.matrix().select_rows(rows.iter());
        let d: Option<Vec<f64>> = durations.map(|d| rows.iter().map(|&r| d[r]).collect());
        out.extend(params.llrs(&x, d.as_deref(), &local)?);
    }
    Ok(out)
}

fn durations_for(table: &EmbeddingTable, meta: &Metadata) -> Result<Vec<f64>> {
    table
        .ids()
        .iter()
        .map(|id| {
            meta.get(id)
                .map(|s| s.duration_s)
                .ok_or_else(|| Error::MissingDuration(id.clone()))
        })
        .collect()
}

pub fn cmd_score(a: &ScoreArgs) -> Result<()> {
    let cfg = a.config.resolve()?;
    cfg.validate()?;
    let (params, _) = load_model(&a.model)?;
    let table = load_embeddings(&a.embeddings)?;
    if table.dim() != params.input_dim() {
        return Err(Error::DimensionMismatch(format!(
            "embeddings have dimension {}, model expects {}",
            table.dim(),
            params.input_dim()
        )));
    }
    let meta = a.meta.as_deref().map(|p| load_meta(p, &cfg)).transpose()?;
    let key = TrialSet::parse_key(&read_text(&a.key)?, false)?;
    let trials = key.index_into(&table)?;
    let needs_durations = params.arch.stages().has_duration();
    let durations = match (&meta, needs_durations) {
        (Some(m), true) => Some(durations_for(&table, m)?),
        (None, true) => {
            return Err(Error::MissingDuration(format!(
                "(model {} needs --meta with durations)",
                params.arch
            )))
        }
        _ => None,
    };

    let llrs = match &a.cohort {
        None => score_blockwise(&params, &table, durations.as_deref(), &trials, cfg.score.block_size)?,
        Some(list) => {
            let raw = raw_scores(&params, &table, &trials, cfg.score.block_size)?;
            let ids = load_cohort_list(list)?;
            let cohort = Cohort::new(&table, meta.as_ref(), &ids, &params.preproc)?;
            if let Some(m) = &meta {
                let used: Vec<String> = trials
                    .iter()
                    .flat_map(|t| [table.ids()[t.enroll].clone(), table.ids()[t.test].clone()])
                    .collect();
                cohort.check_sessions(m, &used)?;
            }
            let w = params.preproc.apply_rows(table.matrix())?;
            let cs = cohort.scores(&params.form, &w)?;
            let n_top = cfg.score.asnorm_n_top.min(cohort.len());
            if n_top < cfg.score.asnorm_n_top {
                warn!("cohort has {} samples; using n_top = {n_top}", cohort.len());
            }
            let norm = normalize_trials(&raw, &trials, &cs, n_top)?;
            match &a.cal_key {
                Some(k) => {
                    let ck = TrialSet::parse_key(&read_text(k)?, true)?;
                    let ct = ck.index_into(&table)?;
                    let craw = raw_scores(&params, &table, &ct, cfg.score.block_size)?;
                    let cnorm = normalize_trials(&craw, &ct, &cs, n_top)?;
                    let set = ScoreSet::new(cnorm, ct.iter().map(|t| t.target).collect())?;
                    let fit = fit_affine(&set, cfg.train.pi_train)?;
                    norm.iter().map(|s| fit.alpha * s + fit.beta).collect()
                }
                None => {
                    warn!("AS-Norm scores are not calibrated; pass --cal-key to calibrate them");
                    norm
                }
            }
        }
    };
    let valid: Vec<(String, String)> = key.valid_only().pairs;
    write_file(&a.out, format_scores(&valid, &llrs).as_bytes())?;
    let cfg_path = PathBuf::from(format!("{}.config.txt", a.out.display()));
    write_file(&cfg_path, cfg.to_text().as_bytes())
}

fn raw_scores(params: &BackendParams, table: &EmbeddingTable, trials: &[IndexedTrial], block: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(trials.len());
    for chunk in trials.chunks(block.max(1)) {
        let mut rows: Vec<usize> = chunk.iter().flat_map(|t| [t.enroll, t.test]).collect();
        rows.sort_unstable();
        rows.dedup();
        let x = table.matrix().select_rows(rows.iter());
        let w = params.preproc.apply_rows(&x)?;
        let pos = |r: usize| rows.binary_search(&r).expect("row collected above");
        for t in chunk {
            let (i, j) = (pos(t.enroll), pos(t.test));
            out.push(params.form.score(&w.row(i).transpose(), &w.row(j).transpose()));
        }
    }
    Ok(out)
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let cfg = a.config.resolve()?;
    cfg.validate()?;
    let extra: Vec<f64> = cfg
        .eval
        .priors
        .iter()
        .copied()
        .filter(|p| *p != 0.5 && *p != 0.01)
        .collect();
    let mut header = MetricReport::tsv_header();
    for p in &extra {
        let _ = write!(header, "\tcllr_p{p}_act\tcllr_p{p}_min");
    }
    let mut rows = vec![header];
    let mut reports = Vec::new();
    let mut extras: Vec<Vec<f64>> = Vec::new();
    for spec in &a.sets {
        let (name, p) = split_spec(spec, 2, 2)?;
        let scores = parse_scores(&read_text(&p[0])?)?;
        let key = TrialSet::parse_key(&read_text(&p[1])?, true)?;
        let set = join_scores(&scores, &key)?;
        let report = MetricReport::compute(&set)?;
        report.check_invariants()?;
        let mut ex = Vec::new();
        for &pi in &extra {
            ex.push(cllr(&set, pi)?);
            ex.push(min_cllr_linear(&set, pi)?.cllr);
        }
        let mut row = report.tsv_row(&a.system, &name, &a.condition);
        ex.iter().for_each(|v| {
            let _ = write!(row, "\t{v:.6}");
        });
        rows.push(row);
        println!("[{name}]\n{}", report.key_values());
        reports.push(report);
        extras.push(ex);
    }
    if reports.len() > 1 {
        let avg = MetricReport::average(&reports).expect("non-empty");
        let mut row = avg.tsv_row(&a.system, "average", &a.condition);
        for k in 0..extra.len() * 2 {
            let m = extras.iter().map(|e| e[k]).sum::<f64>() / extras.len() as f64;
            let _ = write!(row, "\t{m:.6}");
        }
        rows.push(row);
        println!("[average]\n{}", avg.key_values());
    }
    let mut text = rows.join("\n");
    text.push('\n');
    match &a.out {
        Some(p) => {
            write_file(p, text.as_bytes())?;
            let cfg_path = PathBuf::from(format!("{}.config.txt", p.display()));
            write_file(&cfg_path, cfg.to_text().as_bytes())
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let cfg = a.config.resolve()?;
    cfg.validate()?;
    create_dir(&a.out)?;
    let mut corpus = generate(&cfg.synth.spec)?;
    if let Some(range) = cfg.synth.chunk_range {
        corpus = chunk(&corpus, range, cfg.synth.chunk_per_sample, cfg.synth.spec.seed)?;
    }
    let mut files = vec!["config.txt", "embeddings.dcae", "meta.tsv"];
    write_file(&a.out.join("config.txt"), cfg.to_text().as_bytes())?;
    corpus.table.save(a.out.join("embeddings.dcae"))?;
    corpus.meta.save(a.out.join("meta.tsv"))?;
    let mut n_valid = None;
    if a.all_pairs_key {
        let trials = build_trials(&corpus.meta, TrialPolicy::AllPairs)?.valid_only();
        write_file(&a.out.join("trials.key"), trials.to_key().as_bytes())?;
        n_valid = Some(trials.len());
        files.push("trials.key");
    }
    let speakers = corpus.meta.by_speaker().len();
    let mut m = String::new();
    let _ = writeln!(m, "seed = {}", cfg.synth.spec.seed);
    let _ = writeln!(m, "dim = {}", corpus.table.dim());
    let _ = writeln!(m, "samples = {}", corpus.table.len());
    let _ = writeln!(m, "speakers = {speakers}");
    let _ = writeln!(m, "domains = {}", corpus.meta.domains().join(","));
    if let Some(n) = n_valid {
        let _ = writeln!(m, "trials = {n}");
    }
    for f in files {
        let _ = writeln!(m, "sha256 {f} = {}", sha256_file(&a.out.join(f))?);
    }
    write_file(&a.out.join("MANIFEST"), m.as_bytes())
}

pub fn info_table(cfg: &RunConfig, archs: &[Architecture], input_dim: usize) -> String {
    let mut out = String::from("arch\tparameters\ttrained\n");
    for &arch in archs {
        let p = BackendParams::zeros(arch, input_dim, cfg.init.lda_dim, &cfg.init.shape);
        let _ = writeln!(out, "{}\t{}\t{}", arch, p.n_params(), p.n_trainable());
    }
    out
}

pub fn cmd_info(a: &InfoArgs) -> Result<()> {
    let cfg = a.config.resolve()?;
    cfg.validate()?;
    let archs = match &a.arch {
        Some(s) => vec![s.parse()?],
        None => Architecture::ALL.to_vec(),
    };
    print!("{}", info_table(&cfg, &archs, a.input_dim));
    Ok(())
}
