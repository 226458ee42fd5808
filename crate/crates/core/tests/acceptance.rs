//! Acceptance criteria. Runs as a plain binary and prints one PASS/FAIL line
//! per criterion; exits non-zero if any fails.

mod common;

use std::collections::HashMap;
use std::process::Command;
use std::time::Instant;

use dca_plda::asnorm::{asnorm1, snorm};
use dca_plda::backend::{Architecture, BackendParams};
use dca_plda::data::{IndexedTrial, Metadata, SampleMeta};
use dca_plda::linalg::{Mat, Vector};
use dca_plda::metrics::{bayes_threshold, cllr, min_cllr_pav, prior_entropy, ScoreSet};
use dca_plda::plda::{fit_plda, oracle_llr, score_pairs, to_score_form, EmConfig, PldaModel, PldaTrainer};
use dca_plda::preproc::{balanced_weights, SpeakerWeights};
use dca_plda::synth::{chunk, generate, select_domains, DomainProfile, SynthSpec};
use dca_plda::training::{assemble, generative_init, train_from, BatchMethod, DevSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use common::*;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
    Mat::from_fn(r, c, |_, _| StandardNormal.sample(rng))
}

fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> Mat {
    let a = randn(rng, n, n);
    let s = &a * a.transpose() / n as f64 + Mat::identity(n, n) * 0.3;
    (&s + s.transpose()) * 0.5
}

fn c1_parameter_counts() -> Outcome {
    let t0 = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_dcaplda"))
        .args([
            "info",
            "--input-dim",
            "512",
            "--set",
            "init.lda_dim=300",
            "--set",
            "side.m_dim=200",
            "--set",
            "side.s_dim=6",
            "--set",
            "calib.duration_features=wlog",
        ])
        .output()
        .map_err(|e| e.to_string())?;
    let elapsed = t0.elapsed().as_secs_f64();
    let text = String::from_utf8_lossy(&out.stdout).to_string();
    let counts: HashMap<&str, u64> = text
        .lines()
        .skip(1)
        .filter_map(|l| {
            let mut f = l.split('\t');
            Some((f.next()?, f.next()?.parse().ok()?))
        })
        .collect();
    let want = [("plda", 334_203), ("d-plda", 334_203), ("d-plda-dd", 334_223), ("d-plda-dsd", 438_187)];
    let mut ok = out.status.success() && elapsed < 1.0;
    let mut detail = String::new();
    for (a, n) in want {
        let got = counts.get(a).copied();
        ok &= got == Some(n);
        detail += &format!("{a}={got:?} ");
    }
    let inc = counts.get("d-plda-dsd").zip(counts.get("d-plda-dd")).map(|(a, b)| a - b);
    ok &= inc == Some(103_964);
    check(ok, format!("{detail}increment={inc:?} time={elapsed:.3}s"))
}

fn c2_closed_form_scores() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for model_idx in 0..200 {
        let n = [1, 2, 4, 8][model_idx % 4];
        let model = PldaModel {
            mu: Vector::from_fn(n, |_, _| StandardNormal.sample(&mut rng)),
            b: random_spd(&mut rng, n),
            w: random_spd(&mut rng, n),
        };
        let form = to_score_form(&model).map_err(|e| e.to_string())?;
        let w1 = randn(&mut rng, 50, n);
        let w2 = randn(&mut rng, 50, n);
        let s = score_pairs(&form, &w1, &w2).map_err(|e| e.to_string())?;
        for p in 0..50 {
            let o = oracle_llr(&model, &w1.row(p).transpose(), &w2.row(p).transpose())
                .map_err(|e| e.to_string())?;
            worst = worst.max((s[(p, p)] - o).abs());
        }
    }
    let elapsed = t0.elapsed().as_secs_f64();
    check(
        worst < 1e-8 && elapsed < 10.0,
        format!("max |score - oracle| = {worst:.2e} over 10000 pairs, {elapsed:.2}s"),
    )
}

fn c3_init_equivalence() -> Outcome {
    let split = desk_split(3);
    let icfg = desk_init();
    let init = generative_init(&split.train, &icfg, BatchMethod::DomainBalanced, 0.01, 3).map_err(|e| e.to_string())?;
    let held = select_domains(&split.corpus, &[HELD]).map_err(|e| e.to_string())?;
    let dev = dev_of(&held, HELD);
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let n = dev.x.nrows();
    let trials: Vec<IndexedTrial> = (0..100_000)
        .map(|_| {
            let e = rng.random_range(0..n);
            let t = (e + rng.random_range(1..n)) % n;
            IndexedTrial { enroll: e, test: t, target: false }
        })
        .collect();
    let reference = init.params.llrs(&dev.x, Some(&dev.durations), &trials).map_err(|e| e.to_string())?;
    let mut detail = String::new();
    let mut ok = true;
    for arch in Architecture::ALL.into_iter().filter(|a| a.is_trained()) {
        let p = assemble(&init, arch, &icfg.shape, &mut rng);
        let l = p.llrs(&dev.x, Some(&dev.durations), &trials).map_err(|e| e.to_string())?;
        let diff = l.iter().zip(&reference).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        ok &= diff < 1e-10;
        detail += &format!("{arch}={diff:.1e} ");
    }
    check(ok, format!("max |llr - plda+cal| over 1e5 trials: {detail}"))
}

/// Gradient of every group against central differences; error relative to
/// the largest analytic entry of the group.
fn gradient_errors(p: &BackendParams, x: &Mat, d: &[f64], trials: &[IndexedTrial]) -> Vec<(String, f64)> {
    let pi = 0.3;
    let loss = |q: &BackendParams| {
        let l = q.llrs(x, Some(d), trials).unwrap();
        dca_plda::backend::loss_with_gradient(&l, trials, pi).unwrap().0
    };
    let (_, grads) = p.loss_and_gradient(x, Some(d), trials, pi).unwrap();
    let analytic: Vec<(String, Vec<f64>)> = grads.groups().into_iter().map(|(n, g)| (n, g.to_vec())).collect();
    let mut out = Vec::new();
    for (gi, (name, ga)) in analytic.iter().enumerate() {
        if !p.arch.trains_group(name) {
            continue;
        }
        let scale = ga.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-6);
        let mut err: f64 = 0.0;
        for k in 0..ga.len() {
            let v = p.groups()[gi].1[k];
            let h = 1e-5 * v.abs().max(1.0);
            let mut plus = p.clone();
            let mut minus = p.clone();
            plus.groups_mut()[gi].1[k] = v + h;
            minus.groups_mut()[gi].1[k] = v - h;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            err = err.max((fd - ga[k]).abs() / scale);
        }
        out.push((name.clone(), err));
    }
    out
}

fn c4_gradients() -> Outcome {
    let t0 = Instant::now();
    let mut spec = SynthSpec {
        dim: 8,
        seed: 4,
        ..SynthSpec::default()
    };
    spec.domains = vec![DomainProfile::new("x", 12), DomainProfile::new("y", 12)];
    let corpus = generate(&spec).map_err(|e| e.to_string())?;
    let data = data_of(&corpus);
    let mut icfg = desk_init();
    icfg.lda_dim = 5;
    icfg.shape.m_dim = 6;
    icfg.shape.s_dim = 3;
    let init = generative_init(&data, &icfg, BatchMethod::Plain, 0.01, 4).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    // 8 samples from 4 speakers, 16 trials with both classes.
    let rows: Vec<usize> = (0..8).map(|i| (i / 2) * 12 + i % 2).collect();
    let x = Mat::from_fn(8, data.x.ncols(), |r, c| data.x[(rows[r], c)]);
    let d: Vec<f64> = rows.iter().map(|&r| data.meta.samples()[r].duration_s).collect();
    let mut trials = Vec::new();
    for e in 0..8 {
        for t in [(e + 1) % 8, (e + 3) % 8] {
            trials.push(IndexedTrial { enroll: e, test: t, target: e / 2 == t / 2 });
        }
    }
    if trials.len() != 16 || !trials.iter().any(|t| t.target) {
        return Err("bad batch".into());
    }
    let mut worst: f64 = 0.0;
    let mut detail = String::new();
    for arch in [Architecture::DPlda, Architecture::DPldaDd, Architecture::DPldaDsd, Architecture::PldaDsd] {
        let mut p = assemble(&init, arch, &icfg.shape, &mut rng);
        // Move away from the initial point so that no block is trivially zero.
        for (_, g) in p.groups_mut() {
            for v in g.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v += 0.1 * z;
            }
        }
        let errs = gradient_errors(&p, &x, &d, &trials);
        let e = errs.iter().fold(0.0f64, |m, (_, v)| m.max(*v));
        worst = worst.max(e);
        detail += &format!("{arch}: {} groups max {e:.1e}; ", errs.len());
    }
    let elapsed = t0.elapsed().as_secs_f64();
    check(worst < 1e-4 && elapsed < 30.0, format!("{detail}{elapsed:.1}s"))
}

/// Minimum over every monotone step function: each contiguous partition of
/// the sorted tie groups, scored with per-block optimal posteriors.
fn brute_force_min_cllr(llrs: &[f64], labels: &[bool], pi: f64) -> f64 {
    let mut idx: Vec<usize> = (0..llrs.len()).collect();
    idx.sort_by(|&a, &b| llrs[a].total_cmp(&llrs[b]));
    let mut groups: Vec<(f64, f64)> = Vec::new();
    let mut prev = f64::NAN;
    for &i in &idx {
        if llrs[i] != prev {
            groups.push((0.0, 0.0));
            prev = llrs[i];
        }
        let g = groups.last_mut().unwrap();
        if labels[i] {
            g.0 += 1.0;
        } else {
            g.1 += 1.0;
        }
    }
    let tt = labels.iter().filter(|l| **l).count() as f64;
    let nn = labels.len() as f64 - tt;
    let k = groups.len();
    let mut best = f64::INFINITY;
    for mask in 0u32..(1 << (k - 1)) {
        let mut cost = 0.0;
        let mut last_q = -1.0;
        let mut ok = true;
        let (mut bt, mut bn) = (0.0, 0.0);
        for (g, &(t, n)) in groups.iter().enumerate() {
            bt += t;
            bn += n;
            if g == k - 1 || mask & (1 << g) != 0 {
                let a = pi * bt / tt;
                let b = (1.0 - pi) * bn / nn;
                let q = a / (a + b);
                if q < last_q {
                    ok = false;
                    break;
                }
                last_q = q;
                if a > 0.0 {
                    cost -= a * q.ln();
                }
                if b > 0.0 {
                    cost -= b * (1.0 - q).ln();
                }
                bt = 0.0;
                bn = 0.0;
            }
        }
        if ok {
            best = best.min(cost);
        }
    }
    best / prior_entropy(pi)
}

fn c5_metric_fixed_points() -> Outcome {
    let zeros = ScoreSet::new(vec![0.0; 10], (0..10).map(|i| i % 3 == 0).collect()).map_err(|e| e.to_string())?;
    let c = cllr(&zeros, 0.5).map_err(|e| e.to_string())?;
    let thr = bayes_threshold(0.01, 1.0, 1.0).map_err(|e| e.to_string())?;
    let mut ok = (c - 1.0).abs() < 1e-12 && (thr - 99f64.ln()).abs() < 1e-12;
    let mut worst: f64 = 0.0;
    let mut sets = 0usize;
    // Every label pattern with both classes, every tie structure.
    for n in 2..=8usize {
        for labels_mask in 1u32..(1 << n) - 1 {
            let labels: Vec<bool> = (0..n).map(|i| labels_mask & (1 << i) != 0).collect();
            for ties in 0u32..(1 << (n - 1)) {
                let mut v = 0.0;
                let llrs: Vec<f64> = (0..n)
                    .map(|i| {
                        if i > 0 && ties & (1 << (i - 1)) != 0 {
                            v += 1.0;
                        }
                        v
                    })
                    .collect();
                let s = ScoreSet::new(llrs.clone(), labels.clone()).map_err(|e| e.to_string())?;
                for pi in [0.5, 0.01] {
                    let pav = min_cllr_pav(&s, pi).map_err(|e| e.to_string())?;
                    let brute = brute_force_min_cllr(&llrs, &labels, pi);
                    worst = worst.max((pav - brute).abs());
                }
                sets += 1;
            }
        }
    }
    ok &= worst < 1e-12;
    check(
        ok,
        format!("Cllr(0)={c}, threshold-log99={:.1e}, PAV vs brute force max diff {worst:.1e} on {sets} sets", thr - 99f64.ln()),
    )
}

fn em_corpus(seed: u64) -> (Mat, Metadata) {
    let mut spec = SynthSpec {
        dim: 5,
        seed,
        ..SynthSpec::default()
    };
    let mut a = DomainProfile::new("p", 15);
    a.sessions_per_speaker = 2;
    let mut b = DomainProfile::new("q", 25);
    b.noise_scale = 1.5;
    spec.domains = vec![a, b];
    let c = generate(&spec).unwrap();
    (c.table.matrix().clone(), c.meta)
}

fn c6_em() -> Outcome {
    let mut worst_drop: f64 = 0.0;
    for seed in 0..20 {
        let (x, meta) = em_corpus(600 + seed);
        let w = balanced_weights(&meta);
        let (_, trace) = fit_plda(&x, &meta, &w, EmConfig { max_iters: 20, rel_tol: 0.0 }).map_err(|e| e.to_string())?;
        if trace.len() != 21 {
            return Err(format!("trace has {} entries", trace.len()));
        }
        for p in trace.windows(2) {
            worst_drop = worst_drop.max((p[0] - p[1]) / p[0].abs());
        }
    }
    // Weight 2 on every other speaker versus duplicating those speakers.
    let (x, meta) = em_corpus(700);
    let mut doubled: SpeakerWeights = HashMap::new();
    let mut dup_rows: Vec<usize> = (0..meta.len()).collect();
    let mut dup_meta: Vec<SampleMeta> = meta.samples().to_vec();
    for (k, (spk, rows)) in meta.by_speaker().into_iter().enumerate() {
        let c = if k % 2 == 0 { 2.0 } else { 1.0 };
        doubled.insert(spk.to_string(), c);
        if c == 2.0 {
            for &r in &rows {
                let s = &meta.samples()[r];
                dup_rows.push(r);
                dup_meta.push(SampleMeta {
                    sample_id: format!("{}-dup", s.sample_id),
                    speaker_id: format!("{}-dup", s.speaker_id),
                    session_id: format!("{}-dup", s.session_id),
                    ..s.clone()
                });
            }
        }
    }
    let x_dup = Mat::from_fn(dup_rows.len(), x.ncols(), |r, c| x[(dup_rows[r], c)]);
    let meta_dup = Metadata::new(dup_meta).map_err(|e| e.to_string())?;
    let ones: SpeakerWeights = meta_dup.samples().iter().map(|s| (s.speaker_id.clone(), 1.0)).collect();
    let t1 = PldaTrainer::new(&x, &meta, &doubled).map_err(|e| e.to_string())?;
    let t2 = PldaTrainer::new(&x_dup, &meta_dup, &ones).map_err(|e| e.to_string())?;
    let rel = |a: &Mat, b: &Mat| (a - b).amax() / b.amax().max(1.0);
    let (mut m1, mut m2) = (t1.init().map_err(|e| e.to_string())?, t2.init().map_err(|e| e.to_string())?);
    let mut worst_dup: f64 = 0.0;
    for it in 0..10 {
        let (n1, l1) = t1.step(&m1, it).map_err(|e| e.to_string())?;
        let (n2, l2) = t2.step(&m2, it).map_err(|e| e.to_string())?;
        worst_dup = worst_dup
            .max(rel(&n1.b, &n2.b))
            .max(rel(&n1.w, &n2.w))
            .max((&n1.mu - &n2.mu).amax())
            .max((l1 - l2).abs() / l2.abs());
        m1 = n1;
        m2 = n2;
    }
    check(
        worst_drop <= 1e-8 && worst_dup < 1e-10,
        format!("largest relative LL decrease {worst_drop:.1e} over 20 corpora; weight-2 vs duplication max diff {worst_dup:.1e}"),
    )
}

fn c7_robustness() -> Outcome {
    let t0 = Instant::now();
    let archs = [Architecture::Plda, Architecture::DPlda, Architecture::DPldaDd, Architecture::DPldaDsd];
    let mut held: Vec<Vec<f64>> = vec![Vec::new(); archs.len()];
    let mut gap_dplda = Vec::new();
    let mut gap_dd = Vec::new();
    for seed in 0..5 {
        let split = desk_split(seed);
        let icfg = desk_init();
        let cfg = desk_train(seed);
        let init = generative_init(&split.train, &icfg, cfg.batch_method, cfg.pi_train, seed).map_err(|e| e.to_string())?;
        let held_dev = dev_of(&select_domains(&split.corpus, &[HELD]).map_err(|e| e.to_string())?, HELD);
        let dev_speakers = speakers(&split.corpus, &TRAIN_DOMAINS, TRAIN_SPEAKERS, SPEAKERS);
        let short = dev_of(&chunk(&dev_speakers, (4.0, 12.0), 1, 1000 + seed).map_err(|e| e.to_string())?, "short");
        for (k, &arch) in archs.iter().enumerate() {
            let out = train_from(&init, &split.train, arch, &icfg, &cfg, &split.devs).map_err(|e| e.to_string())?;
            let h = held_dev.score_set(&out.params).map_err(|e| e.to_string())?;
            held[k].push(cllr(&h, 0.5).map_err(|e| e.to_string())?);
            let gap = |dev: &DevSet| -> Result<f64, String> {
                let s = dev.score_set(&out.params).map_err(|e| e.to_string())?;
                Ok(cllr(&s, 0.5).map_err(|e| e.to_string())? - min_cllr_pav(&s, 0.5).map_err(|e| e.to_string())?)
            };
            match arch {
                Architecture::DPlda => gap_dplda.push(gap(&short)?),
                Architecture::DPldaDd => gap_dd.push(gap(&short)?),
                _ => {}
            }
        }
    }
    let med: Vec<f64> = held.iter_mut().map(|v| median(v)).collect();
    let (g_d, g_dd) = (median(&mut gap_dplda), median(&mut gap_dd));
    let closure = (g_d - g_dd) / g_d;
    let elapsed = t0.elapsed().as_secs_f64();
    check(
        med[3] < med[1] && med[1] < med[0] && closure >= 0.5 && elapsed < 900.0,
        format!(
            "held-out median Cllr.5: plda {:.4}, d-plda {:.4}, d-plda-dd {:.4}, dca-plda {:.4}; \
             short-split gap d-plda {g_d:.4} vs dd {g_dd:.4} (closure {:.0}%); {elapsed:.0}s",
            med[0],
            med[1],
            med[2],
            med[3],
            100.0 * closure
        ),
    )
}

fn c8_selection() -> Outcome {
    let mut wins = 0;
    let mut detail = String::new();
    for seed in 0..10 {
        let split = desk_split(seed);
        let icfg = desk_init();
        let cfg = desk_train(seed);
        let init = generative_init(&split.train, &icfg, cfg.batch_method, cfg.pi_train, seed).map_err(|e| e.to_string())?;
        let held_dev = dev_of(&speakers(&split.corpus, &[HELD], 0, SPEAKERS / 2), HELD);
        let held_test = dev_of(&speakers(&split.corpus, &[HELD], SPEAKERS / 2, SPEAKERS), HELD);
        let arch = Architecture::DPldaDsd;
        let held_in = train_from(&init, &split.train, arch, &icfg, &cfg, &split.devs).map_err(|e| e.to_string())?;
        let mut devs = split.devs.clone();
        devs.push(held_dev);
        let combined = train_from(&init, &split.train, arch, &icfg, &cfg, &devs).map_err(|e| e.to_string())?;
        let a = cllr(&held_test.score_set(&held_in.params).map_err(|e| e.to_string())?, 0.5).map_err(|e| e.to_string())?;
        let b = cllr(&held_test.score_set(&combined.params).map_err(|e| e.to_string())?, 0.5).map_err(|e| e.to_string())?;
        if a > b {
            wins += 1;
        }
        detail += &format!("{a:.3}/{b:.3} ");
    }
    check(
        wins >= 8,
        format!("combined-dev selection better in {wins}/10 seeds (held-in/combined: {detail})"),
    )
}

fn c9_asnorm() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let stats = |v: &[f64]| {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        (m, (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt())
    };
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let k = rng.random_range(2..300);
        let e: Vec<f64> = (0..k).map(|_| 3.0 * rng.random::<f64>() - 1.0).collect();
        let t: Vec<f64> = (0..k).map(|_| 5.0 * rng.random::<f64>() - 2.0).collect();
        let s = 20.0 * rng.random::<f64>() - 10.0;
        let (me, se) = stats(&e);
        let (mt, st) = stats(&t);
        let want = 0.5 * ((s - me) / se + (s - mt) / st);
        let a = asnorm1(s, &e, &t, k).map_err(|x| x.to_string())?;
        let b = snorm(s, &e, &t).map_err(|x| x.to_string())?;
        worst = worst.max((a - want).abs()).max((b - want).abs());
    }
    let mut violations = 0;
    for _ in 0..10_000 {
        let k = rng.random_range(2..100);
        let e: Vec<f64> = (0..k).map(|_| StandardNormal.sample(&mut rng)).collect();
        let t: Vec<f64> = (0..k).map(|_| StandardNormal.sample(&mut rng)).collect();
        let n_top = rng.random_range(2..=k);
        let s1 = 10.0 * rng.random::<f64>() - 5.0;
        let s2 = s1 + 1e-3 + rng.random::<f64>();
        let z1 = asnorm1(s1, &e, &t, n_top).map_err(|x| x.to_string())?;
        let z2 = asnorm1(s2, &e, &t, n_top).map_err(|x| x.to_string())?;
        if z1.partial_cmp(&z2) != Some(std::cmp::Ordering::Less) {
            violations += 1;
        }
    }
    check(
        worst < 1e-12 && violations == 0,
        format!("full-cohort vs S-Norm max diff {worst:.1e}; {violations} monotonicity violations in 1e4 probes"),
    )
}

fn c10_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = dir.path().join("data");
    small_synth(&data, 10, &[]);
    let emb = data.join("embeddings.dcae");
    let meta = data.join("meta.tsv");
    let dev = format!("dev={},{}", path_str(&emb), path_str(&meta));
    let mut models = Vec::new();
    for run in ["r1", "r2"] {
        let out = dir.path().join(run);
        let code = run_cli(&[
            "train",
            "--embeddings",
            path_str(&emb),
            "--meta",
            path_str(&meta),
            "--dev",
            &dev,
            "--arch",
            "d-plda-dsd",
            "--seeds",
            "2",
            "--set",
            "init.lda_dim=5",
            "--set",
            "side.m_dim=4",
            "--set",
            "side.s_dim=2",
            "--set",
            "train.s1=15",
            "--set",
            "train.s2=10",
            "--set",
            "train.s3=5",
            "--set",
            "train.batch_size=8",
            "--set",
            "train.seed=7",
            "--out",
            path_str(&out),
        ]);
        if code != 0 {
            return Err(format!("train exited with {code}"));
        }
        models.push(std::fs::read(out.join("model.dcam")).map_err(|e| e.to_string())?);
    }
    check(
        models[0] == models[1],
        format!("two runs wrote {} and {} byte models, identical: {}", models[0].len(), models[1].len(), models[0] == models[1]),
    )
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("parameter counts", c1_parameter_counts),
        ("closed-form scores", c2_closed_form_scores),
        ("initialization equivalence", c3_init_equivalence),
        ("gradient correctness", c4_gradients),
        ("metric fixed points", c5_metric_fixed_points),
        ("EM sanity", c6_em),
        ("robustness", c7_robustness),
        ("model selection", c8_selection),
        ("AS-Norm reduction", c9_asnorm),
        ("determinism", c10_determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let results: Vec<Option<Outcome>> = std::thread::scope(|s| {
        let handles: Vec<_> = criteria
            .iter()
            .enumerate()
            .map(|(i, &(_, f))| {
                let wanted = filter.is_empty() || filter.iter().any(|x| x == &(i + 1).to_string());
                wanted.then(|| s.spawn(f))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.map(|h| h.join().unwrap_or_else(|_| Err("panicked".into()))))
            .collect()
    });
    let mut failed = 0;
    for (i, ((name, _), r)) in criteria.iter().zip(results).enumerate() {
        match r {
            Some(Ok(d)) => println!("criterion {}: PASS {name}: {d}", i + 1),
            Some(Err(d)) => {
                failed += 1;
                println!("criterion {}: FAIL {name}: {d}", i + 1);
            }
            None => {}
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
