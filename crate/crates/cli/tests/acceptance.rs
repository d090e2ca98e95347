//! End-to-end acceptance run. Prints one `criterion N: PASS|FAIL ...` line
//! per criterion straight to stderr (bypassing test output capture).
//!
//! Criteria 1-5 and 9 are deterministic math and format checks and are
//! asserted. Criteria 6-8 are statistical trend checks on synthetic data;
//! their outcome is reported but does not fail the test run.

#[path = "../../core/tests/support/gradcheck.rs"]
mod gradcheck;
#[path = "../../core/tests/support/ssp.rs"]
mod ssp;

use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;
use wfc_cli::{median, run_cell, sha256_file, CellOutcome, CellSplit, RunManifest};
use wfc_core::data::seeded_stream;
use wfc_core::io::{read_embeddings, write_embeddings};
use wfc_core::theory::{sweep_lemma1, sweep_lemma2, sweep_lemma6, sweep_lemma7, sweep_theorem5, CHECK_TOLERANCE};
use wfc_core::{
    demonic_balanced_accuracy, dto, gen_shift_pair, gen_synthetic, pretrain_demonic, pretrain_demonic_da,
    wasserstein1_exact, Activation, CostMatrix, DemonicBundle, DemonicConfig, DiscreteDistribution, DomainAdaptConfig,
    ModelBundle, OptimizerKind, SyntheticSpec, TrainConfig,
};

const SEEDS: std::ops::RangeInclusive<u64> = 1..=5;

fn report(n: u32, pass: bool, detail: &str) -> bool {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "criterion {n}: {verdict} {detail}");
    pass
}

fn experiment_config(beta: f64, seed: u64) -> TrainConfig {
    TrainConfig {
        beta,
        epochs: 100,
        critic_iters: 20,
        classifier_iters: 5,
        batch_size: 128,
        classifier_lr: 1e-3,
        critic_lr: 1e-3,
        critic_optimizer: OptimizerKind::Adam,
        clip: 0.1,
        hidden: vec![64, 64],
        activation: Activation::Tanh,
        critic_hidden: 64,
        seed,
        ..TrainConfig::default()
    }
}

fn demonic_config(seed: u64) -> DemonicConfig {
    DemonicConfig {
        hidden: vec![64, 64],
        lr: 1e-3,
        epochs: 10,
        seed,
        ..DemonicConfig::default()
    }
}

fn criterion1() -> bool {
    let t = Instant::now();
    let s = sweep_lemma1(500, &mut seeded_stream(2024, 1), false).unwrap();
    let secs = t.elapsed().as_secs_f64();
    report(
        1,
        s.instances == 500 && s.max_violation < CHECK_TOLERANCE && secs < 30.0,
        &format!("group-fairness identity: {} joints, max |diff| {:.2e}, {secs:.2}s", s.instances, s.max_violation),
    )
}

/// Random integer counts summing to `total`.
fn counts(k: usize, total: i64, rng: &mut ChaCha8Rng) -> Vec<i64> {
    let mut cuts: Vec<i64> = (0..k - 1).map(|_| rng.random_range(0..=total)).collect();
    cuts.sort_unstable();
    let mut out = Vec::with_capacity(k);
    let mut last = 0;
    for c in cuts {
        out.push(c - last);
        last = c;
    }
    out.push(total - last);
    out
}

fn criterion2() -> bool {
    let l6 = sweep_lemma6(500, &mut seeded_stream(2024, 2), false).unwrap();
    let l7 = sweep_lemma7(500, &mut seeded_stream(2024, 3)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    let total = 60;
    for _ in 0..200 {
        let (m, n) = (rng.random_range(1..=4), rng.random_range(1..=4));
        let a = counts(m, total, &mut rng);
        let b = counts(n, total, &mut rng);
        let c: Vec<Vec<i64>> = (0..m).map(|_| (0..n).map(|_| rng.random_range(0..=20)).collect()).collect();
        let oracle = ssp::min_cost_transport(&a, &b, &c) as f64 / total as f64;
        let dist = |v: &[i64]| DiscreteDistribution::new(v.iter().map(|&x| x as f64 / total as f64).collect()).unwrap();
        let cost = CostMatrix::new(Array2::from_shape_fn((m, n), |(i, j)| c[i][j] as f64)).unwrap();
        let (w, _) = wasserstein1_exact(&dist(&a), &dist(&b), &cost).unwrap();
        worst = worst.max((w - oracle).abs());
    }
    report(
        2,
        l6.max_violation < CHECK_TOLERANCE && l7.max_violation < CHECK_TOLERANCE && worst < 1e-12,
        &format!(
            "one-hot identity max {:.2e} ({}), block decomposition max {:.2e} ({}), solver vs min-cost flow max {worst:.2e} (200)",
            l6.max_violation, l6.instances, l7.max_violation, l7.instances
        ),
    )
}

fn criterion3() -> bool {
    let l2 = sweep_lemma2(1000, &mut seeded_stream(2024, 4)).unwrap();
    let t5 = sweep_theorem5(200, &mut seeded_stream(2024, 5)).unwrap();
    report(
        3,
        l2.instances == 1000 && t5.instances == 200 && l2.pass && t5.pass,
        &format!(
            "proxy-attribute bound max violation {:.2e} ({}), latent bound max violation {:.2e} ({})",
            l2.max_violation, l2.instances, t5.max_violation, t5.instances
        ),
    )
}

fn criterion4() -> bool {
    let a = dto((82.4, 89.0), (83.7, 90.8));
    let b = dto((75.2, 91.4), (79.5, 91.4));
    report(
        4,
        (a - 2.22).abs() <= 0.005 && (b - 4.3).abs() <= 0.05,
        &format!("dto {a:.4} (expect 2.22 +- 0.005), dto {b:.4} (expect 4.3 +- 0.05)"),
    )
}

fn criterion5() -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(2025);
    let mut errs = Vec::new();
    for i in 0..30 {
        let act = if i % 2 == 0 { Activation::Tanh } else { Activation::Relu };
        errs.push(gradcheck::cross_entropy_case(&mut rng, act));
    }
    for i in 0..20 {
        let act = if i % 2 == 0 { Activation::Relu } else { Activation::Tanh };
        errs.push(gradcheck::critic_case(&mut rng, act));
    }
    for _ in 0..10 {
        errs.push(gradcheck::regularized_case(&mut rng));
    }
    let worst = errs.iter().copied().fold(0.0, f64::max);
    report(
        5,
        errs.len() >= 50 && worst < gradcheck::REL_TOL,
        &format!("{} gradient cases, worst relative error {worst:.2e}", errs.len()),
    )
}

struct SeedRuns {
    ce: CellOutcome,
    wfc: Vec<(f64, CellOutcome)>,
}

fn fairness_runs() -> (Vec<SeedRuns>, f64) {
    let t = Instant::now();
    let mut runs = Vec::new();
    for seed in SEEDS {
        let data = gen_synthetic(&SyntheticSpec {
            seed,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let split = CellSplit::new(&data, seed).unwrap();
        let demonic = pretrain_demonic(&split.train, &demonic_config(seed)).unwrap();
        let ce = run_cell(&split, &demonic, &experiment_config(0.0, seed), None).unwrap();
        let wfc = vec![(1.0, run_cell(&split, &demonic, &experiment_config(1.0, seed), Some(seed)).unwrap())];
        runs.push(SeedRuns { ce, wfc });
    }
    (runs, t.elapsed().as_secs_f64())
}

fn criterion6(runs: &[SeedRuns], secs: f64) -> bool {
    let med = |f: &dyn Fn(&SeedRuns) -> f64| median(runs.iter().map(f)).unwrap();
    let (ce_fair, ce_acc) = (med(&|r| r.ce.fairness), med(&|r| r.ce.balanced_accuracy));
    let (w_fair, w_acc) = (med(&|r| r.wfc[0].1.fairness), med(&|r| r.wfc[0].1.balanced_accuracy));
    report(
        6,
        w_fair - ce_fair >= 5.0 && ce_acc - w_acc <= 3.0 && secs < 300.0,
        &format!(
            "median fairness CE {ce_fair:.2} -> WFC {w_fair:.2} (gain {:.2}, need >= 5); median accuracy {ce_acc:.2} -> {w_acc:.2} (drop {:.2}, need <= 3); {secs:.0}s",
            w_fair - ce_fair,
            ce_acc - w_acc
        ),
    )
}

fn criterion7(runs: &mut [SeedRuns]) -> bool {
    for (run, seed) in runs.iter_mut().zip(SEEDS) {
        let data = gen_synthetic(&SyntheticSpec {
            seed,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let split = CellSplit::new(&data, seed).unwrap();
        let demonic = pretrain_demonic(&split.train, &demonic_config(seed)).unwrap();
        for beta in [5.0, 100.0] {
            let o = run_cell(&split, &demonic, &experiment_config(beta, seed), Some(seed)).unwrap();
            run.wfc.push((beta, o));
        }
    }
    let per_beta = |k: usize, f: &dyn Fn(&CellOutcome) -> f64| median(runs.iter().map(|r| f(&r.wfc[k].1))).unwrap();
    let leak: Vec<f64> = (0..3).map(|k| per_beta(k, &|o| o.leakage.unwrap())).collect();
    let iw: Vec<f64> = (0..3).map(|k| per_beta(k, &|o| o.final_iw)).collect();
    let non_increasing = |v: &[f64]| v.windows(2).all(|w| w[1] <= w[0]);
    report(
        7,
        non_increasing(&leak) && non_increasing(&iw),
        &format!(
            "beta 1/5/100: median leakage {:.2} / {:.2} / {:.2}; median final dependency estimate {:.4} / {:.4} / {:.4}",
            leak[0], leak[1], leak[2], iw[0], iw[1], iw[2]
        ),
    )
}

fn criterion8() -> bool {
    let mut target_acc = [Vec::new(), Vec::new()];
    let mut fairness = [Vec::new(), Vec::new()];
    for seed in SEEDS {
        let spec = SyntheticSpec {
            seed,
            shift: 3.0,
            leak: 1.0,
            ..SyntheticSpec::default()
        };
        let (source, target) = gen_shift_pair(&spec).unwrap();
        let full = CellSplit::new(&target.evaluation_dataset(), seed).unwrap();
        let blind = CellSplit {
            train: full.train.without_attributes(),
            val: full.val.without_attributes(),
            test: full.test.clone(),
        };
        for (k, eta) in [0.0, 1.0].into_iter().enumerate() {
            let da = DomainAdaptConfig {
                eta,
                critic_hidden: 64,
                critic_optimizer: OptimizerKind::Rmsprop,
                critic_lr: 1e-3,
                critic_batches: 20,
                clip: 0.01,
            };
            let demonic = pretrain_demonic_da(&source, &blind.train, &demonic_config(seed), &da).unwrap();
            target_acc[k].push(demonic_balanced_accuracy(&demonic, &full.test).unwrap());
            fairness[k].push(run_cell(&blind, &demonic, &experiment_config(1.0, seed), None).unwrap().fairness);
        }
    }
    let m = |v: &[f64]| median(v.iter().copied()).unwrap();
    let (t0, t1, f0, f1) = (m(&target_acc[0]), m(&target_acc[1]), m(&fairness[0]), m(&fairness[1]));
    report(
        8,
        t1 > t0 && f1 >= f0,
        &format!(
            "median target attribute accuracy eta=0 {t0:.2} vs eta=1 {t1:.2}; median downstream fairness {f0:.2} vs {f1:.2}"
        ),
    )
}

fn wfc(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_wfc")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn criterion9() -> bool {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    let mut notes = Vec::new();
    let mut pass = true;
    let mut check = |ok: bool, what: &str| {
        pass &= ok;
        if !ok {
            notes.push(what.to_string());
        }
    };

    let data_dir = dir.join("d");
    let gen = ["gen-data", "--n", "1000", "--dim", "16", "--seed", "7", "--out", s(&data_dir)];
    let first = wfc(&gen);
    let m1 = RunManifest::read(&dir.join("d/manifest.json")).unwrap();
    let digest = sha256_file(&dir.join("d/data.wfce")).unwrap();
    let second = wfc(&gen);
    let m2 = RunManifest::read(&dir.join("d/manifest.json")).unwrap();
    check(first.status.success() && second.status.success(), "gen-data failed");
    check(m1.comparable() == m2.comparable(), "gen-data manifests differ");
    check(digest == sha256_file(&dir.join("d/data.wfce")).unwrap(), "gen-data digests differ");

    let data = read_embeddings(&dir.join("d/data.wfce")).unwrap();
    write_embeddings(&data, &dir.join("copy.wfce")).unwrap();
    check(
        fs::read(dir.join("d/data.wfce")).unwrap() == fs::read(dir.join("copy.wfce")).unwrap()
            && fs::read(dir.join("d/data.labels.csv")).unwrap() == fs::read(dir.join("copy.labels.csv")).unwrap(),
        "embeddings round trip",
    );

    let dem = wfc(&[
        "train-demonic", "--source", s(&dir.join("d/data.wfce")), "--hidden", "16", "--lr", "1e-3", "--epochs", "3",
        "--out", s(&dir.join("dem")),
    ]);
    check(dem.status.success(), "train-demonic failed");
    let dem_path = dir.join("dem/demonic.wfcm");
    DemonicBundle::read(&dem_path).unwrap().write(&dir.join("dem_copy.wfcm")).unwrap();
    check(fs::read(&dem_path).unwrap() == fs::read(dir.join("dem_copy.wfcm")).unwrap(), "attribute bundle round trip");

    let mut models = Vec::new();
    for out in ["m1", "m2"] {
        let o = wfc(&[
            "train", "--data", s(&dir.join("d/data.wfce")), "--demonic", s(&dem_path), "--hidden", "16",
            "--critic-hidden", "16", "--epochs", "4", "--lr", "1e-3", "--clip", "0.1", "--seed", "3", "--out",
            s(&dir.join(out)),
        ]);
        check(o.status.success(), "train failed");
        models.push(sha256_file(&dir.join(out).join("model.wfcm")).unwrap());
    }
    check(models[0] == models[1], "train digests differ");
    let model_path = dir.join("m1/model.wfcm");
    ModelBundle::read(&model_path).unwrap().write(&dir.join("model_copy.wfcm")).unwrap();
    check(fs::read(&model_path).unwrap() == fs::read(dir.join("model_copy.wfcm")).unwrap(), "model bundle round trip");

    let clean = wfc(&["verify", "--instances", "50", "--seed", "1"]);
    let corrupt = wfc(&["verify", "--instances", "50", "--seed", "1", "--corrupt"]);
    check(clean.status.code() == Some(0), "clean verify did not pass");
    check(corrupt.status.code() == Some(6), "corrupted verify did not exit 6");

    let detail = if notes.is_empty() {
        "manifests and digests reproduce; embeddings, attribute and model bundles round-trip bitwise; corrupted verify exits 6".to_string()
    } else {
        notes.join("; ")
    };
    report(9, pass, &detail)
}

#[test]
fn acceptance() {
    let mut hard = vec![(1, criterion1()), (2, criterion2()), (3, criterion3()), (4, criterion4()), (5, criterion5())];
    let (mut runs, secs) = fairness_runs();
    let soft = [(6, criterion6(&runs, secs)), (7, criterion7(&mut runs)), (8, criterion8())];
    hard.push((9, criterion9()));
    let passed = hard.iter().chain(&soft).filter(|(_, p)| *p).count();
    let _ = writeln!(std::io::stderr(), "acceptance: {passed}/9 criteria pass");
    let failed: Vec<u32> = hard.iter().filter(|(_, p)| !p).map(|(n, _)| *n).collect();
    assert!(failed.is_empty(), "deterministic criteria failed: {failed:?}");
}
