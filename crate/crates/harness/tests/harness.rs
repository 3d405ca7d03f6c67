use std::process::Command;

use consformer::model::Model;
use consformer_harness::ablate::run_ablation;
use consformer_harness::config::{Arm, RunConfig};
use consformer_harness::data::{read_dataset, read_json, write_dataset, write_dataset_to};
use consformer_harness::gradcheck;
use consformer_harness::synth::{generate, generate_splits, SynthConfig};
use consformer_harness::train::{run_on, RunReport, TrainConfig, Trainer};
use statrs::distribution::{ContinuousCDF, StudentsT};

fn corr(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    sab / (saa * sbb).sqrt()
}

/// Correlations of adjacent token appearances, split into same-word and
/// different-word pairs, 10k of each.
fn pair_correlations(rho: f64) -> (Vec<f64>, Vec<f64>) {
    let cfg = SynthConfig {
        n_examples: 4000,
        rho,
        seed: 11,
        ..Default::default()
    };
    let d = generate(&cfg).unwrap();
    let mut intra = Vec::new();
    let mut cross = Vec::new();
    for ex in &d.examples {
        for (k, &same) in ex.boundaries.iter().enumerate() {
            let c = corr(&ex.ocr[k].appearance, &ex.ocr[k + 1].appearance);
            if same {
                intra.push(c);
            } else {
                cross.push(c);
            }
        }
    }
    assert!(intra.len() >= 10_000 && cross.len() >= 10_000);
    intra.truncate(10_000);
    cross.truncate(10_000);
    (intra, cross)
}

/// Two-sided Welch t-test p-value.
fn welch_p(a: &[f64], b: &[f64]) -> f64 {
    let stats = |v: &[f64]| {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
        (n, m, var)
    };
    let (na, ma, va) = stats(a);
    let (nb, mb, vb) = stats(b);
    let se2 = va / na + vb / nb;
    let t = (ma - mb) / se2.sqrt();
    let df = se2.powi(2) / ((va / na).powi(2) / (na - 1.0) + (vb / nb).powi(2) / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).unwrap();
    2.0 * (1.0 - dist.cdf(t.abs()))
}

#[test]
fn zero_rho_makes_words_invisible_in_features() {
    let (intra, cross) = pair_correlations(0.0);
    let p = welch_p(&intra, &cross);
    assert!(p > 0.01, "p = {p}");
}

#[test]
fn high_rho_makes_words_visible_in_features() {
    let (intra, cross) = pair_correlations(0.8);
    let p = welch_p(&intra, &cross);
    assert!(p < 1e-6, "p = {p}");
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(mean(&intra) > mean(&cross) + 0.3);
}

#[test]
fn dataset_files_round_trip_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        n_examples: 40,
        seed: 3,
        ..Default::default()
    };
    let d = generate(&cfg).unwrap();
    let path = dir.path().join("d.jsonl");
    write_dataset(&path, &d).unwrap();
    let first = std::fs::read(&path).unwrap();
    let back = read_dataset(&path).unwrap();
    assert_eq!(back, d);
    let mut second = Vec::new();
    write_dataset_to(&mut second, &back).unwrap();
    assert_eq!(first, second);
}

fn small_run_config() -> RunConfig {
    RunConfig {
        n_train: 96,
        n_val: 32,
        n_test: 32,
        d_model: 16,
        batch_size: 16,
        max_epochs: 3,
        seed: 5,
        ..Default::default()
    }
}

#[test]
fn resume_reproduces_next_step_loss() {
    let cfg = small_run_config();
    let [train, _, _] = generate_splits(&cfg.synth(), [cfg.n_train, cfg.n_val, cfg.n_test]).unwrap();
    let mut straight = Trainer::new(cfg.model(), TrainConfig::from(&cfg)).unwrap();
    straight.train_epoch(&train.examples, None).unwrap();
    straight.observe(0.25);
    let expect = straight.train_epoch(&train.examples, Some(2)).unwrap();

    let mut first = Trainer::new(cfg.model(), TrainConfig::from(&cfg)).unwrap();
    first.train_epoch(&train.examples, None).unwrap();
    first.observe(0.25);
    let dir = tempfile::tempdir().unwrap();
    first.save_state(dir.path()).unwrap();
    let saved = first.state.clone();
    drop(first);
    let mut resumed = Trainer::resume(dir.path()).unwrap();
    assert_eq!(resumed.state, saved);
    let got = resumed.train_epoch(&train.examples, Some(2)).unwrap();
    assert_eq!(got, expect);
}

#[test]
fn early_stopping_patience() {
    let cfg = small_run_config();
    let mut t = Trainer::new(cfg.model(), TrainConfig { patience: 0, ..TrainConfig::from(&cfg) }).unwrap();
    t.observe(0.4);
    assert!(!t.done());
    t.observe(0.4);
    assert!(t.state.stopped_early);

    let mut t = Trainer::new(cfg.model(), TrainConfig { patience: 2, ..TrainConfig::from(&cfg) }).unwrap();
    for (acc, stop) in [(0.1, false), (0.2, false), (0.2, false), (0.1, false), (0.15, true)] {
        t.observe(acc);
        assert_eq!(t.state.stopped_early, stop, "after {acc}");
    }
    assert_eq!(t.state.best_acc, Some(0.2));
}

#[test]
fn plateau_stops_training() {
    // A vanishing learning rate leaves validation accuracy flat.
    let cfg = RunConfig {
        lr: 1e-300,
        patience: 0,
        max_epochs: 10,
        ..small_run_config()
    };
    let [train, val, test] = generate_splits(&cfg.synth(), [cfg.n_train, cfg.n_val, cfg.n_test]).unwrap();
    let out = run_on(&cfg, &train, &val, &test).unwrap();
    assert!(out.report.stopped_early);
    assert_eq!(out.report.epochs, 2);
    assert_eq!(out.report.val_acc[0], out.report.val_acc[1]);
}

#[test]
fn tiny_run_is_fast_and_reports_its_config() {
    let cfg = RunConfig {
        n_train: 500,
        n_val: 100,
        n_test: 100,
        d_model: 32,
        max_epochs: 5,
        seed: 9,
        ..Default::default()
    };
    let started = std::time::Instant::now();
    let [train, val, test] = generate_splits(&cfg.synth(), [cfg.n_train, cfg.n_val, cfg.n_test]).unwrap();
    let out = run_on(&cfg, &train, &val, &test).unwrap();
    let secs = started.elapsed().as_secs_f64();
    assert!(secs < 60.0, "{secs} s");
    let r = &out.report;
    assert_eq!(r.config, cfg);
    assert_eq!(r.seed, 9);
    for v in [r.em, r.f1_token, r.boundary_f1, r.answer_acc] {
        assert!((0.0..=1.0).contains(&v));
    }
    assert!(r.epoch_losses.iter().all(|l| l.is_finite()));
}

#[test]
fn ablation_arms_share_data_and_initial_weights() {
    let cfg = RunConfig {
        max_epochs: 1,
        ..small_run_config()
    };
    let mut datasets = Vec::new();
    let mut first_weights: Vec<Model> = Vec::new();
    let report = run_ablation(
        &cfg,
        |c| {
            let s = generate_splits(&c.synth(), [c.n_train, c.n_val, c.n_test])?;
            datasets.push(s[0].clone());
            Ok(s)
        },
        |o| {
            first_weights.push(Model::new(o.model.config.clone())?);
            Ok(())
        },
    )
    .unwrap();
    assert_eq!(datasets.len(), 1);
    let arms: Vec<_> = report.runs.iter().map(|r| r.arm).collect();
    assert_eq!(arms, Arm::ALL);
    let flags: Vec<_> = report.runs.iter().map(|r| (r.config.model().use_a, r.config.model().use_c)).collect();
    assert_eq!(flags, [(true, false), (false, true), (true, true)]);
    for m in &first_weights[1..] {
        for (id, name) in m.params.sorted() {
            assert_eq!(m.params.value(id), first_weights[0].params.get(name).unwrap());
        }
    }
    assert!(report.table().contains("A ⊙ C"));
}

#[test]
fn gradcheck_passes_and_localises_faults() {
    let cfg = gradcheck::tiny_config(1);
    let clean = gradcheck::run(&cfg, 1, 32, None).unwrap();
    assert!(clean.pass, "{:?}", clean.failed_groups());
    assert!(clean.span_grad_max_abs > 1e-3);
    for target in ["enc.0.ff1.w", "ocr.fr.ln.gain", "head.b"] {
        let broken = gradcheck::run(&cfg, 1, 32, Some(target)).unwrap();
        assert!(!broken.pass);
        assert_eq!(broken.failed_groups(), [target]);
    }
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_consformer"))
}

#[test]
fn cli_end_to_end_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("run.toml");
    let cfg = RunConfig {
        n_train: 64,
        n_val: 16,
        n_test: 16,
        d_model: 16,
        max_epochs: 1,
        ..Default::default()
    };
    std::fs::write(&cfg_path, cfg.to_toml()).unwrap();
    let data = dir.path().join("data");
    let status = bin()
        .args(["gen", "--config"])
        .arg(&cfg_path)
        .arg("--out")
        .arg(&data)
        .output()
        .unwrap()
        .status;
    assert_eq!(status.code(), Some(0));

    let run = dir.path().join("run");
    let status = bin()
        .args(["train", "--seed", "3", "--config"])
        .arg(&cfg_path)
        .arg("--out")
        .arg(&run)
        .output()
        .unwrap()
        .status;
    assert_eq!(status.code(), Some(0));
    let report: RunReport = read_json(&run.join("report.json")).unwrap();
    assert_eq!(report.seed, 3);
    assert_eq!(report.config.seed, 3);

    let eval = dir.path().join("eval");
    let status = bin()
        .args(["eval", "--seed", "3", "--config"])
        .arg(&cfg_path)
        .arg("--checkpoint")
        .arg(run.join("model.vcfk"))
        .arg("--data")
        .arg(data.join("test.jsonl"))
        .arg("--out")
        .arg(&eval)
        .output()
        .unwrap()
        .status;
    assert_eq!(status.code(), Some(0));

    // A different model configuration does not match the checkpoint.
    let other = dir.path().join("other.toml");
    std::fs::write(&other, RunConfig { d_model: 8, ..cfg.clone() }.to_toml()).unwrap();
    let out = bin()
        .args(["eval", "--config"])
        .arg(&other)
        .arg("--checkpoint")
        .arg(run.join("model.vcfk"))
        .arg("--data")
        .arg(data.join("test.jsonl"))
        .arg("--out")
        .arg(&eval)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("hash"));

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "seeds = 3\n").unwrap();
    let status = bin().args(["gen", "--config"]).arg(&bad).arg("--out").arg(&data).output().unwrap().status;
    assert_eq!(status.code(), Some(1));

    let missing = dir.path().join("nope.toml");
    let status = bin().args(["gen", "--config"]).arg(&missing).arg("--out").arg(&data).output().unwrap().status;
    assert_eq!(status.code(), Some(2));
}
