use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use consformer_harness::ablate::run_ablation;
use consformer_harness::config::{Arm, RunConfig};
use consformer_harness::data::{read_dataset, write_dataset, write_json, write_predictions};
use consformer_harness::gradcheck;
use consformer_harness::synth::{generate_splits, Dataset};
use consformer_harness::train::{
    check_compatible, evaluate, load_model, run_on, save_model, Metrics, RunReport, TrainState,
    MODEL_FILE,
};
use consformer_harness::{HarnessError, Result};

#[derive(Parser)]
#[command(name = "consformer", version, about = "Constituent-gated attention: data, training and checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (flat TOML). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/val/test JSONL datasets.
    Gen(Common),
    /// Train one arm and evaluate it on the test split.
    Train {
        #[command(flatten)]
        common: Common,
        /// Overrides the configured arm (a_only, c_only, both).
        #[arg(long)]
        arm: Option<String>,
    },
    /// Evaluate a saved model on a dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Train all three arms per seed and compare them.
    Ablate(Common),
    /// Compare backward() with finite differences on a tiny model.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Length of the long-span constituent check.
        #[arg(long, default_value_t = 32)]
        span: usize,
    },
    /// Quick end-to-end smoke run of every component.
    Selftest(Common),
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn ensure_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| HarnessError::io(p, e))
}

fn splits_for(cfg: &RunConfig) -> Result<[Dataset; 3]> {
    match (&cfg.train_data, &cfg.val_data, &cfg.test_data) {
        (Some(a), Some(b), Some(c)) => Ok([read_dataset(a)?, read_dataset(b)?, read_dataset(c)?]),
        _ => generate_splits(&cfg.synth(), [cfg.n_train, cfg.n_val, cfg.n_test]),
    }
}

fn print_metrics(label: &str, m: &Metrics) {
    println!(
        "{label}: em {:.4}  f1_token {:.4}  boundary_f1 {:.4}  answer_acc {:.4}  (n = {})",
        m.em, m.f1_token, m.boundary_f1, m.answer_acc, m.n
    );
}

fn cmd_gen(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    ensure_dir(&c.out)?;
    let splits = generate_splits(&cfg.synth(), [cfg.n_train, cfg.n_val, cfg.n_test])?;
    for (name, d) in ["train", "val", "test"].iter().zip(&splits) {
        let path = c.out.join(format!("{name}.jsonl"));
        write_dataset(&path, d)?;
        println!("wrote {} ({} examples)", path.display(), d.examples.len());
    }
    Ok(())
}

fn write_run(dir: &Path, report: &RunReport, outcome_model: &consformer::model::Model, preds: &[consformer_harness::data::PredictionRecord]) -> Result<()> {
    ensure_dir(dir)?;
    save_model(outcome_model, &dir.join(MODEL_FILE))?;
    write_predictions(&dir.join("predictions.jsonl"), preds)?;
    write_json(&dir.join("report.json"), report)?;
    std::fs::write(dir.join("config.toml"), report.config.to_toml())
        .map_err(|e| HarnessError::io(dir.join("config.toml"), e))
}

fn cmd_train(c: &Common, arm: Option<&str>) -> Result<()> {
    let mut cfg = load_config(c)?;
    if let Some(a) = arm {
        cfg.arm = parse_arm(a)?;
    }
    let [train, val, test] = splits_for(&cfg)?;
    let outcome = run_on(&cfg, &train, &val, &test)?;
    write_run(&c.out, &outcome.report, &outcome.model, &outcome.predictions)?;
    print_metrics(&format!("{} (seed {})", cfg.arm.label(), cfg.seed), &outcome.report.metrics());
    println!("epochs {}  wall {:.1}s  -> {}", outcome.report.epochs, outcome.report.wall_s, c.out.display());
    Ok(())
}

fn parse_arm(s: &str) -> Result<Arm> {
    match s {
        "a_only" => Ok(Arm::AOnly),
        "c_only" => Ok(Arm::COnly),
        "both" => Ok(Arm::Both),
        other => Err(HarnessError::Invalid(format!("unknown arm {other:?}"))),
    }
}

fn cmd_eval(c: &Common, checkpoint: &Path, data: &Path) -> Result<()> {
    let started = std::time::Instant::now();
    let expected = match &c.config {
        Some(_) => Some(load_config(c)?.model()),
        None => None,
    };
    let model = load_model(checkpoint, expected.as_ref())?;
    let dataset = read_dataset(data)?;
    check_compatible(&model.config, &dataset)?;
    let (metrics, preds) = evaluate(&model, &dataset)?;
    ensure_dir(&c.out)?;
    let mut cfg = load_config(c)?;
    cfg.arm = match (model.config.use_a, model.config.use_c) {
        (true, false) => Arm::AOnly,
        (false, true) => Arm::COnly,
        _ => Arm::Both,
    };
    cfg.seed = model.config.seed;
    let report = RunReport::new(&cfg, metrics, &TrainState::default(), started.elapsed().as_secs_f64());
    write_predictions(&c.out.join("predictions.jsonl"), &preds)?;
    write_json(&c.out.join("report.json"), &report)?;
    print_metrics("eval", &metrics);
    Ok(())
}

fn cmd_ablate(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    ensure_dir(&c.out)?;
    let report = run_ablation(&cfg, splits_for, |o| {
        let r = &o.report;
        let dir = c.out.join(format!("seed{}", r.seed)).join(r.arm.name());
        write_run(&dir, r, &o.model, &o.predictions)?;
        print_metrics(&format!("seed {} {}", r.seed, r.arm.label()), &r.metrics());
        Ok(())
    })?;
    write_json(&c.out.join("ablation.json"), &report)?;
    print!("{}", report.table());
    println!(
        "A ⊙ C >= both single arms in {}/{} seeds",
        report.seeds_both_best,
        report.seeds.len()
    );
    Ok(())
}

fn cmd_gradcheck(c: &Common, span: usize) -> Result<()> {
    let cfg = load_config(c)?;
    let mcfg = gradcheck::tiny_config(cfg.seed);
    let report = gradcheck::run(&mcfg, cfg.seed, span, None)?;
    ensure_dir(&c.out)?;
    write_json(&c.out.join("gradcheck.json"), &report)?;
    for g in report.groups.iter().chain(std::iter::once(&report.span)) {
        println!(
            "{} {:<24} {:.3e}",
            if g.pass { "pass" } else { "FAIL" },
            g.group,
            g.max_rel_error
        );
    }
    if report.pass {
        Ok(())
    } else {
        Err(HarnessError::CheckFailed(format!(
            "gradient mismatch in {:?}",
            report.failed_groups()
        )))
    }
}

fn cmd_selftest(c: &Common) -> Result<()> {
    let base = load_config(c)?;
    let cfg = RunConfig {
        n_train: 200,
        n_val: 50,
        n_test: 50,
        max_epochs: 2,
        ..base
    };
    let mut failures = Vec::new();
    let mut check = |name: &str, ok: bool| {
        println!("{} {name}", if ok { "pass" } else { "FAIL" });
        if !ok {
            failures.push(name.to_string());
        }
    };

    let g = gradcheck::run(&gradcheck::tiny_config(cfg.seed), cfg.seed, 32, None)?;
    check("gradients match finite differences", g.pass);

    let [train, val, test] = generate_splits(&cfg.synth(), [cfg.n_train, cfg.n_val, cfg.n_test])?;
    let again = generate_splits(&cfg.synth(), [cfg.n_train, cfg.n_val, cfg.n_test])?;
    check("generation is deterministic", again[0] == train);

    let outcome = run_on(&cfg, &train, &val, &test)?;
    let r = &outcome.report;
    let finite = r.epoch_losses.iter().all(|l| l.is_finite());
    check("short training run has finite losses", finite);
    let in_range = [r.em, r.f1_token, r.boundary_f1, r.answer_acc]
        .iter()
        .all(|v| (0.0..=1.0).contains(v));
    check("metrics lie in [0, 1]", in_range);

    ensure_dir(&c.out)?;
    let path = c.out.join(MODEL_FILE);
    save_model(&outcome.model, &path)?;
    let first = std::fs::read(&path).map_err(|e| HarnessError::io(&path, e))?;
    let loaded = load_model(&path, None)?;
    save_model(&loaded, &path)?;
    let second = std::fs::read(&path).map_err(|e| HarnessError::io(&path, e))?;
    check("checkpoint round trip is byte-identical", first == second);
    let (m, _) = evaluate(&loaded, &test)?;
    check("loaded model reproduces evaluation", m == outcome.report.metrics());

    if failures.is_empty() {
        Ok(())
    } else {
        Err(HarnessError::CheckFailed(failures.join(", ")))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.command {
        Command::Gen(c) => cmd_gen(c),
        Command::Train { common, arm } => cmd_train(common, arm.as_deref()),
        Command::Eval {
            common,
            checkpoint,
            data,
        } => cmd_eval(common, checkpoint, data),
        Command::Ablate(c) => cmd_ablate(c),
        Command::Gradcheck { common, span } => cmd_gradcheck(common, *span),
        Command::Selftest(c) => cmd_selftest(c),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
