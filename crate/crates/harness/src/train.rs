//! Training with early stopping, evaluation and checkpointing.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use consformer::metrics::{corpus_scores, AnswerPair, BinaryCounts};
use consformer::model::{train_step, Model, ModelConfig, TrainItem};
use consformer::numerics::checkpoint::{read_entries, write_entries};
use consformer::numerics::{ParamStore, Tensor};
use consformer::optim::{Adam, AdamConfig};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{config_hash, Arm, RunConfig};
use crate::data::{read_json, write_json, PredictionRecord};
use crate::error::{HarnessError, Result};
use crate::synth::{Dataset, SyntheticExample};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub lambda: f64,
    pub seed: u64,
}

impl From<&RunConfig> for TrainConfig {
    fn from(c: &RunConfig) -> Self {
        Self {
            lr: c.lr,
            batch_size: c.batch_size,
            max_epochs: c.max_epochs,
            patience: c.patience,
            lambda: c.lambda,
            seed: c.seed,
        }
    }
}

/// Progress of a run; enough to resume it.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub epochs: usize,
    pub steps: u64,
    pub epoch_losses: Vec<f64>,
    pub val_acc: Vec<f64>,
    pub best_acc: Option<f64>,
    pub best_epoch: usize,
    pub bad_evals: usize,
    pub stopped_early: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub em: f64,
    pub f1_token: f64,
    pub boundary_f1: f64,
    pub answer_acc: f64,
    pub n: usize,
}

/// Predictions and scores of a model on one dataset.
pub fn evaluate(model: &Model, data: &Dataset) -> Result<(Metrics, Vec<PredictionRecord>)> {
    if data.examples.is_empty() {
        return Err(HarnessError::Invalid("cannot evaluate on an empty dataset".into()));
    }
    let mut records = Vec::with_capacity(data.examples.len());
    let mut pairs = Vec::with_capacity(data.examples.len());
    let mut links = BinaryCounts::default();
    let mut correct = 0usize;
    for ex in &data.examples {
        let p = model.predict(&ex.input())?;
        let predicted = data.answers.get(p.answer).cloned().unwrap_or_default();
        let gold = data.answers[ex.answer].clone();
        correct += usize::from(p.answer == ex.answer);
        links.add(&p.boundaries(), &ex.boundaries)?;
        pairs.push(AnswerPair::from_strings(&predicted, &gold));
        records.push(PredictionRecord {
            id: ex.id,
            predicted,
            gold,
        });
    }
    let scores = corpus_scores(&pairs)?;
    let metrics = Metrics {
        em: scores.em,
        f1_token: scores.f1_token,
        boundary_f1: links.f1(),
        answer_acc: correct as f64 / data.examples.len() as f64,
        n: data.examples.len(),
    };
    Ok((metrics, records))
}

pub fn answer_accuracy(model: &Model, examples: &[SyntheticExample]) -> Result<f64> {
    if examples.is_empty() {
        return Err(HarnessError::Invalid("empty validation set".into()));
    }
    let mut correct = 0usize;
    for ex in examples {
        correct += usize::from(model.predict(&ex.input())?.answer == ex.answer);
    }
    Ok(correct as f64 / examples.len() as f64)
}

pub struct Trainer {
    pub model: Model,
    pub opt: Adam,
    pub cfg: TrainConfig,
    pub state: TrainState,
    /// Parameters with the best validation accuracy so far.
    pub best: ParamStore,
}

impl Trainer {
    pub fn new(model_cfg: ModelConfig, cfg: TrainConfig) -> Result<Self> {
        let model = Model::new(model_cfg)?;
        let opt = Adam::new(
            AdamConfig {
                lr: cfg.lr,
                ..Default::default()
            },
            &model.params,
        );
        let best = model.params.clone();
        Ok(Self {
            model,
            opt,
            cfg,
            state: TrainState::default(),
            best,
        })
    }

    pub fn done(&self) -> bool {
        self.state.stopped_early || self.state.epochs >= self.cfg.max_epochs
    }

    fn epoch_order(&self, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        let seed = self.cfg.seed ^ (self.state.epochs as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        order
    }

    /// Runs the next epoch, or only its first `limit` steps. Returns per-step
    /// losses. The epoch counter only advances on a full pass.
    pub fn train_epoch(
        &mut self,
        train: &[SyntheticExample],
        limit: Option<usize>,
    ) -> Result<Vec<f64>> {
        if train.is_empty() {
            return Err(HarnessError::Invalid("empty training set".into()));
        }
        let order = self.epoch_order(train.len());
        let mut losses = Vec::new();
        let inputs: Vec<_> = train.iter().map(SyntheticExample::input).collect();
        for (b, chunk) in order.chunks(self.cfg.batch_size).enumerate() {
            if limit.is_some_and(|l| b >= l) {
                return Ok(losses);
            }
            let batch: Vec<TrainItem<'_>> = chunk
                .iter()
                .map(|&i| TrainItem {
                    input: &inputs[i],
                    answer: train[i].answer,
                    boundaries: &train[i].boundaries,
                })
                .collect();
            let l = train_step(
                &mut self.model,
                &mut self.opt,
                &batch,
                self.cfg.lambda,
                self.state.steps,
            )?;
            self.state.steps += 1;
            losses.push(l);
        }
        self.state.epochs += 1;
        self.state
            .epoch_losses
            .push(losses.iter().sum::<f64>() / losses.len() as f64);
        Ok(losses)
    }

    /// Records a validation accuracy and applies early stopping: training
    /// halts once `patience` consecutive evaluations fail to improve (so
    /// patience 0 stops at the first non-improving one).
    pub fn observe(&mut self, val_acc: f64) {
        self.state.val_acc.push(val_acc);
        match self.state.best_acc {
            Some(best) if val_acc <= best => {
                self.state.bad_evals += 1;
                if self.state.bad_evals > self.cfg.patience {
                    self.state.stopped_early = true;
                }
            }
            _ => {
                self.state.best_acc = Some(val_acc);
                self.state.best_epoch = self.state.epochs;
                self.state.bad_evals = 0;
                self.best = self.model.params.clone();
            }
        }
    }

    /// Trains until early stopping or `max_epochs`, then keeps the best
    /// parameters.
    pub fn fit(&mut self, train: &[SyntheticExample], val: &[SyntheticExample]) -> Result<()> {
        while !self.done() {
            self.train_epoch(train, None)?;
            let acc = if val.is_empty() {
                answer_accuracy(&self.model, train)?
            } else {
                answer_accuracy(&self.model, val)?
            };
            self.observe(acc);
        }
        Ok(())
    }

    pub fn best_model(&self) -> Model {
        Model {
            config: self.model.config.clone(),
            params: self.best.clone(),
        }
    }

    /// Writes the resumable state: current and best parameters, Adam moments
    /// and a JSON sidecar.
    pub fn save_state(&self, dir: &Path) -> Result<()> {
        let mut entries: Vec<(String, &Tensor)> = Vec::new();
        for (id, name) in self.model.params.sorted() {
            entries.push((format!("param/{name}"), self.model.params.value(id)));
        }
        for (id, name) in self.best.sorted() {
            entries.push((format!("best/{name}"), self.best.value(id)));
        }
        entries.extend(self.opt.state_entries(&self.model.params));
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        let refs: Vec<(&str, &Tensor)> = entries.iter().map(|(n, t)| (n.as_str(), *t)).collect();
        let path = dir.join(STATE_FILE);
        let file = File::create(&path).map_err(|e| HarnessError::io(&path, e))?;
        let mut w = BufWriter::new(file);
        write_entries(&mut w, &refs)?;
        w.flush().map_err(|e| HarnessError::io(&path, e))?;
        let sidecar = StateSidecar {
            model: self.model.config.clone(),
            config_hash: config_hash(&self.model.config),
            train: self.cfg,
            state: self.state.clone(),
            adam_steps: self.opt.steps(),
        };
        write_json(&dir.join(STATE_SIDECAR), &sidecar)
    }

    pub fn resume(dir: &Path) -> Result<Self> {
        let sidecar: StateSidecar = read_json(&dir.join(STATE_SIDECAR))?;
        check_hash(&sidecar.model, &sidecar.config_hash)?;
        let path = dir.join(STATE_FILE);
        let file = File::open(&path).map_err(|e| HarnessError::io(&path, e))?;
        let entries = read_entries(&mut BufReader::new(file))?;
        let mut t = Trainer::new(sidecar.model, sidecar.train)?;
        let find = |key: String| {
            entries
                .iter()
                .find(|(n, _)| *n == key)
                .map(|(_, v)| v.clone())
                .ok_or_else(|| HarnessError::Invalid(format!("state lacks {key}")))
        };
        let names: Vec<String> = t.model.params.sorted().map(|(_, n)| n.to_string()).collect();
        for name in &names {
            t.model.params.set(name, find(format!("param/{name}"))?)?;
            t.best.set(name, find(format!("best/{name}"))?)?;
        }
        t.opt.restore(&t.model.params, sidecar.adam_steps, &entries)?;
        t.state = sidecar.state;
        Ok(t)
    }
}

pub const MODEL_FILE: &str = "model.vcfk";
pub const MODEL_SIDECAR: &str = "model.json";
pub const STATE_FILE: &str = "state.vcfk";
pub const STATE_SIDECAR: &str = "state.json";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateSidecar {
    model: ModelConfig,
    config_hash: String,
    train: TrainConfig,
    state: TrainState,
    adam_steps: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSidecar {
    pub model: ModelConfig,
    pub config_hash: String,
}

fn check_hash(cfg: &ModelConfig, expected: &str) -> Result<()> {
    let got = config_hash(cfg);
    if got != expected {
        return Err(HarnessError::Invalid(format!(
            "config hash mismatch: sidecar says {expected}, configuration hashes to {got}"
        )));
    }
    Ok(())
}

/// Saves parameters to `path` and the configuration sidecar next to it
/// (same stem, `.json`).
pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| HarnessError::io(path, e))?;
    let mut w = BufWriter::new(file);
    model.params.save(&mut w)?;
    w.flush().map_err(|e| HarnessError::io(path, e))?;
    let sidecar = ModelSidecar {
        model: model.config.clone(),
        config_hash: config_hash(&model.config),
    };
    write_json(&path.with_extension("json"), &sidecar)
}

/// Loads a model saved by [`save_model`]. When `expected` is given, its hash
/// must match the checkpoint's.
pub fn load_model(path: &Path, expected: Option<&ModelConfig>) -> Result<Model> {
    let sidecar: ModelSidecar = read_json(&path.with_extension("json"))?;
    check_hash(&sidecar.model, &sidecar.config_hash)?;
    if let Some(cfg) = expected {
        check_hash(cfg, &sidecar.config_hash)?;
    }
    let mut model = Model::new(sidecar.model)?;
    let file = File::open(path).map_err(|e| HarnessError::io(path, e))?;
    model.params.load_into(&mut BufReader::new(file))?;
    Ok(model)
}

/// Checks that a model fits a dataset's vocabulary, answers and features.
pub fn check_compatible(model: &ModelConfig, data: &Dataset) -> Result<()> {
    let c = &data.config;
    if model.vocab_size != c.vocab_size()
        || model.n_answers != data.answers.len()
        || model.d_fr != c.d_fr
    {
        return Err(HarnessError::Invalid(format!(
            "model (vocab {}, answers {}, d_fr {}) does not fit dataset (vocab {}, answers {}, d_fr {})",
            model.vocab_size,
            model.n_answers,
            model.d_fr,
            c.vocab_size(),
            data.answers.len(),
            c.d_fr
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub arm: Arm,
    pub seed: u64,
    pub config: RunConfig,
    pub em: f64,
    pub f1_token: f64,
    pub boundary_f1: f64,
    pub answer_acc: f64,
    pub n_test: usize,
    pub epochs: usize,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub epoch_losses: Vec<f64>,
    pub val_acc: Vec<f64>,
    pub wall_s: f64,
}

impl RunReport {
    pub fn new(cfg: &RunConfig, metrics: Metrics, state: &TrainState, wall_s: f64) -> Self {
        Self {
            arm: cfg.arm,
            seed: cfg.seed,
            config: cfg.clone(),
            em: metrics.em,
            f1_token: metrics.f1_token,
            boundary_f1: metrics.boundary_f1,
            answer_acc: metrics.answer_acc,
            n_test: metrics.n,
            epochs: state.epochs,
            best_epoch: state.best_epoch,
            stopped_early: state.stopped_early,
            epoch_losses: state.epoch_losses.clone(),
            val_acc: state.val_acc.clone(),
            wall_s,
        }
    }

    pub fn metrics(&self) -> Metrics {
        Metrics {
            em: self.em,
            f1_token: self.f1_token,
            boundary_f1: self.boundary_f1,
            answer_acc: self.answer_acc,
            n: self.n_test,
        }
    }
}

/// Everything a finished run produced.
pub struct RunOutcome {
    pub report: RunReport,
    pub model: Model,
    pub predictions: Vec<PredictionRecord>,
}

/// Trains one arm on given splits and evaluates the best parameters on `test`.
pub fn run_on(
    cfg: &RunConfig,
    train: &Dataset,
    val: &Dataset,
    test: &Dataset,
) -> Result<RunOutcome> {
    cfg.validate()?;
    let started = Instant::now();
    let model_cfg = cfg.model();
    for d in [train, val, test] {
        check_compatible(&model_cfg, d)?;
    }
    let mut trainer = Trainer::new(model_cfg, TrainConfig::from(cfg))?;
    trainer.fit(&train.examples, &val.examples)?;
    let model = trainer.best_model();
    let (metrics, predictions) = evaluate(&model, test)?;
    let report = RunReport::new(cfg, metrics, &trainer.state, started.elapsed().as_secs_f64());
    Ok(RunOutcome {
        report,
        model,
        predictions,
    })
}
