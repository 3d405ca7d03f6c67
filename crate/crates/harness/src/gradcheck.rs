//! Finite-difference gradient checks of the full model.

use consformer::constituent::constituent_scores;
use consformer::embeddings::{RawObject, RawSceneText};
use consformer::model::{self, ModelConfig, ModelInput};
use consformer::numerics::{
    finite_diff_grad, max_relative_error, Graph, LeafFault, ParamStore, Tensor, Var,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;

pub const TOLERANCE: f64 = 1e-4;
pub const STEP: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupResult {
    pub group: String,
    pub max_rel_error: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub groups: Vec<GroupResult>,
    pub span_len: usize,
    /// Check of the bilinear matrix through `log C[0][span_len − 1]`.
    pub span: GroupResult,
    /// Largest `|∂ log C[0][span_len − 1] / ∂W|`.
    pub span_grad_max_abs: f64,
    pub pass: bool,
}

impl GradcheckReport {
    pub fn failed_groups(&self) -> Vec<&str> {
        self.groups
            .iter()
            .chain(std::iter::once(&self.span))
            .filter(|g| !g.pass)
            .map(|g| g.group.as_str())
            .collect()
    }
}

/// The model used by the gradient check: `d_model` 8, two heads.
pub fn tiny_config(seed: u64) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_heads: 2,
        n_layers: 1,
        d_fr: 6,
        vocab_size: 12,
        n_answers: 5,
        seed,
        ..Default::default()
    }
}

/// Random example with 2 objects, 6 scene-text tokens and 3 question tokens.
pub fn tiny_example(cfg: &ModelConfig, seed: u64) -> (ModelInput, usize, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let feat = |rng: &mut ChaCha8Rng| (0..cfg.d_fr).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let objects = (0..2)
        .map(|i| RawObject {
            appearance: feat(&mut rng),
            bbox: [0.3 * i as f64, 0.1, 0.3 * i as f64 + 0.25, 0.5],
            label: None,
        })
        .collect();
    let ocr = (0..6)
        .map(|i| RawSceneText {
            appearance: feat(&mut rng),
            bbox: [0.1 * i as f64, 0.7, 0.1 * i as f64 + 0.09, 0.8],
            token: rng.gen_range(0..cfg.vocab_size),
        })
        .collect();
    let question = (0..3).map(|_| rng.gen_range(0..cfg.vocab_size)).collect();
    let boundaries = (0..5).map(|_| rng.gen_bool(0.5)).collect();
    let answer = rng.gen_range(0..cfg.n_answers);
    (
        ModelInput {
            objects,
            ocr,
            question,
        },
        answer,
        boundaries,
    )
}

fn compare(
    store: &mut ParamStore,
    fault: Option<LeafFault>,
    f: &dyn Fn(&mut Graph<'_>) -> consformer::Result<Var>,
) -> Result<Vec<GroupResult>> {
    let analytic = {
        let mut g = Graph::new(store);
        if let Some(fault) = fault {
            g = g.with_fault(fault);
        }
        let loss = f(&mut g)?;
        g.backward(loss)?
    };
    let numeric = finite_diff_grad(
        |s| {
            let mut g = Graph::new(s);
            let loss = f(&mut g)?;
            g.value(loss).item()
        },
        store,
        STEP,
    )?;
    Ok(store
        .sorted()
        .map(|(id, name)| {
            let zero = Tensor::zeros(store.value(id).shape());
            let err = max_relative_error(
                analytic.get(id).unwrap_or(&zero),
                numeric.get(id).unwrap_or(&zero),
            );
            GroupResult {
                group: name.to_string(),
                max_rel_error: err,
                pass: err < TOLERANCE,
            }
        })
        .collect())
}

/// Checks every parameter of the model on the training loss, then the
/// bilinear matrix through a long-span constituent score. `fault` corrupts the
/// backward pass of one parameter.
pub fn run(cfg: &ModelConfig, seed: u64, span_len: usize, fault: Option<&str>) -> Result<GradcheckReport> {
    let (input, answer, boundaries) = tiny_example(cfg, seed);
    let mut store = model::init_params(cfg)?;
    let fault = fault
        .map(|name| store.id(name))
        .transpose()?
        .map(|param| LeafFault { param, scale: 1.5 });
    let groups = compare(&mut store, fault, &|g| {
        let out = model::forward(g, cfg, &input, None)?;
        model::loss(g, &out, answer, &boundaries, 0.5)
    })?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5BA9);
    let d = cfg.d_model;
    let mut span_store = ParamStore::new();
    let f = (0..span_len * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    span_store.insert("features", Tensor::new(vec![span_len, d], f)?)?;
    let w = (0..d * d).map(|_| rng.gen_range(-0.3..0.3)).collect();
    let w_id = span_store.insert("cons.w", Tensor::new(vec![d, d], w)?)?;
    let span_loss = |g: &mut Graph<'_>| -> consformer::Result<Var> {
        let f = g.param_named("features")?;
        let w = g.param_named("cons.w")?;
        let c = constituent_scores(g, f, w)?;
        let flat = g.reshape(c.log_c, vec![span_len * span_len])?;
        let corner = g.gather(flat, vec![Some(span_len - 1)], &[1])?;
        Ok(g.sum(corner))
    };
    let span_fault = fault
        .filter(|f| store.name(f.param) == "cons.w")
        .map(|f| LeafFault {
            param: w_id,
            scale: f.scale,
        });
    let span_groups = compare(&mut span_store, span_fault, &span_loss)?;
    let mut span = span_groups
        .into_iter()
        .find(|g| g.group == "cons.w")
        .expect("cons.w checked");
    span.group = format!("cons.w (span {span_len})");
    let grad_max = {
        let mut g = Graph::new(&span_store);
        let l = span_loss(&mut g)?;
        g.backward(l)?.get(w_id).map_or(0.0, Tensor::max_abs)
    };
    let pass = groups.iter().all(|g| g.pass) && span.pass && grad_max > 0.0;
    Ok(GradcheckReport {
        groups,
        span_len,
        span,
        span_grad_max_abs: grad_max,
        pass,
    })
}
