//! Desk-scale end-to-end network.
//!
//! embeddings → constituent-gated attention over the scene-text rows →
//! pre-norm transformer encoder over the fused sequence → mean pooling →
//! answer classifier. Link probabilities of the constituent layer are exposed
//! as boundary logits so they can be supervised and evaluated.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::attention::{
    constituent_attention, self_attention, AttentionConfig, ConstituentAttentionParams,
    GatedScores, Projections, ScaleMode,
};
use crate::constituent::LINK_FLOOR;
use crate::embeddings::{
    embed_objects, embed_question, embed_scene_texts, fuse, EmbeddingOptions, NormedProjection,
    ObjectEmbedding, RawObject, RawSceneText, SceneTextEmbedding, BOX_DIM,
};
use crate::error::{Error, Result};
use crate::numerics::{Gradients, Graph, ParamStore, Tensor, Var};
use crate::optim::Adam;

/// How the constituent layer output re-enters the scene-text rows.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OcrMerge {
    /// `f_ocr + layer(f_ocr)`
    #[default]
    Residual,
    /// `layer(f_ocr)`
    Replace,
}

/// Rows averaged to form the answer representation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Question rows, or every row when the question is empty.
    #[default]
    Question,
    All,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_fr: usize,
    pub vocab_size: usize,
    pub n_answers: usize,
    pub dropout: f64,
    pub use_a: bool,
    pub use_c: bool,
    pub scale_mode: ScaleMode,
    pub ocr_merge: OcrMerge,
    pub pooling: Pooling,
    pub normalize_token_term: bool,
    pub use_object_labels: bool,
    pub ffn_mult: usize,
    pub ln_eps: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            n_heads: 4,
            n_layers: 1,
            d_fr: 16,
            vocab_size: 72,
            n_answers: 96,
            dropout: 0.0,
            use_a: true,
            use_c: true,
            scale_mode: ScaleMode::DModel,
            ocr_merge: OcrMerge::Residual,
            pooling: Pooling::Question,
            normalize_token_term: false,
            use_object_labels: false,
            ffn_mult: 4,
            ln_eps: 1e-6,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_fr", self.d_fr),
            ("vocab_size", self.vocab_size),
            ("n_answers", self.n_answers),
            ("ffn_mult", self.ffn_mult),
        ];
        for (name, v) in extents {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        if !(self.ln_eps >= 0.0) {
            return Err(Error::Config("ln_eps must be non-negative".into()));
        }
        self.attention().validate()
    }

    /// Configuration of the constituent-gated layer.
    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            use_a: self.use_a,
            use_c: self.use_c,
            scale_mode: self.scale_mode,
        }
    }

    fn encoder_attention(&self) -> AttentionConfig {
        AttentionConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            use_a: true,
            use_c: false,
            scale_mode: ScaleMode::DHead,
        }
    }

    fn embedding_options(&self) -> EmbeddingOptions {
        EmbeddingOptions {
            normalize_token_term: self.normalize_token_term,
            use_object_labels: self.use_object_labels,
            ln_eps: self.ln_eps,
        }
    }
}

/// Inputs for one image/question pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelInput {
    pub objects: Vec<RawObject>,
    pub ocr: Vec<RawSceneText>,
    pub question: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct ModelOutput {
    /// `1 × n_answers`
    pub answer_logits: Var,
    /// `logit(P)` per adjacent scene-text pair, length `n_ocr − 1`.
    pub boundary_logits: Var,
    /// Link probabilities `P`, length `n_ocr − 1`.
    pub links: Var,
    /// Scores of the constituent layer, absent when there is no scene text.
    pub ocr_scores: Option<GatedScores>,
    /// Scene-text rows after the constituent layer.
    pub ocr_features: Var,
}

enum Init {
    Uniform,
    Zeros,
    Ones,
    Gaussian(f64),
}

/// Parameter names, shapes and initialisers in a fixed order.
fn param_specs(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = cfg.d_model;
    let mut specs = Vec::new();
    let normed = |specs: &mut Vec<_>, prefix: &str, rows: usize| {
        specs.push((format!("{prefix}.w"), vec![rows, d], Init::Uniform));
        specs.push((format!("{prefix}.ln.gain"), vec![d], Init::Ones));
        specs.push((format!("{prefix}.ln.bias"), vec![d], Init::Zeros));
    };
    specs.push(("tok_emb".to_string(), vec![cfg.vocab_size, d], Init::Gaussian(1.0)));
    normed(&mut specs, "obj.fr", cfg.d_fr);
    normed(&mut specs, "obj.bx", BOX_DIM);
    normed(&mut specs, "ocr.fr", cfg.d_fr);
    normed(&mut specs, "ocr.bx", BOX_DIM);
    specs.push(("ocr.tok.w".into(), vec![d, d], Init::Uniform));
    if cfg.normalize_token_term {
        specs.push(("ocr.tok.ln.gain".into(), vec![d], Init::Ones));
        specs.push(("ocr.tok.ln.bias".into(), vec![d], Init::Zeros));
    }
    for name in ["cons.w", "cons.wq", "cons.wk", "cons.wv", "cons.wo"] {
        specs.push((name.into(), vec![d, d], Init::Uniform));
    }
    let hidden = d * cfg.ffn_mult;
    for l in 0..cfg.n_layers {
        let p = format!("enc.{l}");
        specs.push((format!("{p}.ln1.gain"), vec![d], Init::Ones));
        specs.push((format!("{p}.ln1.bias"), vec![d], Init::Zeros));
        for w in ["wq", "wk", "wv", "wo"] {
            specs.push((format!("{p}.{w}"), vec![d, d], Init::Uniform));
        }
        specs.push((format!("{p}.ln2.gain"), vec![d], Init::Ones));
        specs.push((format!("{p}.ln2.bias"), vec![d], Init::Zeros));
        specs.push((format!("{p}.ff1.w"), vec![d, hidden], Init::Uniform));
        specs.push((format!("{p}.ff1.b"), vec![hidden], Init::Zeros));
        specs.push((format!("{p}.ff2.w"), vec![hidden, d], Init::Uniform));
        specs.push((format!("{p}.ff2.b"), vec![d], Init::Zeros));
    }
    specs.push(("final_ln.gain".into(), vec![d], Init::Ones));
    specs.push(("final_ln.bias".into(), vec![d], Init::Zeros));
    specs.push(("head.w".into(), vec![d, cfg.n_answers], Init::Uniform));
    specs.push(("head.b".into(), vec![cfg.n_answers], Init::Zeros));
    specs
}

/// Freshly initialised parameters. Every parameter is drawn regardless of the
/// ablation flags, so arms that share a seed share their initial weights.
pub fn init_params(cfg: &ModelConfig) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new();
    for (name, shape, init) in param_specs(cfg) {
        let numel: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; numel],
            Init::Ones => vec![1.0; numel],
            Init::Uniform => {
                let bound = 1.0 / (shape[0] as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound);
                (0..numel).map(|_| dist.sample(&mut rng)).collect()
            }
            Init::Gaussian(sigma) => {
                let dist = Normal::new(0.0, sigma).expect("positive sigma");
                (0..numel).map(|_| dist.sample(&mut rng)).collect()
            }
        };
        store.insert(name, Tensor::new(shape, data)?)?;
    }
    Ok(store)
}

fn normed(g: &mut Graph<'_>, prefix: &str) -> Result<NormedProjection> {
    Ok(NormedProjection {
        w: g.param_named(&format!("{prefix}.w"))?,
        gain: g.param_named(&format!("{prefix}.ln.gain"))?,
        bias: g.param_named(&format!("{prefix}.ln.bias"))?,
    })
}

fn dropout(g: &mut Graph<'_>, x: Var, rate: f64, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
    let Some(rng) = rng else { return Ok(x) };
    if rate == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - rate);
    let shape = g.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let mask: Vec<f64> = (0..n)
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
        .collect();
    let m = g.input(Tensor::new(shape, mask)?);
    g.mul(x, m)
}

/// Runs the network. `dropout_rng` enables dropout (training mode).
pub fn forward(
    g: &mut Graph<'_>,
    cfg: &ModelConfig,
    input: &ModelInput,
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<ModelOutput> {
    let table = g.param_named("tok_emb")?;
    let opts = cfg.embedding_options();

    let obj = ObjectEmbedding {
        appearance: normed(g, "obj.fr")?,
        bbox: normed(g, "obj.bx")?,
    };
    let f_obj = embed_objects(g, &input.objects, &obj, table, &opts)?;

    let token_norm = if cfg.normalize_token_term {
        Some((
            g.param_named("ocr.tok.ln.gain")?,
            g.param_named("ocr.tok.ln.bias")?,
        ))
    } else {
        None
    };
    let ocr_emb = SceneTextEmbedding {
        appearance: normed(g, "ocr.fr")?,
        bbox: normed(g, "ocr.bx")?,
        token: g.param_named("ocr.tok.w")?,
        token_norm,
    };
    let f_ocr = embed_scene_texts(g, &input.ocr, &ocr_emb, table, &opts)?;
    let f_q = embed_question(g, &input.question, table)?;

    let n_ocr = input.ocr.len();
    let (ocr_features, links, ocr_scores) = if n_ocr == 0 {
        let empty = g.input(Tensor::zeros(&[0]));
        (f_ocr, empty, None)
    } else {
        let params = ConstituentAttentionParams {
            w: g.param_named("cons.w")?,
            proj: Projections {
                wq: g.param_named("cons.wq")?,
                wk: g.param_named("cons.wk")?,
                wv: g.param_named("cons.wv")?,
                wo: g.param_named("cons.wo")?,
            },
        };
        let mask = vec![true; n_ocr];
        let layer = constituent_attention(g, f_ocr, &params, &mask, &cfg.attention())?;
        let out = dropout(g, layer.out, cfg.dropout, dropout_rng.as_deref_mut())?;
        let merged = match cfg.ocr_merge {
            OcrMerge::Residual => g.add(f_ocr, out)?,
            OcrMerge::Replace => out,
        };
        (merged, layer.constituents.links, Some(layer.scores))
    };

    let fused = fuse(g, f_obj, ocr_features, f_q)?;
    let enc_cfg = cfg.encoder_attention();
    let mut x = fused.features;
    for l in 0..cfg.n_layers {
        let p = format!("enc.{l}");
        let ln1_g = g.param_named(&format!("{p}.ln1.gain"))?;
        let ln1_b = g.param_named(&format!("{p}.ln1.bias"))?;
        let h = g.layer_norm(x, ln1_g, ln1_b, cfg.ln_eps)?;
        let proj = Projections {
            wq: g.param_named(&format!("{p}.wq"))?,
            wk: g.param_named(&format!("{p}.wk"))?,
            wv: g.param_named(&format!("{p}.wv"))?,
            wo: g.param_named(&format!("{p}.wo"))?,
        };
        let a = self_attention(g, h, &proj, &fused.mask, &enc_cfg)?;
        let a = dropout(g, a, cfg.dropout, dropout_rng.as_deref_mut())?;
        x = g.add(x, a)?;

        let ln2_g = g.param_named(&format!("{p}.ln2.gain"))?;
        let ln2_b = g.param_named(&format!("{p}.ln2.bias"))?;
        let h = g.layer_norm(x, ln2_g, ln2_b, cfg.ln_eps)?;
        let w1 = g.param_named(&format!("{p}.ff1.w"))?;
        let b1 = g.param_named(&format!("{p}.ff1.b"))?;
        let w2 = g.param_named(&format!("{p}.ff2.w"))?;
        let b2 = g.param_named(&format!("{p}.ff2.b"))?;
        let h = g.matmul(h, w1)?;
        let h = g.add_row(h, b1)?;
        let h = g.gelu(h)?;
        let h = g.matmul(h, w2)?;
        let h = g.add_row(h, b2)?;
        let h = dropout(g, h, cfg.dropout, dropout_rng.as_deref_mut())?;
        x = g.add(x, h)?;
    }
    let fg = g.param_named("final_ln.gain")?;
    let fb = g.param_named("final_ln.bias")?;
    let x = g.layer_norm(x, fg, fb, cfg.ln_eps)?;

    let q = fused.segments.question.clone();
    let pooled_rows = match cfg.pooling {
        Pooling::Question if !q.is_empty() => g.slice_rows(x, q.start, q.end)?,
        _ => x,
    };
    let pooled = g.mean_rows(pooled_rows)?;
    let hw = g.param_named("head.w")?;
    let hb = g.param_named("head.b")?;
    let logits = g.matmul(pooled, hw)?;
    let answer_logits = g.add_row(logits, hb)?;

    // logit(P) = log P − log(1 − P); P = 1 happens for two-token sequences.
    let p = g.clamp(links, LINK_FLOOR, 1.0 - LINK_FLOOR);
    let log_p = g.log(p)?;
    let one_minus = g.affine(p, -1.0, 1.0);
    let log_q = g.log(one_minus)?;
    let neg_log_q = g.scale(log_q, -1.0);
    let boundary_logits = g.add(log_p, neg_log_q)?;

    Ok(ModelOutput {
        answer_logits,
        boundary_logits,
        links,
        ocr_scores,
        ocr_features,
    })
}

/// `CE(answer) + λ · mean BCE(boundaries)`. The boundary term is dropped when
/// `λ = 0` or there are no adjacent scene-text pairs.
pub fn loss(
    g: &mut Graph<'_>,
    out: &ModelOutput,
    gold_answer: usize,
    gold_boundaries: &[bool],
    lambda: f64,
) -> Result<Var> {
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("lambda {lambda} must be >= 0")));
    }
    let n_links = g.value(out.boundary_logits).numel();
    if gold_boundaries.len() != n_links {
        return Err(Error::Shape {
            op: "loss",
            lhs: vec![n_links],
            rhs: vec![gold_boundaries.len()],
        });
    }
    let ce = g.cross_entropy(out.answer_logits, gold_answer)?;
    if lambda == 0.0 || n_links == 0 {
        return Ok(ce);
    }
    let targets: Vec<f64> = gold_boundaries
        .iter()
        .map(|&b| if b { 1.0 } else { 0.0 })
        .collect();
    let bce = g.bce_with_logits(out.boundary_logits, &targets)?;
    let bce = g.scale(bce, lambda);
    g.add(ce, bce)
}

/// One labelled example as seen by the training loop.
#[derive(Clone, Copy, Debug)]
pub struct TrainItem<'a> {
    pub input: &'a ModelInput,
    pub answer: usize,
    pub boundaries: &'a [bool],
}

/// Predictions for one example, detached from any graph.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub answer: usize,
    pub answer_logits: Vec<f64>,
    pub links: Vec<f64>,
}

impl Prediction {
    /// Links with `P >= 0.5` are predicted as same-word.
    pub fn boundaries(&self) -> Vec<bool> {
        self.links.iter().map(|&p| p >= 0.5).collect()
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let params = init_params(&config)?;
        Ok(Self { config, params })
    }

    pub fn predict(&self, input: &ModelInput) -> Result<Prediction> {
        let mut g = Graph::new(&self.params);
        let out = forward(&mut g, &self.config, input, None)?;
        let logits = g.value(out.answer_logits).data().to_vec();
        let answer = logits
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
                if v > best.1 {
                    (i, v)
                } else {
                    best
                }
            })
            .0;
        Ok(Prediction {
            answer,
            answer_logits: logits,
            links: g.value(out.links).data().to_vec(),
        })
    }

    /// Loss value and gradients for one example. `dropout_seed` turns on
    /// dropout with a generator seeded from it.
    pub fn loss_and_grads(
        &self,
        item: &TrainItem<'_>,
        lambda: f64,
        dropout_seed: Option<u64>,
    ) -> Result<(f64, Gradients)> {
        let mut g = Graph::new(&self.params);
        let mut rng = dropout_seed.map(ChaCha8Rng::seed_from_u64);
        let out = forward(&mut g, &self.config, item.input, rng.as_mut())?;
        let l = loss(&mut g, &out, item.answer, item.boundaries, lambda)?;
        let value = g.value(l).item()?;
        let grads = g.backward(l)?;
        Ok((value, grads))
    }

    /// Loss value only, without building gradients.
    pub fn loss_value(&self, item: &TrainItem<'_>, lambda: f64) -> Result<f64> {
        eval_loss(&self.params, &self.config, item, lambda)
    }
}

pub fn eval_loss(
    params: &ParamStore,
    cfg: &ModelConfig,
    item: &TrainItem<'_>,
    lambda: f64,
) -> Result<f64> {
    let mut g = Graph::new(params);
    let out = forward(&mut g, cfg, item.input, None)?;
    let l = loss(&mut g, &out, item.answer, item.boundaries, lambda)?;
    g.value(l).item()
}

/// One Adam update on the mean loss of `batch`. Returns the mean loss.
///
/// `step_seed` feeds dropout; each example gets its own generator derived from
/// the model seed, the step seed and its batch position.
pub fn train_step(
    model: &mut Model,
    opt: &mut Adam,
    batch: &[TrainItem<'_>],
    lambda: f64,
    step_seed: u64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Empty { what: "batch" });
    }
    model.params.zero_grads();
    let mut total = 0.0;
    let use_dropout = model.config.dropout > 0.0;
    for (i, item) in batch.iter().enumerate() {
        let seed = use_dropout.then(|| {
            splitmix(model.config.seed ^ splitmix(step_seed ^ splitmix(i as u64)))
        });
        let (l, grads) = model.loss_and_grads(item, lambda, seed)?;
        if !l.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss of batch item {i} at step {step_seed}: {l}"
            )));
        }
        total += l;
        model.params.accumulate(&grads);
    }
    let n = batch.len() as f64;
    model.params.scale_grads(1.0 / n);
    opt.step(&mut model.params);
    if !model.params.all_finite() {
        return Err(Error::NonFinite(format!("parameters after step {step_seed}")));
    }
    Ok(total / n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::AdamConfig;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            d_fr: 5,
            vocab_size: 10,
            n_answers: 4,
            seed: 3,
            ..Default::default()
        }
    }

    pub(crate) fn tiny_input(n_ocr: usize) -> ModelInput {
        let objects = (0..2)
            .map(|i| RawObject {
                appearance: (0..5).map(|k| ((i * 5 + k) as f64 * 0.37).sin()).collect(),
                bbox: [0.1 * i as f64, 0.1, 0.1 * i as f64 + 0.2, 0.4],
                label: None,
            })
            .collect();
        let ocr = (0..n_ocr)
            .map(|i| RawSceneText {
                appearance: (0..5).map(|k| ((i * 5 + k) as f64 * 0.73).cos()).collect(),
                bbox: [0.1 * i as f64, 0.5, 0.1 * i as f64 + 0.08, 0.6],
                token: i % 10,
            })
            .collect();
        ModelInput {
            objects,
            ocr,
            question: vec![1, 4, 7],
        }
    }

    #[test]
    fn singleton_ocr_has_no_boundaries() {
        let model = Model::new(tiny_config()).unwrap();
        let mut g = Graph::new(&model.params);
        let out = forward(&mut g, &model.config, &tiny_input(1), None).unwrap();
        assert_eq!(g.value(out.boundary_logits).numel(), 0);
        assert!(g.value(out.answer_logits).is_finite());
    }

    #[test]
    fn forward_is_deterministic() {
        let model = Model::new(tiny_config()).unwrap();
        let a = model.predict(&tiny_input(6)).unwrap();
        let b = model.predict(&tiny_input(6)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.links.len(), 5);
        assert_eq!(a.answer_logits.len(), 4);
    }

    #[test]
    fn lambda_zero_ignores_boundaries() {
        let model = Model::new(tiny_config()).unwrap();
        let input = tiny_input(6);
        let yes = [true; 5];
        let no = [false; 5];
        let a = TrainItem {
            input: &input,
            answer: 2,
            boundaries: &yes,
        };
        let b = TrainItem {
            boundaries: &no,
            ..a
        };
        assert_eq!(
            model.loss_value(&a, 0.0).unwrap(),
            model.loss_value(&b, 0.0).unwrap()
        );
        assert_ne!(
            model.loss_value(&a, 0.5).unwrap(),
            model.loss_value(&b, 0.5).unwrap()
        );
    }

    #[test]
    fn loss_rejects_negative_lambda_and_bad_lengths() {
        let model = Model::new(tiny_config()).unwrap();
        let input = tiny_input(4);
        let b = [true; 3];
        let item = TrainItem {
            input: &input,
            answer: 0,
            boundaries: &b,
        };
        assert!(model.loss_value(&item, -1.0).is_err());
        let short = [true; 2];
        let item = TrainItem {
            boundaries: &short,
            ..item
        };
        assert!(model.loss_value(&item, 0.5).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = tiny_config();
        c.n_heads = 3;
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.use_a = false;
        c.use_c = false;
        assert!(Model::new(c).is_err());
        let mut c = tiny_config();
        c.dropout = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn arms_share_initial_weights() {
        let a = Model::new(tiny_config()).unwrap();
        let mut c = tiny_config();
        c.use_a = false;
        let b = Model::new(c).unwrap();
        for (id, name) in a.params.sorted() {
            assert_eq!(a.params.value(id), b.params.get(name).unwrap(), "{name}");
        }
    }

    #[test]
    fn dropout_changes_training_loss_only() {
        let mut c = tiny_config();
        c.dropout = 0.3;
        let model = Model::new(c).unwrap();
        let input = tiny_input(5);
        let b = [true, false, true, true];
        let item = TrainItem {
            input: &input,
            answer: 1,
            boundaries: &b,
        };
        let (train_a, _) = model.loss_and_grads(&item, 0.5, Some(1)).unwrap();
        let (train_b, _) = model.loss_and_grads(&item, 0.5, Some(1)).unwrap();
        let (eval, _) = model.loss_and_grads(&item, 0.5, None).unwrap();
        assert_eq!(train_a, train_b);
        assert_ne!(train_a, eval);
        assert_eq!(eval, model.loss_value(&item, 0.5).unwrap());
    }

    #[test]
    fn train_step_zero_lr_keeps_params() {
        let mut model = Model::new(tiny_config()).unwrap();
        let before = model.params.clone();
        let mut opt = Adam::new(
            AdamConfig {
                lr: 0.0,
                ..Default::default()
            },
            &model.params,
        );
        let input = tiny_input(4);
        let b = [true, false, true];
        let item = TrainItem {
            input: &input,
            answer: 0,
            boundaries: &b,
        };
        let l = train_step(&mut model, &mut opt, &[item], 0.5, 0).unwrap();
        assert!(l.is_finite() && l > 0.0);
        for (id, _) in before.sorted() {
            assert_eq!(before.value(id), model.params.value(id));
        }
    }
}
