//! Object, scene-text and question embeddings and their fusion.
//!
//! * objects: `LN(x_fr · W_fr) + LN(x_box · W_bx)`
//! * scene text: `LN(x_fr · W_fr) + LN(x_box · W_bx) + e_tok · W_tok`, the
//!   token term is not normalised unless `normalize_token_term` is set
//! * question: rows of the shared token table
//!
//! The token table is shared between scene-text tokens and question tokens.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

pub const BOX_DIM: usize = 4;

/// Normalised `(x_min, y_min, x_max, y_max)`.
pub type BoundingBox = [f64; BOX_DIM];

pub fn validate_box(b: &BoundingBox) -> Result<()> {
    let in_unit = b.iter().all(|v| (0.0..=1.0).contains(v));
    if !in_unit || b[0] > b[2] || b[1] > b[3] {
        return Err(Error::Config(format!("invalid bounding box {b:?}")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawObject {
    pub appearance: Vec<f64>,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    /// Detector label as a token id. Ignored unless object labels are enabled.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawSceneText {
    pub appearance: Vec<f64>,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub token: usize,
}

/// Switches that change the embedding formulas.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EmbeddingOptions {
    pub normalize_token_term: bool,
    pub use_object_labels: bool,
    pub ln_eps: f64,
}

impl Default for EmbeddingOptions {
    fn default() -> Self {
        Self {
            normalize_token_term: false,
            use_object_labels: false,
            ln_eps: 1e-6,
        }
    }
}

/// Linear map followed by layer norm.
#[derive(Clone, Copy, Debug)]
pub struct NormedProjection {
    pub w: Var,
    pub gain: Var,
    pub bias: Var,
}

impl NormedProjection {
    pub fn apply(&self, g: &mut Graph<'_>, x: Var, eps: f64) -> Result<Var> {
        let p = g.matmul(x, self.w)?;
        g.layer_norm(p, self.gain, self.bias, eps)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ObjectEmbedding {
    pub appearance: NormedProjection,
    pub bbox: NormedProjection,
}

#[derive(Clone, Copy, Debug)]
pub struct SceneTextEmbedding {
    pub appearance: NormedProjection,
    pub bbox: NormedProjection,
    pub token: Var,
    /// Only used with `normalize_token_term`.
    pub token_norm: Option<(Var, Var)>,
}

fn feature_matrix(rows: Vec<&[f64]>, d: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(rows.len() * d);
    for r in &rows {
        if r.len() != d {
            return Err(Error::Shape {
                op: "features",
                lhs: vec![d],
                rhs: vec![r.len()],
            });
        }
        data.extend_from_slice(r);
    }
    Tensor::new(vec![rows.len(), d], data)
}

fn width(g: &Graph<'_>, w: Var) -> usize {
    g.shape(w)[0]
}

pub fn embed_objects(
    g: &mut Graph<'_>,
    objs: &[RawObject],
    p: &ObjectEmbedding,
    table: Var,
    opts: &EmbeddingOptions,
) -> Result<Var> {
    let d_fr = width(g, p.appearance.w);
    let app = g.input(feature_matrix(
        objs.iter().map(|o| o.appearance.as_slice()).collect(),
        d_fr,
    )?);
    let bx = g.input(feature_matrix(
        objs.iter().map(|o| o.bbox.as_slice()).collect(),
        BOX_DIM,
    )?);
    let a = p.appearance.apply(g, app, opts.ln_eps)?;
    let b = p.bbox.apply(g, bx, opts.ln_eps)?;
    let mut out = g.add(a, b)?;
    if opts.use_object_labels {
        let ids = objs
            .iter()
            .map(|o| {
                o.label
                    .ok_or_else(|| Error::Config("object label required".into()))
            })
            .collect::<Result<Vec<_>>>()?;
        let labels = g.gather_rows(table, &ids)?;
        out = g.add(out, labels)?;
    }
    Ok(out)
}

pub fn embed_scene_texts(
    g: &mut Graph<'_>,
    ocr: &[RawSceneText],
    p: &SceneTextEmbedding,
    table: Var,
    opts: &EmbeddingOptions,
) -> Result<Var> {
    let d_fr = width(g, p.appearance.w);
    let app = g.input(feature_matrix(
        ocr.iter().map(|o| o.appearance.as_slice()).collect(),
        d_fr,
    )?);
    let bx = g.input(feature_matrix(
        ocr.iter().map(|o| o.bbox.as_slice()).collect(),
        BOX_DIM,
    )?);
    let ids: Vec<usize> = ocr.iter().map(|o| o.token).collect();
    let a = p.appearance.apply(g, app, opts.ln_eps)?;
    let b = p.bbox.apply(g, bx, opts.ln_eps)?;
    let tok = g.gather_rows(table, &ids)?;
    let mut t = g.matmul(tok, p.token)?;
    if opts.normalize_token_term {
        let (gain, bias) = p
            .token_norm
            .ok_or_else(|| Error::Config("token-term layer norm parameters missing".into()))?;
        t = g.layer_norm(t, gain, bias, opts.ln_eps)?;
    }
    let ab = g.add(a, b)?;
    g.add(ab, t)
}

pub fn embed_question(g: &mut Graph<'_>, token_ids: &[usize], table: Var) -> Result<Var> {
    g.gather_rows(table, token_ids)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Segment {
    Objects,
    SceneText,
    Question,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentMap {
    pub objects: Range<usize>,
    pub scene_text: Range<usize>,
    pub question: Range<usize>,
}

impl SegmentMap {
    pub fn range(&self, s: Segment) -> Range<usize> {
        match s {
            Segment::Objects => self.objects.clone(),
            Segment::SceneText => self.scene_text.clone(),
            Segment::Question => self.question.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.question.end
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `[f_obj; f_ocr; f_q]` with its segment map and a per-row validity mask.
#[derive(Clone, Debug)]
pub struct FusedSequence {
    pub features: Var,
    pub segments: SegmentMap,
    pub mask: Vec<bool>,
}

impl FusedSequence {
    pub fn segment(&self, g: &mut Graph<'_>, s: Segment) -> Result<Var> {
        let r = self.segments.range(s);
        g.slice_rows(self.features, r.start, r.end)
    }
}

pub fn fuse(g: &mut Graph<'_>, f_obj: Var, f_ocr: Var, f_q: Var) -> Result<FusedSequence> {
    let n_obj = g.shape(f_obj)[0];
    let n_ocr = g.shape(f_ocr)[0];
    let n_q = g.shape(f_q)[0];
    let features = g.concat_rows(&[f_obj, f_ocr, f_q])?;
    let segments = SegmentMap {
        objects: 0..n_obj,
        scene_text: n_obj..n_obj + n_ocr,
        question: n_obj + n_ocr..n_obj + n_ocr + n_q,
    };
    Ok(FusedSequence {
        features,
        mask: vec![true; segments.len()],
        segments,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::ParamStore;

    struct Fixture {
        store: ParamStore,
    }

    impl Fixture {
        fn new(d_fr: usize, d: usize, vocab: usize) -> Self {
            let mut store = ParamStore::new();
            for prefix in ["fr", "bx"] {
                let rows = if prefix == "fr" { d_fr } else { BOX_DIM };
                let w: Vec<f64> = (0..rows * d).map(|i| ((i * 7 % 11) as f64 - 5.0) / 10.0).collect();
                store.insert(format!("{prefix}.w"), Tensor::matrix(rows, d, w).unwrap()).unwrap();
                store.insert(format!("{prefix}.gain"), Tensor::filled(&[d], 1.0)).unwrap();
                store.insert(format!("{prefix}.bias"), Tensor::zeros(&[d])).unwrap();
            }
            store.insert("tok.w", Tensor::identity(d)).unwrap();
            // row 0 is all zeros
            let table: Vec<f64> = (0..vocab * d)
                .map(|i| if i < d { 0.0 } else { (i as f64).sin() })
                .collect();
            store.insert("table", Tensor::matrix(vocab, d, table).unwrap()).unwrap();
            Self { store }
        }

        fn parts(&self, g: &mut Graph<'_>) -> (ObjectEmbedding, SceneTextEmbedding, Var) {
            let np = |g: &mut Graph<'_>, p: &str| NormedProjection {
                w: g.param_named(&format!("{p}.w")).unwrap(),
                gain: g.param_named(&format!("{p}.gain")).unwrap(),
                bias: g.param_named(&format!("{p}.bias")).unwrap(),
            };
            let obj = ObjectEmbedding {
                appearance: np(g, "fr"),
                bbox: np(g, "bx"),
            };
            let ocr = SceneTextEmbedding {
                appearance: np(g, "fr"),
                bbox: np(g, "bx"),
                token: g.param_named("tok.w").unwrap(),
                token_norm: None,
            };
            let table = g.param_named("table").unwrap();
            (obj, ocr, table)
        }
    }

    fn opts() -> EmbeddingOptions {
        EmbeddingOptions {
            ln_eps: 1e-6,
            ..Default::default()
        }
    }

    #[test]
    fn zero_inputs_give_zero_rows() {
        let fx = Fixture::new(3, 4, 5);
        let mut g = Graph::new(&fx.store);
        let (obj, ocr, table) = fx.parts(&mut g);
        let o = RawObject {
            appearance: vec![0.0; 3],
            bbox: [0.0; 4],
            label: None,
        };
        let out = embed_objects(&mut g, &[o], &obj, table, &opts()).unwrap();
        assert!(g.value(out).data().iter().all(|&v| v == 0.0));

        let s = RawSceneText {
            appearance: vec![0.0; 3],
            bbox: [0.0; 4],
            token: 0,
        };
        let out = embed_scene_texts(&mut g, &[s], &ocr, table, &opts()).unwrap();
        assert!(g.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn projection_identity_gives_layer_normed_appearance() {
        let mut store = ParamStore::new();
        store.insert("fr.w", Tensor::identity(4)).unwrap();
        store.insert("bx.w", Tensor::zeros(&[4, 4])).unwrap();
        for p in ["fr", "bx"] {
            store.insert(format!("{p}.gain"), Tensor::filled(&[4], 1.0)).unwrap();
            store.insert(format!("{p}.bias"), Tensor::zeros(&[4])).unwrap();
        }
        store.insert("table", Tensor::zeros(&[1, 4])).unwrap();
        let mut g = Graph::new(&store);
        let np = |g: &mut Graph<'_>, p: &str| NormedProjection {
            w: g.param_named(&format!("{p}.w")).unwrap(),
            gain: g.param_named(&format!("{p}.gain")).unwrap(),
            bias: g.param_named(&format!("{p}.bias")).unwrap(),
        };
        let obj = ObjectEmbedding {
            appearance: np(&mut g, "fr"),
            bbox: np(&mut g, "bx"),
        };
        let table = g.param_named("table").unwrap();
        let o = RawObject {
            appearance: vec![1.0, 2.0, 3.0, 6.0],
            bbox: [0.1, 0.2, 0.3, 0.4],
            label: None,
        };
        let out = embed_objects(&mut g, &[o], &obj, table, &opts()).unwrap();
        let x = [1.0, 2.0, 3.0, 6.0];
        let mean = 3.0;
        let var = x.iter().map(|v: &f64| (v - mean).powi(2)).sum::<f64>() / 4.0;
        for (got, v) in g.value(out).data().iter().zip(x) {
            assert!((got - (v - mean) / (var + 1e-6).sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn token_term_is_not_normalised() {
        let fx = Fixture::new(3, 4, 5);
        let zero = RawSceneText {
            appearance: vec![0.0; 3],
            bbox: [0.0; 4],
            token: 2,
        };
        let run = |scale: f64| {
            let mut store = fx.store.clone();
            let t = store.get("table").unwrap().map(|v| v * scale);
            store.set("table", t).unwrap();
            let mut g = Graph::new(&store);
            let (_, ocr, table) = fx.parts(&mut g);
            let out = embed_scene_texts(&mut g, &[zero.clone()], &ocr, table, &opts()).unwrap();
            g.value(out).clone()
        };
        let base = run(1.0);
        let tripled = run(3.0);
        for (a, b) in base.data().iter().zip(tripled.data()) {
            assert_eq!(3.0 * a, *b);
        }
        // equals W_tok · e_tok with W_tok = I
        assert_eq!(base.data(), fx.store.get("table").unwrap().row(2));
    }

    #[test]
    fn question_lookup() {
        let fx = Fixture::new(3, 4, 5);
        let mut g = Graph::new(&fx.store);
        let (_, _, table) = fx.parts(&mut g);
        let q = embed_question(&mut g, &[0, 0], table).unwrap();
        let t = g.value(q);
        assert_eq!(t.row(0), t.row(1));
        let empty = embed_question(&mut g, &[], table).unwrap();
        assert_eq!(g.shape(empty), &[0, 4]);
        assert!(matches!(
            embed_question(&mut g, &[5], table),
            Err(Error::Index { .. })
        ));
    }

    #[test]
    fn fuse_orders_segments() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let a = g.input(Tensor::filled(&[2, 3], 1.0));
        let b = g.input(Tensor::filled(&[3, 3], 2.0));
        let c = g.input(Tensor::filled(&[2, 3], 3.0));
        let f = fuse(&mut g, a, b, c).unwrap();
        assert_eq!(f.segments.objects, 0..2);
        assert_eq!(f.segments.scene_text, 2..5);
        assert_eq!(f.segments.question, 5..7);
        assert_eq!(f.mask.len(), 7);
        for (s, v) in [(Segment::Objects, a), (Segment::SceneText, b), (Segment::Question, c)] {
            let part = f.segment(&mut g, s).unwrap();
            assert_eq!(g.value(part), g.value(v));
        }

        let empty = g.input(Tensor::zeros(&[0, 3]));
        let f = fuse(&mut g, empty, b, c).unwrap();
        assert_eq!(f.segments.scene_text, 0..3);

        let bad = g.input(Tensor::zeros(&[1, 2]));
        assert!(fuse(&mut g, a, bad, c).is_err());
    }

    #[test]
    fn boxes_are_validated() {
        assert!(validate_box(&[0.0, 0.0, 1.0, 1.0]).is_ok());
        assert!(validate_box(&[0.5, 0.0, 0.4, 1.0]).is_err());
        assert!(validate_box(&[0.0, 0.0, 1.2, 1.0]).is_err());
    }
}
