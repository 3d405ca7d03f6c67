//! Multi-head self-attention with constituent gating.
//!
//! The softmax attention matrix `A` of every head is multiplied element-wise
//! by the shared constituent matrix `C = exp(log C)`. The product is used as
//! is: rows are not renormalised after gating.

use serde::{Deserialize, Serialize};

use crate::constituent::{constituent_scores, ConstituentScores};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

/// Denominator used for the attention logits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMode {
    /// `sqrt(d_model)`, regardless of the number of heads.
    #[default]
    DModel,
    /// `sqrt(d_model / n_heads)`.
    DHead,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub use_a: bool,
    pub use_c: bool,
    pub scale_mode: ScaleMode,
}

impl AttentionConfig {
    pub fn new(d_model: usize, n_heads: usize) -> Self {
        Self {
            d_model,
            n_heads,
            use_a: true,
            use_c: true,
            scale_mode: ScaleMode::DModel,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !self.use_a && !self.use_c {
            return Err(Error::Config(
                "at least one of use_a and use_c must be set".into(),
            ));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn scale(&self) -> f64 {
        match self.scale_mode {
            ScaleMode::DModel => (self.d_model as f64).sqrt(),
            ScaleMode::DHead => (self.d_head() as f64).sqrt(),
        }
    }
}

/// Per-head `n × d_head` slices.
#[derive(Clone, Debug)]
pub struct Heads(pub Vec<Var>);

/// Final per-head scores `S`, each `n × n`.
#[derive(Clone, Debug)]
pub struct GatedScores(pub Vec<Var>);

impl GatedScores {
    /// Materialises the scores as an `h × n × n` tensor.
    pub fn to_tensor(&self, g: &Graph<'_>) -> Result<Tensor> {
        let parts: Vec<Tensor> = self.0.iter().map(|&v| g.value(v).clone()).collect();
        Tensor::stack(&parts)
    }
}

fn split_heads(g: &mut Graph<'_>, x: Var, cfg: &AttentionConfig) -> Result<Heads> {
    let dh = cfg.d_head();
    (0..cfg.n_heads)
        .map(|h| g.slice_cols(x, h * dh, (h + 1) * dh))
        .collect::<Result<Vec<_>>>()
        .map(Heads)
}

fn check_proj(g: &Graph<'_>, w: Var, d: usize) -> Result<()> {
    if g.shape(w) != [d, d] {
        return Err(Error::Shape {
            op: "projection",
            lhs: vec![d, d],
            rhs: g.shape(w).to_vec(),
        });
    }
    Ok(())
}

/// Projects `x` with `w` and splits the result into heads.
pub fn project(g: &mut Graph<'_>, x: Var, w: Var, cfg: &AttentionConfig) -> Result<Heads> {
    check_proj(g, w, cfg.d_model)?;
    let p = g.matmul(x, w)?;
    split_heads(g, p, cfg)
}

pub fn project_qkv(
    g: &mut Graph<'_>,
    x: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    cfg: &AttentionConfig,
) -> Result<(Heads, Heads, Heads)> {
    Ok((
        project(g, x, wq, cfg)?,
        project(g, x, wk, cfg)?,
        project(g, x, wv, cfg)?,
    ))
}

fn key_keep(n: usize, key_mask: &[bool]) -> Result<Vec<bool>> {
    if key_mask.len() != n {
        return Err(Error::Shape {
            op: "key_mask",
            lhs: vec![n],
            rhs: vec![key_mask.len()],
        });
    }
    Ok((0..n * n).map(|i| key_mask[i % n]).collect())
}

/// `softmax(Q Kᵀ / scale)` per head, excluding masked keys.
pub fn attention_scores(
    g: &mut Graph<'_>,
    q: &Heads,
    k: &Heads,
    key_mask: &[bool],
    cfg: &AttentionConfig,
) -> Result<Vec<Var>> {
    let mut out = Vec::with_capacity(q.0.len());
    for (&qh, &kh) in q.0.iter().zip(&k.0) {
        let n = g.shape(qh)[0];
        let keep = key_keep(n, key_mask)?;
        let logits = g.matmul_nt(qh, kh)?;
        let logits = g.scale(logits, 1.0 / cfg.scale());
        out.push(g.softmax_rows(logits, Some(&keep))?);
    }
    Ok(out)
}

/// Combines attention and constituent scores according to the ablation flags.
///
/// * both: `S = A ⊙ exp(log C)`, one `C` for every head;
/// * `use_a` only: `S = A`;
/// * `use_c` only: `S = exp(log C)` with masked key columns zeroed.
pub fn gate(
    g: &mut Graph<'_>,
    a: Option<&[Var]>,
    log_c: Option<Var>,
    key_mask: &[bool],
    cfg: &AttentionConfig,
) -> Result<GatedScores> {
    cfg.validate()?;
    let need = |what: &'static str| Error::Config(format!("gate requires {what}"));
    match (cfg.use_a, cfg.use_c) {
        (true, false) => Ok(GatedScores(a.ok_or_else(|| need("A"))?.to_vec())),
        (true, true) => {
            let a = a.ok_or_else(|| need("A"))?;
            let c = g.exp(log_c.ok_or_else(|| need("log C"))?)?;
            let heads = a
                .iter()
                .map(|&ah| g.mul(ah, c))
                .collect::<Result<Vec<_>>>()?;
            Ok(GatedScores(heads))
        }
        (false, true) => {
            let log_c = log_c.ok_or_else(|| need("log C"))?;
            let n = g.shape(log_c)[0];
            let mut c = g.exp(log_c)?;
            if key_mask.iter().any(|k| !k) {
                let keep = key_keep(n, key_mask)?;
                let mask = g.input(Tensor::new(
                    vec![n, n],
                    keep.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect(),
                )?);
                c = g.mul(c, mask)?;
            }
            Ok(GatedScores(vec![c; cfg.n_heads]))
        }
        (false, false) => unreachable!("rejected by validate"),
    }
}

/// `concat_h(S_h V_h) · W_o`.
pub fn attend(g: &mut Graph<'_>, s: &GatedScores, v: &Heads, wo: Var) -> Result<Var> {
    if s.0.len() != v.0.len() {
        return Err(Error::Shape {
            op: "attend",
            lhs: vec![s.0.len()],
            rhs: vec![v.0.len()],
        });
    }
    let per_head = s
        .0
        .iter()
        .zip(&v.0)
        .map(|(&sh, &vh)| g.matmul(sh, vh))
        .collect::<Result<Vec<_>>>()?;
    let joined = if per_head.len() == 1 {
        per_head[0]
    } else {
        g.concat_cols(&per_head)?
    };
    let d = g.shape(joined)[1];
    check_proj(g, wo, d)?;
    g.matmul(joined, wo)
}

/// Query, key, value and output projections of one attention layer.
#[derive(Clone, Copy, Debug)]
pub struct Projections {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

/// Parameters of one constituent-gated attention layer.
#[derive(Clone, Copy, Debug)]
pub struct ConstituentAttentionParams {
    /// Bilinear link matrix.
    pub w: Var,
    pub proj: Projections,
}

#[derive(Clone, Debug)]
pub struct ConstituentAttentionOutput {
    pub out: Var,
    pub constituents: ConstituentScores,
    pub scores: GatedScores,
}

/// Runs the whole layer over scene-text features `x` (`n × d_model`).
///
/// The constituent matrix is always computed so that link probabilities are
/// available even when the gate ignores it.
pub fn constituent_attention(
    g: &mut Graph<'_>,
    x: Var,
    p: &ConstituentAttentionParams,
    key_mask: &[bool],
    cfg: &AttentionConfig,
) -> Result<ConstituentAttentionOutput> {
    cfg.validate()?;
    let constituents = constituent_scores(g, x, p.w)?;
    let a = if cfg.use_a {
        let q = project(g, x, p.proj.wq, cfg)?;
        let k = project(g, x, p.proj.wk, cfg)?;
        Some(attention_scores(g, &q, &k, key_mask, cfg)?)
    } else {
        None
    };
    let v = project(g, x, p.proj.wv, cfg)?;
    let scores = gate(g, a.as_deref(), Some(constituents.log_c), key_mask, cfg)?;
    let out = attend(g, &scores, &v, p.proj.wo)?;
    Ok(ConstituentAttentionOutput {
        out,
        constituents,
        scores,
    })
}

/// Standard multi-head self-attention (no gating), used by the encoder.
pub fn self_attention(
    g: &mut Graph<'_>,
    x: Var,
    p: &Projections,
    key_mask: &[bool],
    cfg: &AttentionConfig,
) -> Result<Var> {
    let (q, k, v) = project_qkv(g, x, p.wq, p.wk, p.wv, cfg)?;
    let a = attention_scores(g, &q, &k, key_mask, cfg)?;
    attend(g, &GatedScores(a), &v, p.wo)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::ParamStore;

    fn cfg(d: usize, h: usize) -> AttentionConfig {
        AttentionConfig::new(d, h)
    }

    #[test]
    fn config_invariants() {
        assert!(cfg(8, 3).validate().is_err());
        let mut c = cfg(8, 2);
        c.use_a = false;
        c.use_c = false;
        assert!(c.validate().is_err());
        assert_eq!(cfg(8, 2).d_head(), 4);
        assert_eq!(cfg(16, 4).scale(), 4.0);
        let mut c = cfg(16, 4);
        c.scale_mode = ScaleMode::DHead;
        assert_eq!(c.scale(), 2.0);
    }

    #[test]
    fn identity_query_projection_single_head() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let i = g.input(Tensor::identity(2));
        let (q, _, _) = project_qkv(&mut g, x, i, i, i, &cfg(2, 1)).unwrap();
        assert_eq!(g.value(q.0[0]), g.value(x));
    }

    #[test]
    fn heads_take_contiguous_slices() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::matrix(1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let i = g.input(Tensor::identity(4));
        let (q, _, _) = project_qkv(&mut g, x, i, i, i, &cfg(4, 2)).unwrap();
        assert_eq!(g.value(q.0[0]).data(), &[1.0, 2.0]);
        assert_eq!(g.value(q.0[1]).data(), &[3.0, 4.0]);
    }

    #[test]
    fn zero_queries_give_uniform_rows_over_unmasked_keys() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let z = g.input(Tensor::zeros(&[4, 2]));
        let heads = Heads(vec![z]);
        let a = attention_scores(&mut g, &heads, &heads, &[true, true, false, true], &cfg(2, 1))
            .unwrap();
        let t = g.value(a[0]);
        for i in 0..4 {
            for j in 0..4 {
                let expect = if j == 2 { 0.0 } else { 1.0 / 3.0 };
                assert_eq!(t.get2(i, j), expect);
            }
        }
    }

    #[test]
    fn singleton_attention_is_one() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let z = g.input(Tensor::matrix(1, 2, vec![0.3, -0.7]).unwrap());
        let heads = Heads(vec![z]);
        let a = attention_scores(&mut g, &heads, &heads, &[true], &cfg(2, 1)).unwrap();
        assert_eq!(g.value(a[0]).data(), &[1.0]);
    }

    #[test]
    fn fully_masked_keys_error() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let z = g.input(Tensor::zeros(&[2, 2]));
        let heads = Heads(vec![z]);
        assert!(matches!(
            attention_scores(&mut g, &heads, &heads, &[false, false], &cfg(2, 1)),
            Err(Error::DegenerateRow { .. })
        ));
    }

    #[test]
    fn gate_with_unit_c_returns_a() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let a = g.input(Tensor::matrix(2, 2, vec![0.3, 0.7, 0.6, 0.4]).unwrap());
        let log_c = g.input(Tensor::zeros(&[2, 2]));
        let s = gate(&mut g, Some(&[a]), Some(log_c), &[true, true], &cfg(2, 1)).unwrap();
        assert_eq!(g.value(s.0[0]), g.value(a));
    }

    #[test]
    fn gate_a_only_ignores_c() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let a = g.input(Tensor::matrix(2, 2, vec![0.3, 0.7, 0.6, 0.4]).unwrap());
        let log_c = g.input(Tensor::filled(&[2, 2], -3.0));
        let mut c = cfg(2, 1);
        c.use_c = false;
        let s = gate(&mut g, Some(&[a]), Some(log_c), &[true, true], &c).unwrap();
        assert_eq!(g.value(s.0[0]), g.value(a));
    }

    #[test]
    fn gate_c_only_zeroes_masked_columns() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let log_c = g.input(Tensor::filled(&[2, 2], -1.0));
        let mut c = cfg(4, 2);
        c.use_a = false;
        let s = gate(&mut g, None, Some(log_c), &[true, false], &c).unwrap();
        assert_eq!(s.0.len(), 2);
        let t = s.to_tensor(&g).unwrap();
        assert_eq!(t.shape(), &[2, 2, 2]);
        assert_eq!(t.get3(1, 0, 1), 0.0);
        assert_eq!(t.get3(1, 1, 0), (-1f64).exp());
    }

    #[test]
    fn gate_rejects_missing_inputs() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let log_c = g.input(Tensor::zeros(&[2, 2]));
        assert!(gate(&mut g, None, Some(log_c), &[true, true], &cfg(2, 1)).is_err());
        let mut c = cfg(2, 1);
        c.use_a = false;
        c.use_c = false;
        assert!(gate(&mut g, None, Some(log_c), &[true, true], &c).is_err());
    }

    #[test]
    fn identity_scores_recover_values() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::matrix(2, 4, (0..8).map(f64::from).collect()).unwrap());
        let i4 = g.input(Tensor::identity(4));
        let c = cfg(4, 2);
        let v = project(&mut g, x, i4, &c).unwrap();
        let eye = g.input(Tensor::identity(2));
        let out = attend(&mut g, &GatedScores(vec![eye, eye]), &v, i4).unwrap();
        assert_eq!(g.value(out), g.value(x));

        let zero = g.input(Tensor::zeros(&[2, 2]));
        let out = attend(&mut g, &GatedScores(vec![zero, zero]), &v, i4).unwrap();
        assert!(g.value(out).data().iter().all(|&x| x == 0.0));
    }
}
