//! Constituent scores between scene-text tokens.
//!
//! Adjacent tokens are scored with a learned bilinear form, each token splits
//! one unit of probability between its two neighbours, and the two directed
//! masses of every adjacent pair are combined by geometric mean into a link
//! probability `P[k]`. The score that tokens `i..=j` form one constituent is
//! the product of the links inside the span, kept in log space as a
//! prefix-sum difference so long spans neither underflow nor lose gradient.

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

/// Lower clamp applied to link probabilities before taking logs.
pub const LINK_FLOOR: f64 = 1e-9;

/// Raw bilinear scores `r[k] = f_k · W · f_{k+1}ᵀ`, length `n − 1`.
#[derive(Clone, Copy, Debug)]
pub struct PairRelations {
    pub scores: Var,
    pub n: usize,
}

/// Per-token neighbour masses, each of length `n`.
///
/// A token with a single neighbour gives it probability 1; interior tokens
/// satisfy `left[i] + right[i] = 1`. A lone token gets 1 on both sides.
#[derive(Clone, Copy, Debug)]
pub struct NeighborProbs {
    pub left: Var,
    pub right: Var,
    pub n: usize,
}

/// Link probabilities (length `n − 1`) and the `n×n` log-constituent matrix.
#[derive(Clone, Copy, Debug)]
pub struct ConstituentScores {
    pub links: Var,
    pub log_c: Var,
}

pub fn pair_scores(g: &mut Graph<'_>, f_ocr: Var, w: Var) -> Result<PairRelations> {
    let (n, d) = {
        let t = g.value(f_ocr);
        if t.rank() != 2 {
            return Err(Error::Shape {
                op: "pair_scores",
                lhs: t.shape().to_vec(),
                rhs: g.shape(w).to_vec(),
            });
        }
        (t.shape()[0], t.shape()[1])
    };
    if n == 0 {
        return Err(Error::Empty { what: "scene-text sequence" });
    }
    if g.shape(w) != [d, d] {
        return Err(Error::Shape {
            op: "pair_scores",
            lhs: vec![n, d],
            rhs: g.shape(w).to_vec(),
        });
    }
    let fw = g.matmul(f_ocr, w)?;
    let left = g.slice_rows(fw, 0, n - 1)?;
    let right = g.slice_rows(f_ocr, 1, n)?;
    let scores = g.rows_dot(left, right)?;
    Ok(PairRelations { scores, n })
}

pub fn neighbor_softmax(g: &mut Graph<'_>, r: &PairRelations) -> Result<NeighborProbs> {
    let n = r.n;
    if g.value(r.scores).numel() + 1 != n {
        return Err(Error::Shape {
            op: "neighbor_softmax",
            lhs: g.shape(r.scores).to_vec(),
            rhs: vec![n],
        });
    }
    if n == 1 {
        let left = g.input(Tensor::vector(vec![1.0]));
        let right = g.input(Tensor::vector(vec![1.0]));
        return Ok(NeighborProbs { left, right, n });
    }
    // Row i holds (r[i-1], r[i]); missing neighbours are masked out so the
    // remaining one receives all of the mass.
    let mut index = Vec::with_capacity(2 * n);
    let mut keep = Vec::with_capacity(2 * n);
    for i in 0..n {
        let l = i.checked_sub(1);
        let rr = (i + 1 < n).then_some(i);
        index.push(l);
        index.push(rr);
        keep.push(l.is_some());
        keep.push(rr.is_some());
    }
    let pairs = g.gather(r.scores, index, &[n, 2])?;
    let probs = g.softmax_rows(pairs, Some(&keep))?;
    let left = g.gather(probs, (0..n).map(|i| Some(2 * i)).collect(), &[n])?;
    let right = g.gather(probs, (0..n).map(|i| Some(2 * i + 1)).collect(), &[n])?;
    Ok(NeighborProbs { left, right, n })
}

/// `P[k] = sqrt(right[k] · left[k+1])`, clamped to `[LINK_FLOOR, 1]`.
pub fn link_probability(g: &mut Graph<'_>, pr: &NeighborProbs) -> Result<Var> {
    let m = pr.n.saturating_sub(1);
    let toward_next = g.gather(pr.right, (0..m).map(Some).collect(), &[m])?;
    let toward_prev = g.gather(pr.left, (1..=m).map(Some).collect(), &[m])?;
    let prod = g.mul(toward_next, toward_prev)?;
    // An underflowed product would be a sqrt domain error; anything this small
    // ends up on the floor after the second clamp regardless.
    let prod = g.clamp(prod, f64::MIN_POSITIVE, 1.0);
    let p = g.sqrt(prod)?;
    Ok(g.clamp(p, LINK_FLOOR, 1.0))
}

/// Builds `log C` from link probabilities via prefix sums of `log P`.
pub fn constituent_matrix(g: &mut Graph<'_>, links: Var) -> Result<ConstituentScores> {
    if let Some(&bad) = g
        .value(links)
        .data()
        .iter()
        .find(|&&p| !(LINK_FLOOR..=1.0).contains(&p))
    {
        return Err(Error::Domain {
            op: "constituent_matrix",
            value: bad,
        });
    }
    let log_p = g.log(links)?;
    let log_c = g.span_sums(log_p)?;
    Ok(ConstituentScores { links, log_c })
}

/// Full pipeline from scene-text features to constituent scores.
pub fn constituent_scores(g: &mut Graph<'_>, f_ocr: Var, w: Var) -> Result<ConstituentScores> {
    let r = pair_scores(g, f_ocr, w)?;
    let pr = neighbor_softmax(g, &r)?;
    let links = link_probability(g, &pr)?;
    constituent_matrix(g, links)
}

/// As [`constituent_scores`] for a sequence whose rows past `valid` are
/// padding. Links touching padding are fixed at [`LINK_FLOOR`].
pub fn constituent_scores_padded(
    g: &mut Graph<'_>,
    f_ocr: Var,
    w: Var,
    valid: usize,
) -> Result<ConstituentScores> {
    let n = g.shape(f_ocr).first().copied().unwrap_or(0);
    if valid == 0 || valid > n {
        return Err(Error::Index {
            what: "valid length",
            index: valid,
            len: n,
        });
    }
    if valid == n {
        return constituent_scores(g, f_ocr, w);
    }
    let head = g.slice_rows(f_ocr, 0, valid)?;
    let r = pair_scores(g, head, w)?;
    let pr = neighbor_softmax(g, &r)?;
    let links = link_probability(g, &pr)?;
    let links = g.reshape(links, vec![valid - 1, 1])?;
    let pad = g.input(Tensor::filled(&[n - valid, 1], LINK_FLOOR));
    let all = g.concat_rows(&[links, pad])?;
    let all = g.reshape(all, vec![n - 1])?;
    constituent_matrix(g, all)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::ParamStore;

    fn rows(r: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&r.iter().map(|x| x.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn identity_bilinear_on_equal_unit_vectors() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let f = g.input(rows(&[&[1.0, 0.0], &[1.0, 0.0]]));
        let w = g.input(Tensor::identity(2));
        let r = pair_scores(&mut g, f, w).unwrap();
        assert_eq!(g.value(r.scores).data(), &[1.0]);
    }

    #[test]
    fn zero_bilinear_gives_zero_scores() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let f = g.input(rows(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]));
        let w = g.input(Tensor::zeros(&[2, 2]));
        let r = pair_scores(&mut g, f, w).unwrap();
        assert_eq!(g.value(r.scores).data(), &[0.0, 0.0]);
    }

    #[test]
    fn singleton_sequence() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let f = g.input(rows(&[&[1.0, 2.0]]));
        let w = g.input(Tensor::identity(2));
        let r = pair_scores(&mut g, f, w).unwrap();
        assert_eq!(g.value(r.scores).numel(), 0);
        let pr = neighbor_softmax(&mut g, &r).unwrap();
        assert_eq!(g.value(pr.left).data(), &[1.0]);
        assert_eq!(g.value(pr.right).data(), &[1.0]);
        let p = link_probability(&mut g, &pr).unwrap();
        assert_eq!(g.value(p).numel(), 0);
        let c = constituent_matrix(&mut g, p).unwrap();
        assert_eq!(g.value(c.log_c).shape(), &[1, 1]);
        assert_eq!(g.value(c.log_c).data(), &[0.0]);
    }

    #[test]
    fn symmetric_neighbor_softmax() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let s = g.input(Tensor::vector(vec![0.0, 0.0]));
        let pr = neighbor_softmax(&mut g, &PairRelations { scores: s, n: 3 }).unwrap();
        assert_eq!(g.value(pr.left).data(), &[0.0, 0.5, 1.0]);
        assert_eq!(g.value(pr.right).data(), &[1.0, 0.5, 0.0]);
    }

    #[test]
    fn neighbor_softmax_log_four() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let s = g.input(Tensor::vector(vec![4f64.ln(), 0.0]));
        let pr = neighbor_softmax(&mut g, &PairRelations { scores: s, n: 3 }).unwrap();
        assert!((g.value(pr.left).data()[1] - 0.8).abs() < 1e-15);
        assert!((g.value(pr.right).data()[1] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn neighbor_softmax_length_check() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let s = g.input(Tensor::vector(vec![0.0]));
        assert!(neighbor_softmax(&mut g, &PairRelations { scores: s, n: 3 }).is_err());
    }

    fn probs(g: &mut Graph<'_>, left: Vec<f64>, right: Vec<f64>) -> NeighborProbs {
        let n = left.len();
        let left = g.input(Tensor::vector(left));
        let right = g.input(Tensor::vector(right));
        NeighborProbs { left, right, n }
    }

    #[test]
    fn link_probability_examples() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let pr = probs(&mut g, vec![0.0, 0.2], vec![0.8, 0.0]);
        let p = link_probability(&mut g, &pr).unwrap();
        assert!((g.value(p).data()[0] - 0.4).abs() < 1e-15);

        let pr = probs(&mut g, vec![0.0, 1.0], vec![1.0, 0.0]);
        let p = link_probability(&mut g, &pr).unwrap();
        assert_eq!(g.value(p).data(), &[1.0]);

        let pr = probs(&mut g, vec![0.0, 1.0], vec![1e-20, 0.0]);
        let p = link_probability(&mut g, &pr).unwrap();
        assert_eq!(g.value(p).data(), &[LINK_FLOOR]);
        let c = constituent_matrix(&mut g, p).unwrap();
        assert!(g.value(c.log_c).is_finite());

        // A product that underflows to exactly zero still lands on the floor.
        let pr = probs(&mut g, vec![0.0, 0.0], vec![0.0, 0.0]);
        let p = link_probability(&mut g, &pr).unwrap();
        assert_eq!(g.value(p).data(), &[LINK_FLOOR]);
    }

    #[test]
    fn half_links_give_quarter_span() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let p = g.input(Tensor::vector(vec![0.5, 0.5]));
        let c = constituent_matrix(&mut g, p).unwrap();
        let m = g.value(c.log_c).map(f64::exp);
        assert!((m.get2(0, 2) - 0.25).abs() < 1e-15);
        assert!((m.get2(0, 1) - 0.5).abs() < 1e-15);
        assert!((m.get2(1, 2) - 0.5).abs() < 1e-15);
        for i in 0..3 {
            assert_eq!(m.get2(i, i), 1.0);
        }
    }

    #[test]
    fn constituent_matrix_rejects_unclamped_links() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let p = g.input(Tensor::vector(vec![0.5, 0.0]));
        assert!(matches!(
            constituent_matrix(&mut g, p),
            Err(Error::Domain { .. })
        ));
    }

    #[test]
    fn padding_links_sit_at_the_floor() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let f = g.input(rows(&[&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0], &[0.0, 1.0]]));
        let w = g.input(Tensor::identity(2));
        let c = constituent_scores_padded(&mut g, f, w, 2).unwrap();
        assert_eq!(g.value(c.links).data()[1..], [LINK_FLOOR, LINK_FLOOR]);
        let m = g.value(c.log_c).map(f64::exp);
        assert_eq!(m.get2(0, 1), 1.0);
        assert!(m.get2(1, 2) <= LINK_FLOOR * (1.0 + 1e-12));
    }

    #[test]
    fn dimension_mismatch() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let f = g.input(Tensor::zeros(&[3, 2]));
        let w = g.input(Tensor::zeros(&[3, 3]));
        assert!(matches!(pair_scores(&mut g, f, w), Err(Error::Shape { .. })));
    }
}
