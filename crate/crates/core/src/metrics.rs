//! Exact match, token F1 and boundary F1.
//!
//! Answers are compared after normalisation: Unicode NFC, lower-casing, and
//! whitespace collapsing. Token F1 uses multiset intersection.

use std::collections::HashMap;

use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};

/// NFC, lower-case, single spaces, no leading or trailing space.
pub fn normalize(s: &str) -> String {
    let nfc: String = s.nfc().collect();
    nfc.to_lowercase()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

/// Normalised whitespace tokens.
pub fn tokenize(s: &str) -> Vec<String> {
    normalize(s).split(' ').filter(|t| !t.is_empty()).map(str::to_owned).collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnswerPair {
    pub predicted: Vec<String>,
    pub gold: Vec<String>,
}

impl AnswerPair {
    pub fn new(predicted: Vec<String>, gold: Vec<String>) -> Self {
        Self { predicted, gold }
    }

    pub fn from_strings(predicted: &str, gold: &str) -> Self {
        Self::new(tokenize(predicted), tokenize(gold))
    }

    pub fn exact_match(&self) -> f64 {
        exact_match(&self.predicted, &self.gold)
    }

    pub fn f1_token(&self) -> f64 {
        f1_token(&self.predicted, &self.gold)
    }
}

/// 1 when the token sequences are equal, else 0.
pub fn exact_match<S: AsRef<str>>(predicted: &[S], gold: &[S]) -> f64 {
    let same = predicted.len() == gold.len()
        && predicted.iter().zip(gold).all(|(p, g)| p.as_ref() == g.as_ref());
    if same {
        1.0
    } else {
        0.0
    }
}

fn overlap<S: AsRef<str>>(predicted: &[S], gold: &[S]) -> usize {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for g in gold {
        *counts.entry(g.as_ref()).or_default() += 1;
    }
    let mut hits = 0;
    for p in predicted {
        if let Some(c) = counts.get_mut(p.as_ref()) {
            if *c > 0 {
                *c -= 1;
                hits += 1;
            }
        }
    }
    hits
}

/// Harmonic mean of token precision and recall.
pub fn f1_token<S: AsRef<str>>(predicted: &[S], gold: &[S]) -> f64 {
    match (predicted.is_empty(), gold.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let common = overlap(predicted, gold);
    if common == 0 {
        return 0.0;
    }
    // 2·Pr·Re/(Pr+Re) with Pr = c/|P|, Re = c/|G| reduces to 2c/(|P|+|G|).
    (2 * common) as f64 / (predicted.len() + gold.len()) as f64
}

/// Best EM and best F1 of one prediction against several gold answers,
/// each maximised independently.
pub fn max_over_golds<S: AsRef<str>>(predicted: &[S], golds: &[Vec<S>]) -> Result<(f64, f64)> {
    if golds.is_empty() {
        return Err(Error::Empty { what: "gold answers" });
    }
    let em = golds
        .iter()
        .map(|g| exact_match(predicted, g))
        .fold(0.0, f64::max);
    let f1 = golds
        .iter()
        .map(|g| f1_token(predicted, g))
        .fold(0.0, f64::max);
    Ok((em, f1))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorpusScores {
    pub em: f64,
    pub f1_token: f64,
}

/// Mean EM and mean F1 over a non-empty corpus.
pub fn corpus_scores(pairs: &[AnswerPair]) -> Result<CorpusScores> {
    if pairs.is_empty() {
        return Err(Error::Empty { what: "corpus" });
    }
    let n = pairs.len() as f64;
    let em = pairs.iter().map(AnswerPair::exact_match).sum::<f64>() / n;
    let f1 = pairs.iter().map(AnswerPair::f1_token).sum::<f64>() / n;
    Ok(CorpusScores { em, f1_token: f1 })
}

/// Confusion counts on the positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BinaryCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl BinaryCounts {
    pub fn add(&mut self, pred: &[bool], gold: &[bool]) -> Result<()> {
        if pred.len() != gold.len() {
            return Err(Error::Shape {
                op: "boundary_f1",
                lhs: vec![pred.len()],
                rhs: vec![gold.len()],
            });
        }
        for (&p, &g) in pred.iter().zip(gold) {
            match (p, g) {
                (true, true) => self.tp += 1,
                (true, false) => self.fp += 1,
                (false, true) => self.fn_ += 1,
                (false, false) => {}
            }
        }
        Ok(())
    }

    /// F1 of the positive class; 1 when there is nothing to find and nothing
    /// was predicted.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            return 1.0;
        }
        (2 * self.tp) as f64 / denom as f64
    }
}

pub fn boundary_f1(pred: &[bool], gold: &[bool]) -> Result<f64> {
    let mut c = BinaryCounts::default();
    c.add(pred, gold)?;
    Ok(c.f1())
}
