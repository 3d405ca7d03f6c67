//! Synthetic scene-text questions whose answer is a multi-token word.
//!
//! Every example shows a few lines of words. A word is a tuple of one to three
//! syllable tokens drawn from a shared inventory; syllables recur across
//! inventory words, so a single token never identifies its word. The question
//! names one syllable and the answer is the inventory word that contains it in
//! this image. Tokens of one word share a style vector in their appearance
//! features (mixed with noise according to `rho`), and consecutive words never
//! share a style. Boxes are evenly spaced along each line, so they mark lines
//! but not word boundaries.

use consformer::embeddings::{RawObject, RawSceneText};
use consformer::model::ModelInput;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerScheme {
    /// The inventory word containing the queried syllable.
    #[default]
    ContainingWord,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_examples: usize,
    /// Index of the first example; splits of one corpus use disjoint ranges.
    pub first_index: usize,
    pub n_syllables: usize,
    pub n_fillers: usize,
    pub inventory_size: usize,
    /// Probabilities of word lengths 1, 2 and 3.
    pub word_length_probs: [f64; 3],
    pub words_per_line: [usize; 2],
    pub lines: [usize; 2],
    pub objects: [usize; 2],
    pub d_fr: usize,
    pub rho: f64,
    pub n_styles: usize,
    /// Add the reversed form of every multi-syllable inventory word, so the
    /// set of syllables alone does not name the word.
    pub mirrored_words: bool,
    pub answer_scheme: AnswerScheme,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_examples: 5000,
            first_index: 0,
            n_syllables: 40,
            n_fillers: 8,
            inventory_size: 96,
            word_length_probs: [0.2, 0.5, 0.3],
            words_per_line: [1, 4],
            lines: [1, 3],
            objects: [2, 4],
            d_fr: 16,
            rho: 0.8,
            n_styles: 4,
            mirrored_words: true,
            answer_scheme: AnswerScheme::ContainingWord,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// Token vocabulary: fillers first, then syllables.
    pub fn vocab_size(&self) -> usize {
        self.n_fillers + self.n_syllables
    }

    pub fn syllable_token(&self, s: usize) -> usize {
        self.n_fillers + s
    }

    fn max_tokens(&self) -> usize {
        let longest = self
            .word_length_probs
            .iter()
            .rposition(|&p| p > 0.0)
            .map_or(0, |i| i + 1);
        self.lines[1] * self.words_per_line[1] * longest
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Invalid(m));
        let sum: f64 = self.word_length_probs.iter().sum();
        if self.word_length_probs.iter().any(|&p| !(0.0..=1.0).contains(&p))
            || (sum - 1.0).abs() > 1e-9
        {
            return bad(format!(
                "word_length_probs {:?} must be probabilities summing to 1",
                self.word_length_probs
            ));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return bad(format!("rho {} not in [0, 1]", self.rho));
        }
        for (name, [lo, hi]) in [
            ("words_per_line", self.words_per_line),
            ("lines", self.lines),
            ("objects", self.objects),
        ] {
            if lo > hi {
                return bad(format!("{name} range [{lo}, {hi}] is empty"));
            }
        }
        if self.words_per_line[0] == 0 || self.lines[0] == 0 {
            return bad("every example needs at least one word".into());
        }
        if self.n_fillers < 2 {
            return bad("need at least two filler tokens".into());
        }
        if self.n_styles < 2 {
            return bad("need at least two styles so neighbouring words differ".into());
        }
        if self.d_fr == 0 {
            return bad("d_fr must be positive".into());
        }
        if self.max_tokens() > self.n_syllables {
            return bad(format!(
                "{} syllables cannot fill {} distinct tokens per example",
                self.n_syllables,
                self.max_tokens()
            ));
        }
        let capacity: f64 = (1..=3)
            .filter(|&l| self.word_length_probs[l - 1] > 0.0)
            .map(|l| (0..l).map(|k| (self.n_syllables - k) as f64).product::<f64>())
            .sum();
        if (self.inventory_size as f64) > capacity || self.inventory_size == 0 {
            return bad(format!(
                "inventory of {} words is infeasible (capacity {capacity})",
                self.inventory_size
            ));
        }
        Ok(())
    }
}

/// One generated example with its labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticExample {
    pub id: usize,
    pub objects: Vec<RawObject>,
    pub ocr: Vec<RawSceneText>,
    pub question: Vec<usize>,
    /// `true` where tokens `k` and `k + 1` belong to one word.
    pub boundaries: Vec<bool>,
    pub answer: usize,
    /// Inventory index of each token's word, in reading order.
    pub word_of_token: Vec<usize>,
}

impl SyntheticExample {
    pub fn input(&self) -> ModelInput {
        ModelInput {
            objects: self.objects.clone(),
            ocr: self.ocr.clone(),
            question: self.question.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: SynthConfig,
    /// Answer strings, indexed by class.
    pub answers: Vec<String>,
    pub examples: Vec<SyntheticExample>,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn sample_length(rng: &mut ChaCha8Rng, probs: &[f64; 3]) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i + 1;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0) + 1
}

/// The word inventory, as syllable tuples. Depends only on `seed` and the
/// inventory settings, so every split of a corpus shares it.
pub fn inventory(cfg: &SynthConfig) -> Result<Vec<Vec<usize>>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(cfg.seed ^ 0x1A7E_4D0C));
    let mut words: Vec<Vec<usize>> = Vec::with_capacity(cfg.inventory_size);
    let syllables: Vec<usize> = (0..cfg.n_syllables).collect();
    let mut attempts = 0usize;
    while words.len() < cfg.inventory_size {
        attempts += 1;
        if attempts > 1000 * cfg.inventory_size + 10_000 {
            return Err(HarnessError::Invalid(
                "could not draw a distinct word inventory".into(),
            ));
        }
        let len = sample_length(&mut rng, &cfg.word_length_probs);
        let w: Vec<usize> = syllables.choose_multiple(&mut rng, len).copied().collect();
        if words.contains(&w) {
            continue;
        }
        let mirror: Vec<usize> = w.iter().rev().copied().collect();
        words.push(w);
        if cfg.mirrored_words && len > 1 && words.len() < cfg.inventory_size && !words.contains(&mirror) {
            words.push(mirror);
        }
    }
    Ok(words)
}

pub fn answer_text(word: &[usize]) -> String {
    word.iter()
        .map(|s| format!("s{s}"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn palette(cfg: &SynthConfig) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(cfg.seed ^ 0x57_11E5));
    (0..cfg.n_styles)
        .map(|_| gaussian(&mut rng, cfg.d_fr))
        .collect()
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

const LINE_TOP: f64 = 0.1;
const LINE_PITCH: f64 = 0.25;
const LINE_HEIGHT: f64 = 0.08;
const TOKEN_PITCH: f64 = 0.075;
const TOKEN_WIDTH: f64 = 0.065;

fn example(
    cfg: &SynthConfig,
    words: &[Vec<usize>],
    styles: &[Vec<f64>],
    index: usize,
) -> SyntheticExample {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(cfg.seed ^ splitmix(index as u64 + 1)));
    let n_lines = rng.gen_range(cfg.lines[0]..=cfg.lines[1]);
    let per_line: Vec<usize> = (0..n_lines)
        .map(|_| rng.gen_range(cfg.words_per_line[0]..=cfg.words_per_line[1]))
        .collect();

    // Words with pairwise disjoint syllables; the size bound in `validate`
    // keeps this from starving, the restart covers unlucky draws.
    let chosen: Vec<usize> = 'draw: loop {
        let mut used = vec![false; cfg.n_syllables];
        let mut picked = Vec::new();
        for _ in 0..per_line.iter().sum::<usize>() {
            let mut tries = 0;
            loop {
                tries += 1;
                if tries > 200 {
                    continue 'draw;
                }
                let w = rng.gen_range(0..words.len());
                if words[w].iter().all(|&s| !used[s]) {
                    for &s in &words[w] {
                        used[s] = true;
                    }
                    picked.push(w);
                    break;
                }
            }
        }
        break picked;
    };

    let a = cfg.rho.sqrt();
    let b = (1.0 - cfg.rho).sqrt();
    let mut ocr = Vec::new();
    let mut word_of_token = Vec::new();
    let mut boundaries = Vec::new();
    let mut prev_style = usize::MAX;
    let mut next = chosen.iter();
    for (line, &n_words) in per_line.iter().enumerate() {
        let y0 = LINE_TOP + LINE_PITCH * line as f64;
        let mut slot = 0;
        for _ in 0..n_words {
            let w = *next.next().expect("one word per slot");
            let style = loop {
                let s = rng.gen_range(0..styles.len());
                if s != prev_style {
                    break s;
                }
            };
            prev_style = style;
            for (k, &syl) in words[w].iter().enumerate() {
                if !ocr.is_empty() {
                    boundaries.push(k > 0);
                }
                let noise = gaussian(&mut rng, cfg.d_fr);
                let appearance = styles[style]
                    .iter()
                    .zip(&noise)
                    .map(|(s, n)| a * s + b * n)
                    .collect();
                let x0 = 0.05 + TOKEN_PITCH * slot as f64;
                ocr.push(RawSceneText {
                    appearance,
                    bbox: [x0, y0, x0 + TOKEN_WIDTH, y0 + LINE_HEIGHT],
                    token: cfg.syllable_token(syl),
                });
                word_of_token.push(w);
                slot += 1;
            }
        }
    }

    let n_obj = rng.gen_range(cfg.objects[0]..=cfg.objects[1]);
    let objects = (0..n_obj)
        .map(|_| {
            let x0 = rng.gen_range(0.0..0.7);
            let y0 = rng.gen_range(0.0..0.7);
            let w = rng.gen_range(0.05..0.3);
            let h = rng.gen_range(0.05..0.3);
            RawObject {
                appearance: gaussian(&mut rng, cfg.d_fr),
                bbox: [x0, y0, x0 + w, y0 + h],
                label: None,
            }
        })
        .collect();

    let key = rng.gen_range(0..ocr.len());
    let question = vec![
        rng.gen_range(0..cfg.n_fillers),
        rng.gen_range(0..cfg.n_fillers),
        ocr[key].token,
    ];
    let answer = match cfg.answer_scheme {
        AnswerScheme::ContainingWord => word_of_token[key],
    };
    SyntheticExample {
        id: index,
        objects,
        ocr,
        question,
        boundaries,
        answer,
        word_of_token,
    }
}

/// Generates `cfg.n_examples` examples starting at `cfg.first_index`. Each
/// example has its own generator derived from the seed and its index.
pub fn generate(cfg: &SynthConfig) -> Result<Dataset> {
    let words = inventory(cfg)?;
    let styles = palette(cfg);
    let examples = (cfg.first_index..cfg.first_index + cfg.n_examples)
        .map(|i| example(cfg, &words, &styles, i))
        .collect();
    Ok(Dataset {
        config: cfg.clone(),
        answers: words.iter().map(|w| answer_text(w)).collect(),
        examples,
    })
}

/// Train, validation and test splits of one corpus.
pub fn generate_splits(base: &SynthConfig, sizes: [usize; 3]) -> Result<[Dataset; 3]> {
    let mut first = 0;
    let mut out = Vec::with_capacity(3);
    for n in sizes {
        let cfg = SynthConfig {
            n_examples: n,
            first_index: first,
            ..base.clone()
        };
        out.push(generate(&cfg)?);
        first += n;
    }
    let [a, b, c]: [Dataset; 3] = out.try_into().expect("three splits");
    Ok([a, b, c])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            n_examples: 50,
            seed: 7,
            ..Default::default()
        }
    }

    #[test]
    fn same_seed_same_data() {
        assert_eq!(generate(&small()).unwrap(), generate(&small()).unwrap());
    }

    #[test]
    fn labels_follow_words() {
        let d = generate(&small()).unwrap();
        let words = inventory(&small()).unwrap();
        for ex in &d.examples {
            assert_eq!(ex.boundaries.len() + 1, ex.ocr.len());
            for k in 0..ex.boundaries.len() {
                let same_box_line = ex.ocr[k].bbox[1] == ex.ocr[k + 1].bbox[1];
                if ex.boundaries[k] {
                    assert_eq!(ex.word_of_token[k], ex.word_of_token[k + 1]);
                    assert!(same_box_line);
                    assert!(ex.ocr[k].bbox[2] < ex.ocr[k + 1].bbox[0]);
                }
            }
            let key = *ex.question.last().unwrap();
            let pos = ex.ocr.iter().position(|t| t.token == key).unwrap();
            assert_eq!(ex.answer, ex.word_of_token[pos]);
            let syl = key - small().n_fillers;
            assert!(words[ex.answer].contains(&syl));
            let mut toks: Vec<_> = ex.ocr.iter().map(|t| t.token).collect();
            toks.sort_unstable();
            toks.dedup();
            assert_eq!(toks.len(), ex.ocr.len());
        }
    }

    #[test]
    fn single_token_words_have_no_links() {
        let cfg = SynthConfig {
            word_length_probs: [1.0, 0.0, 0.0],
            inventory_size: 30,
            ..small()
        };
        let d = generate(&cfg).unwrap();
        assert!(d.examples.iter().all(|e| e.boundaries.iter().all(|b| !b)));
    }

    #[test]
    fn splits_are_disjoint_ranges() {
        let [a, b, c] = generate_splits(&small(), [5, 3, 2]).unwrap();
        assert_eq!(a.examples.last().unwrap().id, 4);
        assert_eq!(b.examples[0].id, 5);
        assert_eq!(c.examples[0].id, 8);
        assert_eq!(a.answers, c.answers);
        let whole = generate(&SynthConfig {
            n_examples: 10,
            ..small()
        })
        .unwrap();
        assert_eq!(whole.examples[6], b.examples[1]);
    }

    #[test]
    fn infeasible_configs() {
        let c = SynthConfig {
            n_syllables: 10,
            ..small()
        };
        assert!(generate(&c).is_err());
        let c = SynthConfig {
            word_length_probs: [0.5, 0.5, 0.5],
            ..small()
        };
        assert!(c.validate().is_err());
        let c = SynthConfig {
            word_length_probs: [1.0, 0.0, 0.0],
            inventory_size: 41,
            ..small()
        };
        assert!(c.validate().is_err());
        let c = SynthConfig {
            rho: 1.5,
            ..small()
        };
        assert!(c.validate().is_err());
    }
}
