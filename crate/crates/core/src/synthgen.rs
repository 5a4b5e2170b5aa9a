//! Seeded synthetic preference corpora with known labelling rules.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{Label, RawRecord};

/// Word that decides the winner under [`RuleKind::KeywordWins`].
pub const KEYWORD: &str = "certainly";

const WORDS: [&str; 24] = [
    "the", "model", "answer", "is", "a", "short", "list", "of", "steps", "you", "can", "try",
    "first", "then", "check", "output", "again", "with", "care", "here", "some", "code", "and",
    "notes",
];
const MODELS: [&str; 6] = [
    "alpha-7b",
    "beta-13b",
    "gamma-2b",
    "delta-70b",
    "eps-8b",
    "zeta-9b",
];

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("invalid rule: {0}")]
    InvalidRule(String),
    #[error("n must be at least 1")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleKind {
    LongerWins,
    KeywordWins,
    /// Each record picks one of the two rules with equal probability.
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthRule {
    pub rule: RuleKind,
    /// Relative length window declared a tie.
    pub tie_band: f64,
    /// Probability of replacing the rule label with one of the other two.
    pub noise: f64,
    pub seed: u64,
    /// Inclusive character-length range of each response.
    pub response_len: (usize, usize),
    pub prompt_len: (usize, usize),
    /// Fraction of records whose texts are written as JSON list strings.
    pub list_rate: f64,
    /// Fraction of records with a missing response.
    pub null_rate: f64,
}

impl SynthRule {
    pub fn new(rule: RuleKind, tie_band: f64, noise: f64, seed: u64) -> Self {
        Self {
            rule,
            tie_band,
            noise,
            seed,
            response_len: (4, 40),
            prompt_len: (4, 16),
            list_rate: 0.1,
            null_rate: 0.01,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidRule(m.to_string()));
        if !(0.0..0.5).contains(&self.noise) {
            return bad("noise must be in [0, 0.5)");
        }
        if !(self.tie_band >= 0.0 && self.tie_band.is_finite()) {
            return bad("tie_band must be nonnegative");
        }
        if self.response_len.0 == 0 || self.response_len.0 > self.response_len.1 {
            return bad("response_len must be a nonempty range of positive lengths");
        }
        if self.prompt_len.0 == 0 || self.prompt_len.0 > self.prompt_len.1 {
            return bad("prompt_len must be a nonempty range of positive lengths");
        }
        if !(0.0..=1.0).contains(&self.list_rate) || !(0.0..=1.0).contains(&self.null_rate) {
            return bad("rates must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Label by length: A iff `len_a > len_b·(1+band)`, B iff
/// `len_b > len_a·(1+band)`, otherwise Tie. Lengths are in characters.
pub fn longer_wins_label(len_a: usize, len_b: usize, tie_band: f64) -> Label {
    let (a, b) = (len_a as f64, len_b as f64);
    if a > b * (1.0 + tie_band) {
        Label::A
    } else if b > a * (1.0 + tie_band) {
        Label::B
    } else {
        Label::Tie
    }
}

/// Label by keyword presence: the response that alone contains [`KEYWORD`]
/// wins; Tie when both or neither do.
pub fn keyword_wins_label(a: &str, b: &str) -> Label {
    match (a.contains(KEYWORD), b.contains(KEYWORD)) {
        (true, false) => Label::A,
        (false, true) => Label::B,
        _ => Label::Tie,
    }
}

/// `n` raw records in ingest schema. Record `i` draws from its own stream of
/// the seeded generator, so output is a pure function of `(n, rule)` and each
/// record does not depend on `n`.
pub fn generate(n: usize, rule: &SynthRule) -> Result<Vec<RawRecord>, SynthError> {
    rule.validate()?;
    if n == 0 {
        return Err(SynthError::Empty);
    }
    Ok((0..n).map(|i| generate_one(i, rule)).collect())
}

fn generate_one(i: usize, rule: &SynthRule) -> RawRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(rule.seed);
    rng.set_stream(i as u64);

    let kind = match rule.rule {
        RuleKind::Mixed if rng.random_bool(0.5) => RuleKind::LongerWins,
        RuleKind::Mixed => RuleKind::KeywordWins,
        k => k,
    };
    let keyword_odds = if kind == RuleKind::KeywordWins {
        0.5
    } else {
        0.0
    };
    let prompt = text(&mut rng, rule.prompt_len, 0.0);
    let response_a = text(&mut rng, rule.response_len, keyword_odds);
    let response_b = text(&mut rng, rule.response_len, keyword_odds);

    let mut label = match kind {
        RuleKind::KeywordWins => keyword_wins_label(&response_a, &response_b),
        _ => longer_wins_label(
            response_a.chars().count(),
            response_b.chars().count(),
            rule.tie_band,
        ),
    };
    if rng.random_bool(rule.noise) {
        let others: Vec<Label> = Label::ALL.into_iter().filter(|&l| l != label).collect();
        label = *others.choose(&mut rng).expect("two other labels");
    }

    let as_list = rng.random_bool(rule.list_rate);
    let wrap = |s: String| {
        if as_list {
            serde_json::to_string(&[s]).expect("string list")
        } else {
            s
        }
    };
    let (mut response_a, mut response_b) = (Some(wrap(response_a)), Some(wrap(response_b)));
    if rng.random_bool(rule.null_rate) {
        if rng.random_bool(0.5) {
            response_a = None;
        } else {
            response_b = None;
        }
    }
    let model_a = MODELS.choose(&mut rng).expect("nonempty").to_string();
    let model_b = MODELS.choose(&mut rng).expect("nonempty").to_string();

    RawRecord {
        id: format!("syn{:06}", i),
        model_a: Some(model_a),
        model_b: Some(model_b),
        prompt: Some(wrap(prompt)),
        response_a,
        response_b,
        winner_model_a: u8::from(label == Label::A),
        winner_model_b: u8::from(label == Label::B),
        winner_tie: u8::from(label == Label::Tie),
    }
}

/// Random words truncated to a length drawn from `len`, with no leading or
/// trailing whitespace. With probability `keyword_odds` the text opens with
/// [`KEYWORD`] (when it fits).
fn text(rng: &mut ChaCha8Rng, len: (usize, usize), keyword_odds: f64) -> String {
    let target = rng.random_range(len.0..=len.1);
    let mut s = String::with_capacity(target + 12);
    if keyword_odds > 0.0 && rng.random_bool(keyword_odds) && target >= KEYWORD.len() {
        s.push_str(KEYWORD);
    }
    while s.len() < target {
        if !s.is_empty() {
            s.push(' ');
        }
        s.push_str(WORDS.choose(rng).expect("nonempty"));
    }
    s.truncate(target);
    if s.ends_with(' ') {
        s.pop();
        s.push('s');
    }
    s
}
