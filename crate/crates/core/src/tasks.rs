//! Synthetic family-structured tasks.
//!
//! Every question shares one surface template,
//! `<bos> Q w w w : d d d d`, where one of the three topic slots holds the
//! family keyword and the others hold neutral words. The answer applies the
//! family's hidden rule `(d + offset) mod modulus` to each digit. Digit
//! strings come from a small pool shared by all families, so questions from
//! different families collide on everything but the keyword.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::vocab::{self, Token, Vocab, VocabError};

/// Digits per question and per answer.
pub const SEQ_DIGITS: usize = 4;
/// Length of every question.
pub const QUESTION_LEN: usize = 6 + SEQ_DIGITS;
/// Width of the hint slot between the question and `=`. Hints are padded to
/// it with filler, so the cue and the answer always sit at the same
/// positions, and inserted units fill it exactly at the default selection
/// size.
pub const HINT_SLOT: usize = 16;
/// Offset/modulus table, one row per family.
const FAMILY_RULES: [(usize, usize); 12] = [
    (3, 7),
    (5, 9),
    (2, 10),
    (7, 8),
    (4, 6),
    (6, 10),
    (1, 9),
    (8, 7),
    (2, 5),
    (9, 10),
    (5, 8),
    (1, 6),
];

pub const MAX_FAMILIES: usize = FAMILY_RULES.len();

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("need at least 2 families, got {0}")]
    TooFewFamilies(usize),
    #[error("at most {MAX_FAMILIES} families are defined, got {0}")]
    TooManyFamilies(usize),
    #[error("need at least 10 instances per family for a 7:3 split, got {0}")]
    SplitTooSmall(usize),
    #[error("unknown family {0}")]
    UnknownFamily(usize),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error("hint of {0} tokens does not fit the {HINT_SLOT}-token slot")]
    HintTooLong(usize),
    #[error("malformed record: {0}")]
    Record(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rule {
    pub offset: usize,
    pub modulus: usize,
}

impl Rule {
    pub fn apply(&self, digits: &[usize]) -> Vec<usize> {
        digits
            .iter()
            .map(|d| (d + self.offset) % self.modulus)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskFamily {
    pub id: usize,
    pub rule: Rule,
    pub keyword: Token,
}

impl TaskFamily {
    pub fn get(id: usize) -> Result<Self, TaskError> {
        let &(offset, modulus) = FAMILY_RULES.get(id).ok_or(TaskError::UnknownFamily(id))?;
        Ok(TaskFamily {
            id,
            rule: Rule { offset, modulus },
            keyword: vocab::keyword(id),
        })
    }

    pub fn name(&self) -> String {
        format!(
            "offset-mod(o={},m={})",
            self.rule.offset, self.rule.modulus
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskInstance {
    pub id: String,
    pub family: usize,
    pub question: Vec<Token>,
    pub answer: Vec<Token>,
}

#[derive(Debug, Clone, Copy)]
pub struct DatasetConfig {
    pub families: usize,
    pub per_family: usize,
    /// Number of distinct digit strings shared across all families.
    pub digit_pool: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Vec<TaskInstance>,
    pub test: Vec<TaskInstance>,
}

/// Build a question from its three topic words and digits.
pub fn question_tokens(words: [Token; 3], digits: &[usize]) -> Vec<Token> {
    let mut q = vec![vocab::BOS, vocab::QUESTION];
    q.extend(words);
    q.push(vocab::COLON);
    q.extend(digits.iter().map(|&d| vocab::digit(d)));
    q
}

fn random_words(rng: &mut ChaCha8Rng, keyword: Token) -> [Token; 3] {
    let slot = rng.random_range(0..3);
    let mut words = [0; 3];
    for (i, w) in words.iter_mut().enumerate() {
        *w = if i == slot {
            keyword
        } else {
            vocab::neutral(rng.random_range(0..vocab::NEUTRAL.len()))
        };
    }
    words
}

fn digit_pool(rng: &mut ChaCha8Rng, size: usize) -> Vec<[usize; SEQ_DIGITS]> {
    (0..size)
        .map(|_| std::array::from_fn(|_| rng.random_range(0..10)))
        .collect()
}

/// Deterministic train/test splits, 7:3 per family.
pub fn generate_family_dataset(config: &DatasetConfig) -> Result<Splits, TaskError> {
    if config.families < 2 {
        return Err(TaskError::TooFewFamilies(config.families));
    }
    if config.families > MAX_FAMILIES {
        return Err(TaskError::TooManyFamilies(config.families));
    }
    if config.per_family < 10 {
        return Err(TaskError::SplitTooSmall(config.per_family));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let pool = digit_pool(&mut rng, config.digit_pool.max(1));
    let n_train = config.per_family * 7 / 10;
    let mut splits = Splits {
        train: Vec::new(),
        test: Vec::new(),
    };
    for f in 0..config.families {
        let family = TaskFamily::get(f)?;
        for i in 0..config.per_family {
            let digits = pool[rng.random_range(0..pool.len())];
            let words = random_words(&mut rng, family.keyword);
            let question = question_tokens(words, &digits);
            let answer = family
                .rule
                .apply(&digits)
                .into_iter()
                .map(vocab::digit)
                .collect();
            let inst = TaskInstance {
                id: format!("f{f:02}-{i:04}"),
                family: f,
                question,
                answer,
            };
            if i < n_train {
                splits.train.push(inst);
            } else {
                splits.test.push(inst);
            }
        }
    }
    Ok(splits)
}

/// Scripted hint for a family, optionally pointing at a mismatched answer
/// position: `[ add o mod m ]` or `[ add o mod m pos p ]`.
pub fn oracle_hint(family: usize, diff_position: Option<usize>) -> Result<Vec<Token>, TaskError> {
    let fam = TaskFamily::get(family)?;
    Ok(hint_for_rule(fam.rule, diff_position))
}

pub fn hint_for_rule(rule: Rule, diff_position: Option<usize>) -> Vec<Token> {
    let mut h = vec![
        vocab::HINT_OPEN,
        vocab::ADD,
        vocab::digit(rule.offset % 10),
        vocab::MOD,
    ];
    // moduli run up to 10, written as its last digit
    h.push(vocab::digit(rule.modulus % 10));
    if let Some(p) = diff_position {
        h.push(vocab::POS);
        h.push(vocab::digit(p.min(9)));
    }
    h.push(vocab::HINT_CLOSE);
    h
}

/// Question followed by the hint slot: the hint, if any, then filler up to
/// [`HINT_SLOT`] tokens.
pub fn prompt_tokens(question: &[Token], hint: Option<&[Token]>) -> Result<Vec<Token>, TaskError> {
    let hint = hint.unwrap_or(&[]);
    if hint.len() > HINT_SLOT {
        return Err(TaskError::HintTooLong(hint.len()));
    }
    let mut p = Vec::with_capacity(question.len() + HINT_SLOT);
    p.extend_from_slice(question);
    p.extend_from_slice(hint);
    p.extend(std::iter::repeat_n(vocab::FILLER, HINT_SLOT - hint.len()));
    Ok(p)
}

/// Answer span of a generation: tokens after the last `=` (if any) and before
/// the first `<eos>` that follows it.
pub fn answer_span(produced: &[Token]) -> &[Token] {
    let start = produced
        .iter()
        .rposition(|&t| t == vocab::EQUALS)
        .map_or(0, |p| p + 1);
    let rest = &produced[start..];
    let end = rest.iter().position(|&t| t == vocab::EOS).unwrap_or(rest.len());
    &rest[..end]
}

/// Exact match on the answer span.
pub fn grade(gold: &[Token], produced: &[Token]) -> bool {
    answer_span(produced) == gold
}

/// Answer recomputed from the question's keyword and digits, independent of
/// the stored answer.
pub fn solve(question: &[Token]) -> Option<Vec<Token>> {
    let family = question
        .iter()
        .find_map(|&t| (0..MAX_FAMILIES).find(|&f| vocab::keyword(f) == t))?;
    let digits: Vec<usize> = question.iter().filter_map(|&t| vocab::digit_value(t)).collect();
    let rule = TaskFamily::get(family).ok()?.rule;
    Some(rule.apply(&digits).into_iter().map(vocab::digit).collect())
}

/// Surface template: keywords and neutral words collapse to `w`, digits to `d`.
pub fn surface_template(question: &[Token]) -> String {
    question
        .iter()
        .map(|&t| {
            if vocab::digit_value(t).is_some() {
                "d".to_string()
            } else if t >= vocab::keyword(0) {
                "w".to_string()
            } else {
                Vocab::get().symbol(t).unwrap_or("?").to_string()
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Families observed under each surface template.
pub fn families_per_template(tasks: &[TaskInstance]) -> BTreeMap<String, BTreeSet<usize>> {
    let mut map: BTreeMap<String, BTreeSet<usize>> = BTreeMap::new();
    for t in tasks {
        map.entry(surface_template(&t.question))
            .or_default()
            .insert(t.family);
    }
    map
}

/// One line of the newline-delimited record files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    pub family: usize,
    pub question: String,
    pub reflection: String,
    pub answer: String,
    pub iterations: usize,
}

impl Record {
    pub fn from_task(t: &TaskInstance) -> Result<Self, TaskError> {
        let v = Vocab::get();
        Ok(Record {
            id: t.id.clone(),
            family: t.family,
            question: v.render(&t.question)?,
            reflection: String::new(),
            answer: v.render(&t.answer)?,
            iterations: 0,
        })
    }

    pub fn to_task(&self) -> Result<TaskInstance, TaskError> {
        let v = Vocab::get();
        Ok(TaskInstance {
            id: self.id.clone(),
            family: self.family,
            question: v.parse(&self.question)?,
            answer: v.parse(&self.answer)?,
        })
    }
}

pub fn write_records(records: &[Record]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn read_records(text: &str) -> Result<Vec<Record>, TaskError> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| TaskError::Record(e.to_string())))
        .collect()
}

/// Options for the backbone's pretraining text.
#[derive(Debug, Clone, Copy)]
pub struct PretrainTextConfig {
    /// Fraction of sequences that carry a hint.
    pub hint_rate: f64,
    /// Fraction of hints with a `pos p` suffix.
    pub diff_rate: f64,
}

impl Default for PretrainTextConfig {
    fn default() -> Self {
        PretrainTextConfig {
            hint_rate: 0.8,
            diff_rate: 0.5,
        }
    }
}

/// Pretraining sequences in the prompt template, followed by `= answer
/// <eos>`. Rules are drawn from the family rule table independently of the
/// keyword, so the text teaches how to follow hints but not which rule a
/// keyword implies.
pub fn pretrain_corpus(n: usize, cfg: &PretrainTextConfig, seed: u64) -> Vec<Vec<Token>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let (offset, modulus) = FAMILY_RULES[rng.random_range(0..FAMILY_RULES.len())];
            let rule = Rule { offset, modulus };
            let digits: Vec<usize> = (0..SEQ_DIGITS).map(|_| rng.random_range(0..10)).collect();
            let kw = vocab::keyword(rng.random_range(0..vocab::KEYWORDS.len()));
            let question = question_tokens(random_words(&mut rng, kw), &digits);
            let hint = rng.random_bool(cfg.hint_rate).then(|| {
                let diff = rng
                    .random_bool(cfg.diff_rate)
                    .then(|| rng.random_range(0..SEQ_DIGITS));
                hint_for_rule(rule, diff)
            });
            let mut seq = prompt_tokens(&question, hint.as_deref()).expect("hints fit the slot");
            seq.push(vocab::EQUALS);
            seq.extend(rule.apply(&digits).into_iter().map(vocab::digit));
            seq.push(vocab::EOS);
            seq
        })
        .collect()
}

/// Shuffled copy, deterministic per seed.
pub fn shuffled<T: Clone>(items: &[T], seed: u64) -> Vec<T> {
    let mut v = items.to_vec();
    v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(seed: u64) -> DatasetConfig {
        DatasetConfig {
            families: 8,
            per_family: 100,
            digit_pool: 24,
            seed,
        }
    }

    #[test]
    fn split_sizes_and_determinism() {
        let a = generate_family_dataset(&cfg(7)).unwrap();
        let b = generate_family_dataset(&cfg(7)).unwrap();
        assert_eq!(a.train.len(), 560);
        assert_eq!(a.test.len(), 240);
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
        let c = generate_family_dataset(&cfg(8)).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn answers_match_independent_evaluator() {
        let s = generate_family_dataset(&cfg(3)).unwrap();
        for t in s.train.iter().chain(&s.test) {
            assert_eq!(solve(&t.question).unwrap(), t.answer, "{}", t.id);
        }
    }

    #[test]
    fn config_errors() {
        let mut c = cfg(1);
        c.families = 1;
        assert!(matches!(generate_family_dataset(&c), Err(TaskError::TooFewFamilies(1))));
        let mut c = cfg(1);
        c.per_family = 9;
        assert!(matches!(generate_family_dataset(&c), Err(TaskError::SplitTooSmall(9))));
    }

    #[test]
    fn every_template_is_shared_by_families() {
        let s = generate_family_dataset(&cfg(5)).unwrap();
        for (template, fams) in families_per_template(&s.train) {
            assert!(fams.len() >= 2, "{template}");
        }
    }

    #[test]
    fn hint_names_offset_and_modulus() {
        let v = Vocab::get();
        let fam = TaskFamily::get(0).unwrap();
        assert_eq!(fam.name(), "offset-mod(o=3,m=7)");
        let h = oracle_hint(0, None).unwrap();
        assert_eq!(v.render(&h).unwrap(), "[ add 3 mod 7 ]");
        assert_eq!(oracle_hint(0, None).unwrap(), h);
        let h = oracle_hint(0, Some(2)).unwrap();
        assert_eq!(v.render(&h).unwrap(), "[ add 3 mod 7 pos 2 ]");
        assert!(h.iter().all(|&t| t < v.len()));
        assert!(matches!(oracle_hint(99, None), Err(TaskError::UnknownFamily(99))));
    }

    #[test]
    fn grading() {
        let v = Vocab::get();
        let gold = v.parse("1 2 3 4").unwrap();
        assert!(grade(&gold, &v.parse("1 2 3 4 <eos>").unwrap()));
        assert!(grade(&gold, &v.parse("1 2 3 4").unwrap()));
        assert!(!grade(&gold, &v.parse("1 2 3 4 5 <eos>").unwrap()));
        assert!(grade(&gold, &v.parse(". . add 9 = 1 2 3 4 <eos> .").unwrap()));
        assert!(!grade(&gold, &[]));
    }

    #[test]
    fn pretraining_sequences_are_consistent() {
        let corpus = pretrain_corpus(200, &PretrainTextConfig::default(), 1);
        for seq in &corpus {
            assert_eq!(seq[0], vocab::BOS);
            assert_eq!(*seq.last().unwrap(), vocab::EOS);
            let eq = seq.iter().position(|&t| t == vocab::EQUALS).unwrap();
            assert_eq!(eq, QUESTION_LEN + HINT_SLOT);
            assert_eq!(seq.len() - eq - 2, SEQ_DIGITS);
        }
        assert_eq!(corpus, pretrain_corpus(200, &PretrainTextConfig::default(), 1));
    }

    #[test]
    fn prompts_pad_the_hint_slot() {
        let q = question_tokens([vocab::keyword(0); 3], &[1, 2, 3, 4]);
        let plain = prompt_tokens(&q, None).unwrap();
        assert_eq!(plain.len(), QUESTION_LEN + HINT_SLOT);
        assert!(plain[QUESTION_LEN..].iter().all(|&t| t == vocab::FILLER));
        let h = oracle_hint(0, Some(2)).unwrap();
        let hinted = prompt_tokens(&q, Some(&h)).unwrap();
        assert_eq!(hinted.len(), plain.len());
        assert_eq!(&hinted[QUESTION_LEN..QUESTION_LEN + h.len()], &h[..]);
        assert!(prompt_tokens(&q, Some(&[vocab::FILLER; HINT_SLOT + 1])).is_err());
    }

    #[test]
    fn record_round_trip() {
        let s = generate_family_dataset(&cfg(2)).unwrap();
        let recs: Vec<Record> = s.test.iter().map(|t| Record::from_task(t).unwrap()).collect();
        let back = read_records(&write_records(&recs)).unwrap();
        assert_eq!(back, recs);
        assert_eq!(back[0].to_task().unwrap(), s.test[0]);
    }
}
