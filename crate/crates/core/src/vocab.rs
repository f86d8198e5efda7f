//! Closed symbol table shared by the task generator, the backbone and the
//! record files.

use std::collections::HashMap;
use std::sync::OnceLock;

use thiserror::Error;

pub type Token = usize;

pub const PAD: Token = 0;
pub const BOS: Token = 1;
pub const EOS: Token = 2;
pub const QUESTION: Token = 3;
pub const COLON: Token = 4;
pub const EQUALS: Token = 5;
pub const HINT_OPEN: Token = 6;
pub const HINT_CLOSE: Token = 7;
pub const FILLER: Token = 8;
pub const ADD: Token = 9;
pub const MOD: Token = 10;
pub const POS: Token = 11;
pub const DIGIT_BASE: Token = 12;

/// Topic words that tag a question. Families own one each; pretraining text
/// pairs them with rules at random.
pub const KEYWORDS: [&str; 12] = [
    "apple", "river", "stone", "cloud", "ember", "frost", "maple", "coral", "amber", "cedar",
    "delta", "orbit",
];

/// Family-neutral words that pad the question's topic slots.
pub const NEUTRAL: [&str; 8] = ["the", "some", "any", "new", "old", "big", "small", "red"];

const SPECIALS: [&str; 12] = [
    "<pad>", "<bos>", "<eos>", "Q", ":", "=", "[", "]", ".", "add", "mod", "pos",
];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum VocabError {
    #[error("unknown symbol `{0}`")]
    UnknownSymbol(String),
    #[error("token id {0} outside the vocabulary")]
    UnknownToken(Token),
}

pub struct Vocab {
    symbols: Vec<&'static str>,
    index: HashMap<&'static str, Token>,
}

const DIGITS: [&str; 10] = ["0", "1", "2", "3", "4", "5", "6", "7", "8", "9"];

impl Vocab {
    fn build() -> Self {
        let symbols: Vec<&'static str> = SPECIALS
            .iter()
            .chain(DIGITS.iter())
            .chain(KEYWORDS.iter())
            .chain(NEUTRAL.iter())
            .copied()
            .collect();
        let index = symbols.iter().enumerate().map(|(i, s)| (*s, i)).collect();
        Vocab { symbols, index }
    }

    pub fn get() -> &'static Vocab {
        static V: OnceLock<Vocab> = OnceLock::new();
        V.get_or_init(Vocab::build)
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbol(&self, t: Token) -> Result<&'static str, VocabError> {
        self.symbols
            .get(t)
            .copied()
            .ok_or(VocabError::UnknownToken(t))
    }

    pub fn token(&self, s: &str) -> Result<Token, VocabError> {
        self.index
            .get(s)
            .copied()
            .ok_or_else(|| VocabError::UnknownSymbol(s.to_string()))
    }

    /// Space-separated rendering.
    pub fn render(&self, tokens: &[Token]) -> Result<String, VocabError> {
        let parts = tokens
            .iter()
            .map(|&t| self.symbol(t))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(parts.join(" "))
    }

    pub fn parse(&self, text: &str) -> Result<Vec<Token>, VocabError> {
        text.split_whitespace().map(|s| self.token(s)).collect()
    }
}

pub fn digit(d: usize) -> Token {
    assert!(d < 10, "digit out of range: {d}");
    DIGIT_BASE + d
}

pub fn digit_value(t: Token) -> Option<usize> {
    (DIGIT_BASE..DIGIT_BASE + 10)
        .contains(&t)
        .then(|| t - DIGIT_BASE)
}

pub fn keyword(i: usize) -> Token {
    DIGIT_BASE + 10 + i
}

pub fn neutral(i: usize) -> Token {
    DIGIT_BASE + 10 + KEYWORDS.len() + i
}

/// Tokens whose position in a well-formed sequence is fully determined by the
/// template.
pub fn is_format_token(t: Token) -> bool {
    matches!(t, QUESTION | COLON | MOD | EOS)
}
