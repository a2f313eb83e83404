//! Program grammar, question templates, translator and executor.

mod ast;
mod exec;
mod generate;
mod translate;

use std::collections::HashMap;
use std::sync::OnceLock;

use sha2::{Digest, Sha256};
use thiserror::Error;

pub use ast::{
    parse_program, serialize_program, AttrType, Constraints, Direction, Program, SetExpr,
};
pub use exec::{eval_set, execute_program, in_direction};
pub use generate::{gen_question, unique_descriptions, GeneratedQuestion, Template};
pub use translate::{render_description, render_direction, shape_plural, translate_question};

use crate::world::{Attribute, Color, Material, Shape, SizeClass};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProgramError {
    #[error("parse error at token {position}: {message}")]
    Parse { position: usize, message: String },
    #[error("cannot translate question {tokens:?}: expected {expected} at token {position}")]
    Translate {
        tokens: Vec<String>,
        position: usize,
        expected: String,
    },
    #[error("{op} needs a single object, got {size}")]
    Ambiguous { op: &'static str, size: usize },
    #[error("answer {0:?} is not in the answer vocabulary")]
    OutOfVocabulary(String),
    #[error("template {template} is not instantiable on image {image_id}")]
    Skip {
        template: &'static str,
        image_id: u32,
    },
    #[error("unknown token {0:?}")]
    UnknownToken(String),
}

/// Number of answer classes.
pub const NUM_ANSWERS: usize = 24;

/// Ordered answer labels.
pub fn answers() -> &'static [String] {
    static CELL: OnceLock<Vec<String>> = OnceLock::new();
    CELL.get_or_init(|| {
        let mut out: Vec<String> = vec!["yes".into(), "no".into()];
        out.extend(Color::ALL.iter().map(|c| c.name().to_string()));
        out.extend(Shape::ALL.iter().map(|c| c.name().to_string()));
        out.extend(SizeClass::ALL.iter().map(|c| c.name().to_string()));
        out.extend(Material::ALL.iter().map(|c| c.name().to_string()));
        out.extend((0..=8).map(|d: u32| d.to_string()));
        debug_assert_eq!(out.len(), NUM_ANSWERS);
        out
    })
}

pub fn answer_index(label: &str) -> Option<usize> {
    answers().iter().position(|a| a == label)
}

/// Hex sha256 over the newline-joined answer labels. Binds score files and
/// checkpoints to one class ordering.
pub fn vocab_fingerprint() -> &'static str {
    static CELL: OnceLock<String> = OnceLock::new();
    CELL.get_or_init(|| {
        let mut h = Sha256::new();
        for a in answers() {
            h.update(a.as_bytes());
            h.update(b"\n");
        }
        format!("{:x}", h.finalize())
    })
}

/// Closed token vocabulary. Index 0 is `<pad>`.
#[derive(Debug)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    fn from_words<I: IntoIterator<Item = String>>(words: I) -> Self {
        let mut tokens = vec!["<pad>".to_string()];
        for w in words {
            if !tokens.contains(&w) {
                tokens.push(w);
            }
        }
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<usize>, ProgramError> {
        tokens
            .iter()
            .map(|t| {
                self.id(t.as_ref())
                    .ok_or_else(|| ProgramError::UnknownToken(t.as_ref().to_string()))
            })
            .collect()
    }
}

fn value_words() -> Vec<String> {
    let mut out = Vec::new();
    out.extend(SizeClass::ALL.iter().map(|v| v.name().to_string()));
    out.extend(Color::ALL.iter().map(|v| v.name().to_string()));
    out.extend(Material::ALL.iter().map(|v| v.name().to_string()));
    out.extend(Shape::ALL.iter().map(|v| v.name().to_string()));
    out
}

/// Every word the question templates can emit.
pub fn question_vocab() -> &'static Vocab {
    static CELL: OnceLock<Vocab> = OnceLock::new();
    CELL.get_or_init(|| {
        let fixed = [
            "what", "is", "the", "there", "a", "do", "and", "have", "same", "how", "many", "are",
            "object", "objects", "left", "right", "of", "above", "below",
        ];
        let mut words: Vec<String> = fixed.iter().map(|s| s.to_string()).collect();
        words.extend(AttrType::ALL.iter().map(|a| a.name().to_string()));
        words.extend(value_words());
        words.extend(Shape::ALL.iter().map(|s| shape_plural(*s).to_string()));
        Vocab::from_words(words)
    })
}

/// Every token a serialized program can contain.
pub fn program_vocab() -> &'static Vocab {
    static CELL: OnceLock<Vocab> = OnceLock::new();
    CELL.get_or_init(|| {
        let fixed = [
            "(",
            ")",
            "exist",
            "query",
            "compare_attr",
            "count",
            "select",
            "filter",
            "relate",
        ];
        let mut words: Vec<String> = fixed.iter().map(|s| s.to_string()).collect();
        words.extend(AttrType::ALL.iter().map(|a| a.name().to_string()));
        words.extend(AttrType::ALL.iter().map(|a| a.key().to_string()));
        words.extend(Direction::ALL.iter().map(|d| d.name().to_string()));
        words.extend(value_words());
        Vocab::from_words(words)
    })
}
