//! The fixed word-level text vocabulary of the synthetic tasks.

use crate::error::{Error, Result};
use crate::image::ShapeKind;

pub const PAD: usize = 0;
pub const EOS: usize = 1;

const WORDS: &[&str] = &[
    "<pad>", "<eos>", "count?", "kind?", "draw", "invert", "0", "1", "2", "3", "4", "5", "6", "7", "8", "9",
    "square", "frame", "cross", "shape=square", "shape=frame", "shape=cross", "size=1", "size=2", "size=3",
    "pos=0", "pos=1", "pos=2", "pos=3", "pos=4", "pos=5", "pos=6", "pos=7", "pos=8",
];

pub fn text_vocab_size() -> usize {
    WORDS.len()
}

pub fn word(id: usize) -> Option<&'static str> {
    WORDS.get(id).copied()
}

pub fn id_of(word: &str) -> Result<usize> {
    WORDS
        .iter()
        .position(|w| *w == word)
        .ok_or_else(|| Error::Config(format!("unknown word {word:?}")))
}

pub fn digit(n: usize) -> usize {
    assert!(n < 10, "digit out of range: {n}");
    6 + n
}

pub fn shape_word(kind: ShapeKind) -> usize {
    16 + kind.index()
}

pub fn shape_attr(kind: ShapeKind) -> usize {
    19 + kind.index()
}

/// `size=1..3`.
pub fn size_attr(size: usize) -> usize {
    assert!((1..=3).contains(&size), "size out of range: {size}");
    21 + size
}

/// `pos=0..8`.
pub fn pos_attr(pos: usize) -> usize {
    assert!(pos < 9, "position out of range: {pos}");
    25 + pos
}

/// Splits on whitespace and `;`.
pub fn tokenize(text: &str) -> Result<Vec<usize>> {
    text.split(|c: char| c.is_whitespace() || c == ';')
        .filter(|w| !w.is_empty())
        .map(id_of)
        .collect()
}

/// Words for text ids; anything else renders as `<id>`.
pub fn detokenize(ids: &[usize]) -> String {
    ids.iter()
        .map(|&i| word(i).map_or_else(|| format!("<{i}>"), str::to_string))
        .collect::<Vec<_>>()
        .join(" ")
}
