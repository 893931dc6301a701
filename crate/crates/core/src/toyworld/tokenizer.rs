//! Closed-vocabulary instruction tokenizer.

use crate::error::{CovarError, Result};

pub const TOKEN_LEN: usize = 8;
pub const PAD_ID: i32 = 0;

pub type TokenSeq = [i32; TOKEN_LEN];

/// Id `i` is `VOCAB[i]`; id 0 is padding.
pub const VOCAB: [&str; 19] = [
    "<pad>", "pick", "place", "move", "push", "the", "on", "to", "goal", "and", "it", "red",
    "green", "blue", "yellow", "cyan", "magenta", "square", "disc",
];

pub fn word_id(word: &str) -> Option<i32> {
    VOCAB
        .iter()
        .skip(1)
        .position(|&w| w == word)
        .map(|i| i as i32 + 1)
}

/// Whitespace-split lookup, padded or truncated to [`TOKEN_LEN`].
pub fn tokenize(text: &str) -> Result<TokenSeq> {
    let mut out = [PAD_ID; TOKEN_LEN];
    for (i, word) in text.split_whitespace().enumerate() {
        let id = word_id(word).ok_or_else(|| CovarError::Vocabulary(word.to_string()))?;
        if i < TOKEN_LEN {
            out[i] = id;
        }
    }
    Ok(out)
}

pub fn detokenize(tokens: &[i32]) -> String {
    tokens
        .iter()
        .filter(|&&t| t != PAD_ID)
        .filter_map(|&t| VOCAB.get(t as usize).copied())
        .collect::<Vec<_>>()
        .join(" ")
}
