//! Toy vocabulary and token prompts.

use serde::{Deserialize, Serialize};

use crate::error::{bail_arg, Result};

pub const PAD: u32 = 0;
pub const NULL: u32 = 1;
/// The placeholder token `[S]` bound to a personal concept.
pub const PLACEHOLDER: u32 = 2;

/// Longest prompt the text encoder accepts; shorter prompts are padded.
pub const MAX_TOKENS: usize = 8;

const RESERVED: [&str; 3] = ["<pad>", "<null>", "[S]"];
const FILLER: [&str; 4] = ["a", "photo", "of", "on"];

/// Fixed word list. Ids are positions in `words`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    words: Vec<String>,
}

impl Vocab {
    pub fn new(extra: &[&str]) -> Self {
        let words = RESERVED
            .iter()
            .chain(FILLER.iter())
            .chain(extra.iter())
            .map(|s| s.to_string())
            .collect();
        Self { words }
    }

    /// The vocabulary covering every shape class and background of the toy world.
    pub fn toy() -> Self {
        let mut extra: Vec<&str> = crate::concept::ShapeClass::ALL
            .iter()
            .map(|s| s.word())
            .collect();
        extra.extend(crate::concept::Background::ALL.iter().map(|b| b.word()));
        Self::new(&extra)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.words.iter().position(|w| w == word).map(|i| i as u32)
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Whitespace tokenizer over the fixed word list.
    pub fn encode(&self, text: &str) -> Result<Prompt> {
        let mut tokens = Vec::new();
        for w in text.split_whitespace() {
            match self.id(w) {
                Some(id) => tokens.push(id),
                None => bail_arg!("unknown word {w:?} in prompt {text:?}"),
            }
        }
        Prompt::new(tokens, self.len())
    }

    pub fn decode(&self, prompt: &Prompt) -> String {
        prompt
            .tokens()
            .iter()
            .map(|&t| self.word(t).unwrap_or("<?>"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// A token sequence with at most one placeholder.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Prompt {
    tokens: Vec<u32>,
}

impl Prompt {
    pub fn new(tokens: Vec<u32>, vocab_size: usize) -> Result<Self> {
        if tokens.is_empty() {
            bail_arg!("empty prompt");
        }
        if tokens.len() > MAX_TOKENS {
            bail_arg!("prompt has {} tokens, max is {MAX_TOKENS}", tokens.len());
        }
        if let Some(bad) = tokens.iter().find(|&&t| t as usize >= vocab_size) {
            bail_arg!("token id {bad} outside vocabulary of size {vocab_size}");
        }
        if tokens.iter().filter(|&&t| t == PLACEHOLDER).count() > 1 {
            bail_arg!("prompt holds more than one placeholder");
        }
        Ok(Self { tokens })
    }

    /// The unconditional prompt used for classifier-free guidance.
    pub fn null() -> Self {
        Self { tokens: vec![NULL] }
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn placeholder_slot(&self) -> Option<usize> {
        self.position_of(PLACEHOLDER)
    }

    pub fn position_of(&self, token: u32) -> Option<usize> {
        self.tokens.iter().position(|&t| t == token)
    }

    pub fn contains(&self, token: u32) -> bool {
        self.tokens.contains(&token)
    }

    /// Copy with every occurrence of `from` swapped for `to`.
    pub fn replace(&self, from: u32, to: u32) -> Result<Self> {
        let tokens = self
            .tokens
            .iter()
            .map(|&t| if t == from { to } else { t })
            .collect::<Vec<_>>();
        if tokens.iter().filter(|&&t| t == PLACEHOLDER).count() > 1 {
            bail_arg!("replacement would create two placeholders");
        }
        Ok(Self { tokens })
    }

    /// Tokens padded with `<pad>` to `MAX_TOKENS`.
    pub fn padded(&self) -> [u32; MAX_TOKENS] {
        let mut out = [PAD; MAX_TOKENS];
        out[..self.tokens.len()].copy_from_slice(&self.tokens);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_roundtrip() {
        let v = Vocab::toy();
        let p = v.encode("a photo of a [S]").unwrap();
        assert_eq!(p.placeholder_slot(), Some(4));
        assert_eq!(v.decode(&p), "a photo of a [S]");
    }

    #[test]
    fn rejects_unknown_and_double_placeholder() {
        let v = Vocab::toy();
        assert!(v.encode("a photo of a dragon").is_err());
        assert!(v.encode("[S] [S]").is_err());
        assert!(Prompt::new(vec![999], v.len()).is_err());
    }

    #[test]
    fn null_prompt_is_reserved() {
        assert_eq!(Prompt::null().tokens(), &[NULL]);
        assert_eq!(Prompt::null().padded()[1], PAD);
    }
}
