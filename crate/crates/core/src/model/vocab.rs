//! Word-level vocabulary closed over the prompt and answer templates.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{render_answer, render_prompt, PromptMode, IMAGE_PLACEHOLDER};
use crate::distortion::DistortionClass;
use crate::error::{Error, Result};

pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";

pub const MAX_VOCAB: usize = 64;

/// Splits text into lowercase words, single punctuation marks and `<...>` markers.
pub fn segment(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let chars: Vec<char> = text.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c == '<' {
            match chars[i..].iter().position(|&d| d == '>') {
                Some(end) if !chars[i + 1..i + end].iter().any(|d| d.is_whitespace()) => {
                    out.push(chars[i..=i + end].iter().collect::<String>().to_lowercase());
                    i += end + 1;
                }
                _ => {
                    out.push("<".to_string());
                    i += 1;
                }
            }
        } else if c.is_alphanumeric() {
            let start = i;
            while i < chars.len() && chars[i].is_alphanumeric() {
                i += 1;
            }
            out.push(chars[start..i].iter().collect::<String>().to_lowercase());
        } else {
            out.push(c.to_string());
            i += 1;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Self { tokens, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl Vocabulary {
    /// Markers, then every token of the prompt and answer templates in order of first use.
    pub fn standard() -> Self {
        let mut tokens: Vec<String> = [BOS, EOS, UNK, IMAGE_PLACEHOLDER].iter().map(|s| s.to_string()).collect();
        let mut texts = vec![render_prompt(PromptMode::Finetune), render_prompt(PromptMode::BaselineOptions)];
        texts.extend(DistortionClass::ALL.iter().map(|&c| render_answer(c)));
        for text in texts {
            for tok in segment(&text) {
                if !tokens.contains(&tok) {
                    tokens.push(tok);
                }
            }
        }
        Self::from(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.is_empty() || tokens.len() > MAX_VOCAB {
            return Err(Error::domain(format!("vocabulary size {} outside 1..={MAX_VOCAB}", tokens.len())));
        }
        let v = Self::from(tokens);
        if v.index.len() != v.tokens.len() {
            return Err(Error::domain("vocabulary contains duplicate tokens"));
        }
        Ok(v)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    fn marker(&self, name: &str) -> Result<u32> {
        self.id(name)
            .ok_or_else(|| Error::domain(format!("vocabulary lacks the {name} marker")))
    }

    pub fn bos(&self) -> Result<u32> {
        self.marker(BOS)
    }

    pub fn eos(&self) -> Result<u32> {
        self.marker(EOS)
    }

    pub fn class_id(&self, class: DistortionClass) -> Result<u32> {
        self.marker(class.word())
    }

    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        let unk = self.id(UNK);
        segment(text)
            .iter()
            .filter_map(|t| self.id(t).or(unk))
            .collect()
    }

    /// Joins tokens with single spaces, without a space before punctuation.
    pub fn detokenize(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for &id in ids {
            let tok = self.token(id).unwrap_or(UNK);
            let punct = tok.len() == 1 && matches!(tok, "." | "," | "?" | ";" | ":" | "!");
            if !out.is_empty() && !punct {
                out.push(' ');
            }
            out.push_str(tok);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_vocabulary_is_small_and_complete() {
        let v = Vocabulary::standard();
        assert!(v.len() <= MAX_VOCAB);
        for c in DistortionClass::ALL {
            assert!(v.class_id(c).is_ok());
        }
        let ids: std::collections::BTreeSet<u32> = DistortionClass::ALL.iter().map(|&c| v.class_id(c).unwrap()).collect();
        assert_eq!(ids.len(), 8);
    }

    #[test]
    fn tokenize_answer() {
        let v = Vocabulary::standard();
        let ids = v.tokenize("The image has some blur.");
        let toks: Vec<&str> = ids.iter().map(|&i| v.token(i).unwrap()).collect();
        assert_eq!(toks, ["the", "image", "has", "some", "blur", "."]);
        assert_eq!(v.tokenize("zebra"), vec![v.id(UNK).unwrap()]);
    }

    #[test]
    fn templates_round_trip() {
        let v = Vocabulary::standard();
        let mut texts = vec![render_prompt(PromptMode::Finetune), render_prompt(PromptMode::BaselineOptions)];
        texts.extend(DistortionClass::ALL.iter().map(|&c| render_answer(c)));
        for t in texts {
            assert_eq!(v.detokenize(&v.tokenize(&t)), t.to_lowercase());
        }
    }

    #[test]
    fn segment_handles_markers() {
        assert_eq!(segment("a <image> b"), ["a", "<image>", "b"]);
        assert_eq!(segment("x < y"), ["x", "<", "y"]);
    }
}
