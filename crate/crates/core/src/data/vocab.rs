use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const EOS: &str = "<eos>";

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const EOS_ID: usize = 2;

/// Fixed instruction prepended to every reranker input.
pub const INSTRUCTION: &str = "rank passages by relevance to the query";

/// Splits text into lowercase word and punctuation tokens.
///
/// Words are maximal runs of alphanumeric characters; every other
/// non-whitespace character is a token on its own.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            word.extend(ch.to_lowercase());
            continue;
        }
        if !word.is_empty() {
            out.push(std::mem::take(&mut word));
        }
        if !ch.is_whitespace() {
            out.push(ch.to_lowercase().collect());
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

/// Bijective token/id mapping with reserved ids for padding, unknown words,
/// end-of-sequence and the instruction template.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
    instruction: Vec<usize>,
}

impl Vocabulary {
    /// Reserved tokens, then the instruction words, then every new word of
    /// `texts` in sorted order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut vocab = Self::reserved();
        let mut words: Vec<String> = texts.into_iter().flat_map(split_words).collect();
        words.sort_unstable();
        words.dedup();
        for w in words {
            vocab.insert(w);
        }
        vocab
    }

    fn reserved() -> Self {
        let mut v = Self {
            tokens: Vec::new(),
            ids: HashMap::new(),
            instruction: Vec::new(),
        };
        for t in [PAD, UNK, EOS] {
            v.insert(t.to_string());
        }
        v.instruction = split_words(INSTRUCTION).into_iter().map(|w| v.insert(w)).collect();
        v
    }

    fn insert(&mut self, token: String) -> usize {
        if let Some(&id) = self.ids.get(&token) {
            return id;
        }
        let id = self.tokens.len();
        self.ids.insert(token.clone(), id);
        self.tokens.push(token);
        id
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn instruction_ids(&self) -> &[usize] {
        &self.instruction
    }

    pub fn eos_id(&self) -> usize {
        EOS_ID
    }

    /// Deterministic; unknown words map to the UNK id.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        split_words(text)
            .iter()
            .map(|w| self.ids.get(w).copied().unwrap_or(UNK_ID))
            .collect()
    }

    /// One token per line, in id order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let expected = Self::reserved();
        let mut vocab = Self {
            tokens: Vec::new(),
            ids: HashMap::new(),
            instruction: expected.instruction.clone(),
        };
        for (i, line) in text.lines().enumerate() {
            if i < expected.len() && line != expected.tokens[i] {
                return Err(Error::Parse {
                    path: path.into(),
                    line: i + 1,
                    msg: format!("reserved token {:?} expected, found {line:?}", expected.tokens[i]),
                });
            }
            if vocab.ids.contains_key(line) || line.is_empty() {
                return Err(Error::Parse {
                    path: path.into(),
                    line: i + 1,
                    msg: format!("duplicate or empty token {line:?}"),
                });
            }
            vocab.insert(line.to_string());
        }
        if vocab.len() < expected.len() {
            return Err(Error::Format(format!("{}: truncated vocabulary", path.display())));
        }
        Ok(vocab)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_words_and_punctuation() {
        assert!(split_words("").is_empty());
        assert_eq!(split_words("Dog, cat!"), vec!["dog", ",", "cat", "!"]);
        assert_eq!(split_words("  a\tB12 "), vec!["a", "b12"]);
    }

    #[test]
    fn tokenize_examples() {
        let v = Vocabulary::build(["dog cat , !"]);
        assert!(v.tokenize("").is_empty());
        let dog = v.id("dog").unwrap();
        assert_eq!(v.tokenize("dog dog"), vec![dog, dog]);
        assert_eq!(
            v.tokenize("Dog, cat!"),
            vec![dog, v.id(",").unwrap(), v.id("cat").unwrap(), v.id("!").unwrap()]
        );
        assert_eq!(v.tokenize("zebra"), vec![UNK_ID]);
    }

    #[test]
    fn reserved_ids_are_stable() {
        let a = Vocabulary::build(["alpha beta"]);
        let b = Vocabulary::build(["zulu yankee xray"]);
        assert_eq!(a.id(PAD), Some(PAD_ID));
        assert_eq!(a.id(EOS), Some(EOS_ID));
        assert_eq!(a.instruction_ids(), b.instruction_ids());
        assert_eq!(a.token(a.instruction_ids()[0]), Some("rank"));
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = Vocabulary::build(["the quick brown fox", "jumps!"]);
        v.save(&path).unwrap();
        let back = Vocabulary::load(&path).unwrap();
        assert_eq!(v, back);
        assert_eq!(v.tokenize("quick fox jumps"), back.tokenize("quick fox jumps"));
    }
}
