use std::collections::HashMap;

use crate::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const BOS: u32 = 2;
pub const EOS: u32 = 3;
/// Separator between sentences in concatenated inputs.
pub const BRK: u32 = 4;
/// Number of reserved ids at the start of every vocabulary.
pub const RESERVED: usize = 5;

const SPECIALS: [&str; RESERVED] = ["<pad>", "<unk>", "<s>", "</s>", "<brk>"];

/// Whitespace-token vocabulary with the reserved symbols at ids `0..5`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    pub fn new() -> Self {
        let tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self { tokens, index }
    }

    /// Builds a vocabulary from whitespace-tokenized sentences. Tokens are
    /// ordered by descending frequency, ties by first occurrence; at most
    /// `max_size` entries (reserved symbols included) are kept.
    pub fn build<'a, I>(sentences: I, max_size: Option<usize>) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut counts: HashMap<&str, (usize, usize)> = HashMap::new();
        for s in sentences {
            for tok in s.split_whitespace() {
                let next = counts.len();
                counts.entry(tok).or_insert((0, next)).0 += 1;
            }
        }
        let mut ranked: Vec<(&str, usize, usize)> = counts
            .into_iter()
            .filter(|(t, _)| !SPECIALS.contains(t))
            .map(|(t, (c, first))| (t, c, first))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
        let mut vocab = Self::new();
        let limit = max_size.unwrap_or(usize::MAX);
        for (tok, _, _) in ranked {
            if vocab.len() >= limit {
                break;
            }
            vocab.add(tok);
        }
        vocab
    }

    /// Rebuilds a vocabulary from its token list, which must start with the
    /// reserved symbols and contain no duplicates.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED || tokens[..RESERVED] != SPECIALS.map(String::from) {
            return Err(Error::InvalidInput(
                "vocabulary does not start with the reserved symbols".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::InvalidInput(format!("duplicate vocabulary entry `{t}`")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Adds a token if missing and returns its id.
    pub fn add(&mut self, token: &str) -> u32 {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = self.tokens.len() as u32;
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        id
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn get(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        self.tokens.get(id as usize).map_or("<unk>", String::as_str)
    }

    pub fn encode(&self, sentence: &str) -> Vec<u32> {
        sentence.split_whitespace().map(|t| self.id(t)).collect()
    }

    /// Joins tokens with spaces, skipping padding and sentence markers.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&i| !matches!(i, PAD | BOS | EOS))
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}
