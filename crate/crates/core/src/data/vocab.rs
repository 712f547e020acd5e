use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use super::corpus::Sample;
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Token ↔ id map with four reserved ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocab {
    /// Reserved ids followed by every corpus token in lexicographic order.
    pub fn build(corpus: &[Sample]) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Config("cannot build a vocabulary from an empty corpus".into()));
        }
        let set: BTreeSet<&str> = corpus
            .iter()
            .flat_map(|s| s.keywords.iter().chain(&s.description))
            .map(String::as_str)
            .collect();
        Self::from_tokens(RESERVED.iter().copied().chain(set).map(String::from).collect())
    }

    /// Only the reserved tokens; the vocabulary of an empty corpus.
    pub fn reserved() -> Self {
        Self::from_tokens(RESERVED.iter().map(|t| t.to_string()).collect()).expect("reserved tokens are distinct")
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..4] != RESERVED {
            return Err(Error::Config("vocabulary must start with the reserved tokens".into()));
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Self { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.tokens[i].clone()).collect()
    }

    /// Hex SHA-256 over the id-ordered token list.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        hex::encode(h.finalize())
    }

    /// Tab-separated `token<TAB>id`, one per line, in id order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = File::create(path)?;
        for (i, t) in self.tokens.iter().enumerate() {
            writeln!(f, "{t}\t{i}")?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let reader = BufReader::new(File::open(path)?);
        let mut tokens = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let err = |msg: &str| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: msg.to_string(),
            };
            let (tok, id) = line.split_once('\t').ok_or_else(|| err("expected token<TAB>id"))?;
            let id: usize = id.trim().parse().map_err(|_| err("id is not an integer"))?;
            if id != tokens.len() {
                return Err(err("ids must be consecutive from 0"));
            }
            tokens.push(tok.to_string());
        }
        Self::from_tokens(tokens)
    }
}
