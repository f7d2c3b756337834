//! Byte-pair-encoding subword tokenizer with an end-of-word symbol.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::{TokenId, BOS, EOS, PAD, UNK};

pub const END_OF_WORD: &str = "</w>";
const SPECIALS: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];
const HEADER: &str = "#bpe v1";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenizer {
    merges: Vec<(String, String)>,
    alphabet: Vec<String>,
    vocab: Vec<String>,
    index: HashMap<String, TokenId>,
    ranks: HashMap<(String, String), usize>,
}

/// Lowercased whitespace-separated words.
pub fn normalize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.to_ascii_lowercase())
        .collect()
}

fn word_symbols(word: &str) -> Vec<String> {
    word.chars()
        .map(|c| c.to_string())
        .chain(std::iter::once(END_OF_WORD.to_string()))
        .collect()
}

fn apply_merge(symbols: &mut Vec<String>, a: &str, b: &str) {
    let mut i = 0;
    while i + 1 < symbols.len() {
        if symbols[i] == a && symbols[i + 1] == b {
            let merged = format!("{a}{b}");
            symbols[i] = merged;
            symbols.remove(i + 1);
        }
        i += 1;
    }
}

impl Tokenizer {
    fn assemble(alphabet: Vec<String>, merges: Vec<(String, String)>) -> Self {
        let mut vocab: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, TokenId> = HashMap::new();
        for (i, s) in SPECIALS.iter().enumerate() {
            index.insert(s.to_string(), i as TokenId);
        }
        let mut add = |s: String, vocab: &mut Vec<String>| {
            if !index.contains_key(&s) {
                index.insert(s.clone(), vocab.len() as TokenId);
                vocab.push(s);
            }
        };
        for s in &alphabet {
            add(s.clone(), &mut vocab);
        }
        for (a, b) in &merges {
            add(format!("{a}{b}"), &mut vocab);
        }
        let ranks = merges
            .iter()
            .enumerate()
            .map(|(i, p)| (p.clone(), i))
            .collect();
        Self {
            merges,
            alphabet,
            vocab,
            index,
            ranks,
        }
    }

    /// Greedy pair-merge training from characters. Each step merges the most
    /// frequent adjacent pair; ties go to the lexicographically smallest pair.
    /// Stops at `vocab_size` entries or when no pair remains.
    pub fn train<S: AsRef<str>>(texts: &[S], vocab_size: usize) -> Result<Self> {
        let mut words: BTreeMap<String, u64> = BTreeMap::new();
        for t in texts {
            for w in normalize(t.as_ref()) {
                *words.entry(w).or_default() += 1;
            }
        }
        if words.is_empty() {
            return Err(Error::Empty("tokenizer training corpus"));
        }
        let mut alphabet: Vec<String> = words
            .keys()
            .flat_map(|w| w.chars().map(|c| c.to_string()))
            .chain(std::iter::once(END_OF_WORD.to_string()))
            .collect();
        alphabet.sort();
        alphabet.dedup();
        let floor = SPECIALS.len() + alphabet.len();
        if vocab_size < floor {
            return Err(Error::Config(format!(
                "vocab_size {vocab_size} is below alphabet plus specials ({floor})"
            )));
        }
        let mut segmented: Vec<(Vec<String>, u64)> = words
            .into_iter()
            .map(|(w, n)| (word_symbols(&w), n))
            .collect();
        let mut tok = Self::assemble(alphabet.clone(), Vec::new());
        let mut merges = Vec::new();
        while tok.vocab.len() < vocab_size {
            let mut pairs: HashMap<(&str, &str), u64> = HashMap::new();
            for (syms, n) in &segmented {
                for w in syms.windows(2) {
                    *pairs.entry((w[0].as_str(), w[1].as_str())).or_default() += n;
                }
            }
            let Some(((a, b), _)) = pairs
                .into_iter()
                .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)))
            else {
                break;
            };
            let (a, b) = (a.to_string(), b.to_string());
            for (syms, _) in &mut segmented {
                apply_merge(syms, &a, &b);
            }
            merges.push((a, b));
            tok = Self::assemble(alphabet.clone(), merges.clone());
        }
        Ok(tok)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.vocab.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    /// Subword symbols of one word, merges applied by rank.
    pub fn segment_word(&self, word: &str) -> Vec<String> {
        let mut syms = word_symbols(word);
        loop {
            let best = syms
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0].clone(), w[1].clone())))
                .min()
                .copied();
            let Some(r) = best else { break };
            let (a, b) = &self.merges[r];
            apply_merge(&mut syms, a, b);
        }
        syms
    }

    /// Token ids of `text` without BOS/EOS. Out-of-alphabet symbols map to UNK.
    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        normalize(text)
            .iter()
            .flat_map(|w| self.segment_word(w))
            .map(|s| self.id(&s).unwrap_or(UNK))
            .collect()
    }

    /// Inverse of [`encode`](Self::encode); special ids are dropped.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        let mut s = String::new();
        for &id in ids {
            if matches!(id, PAD | BOS | EOS) {
                continue;
            }
            match self.token(id) {
                Some(t) if id != UNK => s.push_str(t),
                _ => s.push_str(SPECIALS[UNK as usize]),
            }
        }
        s.replace(END_OF_WORD, " ")
            .split_whitespace()
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{HEADER}\nspecials {}\nalphabet {}\n",
            SPECIALS.join(" "),
            self.alphabet.join(" ")
        );
        for (a, b) in &self.merges {
            let _ = writeln!(out, "{a} {b}");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(HEADER) {
            return Err(Error::parse("tokenizer", "missing header"));
        }
        let specials = lines
            .next()
            .and_then(|l| l.strip_prefix("specials "))
            .ok_or_else(|| Error::parse("tokenizer", "missing specials line"))?;
        if specials.split(' ').collect::<Vec<_>>() != SPECIALS {
            return Err(Error::parse(
                "tokenizer",
                format!("unexpected specials {specials}"),
            ));
        }
        let alphabet: Vec<String> = lines
            .next()
            .and_then(|l| l.strip_prefix("alphabet "))
            .ok_or_else(|| Error::parse("tokenizer", "missing alphabet line"))?
            .split(' ')
            .map(str::to_string)
            .collect();
        let merges = lines
            .filter(|l| !l.is_empty())
            .map(|l| {
                let mut it = l.split(' ');
                match (it.next(), it.next(), it.next()) {
                    (Some(a), Some(b), None) => Ok((a.to_string(), b.to_string())),
                    _ => Err(Error::parse("tokenizer", format!("bad merge line {l:?}"))),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::assemble(alphabet, merges))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_text())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}
