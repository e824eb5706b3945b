//! Character-level tokenizer with reserved specials and exact
//! round-tripping on normalized text.

use std::collections::BTreeSet;
use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const NUM_SPECIALS: usize = 4;

const SPECIAL_SYMBOLS: [&str; NUM_SPECIALS] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Ordered symbol inventory. Ids are dense: specials first, then the
/// sorted unique characters of the training transcripts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    symbols: Vec<String>,
    by_symbol: HashMap<char, u32>,
}

/// Scoring/text normalization: uppercase, strip punctuation except
/// apostrophes, collapse whitespace.
pub fn normalize(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut pending_space = false;
    for c in text.chars() {
        if c.is_alphanumeric() || c == '\'' {
            if pending_space && !out.is_empty() {
                out.push(' ');
            }
            pending_space = false;
            for u in c.to_uppercase() {
                out.push(u);
            }
        } else {
            pending_space = true;
        }
    }
    out
}

impl Vocab {
    /// Build from normalized training transcripts.
    pub fn build<'a>(transcripts: impl IntoIterator<Item = &'a str>) -> Result<Vocab> {
        let mut chars = BTreeSet::new();
        let mut any = false;
        for t in transcripts {
            any = true;
            for c in normalize(t).chars() {
                chars.insert(c);
            }
        }
        if !any {
            return Err(Error::data("cannot build a vocab from an empty corpus"));
        }
        let mut symbols: Vec<String> = SPECIAL_SYMBOLS.iter().map(|s| s.to_string()).collect();
        symbols.extend(chars.iter().map(|c| c.to_string()));
        Ok(Vocab::from_symbols(symbols))
    }

    fn from_symbols(symbols: Vec<String>) -> Vocab {
        let mut by_symbol = HashMap::new();
        for (i, s) in symbols.iter().enumerate().skip(NUM_SPECIALS) {
            let mut it = s.chars();
            let c = it.next().expect("non-empty symbol");
            debug_assert!(it.next().is_none(), "multi-char symbol {s:?}");
            by_symbol.insert(c, i as u32);
        }
        Vocab { symbols, by_symbol }
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn id_of(&self, c: char) -> u32 {
        *self.by_symbol.get(&c).unwrap_or(&UNK)
    }

    /// Normalize, then map to ids wrapped in BOS/EOS. Unseen characters
    /// fall back to UNK.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let norm = normalize(text);
        let mut ids = Vec::with_capacity(norm.chars().count() + 2);
        ids.push(BOS);
        for c in norm.chars() {
            ids.push(self.id_of(c));
        }
        ids.push(EOS);
        ids
    }

    /// Drop specials and concatenate symbols. Unknown ids are an error.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            if (id as usize) >= self.symbols.len() {
                return Err(Error::data(format!("token id {id} out of vocab")));
            }
            if (id as usize) < NUM_SPECIALS {
                continue;
            }
            out.push_str(&self.symbols[id as usize]);
        }
        Ok(out)
    }

    /// One symbol per line, line number = id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        for s in &self.symbols {
            text.push_str(s);
            text.push('\n');
        }
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Vocab> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut symbols: Vec<String> = Vec::new();
        let mut lines = text.split('\n').collect::<Vec<_>>();
        // A trailing newline yields one empty trailing segment.
        if lines.last() == Some(&"") {
            lines.pop();
        }
        for line in lines {
            symbols.push(line.to_string());
        }
        if symbols.len() < NUM_SPECIALS
            || symbols[..NUM_SPECIALS]
                .iter()
                .zip(SPECIAL_SYMBOLS)
                .any(|(a, b)| a != b)
        {
            return Err(Error::data(format!("{path:?} is not a vocab file")));
        }
        for s in &symbols[NUM_SPECIALS..] {
            if s.chars().count() != 1 {
                return Err(Error::data(format!(
                    "vocab symbol {s:?} is not a single character"
                )));
            }
        }
        Ok(Vocab::from_symbols(symbols))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn build_from_two_transcripts() {
        let v = Vocab::build(["AB", "BA"]).unwrap();
        assert_eq!(v.len(), 6);
        assert_eq!(v.id_of('A'), 4);
        assert_eq!(v.id_of('B'), 5);
        // Duplicates change nothing.
        let v2 = Vocab::build(["AB", "BA", "AB"]).unwrap();
        assert_eq!(v, v2);
    }

    #[test]
    fn empty_corpus_is_error() {
        assert!(Vocab::build([]).is_err());
    }

    #[test]
    fn unseen_char_encodes_to_unk() {
        let v = Vocab::build(["AB"]).unwrap();
        let ids = v.encode("AB A");
        assert_eq!(ids, vec![BOS, 4, 5, UNK, 4, EOS]);
    }

    #[test]
    fn empty_string_is_bos_eos() {
        let v = Vocab::build(["AB"]).unwrap();
        assert_eq!(v.encode(""), vec![BOS, EOS]);
        assert_eq!(v.decode(&[BOS, EOS]).unwrap(), "");
    }

    #[test]
    fn unknown_id_is_error() {
        let v = Vocab::build(["AB"]).unwrap();
        assert!(v.decode(&[99]).is_err());
    }

    #[test]
    fn normalization_rules() {
        assert_eq!(normalize("  hello,  world! "), "HELLO WORLD");
        assert_eq!(normalize("don't stop"), "DON'T STOP");
        assert_eq!(normalize("a\tb\nc"), "A B C");
        assert_eq!(normalize(""), "");
    }

    #[test]
    fn save_load_preserves_ids() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = Vocab::build(["HELLO WORLD", "IT'S ME"]).unwrap();
        v.save(&path).unwrap();
        let v2 = Vocab::load(&path).unwrap();
        assert_eq!(v, v2);
        // The space symbol survives the text format.
        assert_eq!(v2.id_of(' '), v.id_of(' '));
    }

    proptest! {
        #[test]
        fn roundtrip_on_vocab_alphabet(s in "[A-Z' ]{0,40}") {
            let v = Vocab::build(["ABCDEFGHIJKLMNOPQRSTUVWXYZ' '"]).unwrap();
            let decoded = v.decode(&v.encode(&s)).unwrap();
            prop_assert_eq!(decoded, normalize(&s));
        }
    }
}
