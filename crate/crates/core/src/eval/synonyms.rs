use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng;

use super::probe::Example;
use crate::error::{Error, Result};

/// Admissible replacements for single words. Lookups are lowercase, like
/// the tokenizer.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SynonymTable {
    entries: BTreeMap<String, Vec<String>>,
}

fn is_single_token(w: &str) -> bool {
    !w.is_empty() && !w.chars().any(char::is_whitespace)
}

impl SynonymTable {
    pub fn new<I, S>(entries: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, Vec<S>)>,
        S: Into<String>,
    {
        let mut map = BTreeMap::new();
        for (word, syns) in entries {
            let word = word.into().to_lowercase();
            let syns: Vec<String> = syns.into_iter().map(|s| s.into().to_lowercase()).collect();
            if !is_single_token(&word) {
                return Err(Error::domain("synonyms", format!("{word:?} is not a single token")));
            }
            if syns.is_empty() {
                return Err(Error::domain("synonyms", format!("{word:?} has no synonyms")));
            }
            for s in &syns {
                if !is_single_token(s) {
                    return Err(Error::domain("synonyms", format!("synonym {s:?} of {word:?} is not a single token")));
                }
                if *s == word {
                    return Err(Error::domain("synonyms", format!("{word:?} lists itself")));
                }
            }
            if map.insert(word.clone(), syns).is_some() {
                return Err(Error::domain("synonyms", format!("{word:?} listed twice")));
            }
        }
        Ok(SynonymTable { entries: map })
    }

    /// Reads `word<TAB>syn1,syn2,…` lines; blank lines are skipped.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (word, syns) = line.split_once('\t').ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                detail: "expected word<TAB>synonyms".into(),
            })?;
            entries.push((word.trim(), syns.split(',').map(str::trim).collect()));
        }
        Self::new(entries).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            detail: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (w, syns) in &self.entries {
            out.push_str(&format!("{w}\t{}\n", syns.join(",")));
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, word: &str) -> Option<&[String]> {
        self.entries.get(&word.to_lowercase()).map(Vec::as_slice)
    }
}

/// Replaces each listed word with one of its synonyms with probability
/// `swap_fraction`. Examples with no replacement are returned verbatim;
/// altered ones are re-joined with single spaces.
pub fn synonym_swap<R: Rng + ?Sized>(
    dataset: &[Example],
    table: &SynonymTable,
    rng: &mut R,
    swap_fraction: f64,
) -> Vec<Example> {
    dataset
        .iter()
        .map(|ex| {
            let mut changed = false;
            let words: Vec<String> = ex
                .text
                .split_whitespace()
                .map(|w| match table.get(w) {
                    Some(syns) if swap_fraction >= 1.0 || rng.random::<f64>() < swap_fraction => {
                        changed = true;
                        syns.choose(rng).expect("non-empty synonym list").clone()
                    }
                    _ => w.to_string(),
                })
                .collect();
            Example {
                label: ex.label,
                text: if changed { words.join(" ") } else { ex.text.clone() },
            }
        })
        .collect()
}

/// Whether `transformed` differs from `original` only by table-listed
/// substitutions, word for word.
pub fn is_sound_substitution(original: &str, transformed: &str, table: &SynonymTable) -> bool {
    if original == transformed {
        return true;
    }
    let a: Vec<&str> = original.split_whitespace().collect();
    let b: Vec<&str> = transformed.split_whitespace().collect();
    a.len() == b.len()
        && a.iter().zip(&b).all(|(o, t)| {
            o == t || table.get(o).is_some_and(|syns| syns.iter().any(|s| s.as_str() == t.to_lowercase()))
        })
}
