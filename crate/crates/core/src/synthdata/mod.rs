//! Multi-parallel corpora: the in-memory type, its TSV file format, and the
//! synthetic cipher-language generator.
//!
//! # Corpus file
//!
//! UTF-8 TSV. The first line holds the language codes; every later line has
//! exactly one sentence per column. Inside a cell, `\t`, `\n`, `\r` and `\\`
//! stand for tab, newline, carriage return and backslash.

mod cipher;

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use thiserror::Error;

pub use cipher::{generate, CipherLanguage, CipherSpec, NoiseSpec, SyntheticCorpus, WordOrder};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("config error: {0}")]
    Config(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Sentences aligned across languages: `rows[r][k]` is row `r` in `languages[k]`.
///
/// Equality ignores `name`, which is metadata and not stored in the file.
#[derive(Debug, Clone)]
pub struct MultiParallelCorpus {
    name: String,
    languages: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl PartialEq for MultiParallelCorpus {
    fn eq(&self, other: &Self) -> bool {
        self.languages == other.languages && self.rows == other.rows
    }
}

fn check_languages(languages: &[String]) -> Result<(), String> {
    if languages.is_empty() {
        return Err("no languages".into());
    }
    let mut seen = HashSet::new();
    for code in languages {
        if code.is_empty() || code.chars().any(char::is_whitespace) {
            return Err(format!("invalid language code {code:?}"));
        }
        if !seen.insert(code) {
            return Err(format!("duplicate language {code:?}"));
        }
    }
    Ok(())
}

impl MultiParallelCorpus {
    pub fn new(name: impl Into<String>, languages: Vec<String>, rows: Vec<Vec<String>>) -> Result<Self, DataError> {
        check_languages(&languages).map_err(DataError::Config)?;
        if rows.is_empty() {
            return Err(DataError::Config("corpus has no rows".into()));
        }
        for (i, row) in rows.iter().enumerate() {
            if row.len() != languages.len() {
                return Err(DataError::Config(format!(
                    "row {} has {} sentences for {} languages",
                    i + 1,
                    row.len(),
                    languages.len()
                )));
            }
            if let Some(k) = row.iter().position(String::is_empty) {
                return Err(DataError::Config(format!("row {} has an empty {} sentence", i + 1, languages[k])));
            }
        }
        Ok(Self {
            name: name.into(),
            languages,
            rows,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn languages(&self) -> &[String] {
        &self.languages
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn has_language(&self, code: &str) -> bool {
        self.language_index(code).is_some()
    }

    pub fn language_index(&self, code: &str) -> Option<usize> {
        self.languages.iter().position(|l| l == code)
    }

    pub fn sentence(&self, row: usize, code: &str) -> Option<&str> {
        let k = self.language_index(code)?;
        self.rows.get(row).map(|r| r[k].as_str())
    }

    /// All sentences of one language, in row order.
    pub fn column(&self, code: &str) -> Option<Vec<&str>> {
        let k = self.language_index(code)?;
        Some(self.rows.iter().map(|r| r[k].as_str()).collect())
    }

    pub fn rows(&self) -> &[Vec<String>] {
        &self.rows
    }

    /// A corpus restricted to the given row range.
    pub fn slice(&self, rows: std::ops::Range<usize>) -> Result<Self, DataError> {
        let picked = self
            .rows
            .get(rows.clone())
            .ok_or_else(|| DataError::Config(format!("row range {rows:?} out of bounds for {} rows", self.len())))?;
        Self::new(self.name.clone(), self.languages.clone(), picked.to_vec())
    }
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

fn unescape(s: &str) -> Result<String, String> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('t') => out.push('\t'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            Some(other) => return Err(format!("unknown escape \\{other}")),
            None => return Err("dangling backslash".into()),
        }
    }
    Ok(out)
}

pub fn corpus_to_tsv(corpus: &MultiParallelCorpus) -> String {
    let mut out = corpus.languages.join("\t");
    out.push('\n');
    for row in &corpus.rows {
        let cells: Vec<String> = row.iter().map(|s| escape(s)).collect();
        out.push_str(&cells.join("\t"));
        out.push('\n');
    }
    out
}

/// Parses corpus TSV text. Row numbers in errors count data rows from 1.
pub fn corpus_from_tsv(name: &str, text: &str) -> Result<MultiParallelCorpus, DataError> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| DataError::Format("empty corpus file".into()))?;
    let languages: Vec<String> = header.split('\t').map(|s| s.trim().to_string()).collect();
    check_languages(&languages).map_err(|e| DataError::Format(format!("bad header: {e}")))?;
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let row_no = i + 1;
        let cells: Vec<&str> = line.split('\t').collect();
        if cells.len() != languages.len() {
            return Err(DataError::Format(format!(
                "row {row_no}: expected {} cells, found {}",
                languages.len(),
                cells.len()
            )));
        }
        let mut row = Vec::with_capacity(cells.len());
        for (cell, lang) in cells.iter().zip(&languages) {
            let s = unescape(cell).map_err(|e| DataError::Format(format!("row {row_no}: {e}")))?;
            if s.is_empty() {
                return Err(DataError::Format(format!("row {row_no}: missing {lang} sentence")));
            }
            row.push(s);
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(DataError::Format("corpus file has no rows".into()));
    }
    Ok(MultiParallelCorpus {
        name: name.to_string(),
        languages,
        rows,
    })
}

/// Loads a corpus file; the corpus is named after the file stem.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<MultiParallelCorpus, DataError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    corpus_from_tsv(&name, &text)
}

pub fn save_corpus(corpus: &MultiParallelCorpus, path: impl AsRef<Path>) -> Result<(), DataError> {
    fs::write(path, corpus_to_tsv(corpus))?;
    Ok(())
}
