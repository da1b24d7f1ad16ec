//! Byte-level BPE.
//!
//! Regular token ids start with the 256 single-byte tokens (in byte order),
//! followed by merged tokens in merge order. Token strings are shown with
//! the usual printable byte-to-char table, so no token string contains
//! whitespace.
//!
//! Text is pre-split into chunks at every point where whitespace follows a
//! non-whitespace char, so a word carries its leading whitespace. Merges
//! never cross chunk boundaries.
//!
//! # Model file
//!
//! UTF-8, one entry per line:
//!
//! ```text
//! #multisrc-bpe v1
//! lang en
//! lang pt
//! merge Ġt he
//! token !
//! token "
//! ...
//! ```
//!
//! `lang` lines give the tag order, `merge` lines the merges in rank order,
//! and `token` lines every regular token in id order. Loading replays the
//! merges and checks that they rebuild the listed tokens.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use super::TokenSeq;
use crate::model::{ModelError, Vocab};
use crate::synthdata::MultiParallelCorpus;

const HEADER: &str = "#multisrc-bpe v1";
const MIN_PAIR_COUNT: u64 = 2;

fn byte_chars() -> &'static ([char; 256], HashMap<char, u8>) {
    static TABLE: OnceLock<([char; 256], HashMap<char, u8>)> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut chars = ['\0'; 256];
        let printable = |b: u32| (0x21..=0x7e).contains(&b) || (0xa1..=0xac).contains(&b) || (0xae..=0xff).contains(&b);
        let mut next = 256u32;
        for b in 0..256u32 {
            let c = if printable(b) {
                b
            } else {
                next += 1;
                next - 1
            };
            chars[b as usize] = char::from_u32(c).expect("valid scalar");
        }
        let inverse = chars.iter().enumerate().map(|(b, &c)| (c, b as u8)).collect();
        (chars, inverse)
    })
}

fn display(bytes: &[u8]) -> String {
    let (chars, _) = byte_chars();
    bytes.iter().map(|&b| chars[b as usize]).collect()
}

fn undisplay(s: &str) -> Option<Vec<u8>> {
    let (_, inverse) = byte_chars();
    s.chars().map(|c| inverse.get(&c).copied()).collect()
}

/// Splits `text` into chunks; each chunk is any leading whitespace plus a run of non-whitespace.
fn pre_tokenize(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut prev_ws = true;
    for (i, c) in text.char_indices() {
        let ws = c.is_whitespace();
        if ws && !prev_ws {
            out.push(&text[start..i]);
            start = i;
        }
        prev_ws = ws;
    }
    if start < text.len() {
        out.push(&text[start..]);
    }
    out
}

#[derive(Debug, Clone)]
pub struct BpeModel {
    vocab: Vocab,
    merges: Vec<(u32, u32)>,
    /// pair → (rank, merged id)
    ranks: HashMap<(u32, u32), (usize, u32)>,
    /// bytes of every regular id, indexed by `id - first_regular`
    pieces: Vec<Vec<u8>>,
}

impl PartialEq for BpeModel {
    fn eq(&self, other: &Self) -> bool {
        self.vocab == other.vocab && self.merges == other.merges
    }
}

/// Incrementally built merge table shared by training and loading.
struct Builder {
    languages: Vec<String>,
    reserved: HashSet<String>,
    first_regular: u32,
    pieces: Vec<Vec<u8>>,
    piece_ids: HashMap<Vec<u8>, u32>,
    merges: Vec<(u32, u32)>,
    ranks: HashMap<(u32, u32), (usize, u32)>,
}

impl Builder {
    fn new(languages: Vec<String>) -> Result<Self, ModelError> {
        // Validates the language codes.
        let base = Vocab::new(&languages, Vec::new())?;
        let reserved = base.tokens().iter().cloned().collect();
        let first_regular = base.first_regular();
        let pieces: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        let piece_ids = pieces
            .iter()
            .enumerate()
            .map(|(i, p)| (p.clone(), first_regular + i as u32))
            .collect();
        Ok(Self {
            languages,
            reserved,
            first_regular,
            pieces,
            piece_ids,
            merges: Vec::new(),
            ranks: HashMap::new(),
        })
    }

    fn size(&self) -> usize {
        self.first_regular as usize + self.pieces.len()
    }

    fn piece(&self, id: u32) -> &[u8] {
        &self.pieces[(id - self.first_regular) as usize]
    }

    fn merged_bytes(&self, pair: (u32, u32)) -> Vec<u8> {
        let mut b = self.piece(pair.0).to_vec();
        b.extend_from_slice(self.piece(pair.1));
        b
    }

    /// Whether the merged token would collide with a special token's string.
    fn forbidden(&self, pair: (u32, u32)) -> bool {
        self.reserved.contains(&display(&self.merged_bytes(pair)))
    }

    /// Records a merge; returns the merged id and whether it is new.
    fn add_merge(&mut self, pair: (u32, u32)) -> (u32, bool) {
        let bytes = self.merged_bytes(pair);
        let rank = self.merges.len();
        self.merges.push(pair);
        let (id, new) = match self.piece_ids.get(&bytes) {
            Some(&id) => (id, false),
            None => {
                let id = self.first_regular + self.pieces.len() as u32;
                self.piece_ids.insert(bytes.clone(), id);
                self.pieces.push(bytes);
                (id, true)
            }
        };
        self.ranks.entry(pair).or_insert((rank, id));
        (id, new)
    }

    fn finish(self) -> Result<BpeModel, ModelError> {
        let regular = self.pieces.iter().map(|p| display(p)).collect();
        let vocab = Vocab::new(&self.languages, regular)?;
        Ok(BpeModel {
            vocab,
            merges: self.merges,
            ranks: self.ranks,
            pieces: self.pieces,
        })
    }
}

fn merge_in_place(word: &mut Vec<u32>, pair: (u32, u32), id: u32) {
    let mut out = Vec::with_capacity(word.len());
    let mut i = 0;
    while i < word.len() {
        if i + 1 < word.len() && (word[i], word[i + 1]) == pair {
            out.push(id);
            i += 2;
        } else {
            out.push(word[i]);
            i += 1;
        }
    }
    *word = out;
}

/// Repeatedly merges the lowest-ranked adjacent pair until none is left.
fn apply_merges(word: &mut Vec<u32>, ranks: &HashMap<(u32, u32), (usize, u32)>) {
    loop {
        let best = word
            .windows(2)
            .filter_map(|p| ranks.get(&(p[0], p[1])).map(|&(rank, id)| (rank, (p[0], p[1]), id)))
            .min();
        let Some((_, pair, id)) = best else { break };
        merge_in_place(word, pair, id);
    }
}

/// Learns merges over every sentence of every language until the vocabulary
/// (specials and tags included) reaches `vocab_size` or no pair occurs twice.
pub fn train_bpe(corpus: &MultiParallelCorpus, vocab_size: usize) -> Result<BpeModel, ModelError> {
    let mut builder = Builder::new(corpus.languages().to_vec())?;
    if vocab_size <= builder.size() {
        return Err(ModelError::Config(format!(
            "vocab size {vocab_size} cannot hold 256 bytes plus {} special tokens",
            builder.first_regular
        )));
    }

    let mut chunk_counts: HashMap<&str, u64> = HashMap::new();
    for row in 0..corpus.len() {
        for lang in corpus.languages() {
            let text = corpus.sentence(row, lang).expect("row has every language");
            for chunk in pre_tokenize(text) {
                *chunk_counts.entry(chunk).or_default() += 1;
            }
        }
    }
    let mut words: Vec<(Vec<u32>, u64)> = chunk_counts
        .into_iter()
        .map(|(c, n)| (c.bytes().map(|b| builder.first_regular + b as u32).collect(), n))
        .collect();
    words.sort();

    let mut banned: HashSet<(u32, u32)> = HashSet::new();
    while builder.size() < vocab_size {
        let mut counts: HashMap<(u32, u32), u64> = HashMap::new();
        for (w, n) in &words {
            for p in w.windows(2) {
                *counts.entry((p[0], p[1])).or_default() += n;
            }
        }
        let best = counts
            .into_iter()
            .filter(|(p, n)| *n >= MIN_PAIR_COUNT && !banned.contains(p))
            .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)));
        let Some((pair, _)) = best else { break };
        if builder.forbidden(pair) {
            banned.insert(pair);
            continue;
        }
        let (id, _) = builder.add_merge(pair);
        // A merge can expose a pair with a lower rank; re-running the rank
        // loop keeps every word exactly as `encode` would segment it.
        for (w, _) in words.iter_mut() {
            if w.windows(2).any(|p| (p[0], p[1]) == pair) {
                merge_in_place(w, pair, id);
                apply_merges(w, &builder.ranks);
            }
        }
    }
    builder.finish()
}

impl BpeModel {
    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    fn byte_id(&self, b: u8) -> u32 {
        self.vocab.first_regular() + b as u32
    }

    fn encode_chunk(&self, chunk: &str, out: &mut TokenSeq) {
        let mut word: Vec<u32> = chunk.bytes().map(|b| self.byte_id(b)).collect();
        apply_merges(&mut word, &self.ranks);
        for id in word {
            out.push(id);
        }
    }

    /// Tag token for `language` followed by the subword ids of `text`.
    pub fn encode(&self, text: &str, language: &str) -> Result<TokenSeq, ModelError> {
        let mut out = TokenSeq::new();
        out.push(self.vocab.lang_tag(language)?);
        for chunk in pre_tokenize(text) {
            self.encode_chunk(chunk, &mut out);
        }
        Ok(out)
    }

    /// Inverse of [`encode`](Self::encode); specials are dropped and UNK becomes U+FFFD.
    pub fn decode(&self, ids: &[u32]) -> Result<String, ModelError> {
        let first = self.vocab.first_regular();
        let mut bytes = Vec::new();
        for &id in ids {
            if id as usize >= self.vocab.len() {
                return Err(ModelError::Vocab(format!("token id {id} out of range")));
            }
            if id == self.vocab.unk() {
                bytes.extend_from_slice("\u{FFFD}".as_bytes());
            } else if id >= first {
                bytes.extend_from_slice(&self.pieces[(id - first) as usize]);
            }
        }
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from(HEADER);
        s.push('\n');
        for lang in self.vocab.languages() {
            s.push_str(&format!("lang {lang}\n"));
        }
        let first = self.vocab.first_regular();
        let name = |id: u32| display(&self.pieces[(id - first) as usize]);
        for &(a, b) in &self.merges {
            s.push_str(&format!("merge {} {}\n", name(a), name(b)));
        }
        for p in &self.pieces {
            s.push_str(&format!("token {}\n", display(p)));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, ModelError> {
        let bad = |line: usize, msg: &str| ModelError::Format(format!("BPE file line {line}: {msg}"));
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        match lines.next() {
            Some((_, HEADER)) => {}
            _ => return Err(bad(1, "missing header")),
        }
        let mut languages = Vec::new();
        let mut merge_lines = Vec::new();
        let mut token_lines = Vec::new();
        for (n, line) in lines {
            if line.is_empty() {
                continue;
            }
            let (kind, rest) = line.split_once(' ').ok_or_else(|| bad(n, "malformed entry"))?;
            match kind {
                "lang" if merge_lines.is_empty() && token_lines.is_empty() => languages.push(rest.to_string()),
                "merge" if token_lines.is_empty() => merge_lines.push((n, rest)),
                "token" => token_lines.push((n, rest)),
                _ => return Err(bad(n, &format!("unexpected entry {kind:?}"))),
            }
        }
        let mut builder = Builder::new(languages)?;
        for (n, rest) in merge_lines {
            let (a, b) = rest.split_once(' ').ok_or_else(|| bad(n, "merge needs two tokens"))?;
            let lookup = |s: &str| {
                undisplay(s)
                    .and_then(|bytes| builder.piece_ids.get(&bytes).copied())
                    .ok_or_else(|| bad(n, &format!("unknown token {s:?}")))
            };
            let pair = (lookup(a)?, lookup(b)?);
            if builder.forbidden(pair) {
                return Err(bad(n, "merge produces a reserved token"));
            }
            builder.add_merge(pair);
        }
        if token_lines.len() != builder.pieces.len() {
            return Err(ModelError::Format(format!(
                "BPE file lists {} tokens but merges produce {}",
                token_lines.len(),
                builder.pieces.len()
            )));
        }
        for ((n, tok), piece) in token_lines.iter().zip(&builder.pieces) {
            if *tok != display(piece) {
                return Err(bad(*n, &format!("token {tok:?} does not match merges")));
            }
        }
        builder.finish()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        Self::from_text(&fs::read_to_string(path)?)
    }
}
