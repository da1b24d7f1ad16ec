use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::ModelError;

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const UNK: &str = "<unk>";

/// Rendered form of the tag token for a language code.
pub fn lang_tag_token(code: &str) -> String {
    format!("<2{code}>")
}

/// Shared multilingual vocabulary.
///
/// Layout is fixed: `PAD=0, BOS=1, EOS=2, UNK=3`, then one tag token per
/// language in the given order, then the regular tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabRepr", into = "VocabRepr")]
pub struct Vocab {
    tokens: Vec<String>,
    languages: Vec<String>,
    index: HashMap<String, u32>,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    languages: Vec<String>,
    regular: Vec<String>,
}

impl TryFrom<VocabRepr> for Vocab {
    type Error = ModelError;

    fn try_from(r: VocabRepr) -> Result<Self, Self::Error> {
        Vocab::new(&r.languages, r.regular)
    }
}

impl From<Vocab> for VocabRepr {
    fn from(v: Vocab) -> Self {
        let first = v.first_regular() as usize;
        VocabRepr {
            regular: v.tokens[first..].to_vec(),
            languages: v.languages,
        }
    }
}

impl Vocab {
    pub fn new<S: AsRef<str>>(languages: &[S], regular: Vec<String>) -> Result<Self, ModelError> {
        let languages: Vec<String> = languages.iter().map(|s| s.as_ref().to_string()).collect();
        let mut tokens = vec![PAD.to_string(), BOS.to_string(), EOS.to_string(), UNK.to_string()];
        for code in &languages {
            if code.is_empty() || code.chars().any(char::is_whitespace) {
                return Err(ModelError::Vocab(format!("invalid language code {code:?}")));
            }
            tokens.push(lang_tag_token(code));
        }
        tokens.extend(regular);
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(ModelError::Vocab(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self {
            tokens,
            languages,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn pad(&self) -> u32 {
        0
    }

    pub fn bos(&self) -> u32 {
        1
    }

    pub fn eos(&self) -> u32 {
        2
    }

    pub fn unk(&self) -> u32 {
        3
    }

    pub fn languages(&self) -> &[String] {
        &self.languages
    }

    /// Id of the first non-special token.
    pub fn first_regular(&self) -> u32 {
        4 + self.languages.len() as u32
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn lang_tag(&self, code: &str) -> Result<u32, ModelError> {
        self.languages
            .iter()
            .position(|l| l == code)
            .map(|i| 4 + i as u32)
            .ok_or_else(|| ModelError::Vocab(format!("no tag token for language {code:?}")))
    }

    pub fn tag_language(&self, id: u32) -> Option<&str> {
        if self.is_lang_tag(id) {
            Some(&self.languages[(id - 4) as usize])
        } else {
            None
        }
    }

    pub fn is_lang_tag(&self, id: u32) -> bool {
        id >= 4 && id < self.first_regular()
    }

    pub fn is_special(&self, id: u32) -> bool {
        id < self.first_regular()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}
