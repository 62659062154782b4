use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Token inventory.
///
/// Ids are laid out so each output head indexes a contiguous prefix:
///
/// | id        | token        |
/// |-----------|--------------|
/// | 0         | `<blank>`    |
/// | 1..=V     | content      |
/// | V+1       | `<eos>`      |
/// | V+2       | `<sos>`      |
/// | V+3       | `<MASK>`     |
/// | V+4       | `<pad>`      |
///
/// The CTC head covers ids `0..=V`. The decoder head covers ids `1..=V+1`
/// (content plus `<eos>`) at class `id - 1`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
}

pub const BLANK_TOKEN: &str = "<blank>";
pub const EOS_TOKEN: &str = "<eos>";
pub const SOS_TOKEN: &str = "<sos>";
pub const MASK_TOKEN: &str = "<MASK>";
pub const PAD_TOKEN: &str = "<pad>";
const RESERVED: usize = 5;

impl Vocab {
    pub fn new(content: Vec<String>) -> Result<Self> {
        let mut tokens = Vec::with_capacity(content.len() + RESERVED);
        tokens.push(BLANK_TOKEN.to_string());
        tokens.extend(content);
        tokens.extend([EOS_TOKEN, SOS_TOKEN, MASK_TOKEN, PAD_TOKEN].map(String::from));
        let v = Vocab { tokens };
        v.validate()?;
        Ok(v)
    }

    /// `size` content tokens named `a`, `b`, … (or `w0`, `w1`, … past 26).
    pub fn synthetic(size: usize) -> Self {
        let names = (0..size)
            .map(|i| {
                if size <= 26 {
                    ((b'a' + i as u8) as char).to_string()
                } else {
                    format!("w{i}")
                }
            })
            .collect();
        Self::new(names).expect("synthetic names are unique")
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.tokens.len();
        if n < RESERVED + 1 {
            return Err(Error::Config("vocabulary has no content tokens".into()));
        }
        let reserved = [
            (0, BLANK_TOKEN),
            (n - 4, EOS_TOKEN),
            (n - 3, SOS_TOKEN),
            (n - 2, MASK_TOKEN),
            (n - 1, PAD_TOKEN),
        ];
        for (i, name) in reserved {
            if self.tokens[i] != name {
                return Err(Error::Config(format!("expected {name} at id {i}")));
            }
        }
        let mut seen = std::collections::HashSet::new();
        for (i, t) in self.tokens.iter().enumerate() {
            if !seen.insert(t.as_str()) {
                return Err(Error::Config(format!("duplicate token {t:?}")));
            }
            let content = (1..n - 4).contains(&i);
            if content && (t.starts_with('<') && t.ends_with('>') || t == "_" || t.is_empty()) {
                return Err(Error::Config(format!("content token {t:?} looks reserved")));
            }
        }
        Ok(())
    }

    /// Number of content tokens, `|𝒱|`.
    pub fn content_size(&self) -> usize {
        self.tokens.len() - RESERVED
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn blank(&self) -> usize {
        0
    }

    pub fn eos(&self) -> usize {
        self.content_size() + 1
    }

    pub fn sos(&self) -> usize {
        self.content_size() + 2
    }

    pub fn mask(&self) -> usize {
        self.content_size() + 3
    }

    pub fn pad(&self) -> usize {
        self.content_size() + 4
    }

    pub fn is_content(&self, id: usize) -> bool {
        (1..=self.content_size()).contains(&id)
    }

    pub fn content_ids(&self) -> std::ops::RangeInclusive<usize> {
        1..=self.content_size()
    }

    /// Width of the CTC head: content plus `<blank>`.
    pub fn ctc_classes(&self) -> usize {
        self.content_size() + 1
    }

    /// Width of the decoder head: content plus `<eos>`.
    pub fn decoder_classes(&self) -> usize {
        self.content_size() + 1
    }

    pub fn decoder_class(&self, id: usize) -> usize {
        debug_assert!(id >= 1 && id <= self.eos());
        id - 1
    }

    pub fn decoder_token(&self, class: usize) -> usize {
        class + 1
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Renders ids as text; `<MASK>` shows as `_`. Single-character
    /// vocabularies are joined without separators.
    pub fn render(&self, ids: &[usize]) -> String {
        let compact = self.content_ids().all(|i| self.tokens[i].chars().count() == 1);
        let parts: Vec<&str> = ids
            .iter()
            .map(|&i| if i == self.mask() { "_" } else { self.token(i) })
            .collect();
        parts.join(if compact { "" } else { " " })
    }
}
