//! Unified id space over text tokens, speech units and the CTC blank.
//!
//! Layout: text ids `[0, text_size)`, unit ids `[text_size, text_size + unit_size)`,
//! then a single blank id.

use serde::{Deserialize, Serialize};

use crate::error::{OmniError, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const EOS: TokenId = 1;
pub const BOS: TokenId = 2;
pub const IMG: TokenId = 3;
pub const RESERVED_TEXT: u32 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TokenKind {
    Text,
    Unit,
    Blank,
}

impl TokenKind {
    pub fn name(self) -> &'static str {
        match self {
            TokenKind::Text => "text token",
            TokenKind::Unit => "speech unit",
            TokenKind::Blank => "blank",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultimodalVocab {
    text_size: u32,
    unit_size: u32,
}

impl MultimodalVocab {
    pub fn new(text_size: u32, unit_size: u32) -> Result<Self> {
        if text_size < RESERVED_TEXT {
            return Err(OmniError::Config(format!(
                "text vocabulary needs at least {RESERVED_TEXT} ids for reserved tokens, got {text_size}"
            )));
        }
        if unit_size == 0 {
            return Err(OmniError::Config("unit vocabulary must be non-empty".into()));
        }
        text_size
            .checked_add(unit_size)
            .and_then(|s| s.checked_add(1))
            .ok_or_else(|| OmniError::Config("vocabulary size overflows u32".into()))?;
        Ok(MultimodalVocab {
            text_size,
            unit_size,
        })
    }

    pub fn text_size(&self) -> u32 {
        self.text_size
    }

    pub fn unit_size(&self) -> u32 {
        self.unit_size
    }

    pub fn blank_id(&self) -> TokenId {
        self.text_size + self.unit_size
    }

    pub fn total(&self) -> u32 {
        self.text_size + self.unit_size + 1
    }

    pub fn classify(&self, id: TokenId) -> Result<TokenKind> {
        if id < self.text_size {
            Ok(TokenKind::Text)
        } else if id < self.text_size + self.unit_size {
            Ok(TokenKind::Unit)
        } else if id == self.blank_id() {
            Ok(TokenKind::Blank)
        } else {
            Err(OmniError::TokenOutOfRange {
                id,
                total: self.total(),
            })
        }
    }

    pub fn is_text(&self, id: TokenId) -> bool {
        id < self.text_size
    }

    pub fn is_unit(&self, id: TokenId) -> bool {
        id >= self.text_size && id < self.text_size + self.unit_size
    }

    pub fn is_blank(&self, id: TokenId) -> bool {
        id == self.blank_id()
    }

    /// Global id of local unit index `u`.
    pub fn unit_id(&self, u: u32) -> Result<TokenId> {
        if u >= self.unit_size {
            return Err(OmniError::TokenOutOfRange {
                id: u,
                total: self.unit_size,
            });
        }
        Ok(self.text_size + u)
    }

    /// Local unit index of a global unit id.
    pub fn unit_index(&self, id: TokenId) -> Result<u32> {
        self.expect(id, TokenKind::Unit)?;
        Ok(id - self.text_size)
    }

    pub fn expect(&self, id: TokenId, kind: TokenKind) -> Result<()> {
        let found = self.classify(id)?;
        if found != kind {
            return Err(OmniError::TokenKind {
                id,
                expected: kind.name(),
                found: found.name(),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn full_scale_sizes() {
        let v = MultimodalVocab::new(128_000, 4096).unwrap();
        assert_eq!(v.total(), 132_097);
        assert_eq!(v.blank_id(), 132_096);
    }

    #[test]
    fn minimum_and_toy_sizes() {
        assert_eq!(MultimodalVocab::new(4, 1).unwrap().total(), 6);
        assert_eq!(MultimodalVocab::new(64, 32).unwrap().blank_id(), 96);
    }

    #[test]
    fn rejects_degenerate_sizes() {
        assert!(MultimodalVocab::new(3, 10).is_err());
        assert!(MultimodalVocab::new(64, 0).is_err());
    }

    #[test]
    fn classify_boundaries() {
        let v = MultimodalVocab::new(64, 32).unwrap();
        assert_eq!(v.classify(0).unwrap(), TokenKind::Text);
        assert_eq!(v.classify(63).unwrap(), TokenKind::Text);
        assert_eq!(v.classify(64).unwrap(), TokenKind::Unit);
        assert_eq!(v.classify(v.blank_id()).unwrap(), TokenKind::Blank);
        assert!(v.classify(v.total()).is_err());
    }

    proptest! {
        #[test]
        fn classifiers_partition(text in 4u32..300, units in 1u32..300, id in 0u32..700) {
            let v = MultimodalVocab::new(text, units).unwrap();
            let flags = [v.is_text(id), v.is_unit(id), v.is_blank(id)];
            let hits = flags.iter().filter(|&&f| f).count();
            if id < v.total() {
                prop_assert_eq!(hits, 1);
                prop_assert!(v.classify(id).is_ok());
            } else {
                prop_assert_eq!(hits, 0);
                prop_assert!(v.classify(id).is_err());
            }
        }

        #[test]
        fn unit_index_round_trip(text in 4u32..300, units in 1u32..300, u in 0u32..300) {
            let v = MultimodalVocab::new(text, units).unwrap();
            prop_assume!(u < units);
            let id = v.unit_id(u).unwrap();
            prop_assert!(v.is_unit(id));
            prop_assert_eq!(v.unit_index(id).unwrap(), u);
        }
    }
}
