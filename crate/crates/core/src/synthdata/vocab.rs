use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Token id shared by the CTC head and the language model.
pub type Symbol = u32;

/// Dense id space: `0` is the CTC blank, `1..=n` are transcript symbols,
/// `n + 1` is end-of-sequence and `n + 2` is padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SymbolVocab {
    pub num_symbols: usize,
}

impl SymbolVocab {
    pub const BLANK: Symbol = 0;

    pub fn new(num_symbols: usize) -> Result<Self> {
        if num_symbols < 2 {
            return Err(Error::invalid_argument(
                "vocabulary needs at least 2 symbols",
            ));
        }
        Ok(Self { num_symbols })
    }

    pub fn blank_id(&self) -> Symbol {
        Self::BLANK
    }

    pub fn eos_id(&self) -> Symbol {
        self.num_symbols as Symbol + 1
    }

    pub fn pad_id(&self) -> Symbol {
        self.num_symbols as Symbol + 2
    }

    /// Blank plus transcript symbols.
    pub fn ctc_classes(&self) -> usize {
        self.num_symbols + 1
    }

    /// Every id the language model knows, including blank, eos and pad.
    pub fn lm_size(&self) -> usize {
        self.num_symbols + 3
    }

    pub fn is_symbol(&self, id: Symbol) -> bool {
        id >= 1 && (id as usize) <= self.num_symbols
    }

    pub fn symbols(&self) -> impl Iterator<Item = Symbol> {
        1..=self.num_symbols as Symbol
    }

    pub fn check_transcript(&self, transcript: &[Symbol]) -> Result<()> {
        match transcript.iter().find(|&&s| !self.is_symbol(s)) {
            Some(bad) => Err(Error::invalid_argument(format!(
                "id {bad} is not a transcript symbol (valid: 1..={})",
                self.num_symbols
            ))),
            None => Ok(()),
        }
    }
}

impl Default for SymbolVocab {
    fn default() -> Self {
        Self { num_symbols: 24 }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_ids_are_distinct() {
        let v = SymbolVocab::default();
        assert_eq!(v.blank_id(), 0);
        assert_eq!(v.eos_id(), 25);
        assert_eq!(v.pad_id(), 26);
        assert_eq!(v.lm_size(), 27);
        assert_eq!(v.ctc_classes(), 25);
        assert!(!v.is_symbol(0) && !v.is_symbol(25) && !v.is_symbol(26));
        assert_eq!(v.symbols().count(), 24);
    }
}
