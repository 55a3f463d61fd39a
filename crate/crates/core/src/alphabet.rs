//! Output symbol tables. Index 0 is always the CTC blank.

use std::collections::HashMap;

use sha2::{Digest, Sha256};

use crate::tag_codec::{ConceptInventory, BASE_ALPHABET, WORD_SEPARATOR};

pub const BLANK: usize = 0;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Alphabet {
    /// Non-blank symbols; symbol `i` of the model output is `symbols[i - 1]`.
    symbols: Vec<char>,
    lookup: HashMap<char, usize>,
}

impl Alphabet {
    pub fn new(symbols: Vec<char>) -> Self {
        let lookup = symbols.iter().enumerate().map(|(i, &c)| (c, i + 1)).collect();
        Self { symbols, lookup }
    }

    /// Separator, base characters, then the inventory's reserved symbols.
    pub fn for_inventory(inv: &ConceptInventory) -> Self {
        let mut symbols = vec![WORD_SEPARATOR];
        symbols.extend(BASE_ALPHABET.chars());
        if !inv.is_empty() {
            symbols.extend(inv.reserved_symbols());
        }
        Self::new(symbols)
    }

    /// Size including the blank.
    pub fn len(&self) -> usize {
        self.symbols.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn symbol(&self, index: usize) -> Option<char> {
        index.checked_sub(1).and_then(|i| self.symbols.get(i).copied())
    }

    pub fn index_of(&self, c: char) -> Option<usize> {
        self.lookup.get(&c).copied()
    }

    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    /// Maps text to label indices; `None` if any character is outside the alphabet.
    pub fn encode(&self, text: &str) -> Option<Vec<usize>> {
        text.chars().map(|c| self.index_of(c)).collect()
    }

    /// Renders label indices, skipping blanks and out-of-range indices.
    pub fn render(&self, labels: &[usize]) -> String {
        labels.iter().filter_map(|&l| self.symbol(l)).collect()
    }

    /// Stable identifier derived from the symbol list.
    pub fn id(&self) -> String {
        let mut h = Sha256::new();
        for c in &self.symbols {
            h.update((*c as u32).to_le_bytes());
        }
        let digest = h.finalize();
        let hex: String = digest.iter().take(8).map(|b| format!("{b:02x}")).collect();
        format!("a{}-{hex}", self.len())
    }
}
