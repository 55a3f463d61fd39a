//! Concept-tag codec.
//!
//! A [`TaggedTranscript`] is serialized to the character stream the acoustic
//! model emits. Every concept gets a single reserved opening symbol, all
//! concepts share one closing symbol, and a star symbol stands in for runs of
//! unlabelled words in starred mode:
//!
//! ```text
//! i would like <nb_room two > <room_type double-bed rooms >
//! * <nb_room two > <room_type double-bed rooms >            (starred)
//! ```
//!
//! Decoding accepts arbitrary symbol sequences (model hypotheses are often
//! unbalanced) and repairs them, reporting each repair as a [`RepairEvent`].

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;

use thiserror::Error;

/// Characters words may be spelled with (besides the word separator).
pub const BASE_ALPHABET: &str = "abcdefghijklmnopqrstuvwxyz'-";

pub const WORD_SEPARATOR: char = ' ';

/// First codepoint of the private-use block the default symbol assignment draws from.
const PRIVATE_USE_START: u32 = 0xE000;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("unknown concept `{0}`")]
    UnknownConcept(String),
    #[error("invalid word {0:?}: words must be nonempty and contain no separator or reserved symbol")]
    InvalidWord(String),
    #[error("concept span `{0}` has no words")]
    EmptySpan(String),
    #[error("reserved symbol {0:?} is used twice in the inventory")]
    DuplicateSymbol(char),
    #[error("reserved symbol {0:?} collides with the base alphabet")]
    SymbolInBaseAlphabet(char),
    #[error("duplicate concept name `{0}`")]
    DuplicateConcept(String),
    #[error("inventory line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("inventory io: {0}")]
    Io(#[from] std::io::Error),
}

/// The set of concepts a task annotates, with their reserved symbols.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConceptInventory {
    concepts: Vec<(String, char)>,
    close: char,
    star: char,
    open_lookup: HashMap<char, usize>,
}

impl ConceptInventory {
    pub fn new(concepts: Vec<(String, char)>, close: char, star: char) -> Result<Self, CodecError> {
        let mut seen = HashMap::new();
        let mut names = HashMap::new();
        for &sym in [close, star].iter().chain(concepts.iter().map(|(_, s)| s)) {
            if BASE_ALPHABET.contains(sym) || sym == WORD_SEPARATOR {
                return Err(CodecError::SymbolInBaseAlphabet(sym));
            }
            if seen.insert(sym, ()).is_some() {
                return Err(CodecError::DuplicateSymbol(sym));
            }
        }
        for (name, _) in &concepts {
            if names.insert(name.clone(), ()).is_some() {
                return Err(CodecError::DuplicateConcept(name.clone()));
            }
        }
        let open_lookup = concepts.iter().enumerate().map(|(i, (_, s))| (*s, i)).collect();
        Ok(Self { concepts, close, star, open_lookup })
    }

    /// Assigns symbols from the private-use area: close, star, then one per concept.
    pub fn with_default_symbols<S: AsRef<str>>(names: &[S]) -> Result<Self, CodecError> {
        let sym = |i: u32| char::from_u32(PRIVATE_USE_START + i).expect("private-use codepoint");
        let concepts = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.as_ref().to_string(), sym(16 + i as u32)))
            .collect();
        Self::new(concepts, sym(0), sym(1))
    }

    /// An inventory with no concepts (plain transcription tasks).
    pub fn empty() -> Self {
        Self::with_default_symbols::<&str>(&[]).expect("empty inventory is valid")
    }

    pub fn concepts(&self) -> impl Iterator<Item = (&str, char)> {
        self.concepts.iter().map(|(n, s)| (n.as_str(), *s))
    }

    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }

    pub fn open_symbol(&self, concept: &str) -> Option<char> {
        self.concepts.iter().find(|(n, _)| n == concept).map(|(_, s)| *s)
    }

    pub fn concept_for_symbol(&self, sym: char) -> Option<&str> {
        self.open_lookup.get(&sym).map(|&i| self.concepts[i].0.as_str())
    }

    pub fn close_symbol(&self) -> char {
        self.close
    }

    pub fn star_symbol(&self) -> char {
        self.star
    }

    pub fn is_reserved(&self, c: char) -> bool {
        c == self.close || c == self.star || self.open_lookup.contains_key(&c)
    }

    /// All reserved symbols: concept openers in inventory order, then close, then star.
    pub fn reserved_symbols(&self) -> Vec<char> {
        let mut out: Vec<char> = self.concepts.iter().map(|(_, s)| *s).collect();
        out.push(self.close);
        out.push(self.star);
        out
    }

    /// Restricts the inventory to the named concepts, keeping their symbols.
    pub fn subset<S: AsRef<str>>(&self, names: &[S]) -> Result<Self, CodecError> {
        let mut concepts = Vec::with_capacity(names.len());
        for n in names {
            let sym = self
                .open_symbol(n.as_ref())
                .ok_or_else(|| CodecError::UnknownConcept(n.as_ref().to_string()))?;
            concepts.push((n.as_ref().to_string(), sym));
        }
        Self::new(concepts, self.close, self.star)
    }

    /// Parses the `name<TAB>symbol` inventory format.
    pub fn parse(text: &str) -> Result<Self, CodecError> {
        let mut concepts = Vec::new();
        let (mut close, mut star) = (None, None);
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            if raw.trim().is_empty() {
                continue;
            }
            let (name, sym) = raw.split_once('\t').ok_or_else(|| CodecError::Parse {
                line,
                message: "expected `name<TAB>symbol`".into(),
            })?;
            let mut chars = sym.chars();
            let symbol = match (chars.next(), chars.next()) {
                (Some(c), None) => c,
                _ => {
                    return Err(CodecError::Parse {
                        line,
                        message: format!("symbol field {sym:?} must be exactly one character"),
                    })
                }
            };
            match name {
                "__close__" => close = Some(symbol),
                "__star__" => star = Some(symbol),
                "" => {
                    return Err(CodecError::Parse { line, message: "empty concept name".into() })
                }
                n => concepts.push((n.to_string(), symbol)),
            }
        }
        let missing = |what: &str| CodecError::Parse {
            line: text.lines().count(),
            message: format!("missing `{what}` line"),
        };
        let close = close.ok_or_else(|| missing("__close__"))?;
        let star = star.ok_or_else(|| missing("__star__"))?;
        Self::new(concepts, close, star)
    }

    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for (n, s) in &self.concepts {
            out.push_str(&format!("{n}\t{s}\n"));
        }
        out.push_str(&format!("__close__\t{}\n", self.close));
        out.push_str(&format!("__star__\t{}\n", self.star));
        out
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CodecError> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CodecError> {
        fs::write(path, self.to_file_string())?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Item {
    Word(String),
    Concept { name: String, words: Vec<String> },
}

/// A word sequence in which some runs of words are labelled with a concept.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct TaggedTranscript {
    pub items: Vec<Item>,
}

impl TaggedTranscript {
    pub fn new(items: Vec<Item>) -> Self {
        Self { items }
    }

    /// Builds a transcript with no concepts from whitespace-separated text.
    pub fn from_words(text: &str) -> Self {
        Self {
            items: text.split_whitespace().map(|w| Item::Word(w.to_string())).collect(),
        }
    }

    /// The spoken words, with concept boundaries removed.
    pub fn words(&self) -> Vec<&str> {
        let mut out = Vec::new();
        for item in &self.items {
            match item {
                Item::Word(w) => out.push(w.as_str()),
                Item::Concept { words, .. } => out.extend(words.iter().map(String::as_str)),
            }
        }
        out
    }

    pub fn plain_text(&self) -> String {
        self.words().join(" ")
    }

    pub fn concept_names(&self) -> Vec<&str> {
        self.items
            .iter()
            .filter_map(|i| match i {
                Item::Concept { name, .. } => Some(name.as_str()),
                Item::Word(_) => None,
            })
            .collect()
    }

    /// Replaces every maximal run of unlabelled words with a single star word.
    pub fn starred(&self, inv: &ConceptInventory) -> Self {
        let star = inv.star_symbol().to_string();
        let mut items = Vec::with_capacity(self.items.len());
        for item in &self.items {
            match item {
                Item::Word(_) => {
                    if !matches!(items.last(), Some(Item::Word(w)) if *w == star) {
                        items.push(Item::Word(star.clone()));
                    }
                }
                span => items.push(span.clone()),
            }
        }
        Self { items }
    }

    /// Checks the transcript against the inventory.
    pub fn validate(&self, inv: &ConceptInventory) -> Result<(), CodecError> {
        let check_word = |w: &String| {
            let reserved = w.chars().any(|c| c.is_whitespace() || inv.is_reserved(c));
            // a lone star is how starred transcripts carry collapsed runs
            let is_star = w.chars().eq(std::iter::once(inv.star_symbol()));
            if w.is_empty() || (reserved && !is_star) {
                Err(CodecError::InvalidWord(w.clone()))
            } else {
                Ok(())
            }
        };
        for item in &self.items {
            match item {
                Item::Word(w) => check_word(w)?,
                Item::Concept { name, words } => {
                    if inv.open_symbol(name).is_none() {
                        return Err(CodecError::UnknownConcept(name.clone()));
                    }
                    if words.is_empty() {
                        return Err(CodecError::EmptySpan(name.clone()));
                    }
                    for w in words {
                        if w.chars().any(|c| c.is_whitespace() || inv.is_reserved(c)) || w.is_empty() {
                            return Err(CodecError::InvalidWord(w.clone()));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

impl fmt::Display for TaggedTranscript {
    /// Human-readable rendering with `<name ... >` brackets.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for item in &self.items {
            if !first {
                f.write_str(" ")?;
            }
            first = false;
            match item {
                Item::Word(w) => f.write_str(w)?,
                Item::Concept { name, words } => write!(f, "<{name} {} >", words.join(" "))?,
            }
        }
        Ok(())
    }
}

/// Serializes a transcript to the model's symbol stream.
pub fn encode(t: &TaggedTranscript, inv: &ConceptInventory, starred: bool) -> Result<String, CodecError> {
    t.validate(inv)?;
    let source;
    let t = if starred {
        source = t.starred(inv);
        &source
    } else {
        t
    };
    let mut out = String::new();
    for item in &t.items {
        if !out.is_empty() {
            out.push(WORD_SEPARATOR);
        }
        match item {
            Item::Word(w) => out.push_str(w),
            Item::Concept { name, words } => {
                let open = inv
                    .open_symbol(name)
                    .ok_or_else(|| CodecError::UnknownConcept(name.clone()))?;
                out.push(open);
                for w in words {
                    out.push(WORD_SEPARATOR);
                    out.push_str(w);
                }
                out.push(WORD_SEPARATOR);
                out.push(inv.close_symbol());
            }
        }
    }
    Ok(out)
}

/// A fix applied while decoding a malformed symbol stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RepairEvent {
    /// An opening symbol arrived while a span was open; the open span was closed first.
    ImplicitClose { position: usize },
    /// A closing symbol arrived with no open span and was dropped.
    OrphanClose { position: usize },
    /// The stream ended inside a span, which was closed at the end.
    AutoCloseAtEnd,
    /// A span was closed before it received any word; it is kept with an empty value.
    EmptySpan { position: usize },
}

/// Parses a symbol stream back into a transcript, repairing malformed input.
///
/// `position` fields of the repair events are character offsets into `chars`.
pub fn decode(chars: &str, inv: &ConceptInventory) -> (TaggedTranscript, Vec<RepairEvent>) {
    struct Open {
        name: String,
        words: Vec<String>,
    }
    let mut items = Vec::new();
    let mut repairs = Vec::new();
    let mut open: Option<Open> = None;
    let mut word = String::new();

    fn flush(word: &mut String, open: &mut Option<Open>, items: &mut Vec<Item>) {
        if word.is_empty() {
            return;
        }
        let w = std::mem::take(word);
        match open {
            Some(span) => span.words.push(w),
            None => items.push(Item::Word(w)),
        }
    }
    fn close(span: Open, at: usize, items: &mut Vec<Item>, repairs: &mut Vec<RepairEvent>) {
        if span.words.is_empty() {
            repairs.push(RepairEvent::EmptySpan { position: at });
        }
        items.push(Item::Concept { name: span.name, words: span.words });
    }

    for (pos, c) in chars.chars().enumerate() {
        if c.is_whitespace() {
            flush(&mut word, &mut open, &mut items);
        } else if let Some(name) = inv.concept_for_symbol(c) {
            flush(&mut word, &mut open, &mut items);
            if let Some(span) = open.take() {
                repairs.push(RepairEvent::ImplicitClose { position: pos });
                close(span, pos, &mut items, &mut repairs);
            }
            open = Some(Open { name: name.to_string(), words: Vec::new() });
        } else if c == inv.close_symbol() {
            flush(&mut word, &mut open, &mut items);
            match open.take() {
                Some(span) => close(span, pos, &mut items, &mut repairs),
                None => repairs.push(RepairEvent::OrphanClose { position: pos }),
            }
        } else if c == inv.star_symbol() {
            flush(&mut word, &mut open, &mut items);
            word.push(c);
            flush(&mut word, &mut open, &mut items);
        } else {
            word.push(c);
        }
    }
    flush(&mut word, &mut open, &mut items);
    if let Some(span) = open.take() {
        repairs.push(RepairEvent::AutoCloseAtEnd);
        close(span, chars.chars().count(), &mut items, &mut repairs);
    }
    (TaggedTranscript { items }, repairs)
}

/// A concept together with the words that instantiate it.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ConceptValuePair {
    pub concept: String,
    pub value: String,
}

pub fn extract_pairs(t: &TaggedTranscript) -> Vec<ConceptValuePair> {
    t.items
        .iter()
        .filter_map(|item| match item {
            Item::Concept { name, words } => Some(ConceptValuePair {
                concept: name.clone(),
                value: words.join(" "),
            }),
            Item::Word(_) => None,
        })
        .collect()
}
