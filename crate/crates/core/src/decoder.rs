//! Greedy best-path decoding and CTC prefix beam search with word-level
//! n-gram fusion.

use std::cmp::Ordering;
use std::collections::HashMap;

use ndarray::ArrayView2;
use thiserror::Error;

use crate::alphabet::{Alphabet, BLANK};
use crate::ctc::{collapse, CtcInstance};
use crate::logmath::log_add;
use crate::ngram_lm::{NGramModel, SENTENCE_END, SENTENCE_START};
use crate::tag_codec::{BASE_ALPHABET, WORD_SEPARATOR};

#[derive(Debug, Error, PartialEq)]
pub enum DecodeError {
    #[error("beam width must be at least 1")]
    BeamWidth,
    #[error("alpha and beta must be finite")]
    NonFinite,
    #[error("a language model is required exactly when alpha is nonzero")]
    LmMismatch,
    #[error("lattice has {found} columns, alphabet has {expected} symbols")]
    Width { found: usize, expected: usize },
}

/// Symbols that form a word on their own: concept openers, the closer and the star.
pub fn is_standalone(c: char) -> bool {
    c != WORD_SEPARATOR && !c.is_whitespace() && !BASE_ALPHABET.contains(c)
}

/// Splits text into LM tokens: whitespace separates words and every
/// standalone symbol is its own token. Used both for LM training and fusion.
pub fn lm_tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for c in text.chars() {
        if c.is_whitespace() || is_standalone(c) {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            if is_standalone(c) {
                out.push(c.to_string());
            }
        } else {
            word.push(c);
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

/// Per-frame argmax (lowest index wins ties), then collapse.
pub fn greedy_labels(lattice: ArrayView2<f64>) -> Vec<usize> {
    let path: Vec<usize> = lattice
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect();
    collapse(&path, BLANK)
}

pub fn greedy_decode(lattice: ArrayView2<f64>, alphabet: &Alphabet) -> String {
    alphabet.render(&greedy_labels(lattice))
}

#[derive(Debug, Clone)]
pub struct DecodeConfig<'a> {
    pub beam_width: usize,
    pub alpha: f64,
    pub beta: f64,
    pub lm: Option<&'a NGramModel>,
    pub alphabet: &'a Alphabet,
}

impl<'a> DecodeConfig<'a> {
    /// Pure acoustic search.
    pub fn acoustic(beam_width: usize, alphabet: &'a Alphabet) -> Self {
        Self { beam_width, alpha: 0.0, beta: 0.0, lm: None, alphabet }
    }

    pub fn validate(&self) -> Result<(), DecodeError> {
        if self.beam_width < 1 {
            return Err(DecodeError::BeamWidth);
        }
        if !self.alpha.is_finite() || !self.beta.is_finite() {
            return Err(DecodeError::NonFinite);
        }
        if self.lm.is_some() != (self.alpha != 0.0) {
            return Err(DecodeError::LmMismatch);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub labels: Vec<usize>,
    pub text: String,
    /// Natural-log CTC probability of the label sequence (all alignments).
    pub ctc_logprob: f64,
    /// log10 LM score including the end-of-sentence event.
    pub lm_log10: f64,
    pub word_count: usize,
    pub combined: f64,
}

/// Word-level state implied by a prefix.
#[derive(Debug, Clone, Default)]
struct WordState {
    history: Vec<String>,
    lm_log10: f64,
    words: usize,
    partial: String,
}

impl WordState {
    fn complete(&mut self, word: String, lm: Option<&NGramModel>) {
        if let Some(lm) = lm {
            self.lm_log10 += lm.score_word(&self.history, &word);
            self.history.push(word);
            let keep = lm.order().saturating_sub(1);
            if self.history.len() > keep {
                self.history.drain(..self.history.len() - keep);
            }
        }
        self.words += 1;
    }

    fn extend(&self, c: char, lm: Option<&NGramModel>) -> Self {
        let mut next = self.clone();
        if c.is_whitespace() || is_standalone(c) {
            if !next.partial.is_empty() {
                let w = std::mem::take(&mut next.partial);
                next.complete(w, lm);
            }
            if is_standalone(c) {
                next.complete(c.to_string(), lm);
            }
        } else {
            next.partial.push(c);
        }
        next
    }

    /// Scores the trailing partial word and the sentence end.
    fn finish(&self, lm: Option<&NGramModel>) -> Self {
        let mut done = self.clone();
        if !done.partial.is_empty() {
            let w = std::mem::take(&mut done.partial);
            done.complete(w, lm);
        }
        if let Some(lm) = lm {
            done.lm_log10 += lm.score_word(&done.history, SENTENCE_END);
        }
        done
    }
}

struct Beam {
    p_blank: f64,
    p_nonblank: f64,
}

impl Beam {
    fn total(&self) -> f64 {
        log_add(self.p_blank, self.p_nonblank)
    }
}

fn rank(a: &(f64, &Vec<usize>), b: &(f64, &Vec<usize>)) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

/// Prefix beam search. Returns up to `beam_width` hypotheses ranked by
/// combined score `ln p_ctc + alpha * lm_log10 + beta * words`, ties broken
/// by label sequence.
pub fn beam_decode(lattice: ArrayView2<f64>, cfg: &DecodeConfig) -> Result<Vec<Hypothesis>, DecodeError> {
    cfg.validate()?;
    let symbols = lattice.ncols();
    if symbols != cfg.alphabet.len() {
        return Err(DecodeError::Width { found: symbols, expected: cfg.alphabet.len() });
    }
    let lm = cfg.lm;
    let mut states: HashMap<Vec<usize>, WordState> = HashMap::new();
    let initial = WordState {
        history: if lm.is_some() { vec![SENTENCE_START.to_string()] } else { Vec::new() },
        ..Default::default()
    };
    states.insert(Vec::new(), initial);
    let mut beam: Vec<(Vec<usize>, Beam)> = vec![(Vec::new(), Beam { p_blank: 0.0, p_nonblank: f64::NEG_INFINITY })];
    let ninf = f64::NEG_INFINITY;

    for row in lattice.rows() {
        let mut next: HashMap<Vec<usize>, Beam> = HashMap::new();
        let mut add = |prefix: Vec<usize>, blank: f64, nonblank: f64| {
            let e = next.entry(prefix).or_insert(Beam { p_blank: ninf, p_nonblank: ninf });
            e.p_blank = log_add(e.p_blank, blank);
            e.p_nonblank = log_add(e.p_nonblank, nonblank);
        };
        for (prefix, b) in &beam {
            let total = b.total();
            add(prefix.clone(), total + row[BLANK], ninf);
            let last = prefix.last().copied();
            for (c, &p) in row.iter().enumerate().skip(1) {
                if p == ninf {
                    continue;
                }
                let mut extended = prefix.clone();
                extended.push(c);
                if Some(c) == last {
                    add(prefix.clone(), ninf, b.p_nonblank + p);
                    add(extended, ninf, b.p_blank + p);
                } else {
                    add(extended, ninf, total + p);
                }
            }
        }
        let mut scored: Vec<(f64, Vec<usize>, Beam)> = next
            .into_iter()
            .map(|(prefix, b)| {
                if !states.contains_key(&prefix) {
                    let parent = &states[&prefix[..prefix.len() - 1]];
                    let c = cfg.alphabet.symbol(*prefix.last().expect("nonempty")).unwrap_or(WORD_SEPARATOR);
                    let st = parent.extend(c, lm);
                    states.insert(prefix.clone(), st);
                }
                let st = &states[&prefix];
                let score = b.total() + cfg.alpha * st.lm_log10 + cfg.beta * st.words as f64;
                (score, prefix, b)
            })
            .collect();
        scored.sort_by(|a, b| rank(&(a.0, &a.1), &(b.0, &b.1)));
        scored.truncate(cfg.beam_width);
        beam = scored.into_iter().map(|(_, p, b)| (p, b)).collect();
        // drop word states no longer reachable from the beam
        if states.len() > 64 * cfg.beam_width.max(16) {
            let mut keep: HashMap<Vec<usize>, WordState> = HashMap::new();
            for (p, _) in &beam {
                for len in 0..=p.len() {
                    if !keep.contains_key(&p[..len]) {
                        keep.insert(p[..len].to_vec(), states[&p[..len]].clone());
                    }
                }
            }
            states = keep;
        }
    }

    let mut hyps: Vec<Hypothesis> = beam
        .into_iter()
        .map(|(labels, b)| {
            let done = states[&labels].finish(lm);
            // the beam only tracked alignments that survived pruning; rescore with all of them
            let ctc_logprob = CtcInstance::new(lattice.view(), &labels).loss().map_or(b.total(), |l| -l);
            Hypothesis {
                text: cfg.alphabet.render(&labels),
                combined: ctc_logprob + cfg.alpha * done.lm_log10 + cfg.beta * done.words as f64,
                ctc_logprob,
                lm_log10: done.lm_log10,
                word_count: done.words,
                labels,
            }
        })
        .collect();
    hyps.sort_by(|a, b| rank(&(a.combined, &a.labels), &(b.combined, &b.labels)));
    Ok(hyps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn abc() -> Alphabet {
        Alphabet::new(vec!['a', 'b'])
    }

    #[test]
    fn greedy_collapses_repeats() {
        let ln = |p: f64| p.ln();
        // argmax path a a _ b
        let lp = array![
            [ln(0.1), ln(0.8), ln(0.1)],
            [ln(0.1), ln(0.8), ln(0.1)],
            [ln(0.8), ln(0.1), ln(0.1)],
            [ln(0.1), ln(0.1), ln(0.8)]
        ];
        assert_eq!(greedy_decode(lp.view(), &abc()), "ab");
        let blanks = array![[0.0, f64::NEG_INFINITY, f64::NEG_INFINITY]];
        assert_eq!(greedy_decode(blanks.view(), &abc()), "");
    }

    #[test]
    fn greedy_ties_go_to_lowest_index() {
        let lp = array![[0.5f64.ln(), 0.5f64.ln(), f64::NEG_INFINITY]];
        assert!(greedy_labels(lp.view()).is_empty());
    }

    #[test]
    fn config_validation() {
        let a = abc();
        let lp = array![[0.0, f64::NEG_INFINITY, f64::NEG_INFINITY]];
        let mut cfg = DecodeConfig::acoustic(0, &a);
        assert_eq!(beam_decode(lp.view(), &cfg), Err(DecodeError::BeamWidth));
        cfg.beam_width = 2;
        cfg.alpha = 1.0;
        assert_eq!(beam_decode(lp.view(), &cfg), Err(DecodeError::LmMismatch));
    }

    #[test]
    fn tokens_split_standalone_symbols() {
        assert_eq!(lm_tokens("\u{e010} two\u{e000} rooms"), vec!["\u{e010}", "two", "\u{e000}", "rooms"]);
        assert_eq!(lm_tokens("  a  b "), vec!["a", "b"]);
    }

    #[test]
    fn repeated_symbol_needs_blank_between() {
        // two frames, each certain of `a`: only "a" is reachable
        let lp = array![[f64::NEG_INFINITY, 0.0, f64::NEG_INFINITY], [f64::NEG_INFINITY, 0.0, f64::NEG_INFINITY]];
        let hyps = beam_decode(lp.view(), &DecodeConfig::acoustic(8, &abc())).unwrap();
        assert_eq!(hyps[0].text, "a");
        assert!(hyps[0].ctc_logprob.abs() < 1e-12);
    }
}
