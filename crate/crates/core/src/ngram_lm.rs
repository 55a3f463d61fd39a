//! Word-level back-off n-gram language model with Witten-Bell smoothing.
//!
//! Estimates are interpolated Witten-Bell,
//!
//! ```text
//! P(w | h) = (c(h, w) + N1+(h .) * P(w | h')) / (c(h) + N1+(h .))
//! ```
//!
//! bottoming out in a uniform distribution over the predictable vocabulary.
//! The interpolated estimates are stored in back-off form (seen n-grams carry
//! their probability, histories carry `N1+(h .) / (c(h) + N1+(h .))`), which
//! is exactly what the ARPA format expresses. All stored values are log10.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use thiserror::Error;

pub const SENTENCE_START: &str = "<s>";
pub const SENTENCE_END: &str = "</s>";
pub const UNKNOWN: &str = "<unk>";

/// log10 probability written for `<s>`, which is never predicted.
const NEVER: f64 = -99.0;

#[derive(Debug, Error)]
pub enum LmError {
    #[error("cannot train on an empty corpus")]
    EmptyCorpus,
    #[error("n-gram order must be at least 1")]
    ZeroOrder,
    #[error("ARPA line {line}: {message}")]
    Arpa { line: usize, message: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Entry {
    log_prob: f64,
    /// log10 back-off weight; 0 (weight 1) when the n-gram is never a history.
    backoff: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NGramModel {
    order: usize,
    vocab: Vec<String>,
    ids: HashMap<String, u32>,
    /// `grams[k - 1]` holds the stored k-grams.
    grams: Vec<HashMap<Vec<u32>, Entry>>,
}

impl NGramModel {
    /// Trains on tokenized sentences. Sentence boundaries are added here.
    pub fn train<S: AsRef<str>>(corpus: &[Vec<S>], order: usize) -> Result<Self, LmError> {
        if order == 0 {
            return Err(LmError::ZeroOrder);
        }
        if corpus.is_empty() {
            return Err(LmError::EmptyCorpus);
        }
        let mut words: Vec<String> = corpus
            .iter()
            .flatten()
            .map(|w| w.as_ref().to_string())
            .filter(|w| w != SENTENCE_START && w != SENTENCE_END && w != UNKNOWN)
            .collect();
        words.sort();
        words.dedup();
        let mut vocab = vec![SENTENCE_START.to_string(), SENTENCE_END.to_string(), UNKNOWN.to_string()];
        vocab.extend(words);
        let ids: HashMap<String, u32> = vocab.iter().enumerate().map(|(i, w)| (w.clone(), i as u32)).collect();
        let start = ids[SENTENCE_START];
        let end = ids[SENTENCE_END];

        // counts[k - 1]: k-gram -> count, over windows that predict a real token
        let mut counts: Vec<BTreeMap<Vec<u32>, u64>> = vec![BTreeMap::new(); order];
        for sentence in corpus {
            let mut tokens = Vec::with_capacity(sentence.len() + 2);
            tokens.push(start);
            tokens.extend(sentence.iter().map(|w| ids.get(w.as_ref()).copied().unwrap_or(ids[UNKNOWN])));
            tokens.push(end);
            for i in 1..tokens.len() {
                for k in 1..=order.min(i + 1) {
                    *counts[k - 1].entry(tokens[i + 1 - k..=i].to_vec()).or_insert(0) += 1;
                }
            }
        }

        let mut model = Self { order, vocab, ids, grams: vec![HashMap::new(); order] };

        // unigrams, interpolated with the uniform distribution
        let predictable = (model.vocab.len() - 1) as f64;
        let total: u64 = counts[0].values().sum();
        let distinct = counts[0].len() as f64;
        for id in 0..model.vocab.len() as u32 {
            let log_prob = if id == start {
                NEVER
            } else {
                let c = counts[0].get(&vec![id]).copied().unwrap_or(0) as f64;
                ((c + distinct / predictable) / (total as f64 + distinct)).log10()
            };
            model.grams[0].insert(vec![id], Entry { log_prob, backoff: 0.0 });
        }

        for k in 2..=order {
            // per-history totals and distinct followers
            let mut history_stats: BTreeMap<&[u32], (u64, u64)> = BTreeMap::new();
            for (gram, &c) in &counts[k - 1] {
                let s = history_stats.entry(&gram[..k - 1]).or_insert((0, 0));
                s.0 += c;
                s.1 += 1;
            }
            let mut level = HashMap::with_capacity(counts[k - 1].len());
            for (gram, &c) in &counts[k - 1] {
                let (total, distinct) = history_stats[&gram[..k - 1]];
                let lower = 10f64.powf(model.log_prob(&gram[1..k - 1], gram[k - 1]));
                let p = (c as f64 + distinct as f64 * lower) / (total + distinct) as f64;
                level.insert(gram.clone(), Entry { log_prob: p.log10(), backoff: 0.0 });
            }
            for (history, (total, distinct)) in history_stats {
                let bow = (distinct as f64 / (total + distinct) as f64).log10();
                model.grams[k - 2]
                    .get_mut(history)
                    .expect("every history is a stored lower-order n-gram")
                    .backoff = bow;
            }
            model.grams[k - 1] = level;
        }
        Ok(model)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    /// Words that can be predicted: the vocabulary minus `<s>`.
    pub fn predictable_vocab(&self) -> impl Iterator<Item = &str> {
        self.vocab.iter().map(String::as_str).filter(|w| *w != SENTENCE_START)
    }

    fn id(&self, word: &str) -> u32 {
        self.ids.get(word).copied().unwrap_or_else(|| self.ids[UNKNOWN])
    }

    fn log_prob(&self, context: &[u32], word: u32) -> f64 {
        let context = &context[context.len().saturating_sub(self.order - 1)..];
        let mut gram = context.to_vec();
        gram.push(word);
        if let Some(e) = self.grams[context.len()].get(&gram) {
            return e.log_prob;
        }
        if context.is_empty() {
            return NEVER;
        }
        let bow = self.grams[context.len() - 1].get(context).map_or(0.0, |e| e.backoff);
        bow + self.log_prob(&context[1..], word)
    }

    /// log10 P(word | history). Unseen words score as `<unk>`; only the last
    /// `order - 1` history tokens are used.
    pub fn score_word<S: AsRef<str>>(&self, history: &[S], word: &str) -> f64 {
        let context: Vec<u32> = history.iter().map(|w| self.id(w.as_ref())).collect();
        self.log_prob(&context, self.id(word))
    }

    /// log10 probability of a sentence, including the end-of-sentence event.
    pub fn score_sentence<S: AsRef<str>>(&self, sentence: &[S]) -> f64 {
        let mut context = vec![self.ids[SENTENCE_START]];
        let mut total = 0.0;
        for w in sentence {
            let id = self.id(w.as_ref());
            total += self.log_prob(&context, id);
            context.push(id);
        }
        total + self.log_prob(&context, self.ids[SENTENCE_END])
    }

    /// `10^(-mean log10 prob)` over all tokens including each `</s>`.
    pub fn perplexity<S: AsRef<str>>(&self, corpus: &[Vec<S>]) -> f64 {
        let total: f64 = corpus.iter().map(|s| self.score_sentence(s)).sum();
        let tokens: usize = corpus.iter().map(|s| s.len() + 1).sum();
        10f64.powf(-total / tokens.max(1) as f64)
    }

    /// Every stored history (n-gram with a back-off weight), as token strings.
    pub fn histories(&self) -> Vec<Vec<String>> {
        let mut out: Vec<Vec<String>> = self.grams[..self.order - 1]
            .iter()
            .flat_map(|level| level.iter())
            .filter(|(_, e)| e.backoff != 0.0)
            .map(|(g, _)| g.iter().map(|&i| self.vocab[i as usize].clone()).collect())
            .collect();
        out.sort();
        out
    }

    /// Number of stored n-grams per order.
    pub fn counts(&self) -> Vec<usize> {
        self.grams.iter().map(HashMap::len).collect()
    }

    pub fn to_arpa(&self) -> String {
        let mut out = String::from("\\data\\\n");
        for (k, level) in self.grams.iter().enumerate() {
            let _ = writeln!(out, "ngram {}={}", k + 1, level.len());
        }
        for (k, level) in self.grams.iter().enumerate() {
            let _ = write!(out, "\n\\{}-grams:\n", k + 1);
            let mut rows: Vec<(Vec<&str>, &Entry)> = level
                .iter()
                .map(|(g, e)| (g.iter().map(|&i| self.vocab[i as usize].as_str()).collect(), e))
                .collect();
            rows.sort_by(|a, b| a.0.cmp(&b.0));
            for (words, e) in rows {
                let _ = write!(out, "{}\t{}", e.log_prob, words.join(" "));
                if k + 1 < self.order && e.backoff != 0.0 {
                    let _ = write!(out, "\t{}", e.backoff);
                }
                out.push('\n');
            }
        }
        out.push_str("\n\\end\\\n");
        out
    }

    pub fn from_arpa(text: &str) -> Result<Self, LmError> {
        let err = |line: usize, message: String| LmError::Arpa { line, message };
        let mut declared: Vec<usize> = Vec::new();
        let mut grams: Vec<Vec<(Vec<String>, Entry)>> = Vec::new();
        let mut section: Option<usize> = None;
        let mut seen_data = false;
        let mut ended = false;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let l = raw.trim();
            if l.is_empty() {
                continue;
            }
            if l == "\\data\\" {
                seen_data = true;
                continue;
            }
            if l == "\\end\\" {
                ended = true;
                break;
            }
            if let Some(rest) = l.strip_prefix("ngram ") {
                let (n, c) = rest
                    .split_once('=')
                    .ok_or_else(|| err(line, format!("malformed count line {l:?}")))?;
                let n: usize = n.trim().parse().map_err(|_| err(line, "bad order".into()))?;
                let c: usize = c.trim().parse().map_err(|_| err(line, "bad count".into()))?;
                if n != declared.len() + 1 {
                    return Err(err(line, format!("expected order {} next", declared.len() + 1)));
                }
                declared.push(c);
                continue;
            }
            if let Some(rest) = l.strip_prefix('\\').and_then(|r| r.strip_suffix("-grams:")) {
                let n: usize = rest.parse().map_err(|_| err(line, format!("bad section {l:?}")))?;
                if n == 0 || n > declared.len() {
                    return Err(err(line, format!("section {n} not declared")));
                }
                grams.resize(declared.len(), Vec::new());
                section = Some(n);
                continue;
            }
            let n = section.ok_or_else(|| err(line, "n-gram outside a section".into()))?;
            let fields: Vec<&str> = l.split_whitespace().collect();
            if fields.len() != n + 1 && fields.len() != n + 2 {
                return Err(err(line, format!("expected {} or {} fields", n + 1, n + 2)));
            }
            let parse = |s: &str| s.parse::<f64>().map_err(|_| err(line, format!("bad number {s:?}")));
            let log_prob = parse(fields[0])?;
            let backoff = if fields.len() == n + 2 { parse(fields[n + 1])? } else { 0.0 };
            let words = fields[1..=n].iter().map(|s| s.to_string()).collect();
            grams[n - 1].push((words, Entry { log_prob, backoff }));
        }
        if !seen_data || !ended {
            return Err(err(text.lines().count(), "missing \\data\\ or \\end\\ marker".into()));
        }
        if declared.is_empty() {
            return Err(err(1, "no n-gram counts declared".into()));
        }
        for (k, (level, &count)) in grams.iter().zip(&declared).enumerate() {
            if level.len() != count {
                return Err(err(0, format!("{}-grams: declared {count}, found {}", k + 1, level.len())));
            }
        }
        let mut vocab: Vec<String> = grams[0].iter().map(|(w, _)| w[0].clone()).collect();
        for special in [SENTENCE_START, SENTENCE_END, UNKNOWN] {
            if !vocab.iter().any(|w| w == special) {
                return Err(err(0, format!("vocabulary lacks {special}")));
            }
        }
        vocab.sort();
        let ids: HashMap<String, u32> = vocab.iter().enumerate().map(|(i, w)| (w.clone(), i as u32)).collect();
        let mut levels = Vec::with_capacity(grams.len());
        for level in grams {
            let mut map = HashMap::with_capacity(level.len());
            for (words, e) in level {
                let key = words
                    .iter()
                    .map(|w| ids.get(w).copied().ok_or_else(|| err(0, format!("word {w:?} has no unigram"))))
                    .collect::<Result<Vec<u32>, _>>()?;
                map.insert(key, e);
            }
            levels.push(map);
        }
        Ok(Self { order: levels.len(), vocab, ids, grams: levels })
    }

    pub fn save_arpa(&self, path: impl AsRef<Path>) -> Result<(), LmError> {
        fs::write(path, self.to_arpa())?;
        Ok(())
    }

    pub fn load_arpa(path: impl AsRef<Path>) -> Result<Self, LmError> {
        Self::from_arpa(&fs::read_to_string(path)?)
    }
}
