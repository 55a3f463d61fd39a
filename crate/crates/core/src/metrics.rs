//! Levenshtein alignment and the error rates built on it: WER over words,
//! CER over concept names and CVER over (concept, value) pairs.

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::tag_codec::{extract_pairs, TaggedTranscript};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum EditOp {
    Hit,
    Substitution,
    Insertion,
    Deletion,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct AlignmentResult {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub hits: usize,
    pub ref_len: usize,
    pub ops: Vec<EditOp>,
}

impl AlignmentResult {
    pub fn errors(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }

    /// `(S + I + D) / N`. An empty reference counts as a denominator of 1,
    /// so an empty pair scores 0 and spurious output scores its length.
    pub fn rate(&self) -> f64 {
        self.errors() as f64 / self.ref_len.max(1) as f64
    }
}

/// Minimal unit-cost edit alignment of `hyp` against `reference`.
///
/// Among equal-cost alignments the backtrace prefers a hit or substitution,
/// then an insertion, then a deletion.
pub fn align<T, F>(reference: &[T], hyp: &[T], eq: F) -> AlignmentResult
where
    F: Fn(&T, &T) -> bool,
{
    let (n, m) = (reference.len(), hyp.len());
    let width = m + 1;
    let mut dist = vec![0usize; (n + 1) * width];
    for j in 0..=m {
        dist[j] = j;
    }
    for i in 1..=n {
        dist[i * width] = i;
        for j in 1..=m {
            let diag = dist[(i - 1) * width + j - 1] + usize::from(!eq(&reference[i - 1], &hyp[j - 1]));
            let ins = dist[i * width + j - 1] + 1;
            let del = dist[(i - 1) * width + j] + 1;
            dist[i * width + j] = diag.min(ins).min(del);
        }
    }

    let mut ops = Vec::with_capacity(n.max(m));
    let mut out = AlignmentResult { ref_len: n, ..Default::default() };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = dist[i * width + j];
        if i > 0 && j > 0 {
            let same = eq(&reference[i - 1], &hyp[j - 1]);
            if here == dist[(i - 1) * width + j - 1] + usize::from(!same) {
                if same {
                    out.hits += 1;
                    ops.push(EditOp::Hit);
                } else {
                    out.substitutions += 1;
                    ops.push(EditOp::Substitution);
                }
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if j > 0 && here == dist[i * width + j - 1] + 1 {
            out.insertions += 1;
            ops.push(EditOp::Insertion);
            j -= 1;
        } else {
            out.deletions += 1;
            ops.push(EditOp::Deletion);
            i -= 1;
        }
    }
    ops.reverse();
    out.ops = ops;
    out
}

pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    align(a, b, T::eq).errors()
}

/// Lowercases and collapses whitespace runs to single spaces.
pub fn normalize_value(value: &str) -> String {
    value.split_whitespace().map(str::to_lowercase).collect::<Vec<_>>().join(" ")
}

pub fn align_words(reference: &str, hyp: &str) -> AlignmentResult {
    let r: Vec<&str> = reference.split_whitespace().collect();
    let h: Vec<&str> = hyp.split_whitespace().collect();
    align(&r, &h, |a, b| a == b)
}

pub fn align_concepts(reference: &TaggedTranscript, hyp: &TaggedTranscript) -> AlignmentResult {
    align(&reference.concept_names(), &hyp.concept_names(), |a, b| a == b)
}

pub fn align_concept_values(reference: &TaggedTranscript, hyp: &TaggedTranscript) -> AlignmentResult {
    let norm = |t: &TaggedTranscript| -> Vec<(String, String)> {
        extract_pairs(t)
            .into_iter()
            .map(|p| (p.concept, normalize_value(&p.value)))
            .collect()
    };
    align(&norm(reference), &norm(hyp), |a, b| a == b)
}

pub fn wer(reference: &str, hyp: &str) -> f64 {
    align_words(reference, hyp).rate()
}

pub fn cer(reference: &TaggedTranscript, hyp: &TaggedTranscript) -> f64 {
    align_concepts(reference, hyp).rate()
}

pub fn cver(reference: &TaggedTranscript, hyp: &TaggedTranscript) -> f64 {
    align_concept_values(reference, hyp).rate()
}

/// Pooled error counts for corpus-level rates.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ErrorCounts {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub ref_len: usize,
}

impl ErrorCounts {
    pub fn add(&mut self, a: &AlignmentResult) {
        self.substitutions += a.substitutions;
        self.insertions += a.insertions;
        self.deletions += a.deletions;
        self.ref_len += a.ref_len;
    }

    pub fn errors(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }

    /// Pooled rate; 0 when nothing was scored.
    pub fn rate(&self) -> f64 {
        if self.ref_len == 0 {
            return if self.errors() == 0 { 0.0 } else { self.errors() as f64 };
        }
        self.errors() as f64 / self.ref_len as f64
    }
}

impl<'a> FromIterator<&'a AlignmentResult> for ErrorCounts {
    fn from_iter<I: IntoIterator<Item = &'a AlignmentResult>>(iter: I) -> Self {
        let mut c = ErrorCounts::default();
        for a in iter {
            c.add(a);
        }
        c
    }
}

/// Which error rate a stage is evaluated with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Deserialize, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Wer,
    Cer,
    Cver,
}

/// Accumulates WER, CER and CVER over a corpus.
#[derive(Debug, Clone, Default, Serialize)]
pub struct CorpusScore {
    pub words: ErrorCounts,
    pub concepts: ErrorCounts,
    pub concept_values: ErrorCounts,
    pub per_utterance: Vec<UtteranceScore>,
}

#[derive(Debug, Clone, Serialize)]
pub struct UtteranceScore {
    pub id: String,
    pub wer: f64,
    pub cer: f64,
    pub cver: f64,
}

impl CorpusScore {
    pub fn add(&mut self, id: &str, reference: &TaggedTranscript, hyp: &TaggedTranscript) {
        let w = align_words(&reference.plain_text(), &hyp.plain_text());
        let c = align_concepts(reference, hyp);
        let cv = align_concept_values(reference, hyp);
        self.per_utterance.push(UtteranceScore {
            id: id.to_string(),
            wer: w.rate(),
            cer: c.rate(),
            cver: cv.rate(),
        });
        self.words.add(&w);
        self.concepts.add(&c);
        self.concept_values.add(&cv);
    }

    pub fn wer(&self) -> f64 {
        self.words.rate()
    }

    pub fn cer(&self) -> f64 {
        self.concepts.rate()
    }

    pub fn cver(&self) -> f64 {
        self.concept_values.rate()
    }

    pub fn get(&self, metric: Metric) -> f64 {
        match metric {
            Metric::Wer => self.wer(),
            Metric::Cer => self.cer(),
            Metric::Cver => self.cver(),
        }
    }
}

/// Half-width of the two-sided 95% Student-t confidence interval of the mean.
/// `None` with fewer than two samples.
pub fn t_confidence_margin(samples: &[f64]) -> Option<f64> {
    let n = samples.len();
    if n < 2 {
        return None;
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64).ok()?.inverse_cdf(0.975);
    Some(t * var.sqrt() / (n as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tag_codec::Item;

    fn concepts(spec: &[(&str, &str)]) -> TaggedTranscript {
        TaggedTranscript::new(
            spec.iter()
                .map(|(n, v)| Item::Concept {
                    name: n.to_string(),
                    words: v.split(' ').map(str::to_string).collect(),
                })
                .collect(),
        )
    }

    #[test]
    fn identical_sequences() {
        let a = align(&[1, 2, 3], &[1, 2, 3], |x, y| x == y);
        assert_eq!((a.substitutions, a.insertions, a.deletions, a.hits), (0, 0, 0, 3));
        assert_eq!(a.rate(), 0.0);
    }

    #[test]
    fn single_deletion() {
        let a = align(&["a", "b"], &["a"], |x, y| x == y);
        assert_eq!(a.deletions, 1);
        assert_eq!(a.rate(), 0.5);
        assert_eq!(a.ops, vec![EditOp::Hit, EditOp::Deletion]);
    }

    #[test]
    fn tie_break_prefers_substitution() {
        let a = align(&["a"], &["b"], |x, y| x == y);
        assert_eq!(a.ops, vec![EditOp::Substitution]);
    }

    #[test]
    fn word_error_rates() {
        assert!((wer("a b c", "a x c") - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(wer("a b c d", ""), 1.0);
        assert_eq!(wer("  a   b ", "a b"), 0.0);
        assert_eq!(wer("", ""), 0.0);
    }

    #[test]
    fn concept_rates() {
        let r = concepts(&[("nb_room", "two"), ("room_type", "double rooms")]);
        assert_eq!(cer(&r, &concepts(&[("nb_room", "two")])), 0.5);
        let wrong_values = concepts(&[("nb_room", "three"), ("room_type", "single rooms")]);
        assert_eq!(cer(&r, &wrong_values), 0.0);
        assert_eq!(cver(&r, &wrong_values), 1.0);
        let half = concepts(&[("nb_room", "two"), ("room_type", "suite")]);
        assert_eq!((cer(&r, &half), cver(&r, &half)), (0.0, 0.5));
    }

    #[test]
    fn value_normalization() {
        let r = concepts(&[("city", "Paris")]);
        let h = concepts(&[("city", "paris")]);
        assert_eq!(cver(&r, &h), 0.0);
        assert_eq!(normalize_value("  New   YORK "), "new york");
    }

    #[test]
    fn constant_samples_have_zero_margin() {
        assert_eq!(t_confidence_margin(&[0.25; 5]), Some(0.0));
        assert_eq!(t_confidence_margin(&[1.0]), None);
    }

    #[test]
    fn margin_matches_table_value() {
        // t(0.975, 2) = 4.302652729911275
        let m = t_confidence_margin(&[0.0, 0.5, 1.0]).unwrap();
        let expected = 4.302652729911275 * 0.5 / 3f64.sqrt();
        assert!((m - expected).abs() < 1e-9, "{m} vs {expected}");
    }
}
