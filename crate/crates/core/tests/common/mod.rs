//! Independent reference implementations used by the integration tests.
#![allow(dead_code)]

use std::collections::HashMap;

use ndarray::{Array2, Array3, ArrayView2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use slu_core::ctc::CtcInstance;
use slu_core::net::{backward, forward, Batch, Mode, ModelCheckpoint};
use slu_core::tag_codec::{ConceptInventory, Item, TaggedTranscript};

/// Every path in `A^T`, in lexicographic order.
pub fn all_paths(frames: usize, symbols: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for _ in 0..frames {
        out = out
            .into_iter()
            .flat_map(|p| {
                (0..symbols).map(move |s| {
                    let mut q = p.clone();
                    q.push(s);
                    q
                })
            })
            .collect();
    }
    out
}

/// Merge runs, drop blanks (symbol 0).
pub fn squash(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    for (i, &s) in path.iter().enumerate() {
        if s != 0 && (i == 0 || path[i - 1] != s) {
            out.push(s);
        }
    }
    out
}

fn lse(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// log of the summed probability of all paths squashing to each label sequence.
pub fn sequence_log_probs(lattice: ArrayView2<f64>) -> HashMap<Vec<usize>, f64> {
    let (t, a) = lattice.dim();
    let mut terms: HashMap<Vec<usize>, Vec<f64>> = HashMap::new();
    for p in all_paths(t, a) {
        let lp: f64 = p.iter().enumerate().map(|(i, &s)| lattice[[i, s]]).sum();
        terms.entry(squash(&p)).or_default().push(lp);
    }
    terms.into_iter().map(|(k, v)| (k, lse(&v))).collect()
}

/// Brute-force CTC log-likelihood of `target`.
pub fn brute_log_likelihood(lattice: ArrayView2<f64>, target: &[usize]) -> f64 {
    let (t, a) = lattice.dim();
    let terms: Vec<f64> = all_paths(t, a)
        .into_iter()
        .filter(|p| squash(p) == target)
        .map(|p| p.iter().enumerate().map(|(i, &s)| lattice[[i, s]]).sum())
        .collect();
    lse(&terms)
}

pub fn random_lattice(rng: &mut ChaCha8Rng, frames: usize, symbols: usize, scale: f64) -> Array2<f64> {
    let mut m = Array2::from_shape_fn((frames, symbols), |_| scale * rng.sample::<f64, _>(StandardNormal));
    for mut row in m.rows_mut() {
        let z = lse(row.as_slice().unwrap());
        row.mapv_inplace(|v| v - z);
    }
    m
}

/// Top-down memoized edit distance.
pub fn edit_distance_oracle<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    fn go<T: PartialEq>(a: &[T], b: &[T], i: usize, j: usize, memo: &mut HashMap<(usize, usize), usize>) -> usize {
        if i == a.len() {
            return b.len() - j;
        }
        if j == b.len() {
            return a.len() - i;
        }
        if let Some(&v) = memo.get(&(i, j)) {
            return v;
        }
        let v = (go(a, b, i + 1, j + 1, memo) + usize::from(a[i] != b[j]))
            .min(go(a, b, i + 1, j, memo) + 1)
            .min(go(a, b, i, j + 1, memo) + 1);
        memo.insert((i, j), v);
        v
    }
    go(a, b, 0, 0, &mut HashMap::new())
}

pub fn oracle_rate<T: PartialEq>(r: &[T], h: &[T]) -> f64 {
    edit_distance_oracle(r, h) as f64 / r.len().max(1) as f64
}

pub fn oracle_concepts(t: &TaggedTranscript) -> Vec<String> {
    t.items
        .iter()
        .filter_map(|i| match i {
            Item::Concept { name, .. } => Some(name.clone()),
            Item::Word(_) => None,
        })
        .collect()
}

pub fn oracle_pairs(t: &TaggedTranscript) -> Vec<(String, String)> {
    t.items
        .iter()
        .filter_map(|i| match i {
            Item::Concept { name, words } => {
                let v = words.join(" ").to_lowercase();
                Some((name.clone(), v.split_whitespace().collect::<Vec<_>>().join(" ")))
            }
            Item::Word(_) => None,
        })
        .collect()
}

/// Summed CTC loss of a batch in training mode.
pub fn batch_ctc_loss(ckpt: &ModelCheckpoint, batch: &Batch, targets: &[Vec<usize>]) -> f64 {
    let out = forward(ckpt, batch, Mode::Train).unwrap();
    targets
        .iter()
        .enumerate()
        .map(|(b, t)| CtcInstance::new(out.lattice.utterance(b), t).loss().unwrap())
        .sum()
}

/// Analytic gradients of the summed batch CTC loss.
pub fn batch_ctc_grads(ckpt: &ModelCheckpoint, batch: &Batch, targets: &[Vec<usize>]) -> slu_core::net::Gradients {
    let out = forward(ckpt, batch, Mode::Train).unwrap();
    let mut g = Array3::zeros(out.lattice.data.dim());
    for (b, t) in targets.iter().enumerate() {
        let gb = CtcInstance::new(out.lattice.utterance(b), t).grad().unwrap();
        g.slice_mut(ndarray::s![..gb.nrows(), b, ..]).assign(&gb);
    }
    backward(ckpt, &out, g.view()).unwrap()
}

/// Central-difference check of every body and head tensor. Returns
/// `(name, relative error)` per tensor.
pub fn finite_difference_check(ckpt: &ModelCheckpoint, batch: &Batch, targets: &[Vec<usize>], h: f64) -> Vec<(String, f64)> {
    let grads = batch_ctc_grads(ckpt, batch, targets);
    let mut out = Vec::new();
    for head in [false, true] {
        let names: Vec<String> = if head { ckpt.head.names() } else { ckpt.body.names() }.map(str::to_string).collect();
        for name in names {
            let analytic = if head { grads.head.get(&name) } else { grads.body.get(&name) }.unwrap().clone();
            let mut numeric = analytic.clone();
            let mut work = ckpt.clone();
            for i in 0..analytic.len() {
                let set = |w: &mut ModelCheckpoint, v: f64| {
                    let t = if head { w.head.get_mut(&name) } else { w.body.get_mut(&name) }.unwrap();
                    t.as_slice_mut().unwrap()[i] = v;
                };
                let orig = (if head { ckpt.head.get(&name) } else { ckpt.body.get(&name) }).unwrap().as_slice().unwrap()[i];
                set(&mut work, orig + h);
                let up = batch_ctc_loss(&work, batch, targets);
                set(&mut work, orig - h);
                let down = batch_ctc_loss(&work, batch, targets);
                set(&mut work, orig);
                numeric.as_slice_mut().unwrap()[i] = (up - down) / (2.0 * h);
            }
            let diff = (&analytic - &numeric).iter().map(|v| v * v).sum::<f64>().sqrt();
            let na = analytic.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nn = numeric.iter().map(|v| v * v).sum::<f64>().sqrt();
            out.push((name, diff / na.max(nn).max(1e-12)));
        }
    }
    out
}

const WORDS: &[&str] = &["i", "would", "like", "two", "double-bed", "rooms", "in", "paris", "o'clock", "a", "the", "for"];

fn fuzz_word(rng: &mut ChaCha8Rng) -> String {
    if rng.gen_bool(0.7) {
        WORDS[rng.gen_range(0..WORDS.len())].to_string()
    } else {
        let base: Vec<char> = slu_core::tag_codec::BASE_ALPHABET.chars().collect();
        (0..rng.gen_range(1..7)).map(|_| base[rng.gen_range(0..base.len())]).collect()
    }
}

/// A random valid transcript over `inv`.
pub fn fuzz_transcript(rng: &mut ChaCha8Rng, inv: &ConceptInventory) -> TaggedTranscript {
    let names: Vec<String> = inv.concepts().map(|(n, _)| n.to_string()).collect();
    let n = rng.gen_range(0..10);
    let items = (0..n)
        .map(|_| {
            if !names.is_empty() && rng.gen_bool(0.4) {
                let words = (0..rng.gen_range(1..4)).map(|_| fuzz_word(rng)).collect();
                Item::Concept { name: names[rng.gen_range(0..names.len())].clone(), words }
            } else {
                Item::Word(fuzz_word(rng))
            }
        })
        .collect();
    TaggedTranscript::new(items)
}

/// A random symbol stream drawn mostly from reserved symbols, spaces and short words.
pub fn fuzz_symbols(rng: &mut ChaCha8Rng, inv: &ConceptInventory) -> String {
    let reserved = inv.reserved_symbols();
    let mut s = String::new();
    for _ in 0..rng.gen_range(0..16) {
        match rng.gen_range(0..4) {
            0 => s.push(reserved[rng.gen_range(0..reserved.len())]),
            1 => s.push(' '),
            2 => s.push_str(&fuzz_word(rng)),
            _ => s.push_str(if rng.gen_bool(0.5) { "\t" } else { "  " }),
        }
    }
    s
}

/// Concept/value pairs of an arbitrary symbol stream, by a token-level scan
/// that follows the repair rules: a new opening closes the current span, a
/// stray closing is ignored, a span left open at the end is closed there.
pub fn oracle_scan_pairs(s: &str, inv: &ConceptInventory) -> Vec<(String, String)> {
    let mut tokens: Vec<String> = Vec::new();
    for c in s.chars() {
        if inv.is_reserved(c) {
            tokens.push(c.to_string());
        } else if c.is_whitespace() {
            tokens.push(String::new());
        } else if let Some(last) = tokens.last_mut().filter(|t| !t.is_empty() && !t.chars().any(|c| inv.is_reserved(c))) {
            last.push(c);
        } else {
            tokens.push(c.to_string());
        }
    }
    let mut pairs = Vec::new();
    let mut current: Option<(String, Vec<String>)> = None;
    for tok in tokens.into_iter().filter(|t| !t.is_empty()) {
        let c = tok.chars().next().unwrap();
        if tok.chars().count() == 1 && inv.concept_for_symbol(c).is_some() {
            if let Some((n, w)) = current.take() {
                pairs.push((n, w.join(" ")));
            }
            current = Some((inv.concept_for_symbol(c).unwrap().to_string(), Vec::new()));
        } else if tok.chars().count() == 1 && c == inv.close_symbol() {
            if let Some((n, w)) = current.take() {
                pairs.push((n, w.join(" ")));
            }
        } else if let Some((_, w)) = current.as_mut() {
            w.push(tok);
        }
    }
    if let Some((n, w)) = current {
        pairs.push((n, w.join(" ")));
    }
    pairs
}
