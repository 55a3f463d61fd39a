//! Connectionist Temporal Classification loss.
//!
//! The loss marginalizes over every frame-level alignment that collapses to the
//! target. It is computed with the forward-backward recursions over the
//! blank-interleaved target `_ l1 _ l2 _ ... lU _` (length `2U + 1`), entirely
//! in log space.

use ndarray::{Array2, ArrayView2};
use thiserror::Error;

use crate::alphabet::BLANK;
use crate::logmath::{log_add, log_sum_exp};

#[derive(Debug, Error, PartialEq)]
pub enum CtcError {
    #[error("target longer than input admits: {frames} frames, target needs {needed}")]
    Infeasible { frames: usize, needed: usize },
    #[error("target contains the blank symbol at position {0}")]
    BlankInTarget(usize),
    #[error("target symbol {symbol} outside alphabet of size {alphabet}")]
    SymbolOutOfRange { symbol: usize, alphabet: usize },
    #[error("empty lattice")]
    EmptyLattice,
    #[error("every alignment has zero probability")]
    ZeroProbability,
}

/// Minimum number of frames needed to emit `target`: one per symbol plus a
/// separating blank between equal neighbours.
pub fn min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Merges repeated symbols, then removes blanks.
pub fn collapse(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(path.len());
    let mut prev = None;
    for &s in path {
        if Some(s) != prev && s != blank {
            out.push(s);
        }
        prev = Some(s);
    }
    out
}

/// One utterance's per-frame log-probabilities (`T x A`) and its label sequence.
#[derive(Debug, Clone, Copy)]
pub struct CtcInstance<'a> {
    pub lattice: ArrayView2<'a, f64>,
    pub target: &'a [usize],
}

struct Recursions {
    extended: Vec<usize>,
    alpha: Array2<f64>,
    beta: Option<Array2<f64>>,
    log_likelihood: f64,
}

impl<'a> CtcInstance<'a> {
    pub fn new(lattice: ArrayView2<'a, f64>, target: &'a [usize]) -> Self {
        Self { lattice, target }
    }

    fn check(&self) -> Result<(), CtcError> {
        let (frames, symbols) = self.lattice.dim();
        if frames == 0 || symbols == 0 {
            return Err(CtcError::EmptyLattice);
        }
        for (i, &s) in self.target.iter().enumerate() {
            if s == BLANK {
                return Err(CtcError::BlankInTarget(i));
            }
            if s >= symbols {
                return Err(CtcError::SymbolOutOfRange { symbol: s, alphabet: symbols });
            }
        }
        let needed = min_frames(self.target);
        if needed > frames {
            return Err(CtcError::Infeasible { frames, needed });
        }
        Ok(())
    }

    fn recursions(&self, with_beta: bool) -> Result<Recursions, CtcError> {
        self.check()?;
        let lp = &self.lattice;
        let frames = lp.nrows();
        let mut extended = Vec::with_capacity(2 * self.target.len() + 1);
        extended.push(BLANK);
        for &s in self.target {
            extended.push(s);
            extended.push(BLANK);
        }
        let states = extended.len();
        // a skip from s-2 to s is allowed onto a non-blank that differs from s-2
        let can_skip: Vec<bool> = (0..states)
            .map(|s| s >= 2 && extended[s] != BLANK && extended[s] != extended[s - 2])
            .collect();

        let ninf = f64::NEG_INFINITY;
        let mut alpha = Array2::from_elem((frames, states), ninf);
        alpha[[0, 0]] = lp[[0, extended[0]]];
        if states > 1 {
            alpha[[0, 1]] = lp[[0, extended[1]]];
        }
        for t in 1..frames {
            for s in 0..states {
                let mut acc = alpha[[t - 1, s]];
                if s >= 1 {
                    acc = log_add(acc, alpha[[t - 1, s - 1]]);
                }
                if can_skip[s] {
                    acc = log_add(acc, alpha[[t - 1, s - 2]]);
                }
                if acc != ninf {
                    alpha[[t, s]] = acc + lp[[t, extended[s]]];
                }
            }
        }
        let last = frames - 1;
        let mut log_likelihood = alpha[[last, states - 1]];
        if states > 1 {
            log_likelihood = log_add(log_likelihood, alpha[[last, states - 2]]);
        }
        if log_likelihood == ninf {
            return Err(CtcError::ZeroProbability);
        }

        let beta = with_beta.then(|| {
            let mut beta = Array2::from_elem((frames, states), ninf);
            beta[[last, states - 1]] = lp[[last, extended[states - 1]]];
            if states > 1 {
                beta[[last, states - 2]] = lp[[last, extended[states - 2]]];
            }
            for t in (0..last).rev() {
                for s in 0..states {
                    let mut acc = beta[[t + 1, s]];
                    if s + 1 < states {
                        acc = log_add(acc, beta[[t + 1, s + 1]]);
                    }
                    if s + 2 < states && can_skip[s + 2] {
                        acc = log_add(acc, beta[[t + 1, s + 2]]);
                    }
                    if acc != ninf {
                        beta[[t, s]] = acc + lp[[t, extended[s]]];
                    }
                }
            }
            beta
        });
        Ok(Recursions { extended, alpha, beta, log_likelihood })
    }

    /// Negative log-likelihood of the target.
    pub fn loss(&self) -> Result<f64, CtcError> {
        Ok(-self.recursions(false)?.log_likelihood)
    }

    /// Loss and its gradient with respect to every lattice entry.
    ///
    /// Entries are treated as free variables, so the gradient is minus the
    /// posterior occupancy of each symbol at each frame (every row sums to -1).
    pub fn loss_and_grad(&self) -> Result<(f64, Array2<f64>), CtcError> {
        let rec = self.recursions(true)?;
        let beta = rec.beta.as_ref().expect("beta requested");
        let (frames, symbols) = self.lattice.dim();
        let mut grad = Array2::zeros((frames, symbols));
        let mut per_symbol = vec![f64::NEG_INFINITY; symbols];
        for t in 0..frames {
            per_symbol.iter_mut().for_each(|v| *v = f64::NEG_INFINITY);
            for (s, &k) in rec.extended.iter().enumerate() {
                let a = rec.alpha[[t, s]];
                let b = beta[[t, s]];
                if a != f64::NEG_INFINITY && b != f64::NEG_INFINITY {
                    per_symbol[k] = log_add(per_symbol[k], a + b);
                }
            }
            for k in 0..symbols {
                if per_symbol[k] != f64::NEG_INFINITY {
                    // alpha and beta both include frame t's emission once
                    let occupancy = per_symbol[k] - self.lattice[[t, k]] - rec.log_likelihood;
                    grad[[t, k]] = -occupancy.exp();
                }
            }
        }
        Ok((-rec.log_likelihood, grad))
    }

    pub fn grad(&self) -> Result<Array2<f64>, CtcError> {
        Ok(self.loss_and_grad()?.1)
    }

    /// Gradient with respect to the pre-softmax logits, assuming the lattice
    /// rows are log-softmax outputs.
    pub fn logit_grad(&self) -> Result<Array2<f64>, CtcError> {
        let g = self.grad()?;
        Ok(compose_log_softmax(self.lattice, g.view()))
    }

    /// Log-probability of a single frame-level path.
    pub fn path_log_prob(&self, path: &[usize]) -> f64 {
        path.iter().enumerate().map(|(t, &k)| self.lattice[[t, k]]).sum()
    }
}

/// Pulls a gradient on log-softmax outputs back to the logits:
/// `dz = g - softmax * sum(g)` row by row.
pub fn compose_log_softmax(log_probs: ArrayView2<f64>, grad: ArrayView2<f64>) -> Array2<f64> {
    let mut out = grad.to_owned();
    for (mut row, lp) in out.rows_mut().into_iter().zip(log_probs.rows()) {
        let total: f64 = row.sum();
        for (g, &l) in row.iter_mut().zip(lp.iter()) {
            *g -= l.exp() * total;
        }
    }
    out
}

/// Log-probability of the most likely path (the greedy path).
pub fn best_path_log_prob(lattice: ArrayView2<f64>) -> f64 {
    lattice
        .rows()
        .into_iter()
        .map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .sum()
}

/// Log-likelihood of each target in `targets`; infeasible targets map to `-inf`.
pub fn log_likelihoods<'a>(lattice: ArrayView2<'a, f64>, targets: &'a [Vec<usize>]) -> Vec<f64> {
    targets
        .iter()
        .map(|t| CtcInstance::new(lattice, t).loss().map(|l| -l).unwrap_or(f64::NEG_INFINITY))
        .collect()
}

/// Total log mass of a lattice (0 for normalized rows).
pub fn total_log_mass(lattice: ArrayView2<f64>) -> f64 {
    lattice.rows().into_iter().map(|r| log_sum_exp(r.iter().copied())).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn single_frame_uniform() {
        let lp = array![[0.5f64.ln(), 0.5f64.ln()]];
        let inst = CtcInstance::new(lp.view(), &[1]);
        assert!((inst.loss().unwrap() - (-0.5f64.ln())).abs() < 1e-15);
        // only one alignment, so symbol 1 has occupancy 1 at frame 0
        let g = inst.grad().unwrap();
        assert_eq!(g, array![[0.0, -1.0]]);
        let gz = inst.logit_grad().unwrap();
        assert!((gz[[0, 0]] - 0.5).abs() < 1e-15 && (gz[[0, 1]] + 0.5).abs() < 1e-15);
    }

    #[test]
    fn repeated_symbol_needs_separator() {
        let lp = Array2::from_elem((2, 2), 0.5f64.ln());
        assert_eq!(
            CtcInstance::new(lp.view(), &[1, 1]).loss(),
            Err(CtcError::Infeasible { frames: 2, needed: 3 })
        );
    }

    #[test]
    fn rejects_blank_and_out_of_range_targets() {
        let lp = Array2::from_elem((3, 3), (1.0f64 / 3.0).ln());
        assert_eq!(CtcInstance::new(lp.view(), &[0]).loss(), Err(CtcError::BlankInTarget(0)));
        assert!(matches!(
            CtcInstance::new(lp.view(), &[3]).loss(),
            Err(CtcError::SymbolOutOfRange { .. })
        ));
    }

    #[test]
    fn empty_target_is_all_blanks() {
        let lp = array![[0.25f64.ln(), 0.75f64.ln()], [0.5f64.ln(), 0.5f64.ln()]];
        let loss = CtcInstance::new(lp.view(), &[]).loss().unwrap();
        assert!((loss + (0.25f64 * 0.5).ln()).abs() < 1e-14);
    }

    #[test]
    fn textbook_collapse() {
        assert_eq!(collapse(&[1, 1, 0, 1, 2, 2], 0), vec![1, 1, 2]);
        assert!(collapse(&[0, 0, 0], 0).is_empty());
        assert!(collapse(&[], 0).is_empty());
    }

    #[test]
    fn gradient_rows_sum_to_minus_one() {
        let lp = array![
            [-0.2, -2.0, -2.5],
            [-1.5, -0.6, -1.4],
            [-1.1, -1.2, -1.0],
            [-0.3, -2.2, -1.9]
        ];
        let mut lp = lp;
        for mut r in lp.rows_mut() {
            let lse = log_sum_exp(r.iter().copied());
            r.mapv_inplace(|v| v - lse);
        }
        let g = CtcInstance::new(lp.view(), &[1, 2]).grad().unwrap();
        for r in g.rows() {
            assert!((r.sum() + 1.0).abs() < 1e-12);
        }
        let gz = CtcInstance::new(lp.view(), &[1, 2]).logit_grad().unwrap();
        for r in gz.rows() {
            assert!(r.sum().abs() < 1e-12);
        }
    }
}
