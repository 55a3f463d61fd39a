use ndarray::{ArrayD, IxDyn, Zip};

/// Ordered collection of named `f64` tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorSet {
    entries: Vec<(String, ArrayD<f64>)>,
}

impl TensorSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: ArrayD<f64>) {
        let name = name.into();
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = tensor,
            None => self.entries.push((name, tensor)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ArrayD<f64>> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Like [`get`](Self::get) for tensors the model layout guarantees.
    pub(crate) fn expect(&self, name: &str) -> &ArrayD<f64> {
        self.get(name).unwrap_or_else(|| panic!("missing tensor `{name}`"))
    }

    pub(crate) fn expect_mut(&mut self, name: &str) -> &mut ArrayD<f64> {
        self.get_mut(name).unwrap_or_else(|| panic!("missing tensor `{name}`"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ArrayD<f64>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), ArrayD::zeros(IxDyn(t.shape()))))
                .collect(),
        }
    }

    pub fn same_layout(&self, other: &Self) -> Result<(), String> {
        if self.len() != other.len() {
            return Err(format!("{} tensors vs {}", self.len(), other.len()));
        }
        for ((a, ta), (b, tb)) in self.entries.iter().zip(&other.entries) {
            if a != b {
                return Err(format!("tensor `{a}` vs `{b}`"));
            }
            if ta.shape() != tb.shape() {
                return Err(format!("tensor `{a}`: shape {:?} vs {:?}", ta.shape(), tb.shape()));
            }
        }
        Ok(())
    }

    /// Exact equality, distinguishing `0.0` from `-0.0` and comparing NaN payloads.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.same_layout(other).is_ok()
            && self.entries.iter().zip(&other.entries).all(|((_, a), (_, b))| {
                a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    pub fn sum_squares(&self) -> f64 {
        self.entries.iter().map(|(_, t)| t.iter().map(|v| v * v).sum::<f64>()).sum()
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, t) in &mut self.entries {
            t.mapv_inplace(|v| v * factor);
        }
    }

    /// `self += alpha * other`; layouts must match.
    pub fn add_scaled(&mut self, alpha: f64, other: &Self) {
        for ((_, a), (_, b)) in self.entries.iter_mut().zip(&other.entries) {
            Zip::from(a).and(b).for_each(|x, &y| *x += alpha * y);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }
}
