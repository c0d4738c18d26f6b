//! Per-sample embedding memory banks with class-conditional sampling.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::{Error, Result};

/// Tolerance for the unit-norm contract on stored rows and incoming embeddings.
pub const UNIT_TOL: f64 = 1e-6;

/// Serializable position of the bank's sampler.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// `N × d` store of unit-norm embeddings, one row per training sample.
#[derive(Clone, Debug)]
pub struct MemoryBank {
    rows: Vec<f64>,
    dim: usize,
    labels: Vec<usize>,
    momentum: f64,
    rng: ChaCha8Rng,
    by_class: Vec<Vec<usize>>,
    others: Vec<Vec<usize>>,
}

impl PartialEq for MemoryBank {
    fn eq(&self, other: &Self) -> bool {
        self.rows == other.rows
            && self.dim == other.dim
            && self.labels == other.labels
            && self.momentum == other.momentum
            && RngState::capture(&self.rng) == RngState::capture(&other.rng)
    }
}

fn class_lists(labels: &[usize]) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
    let k = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut by_class = vec![Vec::new(); k];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let others = (0..k)
        .map(|c| (0..labels.len()).filter(|&i| labels[i] != c).collect())
        .collect();
    (by_class, others)
}

fn normalize(v: &mut [f64]) -> f64 {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    norm
}

impl MemoryBank {
    /// Rows are unit-normalized standard Gaussian draws.
    pub fn new(labels: Vec<usize>, dim: usize, momentum: f64, seed: u64) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Config("memory bank needs at least one row".into()));
        }
        if dim < 2 {
            return Err(Error::Config(format!("bank dimension must be >= 2, got {dim}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("bank momentum must be in [0, 1), got {momentum}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = vec![0.0; labels.len() * dim];
        for row in rows.chunks_mut(dim) {
            loop {
                row.iter_mut().for_each(|x| *x = StandardNormal.sample(&mut rng));
                if normalize(row) > 1e-8 {
                    break;
                }
            }
        }
        let (by_class, others) = class_lists(&labels);
        Ok(Self {
            rows,
            dim,
            labels,
            momentum,
            rng,
            by_class,
            others,
        })
    }

    /// Rebuilds a bank from serialized parts.
    pub fn from_parts(
        rows: Vec<f64>,
        dim: usize,
        labels: Vec<usize>,
        momentum: f64,
        rng: RngState,
    ) -> Result<Self> {
        if dim == 0 || rows.len() != labels.len() * dim {
            return Err(Error::Checkpoint(format!(
                "bank has {} values for {} rows of width {dim}",
                rows.len(),
                labels.len()
            )));
        }
        let (by_class, others) = class_lists(&labels);
        Ok(Self {
            rows,
            dim,
            labels,
            momentum,
            rng: rng.restore(),
            by_class,
            others,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn rows(&self) -> &[f64] {
        &self.rows
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rng_state(&self) -> RngState {
        RngState::capture(&self.rng)
    }

    pub fn num_classes(&self) -> usize {
        self.by_class.len()
    }

    pub fn class_members(&self, class: usize) -> &[usize] {
        self.by_class.get(class).map_or(&[], Vec::as_slice)
    }

    /// Blends each queried row toward its new embedding and renormalizes:
    /// `row ← normalize(m·row + (1−m)·v)`. Rows not listed are untouched.
    /// When an index repeats within one call, its last embedding wins.
    /// `embeddings` is `indices.len() × d`, row-major, each row unit-norm.
    pub fn update(&mut self, indices: &[usize], embeddings: &[f64]) -> Result<()> {
        let d = self.dim;
        if embeddings.len() != indices.len() * d {
            return Err(Error::Contract(format!(
                "bank update: {} indices but {} embedding values (d = {d})",
                indices.len(),
                embeddings.len()
            )));
        }
        for (pos, &i) in indices.iter().enumerate() {
            if i >= self.len() {
                return Err(Error::Contract(format!("bank index {i} outside [0, {})", self.len())));
            }
            let v = &embeddings[pos * d..(pos + 1) * d];
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > UNIT_TOL {
                return Err(Error::Contract(format!(
                    "bank update: embedding {pos} has norm {norm}, expected 1"
                )));
            }
        }
        for (pos, &i) in indices.iter().enumerate() {
            if indices[pos + 1..].contains(&i) {
                continue;
            }
            let v = &embeddings[pos * d..(pos + 1) * d];
            let m = self.momentum;
            let row = &mut self.rows[i * d..(i + 1) * d];
            for (r, &x) in row.iter_mut().zip(v) {
                *r = m * *r + (1.0 - m) * x;
            }
            if normalize(row) <= 1e-12 {
                // exact cancellation of antipodal vectors
                row.copy_from_slice(v);
            }
        }
        Ok(())
    }

    /// `k_p` row indices with the query's label, excluding the query itself.
    /// Sampled without replacement when enough candidates exist, with
    /// replacement otherwise; a singleton class yields the query's own row
    /// `k_p` times.
    pub fn sample_positives(&mut self, query_index: usize, query_label: usize, k_p: usize) -> Vec<usize> {
        let members = self.class_members(query_label);
        let candidates: Vec<usize> = members.iter().copied().filter(|&i| i != query_index).collect();
        if candidates.is_empty() {
            return vec![query_index; k_p];
        }
        draw(&mut self.rng, &candidates, k_p)
    }

    /// `k_n` row indices whose label differs from the query's.
    pub fn sample_negatives(&mut self, query_label: usize, k_n: usize) -> Result<Vec<usize>> {
        let candidates = match self.others.get(query_label) {
            Some(c) => c,
            None => &(0..self.len()).collect::<Vec<_>>(),
        };
        if candidates.is_empty() {
            return Err(Error::Config(
                "negative sampling needs at least two classes in the bank".into(),
            ));
        }
        let candidates = candidates.clone();
        Ok(draw(&mut self.rng, &candidates, k_n))
    }

    /// Copies the listed rows into a `len × d` buffer.
    pub fn gather(&self, indices: &[usize]) -> Vec<f64> {
        let mut out = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            out.extend_from_slice(self.row(i));
        }
        out
    }
}

fn draw(rng: &mut ChaCha8Rng, candidates: &[usize], k: usize) -> Vec<usize> {
    if candidates.len() >= k {
        index::sample(rng, candidates.len(), k)
            .into_iter()
            .map(|j| candidates[j])
            .collect()
    } else {
        (0..k)
            .map(|_| candidates[rng.random_range(0..candidates.len())])
            .collect()
    }
}
