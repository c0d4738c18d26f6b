//! Category centroids, sample-to-centroid relation graphs, the categorical
//! relation preserving (CRP) loss, and pairwise relation-matrix analysis.

use crate::losses::relative_entropy;
use crate::membank::MemoryBank;
use crate::tensor::{Tensor, Var};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CentroidSource {
    Student,
    Teacher,
}

/// `K × d` class means of a memory bank. Rows are plain means and are not
/// renormalized.
#[derive(Clone, Debug, PartialEq)]
pub struct Centroids {
    pub c: Vec<f64>,
    pub k: usize,
    pub d: usize,
    pub source: CentroidSource,
}

impl Centroids {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.c[i * self.d..(i + 1) * self.d]
    }

    /// The centroids as a `[d, K]` tensor, ready to right-multiply embeddings.
    pub fn transposed(&self) -> Tensor {
        let mut t = vec![0.0; self.d * self.k];
        for i in 0..self.k {
            for j in 0..self.d {
                t[j * self.k + i] = self.c[i * self.d + j];
            }
        }
        Tensor::new(vec![self.d, self.k], t).expect("k, d >= 1")
    }
}

/// Mean bank row per class.
pub fn compute_centroids(bank: &MemoryBank, k: usize, source: CentroidSource) -> Result<Centroids> {
    let d = bank.dim();
    let mut c = vec![0.0; k * d];
    let mut counts = vec![0usize; k];
    for (i, &y) in bank.labels().iter().enumerate() {
        if y >= k {
            return Err(Error::Validation(format!("bank row {i} has label {y} >= {k}")));
        }
        counts[y] += 1;
        for (acc, v) in c[y * d..(y + 1) * d].iter_mut().zip(bank.row(i)) {
            *acc += v;
        }
    }
    if let Some(empty) = counts.iter().position(|&n| n == 0) {
        return Err(Error::Validation(format!("class {empty} has no bank rows")));
    }
    for (class, &n) in counts.iter().enumerate() {
        c[class * d..(class + 1) * d]
            .iter_mut()
            .for_each(|v| *v /= n as f64);
    }
    Ok(Centroids { c, k, d, source })
}

/// Relation graphs `softmax_i(g_b · C_i)` for `[B, d]` embeddings, giving
/// `[B, K]`. No temperature is applied to the dot products.
pub fn relation_graphs<'t>(g: Var<'t>, centroids: &Centroids) -> Result<Var<'t>> {
    let ct = g.tape().constant(centroids.transposed());
    let g = match g.shape()[..] {
        [d] => g.reshape(&[1, d])?,
        _ => g,
    };
    Ok(g.matmul(&ct)?.softmax(1)?)
}

/// Relation graph of a single embedding, as plain values.
pub fn relation_graph(g: &[f64], centroids: &Centroids) -> Vec<f64> {
    let logits: Vec<f64> = (0..centroids.k)
        .map(|i| g.iter().zip(centroids.row(i)).map(|(a, b)| a * b).sum())
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// `Σ_b Σ_i R_t·log(R_t / R_s)`: summed over the batch with no `1/B`
/// factor. Teacher graphs are constants.
pub fn crp_loss<'t>(graphs_s: Var<'t>, graphs_t: &Tensor) -> Result<Var<'t>> {
    if graphs_s.shape() != graphs_t.shape() {
        return Err(Error::Contract(format!(
            "crp_loss: student graphs {:?} vs teacher graphs {:?}",
            graphs_s.shape(),
            graphs_t.shape()
        )));
    }
    relative_entropy(graphs_s, graphs_t, 1.0)
}

/// Pairwise similarities `S = E·Eᵀ` of an evaluation batch, with rows
/// grouped by label.
#[derive(Clone, Debug, PartialEq)]
pub struct RelationMatrix {
    pub s: Vec<f64>,
    pub labels: Vec<usize>,
}

impl RelationMatrix {
    pub fn size(&self) -> usize {
        self.labels.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.s[i * self.size() + j]
    }

    /// CSV with a header row of labels and one line per matrix row.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let header: Vec<String> = self.labels.iter().map(usize::to_string).collect();
        out.push_str("label,");
        out.push_str(&header.join(","));
        out.push('\n');
        for (i, y) in self.labels.iter().enumerate() {
            out.push_str(&y.to_string());
            for j in 0..self.size() {
                out.push(',');
                out.push_str(&format!("{:.17e}", self.get(i, j)));
            }
            out.push('\n');
        }
        out
    }
}

/// Builds the relation matrix of `[B, d]` embeddings after a stable sort by
/// label.
pub fn relation_matrix(embeddings: &[f64], d: usize, labels: &[usize]) -> Result<RelationMatrix> {
    if d == 0 || embeddings.len() != labels.len() * d {
        return Err(Error::Contract(format!(
            "relation_matrix: {} values for {} rows of width {d}",
            embeddings.len(),
            labels.len()
        )));
    }
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_by_key(|&i| labels[i]);
    let b = order.len();
    let row = |i: usize| &embeddings[order[i] * d..(order[i] + 1) * d];
    let mut s = vec![0.0; b * b];
    for i in 0..b {
        for j in i..b {
            let v: f64 = row(i).iter().zip(row(j)).map(|(x, y)| x * y).sum();
            s[i * b + j] = v;
            s[j * b + i] = v;
        }
    }
    Ok(RelationMatrix {
        s,
        labels: order.iter().map(|&i| labels[i]).collect(),
    })
}

/// Ratio of mean same-class to mean cross-class similarity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RdStatistic {
    pub ratio: f64,
    pub intra: f64,
    pub inter: f64,
    /// Set when the mean cross-class similarity is not positive, in which
    /// case `ratio` keeps its sign but no longer orders methods sensibly.
    pub nonpositive_inter: bool,
}

/// `R̄_intra / R̄_inter` over off-diagonal entries of `S`.
pub fn rd_statistic(s: &RelationMatrix) -> Result<RdStatistic> {
    let b = s.size();
    let (mut intra, mut n_intra, mut inter, mut n_inter) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..b {
        for j in 0..b {
            if i == j {
                continue;
            }
            if s.labels[i] == s.labels[j] {
                intra += s.get(i, j);
                n_intra += 1;
            } else {
                inter += s.get(i, j);
                n_inter += 1;
            }
        }
    }
    if n_inter == 0 {
        return Err(Error::Validation("R_d needs at least two classes".into()));
    }
    if n_intra == 0 {
        return Err(Error::Validation("R_d needs at least one same-class pair".into()));
    }
    let intra = intra / n_intra as f64;
    let inter = inter / n_inter as f64;
    let nonpositive_inter = inter <= 0.0;
    if nonpositive_inter {
        log::warn!("mean inter-class similarity {inter} is not positive; R_d is signed");
    }
    Ok(RdStatistic {
        ratio: intra / inter,
        intra,
        inter,
        nonpositive_inter,
    })
}
