//! Relevance-conditioned DPP kernels and greedy MAP subset selection.
//!
//! A kernel is `L = diag(r) · S · diag(r)` where `S` is a frame-frame
//! similarity matrix and `r` a per-frame relevance vector w.r.t. a text
//! anchor (the question or the hypothesis evidence). MAP inference picks the
//! subset `Y` maximizing `det(L_Y)`; [`greedy_map`] does this greedily with
//! incremental Cholesky updates, so each step costs `O(n · |Y|)`.
//!
//! [`LowRankKernel`] evaluates kernel entries on demand from the embedding
//! matrix, avoiding the dense `n x n` matrix over long videos.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame_store::FrameIndexSet;

/// Lower clamp for relevance entries; keeps every frame selectable.
pub const RELEVANCE_FLOOR: f64 = 1e-6;
/// An item's marginal gain has vanished once it is at most this fraction of
/// its own diagonal entry; greedy selection stops when every gain has.
pub const GAIN_EPSILON: f64 = 1e-12;
/// Conditional variances below this are treated as evidence of a non-PSD kernel.
pub const PSD_TOLERANCE: f64 = 1e-8;
/// Gains within this relative distance count as tied (lowest index wins).
pub const TIE_TOLERANCE: f64 = 1e-10;
/// Largest kernel [`brute_force_map`] will enumerate.
pub const BRUTE_FORCE_LIMIT: usize = 15;

#[derive(Debug, Error, PartialEq)]
pub enum DppError {
    #[error("empty input")]
    Empty,
    #[error("size mismatch: {left} vs {right}")]
    SizeMismatch { left: usize, right: usize },
    #[error("subset size k must be at least 1")]
    ZeroBudget,
    #[error("kernel is not PSD: conditional variance {value} for item {item}")]
    NotPsd { item: usize, value: f64 },
    #[error("matrix is not a valid similarity matrix: {0}")]
    InvalidSimilarity(String),
    #[error("invalid relevance entry {value} at {index}")]
    InvalidRelevance { index: usize, value: f64 },
    #[error("brute force limited to n <= {BRUTE_FORCE_LIMIT}, got {0}")]
    TooLarge(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix(DMatrix<f64>);

impl SimilarityMatrix {
    /// Cosine similarity of unit-norm rows mapped through `s -> (s + 1) / 2`.
    pub fn from_embeddings(embeddings: &DMatrix<f64>) -> Result<Self, DppError> {
        if embeddings.nrows() == 0 {
            return Err(DppError::Empty);
        }
        let gram = embeddings * embeddings.transpose();
        let n = gram.nrows();
        let mut s = gram.map(|v| (v + 1.0) / 2.0);
        for i in 0..n {
            s[(i, i)] = 1.0;
            for j in 0..i {
                let v = 0.5 * (s[(i, j)] + s[(j, i)]);
                s[(i, j)] = v;
                s[(j, i)] = v;
            }
        }
        Ok(Self(s))
    }

    /// Wraps an arbitrary matrix after checking symmetry and unit diagonal.
    pub fn from_matrix(m: DMatrix<f64>) -> Result<Self, DppError> {
        if m.nrows() == 0 {
            return Err(DppError::Empty);
        }
        if m.nrows() != m.ncols() {
            return Err(DppError::SizeMismatch { left: m.nrows(), right: m.ncols() });
        }
        for i in 0..m.nrows() {
            if (m[(i, i)] - 1.0).abs() > 1e-9 {
                return Err(DppError::InvalidSimilarity(format!("diagonal {i} is {}", m[(i, i)])));
            }
            for j in 0..i {
                if (m[(i, j)] - m[(j, i)]).abs() > 1e-9 {
                    return Err(DppError::InvalidSimilarity(format!("asymmetric at ({i}, {j})")));
                }
            }
        }
        Ok(Self(m))
    }

    pub fn len(&self) -> usize {
        self.0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.nrows() == 0
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RelevanceVector(Vec<f64>);

impl RelevanceVector {
    pub fn new(values: Vec<f64>) -> Result<Self, DppError> {
        if values.is_empty() {
            return Err(DppError::Empty);
        }
        if let Some((index, &value)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !(v.is_finite() && **v > 0.0 && **v <= 1.0))
        {
            return Err(DppError::InvalidRelevance { index, value });
        }
        Ok(Self(values))
    }

    /// `r_i = (cos(anchor, e_i) + 1) / 2`, clamped to `[RELEVANCE_FLOOR, 1]`.
    pub fn from_anchor(anchor: &[f64], embeddings: &DMatrix<f64>) -> Result<Self, DppError> {
        if embeddings.nrows() == 0 || anchor.is_empty() {
            return Err(DppError::Empty);
        }
        if anchor.len() != embeddings.ncols() {
            return Err(DppError::SizeMismatch { left: anchor.len(), right: embeddings.ncols() });
        }
        let anchor_norm = anchor.iter().map(|a| a * a).sum::<f64>().sqrt();
        if anchor_norm == 0.0 || !anchor_norm.is_finite() {
            return Err(DppError::InvalidRelevance { index: 0, value: anchor_norm });
        }
        let values = embeddings
            .row_iter()
            .map(|row| {
                let row_norm = row.norm();
                let dot: f64 = row.iter().zip(anchor).map(|(x, a)| x * a).sum();
                let cos = if row_norm > 0.0 { dot / (row_norm * anchor_norm) } else { 0.0 };
                ((cos + 1.0) / 2.0).clamp(RELEVANCE_FLOOR, 1.0)
            })
            .collect();
        Ok(Self(values))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelSource {
    Query,
    Evidence,
    Custom,
}

/// Read access to kernel entries, all the greedy selector needs.
pub trait KernelEntries {
    fn size(&self) -> usize;
    fn diagonal(&self, i: usize) -> f64;
    /// Fills `out[i] = L[j, i]` for all `i`.
    fn row_into(&self, j: usize, out: &mut [f64]);
}

#[derive(Clone, Debug, PartialEq)]
pub struct Kernel {
    matrix: DMatrix<f64>,
    source: KernelSource,
}

impl Kernel {
    /// `L_ij = r_i * S_ij * r_j`.
    pub fn build(
        similarity: &SimilarityMatrix,
        relevance: &RelevanceVector,
        source: KernelSource,
    ) -> Result<Self, DppError> {
        let n = similarity.len();
        if relevance.len() != n {
            return Err(DppError::SizeMismatch { left: n, right: relevance.len() });
        }
        let r = relevance.values();
        let s = similarity.matrix();
        let matrix = DMatrix::from_fn(n, n, |i, j| r[i] * s[(i, j)] * r[j]);
        Ok(Self { matrix, source })
    }

    /// Wraps a raw PSD matrix, for fixtures that bypass the similarity map.
    pub fn from_matrix(matrix: DMatrix<f64>) -> Result<Self, DppError> {
        if matrix.nrows() == 0 {
            return Err(DppError::Empty);
        }
        if matrix.nrows() != matrix.ncols() {
            return Err(DppError::SizeMismatch { left: matrix.nrows(), right: matrix.ncols() });
        }
        Ok(Self { matrix, source: KernelSource::Custom })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn source(&self) -> KernelSource {
        self.source
    }

    pub fn len(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.nrows() == 0
    }

    /// `det(L_Y)` for a subset of item positions; 1 for the empty set.
    pub fn subset_det(&self, subset: &[usize]) -> f64 {
        if subset.is_empty() {
            return 1.0;
        }
        let m = subset.len();
        DMatrix::from_fn(m, m, |a, b| self.matrix[(subset[a], subset[b])]).determinant()
    }
}

impl KernelEntries for Kernel {
    fn size(&self) -> usize {
        self.matrix.nrows()
    }

    fn diagonal(&self, i: usize) -> f64 {
        self.matrix[(i, i)]
    }

    fn row_into(&self, j: usize, out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.matrix[(j, i)];
        }
    }
}

/// Kernel over unit-norm embeddings `E` with entries
/// `r_i * (e_i · e_j + 1) / 2 * r_j`, computed per row on demand.
pub struct LowRankKernel<'a> {
    embeddings: &'a DMatrix<f64>,
    relevance: &'a RelevanceVector,
}

impl<'a> LowRankKernel<'a> {
    pub fn new(embeddings: &'a DMatrix<f64>, relevance: &'a RelevanceVector) -> Result<Self, DppError> {
        if embeddings.nrows() == 0 {
            return Err(DppError::Empty);
        }
        if embeddings.nrows() != relevance.len() {
            return Err(DppError::SizeMismatch { left: embeddings.nrows(), right: relevance.len() });
        }
        Ok(Self { embeddings, relevance })
    }
}

impl KernelEntries for LowRankKernel<'_> {
    fn size(&self) -> usize {
        self.embeddings.nrows()
    }

    fn diagonal(&self, i: usize) -> f64 {
        let r = self.relevance.values()[i];
        r * r
    }

    fn row_into(&self, j: usize, out: &mut [f64]) {
        let r = self.relevance.values();
        let ej = self.embeddings.row(j);
        for (i, o) in out.iter_mut().enumerate() {
            let s = if i == j { 1.0 } else { (ej.dot(&self.embeddings.row(i)) + 1.0) / 2.0 };
            *o = r[j] * s * r[i];
        }
    }
}

/// Outcome of greedy MAP inference over item positions `0..n`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GreedySelection {
    /// Items in the order they were accepted by gain.
    pub order: Vec<usize>,
    /// Marginal gain `d^2` of each accepted item; `det(L_Y)` is their product.
    pub gains: Vec<f64>,
    /// Items appended by lowest index after gains vanished.
    pub padded: Vec<usize>,
}

impl GreedySelection {
    pub fn items(&self) -> FrameIndexSet {
        self.order.iter().chain(&self.padded).copied().collect()
    }

    pub fn log_gains(&self) -> Vec<f64> {
        self.gains.iter().map(|g| g.ln()).collect()
    }
}

/// Fast greedy MAP: repeatedly accepts the item with the largest conditional
/// variance `d_i^2`, updating each candidate's Cholesky row in place.
pub fn greedy_map<K: KernelEntries + ?Sized>(kernel: &K, k: usize) -> Result<GreedySelection, DppError> {
    let n = kernel.size();
    if n == 0 {
        return Err(DppError::Empty);
    }
    if k == 0 {
        return Err(DppError::ZeroBudget);
    }
    let budget = k.min(n);
    let diag: Vec<f64> = (0..n).map(|i| kernel.diagonal(i)).collect();
    let mut d2 = diag.clone();
    if let Some((item, &value)) = d2.iter().enumerate().find(|(_, v)| **v < -PSD_TOLERANCE) {
        return Err(DppError::NotPsd { item, value });
    }
    // cis[i * budget + t]: t-th Cholesky coefficient of item i
    let mut cis = vec![0.0; n * budget];
    let mut selected = vec![false; n];
    let mut row = vec![0.0; n];
    let mut order = Vec::with_capacity(budget);
    let mut gains = Vec::with_capacity(budget);

    for step in 0..budget {
        let mut best: Option<usize> = None;
        for i in 0..n {
            let live = !selected[i] && d2[i] > 0.0 && d2[i] > GAIN_EPSILON * diag[i];
            if live && best.is_none_or(|b| d2[i] > d2[b] + TIE_TOLERANCE * d2[b].abs()) {
                best = Some(i);
            }
        }
        let Some(j) = best else { break };
        selected[j] = true;
        order.push(j);
        gains.push(d2[j]);
        let dj = d2[j].sqrt();
        kernel.row_into(j, &mut row);
        let cj: Vec<f64> = cis[j * budget..j * budget + step].to_vec();
        for i in 0..n {
            if selected[i] {
                continue;
            }
            let ci = &cis[i * budget..i * budget + step];
            let dot: f64 = cj.iter().zip(ci).map(|(a, b)| a * b).sum();
            let e = (row[i] - dot) / dj;
            cis[i * budget + step] = e;
            d2[i] -= e * e;
            if d2[i] < -PSD_TOLERANCE {
                return Err(DppError::NotPsd { item: i, value: d2[i] });
            }
        }
    }

    let padded: Vec<usize> = (0..n).filter(|i| !selected[*i]).take(budget - order.len()).collect();
    Ok(GreedySelection { order, gains, padded })
}

/// Greedy MAP subset of `min(k, n)` item positions.
pub fn greedy_map_select(kernel: &Kernel, k: usize) -> Result<FrameIndexSet, DppError> {
    Ok(greedy_map(kernel, k)?.items())
}

/// Exact MAP by enumeration of every size-`min(k, n)` subset; the first
/// subset in lexicographic order wins ties.
pub fn brute_force_map(kernel: &Kernel, k: usize) -> Result<FrameIndexSet, DppError> {
    let n = kernel.len();
    if n == 0 {
        return Err(DppError::Empty);
    }
    if k == 0 {
        return Err(DppError::ZeroBudget);
    }
    if n > BRUTE_FORCE_LIMIT {
        return Err(DppError::TooLarge(n));
    }
    let m = k.min(n);
    let mut combo: Vec<usize> = (0..m).collect();
    let mut best = combo.clone();
    let mut best_det = kernel.subset_det(&combo);
    loop {
        let det = kernel.subset_det(&combo);
        if det > best_det + 1e-12 * best_det.abs() {
            best_det = det;
            best.clone_from(&combo);
        }
        // next combination in lexicographic order
        let Some(pos) = (0..m).rev().find(|&p| combo[p] < n - m + p) else { break };
        combo[pos] += 1;
        for q in pos + 1..m {
            combo[q] = combo[q - 1] + 1;
        }
    }
    Ok(best.into_iter().collect())
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone())
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

pub fn is_psd(m: &DMatrix<f64>) -> bool {
    min_eigenvalue(m) >= -PSD_TOLERANCE
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatioNorm {
    /// `|Y_q ∩ Y_e| / (|Y_q| + |Y_e|)`, bounded by 0.5.
    #[default]
    Sumsizes,
    /// `|Y_q ∩ Y_e| / k`.
    K,
}

/// `|y_q ∩ y_e| / (|y_q| + |y_e|)`.
pub fn intersection_ratio(y_q: &FrameIndexSet, y_e: &FrameIndexSet) -> Result<f64, DppError> {
    if y_q.is_empty() || y_e.is_empty() {
        return Err(DppError::Empty);
    }
    Ok(y_q.intersection(y_e).len() as f64 / (y_q.len() + y_e.len()) as f64)
}

impl RatioNorm {
    pub fn ratio(self, y_q: &FrameIndexSet, y_e: &FrameIndexSet, k: usize) -> Result<f64, DppError> {
        match self {
            RatioNorm::Sumsizes => intersection_ratio(y_q, y_e),
            RatioNorm::K => {
                if y_q.is_empty() || y_e.is_empty() {
                    return Err(DppError::Empty);
                }
                if k == 0 {
                    return Err(DppError::ZeroBudget);
                }
                Ok(y_q.intersection(y_e).len() as f64 / k as f64)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateResult {
    pub y_q: FrameIndexSet,
    pub y_e: FrameIndexSet,
    pub intersection: FrameIndexSet,
    pub ratio: f64,
    pub passed: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombineMode {
    #[default]
    Intersection,
    Union,
}

/// Intersection (falling back to the union when it has fewer than
/// `min_size` frames) or plain union.
pub fn combine_selections(
    y_q: &FrameIndexSet,
    y_e: &FrameIndexSet,
    mode: CombineMode,
    min_size: usize,
) -> FrameIndexSet {
    match mode {
        CombineMode::Intersection => {
            let inter = y_q.intersection(y_e);
            if inter.len() < min_size {
                y_q.union(y_e)
            } else {
                inter
            }
        }
        CombineMode::Union => y_q.union(y_e),
    }
}
