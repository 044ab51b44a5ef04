//! Similarity regularization: pixel/feature similarity matrices, thresholded
//! similarity targets, trainable layer mixing, and the arctanh similarity
//! loss.

mod loss;
mod mixer;
mod target;

pub use loss::{
    layer_similarity_op, mix_layers_op, sim_loss, sim_loss_op, similarity_pipeline,
    RowCosineSimOp, SimLossOp,
};
pub use mixer::{mix_layers, GammaMixer};
pub use target::{
    double_threshold_target, load_target_file, read_target, save_target_file, subset_target,
    threshold_target, write_target, SimilarityTarget, SubsetMode, TargetKind,
};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Number of unordered pairs over `n` items, `n*(n-1)/2`.
pub fn unordered_pair_count(n: usize) -> u64 {
    (n as u64) * (n as u64 - 1) / 2
}

/// Symmetric matrix stored as the lower triangle including the diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct SymMatrix {
    n: usize,
    tri: Vec<f32>,
}

impl SymMatrix {
    pub fn zeros(n: usize) -> Self {
        SymMatrix { n, tri: vec![0.0; n * (n + 1) / 2] }
    }

    fn idx(i: usize, j: usize) -> usize {
        let (hi, lo) = if i >= j { (i, j) } else { (j, i) };
        hi * (hi + 1) / 2 + lo
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.tri[Self::idx(i, j)]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f32) {
        self.tri[Self::idx(i, j)] = v;
    }

    /// Dense (n,n) tensor copy.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_fn(vec![self.n, self.n], |k| self.get(k / self.n, k % self.n))
    }

    /// Off-diagonal entries, one per unordered pair, `j < i` row-major.
    pub fn off_diagonal(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.n * (self.n - 1) / 2);
        for i in 1..self.n {
            for j in 0..i {
                out.push(self.get(i, j));
            }
        }
        out
    }
}

/// Center each row, normalize to unit length, and return all pairwise
/// cosines. Arithmetic is f64 end to end; only the stored result is f32.
fn centered_cosine_rows(rows: &[f32], n: usize, d: usize, context: &str) -> Result<SymMatrix> {
    if n < 2 {
        return Err(Error::invalid(context, format!("need at least 2 vectors, got {n}")));
    }
    let mut unit = vec![0.0f64; n * d];
    for i in 0..n {
        let row = &rows[i * d..(i + 1) * d];
        let mean = row.iter().map(|&x| f64::from(x)).sum::<f64>() / d as f64;
        let dst = &mut unit[i * d..(i + 1) * d];
        let mut norm_sq = 0.0f64;
        for (u, &x) in dst.iter_mut().zip(row) {
            *u = f64::from(x) - mean;
            norm_sq += *u * *u;
        }
        if norm_sq == 0.0 {
            return Err(Error::degenerate(
                context,
                format!("vector {i} is constant; its mean-subtracted form has no direction"),
            ));
        }
        let inv = 1.0 / norm_sq.sqrt();
        for u in dst.iter_mut() {
            *u *= inv;
        }
    }

    let mut out = SymMatrix::zeros(n);
    // Rows are independent; parallel fill of disjoint triangle rows keeps
    // the result identical for any thread count.
    let mut row_slices: Vec<&mut [f32]> = Vec::with_capacity(n);
    let mut rest = out.tri.as_mut_slice();
    for i in 0..n {
        let (head, tail) = rest.split_at_mut(i + 1);
        row_slices.push(head);
        rest = tail;
    }
    row_slices.par_iter_mut().enumerate().for_each(|(i, row)| {
        let ui = &unit[i * d..(i + 1) * d];
        for j in 0..i {
            let uj = &unit[j * d..(j + 1) * d];
            let mut dot = 0.0f64;
            for (a, b) in ui.iter().zip(uj) {
                dot += a * b;
            }
            row[j] = dot.clamp(-1.0, 1.0) as f32;
        }
        row[i] = 1.0;
    });
    Ok(out)
}

/// Pairwise cosine similarity of flattened, per-image mean-subtracted,
/// L2-normalized pixel vectors. Input shape (N,C,H,W); output is N x N with
/// unit diagonal.
pub fn pixel_similarity(images: &Tensor) -> Result<SymMatrix> {
    if images.rank() != 4 {
        return Err(Error::shape("pixel_similarity", format!("expected (N,C,H,W), got {:?}", images.shape())));
    }
    let n = images.shape()[0];
    let d = images.len() / n;
    centered_cosine_rows(images.data(), n, d, "pixel_similarity")
}

/// Same construction applied to a (P,F) matrix of feature vectors.
/// `label` names the source layer in diagnostics.
pub fn layer_similarity(features: &Tensor, label: &str) -> Result<SymMatrix> {
    if features.rank() != 2 {
        return Err(Error::shape("layer_similarity", format!("expected (P,F), got {:?}", features.shape())));
    }
    let p = features.shape()[0];
    let f = features.shape()[1];
    centered_cosine_rows(features.data(), p, f, &format!("layer_similarity[{label}]"))
}
