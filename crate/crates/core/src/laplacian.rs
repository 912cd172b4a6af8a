//! Joint sketch/image affinity graph and its Laplacian.

use rayon::prelude::*;

use crate::error::{ensure, Result};
use crate::model::{CodeMatrix, FeatureMatrix, GroupAssignment, Matrix, PacingState};

/// Weight matrix `W` over the `K + L` joint samples (sketches first) and `L = D − W`.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphLaplacian {
    sketches: usize,
    weights: Matrix,
    laplacian: Matrix,
}

impl GraphLaplacian {
    /// Builds from a symmetric nonnegative weight matrix. The diagonal is zeroed.
    pub fn from_weights(sketches: usize, mut weights: Matrix) -> Result<Self> {
        ensure!(
            weights.is_square(),
            Dimension,
            "weight matrix must be square"
        );
        ensure!(
            sketches <= weights.nrows(),
            Dimension,
            "sketch count {sketches} exceeds graph size {}",
            weights.nrows()
        );
        let n = weights.nrows();
        for p in 0..n {
            weights[(p, p)] = 0.0;
            for q in 0..p {
                ensure!(
                    weights[(p, q)] == weights[(q, p)],
                    Data,
                    "weights not symmetric at ({p}, {q})"
                );
                ensure!(
                    weights[(p, q)] >= 0.0 && weights[(p, q)].is_finite(),
                    Data,
                    "weight ({p}, {q}) = {} is not a finite nonnegative number",
                    weights[(p, q)]
                );
            }
        }
        let mut laplacian = -&weights;
        for p in 0..n {
            laplacian[(p, p)] = weights.row(p).sum();
        }
        Ok(Self {
            sketches,
            weights,
            laplacian,
        })
    }

    /// Recovers the graph from a persisted Laplacian (`W = −L` off the diagonal).
    pub fn from_laplacian(sketches: usize, laplacian: &Matrix) -> Result<Self> {
        ensure!(laplacian.is_square(), Dimension, "Laplacian must be square");
        let mut w = -laplacian;
        for p in 0..w.nrows() {
            w[(p, p)] = 0.0;
        }
        w.iter_mut().for_each(|x| {
            if *x == 0.0 {
                *x = 0.0;
            }
        });
        Self::from_weights(sketches, w)
    }

    pub fn size(&self) -> usize {
        self.weights.nrows()
    }

    pub fn sketches(&self) -> usize {
        self.sketches
    }

    pub fn images(&self) -> usize {
        self.size() - self.sketches
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn laplacian(&self) -> &Matrix {
        &self.laplacian
    }

    /// Degree `d_pp = Σ_q w_pq`.
    pub fn degree(&self, p: usize) -> f64 {
        self.laplacian[(p, p)]
    }
}

fn gaussian_block(f: &Matrix, sigma: f64) -> Vec<f64> {
    let n = f.ncols();
    let denom = 2.0 * sigma * sigma;
    let mut out = vec![0.0; n * n];
    out.par_chunks_mut(n).enumerate().for_each(|(p, row)| {
        let fp = f.column(p);
        for (q, w) in row.iter_mut().enumerate() {
            if q != p {
                let d2 = (fp - f.column(q)).norm_squared();
                *w = (-d2 / denom).exp();
            }
        }
    });
    out
}

/// Gaussian-kernel weights within each modality, group co-membership across modalities.
pub fn build_weights(
    fs: &FeatureMatrix,
    fi: &FeatureMatrix,
    groups_s: &GroupAssignment,
    groups_i: &GroupAssignment,
    sigma: f64,
) -> Result<GraphLaplacian> {
    ensure!(
        sigma > 0.0,
        InvalidArgument,
        "sigma must be > 0, got {sigma}"
    );
    ensure!(
        groups_s.len() == fs.len(),
        Dimension,
        "{} sketch groups for {} sketches",
        groups_s.len(),
        fs.len()
    );
    ensure!(
        groups_i.len() == fi.len(),
        Dimension,
        "{} image groups for {} images",
        groups_i.len(),
        fi.len()
    );
    let (k, l) = (fs.len(), fi.len());
    let n = k + l;
    let mut w = Matrix::zeros(n, n);

    let ws = gaussian_block(fs.matrix(), sigma);
    for p in 0..k {
        for q in 0..k {
            w[(p, q)] = ws[p * k + q];
        }
    }
    let wi = gaussian_block(fi.matrix(), sigma);
    for p in 0..l {
        for q in 0..l {
            w[(k + p, k + q)] = wi[p * l + q];
        }
    }
    for p in 0..k {
        for q in 0..l {
            if groups_s.group(p) == groups_i.group(q) {
                w[(p, k + q)] = 1.0;
                w[(k + q, p)] = 1.0;
            }
        }
    }
    GraphLaplacian::from_weights(k, w)
}

/// `Tr(C V L V^T C^T)` for the joint codes and pacing weights.
pub fn laplacian_quadform(lap: &GraphLaplacian, cj: &CodeMatrix, v: &PacingState) -> Result<f64> {
    let vj = v.joint();
    ensure!(
        cj.len() == lap.size() && vj.len() == lap.size(),
        Dimension,
        "codes width {}, pacing length {}, graph size {}",
        cj.len(),
        vj.len(),
        lap.size()
    );
    let mut cv = cj.matrix().clone();
    for (j, mut col) in cv.column_iter_mut().enumerate() {
        col *= vj[j];
    }
    Ok(weighted_trace(&cv, lap.laplacian()))
}

/// `Tr(M L M^T)` without forming the product's off-diagonal.
pub(crate) fn weighted_trace(m: &Matrix, lap: &Matrix) -> f64 {
    let ml = m * lap;
    ml.component_mul(m).sum()
}
