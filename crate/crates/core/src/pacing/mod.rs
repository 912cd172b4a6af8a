//! Joint update of the pacing weights `v` and curriculum slacks `ξ`.
//!
//! With dictionaries and codes fixed, the problem in `y = [v^S | v^I | ξ^S | ξ^I]`
//! is the QP `min yᵀ R y + bᵀ y s.t. G y ≤ h`, where `R` is zero outside its
//! leading `(K+L) × (K+L)` block.

pub mod qp;

use log::warn;

use crate::error::{ensure, Error, Result};
use crate::laplacian::GraphLaplacian;
use crate::model::{
    CodeMatrix, Constraint, CurriculumConstraintSet, Dictionary, FeatureMatrix, GroupAssignment,
    LaplacianForm, Matrix, Modality, PacingState, Regularizer, Vector,
};

pub use qp::{QpMethod, QpSettings};

/// Squared reconstruction residual of every sample in its own modality.
pub fn per_sample_losses(
    ds: &Dictionary,
    di: &Dictionary,
    cj: &CodeMatrix,
    fs: &FeatureMatrix,
    fi: &FeatureMatrix,
) -> Result<(Vector, Vector)> {
    let k = fs.len();
    ensure!(
        cj.len() == k + fi.len() && cj.sketch_count() == k,
        Dimension,
        "codes cover {} samples ({} sketches), expected {} ({k})",
        cj.len(),
        cj.sketch_count(),
        k + fi.len()
    );
    ensure!(
        ds.n_atoms() == cj.n_atoms() && di.n_atoms() == cj.n_atoms(),
        Dimension,
        "dictionary sizes ({}, {}) vs code height {}",
        ds.n_atoms(),
        di.n_atoms(),
        cj.n_atoms()
    );
    ensure!(
        ds.dim() == fs.dim() && di.dim() == fi.dim(),
        Dimension,
        "dictionary heights do not match feature dimensions"
    );
    let codes = cj.matrix();
    let loss = |d: &Matrix, f: &Matrix, offset: usize| {
        let r = f - d * codes.columns(offset, f.ncols());
        Vector::from_iterator(f.ncols(), r.column_iter().map(|c| c.norm_squared()))
    };
    Ok((
        loss(ds.matrix(), fs.matrix(), 0),
        loss(di.matrix(), fi.matrix(), k),
    ))
}

/// Pace-dependent settings of one QP assembly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PaceParams {
    pub beta: f64,
    pub gamma: f64,
    pub mu: f64,
    pub regularizer: Regularizer,
    pub form: LaplacianForm,
    /// Literal `−(γ/2) Q(v)` for regularizer B (diagonal `−γ/2`, linear `+γ`).
    pub literal_sp_b: bool,
}

/// `f_SP` evaluated at the given weights.
pub fn self_paced_value(
    v_sketch: &Vector,
    v_image: &Vector,
    groups: Option<(&GroupAssignment, &GroupAssignment)>,
    gamma: f64,
    regularizer: Regularizer,
    literal_sp_b: bool,
) -> Result<f64> {
    match regularizer {
        Regularizer::A => {
            let (gs, gi) = groups.ok_or_else(|| {
                Error::InvalidArgument("regularizer A needs group assignments".into())
            })?;
            check_groups(gs, gi, v_sketch.len(), v_image.len())?;
            let sum = |v: &Vector, g: &GroupAssignment| -> f64 {
                v.iter()
                    .enumerate()
                    .map(|(i, x)| x / g.group_size_of(i) as f64)
                    .sum()
            };
            Ok(-gamma * (sum(v_sketch, gs) + sum(v_image, gi)))
        }
        Regularizer::B => {
            let q: f64 = v_sketch
                .iter()
                .chain(v_image.iter())
                .map(|v| v * v - 2.0 * v)
                .sum();
            let sign = if literal_sp_b { -1.0 } else { 1.0 };
            Ok(sign * gamma / 2.0 * q)
        }
    }
}

fn check_groups(gs: &GroupAssignment, gi: &GroupAssignment, k: usize, l: usize) -> Result<()> {
    ensure!(
        gs.len() == k && gi.len() == l,
        Data,
        "group assignments cover ({}, {}) samples, expected ({k}, {l})",
        gs.len(),
        gi.len()
    );
    Ok(())
}

/// The assembled QP. `R`'s nonzero block and `b`'s pacing part are stored densely; the
/// inequality system is kept structurally and expanded on demand.
#[derive(Debug, Clone)]
pub struct PacingQp {
    sketches: usize,
    images: usize,
    r_block: Matrix,
    b_pacing: Vector,
    mu: f64,
    /// Constraints in slack order: all sketch constraints, then all image constraints.
    ordered: Vec<Constraint>,
    /// `ordered[i]` is constraint id `slack_ids[i]` of the input set.
    slack_ids: Vec<usize>,
}

impl PacingQp {
    pub fn n_pacing(&self) -> usize {
        self.sketches + self.images
    }

    pub fn n_slacks(&self) -> usize {
        self.ordered.len()
    }

    pub fn n_vars(&self) -> usize {
        self.n_pacing() + self.n_slacks()
    }

    /// Leading `(K+L) × (K+L)` block of `R`.
    pub fn r_block(&self) -> &Matrix {
        &self.r_block
    }

    pub fn r(&self) -> Matrix {
        let mut r = Matrix::zeros(self.n_vars(), self.n_vars());
        r.view_mut((0, 0), (self.n_pacing(), self.n_pacing()))
            .copy_from(&self.r_block);
        r
    }

    pub fn b(&self) -> Vector {
        let mut b = Vector::from_element(self.n_vars(), self.mu);
        b.rows_mut(0, self.n_pacing()).copy_from(&self.b_pacing);
        b
    }

    fn pairs(&self) -> Vec<(usize, usize)> {
        self.ordered
            .iter()
            .map(|c| {
                let off = match c.modality {
                    Modality::Sketch => 0,
                    Modality::Image => self.sketches,
                };
                (off + c.hard, off + c.easy)
            })
            .collect()
    }

    /// Dense `(G, h)` with `2(K+L) + 2(C^S+C^I)` rows: `v ≤ 1`, `−v ≤ 0`, `−ξ ≤ 0`,
    /// `v_hard − v_easy − ξ ≤ 0`.
    pub fn inequalities(&self) -> (Matrix, Vector) {
        let (n, c) = (self.n_pacing(), self.n_slacks());
        let mut g = Matrix::zeros(2 * n + 2 * c, n + c);
        let mut h = Vector::zeros(2 * n + 2 * c);
        for i in 0..n {
            g[(i, i)] = 1.0;
            h[i] = 1.0;
            g[(n + i, i)] = -1.0;
        }
        for (k, (hard, easy)) in self.pairs().into_iter().enumerate() {
            g[(2 * n + k, n + k)] = -1.0;
            let row = 2 * n + c + k;
            g[(row, hard)] = 1.0;
            g[(row, easy)] = -1.0;
            g[(row, n + k)] = -1.0;
        }
        (g, h)
    }

    /// `yᵀ R y + bᵀ y` at a pacing state.
    pub fn objective(&self, state: &PacingState) -> f64 {
        let v = state.joint();
        let xi: f64 = self.slack_ids.iter().map(|&id| state.slacks[id]).sum();
        v.dot(&(&self.r_block * &v)) + self.b_pacing.dot(&v) + self.mu * xi
    }
}

/// Builds `R`, `b` and the constraint structure for the current codes and pace.
pub fn assemble_qp(
    losses: (&Vector, &Vector),
    cj: &CodeMatrix,
    lap: &GraphLaplacian,
    groups: Option<(&GroupAssignment, &GroupAssignment)>,
    constraints: &CurriculumConstraintSet,
    params: &PaceParams,
) -> Result<PacingQp> {
    let (ls, li) = losses;
    let (k, l) = (ls.len(), li.len());
    let n = k + l;
    ensure!(params.gamma >= 0.0, InvalidArgument, "gamma must be >= 0");
    ensure!(params.mu >= 0.0, InvalidArgument, "mu must be >= 0");
    ensure!(
        cj.len() == n && lap.size() == n && lap.sketches() == k,
        Dimension,
        "codes ({}), graph ({}) and losses ({n}) disagree",
        cj.len(),
        lap.size()
    );
    constraints.validate(k, l)?;

    let mut r = Matrix::zeros(n, n);
    for p in 0..k {
        r[(p, p)] = ls[p];
    }
    for q in 0..l {
        r[(k + q, k + q)] = li[q];
    }
    if params.beta != 0.0 {
        let codes = cj.matrix();
        let gram = codes.transpose() * codes;
        let w = lap.weights();
        match params.form {
            LaplacianForm::Paper => {
                for p in 0..n {
                    for q in 0..n {
                        if p != q && w[(p, q)] != 0.0 {
                            let dist = gram[(p, p)] + gram[(q, q)] - 2.0 * gram[(p, q)];
                            r[(p, q)] += params.beta * w[(p, q)] * dist.max(0.0);
                        }
                    }
                }
            }
            LaplacianForm::Exact => {
                let lmat = lap.laplacian();
                for p in 0..n {
                    for q in 0..n {
                        r[(p, q)] += params.beta * lmat[(p, q)] * gram[(p, q)];
                    }
                }
            }
        }
        // exact symmetry regardless of summation order
        for p in 0..n {
            for q in 0..p {
                let avg = 0.5 * (r[(p, q)] + r[(q, p)]);
                r[(p, q)] = avg;
                r[(q, p)] = avg;
            }
        }
    }

    let gamma = params.gamma;
    let b_pacing = match params.regularizer {
        Regularizer::A => {
            let (gs, gi) = groups.ok_or_else(|| {
                Error::InvalidArgument("regularizer A needs group assignments".into())
            })?;
            check_groups(gs, gi, k, l)?;
            Vector::from_fn(n, |p, _| {
                let size = if p < k {
                    gs.group_size_of(p)
                } else {
                    gi.group_size_of(p - k)
                };
                -gamma / size as f64
            })
        }
        Regularizer::B => {
            let (diag, lin) = if params.literal_sp_b {
                (-gamma / 2.0, gamma)
            } else {
                (gamma / 2.0, -gamma)
            };
            for p in 0..n {
                r[(p, p)] += diag;
            }
            Vector::from_element(n, lin)
        }
    };

    let mut ordered = Vec::with_capacity(constraints.len());
    let mut slack_ids = Vec::with_capacity(constraints.len());
    for modality in [Modality::Sketch, Modality::Image] {
        for (id, c) in constraints.iter().enumerate() {
            if c.modality == modality {
                ordered.push(*c);
                slack_ids.push(id);
            }
        }
    }

    Ok(PacingQp {
        sketches: k,
        images: l,
        r_block: r,
        b_pacing,
        mu: params.mu,
        ordered,
        slack_ids,
    })
}

#[derive(Debug, Clone)]
pub struct PacingSolution {
    pub state: PacingState,
    pub objective: f64,
    pub converged: bool,
    pub method: QpMethod,
    pub iterations: usize,
}

/// Solves the pacing QP. The result is always feasible; `converged = false` flags an
/// iteration limit, in which case the best feasible iterate is returned.
pub fn solve_pacing(
    qp: &PacingQp,
    warm: Option<&PacingState>,
    settings: &QpSettings,
) -> Result<PacingSolution> {
    let pairs = qp.pairs();
    let weights = Vector::from_element(pairs.len(), qp.mu);
    let problem = qp::OrderedBoxQp {
        r: &qp.r_block,
        b: &qp.b_pacing,
        pairs: &pairs,
        weights: &weights,
    };
    let warm_v = warm.map(PacingState::joint);
    if let Some(w) = &warm_v {
        ensure!(
            w.len() == qp.n_pacing(),
            Dimension,
            "warm start has {} weights, expected {}",
            w.len(),
            qp.n_pacing()
        );
    }
    let sol = qp::solve(&problem, warm_v.as_ref(), settings);
    if !sol.converged {
        warn!(
            "pacing QP stopped after {} iterations without converging ({:?})",
            sol.iterations, sol.method
        );
    }
    let k = qp.sketches;
    let mut slacks = vec![0.0; qp.n_slacks()];
    for (pos, &id) in qp.slack_ids.iter().enumerate() {
        slacks[id] = sol.slacks[pos];
    }
    let state = PacingState {
        v_sketch: sol.v.rows(0, k).into_owned(),
        v_image: sol.v.rows(k, qp.images).into_owned(),
        slacks,
    };
    Ok(PacingSolution {
        objective: sol.objective,
        state,
        converged: sol.converged,
        method: sol.method,
        iterations: sol.iterations,
    })
}

/// `γ ← η γ`.
pub fn advance_pace(gamma: f64, eta: f64) -> Result<f64> {
    ensure!(
        eta > 1.0,
        InvalidArgument,
        "pace step must exceed 1, got {eta}"
    );
    Ok(gamma * eta)
}
