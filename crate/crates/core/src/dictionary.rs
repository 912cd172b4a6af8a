//! Pacing-weighted dictionary update under unit-norm column constraints.
//!
//! With `F̃ = F V`, `C̃ = C V` the problem is `min ‖F̃ − D C̃‖²_F s.t. ‖d_j‖ ≤ 1`.
//! Its Lagrange dual in the multipliers `λ ≥ 0` is smooth and concave:
//! `g(λ) = ‖F̃‖² − tr(B (A + Λ)⁻¹ Bᵀ) − Σ λ_j` with `A = C̃C̃ᵀ`, `B = F̃C̃ᵀ`,
//! and the primal solution is `D = B (A + Λ)⁻¹`. We maximize `g` by projected
//! Newton and fall back to accelerated projected gradient on the primal.

use nalgebra::Cholesky;

use crate::error::{ensure, Result};
use crate::model::{Dictionary, FeatureMatrix, Matrix, Vector, ATOM_NORM_TOL};

const RIDGE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DictionarySolverConfig {
    pub max_newton_iters: usize,
    /// Largest tolerated dual-gradient violation `|‖d_j‖² − 1|` on active atoms.
    pub dual_tol: f64,
    pub max_fallback_iters: usize,
}

impl Default for DictionarySolverConfig {
    fn default() -> Self {
        Self {
            max_newton_iters: 200,
            dual_tol: 1e-12,
            max_fallback_iters: 20_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DictionaryMethod {
    Dual,
    ProjectedGradient,
    /// Weighted codes vanish; the input is returned.
    Unchanged,
}

#[derive(Debug, Clone)]
pub struct DictionaryUpdate {
    pub dictionary: Dictionary,
    /// Weighted reconstruction `‖(F − D C) V‖²_F` at the returned dictionary.
    pub objective: f64,
    /// Atoms unused by every weighted code; their columns are carried over.
    pub dead_atoms: Vec<usize>,
    pub method: DictionaryMethod,
}

/// `‖(F − D C) V‖²_F`.
pub fn weighted_residual(f: &Matrix, d: &Matrix, c: &Matrix, v: &Vector) -> f64 {
    let r = f - d * c;
    r.column_iter()
        .zip(v.iter())
        .map(|(col, w)| w * w * col.norm_squared())
        .sum()
}

/// Solves the norm-constrained weighted least-squares problem for one modality.
pub fn update_dictionary(
    f: &FeatureMatrix,
    c: &Matrix,
    v: &Vector,
    current: &Dictionary,
    cfg: &DictionarySolverConfig,
) -> Result<DictionaryUpdate> {
    let n = current.n_atoms();
    ensure!(
        c.nrows() == n && c.ncols() == f.len() && v.len() == f.len(),
        Dimension,
        "codes {}x{} and {} weights for {} atoms, {} samples",
        c.nrows(),
        c.ncols(),
        v.len(),
        n,
        f.len()
    );
    ensure!(
        current.dim() == f.dim(),
        Dimension,
        "dictionary height {} vs feature dimension {}",
        current.dim(),
        f.dim()
    );
    ensure!(
        v.iter().all(|w| (0.0..=1.0).contains(w)),
        InvalidArgument,
        "pacing weights must lie in [0, 1]"
    );

    let before = weighted_residual(f.matrix(), current.matrix(), c, v);
    let unchanged = |dead| DictionaryUpdate {
        dictionary: current.clone(),
        objective: before,
        dead_atoms: dead,
        method: DictionaryMethod::Unchanged,
    };

    // samples with zero weight are dropped outright
    let active: Vec<usize> = (0..v.len()).filter(|&j| v[j] != 0.0).collect();
    let m = f.dim();
    let ft = Matrix::from_fn(m, active.len(), |i, a| {
        f.matrix()[(i, active[a])] * v[active[a]]
    });
    let ct = Matrix::from_fn(n, active.len(), |i, a| c[(i, active[a])] * v[active[a]]);

    let live: Vec<usize> = (0..n)
        .filter(|&i| ct.row(i).iter().any(|x| *x != 0.0))
        .collect();
    let dead: Vec<usize> = (0..n).filter(|i| !live.contains(i)).collect();
    if live.is_empty() {
        return Ok(unchanged(dead));
    }

    let ct_live = Matrix::from_fn(live.len(), ct.ncols(), |a, j| ct[(live[a], j)]);
    let a = &ct_live * ct_live.transpose();
    let b = &ft * ct_live.transpose();

    let (solved, method) = match solve_dual(&a, &b, cfg) {
        Some(d) => (d, DictionaryMethod::Dual),
        None => {
            let mut start = Matrix::zeros(m, live.len());
            for (col, &i) in live.iter().enumerate() {
                start.set_column(col, &current.matrix().column(i));
            }
            (
                projected_gradient(&a, &b, start, cfg.max_fallback_iters),
                DictionaryMethod::ProjectedGradient,
            )
        }
    };

    let mut atoms = current.matrix().clone();
    for (col, &i) in live.iter().enumerate() {
        atoms.set_column(i, &solved.column(col));
    }
    let dictionary = Dictionary::from_projected(current.modality(), atoms)?;
    let after = weighted_residual(f.matrix(), dictionary.matrix(), c, v);
    if after > before {
        return Ok(unchanged(dead));
    }
    Ok(DictionaryUpdate {
        dictionary,
        objective: after,
        dead_atoms: dead,
        method,
    })
}

struct DualPoint {
    value: f64,
    grad: Vector,
    d: Matrix,
    inv: Matrix,
}

fn eval_dual(a: &Matrix, b: &Matrix, lambda: &Vector) -> Option<DualPoint> {
    let n = a.nrows();
    let mut k = a.clone();
    for j in 0..n {
        k[(j, j)] += lambda[j] + RIDGE;
    }
    let chol = Cholesky::new(k)?;
    let inv = chol.inverse();
    let d = b * &inv;
    let value = -(d.component_mul(b)).sum() - lambda.sum();
    let grad = Vector::from_fn(n, |j, _| d.column(j).norm_squared() - 1.0);
    if !value.is_finite() {
        return None;
    }
    Some(DualPoint {
        value,
        grad,
        d,
        inv,
    })
}

/// Projected Newton ascent on the dual. `None` when it fails to reach `dual_tol`.
fn solve_dual(a: &Matrix, b: &Matrix, cfg: &DictionarySolverConfig) -> Option<Matrix> {
    let n = a.nrows();
    let mut lambda = Vector::zeros(n);
    let mut pt = eval_dual(a, b, &lambda)?;

    for _ in 0..cfg.max_newton_iters {
        let violation = (0..n)
            .map(|j| {
                if lambda[j] > 0.0 {
                    pt.grad[j].abs()
                } else {
                    pt.grad[j].max(0.0)
                }
            })
            .fold(0.0, f64::max);
        if violation <= cfg.dual_tol {
            return Some(pt.d);
        }

        let free: Vec<usize> = (0..n)
            .filter(|&j| lambda[j] > 0.0 || pt.grad[j] > 0.0)
            .collect();
        // Hessian of g on the free set: −2 (M BᵀB M) ∘ M, negative definite
        let bm = &pt.d;
        let gram = bm.transpose() * bm;
        let h = Matrix::from_fn(free.len(), free.len(), |p, q| {
            let (i, j) = (free[p], free[q]);
            2.0 * gram[(i, j)] * pt.inv[(i, j)]
        });
        let g_free = Vector::from_fn(free.len(), |p, _| pt.grad[free[p]]);
        let step_free = match Cholesky::new(h) {
            Some(ch) => ch.solve(&g_free),
            None => g_free.clone(),
        };
        let mut direction = Vector::zeros(n);
        for (p, &j) in free.iter().enumerate() {
            direction[j] = step_free[p];
        }

        let search = |direction: &Vector| {
            let mut t = 1.0;
            while t > 1e-14 {
                let trial = (&lambda + direction * t).map(|x| x.max(0.0));
                let gain = pt.grad.dot(&(&trial - &lambda));
                if gain > 0.0 {
                    if let Some(next) = eval_dual(a, b, &trial) {
                        if next.value >= pt.value + 1e-4 * gain {
                            return Some((trial, next));
                        }
                    }
                }
                t *= 0.5;
            }
            None
        };
        let Some((trial, next)) = search(&direction).or_else(|| {
            let grad_dir = Vector::from_fn(n, |j, _| {
                if lambda[j] > 0.0 || pt.grad[j] > 0.0 {
                    pt.grad[j]
                } else {
                    0.0
                }
            });
            search(&grad_dir)
        }) else {
            break;
        };
        lambda = trial;
        pt = next;
    }
    let feasible =
        pt.d.column_iter()
            .all(|c| c.norm_squared() <= 1.0 + cfg.dual_tol.max(1e-10));
    feasible.then_some(pt.d)
}

/// Accelerated projected gradient on `‖F̃‖² − 2 tr(Dᵀ B) + tr(D A Dᵀ)` over unit-ball columns.
fn projected_gradient(a: &Matrix, b: &Matrix, start: Matrix, iters: usize) -> Matrix {
    let lip = 2.0
        * nalgebra::SymmetricEigen::new(a.clone())
            .eigenvalues
            .max()
            .max(RIDGE);
    let step = 1.0 / lip;
    let project = |mut d: Matrix| {
        for mut col in d.column_iter_mut() {
            let norm = col.norm();
            if norm > 1.0 {
                col /= norm;
            }
        }
        d
    };
    let mut x = project(start);
    let mut y = x.clone();
    let mut t = 1.0_f64;
    for _ in 0..iters {
        let grad = (&y * a - b) * 2.0;
        let next = project(&y - grad * step);
        let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
        y = &next + (&next - &x) * ((t - 1.0) / t_next);
        if (&next - &x).amax() < 1e-15 {
            x = next;
            break;
        }
        x = next;
        t = t_next;
    }
    x
}

/// Column norm excess and largest stationarity residual among interior atoms.
pub fn kkt_report(f: &Matrix, d: &Matrix, c: &Matrix, v: &Vector) -> (f64, f64) {
    let v2 = v.map(|w| w * w);
    let mut r = d * c - f;
    for (j, mut col) in r.column_iter_mut().enumerate() {
        col *= 2.0 * v2[j];
    }
    let grad = r * c.transpose();
    let mut excess: f64 = 0.0;
    let mut stationarity: f64 = 0.0;
    for j in 0..d.ncols() {
        let norm = d.column(j).norm();
        excess = excess.max(norm - 1.0);
        if norm < 1.0 - 1e-6 {
            stationarity = stationarity.max(grad.column(j).amax());
        }
    }
    (excess.max(0.0), stationarity)
}

/// Accepts the tolerance used by the constructor for reporting.
pub const NORM_TOL: f64 = ATOM_NORM_TOL;
