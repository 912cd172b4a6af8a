//! Joint code update by accelerated proximal gradient, and single-vector LASSO encoding.
//!
//! Both solve objectives without a `½` on the quadratic term:
//! `‖f − D c‖² + α‖c‖₁`, so soft-thresholds carry a factor `½` relative to the
//! textbook `½‖·‖²` convention.

use nalgebra::{DVectorView, Dyn, LU};

use crate::error::{ensure, Error, Result};
use crate::laplacian::{weighted_trace, GraphLaplacian};
use crate::model::{
    CodeLayout, CodeMatrix, Dictionary, FeatureMatrix, Matrix, PacingState, Vector,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepRule {
    /// Constant step; `None` estimates `1 / Lip` by power iteration.
    Fixed(Option<f64>),
    /// Armijo-style backtracking on the quadratic upper bound.
    Backtracking { shrink: f64, initial: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CodeSolverConfig {
    pub max_inner_iters: usize,
    pub step_rule: StepRule,
    /// Relative objective change that ends the inner loop.
    pub kkt_tol: f64,
    pub accelerated: bool,
}

impl Default for CodeSolverConfig {
    fn default() -> Self {
        Self {
            max_inner_iters: 200,
            step_rule: StepRule::Backtracking {
                shrink: 0.5,
                initial: 1.0,
            },
            kkt_tol: 1e-9,
            accelerated: true,
        }
    }
}

impl CodeSolverConfig {
    fn validate(&self) -> Result<()> {
        match self.step_rule {
            StepRule::Fixed(Some(t)) => {
                ensure!(
                    t > 0.0 && t.is_finite(),
                    InvalidArgument,
                    "step must be > 0"
                )
            }
            StepRule::Fixed(None) => {}
            StepRule::Backtracking { shrink, initial } => {
                ensure!(
                    shrink > 0.0 && shrink < 1.0,
                    InvalidArgument,
                    "shrink factor must lie in (0, 1)"
                );
                ensure!(initial > 0.0, InvalidArgument, "initial step must be > 0");
            }
        }
        Ok(())
    }
}

/// Elementwise `sign(x) · max(|x| − τ, 0)`.
pub fn prox_l1(x: &Matrix, tau: f64) -> Matrix {
    x.map(|v| soft_threshold(v, tau))
}

#[inline]
pub fn soft_threshold(x: f64, tau: f64) -> f64 {
    if x > tau {
        x - tau
    } else if x < -tau {
        x + tau
    } else {
        0.0
    }
}

fn l1(m: &Matrix) -> f64 {
    m.iter().map(|x| x.abs()).sum()
}

/// Everything the joint code subproblem holds fixed.
#[derive(Debug, Clone, Copy)]
pub struct CodeProblem<'a> {
    pub ds: &'a Dictionary,
    pub di: &'a Dictionary,
    pub fs: &'a FeatureMatrix,
    pub fi: &'a FeatureMatrix,
    pub pacing: &'a PacingState,
    pub lap: &'a GraphLaplacian,
    pub alpha: f64,
    pub beta: f64,
}

/// Per-term breakdown of the code objective.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CodeTerms {
    pub recon_sketch: f64,
    pub recon_image: f64,
    pub sparsity: f64,
    pub laplacian: f64,
}

impl CodeTerms {
    pub fn total(&self) -> f64 {
        self.recon_sketch + self.recon_image + self.sparsity + self.laplacian
    }
}

impl<'a> CodeProblem<'a> {
    fn k(&self) -> usize {
        self.fs.len()
    }

    fn l(&self) -> usize {
        self.fi.len()
    }

    pub fn check_dims(&self, cj: &Matrix) -> Result<()> {
        let (k, l) = (self.k(), self.l());
        let n = self.ds.n_atoms();
        ensure!(
            self.di.n_atoms() == n,
            Dimension,
            "dictionaries have {} and {} atoms",
            n,
            self.di.n_atoms()
        );
        ensure!(
            self.ds.dim() == self.fs.dim() && self.di.dim() == self.fi.dim(),
            Dimension,
            "dictionary heights do not match feature dimensions"
        );
        ensure!(
            cj.nrows() == n && cj.ncols() == k + l,
            Dimension,
            "codes are {}x{}, expected {n}x{}",
            cj.nrows(),
            cj.ncols(),
            k + l
        );
        ensure!(
            self.pacing.v_sketch.len() == k && self.pacing.v_image.len() == l,
            Dimension,
            "pacing lengths ({}, {}) do not match sample counts ({k}, {l})",
            self.pacing.v_sketch.len(),
            self.pacing.v_image.len()
        );
        ensure!(
            self.lap.size() == k + l && self.lap.sketches() == k,
            Dimension,
            "graph has {} nodes ({} sketches), expected {} ({k})",
            self.lap.size(),
            self.lap.sketches(),
            k + l
        );
        Ok(())
    }

    fn residuals(&self, cj: &Matrix) -> (Matrix, Matrix) {
        let k = self.k();
        let rs = self.ds.matrix() * cj.columns(0, k) - self.fs.matrix();
        let ri = self.di.matrix() * cj.columns(k, self.l()) - self.fi.matrix();
        (rs, ri)
    }

    fn scaled(&self, cj: &Matrix) -> Matrix {
        let v = self.pacing.joint();
        let mut cv = cj.clone();
        for (j, mut col) in cv.column_iter_mut().enumerate() {
            col *= v[j];
        }
        cv
    }

    pub fn terms(&self, cj: &Matrix) -> Result<CodeTerms> {
        self.check_dims(cj)?;
        Ok(self.terms_unchecked(cj))
    }

    fn terms_unchecked(&self, cj: &Matrix) -> CodeTerms {
        let (rs, ri) = self.residuals(cj);
        let weighted = |r: &Matrix, v: &Vector| -> f64 {
            r.column_iter()
                .zip(v.iter())
                .map(|(col, w)| w * w * col.norm_squared())
                .sum()
        };
        let laplacian = if self.beta == 0.0 {
            0.0
        } else {
            self.beta * weighted_trace(&self.scaled(cj), self.lap.laplacian())
        };
        CodeTerms {
            recon_sketch: weighted(&rs, &self.pacing.v_sketch),
            recon_image: weighted(&ri, &self.pacing.v_image),
            sparsity: self.alpha * l1(cj),
            laplacian,
        }
    }

    fn smooth(&self, cj: &Matrix) -> f64 {
        let t = self.terms_unchecked(cj);
        t.recon_sketch + t.recon_image + t.laplacian
    }

    /// Full objective: weighted reconstruction, `α‖C‖₁` and `β Tr(C V L V C^T)`.
    pub fn objective(&self, cj: &Matrix) -> Result<f64> {
        Ok(self.terms(cj)?.total())
    }

    /// Gradient of the smooth part (everything but the ℓ₁ term), `N × (K+L)`.
    pub fn gradient(&self, cj: &Matrix) -> Result<Matrix> {
        self.check_dims(cj)?;
        Ok(self.gradient_unchecked(cj))
    }

    fn gradient_unchecked(&self, cj: &Matrix) -> Matrix {
        let (k, l) = (self.k(), self.l());
        let (mut rs, mut ri) = self.residuals(cj);
        for (j, mut col) in rs.column_iter_mut().enumerate() {
            col *= 2.0 * self.pacing.v_sketch[j].powi(2);
        }
        for (j, mut col) in ri.column_iter_mut().enumerate() {
            col *= 2.0 * self.pacing.v_image[j].powi(2);
        }
        let mut g = Matrix::zeros(cj.nrows(), k + l);
        g.columns_mut(0, k)
            .copy_from(&(self.ds.matrix().transpose() * rs));
        g.columns_mut(k, l)
            .copy_from(&(self.di.matrix().transpose() * ri));
        if self.beta != 0.0 {
            let v = self.pacing.joint();
            let mut lap_term = self.scaled(cj) * self.lap.laplacian();
            for (j, mut col) in lap_term.column_iter_mut().enumerate() {
                col *= 2.0 * self.beta * v[j];
            }
            g += lap_term;
        }
        g
    }

    /// Largest eigenvalue of the smooth part's Hessian, by power iteration.
    pub fn lipschitz_estimate(&self, iters: usize) -> f64 {
        let n = self.ds.n_atoms();
        let zero = Matrix::zeros(n, self.k() + self.l());
        let g0 = self.gradient_unchecked(&zero);
        let mut x = Matrix::from_fn(n, self.k() + self.l(), |i, j| {
            1.0 + ((i * 7 + j * 13) % 11) as f64 / 11.0
        });
        let mut lambda = 0.0;
        for _ in 0..iters {
            let norm = x.norm();
            if norm == 0.0 {
                return 0.0;
            }
            x /= norm;
            let hx = self.gradient_unchecked(&x) - &g0;
            lambda = hx.dot(&x);
            x = hx;
        }
        lambda
    }
}

/// Smallest-objective iterate of an accelerated proximal gradient run.
#[derive(Debug, Clone)]
pub struct CodeUpdate {
    pub codes: CodeMatrix,
    pub objective: f64,
    pub iterations: usize,
    pub step: f64,
}

/// Accelerated proximal gradient with restart on objective increase. Never returns a
/// worse objective than the input.
pub fn update_codes(
    problem: &CodeProblem<'_>,
    cj: &CodeMatrix,
    cfg: &CodeSolverConfig,
) -> Result<CodeUpdate> {
    cfg.validate()?;
    let x0 = cj.matrix();
    problem.check_dims(x0)?;
    let alpha = problem.alpha;
    let full = |m: &Matrix| problem.smooth(m) + alpha * l1(m);

    let (mut step, shrink) = match cfg.step_rule {
        StepRule::Fixed(Some(t)) => (t, None),
        StepRule::Fixed(None) => {
            let lip = problem.lipschitz_estimate(50);
            (if lip > 0.0 { 1.0 / (1.01 * lip) } else { 1.0 }, None)
        }
        StepRule::Backtracking { shrink, initial } => (initial, Some(shrink)),
    };

    let mut x = x0.clone();
    let mut fx = full(&x);
    let mut y = x.clone();
    let mut momentum = 1.0_f64;
    let mut iterations = 0;

    while iterations < cfg.max_inner_iters {
        iterations += 1;
        let fy = problem.smooth(&y);
        let gy = problem.gradient_unchecked(&y);
        let p = loop {
            let p = prox_l1(&(&y - &gy * step), alpha * step);
            let Some(shrink) = shrink else { break p };
            let d = &p - &y;
            let bound = fy + gy.dot(&d) + d.norm_squared() / (2.0 * step);
            let fp = problem.smooth(&p);
            if fp <= bound + 1e-12 * fy.abs().max(1.0) || step < 1e-300 {
                break p;
            }
            step *= shrink;
        };
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::Solver(format!(
                "non-finite code iterate at inner step {iterations} (step {step:e})"
            )));
        }
        let fp = full(&p);
        if !fp.is_finite() {
            return Err(Error::Solver(format!(
                "non-finite code objective at inner step {iterations} (step {step:e})"
            )));
        }

        if fp > fx {
            // restart from the best point; a plain proximal step from there descends
            if momentum == 1.0 && y == x {
                break;
            }
            momentum = 1.0;
            y = x.clone();
            continue;
        }

        let rel = (fx - fp) / fx.abs().max(f64::MIN_POSITIVE);
        if cfg.accelerated {
            let next = (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt()) / 2.0;
            y = &p + (&p - &x) * ((momentum - 1.0) / next);
            momentum = next;
        } else {
            y = p.clone();
        }
        x = p;
        fx = fp;
        if rel < cfg.kkt_tol {
            break;
        }
    }

    Ok(CodeUpdate {
        codes: CodeMatrix::new(cj.layout(), x)?,
        objective: fx,
        iterations,
        step,
    })
}

/// Cached Gram matrix for repeated LASSO solves against one dictionary.
#[derive(Debug, Clone)]
pub struct LassoEncoder<'a> {
    dict: &'a Matrix,
    gram: Matrix,
    alpha: f64,
    pub kkt_tol: f64,
    pub max_sweeps: usize,
}

impl<'a> LassoEncoder<'a> {
    pub fn new(dict: &'a Matrix, alpha: f64) -> Result<Self> {
        ensure!(
            alpha >= 0.0,
            InvalidArgument,
            "alpha must be >= 0, got {alpha}"
        );
        Ok(Self {
            dict,
            gram: dict.transpose() * dict,
            alpha,
            kkt_tol: 1e-10,
            max_sweeps: 100_000,
        })
    }

    /// Minimizes `‖f − D c‖² + α‖c‖₁` by cyclic coordinate descent, then polishes the
    /// support with an exact sign-constrained solve.
    pub fn encode(&self, f: DVectorView<'_, f64>) -> Result<Vector> {
        ensure!(
            f.len() == self.dict.nrows(),
            Dimension,
            "feature length {} vs dictionary height {}",
            f.len(),
            self.dict.nrows()
        );
        let n = self.gram.nrows();
        let dtf = self.dict.transpose() * f;
        let half_alpha = self.alpha / 2.0;
        let mut c = Vector::zeros(n);
        // gc = G c, kept in sync with c
        let mut gc = Vector::zeros(n);
        let scale = dtf.amax().max(1.0);

        for _ in 0..self.max_sweeps {
            for j in 0..n {
                let gjj = self.gram[(j, j)];
                let old = c[j];
                let new = if gjj <= 0.0 {
                    0.0
                } else {
                    let rho = dtf[j] - (gc[j] - gjj * old);
                    soft_threshold(rho, half_alpha) / gjj
                };
                if new != old {
                    gc.axpy(new - old, &self.gram.column(j), 1.0);
                    c[j] = new;
                }
            }
            if self.kkt_violation_from(&c, &gc, &dtf) <= self.kkt_tol * scale {
                break;
            }
        }
        self.polish(&mut c, &dtf);
        Ok(c)
    }

    fn kkt_violation_from(&self, c: &Vector, gc: &Vector, dtf: &Vector) -> f64 {
        let mut worst: f64 = 0.0;
        for j in 0..c.len() {
            let g = 2.0 * (gc[j] - dtf[j]);
            let v = if c[j] == 0.0 {
                (g.abs() - self.alpha).max(0.0)
            } else {
                (g + self.alpha * c[j].signum()).abs()
            };
            worst = worst.max(v);
        }
        worst
    }

    /// Largest violation of the subgradient optimality conditions at `c`.
    pub fn kkt_violation(&self, f: DVectorView<'_, f64>, c: &Vector) -> f64 {
        let dtf = self.dict.transpose() * f;
        let gc = &self.gram * c;
        self.kkt_violation_from(c, &gc, &dtf)
    }

    pub fn objective(&self, f: DVectorView<'_, f64>, c: &Vector) -> f64 {
        (f - self.dict * c).norm_squared() + self.alpha * c.lp_norm(1)
    }

    fn objective_from(&self, c: &Vector, dtf: &Vector) -> f64 {
        // ‖f‖² omitted: only differences matter here
        (c.dot(&(&self.gram * c)) - 2.0 * c.dot(dtf)) + self.alpha * c.lp_norm(1)
    }

    /// Re-solves on the current support with fixed signs; keeps the result when it is
    /// sign-consistent and no worse.
    fn polish(&self, c: &mut Vector, dtf: &Vector) {
        let support: Vec<usize> = (0..c.len()).filter(|&j| c[j] != 0.0).collect();
        if support.is_empty() {
            return;
        }
        let s = support.len();
        let g = Matrix::from_fn(s, s, |a, b| self.gram[(support[a], support[b])]);
        let rhs = Vector::from_fn(s, |a, _| {
            dtf[support[a]] - self.alpha / 2.0 * c[support[a]].signum()
        });
        let Some(sol) = LU::<f64, Dyn, Dyn>::new(g).solve(&rhs) else {
            return;
        };
        if sol
            .iter()
            .zip(&support)
            .any(|(x, &j)| !x.is_finite() || x.signum() != c[j].signum() || *x == 0.0)
        {
            return;
        }
        let mut candidate = Vector::zeros(c.len());
        for (x, &j) in sol.iter().zip(&support) {
            candidate[j] = *x;
        }
        if self.objective_from(&candidate, dtf) <= self.objective_from(c, dtf) {
            *c = candidate;
        }
    }
}

/// One-shot `argmin_c ‖f − D c‖² + α‖c‖₁`.
pub fn lasso_encode(d: &Dictionary, f: &Vector, alpha: f64) -> Result<Vector> {
    LassoEncoder::new(d.matrix(), alpha)?.encode(f.as_view())
}

/// Wraps a plain code matrix as a joint one for `problem`.
pub fn joint_codes(problem: &CodeProblem<'_>, codes: Matrix) -> Result<CodeMatrix> {
    CodeMatrix::new(
        CodeLayout::Joint {
            sketches: problem.fs.len(),
        },
        codes,
    )
}
