//! Interior-point solver for box-constrained QPs with slack-relaxed ordering rows:
//!
//! ```text
//! min  vᵀ R v + bᵀ v + Σ_c μ_c ξ_c
//! s.t. 0 ≤ v ≤ 1,  ξ ≥ 0,  v_hard(c) − v_easy(c) − ξ_c ≤ 0
//! ```
//!
//! Each slack touches exactly two inequality rows, so the slack block of the
//! Newton matrix is diagonal and is eliminated; every iteration factors one
//! dense `n × n` Schur complement.

use nalgebra::{Cholesky, SymmetricEigen};

use crate::model::{Matrix, Vector};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpSettings {
    pub max_iters: usize,
    pub tol: f64,
    pub max_prox_iters: usize,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            max_iters: 200,
            tol: 1e-11,
            max_prox_iters: 500,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpMethod {
    InteriorPoint,
    /// Successive convex majorizations for indefinite `R`: with `R = R₊ − R₋` split by
    /// eigenvalue sign, the concave part is linearized at the current iterate.
    ConvexConcave,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub v: Vector,
    pub slacks: Vector,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub method: QpMethod,
}

/// Problem data; `pairs[c] = (hard, easy)` indexes into `v`.
#[derive(Debug, Clone, Copy)]
pub struct OrderedBoxQp<'a> {
    pub r: &'a Matrix,
    pub b: &'a Vector,
    pub pairs: &'a [(usize, usize)],
    pub weights: &'a Vector,
}

impl OrderedBoxQp<'_> {
    pub fn objective(&self, v: &Vector, slacks: &Vector) -> f64 {
        v.dot(&(self.r * v)) + self.b.dot(v) + self.weights.dot(slacks)
    }

    /// Smallest feasible slacks for `v`.
    pub fn tight_slacks(&self, v: &Vector) -> Vector {
        Vector::from_iterator(
            self.pairs.len(),
            self.pairs.iter().map(|&(h, e)| (v[h] - v[e]).max(0.0)),
        )
    }

    /// Clips `v` into the box and tightens slacks, making the point exactly feasible.
    fn repair(&self, v: &Vector, slacks: &Vector) -> (Vector, Vector) {
        let v = v.map(|x| x.clamp(0.0, 1.0));
        let tight = self.tight_slacks(&v);
        let slacks = Vector::from_fn(slacks.len(), |c, _| slacks[c].max(tight[c]));
        (v, slacks)
    }
}

pub fn min_eigenvalue(r: &Matrix) -> f64 {
    if r.nrows() == 0 {
        return 0.0;
    }
    SymmetricEigen::new(r.clone()).eigenvalues.min()
}

/// Global minimizer when `R` is PSD; a KKT point otherwise.
pub fn solve(qp: &OrderedBoxQp<'_>, warm: Option<&Vector>, settings: &QpSettings) -> QpSolution {
    let n = qp.r.nrows();
    let scale = qp.r.amax().max(1.0);
    let eig = (n > 0).then(|| SymmetricEigen::new(qp.r.clone()));
    let lambda_min = eig.as_ref().map_or(0.0, |e| e.eigenvalues.min());
    if lambda_min >= -1e-12 * scale {
        let ip = interior_point(qp, settings);
        let (v, xi) = polish(qp, &ip);
        return finalize(
            qp,
            v,
            xi,
            ip.iterations,
            ip.converged,
            QpMethod::InteriorPoint,
        );
    }

    // R₋ collects the negative curvature; a small proximal term keeps every
    // subproblem strictly convex
    let eig = eig.expect("nonempty when indefinite");
    let neg = eig.eigenvalues.map(|l| (-l).max(0.0));
    let mut concave =
        &eig.eigenvectors * Matrix::from_diagonal(&neg) * eig.eigenvectors.transpose();
    let prox = 1e-6 * scale;
    for i in 0..n {
        concave[(i, i)] += prox;
    }
    let mut convex = qp.r + &concave;
    convex = (&convex + convex.transpose()) * 0.5;

    // the majorization only finds a local minimum; restart from the warm point and
    // both box corners and keep the best
    let mut starts = vec![
        warm.cloned()
            .unwrap_or_else(|| Vector::from_element(n, 0.5)),
        Vector::zeros(n),
        Vector::from_element(n, 1.0),
    ];
    // small problems also run out from the box center along the most negative
    // curvature directions; on large ones the extra descents dominate training time
    let mut negative: Vec<usize> = (0..n)
        .filter(|&k| eig.eigenvalues[k] < -1e-12 * scale)
        .collect();
    negative.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    for &k in negative.iter().take(if n <= SMALL_CURVATURE_LIMIT {
        CURVATURE_STARTS
    } else {
        0
    }) {
        let dir = eig.eigenvectors.column(k);
        let reach = 0.5 / dir.amax().max(1e-15);
        for sign in [1.0, -1.0] {
            starts.push(dir.map(|d| (0.5 + sign * reach * d).clamp(0.0, 1.0)));
        }
    }
    // small problems can afford every vertex of the box
    if n <= SMALL_VERTEX_LIMIT {
        for mask in 1..(1usize << n) - 1 {
            starts.push(Vector::from_fn(n, |i, _| ((mask >> i) & 1) as f64));
        }
    }
    let mut best: Option<Descent> = None;
    let mut total_iters = 0;
    for start in starts {
        let run = convex_concave(qp, &convex, &concave, start, settings);
        total_iters += run.iterations;
        if best.as_ref().is_none_or(|b| run.value < b.value) {
            best = Some(run);
        }
    }
    let mut best = best.expect("at least one start");
    // a KKT point can still have negative curvature among its free coordinates; step
    // along it to the box boundary and descend again while that helps
    for _ in 0..n {
        let Some(start) = escape(qp, &best.v) else {
            break;
        };
        let run = convex_concave(qp, &convex, &concave, start, settings);
        total_iters += run.iterations;
        if run.value >= best.value - settings.tol * best.value.abs().max(1.0) {
            break;
        }
        best = run;
    }
    let (v, slacks, converged) = (best.v, best.slacks, best.converged);
    finalize(
        qp,
        v,
        slacks,
        total_iters,
        converged,
        QpMethod::ConvexConcave,
    )
}

/// Negative curvature directions tried as restarts, most negative first.
const CURVATURE_STARTS: usize = 4;

/// Largest `n` for which the curvature restarts run.
const SMALL_CURVATURE_LIMIT: usize = 32;

/// Largest `n` for which the indefinite solver also starts from every box vertex.
const SMALL_VERTEX_LIMIT: usize = 8;

/// The better box-boundary point along the most negative curvature direction of `R`
/// restricted to the coordinates strictly inside `(0, 1)`, if it lowers the objective.
fn escape(qp: &OrderedBoxQp<'_>, v: &Vector) -> Option<Vector> {
    let free: Vec<usize> = (0..v.len())
        .filter(|&i| v[i] > 1e-9 && v[i] < 1.0 - 1e-9)
        .collect();
    if free.is_empty() {
        return None;
    }
    let sub = Matrix::from_fn(free.len(), free.len(), |a, b| qp.r[(free[a], free[b])]);
    let eig = SymmetricEigen::new(sub);
    let (idx, &lambda) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))?;
    if lambda >= -1e-12 * qp.r.amax().max(1.0) {
        return None;
    }
    let dir = eig.eigenvectors.column(idx);
    let current = qp.objective(v, &qp.tight_slacks(v));
    let mut best: Option<(f64, Vector)> = None;
    for sign in [1.0, -1.0] {
        // largest step keeping every free coordinate inside the box
        let step = free
            .iter()
            .zip(dir.iter())
            .filter(|(_, d)| d.abs() > 1e-15)
            .map(|(&i, &d)| {
                if sign * d > 0.0 {
                    (1.0 - v[i]) / (sign * d)
                } else {
                    -v[i] / (sign * d)
                }
            })
            .fold(f64::INFINITY, f64::min);
        if !step.is_finite() {
            continue;
        }
        let mut cand = v.clone();
        for (&i, &d) in free.iter().zip(dir.iter()) {
            cand[i] = (v[i] + sign * step * d).clamp(0.0, 1.0);
        }
        let value = qp.objective(&cand, &qp.tight_slacks(&cand));
        if value < current && best.as_ref().is_none_or(|(b, _)| value < *b) {
            best = Some((value, cand));
        }
    }
    best.map(|(_, c)| c)
}

struct Descent {
    v: Vector,
    slacks: Vector,
    value: f64,
    iterations: usize,
    converged: bool,
}

/// Minimizes the convex majorizer `vᵀ(R + R₋)v + (b − 2R₋v_k)ᵀv` repeatedly from `start`
/// until the true objective stops improving.
fn convex_concave(
    qp: &OrderedBoxQp<'_>,
    convex: &Matrix,
    concave: &Matrix,
    start: Vector,
    settings: &QpSettings,
) -> Descent {
    let mut v = start.map(|x| x.clamp(0.0, 1.0));
    let mut slacks = qp.tight_slacks(&v);
    let mut value = qp.objective(&v, &slacks);
    let mut iterations = 0;
    let mut converged = false;
    for _ in 0..settings.max_prox_iters {
        let b = qp.b - concave * &v * 2.0;
        let sub = OrderedBoxQp {
            r: convex,
            b: &b,
            pairs: qp.pairs,
            weights: qp.weights,
        };
        let ip = interior_point(&sub, settings);
        iterations += ip.iterations;
        let ok = ip.converged;
        let (next_v, next_s) = polish(&sub, &ip);
        let (next_v, next_s) = qp.repair(&next_v, &next_s);
        let moved = (&next_v - &v).amax();
        let next_value = qp.objective(&next_v, &next_s);
        let improves = next_value <= value;
        if improves {
            v = next_v;
            slacks = next_s;
            let gain = value - next_value;
            value = next_value;
            if gain <= settings.tol * value.abs().max(1.0) {
                converged = ok;
                break;
            }
        }
        if !ok || !improves || moved < 1e-10 {
            converged = ok;
            break;
        }
    }
    Descent {
        v,
        slacks,
        value,
        iterations,
        converged,
    }
}

/// Re-solves the equality-constrained problem on the active set identified by the
/// interior-point multipliers. The result replaces the iterate only when it is feasible
/// and no worse, which removes the `O(√gap)` error at degenerate vertices.
fn polish(qp: &OrderedBoxQp<'_>, ip: &IpResult) -> (Vector, Vector) {
    let (n, c) = (ip.v.len(), ip.xi.len());
    let fallback = qp.repair(&ip.v, &ip.xi);
    if n == 0 || ip.s.len() != 2 * n + 2 * c {
        return fallback;
    }
    let active = |row: usize| ip.z[row] > ip.s[row];

    // tie variables forced equal by ordering rows whose slack is pinned at zero
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    let mut linear = qp.b.clone();
    for (k, &(h, e)) in qp.pairs.iter().enumerate() {
        let sign_active = active(2 * n + k) || qp.weights[k] == 0.0;
        let order_active = active(2 * n + c + k);
        if order_active && sign_active {
            let (a, b) = (find(&mut parent, h), find(&mut parent, e));
            parent[a] = b;
        } else if order_active {
            linear[h] += qp.weights[k];
            linear[e] -= qp.weights[k];
        }
    }
    let roots: Vec<usize> = (0..n).map(|i| find(&mut parent, i)).collect();
    let mut fixed: Vec<Option<f64>> = vec![None; n];
    for i in 0..n {
        let value = if active(i) {
            Some(1.0)
        } else if active(n + i) {
            Some(0.0)
        } else {
            None
        };
        if let Some(x) = value {
            match fixed[roots[i]] {
                Some(prev) if prev != x => return fallback,
                _ => fixed[roots[i]] = Some(x),
            }
        }
    }

    let mut free_groups: Vec<usize> = roots.clone();
    free_groups.sort_unstable();
    free_groups.dedup();
    free_groups.retain(|&g| fixed[g].is_none());
    let slot = |g: usize| free_groups.binary_search(&g).ok();

    let mut v = Vector::from_fn(n, |i, _| fixed[roots[i]].unwrap_or(0.0));
    if !free_groups.is_empty() {
        let f = free_groups.len();
        let mut hess = Matrix::zeros(f, f);
        let mut rhs = Vector::zeros(f);
        let rv = qp.r * &v;
        for i in 0..n {
            let Some(a) = slot(roots[i]) else { continue };
            rhs[a] -= linear[i] + 2.0 * rv[i];
            for j in 0..n {
                if let Some(b) = slot(roots[j]) {
                    hess[(a, b)] += 2.0 * qp.r[(i, j)];
                }
            }
        }
        let Some(chol) = Cholesky::new(hess) else {
            return fallback;
        };
        let u = chol.solve(&rhs);
        for i in 0..n {
            if let Some(a) = slot(roots[i]) {
                v[i] = u[a];
            }
        }
    }

    if v.iter()
        .any(|x| !x.is_finite() || *x < -1e-12 || *x > 1.0 + 1e-12)
    {
        return fallback;
    }
    let candidate = qp.repair(&v, &Vector::zeros(c));
    let (fv, fs) = &fallback;
    if qp.objective(&candidate.0, &candidate.1) <= qp.objective(fv, fs) {
        candidate
    } else {
        fallback
    }
}

fn finalize(
    qp: &OrderedBoxQp<'_>,
    v: Vector,
    slacks: Vector,
    iterations: usize,
    converged: bool,
    method: QpMethod,
) -> QpSolution {
    let (v, slacks) = qp.repair(&v, &slacks);
    QpSolution {
        objective: qp.objective(&v, &slacks),
        v,
        slacks,
        iterations,
        converged,
        method,
    }
}

/// Inequality rows, in order: `v ≤ 1`, `−v ≤ 0`, `−ξ ≤ 0`, `v_h − v_e − ξ ≤ 0`.
struct Rows {
    n: usize,
    c: usize,
}

impl Rows {
    fn count(&self) -> usize {
        2 * self.n + 2 * self.c
    }

    /// `G x` for `x = (v, ξ)`.
    fn apply(&self, pairs: &[(usize, usize)], v: &Vector, xi: &Vector) -> Vector {
        let (n, c) = (self.n, self.c);
        let mut out = Vector::zeros(self.count());
        for i in 0..n {
            out[i] = v[i];
            out[n + i] = -v[i];
        }
        for (k, &(h, e)) in pairs.iter().enumerate() {
            out[2 * n + k] = -xi[k];
            out[2 * n + c + k] = v[h] - v[e] - xi[k];
        }
        out
    }

    /// `Gᵀ y`, split into the `v` and `ξ` parts.
    fn apply_t(&self, pairs: &[(usize, usize)], y: &Vector) -> (Vector, Vector) {
        let (n, c) = (self.n, self.c);
        let mut gv = Vector::zeros(n);
        let mut gx = Vector::zeros(c);
        for i in 0..n {
            gv[i] = y[i] - y[n + i];
        }
        for (k, &(h, e)) in pairs.iter().enumerate() {
            let t = y[2 * n + c + k];
            gv[h] += t;
            gv[e] -= t;
            gx[k] = -y[2 * n + k] - t;
        }
        (gv, gx)
    }

    fn bounds(&self) -> Vector {
        let mut h = Vector::zeros(self.count());
        h.rows_mut(0, self.n).fill(1.0);
        h
    }
}

struct IpResult {
    v: Vector,
    xi: Vector,
    /// Inequality slacks `h − G x` and their multipliers, row order as in [`Rows`].
    s: Vector,
    z: Vector,
    iterations: usize,
    converged: bool,
}

/// Mehrotra predictor-corrector.
fn interior_point(qp: &OrderedBoxQp<'_>, settings: &QpSettings) -> IpResult {
    let n = qp.r.nrows();
    let c = qp.pairs.len();
    let rows = Rows { n, c };
    let m = rows.count();
    let h = rows.bounds();
    if n == 0 {
        return IpResult {
            v: Vector::zeros(0),
            xi: Vector::zeros(c),
            s: Vector::zeros(m),
            z: Vector::zeros(m),
            iterations: 0,
            converged: true,
        };
    }

    let mut v = Vector::from_element(n, 0.5);
    let mut xi = Vector::from_element(c, 1.0);
    let mut s = &h - rows.apply(qp.pairs, &v, &xi);
    let mut z = Vector::from_element(m, 1.0);
    // split each slack's weight between its two rows so the slack residual starts at zero
    for k in 0..c {
        let half = (qp.weights[k] / 2.0).max(1.0);
        z[2 * n + k] = half;
        z[2 * n + c + k] = half;
    }

    let scale = 1.0 + qp.r.amax().max(qp.b.amax()).max(qp.weights.amax());
    let two_r = qp.r * 2.0;

    for iter in 1..=settings.max_iters {
        let (gz_v, gz_x) = rows.apply_t(qp.pairs, &z);
        let rd_v = &two_r * &v + qp.b + gz_v;
        let rd_x = qp.weights + gz_x;
        let rp = rows.apply(qp.pairs, &v, &xi) + &s - &h;
        let gap = s.dot(&z) / m as f64;

        let dual_res = rd_v.amax().max(if c > 0 { rd_x.amax() } else { 0.0 });
        if dual_res <= settings.tol * scale
            && rp.amax() <= settings.tol
            && gap <= settings.tol * 1e-1
        {
            return IpResult {
                v,
                xi,
                s,
                z,
                iterations: iter - 1,
                converged: true,
            };
        }

        let w = z.component_div(&s);
        // Schur complement on v after eliminating the diagonal slack block
        let mut schur = two_r.clone();
        for i in 0..n {
            schur[(i, i)] += w[i] + w[n + i];
        }
        let mut slack_diag = Vector::zeros(c);
        for (k, &(hh, e)) in qp.pairs.iter().enumerate() {
            let w3 = w[2 * n + k];
            let w4 = w[2 * n + c + k];
            slack_diag[k] = w3 + w4;
            let eff = w3 * w4 / (w3 + w4);
            schur[(hh, hh)] += eff;
            schur[(e, e)] += eff;
            schur[(hh, e)] -= eff;
            schur[(e, hh)] -= eff;
        }
        let Some(chol) = Cholesky::new(schur) else {
            return IpResult {
                v,
                xi,
                s,
                z,
                iterations: iter,
                converged: false,
            };
        };

        let newton = |rc: &Vector| -> (Vector, Vector, Vector, Vector) {
            // rhs = −r_d − Gᵀ S⁻¹ (Z r_p − r_c)
            let t = (z.component_mul(&rp) - rc).component_div(&s);
            let (tv, tx) = rows.apply_t(qp.pairs, &t);
            let rhs_v = -&rd_v - tv;
            let rhs_x = -&rd_x - tx;
            // [M_vv  B; Bᵀ D] with B_{·k} = −w4_k (e_h − e_e)
            let mut reduced = rhs_v.clone();
            for (k, &(hh, e)) in qp.pairs.iter().enumerate() {
                let w4 = w[2 * n + c + k];
                let coef = -w4 * rhs_x[k] / slack_diag[k];
                reduced[hh] -= coef;
                reduced[e] += coef;
            }
            let dv = chol.solve(&reduced);
            let dx = Vector::from_fn(c, |k, _| {
                let (hh, e) = qp.pairs[k];
                let w4 = w[2 * n + c + k];
                (rhs_x[k] + w4 * (dv[hh] - dv[e])) / slack_diag[k]
            });
            let gdx = rows.apply(qp.pairs, &dv, &dx);
            let ds = -&rp - &gdx;
            let dz = w.component_mul(&gdx) + t;
            (dv, dx, ds, dz)
        };

        let step_to_boundary = |x: &Vector, dx: &Vector| -> f64 {
            x.iter()
                .zip(dx.iter())
                .filter(|(_, d)| **d < 0.0)
                .map(|(x, d)| -x / d)
                .fold(1.0, f64::min)
        };

        let rc_aff = s.component_mul(&z);
        let (_, _, ds_a, dz_a) = newton(&rc_aff);
        let a_aff = step_to_boundary(&s, &ds_a).min(step_to_boundary(&z, &dz_a));
        let gap_aff = (&s + &ds_a * a_aff).dot(&(&z + &dz_a * a_aff)) / m as f64;
        let sigma = (gap_aff / gap).powi(3).clamp(0.0, 1.0);

        let rc =
            s.component_mul(&z) + ds_a.component_mul(&dz_a) - Vector::from_element(m, sigma * gap);
        let (dv, dx, ds, dz) = newton(&rc);
        let step = (0.995 * step_to_boundary(&s, &ds).min(step_to_boundary(&z, &dz))).min(1.0);

        v += &dv * step;
        xi += &dx * step;
        s += &ds * step;
        z += &dz * step;
        if s.iter()
            .chain(z.iter())
            .any(|x| !x.is_finite() || *x <= 0.0)
        {
            return IpResult {
                v,
                xi,
                s,
                z,
                iterations: iter,
                converged: false,
            };
        }
    }
    IpResult {
        v,
        xi,
        s,
        z,
        iterations: settings.max_iters,
        converged: false,
    }
}
