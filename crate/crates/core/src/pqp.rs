//! Multiplicative-update solvers for nonnegativity-constrained least squares.
//!
//! The core primitive is the parallel quadratic programming (PQP) update for
//!
//! ```text
//! min ½ xᵀQx + zᵀx   s.t. x ≥ 0
//! x ← x ∘ (Q⁻x + z⁻) ⊘ (Q⁺x + z⁺)
//! Q⁺ = (Q)₊ + diag(γ),  Q⁻ = (−Q)₊ + diag(γ),  z⁺ = (z)₊ + φ,  z⁻ = (−z)₊ + φ
//! ```
//!
//! Weighted NMF (and plain Lee-Seung) is the special case `γ = 0, φ = ε`, and the tensor
//! factorizer applies the update row-wise to each CP factor in turn.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, purpose};
use crate::tensor::{frobenius_distance, kruskal_to_dense, mttkrp, KruskalFactors, Mode, Tensor3};

const SYMMETRY_TOL: f64 = 1e-10;

fn pos(v: f64) -> f64 {
    v.max(0.0)
}

/// A nonnegative quadratic program together with its PQP splitting terms.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadProgram {
    q: DMatrix<f64>,
    z: DVector<f64>,
    gamma: DVector<f64>,
    phi: DVector<f64>,
}

impl QuadProgram {
    /// Requires `gamma ⪰ (−Q)₊·1`, the condition under which the update is monotone.
    pub fn new(
        q: DMatrix<f64>,
        z: DVector<f64>,
        gamma: DVector<f64>,
        phi: DVector<f64>,
    ) -> Result<Self> {
        let m = z.len();
        if m == 0 || q.shape() != (m, m) || gamma.len() != m || phi.len() != m {
            return Err(Error::arg(format!(
                "quadratic program shapes disagree: Q {:?}, z {m}, gamma {}, phi {}",
                q.shape(),
                gamma.len(),
                phi.len()
            )));
        }
        let asym = (&q - q.transpose()).abs().max();
        if asym > SYMMETRY_TOL {
            return Err(Error::arg(format!("Q is not symmetric (max asymmetry {asym:e})")));
        }
        if phi.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::arg("phi must be nonnegative"));
        }
        for i in 0..m {
            let need: f64 = q.row(i).iter().map(|&v| pos(-v)).sum();
            if !(gamma[i] >= need) {
                return Err(Error::arg(format!(
                    "gamma[{i}] = {} is below (−Q)₊·1 = {need}",
                    gamma[i]
                )));
            }
        }
        Ok(QuadProgram { q, z, gamma, phi })
    }

    /// Builds `γ = (−Q)₊·1` and `φ` from [`pqp_phi`], which together guarantee monotone,
    /// linearly convergent iterations.
    pub fn with_convergence_terms(q: DMatrix<f64>, z: DVector<f64>, epsilon: f64) -> Result<Self> {
        let gamma = DVector::from_fn(z.len(), |i, _| q.row(i).iter().map(|&v| pos(-v)).sum());
        let phi_rows = pqp_phi(&q, &DMatrix::from_row_slice(1, z.len(), z.as_slice()), epsilon)?;
        let phi = DVector::from_iterator(z.len(), phi_rows.row(0).iter().copied());
        QuadProgram::new(q, z, gamma, phi)
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn z(&self) -> &DVector<f64> {
        &self.z
    }

    pub fn gamma(&self) -> &DVector<f64> {
        &self.gamma
    }

    pub fn phi(&self) -> &DVector<f64> {
        &self.phi
    }

    pub fn dim(&self) -> usize {
        self.z.len()
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.q * x)) + self.z.dot(x)
    }

    pub fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.q * x + &self.z
    }
}

/// One PQP multiplicative update.
pub fn pqp_step(x: &DVector<f64>, qp: &QuadProgram) -> Result<DVector<f64>> {
    let m = qp.dim();
    if x.len() != m {
        return Err(Error::arg(format!("x has length {}, program has {m}", x.len())));
    }
    if x.iter().any(|&v| !(v >= 0.0)) {
        return Err(Error::arg("pqp_step needs a nonnegative iterate"));
    }
    let mut out = DVector::zeros(m);
    for i in 0..m {
        let mut num = pos(-qp.z[i]) + qp.phi[i];
        let mut den = pos(qp.z[i]) + qp.phi[i];
        for (j, &xj) in x.iter().enumerate() {
            let qij = qp.q[(i, j)];
            num += pos(-qij) * xj;
            den += pos(qij) * xj;
        }
        num += qp.gamma[i] * x[i];
        den += qp.gamma[i] * x[i];
        if den <= 0.0 {
            if x[i] == 0.0 {
                continue;
            }
            return Err(Error::Numeric(format!("zero denominator at coordinate {i}")));
        }
        out[i] = x[i] * (num / den);
    }
    Ok(out)
}

/// Smallest eigenvalue and inverse of the Gram matrix used in the φ bound, after the
/// ridge `μ = 1e-10·tr(Q)/m` when `λ_min ≤ 1e-12·tr(Q)/m`.
fn regularized_inverse(q: &DMatrix<f64>) -> Result<(f64, DMatrix<f64>)> {
    let m = q.nrows();
    let mean_diag = q.trace() / m as f64;
    let mut lambda_min = SymmetricEigen::new(q.clone()).eigenvalues.min();
    let mut qr = q.clone();
    if lambda_min <= 1e-12 * mean_diag {
        let mu = 1e-10 * mean_diag;
        if !(mu > 0.0) {
            return Err(Error::Solver("Q has nonpositive trace; cannot regularize".into()));
        }
        for i in 0..m {
            qr[(i, i)] += mu;
        }
        lambda_min = SymmetricEigen::new(qr.clone()).eigenvalues.min();
    }
    if !(lambda_min > 0.0) {
        return Err(Error::Solver(format!("Q is not positive definite (λ_min = {lambda_min:e})")));
    }
    let inv = Cholesky::new(qr)
        .ok_or_else(|| Error::Solver("Q is numerically singular after regularization".into()))?
        .inverse();
    Ok((lambda_min, inv))
}

/// Row-wise φ for a batch of programs sharing `Q`, one `z` per row of `z_rows`:
///
/// ```text
/// Φ = (λ_min(Q)^{-1/2} · sqrt(diag(Z Q⁻¹ Zᵀ)) · diag(Q)ᵀ − |Z|)₊ / 2 + ε
/// ```
pub fn pqp_phi(q: &DMatrix<f64>, z_rows: &DMatrix<f64>, epsilon: f64) -> Result<DMatrix<f64>> {
    let m = q.nrows();
    if q.ncols() != m || z_rows.ncols() != m {
        return Err(Error::arg(format!(
            "pqp_phi shapes disagree: Q {:?}, Z {:?}",
            q.shape(),
            z_rows.shape()
        )));
    }
    if !(epsilon > 0.0) {
        return Err(Error::arg("epsilon must be positive"));
    }
    let (lambda_min, q_inv) = regularized_inverse(q)?;
    let scale = lambda_min.sqrt().recip();
    let zq = z_rows * &q_inv;
    let mut phi = DMatrix::zeros(z_rows.nrows(), m);
    for r in 0..z_rows.nrows() {
        let quad = zq.row(r).dot(&z_rows.row(r)).max(0.0);
        let bound = if quad > 0.0 { scale * quad.sqrt() } else { 0.0 };
        for c in 0..m {
            phi[(r, c)] = pos(bound * q[(c, c)] - z_rows[(r, c)].abs()) / 2.0 + epsilon;
        }
    }
    Ok(phi)
}

/// Iteration controls shared by the NQP solver and the tensor factorizer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FactorizeOptions {
    pub max_iters: usize,
    pub rel_tol: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for FactorizeOptions {
    fn default() -> Self {
        FactorizeOptions {
            max_iters: 500,
            rel_tol: 1e-6,
            epsilon: 1e-10,
            seed: 0,
        }
    }
}

impl FactorizeOptions {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::arg("max_iters must be positive"));
        }
        if !(self.rel_tol > 0.0) || !(self.epsilon > 0.0) {
            return Err(Error::arg("rel_tol and epsilon must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NqpSolution {
    pub x: DVector<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Largest violation of the complementarity conditions, `max_i |min(x_i, (Qx + z)_i)|`.
pub fn kkt_residual(qp: &QuadProgram, x: &DVector<f64>) -> f64 {
    let g = qp.gradient(x);
    x.iter()
        .zip(g.iter())
        .map(|(&xi, &gi)| xi.min(gi).abs())
        .fold(0.0, f64::max)
}

/// Iterates [`pqp_step`] from the all-ones point until the KKT residual falls below
/// `rel_tol · max(1, ‖z‖∞)` or `max_iters` is reached. The returned point is the last
/// iterate, which is also the best since the update is monotone.
pub fn solve_nqp(qp: &QuadProgram, opts: &FactorizeOptions) -> Result<NqpSolution> {
    opts.validate()?;
    let tol = opts.rel_tol * qp.z.amax().max(1.0);
    let mut x = DVector::from_element(qp.dim(), 1.0);
    let mut iterations = 0;
    let mut converged = kkt_residual(qp, &x) <= tol;
    while !converged && iterations < opts.max_iters {
        x = pqp_step(&x, qp)?;
        iterations += 1;
        converged = kkt_residual(qp, &x) <= tol;
    }
    Ok(NqpSolution {
        objective: qp.objective(&x),
        x,
        iterations,
        converged,
    })
}

fn check_wnmf_shapes(
    w: &DMatrix<f64>,
    h: &DMatrix<f64>,
    y: &DMatrix<f64>,
    omega: &DMatrix<f64>,
) -> Result<()> {
    if w.ncols() != h.nrows() || y.shape() != (w.nrows(), h.ncols()) || omega.shape() != y.shape() {
        return Err(Error::arg(format!(
            "wnmf shapes disagree: W {:?}, H {:?}, Y {:?}, Ω {:?}",
            w.shape(),
            h.shape(),
            y.shape(),
            omega.shape()
        )));
    }
    if w.iter().chain(h.iter()).any(|&v| !(v >= 0.0)) {
        return Err(Error::arg("wnmf factors must be nonnegative"));
    }
    Ok(())
}

/// `Ω_uv = 1` where `Y_uv ≥ 0`, else 0.
pub fn nonnegative_mask(y: &DMatrix<f64>) -> DMatrix<f64> {
    y.map(|v| if v >= 0.0 { 1.0 } else { 0.0 })
}

fn masked(y: &DMatrix<f64>, omega: &DMatrix<f64>) -> DMatrix<f64> {
    y.zip_map(omega, |v, o| if o == 0.0 { 0.0 } else { o * v })
}

/// `‖Ω ∘ (Y − WH)‖²_F`.
pub fn wnmf_objective(
    w: &DMatrix<f64>,
    h: &DMatrix<f64>,
    y: &DMatrix<f64>,
    omega: &DMatrix<f64>,
) -> f64 {
    let r = y - w * h;
    r.zip_map(omega, |v, o| if o == 0.0 { 0.0 } else { o * v * v }).sum()
}

/// One sweep of the ε-guarded weighted NMF updates: `H` first, then `W` using the new `H`.
pub fn wnmf_step(
    w: &DMatrix<f64>,
    h: &DMatrix<f64>,
    y: &DMatrix<f64>,
    omega: &DMatrix<f64>,
    eps: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    check_wnmf_shapes(w, h, y, omega)?;
    if !(eps > 0.0) {
        return Err(Error::arg("eps must be positive"));
    }
    let oy = masked(y, omega);

    let num_h = w.transpose() * &oy;
    let den_h = w.transpose() * masked(&(w * h), omega);
    let h_new = DMatrix::from_fn(h.nrows(), h.ncols(), |u, v| {
        h[(u, v)] * (num_h[(u, v)] + eps) / (den_h[(u, v)] + eps)
    });

    let num_w = &oy * h_new.transpose();
    let den_w = masked(&(w * &h_new), omega) * h_new.transpose();
    let w_new = DMatrix::from_fn(w.nrows(), w.ncols(), |u, v| {
        w[(u, v)] * (num_w[(u, v)] + eps) / (den_w[(u, v)] + eps)
    });
    Ok((w_new, h_new))
}

/// The same sweep as [`wnmf_step`], computed as one PQP problem per column of `H` and per
/// row of `W` with `γ = 0` and a constant `φ`.
pub fn pqp_wnmf_sweep(
    w: &DMatrix<f64>,
    h: &DMatrix<f64>,
    y: &DMatrix<f64>,
    omega: &DMatrix<f64>,
    phi: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    check_wnmf_shapes(w, h, y, omega)?;
    let r = w.ncols();
    let zero = DVector::zeros(r);
    let phi_v = DVector::from_element(r, phi);

    let mut h_new = h.clone();
    for c in 0..h.ncols() {
        // min ½‖diag(ω)(y − W h)‖²
        let mut q = DMatrix::zeros(r, r);
        let mut z = DVector::zeros(r);
        for row in 0..w.nrows() {
            if omega[(row, c)] == 0.0 {
                continue;
            }
            let wr = w.row(row).transpose();
            q += &wr * wr.transpose();
            z -= &wr * y[(row, c)];
        }
        let qp = QuadProgram::new(q, z, zero.clone(), phi_v.clone())?;
        h_new.set_column(c, &pqp_step(&h.column(c).into_owned(), &qp)?);
    }

    let mut w_new = w.clone();
    for row in 0..w.nrows() {
        let mut q = DMatrix::zeros(r, r);
        let mut z = DVector::zeros(r);
        for c in 0..h_new.ncols() {
            if omega[(row, c)] == 0.0 {
                continue;
            }
            let hc = h_new.column(c).into_owned();
            q += &hc * hc.transpose();
            z -= &hc * y[(row, c)];
        }
        let qp = QuadProgram::new(q, z, zero.clone(), phi_v.clone())?;
        let x = pqp_step(&w.row(row).transpose(), &qp)?;
        w_new.set_row(row, &x.transpose());
    }
    Ok((w_new, h_new))
}

fn close(a: &DMatrix<f64>, b: &DMatrix<f64>, tol: f64) -> bool {
    a.shape() == b.shape()
        && a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() <= tol * x.abs().max(y.abs()).max(1.0))
}

/// Whether one PQP sweep with `Λ = Ω`, `γ = 0`, `Φ ≡ phi` reproduces the WNMF sweep with
/// guard `eps` to within 1e-12 (relative).
pub fn pqp_matches_wnmf_with_phi(
    w: &DMatrix<f64>,
    h: &DMatrix<f64>,
    y: &DMatrix<f64>,
    omega: &DMatrix<f64>,
    eps: f64,
    phi: f64,
) -> Result<bool> {
    let (w1, h1) = wnmf_step(w, h, y, omega, eps)?;
    let (w2, h2) = pqp_wnmf_sweep(w, h, y, omega, phi)?;
    Ok(close(&w1, &w2, 1e-12) && close(&h1, &h2, 1e-12))
}

pub fn pqp_matches_wnmf(
    w: &DMatrix<f64>,
    h: &DMatrix<f64>,
    y: &DMatrix<f64>,
    omega: &DMatrix<f64>,
    eps: f64,
) -> Result<bool> {
    pqp_matches_wnmf_with_phi(w, h, y, omega, eps, eps)
}

/// `‖T − [[A, B, C]]‖_F`.
pub fn tensor_objective(t: &Tensor3, f: &KruskalFactors) -> Result<f64> {
    if t.dims() != f.dims() {
        return Err(Error::arg(format!(
            "tensor dims {:?} do not match factor dims {:?}",
            t.dims(),
            f.dims()
        )));
    }
    frobenius_distance(t, &kruskal_to_dense(f))
}

/// Output of [`factorize`].
#[derive(Debug, Clone, PartialEq)]
pub struct Factorization {
    /// Factors with unit column sums; the column scales (including the input pre-scaling)
    /// are absorbed into `weights`.
    pub factors: KruskalFactors,
    pub converged: bool,
    pub iterations: usize,
    /// `‖T − [[weights; A, B, C]]‖_F` on the original input.
    pub objective: f64,
    /// Objective on the max-abs-scaled tensor: the initial value, then one entry after
    /// every factor update.
    pub trace: Vec<f64>,
}

fn random_factor(rng: &mut impl Rng, rows: usize, k: usize) -> DMatrix<f64> {
    // (0, 1], so no entry starts at zero
    DMatrix::from_fn(rows, k, |_, _| 1.0 - rng.random::<f64>())
}

fn scaled_objective(m: &Tensor3, a: &DMatrix<f64>, b: &DMatrix<f64>, c: &DMatrix<f64>) -> f64 {
    let f = KruskalFactors {
        a: a.clone(),
        b: b.clone(),
        c: c.clone(),
        weights: DVector::from_element(a.ncols(), 1.0),
    };
    frobenius_distance(m, &kruskal_to_dense(&f)).expect("shapes fixed by construction")
}

fn relative_change(old: &DMatrix<f64>, new: &DMatrix<f64>) -> f64 {
    let denom = old.norm();
    if denom == 0.0 {
        return if new.norm() == 0.0 { 0.0 } else { f64::INFINITY };
    }
    (new - old).norm() / denom
}

/// `X ← X ∘ (X Q⁻ + (−Z)₊ + Φ) ⊘ (X Q⁺ + (Z)₊ + Φ)` with `γ = 0`, where `Z` already
/// carries the sign convention `Z = −T(n)(KR)`.
fn update_factor(x: &DMatrix<f64>, q: &DMatrix<f64>, z: &DMatrix<f64>, phi: &DMatrix<f64>) -> DMatrix<f64> {
    let q_pos = q.map(pos);
    let q_neg = q.map(|v| pos(-v));
    let num = x * q_neg + z.map(|v| pos(-v)) + phi;
    let den = x * q_pos + z.map(pos) + phi;
    DMatrix::from_fn(x.nrows(), x.ncols(), |i, h| x[(i, h)] * (num[(i, h)] / den[(i, h)]))
}

/// Components whose three column maxima multiply to less than this are set to zero and no
/// longer updated; left alone they would shrink geometrically until they underflow.
const DEAD_COMPONENT: f64 = 1e-200;

/// Scales each column to sum to one; returns the original sums.
fn normalize_sums(x: &mut DMatrix<f64>) -> Vec<f64> {
    let rows = x.nrows();
    x.column_iter_mut()
        .map(|mut col| {
            let s: f64 = col.iter().sum();
            if s > 0.0 {
                col /= s;
            } else {
                col.fill(1.0 / rows as f64);
            }
            s.max(0.0)
        })
        .collect()
}

/// Nonnegative rank-`k` CP approximation of a tensor that may contain negative entries,
/// by alternating row-wise PQP updates of the three factors.
///
/// The input is first divided by its largest absolute entry and factors start i.i.d.
/// uniform on (0, 1]. Each factor update recomputes `Q` and `Z` from the latest factors.
/// Iteration stops once the largest relative Frobenius change among the three factors in a
/// sweep drops below `rel_tol`. A component that collapses to zero gets weight 0 and uniform
/// columns.
pub fn factorize(t: &Tensor3, k: usize, opts: &FactorizeOptions) -> Result<Factorization> {
    opts.validate()?;
    if k == 0 {
        return Err(Error::arg("rank must be at least 1"));
    }
    let max_abs = t.max_abs();
    let scale = if max_abs > 0.0 { max_abs } else { 1.0 };
    let m = t.scaled(1.0 / scale);
    let [d1, d2, d3] = t.dims();

    let mut rng = crate::rng::stream(opts.seed, 0, 0);
    let mut a = random_factor(&mut rng, d1, k);
    let mut b = random_factor(&mut rng, d2, k);
    let mut c = random_factor(&mut rng, d3, k);

    let mut live: Vec<usize> = (0..k).collect();
    let mut trace = vec![scaled_objective(&m, &a, &b, &c)];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iters {
        iterations += 1;
        let mut change: f64 = 0.0;
        for mode in Mode::ALL {
            let (x, first, second) = match mode {
                Mode::One => (&a, &b, &c),
                Mode::Two => (&b, &a, &c),
                Mode::Three => (&c, &a, &b),
            };
            let mut updated = x.clone();
            if !live.is_empty() {
                let (x_l, f_l, s_l) = (x.select_columns(&live), first.select_columns(&live), second.select_columns(&live));
                let q = (f_l.transpose() * &f_l).component_mul(&(s_l.transpose() * &s_l));
                let z = -mttkrp(&m, mode, &f_l, &s_l)?;
                let phi = pqp_phi(&q, &z, opts.epsilon)?;
                let new_l = update_factor(&x_l, &q, &z, &phi);
                for (pos, &h) in live.iter().enumerate() {
                    updated.set_column(h, &new_l.column(pos));
                }
            }
            change = change.max(relative_change(x, &updated));
            match mode {
                Mode::One => a = updated,
                Mode::Two => b = updated,
                Mode::Three => c = updated,
            }
            live.retain(|&h| {
                let alive = a.column(h).max() * b.column(h).max() * c.column(h).max() >= DEAD_COMPONENT;
                if !alive {
                    a.column_mut(h).fill(0.0);
                    b.column_mut(h).fill(0.0);
                    c.column_mut(h).fill(0.0);
                }
                alive
            });
            trace.push(scaled_objective(&m, &a, &b, &c));
        }
        if change < opts.rel_tol {
            converged = true;
            break;
        }
    }

    let sa = normalize_sums(&mut a);
    let sb = normalize_sums(&mut b);
    let sc = normalize_sums(&mut c);
    let weights = DVector::from_fn(k, |h, _| scale * sa[h] * sb[h] * sc[h]);
    let factors = KruskalFactors::with_weights(a, b, c, weights)?;
    let objective = tensor_objective(t, &factors)?;
    Ok(Factorization {
        factors,
        converged,
        iterations,
        objective,
        trace,
    })
}

/// Runs [`factorize`] from `restarts` independent initializations (seeds derived from
/// `opts.seed`) and keeps the one with the lowest final objective.
pub fn factorize_best_of(
    t: &Tensor3,
    k: usize,
    opts: &FactorizeOptions,
    restarts: usize,
) -> Result<Factorization> {
    if restarts == 0 {
        return Err(Error::arg("restarts must be at least 1"));
    }
    let mut best: Option<Factorization> = None;
    for r in 0..restarts {
        let run_opts = FactorizeOptions {
            seed: derive_seed(opts.seed, purpose::RESTART, r as u64),
            ..*opts
        };
        let run = factorize(t, k, &run_opts)?;
        if best.as_ref().is_none_or(|b| run.objective < b.objective) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}
