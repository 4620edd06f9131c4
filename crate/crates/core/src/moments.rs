//! Dirichlet moments, the model-implied moment tensors and their empirical estimators.
//!
//! For distinct variables `j, s, t` with one-hot encodings `b_j, b_s, b_t`:
//!
//! ```text
//! M_js  = E[b_j ⊗ b_s] - α0/(α0+1) E[b_j] E[b_s]ᵀ
//!       = Σ_h α_h/(α0(α0+1)) θ_jh ⊗ θ_sh
//! M_jst = E[b_j ⊗ b_s ⊗ b_t] + 2α0²/((α0+1)(α0+2)) E[b_j] ⊗ E[b_s] ⊗ E[b_t]
//!         - α0/(α0+2) (E[E[b_j] ⊗ b_s ⊗ b_t] + E[b_j ⊗ E[b_s] ⊗ b_t] + E[b_j ⊗ b_s ⊗ E[b_t]])
//!       = Σ_h 2α_h/(α0(α0+1)(α0+2)) θ_jh ⊗ θ_sh ⊗ θ_th
//! ```

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::tensor::{kruskal_to_dense, KruskalFactors, Tensor3};

const STOCHASTIC_TOL: f64 = 1e-9;

/// Per-variable emission matrices `θ_j` (categories × components) and the Dirichlet concentration.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    thetas: Vec<DMatrix<f64>>,
    alpha: Option<DVector<f64>>,
    alpha0: Option<f64>,
}

impl ModelParams {
    /// A fully specified generative model.
    pub fn new(thetas: Vec<DMatrix<f64>>, alpha: DVector<f64>) -> Result<Self> {
        if alpha.iter().any(|&a| !(a > 0.0 && a.is_finite())) {
            return Err(Error::arg("dirichlet concentration must be positive and finite"));
        }
        let alpha0 = alpha.sum();
        let params = ModelParams {
            thetas,
            alpha: Some(alpha),
            alpha0: Some(alpha0),
        };
        params.validate()?;
        Ok(params)
    }

    /// Estimated emission matrices; the full concentration vector is unknown.
    pub fn from_thetas(thetas: Vec<DMatrix<f64>>, alpha0: Option<f64>) -> Result<Self> {
        if let Some(a0) = alpha0 {
            if !(a0 > 0.0 && a0.is_finite()) {
                return Err(Error::arg("alpha0 must be positive and finite"));
            }
        }
        let params = ModelParams {
            thetas,
            alpha: None,
            alpha0,
        };
        params.validate()?;
        Ok(params)
    }

    fn validate(&self) -> Result<()> {
        if self.thetas.is_empty() {
            return Err(Error::Validation("model has no variables".into()));
        }
        let k = self.thetas[0].ncols();
        if k == 0 {
            return Err(Error::Validation("model has no components".into()));
        }
        if let Some(alpha) = &self.alpha {
            if alpha.len() != k {
                return Err(Error::Validation(format!(
                    "alpha has length {} but thetas have {k} columns",
                    alpha.len()
                )));
            }
        }
        for (j, theta) in self.thetas.iter().enumerate() {
            if theta.ncols() != k {
                return Err(Error::Validation(format!(
                    "variable {j} has {} columns, expected {k}",
                    theta.ncols()
                )));
            }
            if theta.nrows() == 0 {
                return Err(Error::Validation(format!("variable {j} has no categories")));
            }
            check_stochastic(theta, j)?;
        }
        Ok(())
    }

    pub fn p(&self) -> usize {
        self.thetas.len()
    }

    pub fn k(&self) -> usize {
        self.thetas[0].ncols()
    }

    pub fn categories(&self) -> Vec<usize> {
        self.thetas.iter().map(|t| t.nrows()).collect()
    }

    pub fn thetas(&self) -> &[DMatrix<f64>] {
        &self.thetas
    }

    pub fn theta(&self, j: usize) -> &DMatrix<f64> {
        &self.thetas[j]
    }

    pub fn alpha(&self) -> Option<&DVector<f64>> {
        self.alpha.as_ref()
    }

    pub fn alpha0(&self) -> Option<f64> {
        self.alpha0
    }

    fn require_alpha(&self) -> Result<&DVector<f64>> {
        self.alpha
            .as_ref()
            .ok_or_else(|| Error::arg("model has no concentration vector"))
    }

    /// All `θ_j` stacked vertically, in variable order.
    pub fn stacked(&self) -> DMatrix<f64> {
        stack_rows(self.thetas.iter(), self.k())
    }
}

/// Columns must be nonnegative and sum to one. Single-row (numeric) variables are exempt
/// from the sum check since their row holds conditional means, not probabilities.
pub(crate) fn check_stochastic(theta: &DMatrix<f64>, variable: usize) -> Result<()> {
    for (h, col) in theta.column_iter().enumerate() {
        if col.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "variable {variable}, column {h}: non-finite entry"
            )));
        }
        if theta.nrows() == 1 {
            continue;
        }
        if col.iter().any(|&v| v < 0.0) {
            return Err(Error::Validation(format!(
                "variable {variable}, column {h}: negative entry"
            )));
        }
        let sum: f64 = col.iter().sum();
        if (sum - 1.0).abs() > STOCHASTIC_TOL {
            return Err(Error::Validation(format!(
                "variable {variable}, column {h}: sums to {sum}, not 1"
            )));
        }
    }
    Ok(())
}

pub(crate) fn stack_rows<'a>(
    blocks: impl Iterator<Item = &'a DMatrix<f64>> + Clone,
    k: usize,
) -> DMatrix<f64> {
    let rows: usize = blocks.clone().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(rows, k);
    let mut offset = 0;
    for b in blocks {
        out.rows_mut(offset, b.nrows()).copy_from(b);
        offset += b.nrows();
    }
    out
}

/// `n` observations of `p` variables. Variable `j` with `d_j >= 2` is categorical with
/// values in `[0, d_j)`; `d_j == 1` marks a numeric variable whose value is used as-is.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    n: usize,
    categories: Vec<usize>,
    values: Vec<u32>,
}

impl Dataset {
    /// `values` is row-major, `n × p` with `p = categories.len()`.
    pub fn new(categories: Vec<usize>, values: Vec<u32>) -> Result<Self> {
        let p = categories.len();
        if p == 0 {
            return Err(Error::arg("dataset needs at least one variable"));
        }
        if let Some(j) = categories.iter().position(|&d| d == 0) {
            return Err(Error::arg(format!("variable {j} has zero categories")));
        }
        if values.is_empty() || !values.len().is_multiple_of(p) {
            return Err(Error::arg(format!(
                "{} values do not form whole rows of {p} variables",
                values.len()
            )));
        }
        for (idx, &v) in values.iter().enumerate() {
            let d = categories[idx % p];
            if d >= 2 && v as usize >= d {
                return Err(Error::arg(format!(
                    "row {}, variable {}: category {v} out of range [0, {d})",
                    idx / p,
                    idx % p
                )));
            }
        }
        Ok(Dataset {
            n: values.len() / p,
            categories,
            values,
        })
    }

    pub fn from_rows(categories: Vec<usize>, rows: &[Vec<u32>]) -> Result<Self> {
        let p = categories.len();
        if let Some(i) = rows.iter().position(|r| r.len() != p) {
            return Err(Error::arg(format!("row {i} has {} values, expected {p}", rows[i].len())));
        }
        Dataset::new(categories, rows.iter().flatten().copied().collect())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.categories.len()
    }

    pub fn categories(&self) -> &[usize] {
        &self.categories
    }

    #[inline]
    pub fn value(&self, i: usize, j: usize) -> u32 {
        self.values[i * self.p() + j]
    }

    pub fn row(&self, i: usize) -> &[u32] {
        let p = self.p();
        &self.values[i * p..(i + 1) * p]
    }

    pub fn values(&self) -> &[u32] {
        &self.values
    }

    pub(crate) fn values_mut(&mut self) -> &mut [u32] {
        &mut self.values
    }

    /// Sparse encoding of observation `(i, j)`: (position within `b_ij`, value).
    #[inline]
    fn encoded(&self, i: usize, j: usize) -> (usize, f64) {
        let v = self.value(i, j);
        if self.categories[j] == 1 {
            (0, v as f64)
        } else {
            (v as usize, 1.0)
        }
    }

    fn check_variable(&self, j: usize) -> Result<()> {
        if j >= self.p() {
            return Err(Error::arg(format!("variable {j} out of range for p = {}", self.p())));
        }
        Ok(())
    }
}

/// One-hot encoding `e_y` for categorical variables; the raw value for numeric ones (`d == 1`).
pub fn encode_observation(y: u32, d: usize) -> Result<DVector<f64>> {
    match d {
        0 => Err(Error::arg("category count must be positive")),
        1 => Ok(DVector::from_element(1, y as f64)),
        _ if y as usize >= d => Err(Error::arg(format!("category {y} out of range [0, {d})"))),
        _ => {
            let mut e = DVector::zeros(d);
            e[y as usize] = 1.0;
            Ok(e)
        }
    }
}

/// Exact first, second and third moments of `x ~ Dir(alpha)`.
pub fn dirichlet_moments(alpha: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>, Tensor3)> {
    if alpha.is_empty() || alpha.iter().any(|&a| !(a > 0.0 && a.is_finite())) {
        return Err(Error::arg("dirichlet concentration must be nonempty and positive"));
    }
    let k = alpha.len();
    let a0 = alpha.sum();
    let mean = alpha / a0;
    let c2 = a0 * (a0 + 1.0);
    let second = DMatrix::from_fn(k, k, |i, j| {
        if i == j {
            alpha[i] * (alpha[i] + 1.0) / c2
        } else {
            alpha[i] * alpha[j] / c2
        }
    });
    let c3 = c2 * (a0 + 2.0);
    let third = Tensor3::from_fn([k, k, k], |i, j, l| {
        let (x, y, z) = (alpha[i], alpha[j], alpha[l]);
        let v = if i == j && j == l {
            x * (x + 1.0) * (x + 2.0)
        } else if i == j {
            x * (x + 1.0) * z
        } else if i == l {
            x * (x + 1.0) * y
        } else if j == l {
            y * (y + 1.0) * x
        } else {
            x * y * z
        };
        v / c3
    });
    Ok((mean, second, third))
}

fn check_thetas(thetas: &[&DMatrix<f64>], alpha: &DVector<f64>) -> Result<()> {
    if alpha.is_empty() || alpha.iter().any(|&a| !(a > 0.0)) {
        return Err(Error::arg("dirichlet concentration must be nonempty and positive"));
    }
    for t in thetas {
        if t.ncols() != alpha.len() {
            return Err(Error::arg(format!(
                "theta with {} columns does not match {} components",
                t.ncols(),
                alpha.len()
            )));
        }
    }
    Ok(())
}

/// `Σ_h α_h/(α0(α0+1)) θ_jh ⊗ θ_sh`.
pub fn population_pair(
    theta_j: &DMatrix<f64>,
    theta_s: &DMatrix<f64>,
    alpha: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    check_thetas(&[theta_j, theta_s], alpha)?;
    let a0 = alpha.sum();
    let w = alpha / (a0 * (a0 + 1.0));
    Ok(theta_j * DMatrix::from_diagonal(&w) * theta_s.transpose())
}

/// Component weights of the third-order CP form, `2α_h/(α0(α0+1)(α0+2))`.
pub fn triple_weights(alpha: &DVector<f64>) -> DVector<f64> {
    let a0 = alpha.sum();
    alpha * (2.0 / (a0 * (a0 + 1.0) * (a0 + 2.0)))
}

/// `Σ_h 2α_h/(α0(α0+1)(α0+2)) θ_jh ⊗ θ_sh ⊗ θ_th`.
pub fn population_triple_cp(
    theta_j: &DMatrix<f64>,
    theta_s: &DMatrix<f64>,
    theta_t: &DMatrix<f64>,
    alpha: &DVector<f64>,
) -> Result<Tensor3> {
    check_thetas(&[theta_j, theta_s, theta_t], alpha)?;
    let f = KruskalFactors::with_weights(
        theta_j.clone(),
        theta_s.clone(),
        theta_t.clone(),
        triple_weights(alpha),
    )?;
    Ok(kruskal_to_dense(&f))
}

/// `T ×1 A ×2 B ×3 C`.
fn multilinear(t: &Tensor3, a: &DMatrix<f64>, b: &DMatrix<f64>, c: &DMatrix<f64>) -> Tensor3 {
    let [k1, k2, k3] = t.dims();
    let mut out = Tensor3::zeros([a.nrows(), b.nrows(), c.nrows()]);
    for z in 0..k3 {
        for y in 0..k2 {
            for x in 0..k1 {
                let v = t.get(x, y, z);
                if v == 0.0 {
                    continue;
                }
                for l in 0..c.nrows() {
                    let vc = v * c[(l, z)];
                    for j in 0..b.nrows() {
                        let vbc = vc * b[(j, y)];
                        for i in 0..a.nrows() {
                            out.add_at(i, j, l, a[(i, x)] * vbc);
                        }
                    }
                }
            }
        }
    }
    out
}

/// Coefficients `(2α0²/((α0+1)(α0+2)), α0/(α0+2))` of the third-order estimator.
fn triple_coefficients(alpha0: f64) -> (f64, f64) {
    (
        2.0 * alpha0 * alpha0 / ((alpha0 + 1.0) * (alpha0 + 2.0)),
        alpha0 / (alpha0 + 2.0),
    )
}

/// Combines raw moments into the third-order estimator:
/// `E3 + c_mean m1⊗m2⊗m3 - c_cross (m1 ⊗ P23 + P13 with m2 in mode 2 + P12 ⊗ m3)`.
fn assemble_triple(
    raw: &Tensor3,
    m1: &[f64],
    m2: &[f64],
    m3: &[f64],
    p12: &DMatrix<f64>,
    p13: &DMatrix<f64>,
    p23: &DMatrix<f64>,
    alpha0: f64,
) -> Tensor3 {
    let (c_mean, c_cross) = triple_coefficients(alpha0);
    Tensor3::from_fn(raw.dims(), |a, b, c| {
        raw.get(a, b, c) + c_mean * m1[a] * m2[b] * m3[c]
            - c_cross * (m1[a] * p23[(b, c)] + m2[b] * p13[(a, c)] + m3[c] * p12[(a, b)])
    })
}

/// Evaluates the moment-side definition of `M_jst` with exact Dirichlet expectations.
/// Independent of [`population_triple_cp`]; the two must agree.
pub fn population_triple_via_moments(
    theta_j: &DMatrix<f64>,
    theta_s: &DMatrix<f64>,
    theta_t: &DMatrix<f64>,
    alpha: &DVector<f64>,
) -> Result<Tensor3> {
    check_thetas(&[theta_j, theta_s, theta_t], alpha)?;
    let (mean, second, third) = dirichlet_moments(alpha)?;
    let raw = multilinear(&third, theta_j, theta_s, theta_t);
    let mj = theta_j * &mean;
    let ms = theta_s * &mean;
    let mt = theta_t * &mean;
    let p_js = theta_j * &second * theta_s.transpose();
    let p_jt = theta_j * &second * theta_t.transpose();
    let p_st = theta_s * &second * theta_t.transpose();
    Ok(assemble_triple(
        &raw,
        mj.as_slice(),
        ms.as_slice(),
        mt.as_slice(),
        &p_js,
        &p_jt,
        &p_st,
        alpha.sum(),
    ))
}

fn check_alpha0(alpha0: f64) -> Result<()> {
    if alpha0 > 0.0 && alpha0.is_finite() {
        Ok(())
    } else {
        Err(Error::arg(format!("alpha0 must be positive, got {alpha0}")))
    }
}

/// Row offsets of each variable inside a stacked index set.
fn layout(categories: &[usize], set: &[usize]) -> (Vec<usize>, usize) {
    let mut offsets = Vec::with_capacity(set.len());
    let mut total = 0;
    for &v in set {
        offsets.push(total);
        total += categories[v];
    }
    (offsets, total)
}

fn check_disjoint(sets: &[&[usize]], p: usize) -> Result<()> {
    let mut owner = vec![usize::MAX; p];
    for (m, set) in sets.iter().enumerate() {
        if set.is_empty() {
            return Err(Error::arg(format!("index set {m} is empty")));
        }
        for &v in set.iter() {
            if v >= p {
                return Err(Error::arg(format!("variable {v} out of range for p = {p}")));
            }
            if owner[v] != usize::MAX {
                return Err(Error::arg(format!(
                    "variable {v} appears in index sets {} and {m}; sets must be disjoint",
                    owner[v]
                )));
            }
            owner[v] = m;
        }
    }
    Ok(())
}

/// Empirical `M_js` for distinct variables.
pub fn empirical_pair(data: &Dataset, j: usize, s: usize, alpha0: f64) -> Result<DMatrix<f64>> {
    data.check_variable(j)?;
    data.check_variable(s)?;
    if j == s {
        return Err(Error::arg("pair estimator needs two distinct variables"));
    }
    check_alpha0(alpha0)?;
    let (dj, ds) = (data.categories[j], data.categories[s]);
    let mut mj = vec![0.0; dj];
    let mut ms = vec![0.0; ds];
    let mut pair = DMatrix::<f64>::zeros(dj, ds);
    for i in 0..data.n {
        let (a, va) = data.encoded(i, j);
        let (b, vb) = data.encoded(i, s);
        mj[a] += va;
        ms[b] += vb;
        pair[(a, b)] += va * vb;
    }
    let n = data.n as f64;
    let coef = alpha0 / (alpha0 + 1.0);
    Ok(DMatrix::from_fn(dj, ds, |a, b| {
        pair[(a, b)] / n - coef * (mj[a] / n) * (ms[b] / n)
    }))
}

/// Empirical `M_jst` for pairwise distinct variables.
pub fn empirical_triple(
    data: &Dataset,
    j: usize,
    s: usize,
    t: usize,
    alpha0: f64,
) -> Result<Tensor3> {
    if j == s || j == t || s == t {
        return Err(Error::arg("triple estimator needs three distinct variables"));
    }
    block_tensor(data, &[j], &[s], &[t], alpha0)
}

/// Empirical block tensor over three disjoint ordered variable sets. Block `(u, v, w)` is
/// the empirical `M` for variables `(pi_j[u], pi_s[v], pi_t[w])`.
///
/// Moments are accumulated as raw sums in one pass and divided by `n` at the end, so the
/// result does not depend on sample order for categorical data.
pub fn block_tensor(
    data: &Dataset,
    pi_j: &[usize],
    pi_s: &[usize],
    pi_t: &[usize],
    alpha0: f64,
) -> Result<Tensor3> {
    check_disjoint(&[pi_j, pi_s, pi_t], data.p())?;
    check_alpha0(alpha0)?;
    let cats = &data.categories;
    let (off1, n1) = layout(cats, pi_j);
    let (off2, n2) = layout(cats, pi_s);
    let (off3, n3) = layout(cats, pi_t);

    let mut s1 = vec![0.0; n1];
    let mut s2 = vec![0.0; n2];
    let mut s3 = vec![0.0; n3];
    let mut s12 = DMatrix::zeros(n1, n2);
    let mut s13 = DMatrix::zeros(n1, n3);
    let mut s23 = DMatrix::zeros(n2, n3);
    let mut s123 = Tensor3::zeros([n1, n2, n3]);

    let encode = |i: usize, set: &[usize], offsets: &[usize], buf: &mut Vec<(usize, f64)>| {
        buf.clear();
        for (&v, &o) in set.iter().zip(offsets) {
            let (pos, val) = data.encoded(i, v);
            buf.push((o + pos, val));
        }
    };
    let (mut e1, mut e2, mut e3) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..data.n {
        encode(i, pi_j, &off1, &mut e1);
        encode(i, pi_s, &off2, &mut e2);
        encode(i, pi_t, &off3, &mut e3);
        for &(a, va) in &e1 {
            s1[a] += va;
        }
        for &(b, vb) in &e2 {
            s2[b] += vb;
        }
        for &(c, vc) in &e3 {
            s3[c] += vc;
        }
        for &(a, va) in &e1 {
            for &(b, vb) in &e2 {
                s12[(a, b)] += va * vb;
            }
            for &(c, vc) in &e3 {
                s13[(a, c)] += va * vc;
            }
        }
        for &(b, vb) in &e2 {
            for &(c, vc) in &e3 {
                s23[(b, c)] += vb * vc;
            }
        }
        for &(c, vc) in &e3 {
            for &(b, vb) in &e2 {
                let vbc = vb * vc;
                for &(a, va) in &e1 {
                    s123.add_at(a, b, c, va * vbc);
                }
            }
        }
    }

    let n = data.n as f64;
    let div = |v: Vec<f64>| v.into_iter().map(|x| x / n).collect::<Vec<_>>();
    let (m1, m2, m3) = (div(s1), div(s2), div(s3));
    let raw = s123.scaled(1.0 / n);
    Ok(assemble_triple(
        &raw,
        &m1,
        &m2,
        &m3,
        &(s12 / n),
        &(s13 / n),
        &(s23 / n),
        alpha0,
    ))
}

/// Exact (population) block tensor of a known model: the CP form with stacked factors.
pub fn population_block_tensor(
    params: &ModelParams,
    pi_j: &[usize],
    pi_s: &[usize],
    pi_t: &[usize],
) -> Result<Tensor3> {
    check_disjoint(&[pi_j, pi_s, pi_t], params.p())?;
    let alpha = params.require_alpha()?;
    let stack = |set: &[usize]| stack_rows(set.iter().map(|&v| params.theta(v)), params.k());
    let f = KruskalFactors::with_weights(
        stack(pi_j),
        stack(pi_s),
        stack(pi_t),
        triple_weights(alpha),
    )?;
    Ok(kruskal_to_dense(&f))
}

/// Fraction of strictly negative entries.
pub fn negative_fraction(t: &Tensor3) -> f64 {
    if t.is_empty() {
        return 0.0;
    }
    t.as_slice().iter().filter(|&&v| v < 0.0).count() as f64 / t.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use crate::tensor::frobenius_distance;

    #[test]
    fn encode_examples() {
        assert_eq!(encode_observation(2, 4).unwrap().as_slice(), &[0.0, 0.0, 1.0, 0.0]);
        assert_eq!(encode_observation(0, 1).unwrap().as_slice(), &[0.0]);
        assert_eq!(encode_observation(7, 1).unwrap().as_slice(), &[7.0]);
        for y in 0..5 {
            assert_eq!(encode_observation(y, 5).unwrap().sum(), 1.0);
        }
        assert!(encode_observation(4, 4).is_err());
    }

    #[test]
    fn dirichlet_moments_uniform_two() {
        let (mean, second, third) = dirichlet_moments(&DVector::from_vec(vec![1.0, 1.0])).unwrap();
        assert_relative_eq!(mean[0], 0.5);
        assert_relative_eq!(mean[1], 0.5);
        assert_relative_eq!(second[(0, 0)], 1.0 / 3.0, epsilon = 1e-15);
        assert_relative_eq!(second[(0, 1)], 1.0 / 6.0, epsilon = 1e-15);
        assert_relative_eq!(second[(1, 1)], 1.0 / 3.0, epsilon = 1e-15);
        assert_relative_eq!(third.get(0, 0, 0), 0.25, epsilon = 1e-15);
        for (i, j, l) in [(0, 0, 1), (0, 1, 0), (1, 0, 0)] {
            assert_relative_eq!(third.get(i, j, l), 1.0 / 12.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn dirichlet_moments_sum_to_one() {
        let alpha = DVector::from_vec(vec![0.1, 2.5, 0.7, 4.0]);
        let (mean, second, third) = dirichlet_moments(&alpha).unwrap();
        assert_relative_eq!(mean.sum(), 1.0, epsilon = 1e-12);
        assert_relative_eq!(second.sum(), 1.0, epsilon = 1e-12);
        assert_relative_eq!(third.sum(), 1.0, epsilon = 1e-12);
        assert!(dirichlet_moments(&DVector::from_vec(vec![1.0, 0.0])).is_err());
    }

    #[test]
    fn identity_parameters() {
        let i2 = DMatrix::<f64>::identity(2, 2);
        let alpha = DVector::from_vec(vec![1.0, 1.0]);
        let pair = population_pair(&i2, &i2, &alpha).unwrap();
        assert_relative_eq!(pair[(0, 0)], 1.0 / 6.0, epsilon = 1e-15);
        assert_eq!(pair[(0, 1)], 0.0);
        let cp = population_triple_cp(&i2, &i2, &i2, &alpha).unwrap();
        let via = population_triple_via_moments(&i2, &i2, &i2, &alpha).unwrap();
        for ((i, j, l), v) in cp.indexed_iter() {
            let expected = if i == j && j == l { 1.0 / 12.0 } else { 0.0 };
            assert_relative_eq!(v, expected, epsilon = 1e-15);
            assert_relative_eq!(via.get(i, j, l), expected, epsilon = 1e-15);
        }
    }

    #[test]
    fn single_component_closed_form() {
        let a1 = 1.7;
        let tj = DMatrix::from_column_slice(3, 1, &[0.2, 0.5, 0.3]);
        let ts = DMatrix::from_column_slice(2, 1, &[0.6, 0.4]);
        let tt = DMatrix::from_column_slice(2, 1, &[0.9, 0.1]);
        let alpha = DVector::from_element(1, a1);
        let coef = 2.0 / ((a1 + 1.0) * (a1 + 2.0));
        let cp = population_triple_cp(&tj, &ts, &tt, &alpha).unwrap();
        let via = population_triple_via_moments(&tj, &ts, &tt, &alpha).unwrap();
        for ((i, j, l), v) in cp.indexed_iter() {
            let expected = coef * tj[i] * ts[j] * tt[l];
            assert_relative_eq!(v, expected, epsilon = 1e-15);
            assert_relative_eq!(via.get(i, j, l), expected, epsilon = 1e-14);
        }
    }

    #[test]
    fn pair_matches_matrix_product_and_mass() {
        let tj = DMatrix::from_row_slice(3, 2, &[0.2, 0.5, 0.3, 0.1, 0.5, 0.4]);
        let ts = DMatrix::from_row_slice(2, 2, &[0.7, 0.25, 0.3, 0.75]);
        let alpha = DVector::from_vec(vec![0.3, 1.2]);
        let a0 = 1.5;
        let pair = population_pair(&tj, &ts, &alpha).unwrap();
        let mut direct = DMatrix::zeros(3, 2);
        for h in 0..2 {
            for a in 0..3 {
                for b in 0..2 {
                    direct[(a, b)] += alpha[h] / (a0 * (a0 + 1.0)) * tj[(a, h)] * ts[(b, h)];
                }
            }
        }
        assert!((pair.clone() - direct).abs().max() < 1e-15);
        assert_relative_eq!(pair.sum(), 1.0 / (a0 + 1.0), epsilon = 1e-14);
    }

    fn constant_dataset(p: usize, n: usize) -> Dataset {
        Dataset::new(vec![3; p], vec![0; n * p]).unwrap()
    }

    #[test]
    fn empirical_pair_hand_value() {
        let data = constant_dataset(2, 10);
        let m = empirical_pair(&data, 0, 1, 1.0).unwrap();
        assert_relative_eq!(m[(0, 0)], 0.5, epsilon = 1e-15);
        assert_eq!(m.iter().filter(|&&v| v != 0.0).count(), 1);
        assert!(empirical_pair(&data, 1, 1, 1.0).is_err());
    }

    #[test]
    fn empirical_triple_hand_value() {
        let data = constant_dataset(3, 7);
        let t = empirical_triple(&data, 0, 1, 2, 1.0).unwrap();
        assert_relative_eq!(t.get(0, 0, 0), 1.0 / 3.0, epsilon = 1e-15);
        assert_eq!(t.as_slice().iter().filter(|&&v| v != 0.0).count(), 1);
        assert!(empirical_triple(&data, 0, 1, 0, 1.0).is_err());
    }

    #[test]
    fn block_tensor_shapes_and_singletons() {
        let data = Dataset::new(vec![4; 6], (0..60).map(|x| (x * 7 % 4) as u32).collect()).unwrap();
        let b = block_tensor(&data, &[0, 1], &[2, 3], &[4, 5], 0.3).unwrap();
        assert_eq!(b.dims(), [8, 8, 8]);
        let single = block_tensor(&data, &[1], &[3], &[5], 0.3).unwrap();
        assert_eq!(single, empirical_triple(&data, 1, 3, 5, 0.3).unwrap());
        assert!(block_tensor(&data, &[0, 1], &[1, 3], &[4], 0.3).is_err());
        assert!(block_tensor(&data, &[0], &[2], &[9], 0.3).is_err());
    }

    #[test]
    fn block_tensor_blocks_are_triples() {
        let data = Dataset::new(vec![2, 3, 2, 4], (0..80).map(|x| (x * 5 % 2) as u32).collect()).unwrap();
        let b = block_tensor(&data, &[0, 1], &[2], &[3], 0.5).unwrap();
        let first = empirical_triple(&data, 0, 2, 3, 0.5).unwrap();
        let second = empirical_triple(&data, 1, 2, 3, 0.5).unwrap();
        for ((i, j, l), v) in first.indexed_iter() {
            assert_relative_eq!(b.get(i, j, l), v, epsilon = 1e-15);
        }
        for ((i, j, l), v) in second.indexed_iter() {
            assert_relative_eq!(b.get(i + 2, j, l), v, epsilon = 1e-15);
        }
    }

    #[test]
    fn numeric_variable_uses_raw_value() {
        let data = Dataset::new(vec![1, 2], vec![3, 0, 5, 1]).unwrap();
        let m = empirical_pair(&data, 0, 1, 1.0).unwrap();
        // E[y b] = (3 e0 + 5 e1)/2, E[y] = 4, E[b] = (1/2, 1/2)
        assert_relative_eq!(m[(0, 0)], 1.5 - 0.5 * 4.0 * 0.5, epsilon = 1e-15);
        assert_relative_eq!(m[(0, 1)], 2.5 - 0.5 * 4.0 * 0.5, epsilon = 1e-15);
    }

    #[test]
    fn negative_fraction_cases() {
        let t = Tensor3::from_vec([2, 2, 2], vec![1.0, -1.0, 0.0, 2.0, -0.5, 3.0, 0.0, 1.0]).unwrap();
        assert_eq!(negative_fraction(&t), 0.25);
        assert_eq!(negative_fraction(&Tensor3::zeros([2, 2, 2])), 0.0);
    }

    #[test]
    fn dataset_validation() {
        assert!(Dataset::new(vec![2, 2], vec![0, 2]).is_err());
        assert!(Dataset::new(vec![2, 2], vec![0]).is_err());
        assert!(Dataset::new(vec![2, 2], vec![]).is_err());
        assert!(Dataset::new(vec![1, 2], vec![17, 1]).is_ok());
    }

    #[test]
    fn model_params_validation() {
        let good = DMatrix::from_row_slice(2, 2, &[0.5, 1.0, 0.5, 0.0]);
        let alpha = DVector::from_vec(vec![1.0, 2.0]);
        let m = ModelParams::new(vec![good.clone()], alpha.clone()).unwrap();
        assert_eq!(m.alpha0(), Some(3.0));
        let bad = DMatrix::from_row_slice(2, 2, &[0.5, 1.0, 0.6, 0.0]);
        let err = ModelParams::new(vec![good.clone(), bad], alpha.clone()).unwrap_err();
        assert!(err.to_string().contains("variable 1, column 0"));
        let negative = DMatrix::from_row_slice(2, 2, &[1.5, 1.0, -0.5, 0.0]);
        assert!(ModelParams::new(vec![negative], alpha).is_err());
    }

    #[test]
    fn population_block_matches_blockwise_moments() {
        let t0 = DMatrix::from_row_slice(2, 2, &[0.3, 0.8, 0.7, 0.2]);
        let t1 = DMatrix::from_row_slice(3, 2, &[0.1, 0.4, 0.6, 0.3, 0.3, 0.3]);
        let t2 = DMatrix::from_row_slice(2, 2, &[0.5, 0.9, 0.5, 0.1]);
        let t3 = DMatrix::from_row_slice(2, 2, &[0.05, 0.6, 0.95, 0.4]);
        let alpha = DVector::from_vec(vec![0.4, 0.9]);
        let params = ModelParams::new(vec![t0, t1, t2, t3], alpha.clone()).unwrap();
        let block = population_block_tensor(&params, &[0, 1], &[2], &[3]).unwrap();
        let top = population_triple_via_moments(params.theta(0), params.theta(2), params.theta(3), &alpha).unwrap();
        let bottom = population_triple_via_moments(params.theta(1), params.theta(2), params.theta(3), &alpha).unwrap();
        let mut assembled = Tensor3::zeros([5, 2, 2]);
        for ((i, j, l), v) in top.indexed_iter() {
            assembled.set(i, j, l, v);
        }
        for ((i, j, l), v) in bottom.indexed_iter() {
            assembled.set(i + 2, j, l, v);
        }
        assert!(frobenius_distance(&block, &assembled).unwrap() < 1e-14);
    }
}
