//! Column alignment between factorizations.
//!
//! A factorization recovers the hidden components only up to a column permutation. Given a
//! reference matrix whose labelling is already fixed (by `psi_ref`) and a new matrix, the
//! matchers return the permutation `ψ` such that column `s` of `ψθ'` is the estimate of
//! the same component as column `s` of `ψ_ref θ`. Everything works on column-normalized
//! copies, so results do not depend on column scales.

use std::fmt;

use itertools::Itertools;
use nalgebra::{DMatrix, SVD};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A bijection on `0..k`. Acting on a matrix, column `h` of the result is column `psi[h]`
/// of the input.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Permutation(Vec<usize>);

impl Permutation {
    pub fn new(psi: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; psi.len()];
        for &i in &psi {
            if i >= psi.len() || std::mem::replace(&mut seen[i], true) {
                return Err(Error::arg(format!("{psi:?} is not a permutation")));
            }
        }
        Ok(Permutation(psi))
    }

    pub fn identity(k: usize) -> Self {
        Permutation((0..k).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn is_identity(&self) -> bool {
        self.0.iter().enumerate().all(|(h, &i)| h == i)
    }

    pub fn inverse(&self) -> Permutation {
        let mut inv = vec![0; self.0.len()];
        for (h, &i) in self.0.iter().enumerate() {
            inv[i] = h;
        }
        Permutation(inv)
    }

    /// `self.then(other)` acts as applying `self` first, then `other`:
    /// `apply(self.then(other), M) = apply(other, apply(self, M))`.
    pub fn then(&self, other: &Permutation) -> Permutation {
        Permutation(other.0.iter().map(|&i| self.0[i]).collect())
    }
}

impl TryFrom<Vec<usize>> for Permutation {
    type Error = Error;

    fn try_from(v: Vec<usize>) -> Result<Self> {
        Permutation::new(v)
    }
}

impl From<Permutation> for Vec<usize> {
    fn from(p: Permutation) -> Self {
        p.0
    }
}

impl fmt::Display for Permutation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({})", self.0.iter().join(","))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    pub permutation: Option<Permutation>,
    /// The raw argmax assignment was already a permutation.
    pub valid: bool,
    /// Duplicates in the argmax assignment were resolved greedily.
    pub repaired: bool,
    /// Mean cosine similarity between matched normalized columns.
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Matcher {
    #[default]
    Procrustes,
    SmallestAngle,
}

impl Matcher {
    pub fn run(
        self,
        theta_ref: &DMatrix<f64>,
        psi_ref: &Permutation,
        theta_new: &DMatrix<f64>,
    ) -> Result<MatchReport> {
        match self {
            Matcher::Procrustes => match_procrustes(theta_ref, psi_ref, theta_new),
            Matcher::SmallestAngle => match_smallest_angle(theta_ref, psi_ref, theta_new),
        }
    }
}

impl std::str::FromStr for Matcher {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "procrustes" => Ok(Matcher::Procrustes),
            "smallest-angle" => Ok(Matcher::SmallestAngle),
            other => Err(Error::arg(format!(
                "unknown matcher {other:?} (expected procrustes or smallest-angle)"
            ))),
        }
    }
}

pub fn normalize_columns(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut out = m.clone();
    for (h, mut col) in out.column_iter_mut().enumerate() {
        let norm = col.norm();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::arg(format!("column {h} has zero or non-finite norm")));
        }
        col /= norm;
    }
    Ok(out)
}

pub fn apply_permutation(psi: &Permutation, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if psi.len() != m.ncols() {
        return Err(Error::arg(format!(
            "permutation of length {} applied to {} columns",
            psi.len(),
            m.ncols()
        )));
    }
    Ok(m.select_columns(psi.as_slice()))
}

fn check_pair(theta_ref: &DMatrix<f64>, theta_new: &DMatrix<f64>) -> Result<()> {
    if theta_ref.shape() != theta_new.shape() || theta_ref.ncols() == 0 {
        return Err(Error::arg(format!(
            "cannot match {:?} against {:?}",
            theta_ref.shape(),
            theta_new.shape()
        )));
    }
    Ok(())
}

/// `S = θ̄'ᵀ (ψ_ref θ̄)`: entry `(t, s)` is the cosine between new column `t` and
/// reference slot `s`.
fn similarity(
    theta_ref: &DMatrix<f64>,
    psi_ref: &Permutation,
    theta_new: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    check_pair(theta_ref, theta_new)?;
    let reference = apply_permutation(psi_ref, &normalize_columns(theta_ref)?)?;
    Ok(normalize_columns(theta_new)?.transpose() * reference)
}

/// Column-wise argmax (ties to the lowest row), with greedy repair when two columns pick
/// the same row: the largest remaining entry is fixed first and its row and column removed.
fn assign(selector: &DMatrix<f64>) -> (Permutation, bool) {
    let k = selector.ncols();
    let raw: Vec<usize> = (0..k)
        .map(|s| {
            let col = selector.column(s);
            (0..k).fold(0, |best, t| if col[t] > col[best] { t } else { best })
        })
        .collect();
    if let Ok(p) = Permutation::new(raw) {
        return (p, true);
    }
    let mut entries: Vec<(usize, usize)> = (0..k).cartesian_product(0..k).collect();
    // stable sort keeps (column, row) lexicographic order among equal values
    entries.sort_by(|&(s1, t1), &(s2, t2)| selector[(t2, s2)].total_cmp(&selector[(t1, s1)]));
    let mut psi = vec![usize::MAX; k];
    let mut row_used = vec![false; k];
    for (s, t) in entries {
        if psi[s] == usize::MAX && !row_used[t] {
            psi[s] = t;
            row_used[t] = true;
        }
    }
    (Permutation(psi), false)
}

fn report(selector: &DMatrix<f64>, sim: &DMatrix<f64>) -> MatchReport {
    let (psi, valid) = assign(selector);
    let k = psi.len();
    let score = psi.as_slice().iter().enumerate().map(|(s, &t)| sim[(t, s)]).sum::<f64>() / k as f64;
    MatchReport {
        permutation: Some(psi),
        valid,
        repaired: !valid,
        score,
    }
}

/// Assigns each reference slot the new column with the largest cosine similarity.
pub fn match_smallest_angle(
    theta_ref: &DMatrix<f64>,
    psi_ref: &Permutation,
    theta_new: &DMatrix<f64>,
) -> Result<MatchReport> {
    let s = similarity(theta_ref, psi_ref, theta_new)?;
    Ok(report(&s, &s))
}

/// Relative threshold below which the similarity matrix is treated as rank deficient.
const RANK_TOL: f64 = 1e-12;

/// Solves the orthogonal Procrustes problem `min ‖θ̄'Ψ − ψ_ref θ̄‖_F` over orthogonal `Ψ`
/// (polar factor `UVᵀ` of `S = θ̄'ᵀ ψ_ref θ̄`) and reads a permutation off `Ψ` by
/// column-wise argmax.
pub fn match_procrustes(
    theta_ref: &DMatrix<f64>,
    psi_ref: &Permutation,
    theta_new: &DMatrix<f64>,
) -> Result<MatchReport> {
    let s = similarity(theta_ref, psi_ref, theta_new)?;
    let svd = SVD::new(s.clone(), true, true);
    let sv = &svd.singular_values;
    if !(sv.min() > RANK_TOL * sv.max()) {
        return Ok(MatchReport {
            permutation: None,
            valid: false,
            repaired: false,
            score: f64::NAN,
        });
    }
    let polar = svd.u.expect("requested") * svd.v_t.expect("requested");
    Ok(report(&polar, &s))
}

/// `‖ψθ̄' − ψ_ref θ̄‖²_F`.
pub fn permutation_objective(
    theta_ref: &DMatrix<f64>,
    psi_ref: &Permutation,
    theta_new: &DMatrix<f64>,
    psi: &Permutation,
) -> Result<f64> {
    check_pair(theta_ref, theta_new)?;
    let reference = apply_permutation(psi_ref, &normalize_columns(theta_ref)?)?;
    let moved = apply_permutation(psi, &normalize_columns(theta_new)?)?;
    Ok((moved - reference).norm_squared())
}

pub const BRUTE_FORCE_MAX_K: usize = 8;

/// The permutation minimizing `‖ψθ̄' − θ̄‖²_F`, by enumerating all `k!` candidates
/// (lexicographically first among ties).
pub fn brute_force_match(theta_ref: &DMatrix<f64>, theta_new: &DMatrix<f64>) -> Result<Permutation> {
    check_pair(theta_ref, theta_new)?;
    let k = theta_ref.ncols();
    if k > BRUTE_FORCE_MAX_K {
        return Err(Error::arg(format!("brute-force matching needs k ≤ {BRUTE_FORCE_MAX_K}, got {k}")));
    }
    // ‖ψθ̄' − θ̄‖² = 2k − 2 Σ_s S[ψ_s, s] for unit columns
    let s = similarity(theta_ref, &Permutation::identity(k), theta_new)?;
    let mut best = (f64::NEG_INFINITY, Vec::new());
    for psi in (0..k).permutations(k) {
        let total: f64 = psi.iter().enumerate().map(|(col, &row)| s[(row, col)]).sum();
        if total > best.0 {
            best = (total, psi);
        }
    }
    Ok(Permutation(best.1))
}

/// `1 − sqrt(1/2 + sqrt((1 + c)/8))` where `c` is the largest cosine between two distinct
/// columns of `theta` (`−1` for a single column).
pub fn sam_bound(theta: &DMatrix<f64>) -> Result<f64> {
    let n = normalize_columns(theta)?;
    let g = n.transpose() * &n;
    let k = g.ncols();
    let c_max = (0..k)
        .flat_map(|i| (0..k).filter(move |&j| j != i).map(move |j| (i, j)))
        .map(|(i, j)| g[(i, j)])
        .fold(-1.0, f64::max);
    Ok(1.0 - (0.5 + ((1.0 + c_max) / 8.0).sqrt()).sqrt())
}

/// Sufficient condition for smallest-angle matching to be consistent: every column of
/// `theta_hat` is within relative error [`sam_bound`] of the matching column of `theta`.
pub fn check_sam_bound(theta: &DMatrix<f64>, theta_hat: &DMatrix<f64>) -> Result<bool> {
    check_pair(theta, theta_hat)?;
    let bound = sam_bound(theta)?;
    Ok(theta.column_iter().zip(theta_hat.column_iter()).all(|(t, h)| {
        let norm = t.norm();
        norm > 0.0 && (t - h).norm() / norm < bound
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProcrustesBound {
    pub satisfied: bool,
    /// `θᵀθ` was numerically singular, so the condition could not be evaluated.
    pub singular: bool,
    /// `‖E‖₂`.
    pub error_norm: f64,
    /// `σ_k(θᵀθ)`.
    pub sigma_min: f64,
}

fn sorted_singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    let mut sv: Vec<f64> = m.singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

/// Sufficient condition for Procrustes matching to recover `psi` when `theta_prime` is a
/// perturbation of `ψθ`. Both matrices are column-normalized first. With
/// `E = (ψθ)ᵀ(θ' − ψθ)`, `ρ = σ₁(E) + σ₂(E)` and `ν = σ_k(θᵀθ) + σ_{k−1}(θᵀθ)`, the
/// condition is `‖E‖₂ < σ_k(θᵀθ)` and `−(‖E‖₂/ρ)·ln(1 − ρ/ν) < (2 − √2)/4`.
pub fn check_procrustes_bound(
    theta: &DMatrix<f64>,
    theta_prime: &DMatrix<f64>,
    psi: &Permutation,
) -> Result<ProcrustesBound> {
    check_pair(theta, theta_prime)?;
    let moved = apply_permutation(psi, &normalize_columns(theta)?)?;
    let prime = normalize_columns(theta_prime)?;
    let gram_sv = sorted_singular_values(&(moved.transpose() * &moved));
    let k = gram_sv.len();
    let sigma_max = gram_sv[0];
    let sigma_min = gram_sv[k - 1];
    let e = moved.transpose() * (prime - &moved);
    let e_sv = sorted_singular_values(&e);
    let error_norm = e_sv[0];
    if !(sigma_min > RANK_TOL * sigma_max) {
        return Ok(ProcrustesBound {
            satisfied: false,
            singular: true,
            error_norm,
            sigma_min,
        });
    }
    let rho = error_norm + e_sv.get(1).copied().unwrap_or(0.0);
    let nu = sigma_min + if k >= 2 { gram_sv[k - 2] } else { 0.0 };
    let first = error_norm < sigma_min;
    let second = if rho == 0.0 {
        true
    } else if rho >= nu {
        false
    } else {
        -(error_norm / rho) * (1.0 - rho / nu).ln() < (2.0 - 2f64.sqrt()) / 4.0
    };
    Ok(ProcrustesBound {
        satisfied: first && second,
        singular: false,
        error_norm,
        sigma_min,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn perm(v: &[usize]) -> Permutation {
        Permutation::new(v.to_vec()).unwrap()
    }

    fn random_positive(rng: &mut impl Rng, rows: usize, k: usize) -> DMatrix<f64> {
        DMatrix::from_fn(rows, k, |_, _| rng.random_range(0.01..1.0))
    }

    #[test]
    fn permutation_validation() {
        assert!(Permutation::new(vec![0, 0]).is_err());
        assert!(Permutation::new(vec![0, 2]).is_err());
        let p = perm(&[2, 0, 1]);
        assert_eq!(p.inverse().as_slice(), &[1, 2, 0]);
        assert!(p.then(&p.inverse()).is_identity());
        assert_eq!(p.to_string(), "(2,0,1)");
    }

    #[test]
    fn normalize_examples() {
        let id = DMatrix::<f64>::identity(3, 3);
        assert_eq!(normalize_columns(&id).unwrap(), id);
        let m = DMatrix::from_column_slice(2, 1, &[3.0, 4.0]);
        let n = normalize_columns(&m).unwrap();
        assert!((n[(0, 0)] - 0.6).abs() < 1e-15 && (n[(1, 0)] - 0.8).abs() < 1e-15);
        assert!(normalize_columns(&DMatrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn apply_examples() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(apply_permutation(&Permutation::identity(2), &m).unwrap(), m);
        let swapped = apply_permutation(&perm(&[1, 0]), &m).unwrap();
        assert_eq!(swapped, DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 4.0, 3.0]));
        let p = perm(&[2, 0, 1]);
        let m3 = DMatrix::from_fn(2, 3, |i, j| (i * 3 + j) as f64);
        let back = apply_permutation(&p, &apply_permutation(&p.inverse(), &m3).unwrap()).unwrap();
        assert_eq!(back, m3);
        assert!(apply_permutation(&p, &m).is_err());
    }

    #[test]
    fn matchers_on_identical_and_swapped() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let theta = random_positive(&mut rng, 8, 3);
        let id = Permutation::identity(3);
        let swap = perm(&[1, 0, 2]);
        let swapped = apply_permutation(&swap, &theta).unwrap();
        for matcher in [Matcher::Procrustes, Matcher::SmallestAngle] {
            let r = matcher.run(&theta, &id, &theta).unwrap();
            assert!(r.valid && !r.repaired);
            assert!(r.permutation.unwrap().is_identity());
            let r = matcher.run(&theta, &id, &swapped).unwrap();
            assert_eq!(r.permutation.unwrap(), swap.inverse());
        }
        assert_eq!(brute_force_match(&theta, &swapped).unwrap(), swap.inverse());
        assert!(brute_force_match(&theta, &theta).unwrap().is_identity());
    }

    #[test]
    fn rescaling_does_not_change_matches() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_positive(&mut rng, 6, 4);
        let b = random_positive(&mut rng, 6, 4);
        let scaled = DMatrix::from_fn(6, 4, |i, j| b[(i, j)] * (j as f64 + 0.5));
        let id = Permutation::identity(4);
        assert_eq!(
            match_smallest_angle(&a, &id, &b).unwrap().permutation,
            match_smallest_angle(&a, &id, &scaled).unwrap().permutation
        );
        assert_eq!(
            match_procrustes(&a, &id, &b).unwrap().permutation,
            match_procrustes(&a, &id, &scaled).unwrap().permutation
        );
    }

    #[test]
    fn duplicates_are_repaired_greedily() {
        // both new columns are closest to reference column 0
        let s = DMatrix::from_row_slice(2, 2, &[0.9, 0.8, 0.1, 0.2]);
        let (p, valid) = assign(&s);
        assert!(!valid);
        assert_eq!(p.as_slice(), &[0, 1]);
    }

    #[test]
    fn rank_deficient_procrustes_is_invalid() {
        let theta = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 1.0, 1.0, 0.0, 0.0]);
        let r = match_procrustes(&theta, &Permutation::identity(2), &theta).unwrap();
        assert!(!r.valid && r.permutation.is_none());
    }

    #[test]
    fn sam_bound_values() {
        let id = DMatrix::<f64>::identity(4, 4);
        let b = sam_bound(&id).unwrap();
        assert!((b - (1.0 - (0.5 + (0.125f64).sqrt()).sqrt())).abs() < 1e-15);
        assert!(b < 1.0 - (2.0 + 2f64.sqrt()).sqrt() / 2.0 + 1e-12);
        assert!(check_sam_bound(&id, &id).unwrap());
        let near = id.map(|v| v * 0.95);
        assert!(check_sam_bound(&id, &near).unwrap());
        let far = id.map(|v| v * 0.5);
        assert!(!check_sam_bound(&id, &far).unwrap());
    }

    #[test]
    fn procrustes_bound_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let theta = random_positive(&mut rng, 10, 3);
        let psi = perm(&[2, 0, 1]);
        let exact = apply_permutation(&psi, &theta).unwrap();
        let b = check_procrustes_bound(&theta, &exact, &psi).unwrap();
        assert!(b.satisfied && !b.singular);
        let other = random_positive(&mut rng, 10, 3);
        assert!(!check_procrustes_bound(&theta, &other, &psi).unwrap().satisfied);
        let singular = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let b = check_procrustes_bound(&singular, &singular, &Permutation::identity(2)).unwrap();
        assert!(b.singular && !b.satisfied);
    }

    #[test]
    fn matcher_parses() {
        assert_eq!("smallest-angle".parse::<Matcher>().unwrap(), Matcher::SmallestAngle);
        assert!("hungarian".parse::<Matcher>().is_err());
    }
}
