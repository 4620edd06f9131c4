//! Dense third-order tensors and CP (Kruskal) factor algebra.
//!
//! Entries are stored so that the mode-1 unfolding is the column-major view of
//! the backing buffer: entry `(i1, i2, i3)` lives at `i1 + d1 * (i2 + d2 * i3)`.
//! The mode-n unfolding places `i_n` on the rows and orders the remaining two
//! indices with the lower mode varying fastest, which makes
//!
//! ```text
//! T(1) = A (C ⊙ B)ᵀ,   T(2) = B (C ⊙ A)ᵀ,   T(3) = C (B ⊙ A)ᵀ
//! ```
//!
//! hold with [`khatri_rao`] taking its second argument as the fast index.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// One of the three tensor modes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    One,
    Two,
    Three,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::One, Mode::Two, Mode::Three];

    pub fn index(self) -> usize {
        match self {
            Mode::One => 0,
            Mode::Two => 1,
            Mode::Three => 2,
        }
    }
}

impl TryFrom<usize> for Mode {
    type Error = Error;

    /// Modes are numbered 1, 2, 3.
    fn try_from(mode: usize) -> Result<Self> {
        match mode {
            1 => Ok(Mode::One),
            2 => Ok(Mode::Two),
            3 => Ok(Mode::Three),
            m => Err(Error::arg(format!("mode must be 1, 2 or 3, got {m}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    dims: [usize; 3],
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(dims: [usize; 3]) -> Self {
        Tensor3 {
            dims,
            data: vec![0.0; dims[0] * dims[1] * dims[2]],
        }
    }

    /// Builds a tensor from a buffer laid out with `i1` fastest, then `i2`, then `i3`.
    pub fn from_vec(dims: [usize; 3], data: Vec<f64>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::arg(format!("tensor dims must be positive, got {dims:?}")));
        }
        if data.len() != dims[0] * dims[1] * dims[2] {
            return Err(Error::arg(format!(
                "tensor of dims {dims:?} needs {} entries, got {}",
                dims[0] * dims[1] * dims[2],
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::arg(format!("non-finite tensor entry at flat index {pos}")));
        }
        Ok(Tensor3 { dims, data })
    }

    pub fn from_fn(dims: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for l in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    data.push(f(i, j, l));
                }
            }
        }
        Tensor3 { dims, data }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    fn offset(&self, i: usize, j: usize, l: usize) -> usize {
        debug_assert!(i < self.dims[0] && j < self.dims[1] && l < self.dims[2]);
        i + self.dims[0] * (j + self.dims[1] * l)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, l: usize) -> f64 {
        self.data[self.offset(i, j, l)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, l: usize, value: f64) {
        let o = self.offset(i, j, l);
        self.data[o] = value;
    }

    #[inline]
    pub fn add_at(&mut self, i: usize, j: usize, l: usize, value: f64) {
        let o = self.offset(i, j, l);
        self.data[o] += value;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Iterates `((i1, i2, i3), value)` in storage order.
    pub fn indexed_iter(&self) -> impl Iterator<Item = ((usize, usize, usize), f64)> + '_ {
        let [d1, d2, _] = self.dims;
        self.data.iter().enumerate().map(move |(o, &v)| {
            let i = o % d1;
            let j = (o / d1) % d2;
            let l = o / (d1 * d2);
            ((i, j, l), v)
        })
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn scaled(&self, factor: f64) -> Tensor3 {
        Tensor3 {
            dims: self.dims,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    /// Reorders modes so that result mode `m` is input mode `order[m]`.
    pub fn permute_modes(&self, order: [usize; 3]) -> Result<Tensor3> {
        let mut seen = [false; 3];
        for &o in &order {
            if o > 2 || seen[o] {
                return Err(Error::arg(format!("{order:?} is not a permutation of modes")));
            }
            seen[o] = true;
        }
        let dims = [self.dims[order[0]], self.dims[order[1]], self.dims[order[2]]];
        let mut out = Tensor3::zeros(dims);
        for ((i, j, l), v) in self.indexed_iter() {
            let src = [i, j, l];
            out.set(src[order[0]], src[order[1]], src[order[2]], v);
        }
        Ok(out)
    }
}

pub fn outer3(u: &[f64], v: &[f64], w: &[f64]) -> Tensor3 {
    Tensor3::from_fn([u.len(), v.len(), w.len()], |i, j, l| u[i] * v[j] * w[l])
}

/// Mode-n matricization; see the module docs for the column ordering.
pub fn unfold(t: &Tensor3, mode: Mode) -> DMatrix<f64> {
    let [d1, d2, d3] = t.dims;
    match mode {
        Mode::One => DMatrix::from_column_slice(d1, d2 * d3, &t.data),
        Mode::Two => DMatrix::from_fn(d2, d1 * d3, |j, col| t.get(col % d1, j, col / d1)),
        Mode::Three => DMatrix::from_fn(d3, d1 * d2, |l, col| t.get(col % d1, col / d1, l)),
    }
}

/// Inverse of [`unfold`].
pub fn fold(m: &DMatrix<f64>, mode: Mode, dims: [usize; 3]) -> Result<Tensor3> {
    let [d1, d2, d3] = dims;
    let expected = match mode {
        Mode::One => (d1, d2 * d3),
        Mode::Two => (d2, d1 * d3),
        Mode::Three => (d3, d1 * d2),
    };
    if m.shape() != expected {
        return Err(Error::arg(format!(
            "mode-{} unfolding of dims {dims:?} must be {expected:?}, got {:?}",
            mode.index() + 1,
            m.shape()
        )));
    }
    let t = match mode {
        Mode::One => Tensor3::from_fn(dims, |i, j, l| m[(i, j + d2 * l)]),
        Mode::Two => Tensor3::from_fn(dims, |i, j, l| m[(j, i + d1 * l)]),
        Mode::Three => Tensor3::from_fn(dims, |i, j, l| m[(l, i + d1 * j)]),
    };
    if t.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::arg("non-finite entry in folded matrix"));
    }
    Ok(t)
}

/// Column-wise Kronecker product; row `a * y.nrows() + b` of column `h` is `x[a,h] * y[b,h]`.
pub fn khatri_rao(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if x.ncols() != y.ncols() {
        return Err(Error::arg(format!(
            "khatri-rao needs equal column counts, got {} and {}",
            x.ncols(),
            y.ncols()
        )));
    }
    let rows_y = y.nrows();
    Ok(DMatrix::from_fn(x.nrows() * rows_y, x.ncols(), |row, h| {
        x[(row / rows_y, h)] * y[(row % rows_y, h)]
    }))
}

/// Three nonnegative-by-convention factor matrices sharing a column count, plus column weights.
#[derive(Debug, Clone, PartialEq)]
pub struct KruskalFactors {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub weights: DVector<f64>,
}

impl KruskalFactors {
    /// Unit weights.
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>) -> Result<Self> {
        let r = a.ncols();
        Self::with_weights(a, b, c, DVector::from_element(r, 1.0))
    }

    pub fn with_weights(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
        weights: DVector<f64>,
    ) -> Result<Self> {
        let r = a.ncols();
        if r == 0 {
            return Err(Error::arg("kruskal factors need at least one column"));
        }
        if b.ncols() != r || c.ncols() != r || weights.len() != r {
            return Err(Error::arg(format!(
                "kruskal column counts disagree: A {r}, B {}, C {}, weights {}",
                b.ncols(),
                c.ncols(),
                weights.len()
            )));
        }
        if a.nrows() == 0 || b.nrows() == 0 || c.nrows() == 0 {
            return Err(Error::arg("kruskal factors need at least one row"));
        }
        Ok(KruskalFactors { a, b, c, weights })
    }

    pub fn rank(&self) -> usize {
        self.a.ncols()
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.a.nrows(), self.b.nrows(), self.c.nrows()]
    }

    pub fn factor(&self, mode: Mode) -> &DMatrix<f64> {
        match mode {
            Mode::One => &self.a,
            Mode::Two => &self.b,
            Mode::Three => &self.c,
        }
    }

    pub fn to_dense(&self) -> Tensor3 {
        kruskal_to_dense(self)
    }
}

/// `Σ_h w_h · A_h ⊗ B_h ⊗ C_h`.
pub fn kruskal_to_dense(f: &KruskalFactors) -> Tensor3 {
    let dims = f.dims();
    let [d1, d2, d3] = dims;
    let mut t = Tensor3::zeros(dims);
    for h in 0..f.rank() {
        let w = f.weights[h];
        for l in 0..d3 {
            let cl = w * f.c[(l, h)];
            if cl == 0.0 {
                continue;
            }
            for j in 0..d2 {
                let bj = cl * f.b[(j, h)];
                let base = d1 * (j + d2 * l);
                for i in 0..d1 {
                    t.data[base + i] += f.a[(i, h)] * bj;
                }
            }
        }
    }
    t
}

pub fn frobenius_distance(t1: &Tensor3, t2: &Tensor3) -> Result<f64> {
    if t1.dims != t2.dims {
        return Err(Error::arg(format!(
            "frobenius distance of tensors with dims {:?} and {:?}",
            t1.dims, t2.dims
        )));
    }
    Ok(t1
        .data
        .iter()
        .zip(&t2.data)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt())
}

/// Matricized tensor times Khatri-Rao product for `mode`, e.g. `T(1) (C ⊙ B)` for mode one,
/// computed without forming the Khatri-Rao matrix. The two factors are the ones for the
/// remaining modes in ascending order.
pub fn mttkrp(
    t: &Tensor3,
    mode: Mode,
    first: &DMatrix<f64>,
    second: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let [d1, d2, d3] = t.dims;
    let r = first.ncols();
    if second.ncols() != r {
        return Err(Error::arg("mttkrp factors disagree on rank"));
    }
    let (rows, n_first, n_second) = match mode {
        Mode::One => (d1, d2, d3),
        Mode::Two => (d2, d1, d3),
        Mode::Three => (d3, d1, d2),
    };
    if first.nrows() != n_first || second.nrows() != n_second {
        return Err(Error::arg(format!(
            "mttkrp factor shapes {:?} and {:?} do not match dims {:?} for mode {}",
            first.shape(),
            second.shape(),
            t.dims,
            mode.index() + 1
        )));
    }
    let mut out = DMatrix::zeros(rows, r);
    let mut acc = vec![0.0; r];
    match mode {
        Mode::One => {
            for l in 0..d3 {
                for j in 0..d2 {
                    for (h, a) in acc.iter_mut().enumerate() {
                        *a = first[(j, h)] * second[(l, h)];
                    }
                    let base = d1 * (j + d2 * l);
                    for i in 0..d1 {
                        let v = t.data[base + i];
                        if v != 0.0 {
                            for (h, a) in acc.iter().enumerate() {
                                out[(i, h)] += v * a;
                            }
                        }
                    }
                }
            }
        }
        Mode::Two => {
            for l in 0..d3 {
                for j in 0..d2 {
                    let base = d1 * (j + d2 * l);
                    for h in 0..r {
                        let mut s = 0.0;
                        for i in 0..d1 {
                            s += t.data[base + i] * first[(i, h)];
                        }
                        out[(j, h)] += s * second[(l, h)];
                    }
                }
            }
        }
        Mode::Three => {
            for l in 0..d3 {
                for j in 0..d2 {
                    let base = d1 * (j + d2 * l);
                    for h in 0..r {
                        let mut s = 0.0;
                        for i in 0..d1 {
                            s += t.data[base + i] * first[(i, h)];
                        }
                        out[(l, h)] += s * second[(j, h)];
                    }
                }
            }
        }
    }
    Ok(out)
}
