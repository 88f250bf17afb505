//! Sparse linear algebra for the assembled elliptic systems.
//!
//! Compressed-row storage, a partial-pivoting band LU used for 1D systems and
//! as a fallback, and ILU(0)-preconditioned BiCGSTAB for 2D systems.

use crate::error::{Error, Result};

pub const REL_TOL: f64 = 1e-10;
pub const MAX_ITER: usize = 10_000;

/// Row-major sparse matrix with sorted column indices.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

/// Incremental builder; rows must be pushed in order.
#[derive(Debug, Default)]
pub struct CsrBuilder {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
    scratch: Vec<(usize, f64)>,
}

impl CsrBuilder {
    pub fn new(n: usize) -> Self {
        let mut row_ptr = Vec::with_capacity(n + 1);
        row_ptr.push(0);
        Self {
            n,
            row_ptr,
            ..Default::default()
        }
    }

    pub fn add(&mut self, col: usize, val: f64) {
        self.scratch.push((col, val));
    }

    /// Closes the current row, merging duplicate columns.
    pub fn finish_row(&mut self) {
        self.scratch.sort_unstable_by_key(|e| e.0);
        let mut last: Option<usize> = None;
        for &(c, v) in &self.scratch {
            if last == Some(c) {
                *self.vals.last_mut().unwrap() += v;
            } else {
                self.cols.push(c);
                self.vals.push(v);
                last = Some(c);
            }
        }
        self.scratch.clear();
        self.row_ptr.push(self.cols.len());
    }

    pub fn build(self) -> CsrMatrix {
        assert_eq!(self.row_ptr.len(), self.n + 1, "not every row was finished");
        CsrMatrix {
            n: self.n,
            row_ptr: self.row_ptr,
            cols: self.cols,
            vals: self.vals,
        }
    }
}

impl CsrMatrix {
    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[r.clone()]
            .iter()
            .copied()
            .zip(self.vals[r].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        match self.cols[r.clone()].binary_search(&j) {
            Ok(p) => self.vals[r.start + p],
            Err(_) => 0.0,
        }
    }

    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        for i in 0..self.n {
            let mut acc = 0.0;
            for p in self.row_ptr[i]..self.row_ptr[i + 1] {
                acc += self.vals[p] * x[self.cols[p]];
            }
            y[i] = acc;
        }
    }

    /// (lower, upper) bandwidths.
    pub fn bandwidth(&self) -> (usize, usize) {
        let (mut kl, mut ku) = (0, 0);
        for i in 0..self.n {
            for p in self.row_ptr[i]..self.row_ptr[i + 1] {
                let j = self.cols[p];
                if j < i {
                    kl = kl.max(i - j);
                } else {
                    ku = ku.max(j - i);
                }
            }
        }
        (kl, ku)
    }

    pub fn residual_norm(&self, x: &[f64], b: &[f64]) -> f64 {
        let mut ax = vec![0.0; self.n];
        self.matvec(x, &mut ax);
        norm2_diff(&ax, b)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn norm2_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Band LU factorization with partial pivoting (LAPACK `gbtrf` layout:
/// multipliers kept unpermuted, upper band widened to `kl + ku`).
#[derive(Debug, Clone)]
pub struct BandLu {
    n: usize,
    kl: usize,
    ku: usize,
    width: usize,
    data: Vec<f64>,
    piv: Vec<usize>,
}

impl BandLu {
    pub fn factor(a: &CsrMatrix) -> Result<Self> {
        let n = a.dim();
        let (kl, ku0) = a.bandwidth();
        let ku = ku0 + kl;
        let width = kl + ku + 1;
        let mut lu = Self {
            n,
            kl,
            ku,
            width,
            data: vec![0.0; n * width],
            piv: vec![0; n],
        };
        for i in 0..n {
            for (j, v) in a.row(i) {
                *lu.at_mut(i, j) = v;
            }
        }
        for k in 0..n {
            let last_row = (k + kl).min(n - 1);
            let mut p = k;
            let mut best = lu.at(k, k).abs();
            for i in k + 1..=last_row {
                let v = lu.at(i, k).abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if best == 0.0 || !best.is_finite() {
                return Err(Error::LinearSolveFailure {
                    iterations: k,
                    residual: f64::INFINITY,
                });
            }
            lu.piv[k] = p;
            let last_col = (k + ku).min(n - 1);
            if p != k {
                for j in k..=last_col {
                    let t = lu.at(k, j);
                    *lu.at_mut(k, j) = lu.at(p, j);
                    *lu.at_mut(p, j) = t;
                }
            }
            let pivot = lu.at(k, k);
            for i in k + 1..=last_row {
                let l = lu.at(i, k) / pivot;
                *lu.at_mut(i, k) = l;
                if l != 0.0 {
                    for j in k + 1..=last_col {
                        let u = lu.at(k, j);
                        *lu.at_mut(i, j) -= l * u;
                    }
                }
            }
        }
        Ok(lu)
    }

    #[inline]
    fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.width + (j + self.kl - i)]
    }

    #[inline]
    fn at_mut(&mut self, i: usize, j: usize) -> &mut f64 {
        &mut self.data[i * self.width + (j + self.kl - i)]
    }

    pub fn solve_in_place(&self, b: &mut [f64]) {
        let n = self.n;
        for k in 0..n {
            let p = self.piv[k];
            if p != k {
                b.swap(k, p);
            }
            let bk = b[k];
            if bk != 0.0 {
                for i in k + 1..=(k + self.kl).min(n - 1) {
                    b[i] -= self.at(i, k) * bk;
                }
            }
        }
        for k in (0..n).rev() {
            let mut acc = b[k];
            for j in k + 1..=(k + self.ku).min(n - 1) {
                acc -= self.at(k, j) * b[j];
            }
            b[k] = acc / self.at(k, k);
        }
    }
}

/// Incomplete LU with zero fill-in on the sparsity pattern of `A`.
#[derive(Debug, Clone)]
pub struct Ilu0 {
    lu: CsrMatrix,
    diag: Vec<usize>,
}

impl Ilu0 {
    pub fn new(a: &CsrMatrix) -> Result<Self> {
        let n = a.dim();
        let mut lu = a.clone();
        let mut diag = vec![usize::MAX; n];
        for i in 0..n {
            for p in lu.row_ptr[i]..lu.row_ptr[i + 1] {
                if lu.cols[p] == i {
                    diag[i] = p;
                }
            }
            if diag[i] == usize::MAX {
                return Err(Error::LinearSolveFailure {
                    iterations: 0,
                    residual: f64::INFINITY,
                });
            }
        }
        let mut pos = vec![usize::MAX; n];
        for i in 0..n {
            let (start, end) = (lu.row_ptr[i], lu.row_ptr[i + 1]);
            for p in start..end {
                pos[lu.cols[p]] = p;
            }
            for p in start..end {
                let k = lu.cols[p];
                if k >= i {
                    break;
                }
                let dkk = lu.vals[diag[k]];
                if dkk == 0.0 {
                    return Err(Error::LinearSolveFailure {
                        iterations: 0,
                        residual: f64::INFINITY,
                    });
                }
                let lik = lu.vals[p] / dkk;
                lu.vals[p] = lik;
                for q in diag[k] + 1..lu.row_ptr[k + 1] {
                    let j = lu.cols[q];
                    let target = pos[j];
                    if target != usize::MAX {
                        lu.vals[target] -= lik * lu.vals[q];
                    }
                }
            }
            for p in start..end {
                pos[lu.cols[p]] = usize::MAX;
            }
        }
        Ok(Self { lu, diag })
    }

    pub fn apply(&self, r: &[f64], z: &mut [f64]) {
        let lu = &self.lu;
        let n = lu.n;
        for i in 0..n {
            let mut acc = r[i];
            for p in lu.row_ptr[i]..self.diag[i] {
                acc -= lu.vals[p] * z[lu.cols[p]];
            }
            z[i] = acc;
        }
        for i in (0..n).rev() {
            let mut acc = z[i];
            for p in self.diag[i] + 1..lu.row_ptr[i + 1] {
                acc -= lu.vals[p] * z[lu.cols[p]];
            }
            z[i] = acc / lu.vals[self.diag[i]];
        }
    }
}

/// Outcome of an iterative solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterStats {
    pub iterations: usize,
    pub rel_residual: f64,
}

/// Right-preconditioned BiCGSTAB. `x` holds the initial guess on entry.
pub fn bicgstab(
    a: &CsrMatrix,
    pre: &Ilu0,
    b: &[f64],
    x: &mut [f64],
    tol: f64,
    max_iter: usize,
) -> Result<IterStats> {
    let n = a.dim();
    let bnorm = norm2(b).max(f64::MIN_POSITIVE);
    let mut r = vec![0.0; n];
    a.matvec(x, &mut r);
    for i in 0..n {
        r[i] = b[i] - r[i];
    }
    let mut res = norm2(&r) / bnorm;
    if res <= tol {
        return Ok(IterStats {
            iterations: 0,
            rel_residual: res,
        });
    }
    let mut r_hat = r.clone();
    let (mut rho, mut alpha, mut omega) = (1.0, 1.0, 1.0);
    let mut v = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut y = vec![0.0; n];
    let mut s = vec![0.0; n];
    let mut z = vec![0.0; n];
    let mut t = vec![0.0; n];
    for it in 1..=max_iter {
        let rho_new = dot(&r_hat, &r);
        if rho_new.abs() < 1e-300 {
            // Breakdown: restart the shadow residual.
            r_hat.copy_from_slice(&r);
            rho = 1.0;
            alpha = 1.0;
            omega = 1.0;
            v.iter_mut().for_each(|e| *e = 0.0);
            p.iter_mut().for_each(|e| *e = 0.0);
            continue;
        }
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
        }
        pre.apply(&p, &mut y);
        a.matvec(&y, &mut v);
        let rv = dot(&r_hat, &v);
        if rv == 0.0 {
            break;
        }
        alpha = rho / rv;
        for i in 0..n {
            s[i] = r[i] - alpha * v[i];
        }
        if norm2(&s) / bnorm <= tol {
            for i in 0..n {
                x[i] += alpha * y[i];
            }
            res = a.residual_norm(x, b) / bnorm;
            return Ok(IterStats {
                iterations: it,
                rel_residual: res,
            });
        }
        pre.apply(&s, &mut z);
        a.matvec(&z, &mut t);
        let tt = dot(&t, &t);
        omega = if tt > 0.0 { dot(&t, &s) / tt } else { 0.0 };
        for i in 0..n {
            x[i] += alpha * y[i] + omega * z[i];
            r[i] = s[i] - omega * t[i];
        }
        res = norm2(&r) / bnorm;
        if res <= tol {
            let true_res = a.residual_norm(x, b) / bnorm;
            if true_res <= 10.0 * tol {
                return Ok(IterStats {
                    iterations: it,
                    rel_residual: true_res,
                });
            }
        }
        if omega == 0.0 {
            break;
        }
    }
    Err(Error::LinearSolveFailure {
        iterations: max_iter,
        residual: res,
    })
}

/// Direct band LU when the band is narrow relative to the size, ILU(0)
/// BiCGSTAB otherwise with a band LU fallback.
pub fn solve(a: &CsrMatrix, b: &[f64], guess: Option<&[f64]>) -> Result<Vec<f64>> {
    let n = a.dim();
    let (kl, ku) = a.bandwidth();
    let band_cost = (n as f64) * (kl as f64 + 1.0) * (kl as f64 + ku as f64 + 1.0);
    let bnorm = norm2(b).max(f64::MIN_POSITIVE);
    if kl + ku <= 64 || band_cost < 5e7 {
        return band_solve(a, b, bnorm);
    }
    let mut x = guess.map_or_else(|| vec![0.0; n], <[f64]>::to_vec);
    let attempt = Ilu0::new(a).and_then(|pre| bicgstab(a, &pre, b, &mut x, REL_TOL, MAX_ITER));
    match attempt {
        Ok(_) => Ok(x),
        Err(e) if band_cost < 2e10 => band_solve(a, b, bnorm).map_err(|_| e),
        Err(e) => Err(e),
    }
}

fn band_solve(a: &CsrMatrix, b: &[f64], bnorm: f64) -> Result<Vec<f64>> {
    let lu = BandLu::factor(a)?;
    let mut x = b.to_vec();
    lu.solve_in_place(&mut x);
    let res = a.residual_norm(&x, b) / bnorm;
    if !(res <= 1e-8) {
        return Err(Error::LinearSolveFailure {
            iterations: 1,
            residual: res,
        });
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn laplacian_2d(nx: usize, shift: f64) -> CsrMatrix {
        let n = nx * nx;
        let mut b = CsrBuilder::new(n);
        for j in 0..nx {
            for i in 0..nx {
                let k = i + nx * j;
                b.add(k, 4.0 + shift);
                if i > 0 {
                    b.add(k - 1, -1.0);
                }
                if i + 1 < nx {
                    b.add(k + 1, -1.0);
                }
                if j > 0 {
                    b.add(k - nx, -1.0);
                }
                if j + 1 < nx {
                    b.add(k + nx, -1.0);
                }
                b.finish_row();
            }
        }
        b.build()
    }

    #[test]
    fn band_lu_pivots() {
        // Needs a row swap: zero leading pivot.
        let mut b = CsrBuilder::new(3);
        b.add(0, 0.0);
        b.add(1, 2.0);
        b.finish_row();
        b.add(0, 1.0);
        b.add(1, 1.0);
        b.add(2, 1.0);
        b.finish_row();
        b.add(1, 3.0);
        b.add(2, 1.0);
        b.finish_row();
        let a = b.build();
        let rhs = [2.0, 6.0, 10.0];
        let lu = BandLu::factor(&a).unwrap();
        let mut x = rhs.to_vec();
        lu.solve_in_place(&mut x);
        assert!(a.residual_norm(&x, &rhs) < 1e-12, "{x:?}");
    }

    #[test]
    fn bicgstab_matches_band_lu() {
        let a = laplacian_2d(30, 0.1);
        let rhs: Vec<f64> = (0..a.dim()).map(|i| ((i * 7) % 13) as f64 - 6.0).collect();
        let lu = BandLu::factor(&a).unwrap();
        let mut direct = rhs.clone();
        lu.solve_in_place(&mut direct);
        let pre = Ilu0::new(&a).unwrap();
        let mut x = vec![0.0; a.dim()];
        let stats = bicgstab(&a, &pre, &rhs, &mut x, 1e-12, 1000).unwrap();
        assert!(stats.iterations < 200);
        let err = x
            .iter()
            .zip(&direct)
            .map(|(p, q)| (p - q).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn duplicate_entries_merge() {
        let mut b = CsrBuilder::new(1);
        b.add(0, 1.5);
        b.add(0, 0.5);
        b.finish_row();
        assert_eq!(b.build().get(0, 0), 2.0);
    }
}
