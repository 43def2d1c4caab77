//! Extended dynamic mode decomposition: `K = G^+ A` and its eigentuples.

use faer::{Mat, Side};
use num_complex::Complex;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dictionary::{AnyDictionary, Dictionary};
use crate::error::{Error, Result};
use crate::measurements::SnapshotPairSet;
use crate::scalar::Real;

/// Default relative truncation for the pseudoinverse of `G`.
pub const DEFAULT_SVD_TOL: f64 = 1e-10;

/// Gram matrix `G = sum psi(x) psi(x)^T` and cross matrix
/// `A = sum psi(x) psi(y)^T`.
#[derive(Clone, Debug)]
pub struct GramPair<T: Real> {
    pub g: Mat<T>,
    pub a: Mat<T>,
    pub m_count: usize,
}

impl<T: Real> GramPair<T> {
    pub fn zeros(k: usize) -> Self {
        Self { g: Mat::zeros(k, k), a: Mat::zeros(k, k), m_count: 0 }
    }

    pub fn size(&self) -> usize {
        self.g.nrows()
    }

    /// Adds one snapshot pair given the sparse dictionary evaluations.
    pub fn add_sparse(&mut self, px: &[(usize, T)], py: &[(usize, T)]) {
        for &(i, vi) in px {
            for &(j, vj) in px {
                self.g[(i, j)] = self.g[(i, j)] + vi * vj;
            }
            for &(j, vj) in py {
                self.a[(i, j)] = self.a[(i, j)] + vi * vj;
            }
        }
        self.m_count += 1;
    }

    /// Combines partial sums.
    pub fn merge(mut self, other: &Self) -> Result<Self> {
        if other.size() != self.size() {
            return Err(Error::DimensionMismatch { expected: self.size(), found: other.size() });
        }
        self.g += &other.g;
        self.a += &other.a;
        self.m_count += other.m_count;
        Ok(self)
    }
}

fn accumulate_range<T: Real, D: Dictionary<T> + ?Sized>(
    pairs: &SnapshotPairSet<T>,
    dict: &D,
    range: std::ops::Range<usize>,
) -> Result<GramPair<T>> {
    let mut gp = GramPair::zeros(dict.len());
    let mut px = Vec::new();
    let mut py = Vec::new();
    for m in range {
        let tag = |e: Error| match e {
            Error::OutOfCoverage { .. } => Error::OutOfCoverage { snapshot: Some(m) },
            other => other,
        };
        dict.evaluate_sparse(pairs.x.row(m), &mut px).map_err(tag)?;
        dict.evaluate_sparse(pairs.y.row(m), &mut py).map_err(tag)?;
        gp.add_sparse(&px, &py);
    }
    Ok(gp)
}

/// Sums over all pairs sequentially, in snapshot order.
pub fn accumulate<T: Real, D: Dictionary<T> + ?Sized>(pairs: &SnapshotPairSet<T>, dict: &D) -> Result<GramPair<T>> {
    if pairs.dim() != dict.dim() {
        return Err(Error::DimensionMismatch { expected: dict.dim(), found: pairs.dim() });
    }
    accumulate_range(pairs, dict, 0..pairs.len())
}

/// Sums fixed chunks of `chunk` pairs concurrently and merges them in chunk
/// order. Differs from [`accumulate`] only by floating point reassociation.
pub fn accumulate_parallel<T: Real, D: Dictionary<T> + ?Sized>(
    pairs: &SnapshotPairSet<T>,
    dict: &D,
    chunk: usize,
) -> Result<GramPair<T>> {
    if pairs.dim() != dict.dim() {
        return Err(Error::DimensionMismatch { expected: dict.dim(), found: pairs.dim() });
    }
    let chunk = chunk.max(1);
    let n = pairs.len();
    let parts: Vec<GramPair<T>> = (0..n.div_ceil(chunk))
        .into_par_iter()
        .map(|c| accumulate_range(pairs, dict, c * chunk..((c + 1) * chunk).min(n)))
        .collect::<Result<_>>()?;
    parts.iter().try_fold(GramPair::zeros(dict.len()), |acc, p| acc.merge(p))
}

/// Finite dimensional Koopman approximation.
#[derive(Clone, Debug)]
pub struct KoopmanMatrix<T: Real> {
    pub k: Mat<T>,
    pub svd_rank_used: usize,
}

/// `K = G^+ A`, with eigenvalues of the symmetric `G` below
/// `svd_tol * sigma_max` discarded.
pub fn koopman_matrix<T: Real>(gp: &GramPair<T>, svd_tol: T) -> Result<KoopmanMatrix<T>> {
    if !(svd_tol >= T::zero()) {
        return Err(Error::InvalidParameter("svd_tol must be nonnegative".into()));
    }
    let n = gp.size();
    if n == 0 {
        return Err(Error::InvalidParameter("empty dictionary".into()));
    }
    let evd = gp
        .g
        .self_adjoint_eigen(Side::Lower)
        .map_err(|e| Error::Numerical(format!("Gram eigendecomposition failed: {e:?}")))?;
    let s = evd.S().column_vector();
    let u = evd.U();
    let smax = (0..n).fold(T::zero(), |m, i| m.max(s[i].abs()));
    if !(smax > T::zero()) || !smax.is_finite() {
        return Err(Error::Numerical("Gram matrix is numerically zero".into()));
    }
    let keep: Vec<usize> = (0..n).filter(|&i| s[i] > svd_tol * smax).collect();
    let r = keep.len();
    // G^+ A = U_r S_r^{-1} U_r^T A
    let ur = Mat::<T>::from_fn(n, r, |i, j| u[(i, keep[j])]);
    let mut proj = ur.transpose() * &gp.a;
    for (j, &idx) in keep.iter().enumerate() {
        let inv = T::one() / s[idx];
        for c in 0..n {
            proj[(j, c)] = proj[(j, c)] * inv;
        }
    }
    let k = &ur * &proj;
    Ok(KoopmanMatrix { k, svd_rank_used: r })
}

/// `lambda = log(mu) / dt` on the principal branch, `Im lambda` in
/// `(-pi/dt, pi/dt]`.
pub fn continuous_eigenvalue<T: Real>(mu: Complex<T>, dt: T) -> Result<Complex<T>> {
    if !(dt > T::zero()) {
        return Err(Error::InvalidParameter("dt must be positive".into()));
    }
    if mu.re == T::zero() && mu.im == T::zero() {
        return Err(Error::InvalidParameter("continuous eigenvalue of mu = 0 is undefined".into()));
    }
    let mut arg = mu.im.atan2(mu.re);
    if arg <= -T::PI() {
        arg = T::PI();
    }
    Ok(Complex::new(mu.norm().ln() / dt, arg / dt))
}

/// Eigentuples of a Koopman matrix together with the dictionary needed to
/// evaluate eigenfunctions.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct KoopmanDecomposition<T: Real> {
    pub mu: Vec<Complex<T>>,
    /// `log(mu)/dt`; `-inf` real part for eigenvalues that are exactly 0.
    pub lambda: Vec<Complex<T>>,
    /// Unit 2-norm eigenvectors, largest-magnitude entry real positive.
    pub xi: Vec<Vec<Complex<T>>>,
    pub dictionary: AnyDictionary<T>,
    pub dt: T,
    pub svd_rank_used: usize,
}

fn normalize_eigenvector<T: Real>(v: &mut [Complex<T>]) {
    let norm = v.iter().map(|z| z.norm_sqr()).sum::<T>().sqrt();
    let mut pivot = 0;
    for (i, z) in v.iter().enumerate() {
        if z.norm() > v[pivot].norm() {
            pivot = i;
        }
    }
    let p = v[pivot];
    if !(norm > T::zero()) {
        return;
    }
    let phase = p.conj() / (p.norm() * norm);
    for z in v.iter_mut() {
        *z = *z * phase;
    }
    v[pivot].im = T::zero();
}

/// Full nonsymmetric eigendecomposition of `km`, tuples sorted by `|mu|`
/// descending with ties broken by `Im mu` descending.
pub fn eigendecompose<T: Real>(km: &KoopmanMatrix<T>, dt: T, dictionary: AnyDictionary<T>) -> Result<KoopmanDecomposition<T>> {
    if !(dt > T::zero()) {
        return Err(Error::InvalidParameter("dt must be positive".into()));
    }
    let n = km.k.nrows();
    if km.k.ncols() != n {
        return Err(Error::DimensionMismatch { expected: n, found: km.k.ncols() });
    }
    if dictionary.len() != n {
        return Err(Error::DimensionMismatch { expected: n, found: dictionary.len() });
    }
    for j in 0..n {
        for i in 0..n {
            if !km.k[(i, j)].is_finite() {
                return Err(Error::Numerical("Koopman matrix has non-finite entries".into()));
            }
        }
    }
    let evd = km
        .k
        .eigen()
        .map_err(|e| Error::Numerical(format!("eigensolver did not converge: {e:?}")))?;
    let s = evd.S().column_vector();
    let u = evd.U();
    let mut order: Vec<usize> = (0..n).collect();
    let key = |i: usize| -> (f64, f64, f64) {
        let z: Complex<T> = s[i];
        (z.norm().to_f64_lossy(), z.im.to_f64_lossy(), z.re.to_f64_lossy())
    };
    order.sort_by(|&a, &b| {
        let (ma, ia, ra) = key(a);
        let (mb, ib, rb) = key(b);
        mb.total_cmp(&ma).then(ib.total_cmp(&ia)).then(rb.total_cmp(&ra)).then(a.cmp(&b))
    });
    let mut mu = Vec::with_capacity(n);
    let mut lambda = Vec::with_capacity(n);
    let mut xi = Vec::with_capacity(n);
    for &i in &order {
        let m: Complex<T> = s[i];
        mu.push(m);
        lambda.push(if m.re == T::zero() && m.im == T::zero() {
            Complex::new(T::neg_infinity(), T::zero())
        } else {
            continuous_eigenvalue(m, dt)?
        });
        let mut v: Vec<Complex<T>> = (0..n).map(|r| u[(r, i)]).collect();
        normalize_eigenvector(&mut v);
        xi.push(v);
    }
    Ok(KoopmanDecomposition { mu, lambda, xi, dictionary, dt, svd_rank_used: km.svd_rank_used })
}

impl<T: Real> KoopmanDecomposition<T> {
    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    /// `phi_k(x) = psi(x)^T xi_k`.
    pub fn eval_eigenfunction(&self, x: &[T], k: usize) -> Result<Complex<T>> {
        Ok(self.eval_eigenfunctions(x, &[k])?[0])
    }

    /// Several eigenfunctions at one point from a single dictionary
    /// evaluation.
    pub fn eval_eigenfunctions(&self, x: &[T], ks: &[usize]) -> Result<Vec<Complex<T>>> {
        if let Some(&bad) = ks.iter().find(|&&k| k >= self.len()) {
            return Err(Error::InvalidParameter(format!("eigentuple index {bad} out of range {}", self.len())));
        }
        let mut psi = Vec::new();
        self.dictionary.evaluate_sparse(x, &mut psi)?;
        Ok(ks
            .iter()
            .map(|&k| {
                psi.iter()
                    .fold(Complex::new(T::zero(), T::zero()), |acc, &(i, v)| acc + self.xi[k][i] * v)
            })
            .collect())
    }

    /// Relative one-step residual `||phi(y) - mu phi(x)|| / ||phi(x)||` of
    /// tuple `k` over a set of snapshot pairs.
    pub fn prediction_residual(&self, pairs: &SnapshotPairSet<T>, k: usize) -> Result<T> {
        let mut num = T::zero();
        let mut den = T::zero();
        for m in 0..pairs.len() {
            let fx = self.eval_eigenfunction(pairs.x.row(m), k)?;
            let fy = self.eval_eigenfunction(pairs.y.row(m), k)?;
            num = num + (fy - self.mu[k] * fx).norm_sqr();
            den = den + fx.norm_sqr();
        }
        if !(den > T::zero()) {
            return Err(Error::Numerical(format!("eigenfunction {k} vanishes on the data")));
        }
        Ok((num / den).sqrt())
    }
}

/// `||K xi - mu xi||` for tuple `k`.
pub fn eigen_residual<T: Real>(km: &KoopmanMatrix<T>, dec: &KoopmanDecomposition<T>, k: usize) -> T {
    let n = km.k.nrows();
    let xi = &dec.xi[k];
    let mut acc = T::zero();
    for i in 0..n {
        let mut s = Complex::new(T::zero(), T::zero());
        for (j, z) in xi.iter().enumerate() {
            s = s + *z * km.k[(i, j)];
        }
        acc = acc + (s - dec.mu[k] * xi[i]).norm_sqr();
    }
    acc.sqrt()
}

/// Frobenius norm of a dense matrix.
pub fn frobenius<T: Real>(m: &Mat<T>) -> T {
    let mut acc = T::zero();
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            acc = acc + m[(i, j)] * m[(i, j)];
        }
    }
    acc.sqrt()
}

/// Convenience: accumulate, form `K` and decompose in one call.
pub fn fit<T: Real>(pairs: &SnapshotPairSet<T>, dictionary: AnyDictionary<T>, svd_tol: T) -> Result<KoopmanDecomposition<T>> {
    let gp = accumulate(pairs, &dictionary)?;
    let km = koopman_matrix(&gp, svd_tol)?;
    eigendecompose(&km, pairs.dt, dictionary)
}
