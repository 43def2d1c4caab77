//! Dictionaries of scalar observables `psi: R^d -> R^K`.
//!
//! The main dictionary is the set of moving-least-squares shape functions
//! with a linear polynomial basis and cubic-spline weights, centred on nodes
//! placed by a 2^d-tree over the training data. A Gaussian radial basis and
//! a plain affine dictionary `[1, x]` are also provided.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::points::PointSet;
use crate::scalar::Real;

/// Support radius of a node as a multiple of its leaf-cell diagonal.
pub const DEFAULT_COVER_FACTOR: f64 = 2.5;

/// Relative Cholesky pivot below which the MLS moment matrix is treated as
/// singular and evaluation drops to the constant (Shepard) basis.
pub const MLS_SINGULAR_TOL: f64 = 1e-12;

const MAX_TREE_DEPTH: usize = 48;

/// Vector-valued observable evaluated pointwise.
pub trait Dictionary<T: Real>: Send + Sync {
    /// Number of observables `K`.
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Dimension of the points it accepts.
    fn dim(&self) -> usize;

    /// Writes the nonzero entries of `psi(x)` as `(index, value)` into `out`
    /// (cleared first).
    fn evaluate_sparse(&self, x: &[T], out: &mut Vec<(usize, T)>) -> Result<()>;

    fn evaluate(&self, x: &[T]) -> Result<Vec<T>> {
        let mut sparse = Vec::new();
        self.evaluate_sparse(x, &mut sparse)?;
        let mut dense = vec![T::zero(); self.len()];
        for (i, v) in sparse {
            dense[i] = v;
        }
        Ok(dense)
    }
}

fn check_dim<T>(x: &[T], dim: usize) -> Result<()> {
    if x.len() != dim {
        return Err(Error::DimensionMismatch { expected: dim, found: x.len() });
    }
    Ok(())
}

#[inline]
fn dist2<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(x, y)| (*x - *y) * (*x - *y)).sum()
}

/// Cubic spline kernel on normalized distance, compactly supported on
/// `[0, 1]` with `w(0) = 2/3`.
pub fn cubic_spline_weight<T: Real>(r: T) -> T {
    let half = T::lit(0.5);
    let four = T::lit(4.0);
    if r <= half {
        T::lit(2.0 / 3.0) - four * r * r + four * r * r * r
    } else if r <= T::one() {
        let s = T::one() - r;
        T::lit(4.0 / 3.0) * s * s * s
    } else {
        T::zero()
    }
}

/// Node centres with per-node support radii.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct NodeSet<T> {
    pub centers: PointSet<T>,
    pub support_radius: Vec<T>,
}

impl<T: Real> NodeSet<T> {
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.centers.dim()
    }

    /// Whether `x` is strictly inside the support of at least one node.
    pub fn covers(&self, x: &[T]) -> bool {
        self.centers
            .rows()
            .zip(&self.support_radius)
            .any(|(c, r)| dist2(c, x) < *r * *r)
    }
}

/// Places one node per nonempty leaf of a 2^d-tree that bisects the
/// (cubical) bounding box until no leaf holds more than `max_per_cell`
/// points. Centres are leaf centroids; radii are `cover_factor` leaf
/// diagonals.
pub fn build_nodes_quadtree<T: Real>(points: &PointSet<T>, max_per_cell: usize, cover_factor: T) -> Result<NodeSet<T>> {
    if max_per_cell < 1 {
        return Err(Error::InvalidParameter("max_per_cell must be at least 1".into()));
    }
    if points.is_empty() {
        return Err(Error::InvalidParameter("cannot place nodes for an empty point set".into()));
    }
    let dim = points.dim();
    if !(1..=6).contains(&dim) {
        return Err(Error::InvalidParameter(format!("tree subdivision supports 1 to 6 dimensions, got {dim}")));
    }
    if !(cover_factor > T::one()) {
        return Err(Error::InvalidParameter("cover_factor must exceed 1".into()));
    }
    let mut lo = points.row(0).to_vec();
    let mut hi = lo.clone();
    for r in points.rows() {
        for k in 0..dim {
            lo[k] = lo[k].min(r[k]);
            hi[k] = hi[k].max(r[k]);
        }
    }
    let half = T::lit(0.5);
    let extent = (0..dim).fold(T::zero(), |m, k| m.max(hi[k] - lo[k]));
    let extent = if extent > T::zero() { extent } else { T::one() };
    for k in 0..dim {
        let mid = (lo[k] + hi[k]) * half;
        lo[k] = mid - extent * half;
        hi[k] = mid + extent * half;
    }

    let mut nodes = NodeSet { centers: PointSet::new(dim), support_radius: Vec::new() };
    let indices: Vec<usize> = (0..points.len()).collect();
    subdivide(points, indices, lo, hi, 0, max_per_cell, cover_factor, &mut nodes)?;
    Ok(nodes)
}

#[allow(clippy::too_many_arguments)]
fn subdivide<T: Real>(
    points: &PointSet<T>,
    idx: Vec<usize>,
    lo: Vec<T>,
    hi: Vec<T>,
    depth: usize,
    max_per_cell: usize,
    cover: T,
    out: &mut NodeSet<T>,
) -> Result<()> {
    if idx.is_empty() {
        return Ok(());
    }
    let dim = lo.len();
    let all_equal = idx.iter().all(|&i| points.row(i) == points.row(idx[0]));
    if idx.len() <= max_per_cell || depth >= MAX_TREE_DEPTH || all_equal {
        let inv = T::one() / T::from_usize_lossy(idx.len());
        let mut c = vec![T::zero(); dim];
        for &i in &idx {
            for (ck, x) in c.iter_mut().zip(points.row(i)) {
                *ck = *ck + *x;
            }
        }
        c.iter_mut().for_each(|ck| *ck = *ck * inv);
        let diag = dist2(&lo, &hi).sqrt();
        out.centers.push(&c)?;
        out.support_radius.push(cover * diag);
        return Ok(());
    }
    let half = T::lit(0.5);
    let mid: Vec<T> = lo.iter().zip(&hi).map(|(a, b)| (*a + *b) * half).collect();
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); 1 << dim];
    for &i in &idx {
        let p = points.row(i);
        let code = (0..dim).fold(0usize, |acc, k| acc | (usize::from(p[k] >= mid[k]) << k));
        children[code].push(i);
    }
    for (code, child) in children.into_iter().enumerate() {
        let clo: Vec<T> = (0..dim).map(|k| if code >> k & 1 == 1 { mid[k] } else { lo[k] }).collect();
        let chi: Vec<T> = (0..dim).map(|k| if code >> k & 1 == 1 { hi[k] } else { mid[k] }).collect();
        subdivide(points, child, clo, chi, depth + 1, max_per_cell, cover, out)?;
    }
    Ok(())
}

/// Uniform bucket grid over the node supports for active-node lookup.
#[derive(Clone, Debug)]
struct SupportIndex<T> {
    lo: Vec<T>,
    cell: Vec<T>,
    shape: Vec<usize>,
    buckets: Vec<Vec<u32>>,
}

impl<T: Real> SupportIndex<T> {
    fn build(nodes: &NodeSet<T>) -> Self {
        let dim = nodes.dim();
        let mut lo = vec![T::infinity(); dim];
        let mut hi = vec![T::neg_infinity(); dim];
        for (c, r) in nodes.centers.rows().zip(&nodes.support_radius) {
            for k in 0..dim {
                lo[k] = lo[k].min(c[k] - *r);
                hi[k] = hi[k].max(c[k] + *r);
            }
        }
        let per_dim = ((nodes.len().max(1) as f64).powf(1.0 / dim as f64).ceil() as usize).clamp(1, 64);
        let shape = vec![per_dim; dim];
        let cell: Vec<T> = (0..dim)
            .map(|k| {
                let span = hi[k] - lo[k];
                let c = span / T::from_usize_lossy(per_dim);
                if c > T::zero() { c } else { T::one() }
            })
            .collect();
        let total = shape.iter().product();
        let mut index = Self { lo, cell, shape, buckets: vec![Vec::new(); total] };
        for (n, (c, r)) in nodes.centers.rows().zip(&nodes.support_radius).enumerate() {
            let a: Vec<usize> = (0..dim).map(|k| index.coord(k, c[k] - *r)).collect();
            let b: Vec<usize> = (0..dim).map(|k| index.coord(k, c[k] + *r)).collect();
            let mut cur = a.clone();
            loop {
                let flat = index.flatten(&cur);
                index.buckets[flat].push(n as u32);
                let mut k = 0;
                while k < dim {
                    if cur[k] < b[k] {
                        cur[k] += 1;
                        break;
                    }
                    cur[k] = a[k];
                    k += 1;
                }
                if k == dim {
                    break;
                }
            }
        }
        index
    }

    fn coord(&self, k: usize, x: T) -> usize {
        let f = ((x - self.lo[k]) / self.cell[k]).floor().to_f64_lossy();
        if f.is_nan() || f < 0.0 {
            0
        } else {
            (f as usize).min(self.shape[k] - 1)
        }
    }

    fn flatten(&self, c: &[usize]) -> usize {
        c.iter().zip(&self.shape).rev().fold(0, |acc, (ci, s)| acc * s + ci)
    }

    fn candidates(&self, x: &[T]) -> &[u32] {
        for (k, xk) in x.iter().enumerate() {
            let rel = (*xk - self.lo[k]) / self.cell[k];
            if !(rel >= T::zero() && rel <= T::from_usize_lossy(self.shape[k])) {
                return &[];
            }
        }
        let c: Vec<usize> = x.iter().enumerate().map(|(k, xk)| self.coord(k, *xk)).collect();
        &self.buckets[self.flatten(&c)]
    }
}

/// Moving-least-squares shape functions with linear reproduction.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct MlsDictionary<T: Real> {
    pub nodes: NodeSet<T>,
    #[serde(skip)]
    index: OnceLock<SupportIndex<T>>,
}

impl<T: Real> MlsDictionary<T> {
    pub fn new(nodes: NodeSet<T>) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::InvalidParameter("MLS dictionary needs at least one node".into()));
        }
        if nodes.support_radius.len() != nodes.len() {
            return Err(Error::DimensionMismatch { expected: nodes.len(), found: nodes.support_radius.len() });
        }
        if nodes.support_radius.iter().any(|r| !(*r > T::zero())) {
            return Err(Error::InvalidParameter("support radii must be positive".into()));
        }
        Ok(Self { nodes, index: OnceLock::new() })
    }

    /// Quad/oct-tree nodes over `points` with the default cover factor.
    pub fn from_points(points: &PointSet<T>, max_per_cell: usize) -> Result<Self> {
        Self::new(build_nodes_quadtree(points, max_per_cell, T::lit(DEFAULT_COVER_FACTOR))?)
    }

    fn index(&self) -> &SupportIndex<T> {
        self.index.get_or_init(|| SupportIndex::build(&self.nodes))
    }

    /// Nodes whose support strictly contains `x`, with their weights.
    pub fn active_nodes(&self, x: &[T]) -> Vec<(usize, T)> {
        let mut active = Vec::new();
        for &n in self.index().candidates(x) {
            let n = n as usize;
            let r = self.nodes.support_radius[n];
            let d2 = dist2(self.nodes.centers.row(n), x);
            if d2 < r * r {
                let w = cubic_spline_weight(d2.sqrt() / r);
                if w > T::zero() {
                    active.push((n, w));
                }
            }
        }
        active
    }
}

impl<T: Real> Dictionary<T> for MlsDictionary<T> {
    fn len(&self) -> usize {
        self.nodes.len()
    }

    fn dim(&self) -> usize {
        self.nodes.dim()
    }

    fn evaluate_sparse(&self, x: &[T], out: &mut Vec<(usize, T)>) -> Result<()> {
        check_dim(x, self.dim())?;
        out.clear();
        let active = self.active_nodes(x);
        if active.is_empty() {
            return Err(Error::OutOfCoverage { snapshot: None });
        }
        let d = self.dim();
        let m = d + 1;
        // Local, scaled basis p_k = [1, (c_k - x) / h] keeps the moment
        // matrix well conditioned; reproduction is unaffected.
        let h = active.iter().fold(T::zero(), |a, (n, _)| a.max(self.nodes.support_radius[*n]));
        let basis = |n: usize| -> [T; 7] {
            let mut p = [T::zero(); 7];
            p[0] = T::one();
            let c = self.nodes.centers.row(n);
            for k in 0..d {
                p[k + 1] = (c[k] - x[k]) / h;
            }
            p
        };
        let mut moment = [[T::zero(); 7]; 7];
        for &(n, w) in &active {
            let p = basis(n);
            for i in 0..m {
                for j in 0..=i {
                    moment[i][j] = moment[i][j] + w * p[i] * p[j];
                }
            }
        }
        match solve_first_column(&mut moment, m) {
            Some(a) => {
                for &(n, w) in &active {
                    let p = basis(n);
                    let v = (0..m).fold(T::zero(), |acc, i| acc + a[i] * p[i]);
                    out.push((n, w * v));
                }
            }
            None => {
                // Too few independent nodes for a linear fit: constant basis.
                let total: T = active.iter().map(|(_, w)| *w).sum();
                out.extend(active.iter().map(|&(n, w)| (n, w / total)));
            }
        }
        Ok(())
    }
}

/// Solves `M a = e_1` for symmetric positive definite `M` (lower triangle
/// filled) by Cholesky; `None` when a pivot is relatively negligible.
fn solve_first_column<T: Real>(mat: &mut [[T; 7]; 7], m: usize) -> Option<[T; 7]> {
    let scale = (0..m).fold(T::zero(), |a, i| a.max(mat[i][i]));
    if !(scale > T::zero()) {
        return None;
    }
    let tol = T::lit(MLS_SINGULAR_TOL) * scale;
    for j in 0..m {
        let mut diag = mat[j][j];
        for k in 0..j {
            diag = diag - mat[j][k] * mat[j][k];
        }
        if !(diag > tol) {
            return None;
        }
        let ljj = diag.sqrt();
        mat[j][j] = ljj;
        for i in j + 1..m {
            let mut s = mat[i][j];
            for k in 0..j {
                s = s - mat[i][k] * mat[j][k];
            }
            mat[i][j] = s / ljj;
        }
    }
    let mut y = [T::zero(); 7];
    for i in 0..m {
        let mut s = if i == 0 { T::one() } else { T::zero() };
        for k in 0..i {
            s = s - mat[i][k] * y[k];
        }
        y[i] = s / mat[i][i];
    }
    let mut a = [T::zero(); 7];
    for i in (0..m).rev() {
        let mut s = y[i];
        for k in i + 1..m {
            s = s - mat[k][i] * a[k];
        }
        a[i] = s / mat[i][i];
    }
    Some(a)
}

/// Gaussian radial basis functions plus a leading constant observable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct RbfDictionary<T> {
    pub centers: PointSet<T>,
    pub shape_parameter: T,
}

impl<T: Real> RbfDictionary<T> {
    pub fn new(centers: PointSet<T>, shape_parameter: T) -> Result<Self> {
        if !(shape_parameter > T::zero()) {
            return Err(Error::InvalidParameter("RBF shape parameter must be positive".into()));
        }
        Ok(Self { centers, shape_parameter })
    }
}

impl<T: Real> Dictionary<T> for RbfDictionary<T> {
    fn len(&self) -> usize {
        self.centers.len() + 1
    }

    fn dim(&self) -> usize {
        self.centers.dim()
    }

    fn evaluate_sparse(&self, x: &[T], out: &mut Vec<(usize, T)>) -> Result<()> {
        check_dim(x, self.dim())?;
        out.clear();
        out.push((0, T::one()));
        let s2 = self.shape_parameter * self.shape_parameter;
        for (k, c) in self.centers.rows().enumerate() {
            out.push((k + 1, (-s2 * dist2(c, x)).exp()));
        }
        Ok(())
    }
}

/// `psi(x) = [1, x_1, ..., x_d]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AffineDictionary {
    pub dim: usize,
}

impl<T: Real> Dictionary<T> for AffineDictionary {
    fn len(&self) -> usize {
        self.dim + 1
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn evaluate_sparse(&self, x: &[T], out: &mut Vec<(usize, T)>) -> Result<()> {
        check_dim(x, self.dim)?;
        out.clear();
        out.push((0, T::one()));
        out.extend(x.iter().enumerate().map(|(k, v)| (k + 1, *v)));
        Ok(())
    }
}

/// Serializable choice of dictionary.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", bound = "T: Real")]
pub enum AnyDictionary<T: Real> {
    Mls(MlsDictionary<T>),
    Rbf(RbfDictionary<T>),
    Affine(AffineDictionary),
}

impl<T: Real> Dictionary<T> for AnyDictionary<T> {
    fn len(&self) -> usize {
        match self {
            Self::Mls(d) => d.len(),
            Self::Rbf(d) => d.len(),
            Self::Affine(d) => Dictionary::<T>::len(d),
        }
    }

    fn dim(&self) -> usize {
        match self {
            Self::Mls(d) => d.dim(),
            Self::Rbf(d) => d.dim(),
            Self::Affine(d) => Dictionary::<T>::dim(d),
        }
    }

    fn evaluate_sparse(&self, x: &[T], out: &mut Vec<(usize, T)>) -> Result<()> {
        match self {
            Self::Mls(d) => d.evaluate_sparse(x, out),
            Self::Rbf(d) => d.evaluate_sparse(x, out),
            Self::Affine(d) => d.evaluate_sparse(x, out),
        }
    }
}
