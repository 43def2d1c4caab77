//! Measurement streams derived from field snapshots: principal component
//! coefficients, pointwise samples, and per-component whitening.

use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fhn::{FieldState, Trajectory};
use crate::points::PointSet;
use crate::scalar::Real;

/// Singular values below this fraction of the largest count as zero when
/// reporting the achievable rank.
pub const PCA_RANK_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct PcaBasis<T> {
    /// `retained` orthonormal spatial profiles over the stacked `[v; w]` vector.
    pub modes: Vec<Vec<T>>,
    /// Every singular value of the centred snapshot matrix, non-increasing.
    pub singular_values: Vec<T>,
    pub mean: Vec<T>,
    pub retained: usize,
    pub energy_fraction: T,
}

impl<T: Real> PcaBasis<T> {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `sum(s_i^2, i < r) / sum(s_i^2)` for each prefix length `r`.
    pub fn energy_prefix(&self) -> Vec<T> {
        let total: T = self.singular_values.iter().map(|s| *s * *s).sum();
        let mut acc = T::zero();
        self.singular_values
            .iter()
            .map(|s| {
                acc = acc + *s * *s;
                acc / total
            })
            .collect()
    }

    pub fn project_vector(&self, x: &[T]) -> Result<Vec<T>> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), found: x.len() });
        }
        Ok(self
            .modes
            .iter()
            .map(|m| m.iter().zip(x).zip(&self.mean).map(|((mi, xi), ci)| *mi * (*xi - *ci)).sum())
            .collect())
    }

    /// Coefficients `a_i = <field - mean, mode_i>`.
    pub fn project(&self, field: &FieldState<T>) -> Result<Vec<T>> {
        self.project_vector(&field.stacked())
    }

    /// `mean + sum_i a_i mode_i`.
    pub fn reconstruct(&self, coeffs: &[T]) -> Result<Vec<T>> {
        if coeffs.len() != self.modes.len() {
            return Err(Error::DimensionMismatch { expected: self.modes.len(), found: coeffs.len() });
        }
        let mut out = self.mean.clone();
        for (a, m) in coeffs.iter().zip(&self.modes) {
            for (o, mi) in out.iter_mut().zip(m) {
                *o = *o + *a * *mi;
            }
        }
        Ok(out)
    }
}

/// Stacked `[v; w]` vectors of every state in every trajectory.
pub fn stacked_snapshots<T: Real>(trajectories: &[Trajectory<T>]) -> Result<PointSet<T>> {
    let dim = trajectories
        .first()
        .and_then(|t| t.states.first())
        .map(|s| 2 * s.len())
        .ok_or_else(|| Error::InvalidParameter("no snapshots".into()))?;
    let mut set = PointSet::with_capacity(dim, trajectories.iter().map(|t| t.states.len()).sum());
    for s in trajectories.iter().flat_map(|t| &t.states) {
        set.push(&s.stacked())?;
    }
    Ok(set)
}

/// Mean-centred SVD of the snapshot matrix, keeping the leading `retained`
/// left singular vectors.
pub fn compute_pca<T: Real>(snapshots: &PointSet<T>, retained: usize) -> Result<PcaBasis<T>> {
    let n = snapshots.len();
    let dim = snapshots.dim();
    if retained == 0 {
        return Err(Error::InvalidParameter("retained must be at least 1".into()));
    }
    if n < retained {
        return Err(Error::InvalidParameter(format!("{n} snapshots cannot support {retained} modes")));
    }
    let inv_n = T::one() / T::from_usize_lossy(n);
    let mut mean = vec![T::zero(); dim];
    for row in snapshots.rows() {
        for (m, x) in mean.iter_mut().zip(row) {
            *m = *m + *x;
        }
    }
    mean.iter_mut().for_each(|m| *m = *m * inv_n);

    let centred = Mat::<T>::from_fn(dim, n, |i, j| snapshots.row(j)[i] - mean[i]);
    let svd = centred
        .thin_svd()
        .map_err(|e| Error::Numerical(format!("PCA singular value decomposition failed: {e:?}")))?;
    let s = svd.S().column_vector();
    let singular_values: Vec<T> = (0..s.nrows()).map(|i| s[i]).collect();
    let smax = singular_values.first().copied().unwrap_or_else(T::zero);
    let rank = singular_values
        .iter()
        .filter(|&&x| smax > T::zero() && x > T::lit(PCA_RANK_TOL) * smax)
        .count();
    if rank < retained {
        return Err(Error::RankDeficient { requested: retained, achievable: rank });
    }
    let u = svd.U();
    let modes = (0..retained)
        .map(|k| {
            let mut m: Vec<T> = (0..dim).map(|i| u[(i, k)]).collect();
            // Sign convention: largest-magnitude entry positive.
            let pivot = m.iter().copied().fold(T::zero(), |a, b| if b.abs() > a.abs() { b } else { a });
            if pivot < T::zero() {
                m.iter_mut().for_each(|x| *x = -*x);
            }
            m
        })
        .collect();
    let mut basis = PcaBasis { modes, singular_values, mean, retained, energy_fraction: T::zero() };
    basis.energy_fraction = basis.energy_prefix()[retained - 1];
    Ok(basis)
}

/// Values `[v(x), w(x)]` at the grid node nearest to `location`. A location
/// exactly halfway between two nodes resolves to the lower-index node.
pub fn point_measure<T: Real>(field: &FieldState<T>, location: T, domain_length: T) -> Result<[T; 2]> {
    let i = nearest_node(location, domain_length, field.len())?;
    Ok([field.v[i], field.w[i]])
}

pub fn nearest_node<T: Real>(location: T, domain_length: T, grid_points: usize) -> Result<usize> {
    if !(location >= T::zero() && location <= domain_length) {
        return Err(Error::InvalidParameter(format!(
            "measurement location {location} outside [0, {domain_length}]"
        )));
    }
    if grid_points < 2 {
        return Err(Error::InvalidParameter("field needs at least two nodes".into()));
    }
    let pos = (location / domain_length * T::from_usize_lossy(grid_points - 1)).to_f64_lossy();
    let lower = pos.floor();
    let frac = pos - lower;
    let idx = if frac > 0.5 + 1e-9 { lower as usize + 1 } else { lower as usize };
    Ok(idx.min(grid_points - 1))
}

/// Ordered measurement samples grouped into trajectories; one row per
/// snapshot. Consecutive rows of a trajectory are one sampling interval apart.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct MeasurementSeries<T> {
    pub label: String,
    pub components: Vec<String>,
    pub dt: T,
    pub trajectory: Vec<usize>,
    pub time: Vec<T>,
    pub values: PointSet<T>,
}

impl<T: Real> MeasurementSeries<T> {
    pub fn new(label: impl Into<String>, components: Vec<String>, dt: T) -> Self {
        let dim = components.len();
        Self { label: label.into(), components, dt, trajectory: Vec::new(), time: Vec::new(), values: PointSet::new(dim) }
    }

    pub fn push(&mut self, trajectory: usize, t: T, values: &[T]) -> Result<()> {
        self.values.push(values)?;
        self.trajectory.push(trajectory);
        self.time.push(t);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.values.dim()
    }

    /// Consecutive rows within each trajectory become `(x_m, y_m)` pairs.
    /// Rows whose spacing is not `dt` start a new segment.
    pub fn pairs(&self) -> Result<MeasurementDataset<T>> {
        let tol = T::lit(1e-9) * self.dt.abs().max(T::one());
        let mut x = PointSet::new(self.dim());
        let mut y = PointSet::new(self.dim());
        for i in 1..self.len() {
            if self.trajectory[i] == self.trajectory[i - 1] && ((self.time[i] - self.time[i - 1]) - self.dt).abs() <= tol {
                x.push(self.values.row(i - 1))?;
                y.push(self.values.row(i))?;
            }
        }
        if x.is_empty() {
            return Err(Error::InvalidParameter(format!("series '{}' contains no snapshot pairs", self.label)));
        }
        Ok(MeasurementDataset { label: self.label.clone(), pairs: SnapshotPairSet { x, y, dt: self.dt } })
    }

    pub fn map_values(&self, f: impl Fn(&[T]) -> Vec<T>) -> Result<Self> {
        let mut values = PointSet::with_capacity(self.dim(), self.len());
        for r in self.values.rows() {
            values.push(&f(r))?;
        }
        Ok(Self { values, ..self.clone() })
    }
}

/// Pairs `(x_m, y_m)` with `y_m` one sampling interval after `x_m`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct SnapshotPairSet<T> {
    pub x: PointSet<T>,
    pub y: PointSet<T>,
    pub dt: T,
}

impl<T: Real> SnapshotPairSet<T> {
    pub fn new(x: PointSet<T>, y: PointSet<T>, dt: T) -> Result<Self> {
        if x.dim() != y.dim() {
            return Err(Error::DimensionMismatch { expected: x.dim(), found: y.dim() });
        }
        if x.len() != y.len() {
            return Err(Error::DimensionMismatch { expected: x.len(), found: y.len() });
        }
        Ok(Self { x, y, dt })
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.dim()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct MeasurementDataset<T> {
    pub label: String,
    pub pairs: SnapshotPairSet<T>,
}

/// Per-component affine map to zero mean and unit sample variance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct WhitenTransform<T> {
    pub shift: Vec<T>,
    pub scale: Vec<T>,
}

impl<T: Real> WhitenTransform<T> {
    pub fn identity(dim: usize) -> Self {
        Self { shift: vec![T::zero(); dim], scale: vec![T::one(); dim] }
    }

    /// Sample mean and standard deviation (`n - 1` denominator) per column.
    pub fn fit(points: &PointSet<T>) -> Result<Self> {
        let n = points.len();
        if n < 2 {
            return Err(Error::InvalidParameter("whitening needs at least two samples".into()));
        }
        let dim = points.dim();
        let nf = T::from_usize_lossy(n);
        let mut shift = vec![T::zero(); dim];
        for r in points.rows() {
            for (s, x) in shift.iter_mut().zip(r) {
                *s = *s + *x;
            }
        }
        shift.iter_mut().for_each(|s| *s = *s / nf);
        let mut var = vec![T::zero(); dim];
        for r in points.rows() {
            for ((v, x), m) in var.iter_mut().zip(r).zip(&shift) {
                let d = *x - *m;
                *v = *v + d * d;
            }
        }
        let mut scale = Vec::with_capacity(dim);
        for (component, v) in var.into_iter().enumerate() {
            let sd = (v / (nf - T::one())).sqrt();
            let mag = shift[component].abs().max(T::min_positive_value());
            if !(sd > T::epsilon() * mag * T::lit(16.0)) {
                return Err(Error::ZeroVariance { component });
            }
            scale.push(sd);
        }
        Ok(Self { shift, scale })
    }

    pub fn dim(&self) -> usize {
        self.shift.len()
    }

    pub fn apply(&self, x: &[T]) -> Result<Vec<T>> {
        self.check(x)?;
        Ok(x.iter().zip(&self.shift).zip(&self.scale).map(|((x, m), s)| (*x - *m) / *s).collect())
    }

    pub fn invert(&self, z: &[T]) -> Result<Vec<T>> {
        self.check(z)?;
        Ok(z.iter().zip(&self.shift).zip(&self.scale).map(|((z, m), s)| *z * *s + *m).collect())
    }

    pub fn apply_set(&self, points: &PointSet<T>) -> Result<PointSet<T>> {
        let mut out = PointSet::with_capacity(points.dim(), points.len());
        for r in points.rows() {
            out.push(&self.apply(r)?)?;
        }
        Ok(out)
    }

    pub fn invert_set(&self, points: &PointSet<T>) -> Result<PointSet<T>> {
        let mut out = PointSet::with_capacity(points.dim(), points.len());
        for r in points.rows() {
            out.push(&self.invert(r)?)?;
        }
        Ok(out)
    }

    fn check(&self, x: &[T]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), found: x.len() });
        }
        Ok(())
    }
}

/// Whitens a dataset with statistics of its `x` snapshots; the same transform
/// is applied to the `y` snapshots.
pub fn whiten<T: Real>(dataset: &MeasurementDataset<T>) -> Result<(MeasurementDataset<T>, WhitenTransform<T>)> {
    let transform = WhitenTransform::fit(&dataset.pairs.x)?;
    let pairs = SnapshotPairSet {
        x: transform.apply_set(&dataset.pairs.x)?,
        y: transform.apply_set(&dataset.pairs.y)?,
        dt: dataset.pairs.dt,
    };
    Ok((MeasurementDataset { label: dataset.label.clone(), pairs }, transform))
}

/// PCA coefficient stream of a batch of trajectories.
pub fn pca_series<T: Real>(trajectories: &[Trajectory<T>], basis: &PcaBasis<T>, dt: T) -> Result<MeasurementSeries<T>> {
    let components = (1..=basis.retained).map(|i| format!("a{i}")).collect();
    let mut series = MeasurementSeries::new("pca", components, dt);
    for tr in trajectories {
        for s in &tr.states {
            series.push(tr.index, s.t, &basis.project(s)?)?;
        }
    }
    Ok(series)
}

/// `[v(location), w(location)]` stream of a batch of trajectories.
pub fn pointwise_series<T: Real>(
    trajectories: &[Trajectory<T>],
    location: T,
    domain_length: T,
    dt: T,
) -> Result<MeasurementSeries<T>> {
    let mut series = MeasurementSeries::new("pointwise", vec!["v".into(), "w".into()], dt);
    for tr in trajectories {
        for s in &tr.states {
            series.push(tr.index, s.t, &point_measure(s, location, domain_length)?)?;
        }
    }
    Ok(series)
}
