//! FitzHugh–Nagumo reaction–diffusion system on a 1D interval with
//! zero-flux boundaries.
//!
//! ```text
//! v_t = v_xx + v - w - v^3
//! w_t = delta * w_xx + epsilon * (v - c1 * w - c0)
//! ```
//!
//! Space is discretized with second-order central differences on a
//! vertex-centred grid (nodes at both ends of the interval) and a mirrored
//! ghost node closes the Neumann condition. Time stepping is classical RK4.

use faer::linalg::solvers::Solve;
use faer::Mat;
use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Any field entry beyond this magnitude aborts the integration.
pub const DIVERGENCE_BOUND: f64 = 1e6;

/// Number of cosine modes in the initial perturbation.
pub const PERTURBATION_MODES: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct FhnParams<T> {
    pub c0: T,
    pub c1: T,
    pub delta: T,
    pub epsilon: T,
    pub domain_length: T,
    pub grid_points: usize,
    pub dt_integration: T,
}

impl<T: Real> Default for FhnParams<T> {
    fn default() -> Self {
        Self {
            c0: T::lit(-0.03),
            c1: T::lit(2.0),
            delta: T::lit(4.0),
            epsilon: T::lit(0.017),
            domain_length: T::lit(20.0),
            grid_points: 200,
            // RK4 is stable for dt * 4 * delta / dx^2 < 2.78; on 200 nodes
            // that caps dt near 1.75e-3. 1/600 divides the sampling interval.
            dt_integration: T::lit(1.0 / 600.0),
        }
    }
}

impl<T: Real> FhnParams<T> {
    pub fn validate(&self) -> Result<()> {
        if self.grid_points < 3 {
            return Err(Error::InvalidParameter(format!(
                "grid_points must be at least 3, got {}",
                self.grid_points
            )));
        }
        if !(self.dt_integration > T::zero()) {
            return Err(Error::InvalidParameter("dt_integration must be positive".into()));
        }
        if !(self.domain_length > T::zero()) {
            return Err(Error::InvalidParameter("domain_length must be positive".into()));
        }
        if self.c1 == T::zero() {
            return Err(Error::InvalidParameter("c1 must be nonzero".into()));
        }
        if !(self.delta >= T::zero()) {
            return Err(Error::InvalidParameter("delta must be non-negative".into()));
        }
        Ok(())
    }

    #[inline]
    pub fn dx(&self) -> T {
        self.domain_length / T::from_usize_lossy(self.grid_points - 1)
    }

    /// Node coordinates `0, dx, ..., domain_length`.
    pub fn grid(&self) -> Vec<T> {
        let dx = self.dx();
        (0..self.grid_points).map(|i| T::from_usize_lossy(i) * dx).collect()
    }

    /// Largest time step for which RK4 is stable on the diffusion operator
    /// alone (real-axis stability boundary of RK4 is about 2.785).
    pub fn rk4_stability_limit(&self) -> T {
        let dx = self.dx();
        let d = self.delta.max(T::one());
        T::lit(2.785) * dx * dx / (T::lit(4.0) * d)
    }
}

/// Discretized `(v, w)` fields at time `t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct FieldState<T> {
    pub v: Vec<T>,
    pub w: Vec<T>,
    pub t: T,
}

impl<T: Real> FieldState<T> {
    pub fn uniform(v: T, w: T, grid_points: usize) -> Self {
        Self { v: vec![v; grid_points], w: vec![w; grid_points], t: T::zero() }
    }

    pub fn len(&self) -> usize {
        self.v.len()
    }

    pub fn is_empty(&self) -> bool {
        self.v.is_empty()
    }

    pub fn validate(&self, grid_points: usize) -> Result<()> {
        if self.v.len() != grid_points {
            return Err(Error::DimensionMismatch { expected: grid_points, found: self.v.len() });
        }
        if self.w.len() != grid_points {
            return Err(Error::DimensionMismatch { expected: grid_points, found: self.w.len() });
        }
        if self.v.iter().chain(&self.w).any(|x| !x.is_finite()) {
            return Err(Error::InvalidParameter("field contains non-finite values".into()));
        }
        Ok(())
    }

    /// Stacked `[v; w]` vector used for principal component analysis.
    pub fn stacked(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(2 * self.v.len());
        out.extend_from_slice(&self.v);
        out.extend_from_slice(&self.w);
        out
    }

    pub fn from_stacked(stacked: &[T], t: T) -> Result<Self> {
        if stacked.len() % 2 != 0 {
            return Err(Error::Format("stacked field vector has odd length".into()));
        }
        let n = stacked.len() / 2;
        Ok(Self { v: stacked[..n].to_vec(), w: stacked[n..].to_vec(), t })
    }
}

/// Linear stability of a spatially uniform steady state under the reaction
/// kinetics alone.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stability {
    Stable,
    Unstable,
    Saddle,
    Marginal,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct FixedPoint<T> {
    pub v: T,
    pub w: T,
    pub stability: Stability,
}

/// All real spatially uniform steady states, sorted by `v`.
///
/// Eliminating `w = (v - c0) / c1` leaves the depressed cubic
/// `v^3 + p v + q = 0` with `p = 1/c1 - 1` and `q = -c0/c1`.
pub fn reaction_fixed_points<T: Real>(params: &FhnParams<T>) -> Vec<FixedPoint<T>> {
    let p = T::one() / params.c1 - T::one();
    let q = -params.c0 / params.c1;
    let mut roots = depressed_cubic_roots(p, q);
    roots.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    roots
        .into_iter()
        .map(|v| {
            let w = (v - params.c0) / params.c1;
            FixedPoint { v, w, stability: classify(params, v) }
        })
        .collect()
}

/// The linearly unstable uniform state that trajectories are seeded from.
///
/// For the default kinetics this is the middle root, a saddle of the reaction
/// ODE; an unstable node or focus is preferred when one exists.
pub fn unstable_fixed_point<T: Real>(params: &FhnParams<T>) -> Result<FixedPoint<T>> {
    let fps = reaction_fixed_points(params);
    fps.iter()
        .find(|fp| fp.stability == Stability::Unstable)
        .or_else(|| fps.iter().find(|fp| fp.stability == Stability::Saddle))
        .copied()
        .ok_or_else(|| Error::InvalidParameter("reaction kinetics have no unstable uniform state".into()))
}

fn classify<T: Real>(params: &FhnParams<T>, v: T) -> Stability {
    let a = T::one() - T::lit(3.0) * v * v;
    let trace = a - params.epsilon * params.c1;
    let det = -a * params.epsilon * params.c1 + params.epsilon;
    if det < T::zero() {
        Stability::Saddle
    } else if det == T::zero() || trace == T::zero() {
        Stability::Marginal
    } else if trace < T::zero() {
        Stability::Stable
    } else {
        Stability::Unstable
    }
}

fn depressed_cubic_roots<T: Real>(p: T, q: T) -> Vec<T> {
    let three = T::lit(3.0);
    let two = T::lit(2.0);
    let disc = -(T::lit(4.0) * p * p * p + T::lit(27.0) * q * q);
    let mut roots = if disc > T::zero() && p < T::zero() {
        let m = two * (-p / three).sqrt();
        let arg = (three * q / (two * p) * (-three / p).sqrt()).max(-T::one()).min(T::one());
        let theta = arg.acos() / three;
        (0..3)
            .map(|k| m * (theta - two * T::PI() * T::from_usize_lossy(k) / three).cos())
            .collect::<Vec<_>>()
    } else {
        let s = (q * q / T::lit(4.0) + p * p * p / T::lit(27.0)).max(T::zero()).sqrt();
        vec![(-q / two + s).cbrt() + (-q / two - s).cbrt()]
    };
    for r in roots.iter_mut() {
        for _ in 0..4 {
            let f = *r * *r * *r + p * *r + q;
            let df = three * *r * *r + p;
            if df == T::zero() {
                break;
            }
            *r = *r - f / df;
        }
    }
    roots
}

/// Explicit RK4 integrator with preallocated stage buffers.
#[derive(Clone, Debug)]
pub struct FhnIntegrator<T> {
    params: FhnParams<T>,
    reaction: bool,
    stages: [Vec<T>; 8],
    scratch_v: Vec<T>,
    scratch_w: Vec<T>,
}

impl<T: Real> FhnIntegrator<T> {
    pub fn new(params: FhnParams<T>) -> Result<Self> {
        params.validate()?;
        let n = params.grid_points;
        Ok(Self {
            params,
            reaction: true,
            stages: std::array::from_fn(|_| vec![T::zero(); n]),
            scratch_v: vec![T::zero(); n],
            scratch_w: vec![T::zero(); n],
        })
    }

    /// Pure diffusion; used to check conservation properties.
    pub fn without_reaction(mut self) -> Self {
        self.reaction = false;
        self
    }

    pub fn params(&self) -> &FhnParams<T> {
        &self.params
    }

    /// Advances one `dt_integration`.
    pub fn step(&mut self, state: &FieldState<T>) -> Result<FieldState<T>> {
        let mut next = state.clone();
        self.advance(&mut next, 1)?;
        Ok(next)
    }

    /// Advances `steps` time steps in place.
    pub fn advance(&mut self, state: &mut FieldState<T>, steps: usize) -> Result<()> {
        state.validate(self.params.grid_points)?;
        let t0 = state.t;
        let dt = self.params.dt_integration;
        let bound = T::lit(DIVERGENCE_BOUND);
        for k in 1..=steps {
            self.rk4(&mut state.v, &mut state.w);
            let t = t0 + T::from_usize_lossy(k) * dt;
            // NaN fails the comparison, hence the negation.
            if !state.v.iter().chain(&state.w).all(|x| x.abs() <= bound) {
                state.t = t;
                return Err(Error::Instability {
                    time: t.to_f64_lossy(),
                    bound: DIVERGENCE_BOUND,
                    trajectory: None,
                });
            }
        }
        state.t = t0 + T::from_usize_lossy(steps) * dt;
        Ok(())
    }

    fn rk4(&mut self, v: &mut [T], w: &mut [T]) {
        let dt = self.params.dt_integration;
        let half = dt * T::lit(0.5);
        let sixth = dt / T::lit(6.0);
        let two = T::lit(2.0);
        let [k1v, k1w, k2v, k2w, k3v, k3w, k4v, k4w] = &mut self.stages;
        let (sv, sw) = (&mut self.scratch_v, &mut self.scratch_w);
        let p = &self.params;
        let r = self.reaction;

        rhs(p, r, v, w, k1v, k1w);
        axpy_into(sv, v, half, k1v);
        axpy_into(sw, w, half, k1w);
        rhs(p, r, sv, sw, k2v, k2w);
        axpy_into(sv, v, half, k2v);
        axpy_into(sw, w, half, k2w);
        rhs(p, r, sv, sw, k3v, k3w);
        axpy_into(sv, v, dt, k3v);
        axpy_into(sw, w, dt, k3w);
        rhs(p, r, sv, sw, k4v, k4w);
        for i in 0..v.len() {
            v[i] = v[i] + sixth * (k1v[i] + two * (k2v[i] + k3v[i]) + k4v[i]);
            w[i] = w[i] + sixth * (k1w[i] + two * (k2w[i] + k3w[i]) + k4w[i]);
        }
    }
}

#[inline]
fn axpy_into<T: Real>(out: &mut [T], x: &[T], a: T, y: &[T]) {
    for ((o, &xi), &yi) in out.iter_mut().zip(x).zip(y) {
        *o = xi + a * yi;
    }
}

fn rhs<T: Real>(p: &FhnParams<T>, reaction: bool, v: &[T], w: &[T], dv: &mut [T], dw: &mut [T]) {
    let n = v.len();
    let dx = p.dx();
    let inv = T::one() / (dx * dx);
    let two = T::lit(2.0);
    // Mirrored ghost nodes: u[-1] = u[1], u[n] = u[n-2].
    dv[0] = two * (v[1] - v[0]) * inv;
    dw[0] = two * (w[1] - w[0]) * inv;
    for i in 1..n - 1 {
        dv[i] = (v[i - 1] - two * v[i] + v[i + 1]) * inv;
        dw[i] = (w[i - 1] - two * w[i] + w[i + 1]) * inv;
    }
    dv[n - 1] = two * (v[n - 2] - v[n - 1]) * inv;
    dw[n - 1] = two * (w[n - 2] - w[n - 1]) * inv;

    for x in dw.iter_mut() {
        *x = *x * p.delta;
    }
    if reaction {
        for i in 0..n {
            let (vi, wi) = (v[i], w[i]);
            dv[i] = dv[i] + vi - wi - vi * vi * vi;
            dw[i] = dw[i] + p.epsilon * (vi - p.c1 * wi - p.c0);
        }
    }
}

/// Right-hand side of the spatially uniform reaction system.
pub fn reaction_rhs<T: Real>(params: &FhnParams<T>, v: T, w: T) -> (T, T) {
    (v - w - v * v * v, params.epsilon * (v - params.c1 * w - params.c0))
}

/// Trapezoid-weighted integral of a nodal field over the domain. The
/// ghost-node scheme conserves exactly this quantity under pure diffusion.
pub fn integrate_field<T: Real>(field: &[T], dx: T) -> T {
    let n = field.len();
    let half = T::lit(0.5);
    let interior: T = field[1..n - 1].iter().copied().sum();
    dx * (interior + half * (field[0] + field[n - 1]))
}

/// Time derivative of the discretized system, stacked as `[v, w]`.
pub fn residual<T: Real>(params: &FhnParams<T>, state: &FieldState<T>) -> Result<Vec<T>> {
    state.validate(params.grid_points)?;
    let n = params.grid_points;
    let mut f = vec![T::zero(); 2 * n];
    let (dv, dw) = f.split_at_mut(n);
    rhs(params, true, &state.v, &state.w, dv, dw);
    Ok(f)
}

/// Jacobian of [`residual`] with respect to the stacked `[v, w]`.
pub fn jacobian<T: Real>(params: &FhnParams<T>, state: &FieldState<T>) -> Result<Mat<T>> {
    state.validate(params.grid_points)?;
    let n = params.grid_points;
    let dx = params.dx();
    let c = T::one() / (dx * dx);
    let two = T::lit(2.0);
    let mut j = Mat::<T>::zeros(2 * n, 2 * n);
    for i in 0..n {
        // Ghost nodes mirror the first interior neighbour.
        let (l, r) = match i {
            0 => (1, 1),
            i if i == n - 1 => (n - 2, n - 2),
            i => (i - 1, i + 1),
        };
        j[(i, l)] = j[(i, l)] + c;
        j[(i, r)] = j[(i, r)] + c;
        j[(i, i)] = j[(i, i)] - two * c + T::one() - T::lit(3.0) * state.v[i] * state.v[i];
        j[(i, n + i)] = -T::one();
        j[(n + i, n + l)] = j[(n + i, n + l)] + params.delta * c;
        j[(n + i, n + r)] = j[(n + i, n + r)] + params.delta * c;
        j[(n + i, n + i)] = j[(n + i, n + i)] - two * params.delta * c - params.epsilon * params.c1;
        j[(n + i, i)] = params.epsilon;
    }
    Ok(j)
}

/// Newton iteration for a steady state of the discretized PDE, stopping when
/// the residual 2-norm drops below `tol`.
pub fn newton_steady_state<T: Real>(params: &FhnParams<T>, guess: &FieldState<T>, tol: T, max_iter: usize) -> Result<FieldState<T>> {
    let n = params.grid_points;
    let mut state = guess.clone();
    for _ in 0..max_iter {
        let f = residual(params, &state)?;
        let norm = f.iter().map(|x| *x * *x).sum::<T>().sqrt();
        if !norm.is_finite() {
            break;
        }
        if norm < tol {
            state.t = T::zero();
            return Ok(state);
        }
        let j = jacobian(params, &state)?;
        let rhs = Mat::<T>::from_fn(2 * n, 1, |i, _| -f[i]);
        let du = j.partial_piv_lu().solve(&rhs);
        for i in 0..n {
            state.v[i] = state.v[i] + du[(i, 0)];
            state.w[i] = state.w[i] + du[(n + i, 0)];
        }
    }
    Err(Error::Numerical("Newton iteration for a steady state did not converge".into()))
}

/// Eigenvalues of the linearization at `state`, sorted by real part
/// descending.
pub fn linear_spectrum<T: Real>(params: &FhnParams<T>, state: &FieldState<T>) -> Result<Vec<Complex<T>>> {
    let mut ev = jacobian(params, state)?
        .eigenvalues()
        .map_err(|e| Error::Numerical(format!("eigensolver did not converge: {e:?}")))?;
    ev.sort_by(|a, b| b.re.to_f64_lossy().total_cmp(&a.re.to_f64_lossy()).then(b.im.to_f64_lossy().total_cmp(&a.im.to_f64_lossy())));
    Ok(ev)
}

/// Time to settle onto the limit cycle before averaging.
pub const CENTER_TRANSIENT: f64 = 2000.0;
/// Averaging window, about three periods of the limit cycle.
pub const CENTER_WINDOW: f64 = 400.0;

/// The unstable steady state enclosed by the limit cycle.
///
/// A run seeded from the uniform saddle with a fixed low-mode kick settles on
/// the limit cycle; its time average seeds a Newton solve. The result must
/// have exactly one unstable pair of complex conjugate eigenvalues, so that
/// its unstable manifold is the two-dimensional surface spanned by the
/// spiral out to the cycle.
pub fn cycle_center_state<T: Real>(params: &FhnParams<T>) -> Result<FieldState<T>> {
    params.validate()?;
    let fp = unstable_fixed_point(params)?;
    let n = params.grid_points;
    let kick = T::lit(0.1);
    let mut state = FieldState {
        v: params
            .grid()
            .iter()
            .map(|&x| fp.v + kick * (T::PI() * x / params.domain_length).cos())
            .collect(),
        w: vec![fp.w; n],
        t: T::zero(),
    };
    let dt = params.dt_integration.to_f64_lossy();
    let mut integrator = FhnIntegrator::new(params.clone())?;
    integrator.advance(&mut state, (CENTER_TRANSIENT / dt).round() as usize)?;
    let per_sample = ((1.0 / dt).round() as usize).max(1);
    let samples = (CENTER_WINDOW / (per_sample as f64 * dt)).round() as usize;
    let mut mean = FieldState { v: vec![T::zero(); n], w: vec![T::zero(); n], t: T::zero() };
    for _ in 0..samples {
        integrator.advance(&mut state, per_sample)?;
        for i in 0..n {
            mean.v[i] = mean.v[i] + state.v[i];
            mean.w[i] = mean.w[i] + state.w[i];
        }
    }
    let inv = T::one() / T::from_usize_lossy(samples);
    mean.v.iter_mut().chain(mean.w.iter_mut()).for_each(|x| *x = *x * inv);

    let tol = T::lit(1e-10) * T::from_usize_lossy(2 * n).sqrt();
    let center = newton_steady_state(params, &mean, tol, 50)?;
    let spectrum = linear_spectrum(params, &center)?;
    let unstable: Vec<_> = spectrum.iter().filter(|z| z.re > T::zero()).collect();
    if unstable.len() != 2 || unstable[0].im == T::zero() {
        return Err(Error::Numerical(format!(
            "steady state inside the limit cycle has {} unstable eigenvalues, expected one complex pair",
            unstable.len()
        )));
    }
    Ok(center)
}

/// Which steady state trajectories are seeded from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseState {
    /// Unstable steady state enclosed by the limit cycle (a standing front).
    #[default]
    CycleCenter,
    /// Unstable spatially uniform state.
    Uniform,
}

/// Materializes a [`BaseState`].
pub fn base_state<T: Real>(which: BaseState, params: &FhnParams<T>) -> Result<FieldState<T>> {
    match which {
        BaseState::CycleCenter => cycle_center_state(params),
        BaseState::Uniform => {
            let fp = unstable_fixed_point(params)?;
            Ok(FieldState::uniform(fp.v, fp.w, params.grid_points))
        }
    }
}

/// One simulated run: `pairs_per_trajectory + 1` states spaced by the
/// sampling interval, with `t` measured from the end of the burn-in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct Trajectory<T> {
    pub index: usize,
    pub states: Vec<FieldState<T>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct TrajectoryConfig<T> {
    pub n_trajectories: usize,
    pub burn_in: T,
    pub sampling_interval: T,
    pub pairs_per_trajectory: usize,
    pub perturbation_scale: T,
    pub rng_seed: u64,
    #[serde(default)]
    pub base_state: BaseState,
}

impl<T: Real> Default for TrajectoryConfig<T> {
    fn default() -> Self {
        Self {
            n_trajectories: 20,
            burn_in: T::lit(1000.0),
            sampling_interval: T::lit(2.0),
            pairs_per_trajectory: 1000,
            perturbation_scale: T::lit(0.1),
            rng_seed: 0,
            base_state: BaseState::CycleCenter,
        }
    }
}

impl<T: Real> TrajectoryConfig<T> {
    /// Integration steps per sampling interval and per burn-in.
    pub fn step_counts(&self, params: &FhnParams<T>) -> Result<(usize, usize)> {
        let per_sample = integer_ratio(self.sampling_interval, params.dt_integration, "sampling_interval")?;
        if per_sample == 0 {
            return Err(Error::InvalidParameter("sampling_interval must be positive".into()));
        }
        let burn = integer_ratio(self.burn_in, params.dt_integration, "burn_in")?;
        Ok((per_sample, burn))
    }

    pub fn validate(&self, params: &FhnParams<T>) -> Result<()> {
        params.validate()?;
        if !(self.perturbation_scale >= T::zero()) {
            return Err(Error::InvalidParameter("perturbation_scale must be non-negative".into()));
        }
        self.step_counts(params).map(|_| ())
    }
}

fn integer_ratio<T: Real>(span: T, dt: T, what: &str) -> Result<usize> {
    let ratio = (span / dt).to_f64_lossy();
    let n = ratio.round();
    if !(ratio >= 0.0) || (ratio - n).abs() > 1e-6 * ratio.max(1.0) {
        return Err(Error::InvalidParameter(format!(
            "{what} ({}) must be a non-negative integer multiple of dt_integration ({})",
            span, dt
        )));
    }
    Ok(n as usize)
}

/// Per-trajectory RNG seed; SplitMix64 finalizer over (seed, index).
pub fn trajectory_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed ^ (index as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Smooth random perturbation of `base`: a random combination of the first
/// cosine modes on each field, rescaled so its largest nodal magnitude
/// equals `scale`.
pub fn perturbed_initial_state<T: Real>(params: &FhnParams<T>, base: &FieldState<T>, scale: T, seed: u64) -> Result<FieldState<T>> {
    base.validate(params.grid_points)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = params.grid();
    let mut profile = |base: &[T]| -> Vec<T> {
        let coeffs: Vec<T> = (0..PERTURBATION_MODES).map(|_| T::lit(rng.random_range(-1.0..1.0))).collect();
        let shape: Vec<T> = grid
            .iter()
            .map(|&x| {
                coeffs
                    .iter()
                    .enumerate()
                    .map(|(j, &a)| a * (T::from_usize_lossy(j) * T::PI() * x / params.domain_length).cos())
                    .sum()
            })
            .collect();
        let peak = shape.iter().fold(T::zero(), |m, s| m.max(s.abs()));
        let gain = if peak > T::zero() { scale / peak } else { T::zero() };
        shape.into_iter().zip(base).map(|(s, b)| *b + gain * s).collect()
    };
    let v = profile(&base.v);
    let w = profile(&base.w);
    Ok(FieldState { v, w, t: T::zero() })
}

/// Simulates `config.n_trajectories` independent runs. Runs execute in
/// parallel; the result is ordered by trajectory index.
pub fn generate_trajectories<T: Real>(config: &TrajectoryConfig<T>, params: &FhnParams<T>) -> Result<Vec<Trajectory<T>>> {
    config.validate(params)?;
    let base = base_state(config.base_state, params)?;
    generate_trajectories_from(config, params, &base)
}

/// As [`generate_trajectories`] with the base state already computed.
pub fn generate_trajectories_from<T: Real>(
    config: &TrajectoryConfig<T>,
    params: &FhnParams<T>,
    base: &FieldState<T>,
) -> Result<Vec<Trajectory<T>>> {
    config.validate(params)?;
    (0..config.n_trajectories)
        .into_par_iter()
        .map(|index| simulate_one(config, params, base, index))
        .collect()
}

fn simulate_one<T: Real>(config: &TrajectoryConfig<T>, params: &FhnParams<T>, base: &FieldState<T>, index: usize) -> Result<Trajectory<T>> {
    let tag = |e: Error| match e {
        Error::Instability { time, bound, .. } => Error::Instability { time, bound, trajectory: Some(index) },
        other => other,
    };
    let (per_sample, burn) = config.step_counts(params)?;
    let mut integrator = FhnIntegrator::new(params.clone())?;
    let mut state = perturbed_initial_state(params, base, config.perturbation_scale, trajectory_seed(config.rng_seed, index))?;
    integrator.advance(&mut state, burn).map_err(tag)?;
    state.t = T::zero();
    let mut states = Vec::with_capacity(config.pairs_per_trajectory + 1);
    states.push(state.clone());
    for m in 1..=config.pairs_per_trajectory {
        integrator.advance(&mut state, per_sample).map_err(tag)?;
        state.t = T::from_usize_lossy(m) * config.sampling_interval;
        states.push(state.clone());
    }
    Ok(Trajectory { index, states })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bisect(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
        assert!(f(a) * f(b) < 0.0);
        for _ in 0..200 {
            let m = 0.5 * (a + b);
            if f(a) * f(m) <= 0.0 {
                b = m;
            } else {
                a = m;
            }
        }
        0.5 * (a + b)
    }

    #[test]
    fn default_params_match_published_values() {
        let p = FhnParams::<f64>::default();
        assert_eq!((p.c0, p.c1, p.delta, p.epsilon, p.domain_length), (-0.03, 2.0, 4.0, 0.017, 20.0));
        assert!(p.dt_integration < p.rk4_stability_limit());
        assert!(p.validate().is_ok());
    }

    #[test]
    fn invalid_params_rejected() {
        let mut p = FhnParams::<f64>::default();
        p.grid_points = 2;
        assert!(p.validate().is_err());
        let mut p = FhnParams::<f64>::default();
        p.dt_integration = 0.0;
        assert!(p.validate().is_err());
        let mut p = FhnParams::<f64>::default();
        p.domain_length = -1.0;
        assert!(p.validate().is_err());
    }

    #[test]
    fn middle_fixed_point_matches_bisection() {
        let p = FhnParams::<f64>::default();
        let fps = reaction_fixed_points(&p);
        assert_eq!(fps.len(), 3);
        let cubic = |v: f64| v * v * v - 0.5 * v + 0.015;
        let mid = bisect(cubic, -0.2, 0.2);
        assert!((fps[1].v - mid).abs() < 1e-12);
        assert!((fps[1].v - 0.0300).abs() < 5e-4);
        assert!((fps[1].w - (mid + 0.03) / 2.0).abs() < 1e-12);
        let lo = bisect(cubic, -1.5, -0.2);
        let hi = bisect(cubic, 0.2, 1.5);
        assert!((fps[0].v - lo).abs() < 1e-12 && (fps[2].v - hi).abs() < 1e-12);
    }

    #[test]
    fn fixed_points_sum_to_zero_and_have_zero_residual() {
        let p = FhnParams::<f64>::default();
        let fps = reaction_fixed_points(&p);
        let sum: f64 = fps.iter().map(|f| f.v).sum();
        assert!(sum.abs() < 1e-12);
        for fp in &fps {
            let (a, b) = reaction_rhs(&p, fp.v, fp.w);
            assert!(a.abs() < 1e-12 && (b / p.epsilon).abs() < 1e-12);
        }
        assert_eq!(fps[1].stability, Stability::Saddle);
        assert_eq!(fps[0].stability, Stability::Stable);
        assert_eq!(fps[2].stability, Stability::Stable);
    }

    #[test]
    fn single_root_regime() {
        // c1 < 1 makes p > 0: exactly one real root.
        let p = FhnParams::<f64> { c1: 0.5, ..Default::default() };
        let fps = reaction_fixed_points(&p);
        assert_eq!(fps.len(), 1);
        let (a, _) = reaction_rhs(&p, fps[0].v, fps[0].w);
        assert!(a.abs() < 1e-12);
    }

    #[test]
    fn fixed_point_is_stationary() {
        let p = FhnParams::<f64>::default();
        let fp = reaction_fixed_points(&p)[1];
        let mut integ = FhnIntegrator::new(p.clone()).unwrap();
        let mut s = FieldState::uniform(fp.v, fp.w, p.grid_points);
        for _ in 0..50 {
            let next = integ.step(&s).unwrap();
            for (a, b) in next.v.iter().zip(&s.v).chain(next.w.iter().zip(&s.w)) {
                assert!((a - b).abs() < 1e-10);
            }
            s = next;
        }
        assert!((s.t - 50.0 * p.dt_integration).abs() < 1e-12);
    }

    #[test]
    fn pure_diffusion_conserves_mass() {
        let p = FhnParams::<f64> { grid_points: 60, dt_integration: 0.005, ..Default::default() };
        let mut integ = FhnIntegrator::new(p.clone()).unwrap().without_reaction();
        let grid = p.grid();
        let mut s = FieldState {
            v: grid.iter().map(|x| (0.7 * x).sin() + 0.1 * x).collect(),
            w: grid.iter().map(|x| (0.3 * x).cos()).collect(),
            t: 0.0,
        };
        let dx = p.dx();
        for _ in 0..200 {
            let (mv, mw) = (integrate_field(&s.v, dx), integrate_field(&s.w, dx));
            s = integ.step(&s).unwrap();
            assert!((integrate_field(&s.v, dx) - mv).abs() < 1e-10);
            assert!((integrate_field(&s.w, dx) - mw).abs() < 1e-10);
        }
    }

    #[test]
    fn divergence_is_reported() {
        let p = FhnParams::<f64> { grid_points: 50, dt_integration: 0.5, ..Default::default() };
        let mut integ = FhnIntegrator::new(p.clone()).unwrap();
        let grid = p.grid();
        let mut s = FieldState { v: grid.iter().map(|x| (3.0 * x).sin()).collect(), w: vec![0.0; 50], t: 0.0 };
        let err = integ.advance(&mut s, 10_000).unwrap_err();
        assert!(matches!(err, Error::Instability { .. }));
    }

    #[test]
    fn step_rejects_wrong_length() {
        let p = FhnParams::<f64>::default();
        let mut integ = FhnIntegrator::new(p).unwrap();
        let s = FieldState::uniform(0.0, 0.0, 10);
        assert!(matches!(integ.step(&s), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn sampling_interval_must_be_multiple_of_dt() {
        let p = FhnParams::<f64> { dt_integration: 0.3, ..Default::default() };
        let c = TrajectoryConfig::<f64>::default();
        assert!(c.validate(&p).is_err());
    }

    #[test]
    fn trajectories_are_seeded_and_consecutive() {
        let p = FhnParams::<f64> { grid_points: 40, dt_integration: 0.02, ..Default::default() };
        let c = TrajectoryConfig::<f64> {
            n_trajectories: 3,
            burn_in: 10.0,
            pairs_per_trajectory: 5,
            rng_seed: 11,
            base_state: BaseState::Uniform,
            ..Default::default()
        };
        let a = generate_trajectories(&c, &p).unwrap();
        let b = generate_trajectories(&c, &p).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 3);
        for (i, tr) in a.iter().enumerate() {
            assert_eq!(tr.index, i);
            assert_eq!(tr.states.len(), 6);
            assert_eq!(tr.states[0].t, 0.0);
            assert_eq!(tr.states[5].t, 10.0);
        }
        assert_ne!(a[0].states[0], a[1].states[0]);
        let other = generate_trajectories(&TrajectoryConfig { rng_seed: 12, ..c }, &p).unwrap();
        assert_ne!(other[0].states[0], a[0].states[0]);
    }

    #[test]
    fn perturbation_has_requested_amplitude() {
        let p = FhnParams::<f64>::default();
        let fp = unstable_fixed_point(&p).unwrap();
        assert_eq!(fp, reaction_fixed_points(&p)[1]);
        let base = base_state(BaseState::Uniform, &p).unwrap();
        let s = perturbed_initial_state(&p, &base, 0.1, 5).unwrap();
        let peak = s.v.iter().map(|v| (v - fp.v).abs()).fold(0.0, f64::max);
        assert!((peak - 0.1).abs() < 1e-12);
    }

    #[test]
    fn works_in_single_precision() {
        let p = FhnParams::<f32>::default();
        let fps = reaction_fixed_points(&p);
        assert_eq!(fps.len(), 3);
        let fp = fps[1];
        let mut integ = FhnIntegrator::new(p.clone()).unwrap();
        let s = integ.step(&FieldState::uniform(fp.v, fp.w, p.grid_points)).unwrap();
        assert!((s.v[7] - fp.v).abs() < 1e-5);
    }
}
