//! Translating measurements between two sensor sets through shared Koopman
//! eigenfunctions.
//!
//! Naming follows the two sides of a model: `tilde` is the target sensor set
//! (the one reconstructed), `hat` the source (the one measured).

use num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::edmd::KoopmanDecomposition;
use crate::error::{Error, Result};
use crate::interp::{pad_angle_periodic, FallbackPolicy, LinearInterpolant};
use crate::measurements::WhitenTransform;
use crate::points::PointSet;
use crate::scalar::Real;

/// Eigenvalues closer to `mu = 1` than this count as the trivial constant
/// tuple.
pub const TRIVIAL_TOL: f64 = 1e-6;

/// Largest `|Re lambda|` of a tuple treated as neutral (on the attractor)
/// when choosing the oscillatory coordinate.
pub const NEUTRAL_TOL: f64 = 1e-4;

/// A decaying tuple whose phase turns by less than this many radians per
/// e-folding (`|Im lambda| <= NEAR_REAL_RATIO * |Re lambda|`) counts as
/// non-oscillating. Nearly degenerate real eigenvalues of EDMD matrices
/// often come out as such a conjugate pair instead of two reals.
pub const NEAR_REAL_RATIO: f64 = 0.5;

/// Eigenvalue gap accepted when matching: `rel * max(|a|, |b|) + abs`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct MatchTolerance<T> {
    pub relative: T,
    pub absolute: T,
}

impl<T: Real> Default for MatchTolerance<T> {
    fn default() -> Self {
        Self { relative: T::lit(0.1), absolute: T::lit(1e-3) }
    }
}

impl<T: Real> MatchTolerance<T> {
    pub fn bound(&self, a: Complex<T>, b: Complex<T>) -> T {
        self.relative * a.norm().max(b.norm()) + self.absolute
    }

    pub fn accepts(&self, a: Complex<T>, b: Complex<T>) -> bool {
        let gap = (a - b).norm();
        gap.is_finite() && gap <= self.bound(a, b)
    }
}

/// A tilde/hat tuple pair with matching eigenvalues and its registration
/// constant `alpha` (`phi_tilde ~ alpha * phi_hat`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct MatchedPair<T> {
    pub index_tilde: usize,
    pub index_hat: usize,
    pub lambda_tilde: Complex<T>,
    pub lambda_hat: Complex<T>,
    pub eigenvalue_gap: T,
    pub alpha: Option<Complex<T>>,
}

/// Index of the eigenvalue in `lambda` closest to `conj(lambda[i])`,
/// excluding `i` itself.
fn conjugate_partner<T: Real>(lambda: &[Complex<T>], i: usize) -> Option<usize> {
    let target = lambda[i].conj();
    (0..lambda.len())
        .filter(|&j| j != i && lambda[j].norm().is_finite())
        .min_by(|&a, &b| {
            (lambda[a] - target)
                .norm()
                .to_f64_lossy()
                .total_cmp(&(lambda[b] - target).norm().to_f64_lossy())
        })
}

fn is_real<T: Real>(z: Complex<T>) -> bool {
    z.im == T::zero()
}

/// Real, or decaying with a negligible rotation; see [`NEAR_REAL_RATIO`].
pub fn is_non_oscillating<T: Real>(lambda: Complex<T>) -> bool {
    is_real(lambda) || (lambda.re < T::zero() && lambda.im.abs() <= T::lit(NEAR_REAL_RATIO) * lambda.re.abs())
}

/// Greedy minimal-gap assignment between the continuous spectra of two
/// decompositions. Oscillating tuples only match oscillating ones, and a
/// complex tuple is matched together with its conjugate on both sides. A
/// non-oscillating complex tuple may match a real one; its conjugate is then
/// used up without a partner. Pairs are returned in order of acceptance.
pub fn match_eigenfunctions<T: Real>(
    tilde: &KoopmanDecomposition<T>,
    hat: &KoopmanDecomposition<T>,
    tol: &MatchTolerance<T>,
) -> Result<Vec<MatchedPair<T>>> {
    if (tilde.dt - hat.dt).abs() > T::lit(1e-12) * tilde.dt.abs().max(hat.dt.abs()) {
        return Err(Error::InvalidParameter(format!(
            "decompositions use different sampling intervals ({} and {})",
            tilde.dt, hat.dt
        )));
    }
    let lt = &tilde.lambda;
    let lh = &hat.lambda;
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for (i, a) in lt.iter().enumerate() {
        if !a.norm().is_finite() {
            continue;
        }
        for (j, b) in lh.iter().enumerate() {
            if is_non_oscillating(*a) == is_non_oscillating(*b) && tol.accepts(*a, *b) {
                candidates.push(((*a - *b).norm().to_f64_lossy(), i, j));
            }
        }
    }
    candidates.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let mut used_t = vec![false; lt.len()];
    let mut used_h = vec![false; lh.len()];
    let mut pairs = Vec::new();
    let make = |i: usize, j: usize| MatchedPair {
        index_tilde: i,
        index_hat: j,
        lambda_tilde: lt[i],
        lambda_hat: lh[j],
        eigenvalue_gap: (lt[i] - lh[j]).norm(),
        alpha: None,
    };
    for (_, i, j) in candidates {
        if used_t[i] || used_h[j] {
            continue;
        }
        if is_real(lt[i]) || is_real(lh[j]) {
            used_t[i] = true;
            used_h[j] = true;
            if !is_real(lt[i]) {
                conjugate_partner(lt, i).into_iter().for_each(|c| used_t[c] = true);
            }
            if !is_real(lh[j]) {
                conjugate_partner(lh, j).into_iter().for_each(|c| used_h[c] = true);
            }
            pairs.push(make(i, j));
            continue;
        }
        let (Some(ci), Some(cj)) = (conjugate_partner(lt, i), conjugate_partner(lh, j)) else {
            continue;
        };
        if used_t[ci] || used_h[cj] || !tol.accepts(lt[ci], lh[cj]) {
            continue;
        }
        used_t[i] = true;
        used_h[j] = true;
        used_t[ci] = true;
        used_h[cj] = true;
        pairs.push(make(i, j));
        pairs.push(make(ci, cj));
    }
    if pairs.is_empty() {
        return Err(Error::NoMatch);
    }
    Ok(pairs)
}

/// Least-squares `alpha` minimizing `sum |phi_tilde - alpha phi_hat|^2`.
pub fn registration_constant<T: Real>(phi_tilde: &[Complex<T>], phi_hat: &[Complex<T>], index: usize) -> Result<Complex<T>> {
    if phi_tilde.len() != phi_hat.len() {
        return Err(Error::DimensionMismatch { expected: phi_tilde.len(), found: phi_hat.len() });
    }
    if phi_hat.is_empty() {
        return Err(Error::InvalidParameter("registration needs at least one joint measurement".into()));
    }
    let mut num = Complex::new(T::zero(), T::zero());
    let mut den = T::zero();
    for (t, h) in phi_tilde.iter().zip(phi_hat) {
        num = num + h.conj() * *t;
        den = den + h.norm_sqr();
    }
    let floor = T::lit(1e-24) * T::from_usize_lossy(phi_hat.len());
    if !(den > floor) {
        return Err(Error::Registration { index });
    }
    let alpha = num / den;
    if !alpha.re.is_finite() || !alpha.im.is_finite() || alpha.norm() == T::zero() {
        return Err(Error::Registration { index });
    }
    Ok(alpha)
}

/// Fills in `pair.alpha` from joint measurements (already whitened),
/// `joint_tilde[m]` and `joint_hat[m]` taken at the same instant.
pub fn register_alpha<T: Real>(
    pair: &MatchedPair<T>,
    tilde: &KoopmanDecomposition<T>,
    hat: &KoopmanDecomposition<T>,
    joint_tilde: &PointSet<T>,
    joint_hat: &PointSet<T>,
) -> Result<MatchedPair<T>> {
    if joint_tilde.len() != joint_hat.len() {
        return Err(Error::DimensionMismatch { expected: joint_tilde.len(), found: joint_hat.len() });
    }
    let phi_t = joint_tilde
        .rows()
        .map(|x| tilde.eval_eigenfunction(x, pair.index_tilde))
        .collect::<Result<Vec<_>>>()?;
    let phi_h = joint_hat
        .rows()
        .map(|x| hat.eval_eigenfunction(x, pair.index_hat))
        .collect::<Result<Vec<_>>>()?;
    let alpha = registration_constant(&phi_t, &phi_h, pair.index_hat)?;
    Ok(MatchedPair { alpha: Some(alpha), ..*pair })
}

/// Indices of the decaying and the oscillatory tuple that parameterize the
/// attracting slow manifold.
///
/// Decaying: non-oscillating `lambda` with `Re lambda < 0` and
/// `Im lambda >= 0` of smallest `|Re lambda|`, so a real tuple unless EDMD
/// split it into a nearly real pair ([`NEAR_REAL_RATIO`]). Oscillatory: among
/// `Im lambda > 0` tuples with `|Re lambda| <= NEUTRAL_TOL` the one of
/// lowest frequency; the harmonics of a limit cycle are neutral too, and
/// the phase of a harmonic winds several times per period. When no tuple is
/// that close to neutral, the one with `|mu|` closest to 1. The trivial
/// tuple (`mu` within [`TRIVIAL_TOL`] of 1) is never selected.
pub fn select_parameterization<T: Real>(dec: &KoopmanDecomposition<T>) -> Result<(usize, usize)> {
    let trivial = |k: usize| (dec.mu[k] - Complex::new(T::one(), T::zero())).norm() < T::lit(TRIVIAL_TOL);
    let decaying = (0..dec.len())
        .filter(|&k| {
            let l = dec.lambda[k];
            !trivial(k) && l.re < T::zero() && l.re.is_finite() && l.im >= T::zero() && is_non_oscillating(l)
        })
        .min_by(|&a, &b| dec.lambda[a].re.abs().to_f64_lossy().total_cmp(&dec.lambda[b].re.abs().to_f64_lossy()))
        .ok_or(Error::NoQualifyingTuple("decaying"))?;
    let rotating: Vec<usize> = (0..dec.len())
        .filter(|&k| !trivial(k) && dec.lambda[k].im > T::zero() && !is_non_oscillating(dec.lambda[k]))
        .collect();
    let neutral = rotating
        .iter()
        .copied()
        .filter(|&k| dec.lambda[k].re.abs() <= T::lit(NEUTRAL_TOL))
        .min_by(|&a, &b| dec.lambda[a].im.to_f64_lossy().total_cmp(&dec.lambda[b].im.to_f64_lossy()).then(a.cmp(&b)));
    let oscillatory = match neutral {
        Some(k) => k,
        None => rotating
            .into_iter()
            .min_by(|&a, &b| {
                let da = (dec.mu[a].norm() - T::one()).abs().to_f64_lossy();
                let db = (dec.mu[b].norm() - T::one()).abs().to_f64_lossy();
                da.total_cmp(&db).then(a.cmp(&b))
            })
            .ok_or(Error::NoQualifyingTuple("oscillatory"))?,
    };
    Ok((decaying, oscillatory))
}

/// Knobs of [`build_fusion_model`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct FusionConfig<T> {
    pub match_tolerance: MatchTolerance<T>,
    /// Largest trusted `|phi_1|`.
    pub trust_threshold: T,
    pub fallback: FallbackPolicy,
    /// Factor applied to `phi_1` before triangulating; `None` scales its
    /// training range to the width of the angle band.
    pub coordinate_scale: Option<T>,
    /// Explicit (decaying, oscillatory) tilde indices instead of
    /// [`select_parameterization`].
    pub tilde_indices: Option<(usize, usize)>,
}

impl<T: Real> Default for FusionConfig<T> {
    fn default() -> Self {
        Self {
            match_tolerance: MatchTolerance::default(),
            trust_threshold: T::lit(0.03),
            fallback: FallbackPolicy::NearestVertex,
            coordinate_scale: None,
            tilde_indices: None,
        }
    }
}

/// Training samples of the inverse map: intrinsic coordinates
/// `(phi_1, angle phi_2)` and the raw target measurement at each.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct IntrinsicSamples<T> {
    pub coords: PointSet<T>,
    pub values: PointSet<T>,
}

/// Everything needed to map source measurements to target measurements.
#[derive(Clone, Debug)]
pub struct FusionModel<T: Real> {
    pub tilde: KoopmanDecomposition<T>,
    pub hat: KoopmanDecomposition<T>,
    pub whiten_tilde: WhitenTransform<T>,
    pub whiten_hat: WhitenTransform<T>,
    pub decaying: MatchedPair<T>,
    pub oscillatory: MatchedPair<T>,
    pub samples: IntrinsicSamples<T>,
    pub coordinate_scale: T,
    pub trust_threshold: T,
    pub interpolant: LinearInterpolant<T>,
}

/// Result of translating one source measurement.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedEstimate<T> {
    pub values: Vec<T>,
    pub phi1: T,
    pub angle: T,
    pub extrapolated: bool,
    pub trusted: bool,
}

/// `(phi_1, angle phi_2)` of a tilde point (whitened).
fn tilde_coordinates<T: Real>(dec: &KoopmanDecomposition<T>, x: &[T], decaying: usize, oscillatory: usize) -> Result<[T; 2]> {
    let phi = dec.eval_eigenfunctions(x, &[decaying, oscillatory])?;
    Ok([phi[0].re, phi[1].arg()])
}

impl<T: Real> FusionModel<T> {
    /// Builds the interpolant from stored parts.
    #[allow(clippy::too_many_arguments)]
    pub fn assemble(
        tilde: KoopmanDecomposition<T>,
        hat: KoopmanDecomposition<T>,
        whiten_tilde: WhitenTransform<T>,
        whiten_hat: WhitenTransform<T>,
        decaying: MatchedPair<T>,
        oscillatory: MatchedPair<T>,
        samples: IntrinsicSamples<T>,
        coordinate_scale: T,
        trust_threshold: T,
        fallback: FallbackPolicy,
    ) -> Result<Self> {
        for p in [&decaying, &oscillatory] {
            if p.alpha.is_none() {
                return Err(Error::InvalidParameter("matched pair lacks a registration constant".into()));
            }
            if p.index_tilde >= tilde.len() || p.index_hat >= hat.len() {
                return Err(Error::InvalidParameter("matched pair index out of range".into()));
            }
        }
        if samples.coords.dim() != 2 {
            return Err(Error::DimensionMismatch { expected: 2, found: samples.coords.dim() });
        }
        if whiten_tilde.dim() != tilde.dictionary_dim() || whiten_hat.dim() != hat.dictionary_dim() {
            return Err(Error::InvalidParameter("whitening and dictionary dimensions differ".into()));
        }
        if !(coordinate_scale > T::zero()) || !coordinate_scale.is_finite() {
            return Err(Error::InvalidParameter("coordinate scale must be positive".into()));
        }
        let scaled = PointSet::from_rows(2, samples.coords.rows().map(|c| [c[0] * coordinate_scale, c[1]]))?;
        let (pts, vals) = pad_angle_periodic(&scaled, &samples.values)?;
        let interpolant = LinearInterpolant::new(&pts, &vals, fallback)?;
        Ok(Self {
            tilde,
            hat,
            whiten_tilde,
            whiten_hat,
            decaying,
            oscillatory,
            samples,
            coordinate_scale,
            trust_threshold,
            interpolant,
        })
    }

    /// Source dimension.
    pub fn source_dim(&self) -> usize {
        self.whiten_hat.dim()
    }

    /// Target dimension.
    pub fn target_dim(&self) -> usize {
        self.samples.values.dim()
    }

    /// Intrinsic coordinates predicted for a raw source measurement.
    pub fn intrinsic(&self, x_hat: &[T]) -> Result<[T; 2]> {
        let z = self.whiten_hat.apply(x_hat)?;
        let phi = self
            .hat
            .eval_eigenfunctions(&z, &[self.decaying.index_hat, self.oscillatory.index_hat])?;
        let a1 = self.decaying.alpha.unwrap_or(Complex::new(T::one(), T::zero()));
        let a2 = self.oscillatory.alpha.unwrap_or(Complex::new(T::one(), T::zero()));
        Ok([(a1 * phi[0]).re, (a2 * phi[1]).arg()])
    }

    /// Estimates the target measurement for one raw source measurement.
    pub fn fuse(&self, x_hat: &[T]) -> Result<FusedEstimate<T>> {
        let [phi1, angle] = self.intrinsic(x_hat)?;
        let out = self.interpolant.interpolate([phi1 * self.coordinate_scale, angle])?;
        let trusted = !out.extrapolated && phi1.abs() <= self.trust_threshold;
        Ok(FusedEstimate { values: out.values, phi1, angle, extrapolated: out.extrapolated, trusted })
    }

    pub fn fuse_all(&self, x_hat: &PointSet<T>) -> Result<Vec<FusedEstimate<T>>> {
        x_hat.rows().map(|x| self.fuse(x)).collect()
    }
}

impl<T: Real> KoopmanDecomposition<T> {
    /// Dimension of the points the dictionary accepts.
    pub fn dictionary_dim(&self) -> usize {
        use crate::dictionary::Dictionary;
        self.dictionary.dim()
    }
}

/// Matches, registers and builds the inverse interpolant.
///
/// `training_tilde` and the joint sets are raw (unwhitened) measurements;
/// the whitening transforms are the ones used to fit each decomposition.
#[allow(clippy::too_many_arguments)]
pub fn build_fusion_model<T: Real>(
    tilde: KoopmanDecomposition<T>,
    hat: KoopmanDecomposition<T>,
    whiten_tilde: WhitenTransform<T>,
    whiten_hat: WhitenTransform<T>,
    joint_tilde: &PointSet<T>,
    joint_hat: &PointSet<T>,
    training_tilde: &PointSet<T>,
    config: &FusionConfig<T>,
) -> Result<FusionModel<T>> {
    let (dec_t, osc_t) = match config.tilde_indices {
        Some(ix) => ix,
        None => select_parameterization(&tilde)?,
    };
    let pairs = match_eigenfunctions(&tilde, &hat, &config.match_tolerance)?;
    let find = |k: usize| pairs.iter().find(|p| p.index_tilde == k).copied().ok_or(Error::NoMatch);
    let jt = whiten_tilde.apply_set(joint_tilde)?;
    let jh = whiten_hat.apply_set(joint_hat)?;
    let decaying = register_alpha(&find(dec_t)?, &tilde, &hat, &jt, &jh)?;
    let oscillatory = register_alpha(&find(osc_t)?, &tilde, &hat, &jt, &jh)?;

    let white = whiten_tilde.apply_set(training_tilde)?;
    let mut coords = PointSet::with_capacity(2, white.len());
    for x in white.rows() {
        coords.push(&tilde_coordinates(&tilde, x, dec_t, osc_t)?)?;
    }
    let scale = match config.coordinate_scale {
        Some(s) => s,
        None => {
            let (lo, hi) = coords
                .column(0)
                .fold((T::infinity(), T::neg_infinity()), |(lo, hi), v| (lo.min(v), hi.max(v)));
            let range = hi - lo;
            if range > T::zero() && range.is_finite() {
                (T::PI() + T::PI()) / range
            } else {
                T::one()
            }
        }
    };
    let samples = IntrinsicSamples { coords, values: training_tilde.clone() };
    FusionModel::assemble(
        tilde,
        hat,
        whiten_tilde,
        whiten_hat,
        decaying,
        oscillatory,
        samples,
        scale,
        config.trust_threshold,
        config.fallback,
    )
}
