mod common;

use common::{mat_vec, CylinderFlow, Mat3};
use koopman_fusion::dictionary::{AffineDictionary, AnyDictionary};
use koopman_fusion::edmd::KoopmanDecomposition;
use koopman_fusion::fusion::{match_eigenfunctions, registration_constant, select_parameterization, FusionConfig, MatchTolerance};
use koopman_fusion::measurements::MeasurementSeries;
use koopman_fusion::pipeline::{edmd_stage, fuse_build, DictionarySpec, EdmdOutput};
use koopman_fusion::Model;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TILDE_SENSOR: Mat3 = [[2.0, 0.0, 0.5], [0.0, 1.0, 0.0], [0.3, -0.4, 1.5]];
const HAT_SENSOR: Mat3 = [[0.5, 1.0, 0.0], [-1.0, 0.2, 0.3], [0.0, 0.0, 3.0]];

fn series(label: &str, rows: &[(usize, f64, [f64; 3])], sensor: &Mat3, dt: f64) -> MeasurementSeries<f64> {
    let mut s = MeasurementSeries::new(label, vec!["a1".into(), "a2".into(), "a3".into()], dt);
    for (k, t, x) in rows {
        s.push(*k, *t, &mat_vec(sensor, x)).unwrap();
    }
    s
}

struct Fixture {
    flow: CylinderFlow,
    tilde: MeasurementSeries<f64>,
    hat: MeasurementSeries<f64>,
    fit_tilde: EdmdOutput,
    fit_hat: EdmdOutput,
}

impl Fixture {
    fn new() -> Self {
        let flow = CylinderFlow::new();
        let rows = flow.trajectories(40, 60, 1);
        let tilde = series("tilde", &rows, &TILDE_SENSOR, flow.dt);
        let hat = series("hat", &rows, &HAT_SENSOR, flow.dt);
        let fit_tilde = edmd_stage(&tilde, &DictionarySpec::Affine, 1e-10).unwrap();
        let fit_hat = edmd_stage(&hat, &DictionarySpec::Affine, 1e-10).unwrap();
        Self { flow, tilde, hat, fit_tilde, fit_hat }
    }

    fn joint(&self, row: usize) -> (MeasurementSeries<f64>, MeasurementSeries<f64>) {
        let pick = |s: &MeasurementSeries<f64>| {
            let mut j = MeasurementSeries::new("joint", s.components.clone(), s.dt);
            j.push(0, 0.0, s.values.row(row)).unwrap();
            j
        };
        (pick(&self.tilde), pick(&self.hat))
    }

    /// Model translating hat measurements into tilde ones.
    fn forward(&self, config: &FusionConfig<f64>) -> Model {
        let (jt, jh) = self.joint(17);
        fuse_build(self.fit_tilde.clone(), self.fit_hat.clone(), &jt, &jh, &self.tilde, config).unwrap()
    }

    fn backward(&self) -> Model {
        let (jt, jh) = self.joint(17);
        fuse_build(self.fit_hat.clone(), self.fit_tilde.clone(), &jh, &jt, &self.hat, &FusionConfig::default()).unwrap()
    }

    /// States on the attracting cylinder that are not training samples.
    fn heldout(&self, n: usize) -> Vec<[f64; 3]> {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        (0..n)
            .map(|_| self.flow.state(rng.random_range(-0.5..0.5), rng.random_range(0.0..6.28), rng.random_range(0.0..20.0)))
            .collect()
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[test]
fn fixture_spectrum_is_recovered() {
    let fx = Fixture::new();
    for fit in [&fx.fit_tilde, &fx.fit_hat] {
        let d = &fit.decomposition;
        let (dec, osc) = select_parameterization(d).unwrap();
        assert!((d.lambda[dec].re + fx.flow.decay).abs() < 1e-9);
        assert!((d.lambda[osc].im - fx.flow.omega).abs() < 1e-9 && d.lambda[osc].re.abs() < 1e-9);
    }
}

#[test]
fn joint_point_reproduces_its_target() {
    let fx = Fixture::new();
    let model = fx.forward(&FusionConfig::default());
    let est = model.fuse(fx.hat.values.row(17)).unwrap();
    let target = fx.tilde.values.row(17);
    assert!(dist(&est.values, target) < 1e-8 * norm(target), "{:?} vs {:?}", est.values, target);
}

#[test]
fn fusion_onto_itself_is_the_identity() {
    let fx = Fixture::new();
    let (jt, _) = fx.joint(5);
    let model = fuse_build(fx.fit_tilde.clone(), fx.fit_tilde.clone(), &jt, &jt, &fx.tilde, &FusionConfig::default()).unwrap();
    for m in [&model.decaying, &model.oscillatory] {
        assert!((m.alpha.unwrap() - 1.0).norm() < 1e-12);
    }
    for x in fx.tilde.values.rows() {
        let est = model.fuse(x).unwrap();
        assert!(dist(&est.values, x) <= 1e-8 * norm(x));
    }
}

#[test]
fn heldout_states_are_translated_accurately() {
    let fx = Fixture::new();
    let model = fx.forward(&FusionConfig::default());
    for q in fx.heldout(200) {
        let est = model.fuse(&mat_vec(&HAT_SENSOR, &q)).unwrap();
        let truth = mat_vec(&TILDE_SENSOR, &q);
        assert!(est.trusted == (est.phi1.abs() <= model.trust_threshold && !est.extrapolated));
        assert!(dist(&est.values, &truth) < 0.02 * norm(&truth));
    }
}

#[test]
fn conjugate_oscillatory_tuple_gives_the_same_estimates() {
    let fx = Fixture::new();
    let (dec, osc) = select_parameterization(&fx.fit_tilde.decomposition).unwrap();
    let lambda = &fx.fit_tilde.decomposition.lambda;
    let conj = (0..lambda.len()).find(|&k| k != osc && (lambda[k] - lambda[osc].conj()).norm() < 1e-12).unwrap();
    let a = fx.forward(&FusionConfig { tilde_indices: Some((dec, osc)), ..FusionConfig::default() });
    let b = fx.forward(&FusionConfig { tilde_indices: Some((dec, conj)), ..FusionConfig::default() });
    for q in fx.heldout(100) {
        let x = mat_vec(&HAT_SENSOR, &q);
        let (ea, eb) = (a.fuse(&x).unwrap(), b.fuse(&x).unwrap());
        assert!((ea.angle + eb.angle).abs() < 1e-9 || (ea.angle.abs() - std::f64::consts::PI).abs() < 1e-9);
        assert!(dist(&ea.values, &eb.values) < 1e-8 * norm(&ea.values));
    }
}

#[test]
fn round_trip_stays_within_twice_the_one_way_error() {
    let fx = Fixture::new();
    let (fwd, bwd) = (fx.forward(&FusionConfig::default()), fx.backward());
    let (mut e_fwd, mut e_bwd, mut e_trip, mut scale_t, mut scale_h) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for q in fx.heldout(200) {
        let (xt, xh) = (mat_vec(&TILDE_SENSOR, &q), mat_vec(&HAT_SENSOR, &q));
        let there = fwd.fuse(&xh).unwrap().values;
        let back = bwd.fuse(&there).unwrap().values;
        e_fwd += dist(&there, &xt).powi(2);
        e_bwd += dist(&bwd.fuse(&xt).unwrap().values, &xh).powi(2);
        e_trip += dist(&back, &xh).powi(2);
        scale_t += norm(&xt).powi(2);
        scale_h += norm(&xh).powi(2);
    }
    let (e_fwd, e_bwd, e_trip) = ((e_fwd / scale_t).sqrt(), (e_bwd / scale_h).sqrt(), (e_trip / scale_h).sqrt());
    assert!(e_trip <= 2.0 * (e_fwd + e_bwd), "round trip {e_trip}, one way {e_fwd} and {e_bwd}");
}

#[test]
fn matching_is_symmetric_for_perturbed_spectra() {
    let fx = Fixture::new();
    let mut noisy = fx.hat.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for r in 0..noisy.len() {
        noisy.values.row_mut(r).iter_mut().for_each(|x| *x += 1e-3 * rng.random_range(-1.0..1.0));
    }
    let hat = edmd_stage(&noisy, &DictionarySpec::Affine, 1e-10).unwrap().decomposition;
    let tilde = &fx.fit_tilde.decomposition;
    let tol = MatchTolerance::default();
    let mut ab: Vec<_> = match_eigenfunctions(tilde, &hat, &tol).unwrap().iter().map(|p| (p.index_tilde, p.index_hat)).collect();
    let mut ba: Vec<_> = match_eigenfunctions(&hat, tilde, &tol).unwrap().iter().map(|p| (p.index_hat, p.index_tilde)).collect();
    ab.sort();
    ba.sort();
    assert_eq!(ab, ba);
    assert_eq!(ab.len(), 4);
}

fn spectrum(lambda: &[Complex64], dt: f64) -> KoopmanDecomposition<f64> {
    KoopmanDecomposition {
        mu: lambda.iter().map(|l| (l * dt).exp()).collect(),
        lambda: lambda.to_vec(),
        xi: vec![vec![Complex64::new(1.0, 0.0)]; lambda.len()],
        dictionary: AnyDictionary::Affine(AffineDictionary { dim: 0 }),
        dt,
        svd_rank_used: lambda.len(),
    }
}

#[test]
fn near_neutral_spectra_pair_up() {
    let a = spectrum(&[Complex64::new(0.0, 0.0), Complex64::new(0.0, 0.047), Complex64::new(0.0, -0.047)], 2.0);
    let b = spectrum(&[Complex64::new(1e-5, 0.0), Complex64::new(0.0, 0.0471), Complex64::new(0.0, -0.0471)], 2.0);
    let pairs = match_eigenfunctions(&a, &b, &MatchTolerance::default()).unwrap();
    let mut idx: Vec<_> = pairs.iter().map(|p| (p.index_tilde, p.index_hat)).collect();
    idx.sort();
    assert_eq!(idx, vec![(0, 0), (1, 1), (2, 2)]);
}

fn residual(t: &[Complex64], h: &[Complex64], alpha: Complex64) -> f64 {
    t.iter().zip(h).map(|(t, h)| (t - alpha * h).norm_sqr()).sum()
}

/// Zooming grid search over the complex plane. Candidates are compared by
/// their residual change relative to the current centre,
/// `|e + d|^2 - |e|^2 = 2 Re(conj(e) d) + |d|^2`, which keeps resolution
/// below `sqrt(eps)` where comparing raw residuals would stall.
fn grid_search(t: &[Complex64], h: &[Complex64]) -> Complex64 {
    let mut centre = Complex64::new(0.0, 0.0);
    let mut half = 10.0;
    for _ in 0..80 {
        let change = |a: Complex64| -> f64 {
            t.iter()
                .zip(h)
                .map(|(t, h)| {
                    let e = t - centre * h;
                    let d = (centre - a) * h;
                    2.0 * (e.conj() * d).re + d.norm_sqr()
                })
                .sum()
        };
        let mut best = (0.0, centre);
        for i in -10..=10 {
            for j in -10..=10 {
                let a = centre + Complex64::new(i as f64, j as f64) * (half / 10.0);
                let r = change(a);
                if r < best.0 {
                    best = (r, a);
                }
            }
        }
        centre = best.1;
        half /= 2.0;
    }
    centre
}

#[test]
fn least_squares_registration_matches_grid_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut z = || Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    for _ in 0..10 {
        let h: Vec<_> = (0..3).map(|_| z()).collect();
        let alpha_true = z() * 3.0;
        let t: Vec<_> = h.iter().map(|h| alpha_true * h + z() * 0.1).collect();
        let alpha = registration_constant(&t, &h, 0).unwrap();
        assert!((alpha - grid_search(&t, &h)).norm() < 1e-10);
        let best = residual(&t, &h, alpha);
        for d in [Complex64::new(1.01, 0.0), Complex64::new(0.99, 0.0), Complex64::new(1.0, 0.01), Complex64::new(1.0, -0.01)] {
            assert!(residual(&t, &h, alpha * d) > best);
        }
    }
}

#[test]
fn single_joint_point_uses_the_ratio() {
    let t = [Complex64::new(0.4, -1.1)];
    let h = [Complex64::new(2.0, 0.5)];
    let alpha = registration_constant(&t, &h, 0).unwrap();
    assert!((alpha - t[0] / h[0]).norm() < 1e-14);
}
