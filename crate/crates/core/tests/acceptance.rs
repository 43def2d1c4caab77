//! One pass/fail line per acceptance criterion.
//!
//! Criteria 1 to 5 run the full default experiment (seed 0) in a temporary
//! directory, which takes several minutes. The process exits nonzero on a
//! failure only when `ACCEPTANCE_STRICT=1` is set.

mod common;

use std::f64::consts::TAU;
use std::time::Instant;

use common::{linear_pairs, mat_vec, multiset_gap, random_invertible, stable_system, transform_pairs, CylinderFlow, Mat3};
use koopman_fusion::dictionary::{AffineDictionary, AnyDictionary, Dictionary, MlsDictionary};
use koopman_fusion::edmd::{fit, KoopmanDecomposition};
use koopman_fusion::fusion::{registration_constant, FusionConfig};
use koopman_fusion::interp::{FallbackPolicy, LinearInterpolant, Triangulation};
use koopman_fusion::measurements::MeasurementSeries;
use koopman_fusion::pipeline::{edmd_stage, fuse_build, reproduce, DictionarySpec, Reproduction, RunConfig, RunPaths};
use koopman_fusion::points::PointSet;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = (bool, String);

fn affine() -> AnyDictionary<f64> {
    AnyDictionary::Affine(AffineDictionary { dim: 3 })
}

fn find<'a>(d: &'a KoopmanDecomposition<f64>, keep: impl Fn(&Complex64) -> bool + 'a) -> impl Iterator<Item = Complex64> + 'a {
    d.lambda.iter().copied().filter(move |l| keep(l))
}

fn oscillatory(run: &Reproduction, secs: f64) -> Outcome {
    let ok = |l: &Complex64| l.re.abs() < 5e-3 && (l.im - 0.0473).abs() <= 0.003;
    let t: Vec<_> = find(&run.tilde, ok).collect();
    let h: Vec<_> = find(&run.hat, ok).collect();
    let pass = !t.is_empty() && !h.is_empty() && secs < 900.0;
    let show = |v: &[Complex64]| v.first().map_or("none".to_string(), |l| format!("{:.4e}{:+.4e}i", l.re, l.im));
    (pass, format!("tilde {}, hat {}, {secs:.0} s end to end", show(&t), show(&h)))
}

fn decaying(run: &Reproduction) -> Outcome {
    let ok = |l: &Complex64| l.im == 0.0 && (-2e-3..=-2e-4).contains(&l.re);
    let best = |d: &KoopmanDecomposition<f64>| find(d, ok).max_by(|a, b| a.re.total_cmp(&b.re));
    let selected = &run.reports[0].eigenvalues[0];
    let (t, h) = (best(&run.tilde), best(&run.hat));
    let show = |l: Option<Complex64>| l.map_or("none".to_string(), |l| format!("{:.4e}", l.re));
    (
        t.is_some() && h.is_some(),
        format!(
            "real tuples in band: tilde {}, hat {}; fused with {:.3e}{:+.3e}i / {:.3e}{:+.3e}i",
            show(t),
            show(h),
            selected.lambda_tilde.re,
            selected.lambda_tilde.im,
            selected.lambda_hat.re,
            selected.lambda_hat.im
        ),
    )
}

fn errors_line(e: &[f64]) -> String {
    e.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(" ")
}

fn short_window(run: &Reproduction) -> Outcome {
    let e = &run.reports[0].errors;
    (e.iter().all(|x| *x <= 0.12), format!("e = {} (limit 0.12)", errors_line(e)))
}

fn long_window(run: &Reproduction) -> Outcome {
    let (s, l) = (&run.reports[0].errors, &run.reports[1].errors);
    let pass = l.iter().zip(s).all(|(l, s)| *l <= 0.06 && l < s);
    (pass, format!("e = {} (limit 0.06, and below the short window)", errors_line(l)))
}

fn pca_energy(run: &Reproduction) -> Outcome {
    (run.pca_energy_fraction >= 0.95, format!("3 modes hold {:.4}", run.pca_energy_fraction))
}

fn linear_oracle() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut passed = 0;
    for seed in 0..100 {
        let (a, mut eig) = stable_system(seed);
        eig.push(Complex64::new(1.0, 0.0));
        let gap = match fit(&linear_pairs(&a, 40, seed), affine(), 1e-10) {
            Ok(dec) => multiset_gap(&dec.mu, &eig),
            Err(_) => f64::INFINITY,
        };
        worst = worst.max(gap);
        passed += usize::from(gap < 1e-8);
    }
    (passed == 100, format!("{passed}/100 seeds, worst gap {worst:.2e}"))
}

fn invariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for seed in 0..50 {
        let (a, _) = stable_system(seed);
        let pairs = linear_pairs(&a, 40, seed);
        let t = random_invertible(&mut rng);
        let gap = match (fit(&pairs, affine(), 1e-10), fit(&transform_pairs(&t, &pairs), affine(), 1e-10)) {
            (Ok(x), Ok(y)) => multiset_gap(&x.mu, &y.mu),
            _ => f64::INFINITY,
        };
        worst = worst.max(gap);
    }
    (worst < 1e-8, format!("50 transformed systems, worst gap {worst:.2e}"))
}

fn mls_reproduction() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut train = PointSet::new(3);
    for _ in 0..20_000 {
        let th = rng.random_range(0.0..TAU);
        let r = 1.0 + 0.3 * rng.random_range(-1.0f64..1.0).powi(3);
        train.push(&[5.0 * r * th.cos(), 2.0 * r * th.sin(), 0.2 * th.sin() + 0.05 * rng.random_range(-1.0..1.0)]).unwrap();
    }
    let dict = match MlsDictionary::from_points(&train, 25) {
        Ok(d) => d,
        Err(e) => return (false, e.to_string()),
    };
    let (mut unity, mut linear): (f64, f64) = (0.0, 0.0);
    for _ in 0..1000 {
        let base = train.row(rng.random_range(0..train.len()));
        let x: Vec<f64> = base.iter().map(|v| v + 0.02 * rng.random_range(-1.0..1.0)).collect();
        let psi = dict.evaluate(&x).unwrap();
        unity = unity.max((psi.iter().sum::<f64>() - 1.0).abs());
        for k in 0..3 {
            let lin: f64 = psi.iter().enumerate().map(|(n, p)| p * dict.nodes.centers.row(n)[k]).sum();
            linear = linear.max((lin - x[k]).abs());
        }
    }
    (unity < 1e-8 && linear < 1e-8, format!("1000 points, unity {unity:.2e}, linear {linear:.2e}"))
}

fn inside_circumcircle(a: [f64; 2], b: [f64; 2], c: [f64; 2], p: [f64; 2]) -> bool {
    let d = 2.0 * (a[0] * (b[1] - c[1]) + b[0] * (c[1] - a[1]) + c[0] * (a[1] - b[1]));
    let (sa, sb, sc) = (a[0] * a[0] + a[1] * a[1], b[0] * b[0] + b[1] * b[1], c[0] * c[0] + c[1] * c[1]);
    let ux = (sa * (b[1] - c[1]) + sb * (c[1] - a[1]) + sc * (a[1] - b[1])) / d;
    let uy = (sa * (c[0] - b[0]) + sb * (a[0] - c[0]) + sc * (b[0] - a[0])) / d;
    let r2 = (a[0] - ux).powi(2) + (a[1] - uy).powi(2);
    (p[0] - ux).powi(2) + (p[1] - uy).powi(2) < r2 * (1.0 - 1e-10)
}

fn interpolation() -> Outcome {
    let f = |p: &[f64]| 2.0 * p[0] - 3.0 * p[1] + 1.0;
    let (mut vertex_ok, mut worst, mut delaunay_ok) = (true, 0.0f64, true);
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = PointSet::from_rows(2, (0..200).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])).unwrap();
        let vals = PointSet::from_rows(1, pts.rows().map(|p| [f(p)])).unwrap();
        let itp = match LinearInterpolant::new(&pts, &vals, FallbackPolicy::Error) {
            Ok(i) => i,
            Err(e) => return (false, e.to_string()),
        };
        for (p, v) in pts.rows().zip(vals.rows()) {
            vertex_ok &= itp.interpolate([p[0], p[1]]).map(|o| o.values[0] == v[0]).unwrap_or(false);
        }
        for _ in 0..500 {
            let q = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            if let Ok(o) = itp.interpolate(q) {
                worst = worst.max((o.values[0] - f(&q)).abs());
            }
        }
        let (tri, _) = Triangulation::new(&pts).unwrap();
        for t in 0..tri.len() {
            let [a, b, c] = tri.triangles[t].map(|v| tri.vertex(v));
            delaunay_ok &= (0..tri.vertices.len())
                .filter(|v| !tri.triangles[t].contains(v))
                .all(|v| !inside_circumcircle(a, b, c, tri.vertex(v)));
        }
    }
    (
        vertex_ok && worst < 1e-12 && delaunay_ok,
        format!("vertices exact: {vertex_ok}, linear error {worst:.2e}, empty circumcircles: {delaunay_ok}"),
    )
}

fn grid_search(t: &[Complex64], h: &[Complex64]) -> Complex64 {
    let mut centre = Complex64::new(0.0, 0.0);
    let mut half = 10.0;
    for _ in 0..80 {
        // residual change relative to the centre, exact below sqrt(eps)
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

const TILDE_SENSOR: Mat3 = [[2.0, 0.0, 0.5], [0.0, 1.0, 0.0], [0.3, -0.4, 1.5]];
const HAT_SENSOR: Mat3 = [[0.5, 1.0, 0.0], [-1.0, 0.2, 0.3], [0.0, 0.0, 3.0]];

fn joint_point_error() -> Result<f64, koopman_fusion::Error> {
    let flow = CylinderFlow::new();
    let rows = flow.trajectories(40, 60, 1);
    let series = |sensor: &Mat3| {
        let mut s = MeasurementSeries::new("s", vec!["a1".into(), "a2".into(), "a3".into()], flow.dt);
        for (k, t, x) in &rows {
            s.push(*k, *t, &mat_vec(sensor, x)).unwrap();
        }
        s
    };
    let (tilde, hat) = (series(&TILDE_SENSOR), series(&HAT_SENSOR));
    let pick = |s: &MeasurementSeries<f64>| {
        let mut j = MeasurementSeries::new("joint", s.components.clone(), s.dt);
        j.push(0, 0.0, s.values.row(17)).unwrap();
        j
    };
    let model = fuse_build(
        edmd_stage(&tilde, &DictionarySpec::Affine, 1e-10)?,
        edmd_stage(&hat, &DictionarySpec::Affine, 1e-10)?,
        &pick(&tilde),
        &pick(&hat),
        &tilde,
        &FusionConfig::default(),
    )?;
    let est = model.fuse(hat.values.row(17))?;
    let target = tilde.values.row(17);
    let dist = est.values.iter().zip(target).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    Ok(dist / target.iter().map(|x| x * x).sum::<f64>().sqrt())
}

fn registration() -> Outcome {
    let (t1, h1) = ([Complex64::new(0.4, -1.1)], [Complex64::new(2.0, 0.5)]);
    let ratio = registration_constant(&t1, &h1, 0).map_or(f64::INFINITY, |a| (a - t1[0] / h1[0]).norm());

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut z = || Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let mut lsq: f64 = 0.0;
    for _ in 0..10 {
        let h: Vec<_> = (0..3).map(|_| z()).collect();
        let alpha = z() * 3.0;
        let t: Vec<_> = h.iter().map(|h| alpha * h + z() * 0.1).collect();
        let gap = registration_constant(&t, &h, 0).map_or(f64::INFINITY, |a| (a - grid_search(&t, &h)).norm());
        lsq = lsq.max(gap);
    }
    let joint = joint_point_error().unwrap_or(f64::INFINITY);
    (
        ratio < 1e-10 && lsq < 1e-10 && joint < 1e-8,
        format!("ratio {ratio:.1e}, least squares vs grid {lsq:.1e}, joint point relative error {joint:.1e}"),
    )
}

fn main() {
    let mut results: Vec<(&str, Outcome)> = Vec::new();

    let dir = tempfile::tempdir().expect("temporary directory");
    let config = RunConfig { seed: 0, paths: RunPaths::under(dir.path()), ..RunConfig::default() };
    let start = Instant::now();
    match reproduce(&config) {
        Ok(run) => {
            let secs = start.elapsed().as_secs_f64();
            results.push(("oscillatory eigenvalue", oscillatory(&run, secs)));
            results.push(("decaying eigenvalue", decaying(&run)));
            results.push(("reconstruction error, t in [0, 400]", short_window(&run)));
            results.push(("reconstruction error, t in [0, 4000]", long_window(&run)));
            results.push(("pca energy", pca_energy(&run)));
        }
        Err(e) => {
            for name in ["oscillatory eigenvalue", "decaying eigenvalue", "reconstruction error, t in [0, 400]"] {
                results.push((name, (false, format!("reproduction failed: {e}"))));
            }
            results.push(("reconstruction error, t in [0, 4000]", (false, "reproduction failed".into())));
            results.push(("pca energy", (false, "reproduction failed".into())));
        }
    }
    results.push(("linear-system oracle", linear_oracle()));
    results.push(("invariance under linear coordinates", invariance()));
    results.push(("mls reproduction", mls_reproduction()));
    results.push(("interpolation suite", interpolation()));
    results.push(("registration", registration()));

    let mut failed = 0;
    for (i, (name, (pass, detail))) in results.iter().enumerate() {
        println!("{:>2} {} {name}: {detail}", i + 1, if *pass { "PASS" } else { "FAIL" });
        failed += usize::from(!pass);
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 && std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
