#![allow(dead_code)]

use koopman_fusion::measurements::SnapshotPairSet;
use koopman_fusion::points::PointSet;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Mat3 = [[f64; 3]; 3];

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

pub fn mat_vec(a: &Mat3, x: &[f64]) -> [f64; 3] {
    [0, 1, 2].map(|i| (0..3).map(|k| a[i][k] * x[k]).sum())
}

fn det(a: &Mat3) -> f64 {
    a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
}

pub fn inverse(a: &Mat3) -> Mat3 {
    let d = det(a);
    let mut inv = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            // cofactor of (j, i)
            let (r0, r1) = ([1, 0, 0][j], [2, 2, 1][j]);
            let (c0, c1) = ([1, 0, 0][i], [2, 2, 1][i]);
            let minor = a[r0][c0] * a[r1][c1] - a[r0][c1] * a[r1][c0];
            inv[i][j] = if (i + j) % 2 == 0 { minor / d } else { -minor / d };
        }
    }
    inv
}

/// Random matrix with condition number kept moderate by rejecting near
/// singular draws.
pub fn random_invertible(rng: &mut ChaCha8Rng) -> Mat3 {
    loop {
        let m: Mat3 = [[0; 3]; 3].map(|r| r.map(|_: i32| rng.random_range(-1.0..1.0)));
        if det(&m).abs() > 0.2 {
            return m;
        }
    }
}

/// A stable 3x3 map `V B V^{-1}` with known spectrum: half the seeds give a
/// real eigenvalue plus a complex pair, the rest three real ones.
pub fn stable_system(seed: u64) -> (Mat3, Vec<Complex64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (b, eig) = if seed % 2 == 0 {
        let r = rng.random_range(-0.95..0.95);
        let m = rng.random_range(0.2..0.95);
        let th = rng.random_range(0.1..3.0);
        let (a, c) = (m * f64::cos(th), m * f64::sin(th));
        (
            [[r, 0.0, 0.0], [0.0, a, -c], [0.0, c, a]],
            vec![Complex64::new(r, 0.0), Complex64::new(a, c), Complex64::new(a, -c)],
        )
    } else {
        let d = [0; 3].map(|_| rng.random_range(0.05..0.95) * if rng.random_bool(0.3) { -1.0 } else { 1.0 });
        ([[d[0], 0.0, 0.0], [0.0, d[1], 0.0], [0.0, 0.0, d[2]]], d.iter().map(|&x| Complex64::new(x, 0.0)).collect())
    };
    let v = random_invertible(&mut rng);
    (mat_mul(&mat_mul(&v, &b), &inverse(&v)), eig)
}

/// `n` random states and their images under `a`.
pub fn linear_pairs(a: &Mat3, n: usize, seed: u64) -> SnapshotPairSet<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut x = PointSet::new(3);
    let mut y = PointSet::new(3);
    for _ in 0..n {
        let p = [0; 3].map(|_| rng.random_range(-1.0..1.0));
        x.push(&p).unwrap();
        y.push(&mat_vec(a, &p)).unwrap();
    }
    SnapshotPairSet::new(x, y, 1.0).unwrap()
}

pub fn transform_pairs(t: &Mat3, pairs: &SnapshotPairSet<f64>) -> SnapshotPairSet<f64> {
    let map = |s: &PointSet<f64>| PointSet::from_rows(3, s.rows().map(|r| mat_vec(t, r))).unwrap();
    SnapshotPairSet::new(map(&pairs.x), map(&pairs.y), pairs.dt).unwrap()
}

/// Largest distance between two eigenvalue multisets paired greedily by
/// nearest neighbour; infinite when sizes differ.
pub fn multiset_gap(a: &[Complex64], b: &[Complex64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    let mut used = vec![false; b.len()];
    let mut worst: f64 = 0.0;
    for z in a {
        let (j, d) = b
            .iter()
            .enumerate()
            .filter(|(j, _)| !used[*j])
            .map(|(j, w)| (j, (z - w).norm()))
            .min_by(|x, y| x.1.total_cmp(&y.1))
            .unwrap();
        used[j] = true;
        worst = worst.max(d);
    }
    worst
}

/// Linear flow with one decaying direction and one neutral rotation,
/// sampled at interval `dt`: in modal coordinates `q = (r, c, s)`,
/// `r' = -decay r` and `(c, s)` rotates at `omega`. Starting states lie on
/// the cylinder `c^2 + s^2 = 1`, so the phase and `r` determine the state.
pub struct CylinderFlow {
    pub decay: f64,
    pub omega: f64,
    pub dt: f64,
    /// Modal to physical coordinates of the hidden state.
    pub modal: Mat3,
}

impl CylinderFlow {
    pub fn new() -> Self {
        Self {
            decay: 0.05,
            omega: 0.3,
            dt: 0.5,
            modal: [[1.0, 0.4, -0.2], [0.3, 1.0, 0.5], [-0.1, 0.2, 1.0]],
        }
    }

    pub fn modal_state(&self, r0: f64, theta0: f64, t: f64) -> [f64; 3] {
        let th = theta0 + self.omega * t;
        [r0 * (-self.decay * t).exp(), th.cos(), th.sin()]
    }

    pub fn state(&self, r0: f64, theta0: f64, t: f64) -> [f64; 3] {
        mat_vec(&self.modal, &self.modal_state(r0, theta0, t))
    }

    /// Trajectories with random `r0` in `[-1, 1]` and phase, `steps + 1`
    /// samples each, as rows of `(trajectory, t, state)`.
    pub fn trajectories(&self, n: usize, steps: usize, seed: u64) -> Vec<(usize, f64, [f64; 3])> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        for k in 0..n {
            let r0 = rng.random_range(-1.0..1.0);
            let th = rng.random_range(0.0..std::f64::consts::TAU);
            for s in 0..=steps {
                let t = s as f64 * self.dt;
                rows.push((k, t, self.state(r0, th, t)));
            }
        }
        rows
    }
}
