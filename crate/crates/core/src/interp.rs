//! Piecewise-linear interpolation of scattered planar data on a Delaunay
//! triangulation.

use std::sync::OnceLock;

use robust::{incircle, orient2d, Coord};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::points::PointSet;
use crate::scalar::Real;

/// Points closer than this (per coordinate) are merged before triangulating.
pub const DUPLICATE_TOL: f64 = 1e-12;

const NONE: usize = usize::MAX;
const SUPER_SCALE: f64 = 1e5;

#[inline]
fn coord(p: [f64; 2]) -> Coord<f64> {
    Coord { x: p[0], y: p[1] }
}

#[inline]
fn orient(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    orient2d(coord(a), coord(b), coord(c))
}

/// Delaunay triangulation. Triangles are counter-clockwise; `neighbors[t][i]`
/// is the triangle across the edge opposite `triangles[t][i]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct Triangulation<T> {
    pub vertices: PointSet<T>,
    pub triangles: Vec<[usize; 3]>,
    pub neighbors: Vec<[Option<usize>; 3]>,
}

#[derive(Clone, Copy)]
struct Tri {
    v: [usize; 3],
    n: [usize; 3],
    alive: bool,
}

/// Indices of the distinct points and, for every input point, the distinct
/// point it was merged into.
fn deduplicate(pts: &[[f64; 2]]) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..pts.len()).collect();
    order.sort_by(|&a, &b| pts[a][0].total_cmp(&pts[b][0]).then(pts[a][1].total_cmp(&pts[b][1])).then(a.cmp(&b)));
    let mut rep: Vec<usize> = (0..pts.len()).collect();
    for (pos, &i) in order.iter().enumerate() {
        if rep[i] != i {
            continue;
        }
        for &j in &order[pos + 1..] {
            if pts[j][0] - pts[i][0] > DUPLICATE_TOL {
                break;
            }
            if rep[j] == j && (pts[j][1] - pts[i][1]).abs() <= DUPLICATE_TOL {
                rep[j] = i;
            }
        }
    }
    // Representative is the earliest input index of each cluster.
    let mut first = vec![NONE; pts.len()];
    for i in 0..pts.len() {
        let r = rep[i];
        if first[r] == NONE || i < first[r] {
            first[r] = i;
        }
    }
    let mut unique = Vec::new();
    let mut slot = vec![NONE; pts.len()];
    for i in 0..pts.len() {
        let r = first[rep[i]];
        if slot[r] == NONE {
            slot[r] = unique.len();
            unique.push(r);
        }
    }
    let map = (0..pts.len()).map(|i| slot[first[rep[i]]]).collect();
    (unique, map)
}

struct Builder {
    pts: Vec<[f64; 2]>,
    tris: Vec<Tri>,
    free: Vec<usize>,
    last: usize,
}

impl Builder {
    fn contains_in_circle(&self, t: usize, p: [f64; 2]) -> bool {
        let [a, b, c] = self.tris[t].v;
        incircle(coord(self.pts[a]), coord(self.pts[b]), coord(self.pts[c]), coord(p)) > 0.0
    }

    fn alloc(&mut self, tri: Tri) -> usize {
        if let Some(i) = self.free.pop() {
            self.tris[i] = tri;
            i
        } else {
            self.tris.push(tri);
            self.tris.len() - 1
        }
    }

    /// Triangle containing `p` (on its boundary allowed).
    fn locate(&self, p: [f64; 2]) -> usize {
        let mut t = self.last;
        let limit = 4 * self.tris.len() + 16;
        'walk: for _ in 0..limit {
            let tri = &self.tris[t];
            for i in 0..3 {
                let a = self.pts[tri.v[(i + 1) % 3]];
                let b = self.pts[tri.v[(i + 2) % 3]];
                if orient(a, b, p) < 0.0 && tri.n[i] != NONE {
                    t = tri.n[i];
                    continue 'walk;
                }
            }
            return t;
        }
        // Walk failed to settle; scan everything.
        (0..self.tris.len())
            .find(|&t| {
                let tri = &self.tris[t];
                tri.alive
                    && (0..3).all(|i| orient(self.pts[tri.v[(i + 1) % 3]], self.pts[tri.v[(i + 2) % 3]], p) >= 0.0)
            })
            .unwrap_or(self.last)
    }

    fn insert(&mut self, pi: usize) {
        let p = self.pts[pi];
        let start = self.locate(p);
        let mut bad = vec![start];
        let mut in_bad = std::collections::HashSet::from([start]);
        let mut k = 0;
        while k < bad.len() {
            let t = bad[k];
            k += 1;
            for &nb in &self.tris[t].n {
                if nb != NONE && !in_bad.contains(&nb) && self.contains_in_circle(nb, p) {
                    in_bad.insert(nb);
                    bad.push(nb);
                }
            }
        }
        // Boundary edges (a, b) in counter-clockwise order plus the outside
        // neighbour.
        let mut boundary: Vec<(usize, usize, usize)> = Vec::new();
        for &t in &bad {
            let tri = self.tris[t];
            for i in 0..3 {
                let nb = tri.n[i];
                if nb == NONE || !in_bad.contains(&nb) {
                    boundary.push((tri.v[(i + 1) % 3], tri.v[(i + 2) % 3], nb));
                }
            }
        }
        for &t in &bad {
            self.tris[t].alive = false;
            self.free.push(t);
        }
        let mut created = Vec::with_capacity(boundary.len());
        for &(a, b, outer) in &boundary {
            let t = self.alloc(Tri { v: [a, b, pi], n: [NONE, NONE, outer], alive: true });
            if outer != NONE {
                let o = &mut self.tris[outer];
                for i in 0..3 {
                    let (x, y) = (o.v[(i + 1) % 3], o.v[(i + 2) % 3]);
                    if x == b && y == a {
                        o.n[i] = t;
                    }
                }
            }
            created.push(t);
        }
        for (k, &(a, b, _)) in boundary.iter().enumerate() {
            let t = created[k];
            // Across (b, p): the new triangle whose edge starts at b.
            let after = boundary.iter().position(|e| e.0 == b).map(|j| created[j]).unwrap_or(NONE);
            // Across (p, a): the new triangle whose edge ends at a.
            let before = boundary.iter().position(|e| e.1 == a).map(|j| created[j]).unwrap_or(NONE);
            self.tris[t].n[0] = after;
            self.tris[t].n[1] = before;
        }
        self.last = created[0];
    }
}

impl<T: Real> Triangulation<T> {
    /// Delaunay triangulation of `points` (dimension 2) by Bowyer-Watson
    /// insertion in input order. Also returns, for each input point, the
    /// vertex it maps to after duplicate merging.
    pub fn new(points: &PointSet<T>) -> Result<(Self, Vec<usize>)> {
        if points.dim() != 2 {
            return Err(Error::DimensionMismatch { expected: 2, found: points.dim() });
        }
        let raw: Vec<[f64; 2]> = points.rows().map(|r| [r[0].to_f64_lossy(), r[1].to_f64_lossy()]).collect();
        if raw.iter().any(|p| !p[0].is_finite() || !p[1].is_finite()) {
            return Err(Error::InvalidParameter("triangulation points must be finite".into()));
        }
        let (unique, map) = deduplicate(&raw);
        if unique.len() < 3 {
            return Err(Error::Collinear);
        }
        let mut pts: Vec<[f64; 2]> = unique.iter().map(|&i| raw[i]).collect();
        let n = pts.len();
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for p in &pts {
            for k in 0..2 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        let c = [(lo[0] + hi[0]) * 0.5, (lo[1] + hi[1]) * 0.5];
        let r = SUPER_SCALE * (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-300);
        pts.push([c[0] - 2.0 * r, c[1] - r]);
        pts.push([c[0] + 2.0 * r, c[1] - r]);
        pts.push([c[0], c[1] + 2.0 * r]);
        let mut b = Builder {
            pts,
            tris: vec![Tri { v: [n, n + 1, n + 2], n: [NONE; 3], alive: true }],
            free: Vec::new(),
            last: 0,
        };
        for i in 0..n {
            b.insert(i);
        }

        let mut remap = vec![NONE; b.tris.len()];
        let mut kept = Vec::new();
        for (i, t) in b.tris.iter().enumerate() {
            if t.alive && t.v.iter().all(|&v| v < n) {
                remap[i] = kept.len();
                kept.push(i);
            }
        }
        if kept.is_empty() {
            return Err(Error::Collinear);
        }
        let triangles = kept.iter().map(|&i| b.tris[i].v).collect();
        let neighbors = kept
            .iter()
            .map(|&i| b.tris[i].n.map(|nb| if nb == NONE || remap[nb] == NONE { None } else { Some(remap[nb]) }))
            .collect();
        let vertices = PointSet::from_rows(2, unique.iter().map(|&i| points.row(i)))?;
        Ok((Self { vertices, triangles, neighbors }, map))
    }

    pub fn len(&self) -> usize {
        self.triangles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn vertex(&self, i: usize) -> [f64; 2] {
        let r = self.vertices.row(i);
        [r[0].to_f64_lossy(), r[1].to_f64_lossy()]
    }

    /// Signed area of triangle `t`.
    pub fn area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t];
        0.5 * orient(self.vertex(a), self.vertex(b), self.vertex(c))
    }

    /// Barycentric weights of `p` in triangle `t`.
    pub fn barycentric(&self, t: usize, p: [f64; 2]) -> [f64; 3] {
        let [a, b, c] = self.triangles[t].map(|v| self.vertex(v));
        let total = orient(a, b, c);
        [orient(b, c, p) / total, orient(c, a, p) / total, orient(a, b, p) / total]
    }

    /// Visibility walk from `start`: the containing triangle, or `None` when
    /// the walk leaves the convex hull.
    pub fn locate_from(&self, start: usize, p: [f64; 2]) -> Option<usize> {
        let mut t = start;
        'walk: for _ in 0..4 * self.len() + 16 {
            for i in 0..3 {
                let v = self.triangles[t];
                if orient(self.vertex(v[(i + 1) % 3]), self.vertex(v[(i + 2) % 3]), p) < 0.0 {
                    match self.neighbors[t][i] {
                        Some(nb) => {
                            t = nb;
                            continue 'walk;
                        }
                        None => return None,
                    }
                }
            }
            return Some(t);
        }
        self.locate_brute(p)
    }

    pub fn locate_brute(&self, p: [f64; 2]) -> Option<usize> {
        (0..self.len()).find(|&t| {
            let v = self.triangles[t];
            (0..3).all(|i| orient(self.vertex(v[(i + 1) % 3]), self.vertex(v[(i + 2) % 3]), p) >= 0.0)
        })
    }
}

/// Behaviour for queries outside the convex hull.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FallbackPolicy {
    /// Value of the nearest vertex, flagged as extrapolated.
    #[default]
    NearestVertex,
    Error,
}

/// Interpolated value and whether it was extrapolated.
#[derive(Clone, Debug, PartialEq)]
pub struct Interpolated<T> {
    pub values: Vec<T>,
    pub extrapolated: bool,
}

/// Uniform bucket grid of vertices: start triangles for walks and nearest
/// vertex lookup.
#[derive(Clone, Debug)]
struct VertexGrid {
    lo: [f64; 2],
    cell: [f64; 2],
    shape: [usize; 2],
    buckets: Vec<Vec<usize>>,
    incident: Vec<usize>,
}

impl VertexGrid {
    fn build<T: Real>(tri: &Triangulation<T>) -> Self {
        let n = tri.vertices.len();
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for i in 0..n {
            let p = tri.vertex(i);
            for k in 0..2 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        let side = ((n as f64 / 2.0).sqrt().ceil() as usize).clamp(1, 1024);
        let shape = [side, side];
        let cell = [0, 1].map(|k| {
            let c = (hi[k] - lo[k]) / side as f64;
            if c > 0.0 { c } else { 1.0 }
        });
        let mut grid = Self { lo, cell, shape, buckets: vec![Vec::new(); side * side], incident: vec![0; n] };
        for i in 0..n {
            let c = grid.cell_of(tri.vertex(i));
            grid.buckets[c[1] * side + c[0]].push(i);
        }
        for (t, v) in tri.triangles.iter().enumerate() {
            for &i in v {
                grid.incident[i] = t;
            }
        }
        grid
    }

    fn cell_of(&self, p: [f64; 2]) -> [usize; 2] {
        [0, 1].map(|k| {
            let f = ((p[k] - self.lo[k]) / self.cell[k]).floor();
            if f.is_nan() || f < 0.0 { 0 } else { (f as usize).min(self.shape[k] - 1) }
        })
    }

    /// Nearest vertex by expanding rings of cells; ties go to the lower index.
    fn nearest<T: Real>(&self, tri: &Triangulation<T>, p: [f64; 2]) -> usize {
        let c = self.cell_of(p);
        let mut best = (f64::INFINITY, NONE);
        let max_ring = self.shape[0].max(self.shape[1]);
        for ring in 0..=max_ring {
            let (x0, x1) = (c[0].saturating_sub(ring), (c[0] + ring).min(self.shape[0] - 1));
            let (y0, y1) = (c[1].saturating_sub(ring), (c[1] + ring).min(self.shape[1] - 1));
            for y in y0..=y1 {
                for x in x0..=x1 {
                    if x.abs_diff(c[0]) != ring && y.abs_diff(c[1]) != ring {
                        continue;
                    }
                    for &i in &self.buckets[y * self.shape[0] + x] {
                        let v = tri.vertex(i);
                        let d = (v[0] - p[0]).powi(2) + (v[1] - p[1]).powi(2);
                        if d < best.0 || (d == best.0 && i < best.1) {
                            best = (d, i);
                        }
                    }
                }
            }
            if best.1 != NONE {
                // Any closer vertex lies within the cells reachable at the
                // current best distance.
                let reach = [0, 1].map(|k| (best.0.sqrt() / self.cell[k]).ceil() as usize);
                if ring >= reach[0].max(reach[1]) + 1 {
                    break;
                }
            }
        }
        best.1
    }
}

/// Vector-valued piecewise-linear interpolant over a triangulation.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct LinearInterpolant<T: Real> {
    pub triangulation: Triangulation<T>,
    /// One row of output components per vertex.
    pub values: PointSet<T>,
    pub fallback: FallbackPolicy,
    #[serde(skip)]
    grid: OnceLock<VertexGrid>,
}

impl<T: Real> LinearInterpolant<T> {
    /// Triangulates `points`; merged duplicates keep the last value given.
    pub fn new(points: &PointSet<T>, values: &PointSet<T>, fallback: FallbackPolicy) -> Result<Self> {
        if points.len() != values.len() {
            return Err(Error::DimensionMismatch { expected: points.len(), found: values.len() });
        }
        if values.as_flat().iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("interpolation values must be finite".into()));
        }
        let (triangulation, map) = Triangulation::new(points)?;
        let mut vals = PointSet::from_flat(values.dim(), vec![T::zero(); triangulation.vertices.len() * values.dim()])?;
        for (i, &v) in map.iter().enumerate() {
            vals.row_mut(v).copy_from_slice(values.row(i));
        }
        Ok(Self { triangulation, values: vals, fallback, grid: OnceLock::new() })
    }

    pub fn components(&self) -> usize {
        self.values.dim()
    }

    fn grid(&self) -> &VertexGrid {
        self.grid.get_or_init(|| VertexGrid::build(&self.triangulation))
    }

    pub fn interpolate(&self, query: [T; 2]) -> Result<Interpolated<T>> {
        let p = [query[0].to_f64_lossy(), query[1].to_f64_lossy()];
        if !p[0].is_finite() || !p[1].is_finite() {
            return Err(Error::InvalidParameter("interpolation query must be finite".into()));
        }
        let grid = self.grid();
        let near = grid.nearest(&self.triangulation, p);
        let tri = &self.triangulation;
        match tri.locate_from(grid.incident[near], p) {
            Some(t) => {
                let w = tri.barycentric(t, p);
                let mut out = vec![T::zero(); self.components()];
                for (k, &v) in tri.triangles[t].iter().enumerate() {
                    let wk = T::lit(w[k]);
                    for (o, x) in out.iter_mut().zip(self.values.row(v)) {
                        *o = *o + wk * *x;
                    }
                }
                // Exact at vertices.
                if let Some(&v) = tri.triangles[t].iter().find(|&&v| tri.vertex(v) == p) {
                    out.copy_from_slice(self.values.row(v));
                }
                Ok(Interpolated { values: out, extrapolated: false })
            }
            None => match self.fallback {
                FallbackPolicy::NearestVertex => {
                    Ok(Interpolated { values: self.values.row(near).to_vec(), extrapolated: true })
                }
                FallbackPolicy::Error => Err(Error::OutsideHull(p[0], p[1])),
            },
        }
    }
}

/// Appends copies of every `(magnitude, angle)` point shifted by `-2 pi` and
/// `+2 pi` in angle, with identical values: `n` points become `3n`.
pub fn pad_angle_periodic<T: Real>(points: &PointSet<T>, values: &PointSet<T>) -> Result<(PointSet<T>, PointSet<T>)> {
    if points.dim() != 2 {
        return Err(Error::DimensionMismatch { expected: 2, found: points.dim() });
    }
    if points.len() != values.len() {
        return Err(Error::DimensionMismatch { expected: points.len(), found: values.len() });
    }
    let two_pi = T::PI() + T::PI();
    let mut out_p = PointSet::with_capacity(2, 3 * points.len());
    let mut out_v = PointSet::with_capacity(values.dim(), 3 * values.len());
    for shift in [T::zero(), -two_pi, two_pi] {
        for (p, v) in points.rows().zip(values.rows()) {
            out_p.push(&[p[0], p[1] + shift])?;
            out_v.push(v)?;
        }
    }
    Ok((out_p, out_v))
}
