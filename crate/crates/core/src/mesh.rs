//! Conforming triangulations: generators for the unit square and the
//! offset-circle annulus, an ASCII file format, and basic metrics.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub type Point = [f64; 2];

/// Marker of the unit-square boundary and of the annulus outer circle.
pub const MARKER_OUTER: u32 = 1;
/// Marker of the annulus inner circle.
pub const MARKER_INNER: u32 = 2;

pub const ANNULUS_OUTER_RADIUS: f64 = 1.0;
pub const ANNULUS_INNER_RADIUS: f64 = 0.1;
pub const ANNULUS_INNER_CENTER: Point = [0.5, 0.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundaryEdge {
    pub vertices: [usize; 2],
    pub marker: u32,
}

/// A validated triangulation. Construction checks orientation and
/// edge-to-edge conformity; the edge table is built once and shared by the
/// finite element spaces.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    vertices: Vec<Point>,
    triangles: Vec<[usize; 3]>,
    boundary: Vec<BoundaryEdge>,
    /// Unique edges as (min, max) vertex pairs in lexicographic order.
    edges: Vec<[usize; 2]>,
    /// Edge indices of local edges (0,1), (1,2), (2,0) for each triangle.
    triangle_edges: Vec<[usize; 3]>,
    /// Boundary marker per edge (0 for interior edges).
    edge_markers: Vec<u32>,
    h_max: f64,
    min_angle: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeshStats {
    pub h_max: f64,
    pub min_angle: f64,
    pub n_vertices: usize,
    pub n_triangles: usize,
    pub n_boundary_edges: usize,
}

fn signed_area(a: Point, b: Point, c: Point) -> f64 {
    0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]))
}

fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn sorted_pair(a: usize, b: usize) -> [usize; 2] {
    if a < b {
        [a, b]
    } else {
        [b, a]
    }
}

impl Mesh {
    pub fn new(
        vertices: Vec<Point>,
        triangles: Vec<[usize; 3]>,
        boundary: Vec<BoundaryEdge>,
    ) -> Result<Self> {
        let nv = vertices.len();
        if triangles.is_empty() {
            return Err(Error::Validation("mesh has no triangles".into()));
        }
        for (t, tri) in triangles.iter().enumerate() {
            if let Some(&bad) = tri.iter().find(|&&v| v >= nv) {
                return Err(Error::Validation(format!(
                    "triangle {t} references vertex {bad} (only {nv} vertices)"
                )));
            }
            let area = signed_area(vertices[tri[0]], vertices[tri[1]], vertices[tri[2]]);
            if !(area > 0.0) {
                return Err(Error::MeshQuality { triangle: t, area });
            }
        }

        let mut edge_use: HashMap<[usize; 2], usize> = HashMap::new();
        for tri in &triangles {
            for k in 0..3 {
                *edge_use
                    .entry(sorted_pair(tri[k], tri[(k + 1) % 3]))
                    .or_default() += 1;
            }
        }
        let mut edges: Vec<[usize; 2]> = edge_use.keys().copied().collect();
        edges.sort_unstable();
        let index: HashMap<[usize; 2], usize> =
            edges.iter().enumerate().map(|(i, &e)| (e, i)).collect();

        let mut edge_markers = vec![0u32; edges.len()];
        for be in &boundary {
            let [a, b] = be.vertices;
            if a >= nv || b >= nv {
                return Err(Error::Validation(format!(
                    "boundary edge ({a}, {b}) references a missing vertex"
                )));
            }
            if be.marker == 0 {
                return Err(Error::Validation(format!(
                    "boundary edge ({a}, {b}) has marker 0"
                )));
            }
            let key = sorted_pair(a, b);
            match edge_use.get(&key) {
                Some(1) => {}
                Some(n) => {
                    return Err(Error::Validation(format!(
                        "boundary edge ({a}, {b}) is shared by {n} triangles"
                    )))
                }
                None => {
                    return Err(Error::Validation(format!(
                        "boundary edge ({a}, {b}) is not a triangle edge"
                    )))
                }
            }
            let slot = &mut edge_markers[index[&key]];
            if *slot != 0 {
                return Err(Error::Validation(format!(
                    "boundary edge ({a}, {b}) listed twice"
                )));
            }
            *slot = be.marker;
        }
        for (i, e) in edges.iter().enumerate() {
            match edge_use[e] {
                1 if edge_markers[i] == 0 => {
                    return Err(Error::Validation(format!(
                        "edge ({}, {}) lies on the boundary but carries no marker",
                        e[0], e[1]
                    )))
                }
                1 | 2 => {}
                n => {
                    return Err(Error::Validation(format!(
                        "edge ({}, {}) is shared by {n} triangles",
                        e[0], e[1]
                    )))
                }
            }
        }

        let triangle_edges = triangles
            .iter()
            .map(|t| {
                [
                    index[&sorted_pair(t[0], t[1])],
                    index[&sorted_pair(t[1], t[2])],
                    index[&sorted_pair(t[2], t[0])],
                ]
            })
            .collect();

        let h_max = edges
            .iter()
            .map(|e| dist(vertices[e[0]], vertices[e[1]]))
            .fold(0.0, f64::max);

        let mut min_angle = f64::INFINITY;
        for tri in &triangles {
            for k in 0..3 {
                let p = vertices[tri[k]];
                let q = vertices[tri[(k + 1) % 3]];
                let r = vertices[tri[(k + 2) % 3]];
                let u = [q[0] - p[0], q[1] - p[1]];
                let v = [r[0] - p[0], r[1] - p[1]];
                let cos = (u[0] * v[0] + u[1] * v[1]) / (u[0].hypot(u[1]) * v[0].hypot(v[1]));
                min_angle = min_angle.min(cos.clamp(-1.0, 1.0).acos().to_degrees());
            }
        }

        Ok(Mesh {
            vertices,
            triangles,
            boundary,
            edges,
            triangle_edges,
            edge_markers,
            h_max,
            min_angle,
        })
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn boundary(&self) -> &[BoundaryEdge] {
        &self.boundary
    }

    pub fn edges(&self) -> &[[usize; 2]] {
        &self.edges
    }

    pub fn triangle_edges(&self) -> &[[usize; 3]] {
        &self.triangle_edges
    }

    /// Marker of each edge in [`Mesh::edges`] order; 0 marks interior edges.
    pub fn edge_markers(&self) -> &[u32] {
        &self.edge_markers
    }

    pub fn h_max(&self) -> f64 {
        self.h_max
    }

    pub fn min_angle(&self) -> f64 {
        self.min_angle
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_triangles(&self) -> usize {
        self.triangles.len()
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn markers(&self) -> Vec<u32> {
        let mut m: Vec<u32> = self.boundary.iter().map(|b| b.marker).collect();
        m.sort_unstable();
        m.dedup();
        m
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t];
        signed_area(self.vertices[a], self.vertices[b], self.vertices[c])
    }

    pub fn area(&self) -> f64 {
        (0..self.n_triangles()).map(|t| self.triangle_area(t)).sum()
    }

    pub fn stats(&self) -> MeshStats {
        MeshStats {
            h_max: self.h_max,
            min_angle: self.min_angle,
            n_vertices: self.n_vertices(),
            n_triangles: self.n_triangles(),
            n_boundary_edges: self.boundary.len(),
        }
    }
}

pub fn mesh_stats(mesh: &Mesh) -> MeshStats {
    mesh.stats()
}

/// Structured `n x n` grid on [0,1]^2, each cell split along the
/// lower-left to upper-right diagonal.
pub fn gen_unit_square(n: usize) -> Result<Mesh> {
    if n == 0 {
        return Err(Error::invalid("unit square needs n >= 1"));
    }
    let id = |i: usize, j: usize| j * (n + 1) + i;
    let h = 1.0 / n as f64;
    let mut vertices = Vec::with_capacity((n + 1) * (n + 1));
    for j in 0..=n {
        for i in 0..=n {
            // Exact endpoints so boundary nodes sit on x, y in {0, 1}.
            let x = if i == n { 1.0 } else { i as f64 * h };
            let y = if j == n { 1.0 } else { j as f64 * h };
            vertices.push([x, y]);
        }
    }
    let mut triangles = Vec::with_capacity(2 * n * n);
    for j in 0..n {
        for i in 0..n {
            let (v00, v10, v11, v01) = (id(i, j), id(i + 1, j), id(i + 1, j + 1), id(i, j + 1));
            triangles.push([v00, v10, v11]);
            triangles.push([v00, v11, v01]);
        }
    }
    let mut boundary = Vec::with_capacity(4 * n);
    for i in 0..n {
        boundary.push([id(i, 0), id(i + 1, 0)]);
        boundary.push([id(n, i), id(n, i + 1)]);
        boundary.push([id(i + 1, n), id(i, n)]);
        boundary.push([id(0, i + 1), id(0, i)]);
    }
    let boundary = boundary
        .into_iter()
        .map(|vertices| BoundaryEdge {
            vertices,
            marker: MARKER_OUTER,
        })
        .collect();
    Mesh::new(vertices, triangles, boundary)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnnulusParams {
    pub n_outer: usize,
    pub n_inner: usize,
    pub n_rings: usize,
    pub grading: f64,
}

impl Default for AnnulusParams {
    fn default() -> Self {
        AnnulusParams {
            n_outer: 80,
            n_inner: 60,
            n_rings: 28,
            grading: 0.9,
        }
    }
}

/// Normalized radial positions of the rings, 0 on the inner circle and 1 on
/// the outer. Consecutive spacings grow by the factor `1 / grading`.
pub fn ring_positions(n_rings: usize, grading: f64) -> Vec<f64> {
    let ratio = 1.0 / grading;
    let mut acc = Vec::with_capacity(n_rings + 1);
    let mut s = 0.0;
    let mut step = 1.0;
    acc.push(0.0);
    for _ in 0..n_rings {
        s += step;
        step *= ratio;
        acc.push(s);
    }
    let total = s;
    acc.iter_mut().for_each(|v| *v /= total);
    acc[n_rings] = 1.0;
    acc
}

/// Structured mesh of the disk of radius 1 with the circular hole of
/// radius 0.1 centred at (1/2, 0).
///
/// Ring `k` carries a node count that varies linearly from `n_inner` to
/// `n_outer`. A node at angle `theta` on a ring with normalized position `s`
/// sits at `(1 - s) * (c + r2 e(theta)) + s * e(theta)`. Adjacent rings are
/// stitched by merging their angle sequences.
pub fn gen_offset_annulus(
    n_outer: usize,
    n_inner: usize,
    n_rings: usize,
    grading: f64,
) -> Result<Mesh> {
    if n_outer < 8 || n_inner < 8 {
        return Err(Error::invalid(format!(
            "annulus needs n_outer, n_inner >= 8 (got {n_outer}, {n_inner})"
        )));
    }
    if n_rings < 2 {
        return Err(Error::invalid(format!(
            "annulus needs n_rings >= 2 (got {n_rings})"
        )));
    }
    if !(grading > 0.0 && grading <= 1.0) {
        return Err(Error::invalid(format!(
            "grading must lie in (0, 1] (got {grading})"
        )));
    }

    let s = ring_positions(n_rings, grading);
    let counts: Vec<usize> = (0..=n_rings)
        .map(|k| {
            let c = n_inner as f64 + (n_outer as f64 - n_inner as f64) * k as f64 / n_rings as f64;
            c.round() as usize
        })
        .collect();
    let mut offsets = Vec::with_capacity(n_rings + 2);
    offsets.push(0usize);
    for &c in &counts {
        offsets.push(offsets.last().unwrap() + c);
    }

    let [cx, cy] = ANNULUS_INNER_CENTER;
    let mut vertices = Vec::with_capacity(offsets[n_rings + 1]);
    for (k, &nk) in counts.iter().enumerate() {
        for i in 0..nk {
            let theta = 2.0 * std::f64::consts::PI * i as f64 / nk as f64;
            let (sin, cos) = theta.sin_cos();
            let inner = [
                cx + ANNULUS_INNER_RADIUS * cos,
                cy + ANNULUS_INNER_RADIUS * sin,
            ];
            let outer = [ANNULUS_OUTER_RADIUS * cos, ANNULUS_OUTER_RADIUS * sin];
            let p = if k == 0 {
                inner
            } else if k == n_rings {
                outer
            } else {
                let t = s[k];
                [
                    (1.0 - t) * inner[0] + t * outer[0],
                    (1.0 - t) * inner[1] + t * outer[1],
                ]
            };
            vertices.push(p);
        }
    }

    let mut triangles = Vec::new();
    for k in 0..n_rings {
        let (na, nb) = (counts[k], counts[k + 1]);
        let a = |i: usize| offsets[k] + i % na;
        let b = |j: usize| offsets[k + 1] + j % nb;
        let (mut i, mut j) = (0, 0);
        while i < na || j < nb {
            let advance_a = j == nb || (i < na && (i + 1) * nb <= (j + 1) * na);
            if advance_a {
                triangles.push([a(i), b(j), a(i + 1)]);
                i += 1;
            } else {
                triangles.push([a(i), b(j), b(j + 1)]);
                j += 1;
            }
        }
    }

    let mut boundary = Vec::with_capacity(n_inner + n_outer);
    for i in 0..counts[0] {
        boundary.push(BoundaryEdge {
            vertices: [offsets[0] + i, offsets[0] + (i + 1) % counts[0]],
            marker: MARKER_INNER,
        });
    }
    for i in 0..counts[n_rings] {
        boundary.push(BoundaryEdge {
            vertices: [
                offsets[n_rings] + i,
                offsets[n_rings] + (i + 1) % counts[n_rings],
            ],
            marker: MARKER_OUTER,
        });
    }
    Mesh::new(vertices, triangles, boundary)
}

pub fn gen_default_annulus() -> Result<Mesh> {
    let p = AnnulusParams::default();
    gen_offset_annulus(p.n_outer, p.n_inner, p.n_rings, p.grading)
}

pub fn format_mesh(mesh: &Mesh) -> String {
    let mut out = String::new();
    out.push_str("emesh 1\n");
    let _ = writeln!(out, "vertices {}", mesh.vertices.len());
    for v in &mesh.vertices {
        let _ = writeln!(out, "{:.16e} {:.16e}", v[0], v[1]);
    }
    let _ = writeln!(out, "triangles {}", mesh.triangles.len());
    for t in &mesh.triangles {
        let _ = writeln!(out, "{} {} {}", t[0], t[1], t[2]);
    }
    let _ = writeln!(out, "boundary {}", mesh.boundary.len());
    for b in &mesh.boundary {
        let _ = writeln!(out, "{} {} {}", b.vertices[0], b.vertices[1], b.marker);
    }
    out
}

pub fn write_mesh(mesh: &Mesh, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, format_mesh(mesh))?;
    Ok(())
}

pub fn read_mesh(path: impl AsRef<Path>) -> Result<Mesh> {
    parse_mesh(&fs::read_to_string(path)?)
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    last: usize,
}

impl<'a> Lines<'a> {
    fn next_line(&mut self) -> Result<(usize, Vec<&'a str>)> {
        for (i, line) in self.inner.by_ref() {
            self.last = i + 1;
            let fields: Vec<&str> = line.split_whitespace().collect();
            if !fields.is_empty() {
                return Ok((i + 1, fields));
            }
        }
        Err(Error::parse(self.last + 1, "unexpected end of file"))
    }

    fn header(&mut self, keyword: &str) -> Result<usize> {
        let (line, f) = self.next_line()?;
        if f.len() != 2 || f[0] != keyword {
            return Err(Error::parse(line, format!("expected `{keyword} <count>`")));
        }
        f[1].parse()
            .map_err(|_| Error::parse(line, format!("bad {keyword} count `{}`", f[1])))
    }
}

fn parse_fields<T: std::str::FromStr, const N: usize>(
    line: usize,
    fields: &[&str],
    what: &str,
) -> Result<[T; N]> {
    if fields.len() != N {
        return Err(Error::parse(
            line,
            format!("{what} line needs {N} fields, got {}", fields.len()),
        ));
    }
    let mut out = Vec::with_capacity(N);
    for f in fields {
        out.push(
            f.parse::<T>()
                .map_err(|_| Error::parse(line, format!("cannot parse `{f}` in {what} line")))?,
        );
    }
    out.try_into()
        .map_err(|_| Error::parse(line, "internal field count"))
}

pub fn parse_mesh(text: &str) -> Result<Mesh> {
    let mut lines = Lines {
        inner: text.lines().enumerate(),
        last: 0,
    };
    let (line, f) = lines.next_line()?;
    if f != ["emesh", "1"] {
        return Err(Error::parse(line, "expected header `emesh 1`"));
    }
    let nv = lines.header("vertices")?;
    let mut vertices = Vec::with_capacity(nv);
    for _ in 0..nv {
        let (line, f) = lines.next_line()?;
        let p: [f64; 2] = parse_fields(line, &f, "vertex")?;
        if !p.iter().all(|c| c.is_finite()) {
            return Err(Error::parse(line, "non-finite coordinate"));
        }
        vertices.push(p);
    }
    let nt = lines.header("triangles")?;
    let mut triangles = Vec::with_capacity(nt);
    for _ in 0..nt {
        let (line, f) = lines.next_line()?;
        let t: [usize; 3] = parse_fields(line, &f, "triangle")?;
        if let Some(bad) = t.iter().find(|&&v| v >= nv) {
            return Err(Error::parse(
                line,
                format!("vertex index {bad} out of range (< {nv})"),
            ));
        }
        triangles.push(t);
    }
    let nb = lines.header("boundary")?;
    let mut boundary = Vec::with_capacity(nb);
    for _ in 0..nb {
        let (line, f) = lines.next_line()?;
        let [a, b, m]: [usize; 3] = parse_fields(line, &f, "boundary")?;
        if a >= nv || b >= nv {
            return Err(Error::parse(
                line,
                format!("boundary vertex out of range (< {nv})"),
            ));
        }
        let marker = u32::try_from(m).map_err(|_| Error::parse(line, "marker too large"))?;
        boundary.push(BoundaryEdge {
            vertices: [a, b],
            marker,
        });
    }
    if let Ok((line, _)) = lines.next_line() {
        return Err(Error::parse(
            line,
            "trailing content after boundary section",
        ));
    }
    Mesh::new(vertices, triangles, boundary).map_err(|e| match e {
        Error::MeshQuality { triangle, area } => Error::Validation(format!(
            "triangle {triangle} is not counterclockwise (signed area {area:e})"
        )),
        other => other,
    })
}
