//! Taylor-Hood P2-P1 spaces: reference bases, triangle quadrature, dof
//! maps, nodal interpolation and boundary dof sets.

use std::ops::{Deref, DerefMut};

use crate::error::{Error, Result};
use crate::mesh::{Mesh, Point};

/// Quadrature on the reference triangle (0,0), (1,0), (0,1). Weights sum to
/// one; multiply by the physical triangle area when integrating.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    pub points: Vec<[f64; 2]>,
    pub weights: Vec<f64>,
    pub degree: usize,
}

impl QuadratureRule {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Barycentric coordinates (1 - xi - eta, xi, eta) of point `q`.
    pub fn barycentric(&self, q: usize) -> [f64; 3] {
        let [x, y] = self.points[q];
        [1.0 - x - y, x, y]
    }
}

fn symmetric_orbit(points: &mut Vec<[f64; 2]>, weights: &mut Vec<f64>, a: f64, w: f64) {
    let b = 1.0 - 2.0 * a;
    points.extend([[a, a], [b, a], [a, b]]);
    weights.extend([w, w, w]);
}

/// Gauss-Legendre nodes and weights on [0, 1].
fn gauss_legendre_unit(n: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        out.push((0.5 * (x + 1.0), 0.5 * w));
    }
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    out
}

/// Collapsed (Duffy) product rule; exact to total degree `2n - 2`.
fn collapsed_gauss(n: usize, degree: usize) -> QuadratureRule {
    let gl = gauss_legendre_unit(n);
    let mut points = Vec::with_capacity(n * n);
    let mut weights = Vec::with_capacity(n * n);
    for &(u, wu) in &gl {
        for &(v, wv) in &gl {
            points.push([u, (1.0 - u) * v]);
            weights.push(2.0 * wu * wv * (1.0 - u));
        }
    }
    QuadratureRule {
        points,
        weights,
        degree,
    }
}

/// Smallest tabulated rule of at least the requested exactness.
pub fn quadrature_rule(degree: usize) -> Result<QuadratureRule> {
    let mut points = Vec::new();
    let mut weights = Vec::new();
    match degree {
        1 => {
            points.push([1.0 / 3.0, 1.0 / 3.0]);
            weights.push(1.0);
            Ok(QuadratureRule {
                points,
                weights,
                degree: 1,
            })
        }
        2 => {
            symmetric_orbit(&mut points, &mut weights, 1.0 / 6.0, 1.0 / 3.0);
            Ok(QuadratureRule {
                points,
                weights,
                degree: 2,
            })
        }
        3 | 4 => {
            symmetric_orbit(
                &mut points,
                &mut weights,
                0.445_948_490_915_965,
                0.223_381_589_678_011,
            );
            symmetric_orbit(
                &mut points,
                &mut weights,
                0.091_576_213_509_771,
                0.109_951_743_655_322,
            );
            Ok(QuadratureRule {
                points,
                weights,
                degree: 4,
            })
        }
        5 => {
            let s15 = 15f64.sqrt();
            points.push([1.0 / 3.0, 1.0 / 3.0]);
            weights.push(9.0 / 40.0);
            symmetric_orbit(
                &mut points,
                &mut weights,
                (6.0 - s15) / 21.0,
                (155.0 - s15) / 1200.0,
            );
            symmetric_orbit(
                &mut points,
                &mut weights,
                (6.0 + s15) / 21.0,
                (155.0 + s15) / 1200.0,
            );
            Ok(QuadratureRule {
                points,
                weights,
                degree: 5,
            })
        }
        6 => Ok(collapsed_gauss(4, 6)),
        7 => Ok(collapsed_gauss(5, 7)),
        d => Err(Error::invalid(format!(
            "unsupported quadrature degree {d} (1..=7)"
        ))),
    }
}

/// Values and reference-coordinate gradients of the six P2 and three P1
/// Lagrange basis functions. P2 node order: vertices 0, 1, 2 then the
/// midpoints of edges (0,1), (1,2), (2,0).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BasisValues {
    pub p2: [f64; 6],
    pub p2_grad: [[f64; 2]; 6],
    pub p1: [f64; 3],
    pub p1_grad: [[f64; 2]; 3],
}

const BARY_GRAD: [[f64; 2]; 3] = [[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]];

pub fn eval_basis(xi: [f64; 2]) -> BasisValues {
    let l = [1.0 - xi[0] - xi[1], xi[0], xi[1]];
    let g = BARY_GRAD;
    let mut p2 = [0.0; 6];
    let mut p2_grad = [[0.0; 2]; 6];
    for i in 0..3 {
        p2[i] = l[i] * (2.0 * l[i] - 1.0);
        let s = 4.0 * l[i] - 1.0;
        p2_grad[i] = [s * g[i][0], s * g[i][1]];
    }
    for (k, (a, b)) in [(0, 1), (1, 2), (2, 0)].into_iter().enumerate() {
        p2[3 + k] = 4.0 * l[a] * l[b];
        p2_grad[3 + k] = [
            4.0 * (l[b] * g[a][0] + l[a] * g[b][0]),
            4.0 * (l[b] * g[a][1] + l[a] * g[b][1]),
        ];
    }
    BasisValues {
        p2,
        p2_grad,
        p1: l,
        p1_grad: g,
    }
}

/// Reference coordinates of the six P2 nodes.
pub const P2_NODES: [[f64; 2]; 6] = [
    [0.0, 0.0],
    [1.0, 0.0],
    [0.0, 1.0],
    [0.5, 0.0],
    [0.5, 0.5],
    [0.0, 0.5],
];

/// Affine map from the reference triangle.
#[derive(Debug, Clone, Copy)]
pub struct ElementGeometry {
    pub origin: Point,
    pub jac: [[f64; 2]; 2],
    /// Inverse transpose of `jac`, maps reference gradients to physical ones.
    pub inv_t: [[f64; 2]; 2],
    pub area: f64,
}

impl ElementGeometry {
    pub fn new(p: [Point; 3]) -> Self {
        let jac = [
            [p[1][0] - p[0][0], p[2][0] - p[0][0]],
            [p[1][1] - p[0][1], p[2][1] - p[0][1]],
        ];
        let det = jac[0][0] * jac[1][1] - jac[0][1] * jac[1][0];
        let inv_t = [
            [jac[1][1] / det, -jac[1][0] / det],
            [-jac[0][1] / det, jac[0][0] / det],
        ];
        ElementGeometry {
            origin: p[0],
            jac,
            inv_t,
            area: 0.5 * det,
        }
    }

    pub fn map(&self, xi: [f64; 2]) -> Point {
        [
            self.origin[0] + self.jac[0][0] * xi[0] + self.jac[0][1] * xi[1],
            self.origin[1] + self.jac[1][0] * xi[0] + self.jac[1][1] * xi[1],
        ]
    }

    pub fn grad(&self, g: [f64; 2]) -> [f64; 2] {
        [
            self.inv_t[0][0] * g[0] + self.inv_t[0][1] * g[1],
            self.inv_t[1][0] * g[0] + self.inv_t[1][1] * g[1],
        ]
    }
}

/// Basis values tabulated at the points of a quadrature rule.
#[derive(Debug, Clone)]
pub struct Tabulation {
    pub rule: QuadratureRule,
    pub basis: Vec<BasisValues>,
}

impl Tabulation {
    pub fn new(rule: QuadratureRule) -> Self {
        let basis = rule.points.iter().map(|&p| eval_basis(p)).collect();
        Tabulation { rule, basis }
    }

    pub fn of_degree(degree: usize) -> Result<Self> {
        Ok(Self::new(quadrature_rule(degree)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldKind {
    Velocity,
    Pressure,
}

/// Dof values of one discrete field. Velocity vectors are component
/// blocked: x-components first, then y-components.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientVector {
    kind: FieldKind,
    values: Vec<f64>,
}

impl CoefficientVector {
    pub fn zeros(space: &TaylorHood, kind: FieldKind) -> Self {
        CoefficientVector {
            kind,
            values: vec![0.0; space.n_dofs(kind)],
        }
    }

    pub fn from_values(space: &TaylorHood, kind: FieldKind, values: Vec<f64>) -> Result<Self> {
        let expected = space.n_dofs(kind);
        if values.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                got: values.len(),
            });
        }
        Ok(CoefficientVector { kind, values })
    }

    /// Unchecked constructor for vectors whose length is known to match.
    pub(crate) fn from_raw(kind: FieldKind, values: Vec<f64>) -> Self {
        CoefficientVector { kind, values }
    }

    pub fn kind(&self) -> FieldKind {
        self.kind
    }

    pub fn components(&self) -> usize {
        match self.kind {
            FieldKind::Velocity => 2,
            FieldKind::Pressure => 1,
        }
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// `a * x + b * y`, coefficient-wise.
    pub fn combine(a: f64, x: &Self, b: f64, y: &Self) -> Self {
        assert_eq!(x.kind, y.kind);
        assert_eq!(x.values.len(), y.values.len());
        let values = x
            .values
            .iter()
            .zip(&y.values)
            .map(|(p, q)| a * p + b * q)
            .collect();
        CoefficientVector {
            kind: x.kind,
            values,
        }
    }
}

impl Deref for CoefficientVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.values
    }
}

impl DerefMut for CoefficientVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }
}

/// P2 velocity / P1 pressure dof maps over a mesh. Scalar P2 nodes are
/// numbered vertices first, then edge midpoints in sorted edge order.
#[derive(Debug, Clone)]
pub struct TaylorHood {
    mesh: Mesh,
    nodes: Vec<Point>,
    element_nodes: Vec<[usize; 6]>,
    node_markers: Vec<u32>,
}

impl TaylorHood {
    pub fn new(mesh: Mesh) -> Self {
        let nv = mesh.n_vertices();
        let mut nodes = mesh.vertices().to_vec();
        nodes.extend(mesh.edges().iter().map(|&[a, b]| {
            let (p, q) = (mesh.vertices()[a], mesh.vertices()[b]);
            [0.5 * (p[0] + q[0]), 0.5 * (p[1] + q[1])]
        }));
        let element_nodes = mesh
            .triangles()
            .iter()
            .zip(mesh.triangle_edges())
            .map(|(t, e)| [t[0], t[1], t[2], nv + e[0], nv + e[1], nv + e[2]])
            .collect();
        let mut node_markers = vec![0u32; nodes.len()];
        for (i, (&[a, b], &m)) in mesh.edges().iter().zip(mesh.edge_markers()).enumerate() {
            if m != 0 {
                node_markers[a] = m;
                node_markers[b] = m;
                node_markers[nv + i] = m;
            }
        }
        TaylorHood {
            mesh,
            nodes,
            element_nodes,
            node_markers,
        }
    }

    pub fn mesh(&self) -> &Mesh {
        &self.mesh
    }

    /// Number of scalar P2 nodes (vertices + edges).
    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn n_velocity(&self) -> usize {
        2 * self.nodes.len()
    }

    pub fn n_pressure(&self) -> usize {
        self.mesh.n_vertices()
    }

    pub fn n_dofs(&self, kind: FieldKind) -> usize {
        match kind {
            FieldKind::Velocity => self.n_velocity(),
            FieldKind::Pressure => self.n_pressure(),
        }
    }

    pub fn nodes(&self) -> &[Point] {
        &self.nodes
    }

    /// Scalar P2 node indices per element; add `n_nodes()` for y-components.
    pub fn element_nodes(&self) -> &[[usize; 6]] {
        &self.element_nodes
    }

    /// P1 pressure dofs per element (the triangle vertices).
    pub fn element_pressure(&self, e: usize) -> [usize; 3] {
        self.mesh.triangles()[e]
    }

    pub fn geometry(&self, e: usize) -> ElementGeometry {
        let t = self.mesh.triangles()[e];
        let v = self.mesh.vertices();
        ElementGeometry::new([v[t[0]], v[t[1]], v[t[2]]])
    }

    pub fn node_marker(&self, node: usize) -> u32 {
        self.node_markers[node]
    }

    /// Velocity dofs (both components) of nodes on boundary edges with the
    /// given marker, or on any boundary edge when `marker` is `None`.
    /// Sorted ascending.
    pub fn boundary_dofs(&self, marker: Option<u32>) -> Result<Vec<usize>> {
        if let Some(m) = marker {
            if !self.mesh.markers().contains(&m) {
                return Err(Error::UnknownMarker(m));
            }
        }
        let nn = self.n_nodes();
        let on = |n: usize| match marker {
            Some(m) => self.node_markers[n] == m,
            None => self.node_markers[n] != 0,
        };
        let mut x: Vec<usize> = (0..nn).filter(|&n| on(n)).collect();
        let y: Vec<usize> = x.iter().map(|n| n + nn).collect();
        x.extend(y);
        Ok(x)
    }

    pub fn interpolate_velocity(&self, field: impl Fn(Point) -> [f64; 2]) -> CoefficientVector {
        let nn = self.n_nodes();
        let mut values = vec![0.0; 2 * nn];
        for (i, &p) in self.nodes.iter().enumerate() {
            let [u, v] = field(p);
            values[i] = u;
            values[nn + i] = v;
        }
        CoefficientVector {
            kind: FieldKind::Velocity,
            values,
        }
    }

    pub fn interpolate_pressure(&self, field: impl Fn(Point) -> f64) -> CoefficientVector {
        let values = self.mesh.vertices().iter().map(|&p| field(p)).collect();
        CoefficientVector {
            kind: FieldKind::Pressure,
            values,
        }
    }

    /// Nodal P2 interpolant of a scalar field, one value per node.
    pub fn interpolate_p2_scalar(&self, field: impl Fn(Point) -> f64) -> Vec<f64> {
        self.nodes.iter().map(|&p| field(p)).collect()
    }

    /// Velocity value and gradient (rows: components) of a discrete field at
    /// tabulated basis values of element `e`.
    pub fn eval_velocity(
        &self,
        e: usize,
        geo: &ElementGeometry,
        basis: &BasisValues,
        u: &[f64],
    ) -> ([f64; 2], [[f64; 2]; 2]) {
        let nn = self.n_nodes();
        let nodes = &self.element_nodes[e];
        let mut val = [0.0; 2];
        let mut grad = [[0.0; 2]; 2];
        for a in 0..6 {
            let g = geo.grad(basis.p2_grad[a]);
            for c in 0..2 {
                let coef = u[c * nn + nodes[a]];
                val[c] += coef * basis.p2[a];
                grad[c][0] += coef * g[0];
                grad[c][1] += coef * g[1];
            }
        }
        (val, grad)
    }
}

/// Interpolates an analytic velocity field `field(x, t)` at time `t`.
pub fn interpolate(
    space: &TaylorHood,
    field: &dyn Fn(Point, f64) -> [f64; 2],
    t: f64,
) -> CoefficientVector {
    space.interpolate_velocity(|p| field(p, t))
}

pub fn build_taylor_hood(mesh: Mesh) -> TaylorHood {
    TaylorHood::new(mesh)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{gen_offset_annulus, gen_unit_square, MARKER_INNER, MARKER_OUTER};

    fn factorial(n: u32) -> f64 {
        (1..=n).map(f64::from).product()
    }

    /// Exact integral of x^a y^b over the reference triangle.
    fn monomial_integral(a: u32, b: u32) -> f64 {
        factorial(a) * factorial(b) / factorial(a + b + 2)
    }

    fn integrate(rule: &QuadratureRule, f: impl Fn(f64, f64) -> f64) -> f64 {
        0.5 * rule
            .points
            .iter()
            .zip(&rule.weights)
            .map(|(p, w)| w * f(p[0], p[1]))
            .sum::<f64>()
    }

    #[test]
    fn degree_one_is_centroid() {
        let r = quadrature_rule(1).unwrap();
        assert_eq!(r.points, vec![[1.0 / 3.0, 1.0 / 3.0]]);
        assert_eq!(r.weights, vec![1.0]);
    }

    #[test]
    fn degree_five_monomial() {
        let r = quadrature_rule(5).unwrap();
        let got = integrate(&r, |x, y| x * x * y * y * y);
        assert!((got - 1.0 / 420.0).abs() < 1e-14, "{got}");
    }

    #[test]
    fn every_rule_is_exact_to_its_degree() {
        for d in 1..=7 {
            let r = quadrature_rule(d).unwrap();
            assert!(r.degree >= d);
            assert!((r.weights.iter().sum::<f64>() - 1.0).abs() < 1e-14);
            for a in 0..=d as u32 {
                for b in 0..=(d as u32 - a) {
                    let got = integrate(&r, |x, y| x.powi(a as i32) * y.powi(b as i32));
                    let exact = monomial_integral(a, b);
                    assert!(
                        (got - exact).abs() < 1e-14,
                        "degree {d}: x^{a} y^{b}: {got} vs {exact}"
                    );
                }
            }
        }
        assert!(quadrature_rule(0).is_err());
        assert!(quadrature_rule(8).is_err());
    }

    #[test]
    fn lagrange_property_and_partition_of_unity() {
        for (i, &node) in P2_NODES.iter().enumerate() {
            let b = eval_basis(node);
            for j in 0..6 {
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((b.p2[j] - expected).abs() < 1e-15);
            }
        }
        for (i, &node) in P2_NODES[..3].iter().enumerate() {
            let b = eval_basis(node);
            for j in 0..3 {
                assert_eq!(b.p1[j], if i == j { 1.0 } else { 0.0 });
            }
        }
        for p in [[0.2, 0.3], [0.7, 0.1], [0.05, 0.9]] {
            let b = eval_basis(p);
            assert!((b.p2.iter().sum::<f64>() - 1.0).abs() < 1e-14);
            assert!((b.p1.iter().sum::<f64>() - 1.0).abs() < 1e-15);
            let gx: f64 = b.p2_grad.iter().map(|g| g[0]).sum();
            assert!(gx.abs() < 1e-13);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let c = [1.0 / 3.0, 1.0 / 3.0];
        let h = 1e-5;
        let b = eval_basis(c);
        let bxp = eval_basis([c[0] + h, c[1]]);
        let bxm = eval_basis([c[0] - h, c[1]]);
        let byp = eval_basis([c[0], c[1] + h]);
        let bym = eval_basis([c[0], c[1] - h]);
        for i in 0..6 {
            let fd = [
                (bxp.p2[i] - bxm.p2[i]) / (2.0 * h),
                (byp.p2[i] - bym.p2[i]) / (2.0 * h),
            ];
            assert!((fd[0] - b.p2_grad[i][0]).abs() < 1e-8);
            assert!((fd[1] - b.p2_grad[i][1]).abs() < 1e-8);
        }
        for i in 0..3 {
            let fd = [
                (bxp.p1[i] - bxm.p1[i]) / (2.0 * h),
                (byp.p1[i] - bym.p1[i]) / (2.0 * h),
            ];
            assert!((fd[0] - b.p1_grad[i][0]).abs() < 1e-8);
            assert!((fd[1] - b.p1_grad[i][1]).abs() < 1e-8);
        }
    }

    #[test]
    fn dof_counts() {
        let s = TaylorHood::new(gen_unit_square(1).unwrap());
        assert_eq!(s.n_velocity(), 18);
        assert_eq!(s.n_pressure(), 4);
        for n in [2, 3, 7] {
            let s = TaylorHood::new(gen_unit_square(n).unwrap());
            let v = (n + 1) * (n + 1);
            let e = 3 * n * n + 2 * n;
            assert_eq!(s.n_velocity(), 2 * (v + e));
            assert_eq!(s.n_pressure(), v);
        }
    }

    #[test]
    fn dof_map_is_deterministic() {
        let a = TaylorHood::new(gen_unit_square(3).unwrap());
        let b = TaylorHood::new(gen_unit_square(3).unwrap());
        assert_eq!(a.element_nodes(), b.element_nodes());
        assert_eq!(a.nodes(), b.nodes());
    }

    #[test]
    fn element_midpoints_are_edge_midpoints() {
        let s = TaylorHood::new(gen_unit_square(3).unwrap());
        for (e, nodes) in s.element_nodes().iter().enumerate() {
            let geo = s.geometry(e);
            for (k, &n) in nodes.iter().enumerate() {
                let p = geo.map(P2_NODES[k]);
                assert!((p[0] - s.nodes()[n][0]).abs() < 1e-15);
                assert!((p[1] - s.nodes()[n][1]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn unit_square_boundary_dofs() {
        let s = TaylorHood::new(gen_unit_square(1).unwrap());
        assert_eq!(s.boundary_dofs(None).unwrap().len(), 16);
        assert_eq!(s.boundary_dofs(Some(1)).unwrap().len(), 16);
        assert!(matches!(
            s.boundary_dofs(Some(5)),
            Err(Error::UnknownMarker(5))
        ));
        let s = TaylorHood::new(gen_unit_square(4).unwrap());
        for &d in &s.boundary_dofs(None).unwrap() {
            let p = s.nodes()[d % s.n_nodes()];
            assert!(p[0] == 0.0 || p[0] == 1.0 || p[1] == 0.0 || p[1] == 1.0);
        }
    }

    #[test]
    fn annulus_boundary_dofs_by_marker() {
        let s = TaylorHood::new(gen_offset_annulus(24, 16, 4, 0.8).unwrap());
        let inner = s.boundary_dofs(Some(MARKER_INNER)).unwrap();
        let outer = s.boundary_dofs(Some(MARKER_OUTER)).unwrap();
        let nn = s.n_nodes();
        for &d in &inner {
            let p = s.nodes()[d % nn];
            let r = (p[0] - 0.5).hypot(p[1]);
            // Edge midpoints sit on the chord, slightly inside the circle.
            assert!(
                r <= 0.1 + 1e-12 && r >= 0.1 * (std::f64::consts::PI / 16.0).cos() - 1e-12,
                "{r}"
            );
        }
        assert_eq!(inner.len(), 2 * 32);
        let mut union: Vec<usize> = inner.iter().chain(&outer).copied().collect();
        union.sort_unstable();
        assert_eq!(union, s.boundary_dofs(None).unwrap());
    }

    #[test]
    fn interpolation_of_constants_and_quadratics() {
        let s = TaylorHood::new(gen_unit_square(3).unwrap());
        let u = interpolate(&s, &|_, _| [2.5, -1.0], 0.0);
        let nn = s.n_nodes();
        assert!(u[..nn].iter().all(|&v| v == 2.5));
        assert!(u[nn..].iter().all(|&v| v == -1.0));

        // P2 reproduces x^2 y-like quadratics: compare at interior quadrature points.
        let q = s.interpolate_p2_scalar(|p| p[0] * p[0] - 3.0 * p[0] * p[1] + p[1]);
        let tab = Tabulation::of_degree(7).unwrap();
        let mut err2 = 0.0;
        for e in 0..s.mesh().n_triangles() {
            let geo = s.geometry(e);
            let nodes = s.element_nodes()[e];
            for (qp, b) in tab.basis.iter().enumerate() {
                let x = geo.map(tab.rule.points[qp]);
                let uh: f64 = (0..6).map(|a| q[nodes[a]] * b.p2[a]).sum();
                let exact = x[0] * x[0] - 3.0 * x[0] * x[1] + x[1];
                err2 += tab.rule.weights[qp] * geo.area * (uh - exact).powi(2);
            }
        }
        assert!(err2.sqrt() < 1e-12);
    }
}
