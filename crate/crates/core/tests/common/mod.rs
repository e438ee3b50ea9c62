//! Shared oracles for the integration tests: a hyper-dual residual check of
//! the Green-Taylor data, an independently written single-member BDF2
//! stepper, and an exactly representable polynomial flow.

#![allow(dead_code)]

use std::sync::Arc;

use ensnse::assembly::{apply_dirichlet, expand_solution, Assembler, SparseMatrix};
use ensnse::ensemble::{InitialVelocity, MemberSpec, VectorField};
use ensnse::scenarios::ManufacturedSolution;
use ensnse::solve::factorize;

/// Hyper-dual number `v + a e1 + b e2 + c e1 e2` with `e1^2 = e2^2 = 0`.
#[derive(Clone, Copy, Debug)]
pub struct Hd {
    v: f64,
    a: f64,
    b: f64,
    c: f64,
}

impl Hd {
    fn cst(v: f64) -> Self {
        Hd {
            v,
            a: 0.0,
            b: 0.0,
            c: 0.0,
        }
    }
    fn var(v: f64) -> Self {
        Hd {
            v,
            a: 1.0,
            b: 1.0,
            c: 0.0,
        }
    }
    fn chain(self, f: f64, df: f64, ddf: f64) -> Self {
        Hd {
            v: f,
            a: df * self.a,
            b: df * self.b,
            c: df * self.c + ddf * self.a * self.b,
        }
    }
    fn sin(self) -> Self {
        self.chain(self.v.sin(), self.v.cos(), -self.v.sin())
    }
    fn cos(self) -> Self {
        self.chain(self.v.cos(), -self.v.sin(), -self.v.cos())
    }
}

impl std::ops::Add for Hd {
    type Output = Hd;
    fn add(self, o: Hd) -> Hd {
        Hd {
            v: self.v + o.v,
            a: self.a + o.a,
            b: self.b + o.b,
            c: self.c + o.c,
        }
    }
}

impl std::ops::Mul for Hd {
    type Output = Hd;
    fn mul(self, o: Hd) -> Hd {
        Hd {
            v: self.v * o.v,
            a: self.v * o.a + self.a * o.v,
            b: self.v * o.b + self.b * o.v,
            c: self.v * o.c + self.a * o.b + self.b * o.a + self.c * o.v,
        }
    }
}

impl std::ops::Mul<Hd> for f64 {
    type Output = Hd;
    fn mul(self, o: Hd) -> Hd {
        Hd::cst(self) * o
    }
}

// Textbook Green-Taylor vortex, independent of the library's derivatives.
fn u_ref(a: f64, x: Hd, y: Hd, t: Hd) -> [Hd; 2] {
    let s = (2.0 * t).sin();
    [-a * (s * x.cos() * y.sin()), a * (s * x.sin() * y.cos())]
}

fn p_ref(a: f64, x: Hd, y: Hd, t: Hd) -> Hd {
    let s = (2.0 * t).sin();
    (-0.25 * a * a) * ((2.0 * x).cos() + (2.0 * y).cos()) * s * s
}

/// Value, first and second derivative along coordinate `dir` of (x, y, t).
fn derivs<F: Fn(Hd, Hd, Hd) -> Hd>(f: F, p: [f64; 3], dir: usize) -> (f64, f64, f64) {
    let arg = |k: usize| {
        if k == dir {
            Hd::var(p[k])
        } else {
            Hd::cst(p[k])
        }
    };
    let r = f(arg(0), arg(1), arg(2));
    (r.v, r.a, r.c)
}

/// Momentum residual `u_t + (u.grad)u - nu lap u + grad p - f` and `div u`
/// at `p = (x, y, t)`.
pub fn green_taylor_residual(m: &ManufacturedSolution, p: [f64; 3]) -> ([f64; 2], f64) {
    let a = m.scale;
    let u = [
        derivs(|x, y, t| u_ref(a, x, y, t)[0], p, 0).0,
        derivs(|x, y, t| u_ref(a, x, y, t)[1], p, 0).0,
    ];
    let mut res = [0.0; 2];
    let mut div = 0.0;
    for c in 0..2 {
        let comp = |x, y, t| u_ref(a, x, y, t)[c];
        let (_, ut, _) = derivs(comp, p, 2);
        let (_, ux, uxx) = derivs(comp, p, 0);
        let (_, uy, uyy) = derivs(comp, p, 1);
        let dp = derivs(|x, y, t| p_ref(a, x, y, t), p, c).1;
        res[c] = ut + u[0] * ux + u[1] * uy - m.nu * (uxx + uyy) + dp;
        div += if c == 0 { ux } else { uy };
    }
    let f = (m.force)([p[0], p[1]], p[2]);
    ([res[0] - f[0], res[1] - f[1]], div)
}

/// Single-member BDF2 with extrapolated convection, built from the full
/// block matrix and generic Dirichlet elimination. Returns `u^0 ..= u^steps`.
pub fn reference_bdf2(asm: &Assembler, m: &MemberSpec, dt: f64, steps: usize) -> Vec<Vec<f64>> {
    let space = asm.space();
    let ops = asm.operators();
    let (nv, np) = (space.n_velocity(), space.n_pressure());
    let n = nv + np + 1;
    let constrained = space.boundary_dofs(None).unwrap();
    let nn = space.n_nodes();
    let nodes = space.nodes();
    let bt = ops.divergence.transpose();
    let u0 = match &m.initial {
        InitialVelocity::Field(f) => space.interpolate_velocity(|x| f(x, 0.0)).into_values(),
        InitialVelocity::Coefficients(c) => c.clone(),
    };
    let mut levels = vec![u0];
    for k in 0..steps {
        let t = (k + 1) as f64 * dt;
        let cur = &levels[k];
        let (alpha, conv_by, hist): (f64, Vec<f64>, Vec<f64>) = if k == 0 {
            (1.0 / dt, cur.clone(), cur.iter().map(|v| v / dt).collect())
        } else {
            let prev = &levels[k - 1];
            (
                1.5 / dt,
                cur.iter().zip(prev).map(|(c, p)| 2.0 * c - p).collect(),
                cur.iter()
                    .zip(prev)
                    .map(|(c, p)| (4.0 * c - p) / (2.0 * dt))
                    .collect(),
            )
        };
        let conv = asm.assemble_convection(&conv_by).unwrap();
        let mut trip = Vec::new();
        for (mat, s) in [(&ops.mass, alpha), (&ops.stiffness, m.nu), (&conv, 1.0)] {
            push(&mut trip, mat, s, 0, 0);
        }
        push(&mut trip, &bt, -1.0, 0, nv);
        push(&mut trip, &ops.divergence, -1.0, nv, 0);
        for (q, &w) in ops.pressure_mean.iter().enumerate() {
            trip.push((nv + q, n - 1, w));
            trip.push((n - 1, nv + q, w));
        }
        let a = SparseMatrix::from_triplets(n, n, &trip);
        let mut rhs = asm.assemble_load(|x| (m.force)(x, t)).into_values();
        let mh = ops.mass.matvec(&hist);
        rhs.iter_mut().zip(mh).for_each(|(r, v)| *r += v);
        rhs.resize(n, 0.0);
        let g: Vec<f64> = constrained
            .iter()
            .map(|&d| (m.boundary)(nodes[d % nn], t)[d / nn])
            .collect();
        let red = apply_dirichlet(&a, &[rhs], &constrained, &g).unwrap();
        let x = factorize(&red.matrix).unwrap().solve(&red.rhs[0]).unwrap();
        let full = expand_solution(n, &red.free, &x, &constrained, &g);
        levels.push(full[..nv].to_vec());
    }
    levels
}

fn push(trip: &mut Vec<(usize, usize, f64)>, m: &SparseMatrix, s: f64, r0: usize, c0: usize) {
    for i in 0..m.nrows() {
        let (cols, vals) = m.row(i);
        for (&c, &v) in cols.iter().zip(vals) {
            trip.push((r0 + i, c0 + c, s * v));
        }
    }
}

/// Time profile `1 + t + t^2` of the polynomial flow.
pub fn phi(t: f64) -> f64 {
    1.0 + t + t * t
}

fn dphi(t: f64) -> f64 {
    1.0 + 2.0 * t
}

/// `u = phi(t) (x^2, -2xy)`, `p = phi(t) (x - 1/2)`: divergence free, in
/// the discrete spaces, and integrated exactly by BDF2. The force matches
/// the scheme's lagged terms (convection and viscosity deviation act on the
/// extrapolant `psi(t) = 2 phi(t - dt) - phi(t - 2 dt)`), so the discrete
/// solution from exact starting levels is the interpolant at every step.
pub fn polynomial_member(nu: f64, nu_bar: f64, dt: f64) -> MemberSpec {
    let velocity: VectorField =
        Arc::new(|x, t| [phi(t) * x[0] * x[0], -2.0 * phi(t) * x[0] * x[1]]);
    let force: VectorField = Arc::new(move |x, t| {
        let psi = 2.0 * phi(t - dt) - phi(t - 2.0 * dt);
        let (px, py) = (x[0], x[1]);
        let visc = nu_bar * phi(t) + (nu - nu_bar) * psi;
        [
            dphi(t) * px * px + psi * phi(t) * 2.0 * px.powi(3) - visc * 2.0 + phi(t),
            dphi(t) * (-2.0 * px * py) + psi * phi(t) * 2.0 * px * px * py,
        ]
    });
    MemberSpec::new(
        nu,
        force,
        velocity.clone(),
        InitialVelocity::Field(velocity),
    )
}

pub fn polynomial_pressure(x: [f64; 2], t: f64) -> f64 {
    phi(t) * (x[0] - 0.5)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

pub fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, x| m.max(x.abs()))
}
