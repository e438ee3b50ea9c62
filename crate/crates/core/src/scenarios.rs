//! Built-in problems, error measurement, the convergence driver and the
//! energy-monitored run loop.

use std::sync::Arc;

use crate::assembly::{Assembler, OperatorSet};
use crate::ensemble::{
    zero_field, Bootstrap, EnsembleStepper, ExactSolution, InitialVelocity, MemberSpec, StepReport,
    VectorField,
};
use crate::error::{Error, Result};
use crate::fe::{Tabulation, TaylorHood};
use crate::mesh::{gen_unit_square, Point};
use crate::solve::SaddleSystem;

/// Quadrature degree of error norms, above the assembly degree so the
/// measured error is not polluted by quadrature error.
pub const ERROR_QUADRATURE_DEGREE: usize = 7;

pub const DEFAULT_BLOWUP_THRESHOLD: f64 = 1e6;

/// Member perturbation of the Green-Taylor family.
pub const GREEN_TAYLOR_PERTURBATION: f64 = 1e-3;

/// Viscosity of the Stokes solve producing the cylinder initial field.
pub const CYLINDER_STOKES_NU: f64 = 0.03;

/// Viscosity sets of the three offset-cylinder cases.
pub const CYLINDER_CASES: [[f64; 3]; 3] = [
    [0.021, 0.030, 0.039],
    [0.019, 0.030, 0.041],
    [0.015, 0.0394, 0.0356],
];

/// A Green-Taylor vortex array scaled by `1 + perturbation`:
///
/// ```text
/// u = a s(t) (-cos x sin y, sin x cos y),   p = -a^2 s(t)^2 (cos 2x + cos 2y) / 4,
/// s(t) = sin 2t
/// ```
///
/// The force is `u_t + (u.grad) u - nu lap u + grad p`, assembled from
/// those four terms. For this family the convection term and the pressure
/// gradient cancel.
#[derive(Clone)]
pub struct ManufacturedSolution {
    pub scale: f64,
    pub nu: f64,
    pub exact: ExactSolution,
    pub force: VectorField,
}

impl ManufacturedSolution {
    pub fn member(&self) -> MemberSpec {
        MemberSpec::from_exact(self.nu, self.force.clone(), self.exact.clone())
    }
}

pub fn green_taylor_member(perturbation: f64, nu: f64) -> Result<ManufacturedSolution> {
    if !(nu > 0.0 && nu.is_finite()) {
        return Err(Error::invalid(format!("viscosity {nu} must be positive")));
    }
    let a = 1.0 + perturbation;
    let s = |t: f64| (2.0 * t).sin();
    let ds = |t: f64| 2.0 * (2.0 * t).cos();
    let velocity: VectorField = Arc::new(move |p: Point, t| {
        let (x, y) = (p[0], p[1]);
        let k = a * s(t);
        [-k * x.cos() * y.sin(), k * x.sin() * y.cos()]
    });
    let gradient = Arc::new(move |p: Point, t: f64| {
        let (x, y) = (p[0], p[1]);
        let k = a * s(t);
        [
            [k * x.sin() * y.sin(), -k * x.cos() * y.cos()],
            [k * x.cos() * y.cos(), -k * x.sin() * y.sin()],
        ]
    });
    let pressure = Arc::new(move |p: Point, t: f64| {
        -0.25 * a * a * s(t).powi(2) * ((2.0 * p[0]).cos() + (2.0 * p[1]).cos())
    });
    let force: VectorField = Arc::new(move |p: Point, t| {
        let (x, y) = (p[0], p[1]);
        let (cx, sx, cy, sy) = (x.cos(), x.sin(), y.cos(), y.sin());
        let k = a * s(t);
        let u = [-k * cx * sy, k * sx * cy];
        let u_t = [-a * ds(t) * cx * sy, a * ds(t) * sx * cy];
        let grad = [[k * sx * sy, -k * cx * cy], [k * cx * cy, -k * sx * sy]];
        let conv = [
            u[0] * grad[0][0] + u[1] * grad[0][1],
            u[0] * grad[1][0] + u[1] * grad[1][1],
        ];
        // each component is an eigenfunction of the Laplacian with eigenvalue -2
        let lap = [-2.0 * u[0], -2.0 * u[1]];
        let kp = 0.25 * a * a * s(t).powi(2);
        let grad_p = [2.0 * kp * (2.0 * x).sin(), 2.0 * kp * (2.0 * y).sin()];
        [
            u_t[0] + conv[0] - nu * lap[0] + grad_p[0],
            u_t[1] + conv[1] - nu * lap[1] + grad_p[1],
        ]
    });
    Ok(ManufacturedSolution {
        scale: a,
        nu,
        exact: ExactSolution {
            velocity,
            gradient,
            pressure,
        },
        force,
    })
}

/// Counterclockwise rotational body force of the offset-cylinder problem.
pub fn cylinder_force() -> VectorField {
    Arc::new(|p: Point, _| {
        let (x, y) = (p[0], p[1]);
        let r = 1.0 - x * x - y * y;
        [-6.0 * y * r, 6.0 * x * r]
    })
}

/// Steady Stokes velocity for `force` with homogeneous Dirichlet data on the
/// whole boundary.
pub fn steady_stokes(
    asm: &Assembler,
    ops: &OperatorSet,
    nu: f64,
    force: &VectorField,
) -> Result<Vec<f64>> {
    let constrained = asm.space().boundary_dofs(None)?;
    let mut sys = SaddleSystem::new(ops, &constrained)?;
    sys.update(ops, 0.0, nu, None)?;
    let load = asm.assemble_load(|x| force(x, 0.0)).into_values();
    let zero = vec![0.0; sys.layout().constrained().len()];
    let mut sol = sys.solve(ops, &[load], &[zero])?;
    Ok(sol.remove(0).velocity)
}

/// Members of the offset-cylinder problem: rotational force, no slip on
/// both circles, the steady Stokes field (`nu = 0.03`) as initial data.
pub fn offset_cylinder_problem(
    asm: &Assembler,
    ops: &OperatorSet,
    nus: &[f64],
) -> Result<Vec<MemberSpec>> {
    let f = cylinder_force();
    let u0 = steady_stokes(asm, ops, CYLINDER_STOKES_NU, &f)?;
    Ok(nus
        .iter()
        .map(|&nu| {
            MemberSpec::new(
                nu,
                f.clone(),
                zero_field(),
                InitialVelocity::Coefficients(u0.clone()),
            )
        })
        .collect())
}

/// Squared `L2` and `H1`-seminorm errors of a discrete velocity against an
/// exact one at time `t`.
pub fn field_errors(
    space: &TaylorHood,
    tab: &Tabulation,
    u_h: &[f64],
    exact: &ExactSolution,
    t: f64,
) -> (f64, f64) {
    let mut l2 = 0.0;
    let mut h1 = 0.0;
    for e in 0..space.mesh().n_triangles() {
        let geo = space.geometry(e);
        for (q, b) in tab.basis.iter().enumerate() {
            let w = tab.rule.weights[q] * geo.area;
            let x = geo.map(tab.rule.points[q]);
            let (v, g) = space.eval_velocity(e, &geo, b, u_h);
            let ve = (exact.velocity)(x, t);
            let ge = (exact.gradient)(x, t);
            for c in 0..2 {
                l2 += w * (ve[c] - v[c]).powi(2);
                for d in 0..2 {
                    h1 += w * (ge[c][d] - g[c][d]).powi(2);
                }
            }
        }
    }
    (l2, h1)
}

/// Discrete-in-time error norms of one member.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ErrorSeries {
    /// `max_n ||e^n||`
    pub linf_l2: f64,
    /// `sqrt(dt sum_n ||grad e^n||^2)`
    pub l2_grad: f64,
    /// `sqrt(dt sum_n ||e^n||^2)`
    pub l2_l2: f64,
}

/// Accumulates [`ErrorSeries`] over time levels `n = 0..=N`.
#[derive(Debug, Clone)]
pub struct ErrorTracker {
    tab: Tabulation,
    dt: f64,
    max_l2: Vec<f64>,
    sum_grad: Vec<f64>,
    sum_l2: Vec<f64>,
}

impl ErrorTracker {
    pub fn new(members: usize, dt: f64) -> Result<Self> {
        Ok(ErrorTracker {
            tab: Tabulation::of_degree(ERROR_QUADRATURE_DEGREE)?,
            dt,
            max_l2: vec![0.0; members],
            sum_grad: vec![0.0; members],
            sum_l2: vec![0.0; members],
        })
    }

    pub fn record(&mut self, stepper: &EnsembleStepper) -> Result<()> {
        let st = stepper.state();
        let t = st.time();
        for (j, m) in stepper.members().iter().enumerate() {
            let exact = m.exact.as_ref().ok_or(Error::MissingExact(j + 1))?;
            let (l2, h1) = field_errors(stepper.space(), &self.tab, &st.current[j], exact, t);
            self.max_l2[j] = self.max_l2[j].max(l2.sqrt());
            self.sum_grad[j] += h1;
            self.sum_l2[j] += l2;
        }
        Ok(())
    }

    pub fn finish(&self) -> Vec<ErrorSeries> {
        (0..self.max_l2.len())
            .map(|j| ErrorSeries {
                linf_l2: self.max_l2[j],
                l2_grad: (self.dt * self.sum_grad[j]).sqrt(),
                l2_l2: (self.dt * self.sum_l2[j]).sqrt(),
            })
            .collect()
    }
}

/// `T / dt` as a step count; fails unless it is an integer to roundoff.
pub fn step_count(final_time: f64, dt: f64) -> Result<usize> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::invalid(format!("time step {dt} must be positive")));
    }
    if !(final_time >= dt) {
        return Err(Error::invalid(format!(
            "final time {final_time} must be at least dt = {dt}"
        )));
    }
    let n = (final_time / dt).round();
    if (n * dt - final_time).abs() > 1e-9 * final_time {
        return Err(Error::invalid(format!(
            "final time {final_time} is not a multiple of dt = {dt}"
        )));
    }
    Ok(n as usize)
}

/// One manufactured member of a convergence study.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StudyMember {
    pub nu: f64,
    pub perturbation: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceSettings {
    pub inv_h0: usize,
    pub dt0: f64,
    pub levels: usize,
    pub final_time: f64,
    pub members: Vec<StudyMember>,
    /// Run every member alone (J = 1) instead of as one ensemble.
    pub independent: bool,
    pub bootstrap: Bootstrap,
    pub threads: usize,
}

impl Default for ConvergenceSettings {
    fn default() -> Self {
        ConvergenceSettings {
            inv_h0: 10,
            dt0: 0.05,
            levels: 4,
            final_time: 1.0,
            members: vec![
                StudyMember {
                    nu: 0.2,
                    perturbation: GREEN_TAYLOR_PERTURBATION,
                },
                StudyMember {
                    nu: 0.3,
                    perturbation: -GREEN_TAYLOR_PERTURBATION,
                },
            ],
            independent: false,
            bootstrap: Bootstrap::Ensemble,
            threads: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceRow {
    pub level: usize,
    pub inv_h: usize,
    /// 1-based
    pub member: usize,
    pub errors: ErrorSeries,
    /// `log2` of the error ratio to the previous level, per norm; `None` on
    /// the first level.
    pub rates: Option<ErrorSeries>,
}

/// Runs the Green-Taylor ensemble on the unit square with `1/h = inv_h`
/// and returns per-member error norms over `[0, T]`.
pub fn manufactured_errors(
    inv_h: usize,
    dt: f64,
    final_time: f64,
    members: &[StudyMember],
    bootstrap: Bootstrap,
    threads: usize,
) -> Result<Vec<ErrorSeries>> {
    let steps = step_count(final_time, dt)?;
    let specs = members
        .iter()
        .map(|m| Ok(green_taylor_member(m.perturbation, m.nu)?.member()))
        .collect::<Result<Vec<_>>>()?;
    let asm = Assembler::with_threads(TaylorHood::new(gen_unit_square(inv_h)?), threads);
    let mut stepper = EnsembleStepper::new(asm, specs, dt)?.with_bootstrap(bootstrap);
    let mut tracker = ErrorTracker::new(members.len(), dt)?;
    tracker.record(&stepper)?;
    for _ in 0..steps {
        stepper.advance()?;
        tracker.record(&stepper)?;
    }
    Ok(tracker.finish())
}

fn rate(coarse: f64, fine: f64) -> f64 {
    (coarse / fine).log2()
}

/// Refines `h` and `dt` together by halving, level by level.
pub fn convergence_study(s: &ConvergenceSettings) -> Result<Vec<ConvergenceRow>> {
    if s.levels == 0 || s.members.is_empty() || s.inv_h0 == 0 {
        return Err(Error::invalid(
            "a study needs levels >= 1, members and 1/h >= 1",
        ));
    }
    let mut rows: Vec<ConvergenceRow> = Vec::new();
    let mut prev: Option<Vec<ErrorSeries>> = None;
    for level in 0..s.levels {
        let inv_h = s.inv_h0 << level;
        let dt = s.dt0 / (1u64 << level) as f64;
        let errs = if s.independent {
            let mut out = Vec::with_capacity(s.members.len());
            for m in &s.members {
                out.extend(manufactured_errors(
                    inv_h,
                    dt,
                    s.final_time,
                    &[*m],
                    s.bootstrap,
                    s.threads,
                )?);
            }
            out
        } else {
            manufactured_errors(inv_h, dt, s.final_time, &s.members, s.bootstrap, s.threads)?
        };
        for (j, e) in errs.iter().enumerate() {
            rows.push(ConvergenceRow {
                level,
                inv_h,
                member: j + 1,
                errors: *e,
                rates: prev.as_ref().map(|p| ErrorSeries {
                    linf_l2: rate(p[j].linf_l2, e.linf_l2),
                    l2_grad: rate(p[j].l2_grad, e.l2_grad),
                    l2_l2: rate(p[j].l2_l2, e.l2_l2),
                }),
            });
        }
        prev = Some(errs);
    }
    Ok(rows)
}

/// `(3u(t) - 4u(t - dt) + u(t - 2dt)) / (2dt) - u'(t)`
pub fn bdf2_quotient_error(
    u: &dyn Fn(f64) -> f64,
    du: &dyn Fn(f64) -> f64,
    t: f64,
    dt: f64,
) -> f64 {
    (3.0 * u(t) - 4.0 * u(t - dt) + u(t - 2.0 * dt)) / (2.0 * dt) - du(t)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bdf2Check {
    pub dts: Vec<f64>,
    /// Max over the time grid of the absolute quotient error, per `dt`.
    pub max_errors: Vec<f64>,
    /// `log2`-type rates between consecutive `dt`s.
    pub rates: Vec<f64>,
    /// Rate of the two finest steps, where the leading error term
    /// dominates; `None` when an error vanishes.
    pub order: Option<f64>,
}

/// Evaluates the quotient error on `times` for each step of `dts`.
pub fn bdf2_truncation_check(
    u: &dyn Fn(f64) -> f64,
    du: &dyn Fn(f64) -> f64,
    times: &[f64],
    dts: &[f64],
) -> Bdf2Check {
    let max_errors: Vec<f64> = dts
        .iter()
        .map(|&dt| {
            times
                .iter()
                .map(|&t| bdf2_quotient_error(u, du, t, dt).abs())
                .fold(0.0, f64::max)
        })
        .collect();
    let rates: Vec<f64> = dts
        .windows(2)
        .zip(max_errors.windows(2))
        .map(|(d, e)| (e[0] / e[1]).ln() / (d[0] / d[1]).ln())
        .collect();
    let order = rates.last().copied().filter(|r| r.is_finite());
    Bdf2Check {
        dts: dts.to_vec(),
        max_errors,
        rates,
        order,
    }
}

/// First step at which a member's energy exceeded the threshold or the
/// solution stopped being finite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Blowup {
    /// 1-based
    pub member: usize,
    pub step: usize,
    pub time: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyRow {
    pub step: usize,
    pub time: f64,
    /// 1-based
    pub member: usize,
    pub energy: f64,
    pub cfl_monitor: f64,
    pub blowup: bool,
}

/// Per-member energy series of a completed or diverged run, including the
/// initial level.
pub fn energy_series(
    initial: &[f64],
    reports: &[StepReport],
    blowup: Option<Blowup>,
    threshold: f64,
) -> Vec<EnergyRow> {
    let over = |e: f64| !e.is_finite() || e > threshold;
    let mut rows: Vec<EnergyRow> = initial
        .iter()
        .enumerate()
        .map(|(j, &e)| EnergyRow {
            step: 0,
            time: 0.0,
            member: j + 1,
            energy: e,
            cfl_monitor: 0.0,
            blowup: over(e),
        })
        .collect();
    for r in reports {
        for (j, m) in r.members.iter().enumerate() {
            rows.push(EnergyRow {
                step: r.step,
                time: r.time,
                member: j + 1,
                energy: m.energy,
                cfl_monitor: m.cfl_monitor,
                blowup: over(m.energy),
            });
        }
    }
    // A solve that produced non-finite values has no report; mark it.
    if let Some(b) = blowup {
        if reports.last().is_none_or(|r| r.step < b.step) {
            rows.push(EnergyRow {
                step: b.step,
                time: b.time,
                member: b.member,
                energy: f64::NAN,
                cfl_monitor: f64::NAN,
                blowup: true,
            });
        }
    }
    rows
}

/// Advances `stepper` for `steps` steps, stopping at the first blow-up.
/// `observe` sees the stepper after every completed step.
pub fn run_monitored(
    stepper: &mut EnsembleStepper,
    steps: usize,
    threshold: f64,
    mut observe: impl FnMut(&EnsembleStepper, &StepReport) -> Result<()>,
) -> Result<(Vec<StepReport>, Option<Blowup>)> {
    let mut reports = Vec::with_capacity(steps);
    for _ in 0..steps {
        let r = match stepper.advance() {
            Ok(r) => r,
            Err(Error::Divergence { member, step, time }) => {
                return Ok((reports, Some(Blowup { member, step, time })));
            }
            Err(e) => return Err(e),
        };
        observe(stepper, &r)?;
        let hit = r
            .members
            .iter()
            .position(|m| !m.energy.is_finite() || m.energy > threshold);
        let (step, time) = (r.step, r.time);
        reports.push(r);
        if let Some(j) = hit {
            return Ok((
                reports,
                Some(Blowup {
                    member: j + 1,
                    step,
                    time,
                }),
            ));
        }
    }
    Ok((reports, None))
}
