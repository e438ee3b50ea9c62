//! Ensemble time stepping.
//!
//! All `J` members advance with the same matrix
//!
//! ```text
//! 3/(2 dt) M + N(u_bar) + nu_bar K,      u_bar = mean_j (2 u_j^n - u_j^{n-1})
//! ```
//!
//! which is factorized once per step. Everything member-specific, i.e. the
//! convection by the fluctuation `u'_j = 2 u_j^n - u_j^{n-1} - u_bar` and the
//! viscosity deviation `nu_j - nu_bar`, is lagged to the right-hand side.
//!
//! Dof-wise means are summed in sorted order, which makes every result
//! independent of how the members are listed.

use std::fmt;
use std::sync::Arc;

use crate::assembly::{apply_dirichlet, Assembler, OperatorSet, SparseMatrix};
use crate::error::{Error, Result};
use crate::fe::{CoefficientVector, FieldKind, TaylorHood};
use crate::mesh::Point;
use crate::par;
use crate::solve::{factorize, Factorization, SaddleSolution, SaddleSystem};

pub type VectorField = Arc<dyn Fn(Point, f64) -> [f64; 2] + Send + Sync>;
pub type ScalarField = Arc<dyn Fn(Point, f64) -> f64 + Send + Sync>;
/// `grad[c][d] = d u_c / d x_d`.
pub type GradientField = Arc<dyn Fn(Point, f64) -> [[f64; 2]; 2] + Send + Sync>;

/// Slack for comparisons against rational bounds such as `sqrt(0.81) / 3`.
const BOUND_SLACK: f64 = 1e-12;

#[derive(Clone)]
pub struct ExactSolution {
    pub velocity: VectorField,
    pub gradient: GradientField,
    pub pressure: ScalarField,
}

#[derive(Clone)]
pub enum InitialVelocity {
    Field(VectorField),
    /// Velocity coefficients computed elsewhere, e.g. by a Stokes solve.
    Coefficients(Vec<f64>),
}

/// Data of one realization.
#[derive(Clone)]
pub struct MemberSpec {
    pub nu: f64,
    pub force: VectorField,
    pub boundary: VectorField,
    pub initial: InitialVelocity,
    pub exact: Option<ExactSolution>,
}

impl fmt::Debug for MemberSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MemberSpec")
            .field("nu", &self.nu)
            .field("exact", &self.exact.is_some())
            .finish_non_exhaustive()
    }
}

impl MemberSpec {
    pub fn new(
        nu: f64,
        force: VectorField,
        boundary: VectorField,
        initial: InitialVelocity,
    ) -> Self {
        MemberSpec {
            nu,
            force,
            boundary,
            initial,
            exact: None,
        }
    }

    /// Initial and boundary data are taken from `exact`.
    pub fn from_exact(nu: f64, force: VectorField, exact: ExactSolution) -> Self {
        MemberSpec {
            nu,
            force,
            boundary: exact.velocity.clone(),
            initial: InitialVelocity::Field(exact.velocity.clone()),
            exact: Some(exact),
        }
    }
}

pub fn zero_field() -> VectorField {
    Arc::new(|_, _| [0.0, 0.0])
}

/// Mean of `values`, summed in ascending order.
pub fn symmetric_mean(values: &mut [f64]) -> f64 {
    values.sort_unstable_by(f64::total_cmp);
    values.iter().sum::<f64>() / values.len() as f64
}

fn dofwise_mean(fields: &[Vec<f64>]) -> Vec<f64> {
    let n = fields[0].len();
    let mut buf = vec![0.0; fields.len()];
    (0..n)
        .map(|i| {
            for (b, f) in buf.iter_mut().zip(fields) {
                *b = f[i];
            }
            symmetric_mean(&mut buf)
        })
        .collect()
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

fn velocity(values: Vec<f64>) -> CoefficientVector {
    CoefficientVector::from_raw(FieldKind::Velocity, values)
}

/// Discrete fields of all members at time level `step`.
#[derive(Debug, Clone)]
pub struct EnsembleState {
    pub step: usize,
    pub dt: f64,
    pub nu_bar: f64,
    /// `u_j^n`
    pub current: Vec<CoefficientVector>,
    /// `u_j^{n-1}`; equal to `current` before the first step.
    pub previous: Vec<CoefficientVector>,
    /// `p_j^n`; zero before the first step.
    pub pressure: Vec<CoefficientVector>,
}

impl EnsembleState {
    pub fn time(&self) -> f64 {
        self.step as f64 * self.dt
    }

    pub fn n_members(&self) -> usize {
        self.current.len()
    }

    fn require_history(&self) -> Result<()> {
        if self.step == 0 {
            return Err(Error::invalid(
                "extrapolation needs two time levels (n >= 1)",
            ));
        }
        Ok(())
    }

    fn extrapolants(&self) -> Vec<Vec<f64>> {
        self.current
            .iter()
            .zip(&self.previous)
            .map(|(c, p)| c.iter().zip(p.iter()).map(|(c, p)| 2.0 * c - p).collect())
            .collect()
    }

    /// `2 u_j^n - u_j^{n-1}`.
    pub fn extrapolant(&self, j: usize) -> Result<CoefficientVector> {
        self.require_history()?;
        let (c, p) = (&self.current[j], &self.previous[j]);
        Ok(velocity(
            c.iter().zip(p.iter()).map(|(c, p)| 2.0 * c - p).collect(),
        ))
    }

    /// All fluctuations `u'_j^n`.
    pub fn fluctuations(&self) -> Result<Vec<CoefficientVector>> {
        self.require_history()?;
        let ext = self.extrapolants();
        let mean = dofwise_mean(&ext);
        Ok(ext.iter().map(|e| velocity(sub(e, &mean))).collect())
    }
}

/// `u_bar^n = mean_j (2 u_j^n - u_j^{n-1})`.
pub fn ensemble_mean(state: &EnsembleState) -> Result<CoefficientVector> {
    state.require_history()?;
    Ok(velocity(dofwise_mean(&state.extrapolants())))
}

/// `u'_j^n = 2 u_j^n - u_j^{n-1} - u_bar^n`.
pub fn fluctuation(state: &EnsembleState, j: usize) -> Result<CoefficientVector> {
    if j >= state.n_members() {
        return Err(Error::invalid(format!("member {j} out of range")));
    }
    state.require_history()?;
    let ext = state.extrapolants();
    Ok(velocity(sub(&ext[j], &dofwise_mean(&ext))))
}

/// `E = u^T M u / 2`.
pub fn kinetic_energy(mass: &SparseMatrix, u: &[f64]) -> f64 {
    0.5 * mass.bilinear(u, u)
}

/// `m_j = dt ||grad u'_j||^2 / (nu_bar h)` per member, i.e. the time-step
/// condition without its unknown generic constant.
pub fn cfl_monitor(
    state: &EnsembleState,
    stiffness: &SparseMatrix,
    h_max: f64,
) -> Result<Vec<f64>> {
    let scale = state.dt / (state.nu_bar * h_max);
    Ok(state
        .fluctuations()?
        .iter()
        .map(|f| scale * stiffness.bilinear(f, f))
        .collect())
}

pub fn mean_viscosity(nus: &[f64]) -> f64 {
    symmetric_mean(&mut nus.to_vec())
}

/// Per-member viscosity deviation against `sqrt(mu) / 3` and against the
/// limit `1 / 3`.
#[derive(Debug, Clone, PartialEq)]
pub struct ViscosityReport {
    pub nu_bar: f64,
    pub mu: f64,
    /// `sqrt(mu) / 3`
    pub bound: f64,
    /// `(nu_j - nu_bar) / nu_bar`; sums to zero.
    pub deviation: Vec<f64>,
    /// `|nu_j - nu_bar| / nu_bar`
    pub ratio: Vec<f64>,
    pub pass_mu: Vec<bool>,
    pub pass_third: Vec<bool>,
}

impl ViscosityReport {
    pub fn all_pass_third(&self) -> bool {
        self.pass_third.iter().all(|&p| p)
    }

    pub fn all_pass_mu(&self) -> bool {
        self.pass_mu.iter().all(|&p| p)
    }

    /// 1-based members failing the `1/3` bound.
    pub fn flagged(&self) -> Vec<usize> {
        (0..self.ratio.len())
            .filter(|&j| !self.pass_third[j])
            .map(|j| j + 1)
            .collect()
    }
}

pub fn check_viscosity_condition(nus: &[f64], mu: f64) -> Result<ViscosityReport> {
    if !(0.0..1.0).contains(&mu) {
        return Err(Error::invalid(format!("mu = {mu} must lie in [0, 1)")));
    }
    if nus.is_empty() {
        return Err(Error::invalid("no members"));
    }
    if let Some(nu) = nus.iter().find(|nu| !(**nu > 0.0 && nu.is_finite())) {
        return Err(Error::invalid(format!("viscosity {nu} must be positive")));
    }
    let nu_bar = mean_viscosity(nus);
    let bound = mu.sqrt() / 3.0;
    let deviation: Vec<f64> = nus.iter().map(|nu| (nu - nu_bar) / nu_bar).collect();
    let ratio: Vec<f64> = deviation.iter().map(|d| d.abs()).collect();
    Ok(ViscosityReport {
        nu_bar,
        mu,
        bound,
        pass_mu: ratio.iter().map(|&r| r <= bound + BOUND_SLACK).collect(),
        pass_third: ratio
            .iter()
            .map(|&r| r <= 1.0 / 3.0 + BOUND_SLACK)
            .collect(),
        deviation,
        ratio,
    })
}

/// Per-member quantities after a step.
#[derive(Debug, Clone, PartialEq)]
pub struct MemberReport {
    pub energy: f64,
    pub cfl_monitor: f64,
    /// `||B u||_inf`
    pub divergence_residual: f64,
    /// Multiplier of the mean-zero pressure constraint.
    pub multiplier: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub time: f64,
    pub members: Vec<MemberReport>,
}

/// How `u^1` is computed from `u^0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Bootstrap {
    /// First-order ensemble step: one shared matrix.
    #[default]
    Ensemble,
    /// Backward Euler with each member's own viscosity and convecting
    /// field: one factorization per member.
    PerMember,
}

/// Owns the operators, the shared saddle system and the member states.
pub struct EnsembleStepper {
    assembler: Assembler,
    ops: OperatorSet,
    system: SaddleSystem,
    members: Vec<MemberSpec>,
    state: EnsembleState,
    bootstrap: Bootstrap,
}

impl fmt::Debug for EnsembleStepper {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EnsembleStepper")
            .field("members", &self.members)
            .field("step", &self.state.step)
            .field("factorizations", &self.system.factorization_count())
            .finish_non_exhaustive()
    }
}

impl EnsembleStepper {
    pub fn new(assembler: Assembler, members: Vec<MemberSpec>, dt: f64) -> Result<Self> {
        let ops = assembler.operators();
        Self::with_operators(assembler, ops, members, dt)
    }

    /// Like `new` with operators assembled by the caller.
    pub fn with_operators(
        assembler: Assembler,
        ops: OperatorSet,
        members: Vec<MemberSpec>,
        dt: f64,
    ) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::invalid("an ensemble needs at least one member"));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::invalid(format!("time step {dt} must be positive")));
        }
        let nus: Vec<f64> = members.iter().map(|m| m.nu).collect();
        if let Some(nu) = nus.iter().find(|nu| !(**nu > 0.0 && nu.is_finite())) {
            return Err(Error::invalid(format!("viscosity {nu} must be positive")));
        }
        let space = assembler.space();
        let constrained = space.boundary_dofs(None)?;
        let system = SaddleSystem::new(&ops, &constrained)?;
        let mut current = Vec::with_capacity(members.len());
        for m in &members {
            current.push(match &m.initial {
                InitialVelocity::Field(f) => space.interpolate_velocity(|p| f(p, 0.0)),
                InitialVelocity::Coefficients(c) => {
                    CoefficientVector::from_values(space, FieldKind::Velocity, c.clone())?
                }
            });
        }
        let state = EnsembleState {
            step: 0,
            dt,
            nu_bar: mean_viscosity(&nus),
            previous: current.clone(),
            pressure: vec![CoefficientVector::zeros(space, FieldKind::Pressure); members.len()],
            current,
        };
        Ok(EnsembleStepper {
            assembler,
            ops,
            system,
            members,
            state,
            bootstrap: Bootstrap::Ensemble,
        })
    }

    pub fn with_bootstrap(mut self, bootstrap: Bootstrap) -> Self {
        self.bootstrap = bootstrap;
        self
    }

    pub fn bootstrap(&self) -> Bootstrap {
        self.bootstrap
    }

    pub fn state(&self) -> &EnsembleState {
        &self.state
    }

    pub fn members(&self) -> &[MemberSpec] {
        &self.members
    }

    pub fn assembler(&self) -> &Assembler {
        &self.assembler
    }

    pub fn space(&self) -> &TaylorHood {
        self.assembler.space()
    }

    pub fn operators(&self) -> &OperatorSet {
        &self.ops
    }

    /// Sorted velocity dofs carrying Dirichlet data.
    pub fn constrained(&self) -> &[usize] {
        self.system.layout().constrained()
    }

    pub fn factorization_count(&self) -> usize {
        self.system.factorization_count()
    }

    /// Restarts from two stored time levels `u^{step-1}`, `u^step`.
    pub fn set_history(
        &mut self,
        previous: Vec<Vec<f64>>,
        current: Vec<Vec<f64>>,
        step: usize,
    ) -> Result<()> {
        let j = self.members.len();
        if previous.len() != j || current.len() != j {
            return Err(Error::DimensionMismatch {
                expected: j,
                got: previous.len().min(current.len()),
            });
        }
        if step == 0 {
            return Err(Error::invalid("restart step must be at least 1"));
        }
        let space = self.assembler.space();
        let wrap = |v: Vec<Vec<f64>>| -> Result<Vec<CoefficientVector>> {
            v.into_iter()
                .map(|x| CoefficientVector::from_values(space, FieldKind::Velocity, x))
                .collect()
        };
        self.state.previous = wrap(previous)?;
        self.state.current = wrap(current)?;
        self.state.step = step;
        Ok(())
    }

    /// Bootstrap at `n = 0`, second-order step afterwards.
    pub fn advance(&mut self) -> Result<StepReport> {
        if self.state.step == 0 {
            match self.bootstrap {
                Bootstrap::Ensemble => self.bootstrap_first_step(),
                Bootstrap::PerMember => self.bootstrap_per_member(),
            }
        } else {
            self.step()
        }
    }

    /// First-order ensemble step from `u^0` to `u^1`: matrix
    /// `M/dt + N(u_bar^0) + nu_bar K` with `u_bar^0 = mean_j u_j^0`.
    pub fn bootstrap_first_step(&mut self) -> Result<StepReport> {
        if self.state.step != 0 {
            return Err(Error::invalid("bootstrap step only applies at n = 0"));
        }
        let dt = self.state.dt;
        let u0: Vec<Vec<f64>> = self.state.current.iter().map(|u| u.to_vec()).collect();
        let mean = dofwise_mean(&u0);
        let conv = self.assembler.assemble_convection(&mean)?;
        self.system
            .update(&self.ops, 1.0 / dt, self.state.nu_bar, Some(&conv))?;
        let loads = self.loads(dt, &u0, &mean, |j| self.ops.mass.matvec(&u0[j]), 1.0 / dt)?;
        let sols = self.solve_members(&loads)?;
        self.finish(sols)
    }

    /// Backward Euler from `u^0` to `u^1` for each member separately:
    /// matrix `M/dt + N(u_j^0) + nu_j K`, no explicit terms.
    pub fn bootstrap_per_member(&mut self) -> Result<StepReport> {
        if self.state.step != 0 {
            return Err(Error::invalid("bootstrap step only applies at n = 0"));
        }
        let dt = self.state.dt;
        let t = dt;
        let mut sols = Vec::with_capacity(self.members.len());
        for j in 0..self.members.len() {
            let u0 = self.state.current[j].to_vec();
            let conv = self.assembler.assemble_convection(&u0)?;
            self.system
                .update(&self.ops, 1.0 / dt, self.members[j].nu, Some(&conv))?;
            let f = &self.members[j].force;
            let mut load = self.assembler.assemble_load(|x| f(x, t)).into_values();
            for (l, h) in load.iter_mut().zip(self.ops.mass.matvec(&u0)) {
                *l += h / dt;
            }
            let boundary = self.boundary_values(j, t);
            let mut s = self.system.solve(&self.ops, &[load], &[boundary])?;
            sols.push(s.remove(0));
        }
        self.finish(sols)
    }

    /// Second-order step from `n >= 1` to `n + 1`.
    pub fn step(&mut self) -> Result<StepReport> {
        if self.state.step == 0 {
            return Err(Error::invalid(
                "second-order step needs n >= 1; bootstrap first",
            ));
        }
        let dt = self.state.dt;
        let ext = self.state.extrapolants();
        let mean = dofwise_mean(&ext);
        let conv = self.assembler.assemble_convection(&mean)?;
        self.system
            .update(&self.ops, 1.5 / dt, self.state.nu_bar, Some(&conv))?;
        let st = &self.state;
        let history = |j: usize| {
            let h: Vec<f64> = st.current[j]
                .iter()
                .zip(st.previous[j].iter())
                .map(|(c, p)| 4.0 * c - p)
                .collect();
            self.ops.mass.matvec(&h)
        };
        let loads = self.loads(dt, &ext, &mean, history, 0.5 / dt)?;
        let sols = self.solve_members(&loads)?;
        self.finish(sols)
    }

    /// `F_j(t_{n+1}) + c M h_j - b*(e_j - mean, e_j, .) - (nu_j - nu_bar) K e_j`
    /// with `M h_j` supplied by `mass_history`.
    fn loads(
        &self,
        dt: f64,
        ext: &[Vec<f64>],
        mean: &[f64],
        mass_history: impl Fn(usize) -> Vec<f64> + Sync,
        c: f64,
    ) -> Result<Vec<Vec<f64>>> {
        let t = (self.state.step + 1) as f64 * dt;
        let nu_bar = self.state.nu_bar;
        let asm = &self.assembler;
        let ops = &self.ops;
        let out = par::map(asm.threads(), &self.members, |j, m| -> Result<Vec<f64>> {
            let f = &m.force;
            let mut load = asm.assemble_load(|x| f(x, t)).into_values();
            for (l, h) in load.iter_mut().zip(mass_history(j)) {
                *l += c * h;
            }
            let fl = sub(&ext[j], mean);
            if fl.iter().any(|&v| v != 0.0) {
                let adv = asm.trilinear_action(&fl, &ext[j])?;
                for (l, a) in load.iter_mut().zip(adv.iter()) {
                    *l -= a;
                }
            }
            let dnu = m.nu - nu_bar;
            if dnu != 0.0 {
                let k = ops.stiffness.matvec(&ext[j]);
                for (l, kv) in load.iter_mut().zip(k) {
                    *l -= dnu * kv;
                }
            }
            Ok(load)
        });
        out.into_iter().collect()
    }

    /// Dirichlet values of member `j` at the constrained dofs.
    fn boundary_values(&self, j: usize, t: f64) -> Vec<f64> {
        let nn = self.space().n_nodes();
        let nodes = self.space().nodes();
        let g = &self.members[j].boundary;
        self.system
            .layout()
            .constrained()
            .iter()
            .map(|&d| g(nodes[d % nn], t)[d / nn])
            .collect()
    }

    fn solve_members(&self, loads: &[Vec<f64>]) -> Result<Vec<SaddleSolution>> {
        let t = (self.state.step + 1) as f64 * self.state.dt;
        let boundary: Vec<Vec<f64>> = (0..self.members.len())
            .map(|j| self.boundary_values(j, t))
            .collect();
        self.system.solve(&self.ops, loads, &boundary)
    }

    fn finish(&mut self, sols: Vec<SaddleSolution>) -> Result<StepReport> {
        let step = self.state.step + 1;
        let t = step as f64 * self.state.dt;
        for (j, s) in sols.iter().enumerate() {
            if s.velocity.iter().chain(&s.pressure).any(|v| !v.is_finite()) {
                return Err(Error::Divergence {
                    member: j + 1,
                    step,
                    time: t,
                });
            }
        }
        let mut multipliers = Vec::with_capacity(sols.len());
        let st = &mut self.state;
        st.previous = std::mem::take(&mut st.current);
        st.current.clear();
        st.pressure.clear();
        for s in sols {
            st.current.push(velocity(s.velocity));
            st.pressure
                .push(CoefficientVector::from_raw(FieldKind::Pressure, s.pressure));
            multipliers.push(s.multiplier);
        }
        st.step = step;
        Ok(self.report(&multipliers))
    }

    fn report(&self, multipliers: &[f64]) -> StepReport {
        let st = &self.state;
        let fl = st.fluctuations().expect("n >= 1 after a step");
        let scale = st.dt / (st.nu_bar * self.space().mesh().h_max());
        let ops = &self.ops;
        let members = par::map(self.assembler.threads(), &st.current, |j, u| MemberReport {
            energy: kinetic_energy(&ops.mass, u),
            cfl_monitor: scale * ops.stiffness.bilinear(&fl[j], &fl[j]),
            divergence_residual: ops
                .divergence
                .matvec(u)
                .iter()
                .fold(0.0, |m, v| m.max(v.abs())),
            multiplier: multipliers[j],
        });
        StepReport {
            step: st.step,
            time: st.time(),
            members,
        }
    }
}

/// Discrete dual norm `||F||_{-1}^2 = F^T z`, `K z = F` with every boundary
/// dof removed: the Riesz representative of the load in the `H^1_0`
/// seminorm.
#[derive(Debug)]
pub struct DualNorm {
    lu: Factorization,
    free: Vec<usize>,
}

impl DualNorm {
    pub fn new(stiffness: &SparseMatrix, constrained: &[usize]) -> Result<Self> {
        let r = apply_dirichlet(stiffness, &[], constrained, &vec![0.0; constrained.len()])?;
        Ok(DualNorm {
            lu: factorize(&r.matrix)?,
            free: r.free,
        })
    }

    pub fn squared(&self, load: &[f64]) -> Result<f64> {
        let f: Vec<f64> = self.free.iter().map(|&i| load[i]).collect();
        let z = self.lu.solve(&f)?;
        Ok(f.iter().zip(&z).map(|(a, b)| a * b).sum())
    }
}

/// Squared norms of one member at time level `n`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepNorms {
    /// `||u^n||^2`
    pub l2: f64,
    /// `||2 u^n - u^{n-1}||^2`
    pub extrapolant: f64,
    /// `||u^n - 2 u^{n-1} + u^{n-2}||^2`; unused at `n = 1`.
    pub curvature: f64,
    /// `||grad u^n||^2`
    pub gradient: f64,
    /// `||f^n||_{-1}^2`
    pub force: f64,
}

/// Both sides of the energy inequality at `N`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundPoint {
    pub step: usize,
    pub lhs: f64,
    pub rhs: f64,
}

impl BoundPoint {
    pub fn holds(&self) -> bool {
        self.lhs <= self.rhs * (1.0 + BOUND_SLACK)
    }
}

/// Accumulates the long-time energy bound
///
/// ```text
/// (||u^N||^2 + ||2u^N - u^{N-1}||^2)/4 + sum_{n<N} ||u^{n+1} - 2u^n + u^{n-1}||^2/8
///     + nu_bar dt kappa_j ||grad u^N||^2
///   <= sum_{n<N} c dt/nu_bar ||f^{n+1}||_{-1}^2
///     + (||u^1||^2 + ||2u^1 - u^0||^2)/4 + nu_bar dt kappa_j ||grad u^1||^2
/// ```
///
/// with `c = (sqrt(mu) + eps) / (2 eps (2 - sqrt(mu)))` and
/// `kappa_j = (sqrt(mu) + eps)/(2 - sqrt(mu))
///   * (sqrt(mu)/2 (2 + eps)/(sqrt(mu) + eps) - 3|nu_j - nu_bar|/(2 nu_bar))`.
/// `mu` and `eps` are analysis parameters only.
#[derive(Debug, Clone)]
pub struct StabilityBound {
    nu_bar: f64,
    dt: f64,
    kappa: Vec<f64>,
    data_coef: f64,
    last_step: usize,
    initial: Vec<f64>,
    curvature_sum: Vec<f64>,
    force_sum: Vec<f64>,
    /// `u^{n-1}` of the last observed state, for the curvature term.
    lagged: Option<Vec<Vec<f64>>>,
}

impl StabilityBound {
    pub fn new(nus: &[f64], dt: f64, mu: f64, eps: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&mu) {
            return Err(Error::invalid(format!("mu = {mu} must lie in [0, 1)")));
        }
        let s = mu.sqrt();
        if !(eps > 0.0 && eps <= 2.0 - 2.0 * s + BOUND_SLACK) {
            return Err(Error::invalid(format!(
                "eps = {eps} must lie in (0, 2 - 2 sqrt(mu)]"
            )));
        }
        let nu_bar = mean_viscosity(nus);
        let kappa = nus
            .iter()
            .map(|nu| {
                (s + eps) / (2.0 - s)
                    * (0.5 * s * (2.0 + eps) / (s + eps) - 1.5 * (nu - nu_bar).abs() / nu_bar)
            })
            .collect();
        Ok(StabilityBound {
            nu_bar,
            dt,
            kappa,
            data_coef: (s + eps) / (2.0 * eps * (2.0 - s)),
            last_step: 0,
            initial: vec![0.0; nus.len()],
            curvature_sum: vec![0.0; nus.len()],
            force_sum: vec![0.0; nus.len()],
            lagged: None,
        })
    }

    pub fn kappa(&self) -> &[f64] {
        &self.kappa
    }

    /// Feeds the norms of level `step`; levels must arrive as 1, 2, 3, ...
    /// Returns both sides for `step >= 2`.
    pub fn record(&mut self, step: usize, norms: &[StepNorms]) -> Result<Option<Vec<BoundPoint>>> {
        if step != self.last_step + 1 {
            return Err(Error::invalid(format!(
                "expected level {}, got {step}",
                self.last_step + 1
            )));
        }
        if norms.len() != self.kappa.len() {
            return Err(Error::DimensionMismatch {
                expected: self.kappa.len(),
                got: norms.len(),
            });
        }
        self.last_step = step;
        let g = self.nu_bar * self.dt;
        let mut out = Vec::with_capacity(norms.len());
        for (j, n) in norms.iter().enumerate() {
            let level = 0.25 * (n.l2 + n.extrapolant) + g * self.kappa[j] * n.gradient;
            if step == 1 {
                self.initial[j] = level;
                continue;
            }
            self.curvature_sum[j] += n.curvature;
            self.force_sum[j] += n.force;
            out.push(BoundPoint {
                step,
                lhs: level + 0.125 * self.curvature_sum[j],
                rhs: self.data_coef * self.dt / self.nu_bar * self.force_sum[j] + self.initial[j],
            });
        }
        Ok((step >= 2).then_some(out))
    }

    /// Computes the norms from the stepper's current state and records
    /// them. `dual` evaluates `||f^n||_{-1}`.
    pub fn observe(
        &mut self,
        stepper: &EnsembleStepper,
        dual: &DualNorm,
    ) -> Result<Option<Vec<BoundPoint>>> {
        let st = stepper.state();
        let ops = stepper.operators();
        let t = st.time();
        let mut norms = Vec::with_capacity(st.n_members());
        for (j, m) in stepper.members().iter().enumerate() {
            let u = &st.current[j];
            let p = &st.previous[j];
            let ext: Vec<f64> = u.iter().zip(p.iter()).map(|(a, b)| 2.0 * a - b).collect();
            let curvature = match &self.lagged {
                Some(l) => {
                    let c: Vec<f64> = u
                        .iter()
                        .zip(p.iter())
                        .zip(&l[j])
                        .map(|((a, b), c)| a - 2.0 * b + c)
                        .collect();
                    ops.mass.bilinear(&c, &c)
                }
                None => 0.0,
            };
            let f = &m.force;
            let load = stepper.assembler().assemble_load(|x| f(x, t));
            norms.push(StepNorms {
                l2: ops.mass.bilinear(u, u),
                extrapolant: ops.mass.bilinear(&ext, &ext),
                curvature,
                gradient: ops.stiffness.bilinear(u, u),
                force: dual.squared(&load)?,
            });
        }
        self.lagged = Some(st.previous.iter().map(|p| p.to_vec()).collect());
        self.record(st.step, &norms)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::gen_unit_square;

    fn assembler(n: usize) -> Assembler {
        Assembler::new(TaylorHood::new(gen_unit_square(n).unwrap()))
    }

    fn state_from(current: Vec<Vec<f64>>, previous: Vec<Vec<f64>>) -> EnsembleState {
        EnsembleState {
            step: 1,
            dt: 0.1,
            nu_bar: 1.0,
            pressure: Vec::new(),
            current: current.into_iter().map(velocity).collect(),
            previous: previous.into_iter().map(velocity).collect(),
        }
    }

    fn swirl(scale: f64) -> VectorField {
        Arc::new(move |p: Point, t: f64| {
            let b = p[0] * (1.0 - p[0]) * p[1] * (1.0 - p[1]);
            [scale * b * (1.0 + t), -scale * b * t]
        })
    }

    fn members(nus: &[f64]) -> Vec<MemberSpec> {
        nus.iter()
            .enumerate()
            .map(|(j, &nu)| {
                MemberSpec::new(
                    nu,
                    swirl(1.0 + j as f64),
                    zero_field(),
                    InitialVelocity::Field(Arc::new(move |p: Point, _| {
                        let b = (p[0] * (1.0 - p[0]) * p[1] * (1.0 - p[1])).powi(2);
                        [b * (1.0 + j as f64), -b]
                    })),
                )
            })
            .collect()
    }

    #[test]
    fn mean_single_member_is_extrapolant() {
        let st = state_from(vec![vec![1.0, 2.0, -3.0]], vec![vec![0.5, 1.0, 1.0]]);
        assert_eq!(ensemble_mean(&st).unwrap().to_vec(), vec![1.5, 3.0, -7.0]);
        assert!(fluctuation(&st, 0).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mean_matches_direct_formula() {
        let a = vec![0.3, -1.7, 2.2];
        let b = vec![1.1, 0.4, -0.9];
        let pa = vec![0.1, 0.2, 0.3];
        let pb = vec![-0.5, 0.7, 0.05];
        let st = state_from(vec![a.clone(), b.clone()], vec![pa.clone(), pb.clone()]);
        let m = ensemble_mean(&st).unwrap();
        for i in 0..3 {
            let direct = ((2.0 * a[i] - pa[i]) + (2.0 * b[i] - pb[i])) / 2.0;
            assert!((m[i] - direct).abs() <= 1e-15);
        }
        let f0 = fluctuation(&st, 0).unwrap();
        let f1 = fluctuation(&st, 1).unwrap();
        for i in 0..3 {
            assert!((f0[i] + f1[i]).abs() <= 1e-15);
        }
    }

    #[test]
    fn mean_is_order_independent() {
        let fields = vec![vec![0.1, 1e16], vec![0.2, 1.0], vec![0.3, -1e16]];
        let m = dofwise_mean(&fields);
        let rev: Vec<Vec<f64>> = fields.iter().rev().cloned().collect();
        assert_eq!(m, dofwise_mean(&rev));
        let rot = vec![fields[1].clone(), fields[2].clone(), fields[0].clone()];
        assert_eq!(m, dofwise_mean(&rot));
    }

    #[test]
    fn mean_needs_two_levels() {
        let mut st = state_from(vec![vec![1.0]], vec![vec![1.0]]);
        st.step = 0;
        assert!(ensemble_mean(&st).is_err());
        assert!(fluctuation(&st, 0).is_err());
    }

    #[test]
    fn viscosity_pair_ratio_one_fifth() {
        let r = check_viscosity_condition(&[0.2, 0.3], 0.5).unwrap();
        assert!((r.nu_bar - 0.25).abs() < 1e-16);
        for &x in &r.ratio {
            assert!((x - 0.2).abs() < 1e-15);
        }
        assert!(r.all_pass_third());
    }

    #[test]
    fn viscosity_condition_rejects_bad_mu() {
        assert!(check_viscosity_condition(&[0.1], 1.0).is_err());
        assert!(check_viscosity_condition(&[0.1], -0.1).is_err());
        assert!(check_viscosity_condition(&[0.1, -0.1], 0.5).is_err());
    }

    #[test]
    fn deviations_sum_to_zero() {
        let r = check_viscosity_condition(&[0.015, 0.0394, 0.0356], 0.5).unwrap();
        assert!(r.deviation.iter().sum::<f64>().abs() < 1e-14);
    }

    #[test]
    fn energy_of_constant_field() {
        let asm = assembler(4);
        let m = asm.assemble_mass();
        let u = asm.space().interpolate_velocity(|_| [1.0, 0.0]);
        assert!((kinetic_energy(&m, &u) - 0.5).abs() < 1e-12);
        assert_eq!(kinetic_energy(&m, &vec![0.0; u.len()]), 0.0);
    }

    #[test]
    fn zero_data_stays_zero() {
        let m = MemberSpec::new(
            0.1,
            zero_field(),
            zero_field(),
            InitialVelocity::Field(zero_field()),
        );
        let mut s = EnsembleStepper::new(assembler(3), vec![m.clone(), m], 0.1).unwrap();
        for _ in 0..3 {
            let r = s.advance().unwrap();
            assert!(r.members.iter().all(|m| m.energy == 0.0));
        }
        assert!(s
            .state()
            .current
            .iter()
            .all(|u| u.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn one_factorization_per_step() {
        let mut s = EnsembleStepper::new(assembler(3), members(&[0.1, 0.2, 0.15]), 0.05).unwrap();
        for k in 1..=4 {
            s.advance().unwrap();
            assert_eq!(s.factorization_count(), k);
        }
    }

    #[test]
    fn second_order_step_requires_bootstrap() {
        let mut s = EnsembleStepper::new(assembler(2), members(&[0.1]), 0.05).unwrap();
        assert!(s.step().is_err());
        s.bootstrap_first_step().unwrap();
        assert!(s.bootstrap_first_step().is_err());
    }

    #[test]
    fn per_member_bootstrap_matches_solo_first_steps() {
        let ms = members(&[0.1, 0.25, 0.16]);
        let mut s = EnsembleStepper::new(assembler(3), ms.clone(), 0.05)
            .unwrap()
            .with_bootstrap(Bootstrap::PerMember);
        s.advance().unwrap();
        assert_eq!(s.factorization_count(), 3);
        for (j, m) in ms.into_iter().enumerate() {
            let mut solo = EnsembleStepper::new(assembler(3), vec![m], 0.05).unwrap();
            solo.advance().unwrap();
            let d = s.state().current[j]
                .iter()
                .zip(solo.state().current[0].iter())
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            assert!(d <= 1e-13, "member {j}: {d:e}");
        }
        s.advance().unwrap();
        assert_eq!(s.factorization_count(), 4);
        assert!(s.bootstrap_per_member().is_err());
    }

    #[test]
    fn identical_members_identical_solutions() {
        let m = members(&[0.1]).pop().unwrap();
        let mut s =
            EnsembleStepper::new(assembler(3), vec![m.clone(), m.clone(), m], 0.05).unwrap();
        for _ in 0..3 {
            s.advance().unwrap();
        }
        let st = s.state();
        assert_eq!(st.current[0].to_vec(), st.current[1].to_vec());
        assert_eq!(st.current[0].to_vec(), st.current[2].to_vec());
    }

    #[test]
    fn fluctuations_sum_to_zero_and_divergence_free() {
        let mut s = EnsembleStepper::new(assembler(4), members(&[0.1, 0.25, 0.16]), 0.05).unwrap();
        for _ in 0..4 {
            let r = s.advance().unwrap();
            for m in &r.members {
                assert!(m.divergence_residual < 1e-10, "{}", m.divergence_residual);
                assert!(m.cfl_monitor >= 0.0);
            }
            let fl = s.state().fluctuations().unwrap();
            let scale = fl
                .iter()
                .flat_map(|f| f.iter())
                .fold(1.0f64, |m, v| m.max(v.abs()));
            for i in 0..fl[0].len() {
                let sum: f64 = fl.iter().map(|f| f[i]).sum();
                assert!(sum.abs() <= 1e-14 * scale);
            }
        }
    }

    #[test]
    fn permuted_members_give_permuted_results() {
        let ms = members(&[0.1, 0.25, 0.16]);
        let perm = [2usize, 0, 1];
        let permuted: Vec<MemberSpec> = perm.iter().map(|&k| ms[k].clone()).collect();
        let mut a = EnsembleStepper::new(assembler(3), ms, 0.05).unwrap();
        let mut b = EnsembleStepper::new(assembler(3), permuted, 0.05).unwrap();
        for _ in 0..3 {
            a.advance().unwrap();
            b.advance().unwrap();
        }
        for (k, &src) in perm.iter().enumerate() {
            assert_eq!(
                b.state().current[k].to_vec(),
                a.state().current[src].to_vec()
            );
            assert_eq!(
                b.state().pressure[k].to_vec(),
                a.state().pressure[src].to_vec()
            );
        }
    }

    #[test]
    fn threaded_runs_are_reproducible() {
        let run = |threads| {
            let asm =
                Assembler::with_threads(TaylorHood::new(gen_unit_square(3).unwrap()), threads);
            let mut s = EnsembleStepper::new(asm, members(&[0.1, 0.25, 0.16, 0.3]), 0.05).unwrap();
            for _ in 0..3 {
                s.advance().unwrap();
            }
            s.state().current.clone()
        };
        let serial = run(1);
        let threaded = run(3);
        assert_eq!(threaded, run(3));
        // chunked assembly sums in another order than the serial loop
        for (a, b) in serial.iter().zip(&threaded) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn single_member_has_zero_monitor() {
        let mut s = EnsembleStepper::new(assembler(3), members(&[0.1]), 0.05).unwrap();
        for _ in 0..3 {
            assert_eq!(s.advance().unwrap().members[0].cfl_monitor, 0.0);
        }
    }

    #[test]
    fn bound_with_zero_data_is_zero() {
        let m = MemberSpec::new(
            0.1,
            zero_field(),
            zero_field(),
            InitialVelocity::Field(zero_field()),
        );
        let mut s = EnsembleStepper::new(assembler(3), vec![m], 0.1).unwrap();
        let dual = DualNorm::new(&s.operators().stiffness, s.constrained()).unwrap();
        let mut bound = StabilityBound::new(&[0.1], 0.1, 0.81, 0.1).unwrap();
        for k in 0..4 {
            s.advance().unwrap();
            let pts = bound.observe(&s, &dual).unwrap();
            if k == 0 {
                assert!(pts.is_none());
            } else {
                let p = pts.unwrap()[0];
                assert_eq!((p.lhs, p.rhs), (0.0, 0.0));
                assert!(p.holds());
            }
        }
    }

    #[test]
    fn bound_arithmetic() {
        let mut b = StabilityBound::new(&[1.0], 0.5, 0.25, 0.5).unwrap();
        // kappa = (0.5+0.5)/1.5 * (0.25 * 2.5 / 1.0) = 5/12
        assert!((b.kappa()[0] - 5.0 / 12.0).abs() < 1e-15);
        let n1 = StepNorms {
            l2: 1.0,
            extrapolant: 3.0,
            gradient: 12.0,
            ..Default::default()
        };
        assert!(b.record(1, &[n1]).unwrap().is_none());
        let n2 = StepNorms {
            l2: 2.0,
            extrapolant: 2.0,
            curvature: 8.0,
            gradient: 0.0,
            force: 3.0,
        };
        let p = b.record(2, &[n2]).unwrap().unwrap()[0];
        // lhs = 1 + 1; rhs = c dt/nu * 3 + 1 + 0.5 * 5/12 * 12, c = 1/1.5
        assert!((p.lhs - 2.0).abs() < 1e-15);
        assert!((p.rhs - (1.0 + 1.0 + 2.5)).abs() < 1e-14);
        assert!(b.record(4, &[n2]).is_err());
    }

    #[test]
    fn bound_rejects_bad_parameters() {
        assert!(StabilityBound::new(&[1.0], 0.1, 1.0, 0.1).is_err());
        assert!(StabilityBound::new(&[1.0], 0.1, 0.81, 0.3).is_err());
        assert!(StabilityBound::new(&[1.0], 0.1, 0.81, 0.0).is_err());
        assert!(StabilityBound::new(&[1.0], 0.1, 0.81, 0.2).is_ok());
    }

    #[test]
    fn dual_norm_of_interior_bump() {
        // For F = K z with z vanishing on the boundary, ||F||^2 = z^T K z.
        let asm = assembler(4);
        let k = asm.assemble_diffusion();
        let z = asm
            .space()
            .interpolate_velocity(|p| [p[0] * (1.0 - p[0]) * p[1] * (1.0 - p[1]), 0.0]);
        let f = k.matvec(&z);
        let dn = DualNorm::new(&k, &asm.space().boundary_dofs(None).unwrap()).unwrap();
        let expect = k.bilinear(&z, &z);
        assert!((dn.squared(&f).unwrap() - expect).abs() < 1e-12 * expect);
    }
}
