//! Sparse direct solution of the velocity-pressure saddle-point system: one
//! LU factorization per matrix, applied to any number of right-hand sides.
//!
//! The LU itself is delegated to faer's supernodal sparse LU. The symbolic
//! analysis (fill-reducing column ordering and elimination structure) is
//! cached per sparsity pattern, so a time loop whose pattern never changes
//! pays only the numeric factorization each step.

use faer::linalg::solvers::SolveCore;
use faer::sparse::linalg::solvers::{Lu, SymbolicLu};
use faer::sparse::linalg::LuError;
use faer::sparse::{SparseColMatRef, SymbolicSparseColMatRef};
use faer::{Conj, Mat};

use crate::assembly::{OperatorSet, SparseMatrix};
use crate::error::{Error, Result};

/// Relative error allowed when the factorization re-solves a probe vector.
const SINGULARITY_PROBE_TOL: f64 = 1e-6;

/// LU factors of a square sparse matrix.
pub struct Factorization {
    lu: Lu<usize, f64>,
    n: usize,
}

impl std::fmt::Debug for Factorization {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Factorization").field("n", &self.n).finish()
    }
}

impl Factorization {
    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        Ok(solve_multi(self, std::slice::from_ref(&b.to_vec()))?.remove(0))
    }
}

/// Factorizes matrices and keeps the symbolic analysis of the last pattern.
#[derive(Default)]
pub struct SparseLu {
    symbolic: Option<(Vec<usize>, Vec<usize>, SymbolicLu<usize>)>,
    count: usize,
}

fn probe_vector(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 1.0 + 0.5 * ((i as f64) * 0.618_033_988_749_895).fract())
        .collect()
}

impl SparseLu {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of numeric factorizations performed so far.
    pub fn factorization_count(&self) -> usize {
        self.count
    }

    pub fn factorize(&mut self, a: &SparseMatrix) -> Result<Factorization> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: a.ncols(),
            });
        }
        // CSR storage of A is CSC storage of A^T: factor A^T and solve with
        // its transpose.
        let sym_t = SymbolicSparseColMatRef::new_checked(n, n, a.row_ptr(), None, a.col_idx());
        let reuse =
            matches!(&self.symbolic, Some((rp, ci, _)) if rp == a.row_ptr() && ci == a.col_idx());
        if !reuse {
            let symbolic = SymbolicLu::try_new(sym_t)
                .map_err(|e| Error::Singular(format!("symbolic analysis failed: {e:?}")))?;
            self.symbolic = Some((a.row_ptr().to_vec(), a.col_idx().to_vec(), symbolic));
        }
        let symbolic = self.symbolic.as_ref().unwrap().2.clone();
        let mat_t = SparseColMatRef::new(sym_t, a.values());
        let lu = Lu::try_new_with_symbolic(symbolic, mat_t).map_err(|e| match e {
            LuError::SymbolicSingular { index } => {
                Error::Singular(format!("no pivot available at elimination step {index}"))
            }
            LuError::Generic(e) => Error::Singular(format!("factorization failed: {e:?}")),
        })?;
        self.count += 1;
        let f = Factorization { lu, n };

        let x = probe_vector(n);
        let b = a.matvec(&x);
        let y = f.solve(&b)?;
        let err = x
            .iter()
            .zip(&y)
            .fold(0.0f64, |m, (p, q)| m.max((p - q).abs()));
        if !(err <= SINGULARITY_PROBE_TOL) {
            return Err(Error::Singular(format!(
                "numerically singular: probe re-solve error {err:e}"
            )));
        }
        Ok(f)
    }
}

pub fn factorize(a: &SparseMatrix) -> Result<Factorization> {
    SparseLu::new().factorize(a)
}

/// Solves `A x_j = b_j` for all right-hand sides with one set of factors.
pub fn solve_multi(f: &Factorization, rhs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    for r in rhs {
        if r.len() != f.n {
            return Err(Error::DimensionMismatch {
                expected: f.n,
                got: r.len(),
            });
        }
    }
    if rhs.is_empty() {
        return Ok(Vec::new());
    }
    let mut block = Mat::<f64>::from_fn(f.n, rhs.len(), |i, j| rhs[j][i]);
    f.lu.solve_transpose_in_place_with_conj(Conj::No, block.as_mut());
    Ok((0..rhs.len())
        .map(|j| (0..f.n).map(|i| block[(i, j)]).collect())
        .collect())
}

#[derive(Debug, Clone, Copy)]
enum Source {
    Velocity(usize),
    NegDivT(usize),
    NegDiv(usize),
}

/// Pressure dof held at zero during the solve; the pressure is shifted to
/// mean zero afterwards.
const PINNED_PRESSURE: usize = 0;

/// Index bookkeeping for the reduced saddle matrix
///
/// ```text
/// [ alpha M + N + nu K   -B^T ]
/// [ -B                    0   ]
/// ```
///
/// with constrained velocity rows and columns removed, and with the row and
/// column of one pressure dof removed. This is equivalent to bordering the
/// system with the mean-zero pressure constraint `m^T p = 0` and its
/// multiplier `lambda`: summing the continuity rows `-B u + m lambda = 0`
/// gives `lambda = sum(B g) / |Omega|` from the boundary data alone, the
/// dropped row is implied by the others, and the pressure constant is fixed
/// by a shift. A dense border row would make the column elimination
/// structure of the LU dense over all pressure unknowns.
///
/// Unknown order: free velocity dofs, then the pressure dofs other than the
/// pinned one.
#[derive(Debug, Clone)]
pub struct SaddleLayout {
    n_velocity: usize,
    n_pressure: usize,
    constrained: Vec<usize>,
    free: Vec<usize>,
    pattern: SparseMatrix,
    sources: Vec<Source>,
}

impl SaddleLayout {
    pub fn new(ops: &OperatorSet, constrained: &[usize]) -> Result<Self> {
        let nv = ops.mass.nrows();
        let np = ops.divergence.nrows();
        if ops.divergence.ncols() != nv
            || ops.stiffness.nrows() != nv
            || ops.pressure_mean.len() != np
        {
            return Err(Error::DimensionMismatch {
                expected: nv,
                got: ops.divergence.ncols(),
            });
        }
        if np == 0 {
            return Err(Error::invalid("saddle system needs pressure dofs"));
        }
        if !ops.mass.same_pattern(&ops.stiffness) {
            return Err(Error::invalid(
                "mass and stiffness must share a sparsity pattern",
            ));
        }
        let mut is_constrained = vec![false; nv];
        for &c in constrained {
            if c >= nv {
                return Err(Error::invalid(format!("constrained dof {c} out of range")));
            }
            is_constrained[c] = true;
        }
        let mut constrained: Vec<usize> = constrained.to_vec();
        constrained.sort_unstable();
        constrained.dedup();
        let free: Vec<usize> = (0..nv).filter(|&i| !is_constrained[i]).collect();
        let nf = free.len();
        let mut reduced_of = vec![usize::MAX; nv];
        for (k, &i) in free.iter().enumerate() {
            reduced_of[i] = k;
        }
        let n = nf + np - 1;
        let bt = ops.divergence.transpose();

        let mut rows: Vec<Vec<(usize, Source)>> = vec![Vec::new(); n];
        for (r, &i) in free.iter().enumerate() {
            let s = ops.mass.row_ptr()[i];
            for (k, &c) in ops.mass.row(i).0.iter().enumerate() {
                if !is_constrained[c] {
                    rows[r].push((reduced_of[c], Source::Velocity(s + k)));
                }
            }
            let s = bt.row_ptr()[i];
            for (k, &q) in bt.row(i).0.iter().enumerate() {
                if let Some(col) = pressure_index(nf, q) {
                    rows[r].push((col, Source::NegDivT(s + k)));
                }
            }
        }
        for q in 0..np {
            let Some(row) = pressure_index(nf, q) else {
                continue;
            };
            let s = ops.divergence.row_ptr()[q];
            for (k, &c) in ops.divergence.row(q).0.iter().enumerate() {
                if !is_constrained[c] {
                    rows[row].push((reduced_of[c], Source::NegDiv(s + k)));
                }
            }
        }

        let pattern = SparseMatrix::from_pattern(
            n,
            n,
            rows.iter()
                .map(|r| r.iter().map(|e| e.0).collect())
                .collect(),
        );
        let mut sources = vec![Source::Velocity(0); pattern.nnz()];
        for (i, r) in rows.iter().enumerate() {
            for &(c, src) in r {
                sources[pattern.find(i, c).unwrap()] = src;
            }
        }
        Ok(SaddleLayout {
            n_velocity: nv,
            n_pressure: np,
            constrained,
            free,
            pattern,
            sources,
        })
    }

    pub fn constrained(&self) -> &[usize] {
        &self.constrained
    }

    pub fn free(&self) -> &[usize] {
        &self.free
    }

    pub fn dim(&self) -> usize {
        self.pattern.nrows()
    }

    /// Fills the reduced matrix for velocity block `alpha M + nu_bar K + N`.
    /// Returns the reduced matrix and the full velocity block.
    pub fn assemble(
        &self,
        ops: &OperatorSet,
        alpha: f64,
        nu_bar: f64,
        convection: Option<&SparseMatrix>,
    ) -> Result<(SparseMatrix, SparseMatrix)> {
        let mut block = ops.mass.combine(alpha, &ops.stiffness, nu_bar);
        if let Some(n) = convection {
            if !n.same_pattern(&ops.mass) {
                return Err(Error::invalid(
                    "convection matrix pattern differs from the mass pattern",
                ));
            }
            for (v, c) in block.values_mut().iter_mut().zip(n.values()) {
                *v += c;
            }
        }
        let bt = ops.divergence.transpose();
        let mut reduced = self.pattern.clone();
        for (v, src) in reduced.values_mut().iter_mut().zip(&self.sources) {
            *v = match *src {
                Source::Velocity(k) => block.values()[k],
                Source::NegDivT(k) => -bt.values()[k],
                Source::NegDiv(k) => -ops.divergence.values()[k],
            };
        }
        Ok((reduced, block))
    }
}

/// Reduced unknown of pressure dof `q`, `None` for the pinned one.
fn pressure_index(nf: usize, q: usize) -> Option<usize> {
    match q.cmp(&PINNED_PRESSURE) {
        std::cmp::Ordering::Less => Some(nf + q),
        std::cmp::Ordering::Equal => None,
        std::cmp::Ordering::Greater => Some(nf + q - 1),
    }
}

/// Builds the reduced saddle matrix with time coefficient `3 / (2 dt)`.
/// `dt = f64::INFINITY` drops the mass term (steady Stokes).
pub fn build_saddle_matrix(
    ops: &OperatorSet,
    convection: Option<&SparseMatrix>,
    dt: f64,
    nu_bar: f64,
    constrained: &[usize],
) -> Result<SparseMatrix> {
    let layout = SaddleLayout::new(ops, constrained)?;
    Ok(layout.assemble(ops, 1.5 / dt, nu_bar, convection)?.0)
}

/// One member's solution of the saddle system.
#[derive(Debug, Clone, PartialEq)]
pub struct SaddleSolution {
    pub velocity: Vec<f64>,
    pub pressure: Vec<f64>,
    /// Multiplier of the mean-zero pressure constraint, `sum(B g) / |Omega|`:
    /// nonzero only when the boundary data carry a net discrete flux.
    pub multiplier: f64,
}

/// The shared coefficient matrix of a time step, its factors, and the
/// right-hand-side machinery for all members.
pub struct SaddleSystem {
    layout: SaddleLayout,
    lu: SparseLu,
    current: Option<(SparseMatrix, SparseMatrix, Factorization)>,
}

impl SaddleSystem {
    pub fn new(ops: &OperatorSet, constrained: &[usize]) -> Result<Self> {
        Ok(SaddleSystem {
            layout: SaddleLayout::new(ops, constrained)?,
            lu: SparseLu::new(),
            current: None,
        })
    }

    pub fn layout(&self) -> &SaddleLayout {
        &self.layout
    }

    pub fn factorization_count(&self) -> usize {
        self.lu.factorization_count()
    }

    /// Reduced matrix of the last successful update.
    pub fn matrix(&self) -> Option<&SparseMatrix> {
        self.current.as_ref().map(|c| &c.0)
    }

    /// Assembles and factorizes the matrix for the next solve.
    pub fn update(
        &mut self,
        ops: &OperatorSet,
        alpha: f64,
        nu_bar: f64,
        convection: Option<&SparseMatrix>,
    ) -> Result<()> {
        self.current = None;
        let (reduced, block) = self.layout.assemble(ops, alpha, nu_bar, convection)?;
        let f = self.lu.factorize(&reduced)?;
        self.current = Some((reduced, block, f));
        Ok(())
    }

    /// Solves for every member at once. `loads[j]` is the full velocity
    /// right-hand side, `boundary[j]` the values of the constrained dofs in
    /// `layout().constrained()` order.
    pub fn solve(
        &self,
        ops: &OperatorSet,
        loads: &[Vec<f64>],
        boundary: &[Vec<f64>],
    ) -> Result<Vec<SaddleSolution>> {
        let (_, block, f) = self
            .current
            .as_ref()
            .ok_or_else(|| Error::invalid("solve called before update"))?;
        if loads.len() != boundary.len() {
            return Err(Error::DimensionMismatch {
                expected: loads.len(),
                got: boundary.len(),
            });
        }
        let l = &self.layout;
        let nf = l.free.len();
        let np = l.n_pressure;
        let area: f64 = ops.pressure_mean.iter().sum();
        let mut rhs = Vec::with_capacity(loads.len());
        let mut multipliers = Vec::with_capacity(loads.len());
        for (load, g) in loads.iter().zip(boundary) {
            if load.len() != l.n_velocity {
                return Err(Error::DimensionMismatch {
                    expected: l.n_velocity,
                    got: load.len(),
                });
            }
            if g.len() != l.constrained.len() {
                return Err(Error::DimensionMismatch {
                    expected: l.constrained.len(),
                    got: g.len(),
                });
            }
            let mut lift = vec![0.0; l.n_velocity];
            for (&c, &v) in l.constrained.iter().zip(g) {
                lift[c] = v;
            }
            let a_lift = block.matvec(&lift);
            let b_lift = ops.divergence.matvec(&lift);
            let lambda = b_lift.iter().sum::<f64>() / area;
            let mut r = Vec::with_capacity(l.dim());
            r.extend(l.free.iter().map(|&i| load[i] - a_lift[i]));
            // Continuity rows carry -B, so moving -B g right gives +B g.
            r.extend(
                (0..np)
                    .filter(|&q| q != PINNED_PRESSURE)
                    .map(|q| b_lift[q] - ops.pressure_mean[q] * lambda),
            );
            rhs.push(r);
            multipliers.push(lambda);
        }
        let sols = solve_multi(f, &rhs)?;
        Ok(sols
            .into_iter()
            .zip(boundary)
            .zip(multipliers)
            .map(|((x, g), multiplier)| {
                let mut velocity = vec![0.0; l.n_velocity];
                for (&i, &v) in l.free.iter().zip(&x) {
                    velocity[i] = v;
                }
                for (&c, &v) in l.constrained.iter().zip(g) {
                    velocity[c] = v;
                }
                let mut pressure: Vec<f64> = (0..np)
                    .map(|q| pressure_index(nf, q).map_or(0.0, |k| x[k]))
                    .collect();
                let shift = pressure
                    .iter()
                    .zip(&ops.pressure_mean)
                    .map(|(p, m)| p * m)
                    .sum::<f64>()
                    / area;
                pressure.iter_mut().for_each(|p| *p -= shift);
                SaddleSolution {
                    velocity,
                    pressure,
                    multiplier,
                }
            })
            .collect())
    }
}
