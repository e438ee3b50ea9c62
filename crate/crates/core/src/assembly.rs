//! Sparse storage and assembly of the Taylor-Hood operators: velocity mass,
//! diffusion and skew-symmetric convection, the divergence coupling, load
//! vectors and Dirichlet elimination.

use std::thread;

use crate::error::{Error, Result};
use crate::fe::{CoefficientVector, FieldKind, Tabulation, TaylorHood};
use crate::mesh::Point;

/// Quadrature degree used for every bilinear and trilinear integrand.
pub const ASSEMBLY_QUADRATURE_DEGREE: usize = 5;

/// Compressed-row matrix with sorted, duplicate-free column indices.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    nrows: usize,
    ncols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// Zero matrix with the given per-row column sets (sorted and deduplicated here).
    pub fn from_pattern(nrows: usize, ncols: usize, mut rows: Vec<Vec<usize>>) -> Self {
        assert_eq!(rows.len(), nrows);
        let mut row_ptr = Vec::with_capacity(nrows + 1);
        let mut col_idx = Vec::new();
        row_ptr.push(0);
        for r in rows.iter_mut() {
            r.sort_unstable();
            r.dedup();
            debug_assert!(r.last().is_none_or(|&c| c < ncols));
            col_idx.extend_from_slice(r);
            row_ptr.push(col_idx.len());
        }
        let nnz = col_idx.len();
        SparseMatrix {
            nrows,
            ncols,
            row_ptr,
            col_idx,
            values: vec![0.0; nnz],
        }
    }

    /// Builds from (row, col, value) triplets, summing duplicates.
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut rows = vec![Vec::new(); nrows];
        for &(r, c, _) in triplets {
            rows[r].push(c);
        }
        let mut m = Self::from_pattern(nrows, ncols, rows);
        for &(r, c, v) in triplets {
            let k = m.find(r, c).expect("pattern contains every triplet");
            m.values[k] += v;
        }
        m
    }

    pub fn identity(n: usize) -> Self {
        let triplets: Vec<_> = (0..n).map(|i| (i, i, 1.0)).collect();
        Self::from_triplets(n, n, &triplets)
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }

    pub fn col_idx(&self) -> &[usize] {
        &self.col_idx
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        (&self.col_idx[r.clone()], &self.values[r])
    }

    /// Storage position of entry (i, j), if structurally present.
    pub fn find(&self, i: usize, j: usize) -> Option<usize> {
        let start = self.row_ptr[i];
        self.col_idx[start..self.row_ptr[i + 1]]
            .binary_search(&j)
            .ok()
            .map(|k| start + k)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.find(i, j).map_or(0.0, |k| self.values[k])
    }

    pub fn same_pattern(&self, other: &Self) -> bool {
        self.nrows == other.nrows
            && self.ncols == other.ncols
            && self.row_ptr == other.row_ptr
            && self.col_idx == other.col_idx
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.nrows];
        self.matvec_into(x, &mut y);
        y
    }

    pub fn matvec_into(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.ncols);
        assert_eq!(y.len(), self.nrows);
        for (i, yi) in y.iter_mut().enumerate() {
            let mut s = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                s += self.values[k] * x[self.col_idx[k]];
            }
            *yi = s;
        }
    }

    /// `x^T A y`.
    pub fn bilinear(&self, x: &[f64], y: &[f64]) -> f64 {
        self.matvec(y).iter().zip(x).map(|(a, b)| a * b).sum()
    }

    pub fn transpose(&self) -> Self {
        let mut rows = vec![Vec::new(); self.ncols];
        for i in 0..self.nrows {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                rows[self.col_idx[k]].push(i);
            }
        }
        let mut t = Self::from_pattern(self.ncols, self.nrows, rows);
        for i in 0..self.nrows {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                let pos = t.find(self.col_idx[k], i).unwrap();
                t.values[pos] = self.values[k];
            }
        }
        t
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.ncols]; self.nrows];
        for (i, row) in d.iter_mut().enumerate() {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                row[self.col_idx[k]] = self.values[k];
            }
        }
        d
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Entrywise `a * self + b * other` for matrices sharing a pattern.
    pub fn combine(&self, a: f64, other: &Self, b: f64) -> Self {
        assert!(self.same_pattern(other));
        let mut out = self.clone();
        for (v, w) in out.values.iter_mut().zip(&other.values) {
            *v = a * *v + b * w;
        }
        out
    }
}

/// Velocity mass `M`, diffusion `K` (both block-diagonal over components),
/// divergence coupling `B` (pressure rows, velocity columns) and the pressure
/// mean weights `m_q = integral of the P1 basis q`.
#[derive(Debug, Clone)]
pub struct OperatorSet {
    pub mass: SparseMatrix,
    pub stiffness: SparseMatrix,
    pub divergence: SparseMatrix,
    pub pressure_mean: Vec<f64>,
}

/// Owns a Taylor-Hood space together with the tabulated quadrature and the
/// element-to-storage maps of the velocity block pattern.
#[derive(Debug, Clone)]
pub struct Assembler {
    space: TaylorHood,
    tab: Tabulation,
    /// Scalar P2 pattern (n_nodes x n_nodes).
    scalar_pattern: SparseMatrix,
    /// Storage position of local entry (row a, col b) at index `6 a + b`.
    elem_pos: Vec<[usize; 36]>,
    threads: usize,
}

type ElementKernel<'k> = dyn Fn(usize, &mut [[f64; 6]; 6]) + Sync + 'k;

impl Assembler {
    pub fn new(space: TaylorHood) -> Self {
        Self::with_threads(space, 1)
    }

    pub fn with_threads(space: TaylorHood, threads: usize) -> Self {
        let nn = space.n_nodes();
        let mut rows = vec![Vec::new(); nn];
        for nodes in space.element_nodes() {
            for &a in nodes {
                rows[a].extend_from_slice(nodes);
            }
        }
        let scalar_pattern = SparseMatrix::from_pattern(nn, nn, rows);
        let elem_pos = space
            .element_nodes()
            .iter()
            .map(|nodes| {
                let mut pos = [0usize; 36];
                for a in 0..6 {
                    for b in 0..6 {
                        pos[6 * a + b] = scalar_pattern.find(nodes[a], nodes[b]).unwrap();
                    }
                }
                pos
            })
            .collect();
        Assembler {
            space,
            tab: Tabulation::of_degree(ASSEMBLY_QUADRATURE_DEGREE).expect("degree 5 rule"),
            scalar_pattern,
            elem_pos,
            threads: threads.max(1),
        }
    }

    pub fn space(&self) -> &TaylorHood {
        &self.space
    }

    pub fn tabulation(&self) -> &Tabulation {
        &self.tab
    }

    pub fn threads(&self) -> usize {
        self.threads
    }

    /// Accumulates per-element 6x6 scalar matrices into the scalar pattern.
    /// With several threads, each contiguous element chunk accumulates into
    /// its own buffer and the buffers are summed in chunk order.
    fn assemble_scalar(&self, kernel: &ElementKernel<'_>) -> Vec<f64> {
        let n_elem = self.elem_pos.len();
        let nnz = self.scalar_pattern.nnz();
        let run = |range: std::ops::Range<usize>| {
            let mut acc = vec![0.0; nnz];
            for e in range {
                let mut local = [[0.0; 6]; 6];
                kernel(e, &mut local);
                let pos = &self.elem_pos[e];
                for a in 0..6 {
                    for b in 0..6 {
                        acc[pos[6 * a + b]] += local[a][b];
                    }
                }
            }
            acc
        };
        if self.threads == 1 || n_elem < 2 * self.threads {
            return run(0..n_elem);
        }
        let chunk = n_elem.div_ceil(self.threads);
        let parts: Vec<Vec<f64>> = thread::scope(|s| {
            let handles: Vec<_> = (0..self.threads)
                .map(|t| {
                    let range = (t * chunk).min(n_elem)..((t + 1) * chunk).min(n_elem);
                    s.spawn(move || run(range))
                })
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        });
        let mut out = vec![0.0; nnz];
        for p in &parts {
            for (o, v) in out.iter_mut().zip(p) {
                *o += v;
            }
        }
        out
    }

    /// Expands scalar values into the block-diagonal two-component matrix.
    fn block_diagonal(&self, scalar_values: Vec<f64>) -> SparseMatrix {
        let s = &self.scalar_pattern;
        let nn = s.nrows;
        let mut row_ptr = Vec::with_capacity(2 * nn + 1);
        row_ptr.extend_from_slice(&s.row_ptr);
        let nnz = s.nnz();
        row_ptr.extend(s.row_ptr[1..].iter().map(|p| p + nnz));
        let mut col_idx = s.col_idx.clone();
        col_idx.extend(s.col_idx.iter().map(|c| c + nn));
        let mut values = scalar_values.clone();
        values.extend_from_slice(&scalar_values);
        SparseMatrix {
            nrows: 2 * nn,
            ncols: 2 * nn,
            row_ptr,
            col_idx,
            values,
        }
    }

    /// Pattern shared by every velocity block operator.
    pub fn velocity_pattern(&self) -> SparseMatrix {
        self.block_diagonal(vec![0.0; self.scalar_pattern.nnz()])
    }

    pub fn assemble_mass(&self) -> SparseMatrix {
        let tab = &self.tab;
        let values = self.assemble_scalar(&|e, local| {
            let area = self.space.geometry(e).area;
            for (q, b) in tab.basis.iter().enumerate() {
                let w = tab.rule.weights[q] * area;
                for i in 0..6 {
                    for k in 0..6 {
                        local[i][k] += w * b.p2[i] * b.p2[k];
                    }
                }
            }
        });
        self.block_diagonal(values)
    }

    pub fn assemble_diffusion(&self) -> SparseMatrix {
        let tab = &self.tab;
        let values = self.assemble_scalar(&|e, local| {
            let geo = self.space.geometry(e);
            for (q, b) in tab.basis.iter().enumerate() {
                let w = tab.rule.weights[q] * geo.area;
                let g: [[f64; 2]; 6] = std::array::from_fn(|a| geo.grad(b.p2_grad[a]));
                for i in 0..6 {
                    for k in 0..6 {
                        local[i][k] += w * (g[i][0] * g[k][0] + g[i][1] * g[k][1]);
                    }
                }
            }
        });
        self.block_diagonal(values)
    }

    /// `B[q, i] = integral of q * div(phi_i)`.
    pub fn assemble_divergence(&self) -> SparseMatrix {
        let space = &self.space;
        let nn = space.n_nodes();
        let np = space.n_pressure();
        let mut rows = vec![Vec::new(); np];
        for (e, nodes) in space.element_nodes().iter().enumerate() {
            for q in space.element_pressure(e) {
                rows[q].extend(nodes.iter().copied());
                rows[q].extend(nodes.iter().map(|n| n + nn));
            }
        }
        let mut b_mat = SparseMatrix::from_pattern(np, 2 * nn, rows);
        for (e, nodes) in space.element_nodes().iter().enumerate() {
            let geo = space.geometry(e);
            let pdofs = space.element_pressure(e);
            let mut local = [[[0.0; 6]; 2]; 3];
            for (qp, b) in self.tab.basis.iter().enumerate() {
                let w = self.tab.rule.weights[qp] * geo.area;
                for a in 0..6 {
                    let g = geo.grad(b.p2_grad[a]);
                    for (q, lq) in local.iter_mut().enumerate() {
                        lq[0][a] += w * b.p1[q] * g[0];
                        lq[1][a] += w * b.p1[q] * g[1];
                    }
                }
            }
            for (q, lq) in local.iter().enumerate() {
                for c in 0..2 {
                    for a in 0..6 {
                        let k = b_mat.find(pdofs[q], c * nn + nodes[a]).unwrap();
                        b_mat.values[k] += lq[c][a];
                    }
                }
            }
        }
        b_mat
    }

    pub fn assemble_pressure_mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.space.n_pressure()];
        for e in 0..self.space.mesh().n_triangles() {
            let area = self.space.geometry(e).area;
            for q in self.space.element_pressure(e) {
                m[q] += area / 3.0;
            }
        }
        m
    }

    /// P1 pressure mass matrix.
    pub fn assemble_pressure_mass(&self) -> SparseMatrix {
        let mut triplets = Vec::new();
        for e in 0..self.space.mesh().n_triangles() {
            let area = self.space.geometry(e).area;
            let p = self.space.element_pressure(e);
            for i in 0..3 {
                for j in 0..3 {
                    let v = if i == j { area / 6.0 } else { area / 12.0 };
                    triplets.push((p[i], p[j], v));
                }
            }
        }
        let n = self.space.n_pressure();
        SparseMatrix::from_triplets(n, n, &triplets)
    }

    pub fn operators(&self) -> OperatorSet {
        OperatorSet {
            mass: self.assemble_mass(),
            stiffness: self.assemble_diffusion(),
            divergence: self.assemble_divergence(),
            pressure_mean: self.assemble_pressure_mean(),
        }
    }

    fn check_velocity(&self, w: &[f64]) -> Result<()> {
        let expected = self.space.n_velocity();
        if w.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                got: w.len(),
            });
        }
        Ok(())
    }

    /// `N(w)[i, k] = b*(w, phi_k, phi_i)` with
    /// `b*(u, v, z) = (u.grad v, z)/2 - (u.grad z, v)/2`.
    pub fn assemble_convection(&self, w: &[f64]) -> Result<SparseMatrix> {
        self.check_velocity(w)?;
        let tab = &self.tab;
        let values = self.assemble_scalar(&|e, local| {
            let geo = self.space.geometry(e);
            // g[i][k] = integral of psi_i (w . grad psi_k)
            let mut g = [[0.0; 6]; 6];
            for (q, b) in tab.basis.iter().enumerate() {
                let wt = tab.rule.weights[q] * geo.area;
                let (wq, _) = self.space.eval_velocity(e, &geo, b, w);
                let adv: [f64; 6] = std::array::from_fn(|k| {
                    let gk = geo.grad(b.p2_grad[k]);
                    wq[0] * gk[0] + wq[1] * gk[1]
                });
                for i in 0..6 {
                    let s = wt * b.p2[i];
                    for k in 0..6 {
                        g[i][k] += s * adv[k];
                    }
                }
            }
            for i in 0..6 {
                for k in 0..6 {
                    local[i][k] = 0.5 * (g[i][k] - g[k][i]);
                }
            }
        });
        Ok(self.block_diagonal(values))
    }

    /// `r_i = b*(a, b, phi_i)`, evaluated directly at quadrature points.
    pub fn trilinear_action(&self, a: &[f64], b: &[f64]) -> Result<CoefficientVector> {
        self.check_velocity(a)?;
        self.check_velocity(b)?;
        let space = &self.space;
        let nn = space.n_nodes();
        let mut r = CoefficientVector::zeros(space, FieldKind::Velocity);
        for (e, nodes) in space.element_nodes().iter().enumerate() {
            let geo = space.geometry(e);
            let mut local = [[0.0; 6]; 2];
            for (q, basis) in self.tab.basis.iter().enumerate() {
                let wt = self.tab.rule.weights[q] * geo.area;
                let (aq, _) = space.eval_velocity(e, &geo, basis, a);
                let (bq, bgrad) = space.eval_velocity(e, &geo, basis, b);
                // (a . grad) b, per component
                let adv_b = [
                    aq[0] * bgrad[0][0] + aq[1] * bgrad[0][1],
                    aq[0] * bgrad[1][0] + aq[1] * bgrad[1][1],
                ];
                for i in 0..6 {
                    let gi = geo.grad(basis.p2_grad[i]);
                    let adv_phi = aq[0] * gi[0] + aq[1] * gi[1];
                    for c in 0..2 {
                        local[c][i] += wt * 0.5 * (adv_b[c] * basis.p2[i] - adv_phi * bq[c]);
                    }
                }
            }
            for c in 0..2 {
                for i in 0..6 {
                    r[c * nn + nodes[i]] += local[c][i];
                }
            }
        }
        Ok(r)
    }

    /// `F_i = integral of f . phi_i` for an analytic body force.
    pub fn assemble_load(&self, f: impl Fn(Point) -> [f64; 2]) -> CoefficientVector {
        let space = &self.space;
        let nn = space.n_nodes();
        let mut out = CoefficientVector::zeros(space, FieldKind::Velocity);
        for (e, nodes) in space.element_nodes().iter().enumerate() {
            let geo = space.geometry(e);
            let mut local = [[0.0; 6]; 2];
            for (q, b) in self.tab.basis.iter().enumerate() {
                let wt = self.tab.rule.weights[q] * geo.area;
                let fq = f(geo.map(self.tab.rule.points[q]));
                for i in 0..6 {
                    local[0][i] += wt * fq[0] * b.p2[i];
                    local[1][i] += wt * fq[1] * b.p2[i];
                }
            }
            for c in 0..2 {
                for i in 0..6 {
                    out[c * nn + nodes[i]] += local[c][i];
                }
            }
        }
        out
    }
}

/// Convenience wrappers mirroring the operator names.
pub fn assemble_mass(space: &TaylorHood) -> SparseMatrix {
    Assembler::new(space.clone()).assemble_mass()
}

pub fn assemble_diffusion(space: &TaylorHood) -> SparseMatrix {
    Assembler::new(space.clone()).assemble_diffusion()
}

pub fn assemble_divergence(space: &TaylorHood) -> SparseMatrix {
    Assembler::new(space.clone()).assemble_divergence()
}

/// A square system with constrained unknowns eliminated.
#[derive(Debug, Clone)]
pub struct ReducedSystem {
    pub matrix: SparseMatrix,
    pub rhs: Vec<Vec<f64>>,
    /// Full index of each reduced unknown.
    pub free: Vec<usize>,
}

/// Eliminates the `constrained` unknowns with prescribed `values`: their
/// rows and columns are dropped and `A[:, c] * g` is moved to the right side.
pub fn apply_dirichlet(
    a: &SparseMatrix,
    rhs: &[Vec<f64>],
    constrained: &[usize],
    values: &[f64],
) -> Result<ReducedSystem> {
    if constrained.len() != values.len() {
        return Err(Error::DimensionMismatch {
            expected: constrained.len(),
            got: values.len(),
        });
    }
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: a.ncols(),
        });
    }
    let mut lift = vec![0.0; n];
    let mut is_constrained = vec![false; n];
    for (&c, &g) in constrained.iter().zip(values) {
        lift[c] = g;
        is_constrained[c] = true;
    }
    let free: Vec<usize> = (0..n).filter(|&i| !is_constrained[i]).collect();
    let mut new_index = vec![usize::MAX; n];
    for (k, &i) in free.iter().enumerate() {
        new_index[i] = k;
    }
    let a_lift = a.matvec(&lift);

    let mut rows = Vec::with_capacity(free.len());
    for &i in &free {
        let (cols, _) = a.row(i);
        rows.push(
            cols.iter()
                .filter(|&&c| !is_constrained[c])
                .map(|&c| new_index[c])
                .collect(),
        );
    }
    let mut matrix = SparseMatrix::from_pattern(free.len(), free.len(), rows);
    for (k, &i) in free.iter().enumerate() {
        let (cols, vals) = a.row(i);
        for (&c, &v) in cols.iter().zip(vals) {
            if !is_constrained[c] {
                let pos = matrix.find(k, new_index[c]).unwrap();
                matrix.values[pos] = v;
            }
        }
    }
    let mut reduced_rhs = Vec::with_capacity(rhs.len());
    for r in rhs {
        if r.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: r.len(),
            });
        }
        reduced_rhs.push(free.iter().map(|&i| r[i] - a_lift[i]).collect());
    }
    Ok(ReducedSystem {
        matrix,
        rhs: reduced_rhs,
        free,
    })
}

/// Scatters a reduced solution back and writes the prescribed values.
pub fn expand_solution(
    n: usize,
    free: &[usize],
    reduced: &[f64],
    constrained: &[usize],
    values: &[f64],
) -> Vec<f64> {
    let mut x = vec![0.0; n];
    for (&i, &v) in free.iter().zip(reduced) {
        x[i] = v;
    }
    for (&c, &g) in constrained.iter().zip(values) {
        x[c] = g;
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::gen_unit_square;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn square(n: usize) -> Assembler {
        Assembler::new(TaylorHood::new(gen_unit_square(n).unwrap()))
    }

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn csr_basics() {
        let m = SparseMatrix::from_triplets(
            2,
            3,
            &[(0, 2, 1.0), (0, 0, 2.0), (1, 1, 3.0), (0, 2, 0.5)],
        );
        assert_eq!(m.col_idx(), &[0, 2, 1]);
        assert_eq!(m.get(0, 2), 1.5);
        assert_eq!(m.get(1, 0), 0.0);
        assert_eq!(m.matvec(&[1.0, 1.0, 1.0]), vec![3.5, 3.0]);
        let t = m.transpose();
        assert_eq!(t.nrows(), 3);
        assert_eq!(t.get(2, 0), 1.5);
        assert_eq!(t.transpose(), m);
    }

    #[test]
    fn mass_totals_area() {
        let asm = square(3);
        let m = asm.assemble_mass();
        let nn = asm.space().n_nodes();
        let mut one_x = vec![0.0; 2 * nn];
        one_x[..nn].iter_mut().for_each(|v| *v = 1.0);
        assert!((m.bilinear(&one_x, &one_x) - 1.0).abs() < 1e-12);
        let row_sums: f64 = m.matvec(&one_x)[..nn].iter().sum();
        assert!((row_sums - 1.0).abs() < 1e-12);
        let t = m.transpose();
        assert!(m
            .values()
            .iter()
            .zip(t.values())
            .all(|(a, b)| (a - b).abs() < 1e-16));
    }

    #[test]
    fn diffusion_kills_constants_and_is_psd() {
        let asm = square(3);
        let k = asm.assemble_diffusion();
        let ones = vec![1.0; asm.space().n_velocity()];
        assert!(k.matvec(&ones).iter().all(|v| v.abs() < 1e-12));
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let u = random_vec(&mut rng, asm.space().n_velocity());
            assert!(k.bilinear(&u, &u) >= -1e-12);
        }
        let lin = asm.space().interpolate_velocity(|p| [p[0], 0.0]);
        assert!((k.bilinear(&lin, &lin) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn divergence_of_solenoidal_fields_vanishes() {
        let asm = square(3);
        let b = asm.assemble_divergence();
        let c = asm.space().interpolate_velocity(|_| [0.3, -1.2]);
        assert!(b.matvec(&c).iter().all(|v| v.abs() < 1e-13));
        let s = asm.space().interpolate_velocity(|p| [p[0], -p[1]]);
        assert!(b.matvec(&s).iter().all(|v| v.abs() < 1e-12));
        // div (x, 0) = 1, so B u = integrals of the P1 basis.
        let x = asm.space().interpolate_velocity(|p| [p[0], 0.0]);
        let bx = b.matvec(&x);
        let mean = asm.assemble_pressure_mean();
        for (a, m) in bx.iter().zip(&mean) {
            assert!((a - m).abs() < 1e-14);
        }
    }

    #[test]
    fn convection_is_skew_and_matches_action() {
        let asm = square(3);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = asm.space().n_velocity();
        for _ in 0..5 {
            let w = random_vec(&mut rng, n);
            let nmat = asm.assemble_convection(&w).unwrap();
            let t = nmat.transpose();
            let scale = nmat.max_abs();
            for (a, b) in nmat.values().iter().zip(t.values()) {
                assert!((a + b).abs() <= 1e-13 * scale);
            }
            let v = random_vec(&mut rng, n);
            let via_matrix = nmat.matvec(&v);
            let direct = asm.trilinear_action(&w, &v).unwrap();
            for (a, b) in via_matrix.iter().zip(direct.iter()) {
                assert!((a - b).abs() < 1e-13, "{a} {b}");
            }
            let self_energy: f64 = direct.iter().zip(&v).map(|(a, b)| a * b).sum();
            assert!(self_energy.abs() < 1e-13);
        }
        let zero = asm.assemble_convection(&vec![0.0; n]).unwrap();
        assert_eq!(zero.max_abs(), 0.0);
        assert!(asm.assemble_convection(&[1.0]).is_err());
    }

    #[test]
    fn load_of_unit_force_totals_area() {
        let asm = square(4);
        let nn = asm.space().n_nodes();
        let f = asm.assemble_load(|_| [1.0, 0.0]);
        assert!((f[..nn].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(f[nn..].iter().all(|&v| v == 0.0));
        let z = asm.assemble_load(|_| [0.0, 0.0]);
        assert!(z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn threaded_assembly_is_deterministic() {
        let space = TaylorHood::new(gen_unit_square(6).unwrap());
        let serial = Assembler::with_threads(space.clone(), 1);
        let par = Assembler::with_threads(space, 3);
        let w = serial
            .space()
            .interpolate_velocity(|p| [p[1].sin(), p[0] * p[1]]);
        let a = serial.assemble_convection(&w).unwrap();
        let b = par.assemble_convection(&w).unwrap();
        let b2 = par.assemble_convection(&w).unwrap();
        assert_eq!(b, b2);
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn dirichlet_with_zero_values_is_plain_deletion() {
        let a = SparseMatrix::from_triplets(
            3,
            3,
            &[
                (0, 0, 4.0),
                (0, 1, 1.0),
                (1, 0, 1.0),
                (1, 1, 3.0),
                (1, 2, 2.0),
                (2, 1, 2.0),
                (2, 2, 5.0),
            ],
        );
        let rhs = vec![vec![1.0, 2.0, 3.0]];
        let red = apply_dirichlet(&a, &rhs, &[1], &[0.0]).unwrap();
        assert_eq!(red.free, vec![0, 2]);
        assert_eq!(red.rhs[0], vec![1.0, 3.0]);
        assert_eq!(red.matrix.to_dense(), vec![vec![4.0, 0.0], vec![0.0, 5.0]]);
        let red = apply_dirichlet(&a, &rhs, &[1], &[2.0]).unwrap();
        assert_eq!(red.rhs[0], vec![1.0 - 2.0, 3.0 - 4.0]);
        assert!(apply_dirichlet(&a, &rhs, &[1], &[]).is_err());
        let x = expand_solution(3, &red.free, &[7.0, 8.0], &[1], &[2.0]);
        assert_eq!(x, vec![7.0, 2.0, 8.0]);
    }
}
