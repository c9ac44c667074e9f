//! P1 finite elements on triangle meshes: nodal/cell fields, sparse operators,
//! a simplicial LDL^T factorization and preconditioned conjugate gradients.
//!
//! All element integrals of products of P1 functions use exact formulas; the
//! electrode conductance line integrals use a composite midpoint rule because the
//! conductance varies within an edge.

use std::sync::Arc;
use std::time::Instant;

use thiserror::Error;

use crate::mesh::{BoundaryLabel, Mesh};

#[derive(Debug, Error)]
pub enum FemError {
    #[error("field has {got} values but the mesh has {expected}")]
    LengthMismatch { got: usize, expected: usize },
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("conductivity is not positive at node {node} (value {value})")]
    NonPositiveSigma { node: usize, value: f64 },
    #[error("electrode conductance is negative")]
    NegativeZeta,
    #[error("matrix is not positive definite (pivot {pivot} at column {column})")]
    NotPositiveDefinite { column: usize, pivot: f64 },
    #[error("solver did not converge: relative residual {residual:.3e} after {iterations} iterations")]
    SolveDiverged { iterations: usize, residual: f64 },
    #[error("inconsistent system: relative residual {0:.3e} exceeds the requested tolerance")]
    Inconsistent(f64),
    #[error("{0}")]
    Invalid(String),
}

// ---------------------------------------------------------------------------
// Fields
// ---------------------------------------------------------------------------

/// Piecewise-linear nodal function: one value per mesh vertex.
#[derive(Debug, Clone)]
pub struct ScalarField {
    mesh: Arc<Mesh>,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn new(mesh: Arc<Mesh>, values: Vec<f64>) -> Result<Self, FemError> {
        if values.len() != mesh.num_vertices() {
            return Err(FemError::LengthMismatch {
                got: values.len(),
                expected: mesh.num_vertices(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(FemError::NonFinite(i));
        }
        Ok(Self { mesh, values })
    }

    pub fn constant(mesh: Arc<Mesh>, value: f64) -> Self {
        let n = mesh.num_vertices();
        Self {
            mesh,
            values: vec![value; n],
        }
    }

    pub fn from_fn(mesh: Arc<Mesh>, f: impl Fn(f64, f64) -> f64) -> Self {
        let values = mesh.vertices().iter().map(|p| f(p[0], p[1])).collect();
        Self { mesh, values }
    }

    pub fn mesh(&self) -> &Arc<Mesh> {
        &self.mesh
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Triangle-wise arithmetic mean of the three nodal values.
    pub fn cell_means(&self) -> Vec<f64> {
        self.mesh
            .triangles()
            .iter()
            .map(|t| (self.values[t[0]] + self.values[t[1]] + self.values[t[2]]) / 3.0)
            .collect()
    }
}

/// Piecewise-constant function: one value per triangle.
#[derive(Debug, Clone)]
pub struct CellField {
    mesh: Arc<Mesh>,
    values: Vec<f64>,
}

/// Interior power density `sigma |grad u|^2` is stored per triangle.
pub type PowerDensity = CellField;

impl CellField {
    pub fn new(mesh: Arc<Mesh>, values: Vec<f64>) -> Result<Self, FemError> {
        if values.len() != mesh.num_triangles() {
            return Err(FemError::LengthMismatch {
                got: values.len(),
                expected: mesh.num_triangles(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(FemError::NonFinite(i));
        }
        Ok(Self { mesh, values })
    }

    pub fn zeros(mesh: Arc<Mesh>) -> Self {
        let n = mesh.num_triangles();
        Self {
            mesh,
            values: vec![0.0; n],
        }
    }

    pub fn mesh(&self) -> &Arc<Mesh> {
        &self.mesh
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }
}

// ---------------------------------------------------------------------------
// Sparse matrices
// ---------------------------------------------------------------------------

/// Compressed sparse row matrix; duplicate triplets are summed on construction.
#[derive(Debug, Clone)]
pub struct CsrMatrix {
    n_rows: usize,
    n_cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    pub fn from_triplets(
        n_rows: usize,
        n_cols: usize,
        triplets: &[(usize, usize, f64)],
    ) -> Self {
        let mut counts = vec![0usize; n_rows + 1];
        for &(r, _, _) in triplets {
            counts[r + 1] += 1;
        }
        for i in 0..n_rows {
            counts[i + 1] += counts[i];
        }
        let mut cols = vec![0usize; triplets.len()];
        let mut vals = vec![0.0; triplets.len()];
        let mut next = counts.clone();
        for &(r, c, v) in triplets {
            let slot = next[r];
            cols[slot] = c;
            vals[slot] = v;
            next[r] += 1;
        }
        // sort each row by column, merging duplicates
        let mut row_ptr = vec![0usize; n_rows + 1];
        let mut col_idx = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        let mut scratch: Vec<(usize, f64)> = Vec::new();
        for r in 0..n_rows {
            scratch.clear();
            for k in counts[r]..counts[r + 1] {
                scratch.push((cols[k], vals[k]));
            }
            scratch.sort_unstable_by_key(|&(c, _)| c);
            let mut i = 0;
            while i < scratch.len() {
                let c = scratch[i].0;
                let mut v = scratch[i].1;
                i += 1;
                while i < scratch.len() && scratch[i].0 == c {
                    v += scratch[i].1;
                    i += 1;
                }
                col_idx.push(c);
                values.push(v);
            }
            row_ptr[r + 1] = col_idx.len();
        }
        Self {
            n_rows,
            n_cols,
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        span.map(move |k| (self.col_idx[k], self.values[k]))
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n_cols);
        let mut y = vec![0.0; self.n_rows];
        for r in 0..self.n_rows {
            let mut acc = 0.0;
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.values[k] * x[self.col_idx[k]];
            }
            y[r] = acc;
        }
        y
    }

    pub fn diagonal(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.n_rows.min(self.n_cols)];
        for r in 0..d.len() {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                if self.col_idx[k] == r {
                    d[r] = self.values[k];
                }
            }
        }
        d
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.values {
            *v *= s;
        }
    }

    /// Scales column `j` by `d[j]`.
    pub fn scale_cols(&mut self, d: &[f64]) {
        assert_eq!(d.len(), self.n_cols);
        for k in 0..self.values.len() {
            self.values[k] *= d[self.col_idx[k]];
        }
    }

    pub fn triplets(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::with_capacity(self.nnz());
        for r in 0..self.n_rows {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                out.push((r, self.col_idx[k], self.values[k]));
            }
        }
        out
    }

    pub fn max_symmetry_defect(&self) -> f64 {
        use std::collections::HashMap;
        let mut map: HashMap<(usize, usize), f64> = HashMap::new();
        for (r, c, v) in self.triplets() {
            map.insert((r, c), v);
        }
        let mut worst = 0.0_f64;
        for (&(r, c), &v) in &map {
            let vt = map.get(&(c, r)).copied().unwrap_or(0.0);
            worst = worst.max((v - vt).abs());
        }
        worst
    }
}

/// `a*alpha + b*beta`, patterns merged.
pub fn csr_add(a: &CsrMatrix, alpha: f64, b: &CsrMatrix, beta: f64) -> CsrMatrix {
    assert_eq!(a.n_rows, b.n_rows);
    assert_eq!(a.n_cols, b.n_cols);
    let mut t = Vec::with_capacity(a.nnz() + b.nnz());
    for (r, c, v) in a.triplets() {
        t.push((r, c, v * alpha));
    }
    for (r, c, v) in b.triplets() {
        t.push((r, c, v * beta));
    }
    CsrMatrix::from_triplets(a.n_rows, a.n_cols, &t)
}

/// Row-by-row sparse product (Gustavson).
pub fn csr_matmul(a: &CsrMatrix, b: &CsrMatrix) -> CsrMatrix {
    assert_eq!(a.n_cols, b.n_rows);
    let n = a.n_rows;
    let m = b.n_cols;
    let mut marker = vec![usize::MAX; m];
    let mut acc = vec![0.0; m];
    let mut triplets: Vec<(usize, usize, f64)> = Vec::new();
    let mut active: Vec<usize> = Vec::new();
    for r in 0..n {
        active.clear();
        for (ka, va) in a.row(r) {
            for (kb, vb) in b.row(ka) {
                if marker[kb] != r {
                    marker[kb] = r;
                    acc[kb] = 0.0;
                    active.push(kb);
                }
                acc[kb] += va * vb;
            }
        }
        for &c in &active {
            triplets.push((r, c, acc[c]));
        }
    }
    CsrMatrix::from_triplets(n, m, &triplets)
}

// ---------------------------------------------------------------------------
// Sparse LDL^T factorization (up-looking, elimination-tree based)
// ---------------------------------------------------------------------------

/// Simplicial LDL^T of a sparse symmetric positive definite matrix. The mesh
/// generators order vertices center-outward, which keeps fill banded without a
/// reordering step. Solves borrow `&self` and may run concurrently.
#[derive(Debug)]
pub struct SparseCholesky {
    n: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    l_vals: Vec<f64>,
    diag: Vec<f64>,
}

impl SparseCholesky {
    pub fn factor(a: &CsrMatrix) -> Result<Self, FemError> {
        assert_eq!(a.n_rows, a.n_cols);
        let n = a.n_rows;

        // symbolic: elimination tree and column counts from the upper triangle
        let mut parent = vec![usize::MAX; n];
        let mut flag = vec![usize::MAX; n];
        let mut l_nz = vec![0usize; n];
        for k in 0..n {
            flag[k] = k;
            for (i, _) in a.row(k) {
                if i >= k {
                    continue;
                }
                let mut ii = i;
                while flag[ii] != k {
                    if parent[ii] == usize::MAX {
                        parent[ii] = k;
                    }
                    l_nz[ii] += 1;
                    flag[ii] = k;
                    ii = parent[ii];
                }
            }
        }
        let mut col_ptr = vec![0usize; n + 1];
        for k in 0..n {
            col_ptr[k + 1] = col_ptr[k] + l_nz[k];
        }
        let nnz = col_ptr[n];
        let mut row_idx = vec![0usize; nnz];
        let mut l_vals = vec![0.0; nnz];
        let mut diag = vec![0.0; n];

        // numeric (row-at-a-time, stored by columns)
        let mut y = vec![0.0; n];
        let mut pattern = vec![0usize; n];
        let mut stack = vec![0usize; n];
        let mut fill = vec![0usize; n]; // entries written so far in each column
        let mut flag = vec![usize::MAX; n];
        for k in 0..n {
            let mut top = n;
            flag[k] = k;
            for (i, v) in a.row(k) {
                if i > k {
                    continue;
                }
                y[i] += v;
                let mut len = 0;
                let mut ii = i;
                while ii != k && flag[ii] != k {
                    stack[len] = ii;
                    len += 1;
                    flag[ii] = k;
                    ii = parent[ii];
                }
                while len > 0 {
                    len -= 1;
                    top -= 1;
                    pattern[top] = stack[len];
                }
            }
            let mut d = y[k];
            y[k] = 0.0;
            for s in top..n {
                let i = pattern[s];
                let yi = y[i];
                y[i] = 0.0;
                for p in col_ptr[i]..col_ptr[i] + fill[i] {
                    y[row_idx[p]] -= l_vals[p] * yi;
                }
                let l_ki = yi / diag[i];
                d -= l_ki * yi;
                let slot = col_ptr[i] + fill[i];
                row_idx[slot] = k;
                l_vals[slot] = l_ki;
                fill[i] += 1;
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err(FemError::NotPositiveDefinite { column: k, pivot: d });
            }
            diag[k] = d;
        }

        Ok(Self {
            n,
            col_ptr,
            row_idx,
            l_vals,
            diag,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        assert_eq!(b.len(), self.n);
        let mut x = b.to_vec();
        for i in 0..self.n {
            let xi = x[i];
            if xi != 0.0 {
                for p in self.col_ptr[i]..self.col_ptr[i + 1] {
                    x[self.row_idx[p]] -= self.l_vals[p] * xi;
                }
            }
        }
        for i in 0..self.n {
            x[i] /= self.diag[i];
        }
        for i in (0..self.n).rev() {
            let mut xi = x[i];
            for p in self.col_ptr[i]..self.col_ptr[i + 1] {
                xi -= self.l_vals[p] * x[self.row_idx[p]];
            }
            x[i] = xi;
        }
        x
    }
}

// ---------------------------------------------------------------------------
// Constrained solves and CG
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Constraint {
    /// Plain SPD solve.
    None,
    /// Pure-Neumann grounding: the solution mean over nodes is pinned to zero by
    /// eliminating one unknown and shifting (elimination, not a penalty).
    ZeroMean,
}

/// Assembled symmetric system plus right-hand side.
#[derive(Debug, Clone)]
pub struct SparseSystem {
    pub matrix: CsrMatrix,
    pub rhs: Vec<f64>,
    pub constraint: Constraint,
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    /// Zero for direct factorizations.
    pub iterations: usize,
    /// Relative residual of the returned solution.
    pub residual: f64,
    pub wall_seconds: f64,
}

pub fn solve_constrained(system: &SparseSystem, tol: f64) -> Result<(Vec<f64>, SolveReport), FemError> {
    let start = Instant::now();
    let n = system.matrix.n_rows();
    if system.rhs.len() != n {
        return Err(FemError::LengthMismatch {
            got: system.rhs.len(),
            expected: n,
        });
    }
    let x = match system.constraint {
        Constraint::None => {
            let chol = SparseCholesky::factor(&system.matrix)?;
            chol.solve(&system.rhs)
        }
        Constraint::ZeroMean => {
            // eliminate the last unknown, then shift to zero mean
            let reduced: Vec<(usize, usize, f64)> = system
                .matrix
                .triplets()
                .into_iter()
                .filter(|&(r, c, _)| r + 1 < n && c + 1 < n)
                .collect();
            let a_red = CsrMatrix::from_triplets(n - 1, n - 1, &reduced);
            let chol = SparseCholesky::factor(&a_red)?;
            let mut x = chol.solve(&system.rhs[..n - 1]);
            x.push(0.0);
            let mean = x.iter().sum::<f64>() / n as f64;
            for v in &mut x {
                *v -= mean;
            }
            x
        }
    };
    let b_norm = norm(&system.rhs);
    let residual = if b_norm == 0.0 {
        0.0
    } else {
        let r = system.matrix.mul_vec(&x);
        let mut acc = 0.0;
        for i in 0..n {
            acc += (r[i] - system.rhs[i]).powi(2);
        }
        acc.sqrt() / b_norm
    };
    if residual > tol {
        return Err(FemError::Inconsistent(residual));
    }
    Ok((
        x,
        SolveReport {
            iterations: 0,
            residual,
            wall_seconds: start.elapsed().as_secs_f64(),
        },
    ))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Preconditioned conjugate gradients for an SPD operator given as a closure.
pub fn pcg(
    b: &[f64],
    apply: impl Fn(&[f64]) -> Vec<f64>,
    precond: impl Fn(&[f64]) -> Vec<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<(Vec<f64>, SolveReport), FemError> {
    let start = Instant::now();
    let n = b.len();
    let b_norm = norm(b);
    if b_norm == 0.0 {
        return Ok((
            vec![0.0; n],
            SolveReport {
                iterations: 0,
                residual: 0.0,
                wall_seconds: start.elapsed().as_secs_f64(),
            },
        ));
    }
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut z = precond(&r);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    for it in 0..max_iter {
        let q = apply(&p);
        let pq = dot(&p, &q);
        if !(pq > 0.0) {
            return Err(FemError::SolveDiverged {
                iterations: it,
                residual: norm(&r) / b_norm,
            });
        }
        let alpha = rz / pq;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * q[i];
        }
        let rel = norm(&r) / b_norm;
        if rel <= tol {
            return Ok((
                x,
                SolveReport {
                    iterations: it + 1,
                    residual: rel,
                    wall_seconds: start.elapsed().as_secs_f64(),
                },
            ));
        }
        z = precond(&r);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(FemError::SolveDiverged {
        iterations: max_iter,
        residual: norm(&r) / b_norm,
    })
}

// ---------------------------------------------------------------------------
// Assembly
// ---------------------------------------------------------------------------

/// Stiffness matrix of `-div(sigma grad .)` with natural boundary conditions;
/// `sigma` enters through its triangle means, keeping the matrix exactly linear
/// in the nodal values.
pub fn assemble_stiffness(mesh: &Mesh, sigma: &ScalarField) -> Result<CsrMatrix, FemError> {
    if sigma.values().len() != mesh.num_vertices() {
        return Err(FemError::LengthMismatch {
            got: sigma.values().len(),
            expected: mesh.num_vertices(),
        });
    }
    if let Some((node, &value)) = sigma
        .values()
        .iter()
        .enumerate()
        .find(|&(_, &v)| !(v > 0.0))
    {
        return Err(FemError::NonPositiveSigma { node, value });
    }
    Ok(assemble_weighted_stiffness(mesh, sigma.values()))
}

/// Same bilinear form with an arbitrary (possibly signed) nodal coefficient.
pub fn assemble_weighted_stiffness(mesh: &Mesh, coeff: &[f64]) -> CsrMatrix {
    let n = mesh.num_vertices();
    let mut triplets = Vec::with_capacity(9 * mesh.num_triangles());
    for (t, tri) in mesh.triangles().iter().enumerate() {
        let g = mesh.geometry(t);
        let c = (coeff[tri[0]] + coeff[tri[1]] + coeff[tri[2]]) / 3.0;
        let w = c * g.area;
        for i in 0..3 {
            for j in 0..3 {
                let v = w * (g.grads[i][0] * g.grads[j][0] + g.grads[i][1] * g.grads[j][1]);
                triplets.push((tri[i], tri[j], v));
            }
        }
    }
    CsrMatrix::from_triplets(n, n, &triplets)
}

/// Consistent P1 mass matrix (element blocks `area/12 * [[2,1,1],[1,2,1],[1,1,2]]`).
pub fn assemble_mass(mesh: &Mesh) -> CsrMatrix {
    let n = mesh.num_vertices();
    let mut triplets = Vec::with_capacity(9 * mesh.num_triangles());
    for (t, tri) in mesh.triangles().iter().enumerate() {
        let w = mesh.tri_area(t) / 12.0;
        for i in 0..3 {
            for j in 0..3 {
                let v = if i == j { 2.0 * w } else { w };
                triplets.push((tri[i], tri[j], v));
            }
        }
    }
    CsrMatrix::from_triplets(n, n, &triplets)
}

/// Lumped (row-sum) mass diagonal.
pub fn lumped_mass_diagonal(mesh: &Mesh) -> Vec<f64> {
    let mut d = vec![0.0; mesh.num_vertices()];
    for (t, tri) in mesh.triangles().iter().enumerate() {
        let w = mesh.tri_area(t) / 3.0;
        for &v in tri {
            d[v] += w;
        }
    }
    d
}

// ---------------------------------------------------------------------------
// Electrode conductance (Robin-type coupling)
// ---------------------------------------------------------------------------

/// Conductance profile along one electrode, parameterized by centered arclength.
#[derive(Debug, Clone, Copy)]
pub enum ZetaProfile {
    /// Smooth bump vanishing at the electrode endpoints, scaled to the given peak.
    Bump { peak: f64 },
    /// Constant conductance `1/z` of the classic CEM.
    Constant { value: f64 },
}

impl ZetaProfile {
    /// Evaluate at centered arclength `s` on an electrode of length `len`.
    pub fn eval(&self, s: f64, len: f64) -> f64 {
        match *self {
            ZetaProfile::Bump { peak } => {
                let eps = 0.5 * len;
                if s.abs() >= eps {
                    0.0
                } else {
                    peak * (1.0 + eps * eps / (s * s - eps * eps)).exp()
                }
            }
            ZetaProfile::Constant { value } => value,
        }
    }

    fn is_nonnegative(&self) -> bool {
        match *self {
            ZetaProfile::Bump { peak } => peak >= 0.0,
            ZetaProfile::Constant { value } => value >= 0.0,
        }
    }
}

/// Per-electrode conductance profiles.
#[derive(Debug, Clone)]
pub struct ElectrodeZeta {
    profiles: Vec<ZetaProfile>,
}

impl ElectrodeZeta {
    pub fn new(profiles: Vec<ZetaProfile>) -> Result<Self, FemError> {
        if profiles.iter().any(|p| !p.is_nonnegative()) {
            return Err(FemError::NegativeZeta);
        }
        Ok(Self { profiles })
    }

    /// Same smooth bump with the given peak on every electrode.
    pub fn uniform_bump(count: usize, peak: f64) -> Result<Self, FemError> {
        Self::new(vec![ZetaProfile::Bump { peak }; count])
    }

    /// Classic CEM with contact impedances `z_l` (conductance `1/z_l`).
    pub fn from_contact_impedance(z: &[f64]) -> Result<Self, FemError> {
        if z.iter().any(|&v| !(v > 0.0)) {
            return Err(FemError::Invalid(
                "contact impedance must be positive".into(),
            ));
        }
        Self::new(z.iter().map(|&v| ZetaProfile::Constant { value: 1.0 / v }).collect())
    }

    pub fn count(&self) -> usize {
        self.profiles.len()
    }

    pub fn profile(&self, l: usize) -> &ZetaProfile {
        &self.profiles[l]
    }
}

/// Number of composite midpoint points per boundary edge in conductance integrals.
const EDGE_QUADRATURE_POINTS: usize = 16;

/// Boundary coupling blocks of the (S)CEM weak form
/// `sum_l int_{e_l} zeta (u - U_l)(w - W_l)`.
#[derive(Debug, Clone)]
pub struct RobinBlocks {
    pub electrode_count: usize,
    /// Node-node couplings `int zeta phi_i phi_j` (symmetric triplets).
    pub uu: Vec<(usize, usize, f64)>,
    /// Per electrode: `(node, int zeta phi_i)`; the node-voltage coupling is `-` this.
    pub u_el: Vec<Vec<(usize, f64)>>,
    /// Per electrode: total conductance `int zeta`.
    pub el_el: Vec<f64>,
}

pub fn assemble_robin_electrode(mesh: &Mesh, zeta: &ElectrodeZeta) -> Result<RobinBlocks, FemError> {
    let l_count = mesh.electrode_count();
    if zeta.count() != l_count {
        return Err(FemError::LengthMismatch {
            got: zeta.count(),
            expected: l_count,
        });
    }
    let mut uu = Vec::new();
    let mut u_el = vec![Vec::new(); l_count];
    let mut el_el = vec![0.0; l_count];
    for l in 0..l_count {
        let chain = mesh
            .electrode_chain(l)
            .map_err(|e| FemError::Invalid(e.to_string()))?;
        let total_len: f64 = chain.iter().map(|&e| mesh.edge_length(e)).sum();
        let profile = zeta.profile(l);
        let mut s0 = 0.0;
        // orient the chain consistently: first edge starts at the chain start vertex
        let mut prev_end: Option<usize> = None;
        for &e in &chain {
            let [mut va, mut vb] = mesh.boundary_edges()[e].vertices;
            if let Some(pe) = prev_end {
                if vb == pe {
                    std::mem::swap(&mut va, &mut vb);
                }
            } else if chain.len() > 1 {
                // make the first edge end at a vertex shared with the second edge
                let [na, nb] = mesh.boundary_edges()[chain[1]].vertices;
                if va == na || va == nb {
                    std::mem::swap(&mut va, &mut vb);
                }
            }
            prev_end = Some(vb);
            let len = mesh.edge_length(e);
            let (mut aa, mut ab, mut bb, mut fa, mut fb, mut c) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
            for q in 0..EDGE_QUADRATURE_POINTS {
                let t = (q as f64 + 0.5) / EDGE_QUADRATURE_POINTS as f64;
                let s = s0 + t * len - 0.5 * total_len;
                let w = len / EDGE_QUADRATURE_POINTS as f64 * profile.eval(s, total_len);
                aa += w * (1.0 - t) * (1.0 - t);
                ab += w * t * (1.0 - t);
                bb += w * t * t;
                fa += w * (1.0 - t);
                fb += w * t;
                c += w;
            }
            uu.push((va, va, aa));
            uu.push((va, vb, ab));
            uu.push((vb, va, ab));
            uu.push((vb, vb, bb));
            u_el[l].push((va, fa));
            u_el[l].push((vb, fb));
            el_el[l] += c;
            s0 += len;
        }
    }
    Ok(RobinBlocks {
        electrode_count: l_count,
        uu,
        u_el,
        el_el,
    })
}

// ---------------------------------------------------------------------------
// Gradients and inner products
// ---------------------------------------------------------------------------

/// Constant gradient of a P1 field on each triangle.
pub fn gradient_per_triangle(field: &ScalarField) -> Vec<[f64; 2]> {
    let mesh = field.mesh();
    let v = field.values();
    mesh.triangles()
        .iter()
        .enumerate()
        .map(|(t, tri)| {
            let g = mesh.geometry(t);
            let mut grad = [0.0, 0.0];
            for k in 0..3 {
                grad[0] += v[tri[k]] * g.grads[k][0];
                grad[1] += v[tri[k]] * g.grads[k][1];
            }
            grad
        })
        .collect()
}

/// Exact `L^2(Omega)` inner product of two P1 fields.
pub fn l2_inner(a: &ScalarField, b: &ScalarField) -> f64 {
    let mesh = a.mesh();
    assert_eq!(a.values().len(), b.values().len());
    let (av, bv) = (a.values(), b.values());
    let mut acc = 0.0;
    for (t, tri) in mesh.triangles().iter().enumerate() {
        let (a0, a1, a2) = (av[tri[0]], av[tri[1]], av[tri[2]]);
        let (b0, b1, b2) = (bv[tri[0]], bv[tri[1]], bv[tri[2]]);
        let sa = a0 + a1 + a2;
        let sb = b0 + b1 + b2;
        acc += mesh.tri_area(t) / 12.0 * (sa * sb + a0 * b0 + a1 * b1 + a2 * b2);
    }
    acc
}

pub fn l2_norm(a: &ScalarField) -> f64 {
    l2_inner(a, a).max(0.0).sqrt()
}

/// `L^2` inner product of piecewise-constant fields.
pub fn cell_l2_inner(a: &CellField, b: &CellField) -> f64 {
    let mesh = a.mesh();
    assert_eq!(a.values().len(), b.values().len());
    a.values()
        .iter()
        .zip(b.values())
        .enumerate()
        .map(|(t, (x, y))| mesh.tri_area(t) * x * y)
        .sum()
}

pub fn cell_l2_norm(a: &CellField) -> f64 {
    cell_l2_inner(a, a).max(0.0).sqrt()
}

/// Dual vector of a cell field against the nodal basis: `f_i = int g phi_i`.
pub fn cell_to_dual(mesh: &Mesh, cell: &[f64]) -> Vec<f64> {
    assert_eq!(cell.len(), mesh.num_triangles());
    let mut f = vec![0.0; mesh.num_vertices()];
    for (t, tri) in mesh.triangles().iter().enumerate() {
        let w = mesh.tri_area(t) / 3.0 * cell[t];
        for &v in tri {
            f[v] += w;
        }
    }
    f
}

/// Nodes on Dirichlet boundary edges, as a sorted list.
pub fn dirichlet_nodes(mesh: &Mesh) -> Vec<usize> {
    let mut nodes = mesh.dirichlet_vertices();
    nodes.sort_unstable();
    nodes
}

/// True for boundary edges of any label.
pub fn boundary_flags(mesh: &Mesh) -> Vec<bool> {
    let mut flags = vec![false; mesh.num_vertices()];
    for e in mesh.boundary_edges() {
        flags[e.vertices[0]] = true;
        flags[e.vertices[1]] = true;
    }
    flags
}

#[allow(unused)]
fn is_boundary_label(label: BoundaryLabel) -> bool {
    matches!(label, BoundaryLabel::DirichletBoundary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{generate_rectangle_mesh, BoundaryEdge, GeneratorOptions};
    use std::sync::Arc;

    fn unit_square(h: f64) -> Arc<Mesh> {
        Arc::new(generate_rectangle_mesh(1.0, 1.0, h, &GeneratorOptions::default()).unwrap())
    }

    fn reference_triangle() -> Arc<Mesh> {
        let vertices = vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
        let triangles = vec![[0, 1, 2]];
        let boundary = vec![
            BoundaryEdge { vertices: [0, 1], label: BoundaryLabel::DirichletBoundary },
            BoundaryEdge { vertices: [1, 2], label: BoundaryLabel::DirichletBoundary },
            BoundaryEdge { vertices: [2, 0], label: BoundaryLabel::DirichletBoundary },
        ];
        Arc::new(Mesh::new(vertices, triangles, boundary, 1.0).unwrap())
    }

    #[test]
    fn stiffness_row_sums_vanish() {
        let mesh = unit_square(0.2);
        let sigma = ScalarField::constant(mesh.clone(), 1.0);
        let k = assemble_stiffness(&mesh, &sigma).unwrap();
        let ones = vec![1.0; mesh.num_vertices()];
        for v in k.mul_vec(&ones) {
            assert!(v.abs() < 1e-12, "row sum {v}");
        }
    }

    #[test]
    fn stiffness_reference_element() {
        let mesh = reference_triangle();
        let sigma = ScalarField::constant(mesh.clone(), 1.0);
        let k = assemble_stiffness(&mesh, &sigma).unwrap();
        // closed-form element matrix from barycentric gradients
        let expected = [
            [1.0, -0.5, -0.5],
            [-0.5, 0.5, 0.0],
            [-0.5, 0.0, 0.5],
        ];
        for (r, row) in expected.iter().enumerate() {
            for (c, &val) in row.iter().enumerate() {
                let got: f64 = k
                    .row(r)
                    .find(|&(j, _)| j == c)
                    .map(|(_, v)| v)
                    .unwrap_or(0.0);
                assert!((got - val).abs() < 1e-14, "K[{r}][{c}] = {got}, want {val}");
            }
        }
    }

    #[test]
    fn stiffness_linear_in_sigma() {
        let mesh = unit_square(0.25);
        let s1 = ScalarField::from_fn(mesh.clone(), |x, y| 1.0 + x + 0.5 * y);
        let s2 = ScalarField::new(
            mesh.clone(),
            s1.values().iter().map(|v| 2.0 * v).collect(),
        )
        .unwrap();
        let k1 = assemble_stiffness(&mesh, &s1).unwrap();
        let k2 = assemble_stiffness(&mesh, &s2).unwrap();
        let x: Vec<f64> = (0..mesh.num_vertices()).map(|i| (i as f64).sin()).collect();
        let (y1, y2) = (k1.mul_vec(&x), k2.mul_vec(&x));
        for (a, b) in y1.iter().zip(&y2) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn nonpositive_sigma_rejected() {
        let mesh = unit_square(0.5);
        let mut sigma = ScalarField::constant(mesh.clone(), 1.0);
        sigma.values_mut()[0] = 0.0;
        assert!(matches!(
            assemble_stiffness(&mesh, &sigma),
            Err(FemError::NonPositiveSigma { node: 0, .. })
        ));
    }

    #[test]
    fn mass_matrix_properties() {
        let mesh = unit_square(0.2);
        let m = assemble_mass(&mesh);
        let ones = vec![1.0; mesh.num_vertices()];
        let total: f64 = dot(&ones, &m.mul_vec(&ones));
        assert!((total - 1.0).abs() < 1e-10, "1^T M 1 = {total}");

        // element block on the reference triangle
        let tri = reference_triangle();
        let mt = assemble_mass(&tri);
        let a = 0.5;
        for r in 0..3 {
            for c in 0..3 {
                let want = a / 12.0 * if r == c { 2.0 } else { 1.0 };
                let got: f64 = mt
                    .row(r)
                    .find(|&(j, _)| j == c)
                    .map(|(_, v)| v)
                    .unwrap_or(0.0);
                assert!((got - want).abs() < 1e-15);
            }
        }

        // smallest eigenvalue via inverse iteration is positive
        let chol = SparseCholesky::factor(&m).unwrap();
        let n = mesh.num_vertices();
        let mut x: Vec<f64> = (0..n).map(|i| 1.0 + (i as f64).cos()).collect();
        for _ in 0..60 {
            let y = chol.solve(&x);
            let s = norm(&y);
            x = y.iter().map(|v| v / s).collect();
        }
        let lambda_min = dot(&x, &m.mul_vec(&x)) / dot(&x, &x);
        assert!(lambda_min > 0.0, "lambda_min = {lambda_min}");
    }

    #[test]
    fn robin_zero_and_linear() {
        let mesh = Arc::new(
            crate::mesh::generate_disk_mesh(
                1.0,
                0.2,
                &crate::mesh::ElectrodeLayout::uniform(4, 0.5).unwrap(),
                &GeneratorOptions::default(),
            )
            .unwrap(),
        );
        let zero = ElectrodeZeta::uniform_bump(4, 0.0).unwrap();
        let blocks = assemble_robin_electrode(&mesh, &zero).unwrap();
        assert!(blocks.uu.iter().all(|&(_, _, v)| v == 0.0));
        assert!(blocks.el_el.iter().all(|&v| v == 0.0));

        let one = ElectrodeZeta::uniform_bump(4, 1.0).unwrap();
        let two = ElectrodeZeta::uniform_bump(4, 2.0).unwrap();
        let b1 = assemble_robin_electrode(&mesh, &one).unwrap();
        let b2 = assemble_robin_electrode(&mesh, &two).unwrap();
        for (x, y) in b1.el_el.iter().zip(&b2.el_el) {
            assert!((2.0 * x - y).abs() < 1e-14);
        }
        for (x, y) in b1.uu.iter().zip(&b2.uu) {
            assert!((2.0 * x.2 - y.2).abs() < 1e-14);
        }
    }

    #[test]
    fn robin_single_edge_hand_integrals() {
        // one straight electrode edge of length 1 with constant conductance c
        let vertices = vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
        let triangles = vec![[0, 1, 2]];
        let boundary = vec![
            BoundaryEdge { vertices: [0, 1], label: BoundaryLabel::Electrode(0) },
            BoundaryEdge { vertices: [1, 2], label: BoundaryLabel::Gap },
            BoundaryEdge { vertices: [2, 0], label: BoundaryLabel::Gap },
        ];
        let mesh = Mesh::new(vertices, triangles, boundary, 1.0).unwrap();
        let c = 3.0;
        let zeta = ElectrodeZeta::new(vec![ZetaProfile::Constant { value: c }]).unwrap();
        let blocks = assemble_robin_electrode(&mesh, &zeta).unwrap();
        assert!((blocks.el_el[0] - c).abs() < 1e-12);
        let mut uu = [[0.0; 2]; 2];
        for &(i, j, v) in &blocks.uu {
            uu[i][j] += v;
        }
        // int phi_i phi_j over the unit edge = [[1/3,1/6],[1/6,1/3]], composite midpoint
        // with 16 points is accurate to ~3e-4 relative on quadratics
        assert!((uu[0][0] - c / 3.0).abs() / (c / 3.0) < 5e-3);
        assert!((uu[0][1] - c / 6.0).abs() / (c / 6.0) < 5e-3);
        let mut fa = [0.0; 2];
        for &(i, v) in &blocks.u_el[0] {
            fa[i] += v;
        }
        assert!((fa[0] - c / 2.0).abs() < 1e-12, "linear integrand is exact for midpoint");
        assert!((fa[1] - c / 2.0).abs() < 1e-12);
    }

    #[test]
    fn bump_profile_shape() {
        let p = ZetaProfile::Bump { peak: 1.0 };
        assert_eq!(p.eval(-0.5, 1.0), 0.0);
        assert_eq!(p.eval(0.5, 1.0), 0.0);
        assert!((p.eval(0.0, 1.0) - 1.0).abs() < 1e-15);
        for &s in &[0.1, 0.2, 0.3, 0.49] {
            assert!((p.eval(s, 1.0) - p.eval(-s, 1.0)).abs() < 1e-15);
        }
    }

    #[test]
    fn gradients_of_linear_fields() {
        let mesh = unit_square(0.3);
        let fx = ScalarField::from_fn(mesh.clone(), |x, _| x);
        for g in gradient_per_triangle(&fx) {
            assert!((g[0] - 1.0).abs() < 1e-12 && g[1].abs() < 1e-12);
        }
        let fc = ScalarField::constant(mesh.clone(), 5.0);
        for g in gradient_per_triangle(&fc) {
            assert!(g[0].abs() < 1e-12 && g[1].abs() < 1e-12);
        }
        let f = ScalarField::from_fn(mesh.clone(), |x, y| 3.0 * x + 2.0 * y);
        for g in gradient_per_triangle(&f) {
            assert!((g[0] - 3.0).abs() < 1e-12 && (g[1] - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn inner_products() {
        let mesh = unit_square(0.2);
        let one = ScalarField::constant(mesh.clone(), 1.0);
        assert!((l2_inner(&one, &one) - 1.0).abs() < 1e-12);
        let x = ScalarField::from_fn(mesh.clone(), |x, _| x);
        assert!((l2_inner(&x, &one) - 0.5).abs() < 1e-12);
        let zero = ScalarField::constant(mesh.clone(), 0.0);
        assert_eq!(l2_norm(&zero), 0.0);
    }

    #[test]
    fn solve_constrained_identity_and_2x2() {
        let eye = CsrMatrix::from_triplets(3, 3, &[(0, 0, 1.0), (1, 1, 1.0), (2, 2, 1.0)]);
        let sys = SparseSystem {
            matrix: eye,
            rhs: vec![3.0, -1.0, 2.0],
            constraint: Constraint::None,
        };
        let (x, rep) = solve_constrained(&sys, 1e-12).unwrap();
        assert_eq!(x, vec![3.0, -1.0, 2.0]);
        assert!(rep.residual <= 1e-12);

        // [[2,1],[1,3]] has inverse [[3,-1],[-1,2]]/5
        let a = CsrMatrix::from_triplets(2, 2, &[(0, 0, 2.0), (0, 1, 1.0), (1, 0, 1.0), (1, 1, 3.0)]);
        let sys = SparseSystem {
            matrix: a,
            rhs: vec![1.0, 0.0],
            constraint: Constraint::None,
        };
        let (x, _) = solve_constrained(&sys, 1e-12).unwrap();
        assert!((x[0] - 0.6).abs() < 1e-12 && (x[1] + 0.2).abs() < 1e-12);
    }

    #[test]
    fn solve_constrained_zero_mean_matches_dense_oracle() {
        let mesh = unit_square(0.5);
        let n = mesh.num_vertices();
        let sigma = ScalarField::constant(mesh.clone(), 1.0);
        let k = assemble_stiffness(&mesh, &sigma).unwrap();
        // compatible rhs: int f = 0
        let mut rhs: Vec<f64> = (0..n).map(|i| (i as f64 + 0.3).sin()).collect();
        let mean: f64 = rhs.iter().sum::<f64>() / n as f64;
        for v in &mut rhs {
            *v -= mean;
        }
        let sys = SparseSystem {
            matrix: k.clone(),
            rhs: rhs.clone(),
            constraint: Constraint::ZeroMean,
        };
        let (x, _) = solve_constrained(&sys, 1e-10).unwrap();
        let sum: f64 = x.iter().sum();
        assert!(sum.abs() < 1e-12, "zero mean violated: {sum}");

        // dense Lagrange-multiplier oracle [[K, 1],[1^T, 0]]
        let mut dense = vec![vec![0.0; n + 1]; n + 1];
        for (r, c, v) in k.triplets() {
            dense[r][c] += v;
        }
        for i in 0..n {
            dense[i][n] = 1.0;
            dense[n][i] = 1.0;
        }
        let mut b = rhs.clone();
        b.push(0.0);
        let y = dense_solve(dense, b);
        for i in 0..n {
            assert!((x[i] - y[i]).abs() < 1e-10, "node {i}: {} vs {}", x[i], y[i]);
        }
    }

    fn dense_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
        let n = b.len();
        for col in 0..n {
            let piv = (col..n)
                .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
                .unwrap();
            a.swap(col, piv);
            b.swap(col, piv);
            let d = a[col][col];
            for r in col + 1..n {
                let f = a[r][col] / d;
                for c in col..n {
                    let v = a[col][c];
                    a[r][c] -= f * v;
                }
                b[r] -= f * b[col];
            }
        }
        let mut x = vec![0.0; n];
        for r in (0..n).rev() {
            let mut acc = b[r];
            for c in r + 1..n {
                acc -= a[r][c] * x[c];
            }
            x[r] = acc / a[r][r];
        }
        x
    }

    #[test]
    fn cholesky_matches_dense_and_is_deterministic() {
        let mesh = unit_square(0.25);
        let sigma = ScalarField::from_fn(mesh.clone(), |x, y| 1.0 + x * y);
        let k = assemble_stiffness(&mesh, &sigma).unwrap();
        let m = assemble_mass(&mesh);
        let a = csr_add(&k, 1.0, &m, 1.0); // SPD
        let chol = SparseCholesky::factor(&a).unwrap();
        let b: Vec<f64> = (0..mesh.num_vertices()).map(|i| (i as f64 * 0.7).cos()).collect();
        let x1 = chol.solve(&b);
        let x2 = chol.solve(&b);
        assert_eq!(x1, x2, "solves must be bit-deterministic");
        let r = a.mul_vec(&x1);
        let rel = r
            .iter()
            .zip(&b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
            / norm(&b);
        assert!(rel < 1e-12, "residual {rel}");
    }

    #[test]
    fn pcg_solves_spd_system() {
        let mesh = unit_square(0.2);
        let sigma = ScalarField::constant(mesh.clone(), 1.0);
        let k = assemble_stiffness(&mesh, &sigma).unwrap();
        let m = assemble_mass(&mesh);
        let a = csr_add(&k, 1.0, &m, 1.0);
        let b: Vec<f64> = (0..mesh.num_vertices()).map(|i| ((i * 7) % 13) as f64 - 6.0).collect();
        let d = a.diagonal();
        let (x, rep) = pcg(
            &b,
            |p| a.mul_vec(p),
            |r| r.iter().zip(&d).map(|(v, di)| v / di).collect(),
            1e-10,
            2000,
        )
        .unwrap();
        assert!(rep.residual <= 1e-10);
        let r = a.mul_vec(&x);
        let rel = r.iter().zip(&b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt() / norm(&b);
        assert!(rel <= 1e-9, "{rel}");
    }

    #[test]
    fn csr_matmul_small() {
        let a = CsrMatrix::from_triplets(2, 3, &[(0, 0, 1.0), (0, 2, 2.0), (1, 1, 3.0)]);
        let b = CsrMatrix::from_triplets(3, 2, &[(0, 0, 4.0), (1, 1, 5.0), (2, 0, 6.0), (2, 1, 7.0)]);
        let c = csr_matmul(&a, &b);
        // [[1,0,2],[0,3,0]] * [[4,0],[0,5],[6,7]] = [[16,14],[0,15]]
        let want = [[16.0, 14.0], [0.0, 15.0]];
        for r in 0..2 {
            for cc in 0..2 {
                let got: f64 = c.row(r).find(|&(j, _)| j == cc).map(|(_, v)| v).unwrap_or(0.0);
                assert!((got - want[r][cc]).abs() < 1e-14);
            }
        }
    }
}
