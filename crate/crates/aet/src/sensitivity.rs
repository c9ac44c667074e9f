//! Linearization of the power-density map: the derivative problem, its adjoint,
//! the Gauss-Newton normal operator, and the fourth-order Gram operator that
//! lifts adjoints into the smoother solution space.
//!
//! The derivative of `E(sigma) = sigma |grad u|^2` in direction `tau` is
//! `E'tau = tau |grad u|^2 + 2 sigma grad u . grad xi`, where `xi` solves the
//! forward operator with load `-div(tau grad u)` and zero net electrode currents;
//! the adjoint is `E'* z = |grad u|^2 z - grad u . grad v(z)` with `v` solving the
//! same operator with load `2 sigma z grad u . grad w`. Both solves share the
//! factorization cached at `sigma`, and all quadratures match the assembly rules,
//! so the discrete adjoint identity holds to solver precision.
//!
//! Per-triangle results are returned as cell fields; nodal versions are
//! `L^2`-projections through the mass matrix so that inner-product pairings stay
//! consistent.

use std::sync::Arc;

use rayon::prelude::*;
use thiserror::Error;

use crate::fem::{
    assemble_mass, assemble_weighted_stiffness, cell_to_dual, gradient_per_triangle, CellField,
    CsrMatrix, ElectrodeZeta, FemError, PowerDensity, ScalarField, SparseCholesky,
};
use crate::forward::{
    adjoint_load, derivative_load, CurrentPattern, DcmSystem, ForwardError, ForwardSolution,
    ScemSystem,
};
use crate::mesh::Mesh;

#[derive(Debug, Error)]
pub enum SensitivityError {
    #[error(transparent)]
    Fem(#[from] FemError),
    #[error(transparent)]
    Forward(#[from] ForwardError),
    #[error("{0}")]
    Invalid(String),
}

/// Mass matrix with its factorization, shared across consumers.
pub struct MassOps {
    pub matrix: CsrMatrix,
    pub chol: SparseCholesky,
}

impl MassOps {
    pub fn new(mesh: &Mesh) -> Result<Self, FemError> {
        let matrix = assemble_mass(mesh);
        let chol = SparseCholesky::factor(&matrix)?;
        Ok(Self { matrix, chol })
    }

    /// Nodal `L^2` projection of a cell field.
    pub fn project_cells(&self, mesh: &Arc<Mesh>, cell: &CellField) -> ScalarField {
        let dual = cell_to_dual(mesh, cell.values());
        ScalarField::new(mesh.clone(), self.chol.solve(&dual)).expect("projection is finite")
    }
}

/// The factored forward operator behind a linearization: SCEM with electrode
/// unknowns, or DCM with homogeneous Dirichlet conditions.
pub enum ForwardOperator {
    Scem(ScemSystem),
    Dcm(DcmSystem),
}

impl ForwardOperator {
    fn solve_interior_load(&self, load: &[f64]) -> Result<ForwardSolution, ForwardError> {
        match self {
            ForwardOperator::Scem(s) => s.solve_interior_load(load),
            ForwardOperator::Dcm(s) => s.solve_interior_load(load),
        }
    }
}

/// Cached forward data of one measurement at the linearization point.
pub struct MeasurementState {
    pub solution: ForwardSolution,
    pub grad_u: Vec<[f64; 2]>,
    /// `|grad u|^2` per triangle.
    pub grad_sq: Vec<f64>,
}

impl MeasurementState {
    fn new(solution: ForwardSolution) -> Self {
        let grad_u = gradient_per_triangle(&solution.u);
        let grad_sq = grad_u.iter().map(|g| g[0] * g[0] + g[1] * g[1]).collect();
        Self {
            solution,
            grad_u,
            grad_sq,
        }
    }
}

/// Solution of the derivative problem: the potential perturbation and electrode
/// voltage perturbations (empty for DCM).
#[derive(Debug, Clone)]
pub struct DerivativeSolution {
    pub xi: ScalarField,
    pub xi_voltages: Vec<f64>,
}

/// Solution of the adjoint auxiliary problem.
#[derive(Debug, Clone)]
pub struct AdjointSolution {
    pub v: ScalarField,
    pub v_voltages: Vec<f64>,
}

/// Immutable linearization of the power-density map at a fixed conductivity:
/// factored forward operator plus per-measurement forward solutions.
pub struct LinearizationState {
    mesh: Arc<Mesh>,
    sigma: ScalarField,
    sigma_means: Vec<f64>,
    operator: ForwardOperator,
    measurements: Vec<MeasurementState>,
    mass: Arc<MassOps>,
}

impl LinearizationState {
    pub fn new_scem(
        mesh: &Arc<Mesh>,
        sigma: &ScalarField,
        zeta: &ElectrodeZeta,
        patterns: &[CurrentPattern],
        mass: Arc<MassOps>,
    ) -> Result<Self, SensitivityError> {
        let system = ScemSystem::assemble(mesh, sigma, zeta)?;
        let measurements = patterns
            .iter()
            .map(|p| Ok(MeasurementState::new(system.solve_current(p)?)))
            .collect::<Result<Vec<_>, ForwardError>>()?;
        Ok(Self {
            mesh: mesh.clone(),
            sigma: sigma.clone(),
            sigma_means: sigma.cell_means(),
            operator: ForwardOperator::Scem(system),
            measurements,
            mass,
        })
    }

    pub fn new_dcm(
        mesh: &Arc<Mesh>,
        sigma: &ScalarField,
        traces: &[ScalarField],
        mass: Arc<MassOps>,
    ) -> Result<Self, SensitivityError> {
        let system = DcmSystem::assemble(mesh, sigma)?;
        let measurements = traces
            .iter()
            .map(|g| Ok(MeasurementState::new(system.solve_dirichlet(g.values())?)))
            .collect::<Result<Vec<_>, ForwardError>>()?;
        Ok(Self {
            mesh: mesh.clone(),
            sigma: sigma.clone(),
            sigma_means: sigma.cell_means(),
            operator: ForwardOperator::Dcm(system),
            measurements,
            mass,
        })
    }

    pub fn mesh(&self) -> &Arc<Mesh> {
        &self.mesh
    }

    pub fn sigma(&self) -> &ScalarField {
        &self.sigma
    }

    pub fn mass(&self) -> &Arc<MassOps> {
        &self.mass
    }

    pub fn operator(&self) -> &ForwardOperator {
        &self.operator
    }

    pub fn measurement_count(&self) -> usize {
        self.measurements.len()
    }

    pub fn measurement(&self, m: usize) -> &MeasurementState {
        &self.measurements[m]
    }

    /// Power density of measurement `m` at the linearization point.
    pub fn power_density(&self, m: usize) -> PowerDensity {
        let values: Vec<f64> = self.measurements[m]
            .grad_sq
            .iter()
            .zip(&self.sigma_means)
            .map(|(g2, s)| s * g2)
            .collect();
        CellField::new(self.mesh.clone(), values).expect("power density is finite")
    }

    /// Solves the derivative problem for measurement `m` in direction `tau`.
    pub fn derivative_solve(
        &self,
        m: usize,
        tau: &ScalarField,
    ) -> Result<DerivativeSolution, SensitivityError> {
        Ok(self.derivative_solve_means(m, &tau.cell_means())?)
    }

    fn derivative_solve_means(
        &self,
        m: usize,
        tau_means: &[f64],
    ) -> Result<DerivativeSolution, SensitivityError> {
        let state = &self.measurements[m];
        let load = derivative_load(&self.mesh, tau_means, &state.grad_u);
        let sol = self.operator.solve_interior_load(&load)?;
        Ok(DerivativeSolution {
            xi: sol.u,
            xi_voltages: sol.voltages,
        })
    }

    /// `E'(sigma) tau` per triangle for measurement `m`.
    pub fn apply_derivative(
        &self,
        m: usize,
        tau: &ScalarField,
        deriv: &DerivativeSolution,
    ) -> CellField {
        self.apply_derivative_means(m, &tau.cell_means(), deriv)
    }

    fn apply_derivative_means(
        &self,
        m: usize,
        tau_means: &[f64],
        deriv: &DerivativeSolution,
    ) -> CellField {
        let state = &self.measurements[m];
        let grad_xi = gradient_per_triangle(&deriv.xi);
        let values: Vec<f64> = (0..self.mesh.num_triangles())
            .map(|t| {
                tau_means[t] * state.grad_sq[t]
                    + 2.0
                        * self.sigma_means[t]
                        * (state.grad_u[t][0] * grad_xi[t][0] + state.grad_u[t][1] * grad_xi[t][1])
            })
            .collect();
        CellField::new(self.mesh.clone(), values).expect("derivative is finite")
    }

    /// Solves the adjoint auxiliary problem for measurement `m` and data `z`.
    pub fn adjoint_solve(&self, m: usize, z: &CellField) -> Result<AdjointSolution, SensitivityError> {
        let state = &self.measurements[m];
        let load = adjoint_load(&self.mesh, &self.sigma_means, z.values(), &state.grad_u);
        let sol = self.operator.solve_interior_load(&load)?;
        Ok(AdjointSolution {
            v: sol.u,
            v_voltages: sol.voltages,
        })
    }

    /// `E'(sigma)* z` per triangle for measurement `m`.
    pub fn adjoint_cell(&self, m: usize, z: &CellField, adj: &AdjointSolution) -> CellField {
        let state = &self.measurements[m];
        let grad_v = gradient_per_triangle(&adj.v);
        let values: Vec<f64> = (0..self.mesh.num_triangles())
            .map(|t| {
                state.grad_sq[t] * z.values()[t]
                    - (state.grad_u[t][0] * grad_v[t][0] + state.grad_u[t][1] * grad_v[t][1])
            })
            .collect();
        CellField::new(self.mesh.clone(), values).expect("adjoint field is finite")
    }

    /// Nodal `E'(sigma)* z` via `L^2` projection, keeping pairings consistent:
    /// `l2_inner(tau, apply_adjoint(z)) == cell_l2_inner(E' tau, z)`.
    pub fn apply_adjoint(
        &self,
        m: usize,
        z: &CellField,
        adj: &AdjointSolution,
    ) -> ScalarField {
        let cell = self.adjoint_cell(m, z, adj);
        self.mass.project_cells(&self.mesh, &cell)
    }

    /// Dual vector of the normal-operator action `sum_m E'_m* E'_m tau`.
    pub fn normal_apply_dual(&self, tau_values: &[f64]) -> Result<Vec<f64>, SensitivityError> {
        let tau_means = nodal_cell_means(&self.mesh, tau_values);
        let per_measurement: Vec<Result<Vec<f64>, SensitivityError>> = (0..self.measurements.len())
            .into_par_iter()
            .map(|m| {
                let deriv = self.derivative_solve_means(m, &tau_means)?;
                let d = self.apply_derivative_means(m, &tau_means, &deriv);
                let adj = self.adjoint_solve(m, &d)?;
                let cell = self.adjoint_cell(m, &d, &adj);
                Ok(cell_to_dual(&self.mesh, cell.values()))
            })
            .collect();
        let mut f = vec![0.0; self.mesh.num_vertices()];
        for part in per_measurement {
            let part = part?;
            for (acc, v) in f.iter_mut().zip(&part) {
                *acc += v;
            }
        }
        Ok(f)
    }

    /// Nodal action of the normal operator `M = sum_m E'_m* E'_m`.
    pub fn apply_normal(&self, tau: &ScalarField) -> Result<ScalarField, SensitivityError> {
        let dual = self.normal_apply_dual(tau.values())?;
        Ok(ScalarField::new(self.mesh.clone(), self.mass.chol.solve(&dual))?)
    }

    /// Dual vector of `sum_m E'_m* r_m` for per-measurement cell residuals.
    pub fn residual_dual(&self, residuals: &[CellField]) -> Result<Vec<f64>, SensitivityError> {
        if residuals.len() != self.measurements.len() {
            return Err(SensitivityError::Invalid(format!(
                "{} residuals for {} measurements",
                residuals.len(),
                self.measurements.len()
            )));
        }
        let per_measurement: Vec<Result<Vec<f64>, SensitivityError>> = (0..self.measurements.len())
            .into_par_iter()
            .map(|m| {
                let adj = self.adjoint_solve(m, &residuals[m])?;
                let cell = self.adjoint_cell(m, &residuals[m], &adj);
                Ok(cell_to_dual(&self.mesh, cell.values()))
            })
            .collect();
        let mut f = vec![0.0; self.mesh.num_vertices()];
        for part in per_measurement {
            let part = part?;
            for (acc, v) in f.iter_mut().zip(&part) {
                *acc += v;
            }
        }
        Ok(f)
    }

    /// Local (solve-free) part of the normal operator: the Gram matrix of the
    /// multiplicative term `tau_mean |grad u|^2`. Used to precondition the step
    /// solve; the solve-based smoothing terms are omitted on purpose.
    pub fn normal_local_matrix(&self) -> CsrMatrix {
        let n = self.mesh.num_vertices();
        let mut triplets = Vec::with_capacity(9 * self.mesh.num_triangles());
        for (t, tri) in self.mesh.triangles().iter().enumerate() {
            let mut w = 0.0;
            for state in &self.measurements {
                w += state.grad_sq[t] * state.grad_sq[t];
            }
            w *= self.mesh.tri_area(t) / 9.0;
            for i in 0..3 {
                for j in 0..3 {
                    triplets.push((tri[i], tri[j], w));
                }
            }
        }
        CsrMatrix::from_triplets(n, n, &triplets)
    }
}

fn nodal_cell_means(mesh: &Mesh, values: &[f64]) -> Vec<f64> {
    mesh.triangles()
        .iter()
        .map(|t| (values[t[0]] + values[t[1]] + values[t[2]]) / 3.0)
        .collect()
}

/// Discrete `H^2`-type Gram operator `R = I + beta^2 Laplacian^2` in mixed form:
/// the auxiliary field `chi ~ Laplacian(tau)` is the weak Neumann Laplacian
/// `chi = -M^{-1} K tau`, and `<R tau, w> = <tau, w> + beta^2 <chi(tau), chi(w)>`.
pub struct GramOperator {
    beta: f64,
    stiffness: CsrMatrix,
    mass: Arc<MassOps>,
}

/// Assembles the Gram operator on its own mass matrix.
pub fn gram_assemble(mesh: &Arc<Mesh>, beta: f64) -> Result<GramOperator, SensitivityError> {
    let mass = Arc::new(MassOps::new(mesh)?);
    GramOperator::with_mass(mesh, beta, mass)
}

impl GramOperator {
    pub fn with_mass(
        mesh: &Arc<Mesh>,
        beta: f64,
        mass: Arc<MassOps>,
    ) -> Result<Self, SensitivityError> {
        if !(beta > 0.0) {
            return Err(SensitivityError::Invalid(format!(
                "gram scaling beta must be positive, got {beta}"
            )));
        }
        let ones = vec![1.0; mesh.num_vertices()];
        let stiffness = assemble_weighted_stiffness(mesh, &ones);
        Ok(Self {
            beta,
            stiffness,
            mass,
        })
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn stiffness(&self) -> &CsrMatrix {
        &self.stiffness
    }

    pub fn mass(&self) -> &Arc<MassOps> {
        &self.mass
    }

    /// Dual action `M tau + beta^2 K M^{-1} K tau`.
    pub fn apply_dual(&self, tau: &[f64]) -> Vec<f64> {
        let kt = self.stiffness.mul_vec(tau);
        let chi = self.mass.chol.solve(&kt);
        let k_chi = self.stiffness.mul_vec(&chi);
        let mt = self.mass.matrix.mul_vec(tau);
        mt.iter()
            .zip(&k_chi)
            .map(|(a, b)| a + self.beta * self.beta * b)
            .collect()
    }

    /// Nodal action `tau + beta^2 M^{-1} K M^{-1} K tau`.
    pub fn apply(&self, tau: &ScalarField) -> ScalarField {
        let dual = self.apply_dual(tau.values());
        ScalarField::new(tau.mesh().clone(), self.mass.chol.solve(&dual))
            .expect("gram action is finite")
    }

    /// Bilinear form `<R tau, w>`.
    pub fn inner(&self, tau: &[f64], w: &[f64]) -> f64 {
        self.apply_dual(tau).iter().zip(w).map(|(a, b)| a * b).sum()
    }
}

/// Applies `gram_apply` to a field (spec-level convenience).
pub fn gram_apply(gram: &GramOperator, tau: &ScalarField) -> ScalarField {
    gram.apply(tau)
}
