//! Forward electrostatics: the smoothened complete electrode model, the classic
//! complete electrode model (constant contact conductance), and the Dirichlet
//! continuum model, plus current patterns and power-density evaluation.
//!
//! The SCEM/CEM weak form couples interior nodal unknowns with one voltage per
//! electrode; the grounding `sum U_l = 0` is enforced by eliminating the last
//! voltage, which keeps the system symmetric positive definite. Factorizations are
//! cached in the system objects so many right-hand sides (current patterns,
//! derivative and adjoint loads) reuse one decomposition.

use std::sync::Arc;

use thiserror::Error;

use crate::fem::{
    assemble_robin_electrode, assemble_stiffness, cell_to_dual, gradient_per_triangle,
    CellField, CsrMatrix, ElectrodeZeta, FemError, PowerDensity, RobinBlocks, ScalarField,
    SparseCholesky, ZetaProfile,
};
use crate::mesh::{BoundaryLabel, Mesh};

#[derive(Debug, Error)]
pub enum ForwardError {
    #[error("invalid current pattern: {0}")]
    InvalidPattern(String),
    #[error("mesh has no electrodes")]
    NoElectrodes,
    #[error("mesh lacks Dirichlet boundary labels")]
    MissingDirichlet,
    #[error(transparent)]
    Fem(#[from] FemError),
}

/// Injected electrode currents with zero total charge.
#[derive(Debug, Clone)]
pub struct CurrentPattern {
    currents: Vec<f64>,
}

impl CurrentPattern {
    pub fn new(currents: Vec<f64>) -> Result<Self, ForwardError> {
        let total: f64 = currents.iter().sum();
        let scale: f64 = currents.iter().map(|v| v.abs()).sum::<f64>().max(1.0);
        if total.abs() > 1e-12 * scale {
            return Err(ForwardError::InvalidPattern(format!(
                "currents must sum to zero, got {total:e}"
            )));
        }
        Ok(Self { currents })
    }

    pub fn len(&self) -> usize {
        self.currents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.currents.is_empty()
    }

    pub fn currents(&self) -> &[f64] {
        &self.currents
    }
}

/// Fourier current pattern `I_l = cos(2 pi n l / L)` for `l = 1..=L`.
pub fn fourier_pattern(n: usize, l_count: usize) -> Result<CurrentPattern, ForwardError> {
    if n == 0 || n % l_count == 0 {
        return Err(ForwardError::InvalidPattern(format!(
            "frequency {n} violates charge conservation for {l_count} electrodes"
        )));
    }
    let currents: Vec<f64> = (1..=l_count)
        .map(|l| (std::f64::consts::TAU * n as f64 * l as f64 / l_count as f64).cos())
        .collect();
    // the analytic sum is exactly zero; remove the O(eps) rounding so the
    // invariant holds bitwise
    let mut pattern = currents;
    let total: f64 = pattern.iter().sum();
    let last = pattern.len() - 1;
    pattern[last] -= total;
    CurrentPattern::new(pattern)
}

/// Smooth conductance bump on an electrode of length `l_e`, scaled to the given
/// peak at the center and vanishing at the endpoints.
#[derive(Debug, Clone, Copy)]
pub struct ConductanceBump {
    pub electrode_len: f64,
    pub peak: f64,
}

/// The electrode conductance profile used by the smoothened model.
pub fn electrode_conductance_profile(l_e: f64, peak: f64) -> ConductanceBump {
    ConductanceBump {
        electrode_len: l_e,
        peak,
    }
}

impl ConductanceBump {
    /// Evaluate at arclength `s` measured from the electrode center.
    pub fn eval(&self, s: f64) -> f64 {
        ZetaProfile::Bump { peak: self.peak }.eval(s, self.electrode_len)
    }
}

/// Electrode boundary model selection.
#[derive(Debug, Clone)]
pub enum ElectrodeModel {
    /// Smoothened CEM: bump conductance with the given peak on every electrode.
    Scem { zeta_peak: f64 },
    /// Classic CEM with per-electrode contact impedances.
    Cem { contact_impedance: Vec<f64> },
}

impl ElectrodeModel {
    pub fn zeta(&self, electrode_count: usize) -> Result<ElectrodeZeta, ForwardError> {
        match self {
            ElectrodeModel::Scem { zeta_peak } => {
                Ok(ElectrodeZeta::uniform_bump(electrode_count, *zeta_peak)?)
            }
            ElectrodeModel::Cem { contact_impedance } => {
                if contact_impedance.len() != electrode_count {
                    return Err(ForwardError::InvalidPattern(format!(
                        "{} impedances for {} electrodes",
                        contact_impedance.len(),
                        electrode_count
                    )));
                }
                Ok(ElectrodeZeta::from_contact_impedance(contact_impedance)?)
            }
        }
    }
}

/// Interior potential plus electrode voltages (empty for the continuum model).
#[derive(Debug, Clone)]
pub struct ForwardSolution {
    pub u: ScalarField,
    pub voltages: Vec<f64>,
}

/// Assembled and factored (S)CEM operator at a fixed conductivity.
pub struct ScemSystem {
    mesh: Arc<Mesh>,
    robin: RobinBlocks,
    factor: SparseCholesky,
    n: usize,
    l_count: usize,
}

impl ScemSystem {
    pub fn assemble(
        mesh: &Arc<Mesh>,
        sigma: &ScalarField,
        zeta: &ElectrodeZeta,
    ) -> Result<Self, ForwardError> {
        let l_count = mesh.electrode_count();
        if l_count == 0 {
            return Err(ForwardError::NoElectrodes);
        }
        let n = mesh.num_vertices();
        let stiffness = assemble_stiffness(mesh, sigma)?;
        let robin = assemble_robin_electrode(mesh, zeta)?;
        let reduced = l_count - 1;
        let dim = n + reduced;

        let mut triplets = stiffness.triplets();
        triplets.extend(robin.uu.iter().copied());
        // node-voltage couplings with the grounding basis U_l = G utilde
        for m in 0..reduced {
            for &(i, b) in &robin.u_el[m] {
                triplets.push((i, n + m, -b));
                triplets.push((n + m, i, -b));
            }
            for &(i, b) in &robin.u_el[l_count - 1] {
                triplets.push((i, n + m, b));
                triplets.push((n + m, i, b));
            }
        }
        // voltage-voltage block G^T diag(c) G = diag(c_m) + c_{L-1}
        let c_last = robin.el_el[l_count - 1];
        for m in 0..reduced {
            triplets.push((n + m, n + m, robin.el_el[m]));
            for m2 in 0..reduced {
                triplets.push((n + m, n + m2, c_last));
            }
        }
        let matrix = CsrMatrix::from_triplets(dim, dim, &triplets);
        let factor = SparseCholesky::factor(&matrix)?;
        Ok(Self {
            mesh: mesh.clone(),
            robin,
            factor,
            n,
            l_count,
        })
    }

    pub fn mesh(&self) -> &Arc<Mesh> {
        &self.mesh
    }

    pub fn electrode_count(&self) -> usize {
        self.l_count
    }

    pub fn robin(&self) -> &RobinBlocks {
        &self.robin
    }

    fn split(&self, x: Vec<f64>) -> ForwardSolution {
        let mut u = x;
        let tail = u.split_off(self.n);
        let mut voltages = Vec::with_capacity(self.l_count);
        let mut sum = 0.0;
        for &v in &tail {
            voltages.push(v);
            sum += v;
        }
        voltages.push(-sum);
        ForwardSolution {
            u: ScalarField::new(self.mesh.clone(), u).expect("solution is finite"),
            voltages,
        }
    }

    /// Solve for an injected current pattern.
    pub fn solve_current(&self, pattern: &CurrentPattern) -> Result<ForwardSolution, ForwardError> {
        if pattern.len() != self.l_count {
            return Err(ForwardError::InvalidPattern(format!(
                "pattern has {} entries for {} electrodes",
                pattern.len(),
                self.l_count
            )));
        }
        let mut rhs = vec![0.0; self.n + self.l_count - 1];
        let i_last = pattern.currents()[self.l_count - 1];
        for m in 0..self.l_count - 1 {
            rhs[self.n + m] = pattern.currents()[m] - i_last;
        }
        Ok(self.split(self.factor.solve(&rhs)))
    }

    /// Solve with a prescribed interior load and zero net electrode currents
    /// (derivative and adjoint problems).
    pub fn solve_interior_load(&self, load: &[f64]) -> Result<ForwardSolution, ForwardError> {
        if load.len() != self.n {
            return Err(FemError::LengthMismatch {
                got: load.len(),
                expected: self.n,
            }
            .into());
        }
        let mut rhs = vec![0.0; self.n + self.l_count - 1];
        rhs[..self.n].copy_from_slice(load);
        Ok(self.split(self.factor.solve(&rhs)))
    }

    /// Currents recovered from a solution, `int_{e_l} zeta (U_l - u)`.
    pub fn electrode_currents(&self, solution: &ForwardSolution) -> Vec<f64> {
        (0..self.l_count)
            .map(|l| {
                let mut acc = self.robin.el_el[l] * solution.voltages[l];
                for &(i, b) in &self.robin.u_el[l] {
                    acc -= b * solution.u.values()[i];
                }
                acc
            })
            .collect()
    }
}

/// SCEM forward solve; `zeta` holds one profile per electrode.
pub fn solve_scem(
    mesh: &Arc<Mesh>,
    sigma: &ScalarField,
    zeta: &ElectrodeZeta,
    pattern: &CurrentPattern,
) -> Result<ForwardSolution, ForwardError> {
    ScemSystem::assemble(mesh, sigma, zeta)?.solve_current(pattern)
}

/// Classic CEM forward solve with contact impedances `z_l`.
pub fn solve_cem(
    mesh: &Arc<Mesh>,
    sigma: &ScalarField,
    contact_impedance: &[f64],
    pattern: &CurrentPattern,
) -> Result<ForwardSolution, ForwardError> {
    let zeta = ElectrodeZeta::from_contact_impedance(contact_impedance)?;
    solve_scem(mesh, sigma, &zeta, pattern)
}

/// Assembled and factored Dirichlet continuum operator at a fixed conductivity.
pub struct DcmSystem {
    mesh: Arc<Mesh>,
    stiffness: CsrMatrix,
    factor: SparseCholesky,
    free: Vec<usize>,
    is_boundary: Vec<bool>,
}

impl DcmSystem {
    pub fn assemble(mesh: &Arc<Mesh>, sigma: &ScalarField) -> Result<Self, ForwardError> {
        if mesh.boundary_edges().is_empty()
            || mesh
                .boundary_edges()
                .iter()
                .any(|e| e.label != BoundaryLabel::DirichletBoundary)
        {
            return Err(ForwardError::MissingDirichlet);
        }
        let n = mesh.num_vertices();
        let stiffness = assemble_stiffness(mesh, sigma)?;
        let mut is_boundary = vec![false; n];
        for e in mesh.boundary_edges() {
            is_boundary[e.vertices[0]] = true;
            is_boundary[e.vertices[1]] = true;
        }
        let free: Vec<usize> = (0..n).filter(|&v| !is_boundary[v]).collect();
        let mut new_index = vec![usize::MAX; n];
        for (k, &v) in free.iter().enumerate() {
            new_index[v] = k;
        }
        let reduced: Vec<(usize, usize, f64)> = stiffness
            .triplets()
            .into_iter()
            .filter_map(|(r, c, v)| {
                if new_index[r] != usize::MAX && new_index[c] != usize::MAX {
                    Some((new_index[r], new_index[c], v))
                } else {
                    None
                }
            })
            .collect();
        let a = CsrMatrix::from_triplets(free.len(), free.len(), &reduced);
        let factor = SparseCholesky::factor(&a)?;
        Ok(Self {
            mesh: mesh.clone(),
            stiffness,
            factor,
            free,
            is_boundary,
        })
    }

    pub fn mesh(&self) -> &Arc<Mesh> {
        &self.mesh
    }

    /// Solve with boundary values taken from `g` at Dirichlet nodes (interior
    /// entries of `g` are ignored); the data is imposed strongly.
    pub fn solve_dirichlet(&self, g: &[f64]) -> Result<ForwardSolution, ForwardError> {
        let n = self.mesh.num_vertices();
        if g.len() != n {
            return Err(FemError::LengthMismatch {
                got: g.len(),
                expected: n,
            }
            .into());
        }
        let mut lifted = vec![0.0; n];
        for v in 0..n {
            if self.is_boundary[v] {
                lifted[v] = g[v];
            }
        }
        let coupling = self.stiffness.mul_vec(&lifted);
        let rhs: Vec<f64> = self.free.iter().map(|&v| -coupling[v]).collect();
        let x = self.factor.solve(&rhs);
        let mut u = lifted;
        for (k, &v) in self.free.iter().enumerate() {
            u[v] = x[k];
        }
        Ok(ForwardSolution {
            u: ScalarField::new(self.mesh.clone(), u)?,
            voltages: Vec::new(),
        })
    }

    /// Solve with an interior load and homogeneous Dirichlet data.
    pub fn solve_interior_load(&self, load: &[f64]) -> Result<ForwardSolution, ForwardError> {
        let n = self.mesh.num_vertices();
        if load.len() != n {
            return Err(FemError::LengthMismatch {
                got: load.len(),
                expected: n,
            }
            .into());
        }
        let rhs: Vec<f64> = self.free.iter().map(|&v| load[v]).collect();
        let x = self.factor.solve(&rhs);
        let mut u = vec![0.0; n];
        for (k, &v) in self.free.iter().enumerate() {
            u[v] = x[k];
        }
        Ok(ForwardSolution {
            u: ScalarField::new(self.mesh.clone(), u)?,
            voltages: Vec::new(),
        })
    }
}

/// Continuum-model forward solve with Dirichlet trace `g`.
pub fn solve_dcm(
    mesh: &Arc<Mesh>,
    sigma: &ScalarField,
    g: &ScalarField,
) -> Result<ForwardSolution, ForwardError> {
    DcmSystem::assemble(mesh, sigma)?.solve_dirichlet(g.values())
}

/// Interior power density `E = mean(sigma)_T |grad u|^2_T` per triangle.
pub fn power_density(sigma: &ScalarField, solution: &ForwardSolution) -> PowerDensity {
    let mesh = sigma.mesh();
    let grads = gradient_per_triangle(&solution.u);
    let means = sigma.cell_means();
    let values: Vec<f64> = grads
        .iter()
        .zip(&means)
        .map(|(g, s)| s * (g[0] * g[0] + g[1] * g[1]))
        .collect();
    CellField::new(mesh.clone(), values).expect("power density is finite")
}

/// Dual vector of the load `-int tau grad(u) . grad(w)` used by the derivative
/// problem; `tau` enters through triangle means, mirroring the stiffness assembly.
pub fn derivative_load(mesh: &Mesh, tau_means: &[f64], grad_u: &[[f64; 2]]) -> Vec<f64> {
    let mut f = vec![0.0; mesh.num_vertices()];
    for (t, tri) in mesh.triangles().iter().enumerate() {
        let g = mesh.geometry(t);
        let w = -tau_means[t] * g.area;
        for k in 0..3 {
            f[tri[k]] += w * (grad_u[t][0] * g.grads[k][0] + grad_u[t][1] * g.grads[k][1]);
        }
    }
    f
}

/// Dual vector of the adjoint load `int 2 sigma z grad(u) . grad(w)`.
pub fn adjoint_load(mesh: &Mesh, sigma_means: &[f64], z: &[f64], grad_u: &[[f64; 2]]) -> Vec<f64> {
    let mut f = vec![0.0; mesh.num_vertices()];
    for (t, tri) in mesh.triangles().iter().enumerate() {
        let g = mesh.geometry(t);
        let w = 2.0 * sigma_means[t] * z[t] * g.area;
        for k in 0..3 {
            f[tri[k]] += w * (grad_u[t][0] * g.grads[k][0] + grad_u[t][1] * g.grads[k][1]);
        }
    }
    f
}

/// Residual dual and misfit helper: `int g phi_i` for a cell field.
pub fn cell_dual(mesh: &Mesh, g: &CellField) -> Vec<f64> {
    cell_to_dual(mesh, g.values())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{
        extract_interior_submesh, generate_disk_mesh, generate_rectangle_mesh, ElectrodeLayout,
        GeneratorOptions,
    };

    fn disk(h: f64) -> Arc<Mesh> {
        let layout = ElectrodeLayout::uniform(16, 0.5).unwrap();
        Arc::new(generate_disk_mesh(0.25, h, &layout, &GeneratorOptions::default()).unwrap())
    }

    #[test]
    fn fourier_pattern_values() {
        let p = fourier_pattern(2, 16).unwrap();
        assert!((p.currents()[15] - 1.0).abs() < 1e-12, "I_16 = cos(4 pi) = 1");
        let p1 = fourier_pattern(1, 16).unwrap();
        assert!(p1.currents().iter().sum::<f64>().abs() < 1e-12);
        let p3 = fourier_pattern(3, 16).unwrap();
        let dot: f64 = p1
            .currents()
            .iter()
            .zip(p3.currents())
            .map(|(a, b)| a * b)
            .sum();
        assert!(dot.abs() < 1e-12, "patterns must be orthogonal, dot = {dot}");
        assert!(fourier_pattern(0, 16).is_err());
        assert!(fourier_pattern(16, 16).is_err());
        assert!(fourier_pattern(32, 16).is_err());
    }

    #[test]
    fn conductance_profile_endpoints_center_symmetry() {
        let p = electrode_conductance_profile(0.05, 1.0);
        assert_eq!(p.eval(-0.025), 0.0);
        assert_eq!(p.eval(0.025), 0.0);
        assert!((p.eval(0.0) - 1.0).abs() < 1e-15);
        assert!((p.eval(0.01) - p.eval(-0.01)).abs() < 1e-15);
    }

    #[test]
    fn scem_zero_current_zero_solution() {
        let mesh = disk(0.03);
        let sigma = ScalarField::constant(mesh.clone(), 1.0);
        let zeta = ElectrodeZeta::uniform_bump(16, 1.0).unwrap();
        let pattern = CurrentPattern::new(vec![0.0; 16]).unwrap();
        let sol = solve_scem(&mesh, &sigma, &zeta, &pattern).unwrap();
        assert!(sol.u.values().iter().all(|&v| v.abs() < 1e-12));
        assert!(sol.voltages.iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn scem_voltage_grounding_and_currents() {
        let mesh = disk(0.02);
        let sigma = ScalarField::from_fn(mesh.clone(), |x, y| 0.5 + x * x + 0.3 * y * y);
        let zeta = ElectrodeZeta::uniform_bump(16, 1.0).unwrap();
        let system = ScemSystem::assemble(&mesh, &sigma, &zeta).unwrap();
        let pattern = fourier_pattern(2, 16).unwrap();
        let sol = system.solve_current(&pattern).unwrap();
        let sum: f64 = sol.voltages.iter().sum();
        assert!(sum.abs() < 1e-12, "grounding violated: {sum}");
        let recovered = system.electrode_currents(&sol);
        let scale: f64 = pattern.currents().iter().map(|v| v.abs()).fold(0.0, f64::max);
        for (r, i) in recovered.iter().zip(pattern.currents()) {
            assert!(
                (r - i).abs() <= 1e-8 * scale,
                "current mismatch: {r} vs {i}"
            );
        }
    }

    #[test]
    fn scem_linearity_in_pattern() {
        let mesh = disk(0.03);
        let sigma = ScalarField::constant(mesh.clone(), 0.5);
        let zeta = ElectrodeZeta::uniform_bump(16, 1.0).unwrap();
        let system = ScemSystem::assemble(&mesh, &sigma, &zeta).unwrap();
        let p1 = fourier_pattern(1, 16).unwrap();
        let p2 = fourier_pattern(2, 16).unwrap();
        let sum = CurrentPattern::new(
            p1.currents()
                .iter()
                .zip(p2.currents())
                .map(|(a, b)| a + b)
                .collect(),
        )
        .unwrap();
        let (s1, s2, s12) = (
            system.solve_current(&p1).unwrap(),
            system.solve_current(&p2).unwrap(),
            system.solve_current(&sum).unwrap(),
        );
        let max_u = s12.u.values().iter().fold(0.0_f64, |m, &v| m.max(v.abs()));
        for i in 0..mesh.num_vertices() {
            let lin = s1.u.values()[i] + s2.u.values()[i];
            assert!((s12.u.values()[i] - lin).abs() <= 1e-10 * max_u.max(1.0));
        }
    }

    #[test]
    fn scem_reciprocity() {
        let mesh = disk(0.02);
        let sigma = ScalarField::from_fn(mesh.clone(), |x, y| 0.4 + (3.0 * x).sin().powi(2) + y * y);
        let zeta = ElectrodeZeta::uniform_bump(16, 1.0).unwrap();
        let system = ScemSystem::assemble(&mesh, &sigma, &zeta).unwrap();
        let pi = fourier_pattern(1, 16).unwrap();
        let pj = fourier_pattern(3, 16).unwrap();
        let ui = system.solve_current(&pi).unwrap();
        let uj = system.solve_current(&pj).unwrap();
        let jtui: f64 = pj.currents().iter().zip(&ui.voltages).map(|(a, b)| a * b).sum();
        let ituj: f64 = pi.currents().iter().zip(&uj.voltages).map(|(a, b)| a * b).sum();
        assert!(
            (jtui - ituj).abs() <= 1e-8 * jtui.abs().max(ituj.abs()),
            "reciprocity violated: {jtui} vs {ituj}"
        );
    }

    #[test]
    fn scem_mirror_antisymmetry() {
        // sigma symmetric under x -> -x, pattern I^(1) flips sign under that mirror
        let mesh = disk(0.02);
        let sigma = ScalarField::from_fn(mesh.clone(), |x, y| 0.5 + x * x + 0.2 * y * y);
        let zeta = ElectrodeZeta::uniform_bump(16, 1.0).unwrap();
        let sol = solve_scem(&mesh, &sigma, &zeta, &fourier_pattern(1, 16).unwrap()).unwrap();
        use std::collections::HashMap;
        let quant = |x: f64| (x * 1e9).round() as i64;
        let mut index: HashMap<(i64, i64), usize> = HashMap::new();
        for (i, p) in mesh.vertices().iter().enumerate() {
            index.insert((quant(p[0]), quant(p[1])), i);
        }
        let max_u = sol.u.values().iter().fold(0.0_f64, |m, &v| m.max(v.abs()));
        // the vertex set is mirror symmetric but stitched diagonals are not, so the
        // discrete solutions agree only at the discretization level; sign or labeling
        // bugs would show up as O(1) violations
        for (i, p) in mesh.vertices().iter().enumerate() {
            let j = index[&(quant(-p[0]), quant(p[1]))];
            let err = (sol.u.values()[i] + sol.u.values()[j]).abs();
            assert!(err <= 2e-3 * max_u, "antisymmetry violated at {p:?}: {err:e}");
        }
    }

    #[test]
    fn cem_matches_scem_with_constant_zeta() {
        let mesh = disk(0.03);
        let sigma = ScalarField::constant(mesh.clone(), 1.0);
        let z = vec![2.0; 16];
        let const_zeta = ElectrodeZeta::from_contact_impedance(&z).unwrap();
        let b1 = assemble_robin_electrode(&mesh, &const_zeta).unwrap();
        let b2 = assemble_robin_electrode(
            &mesh,
            &ElectrodeZeta::new(vec![ZetaProfile::Constant { value: 0.5 }; 16]).unwrap(),
        )
        .unwrap();
        for (x, y) in b1.el_el.iter().zip(&b2.el_el) {
            assert!((x - y).abs() <= 1e-12);
        }
        for (x, y) in b1.uu.iter().zip(&b2.uu) {
            assert!((x.2 - y.2).abs() <= 1e-12);
        }
        // and the full path gives identical solutions
        let pattern = fourier_pattern(2, 16).unwrap();
        let s1 = solve_cem(&mesh, &sigma, &z, &pattern).unwrap();
        let s2 = solve_scem(&mesh, &sigma, &const_zeta, &pattern).unwrap();
        for (a, b) in s1.u.values().iter().zip(s2.u.values()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn cem_high_impedance_limit() {
        // with prescribed currents the interior potential tends to the z-independent
        // uniform-flux Neumann solution while the electrode voltages grow like z
        let mesh = disk(0.03);
        let sigma = ScalarField::constant(mesh.clone(), 1.0);
        let pattern = fourier_pattern(1, 16).unwrap();
        let u6 = solve_cem(&mesh, &sigma, &vec![1e6; 16], &pattern).unwrap();
        let u7 = solve_cem(&mesh, &sigma, &vec![1e7; 16], &pattern).unwrap();
        let u8 = solve_cem(&mesh, &sigma, &vec![1e8; 16], &pattern).unwrap();
        let diff = |a: &ForwardSolution, b: &ForwardSolution| {
            let d: Vec<f64> = a
                .u
                .values()
                .iter()
                .zip(b.u.values())
                .map(|(x, y)| x - y)
                .collect();
            let df = ScalarField::new(mesh.clone(), d).unwrap();
            crate::fem::l2_norm(&df)
        };
        let scale = crate::fem::l2_norm(&u6.u);
        let (d67, d78) = (diff(&u6, &u7), diff(&u7, &u8));
        // the z=1e8 system is nearly floating, so the comparison is roundoff-limited
        assert!(d67 / scale < 1e-5, "u not converged between z=1e6 and 1e7: {d67}");
        assert!(d78 / scale < 1e-5, "u not converged between z=1e7 and 1e8: {d78}");
        // voltages scale linearly with z in the decoupled limit
        let ratio = u8.voltages[0] / u7.voltages[0];
        assert!((ratio - 10.0).abs() < 0.1, "voltage scaling {ratio}");
    }

    #[test]
    fn cem_power_density_spikes_at_electrode_edges() {
        // the discontinuous Robin-to-insulated transition of the classic CEM makes the
        // cell at the electrode endpoint carry the edge singularity; the smoothened
        // model's conductance vanishes there
        let mesh = disk(0.005);
        let sigma = ScalarField::constant(mesh.clone(), 1.0);
        let pattern = fourier_pattern(2, 16).unwrap();
        let scem = solve_scem(
            &mesh,
            &sigma,
            &ElectrodeZeta::uniform_bump(16, 1.0).unwrap(),
            &pattern,
        )
        .unwrap();
        let cem = solve_cem(&mesh, &sigma, &vec![2.0; 16], &pattern).unwrap();
        let e_scem = power_density(&sigma, &scem);
        let e_cem = power_density(&sigma, &cem);
        let owners = mesh.boundary_edge_triangles();
        let endpoint_max = |e: &PowerDensity| -> f64 {
            let mut best = 0.0_f64;
            for l in 0..16 {
                let chain = mesh.electrode_chain(l).unwrap();
                for &edge in [chain[0], *chain.last().unwrap()].iter() {
                    best = best.max(e.values()[owners[edge]]);
                }
            }
            best
        };
        assert!(
            endpoint_max(&e_cem) > endpoint_max(&e_scem),
            "CEM must be more singular at electrode endpoints: {} vs {}",
            endpoint_max(&e_cem),
            endpoint_max(&e_scem)
        );
    }

    #[test]
    fn dcm_exact_for_p1_harmonic_data() {
        let mesh = Arc::new(
            generate_rectangle_mesh(1.0, 1.0, 0.125, &GeneratorOptions::default()).unwrap(),
        );
        let sigma = ScalarField::constant(mesh.clone(), 1.0);
        let g = ScalarField::from_fn(mesh.clone(), |x, _| x);
        let sol = solve_dcm(&mesh, &sigma, &g).unwrap();
        for (i, p) in mesh.vertices().iter().enumerate() {
            assert!((sol.u.values()[i] - p[0]).abs() < 1e-10);
        }
        let c = ScalarField::constant(mesh.clone(), 4.5);
        let sol = solve_dcm(&mesh, &sigma, &c).unwrap();
        for &v in sol.u.values() {
            assert!((v - 4.5).abs() < 1e-10);
        }
        assert!(sol.voltages.is_empty());
    }

    #[test]
    fn dcm_on_disk_submesh() {
        let mesh = disk(0.03);
        let (sub, _) = extract_interior_submesh(&mesh, 0.0).unwrap();
        let sub = Arc::new(sub);
        let sigma = ScalarField::constant(sub.clone(), 1.0);
        let g = ScalarField::from_fn(sub.clone(), |x, _| x);
        let sol = solve_dcm(&sub, &sigma, &g).unwrap();
        for (i, p) in sub.vertices().iter().enumerate() {
            assert!((sol.u.values()[i] - p[0]).abs() < 1e-9);
        }
    }

    #[test]
    fn dcm_quadratic_harmonic_convergence() {
        // run on the relabeled disk: the structured rectangle mesh reproduces the
        // five-point stencil, for which x^2 - y^2 is discretely harmonic (zero error)
        let err = |h: f64| -> f64 {
            let mesh = disk(h);
            let (sub, _) = extract_interior_submesh(&mesh, 0.0).unwrap();
            let sub = Arc::new(sub);
            let sigma = ScalarField::constant(sub.clone(), 1.0);
            let g = ScalarField::from_fn(sub.clone(), |x, y| x * x - y * y);
            let sol = solve_dcm(&sub, &sigma, &g).unwrap();
            sub.vertices()
                .iter()
                .enumerate()
                .map(|(i, p)| (sol.u.values()[i] - (p[0] * p[0] - p[1] * p[1])).abs())
                .fold(0.0, f64::max)
        };
        let (e1, e2) = (err(0.02), err(0.01));
        let rate = e1 / e2;
        assert!(
            (2.5..8.0).contains(&rate),
            "nodal max error should drop ~4x: {e1} -> {e2} (rate {rate})"
        );
    }

    #[test]
    fn dcm_requires_dirichlet_labels() {
        let mesh = disk(0.05);
        let sigma = ScalarField::constant(mesh.clone(), 1.0);
        let g = ScalarField::constant(mesh.clone(), 0.0);
        assert!(matches!(
            solve_dcm(&mesh, &sigma, &g),
            Err(ForwardError::MissingDirichlet)
        ));
    }

    #[test]
    fn power_density_basics() {
        let mesh = Arc::new(
            generate_rectangle_mesh(1.0, 1.0, 0.25, &GeneratorOptions::default()).unwrap(),
        );
        let u = ForwardSolution {
            u: ScalarField::from_fn(mesh.clone(), |x, _| x),
            voltages: Vec::new(),
        };
        let one = ScalarField::constant(mesh.clone(), 1.0);
        let two = ScalarField::constant(mesh.clone(), 2.0);
        for &v in power_density(&one, &u).values() {
            assert!((v - 1.0).abs() < 1e-12);
        }
        for &v in power_density(&two, &u).values() {
            assert!((v - 2.0).abs() < 1e-12);
        }
        // invariant under adding a constant to u
        let shifted = ForwardSolution {
            u: ScalarField::new(
                mesh.clone(),
                u.u.values().iter().map(|v| v + 7.0).collect(),
            )
            .unwrap(),
            voltages: Vec::new(),
        };
        let (e1, e2) = (power_density(&one, &u), power_density(&one, &shifted));
        for (a, b) in e1.values().iter().zip(e2.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn power_density_single_triangle_oracle() {
        let vertices = vec![[0.2, 0.1], [1.1, 0.3], [0.4, 0.9]];
        let triangles = vec![[0, 1, 2]];
        let boundary = vec![
            crate::mesh::BoundaryEdge { vertices: [0, 1], label: BoundaryLabel::DirichletBoundary },
            crate::mesh::BoundaryEdge { vertices: [1, 2], label: BoundaryLabel::DirichletBoundary },
            crate::mesh::BoundaryEdge { vertices: [2, 0], label: BoundaryLabel::DirichletBoundary },
        ];
        let mesh = Arc::new(Mesh::new(vertices.clone(), triangles, boundary, 1.0).unwrap());
        let uvals = [0.7, -0.2, 0.5];
        let sol = ForwardSolution {
            u: ScalarField::new(mesh.clone(), uvals.to_vec()).unwrap(),
            voltages: Vec::new(),
        };
        let svals = [1.0, 2.0, 4.0];
        let sigma = ScalarField::new(mesh.clone(), svals.to_vec()).unwrap();
        let e = power_density(&sigma, &sol);
        // hand-computed barycentric gradient
        let p = vertices;
        let two_a = (p[1][0] - p[0][0]) * (p[2][1] - p[0][1]) - (p[2][0] - p[0][0]) * (p[1][1] - p[0][1]);
        let gx = (uvals[0] * (p[1][1] - p[2][1])
            + uvals[1] * (p[2][1] - p[0][1])
            + uvals[2] * (p[0][1] - p[1][1]))
            / two_a;
        let gy = (uvals[0] * (p[2][0] - p[1][0])
            + uvals[1] * (p[0][0] - p[2][0])
            + uvals[2] * (p[1][0] - p[0][0]))
            / two_a;
        let want = (svals.iter().sum::<f64>() / 3.0) * (gx * gx + gy * gy);
        assert!((e.values()[0] - want).abs() < 1e-13, "{} vs {want}", e.values()[0]);
    }
}
