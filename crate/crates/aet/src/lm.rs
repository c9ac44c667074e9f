//! Levenberg-Marquardt reconstruction: the regularized step solve and the
//! LM-SCEM, LM-DCM and mixed LM-SCEM-DCM loops.
//!
//! Each step solves `(M + alpha R) tau = y` in the `L^2` duality, where `M` is the
//! Gauss-Newton normal operator of the power-density map, `R` the fourth-order
//! Gram operator, and `y` the adjoint-lifted data residual. The solve runs
//! preconditioned CG with operator applications against the factorization cached
//! at the current conductivity; each normal-operator application costs one
//! derivative and one adjoint solve per measurement. The preconditioner combines
//! the solve-free multiplicative part of `M` with a lumped-mass surrogate of
//! `alpha R`, factored once per outer iteration.
//!
//! The regularization follows the exponential schedule `alpha_k = alpha0 / a^k`
//! with no accept/reject control, and updates are truncated to the region farther
//! than `delta_d` from the boundary, where the conductivity is taken as known.

use std::sync::Arc;
use std::time::Instant;

use thiserror::Error;

use crate::fem::{
    cell_l2_norm, csr_add, csr_matmul, l2_norm, lumped_mass_diagonal, pcg, CellField, CsrMatrix,
    ElectrodeZeta, FemError, PowerDensity, ScalarField, SparseCholesky,
};
use crate::forward::{power_density, CurrentPattern, DcmSystem, ForwardError};
use crate::mesh::{boundary_distance_field, extract_interior_submesh, Mesh, MeshError, SubmeshMap};
use crate::phantom::{add_noise, relative_error, NoiseSpec, PhantomError};
use crate::sensitivity::{GramOperator, LinearizationState, MassOps, SensitivityError};

#[derive(Debug, Error)]
pub enum LmError {
    #[error(transparent)]
    Fem(#[from] FemError),
    #[error(transparent)]
    Forward(#[from] ForwardError),
    #[error(transparent)]
    Sensitivity(#[from] SensitivityError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Phantom(#[from] PhantomError),
    #[error("step solve did not converge (relative residual {residual:.3e} after {iterations} CG iterations); consider increasing alpha")]
    StepSolve { iterations: usize, residual: f64 },
    #[error("invalid configuration: {0}")]
    Config(String),
}

/// Reconstruction hyperparameters.
#[derive(Debug, Clone, serde::Deserialize)]
pub struct LmConfig {
    /// Initial regularization weight.
    pub alpha0: f64,
    /// Exponential decay base `a > 1` in `alpha_k = alpha0 / a^k`.
    pub decay: f64,
    /// Gram operator scaling.
    pub beta: f64,
    /// Known-collar width in meters; updates vanish within this distance of the
    /// boundary. Also the width of the interior domain used by the mixed strategy.
    pub delta_d: f64,
    /// Stop when `||tau_k||_{L^2}` falls below this.
    pub step_tol: f64,
    pub max_iter: usize,
    /// Relative residual target of the inner CG solve.
    #[serde(default = "default_cg_tol")]
    pub cg_tol: f64,
    #[serde(default = "default_cg_max_iter")]
    pub cg_max_iter: usize,
    /// Mixed strategy: phase 1 ends when every pattern's boundary-voltage error
    /// is below this.
    #[serde(default = "default_eta_b_target")]
    pub eta_b_target: f64,
    /// Mixed strategy: iteration cap of the DCM phase.
    #[serde(default = "default_phase2_max_iter")]
    pub phase2_max_iter: usize,
    /// Positivity safeguard: conductivity is clamped to at least this.
    #[serde(default = "default_sigma_floor")]
    pub sigma_floor: f64,
    /// Optional wall-clock budget for the loop.
    #[serde(default)]
    pub wall_limit_seconds: Option<f64>,
}

fn default_cg_tol() -> f64 {
    1e-6
}
fn default_cg_max_iter() -> usize {
    400
}
fn default_eta_b_target() -> f64 {
    1e-3
}
fn default_phase2_max_iter() -> usize {
    30
}
fn default_sigma_floor() -> f64 {
    1e-3
}

impl LmConfig {
    /// Parameters of the heart-lung experiments.
    pub fn heart_lung() -> Self {
        Self {
            alpha0: 50.0,
            decay: 1.2,
            beta: 1.2e-3,
            delta_d: 0.045,
            step_tol: 1e-4,
            max_iter: 15,
            cg_tol: default_cg_tol(),
            cg_max_iter: default_cg_max_iter(),
            eta_b_target: default_eta_b_target(),
            phase2_max_iter: default_phase2_max_iter(),
            sigma_floor: default_sigma_floor(),
            wall_limit_seconds: None,
        }
    }

    /// Parameters of the human-brain experiments.
    pub fn brain() -> Self {
        Self {
            alpha0: 150.0,
            decay: 2.0,
            beta: 1e-3,
            delta_d: 0.005,
            step_tol: 1e-4,
            max_iter: 30,
            cg_tol: default_cg_tol(),
            cg_max_iter: default_cg_max_iter(),
            eta_b_target: 1e-3,
            phase2_max_iter: 30,
            sigma_floor: default_sigma_floor(),
            wall_limit_seconds: None,
        }
    }

    pub fn validate(&self) -> Result<(), LmError> {
        if !(self.alpha0 > 0.0) {
            return Err(LmError::Config("alpha0 must be positive".into()));
        }
        if !(self.decay > 1.0) {
            return Err(LmError::Config("decay base must exceed 1".into()));
        }
        if !(self.beta > 0.0) {
            return Err(LmError::Config("beta must be positive".into()));
        }
        if self.delta_d < 0.0 {
            return Err(LmError::Config("delta_d must be nonnegative".into()));
        }
        if !(self.step_tol > 0.0) || !(self.cg_tol > 0.0) {
            return Err(LmError::Config("tolerances must be positive".into()));
        }
        Ok(())
    }
}

/// `alpha_k = alpha0 / a^k`.
pub fn alpha_schedule(alpha0: f64, a: f64, k: usize) -> f64 {
    alpha0 / a.powi(k as i32)
}

/// One simulated measurement: the injected pattern, the noisy power density and
/// the true electrode voltages recorded alongside it.
#[derive(Debug, Clone)]
pub struct Measurement {
    pub pattern: CurrentPattern,
    pub e_delta: PowerDensity,
    pub u_true: Vec<f64>,
}

/// A continuum-model measurement on the interior domain.
#[derive(Debug, Clone)]
pub struct DcmMeasurement {
    /// Dirichlet data on the interior boundary (full nodal field; only boundary
    /// entries are read).
    pub trace: ScalarField,
    pub e_delta: PowerDensity,
}

#[derive(Debug, Clone)]
pub struct IterationRecord {
    pub k: usize,
    pub alpha: f64,
    /// `||tau_k||_{L^2}` after truncation.
    pub tau_norm: f64,
    /// Relative conductivity error after the update, when the truth is known.
    pub eta: Option<f64>,
    /// Boundary-voltage error per pattern at the iterate (empty for DCM).
    pub eta_b: Vec<f64>,
    /// `sum_m ||E_delta - E(sigma_k)||^2` before the update.
    pub misfit: f64,
    pub wall_seconds: f64,
    /// Post-hoc relative residual of the step equation.
    pub step_residual: f64,
    pub cg_iterations: usize,
    /// Notes such as `clamped:<n>` or `phase1_cap`.
    pub flags: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    StepTolerance,
    MaxIterations,
    WallClock,
    EtaBTarget,
}

pub struct LmOutcome {
    pub sigma: ScalarField,
    pub records: Vec<IterationRecord>,
    pub stop: StopReason,
}

/// Observer invoked after every iteration (CSV streaming, snapshots).
pub trait IterationSink {
    fn on_iteration(&mut self, _record: &IterationRecord, _sigma: &ScalarField) {}
}

/// No-op sink.
pub struct NoSink;

impl IterationSink for NoSink {}

#[derive(Debug, Clone)]
pub struct StepReport {
    /// Post-hoc relative residual of `(M + alpha R) tau = y`.
    pub residual: f64,
    pub cg_iterations: usize,
}

/// Relative l2 electrode-voltage error.
pub fn boundary_voltage_error(u_true: &[f64], u_k: &[f64]) -> f64 {
    let num: f64 = u_true
        .iter()
        .zip(u_k)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let den: f64 = u_true.iter().map(|a| a * a).sum::<f64>().sqrt();
    num / den
}

/// Restriction of a parent-mesh nodal field to a submesh.
pub fn restrict_to_submesh(
    field: &ScalarField,
    submesh: &Arc<Mesh>,
    map: &SubmeshMap,
) -> ScalarField {
    let values: Vec<f64> = map.parent_vertex.iter().map(|&p| field.values()[p]).collect();
    ScalarField::new(submesh.clone(), values).expect("restriction is finite")
}

/// Dirichlet data for the interior domain: the potential evaluated at the parent
/// nodes identified with the submesh (only the boundary entries are consumed by
/// the continuum solver).
pub fn extract_boundary_trace(
    u: &ScalarField,
    submesh: &Arc<Mesh>,
    map: &SubmeshMap,
) -> ScalarField {
    restrict_to_submesh(u, submesh, map)
}

/// Zeroes the update within `delta_d` of the boundary; `delta_d = 0` is the
/// identity.
pub fn truncate_update(tau: &mut ScalarField, distance: &ScalarField, delta_d: f64) {
    if delta_d == 0.0 {
        return;
    }
    for (v, &d) in tau.values_mut().iter_mut().zip(distance.values()) {
        if d <= delta_d {
            *v = 0.0;
        }
    }
}

/// Solves the regularized normal equation `(M + alpha R) tau = y` and truncates
/// the result by the mask. The returned report carries the post-hoc residual of
/// an independent re-application of the operator.
pub fn lm_step(
    state: &LinearizationState,
    gram: &GramOperator,
    residuals: &[CellField],
    alpha: f64,
    mask: Option<&[bool]>,
    cfg: &LmConfig,
) -> Result<(ScalarField, StepReport), LmError> {
    let mesh = state.mesh().clone();
    let rhs = state.residual_dual(residuals)?;

    // preconditioner: local multiplicative part of M plus a sparse surrogate of
    // alpha R with the inner mass inverse lumped
    let local = state.normal_local_matrix();
    let gram_pre = gram_preconditioner_matrix(gram, &mesh);
    let p_matrix = csr_add(&local, 1.0, &gram_pre, alpha);
    let p_chol = SparseCholesky::factor(&p_matrix)?;

    let apply = |t: &[f64]| -> Vec<f64> {
        let n_dual = state
            .normal_apply_dual(t)
            .expect("operator application at a factored state cannot fail");
        let g_dual = gram.apply_dual(t);
        n_dual
            .iter()
            .zip(&g_dual)
            .map(|(a, b)| a + alpha * b)
            .collect()
    };
    let (tau_values, report) = pcg(
        &rhs,
        apply,
        |r| p_chol.solve(r),
        cfg.cg_tol,
        cfg.cg_max_iter,
    )
    .map_err(|e| match e {
        FemError::SolveDiverged {
            iterations,
            residual,
        } => LmError::StepSolve {
            iterations,
            residual,
        },
        other => LmError::Fem(other),
    })?;

    // independent verification of the step-equation contract
    let true_residual = {
        let az = apply(&tau_values);
        let num: f64 = az
            .iter()
            .zip(&rhs)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let den: f64 = rhs.iter().map(|b| b * b).sum::<f64>().sqrt();
        if den == 0.0 {
            0.0
        } else {
            num / den
        }
    };
    if true_residual > 10.0 * cfg.cg_tol {
        return Err(LmError::StepSolve {
            iterations: report.iterations,
            residual: true_residual,
        });
    }

    let mut tau = ScalarField::new(mesh, tau_values)?;
    if let Some(mask) = mask {
        for (v, &keep) in tau.values_mut().iter_mut().zip(mask) {
            if !keep {
                *v = 0.0;
            }
        }
    }
    Ok((
        tau,
        StepReport {
            residual: true_residual,
            cg_iterations: report.iterations,
        },
    ))
}

fn gram_preconditioner_matrix(gram: &GramOperator, mesh: &Mesh) -> CsrMatrix {
    let lumped = lumped_mass_diagonal(mesh);
    let mut k_scaled = gram.stiffness().clone();
    let inv: Vec<f64> = lumped.iter().map(|&d| 1.0 / d).collect();
    k_scaled.scale_cols(&inv);
    // (K D^{-1}) K is symmetric since K and D are
    let mut k_d_k = csr_matmul(&k_scaled, gram.stiffness());
    k_d_k.scale(gram.beta() * gram.beta());
    csr_add(&gram.mass().matrix, 1.0, &k_d_k, 1.0)
}

fn collar_mask(mesh: &Arc<Mesh>, delta_d: f64) -> (ScalarField, Option<Vec<bool>>) {
    let dist = boundary_distance_field(mesh);
    if delta_d == 0.0 {
        return (dist, None);
    }
    let mask = dist.values().iter().map(|&d| d > delta_d).collect();
    (dist, Some(mask))
}

enum Model<'a> {
    Scem {
        zeta: &'a ElectrodeZeta,
        patterns: Vec<CurrentPattern>,
        u_true: Vec<Vec<f64>>,
    },
    Dcm {
        traces: Vec<ScalarField>,
    },
}

/// Shared outer loop of the SCEM and DCM reconstructions.
fn lm_loop(
    cfg: &LmConfig,
    mesh: &Arc<Mesh>,
    model: &Model,
    e_deltas: &[PowerDensity],
    sigma0: &ScalarField,
    sigma_truth: Option<&ScalarField>,
    eta_b_break: bool,
    sink: &mut dyn IterationSink,
) -> Result<LmOutcome, LmError> {
    cfg.validate()?;
    let start = Instant::now();
    let mass = Arc::new(MassOps::new(mesh)?);
    let gram = GramOperator::with_mass(mesh, cfg.beta, mass.clone())?;
    let (_dist, mask) = collar_mask(mesh, cfg.delta_d);
    let mut sigma = sigma0.clone();
    let mut records = Vec::new();
    let mut stop = StopReason::MaxIterations;

    for k in 0..cfg.max_iter {
        let iter_start = Instant::now();
        let state = match model {
            Model::Scem { zeta, patterns, .. } => {
                LinearizationState::new_scem(mesh, &sigma, zeta, patterns, mass.clone())?
            }
            Model::Dcm { traces } => {
                LinearizationState::new_dcm(mesh, &sigma, traces, mass.clone())?
            }
        };
        let eta_b: Vec<f64> = match model {
            Model::Scem { u_true, .. } => u_true
                .iter()
                .enumerate()
                .map(|(m, ut)| boundary_voltage_error(ut, &state.measurement(m).solution.voltages))
                .collect(),
            Model::Dcm { .. } => Vec::new(),
        };
        if eta_b_break && !eta_b.is_empty() && eta_b.iter().all(|&e| e < cfg.eta_b_target) {
            stop = StopReason::EtaBTarget;
            break;
        }

        let residuals: Vec<CellField> = (0..e_deltas.len())
            .map(|m| {
                let e_model = state.power_density(m);
                let diff: Vec<f64> = e_deltas[m]
                    .values()
                    .iter()
                    .zip(e_model.values())
                    .map(|(d, e)| d - e)
                    .collect();
                CellField::new(mesh.clone(), diff).expect("residual is finite")
            })
            .collect();
        let misfit: f64 = residuals.iter().map(|r| cell_l2_norm(r).powi(2)).sum();

        let alpha = alpha_schedule(cfg.alpha0, cfg.decay, k);
        let (tau, step) = lm_step(&state, &gram, &residuals, alpha, mask.as_deref(), cfg)?;

        let mut clamped = 0usize;
        for (s, t) in sigma.values_mut().iter_mut().zip(tau.values()) {
            *s += t;
            if *s < cfg.sigma_floor {
                *s = cfg.sigma_floor;
                clamped += 1;
            }
        }
        let tau_norm = l2_norm(&tau);
        let eta = sigma_truth.map(|t| relative_error(t, &sigma));
        let mut flags = String::new();
        if clamped > 0 {
            flags = format!("clamped:{clamped}");
        }
        let record = IterationRecord {
            k,
            alpha,
            tau_norm,
            eta,
            eta_b,
            misfit,
            wall_seconds: iter_start.elapsed().as_secs_f64(),
            step_residual: step.residual,
            cg_iterations: step.cg_iterations,
            flags,
        };
        sink.on_iteration(&record, &sigma);
        records.push(record);

        if tau_norm < cfg.step_tol {
            stop = StopReason::StepTolerance;
            break;
        }
        if let Some(limit) = cfg.wall_limit_seconds {
            if start.elapsed().as_secs_f64() >= limit {
                stop = StopReason::WallClock;
                break;
            }
        }
    }
    Ok(LmOutcome {
        sigma,
        records,
        stop,
    })
}

/// LM iteration against SCEM forward models (Algorithm style: forward solves per
/// pattern at `sigma_k`, adjoint-lifted residual, regularized step, exponential
/// `alpha` decay; stops on `||tau|| < step_tol` or the iteration cap).
pub fn lm_scem(
    cfg: &LmConfig,
    mesh: &Arc<Mesh>,
    zeta: &ElectrodeZeta,
    measurements: &[Measurement],
    sigma0: &ScalarField,
    sigma_truth: Option<&ScalarField>,
    sink: &mut dyn IterationSink,
) -> Result<LmOutcome, LmError> {
    if measurements.is_empty() {
        return Err(LmError::Config("at least one measurement is required".into()));
    }
    let model = Model::Scem {
        zeta,
        patterns: measurements.iter().map(|m| m.pattern.clone()).collect(),
        u_true: measurements.iter().map(|m| m.u_true.clone()).collect(),
    };
    let e_deltas: Vec<PowerDensity> = measurements.iter().map(|m| m.e_delta.clone()).collect();
    lm_loop(cfg, mesh, &model, &e_deltas, sigma0, sigma_truth, false, sink)
}

/// LM iteration against the Dirichlet continuum model on an interior domain.
pub fn lm_dcm(
    cfg: &LmConfig,
    submesh: &Arc<Mesh>,
    measurements: &[DcmMeasurement],
    sigma0: &ScalarField,
    sigma_truth: Option<&ScalarField>,
    sink: &mut dyn IterationSink,
) -> Result<LmOutcome, LmError> {
    if measurements.is_empty() {
        return Err(LmError::Config("at least one measurement is required".into()));
    }
    let model = Model::Dcm {
        traces: measurements.iter().map(|m| m.trace.clone()).collect(),
    };
    let e_deltas: Vec<PowerDensity> = measurements.iter().map(|m| m.e_delta.clone()).collect();
    lm_loop(cfg, submesh, &model, &e_deltas, sigma0, sigma_truth, false, sink)
}

pub struct MixedOutcome {
    /// Phase-1 conductivity overwritten on the interior domain by the phase-2 result.
    pub sigma: ScalarField,
    pub phase1: LmOutcome,
    pub phase2: LmOutcome,
    pub submesh: Arc<Mesh>,
    pub map: SubmeshMap,
    /// Whether phase 1 reached the boundary-voltage target before its cap.
    pub phase1_converged: bool,
}

/// The mixed strategy: run LM-SCEM until the boundary voltages match, extract the
/// interior domain, regenerate power densities there with the continuum model (the
/// stand-in for acoustic recovery, so the data is simulated from the true
/// conductivity with the phase-1 boundary potential), then run LM-DCM from the
/// phase-1 conductivity.
#[allow(clippy::too_many_arguments)]
pub fn mixed_reconstruction(
    cfg: &LmConfig,
    mesh: &Arc<Mesh>,
    zeta: &ElectrodeZeta,
    measurements: &[Measurement],
    sigma0: &ScalarField,
    sigma_truth: &ScalarField,
    phase2_noise: &NoiseSpec,
    phase1_sink: &mut dyn IterationSink,
    phase2_sink: &mut dyn IterationSink,
) -> Result<MixedOutcome, LmError> {
    if measurements.is_empty() {
        return Err(LmError::Config("at least one measurement is required".into()));
    }
    let model = Model::Scem {
        zeta,
        patterns: measurements.iter().map(|m| m.pattern.clone()).collect(),
        u_true: measurements.iter().map(|m| m.u_true.clone()).collect(),
    };
    let e_deltas: Vec<PowerDensity> = measurements.iter().map(|m| m.e_delta.clone()).collect();
    let mut phase1 = lm_loop(
        cfg,
        mesh,
        &model,
        &e_deltas,
        sigma0,
        Some(sigma_truth),
        true,
        phase1_sink,
    )?;
    let phase1_converged = phase1.stop == StopReason::EtaBTarget;
    if !phase1_converged {
        if let Some(last) = phase1.records.last_mut() {
            if !last.flags.is_empty() {
                last.flags.push(';');
            }
            last.flags.push_str("phase1_cap");
        }
    }
    let sigma_p1 = phase1.sigma.clone();

    // interior domain and phase-2 data
    let (submesh, map) = extract_interior_submesh(mesh, cfg.delta_d)?;
    let submesh = Arc::new(submesh);
    let sigma_truth_sub = restrict_to_submesh(sigma_truth, &submesh, &map);
    let sigma_p1_sub = restrict_to_submesh(&sigma_p1, &submesh, &map);

    // boundary potentials of the phase-1 iterate
    let patterns: Vec<CurrentPattern> = measurements.iter().map(|m| m.pattern.clone()).collect();
    let mass = Arc::new(MassOps::new(mesh)?);
    let state_p1 = LinearizationState::new_scem(mesh, &sigma_p1, zeta, &patterns, mass)?;

    let dcm_truth = DcmSystem::assemble(&submesh, &sigma_truth_sub)?;
    let mut dcm_measurements = Vec::with_capacity(measurements.len());
    for m in 0..measurements.len() {
        let trace = extract_boundary_trace(&state_p1.measurement(m).solution.u, &submesh, &map);
        let sol = dcm_truth.solve_dirichlet(trace.values())?;
        let e = power_density(&sigma_truth_sub, &sol);
        let noisy = add_noise(
            &e,
            &NoiseSpec {
                snr_db: phase2_noise.snr_db,
                seed: phase2_noise.seed.wrapping_add(1000 + m as u64),
            },
        )?;
        dcm_measurements.push(DcmMeasurement {
            trace,
            e_delta: noisy,
        });
    }

    let mut cfg2 = cfg.clone();
    cfg2.max_iter = cfg.phase2_max_iter;
    cfg2.delta_d = 0.0; // the interior boundary values stay at the phase-1 iterate
    let phase2 = lm_dcm(
        &cfg2,
        &submesh,
        &dcm_measurements,
        &sigma_p1_sub,
        Some(&sigma_truth_sub),
        phase2_sink,
    )?;

    let mut sigma = sigma_p1;
    for (new_i, &old_i) in map.parent_vertex.iter().enumerate() {
        sigma.values_mut()[old_i] = phase2.sigma.values()[new_i];
    }
    Ok(MixedOutcome {
        sigma,
        phase1,
        phase2,
        submesh,
        map,
        phase1_converged,
    })
}
