//! 2D finite-element toolkit for acousto-electric tomography.
//!
//! The crate simulates interior power densities `E(sigma) = sigma |grad u|^2` under the
//! smoothened complete electrode model (SCEM), the classic complete electrode model (CEM)
//! and the Dirichlet continuum model (DCM), and reconstructs conductivity maps from such
//! data with Levenberg-Marquardt iterations (LM-SCEM, LM-DCM and the mixed LM-SCEM-DCM
//! strategy).
//!
//! Module map:
//! - [`mesh`]: triangulations of disks/ellipses/rectangles with labeled electrode arcs,
//!   boundary distance fields and interior-submesh extraction.
//! - [`fem`]: P1 finite-element fields, operator assembly, sparse Cholesky and CG solvers.
//! - [`forward`]: current patterns, electrode conductance profiles, forward electrostatics
//!   and power-density evaluation.
//! - [`phantom`]: heart-lung and brain conductivity phantoms, mollification, SNR noise and
//!   error metrics.
//! - [`sensitivity`]: the power-density derivative, its adjoint, the H^2 Gram operator and
//!   the Gauss-Newton normal operator.
//! - [`lm`]: the reconstruction loops and the regularized step solve.
//! - [`io`]: plain-text mesh/field formats, legacy VTK export, CSV records.
//! - [`cli`]: experiment driver used by the `aet` binary.

pub mod cli;
pub mod fem;
pub mod forward;
pub mod io;
pub mod lm;
pub mod mesh;
pub mod phantom;
pub mod sensitivity;
