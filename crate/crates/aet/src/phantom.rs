//! Conductivity phantoms, mollification, SNR-controlled noise and error metrics.
//!
//! Phantom geometry lives in TOML specs (embedded copies of the heart-lung and brain
//! models ship with the crate); regions are painted in order onto the background, so
//! later entries overwrite earlier ones.

use std::sync::Arc;

use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use serde::Deserialize;
use thiserror::Error;

use crate::fem::{cell_l2_norm, CellField, FemError, PowerDensity, ScalarField};
use crate::mesh::Mesh;

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("invalid phantom spec: {0}")]
    InvalidSpec(String),
    #[error("cannot add finite-SNR noise to a zero-norm field")]
    ZeroNormField,
    #[error("failed to parse phantom spec: {0}")]
    Parse(#[from] toml::de::Error),
    #[error(transparent)]
    Fem(#[from] FemError),
}

/// Geometric primitive of one phantom region.
#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum Shape {
    Circle {
        center: [f64; 2],
        radius: f64,
    },
    Ellipse {
        center: [f64; 2],
        semi_axes: [f64; 2],
        #[serde(default)]
        rotation_deg: f64,
    },
    Polygon {
        points: Vec<[f64; 2]>,
    },
}

impl Shape {
    pub fn contains(&self, p: [f64; 2]) -> bool {
        match self {
            Shape::Circle { center, radius } => {
                (p[0] - center[0]).powi(2) + (p[1] - center[1]).powi(2) <= radius * radius
            }
            Shape::Ellipse {
                center,
                semi_axes,
                rotation_deg,
            } => {
                let (s, c) = rotation_deg.to_radians().sin_cos();
                let dx = p[0] - center[0];
                let dy = p[1] - center[1];
                let x = c * dx + s * dy;
                let y = -s * dx + c * dy;
                (x / semi_axes[0]).powi(2) + (y / semi_axes[1]).powi(2) <= 1.0
            }
            Shape::Polygon { points } => {
                // even-odd ray casting
                let mut inside = false;
                let n = points.len();
                for i in 0..n {
                    let (a, b) = (points[i], points[(i + 1) % n]);
                    if (a[1] > p[1]) != (b[1] > p[1]) {
                        let x = a[0] + (p[1] - a[1]) / (b[1] - a[1]) * (b[0] - a[0]);
                        if p[0] < x {
                            inside = !inside;
                        }
                    }
                }
                inside
            }
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
pub struct Region {
    #[serde(flatten)]
    pub shape: Shape,
    pub sigma: f64,
}

/// Named regions painted over a background conductivity.
#[derive(Debug, Clone, Deserialize)]
pub struct PhantomSpec {
    pub background: f64,
    pub mollify_epsilon: f64,
    #[serde(rename = "region", default)]
    pub regions: Vec<Region>,
}

impl PhantomSpec {
    pub fn from_toml_str(text: &str) -> Result<Self, PhantomError> {
        let spec: PhantomSpec = toml::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, PhantomError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PhantomError::InvalidSpec(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    fn validate(&self) -> Result<(), PhantomError> {
        if !(self.background > 0.0) {
            return Err(PhantomError::InvalidSpec(
                "background conductivity must be positive".into(),
            ));
        }
        if self.regions.iter().any(|r| !(r.sigma > 0.0)) {
            return Err(PhantomError::InvalidSpec(
                "all region conductivities must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Piecewise-constant nodal field; the last matching region wins.
    pub fn evaluate(&self, mesh: &Arc<Mesh>) -> ScalarField {
        let values: Vec<f64> = mesh
            .vertices()
            .iter()
            .map(|&p| {
                let mut sigma = self.background;
                for region in &self.regions {
                    if region.shape.contains(p) {
                        sigma = region.sigma;
                    }
                }
                sigma
            })
            .collect();
        ScalarField::new(mesh.clone(), values).expect("phantom values are finite")
    }
}

/// Heart-lung model on the disk of radius 0.25 m.
pub fn heart_lung_spec() -> PhantomSpec {
    PhantomSpec::from_toml_str(include_str!("../assets/phantoms/heart_lung.toml"))
        .expect("embedded heart-lung spec is valid")
}

/// Human-brain model on the 0.09 x 0.08 m ellipse.
pub fn brain_spec() -> PhantomSpec {
    PhantomSpec::from_toml_str(include_str!("../assets/phantoms/brain.toml"))
        .expect("embedded brain spec is valid")
}

pub fn heart_lung_phantom(mesh: &Arc<Mesh>) -> ScalarField {
    heart_lung_spec().evaluate(mesh)
}

pub fn brain_phantom(mesh: &Arc<Mesh>) -> ScalarField {
    brain_spec().evaluate(mesh)
}

/// Mollifies a nodal field by convolution with the compactly supported bump
/// `exp(eps^2 / (|x|^2 - eps^2))`, evaluated by quadrature over triangle centroids
/// and renormalized by the discrete kernel mass (so constants are exactly
/// preserved and the output stays within the input range).
///
/// An `eps` below the mesh resolution cannot be resolved: the field is returned
/// unchanged with a warning.
pub fn mollify(field: &ScalarField, eps: f64) -> Result<ScalarField, PhantomError> {
    if !(eps > 0.0) {
        return Err(PhantomError::InvalidSpec(
            "mollification radius must be positive".into(),
        ));
    }
    let mesh = field.mesh().clone();
    if eps < mesh.characteristic_h() {
        eprintln!(
            "mollify: radius {eps} is below the mesh resolution {}; returning the field unchanged",
            mesh.characteristic_h()
        );
        return Ok(field.clone());
    }
    let centroids: Vec<[f64; 2]> = mesh.geometries().iter().map(|g| g.centroid).collect();
    let areas: Vec<f64> = mesh.geometries().iter().map(|g| g.area).collect();

    // uniform grid over centroids with cell size eps
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for c in &centroids {
        for k in 0..2 {
            lo[k] = lo[k].min(c[k]);
            hi[k] = hi[k].max(c[k]);
        }
    }
    let nx = (((hi[0] - lo[0]) / eps).floor() as usize + 1).max(1);
    let ny = (((hi[1] - lo[1]) / eps).floor() as usize + 1).max(1);
    let cell_of = |p: [f64; 2]| -> (usize, usize) {
        let ix = (((p[0] - lo[0]) / eps).floor() as isize).clamp(0, nx as isize - 1) as usize;
        let iy = (((p[1] - lo[1]) / eps).floor() as isize).clamp(0, ny as isize - 1) as usize;
        (ix, iy)
    };
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); nx * ny];
    for (t, c) in centroids.iter().enumerate() {
        let (ix, iy) = cell_of(*c);
        buckets[iy * nx + ix].push(t);
    }

    let kernel = |d2: f64| -> f64 {
        let e2 = eps * eps;
        if d2 >= e2 {
            0.0
        } else {
            (e2 / (d2 - e2)).exp()
        }
    };

    let values: Vec<f64> = mesh
        .vertices()
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let own = field.values()[i];
            let (ix, iy) = cell_of(p);
            let mut wsum = 0.0;
            let mut acc = 0.0; // weighted deviation from the nodal value, so a
                               // constant field is reproduced bit-exactly
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let jx = ix as i64 + dx;
                    let jy = iy as i64 + dy;
                    if jx < 0 || jy < 0 || jx >= nx as i64 || jy >= ny as i64 {
                        continue;
                    }
                    for &t in &buckets[jy as usize * nx + jx as usize] {
                        let d2 = (centroids[t][0] - p[0]).powi(2)
                            + (centroids[t][1] - p[1]).powi(2);
                        let w = areas[t] * kernel(d2);
                        if w > 0.0 {
                            let tri = mesh.triangles()[t];
                            let dev = ((field.values()[tri[0]] - own)
                                + (field.values()[tri[1]] - own)
                                + (field.values()[tri[2]] - own))
                                / 3.0;
                            wsum += w;
                            acc += w * dev;
                        }
                    }
                }
            }
            if wsum > 0.0 {
                own + acc / wsum
            } else {
                own
            }
        })
        .collect();
    Ok(ScalarField::new(mesh, values)?)
}

/// Gaussian white noise scaled to an exact signal-to-noise ratio.
#[derive(Debug, Clone, Copy, Deserialize)]
pub struct NoiseSpec {
    /// `20 log10(||E|| / ||noise||)`; `inf` means noise-free.
    pub snr_db: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn noiseless(seed: u64) -> Self {
        Self {
            snr_db: f64::INFINITY,
            seed,
        }
    }
}

/// Adds i.i.d. Gaussian noise to the cell values, scaled by the measured noise
/// norm so the realized SNR matches the request exactly.
pub fn add_noise(e: &PowerDensity, spec: &NoiseSpec) -> Result<PowerDensity, PhantomError> {
    if spec.snr_db.is_infinite() && spec.snr_db > 0.0 {
        return Ok(e.clone());
    }
    if !spec.snr_db.is_finite() {
        return Err(PhantomError::InvalidSpec(format!(
            "snr_db must be finite or +inf, got {}",
            spec.snr_db
        )));
    }
    let norm_e = cell_l2_norm(e);
    if norm_e == 0.0 {
        return Err(PhantomError::ZeroNormField);
    }
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(spec.seed);
    let raw: Vec<f64> = (0..e.values().len())
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let raw_field = CellField::new(e.mesh().clone(), raw)?;
    let norm_raw = cell_l2_norm(&raw_field);
    let scale = norm_e / (10f64.powf(spec.snr_db / 20.0) * norm_raw);
    let values: Vec<f64> = e
        .values()
        .iter()
        .zip(raw_field.values())
        .map(|(v, n)| v + scale * n)
        .collect();
    Ok(CellField::new(e.mesh().clone(), values)?)
}

/// Relative `L^2(Omega)` reconstruction error `||t - r|| / ||t||`.
pub fn relative_error(truth: &ScalarField, recon: &ScalarField) -> f64 {
    let diff: Vec<f64> = truth
        .values()
        .iter()
        .zip(recon.values())
        .map(|(t, r)| t - r)
        .collect();
    let diff = ScalarField::new(truth.mesh().clone(), diff).expect("difference is finite");
    crate::fem::l2_norm(&diff) / crate::fem::l2_norm(truth)
}
