//! Conforming triangular meshes of disks, ellipses and rectangles.
//!
//! Boundary edges carry labels (electrode index, gap, or Dirichlet) and are split exactly
//! at electrode arc endpoints, so boundary integrals never straddle an electrode/gap
//! transition. The disk/ellipse mesher builds concentric scaled copies of the boundary
//! curve and stitches consecutive rings; it is closed-form and deterministic, which the
//! reproducibility contract of the reconstruction driver relies on. Vertices are ordered
//! center-outward, which keeps the assembled operators banded.

use std::f64::consts::TAU;
use std::sync::Arc;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("invalid electrode layout: {0}")]
    InvalidLayout(String),
    #[error("invalid mesh parameter: {0}")]
    InvalidParameter(String),
    #[error("estimated {estimated} triangles exceeds the cap of {cap}")]
    TooManyTriangles { estimated: usize, cap: usize },
    #[error("invalid mesh topology: {0}")]
    InvalidTopology(String),
    #[error("interior submesh is empty for the given width")]
    EmptySubmesh,
}

/// Label attached to one boundary edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundaryLabel {
    /// Part of electrode `l` (0-based, contiguous `0..L`).
    Electrode(usize),
    /// Insulated boundary between electrodes.
    Gap,
    /// Boundary with prescribed potential (rectangles and extracted submeshes).
    DirichletBoundary,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundaryEdge {
    /// Vertex indices, ordered along the boundary orientation.
    pub vertices: [usize; 2],
    pub label: BoundaryLabel,
}

/// Angular arcs occupied by electrodes on a disk/ellipse boundary.
///
/// Arcs are central-angle intervals; on an ellipse the physical electrode lengths then
/// vary slightly with position, matching a layout where every electrode subtends the
/// same central section angle.
#[derive(Debug, Clone)]
pub struct ElectrodeLayout {
    /// `(start, width)` in radians, start normalized to `[0, 2pi)`, one per electrode.
    arcs: Vec<(f64, f64)>,
}

impl ElectrodeLayout {
    /// `count` equal arcs covering the given fraction of the full angle, electrode `l`
    /// (0-based) centered at angle `2 pi (l+1) / count` so that electrode slots line up
    /// with the Fourier current patterns.
    pub fn uniform(count: usize, coverage: f64) -> Result<Self, MeshError> {
        if count == 0 {
            return Err(MeshError::InvalidLayout("electrode count must be >= 1".into()));
        }
        if !(coverage > 0.0 && coverage <= 1.0) {
            return Err(MeshError::InvalidLayout(format!(
                "coverage must lie in (0, 1], got {coverage}"
            )));
        }
        let width = TAU * coverage / count as f64;
        let arcs = (0..count)
            .map(|l| {
                let center = TAU * (l as f64 + 1.0) / count as f64;
                (normalize_angle(center - 0.5 * width), width)
            })
            .collect();
        let layout = Self { arcs };
        layout.validate()?;
        Ok(layout)
    }

    /// Explicit arcs, `(start, width)` in radians.
    pub fn from_arcs(arcs: Vec<(f64, f64)>) -> Result<Self, MeshError> {
        let layout = Self {
            arcs: arcs
                .into_iter()
                .map(|(s, w)| (normalize_angle(s), w))
                .collect(),
        };
        layout.validate()?;
        Ok(layout)
    }

    pub fn count(&self) -> usize {
        self.arcs.len()
    }

    pub fn arcs(&self) -> &[(f64, f64)] {
        &self.arcs
    }

    fn validate(&self) -> Result<(), MeshError> {
        let total: f64 = self.arcs.iter().map(|&(_, w)| w).sum();
        if total > TAU * (1.0 + 1e-12) {
            return Err(MeshError::InvalidLayout(
                "electrode arcs cover more than the full boundary".into(),
            ));
        }
        for &(_, w) in &self.arcs {
            if w <= 0.0 {
                return Err(MeshError::InvalidLayout("arc width must be positive".into()));
            }
        }
        // Disjointness: sort by start and check consecutive (with wraparound).
        let mut sorted: Vec<(f64, f64)> = self.arcs.clone();
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
        for i in 0..sorted.len() {
            let (s0, w0) = sorted[i];
            let end0 = s0 + w0;
            let s1 = if i + 1 < sorted.len() {
                sorted[i + 1].0
            } else {
                sorted[0].0 + TAU
            };
            if end0 > s1 + 1e-12 {
                return Err(MeshError::InvalidLayout("electrode arcs overlap".into()));
            }
        }
        Ok(())
    }

    /// Electrode index containing the angle, if any.
    fn electrode_at(&self, theta: f64) -> Option<usize> {
        let t = normalize_angle(theta);
        for (l, &(start, width)) in self.arcs.iter().enumerate() {
            let d = normalize_angle(t - start);
            if d < width {
                return Some(l);
            }
        }
        None
    }
}

fn normalize_angle(t: f64) -> f64 {
    let mut a = t % TAU;
    if a < 0.0 {
        a += TAU;
    }
    a
}

/// Per-triangle geometry cached at construction: signed area and the (constant)
/// gradients of the three P1 hat functions.
#[derive(Debug, Clone, Copy)]
pub struct TriGeometry {
    pub area: f64,
    pub grads: [[f64; 2]; 3],
    pub centroid: [f64; 2],
}

/// Immutable conforming triangulation with labeled boundary.
#[derive(Debug)]
pub struct Mesh {
    vertices: Vec<[f64; 2]>,
    triangles: Vec<[usize; 3]>,
    boundary_edges: Vec<BoundaryEdge>,
    characteristic_h: f64,
    geometry: Vec<TriGeometry>,
}

impl Mesh {
    /// Validates orientation, boundary completeness/loops and electrode labeling.
    pub fn new(
        vertices: Vec<[f64; 2]>,
        triangles: Vec<[usize; 3]>,
        boundary_edges: Vec<BoundaryEdge>,
        characteristic_h: f64,
    ) -> Result<Self, MeshError> {
        if !(characteristic_h > 0.0) {
            return Err(MeshError::InvalidParameter("characteristic_h must be > 0".into()));
        }
        for v in &vertices {
            if !v[0].is_finite() || !v[1].is_finite() {
                return Err(MeshError::InvalidTopology("non-finite vertex coordinate".into()));
            }
        }
        let n = vertices.len();
        let mut geometry = Vec::with_capacity(triangles.len());
        for (t, tri) in triangles.iter().enumerate() {
            for &v in tri {
                if v >= n {
                    return Err(MeshError::InvalidTopology(format!(
                        "triangle {t} references vertex {v} out of range"
                    )));
                }
            }
            let g = tri_geometry(&vertices, *tri);
            if g.area <= 0.0 {
                return Err(MeshError::InvalidTopology(format!(
                    "triangle {t} has non-positive signed area {}",
                    g.area
                )));
            }
            geometry.push(g);
        }

        // Every undirected edge appears in one or two triangles; edges in exactly one
        // must coincide with the declared boundary edges.
        use std::collections::HashMap;
        let mut edge_count: HashMap<(usize, usize), u32> = HashMap::new();
        for tri in &triangles {
            for k in 0..3 {
                let (a, b) = (tri[k], tri[(k + 1) % 3]);
                let key = (a.min(b), a.max(b));
                *edge_count.entry(key).or_insert(0) += 1;
            }
        }
        let mut border: Vec<(usize, usize)> = edge_count
            .iter()
            .filter(|&(_, &c)| c == 1)
            .map(|(&e, _)| e)
            .collect();
        if edge_count.values().any(|&c| c > 2) {
            return Err(MeshError::InvalidTopology("edge shared by more than two triangles".into()));
        }
        let mut declared: Vec<(usize, usize)> = boundary_edges
            .iter()
            .map(|e| {
                let [a, b] = e.vertices;
                (a.min(b), a.max(b))
            })
            .collect();
        border.sort_unstable();
        declared.sort_unstable();
        if border != declared {
            return Err(MeshError::InvalidTopology(
                "declared boundary edges do not match the triangulation border".into(),
            ));
        }

        // Closed loops: every boundary vertex has exactly two incident boundary edges.
        let mut degree: HashMap<usize, u32> = HashMap::new();
        for e in &boundary_edges {
            for &v in &e.vertices {
                *degree.entry(v).or_insert(0) += 1;
            }
        }
        if degree.values().any(|&d| d != 2) {
            return Err(MeshError::InvalidTopology(
                "boundary edges do not form closed loops".into(),
            ));
        }

        let mesh = Self {
            vertices,
            triangles,
            boundary_edges,
            characteristic_h,
            geometry,
        };
        mesh.validate_electrodes()?;
        Ok(mesh)
    }

    fn validate_electrodes(&self) -> Result<(), MeshError> {
        let l_count = self.electrode_count();
        let mut seen = vec![false; l_count];
        for e in &self.boundary_edges {
            if let BoundaryLabel::Electrode(l) = e.label {
                if l >= l_count {
                    return Err(MeshError::InvalidTopology(format!(
                        "electrode index {l} out of range"
                    )));
                }
                seen[l] = true;
            }
        }
        if seen.iter().any(|&s| !s) {
            return Err(MeshError::InvalidTopology("electrode indices have gaps".into()));
        }
        // Connectedness along the boundary: each electrode's edges must chain up.
        for l in 0..l_count {
            self.electrode_chain(l)?;
        }
        Ok(())
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_triangles(&self) -> usize {
        self.triangles.len()
    }

    pub fn vertices(&self) -> &[[f64; 2]] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn boundary_edges(&self) -> &[BoundaryEdge] {
        &self.boundary_edges
    }

    pub fn characteristic_h(&self) -> f64 {
        self.characteristic_h
    }

    pub fn geometry(&self, t: usize) -> &TriGeometry {
        &self.geometry[t]
    }

    pub fn geometries(&self) -> &[TriGeometry] {
        &self.geometry
    }

    pub fn tri_area(&self, t: usize) -> f64 {
        self.geometry[t].area
    }

    pub fn total_area(&self) -> f64 {
        self.geometry.iter().map(|g| g.area).sum()
    }

    /// Number of electrodes, from the largest electrode label present.
    pub fn electrode_count(&self) -> usize {
        self.boundary_edges
            .iter()
            .filter_map(|e| match e.label {
                BoundaryLabel::Electrode(l) => Some(l + 1),
                _ => None,
            })
            .max()
            .unwrap_or(0)
    }

    /// Indices of vertices lying on any boundary edge.
    pub fn boundary_vertices(&self) -> Vec<usize> {
        let mut on_boundary = vec![false; self.vertices.len()];
        for e in &self.boundary_edges {
            on_boundary[e.vertices[0]] = true;
            on_boundary[e.vertices[1]] = true;
        }
        (0..self.vertices.len()).filter(|&v| on_boundary[v]).collect()
    }

    /// Vertices on Dirichlet-labeled boundary edges.
    pub fn dirichlet_vertices(&self) -> Vec<usize> {
        let mut on = vec![false; self.vertices.len()];
        for e in &self.boundary_edges {
            if e.label == BoundaryLabel::DirichletBoundary {
                on[e.vertices[0]] = true;
                on[e.vertices[1]] = true;
            }
        }
        (0..self.vertices.len()).filter(|&v| on[v]).collect()
    }

    /// Boundary-edge indices of electrode `l` ordered into a chain along the boundary.
    pub fn electrode_chain(&self, l: usize) -> Result<Vec<usize>, MeshError> {
        use std::collections::BTreeMap;
        let edges: Vec<usize> = self
            .boundary_edges
            .iter()
            .enumerate()
            .filter(|(_, e)| e.label == BoundaryLabel::Electrode(l))
            .map(|(i, _)| i)
            .collect();
        if edges.is_empty() {
            return Err(MeshError::InvalidTopology(format!("electrode {l} has no edges")));
        }
        // Ordered map keeps the chain walk deterministic.
        let mut incident: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for &ei in &edges {
            for &v in &self.boundary_edges[ei].vertices {
                incident.entry(v).or_default().push(ei);
            }
        }
        // Chain ends have a single incident electrode edge; a full-loop electrode has none.
        let start_vertex = incident
            .iter()
            .find(|(_, es)| es.len() == 1)
            .map(|(&v, _)| v)
            .unwrap_or(self.boundary_edges[edges[0]].vertices[0]);
        let mut chain = Vec::with_capacity(edges.len());
        let mut used = vec![false; self.boundary_edges.len()];
        let mut v = start_vertex;
        loop {
            let next = incident
                .get(&v)
                .and_then(|es| es.iter().find(|&&e| !used[e]).copied());
            let Some(e) = next else { break };
            used[e] = true;
            let [a, b] = self.boundary_edges[e].vertices;
            v = if a == v { b } else { a };
            chain.push(e);
        }
        if chain.len() != edges.len() {
            return Err(MeshError::InvalidTopology(format!(
                "electrode {l} edges are not connected along the boundary"
            )));
        }
        Ok(chain)
    }

    /// Total boundary length of electrode `l`.
    pub fn electrode_length(&self, l: usize) -> Result<f64, MeshError> {
        Ok(self
            .electrode_chain(l)?
            .iter()
            .map(|&e| self.edge_length(e))
            .sum())
    }

    pub fn edge_length(&self, e: usize) -> f64 {
        let [a, b] = self.boundary_edges[e].vertices;
        let (pa, pb) = (self.vertices[a], self.vertices[b]);
        ((pa[0] - pb[0]).powi(2) + (pa[1] - pb[1]).powi(2)).sqrt()
    }

    /// For each boundary edge, the index of the unique triangle containing it.
    pub fn boundary_edge_triangles(&self) -> Vec<usize> {
        use std::collections::HashMap;
        let mut owner: HashMap<(usize, usize), usize> = HashMap::new();
        for (t, tri) in self.triangles.iter().enumerate() {
            for k in 0..3 {
                let (a, b) = (tri[k], tri[(k + 1) % 3]);
                owner.insert((a.min(b), a.max(b)), t);
            }
        }
        self.boundary_edges
            .iter()
            .map(|e| {
                let [a, b] = e.vertices;
                owner[&(a.min(b), a.max(b))]
            })
            .collect()
    }
}

fn tri_geometry(vertices: &[[f64; 2]], tri: [usize; 3]) -> TriGeometry {
    let p = [vertices[tri[0]], vertices[tri[1]], vertices[tri[2]]];
    let two_a = (p[1][0] - p[0][0]) * (p[2][1] - p[0][1]) - (p[2][0] - p[0][0]) * (p[1][1] - p[0][1]);
    let area = 0.5 * two_a;
    let grads = [
        [(p[1][1] - p[2][1]) / two_a, (p[2][0] - p[1][0]) / two_a],
        [(p[2][1] - p[0][1]) / two_a, (p[0][0] - p[2][0]) / two_a],
        [(p[0][1] - p[1][1]) / two_a, (p[1][0] - p[0][0]) / two_a],
    ];
    let centroid = [
        (p[0][0] + p[1][0] + p[2][0]) / 3.0,
        (p[0][1] + p[1][1] + p[2][1]) / 3.0,
    ];
    TriGeometry { area, grads, centroid }
}

/// Safety limits for the generators.
#[derive(Debug, Clone)]
pub struct GeneratorOptions {
    pub max_triangles: usize,
}

impl Default for GeneratorOptions {
    fn default() -> Self {
        Self {
            max_triangles: 2_000_000,
        }
    }
}

/// Disk of the given radius; delegates to the ellipse mesher with equal semi-axes.
pub fn generate_disk_mesh(
    radius: f64,
    h: f64,
    layout: &ElectrodeLayout,
    opts: &GeneratorOptions,
) -> Result<Mesh, MeshError> {
    generate_ellipse_mesh(radius, radius, h, layout, opts)
}

/// Ellipse with semi-axes `a` (x) and `b` (y), electrodes placed by central angle.
pub fn generate_ellipse_mesh(
    a: f64,
    b: f64,
    h: f64,
    layout: &ElectrodeLayout,
    opts: &GeneratorOptions,
) -> Result<Mesh, MeshError> {
    if !(a > 0.0 && b > 0.0) {
        return Err(MeshError::InvalidParameter("semi-axes must be positive".into()));
    }
    if !(h > 0.0 && h < a.min(b)) {
        return Err(MeshError::InvalidParameter(format!(
            "h must lie in (0, min(a,b)), got {h}"
        )));
    }
    let estimated = (TAU * a * b / (h * h)).ceil() as usize;
    if estimated > opts.max_triangles {
        return Err(MeshError::TooManyTriangles {
            estimated,
            cap: opts.max_triangles,
        });
    }

    let boundary_point = |theta: f64| -> [f64; 2] {
        let (s, c) = theta.sin_cos();
        let rho = a * b / ((b * c).powi(2) + (a * s).powi(2)).sqrt();
        [rho * c, rho * s]
    };

    // Boundary segments between electrode arc endpoints, labeled by midpoint.
    let mut breakpoints: Vec<f64> = Vec::new();
    for &(start, width) in layout.arcs() {
        breakpoints.push(normalize_angle(start));
        breakpoints.push(normalize_angle(start + width));
    }
    breakpoints.sort_by(f64::total_cmp);
    breakpoints.dedup_by(|x, y| (*x - *y).abs() < 1e-12);
    if breakpoints.is_empty() {
        breakpoints.push(0.0);
    }
    let n_seg = breakpoints.len();
    struct Segment {
        start: f64,
        end: f64,
        label: BoundaryLabel,
    }
    let mut segments = Vec::with_capacity(n_seg);
    for i in 0..n_seg {
        let start = breakpoints[i];
        let end = if i + 1 < n_seg {
            breakpoints[i + 1]
        } else {
            breakpoints[0] + TAU
        };
        if end - start < 1e-12 {
            continue;
        }
        let label = match layout.electrode_at(0.5 * (start + end)) {
            Some(l) => BoundaryLabel::Electrode(l),
            None => BoundaryLabel::Gap,
        };
        segments.push(Segment { start, end, label });
    }

    // Dense polyline arclength per segment for equal-arclength vertex placement.
    let seg_points = |seg: &Segment| -> Vec<(f64, f64)> {
        // (theta, cumulative length) samples
        let samples = 64.max(((seg.end - seg.start) / TAU * 4096.0).ceil() as usize);
        let mut pts = Vec::with_capacity(samples + 1);
        let mut acc = 0.0;
        let mut prev = boundary_point(seg.start);
        pts.push((seg.start, 0.0));
        for i in 1..=samples {
            let t = seg.start + (seg.end - seg.start) * i as f64 / samples as f64;
            let p = boundary_point(t);
            acc += ((p[0] - prev[0]).powi(2) + (p[1] - prev[1]).powi(2)).sqrt();
            prev = p;
            pts.push((t, acc));
        }
        pts
    };

    // Boundary ring: exact vertices at breakpoints, equal-arclength interior subdivisions.
    let mut boundary_thetas: Vec<f64> = Vec::new(); // unwrapped, ascending from segments[0].start
    let mut boundary_labels: Vec<BoundaryLabel> = Vec::new(); // label of edge following vertex i
    for seg in &segments {
        let dense = seg_points(seg);
        let len = dense.last().unwrap().1;
        let n_sub = (len / h).ceil().max(1.0) as usize;
        for j in 0..n_sub {
            let target = len * j as f64 / n_sub as f64;
            let theta = if j == 0 {
                seg.start
            } else {
                // invert cumulative arclength by linear interpolation
                let idx = dense.partition_point(|&(_, l)| l < target);
                let (t1, l1) = dense[idx];
                let (t0, l0) = dense[idx - 1];
                t0 + (t1 - t0) * (target - l0) / (l1 - l0)
            };
            boundary_thetas.push(theta);
            boundary_labels.push(seg.label);
        }
    }
    let n_boundary = boundary_thetas.len();
    if n_boundary < 3 {
        return Err(MeshError::InvalidParameter("boundary resolution too coarse".into()));
    }

    // Interior rings: scaled copies of the boundary curve at t_k = k/K, uniform angles,
    // even vertex counts so the mesh is symmetric under both coordinate reflections.
    let k_rings = ((a.min(b) / h).round() as usize).max(2);
    let circumference = {
        let full = Segment {
            start: 0.0,
            end: TAU,
            label: BoundaryLabel::Gap,
        };
        seg_points(&full).last().unwrap().1
    };

    let mut vertices: Vec<[f64; 2]> = vec![[0.0, 0.0]];
    let mut rings: Vec<Vec<(usize, f64)>> = Vec::new(); // (vertex id, angle) per ring
    for k in 1..k_rings {
        let t = k as f64 / k_rings as f64;
        let mut nk = ((circumference * t / h).round() as usize).max(4);
        if nk % 2 == 1 {
            nk += 1;
        }
        let mut ring = Vec::with_capacity(nk);
        for j in 0..nk {
            let theta = TAU * j as f64 / nk as f64;
            let p = boundary_point(theta);
            ring.push((vertices.len(), theta));
            vertices.push([t * p[0], t * p[1]]);
        }
        rings.push(ring);
    }
    let mut boundary_ring = Vec::with_capacity(n_boundary);
    for &theta in &boundary_thetas {
        boundary_ring.push((vertices.len(), normalize_angle(theta)));
        vertices.push(boundary_point(theta));
    }
    rings.push(boundary_ring.clone());

    // Center fan plus ring-to-ring stitches.
    let mut triangles: Vec<[usize; 3]> = Vec::new();
    let first = &rings[0];
    let n0 = first.len();
    for j in 0..n0 {
        triangles.push([0, first[j].0, first[(j + 1) % n0].0]);
    }
    for w in rings.windows(2) {
        stitch_rings(&w[0], &w[1], &mut triangles);
    }
    // Defensive orientation fix; the constructor rejects degenerate triangles.
    for tri in &mut triangles {
        let g = tri_geometry(&vertices, *tri);
        if g.area < 0.0 {
            tri.swap(1, 2);
        }
    }

    let boundary_edges: Vec<BoundaryEdge> = (0..n_boundary)
        .map(|i| BoundaryEdge {
            vertices: [boundary_ring[i].0, boundary_ring[(i + 1) % n_boundary].0],
            label: boundary_labels[i],
        })
        .collect();

    Mesh::new(vertices, triangles, boundary_edges, h)
}

/// Triangulates the annulus between two vertex rings sorted by angle.
fn stitch_rings(inner: &[(usize, f64)], outer: &[(usize, f64)], triangles: &mut Vec<[usize; 3]>) {
    let ni = inner.len();
    let no = outer.len();
    // Align the start of the outer ring with the inner ring's first vertex.
    let base = inner[0].1;
    let start_j = (0..no)
        .min_by(|&x, &y| {
            let dx = angle_gap(outer[x].1, base);
            let dy = angle_gap(outer[y].1, base);
            dx.total_cmp(&dy)
        })
        .unwrap();
    let inner_angle = |steps: usize| -> f64 {
        let q = steps / ni;
        normalize_angle(inner[steps % ni].1 - base) + TAU * q as f64
    };
    let outer_angle = |steps: usize| -> f64 {
        let q = steps / no;
        normalize_angle(outer[(start_j + steps) % no].1 - base) + TAU * q as f64
    };
    let inner_id = |steps: usize| inner[steps % ni].0;
    let outer_id = |steps: usize| outer[(start_j + steps) % no].0;

    let (mut i, mut j) = (0usize, 0usize);
    while i < ni || j < no {
        let advance_inner = if i >= ni {
            false
        } else if j >= no {
            true
        } else {
            inner_angle(i + 1) <= outer_angle(j + 1)
        };
        if advance_inner {
            triangles.push([inner_id(i), outer_id(j), inner_id(i + 1)]);
            i += 1;
        } else {
            triangles.push([outer_id(j), outer_id(j + 1), inner_id(i)]);
            j += 1;
        }
    }
}

fn angle_gap(t: f64, base: f64) -> f64 {
    normalize_angle(t - base)
}

/// Structured triangulation of `[0,w] x [0,h]`, all boundary edges Dirichlet.
pub fn generate_rectangle_mesh(
    width: f64,
    height: f64,
    h: f64,
    opts: &GeneratorOptions,
) -> Result<Mesh, MeshError> {
    if !(width > 0.0 && height > 0.0 && h > 0.0) {
        return Err(MeshError::InvalidParameter("rectangle dimensions and h must be positive".into()));
    }
    let nx = ((width / h).round() as usize).max(1);
    let ny = ((height / h).round() as usize).max(1);
    let estimated = 2 * nx * ny;
    if estimated > opts.max_triangles {
        return Err(MeshError::TooManyTriangles {
            estimated,
            cap: opts.max_triangles,
        });
    }
    let mut vertices = Vec::with_capacity((nx + 1) * (ny + 1));
    for j in 0..=ny {
        for i in 0..=nx {
            vertices.push([width * i as f64 / nx as f64, height * j as f64 / ny as f64]);
        }
    }
    let id = |i: usize, j: usize| j * (nx + 1) + i;
    let mut triangles = Vec::with_capacity(2 * nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let (v00, v10, v01, v11) = (id(i, j), id(i + 1, j), id(i, j + 1), id(i + 1, j + 1));
            triangles.push([v00, v10, v11]);
            triangles.push([v00, v11, v01]);
        }
    }
    let mut boundary_edges = Vec::with_capacity(2 * (nx + ny));
    for i in 0..nx {
        boundary_edges.push(BoundaryEdge {
            vertices: [id(i, 0), id(i + 1, 0)],
            label: BoundaryLabel::DirichletBoundary,
        });
        boundary_edges.push(BoundaryEdge {
            vertices: [id(i + 1, ny), id(i, ny)],
            label: BoundaryLabel::DirichletBoundary,
        });
    }
    for j in 0..ny {
        boundary_edges.push(BoundaryEdge {
            vertices: [id(nx, j), id(nx, j + 1)],
            label: BoundaryLabel::DirichletBoundary,
        });
        boundary_edges.push(BoundaryEdge {
            vertices: [id(0, j + 1), id(0, j)],
            label: BoundaryLabel::DirichletBoundary,
        });
    }
    Mesh::new(vertices, triangles, boundary_edges, h)
}

/// Euclidean distance from every vertex to the boundary polyline; exactly zero at
/// boundary vertices.
pub fn boundary_distance_field(mesh: &Arc<Mesh>) -> crate::fem::ScalarField {
    let segs: Vec<([f64; 2], [f64; 2])> = mesh
        .boundary_edges()
        .iter()
        .map(|e| (mesh.vertices()[e.vertices[0]], mesh.vertices()[e.vertices[1]]))
        .collect();
    let mut on_boundary = vec![false; mesh.num_vertices()];
    for e in mesh.boundary_edges() {
        on_boundary[e.vertices[0]] = true;
        on_boundary[e.vertices[1]] = true;
    }
    let values: Vec<f64> = mesh
        .vertices()
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            if on_boundary[i] {
                return 0.0;
            }
            segs.iter()
                .map(|&(a, b)| dist_point_segment(p, a, b))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    crate::fem::ScalarField::new(mesh.clone(), values).expect("distance field is finite")
}

fn dist_point_segment(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let ap = [p[0] - a[0], p[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 > 0.0 {
        ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let q = [a[0] + t * ab[0], a[1] + t * ab[1]];
    ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt()
}

/// Maps submesh vertex indices back to the parent mesh.
#[derive(Debug, Clone)]
pub struct SubmeshMap {
    /// `parent_vertex[i]` is the parent index of submesh vertex `i`.
    pub parent_vertex: Vec<usize>,
}

/// Triangles whose vertices all lie farther than `d` from the boundary; the new border
/// is labeled Dirichlet. `d == 0` keeps the full mesh (relabeled).
pub fn extract_interior_submesh(
    mesh: &Arc<Mesh>,
    d: f64,
) -> Result<(Mesh, SubmeshMap), MeshError> {
    if d < 0.0 {
        return Err(MeshError::InvalidParameter("submesh width must be >= 0".into()));
    }
    let dist = boundary_distance_field(mesh);
    let keep_vertex: Vec<bool> = dist
        .values()
        .iter()
        .map(|&v| if d == 0.0 { true } else { v > d })
        .collect();
    let kept_tris: Vec<usize> = (0..mesh.num_triangles())
        .filter(|&t| mesh.triangles()[t].iter().all(|&v| keep_vertex[v]))
        .collect();
    if kept_tris.is_empty() {
        return Err(MeshError::EmptySubmesh);
    }

    let mut new_index = vec![usize::MAX; mesh.num_vertices()];
    let mut parent_vertex = Vec::new();
    let mut vertices = Vec::new();
    let mut triangles = Vec::with_capacity(kept_tris.len());
    for &t in &kept_tris {
        let mut tri = [0usize; 3];
        for (k, &v) in mesh.triangles()[t].iter().enumerate() {
            if new_index[v] == usize::MAX {
                new_index[v] = vertices.len();
                vertices.push(mesh.vertices()[v]);
                parent_vertex.push(v);
            }
            tri[k] = new_index[v];
        }
        triangles.push(tri);
    }

    // Border of the kept set: edges on exactly one kept triangle, collected in
    // triangle-traversal order so the output is deterministic.
    use std::collections::HashMap;
    let mut edge_count: HashMap<(usize, usize), u32> = HashMap::new();
    for tri in &triangles {
        for k in 0..3 {
            let (a, b) = (tri[k], tri[(k + 1) % 3]);
            *edge_count.entry((a.min(b), a.max(b))).or_insert(0) += 1;
        }
    }
    let mut boundary_edges = Vec::new();
    for tri in &triangles {
        for k in 0..3 {
            let (a, b) = (tri[k], tri[(k + 1) % 3]);
            if edge_count[&(a.min(b), a.max(b))] == 1 {
                boundary_edges.push(BoundaryEdge {
                    vertices: [a, b],
                    label: BoundaryLabel::DirichletBoundary,
                });
            }
        }
    }

    let sub = Mesh::new(vertices, triangles, boundary_edges, mesh.characteristic_h())?;
    Ok((sub, SubmeshMap { parent_vertex }))
}
