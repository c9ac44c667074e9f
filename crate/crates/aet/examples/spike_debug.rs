// temporary probe: endpoint-cell E across refinements
use aet::fem::{ElectrodeZeta, ScalarField};
use aet::forward::*;
use aet::mesh::*;
use std::sync::Arc;

fn main() {
    for &h in &[0.01, 0.005, 0.0025] {
        let layout = ElectrodeLayout::uniform(16, 0.5).unwrap();
        let mesh = Arc::new(generate_disk_mesh(0.25, h, &layout, &GeneratorOptions::default()).unwrap());
        let sigma = ScalarField::constant(mesh.clone(), 1.0);
        let pattern = fourier_pattern(2, 16).unwrap();
        let scem = solve_scem(&mesh, &sigma, &ElectrodeZeta::uniform_bump(16, 1.0).unwrap(), &pattern).unwrap();
        let cem = solve_cem(&mesh, &sigma, &vec![2.0; 16], &pattern).unwrap();
        let e_scem = power_density(&sigma, &scem);
        let e_cem = power_density(&sigma, &cem);
        let tri_of_edge = |edge: usize| -> usize {
            let [a, b] = mesh.boundary_edges()[edge].vertices;
            (0..mesh.num_triangles())
                .find(|&t| {
                    let tri = mesh.triangles()[t];
                    tri.contains(&a) && tri.contains(&b)
                })
                .unwrap()
        };
        // max endpoint-cell E over all electrodes (first+last chain edges)
        let endpoint_max = |e: &aet::fem::PowerDensity| -> f64 {
            let mut best = 0.0_f64;
            for l in 0..16 {
                let chain = mesh.electrode_chain(l).unwrap();
                for &edge in [chain[0], *chain.last().unwrap()].iter() {
                    best = best.max(e.values()[tri_of_edge(edge)]);
                }
            }
            best
        };
        println!("h={h}: tris={} endpoint scem={:8.2} cem={:8.2}", mesh.num_triangles(), endpoint_max(&e_scem), endpoint_max(&e_cem));
    }
}
