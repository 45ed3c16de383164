//! The rasterizer against a per-pixel brute-force reference.

#[path = "support/raster_brute.rs"]
mod brute;

use brute::{brute_force, compare, lattice, random_mesh, N};
use dntx_core::raster::{rasterize, soup, Camera};
use proptest::prelude::*;

#[test]
fn hundred_random_meshes_match_the_brute_force_oracle() {
    let mut covered = 0;
    for seed in 0..100 {
        let (cam, verts, uvs, tris) = random_mesh(seed);
        let m = rasterize(&verts, &soup(uvs.clone(), tris.clone()), &cam);
        let want = brute_force(&cam, &verts, &uvs, &tris);
        compare(&m, &want).unwrap_or_else(|e| panic!("mesh {seed}: {e}"));
        covered += m.covered();
    }
    assert!(covered > 100 * N * N / 10, "meshes barely cover the frame: {covered}");
}

#[test]
fn lattice_meshes_match_the_oracle() {
    let cam = Camera::orthographic(N, N, 1.0).unwrap();
    for (cells, step) in [(4, 8.0), (8, 4.0), (5, 6.5), (6, 5.5)] {
        let (verts, uvs, tris) = lattice(cells, step, 0.0);
        let m = rasterize(&verts, &soup(uvs.clone(), tris.clone()), &cam);
        compare(&m, &brute_force(&cam, &verts, &uvs, &tris)).unwrap_or_else(|e| panic!("lattice {cells}x{step}: {e}"));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// Triangles tiling a region cover each pixel center in it exactly once.
    #[test]
    fn tilings_own_each_pixel_once(cells in 1usize..7, step in 1u32..9, half in any::<bool>(), flip in any::<bool>()) {
        let cam = Camera::orthographic(N, N, 1.0).unwrap();
        let step = step as f64 + if half { 0.5 } else { 0.0 };
        let (verts, uvs, mut tris) = lattice(cells, step, 0.0);
        if flip {
            tris.iter_mut().for_each(|t| t.swap(1, 2));
        }
        let mut count = vec![0u32; N * N];
        for t in &tris {
            let m = rasterize(&verts, &soup(uvs.clone(), vec![*t]), &cam);
            for (c, &cov) in count.iter_mut().zip(&m.coverage) {
                *c += cov as u32;
            }
        }
        let extent = cells as f64 * step;
        for y in 0..N {
            for x in 0..N {
                let inside = (x as f64 + 0.5) < extent && (y as f64 + 0.5) < extent;
                prop_assert_eq!(count[y * N + x], inside as u32, "pixel ({}, {})", x, y);
            }
        }
    }

    /// UVs of covered pixels stay inside the convex hull of the triangle's UVs.
    #[test]
    fn interpolated_uv_is_convex(seed in 0u64..10_000) {
        let (cam, verts, uvs, tris) = random_mesh(seed);
        let m = rasterize(&verts, &soup(uvs.clone(), tris.clone()), &cam);
        for o in 0..N * N {
            if m.coverage[o] {
                let t = tris[m.triangle[o] as usize];
                for c in 0..2 {
                    let vals = t.map(|i| uvs[i as usize][c]);
                    let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
                    let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    prop_assert!(m.uv[o][c] >= lo - 1e-9 && m.uv[o][c] <= hi + 1e-9);
                }
            }
        }
    }
}
