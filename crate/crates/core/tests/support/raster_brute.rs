//! Per-pixel brute-force rasterization reference: every triangle is tested
//! against every pixel. Coverage uses a geometric top-left test; perspective
//! UVs come from intersecting the pixel ray with the triangle.

use dntx_core::raster::{Camera, Projection, UvScreenMap};
use dntx_core::rng::{seeded, uniform, SeededRng};

pub const N: usize = 32;

pub struct Hit {
    pub triangle: usize,
    pub depth: f64,
    pub uv: [f64; 2],
}

fn screen(cam: &Camera, p: [f64; 3]) -> [f64; 2] {
    let (cx, cy) = (cam.width as f64 / 2.0, cam.height as f64 / 2.0);
    match cam.projection {
        Projection::Orthographic { scale } => [cx + scale * p[0], cy - scale * p[1]],
        Projection::Pinhole { focal, distance } => [cx + focal * p[0] / (distance - p[2]), cy - focal * p[1] / (distance - p[2])],
    }
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Whether a pixel lying exactly on edge `a b` belongs to the triangle with
/// third vertex `c`: the edge must be a top edge (horizontal, triangle below,
/// y down) or a left edge (triangle to its right).
fn top_left(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> bool {
    if a[1] == b[1] {
        return c[1] > a[1];
    }
    let x_at = a[0] + (c[1] - a[1]) * (b[0] - a[0]) / (b[1] - a[1]);
    c[0] > x_at
}

fn covers(s: [[f64; 2]; 3], p: [f64; 2]) -> bool {
    let area = cross(s[0], s[1], s[2]);
    for k in 0..3 {
        let (a, b, c) = (s[(k + 1) % 3], s[(k + 2) % 3], s[k]);
        // signed so that the interior is positive
        let side = cross(a, b, p) * area.signum();
        if side < 0.0 || (side == 0.0 && !top_left(a, b, c)) {
            return false;
        }
    }
    true
}

/// Barycentric weights and view depth of the surface point seen at `p`.
fn surface(cam: &Camera, v: [[f64; 3]; 3], s: [[f64; 2]; 3], p: [f64; 2]) -> ([f64; 3], f64) {
    match cam.projection {
        Projection::Orthographic { .. } => {
            let area = cross(s[0], s[1], s[2]);
            let l = [cross(p, s[1], s[2]) / area, cross(s[0], p, s[2]) / area, cross(s[0], s[1], p) / area];
            (l, -(l[0] * v[0][2] + l[1] * v[1][2] + l[2] * v[2][2]))
        }
        Projection::Pinhole { focal, distance } => {
            let (cx, cy) = (cam.width as f64 / 2.0, cam.height as f64 / 2.0);
            let eye = [0.0, 0.0, distance];
            let dir = [(p[0] - cx) / focal, -(p[1] - cy) / focal, -1.0];
            let sub = |a: [f64; 3], b: [f64; 3]| [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
            let cr = |a: [f64; 3], b: [f64; 3]| [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]];
            let dot = |a: [f64; 3], b: [f64; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
            let (e1, e2) = (sub(v[1], v[0]), sub(v[2], v[0]));
            let h = cr(dir, e2);
            let det = dot(e1, h);
            let q = sub(eye, v[0]);
            let u = dot(q, h) / det;
            let r = cr(q, e1);
            let w = dot(dir, r) / det;
            let t = dot(e2, r) / det;
            // the hit point sits at z = distance - t, so its view depth is t
            ([1.0 - u - w, u, w], t)
        }
    }
}

pub fn brute_force(cam: &Camera, verts: &[[f64; 3]], uvs: &[[f64; 2]], tris: &[[u32; 3]]) -> Vec<Option<Hit>> {
    let mut out = Vec::with_capacity(cam.height * cam.width);
    for y in 0..cam.height {
        for x in 0..cam.width {
            let p = [x as f64 + 0.5, y as f64 + 0.5];
            let mut best: Option<Hit> = None;
            for (ti, t) in tris.iter().enumerate() {
                let v = t.map(|i| verts[i as usize]);
                let s = v.map(|q| screen(cam, q));
                if cross(s[0], s[1], s[2]) == 0.0 || !covers(s, p) {
                    continue;
                }
                let (l, depth) = surface(cam, v, s, p);
                if best.as_ref().is_some_and(|b| b.depth <= depth) {
                    continue;
                }
                let uv = t.map(|i| uvs[i as usize]);
                let u = [0, 1].map(|c| l[0] * uv[0][c] + l[1] * uv[1][c] + l[2] * uv[2][c]);
                best = Some(Hit { triangle: ti, depth, uv: u });
            }
            out.push(best);
        }
    }
    out
}

/// First disagreement between `m` and the reference, if any.
pub fn compare(m: &UvScreenMap, want: &[Option<Hit>]) -> Result<(), String> {
    for (o, w) in want.iter().enumerate() {
        match w {
            None if m.coverage[o] => return Err(format!("pixel {o} covered, reference says empty")),
            None => {}
            Some(h) => {
                if !m.coverage[o] {
                    return Err(format!("pixel {o} empty, reference says triangle {}", h.triangle));
                }
                if m.triangle[o] as usize != h.triangle {
                    return Err(format!("pixel {o} shows triangle {}, reference {}", m.triangle[o], h.triangle));
                }
                let e = (m.uv[o][0] - h.uv[0]).abs().max((m.uv[o][1] - h.uv[1]).abs());
                if e > 1e-5 {
                    return Err(format!("pixel {o} uv {:?} vs {:?}", m.uv[o], h.uv));
                }
            }
        }
    }
    Ok(())
}

/// Mesh kinds cycle through: free float vertices under an orthographic
/// camera, the same under a pinhole camera, and vertices snapped to the
/// half-pixel lattice so edges run through pixel centers.
pub fn random_mesh(seed: u64) -> (Camera, Vec<[f64; 3]>, Vec<[f64; 2]>, Vec<[u32; 3]>) {
    let mut r: SeededRng = seeded(seed);
    let kind = seed % 3;
    let cam = match kind {
        1 => Camera::new(Projection::Pinhole { focal: 40.0, distance: 6.0 }, N, N).unwrap(),
        _ => Camera::orthographic(N, N, 1.0).unwrap(),
    };
    let n_tri = 1 + (uniform(&mut r, 0.0, 12.0) as usize);
    let mut verts = Vec::new();
    let mut tris = Vec::new();
    for t in 0..n_tri {
        for _ in 0..3 {
            let v = match kind {
                1 => [uniform(&mut r, -3.0, 3.0), uniform(&mut r, -3.0, 3.0), uniform(&mut r, -1.5, 1.5)],
                2 => {
                    let snap = |x: f64| (x * 2.0).round() / 2.0;
                    [snap(uniform(&mut r, -20.0, 20.0)), snap(uniform(&mut r, -20.0, 20.0)), uniform(&mut r, -1.0, 1.0)]
                }
                _ => [uniform(&mut r, -20.0, 20.0), uniform(&mut r, -20.0, 20.0), uniform(&mut r, -1.0, 1.0)],
            };
            verts.push(v);
        }
        tris.push([3 * t as u32, 3 * t as u32 + 1, 3 * t as u32 + 2]);
    }
    let uvs = verts.iter().map(|_| [uniform(&mut r, 0.0, 1.0), uniform(&mut r, 0.0, 1.0)]).collect();
    (cam, verts, uvs, tris)
}

/// Quads split along alternating diagonals on an integer lattice, so every
/// pixel center on a shared edge must be owned by exactly one triangle.
pub fn lattice(cells: usize, step: f64, z: f64) -> (Vec<[f64; 3]>, Vec<[f64; 2]>, Vec<[u32; 3]>) {
    let n = cells + 1;
    let mut verts = Vec::new();
    let mut uvs = Vec::new();
    for j in 0..n {
        for i in 0..n {
            let (sx, sy) = (i as f64 * step, j as f64 * step);
            verts.push([sx - N as f64 / 2.0, N as f64 / 2.0 - sy, z]);
            uvs.push([i as f64 / cells as f64, 1.0 - j as f64 / cells as f64]);
        }
    }
    let mut tris = Vec::new();
    for j in 0..cells {
        for i in 0..cells {
            let k = |a: usize, b: usize| (b * n + a) as u32;
            let (p, q, r, s) = (k(i, j), k(i + 1, j), k(i + 1, j + 1), k(i, j + 1));
            if (i + j) % 2 == 0 {
                tris.push([p, q, r]);
                tris.push([p, r, s]);
            } else {
                tris.push([p, q, s]);
                tris.push([q, r, s]);
            }
        }
    }
    (verts, uvs, tris)
}

