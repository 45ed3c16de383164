//! Software rasterizer for deferred texture mapping.
//!
//! Conventions: pixel `(x, y)` has its center at `(x + 0.5, y + 0.5)` with `y`
//! growing downward; ownership of shared edges follows the top-left rule; UV
//! origin is bottom-left, so texel row 0 holds `v = 1`.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use crate::face::{Mesh, Topology};
use crate::tape::ResamplePlan;
use crate::{shape_err_fmt, Error, Real, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Projection {
    /// Screen pixels per model unit.
    Orthographic { scale: f64 },
    /// Focal length in pixels; the eye sits at `(0, 0, distance)` looking
    /// down `-z`.
    Pinhole { focal: f64, distance: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub projection: Projection,
    pub height: usize,
    pub width: usize,
}

impl Camera {
    pub fn orthographic(height: usize, width: usize, scale: f64) -> Result<Self> {
        Self::new(Projection::Orthographic { scale }, height, width)
    }

    /// Orthographic camera framing the default face.
    pub fn default_for(height: usize, width: usize) -> Result<Self> {
        Self::orthographic(height, width, 0.42 * height.min(width) as f64)
    }

    pub fn new(projection: Projection, height: usize, width: usize) -> Result<Self> {
        if height < 8 || width < 8 {
            return Err(Error::Config(alloc::format!("camera {height}x{width} is below 8x8")));
        }
        Ok(Self { projection, height, width })
    }

    /// Screen position and view depth (distance along the view axis; smaller
    /// is nearer).
    pub fn project(&self, p: [f64; 3]) -> [f64; 3] {
        let (cx, cy) = (self.width as f64 / 2.0, self.height as f64 / 2.0);
        match self.projection {
            Projection::Orthographic { scale } => [cx + p[0] * scale, cy - p[1] * scale, -p[2]],
            Projection::Pinhole { focal, distance } => {
                let d = distance - p[2];
                [cx + focal * p[0] / d, cy - focal * p[1] / d, d]
            }
        }
    }

    fn perspective(&self) -> bool {
        matches!(self.projection, Projection::Pinhole { .. })
    }
}

/// Screen-space UV map.
#[derive(Debug, Clone, PartialEq)]
pub struct UvScreenMap {
    pub height: usize,
    pub width: usize,
    pub uv: Vec<[f64; 2]>,
    pub coverage: Vec<bool>,
    pub depth: Vec<f64>,
    /// Winning triangle per pixel, `u32::MAX` where uncovered.
    pub triangle: Vec<u32>,
    /// Barycentric weights of the winning triangle's vertices.
    pub bary: Vec<[f64; 3]>,
    /// Zero-area triangles skipped.
    pub degenerate: usize,
}

impl UvScreenMap {
    pub fn covered(&self) -> usize {
        self.coverage.iter().filter(|c| **c).count()
    }
}

/// Signed edge function of `p` against the directed edge `a -> b`.
#[inline]
pub fn edge(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
    (p[0] - a[0]) * (b[1] - a[1]) - (p[1] - a[1]) * (b[0] - a[0])
}

/// Whether a directed edge of a positively oriented triangle owns pixels lying
/// exactly on it.
#[inline]
pub fn owns_edge(a: [f64; 2], b: [f64; 2]) -> bool {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    dy > 0.0 || (dy == 0.0 && dx < 0.0)
}

#[inline]
fn inside(w: f64, owned: bool) -> bool {
    w > 0.0 || (w == 0.0 && owned)
}

/// Rasterizes per-vertex UVs of `mesh`.
pub fn rasterize_uv(mesh: &Mesh, camera: &Camera) -> UvScreenMap {
    rasterize(&mesh.vertices, &mesh.topology, camera)
}

pub fn rasterize(vertices: &[[f64; 3]], topo: &Topology, camera: &Camera) -> UvScreenMap {
    let (h, w) = (camera.height, camera.width);
    let mut out = UvScreenMap {
        height: h,
        width: w,
        uv: vec![[0.0; 2]; h * w],
        coverage: vec![false; h * w],
        depth: vec![f64::INFINITY; h * w],
        triangle: vec![u32::MAX; h * w],
        bary: vec![[0.0; 3]; h * w],
        degenerate: 0,
    };
    let proj: Vec<[f64; 3]> = vertices.iter().map(|&p| camera.project(p)).collect();
    let persp = camera.perspective();
    for (ti, t) in topo.triangles.iter().enumerate() {
        let mut idx = t.map(|i| i as usize);
        let s = |i: usize| [proj[i][0], proj[i][1]];
        let mut area = edge(s(idx[0]), s(idx[1]), s(idx[2]));
        if area == 0.0 || !area.is_finite() {
            out.degenerate += 1;
            continue;
        }
        if area < 0.0 {
            idx.swap(1, 2);
            area = -area;
        }
        let [a, b, c] = idx.map(s);
        let owned = [owns_edge(b, c), owns_edge(c, a), owns_edge(a, b)];
        let xmin = a[0].min(b[0]).min(c[0]).floor().max(0.0) as usize;
        let ymin = a[1].min(b[1]).min(c[1]).floor().max(0.0) as usize;
        let xmax = (a[0].max(b[0]).max(c[0]).ceil().min(w as f64) as usize).min(w);
        let ymax = (a[1].max(b[1]).max(c[1]).ceil().min(h as f64) as usize).min(h);
        for py in ymin..ymax {
            for px in xmin..xmax {
                let p = [px as f64 + 0.5, py as f64 + 0.5];
                let e = [edge(b, c, p), edge(c, a, p), edge(a, b, p)];
                if !(0..3).all(|k| inside(e[k], owned[k])) {
                    continue;
                }
                let l = e.map(|x| x / area);
                let (bary, depth) = if persp {
                    let iz = idx.map(|i| 1.0 / proj[i][2]);
                    let q = [l[0] * iz[0], l[1] * iz[1], l[2] * iz[2]];
                    let s = q[0] + q[1] + q[2];
                    ([q[0] / s, q[1] / s, q[2] / s], 1.0 / s)
                } else {
                    (l, l[0] * proj[idx[0]][2] + l[1] * proj[idx[1]][2] + l[2] * proj[idx[2]][2])
                };
                let o = py * w + px;
                if depth < out.depth[o] {
                    let uv = idx.map(|i| topo.uv[i]);
                    out.depth[o] = depth;
                    out.coverage[o] = true;
                    out.triangle[o] = ti as u32;
                    out.uv[o] = [
                        bary[0] * uv[0][0] + bary[1] * uv[1][0] + bary[2] * uv[2][0],
                        bary[0] * uv[0][1] + bary[1] * uv[1][1] + bary[2] * uv[2][1],
                    ];
                    // report weights in the triangle's own vertex order
                    let mut bw = [0.0; 3];
                    for (k, &vi) in idx.iter().enumerate() {
                        let pos = t.iter().position(|&x| x as usize == vi).unwrap_or(k);
                        bw[pos] = bary[k];
                    }
                    out.bary[o] = bw;
                }
            }
        }
    }
    out
}

/// Bilinear taps with edge clamping at continuous texel position `(x, y)`.
fn clamped_taps<T: Real>(x: f64, y: f64, h: usize, w: usize) -> [(u32, T); 4] {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let cx = |v: f64| v.clamp(0.0, (w - 1) as f64) as usize;
    let cy = |v: f64| v.clamp(0.0, (h - 1) as f64) as usize;
    let (xa, xb, ya, yb) = (cx(x0), cx(x0 + 1.0), cy(y0), cy(y0 + 1.0));
    let at = |yy: usize, xx: usize| (yy * w + xx) as u32;
    [
        (at(ya, xa), T::c((1.0 - fx) * (1.0 - fy))),
        (at(ya, xb), T::c(fx * (1.0 - fy))),
        (at(yb, xa), T::c((1.0 - fx) * fy)),
        (at(yb, xb), T::c(fx * fy)),
    ]
}

/// Resampling plan that looks up a `th x tw` texture through `uvmap`;
/// uncovered pixels get no taps and sample to zero.
pub fn texture_sampler<T: Real>(uvmap: &UvScreenMap, th: usize, tw: usize) -> Result<ResamplePlan<T>> {
    if th == 0 || tw == 0 {
        return Err(shape_err_fmt!("empty texture {}x{}", th, tw));
    }
    let zero = [(0u32, T::zero()); 4];
    let taps = uvmap
        .uv
        .iter()
        .zip(&uvmap.coverage)
        .map(|(p, &c)| {
            if !c {
                return zero;
            }
            let x = p[0] * tw as f64 - 0.5;
            let y = (1.0 - p[1]) * th as f64 - 0.5;
            clamped_taps(x, y, th, tw)
        })
        .collect();
    ResamplePlan::new(th, tw, uvmap.height, uvmap.width, taps)
}

/// Samples a `C x th x tw` texture into screen space (`C x H x W`).
pub fn sample_texture<T: Real>(texture: &[T], channels: usize, th: usize, tw: usize, uvmap: &UvScreenMap) -> Result<Vec<T>> {
    if texture.len() != channels * th * tw {
        return Err(shape_err_fmt!("texture has {} values, expected {}", texture.len(), channels * th * tw));
    }
    let plan = texture_sampler::<T>(uvmap, th, tw)?;
    let mut out = vec![T::zero(); channels * uvmap.height * uvmap.width];
    plan.apply(texture, &mut out);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Region {
    /// Every triangle of the mesh.
    Face,
    /// Convex hull of the basis' teeth anchors.
    Teeth(Vec<u32>),
    /// Convex hull of arbitrary vertex ids.
    Hull(Vec<u32>),
}

/// Boolean mask of a mesh region in screen space.
pub fn project_region_mask(mesh: &Mesh, camera: &Camera, region: &Region) -> Vec<bool> {
    match region {
        Region::Face => rasterize_uv(mesh, camera).coverage,
        Region::Teeth(ids) | Region::Hull(ids) => {
            let pts: Vec<[f64; 2]> = ids
                .iter()
                .map(|&i| {
                    let p = camera.project(mesh.vertices[i as usize]);
                    [p[0], p[1]]
                })
                .collect();
            hull_mask(&pts, camera.height, camera.width)
        }
    }
}

/// Andrew's monotone chain; returns the hull counter-clockwise in screen
/// coordinates without repeated points.
pub fn convex_hull(points: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut pts: Vec<[f64; 2]> = points.to_vec();
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: [f64; 2], a: [f64; 2], b: [f64; 2]| {
        (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
    };
    let mut lower: Vec<[f64; 2]> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<[f64; 2]> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

/// Pixels whose centers fall inside the convex hull of `points`, using the
/// same edge-ownership rule as the rasterizer on a fan triangulation.
pub fn hull_mask(points: &[[f64; 2]], h: usize, w: usize) -> Vec<bool> {
    let mut mask = vec![false; h * w];
    let hull = convex_hull(points);
    if hull.len() < 3 {
        return mask;
    }
    let topo = Topology {
        uv: vec![[0.0; 2]; hull.len()],
        triangles: (1..hull.len() as u32 - 1).map(|i| [0, i, i + 1]).collect(),
    };
    let cam = Camera { projection: Projection::Orthographic { scale: 1.0 }, height: h, width: w };
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let verts: Vec<[f64; 3]> = hull.iter().map(|p| [p[0] - cx, cy - p[1], 0.0]).collect();
    let r = rasterize(&verts, &topo, &cam);
    for (m, c) in mask.iter_mut().zip(r.coverage) {
        *m = c;
    }
    mask
}

/// Shared topology for tests and tools that build ad-hoc triangle soups.
pub fn soup(uv: Vec<[f64; 2]>, triangles: Vec<[u32; 3]>) -> Arc<Topology> {
    Arc::new(Topology { uv, triangles })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::face::{build_mesh, BlendshapeBasis, FaceParams, BETA_JAW};

    fn cam(n: usize) -> Camera {
        Camera::orthographic(n, n, 1.0).unwrap()
    }

    /// Vertex whose orthographic projection (scale 1) lands on screen `(sx, sy)`.
    fn at(c: &Camera, sx: f64, sy: f64, z: f64) -> [f64; 3] {
        [sx - c.width as f64 / 2.0, c.height as f64 / 2.0 - sy, z]
    }

    #[test]
    fn full_frame_triangle_interpolates_screen_uv() {
        let c = cam(16);
        let (w, h) = (16.0, 16.0);
        let pts = [(0.0, 0.0), (3.0 * w, 0.0), (0.0, 3.0 * h)];
        let verts: Vec<[f64; 3]> = pts.iter().map(|&(x, y)| at(&c, x, y, 0.0)).collect();
        let uv = pts.iter().map(|&(x, y)| [x / w, y / h]).collect();
        let topo = soup(uv, vec![[0, 1, 2]]);
        let m = rasterize(&verts, &topo, &c);
        assert_eq!(m.covered(), 256);
        for y in 0..16 {
            for x in 0..16 {
                let p = m.uv[y * 16 + x];
                assert!((p[0] - (x as f64 + 0.5) / w).abs() < 1e-6);
                assert!((p[1] - (y as f64 + 0.5) / h).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn empty_mesh_and_degenerates() {
        let c = cam(8);
        let m = rasterize(&[], &soup(vec![], vec![]), &c);
        assert_eq!(m.covered(), 0);
        let verts = vec![[0.0, 0.0, 0.0], [1.0, 1.0, 0.0], [2.0, 2.0, 0.0]];
        let m = rasterize(&verts, &soup(vec![[0.0; 2]; 3], vec![[0, 1, 2]]), &c);
        assert_eq!(m.degenerate, 1);
        assert_eq!(m.covered(), 0);
    }

    #[test]
    fn shared_edge_pixels_owned_once() {
        // a square split along its diagonal covers every pixel exactly once
        let c = cam(8);
        let verts = vec![at(&c, 1.0, 1.0, 0.0), at(&c, 7.0, 1.0, 0.0), at(&c, 7.0, 7.0, 0.0), at(&c, 1.0, 7.0, 0.0)];
        let topo = soup(vec![[0.0; 2]; 4], vec![[0, 1, 2], [0, 2, 3]]);
        let m = rasterize(&verts, &topo, &c);
        assert_eq!(m.covered(), 36);
        let one = rasterize(&verts, &soup(vec![[0.0; 2]; 4], vec![[0, 1, 2]]), &c).covered();
        let two = rasterize(&verts, &soup(vec![[0.0; 2]; 4], vec![[0, 2, 3]]), &c).covered();
        assert_eq!(one + two, 36);
    }

    #[test]
    fn nearest_triangle_wins() {
        let c = cam(8);
        let mut verts = vec![at(&c, 0.0, 0.0, 0.0), at(&c, 20.0, 0.0, 0.0), at(&c, 0.0, 20.0, 0.0)];
        verts.extend([at(&c, 0.0, 0.0, 1.0), at(&c, 20.0, 0.0, 1.0), at(&c, 0.0, 20.0, 1.0)]);
        let uv = vec![[0.0, 0.0], [0.0, 0.0], [0.0, 0.0], [1.0, 1.0], [1.0, 1.0], [1.0, 1.0]];
        let m = rasterize(&verts, &soup(uv, vec![[0, 1, 2], [3, 4, 5]]), &c);
        assert!(m.triangle.iter().all(|&t| t == 1));
        assert!(m.uv.iter().all(|p| (p[0] - 1.0).abs() < 1e-12));
    }

    #[test]
    fn sampling_contracts() {
        let c = cam(8);
        let pts = [(0.0, 0.0), (24.0, 0.0), (0.0, 24.0)];
        let verts: Vec<[f64; 3]> = pts.iter().map(|&(x, y)| at(&c, x, y, 0.0)).collect();
        let uv = pts.iter().map(|&(x, y)| [x / 8.0, 1.0 - y / 8.0]).collect();
        let m = rasterize(&verts, &soup(uv, vec![[0, 1, 2]]), &c);
        // constant texture
        let out = sample_texture(&vec![0.3f64; 2 * 4 * 4], 2, 4, 4, &m).unwrap();
        assert!(out.iter().all(|v| (v - 0.3).abs() < 1e-12));
        // pixel centers coincide with texel centers of an 8x8 texture
        let tex: Vec<f64> = (0..64).map(|i| i as f64).collect();
        let out = sample_texture(&tex, 1, 8, 8, &m).unwrap();
        assert!(out.iter().zip(&tex).all(|(a, b)| (a - b).abs() < 1e-9));
        // exact texel-center lookups reproduce texels bitwise
        let mut m = m.clone();
        for y in 0..8 {
            for x in 0..8 {
                m.uv[y * 8 + x] = [(x as f64 + 0.5) / 8.0, 1.0 - (y as f64 + 0.5) / 8.0];
                m.coverage[y * 8 + x] = true;
            }
        }
        assert_eq!(sample_texture(&tex, 1, 8, 8, &m).unwrap(), tex);
    }

    #[test]
    fn uncovered_pixels_sample_zero() {
        let c = cam(8);
        let verts = vec![at(&c, 0.0, 0.0, 0.0), at(&c, 4.0, 0.0, 0.0), at(&c, 0.0, 4.0, 0.0)];
        let m = rasterize(&verts, &soup(vec![[0.5; 2]; 3], vec![[0, 1, 2]]), &c);
        let out = sample_texture(&vec![1.0f64; 16], 1, 4, 4, &m).unwrap();
        for (v, cov) in out.iter().zip(&m.coverage) {
            assert_eq!(*v, if *cov { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn perspective_camera_projects_center() {
        let c = Camera::new(Projection::Pinhole { focal: 50.0, distance: 5.0 }, 16, 16).unwrap();
        assert_eq!(c.project([0.0, 0.0, 0.0]), [8.0, 8.0, 5.0]);
        assert!(Camera::orthographic(4, 16, 1.0).is_err());
    }

    #[test]
    fn hull_and_region_masks() {
        assert!(hull_mask(&[], 8, 8).iter().all(|m| !m));
        let sq = [[2.0, 2.0], [6.0, 2.0], [6.0, 6.0], [2.0, 6.0], [4.0, 4.0]];
        assert_eq!(hull_mask(&sq, 8, 8).iter().filter(|m| **m).count(), 16);

        let b = BlendshapeBasis::build(7, 441).unwrap();
        let cam = Camera::default_for(64, 64).unwrap();
        let closed = build_mesh(&b, &FaceParams::default()).unwrap();
        let teeth = Region::Teeth(b.teeth_anchor_ids.clone());
        let area = |m: &Vec<bool>| m.iter().filter(|x| **x).count();
        assert!(area(&project_region_mask(&closed, &cam, &teeth)) <= 4);
        let mut beta = vec![0.0; 64];
        beta[BETA_JAW] = 1.0;
        let open = build_mesh(&b, &FaceParams::with_beta(&beta)).unwrap();
        assert!(area(&project_region_mask(&open, &cam, &teeth)) > 10);
        let face = project_region_mask(&open, &cam, &Region::Face);
        let cov = rasterize_uv(&open, &cam).coverage;
        assert!(face.iter().zip(&cov).all(|(f, c)| *f || !*c));
        assert!(project_region_mask(&open, &cam, &Region::Hull(vec![])).iter().all(|m| !m));
    }
}
