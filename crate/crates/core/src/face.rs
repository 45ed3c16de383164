//! Synthetic parametric face: a grid-sampled ellipsoid patch with a 64-channel
//! blendshape basis, dlib-ordered landmarks, and a procedural ground-truth
//! appearance whose expression signal lives only in texture.

use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

#[allow(unused_imports)]
use num_traits::Float;

use crate::ciec::ExpressionType;
use crate::rng::{derive, normal, uniform};
use crate::{shape_err_fmt, Error, Result, Tensor};

pub const N_ALPHA: usize = 80;
pub const N_BETA: usize = 64;
pub const N_DELTA: usize = 80;
pub const N_GAMMA: usize = 27;

/// Semantic expression channels.
pub const BETA_JAW: usize = 0;
pub const BETA_SMILE: usize = 1;
pub const BETA_BROW: usize = 2;

pub const DEFAULT_VERTICES: usize = 441;

/// Coefficients mirroring the 3DMM decomposition. Only `beta` and `pose`
/// affect geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceParams {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub delta: Vec<f64>,
    pub gamma: Vec<f64>,
    /// Euler angles (x, y, z) in radians, then translation.
    pub pose: [f64; 6],
}

impl Default for FaceParams {
    fn default() -> Self {
        Self {
            alpha: vec![0.0; N_ALPHA],
            beta: vec![0.0; N_BETA],
            delta: vec![0.0; N_DELTA],
            gamma: vec![0.0; N_GAMMA],
            pose: [0.0; 6],
        }
    }
}

impl FaceParams {
    pub fn with_beta(beta: &[f64]) -> Self {
        Self { beta: beta.to_vec(), ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let lens = [
            ("alpha", self.alpha.len(), N_ALPHA),
            ("beta", self.beta.len(), N_BETA),
            ("delta", self.delta.len(), N_DELTA),
            ("gamma", self.gamma.len(), N_GAMMA),
        ];
        for (name, got, want) in lens {
            if got != want {
                return Err(shape_err_fmt!("{} has length {}, expected {}", name, got, want));
            }
        }
        let all = self.alpha.iter().chain(&self.beta).chain(&self.delta).chain(&self.gamma);
        if all.chain(&self.pose).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("face parameters".into()));
        }
        Ok(())
    }
}

/// Connectivity and UV layout shared by every mesh of a basis.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    pub uv: Vec<[f64; 2]>,
    pub triangles: Vec<[u32; 3]>,
}

impl Topology {
    pub fn vertex_count(&self) -> usize {
        self.uv.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlendshapeBasis {
    pub topology: Arc<Topology>,
    pub base_vertices: Vec<[f64; 3]>,
    /// `64 x V x 3`, row-major.
    pub expression_basis: Vec<f64>,
    pub mouth_landmark_ids: Vec<u32>,
    pub face_landmark_ids: Vec<u32>,
    pub teeth_anchor_ids: Vec<u32>,
    grid: usize,
}

/// Grid layout of landmark and mouth features, in (column, row) units with
/// rows counted upward from the chin.
struct Layout {
    n: usize,
    ic: i64,
    jm: i64,
}

impl Layout {
    fn new(n: usize) -> Self {
        let s = |x: f64| (x * (n - 1) as f64 / 20.0).round() as i64;
        Self { n, ic: s(10.0), jm: s(6.0) }
    }

    fn id(&self, i: i64, j: i64) -> u32 {
        let n = self.n as i64;
        (j.clamp(0, n - 1) * n + i.clamp(0, n - 1)) as u32
    }

    fn scaled(&self, x: f64) -> i64 {
        (x * (self.n - 1) as f64 / 20.0).round() as i64
    }

    fn outer_lip(&self) -> [(i64, i64); 12] {
        let (c, m) = (self.ic, self.jm);
        [
            (c - 3, m),
            (c - 2, m + 1),
            (c - 1, m + 2),
            (c, m + 2),
            (c + 1, m + 2),
            (c + 2, m + 1),
            (c + 3, m),
            (c + 2, m - 1),
            (c + 1, m - 2),
            (c, m - 2),
            (c - 1, m - 2),
            (c - 2, m - 1),
        ]
    }

    /// Inner lip in dlib order (60..68): left corner, upper row, right
    /// corner, lower row.
    fn inner_lip(&self) -> [(i64, i64); 8] {
        let (c, m) = (self.ic, self.jm);
        [
            (c - 2, m),
            (c - 1, m + 1),
            (c, m + 1),
            (c + 1, m + 1),
            (c + 2, m),
            (c + 1, m - 1),
            (c, m - 1),
            (c - 1, m - 1),
        ]
    }

    fn landmarks(&self) -> Vec<(i64, i64)> {
        let mut pts = Vec::with_capacity(68);
        let half = (self.n - 1) as f64 / 2.0;
        let r = 0.9 * half;
        for k in 0..17 {
            let a = PI + PI * k as f64 / 16.0;
            pts.push(((half + r * a.cos()).round() as i64, (half + r * a.sin()).round() as i64));
        }
        let s = |x: f64| self.scaled(x);
        let brow = s(16.0);
        for x in [3.0, 4.0, 5.0, 6.0, 7.0, 13.0, 14.0, 15.0, 16.0, 17.0] {
            pts.push((s(x), brow));
        }
        for y in [15.0, 14.0, 13.0, 12.0] {
            pts.push((s(10.0), s(y)));
        }
        for x in [8.0, 9.0, 10.0, 11.0, 12.0] {
            pts.push((s(x), s(11.0)));
        }
        for cx in [6.0, 14.0] {
            let (l, r, y) = (s(cx - 2.0), s(cx + 2.0), s(14.0));
            let (a, b) = (s(cx - 1.0), s(cx + 1.0));
            pts.extend([(l, y), (a, y + 1), (b, y + 1), (r, y), (b, y - 1), (a, y - 1)]);
        }
        pts.extend(self.outer_lip());
        pts.extend(self.inner_lip());
        pts
    }

    fn teeth_anchors(&self) -> [(i64, i64); 4] {
        let (c, m) = (self.ic, self.jm);
        [(c - 2, m), (c, m + 1), (c + 2, m), (c, m - 1)]
    }
}

fn point_in_polygon(p: (f64, f64), poly: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > p.1) != (yj > p.1) && p.0 < (xj - xi) * (p.1 - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// Compactly supported bump `(1 - r^2)^2` for `r < 1`, exactly zero beyond.
fn bump(r2: f64) -> f64 {
    if r2 >= 1.0 {
        0.0
    } else {
        (1.0 - r2) * (1.0 - r2)
    }
}

impl BlendshapeBasis {
    /// Builds the face for `v = n * n` vertices.
    pub fn build(seed: u64, v: usize) -> Result<Self> {
        let n = (v as f64).sqrt().round() as usize;
        if n * n != v || n < 11 {
            return Err(shape_err_fmt!("vertex count {} is not a square grid of side >= 11", v));
        }
        let lay = Layout::new(n);
        let step = 1.0 / (n - 1) as f64;
        let grid = |i: i64, j: i64| (i as f64, j as f64);

        let mut uv = Vec::with_capacity(v);
        let mut base = Vec::with_capacity(v);
        for j in 0..n {
            for i in 0..n {
                let (u, w) = (i as f64 * step, j as f64 * step);
                uv.push([u, w]);
                let (xn, yn) = (2.0 * u - 1.0, 2.0 * w - 1.0);
                let z = 0.6 * (1.0 - 0.45 * (xn * xn + yn * yn)).max(0.0).sqrt();
                base.push([0.8 * xn, yn, z]);
            }
        }
        // closed mouth: inner lips meet on the mouth line
        let y_mouth = base[lay.id(lay.ic, lay.jm) as usize][1];
        for i in lay.ic - 1..=lay.ic + 1 {
            for j in [lay.jm - 1, lay.jm + 1] {
                base[lay.id(i, j) as usize][1] = y_mouth;
            }
        }

        let inner: Vec<(f64, f64)> = lay.inner_lip().iter().map(|&(i, j)| grid(i, j)).collect();
        let mut triangles = Vec::with_capacity(2 * (n - 1) * (n - 1));
        for j in 0..n as i64 - 1 {
            for i in 0..n as i64 - 1 {
                let quad = [
                    [(i, j), (i + 1, j), (i + 1, j + 1)],
                    [(i, j), (i + 1, j + 1), (i, j + 1)],
                ];
                for t in quad {
                    let cx = t.iter().map(|p| p.0 as f64).sum::<f64>() / 3.0;
                    let cy = t.iter().map(|p| p.1 as f64).sum::<f64>() / 3.0;
                    if !point_in_polygon((cx, cy), &inner) {
                        triangles.push(t.map(|(a, b)| lay.id(a, b)));
                    }
                }
            }
        }

        let mut basis = vec![0.0; N_BETA * v * 3];
        let (ic, jm) = (lay.ic as f64, lay.jm as f64);
        let span = (n - 1) as f64 / 20.0;
        for j in 0..n {
            for i in 0..n {
                let (x, y) = (i as f64, j as f64);
                let vi = j * n + i;
                // jaw open: everything below the mouth line drops
                let below = ((jm - y) / span).clamp(0.0, 1.0);
                let falloff = (-((x - ic) / (6.0 * span)).powi(2)).exp();
                basis[(BETA_JAW * v + vi) * 3 + 1] = -0.2 * below * falloff;
                // mouth corners raise
                let mut corner = 0.0;
                for cx in [ic - 3.0 * span, ic + 3.0 * span] {
                    let d2 = ((x - cx).powi(2) + (y - jm).powi(2)) / (span * span);
                    corner += (-d2 / 4.0).exp();
                }
                basis[(BETA_SMILE * v + vi) * 3 + 1] = 0.06 * corner;
                // brows: compact support well away from the mouth
                let mut brow = 0.0;
                for cx in [5.0, 15.0] {
                    let (dx, dy) = (x / span - cx, y / span - 16.0);
                    brow += bump((dx * dx + dy * dy) / 9.0);
                }
                basis[(BETA_BROW * v + vi) * 3 + 1] = 0.1 * brow;
            }
        }
        for k in 3..N_BETA {
            let mut rng = derive(seed, 0xB451_5000 + k as u64);
            let amp = 0.2 / (k + 1) as f64;
            for c in 0..3 {
                let terms: Vec<[f64; 4]> = (0..3)
                    .map(|_| {
                        [
                            normal(&mut rng) / 3.0,
                            uniform(&mut rng, 0.5, 2.5),
                            uniform(&mut rng, 0.5, 2.5),
                            uniform(&mut rng, 0.0, 2.0 * PI),
                        ]
                    })
                    .collect();
                for (vi, p) in uv.iter().enumerate() {
                    let f: f64 = terms
                        .iter()
                        .map(|t| t[0] * (PI * (t[1] * p[0] + t[2] * p[1]) + t[3]).sin())
                        .sum();
                    basis[(k * v + vi) * 3 + c] = amp * f;
                }
            }
        }

        let face_landmark_ids: Vec<u32> =
            lay.landmarks().into_iter().map(|(i, j)| lay.id(i, j)).collect();
        let mouth_landmark_ids = face_landmark_ids[48..68].to_vec();
        let teeth_anchor_ids = lay.teeth_anchors().iter().map(|&(i, j)| lay.id(i, j)).collect();
        Ok(Self {
            topology: Arc::new(Topology { uv, triangles }),
            base_vertices: base,
            expression_basis: basis,
            mouth_landmark_ids,
            face_landmark_ids,
            teeth_anchor_ids,
            grid: n,
        })
    }

    pub fn vertex_count(&self) -> usize {
        self.base_vertices.len()
    }

    pub fn grid_side(&self) -> usize {
        self.grid
    }

    /// Displacement field of one coefficient, `V x 3` flattened.
    pub fn channel(&self, k: usize) -> &[f64] {
        let n = self.vertex_count() * 3;
        &self.expression_basis[k * n..(k + 1) * n]
    }

    /// `base + sum_k beta_k * basis[k]`, before pose. Coefficients are clamped
    /// to `[-3, 3]`.
    pub fn deform(&self, beta: &[f64]) -> Vec<[f64; 3]> {
        let mut out = self.base_vertices.clone();
        for (k, &b) in beta.iter().enumerate().take(N_BETA) {
            let b = b.clamp(-3.0, 3.0);
            if b == 0.0 {
                continue;
            }
            for (v, d) in out.iter_mut().zip(self.channel(k).chunks_exact(3)) {
                v[0] += b * d[0];
                v[1] += b * d[1];
                v[2] += b * d[2];
            }
        }
        out
    }

    /// Rows of the basis restricted to `ids`: a `64 x (3 * ids.len())` matrix.
    pub fn gather_rows(&self, ids: &[u32]) -> Vec<f64> {
        let mut m = Vec::with_capacity(N_BETA * ids.len() * 3);
        for k in 0..N_BETA {
            let ch = self.channel(k);
            for &id in ids {
                m.extend_from_slice(&ch[id as usize * 3..id as usize * 3 + 3]);
            }
        }
        m
    }

    /// Distance between the outer mouth corners of the neutral face.
    pub fn mouth_width(&self) -> f64 {
        let a = self.base_vertices[self.mouth_landmark_ids[0] as usize];
        let b = self.base_vertices[self.mouth_landmark_ids[6] as usize];
        dist3(a, b)
    }
}

pub fn dist3(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Posed geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    pub topology: Arc<Topology>,
    pub vertices: Vec<[f64; 3]>,
    pub normals: Vec<[f64; 3]>,
}

impl Mesh {
    /// Wraps raw vertices, computing area-weighted vertex normals.
    pub fn new(topology: Arc<Topology>, vertices: Vec<[f64; 3]>) -> Result<Self> {
        if vertices.len() != topology.vertex_count() {
            return Err(shape_err_fmt!(
                "{} vertices for a topology of {}",
                vertices.len(),
                topology.vertex_count()
            ));
        }
        if vertices.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("mesh vertices".into()));
        }
        let normals = vertex_normals(&vertices, &topology.triangles);
        Ok(Self { topology, vertices, normals })
    }

    pub fn gather(&self, ids: &[u32]) -> Vec<[f64; 3]> {
        ids.iter().map(|&i| self.vertices[i as usize]).collect()
    }
}

fn vertex_normals(vs: &[[f64; 3]], tris: &[[u32; 3]]) -> Vec<[f64; 3]> {
    let mut acc = vec![[0.0f64; 3]; vs.len()];
    for t in tris {
        let [a, b, c] = t.map(|i| vs[i as usize]);
        let e1 = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
        let e2 = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
        let n = [
            e1[1] * e2[2] - e1[2] * e2[1],
            e1[2] * e2[0] - e1[0] * e2[2],
            e1[0] * e2[1] - e1[1] * e2[0],
        ];
        for &i in t {
            for c in 0..3 {
                acc[i as usize][c] += n[c];
            }
        }
    }
    acc.into_iter()
        .map(|n| {
            let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
            if len > 1e-300 {
                [n[0] / len, n[1] / len, n[2] / len]
            } else {
                [0.0, 0.0, 1.0]
            }
        })
        .collect()
}

fn rotation(rx: f64, ry: f64, rz: f64) -> [[f64; 3]; 3] {
    let (sx, cx) = rx.sin_cos();
    let (sy, cy) = ry.sin_cos();
    let (sz, cz) = rz.sin_cos();
    // Rz * Ry * Rx
    [
        [cz * cy, cz * sy * sx - sz * cx, cz * sy * cx + sz * sx],
        [sz * cy, sz * sy * sx + cz * cx, sz * sy * cx - cz * sx],
        [-sy, cy * sx, cy * cx],
    ]
}

/// Applies the expression blendshapes and then the rigid pose.
pub fn build_mesh(basis: &BlendshapeBasis, params: &FaceParams) -> Result<Mesh> {
    params.validate()?;
    let mut vs = basis.deform(&params.beta);
    let p = params.pose;
    if p != [0.0; 6] {
        let r = rotation(p[0], p[1], p[2]);
        for v in &mut vs {
            let q = *v;
            for (row, out) in r.iter().zip(v.iter_mut()) {
                *out = row[0] * q[0] + row[1] * q[1] + row[2] * q[2];
            }
            v[0] += p[3];
            v[1] += p[4];
            v[2] += p[5];
        }
    }
    Mesh::new(basis.topology.clone(), vs)
}

pub fn mouth_landmarks(mesh: &Mesh, basis: &BlendshapeBasis) -> Vec<[f64; 3]> {
    mesh.gather(&basis.mouth_landmark_ids)
}

pub fn face_landmarks(mesh: &Mesh, basis: &BlendshapeBasis) -> Vec<[f64; 3]> {
    mesh.gather(&basis.face_landmark_ids)
}

/// Per-vertex loss weights: 3 at the 68 facial landmarks, 1 elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct VertexWeights {
    pub w: Vec<f64>,
}

impl VertexWeights {
    pub fn new(basis: &BlendshapeBasis) -> Self {
        let mut w = vec![1.0; basis.vertex_count()];
        for &i in &basis.face_landmark_ids {
            w[i as usize] = 3.0;
        }
        Self { w }
    }
}

// ---------------------------------------------------------------------------
// Ground-truth appearance

/// Period of the grid in UV space; expression patterns vanish on it so that
/// per-vertex colors carry no expression signal.
const PATTERN_FREQ: f64 = 20.0 * PI;

struct Pattern {
    color: [f64; 3],
    center: (f64, f64),
    radius: f64,
    fu: f64,
    fv: f64,
}

fn pattern(ty: ExpressionType) -> Option<Pattern> {
    use ExpressionType::*;
    let p = |color, center, radius, fu, fv| Pattern { color, center, radius, fu, fv };
    Some(match ty {
        Neutral => return None,
        Angry => p([0.30, -0.12, -0.12], (0.5, 0.78), 0.45, 0.0, 1.0),
        Contempt => p([0.15, 0.15, -0.20], (0.7, 0.45), 0.40, 1.0, 1.0),
        Disgusted => p([-0.10, 0.25, -0.10], (0.5, 0.55), 0.40, 2.0, 0.0),
        Fear => p([-0.18, -0.18, 0.25], (0.5, 0.80), 0.50, 0.0, 2.0),
        Happy => p([0.30, 0.05, 0.10], (0.5, 0.40), 0.50, 1.0, 2.0),
        Sad => p([-0.15, -0.10, 0.20], (0.5, 0.60), 0.45, 2.0, 1.0),
        Surprised => p([0.22, 0.22, 0.22], (0.5, 0.70), 0.50, 1.0, 0.0),
    })
}

fn neutral_color(u: f64, v: f64) -> [f64; 3] {
    let shade = 0.06 * (PI * (u - 0.5)).cos() + 0.04 * (PI * v).sin();
    let mut c = [0.74 + shade, 0.56 + shade, 0.46 + shade];
    // lips
    let (du, dv) = ((u - 0.5) / 0.16, (v - 0.3) / 0.09);
    let lip = (-(du * du + dv * dv)).exp();
    c[0] += 0.10 * lip;
    c[1] -= 0.18 * lip;
    c[2] -= 0.14 * lip;
    // eye sockets
    for cx in [0.3, 0.7] {
        let (du, dv) = ((u - cx) / 0.09, (v - 0.7) / 0.05);
        let e = (-(du * du + dv * dv)).exp();
        for ch in &mut c {
            *ch -= 0.25 * e;
        }
    }
    c
}

/// Ground-truth color at a UV position.
pub fn appearance_at(ty: ExpressionType, intensity: f64, u: f64, v: f64) -> [f64; 3] {
    let mut c = neutral_color(u, v);
    if let Some(p) = pattern(ty) {
        let (du, dv) = (u - p.center.0, v - p.center.1);
        let win = (-(du * du + dv * dv) / (p.radius * p.radius)).exp();
        let mut s = 1.0;
        if p.fu > 0.0 {
            s *= (PATTERN_FREQ * p.fu * u).sin();
        }
        if p.fv > 0.0 {
            s *= (PATTERN_FREQ * p.fv * v).sin();
        }
        for (ch, col) in c.iter_mut().zip(p.color) {
            *ch += intensity * col * win * s;
        }
    }
    c.map(|x| x.clamp(0.0, 1.0))
}

/// Texel-center position `(u, v)` of texel `(x, y)` in an `h x w` texture.
pub fn texel_uv(x: usize, y: usize, h: usize, w: usize) -> (f64, f64) {
    ((x as f64 + 0.5) / w as f64, 1.0 - (y as f64 + 0.5) / h as f64)
}

/// Procedural ground-truth texture, `3 x h x w`, values in `[0, 1]`.
pub fn ground_truth_appearance(
    ty: ExpressionType,
    intensity: f64,
    h: usize,
    w: usize,
) -> Result<Tensor<f32>> {
    if !(0.0..=1.0).contains(&intensity) {
        return Err(Error::Config(format!("intensity {intensity} outside [0, 1]")));
    }
    let mut data = vec![0.0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let (u, v) = texel_uv(x, y, h, w);
            let c = appearance_at(ty, intensity, u, v);
            for ch in 0..3 {
                data[(ch * h + y) * w + x] = c[ch] as f32;
            }
        }
    }
    Tensor::from_vec(&[3, h, w], data)
}

/// Per-vertex colors from the appearance evaluated at vertex UVs.
pub fn vertex_colors(topology: &Topology, ty: ExpressionType, intensity: f64) -> Vec<[f64; 3]> {
    topology.uv.iter().map(|p| appearance_at(ty, intensity, p[0], p[1])).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ciec::ExpressionType::*;

    fn basis() -> BlendshapeBasis {
        BlendshapeBasis::build(7, DEFAULT_VERTICES).unwrap()
    }

    #[test]
    fn basis_contract() {
        let b = basis();
        assert_eq!(b.vertex_count(), 441);
        assert_eq!(b.expression_basis.len(), 64 * 441 * 3);
        let us: Vec<f64> = b.topology.uv.iter().flat_map(|p| [p[0], p[1]]).collect();
        assert_eq!(us.iter().cloned().fold(f64::INFINITY, f64::min), 0.0);
        assert_eq!(us.iter().cloned().fold(f64::NEG_INFINITY, f64::max), 1.0);
        assert!(b.topology.triangles.iter().flatten().all(|&i| (i as usize) < 441));
        assert_eq!(b.face_landmark_ids.len(), 68);
        assert_eq!(b.mouth_landmark_ids.len(), 20);
        let mut ids = b.face_landmark_ids.clone();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 68, "landmark ids must be distinct");
        // mouth ids lie in the lower-middle mouth region of UV space
        for &i in &b.mouth_landmark_ids {
            let [u, v] = b.topology.uv[i as usize];
            assert!((0.3..=0.7).contains(&u) && (0.15..=0.45).contains(&v), "{u} {v}");
        }
        assert!(b.topology.triangles.len() < 800, "mouth hole removes triangles");
    }

    #[test]
    fn rejects_non_square() {
        assert!(BlendshapeBasis::build(7, 440).is_err());
    }

    #[test]
    fn deterministic_and_seed_dependent() {
        assert_eq!(basis(), basis());
        let other = BlendshapeBasis::build(8, DEFAULT_VERTICES).unwrap();
        let d: f64 = basis()
            .expression_basis
            .iter()
            .zip(&other.expression_basis)
            .map(|(a, b)| (a - b).powi(2))
            .sum();
        assert!(d > 0.0);
    }

    #[test]
    fn zero_params_give_base_mesh() {
        let b = basis();
        let m = build_mesh(&b, &FaceParams::default()).unwrap();
        assert_eq!(m.vertices, b.base_vertices);
        for n in &m.normals {
            let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
            assert!((len - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn jaw_open_moves_mouth_down() {
        let b = basis();
        let closed = build_mesh(&b, &FaceParams::default()).unwrap();
        let mut beta = vec![0.0; 64];
        beta[BETA_JAW] = 1.0;
        let open = build_mesh(&b, &FaceParams::with_beta(&beta)).unwrap();
        let cy = |m: &Mesh| mouth_landmarks(m, &b).iter().map(|p| p[1]).sum::<f64>() / 20.0;
        assert!(cy(&open) < cy(&closed));
    }

    #[test]
    fn brow_channel_has_no_mouth_support() {
        let b = basis();
        let brow = b.channel(BETA_BROW);
        for &i in &b.mouth_landmark_ids {
            assert_eq!(&brow[i as usize * 3..i as usize * 3 + 3], &[0.0, 0.0, 0.0]);
        }
        assert!(brow.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn pure_translation_moves_landmarks() {
        let b = basis();
        let base = build_mesh(&b, &FaceParams::default()).unwrap();
        let mut p = FaceParams::default();
        p.pose = [0.0, 0.0, 0.0, 0.25, -0.5, 1.0];
        let moved = build_mesh(&b, &p).unwrap();
        for (a, c) in face_landmarks(&base, &b).iter().zip(face_landmarks(&moved, &b)) {
            assert!((c[0] - a[0] - 0.25).abs() < 1e-12);
            assert!((c[1] - a[1] + 0.5).abs() < 1e-12);
            assert!((c[2] - a[2] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn nan_params_rejected() {
        let mut p = FaceParams::default();
        p.beta[3] = f64::NAN;
        assert!(build_mesh(&basis(), &p).is_err());
    }

    #[test]
    fn vertex_weights_have_68_threes() {
        let w = VertexWeights::new(&basis());
        assert_eq!(w.w.iter().filter(|v| **v == 3.0).count(), 68);
    }

    #[test]
    fn appearance_contracts() {
        let n = ground_truth_appearance(Neutral, 0.0, 64, 64).unwrap();
        for ty in ExpressionType::EXPRESSIVE {
            assert_eq!(ground_truth_appearance(ty, 0.0, 64, 64).unwrap(), n);
        }
        let l1 = |a: &Tensor<f32>, b: &Tensor<f32>| -> f64 {
            a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs() as f64).sum()
        };
        let h = |t| ground_truth_appearance(Happy, t, 64, 64).unwrap();
        let (a, b, c) = (h(0.33), h(0.67), h(1.0));
        assert!(l1(&a, &b) > 0.0 && l1(&a, &b) < l1(&a, &c));
        let s = ground_truth_appearance(Sad, 1.0, 64, 64).unwrap();
        assert!(l1(&c, &s) > 0.01 * 64.0 * 64.0);
        assert!(ground_truth_appearance(Happy, 1.5, 8, 8).is_err());
    }

    #[test]
    fn vertex_colors_carry_no_expression() {
        let b = basis();
        let n = vertex_colors(&b.topology, Neutral, 0.0);
        for ty in ExpressionType::EXPRESSIVE {
            let c = vertex_colors(&b.topology, ty, 1.0);
            for (x, y) in c.iter().zip(&n) {
                for k in 0..3 {
                    assert!((x[k] - y[k]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn appearance_is_lipschitz_in_intensity() {
        for ty in ExpressionType::EXPRESSIVE {
            for i in 0..50 {
                let (u, v) = (0.013 + 0.019 * i as f64, 0.97 - 0.018 * i as f64);
                let a = appearance_at(ty, 0.4, u, v);
                let b = appearance_at(ty, 0.45, u, v);
                for k in 0..3 {
                    assert!((a[k] - b[k]).abs() <= 2.0 * 0.05 + 1e-12);
                }
            }
        }
    }
}
