//! UV-mapped deformable mesh, UV position maps, positional encoding and
//! pinhole cameras.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Rotation3, Vector2, Vector3};

use crate::error::{ensure, Error, Result};
use crate::uv_field::FeatureMap;

pub type Vec3 = Vector3<f64>;

/// Expression coefficients; the default dimension mirrors 100 expression,
/// 3 jaw and 6 eye parameters.
pub const DEFAULT_EXPRESSION_DIM: usize = 109;

#[derive(Clone, Debug, PartialEq)]
pub struct ExpressionVector(pub Vec<f64>);

impl ExpressionVector {
    pub fn zeros(dim: usize) -> Self {
        ExpressionVector(vec![0.0; dim])
    }

    pub fn one_hot(dim: usize, k: usize) -> Self {
        let mut v = vec![0.0; dim];
        v[k] = 1.0;
        ExpressionVector(v)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

/// Triangle mesh with a non-overlapping UV layout and linear blendshapes.
#[derive(Clone, Debug, PartialEq)]
pub struct Mesh {
    vertices: Vec<Vec3>,
    faces: Vec<[u32; 3]>,
    uvs: Vec<Vector2<f64>>,
    blendshapes: Vec<Vec<Vec3>>,
}

/// Resolution of the coverage grid used to detect overlapping UV triangles.
const OVERLAP_CHECK_RESOLUTION: usize = 1024;

impl Mesh {
    pub fn new(
        vertices: Vec<Vec3>,
        faces: Vec<[u32; 3]>,
        uvs: Vec<Vector2<f64>>,
        blendshapes: Vec<Vec<Vec3>>,
    ) -> Result<Self> {
        let n = vertices.len();
        ensure!(uvs.len() == n, Mesh, "{} uvs for {} vertices", uvs.len(), n);
        ensure!(
            vertices.iter().all(|v| v.iter().all(|c| c.is_finite())),
            Mesh,
            "non-finite vertex position"
        );
        for (k, shape) in blendshapes.iter().enumerate() {
            ensure!(
                shape.len() == n,
                Mesh,
                "blendshape {k} has {} offsets for {} vertices",
                shape.len(),
                n
            );
        }
        for (i, uv) in uvs.iter().enumerate() {
            ensure!(
                (0.0..=1.0).contains(&uv.x) && (0.0..=1.0).contains(&uv.y),
                Mesh,
                "uv {i} = ({}, {}) outside the unit square",
                uv.x,
                uv.y
            );
        }
        for (f, face) in faces.iter().enumerate() {
            ensure!(
                face.iter().all(|&i| (i as usize) < n),
                Mesh,
                "face {f} references a vertex out of range"
            );
            let [a, b, c] = face.map(|i| uvs[i as usize]);
            let area = 0.5 * ((b - a).perp(&(c - a))).abs();
            ensure!(area > 1e-12, Mesh, "face {f} has a degenerate uv triangle");
        }
        let mesh = Mesh {
            vertices,
            faces,
            uvs,
            blendshapes,
        };
        let coverage = UvRaster::coverage_counts(&mesh, OVERLAP_CHECK_RESOLUTION);
        ensure!(
            coverage.iter().all(|&c| c <= 1),
            Mesh,
            "uv triangles overlap"
        );
        Ok(mesh)
    }

    pub fn empty() -> Self {
        Mesh {
            vertices: Vec::new(),
            faces: Vec::new(),
            uvs: Vec::new(),
            blendshapes: Vec::new(),
        }
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[u32; 3]] {
        &self.faces
    }

    pub fn uvs(&self) -> &[Vector2<f64>] {
        &self.uvs
    }

    pub fn blendshapes(&self) -> &[Vec<Vec3>] {
        &self.blendshapes
    }

    pub fn blendshape_count(&self) -> usize {
        self.blendshapes.len()
    }

    pub fn bounding_box(&self) -> (Vec3, Vec3) {
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for v in &self.vertices {
            lo = lo.inf(v);
            hi = hi.sup(v);
        }
        (lo, hi)
    }

    pub fn bbox_center(&self) -> Vec3 {
        if self.vertices.is_empty() {
            return Vec3::zeros();
        }
        let (lo, hi) = self.bounding_box();
        (lo + hi) * 0.5
    }

    /// Rest-pose bounding sphere centered on the bounding-box center.
    pub fn bounding_sphere(&self) -> (Vec3, f64) {
        let c = self.bbox_center();
        let r = self
            .vertices
            .iter()
            .map(|v| (v - c).norm())
            .fold(0.0, f64::max);
        (c, if r > 0.0 { r } else { 1.0 })
    }

    /// `rest + sum_k expr_k * blendshape_k`; coefficients past the last
    /// blendshape are ignored.
    pub fn deform(&self, expr: &ExpressionVector) -> Vec<Vec3> {
        let mut out = self.vertices.clone();
        for (shape, &w) in self.blendshapes.iter().zip(expr.values()) {
            if w == 0.0 {
                continue;
            }
            for (v, d) in out.iter_mut().zip(shape) {
                *v += d * w;
            }
        }
        out
    }

    /// Loads positions, uvs and triangles from a Wavefront OBJ file plus an
    /// optional blendshape sidecar (see [`read_blendshapes`]).
    ///
    /// Vertex order is preserved so sidecar offsets line up; every face
    /// corner must use the same index for `v` and `vt`. Polygons are
    /// fan-triangulated.
    pub fn load(obj: &Path, blendshapes: Option<&Path>) -> Result<Self> {
        let text = fs::read_to_string(obj).map_err(|e| Error::io(obj, e))?;
        let bad = |line: usize, what: &str| Error::Mesh(format!("{}:{line}: {what}", obj.display()));
        let mut vertices = Vec::new();
        let mut uvs = Vec::new();
        let mut faces = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let mut it = line.split_whitespace();
            let parse = |it: &mut std::str::SplitWhitespace, k: usize| -> Result<Vec<f64>> {
                let v: Vec<f64> = it
                    .take(k)
                    .map(|t| t.parse::<f64>().map_err(|_| bad(n + 1, "bad number")))
                    .collect::<Result<_>>()?;
                ensure!(v.len() == k, Mesh, "{}:{}: expected {k} values", obj.display(), n + 1);
                Ok(v)
            };
            match it.next() {
                Some("v") => {
                    let p = parse(&mut it, 3)?;
                    vertices.push(Vec3::new(p[0], p[1], p[2]));
                }
                Some("vt") => {
                    let t = parse(&mut it, 2)?;
                    uvs.push(Vector2::new(t[0], t[1]));
                }
                Some("f") => {
                    let corners = it
                        .map(|c| {
                            let mut parts = c.split('/');
                            let v = parts.next().and_then(|t| t.parse::<u32>().ok());
                            let t = parts.next().and_then(|t| t.parse::<u32>().ok());
                            match (v, t) {
                                (Some(v), Some(t)) if v == t && v >= 1 => Ok(v - 1),
                                _ => Err(bad(n + 1, "face corners must be v/vt with matching indices")),
                            }
                        })
                        .collect::<Result<Vec<u32>>>()?;
                    ensure!(corners.len() >= 3, Mesh, "{}:{}: face needs 3 corners", obj.display(), n + 1);
                    for k in 1..corners.len() - 1 {
                        faces.push([corners[0], corners[k], corners[k + 1]]);
                    }
                }
                _ => {}
            }
        }
        let shapes = match blendshapes {
            Some(path) => read_blendshapes(path, vertices.len())?,
            None => Vec::new(),
        };
        Mesh::new(vertices, faces, uvs, shapes)
    }

    /// Writes the rest pose as OBJ (`v`, `vt`, `f v/vt`) and, when the mesh
    /// has blendshapes, the binary sidecar next to it.
    pub fn save(&self, obj: &Path, blendshapes: Option<&Path>) -> Result<()> {
        use std::fmt::Write as _;
        let mut s = String::new();
        for v in &self.vertices {
            let _ = writeln!(s, "v {} {} {}", v.x as f32, v.y as f32, v.z as f32);
        }
        for t in &self.uvs {
            let _ = writeln!(s, "vt {} {}", t.x as f32, t.y as f32);
        }
        for f in &self.faces {
            let _ = writeln!(
                s,
                "f {0}/{0} {1}/{1} {2}/{2}",
                f[0] + 1,
                f[1] + 1,
                f[2] + 1
            );
        }
        fs::write(obj, s).map_err(|e| Error::io(obj, e))?;
        if let Some(path) = blendshapes {
            write_blendshapes(path, &self.blendshapes)?;
        }
        Ok(())
    }
}

/// Sidecar layout: little-endian `u32` basis count, then for each basis
/// `vertex_count * 3` `f32` offsets (x, y, z per vertex).
pub fn read_blendshapes(path: &Path, vertex_count: usize) -> Result<Vec<Vec<Vec3>>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    ensure!(bytes.len() >= 4, Mesh, "{}: missing blendshape count", path.display());
    let count = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
    let expected = 4 + count * vertex_count * 3 * 4;
    ensure!(
        bytes.len() == expected,
        Mesh,
        "{}: expected {expected} bytes for {count} blendshapes over {vertex_count} vertices, found {}",
        path.display(),
        bytes.len()
    );
    let floats: Vec<f64> = bytes[4..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(floats
        .chunks_exact(vertex_count * 3)
        .map(|basis| {
            basis
                .chunks_exact(3)
                .map(|p| Vec3::new(p[0], p[1], p[2]))
                .collect()
        })
        .collect())
}

pub fn write_blendshapes(path: &Path, shapes: &[Vec<Vec3>]) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(&(shapes.len() as u32).to_le_bytes());
    for shape in shapes {
        for v in shape {
            for c in v.iter() {
                out.extend_from_slice(&(*c as f32).to_le_bytes());
            }
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Procedural head: an ellipsoidal UV sphere whose longitude/latitude grid
/// fills the unit UV square, with eight raised-cosine bumps along the
/// surface normal as blendshapes. Units are meters, roughly the size of a
/// real head.
pub fn desk_head(lon_segments: usize, lat_segments: usize) -> Mesh {
    const AXES: [f64; 3] = [0.09, 0.11, 0.1];
    let mut vertices = Vec::new();
    let mut normals = Vec::new();
    let mut uvs = Vec::new();
    for j in 0..=lat_segments {
        let tv = j as f64 / lat_segments as f64;
        let lat = -PI / 2.0 + PI * tv;
        for i in 0..=lon_segments {
            let tu = i as f64 / lon_segments as f64;
            // seam at the back of the head, u = 0.5 faces +z
            let lon = 2.0 * PI * tu - PI;
            let dir = Vec3::new(lat.cos() * lon.sin(), lat.sin(), lat.cos() * lon.cos());
            vertices.push(Vec3::new(dir.x * AXES[0], dir.y * AXES[1], dir.z * AXES[2]));
            normals.push(
                Vec3::new(dir.x / AXES[0], dir.y / AXES[1], dir.z / AXES[2]).normalize(),
            );
            uvs.push(Vector2::new(tu, tv));
        }
    }
    let row = lon_segments as u32 + 1;
    let mut faces = Vec::new();
    for j in 0..lat_segments as u32 {
        for i in 0..lon_segments as u32 {
            let a = j * row + i;
            let b = a + 1;
            let c = a + row + 1;
            let d = a + row;
            faces.push([a, b, c]);
            faces.push([a, c, d]);
        }
    }

    // (longitude, latitude, amplitude in meters, angular radius)
    const BUMPS: [(f64, f64, f64, f64); 8] = [
        (-0.35, 0.25, 0.008, 0.45),
        (0.35, 0.25, 0.008, 0.45),
        (0.0, -0.45, 0.010, 0.55),
        (0.0, 0.0, 0.006, 0.40),
        (-0.9, 0.0, -0.006, 0.60),
        (0.9, 0.0, -0.006, 0.60),
        (0.0, 0.75, 0.007, 0.70),
        (0.0, -0.8, -0.008, 0.50),
    ];
    let blendshapes = BUMPS
        .iter()
        .map(|&(lon, lat, amp, radius)| {
            let center = Vec3::new(lat.cos() * lon.sin(), lat.sin(), lat.cos() * lon.cos());
            vertices
                .iter()
                .zip(&normals)
                .map(|(v, n)| {
                    let dir = Vec3::new(v.x / AXES[0], v.y / AXES[1], v.z / AXES[2]);
                    let angle = dir.dot(&center).clamp(-1.0, 1.0).acos();
                    let t = (angle / radius).min(1.0);
                    n * (amp * 0.5 * (1.0 + (PI * t).cos()))
                })
                .collect()
        })
        .collect();
    Mesh::new(vertices, faces, uvs, blendshapes).expect("procedural head is valid")
}

/// Texel coverage of a UV layout at one resolution: the covering face and
/// barycentric coordinates of every covered texel center.
#[derive(Clone, Debug)]
pub struct UvRaster {
    resolution: usize,
    texels: Vec<Option<(u32, [f64; 3])>>,
}

/// Edge function with a top-left tie rule so shared edges are owned by
/// exactly one triangle. Triangle must be counter-clockwise.
fn edge_inside(a: Vector2<f64>, b: Vector2<f64>, p: Vector2<f64>) -> Option<f64> {
    let e = (b - a).perp(&(p - a));
    if e > 0.0 {
        return Some(e);
    }
    if e == 0.0 {
        let d = b - a;
        let top_left = (d.y == 0.0 && d.x < 0.0) || d.y > 0.0;
        if top_left {
            return Some(0.0);
        }
    }
    None
}

impl UvRaster {
    fn for_each_hit(mesh: &Mesh, s: usize, mut hit: impl FnMut(usize, u32, [f64; 3])) {
        let sf = s as f64;
        for (fi, face) in mesh.faces.iter().enumerate() {
            let mut idx = *face;
            let [a, b, c] = idx.map(|i| mesh.uvs[i as usize]);
            if (b - a).perp(&(c - a)) < 0.0 {
                idx.swap(1, 2);
            }
            let [a, b, c] = idx.map(|i| mesh.uvs[i as usize]);
            let area = (b - a).perp(&(c - a));
            let lo = a.inf(&b).inf(&c);
            let hi = a.sup(&b).sup(&c);
            let i0 = ((lo.x * sf - 0.5).floor().max(0.0)) as usize;
            let i1 = ((hi.x * sf - 0.5).ceil().max(0.0) as usize).min(s - 1);
            let j0 = ((lo.y * sf - 0.5).floor().max(0.0)) as usize;
            let j1 = ((hi.y * sf - 0.5).ceil().max(0.0) as usize).min(s - 1);
            for j in j0..=j1 {
                for i in i0..=i1 {
                    let p = Vector2::new((i as f64 + 0.5) / sf, (j as f64 + 0.5) / sf);
                    let (Some(wa), Some(wb), Some(wc)) =
                        (edge_inside(b, c, p), edge_inside(c, a, p), edge_inside(a, b, p))
                    else {
                        continue;
                    };
                    let mut bary = [wa / area, wb / area, wc / area];
                    // restore the caller's vertex order
                    if idx != *face {
                        bary.swap(1, 2);
                    }
                    hit(j * s + i, fi as u32, bary);
                }
            }
        }
    }

    fn coverage_counts(mesh: &Mesh, s: usize) -> Vec<u8> {
        let mut counts = vec![0u8; s * s];
        UvRaster::for_each_hit(mesh, s, |t, _, _| counts[t] = counts[t].saturating_add(1));
        counts
    }

    pub fn new(mesh: &Mesh, resolution: usize) -> Self {
        assert!(resolution >= 1, "resolution must be positive");
        let mut texels = vec![None; resolution * resolution];
        UvRaster::for_each_hit(mesh, resolution, |t, f, bary| texels[t] = Some((f, bary)));
        UvRaster { resolution, texels }
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn covered(&self) -> usize {
        self.texels.iter().filter(|t| t.is_some()).count()
    }

    /// Row-major indices of covered texels.
    pub fn covered_indices(&self) -> Vec<usize> {
        self.texels
            .iter()
            .enumerate()
            .filter_map(|(i, t)| t.map(|_| i))
            .collect()
    }

    pub fn positions(&self, mesh: &Mesh, deformed: &[Vec3]) -> UvPositionMap {
        let s = self.resolution;
        let mut positions = vec![Vec3::zeros(); s * s];
        let mut mask = vec![false; s * s];
        for (t, texel) in self.texels.iter().enumerate() {
            if let Some((f, bary)) = texel {
                let face = mesh.faces[*f as usize];
                positions[t] = face
                    .iter()
                    .zip(bary)
                    .map(|(&vi, w)| deformed[vi as usize] * *w)
                    .sum();
                mask[t] = true;
            }
        }
        UvPositionMap {
            resolution: s,
            positions,
            mask,
        }
    }
}

/// Surface position of every covered texel; uncovered texels hold zero.
#[derive(Clone, Debug, PartialEq)]
pub struct UvPositionMap {
    resolution: usize,
    positions: Vec<Vec3>,
    mask: Vec<bool>,
}

impl UvPositionMap {
    pub fn new(resolution: usize, positions: Vec<Vec3>, mask: Vec<bool>) -> Result<Self> {
        ensure!(
            positions.len() == resolution * resolution && mask.len() == positions.len(),
            ShapeMismatch,
            "position map arrays do not match resolution {resolution}"
        );
        let positions = positions
            .into_iter()
            .zip(&mask)
            .map(|(p, &m)| if m { p } else { Vec3::zeros() })
            .collect();
        Ok(UvPositionMap {
            resolution,
            positions,
            mask,
        })
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn positions(&self) -> &[Vec3] {
        &self.positions
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn get(&self, row: usize, col: usize) -> Option<Vec3> {
        let t = row * self.resolution + col;
        self.mask[t].then(|| self.positions[t])
    }

    /// Masked positions mapped through `(p - center) / radius`.
    pub fn normalized(&self, center: Vec3, radius: f64) -> UvPositionMap {
        let positions = self
            .positions
            .iter()
            .zip(&self.mask)
            .map(|(p, &m)| if m { (p - center) / radius } else { Vec3::zeros() })
            .collect();
        UvPositionMap {
            resolution: self.resolution,
            positions,
            mask: self.mask.clone(),
        }
    }

    /// Mean 3D distance between horizontally or vertically adjacent covered texels.
    pub fn mean_texel_spacing(&self) -> f64 {
        let s = self.resolution;
        let mut total = 0.0;
        let mut n = 0usize;
        for j in 0..s {
            for i in 0..s {
                let Some(p) = self.get(j, i) else { continue };
                if i + 1 < s {
                    if let Some(q) = self.get(j, i + 1) {
                        total += (q - p).norm();
                        n += 1;
                    }
                }
                if j + 1 < s {
                    if let Some(q) = self.get(j + 1, i) {
                        total += (q - p).norm();
                        n += 1;
                    }
                }
            }
        }
        if n == 0 {
            0.0
        } else {
            total / n as f64
        }
    }
}

pub fn rasterize_uv(mesh: &Mesh, deformed: &[Vec3], target_s: usize) -> UvPositionMap {
    UvRaster::new(mesh, target_s).positions(mesh, deformed)
}

pub fn gaussian_count(pmap: &UvPositionMap) -> usize {
    pmap.mask.iter().filter(|&&m| m).count()
}

pub fn encoding_dim(n_freq: usize) -> usize {
    3 + 6 * n_freq
}

/// Per texel `[x, y, z, sin(2^k p) for k.., cos(2^k p) for k..]`, with each
/// frequency contributing `sin` of all three coordinates then `cos`.
pub fn encode_position(p: &Vec3, n_freq: usize, out: &mut [f64]) {
    out[..3].copy_from_slice(p.as_slice());
    let mut freq = 1.0;
    for k in 0..n_freq {
        let base = 3 + 6 * k;
        for c in 0..3 {
            let (s, co) = (freq * p[c]).sin_cos();
            out[base + c] = s;
            out[base + 3 + c] = co;
        }
        freq *= 2.0;
    }
}

pub fn positional_encode(pmap: &UvPositionMap, n_freq: usize) -> FeatureMap {
    let s = pmap.resolution;
    let d = encoding_dim(n_freq);
    let mut out = FeatureMap::zeros(s, d);
    let data = out.as_slice_mut();
    for (t, (p, &m)) in pmap.positions.iter().zip(&pmap.mask).enumerate() {
        if m {
            encode_position(p, n_freq, &mut data[t * d..(t + 1) * d]);
        }
    }
    out
}

/// Pinhole camera with OpenCV axes (x right, y down, z forward).
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// World-to-camera rotation.
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
}

impl Camera {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        rotation: Matrix3<f64>,
        translation: Vec3,
    ) -> Result<Self> {
        let cam = Camera {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            rotation,
            translation,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.fx > 0.0 && self.fy > 0.0,
            InvalidArgument,
            "focal lengths must be positive"
        );
        ensure!(self.width > 0 && self.height > 0, InvalidArgument, "empty image");
        let err = (self.rotation.transpose() * self.rotation - Matrix3::identity()).amax();
        ensure!(
            err < 1e-8 && self.rotation.determinant() > 0.0,
            InvalidArgument,
            "rotation is not orthonormal (error {err:e})"
        );
        Ok(())
    }

    /// Camera at `eye` looking at `target` with vertical field of view `fov_y`.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, fov_y: f64, width: usize, height: usize) -> Self {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let f = 0.5 * height as f64 / (0.5 * fov_y).tan();
        Camera {
            fx: f,
            fy: f,
            cx: 0.5 * width as f64,
            cy: 0.5 * height as f64,
            width,
            height,
            rotation,
            translation: -(rotation * eye),
        }
    }

    pub fn center(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }
}

/// Rotates `base` about `center`: `yaw` about world +y, then `pitch` about
/// world +x. The distance to `center` is preserved.
pub fn orbit_camera(base: &Camera, center: Vec3, yaw: f64, pitch: f64) -> Camera {
    if yaw == 0.0 && pitch == 0.0 {
        return base.clone();
    }
    let q = Rotation3::from_axis_angle(&Vector3::y_axis(), yaw)
        * Rotation3::from_axis_angle(&Vector3::x_axis(), pitch);
    let q = q.into_inner();
    let eye = center + q * (base.center() - center);
    let rotation = base.rotation * q.transpose();
    Camera {
        rotation,
        translation: -(rotation * eye),
        ..base.clone()
    }
}
