//! Training frames, the procedural ground-truth generator and the on-disk
//! dataset layout.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Matrix3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::geometry::{orbit_camera, rasterize_uv, Camera, ExpressionVector, Mesh, UvPositionMap, Vec3};
use crate::metrics::Image;
use crate::splat::{render_reference, sh_coeff_count, GaussianSet, RenderSettings, SH_C0};

/// One supervised view.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSample {
    pub image: Image,
    /// Row-major, aligned with `image`.
    pub part_mask: Vec<bool>,
    pub expr: ExpressionVector,
    pub camera: Camera,
}

impl FrameSample {
    pub fn new(image: Image, part_mask: Vec<bool>, expr: ExpressionVector, camera: Camera) -> Result<Self> {
        ensure!(
            image.width == camera.width && image.height == camera.height,
            ShapeMismatch,
            "image is {}x{}, camera is {}x{}",
            image.width,
            image.height,
            camera.width,
            camera.height
        );
        ensure!(
            part_mask.len() == image.pixels.len(),
            ShapeMismatch,
            "mask has {} pixels, image has {}",
            part_mask.len(),
            image.pixels.len()
        );
        camera.validate()?;
        Ok(FrameSample {
            image,
            part_mask,
            expr,
            camera,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    /// UV resolution of the ground-truth Gaussians.
    pub resolution: usize,
    pub expr_dim: usize,
    pub sh_degree: usize,
    /// Per-frame orbit offsets are drawn from `[-yaw_range, yaw_range]`
    /// and `[-pitch_range, pitch_range]` radians.
    pub yaw_range: f64,
    pub pitch_range: f64,
    pub camera_distance: f64,
    pub fov_y: f64,
    pub opacity: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            seed: 0,
            frames: 8,
            width: 64,
            height: 64,
            resolution: 256,
            expr_dim: crate::geometry::DEFAULT_EXPRESSION_DIM,
            sh_degree: 3,
            yaw_range: 0.35,
            pitch_range: 0.15,
            camera_distance: 0.45,
            fov_y: 0.75,
            opacity: 0.9,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.frames >= 1, Config, "frames must be at least 1");
        ensure!(self.width >= 1 && self.height >= 1, Config, "image size must be positive");
        ensure!(self.resolution >= 2, Config, "resolution must be at least 2");
        ensure!(self.expr_dim >= 1, Config, "expr_dim must be positive");
        ensure!(self.sh_degree <= 3, Config, "sh_degree must be at most 3");
        ensure!(
            self.opacity > 0.0 && self.opacity < 1.0,
            Config,
            "opacity must lie in (0, 1)"
        );
        ensure!(
            self.camera_distance > 0.0 && self.fov_y > 0.0 && self.fov_y < PI,
            Config,
            "camera_distance and fov_y must be positive"
        );
        Ok(())
    }
}

/// Frames plus the Gaussians that produced them.
#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub frames: Vec<FrameSample>,
    pub ground_truth: Vec<GaussianSet>,
}

fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Soft box around `(cu, cv)`: 1 inside the half-extents, 0 beyond `feather` outside.
fn soft_box(u: f64, v: f64, cu: f64, cv: f64, hu: f64, hv: f64, feather: f64) -> f64 {
    let du = (u - cu).abs() - hu;
    let dv = (v - cv).abs() - hv;
    (1.0 - smoothstep(0.0, feather, du)) * (1.0 - smoothstep(0.0, feather, dv))
}

// (u, v, half-width u, half-height v) of the detail regions on the desk head
const EYE_REGIONS: [(f64, f64, f64, f64); 2] = [(0.444, 0.58, 0.035, 0.025), (0.556, 0.58, 0.035, 0.025)];
const MOUTH_REGION: (f64, f64, f64, f64) = (0.5, 0.357, 0.06, 0.025);

/// Whether a UV coordinate lies in the eye or mouth regions.
pub fn in_part_region(u: f64, v: f64) -> bool {
    EYE_REGIONS
        .iter()
        .chain(std::iter::once(&MOUTH_REGION))
        .any(|&(cu, cv, hu, hv)| (u - cu).abs() <= hu && (v - cv).abs() <= hv)
}

/// Procedural albedo over the unit UV square.
pub fn texture(u: f64, v: f64) -> [f64; 3] {
    let skin = [0.86, 0.66, 0.55];
    let mut c = skin;
    let shade = 0.06 * (2.0 * PI * 3.0 * u).sin() * (2.0 * PI * 2.0 * v).cos();
    for ch in &mut c {
        *ch += shade;
    }
    // hair on the crown and down the back of the head
    let back = smoothstep(0.22, 0.3, (u - 0.5).abs()) * smoothstep(0.45, 0.55, v);
    let hair = smoothstep(0.72, 0.8, v).max(back);
    let hair_color = [0.28, 0.18, 0.12];
    let eyes: f64 = EYE_REGIONS
        .iter()
        .map(|&(cu, cv, hu, hv)| soft_box(u, v, cu, cv, hu, hv, 0.012))
        .fold(0.0, f64::max);
    let (cu, cv, hu, hv) = MOUTH_REGION;
    let mouth = soft_box(u, v, cu, cv, hu, hv, 0.012);
    let mix = |a: [f64; 3], b: [f64; 3], t: f64| [0, 1, 2].map(|i| a[i] * (1.0 - t) + b[i] * t);
    c = mix(c, hair_color, hair);
    c = mix(c, [0.12, 0.14, 0.22], eyes);
    c = mix(c, [0.72, 0.2, 0.25], mouth);
    c.map(|x| x.clamp(0.0, 1.0))
}

/// Smooth expression trajectories: two sinusoids per coefficient, clamped to
/// `[-1, 1]` and rounded to f32 so they survive the sidecar format.
pub fn expression_trajectory(rng: &mut impl Rng, frames: usize, dim: usize) -> Vec<ExpressionVector> {
    let params: Vec<[f64; 6]> = (0..dim)
        .map(|_| {
            [
                rng.gen_range(0.3..0.8),
                rng.gen_range(0.3..1.2),
                rng.gen_range(0.0..2.0 * PI),
                rng.gen_range(0.1..0.4),
                rng.gen_range(1.0..3.0),
                rng.gen_range(0.0..2.0 * PI),
            ]
        })
        .collect();
    (0..frames)
        .map(|f| {
            let t = f as f64 / frames.max(1) as f64;
            ExpressionVector(
                params
                    .iter()
                    .map(|&[a1, f1, p1, a2, f2, p2]| {
                        let v = a1 * (2.0 * PI * f1 * t + p1).sin() + a2 * (2.0 * PI * f2 * t + p2).sin();
                        v.clamp(-1.0, 1.0) as f32 as f64
                    })
                    .collect(),
            )
        })
        .collect()
}

/// Mean of [`texture`] over the footprint of row-major texel `t`, so detail
/// finer than a texel blurs instead of aliasing.
fn texel_color(t: usize, s: usize) -> [f64; 3] {
    const N: usize = 4;
    let (i, j) = ((t % s) as f64, (t / s) as f64);
    let mut acc = [0.0; 3];
    for a in 0..N {
        for b in 0..N {
            let u = (i + (a as f64 + 0.5) / N as f64) / s as f64;
            let v = (j + (b as f64 + 0.5) / N as f64) / s as f64;
            let c = texture(u, v);
            (0..3).for_each(|k| acc[k] += c[k]);
        }
    }
    acc.map(|x| x / (N * N) as f64)
}

/// Local 3D spacing of the texel grid: distances to the next covered
/// texel along u and v, falling back to the previous one at borders.
fn local_spacing(pmap: &UvPositionMap, t: usize) -> f64 {
    let s = pmap.resolution();
    let (i, j) = (t % s, t / s);
    let p = pmap.positions()[t];
    let along = |di: isize, dj: isize| -> Option<f64> {
        let (ni, nj) = (i as isize + di, j as isize + dj);
        if ni < 0 || nj < 0 || ni >= s as isize || nj >= s as isize {
            return None;
        }
        pmap.get(nj as usize, ni as usize).map(|q| (q - p).norm())
    };
    let du = along(1, 0).or_else(|| along(-1, 0)).unwrap_or(0.0);
    let dv = along(0, 1).or_else(|| along(0, -1)).unwrap_or(0.0);
    du.max(dv)
}

/// Ground-truth Gaussians for one pose: one per covered texel at
/// `resolution`, isotropic with a size tied to the local texel spacing,
/// colored by [`texture`].
pub fn ground_truth_gaussians(mesh: &Mesh, expr: &ExpressionVector, cfg: &SyntheticConfig) -> GaussianSet {
    let pmap = rasterize_uv(mesh, &mesh.deform(expr), cfg.resolution);
    let s = pmap.resolution();
    let floor = 0.25 * pmap.mean_texel_spacing();
    let stride = 3 * sh_coeff_count(cfg.sh_degree);
    let mut set = GaussianSet::empty(cfg.sh_degree);
    let mut sh = vec![0.0; stride];
    for (t, &m) in pmap.mask().iter().enumerate() {
        if !m {
            continue;
        }
        let color = texel_color(t, s);
        for c in 0..3 {
            sh[c] = (color[c] - 0.5) / SH_C0;
        }
        let sigma = (0.6 * local_spacing(&pmap, t)).max(floor);
        set.push(pmap.positions()[t], Vec3::repeat(sigma), [1.0, 0.0, 0.0, 0.0], cfg.opacity, &sh);
    }
    set
}

/// Front-facing camera at `distance` from `target`.
pub fn default_camera(target: Vec3, distance: f64, fov_y: f64, width: usize, height: usize) -> Camera {
    Camera::look_at(target + Vec3::new(0.0, 0.0, distance), target, Vec3::y(), fov_y, width, height)
}

/// Ray/triangle intersection distance (Moller-Trumbore), front or back face.
fn ray_triangle(origin: &Vec3, dir: &Vec3, tri: [Vec3; 3]) -> Option<(f64, f64, f64)> {
    let e1 = tri[1] - tri[0];
    let e2 = tri[2] - tri[0];
    let p = dir.cross(&e2);
    let det = e1.dot(&p);
    if det.abs() < 1e-14 {
        return None;
    }
    let inv = 1.0 / det;
    let s = origin - tri[0];
    let b1 = s.dot(&p) * inv;
    if !(0.0..=1.0).contains(&b1) {
        return None;
    }
    let q = s.cross(&e1);
    let b2 = dir.dot(&q) * inv;
    if b2 < 0.0 || b1 + b2 > 1.0 {
        return None;
    }
    let t = e2.dot(&q) * inv;
    (t > 0.0).then_some((t, b1, b2))
}

/// Pixels whose first visible surface point lies in the part region,
/// found by casting a ray through every pixel center into the deformed mesh.
pub fn part_mask(mesh: &Mesh, deformed: &[Vec3], cam: &Camera) -> Vec<bool> {
    let origin = cam.center();
    let rt = cam.rotation.transpose();
    let tris: Vec<([Vec3; 3], [usize; 3])> = mesh
        .faces()
        .iter()
        .map(|f| {
            let idx = f.map(|i| i as usize);
            (idx.map(|i| deformed[i]), idx)
        })
        .collect();
    let mut mask = vec![false; cam.width * cam.height];
    for y in 0..cam.height {
        for x in 0..cam.width {
            let d = rt * Vec3::new(
                (x as f64 + 0.5 - cam.cx) / cam.fx,
                (y as f64 + 0.5 - cam.cy) / cam.fy,
                1.0,
            );
            let mut best: Option<(f64, [usize; 3], f64, f64)> = None;
            for (tri, idx) in &tris {
                if let Some((t, b1, b2)) = ray_triangle(&origin, &d, *tri) {
                    if best.map_or(true, |b| t < b.0) {
                        best = Some((t, *idx, b1, b2));
                    }
                }
            }
            if let Some((_, idx, b1, b2)) = best {
                let uv = mesh.uvs()[idx[0]] * (1.0 - b1 - b2) + mesh.uvs()[idx[1]] * b1 + mesh.uvs()[idx[2]] * b2;
                mask[y * cam.width + x] = in_part_region(uv.x, uv.y);
            }
        }
    }
    mask
}

/// Builds a self-consistent dataset on `mesh`: every target is the reference
/// render of its ground-truth Gaussians.
pub fn generate_synthetic_dataset(mesh: &Mesh, cfg: &SyntheticConfig) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let exprs = expression_trajectory(&mut rng, cfg.frames, cfg.expr_dim);
    let (center, _) = mesh.bounding_sphere();
    let base = default_camera(center, cfg.camera_distance, cfg.fov_y, cfg.width, cfg.height);
    let settings = RenderSettings::default();
    let mut frames = Vec::with_capacity(cfg.frames);
    let mut ground_truth = Vec::with_capacity(cfg.frames);
    for expr in exprs {
        let yaw = rng.gen_range(-1.0..=1.0) * cfg.yaw_range;
        let pitch = rng.gen_range(-1.0..=1.0) * cfg.pitch_range;
        let camera = orbit_camera(&base, center, yaw, pitch);
        let set = ground_truth_gaussians(mesh, &expr, cfg);
        let image = Image::from(render_reference(&set, &camera, &settings));
        let mask = part_mask(mesh, &mesh.deform(&expr), &camera);
        frames.push(FrameSample::new(image, mask, expr, camera)?);
        ground_truth.push(set);
    }
    Ok(SyntheticDataset { frames, ground_truth })
}

const SIDECAR_MAGIC: &[u8; 4] = b"AFRM";
const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestFrame {
    pub image: String,
    pub mask: String,
    pub sidecar: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub width: usize,
    pub height: usize,
    pub expr_dim: usize,
    /// Generator settings when the dataset is synthetic.
    pub generator: Option<SyntheticConfig>,
    pub frames: Vec<ManifestFrame>,
}

/// Sidecar layout, little endian: magic `AFRM`, u32 expression length,
/// f32 coefficients, u32 width, u32 height, f64 fx fy cx cy, f64 rotation
/// (row-major 3x3), f64 translation.
pub fn encode_sidecar(expr: &ExpressionVector, cam: &Camera) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * expr.dim() + 8 * 16);
    out.extend_from_slice(SIDECAR_MAGIC);
    out.extend_from_slice(&(expr.dim() as u32).to_le_bytes());
    for v in expr.values() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out.extend_from_slice(&(cam.width as u32).to_le_bytes());
    out.extend_from_slice(&(cam.height as u32).to_le_bytes());
    let r = cam.rotation;
    let vals = [cam.fx, cam.fy, cam.cx, cam.cy]
        .into_iter()
        .chain((0..3).flat_map(|i| (0..3).map(move |j| r[(i, j)])))
        .chain(cam.translation.iter().copied());
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_sidecar(bytes: &[u8]) -> Result<(ExpressionVector, Camera)> {
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let end = pos + n;
        ensure!(end <= bytes.len(), Data, "sidecar truncated at byte {pos}");
        let s = &bytes[pos..end];
        pos = end;
        Ok(s)
    };
    ensure!(take(4)? == SIDECAR_MAGIC, Data, "sidecar has wrong magic");
    let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize;
    let n = u32_at(take(4)?);
    let mut expr = Vec::with_capacity(n);
    for _ in 0..n {
        expr.push(f32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as f64);
    }
    let width = u32_at(take(4)?);
    let height = u32_at(take(4)?);
    let mut vals = [0.0f64; 16];
    for v in &mut vals {
        *v = f64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
    }
    ensure!(pos == bytes.len(), Data, "sidecar has {} trailing bytes", bytes.len() - pos);
    let rotation = Matrix3::from_row_slice(&vals[4..13]);
    let cam = Camera::new(
        vals[0],
        vals[1],
        vals[2],
        vals[3],
        width,
        height,
        rotation,
        Vec3::new(vals[13], vals[14], vals[15]),
    )
    .map_err(|e| Error::Data(format!("sidecar camera: {e}")))?;
    Ok((ExpressionVector(expr), cam))
}

/// Writes `frames` under `dir` with a `manifest.json`.
pub fn save_dataset(dir: &Path, frames: &[FrameSample], generator: Option<&SyntheticConfig>) -> Result<()> {
    ensure!(!frames.is_empty(), Data, "no frames to save");
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (w, h) = (frames[0].image.width, frames[0].image.height);
    let expr_dim = frames[0].expr.dim();
    let mut entries = Vec::with_capacity(frames.len());
    for (i, f) in frames.iter().enumerate() {
        ensure!(
            f.image.width == w && f.image.height == h && f.expr.dim() == expr_dim,
            Data,
            "frame {i} differs in size or expression length from frame 0"
        );
        let entry = ManifestFrame {
            image: format!("frame_{i:04}.png"),
            mask: format!("mask_{i:04}.png"),
            sidecar: format!("frame_{i:04}.bin"),
        };
        let img_path = dir.join(&entry.image);
        f.image.to_rgb8().save(&img_path)?;
        let mask = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
            image::Luma([if f.part_mask[y as usize * w + x as usize] { 255 } else { 0 }])
        });
        mask.save(dir.join(&entry.mask))?;
        let side = dir.join(&entry.sidecar);
        fs::write(&side, encode_sidecar(&f.expr, &f.camera)).map_err(|e| Error::io(&side, e))?;
        entries.push(entry);
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        width: w,
        height: h,
        expr_dim,
        generator: generator.cloned(),
        frames: entries,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    ensure!(
        m.version == MANIFEST_VERSION,
        Data,
        "{}: manifest version {} (expected {MANIFEST_VERSION})",
        path.display(),
        m.version
    );
    Ok(m)
}

fn read_png(path: &PathBuf) -> Result<image::DynamicImage> {
    image::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

pub fn load_dataset(dir: &Path) -> Result<Vec<FrameSample>> {
    let manifest = load_manifest(dir)?;
    ensure!(!manifest.frames.is_empty(), Data, "manifest lists no frames");
    let mut frames = Vec::with_capacity(manifest.frames.len());
    for entry in &manifest.frames {
        let image = Image::from_rgb8(&read_png(&dir.join(&entry.image))?.to_rgb8());
        let mask_img = read_png(&dir.join(&entry.mask))?.to_luma8();
        let mask: Vec<bool> = mask_img.pixels().map(|p| p.0[0] >= 128).collect();
        let side = dir.join(&entry.sidecar);
        let bytes = fs::read(&side).map_err(|e| Error::io(&side, e))?;
        let (expr, camera) =
            decode_sidecar(&bytes).map_err(|e| Error::Data(format!("{}: {e}", side.display())))?;
        ensure!(
            image.width == manifest.width
                && image.height == manifest.height
                && expr.dim() == manifest.expr_dim,
            Data,
            "{} does not match the manifest's image size or expression length",
            entry.image
        );
        frames.push(FrameSample::new(image, mask, expr, camera).map_err(|e| Error::Data(e.to_string()))?);
    }
    Ok(frames)
}
