//! Differentiable Gaussian splatting.
//!
//! Gaussians are projected with a first-order perspective Jacobian, sorted
//! globally by camera depth and alpha-composited front to back. Two forward
//! paths share the per-pixel compositing kernel:
//!
//! * [`render_reference`] walks every projected primitive for every pixel.
//! * [`render`] bins primitives into square tiles using the exact extent of
//!   the region where `opacity * G >= 1/255`, so it skips only primitives the
//!   kernel would skip anyway.
//!
//! [`render_backward`] replays the tiled forward pass per pixel and
//! propagates image gradients to means, scales, rotations, opacities and
//! SH coefficients. Sorting and the opacity cutoffs are treated as constants.

use nalgebra::{Matrix2x3, Matrix3, Vector2};
use rayon::prelude::*;

use crate::error::{ensure, Error, Result};
use crate::geometry::{Camera, Vec3};

pub const ALPHA_CUTOFF: f64 = 1.0 / 255.0;
pub const MAX_ALPHA: f64 = 0.99;
pub const MIN_TRANSMITTANCE: f64 = 1e-4;
pub const DILATION: f64 = 0.3;
pub const NEAR_PLANE: f64 = 0.01;
/// Projected means further than this multiple of the half field of view
/// from the optical axis are culled.
pub const GUARD_BAND: f64 = 1.3;

pub fn sh_coeff_count(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
const SH_C1: f64 = 0.488_602_511_902_919_9;
const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
const SH_C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

/// Real SH basis up to degree 3 in the usual splatting order, evaluated
/// for `d`. Entries past `sh_coeff_count(degree)` are zero.
pub fn sh_basis(d: &Vec3, degree: usize) -> [f64; 16] {
    let (x, y, z) = (d.x, d.y, d.z);
    let mut b = [0.0; 16];
    b[0] = SH_C0;
    if degree >= 1 {
        b[1] = -SH_C1 * y;
        b[2] = SH_C1 * z;
        b[3] = -SH_C1 * x;
    }
    if degree >= 2 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        b[4] = SH_C2[0] * x * y;
        b[5] = SH_C2[1] * y * z;
        b[6] = SH_C2[2] * (2.0 * zz - xx - yy);
        b[7] = SH_C2[3] * x * z;
        b[8] = SH_C2[4] * (xx - yy);
        if degree >= 3 {
            b[9] = SH_C3[0] * y * (3.0 * xx - yy);
            b[10] = SH_C3[1] * x * y * z;
            b[11] = SH_C3[2] * y * (4.0 * zz - xx - yy);
            b[12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy);
            b[13] = SH_C3[4] * x * (4.0 * zz - xx - yy);
            b[14] = SH_C3[5] * z * (xx - yy);
            b[15] = SH_C3[6] * x * (xx - 3.0 * yy);
        }
    }
    b
}

/// Gradient of each basis polynomial with respect to `(x, y, z)`.
fn sh_basis_grad(d: &Vec3, degree: usize) -> [Vec3; 16] {
    let (x, y, z) = (d.x, d.y, d.z);
    let mut g = [Vec3::zeros(); 16];
    if degree >= 1 {
        g[1] = Vec3::new(0.0, -SH_C1, 0.0);
        g[2] = Vec3::new(0.0, 0.0, SH_C1);
        g[3] = Vec3::new(-SH_C1, 0.0, 0.0);
    }
    if degree >= 2 {
        g[4] = SH_C2[0] * Vec3::new(y, x, 0.0);
        g[5] = SH_C2[1] * Vec3::new(0.0, z, y);
        g[6] = SH_C2[2] * Vec3::new(-2.0 * x, -2.0 * y, 4.0 * z);
        g[7] = SH_C2[3] * Vec3::new(z, 0.0, x);
        g[8] = SH_C2[4] * Vec3::new(2.0 * x, -2.0 * y, 0.0);
        if degree >= 3 {
            let (xx, yy, zz) = (x * x, y * y, z * z);
            g[9] = SH_C3[0] * Vec3::new(6.0 * x * y, 3.0 * xx - 3.0 * yy, 0.0);
            g[10] = SH_C3[1] * Vec3::new(y * z, x * z, x * y);
            g[11] = SH_C3[2] * Vec3::new(-2.0 * x * y, 4.0 * zz - xx - 3.0 * yy, 8.0 * y * z);
            g[12] = SH_C3[3] * Vec3::new(-6.0 * x * z, -6.0 * y * z, 6.0 * zz - 3.0 * xx - 3.0 * yy);
            g[13] = SH_C3[4] * Vec3::new(4.0 * zz - 3.0 * xx - yy, -2.0 * x * y, 8.0 * x * z);
            g[14] = SH_C3[5] * Vec3::new(2.0 * x * z, -2.0 * y * z, xx - yy);
            g[15] = SH_C3[6] * Vec3::new(3.0 * xx - 3.0 * yy, -6.0 * x * y, 0.0);
        }
    }
    g
}

fn degree_for_count(count: usize) -> Option<usize> {
    (0..=3).find(|&d| sh_coeff_count(d) == count)
}

/// RGB from SH coefficients stored basis-major (`coeffs[3 * k + channel]`),
/// offset by 0.5 and clamped at zero.
pub fn evaluate_sh(coeffs: &[f64], dir: &Vec3) -> Result<[f64; 3]> {
    ensure!(
        (dir.norm() - 1.0).abs() <= 1e-6,
        InvalidArgument,
        "view direction must be unit length, got norm {}",
        dir.norm()
    );
    ensure!(
        coeffs.len() % 3 == 0,
        ShapeMismatch,
        "coefficient count {} is not a multiple of 3",
        coeffs.len()
    );
    let degree = degree_for_count(coeffs.len() / 3).ok_or_else(|| {
        Error::ShapeMismatch(format!("{} coefficients do not form an SH band set", coeffs.len()))
    })?;
    Ok(sh_color(coeffs, dir, degree).0)
}

/// Returns the clamped color and the pre-clamp values.
fn sh_color(coeffs: &[f64], dir: &Vec3, degree: usize) -> ([f64; 3], [f64; 3]) {
    let basis = sh_basis(dir, degree);
    let mut raw = [0.5; 3];
    for (k, b) in basis.iter().take(sh_coeff_count(degree)).enumerate() {
        for (c, r) in raw.iter_mut().enumerate() {
            *r += b * coeffs[3 * k + c];
        }
    }
    (raw.map(|v| v.max(0.0)), raw)
}

/// Rotation matrix of a quaternion `(w, x, y, z)`; exact only for unit input.
pub fn rotation_from_quat(q: &[f64; 4]) -> Matrix3<f64> {
    let [w, x, y, z] = *q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Pulls a gradient on the rotation matrix back to the quaternion.
fn rotation_from_quat_backward(q: &[f64; 4], g: &Matrix3<f64>) -> [f64; 4] {
    let [w, x, y, z] = *q;
    let dw = 2.0 * (-z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)] + x * g[(2, 1)]);
    let dx = 2.0
        * (y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - 2.0 * x * g[(1, 1)] - w * g[(1, 2)] + z * g[(2, 0)]
            + w * g[(2, 1)]
            - 2.0 * x * g[(2, 2)]);
    let dy = 2.0
        * (-2.0 * y * g[(0, 0)] + x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)] + z * g[(1, 2)] - w * g[(2, 0)]
            + z * g[(2, 1)]
            - 2.0 * y * g[(2, 2)]);
    let dz = 2.0
        * (-2.0 * z * g[(0, 0)] - w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)] - 2.0 * z * g[(1, 1)]
            + y * g[(1, 2)]
            + x * g[(2, 0)]
            + y * g[(2, 1)]);
    [dw, dx, dy, dz]
}

fn covariance_unchecked(s: &Vec3, q: &[f64; 4]) -> Matrix3<f64> {
    let m = rotation_from_quat(q) * Matrix3::from_diagonal(s);
    m * m.transpose()
}

/// `R S S^T R^T` for scales `s` and unit quaternion `q = (w, x, y, z)`.
pub fn covariance_from_sq(s: &Vec3, q: &[f64; 4]) -> Result<Matrix3<f64>> {
    ensure!(
        s.iter().all(|v| *v > 0.0),
        InvalidArgument,
        "scales must be positive"
    );
    let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    ensure!(
        (norm - 1.0).abs() <= 1e-6,
        InvalidArgument,
        "quaternion norm {norm} is not 1"
    );
    Ok(covariance_unchecked(s, q))
}

/// `exp(-0.5 (x - mu)^T cov^-1 (x - mu))`.
pub fn evaluate_gaussian(x: &Vec3, mu: &Vec3, cov: &Matrix3<f64>) -> Result<f64> {
    let eig = cov.symmetric_eigen();
    let lo = eig.eigenvalues.min();
    let hi = eig.eigenvalues.max();
    ensure!(
        lo > 0.0 && hi / lo < 1e12,
        InvalidArgument,
        "covariance is singular or ill-conditioned"
    );
    let inv = cov
        .try_inverse()
        .ok_or_else(|| Error::InvalidArgument("covariance is singular".into()))?;
    let d = x - mu;
    Ok((-0.5 * d.dot(&(inv * d))).exp())
}

/// Renderable Gaussians as parallel arrays.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianSet {
    pub means: Vec<Vec3>,
    pub scales: Vec<Vec3>,
    /// Unit quaternions `(w, x, y, z)`.
    pub rotations: Vec<[f64; 4]>,
    pub opacities: Vec<f64>,
    /// `len() * 3 * sh_coeff_count(sh_degree)` values, basis-major per Gaussian.
    pub sh: Vec<f64>,
    pub sh_degree: usize,
}

impl GaussianSet {
    pub fn empty(sh_degree: usize) -> Self {
        GaussianSet {
            means: Vec::new(),
            scales: Vec::new(),
            rotations: Vec::new(),
            opacities: Vec::new(),
            sh: Vec::new(),
            sh_degree,
        }
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    pub fn sh_stride(&self) -> usize {
        3 * sh_coeff_count(self.sh_degree)
    }

    pub fn sh_of(&self, i: usize) -> &[f64] {
        let k = self.sh_stride();
        &self.sh[i * k..(i + 1) * k]
    }

    pub fn push(&mut self, mean: Vec3, scale: Vec3, rotation: [f64; 4], opacity: f64, sh: &[f64]) {
        assert_eq!(sh.len(), self.sh_stride(), "wrong SH coefficient count");
        self.means.push(mean);
        self.scales.push(scale);
        self.rotations.push(rotation);
        self.opacities.push(opacity);
        self.sh.extend_from_slice(sh);
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        ensure!(
            self.scales.len() == n
                && self.rotations.len() == n
                && self.opacities.len() == n
                && self.sh.len() == n * self.sh_stride(),
            ShapeMismatch,
            "gaussian attribute arrays disagree in length"
        );
        ensure!(self.sh_degree <= 3, InvalidArgument, "SH degree above 3");
        for i in 0..n {
            let qn = self.rotations[i].iter().map(|v| v * v).sum::<f64>().sqrt();
            ensure!((qn - 1.0).abs() <= 1e-6, InvalidArgument, "gaussian {i}: quaternion norm {qn}");
            ensure!(
                self.scales[i].iter().all(|s| *s > 0.0 && s.is_finite()),
                InvalidArgument,
                "gaussian {i}: non-positive scale"
            );
            ensure!(
                self.opacities[i] > 0.0 && self.opacities[i] < 1.0,
                InvalidArgument,
                "gaussian {i}: opacity outside (0, 1)"
            );
            ensure!(
                self.means[i].iter().all(|v| v.is_finite()),
                InvalidArgument,
                "gaussian {i}: non-finite mean"
            );
        }
        ensure!(
            self.sh.iter().all(|v| v.is_finite()),
            InvalidArgument,
            "non-finite SH coefficient"
        );
        Ok(())
    }
}

/// Gradients with the same layout as [`GaussianSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianGrads {
    pub means: Vec<Vec3>,
    pub scales: Vec<Vec3>,
    pub rotations: Vec<[f64; 4]>,
    pub opacities: Vec<f64>,
    pub sh: Vec<f64>,
}

impl GaussianGrads {
    pub fn zeros(set: &GaussianSet) -> Self {
        let n = set.len();
        GaussianGrads {
            means: vec![Vec3::zeros(); n],
            scales: vec![Vec3::zeros(); n],
            rotations: vec![[0.0; 4]; n],
            opacities: vec![0.0; n],
            sh: vec![0.0; set.sh.len()],
        }
    }
}

/// A Gaussian after projection to the image plane.
#[derive(Clone, Debug, PartialEq)]
pub struct SplatPrimitive {
    pub index: usize,
    /// Pixel coordinates; pixel `(x, y)` covers `[x, x+1) x [y, y+1)`.
    pub mean: Vector2<f64>,
    /// Dilated screen covariance `[xx, xy, yy]`.
    pub cov: [f64; 3],
    /// Inverse of `cov`, same layout.
    pub conic: [f64; 3],
    pub depth: f64,
    pub opacity: f64,
    pub color: [f64; 3],
    raw_color: [f64; 3],
    cam_point: Vec3,
}

impl SplatPrimitive {
    /// Half extents of the box outside which `opacity * G < 1/255`, or
    /// `None` when the primitive can never reach the cutoff.
    pub fn extent(&self) -> Option<(f64, f64)> {
        let k = 2.0 * (self.opacity / ALPHA_CUTOFF).ln();
        if k <= 0.0 {
            return None;
        }
        Some(((k * self.cov[0]).sqrt(), (k * self.cov[2]).sqrt()))
    }

    fn alpha_at(&self, px: f64, py: f64) -> Option<(f64, f64, bool)> {
        let dx = px - self.mean.x;
        let dy = py - self.mean.y;
        let [a, b, c] = self.conic;
        let power = -0.5 * (a * dx * dx + 2.0 * b * dx * dy + c * dy * dy);
        if power > 0.0 {
            return None;
        }
        let g = power.exp();
        let alpha = self.opacity * g;
        if alpha < ALPHA_CUTOFF {
            return None;
        }
        if alpha > MAX_ALPHA {
            Some((MAX_ALPHA, g, true))
        } else {
            Some((alpha, g, false))
        }
    }
}

fn projection_jacobian(cam: &Camera, t: &Vec3) -> Matrix2x3<f64> {
    let iz = 1.0 / t.z;
    Matrix2x3::new(
        cam.fx * iz,
        0.0,
        -cam.fx * t.x * iz * iz,
        0.0,
        cam.fy * iz,
        -cam.fy * t.y * iz * iz,
    )
}

fn view_limits(cam: &Camera) -> (f64, f64) {
    let lim_x = GUARD_BAND * cam.cx.max(cam.width as f64 - cam.cx) / cam.fx;
    let lim_y = GUARD_BAND * cam.cy.max(cam.height as f64 - cam.cy) / cam.fy;
    (lim_x, lim_y)
}

/// Projects Gaussian `i`; `None` when it is behind the near plane, outside
/// the guard band, or its screen covariance is degenerate.
pub fn project(set: &GaussianSet, i: usize, cam: &Camera) -> Option<SplatPrimitive> {
    let mu = set.means[i];
    let t = cam.to_camera(&mu);
    if t.z <= NEAR_PLANE {
        return None;
    }
    let (lim_x, lim_y) = view_limits(cam);
    if (t.x / t.z).abs() > lim_x || (t.y / t.z).abs() > lim_y {
        return None;
    }
    let sigma = covariance_unchecked(&set.scales[i], &set.rotations[i]);
    let tj = projection_jacobian(cam, &t) * cam.rotation;
    let cov2 = tj * sigma * tj.transpose();
    let cov = [cov2[(0, 0)] + DILATION, cov2[(0, 1)], cov2[(1, 1)] + DILATION];
    let det = cov[0] * cov[2] - cov[1] * cov[1];
    if !(det > 0.0) {
        return None;
    }
    let conic = [cov[2] / det, -cov[1] / det, cov[0] / det];
    let dir = (mu - cam.center()).normalize();
    let (color, raw_color) = sh_color(set.sh_of(i), &dir, set.sh_degree);
    Some(SplatPrimitive {
        index: i,
        mean: Vector2::new(cam.fx * t.x / t.z + cam.cx, cam.fy * t.y / t.z + cam.cy),
        cov,
        conic,
        depth: t.z,
        opacity: set.opacities[i],
        color,
        raw_color,
        cam_point: t,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderSettings {
    pub background: [f64; 3],
    pub tile_size: usize,
}

impl Default for RenderSettings {
    fn default() -> Self {
        RenderSettings {
            background: [1.0; 3],
            tile_size: 16,
        }
    }
}

/// Unclamped composited colors plus accumulated alpha, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedImage {
    pub width: usize,
    pub height: usize,
    pub color: Vec<[f64; 3]>,
    pub alpha: Vec<f64>,
}

impl RenderedImage {
    pub fn filled(width: usize, height: usize, color: [f64; 3]) -> Self {
        RenderedImage {
            width,
            height,
            color: vec![color; width * height],
            alpha: vec![0.0; width * height],
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        self.color[y * self.width + x]
    }

    pub fn clamped(&self) -> Vec<[f64; 3]> {
        self.color.iter().map(|c| c.map(|v| v.clamp(0.0, 1.0))).collect()
    }

    /// 8-bit RGB after clamping to `[0, 1]`; no gamma is applied.
    pub fn to_rgb8(&self) -> image::RgbImage {
        let clamped = self.clamped();
        image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let c = clamped[y as usize * self.width + x as usize];
            image::Rgb(c.map(|v| (v * 255.0).round() as u8))
        })
    }
}

/// Front-to-back compositing of one pixel over `(slot, primitive)` pairs in
/// depth order. Calls `visit(slot, alpha, g, transmittance_before, clamped)`
/// for every contributing primitive.
fn composite_pixel<'a>(
    prims: impl Iterator<Item = (usize, &'a SplatPrimitive)>,
    px: f64,
    py: f64,
    background: &[f64; 3],
    mut visit: impl FnMut(usize, f64, f64, f64, bool),
) -> ([f64; 3], f64) {
    let mut color = [0.0; 3];
    let mut t = 1.0;
    for (slot, p) in prims {
        let Some((alpha, g, clamped)) = p.alpha_at(px, py) else {
            continue;
        };
        let next = t * (1.0 - alpha);
        if next < MIN_TRANSMITTANCE {
            break;
        }
        for (c, pc) in color.iter_mut().zip(&p.color) {
            *c += pc * alpha * t;
        }
        visit(slot, alpha, g, t, clamped);
        t = next;
    }
    for (c, b) in color.iter_mut().zip(background) {
        *c += t * b;
    }
    (color, 1.0 - t)
}

fn sorted_primitives(set: &GaussianSet, cam: &Camera) -> Vec<SplatPrimitive> {
    let mut prims: Vec<SplatPrimitive> = (0..set.len()).filter_map(|i| project(set, i, cam)).collect();
    prims.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));
    prims
}

/// Every pixel against every primitive; the correctness oracle for [`render`].
pub fn render_reference(set: &GaussianSet, cam: &Camera, settings: &RenderSettings) -> RenderedImage {
    let prims = sorted_primitives(set, cam);
    let mut img = RenderedImage::filled(cam.width, cam.height, settings.background);
    for y in 0..cam.height {
        for x in 0..cam.width {
            let (c, a) = composite_pixel(
                prims.iter().enumerate(),
                x as f64 + 0.5,
                y as f64 + 0.5,
                &settings.background,
                |_, _, _, _, _| {},
            );
            img.color[y * cam.width + x] = c;
            img.alpha[y * cam.width + x] = a;
        }
    }
    img
}

/// Projected, sorted and tile-binned scene for one camera. Holds everything
/// the backward pass needs to replay compositing.
pub struct PreparedScene<'a> {
    set: &'a GaussianSet,
    cam: &'a Camera,
    settings: RenderSettings,
    prims: Vec<SplatPrimitive>,
    tiles_x: usize,
    tiles_y: usize,
    /// Per tile, indices into `prims` in depth order.
    bins: Vec<Vec<u32>>,
}

impl<'a> PreparedScene<'a> {
    pub fn new(set: &'a GaussianSet, cam: &'a Camera, settings: &RenderSettings) -> Self {
        let tile = settings.tile_size.max(1);
        let tiles_x = cam.width.div_ceil(tile);
        let tiles_y = cam.height.div_ceil(tile);
        let prims = sorted_primitives(set, cam);
        let mut bins = vec![Vec::new(); tiles_x * tiles_y];
        for (k, p) in prims.iter().enumerate() {
            let Some((ex, ey)) = p.extent() else { continue };
            // one pixel of slack absorbs rounding between the extent and the conic
            let x0 = (p.mean.x - ex - 1.0).floor();
            let x1 = (p.mean.x + ex + 1.0).ceil();
            let y0 = (p.mean.y - ey - 1.0).floor();
            let y1 = (p.mean.y + ey + 1.0).ceil();
            if x1 < 0.0 || y1 < 0.0 || x0 >= cam.width as f64 || y0 >= cam.height as f64 {
                continue;
            }
            let tx0 = (x0.max(0.0) as usize) / tile;
            let tx1 = ((x1 as usize).min(cam.width - 1)) / tile;
            let ty0 = (y0.max(0.0) as usize) / tile;
            let ty1 = ((y1 as usize).min(cam.height - 1)) / tile;
            for ty in ty0..=ty1 {
                for tx in tx0..=tx1 {
                    bins[ty * tiles_x + tx].push(k as u32);
                }
            }
        }
        PreparedScene {
            set,
            cam,
            settings: *settings,
            prims,
            tiles_x,
            tiles_y,
            bins,
        }
    }

    pub fn primitives(&self) -> &[SplatPrimitive] {
        &self.prims
    }

    fn tile_pixels(&self, tile: usize) -> impl Iterator<Item = (usize, usize)> {
        let ts = self.settings.tile_size.max(1);
        let (tx, ty) = (tile % self.tiles_x, tile / self.tiles_x);
        let (w, h) = (self.cam.width, self.cam.height);
        (ty * ts..((ty + 1) * ts).min(h)).flat_map(move |y| (tx * ts..((tx + 1) * ts).min(w)).map(move |x| (x, y)))
    }

    pub fn render(&self) -> RenderedImage {
        let bg = self.settings.background;
        let tiles: Vec<Vec<(usize, [f64; 3], f64)>> = (0..self.tiles_x * self.tiles_y)
            .into_par_iter()
            .map(|tile| {
                let bin = &self.bins[tile];
                self.tile_pixels(tile)
                    .map(|(x, y)| {
                        let prims = bin.iter().map(|&k| (k as usize, &self.prims[k as usize]));
                        let (c, a) = composite_pixel(prims, x as f64 + 0.5, y as f64 + 0.5, &bg, |_, _, _, _, _| {});
                        (y * self.cam.width + x, c, a)
                    })
                    .collect()
            })
            .collect();
        let mut img = RenderedImage::filled(self.cam.width, self.cam.height, bg);
        for (idx, c, a) in tiles.into_iter().flatten() {
            img.color[idx] = c;
            img.alpha[idx] = a;
        }
        img
    }

    pub fn backward(&self, grad_image: &[[f64; 3]]) -> Result<GaussianGrads> {
        ensure!(
            grad_image.len() == self.cam.width * self.cam.height,
            ShapeMismatch,
            "image gradient has {} pixels, render has {}",
            grad_image.len(),
            self.cam.width * self.cam.height
        );
        let bg = self.settings.background;
        // per tile: (slot in bin, screen-space gradient)
        let tile_grads: Vec<Vec<ScreenGrad>> = (0..self.tiles_x * self.tiles_y)
            .into_par_iter()
            .map(|tile| {
                let bin = &self.bins[tile];
                let mut local = vec![ScreenGrad::default(); bin.len()];
                let mut slot_of = std::collections::HashMap::with_capacity(bin.len());
                for (slot, &k) in bin.iter().enumerate() {
                    slot_of.insert(k as usize, slot);
                }
                let mut hits: Vec<(usize, f64, f64, f64, bool)> = Vec::new();
                for (x, y) in self.tile_pixels(tile) {
                    let g = grad_image[y * self.cam.width + x];
                    if g == [0.0; 3] {
                        continue;
                    }
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    hits.clear();
                    let prims = bin.iter().map(|&k| (k as usize, &self.prims[k as usize]));
                    let mut t_final = 1.0;
                    composite_pixel(prims, px, py, &bg, |k, alpha, gv, t, clamped| {
                        hits.push((k, alpha, gv, t, clamped));
                        t_final = t * (1.0 - alpha);
                    });
                    let mut suffix = t_final * dot3(&bg, &g);
                    for &(k, alpha, gv, t, clamped) in hits.iter().rev() {
                        let p = &self.prims[k];
                        let sg = &mut local[slot_of[&k]];
                        let cg = dot3(&p.color, &g);
                        for c in 0..3 {
                            sg.color[c] += alpha * t * g[c];
                        }
                        let d_alpha = t * cg - suffix / (1.0 - alpha);
                        suffix += alpha * t * cg;
                        if clamped {
                            continue;
                        }
                        sg.opacity += gv * d_alpha;
                        let d_g = p.opacity * d_alpha;
                        // G = exp(-m/2), m = a dx^2 + 2 b dx dy + c dy^2
                        let d_m = -0.5 * gv * d_g;
                        let dx = px - p.mean.x;
                        let dy = py - p.mean.y;
                        let [a, b, c] = p.conic;
                        sg.conic[0] += d_m * dx * dx;
                        sg.conic[1] += d_m * 2.0 * dx * dy;
                        sg.conic[2] += d_m * dy * dy;
                        sg.mean[0] -= d_m * 2.0 * (a * dx + b * dy);
                        sg.mean[1] -= d_m * 2.0 * (b * dx + c * dy);
                    }
                }
                local
            })
            .collect();

        let mut screen = vec![ScreenGrad::default(); self.prims.len()];
        for (bin, local) in self.bins.iter().zip(&tile_grads) {
            for (&k, g) in bin.iter().zip(local) {
                screen[k as usize].add(g);
            }
        }

        let mut grads = GaussianGrads::zeros(self.set);
        for (p, sg) in self.prims.iter().zip(&screen) {
            self.primitive_backward(p, sg, &mut grads);
        }
        Ok(grads)
    }

    fn primitive_backward(&self, p: &SplatPrimitive, sg: &ScreenGrad, grads: &mut GaussianGrads) {
        let set = self.set;
        let cam = self.cam;
        let i = p.index;
        grads.opacities[i] += sg.opacity;

        // color -> SH coefficients and view direction
        let mu = set.means[i];
        let view = mu - cam.center();
        let dist = view.norm();
        let dir = view / dist;
        let degree = set.sh_degree;
        let n_basis = sh_coeff_count(degree);
        let basis = sh_basis(&dir, degree);
        let d_raw = [0, 1, 2].map(|c| if p.raw_color[c] > 0.0 { sg.color[c] } else { 0.0 });
        let stride = set.sh_stride();
        let coeffs = set.sh_of(i);
        let mut d_dir = Vec3::zeros();
        if degree > 0 {
            let bgrad = sh_basis_grad(&dir, degree);
            for k in 1..n_basis {
                let w: f64 = (0..3).map(|c| coeffs[3 * k + c] * d_raw[c]).sum();
                d_dir += bgrad[k] * w;
            }
        }
        for k in 0..n_basis {
            for c in 0..3 {
                grads.sh[i * stride + 3 * k + c] += basis[k] * d_raw[c];
            }
        }
        grads.means[i] += (d_dir - dir * dir.dot(&d_dir)) / dist;

        // conic -> screen covariance
        let [a, b, c] = p.cov;
        let det = a * c - b * b;
        let det2 = det * det;
        let [ga, gb, gc] = sg.conic;
        let d_cov_a = ga * (-c * c / det2) + gb * (b * c / det2) + gc * (-b * b / det2);
        let d_cov_b = ga * (2.0 * b * c / det2) + gb * (-1.0 / det - 2.0 * b * b / det2) + gc * (2.0 * a * b / det2);
        let d_cov_c = ga * (-b * b / det2) + gb * (a * b / det2) + gc * (-a * a / det2);
        let g_cov = nalgebra::Matrix2::new(d_cov_a, 0.5 * d_cov_b, 0.5 * d_cov_b, d_cov_c);

        // screen covariance = T Sigma T^T with T = J W
        let t = p.cam_point;
        let w = cam.rotation;
        let jac = projection_jacobian(cam, &t);
        let tj = jac * w;
        let sigma = covariance_unchecked(&set.scales[i], &set.rotations[i]);
        let g_sigma = tj.transpose() * g_cov * tj;
        let g_t = 2.0 * g_cov * tj * sigma;
        let g_j = g_t * w.transpose();

        let iz = 1.0 / t.z;
        let iz2 = iz * iz;
        let iz3 = iz2 * iz;
        let mut d_t = Vec3::zeros();
        d_t.x += g_j[(0, 2)] * (-cam.fx * iz2);
        d_t.y += g_j[(1, 2)] * (-cam.fy * iz2);
        d_t.z += g_j[(0, 0)] * (-cam.fx * iz2)
            + g_j[(0, 2)] * (2.0 * cam.fx * t.x * iz3)
            + g_j[(1, 1)] * (-cam.fy * iz2)
            + g_j[(1, 2)] * (2.0 * cam.fy * t.y * iz3);
        // projected mean
        d_t.x += sg.mean[0] * cam.fx * iz;
        d_t.y += sg.mean[1] * cam.fy * iz;
        d_t.z += -sg.mean[0] * cam.fx * t.x * iz2 - sg.mean[1] * cam.fy * t.y * iz2;
        grads.means[i] += w.transpose() * d_t;

        // Sigma = M M^T, M = R S
        let q = set.rotations[i];
        let s = set.scales[i];
        let r = rotation_from_quat(&q);
        let m = r * Matrix3::from_diagonal(&s);
        let g_m = (g_sigma + g_sigma.transpose()) * m;
        let mut g_r = Matrix3::zeros();
        for row in 0..3 {
            for col in 0..3 {
                g_r[(row, col)] = g_m[(row, col)] * s[col];
                grads.scales[i][col] += g_m[(row, col)] * r[(row, col)];
            }
        }
        let g_q = rotation_from_quat_backward(&q, &g_r);
        for (acc, v) in grads.rotations[i].iter_mut().zip(g_q) {
            *acc += v;
        }
    }
}

fn dot3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[derive(Clone, Copy, Debug, Default)]
struct ScreenGrad {
    mean: [f64; 2],
    conic: [f64; 3],
    color: [f64; 3],
    opacity: f64,
}

impl ScreenGrad {
    fn add(&mut self, o: &ScreenGrad) {
        for k in 0..2 {
            self.mean[k] += o.mean[k];
        }
        for k in 0..3 {
            self.conic[k] += o.conic[k];
            self.color[k] += o.color[k];
        }
        self.opacity += o.opacity;
    }
}

/// Tiled forward pass.
pub fn render(set: &GaussianSet, cam: &Camera, settings: &RenderSettings) -> RenderedImage {
    PreparedScene::new(set, cam, settings).render()
}

/// Gradients of `sum(grad_image * render(set))` with respect to every attribute.
pub fn render_backward(
    set: &GaussianSet,
    cam: &Camera,
    settings: &RenderSettings,
    grad_image: &[[f64; 3]],
) -> Result<GaussianGrads> {
    PreparedScene::new(set, cam, settings).backward(grad_image)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Rotation3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn front_camera(w: usize, h: usize) -> Camera {
        Camera::look_at(Vec3::new(0.0, 0.0, 4.0), Vec3::zeros(), Vec3::y(), 0.8, w, h)
    }

    fn unit_q() -> [f64; 4] {
        [1.0, 0.0, 0.0, 0.0]
    }

    fn random_quat(rng: &mut impl Rng) -> [f64; 4] {
        let q: [f64; 4] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        q.map(|v| v / n)
    }

    #[test]
    fn covariance_identity_and_axis_scaling() {
        let c = covariance_from_sq(&Vec3::new(1.0, 1.0, 1.0), &unit_q()).unwrap();
        assert!((c - Matrix3::identity()).amax() < 1e-15);
        let c = covariance_from_sq(&Vec3::new(2.0, 1.0, 1.0), &unit_q()).unwrap();
        assert!((c - Matrix3::from_diagonal(&Vec3::new(4.0, 1.0, 1.0))).amax() < 1e-15);
        assert!(covariance_from_sq(&Vec3::new(1.0, 1.0, 1.0), &[1.1, 0.0, 0.0, 0.0]).is_err());
        assert!(covariance_from_sq(&Vec3::new(0.0, 1.0, 1.0), &unit_q()).is_err());
    }

    #[test]
    fn quaternion_matrix_is_a_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let q = random_quat(&mut rng);
            let r = rotation_from_quat(&q);
            assert!((r.transpose() * r - Matrix3::identity()).amax() < 1e-12);
            assert!((r.determinant() - 1.0).abs() < 1e-12);
            let expected = nalgebra::UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]));
            assert!((r - expected.to_rotation_matrix().into_inner()).amax() < 1e-12);
        }
    }

    #[test]
    fn gaussian_value_examples() {
        let mu = Vec3::new(0.5, -0.2, 1.0);
        let cov = Matrix3::identity();
        assert_eq!(evaluate_gaussian(&mu, &mu, &cov).unwrap(), 1.0);
        let v = evaluate_gaussian(&(mu + Vec3::new(0.0, 1.0, 0.0)), &mu, &cov).unwrap();
        assert!((v - (-0.5f64).exp()).abs() < 1e-15);
        assert!((v - 0.60653).abs() < 1e-5);
        let singular = Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, 0.0));
        assert!(evaluate_gaussian(&mu, &mu, &singular).is_err());
    }

    #[test]
    fn gaussian_value_is_rotation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let cov = covariance_from_sq(
                &Vec3::new(rng.gen_range(0.2..2.0), rng.gen_range(0.2..2.0), rng.gen_range(0.2..2.0)),
                &random_quat(&mut rng),
            )
            .unwrap();
            let mu = Vec3::new(rng.gen_range(-1.0..1.0), 0.3, -0.4);
            let x = mu + Vec3::new(0.4, -0.3, 0.8);
            let rot = Rotation3::from_euler_angles(0.3, -1.1, 2.0).into_inner();
            let a = evaluate_gaussian(&x, &mu, &cov).unwrap();
            let b = evaluate_gaussian(&(rot * x), &(rot * mu), &(rot * cov * rot.transpose())).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sh_constant_band_and_offset() {
        let mut c = vec![0.0; 48];
        assert_eq!(evaluate_sh(&c, &Vec3::z()).unwrap(), [0.5; 3]);
        c[0] = 0.8;
        c[1] = -0.4;
        c[2] = 1.2;
        for d in [Vec3::x(), -Vec3::y(), Vec3::new(0.6, 0.0, 0.8)] {
            let rgb = evaluate_sh(&c, &d).unwrap();
            assert!((rgb[0] - (0.8 * SH_C0 + 0.5)).abs() < 1e-15);
            assert!((rgb[1] - (-0.4 * SH_C0 + 0.5)).abs() < 1e-15);
            assert!((rgb[2] - (1.2 * SH_C0 + 0.5)).abs() < 1e-15);
        }
        assert!(evaluate_sh(&c, &Vec3::new(1.0, 1.0, 0.0)).is_err());
        assert!(evaluate_sh(&c[..47], &Vec3::z()).is_err());
    }

    #[test]
    fn sh_basis_is_orthonormal_and_has_band_parity() {
        // product quadrature: Gauss-free midpoint rule in cos(theta) and phi
        let (nt, np) = (200, 400);
        let mut gram = [[0.0; 16]; 16];
        for it in 0..nt {
            let ct = -1.0 + (it as f64 + 0.5) * 2.0 / nt as f64;
            let st = (1.0 - ct * ct).sqrt();
            for ip in 0..np {
                let phi = (ip as f64 + 0.5) * 2.0 * std::f64::consts::PI / np as f64;
                let d = Vec3::new(st * phi.cos(), st * phi.sin(), ct);
                let b = sh_basis(&d, 3);
                let w = (2.0 / nt as f64) * (2.0 * std::f64::consts::PI / np as f64);
                for i in 0..16 {
                    for j in 0..16 {
                        gram[i][j] += w * b[i] * b[j];
                    }
                }
            }
        }
        for i in 0..16 {
            for j in 0..16 {
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((gram[i][j] - expected).abs() < 1e-3, "({i},{j}) = {}", gram[i][j]);
            }
        }
        let d = Vec3::new(0.3, -0.5, 0.81).normalize();
        let (p, n) = (sh_basis(&d, 3), sh_basis(&(-d), 3));
        for k in 0..16 {
            let band = (k as f64).sqrt().floor() as i32;
            let sign = if band % 2 == 0 { 1.0 } else { -1.0 };
            assert!((n[k] - sign * p[k]).abs() < 1e-15);
        }
    }

    #[test]
    fn sh_gradient_matches_differences() {
        let d = Vec3::new(0.3, -0.5, 0.7);
        let g = sh_basis_grad(&d, 3);
        let h = 1e-6;
        for axis in 0..3 {
            let mut dp = d;
            let mut dm = d;
            dp[axis] += h;
            dm[axis] -= h;
            let (bp, bm) = (sh_basis(&dp, 3), sh_basis(&dm, 3));
            for k in 0..16 {
                assert!(((bp[k] - bm[k]) / (2.0 * h) - g[k][axis]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn on_axis_projection_matches_closed_form() {
        let cam = front_camera(64, 64);
        let sigma = 0.05;
        for depth in [2.0, 4.0] {
            let mut set = GaussianSet::empty(0);
            set.push(Vec3::new(0.0, 0.0, 4.0 - depth), Vec3::repeat(sigma), unit_q(), 0.5, &[0.0; 3]);
            let p = project(&set, 0, &cam).unwrap();
            let expected = (cam.fx * sigma / depth).powi(2) + DILATION;
            assert!((p.cov[0] - expected).abs() < 1e-12);
            assert!((p.cov[2] - expected).abs() < 1e-12);
            assert!(p.cov[1].abs() < 1e-12);
        }
        let std_at = |depth: f64| {
            let mut set = GaussianSet::empty(0);
            set.push(Vec3::new(0.0, 0.0, 4.0 - depth), Vec3::repeat(sigma), unit_q(), 0.5, &[0.0; 3]);
            (project(&set, 0, &cam).unwrap().cov[0] - DILATION).sqrt()
        };
        assert!((std_at(3.0) / std_at(6.0) - 2.0).abs() < 1e-6);
    }

    #[test]
    fn behind_camera_is_culled() {
        let cam = front_camera(32, 32);
        let mut set = GaussianSet::empty(0);
        set.push(Vec3::new(0.0, 0.0, 5.0), Vec3::repeat(0.1), unit_q(), 0.5, &[0.0; 3]);
        assert!(project(&set, 0, &cam).is_none());
    }

    #[test]
    fn empty_scene_is_background() {
        let cam = front_camera(8, 6);
        let settings = RenderSettings::default();
        let set = GaussianSet::empty(3);
        let img = render(&set, &cam, &settings);
        assert!(img.color.iter().all(|c| *c == [1.0; 3]));
        assert_eq!(img, render_reference(&set, &cam, &settings));
    }

    #[test]
    fn single_gaussian_pulls_pixel_toward_its_color() {
        let cam = front_camera(33, 33);
        let settings = RenderSettings {
            background: [0.2, 0.3, 0.4],
            tile_size: 16,
        };
        // the camera axis hits the center of pixel (16, 16)
        let cam = Camera {
            cx: 16.5,
            cy: 16.5,
            ..cam
        };
        let mut set = GaussianSet::empty(0);
        let k0 = [0.9, -0.5, 0.1];
        set.push(Vec3::zeros(), Vec3::repeat(0.05), unit_q(), 0.7, &k0);
        let img = render(&set, &cam, &settings);
        let c = img.pixel(16, 16);
        for ch in 0..3 {
            let color = (k0[ch] * SH_C0 + 0.5).max(0.0);
            let expected = 0.7 * color + 0.3 * settings.background[ch];
            assert!((c[ch] - expected).abs() < 1e-12);
        }
        assert_eq!(img, render_reference(&set, &cam, &settings));
    }

    #[test]
    fn two_gaussians_blend_in_depth_order() {
        let cam = Camera {
            cx: 8.5,
            cy: 8.5,
            ..front_camera(17, 17)
        };
        let settings = RenderSettings {
            background: [0.0; 3],
            tile_size: 16,
        };
        let red = [1.0 / SH_C0, -0.5 / SH_C0, -0.5 / SH_C0];
        let blue = [-0.5 / SH_C0, -0.5 / SH_C0, 1.0 / SH_C0];
        let build = |z_red: f64, z_blue: f64| {
            let mut set = GaussianSet::empty(0);
            set.push(Vec3::new(0.0, 0.0, z_red), Vec3::repeat(0.05), unit_q(), 0.6, &red);
            set.push(Vec3::new(0.0, 0.0, z_blue), Vec3::repeat(0.05), unit_q(), 0.5, &blue);
            set
        };
        // red nearer the camera (larger z is closer)
        let c = render(&build(0.5, 0.0), &cam, &settings).pixel(8, 8);
        let expected = [0.6 * 1.5, 0.0, (1.0 - 0.6) * 0.5 * 1.5];
        for ch in 0..3 {
            assert!((c[ch] - expected[ch]).abs() < 1e-6, "{c:?}");
        }
        let c = render(&build(0.0, 0.5), &cam, &settings).pixel(8, 8);
        let expected = [(1.0 - 0.5) * 0.6 * 1.5, 0.0, 0.5 * 1.5];
        for ch in 0..3 {
            assert!((c[ch] - expected[ch]).abs() < 1e-6, "{c:?}");
        }
    }

    #[test]
    fn zero_image_gradient_gives_zero_gradients() {
        let cam = front_camera(16, 16);
        let mut set = GaussianSet::empty(1);
        set.push(Vec3::zeros(), Vec3::repeat(0.2), unit_q(), 0.5, &[0.1; 12]);
        let g = render_backward(&set, &cam, &RenderSettings::default(), &vec![[0.0; 3]; 256]).unwrap();
        assert_eq!(g, GaussianGrads::zeros(&set));
        assert!(render_backward(&set, &cam, &RenderSettings::default(), &[[0.0; 3]; 3]).is_err());
    }

    #[test]
    fn single_gaussian_opacity_gradient_is_analytic() {
        let cam = Camera {
            cx: 8.5,
            cy: 8.5,
            ..front_camera(17, 17)
        };
        let settings = RenderSettings {
            background: [0.25, 0.5, 0.75],
            tile_size: 8,
        };
        let mut set = GaussianSet::empty(0);
        let k0 = [0.4, 0.1, -0.2];
        set.push(Vec3::new(0.01, -0.02, 0.0), Vec3::repeat(0.5), unit_q(), 0.6, &k0);
        let p = project(&set, 0, &cam).unwrap();
        let (px, py) = (11usize, 7usize);
        let (_, g2d, _) = p.alpha_at(px as f64 + 0.5, py as f64 + 0.5).unwrap();
        let mut grad = vec![[0.0; 3]; 17 * 17];
        let adj = [1.0, -2.0, 0.5];
        grad[py * 17 + px] = adj;
        let g = render_backward(&set, &cam, &settings, &grad).unwrap();
        // C = a c + (1 - a) bg with a = opacity * G
        let expected: f64 = (0..3).map(|ch| g2d * (p.color[ch] - settings.background[ch]) * adj[ch]).sum();
        assert!((g.opacities[0] - expected).abs() < 1e-12);
    }

    fn random_scene(rng: &mut impl Rng, n: usize, degree: usize) -> GaussianSet {
        let mut set = GaussianSet::empty(degree);
        let k = 3 * sh_coeff_count(degree);
        for _ in 0..n {
            let sh: Vec<f64> = (0..k).map(|_| rng.gen_range(-0.6..0.6)).collect();
            set.push(
                Vec3::new(rng.gen_range(-0.8..0.8), rng.gen_range(-0.8..0.8), rng.gen_range(-0.8..0.8)),
                Vec3::new(rng.gen_range(0.03..0.3), rng.gen_range(0.03..0.3), rng.gen_range(0.03..0.3)),
                random_quat(rng),
                rng.gen_range(0.05..0.95),
                &sh,
            );
        }
        set
    }

    #[test]
    fn tiled_matches_reference_on_random_scenes() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let settings = RenderSettings::default();
        for _ in 0..5 {
            let set = random_scene(&mut rng, 60, 3);
            let cam = orbit(&mut rng, 40, 30);
            let a = render(&set, &cam, &settings);
            let b = render_reference(&set, &cam, &settings);
            assert_eq!(a, b);
            assert!(a.alpha.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    fn orbit(rng: &mut impl Rng, w: usize, h: usize) -> Camera {
        crate::geometry::orbit_camera(&front_camera(w, h), Vec3::zeros(), rng.gen_range(-1.0..1.0), rng.gen_range(-0.5..0.5))
    }

    #[test]
    fn input_order_does_not_matter() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let set = random_scene(&mut rng, 30, 1);
        let cam = front_camera(32, 32);
        let mut perm: Vec<usize> = (0..30).collect();
        perm.reverse();
        perm.swap(3, 17);
        let mut shuffled = GaussianSet::empty(1);
        for &i in &perm {
            shuffled.push(set.means[i], set.scales[i], set.rotations[i], set.opacities[i], set.sh_of(i));
        }
        let settings = RenderSettings::default();
        let a = render(&set, &cam, &settings);
        let b = render(&shuffled, &cam, &settings);
        for (x, y) in a.color.iter().zip(&b.color) {
            for c in 0..3 {
                assert!((x[c] - y[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let set = random_scene(&mut rng, 40, 3);
        let cam = front_camera(40, 40);
        let grad: Vec<[f64; 3]> = (0..1600).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        let settings = RenderSettings::default();
        let a = render_backward(&set, &cam, &settings, &grad).unwrap();
        let b = render_backward(&set, &cam, &settings, &grad).unwrap();
        assert_eq!(a, b);
    }
}
