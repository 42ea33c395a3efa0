//! Multi-level learnable UV feature field.
//!
//! A field is a pyramid of square feature maps. A map at any resolution
//! between the smallest and largest level is produced by resizing every
//! level with a Catmull-Rom bicubic filter and blending the results with
//! softmax weights over log-resolution distance.

use ndarray::Array3;
use rand::Rng;

use crate::error::{ensure, Error, Result};

/// Continuous level of detail: 0 is the finest, 1 the coarsest.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct LodValue(f64);

impl LodValue {
    pub const FINEST: LodValue = LodValue(0.0);
    pub const COARSEST: LodValue = LodValue(1.0);

    pub fn new(l: f64) -> Result<Self> {
        ensure!(
            (0.0..=1.0).contains(&l),
            InvalidArgument,
            "lod {l} outside [0, 1]"
        );
        Ok(LodValue(l))
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

/// Square `S x S x D` feature map, stored row-major with channels last.
///
/// Row `j` holds texels at `v = (j + 0.5) / S`, column `i` those at
/// `u = (i + 0.5) / S`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    data: Array3<f64>,
}

impl FeatureMap {
    pub fn zeros(resolution: usize, channels: usize) -> Self {
        assert!(resolution >= 1 && channels >= 1, "empty feature map");
        FeatureMap {
            data: Array3::zeros((resolution, resolution, channels)),
        }
    }

    pub fn from_array(data: Array3<f64>) -> Result<Self> {
        let (h, w, c) = data.dim();
        ensure!(h == w, ShapeMismatch, "feature map must be square, got {h}x{w}");
        ensure!(h >= 1 && c >= 1, ShapeMismatch, "empty feature map {h}x{w}x{c}");
        ensure!(
            data.iter().all(|v| v.is_finite()),
            InvalidArgument,
            "feature map contains non-finite values"
        );
        Ok(FeatureMap {
            data: data.as_standard_layout().into_owned(),
        })
    }

    pub fn from_fn(
        resolution: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        FeatureMap {
            data: Array3::from_shape_fn((resolution, resolution, channels), |(j, i, c)| f(j, i, c)),
        }
    }

    pub fn resolution(&self) -> usize {
        self.data.dim().0
    }

    pub fn channels(&self) -> usize {
        self.data.dim().2
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array3<f64> {
        &mut self.data
    }

    pub fn as_slice(&self) -> &[f64] {
        self.data.as_slice().expect("standard layout")
    }

    pub fn as_slice_mut(&mut self) -> &mut [f64] {
        self.data.as_slice_mut().expect("standard layout")
    }

    /// Channel vector of texel `(row, col)`.
    pub fn texel(&self, row: usize, col: usize) -> &[f64] {
        let c = self.channels();
        let start = (row * self.resolution() + col) * c;
        &self.as_slice()[start..start + c]
    }

    fn same_shape(&self, other: &FeatureMap) -> bool {
        self.data.dim() == other.data.dim()
    }
}

/// Rounds `s_max - l (s_max - s_min)` to the nearest integer, ties toward `s_max`.
pub fn resolution_for_lod(l: LodValue, s_max: usize, s_min: usize) -> Result<usize> {
    ensure!(s_min >= 1, InvalidArgument, "s_min must be positive");
    ensure!(
        s_min <= s_max,
        InvalidArgument,
        "s_min ({s_min}) exceeds s_max ({s_max})"
    );
    let exact = s_max as f64 - l.get() * (s_max - s_min) as f64;
    let s = (exact + 0.5).floor() as usize;
    Ok(s.clamp(s_min, s_max))
}

/// Softmax over `-|ln S_i - ln S| / tau`.
pub fn blend_weights(resolutions: &[usize], target_s: usize, tau: f64) -> Result<Vec<f64>> {
    ensure!(!resolutions.is_empty(), InvalidArgument, "no resolutions");
    ensure!(
        tau > 0.0 && tau.is_finite(),
        InvalidArgument,
        "temperature must be positive, got {tau}"
    );
    ensure!(target_s >= 1, InvalidArgument, "target resolution must be positive");
    ensure!(
        resolutions.iter().all(|&s| s >= 1),
        InvalidArgument,
        "resolutions must be positive"
    );
    let r = (target_s as f64).ln();
    let logits: Vec<f64> = resolutions
        .iter()
        .map(|&s| -((s as f64).ln() - r).abs() / tau)
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Catmull-Rom kernel (a = -0.5).
pub fn catmull_rom(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Four clamped taps per output index along one axis.
#[derive(Clone, Debug)]
pub struct ResizeAxis {
    taps: Vec<[(usize, f64); 4]>,
}

impl ResizeAxis {
    pub fn new(s_in: usize, s_out: usize) -> Self {
        let scale = s_in as f64 / s_out as f64;
        let last = s_in as isize - 1;
        let taps = (0..s_out)
            .map(|o| {
                let x = (o as f64 + 0.5) * scale - 0.5;
                let base = x.floor();
                let frac = x - base;
                let base = base as isize;
                let mut t = [(0usize, 0.0f64); 4];
                for (k, tap) in t.iter_mut().enumerate() {
                    let offset = k as isize - 1;
                    let idx = (base + offset).clamp(0, last) as usize;
                    *tap = (idx, catmull_rom(frac - offset as f64));
                }
                t
            })
            .collect();
        ResizeAxis { taps }
    }

    pub fn taps(&self, out_index: usize) -> &[(usize, f64); 4] {
        &self.taps[out_index]
    }
}

/// Bicubic resize to `target_s x target_s`. Same-size resizes copy the input.
pub fn bicubic_resize(map: &FeatureMap, target_s: usize) -> Result<FeatureMap> {
    ensure!(target_s >= 1, InvalidArgument, "target resolution must be positive");
    let s_in = map.resolution();
    if s_in == target_s {
        return Ok(map.clone());
    }
    let d = map.channels();
    let axis = ResizeAxis::new(s_in, target_s);
    let src = map.as_slice();

    // horizontal pass: s_in rows x target_s cols
    let mut tmp = vec![0.0; s_in * target_s * d];
    for row in 0..s_in {
        for ox in 0..target_s {
            let out = &mut tmp[(row * target_s + ox) * d..][..d];
            for &(ix, w) in axis.taps(ox) {
                let inp = &src[(row * s_in + ix) * d..][..d];
                for (o, v) in out.iter_mut().zip(inp) {
                    *o += w * v;
                }
            }
        }
    }

    let mut result = FeatureMap::zeros(target_s, d);
    let dst = result.as_slice_mut();
    for oy in 0..target_s {
        for &(iy, w) in axis.taps(oy) {
            let inp = &tmp[iy * target_s * d..][..target_s * d];
            let out = &mut dst[oy * target_s * d..][..target_s * d];
            for (o, v) in out.iter_mut().zip(inp) {
                *o += w * v;
            }
        }
    }
    Ok(result)
}

/// Transpose of [`bicubic_resize`]: maps a gradient at the output resolution
/// back onto a `source_s x source_s` grid.
pub fn bicubic_resize_adjoint(grad: &FeatureMap, source_s: usize) -> Result<FeatureMap> {
    ensure!(source_s >= 1, InvalidArgument, "source resolution must be positive");
    let s_out = grad.resolution();
    if s_out == source_s {
        return Ok(grad.clone());
    }
    let d = grad.channels();
    let axis = ResizeAxis::new(source_s, s_out);
    let g = grad.as_slice();

    let mut tmp = vec![0.0; source_s * s_out * d];
    for oy in 0..s_out {
        let gin = &g[oy * s_out * d..][..s_out * d];
        for &(iy, w) in axis.taps(oy) {
            let out = &mut tmp[iy * s_out * d..][..s_out * d];
            for (o, v) in out.iter_mut().zip(gin) {
                *o += w * v;
            }
        }
    }

    let mut result = FeatureMap::zeros(source_s, d);
    let dst = result.as_slice_mut();
    for row in 0..source_s {
        for ox in 0..s_out {
            let gin = &tmp[(row * s_out + ox) * d..][..d];
            for &(ix, w) in axis.taps(ox) {
                let out = &mut dst[(row * source_s + ix) * d..][..d];
                for (o, v) in out.iter_mut().zip(gin) {
                    *o += w * v;
                }
            }
        }
    }
    Ok(result)
}

/// Weighted blend of every level resized to `target_s`. Works for any
/// non-empty level list, including a single level.
pub fn blend_resample(levels: &[FeatureMap], target_s: usize, tau: f64) -> Result<FeatureMap> {
    let resolutions: Vec<usize> = levels.iter().map(FeatureMap::resolution).collect();
    let weights = blend_weights(&resolutions, target_s, tau)?;
    let channels = levels[0].channels();
    ensure!(
        levels.iter().all(|m| m.channels() == channels),
        ShapeMismatch,
        "levels disagree on channel count"
    );
    let mut out = FeatureMap::zeros(target_s, channels);
    for (level, w) in levels.iter().zip(&weights) {
        let resized = bicubic_resize(level, target_s)?;
        for (o, v) in out.as_slice_mut().iter_mut().zip(resized.as_slice()) {
            *o += w * v;
        }
    }
    Ok(out)
}

/// Accumulates `d loss / d level` into `level_grads` for a blend at the
/// resolution of `grad_out`.
pub fn blend_resample_backward_into(
    levels: &[FeatureMap],
    tau: f64,
    grad_out: &FeatureMap,
    level_grads: &mut [FeatureMap],
) -> Result<()> {
    ensure!(
        level_grads.len() == levels.len(),
        ShapeMismatch,
        "expected {} gradient buffers, got {}",
        levels.len(),
        level_grads.len()
    );
    let resolutions: Vec<usize> = levels.iter().map(FeatureMap::resolution).collect();
    let weights = blend_weights(&resolutions, grad_out.resolution(), tau)?;
    for ((level, acc), w) in levels.iter().zip(level_grads.iter_mut()).zip(&weights) {
        ensure!(
            acc.same_shape(level),
            ShapeMismatch,
            "gradient buffer shape differs from level shape"
        );
        ensure!(
            grad_out.channels() == level.channels(),
            ShapeMismatch,
            "gradient has {} channels, levels have {}",
            grad_out.channels(),
            level.channels()
        );
        let back = bicubic_resize_adjoint(grad_out, level.resolution())?;
        for (a, g) in acc.as_slice_mut().iter_mut().zip(back.as_slice()) {
            *a += w * g;
        }
    }
    Ok(())
}

/// Ordered pyramid of learnable feature maps with its blending temperature.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureField {
    levels: Vec<FeatureMap>,
    tau: f64,
    s_min: usize,
    s_max: usize,
}

impl FeatureField {
    pub fn new(levels: Vec<FeatureMap>, tau: f64) -> Result<Self> {
        ensure!(levels.len() >= 2, InvalidArgument, "field needs at least two levels");
        ensure!(
            tau > 0.0 && tau.is_finite(),
            InvalidArgument,
            "temperature must be positive, got {tau}"
        );
        ensure!(
            levels.windows(2).all(|w| w[0].resolution() < w[1].resolution()),
            InvalidArgument,
            "level resolutions must be strictly increasing"
        );
        let channels = levels[0].channels();
        ensure!(
            levels.iter().all(|m| m.channels() == channels),
            ShapeMismatch,
            "levels disagree on channel count"
        );
        let s_min = levels[0].resolution();
        let s_max = levels[levels.len() - 1].resolution();
        Ok(FeatureField {
            levels,
            tau,
            s_min,
            s_max,
        })
    }

    /// Levels at `resolutions` with i.i.d. uniform values in `[-1e-2, 1e-2]`.
    pub fn random<R: Rng>(resolutions: &[usize], channels: usize, tau: f64, rng: &mut R) -> Result<Self> {
        ensure!(channels >= 1, InvalidArgument, "channels must be positive");
        ensure!(
            resolutions.iter().all(|&s| s >= 1),
            InvalidArgument,
            "resolutions must be positive"
        );
        let levels = resolutions
            .iter()
            .map(|&s| FeatureMap::from_fn(s, channels, |_, _, _| rng.gen_range(-1e-2..=1e-2)))
            .collect();
        FeatureField::new(levels, tau)
    }

    pub fn levels(&self) -> &[FeatureMap] {
        &self.levels
    }

    pub fn levels_mut(&mut self) -> &mut [FeatureMap] {
        &mut self.levels
    }

    pub fn resolutions(&self) -> Vec<usize> {
        self.levels.iter().map(FeatureMap::resolution).collect()
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn channels(&self) -> usize {
        self.levels[0].channels()
    }

    pub fn s_min(&self) -> usize {
        self.s_min
    }

    pub fn s_max(&self) -> usize {
        self.s_max
    }

    pub fn resolution_for(&self, l: LodValue) -> usize {
        resolution_for_lod(l, self.s_max, self.s_min).expect("field invariants hold")
    }

    pub fn weights_for(&self, l: LodValue) -> Vec<f64> {
        blend_weights(&self.resolutions(), self.resolution_for(l), self.tau).expect("field invariants hold")
    }

    pub fn resample(&self, l: LodValue) -> Result<FeatureMap> {
        blend_resample(&self.levels, self.resolution_for(l), self.tau)
    }

    pub fn zero_grads(&self) -> Vec<FeatureMap> {
        self.levels
            .iter()
            .map(|m| FeatureMap::zeros(m.resolution(), m.channels()))
            .collect()
    }

    pub fn resample_backward(&self, l: LodValue, grad_out: &FeatureMap) -> Result<Vec<FeatureMap>> {
        let mut grads = self.zero_grads();
        self.resample_backward_into(l, grad_out, &mut grads)?;
        Ok(grads)
    }

    /// Adds this LOD's level gradients into `grads`; repeated calls sum.
    pub fn resample_backward_into(
        &self,
        l: LodValue,
        grad_out: &FeatureMap,
        grads: &mut [FeatureMap],
    ) -> Result<()> {
        let s = self.resolution_for(l);
        if grad_out.resolution() != s || grad_out.channels() != self.channels() {
            return Err(Error::ShapeMismatch(format!(
                "gradient is {}x{}x{}, lod {} resamples to {s}x{s}x{}",
                grad_out.resolution(),
                grad_out.resolution(),
                grad_out.channels(),
                l.get(),
                self.channels()
            )));
        }
        blend_resample_backward_into(&self.levels, self.tau, grad_out, grads)
    }
}
