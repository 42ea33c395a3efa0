#![allow(dead_code)]

pub mod gradcheck;

use rand::Rng;
use uvlod::geometry::{orbit_camera, Camera, Vec3};
use uvlod::splat::{sh_coeff_count, GaussianSet};

/// Largest component-wise error of `analytic` against `numeric`, relative to
/// `max(|numeric_i|, 1e-2 * max_j |numeric_j|)`.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return analytic.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    }
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / n.abs().max(1e-2 * scale))
        .fold(0.0, f64::max)
}

/// Central differences of `f` at every coordinate selected by `get`/`set`.
pub fn central_diff(n: usize, h: f64, mut eval: impl FnMut(usize, f64) -> f64) -> Vec<f64> {
    (0..n)
        .map(|i| (eval(i, h) - eval(i, -h)) / (2.0 * h))
        .collect()
}

pub fn random_quat(rng: &mut impl Rng) -> [f64; 4] {
    let q: [f64; 4] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    q.map(|v| v / n)
}

pub fn random_scene(rng: &mut impl Rng, n: usize, degree: usize, max_opacity: f64) -> GaussianSet {
    let mut set = GaussianSet::empty(degree);
    let k = 3 * sh_coeff_count(degree);
    for _ in 0..n {
        let sh: Vec<f64> = (0..k).map(|_| rng.gen_range(-0.6..0.6)).collect();
        set.push(
            Vec3::new(rng.gen_range(-0.8..0.8), rng.gen_range(-0.8..0.8), rng.gen_range(-0.8..0.8)),
            Vec3::new(rng.gen_range(0.05..0.35), rng.gen_range(0.05..0.35), rng.gen_range(0.05..0.35)),
            random_quat(rng),
            rng.gen_range(0.05..max_opacity),
            &sh,
        );
    }
    set
}

pub fn random_camera(rng: &mut impl Rng, w: usize, h: usize) -> Camera {
    let base = Camera::look_at(Vec3::new(0.0, 0.0, 4.0), Vec3::zeros(), Vec3::y(), 0.8, w, h);
    orbit_camera(&base, Vec3::zeros(), rng.gen_range(-1.0..1.0), rng.gen_range(-0.5..0.5))
}

/// Small desk-head model and a matching synthetic dataset.
pub fn tiny_setup(frames: usize) -> (uvlod::model::AvatarModel, Vec<uvlod::dataset::FrameSample>) {
    use uvlod::dataset::{generate_synthetic_dataset, SyntheticConfig};
    use uvlod::model::{AvatarModel, ModelConfig};
    let config = ModelConfig {
        s_max: 16,
        s_min: 4,
        d_f: 6,
        n_freq: 2,
        code_dim: 4,
        expr_dim: 8,
        mapper_hidden: 8,
        head_hidden: 16,
        head_layers: 2,
        sh_degree: 1,
        ..ModelConfig::default()
    };
    let model = AvatarModel::desk(config, 5).unwrap();
    let data = SyntheticConfig {
        frames,
        width: 24,
        height: 24,
        resolution: 24,
        expr_dim: 8,
        sh_degree: 1,
        ..SyntheticConfig::default()
    };
    let ds = generate_synthetic_dataset(model.mesh(), &data).unwrap();
    (model, ds.frames)
}
