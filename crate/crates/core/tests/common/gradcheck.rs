//! Finite-difference checks of every hand-written backward pass.

use super::{central_diff, max_rel_err, random_camera, random_scene};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uvlod::nn::{Activation, DenseLayer, Mlp};
use uvlod::splat::{render, render_backward, GaussianSet, RenderSettings};
use uvlod::uv_field::{FeatureField, FeatureMap, LodValue};

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Worst relative error of the field resample backward pass.
pub fn resample_error() -> f64 {
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for &l in &[0.0, 0.37, 0.8, 1.0] {
        let mut field = FeatureField::random(&[8, 16, 32], 2, 0.35, &mut rng).unwrap();
        for level in field.levels_mut() {
            for v in level.as_slice_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
        }
        let lod = LodValue::new(l).unwrap();
        let s = field.resolution_for(lod);
        let upstream = FeatureMap::from_fn(s, 2, |_, _, _| rng.gen_range(-1.0..1.0));
        let grads = field.resample_backward(lod, &upstream).unwrap();

        for level in 0..3 {
            let n = field.levels()[level].as_slice().len();
            // sample a subset of coordinates to keep the check fast
            let picks: Vec<usize> = (0..40).map(|_| rng.gen_range(0..n)).collect();
            let numeric = central_diff(picks.len(), 1e-5, |k, h| {
                let mut f = field.clone();
                f.levels_mut()[level].as_slice_mut()[picks[k]] += h;
                dot(f.resample(lod).unwrap().as_slice(), upstream.as_slice())
            });
            let analytic: Vec<f64> = picks.iter().map(|&i| grads[level].as_slice()[i]).collect();
            worst = worst.max(max_rel_err(&analytic, &numeric));
        }
    }
    worst
}

fn check_mlp(net: &Mlp, rng: &mut ChaCha8Rng) -> f64 {
    // nonzero biases keep relu pre-activations off the kink
    let mut net = net.clone();
    for layer in net.layers_mut() {
        layer.bias.mapv_inplace(|_| rng.gen_range(0.05..0.3) * if rng.gen() { 1.0 } else { -1.0 });
    }
    let net = &net;
    let batch = 3;
    let x = Array2::from_shape_simple_fn((batch, net.input_dim()), || rng.gen_range(-1.0..1.0));
    let up = Array2::from_shape_simple_fn((batch, net.output_dim()), || rng.gen_range(-1.0..1.0));
    let (_, cache) = net.forward(x.view()).unwrap();
    let (grads, dx) = net.backward(&cache, up.view()).unwrap();
    let loss = |n: &Mlp, x: &Array2<f64>| (n.infer(x.view()).unwrap() * &up).sum();

    let mut worst = 0.0f64;
    for (li, layer) in net.layers().iter().enumerate() {
        let nw = layer.weights.len();
        let numeric = central_diff(nw + layer.bias.len(), 1e-5, |k, h| {
            let mut n = net.clone();
            let l = &mut n.layers_mut()[li];
            if k < nw {
                l.weights.as_slice_mut().unwrap()[k] += h;
            } else {
                l.bias[k - nw] += h;
            }
            loss(&n, &x)
        });
        let g = &grads.layers[li];
        let analytic: Vec<f64> = g.weights.iter().chain(g.bias.iter()).copied().collect();
        worst = worst.max(max_rel_err(&analytic, &numeric));
    }
    let numeric = central_diff(x.len(), 1e-5, |k, h| {
        let mut xp = x.clone();
        xp.as_slice_mut().unwrap()[k] += h;
        loss(net, &xp)
    });
    worst.max(max_rel_err(dx.as_slice().unwrap(), &numeric))
}

/// Worst relative error of the MLP backward pass over every activation pair.
pub fn mlp_error() -> f64 {
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let acts = [
        Activation::Identity,
        Activation::Relu,
        Activation::Tanh,
        Activation::Sigmoid,
        Activation::Exp,
    ];
    for &hidden in &acts {
        for &out in &acts {
            let net = Mlp::random(&[4, 6, 5, 3], hidden, out, &mut rng);
            worst = worst.max(check_mlp(&net, &mut rng));
        }
    }
    // a single-layer network exercises the input gradient without hidden layers
    let layer = DenseLayer::random(5, 2, Activation::Tanh, &mut rng);
    let net = Mlp::new(vec![layer]).unwrap();
    worst.max(check_mlp(&net, &mut rng))
}

/// Numeric gradients of `sum(upstream * render(set))` for every attribute.
fn render_fd(
    set: &GaussianSet,
    cam: &uvlod::geometry::Camera,
    settings: &RenderSettings,
    upstream: &[[f64; 3]],
    h: f64,
) -> Vec<Vec<f64>> {
    let loss = |s: &GaussianSet| {
        render(s, cam, settings)
            .color
            .iter()
            .zip(upstream)
            .map(|(c, g)| c[0] * g[0] + c[1] * g[1] + c[2] * g[2])
            .sum::<f64>()
    };
    let n = set.len();
    let means = central_diff(3 * n, h, |k, d| {
        let mut s = set.clone();
        s.means[k / 3][k % 3] += d;
        loss(&s)
    });
    let scales = central_diff(3 * n, h, |k, d| {
        let mut s = set.clone();
        s.scales[k / 3][k % 3] += d;
        loss(&s)
    });
    let rotations = central_diff(4 * n, h, |k, d| {
        let mut s = set.clone();
        s.rotations[k / 4][k % 4] += d;
        loss(&s)
    });
    let opacities = central_diff(n, h, |k, d| {
        let mut s = set.clone();
        s.opacities[k] += d;
        loss(&s)
    });
    let sh = central_diff(set.sh.len(), h, |k, d| {
        let mut s = set.clone();
        s.sh[k] += d;
        loss(&s)
    });
    vec![means, scales, rotations, opacities, sh]
}

/// Worst relative error of the splat render backward pass.
pub fn render_error() -> f64 {
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let settings = RenderSettings {
        background: [0.3, 0.6, 0.9],
        tile_size: 8,
    };
    for trial in 0..4 {
        let n = rng.gen_range(2..=8);
        let degree = trial % 4;
        let set = random_scene(&mut rng, n, degree, 0.9);
        let cam = random_camera(&mut rng, 16, 16);
        let upstream: Vec<[f64; 3]> = (0..256)
            .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
            .collect();
        let g = render_backward(&set, &cam, &settings, &upstream).unwrap();
        let numeric = render_fd(&set, &cam, &settings, &upstream, 1e-6);
        let analytic = [
            g.means.iter().flat_map(|v| v.iter().copied()).collect::<Vec<_>>(),
            g.scales.iter().flat_map(|v| v.iter().copied()).collect(),
            g.rotations.iter().flat_map(|v| v.iter().copied()).collect(),
            g.opacities.clone(),
            g.sh.clone(),
        ];
        for (a, nmr) in analytic.iter().zip(&numeric) {
            worst = worst.max(max_rel_err(a, nmr));
        }
    }
    worst
}

/// Worst relative error from field parameters through to rendered pixels.
pub fn full_chain_error() -> f64 {
    let mut worst = 0.0f64;
    use uvlod::geometry::{Camera, ExpressionVector, Vec3};
    use uvlod::model::{AvatarModel, ModelConfig};
    use uvlod::splat::PreparedScene;

    let config = ModelConfig {
        s_max: 4,
        s_min: 2,
        d_f: 3,
        n_freq: 1,
        code_dim: 2,
        expr_dim: 8,
        mapper_hidden: 4,
        head_hidden: 6,
        head_layers: 1,
        sh_degree: 1,
        ..ModelConfig::default()
    };
    let mut model = AvatarModel::desk(config, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for level in model.field.levels_mut() {
        for v in level.as_slice_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
    }
    let expr = ExpressionVector((0..8).map(|_| rng.gen_range(-0.5..0.5)).collect());
    let cam = Camera::look_at(Vec3::new(0.04, 0.03, 0.35), Vec3::zeros(), Vec3::y(), 0.9, 16, 16);
    let settings = RenderSettings::default();
    let upstream: Vec<[f64; 3]> = (0..256)
        .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
        .collect();
    let loss = |m: &AvatarModel, lod| {
        let set = m.gaussians(&expr, lod).unwrap();
        render(&set, &cam, &settings)
            .color
            .iter()
            .zip(&upstream)
            .map(|(c, g)| c[0] * g[0] + c[1] * g[1] + c[2] * g[2])
            .sum::<f64>()
    };

    for l in [0.0, 0.5, 1.0] {
        let lod = LodValue::new(l).unwrap();
        let fwd = model.forward(&expr, lod).unwrap();
        let g = PreparedScene::new(&fwd.gaussians, &cam, &settings).backward(&upstream).unwrap();
        let mut acc = model.zero_grads();
        model.backward(&fwd, &g, &mut acc, true).unwrap();
        let analytic: Vec<f64> = acc.iter().collect();

        let n = model.parameter_count();
        assert_eq!(analytic.len(), n);
        let h = 1e-6;
        let mut numeric = Vec::with_capacity(n);
        for k in 0..n {
            let eval = |d: f64| {
                let mut m = model.clone();
                *nth_parameter(&mut m, k) += d;
                loss(&m, lod)
            };
            numeric.push((eval(h) - eval(-h)) / (2.0 * h));
        }
        worst = worst.max(max_rel_err(&analytic, &numeric));
    }
    worst
}

/// Mutable access to the `k`-th parameter in checkpoint order.
fn nth_parameter(m: &mut uvlod::model::AvatarModel, mut k: usize) -> &mut f64 {
    for level in m.field.levels_mut() {
        let s = level.as_slice_mut();
        if k < s.len() {
            return &mut s[k];
        }
        k -= s.len();
    }
    let nets = std::iter::once(&mut m.mapper).chain(m.heads.as_array_mut());
    for net in nets {
        for layer in net.layers_mut() {
            let nw = layer.weights.len();
            if k < nw {
                return &mut layer.weights.as_slice_mut().unwrap()[k];
            }
            k -= nw;
            if k < layer.bias.len() {
                return &mut layer.bias[k];
            }
            k -= layer.bias.len();
        }
    }
    panic!("parameter index out of range");
}
