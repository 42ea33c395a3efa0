//! Latent assembly and the five attribute heads.

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::Rng;

use crate::error::{ensure, Result};
use crate::geometry::{ExpressionVector, UvPositionMap, Vec3};
use crate::nn::{sigmoid, Activation, ForwardCache, Mlp, MlpGrads};
use crate::splat::{sh_coeff_count, GaussianGrads};
use crate::uv_field::{FeatureMap, LodValue};

pub use crate::splat::GaussianSet;

pub const DEFAULT_CODE_DIM: usize = 20;

#[derive(Clone, Debug, PartialEq)]
pub struct DrivingCode(pub Vec<f64>);

impl DrivingCode {
    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

pub fn map_driving_code(mapper: &Mlp, expr: &ExpressionVector) -> Result<DrivingCode> {
    ensure!(
        expr.dim() == mapper.input_dim(),
        ShapeMismatch,
        "expression has {} coefficients, mapper expects {}",
        expr.dim(),
        mapper.input_dim()
    );
    let x = ArrayView2::from_shape((1, expr.dim()), expr.values()).expect("row vector");
    let y = mapper.infer(x)?;
    Ok(DrivingCode(y.into_raw_vec_and_offset().0))
}

/// Channel blocks of a latent row: `[penc | feat | code | l]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LatentLayout {
    pub pe: usize,
    pub feat: usize,
    pub code: usize,
}

impl LatentLayout {
    pub fn channels(&self) -> usize {
        self.pe + self.feat + self.code + 1
    }

    pub fn feat_start(&self) -> usize {
        self.pe
    }

    pub fn code_start(&self) -> usize {
        self.pe + self.feat
    }

    pub fn lod_channel(&self) -> usize {
        self.pe + self.feat + self.code
    }
}

/// Per-texel decoder input, one row per texel in row-major UV order.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentMap {
    resolution: usize,
    layout: LatentLayout,
    rows: Array2<f64>,
    mask: Vec<bool>,
}

impl LatentMap {
    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn layout(&self) -> LatentLayout {
        self.layout
    }

    pub fn channels(&self) -> usize {
        self.layout.channels()
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn rows(&self) -> &Array2<f64> {
        &self.rows
    }

    pub fn row(&self, row: usize, col: usize) -> &[f64] {
        let t = row * self.resolution + col;
        let c = self.channels();
        &self.rows.as_slice().expect("standard layout")[t * c..(t + 1) * c]
    }

    pub fn masked_texels(&self) -> Vec<usize> {
        self.mask
            .iter()
            .enumerate()
            .filter_map(|(t, &m)| m.then_some(t))
            .collect()
    }
}

pub fn assemble_latent(
    feat: &FeatureMap,
    penc: &FeatureMap,
    mask: &[bool],
    code: &DrivingCode,
    l: LodValue,
) -> Result<LatentMap> {
    let s = feat.resolution();
    ensure!(
        penc.resolution() == s,
        ShapeMismatch,
        "feature map is {s}x{s}, encoding is {0}x{0}",
        penc.resolution()
    );
    ensure!(mask.len() == s * s, ShapeMismatch, "mask has {} texels, expected {}", mask.len(), s * s);
    let layout = LatentLayout {
        pe: penc.channels(),
        feat: feat.channels(),
        code: code.dim(),
    };
    let c = layout.channels();
    let mut rows = Array2::zeros((s * s, c));
    let (fs, ps) = (feat.as_slice(), penc.as_slice());
    for (t, mut row) in rows.axis_iter_mut(Axis(0)).enumerate() {
        if !mask[t] {
            continue;
        }
        let row = row.as_slice_mut().expect("contiguous row");
        row[..layout.pe].copy_from_slice(&ps[t * layout.pe..(t + 1) * layout.pe]);
        row[layout.feat_start()..layout.code_start()].copy_from_slice(&fs[t * layout.feat..(t + 1) * layout.feat]);
        row[layout.code_start()..layout.lod_channel()].copy_from_slice(&code.0);
        row[layout.lod_channel()] = l.get();
    }
    Ok(LatentMap {
        resolution: s,
        layout,
        rows,
        mask: mask.to_vec(),
    })
}

/// Routes gradients on masked latent rows back to the feature map and the code.
///
/// `grad_rows` holds one row per masked texel, in the order of
/// [`LatentMap::masked_texels`].
pub fn assemble_latent_backward(
    latent: &LatentMap,
    grad_rows: ArrayView2<f64>,
) -> Result<(FeatureMap, Vec<f64>)> {
    let texels = latent.masked_texels();
    let layout = latent.layout;
    ensure!(
        grad_rows.dim() == (texels.len(), layout.channels()),
        ShapeMismatch,
        "latent gradient is {:?}, expected ({}, {})",
        grad_rows.dim(),
        texels.len(),
        layout.channels()
    );
    let s = latent.resolution;
    let mut feat = FeatureMap::zeros(s, layout.feat);
    let mut code = vec![0.0; layout.code];
    let fs = feat.as_slice_mut();
    for (g, &t) in grad_rows.axis_iter(Axis(0)).zip(&texels) {
        for (k, v) in g.slice(s![layout.feat_start()..layout.code_start()]).iter().enumerate() {
            fs[t * layout.feat + k] = *v;
        }
        for (k, v) in g.slice(s![layout.code_start()..layout.lod_channel()]).iter().enumerate() {
            code[k] += v;
        }
    }
    Ok((feat, code))
}

/// The five attribute networks, in checkpoint order.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderHeads {
    pub offset: Mlp,
    pub scale: Mlp,
    pub rotation: Mlp,
    pub opacity: Mlp,
    pub color: Mlp,
}

pub const HEAD_NAMES: [&str; 5] = ["offset", "scale", "rotation", "opacity", "color"];

impl DecoderHeads {
    pub fn output_dims(sh_degree: usize) -> [usize; 5] {
        [3, 3, 4, 1, 3 * sh_coeff_count(sh_degree)]
    }

    /// ReLU hidden layers, linear outputs. The last layer starts at a tenth of
    /// its usual scale so the untrained decoder sits near its rest values.
    pub fn random<R: Rng>(input: usize, hidden: usize, hidden_layers: usize, sh_degree: usize, rng: &mut R) -> Self {
        let mut make = |out: usize| {
            let mut sizes = vec![input];
            sizes.extend(std::iter::repeat(hidden).take(hidden_layers));
            sizes.push(out);
            let mut net = Mlp::random(&sizes, Activation::Relu, Activation::Identity, rng);
            if let Some(last) = net.layers_mut().last_mut() {
                last.weights.mapv_inplace(|w| 0.1 * w);
            }
            net
        };
        let [o, s, r, a, c] = Self::output_dims(sh_degree);
        DecoderHeads {
            offset: make(o),
            scale: make(s),
            rotation: make(r),
            opacity: make(a),
            color: make(c),
        }
    }

    pub fn from_array(heads: [Mlp; 5]) -> Result<Self> {
        let [offset, scale, rotation, opacity, color] = heads;
        let out = DecoderHeads {
            offset,
            scale,
            rotation,
            opacity,
            color,
        };
        out.validate()?;
        Ok(out)
    }

    pub fn as_array(&self) -> [&Mlp; 5] {
        [&self.offset, &self.scale, &self.rotation, &self.opacity, &self.color]
    }

    pub fn as_array_mut(&mut self) -> [&mut Mlp; 5] {
        [
            &mut self.offset,
            &mut self.scale,
            &mut self.rotation,
            &mut self.opacity,
            &mut self.color,
        ]
    }

    pub fn input_dim(&self) -> usize {
        self.offset.input_dim()
    }

    /// SH degree implied by the color head's width.
    pub fn sh_degree(&self) -> Option<usize> {
        (0..=3).find(|&d| 3 * sh_coeff_count(d) == self.color.output_dim())
    }

    pub fn validate(&self) -> Result<()> {
        let input = self.input_dim();
        for (name, head) in HEAD_NAMES.iter().zip(self.as_array()) {
            ensure!(
                head.input_dim() == input,
                ShapeMismatch,
                "{name} head takes {} inputs, offset head takes {input}",
                head.input_dim()
            );
        }
        let degree = self.sh_degree();
        ensure!(degree.is_some(), ShapeMismatch, "color head width {} is not 3*(d+1)^2", self.color.output_dim());
        let dims = Self::output_dims(degree.unwrap_or(0));
        for ((name, head), want) in HEAD_NAMES.iter().zip(self.as_array()).zip(dims) {
            ensure!(
                head.output_dim() == want,
                ShapeMismatch,
                "{name} head has {} outputs, expected {want}",
                head.output_dim()
            );
        }
        Ok(())
    }

    pub fn zero_grads(&self) -> HeadGrads {
        HeadGrads(self.as_array().map(|h| h.zero_grads()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadGrads(pub [MlpGrads; 5]);

impl HeadGrads {
    pub fn add_assign(&mut self, other: &HeadGrads) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            a.add_assign(b);
        }
    }
}

/// Output scaling shared by every texel of one decode.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodeParams {
    /// Bound on each component of the position offset.
    pub offset_scale: f64,
    /// Scale of a Gaussian whose raw scale output is zero.
    pub scale_base: f64,
}

/// Intermediate values kept for [`decode_backward`].
#[derive(Clone, Debug)]
pub struct DecodeCache {
    pub texels: Vec<usize>,
    input: Array2<f64>,
    caches: [ForwardCache; 5],
    raw: [Array2<f64>; 5],
    params: DecodeParams,
}

impl DecodeCache {
    /// Position offsets before they were added to the surface points.
    pub fn offsets(&self) -> Vec<Vec3> {
        self.raw[0]
            .axis_iter(Axis(0))
            .map(|r| Vec3::new(r[0], r[1], r[2]).map(|v| self.params.offset_scale * v.tanh()))
            .collect()
    }
}

pub fn decode(
    latent: &LatentMap,
    pmap: &UvPositionMap,
    heads: &DecoderHeads,
    params: DecodeParams,
) -> Result<GaussianSet> {
    decode_forward(latent, pmap, heads, params).map(|(set, _)| set)
}

pub fn decode_forward(
    latent: &LatentMap,
    pmap: &UvPositionMap,
    heads: &DecoderHeads,
    params: DecodeParams,
) -> Result<(GaussianSet, DecodeCache)> {
    heads.validate()?;
    ensure!(
        heads.input_dim() == latent.channels(),
        ShapeMismatch,
        "heads take {} inputs, latent has {} channels",
        heads.input_dim(),
        latent.channels()
    );
    ensure!(
        pmap.resolution() == latent.resolution && pmap.mask() == latent.mask(),
        ShapeMismatch,
        "position map does not match the latent map's texels"
    );
    ensure!(
        params.offset_scale >= 0.0 && params.scale_base > 0.0,
        InvalidArgument,
        "decode needs offset_scale >= 0 and scale_base > 0"
    );
    let degree = heads.sh_degree().expect("validated");
    let texels = latent.masked_texels();
    let input = latent.rows.select(Axis(0), &texels);

    let mut outs = Vec::with_capacity(5);
    let mut caches = Vec::with_capacity(5);
    for head in heads.as_array() {
        let (y, c) = head.forward(input.view())?;
        outs.push(y);
        caches.push(c);
    }
    let raw: [Array2<f64>; 5] = outs.try_into().expect("five heads");
    let caches: [ForwardCache; 5] = caches.try_into().expect("five heads");

    let n = texels.len();
    let mut set = GaussianSet::empty(degree);
    set.means.reserve(n);
    for (i, &t) in texels.iter().enumerate() {
        let o = raw[0].row(i);
        let s = raw[1].row(i);
        let r = raw[2].row(i);
        let mu = pmap.positions()[t] + Vec3::new(o[0], o[1], o[2]).map(|v| params.offset_scale * v.tanh());
        let scale = Vec3::new(s[0], s[1], s[2]).map(|v| v.exp() * params.scale_base);
        let q = normalize_quat([r[0] + 1.0, r[1], r[2], r[3]]);
        let alpha = sigmoid(raw[3][[i, 0]]);
        let c = raw[4].row(i);
        set.push(mu, scale, q, alpha, c.as_slice().expect("contiguous row"));
    }
    Ok((
        set,
        DecodeCache {
            texels,
            input,
            caches,
            raw,
            params,
        },
    ))
}

fn normalize_quat(r: [f64; 4]) -> [f64; 4] {
    let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n < 1e-12 {
        [1.0, 0.0, 0.0, 0.0]
    } else {
        r.map(|v| v / n)
    }
}

/// Gradients of the head parameters and of every masked latent row, given
/// gradients with respect to the decoded attributes.
pub fn decode_backward(
    cache: &DecodeCache,
    heads: &DecoderHeads,
    grads: &GaussianGrads,
) -> Result<(HeadGrads, Array2<f64>)> {
    let n = cache.texels.len();
    ensure!(
        grads.means.len() == n && grads.sh.len() == n * heads.color.output_dim(),
        ShapeMismatch,
        "attribute gradients cover {} gaussians, decode produced {n}",
        grads.means.len()
    );
    let p = cache.params;
    let mut g_raw: [Array2<f64>; 5] = HEAD_NAMES
        .iter()
        .zip(heads.as_array())
        .map(|(_, h)| Array2::zeros((n, h.output_dim())))
        .collect::<Vec<_>>()
        .try_into()
        .expect("five heads");

    for i in 0..n {
        for k in 0..3 {
            let t = cache.raw[0][[i, k]].tanh();
            g_raw[0][[i, k]] = grads.means[i][k] * p.offset_scale * (1.0 - t * t);
            let s = cache.raw[1][[i, k]].exp() * p.scale_base;
            g_raw[1][[i, k]] = grads.scales[i][k] * s;
        }
        let r = cache.raw[2].row(i);
        let r = [r[0] + 1.0, r[1], r[2], r[3]];
        let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm >= 1e-12 {
            let q = r.map(|v| v / norm);
            let gq = grads.rotations[i];
            let dot: f64 = q.iter().zip(&gq).map(|(a, b)| a * b).sum();
            for k in 0..4 {
                g_raw[2][[i, k]] = (gq[k] - q[k] * dot) / norm;
            }
        }
        let a = sigmoid(cache.raw[3][[i, 0]]);
        g_raw[3][[i, 0]] = grads.opacities[i] * a * (1.0 - a);
    }
    let stride = heads.color.output_dim();
    g_raw[4]
        .as_slice_mut()
        .expect("standard layout")
        .copy_from_slice(&grads.sh[..n * stride]);

    let mut out = Vec::with_capacity(5);
    let mut dx = Array2::zeros(cache.input.dim());
    for ((head, c), g) in heads.as_array().into_iter().zip(&cache.caches).zip(&g_raw) {
        let (hg, d) = head.backward(c, g.view())?;
        dx += &d;
        out.push(hg);
    }
    Ok((HeadGrads(out.try_into().expect("five heads")), dx))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::encoding_dim;
    use crate::nn::DenseLayer;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_heads(input: usize) -> DecoderHeads {
        let z = |out| Mlp::new(vec![DenseLayer::zeros(input, out, Activation::Identity)]).unwrap();
        DecoderHeads::from_array([z(3), z(3), z(4), z(1), z(48)]).unwrap()
    }

    fn plane_map(s: usize) -> UvPositionMap {
        let mut pos = Vec::new();
        let mut mask = Vec::new();
        for j in 0..s {
            for i in 0..s {
                pos.push(Vec3::new(i as f64, j as f64, 0.5));
                mask.push((i + j) % 3 != 0);
            }
        }
        UvPositionMap::new(s, pos, mask).unwrap()
    }

    fn latent_for(pmap: &UvPositionMap, d_f: usize, n_freq: usize, code: &DrivingCode, l: f64) -> LatentMap {
        let s = pmap.resolution();
        let feat = FeatureMap::from_fn(s, d_f, |j, i, k| (j * 31 + i * 7 + k) as f64 * 1e-3);
        let penc = crate::geometry::positional_encode(pmap, n_freq);
        assemble_latent(&feat, &penc, pmap.mask(), code, LodValue::new(l).unwrap()).unwrap()
    }

    #[test]
    fn default_channel_count() {
        let pmap = plane_map(4);
        let code = DrivingCode(vec![0.0; 20]);
        let latent = latent_for(&pmap, 64, 12, &code, 0.0);
        assert_eq!(encoding_dim(12), 75);
        assert_eq!(latent.channels(), 160);
    }

    #[test]
    fn driving_code_has_mapper_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mapper = Mlp::random(&[109, 64, 20], Activation::Tanh, Activation::Identity, &mut rng);
        let a = map_driving_code(&mapper, &ExpressionVector::one_hot(109, 3)).unwrap();
        let b = map_driving_code(&mapper, &ExpressionVector::one_hot(109, 40)).unwrap();
        assert_eq!(a.dim(), 20);
        assert_ne!(a, b);
        assert!(map_driving_code(&mapper, &ExpressionVector::zeros(50)).is_err());

        let zero = Mlp::new(vec![DenseLayer::zeros(109, 20, Activation::Identity)]).unwrap();
        let c = map_driving_code(&zero, &ExpressionVector::one_hot(109, 3)).unwrap();
        assert!(c.0.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn latent_layout_and_broadcast() {
        let pmap = plane_map(5);
        let code = DrivingCode((0..6).map(|k| k as f64).collect());
        let latent = latent_for(&pmap, 4, 2, &code, 0.3);
        let lay = latent.layout();
        for j in 0..5 {
            for i in 0..5 {
                let row = latent.row(j, i);
                if latent.mask()[j * 5 + i] {
                    assert_eq!(row[lay.lod_channel()], 0.3);
                    assert_eq!(&row[lay.code_start()..lay.lod_channel()], &code.0[..]);
                    assert_eq!(row[0], i as f64);
                    assert_eq!(row[lay.feat_start()], (j * 31 + i * 7) as f64 * 1e-3);
                } else {
                    assert!(row.iter().all(|&v| v == 0.0));
                }
            }
        }
    }

    #[test]
    fn latent_rows_follow_their_texels() {
        let s = 3;
        let mask = vec![true; 9];
        let feat = FeatureMap::from_fn(s, 2, |j, i, k| (j * 10 + i) as f64 + 0.1 * k as f64);
        let penc = FeatureMap::from_fn(s, 3, |j, i, k| -((j * 10 + i) as f64) - 0.1 * k as f64);
        let code = DrivingCode(vec![1.0, 2.0]);
        let l = LodValue::new(0.5).unwrap();
        let a = assemble_latent(&feat, &penc, &mask, &code, l).unwrap();

        let swap = |m: &FeatureMap| {
            let mut out = m.clone();
            let c = m.channels();
            let (x, y) = (0usize, 7usize);
            for k in 0..c {
                out.as_slice_mut()[x * c + k] = m.as_slice()[y * c + k];
                out.as_slice_mut()[y * c + k] = m.as_slice()[x * c + k];
            }
            out
        };
        let b = assemble_latent(&swap(&feat), &swap(&penc), &mask, &code, l).unwrap();
        assert_eq!(a.row(0, 0), b.row(2, 1));
        assert_eq!(a.row(2, 1), b.row(0, 0));
        assert_eq!(a.row(1, 1), b.row(1, 1));
    }

    #[test]
    fn resolution_mismatch_is_rejected() {
        let feat = FeatureMap::zeros(4, 2);
        let penc = FeatureMap::zeros(5, 3);
        let r = assemble_latent(&feat, &penc, &[true; 16], &DrivingCode(vec![]), LodValue::FINEST);
        assert!(r.is_err());
    }

    #[test]
    fn zero_heads_give_rest_values() {
        let pmap = plane_map(6);
        let code = DrivingCode(vec![0.5; 3]);
        let latent = latent_for(&pmap, 4, 2, &code, 0.0);
        let heads = zero_heads(latent.channels());
        let params = DecodeParams {
            offset_scale: 0.2,
            scale_base: 0.05,
        };
        let set = decode(&latent, &pmap, &heads, params).unwrap();
        assert_eq!(set.len(), crate::geometry::gaussian_count(&pmap));
        set.validate().unwrap();
        let expected: Vec<Vec3> = pmap
            .positions()
            .iter()
            .zip(pmap.mask())
            .filter_map(|(p, &m)| m.then_some(*p))
            .collect();
        assert_eq!(set.means, expected);
        for i in 0..set.len() {
            assert_eq!(set.rotations[i], [1.0, 0.0, 0.0, 0.0]);
            assert_eq!(set.opacities[i], 0.5);
            assert_eq!(set.scales[i], Vec3::repeat(0.05));
        }
        assert!(set.sh.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_mask_decodes_to_empty_set() {
        let pmap = UvPositionMap::new(2, vec![Vec3::zeros(); 4], vec![false; 4]).unwrap();
        let code = DrivingCode(vec![0.0; 2]);
        let latent = latent_for(&pmap, 3, 1, &code, 1.0);
        let heads = zero_heads(latent.channels());
        let params = DecodeParams {
            offset_scale: 0.1,
            scale_base: 1.0,
        };
        assert!(decode(&latent, &pmap, &heads, params).unwrap().is_empty());
    }

    #[test]
    fn head_input_mismatch_is_rejected() {
        let pmap = plane_map(3);
        let latent = latent_for(&pmap, 3, 1, &DrivingCode(vec![0.0; 2]), 0.0);
        let heads = zero_heads(latent.channels() + 1);
        let params = DecodeParams {
            offset_scale: 0.1,
            scale_base: 1.0,
        };
        assert!(decode(&latent, &pmap, &heads, params).is_err());
    }

    #[test]
    fn random_latents_decode_to_valid_gaussians() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let s = 32;
        let pmap = UvPositionMap::new(s, vec![Vec3::new(0.1, -0.2, 0.3); s * s], vec![true; s * s]).unwrap();
        let lay = LatentLayout { pe: 9, feat: 5, code: 4 };
        let mut heads = DecoderHeads::random(lay.channels(), 16, 2, 3, &mut rng);
        // undo the small output init so raw values cover a wide range
        for h in heads.as_array_mut() {
            let last = h.layers_mut().last_mut().unwrap();
            last.weights.mapv_inplace(|w| 40.0 * w);
        }
        let params = DecodeParams {
            offset_scale: 0.07,
            scale_base: 0.01,
        };
        let feat = FeatureMap::from_fn(s, lay.feat, |_, _, _| rng.gen_range(-3.0..3.0));
        let penc = FeatureMap::from_fn(s, lay.pe, |_, _, _| rng.gen_range(-3.0..3.0));
        let code = DrivingCode((0..lay.code).map(|_| rng.gen_range(-3.0..3.0)).collect());
        let latent = assemble_latent(&feat, &penc, pmap.mask(), &code, LodValue::new(0.4).unwrap()).unwrap();
        let (set, cache) = decode_forward(&latent, &pmap, &heads, params).unwrap();
        assert!(set.len() >= 1000);
        set.validate().unwrap();
        for (i, d) in cache.offsets().iter().enumerate() {
            assert!(d.amax() <= params.offset_scale);
            assert!((set.means[i] - pmap.positions()[cache.texels[i]] - d).amax() < 1e-15);
        }
    }
}
