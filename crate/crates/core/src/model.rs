//! The trainable avatar: feature field, mapping network, attribute heads and
//! the mesh they are bound to.

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{
    assemble_latent, assemble_latent_backward, decode_backward, decode_forward, DecodeCache, DecodeParams,
    DecoderHeads, DrivingCode, HeadGrads, LatentMap,
};
use crate::error::{ensure, Error, Result};
use crate::geometry::{desk_head, encoding_dim, positional_encode, rasterize_uv, ExpressionVector, Mesh, UvPositionMap, Vec3};
use crate::nn::{adam_step, Activation, AdamConfig, AdamState, ForwardCache, Mlp, MlpAdam, MlpGrads};
use crate::splat::{GaussianGrads, GaussianSet};
use crate::uv_field::{FeatureField, FeatureMap, LodValue};

/// Architecture and field hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub s_max: usize,
    pub s_min: usize,
    pub levels: usize,
    pub tau: f64,
    pub d_f: usize,
    pub n_freq: usize,
    pub code_dim: usize,
    pub expr_dim: usize,
    pub mapper_hidden: usize,
    pub head_hidden: usize,
    pub head_layers: usize,
    pub sh_degree: usize,
    /// Offset bound as a fraction of the rest-pose bounding radius.
    pub offset_fraction: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            s_max: 256,
            s_min: 64,
            levels: 3,
            tau: 0.35,
            d_f: 64,
            n_freq: 12,
            code_dim: 20,
            expr_dim: crate::geometry::DEFAULT_EXPRESSION_DIM,
            mapper_hidden: 64,
            head_hidden: 128,
            head_layers: 3,
            sh_degree: 3,
            offset_fraction: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.s_min >= 1 && self.s_min < self.s_max,
            Config,
            "s_min ({}) must be at least 1 and below s_max ({})",
            self.s_min,
            self.s_max
        );
        ensure!(self.levels >= 2, Config, "levels must be at least 2, got {}", self.levels);
        ensure!(self.tau > 0.0 && self.tau.is_finite(), Config, "tau must be positive, got {}", self.tau);
        ensure!(self.d_f >= 1, Config, "d_f must be positive");
        ensure!(self.code_dim >= 1, Config, "code_dim must be positive");
        ensure!(self.expr_dim >= 1, Config, "expr_dim must be positive");
        ensure!(
            self.mapper_hidden >= 1 && self.head_hidden >= 1,
            Config,
            "hidden widths must be positive"
        );
        ensure!(self.sh_degree <= 3, Config, "sh_degree must be at most 3, got {}", self.sh_degree);
        ensure!(
            self.offset_fraction >= 0.0 && self.offset_fraction.is_finite(),
            Config,
            "offset_fraction must be non-negative"
        );
        Ok(())
    }

    /// Level resolutions spaced geometrically from `s_min` to `s_max`.
    pub fn level_resolutions(&self) -> Vec<usize> {
        let n = self.levels;
        let ratio = self.s_max as f64 / self.s_min as f64;
        let mut out: Vec<usize> = (0..n)
            .map(|i| (self.s_min as f64 * ratio.powf(i as f64 / (n - 1) as f64)).round() as usize)
            .collect();
        out[0] = self.s_min;
        out[n - 1] = self.s_max;
        out
    }

    pub fn latent_dim(&self) -> usize {
        encoding_dim(self.n_freq) + self.d_f + self.code_dim + 1
    }
}

#[derive(Clone, Debug)]
pub struct AvatarModel {
    pub config: ModelConfig,
    pub field: FeatureField,
    pub mapper: Mlp,
    pub heads: DecoderHeads,
    mesh: Mesh,
    rest_center: Vec3,
    rest_radius: f64,
}

/// Everything one forward pass at one LOD keeps for its backward pass.
#[derive(Clone, Debug)]
pub struct FrameForward {
    pub lod: LodValue,
    pub pmap: UvPositionMap,
    pub gaussians: GaussianSet,
    pub decode_params: DecodeParams,
    latent: LatentMap,
    decode_cache: DecodeCache,
    mapper_cache: ForwardCache,
}

impl FrameForward {
    pub fn resolution(&self) -> usize {
        self.pmap.resolution()
    }

    pub fn offsets(&self) -> Vec<Vec3> {
        self.decode_cache.offsets()
    }
}

impl AvatarModel {
    pub fn new(config: ModelConfig, mesh: Mesh, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let field = FeatureField::random(&config.level_resolutions(), config.d_f, config.tau, &mut rng)?;
        let mapper = Mlp::random(
            &[config.expr_dim, config.mapper_hidden, config.code_dim],
            Activation::Tanh,
            Activation::Identity,
            &mut rng,
        );
        let heads = DecoderHeads::random(
            config.latent_dim(),
            config.head_hidden,
            config.head_layers,
            config.sh_degree,
            &mut rng,
        );
        AvatarModel::from_parts(config, field, mapper, heads, mesh)
    }

    /// Model bound to the procedural desk head.
    pub fn desk(config: ModelConfig, seed: u64) -> Result<Self> {
        AvatarModel::new(config, desk_head(48, 32), seed)
    }

    pub fn from_parts(
        config: ModelConfig,
        field: FeatureField,
        mapper: Mlp,
        heads: DecoderHeads,
        mesh: Mesh,
    ) -> Result<Self> {
        config.validate()?;
        ensure!(
            field.resolutions() == config.level_resolutions()
                && field.channels() == config.d_f
                && field.tau() == config.tau,
            ShapeMismatch,
            "feature field {:?}x{} (tau {}) does not match config {:?}x{} (tau {})",
            field.resolutions(),
            field.channels(),
            field.tau(),
            config.level_resolutions(),
            config.d_f,
            config.tau
        );
        ensure!(
            mapper.input_dim() == config.expr_dim && mapper.output_dim() == config.code_dim,
            ShapeMismatch,
            "mapper maps {} -> {}, config wants {} -> {}",
            mapper.input_dim(),
            mapper.output_dim(),
            config.expr_dim,
            config.code_dim
        );
        heads.validate()?;
        ensure!(
            heads.input_dim() == config.latent_dim() && heads.sh_degree() == Some(config.sh_degree),
            ShapeMismatch,
            "decoder heads do not match the configured latent width or SH degree"
        );
        ensure!(!mesh.faces().is_empty(), Mesh, "avatar mesh has no faces");
        let (rest_center, rest_radius) = mesh.bounding_sphere();
        Ok(AvatarModel {
            config,
            field,
            mapper,
            heads,
            mesh,
            rest_center,
            rest_radius,
        })
    }

    pub fn mesh(&self) -> &Mesh {
        &self.mesh
    }

    pub fn rest_sphere(&self) -> (Vec3, f64) {
        (self.rest_center, self.rest_radius)
    }

    pub fn offset_scale(&self) -> f64 {
        self.config.offset_fraction * self.rest_radius
    }

    pub fn resolution_for(&self, lod: LodValue) -> usize {
        self.field.resolution_for(lod)
    }

    /// Surface positions of the deformed mesh at the resolution for `lod`.
    pub fn position_map(&self, expr: &ExpressionVector, lod: LodValue) -> Result<UvPositionMap> {
        self.check_expr(expr)?;
        Ok(rasterize_uv(&self.mesh, &self.mesh.deform(expr), self.resolution_for(lod)))
    }

    fn check_expr(&self, expr: &ExpressionVector) -> Result<()> {
        ensure!(
            expr.dim() == self.config.expr_dim,
            ShapeMismatch,
            "expression has {} coefficients, model expects {}",
            expr.dim(),
            self.config.expr_dim
        );
        ensure!(
            expr.values().iter().all(|v| v.is_finite()),
            InvalidArgument,
            "expression has non-finite coefficients"
        );
        Ok(())
    }

    pub fn forward(&self, expr: &ExpressionVector, lod: LodValue) -> Result<FrameForward> {
        let pmap = self.position_map(expr, lod)?;
        let x = ArrayView2::from_shape((1, expr.dim()), expr.values()).expect("row vector");
        let (code, mapper_cache) = self.mapper.forward(x)?;
        let code = DrivingCode(code.into_raw_vec_and_offset().0);
        let feat = self.field.resample(lod)?;
        let penc = positional_encode(&pmap.normalized(self.rest_center, self.rest_radius), self.config.n_freq);
        let latent = assemble_latent(&feat, &penc, pmap.mask(), &code, lod)?;
        let spacing = pmap.mean_texel_spacing();
        let decode_params = DecodeParams {
            offset_scale: self.offset_scale(),
            scale_base: if spacing > 0.0 { spacing } else { self.rest_radius / pmap.resolution() as f64 },
        };
        let (gaussians, decode_cache) = decode_forward(&latent, &pmap, &self.heads, decode_params)?;
        Ok(FrameForward {
            lod,
            pmap,
            gaussians,
            decode_params,
            latent,
            decode_cache,
            mapper_cache,
        })
    }

    pub fn gaussians(&self, expr: &ExpressionVector, lod: LodValue) -> Result<GaussianSet> {
        Ok(self.forward(expr, lod)?.gaussians)
    }

    /// Adds the parameter gradients of one forward pass into `acc`.
    /// The mapper's gradient is skipped when `train_mapper` is false.
    pub fn backward(
        &self,
        fwd: &FrameForward,
        grads: &GaussianGrads,
        acc: &mut ModelGrads,
        train_mapper: bool,
    ) -> Result<()> {
        let (head_grads, latent_grads) = decode_backward(&fwd.decode_cache, &self.heads, grads)?;
        acc.heads.add_assign(&head_grads);
        let (feat_grad, code_grad) = assemble_latent_backward(&fwd.latent, latent_grads.view())?;
        self.field.resample_backward_into(fwd.lod, &feat_grad, &mut acc.field)?;
        if train_mapper {
            let g = Array2::from_shape_vec((1, code_grad.len()), code_grad).expect("row vector");
            let (mg, _) = self.mapper.backward(&fwd.mapper_cache, g.view())?;
            acc.mapper.add_assign(&mg);
        }
        Ok(())
    }

    pub fn zero_grads(&self) -> ModelGrads {
        ModelGrads {
            field: self.field.zero_grads(),
            mapper: self.mapper.zero_grads(),
            heads: self.heads.zero_grads(),
        }
    }

    /// All parameters in checkpoint order.
    pub fn parameters(&self) -> impl Iterator<Item = f64> + '_ {
        self.field
            .levels()
            .iter()
            .flat_map(|m| m.as_slice().iter().copied())
            .chain(self.mapper.parameters())
            .chain(self.heads.as_array().into_iter().flat_map(|h| h.parameters()))
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().count()
    }
}

/// Gradients with the same structure as the model's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrads {
    pub field: Vec<FeatureMap>,
    pub mapper: MlpGrads,
    pub heads: HeadGrads,
}

impl ModelGrads {
    pub fn add_assign(&mut self, other: &ModelGrads) {
        for (a, b) in self.field.iter_mut().zip(&other.field) {
            for (x, y) in a.as_slice_mut().iter_mut().zip(b.as_slice()) {
                *x += y;
            }
        }
        self.mapper.add_assign(&other.mapper);
        self.heads.add_assign(&other.heads);
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.field
            .iter()
            .flat_map(|m| m.as_slice().iter().copied())
            .chain(self.mapper.iter())
            .chain(self.heads.0.iter().flat_map(|g| g.iter()))
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(f64::is_finite)
    }
}

/// Adam over every parameter group, with its own rate for the feature field.
#[derive(Clone, Debug)]
pub struct ModelOptimizer {
    field_config: AdamConfig,
    field: Vec<AdamState>,
    mapper: MlpAdam,
    heads: Vec<MlpAdam>,
}

impl ModelOptimizer {
    pub fn new(model: &AvatarModel, network_lr: f64, field_lr: f64) -> Self {
        let net = AdamConfig::with_lr(network_lr);
        ModelOptimizer {
            field_config: AdamConfig::with_lr(field_lr),
            field: model
                .field
                .levels()
                .iter()
                .map(|m| AdamState::new(m.as_slice().len()))
                .collect(),
            mapper: MlpAdam::new(&model.mapper, net),
            heads: model.heads.as_array().iter().map(|h| MlpAdam::new(h, net)).collect(),
        }
    }

    /// Applies one update. The mapper is left untouched when `update_mapper` is false.
    pub fn step(&mut self, model: &mut AvatarModel, grads: &ModelGrads, update_mapper: bool) -> Result<()> {
        if !grads.is_finite() {
            return Err(Error::Divergence("non-finite gradient".into()));
        }
        for ((level, g), state) in model
            .field
            .levels_mut()
            .iter_mut()
            .zip(&grads.field)
            .zip(&mut self.field)
        {
            adam_step(level.as_slice_mut(), g.as_slice(), state, &self.field_config);
        }
        if update_mapper {
            self.mapper.step(&mut model.mapper, &grads.mapper);
        }
        for ((head, g), opt) in model
            .heads
            .as_array_mut()
            .into_iter()
            .zip(&grads.heads.0)
            .zip(&mut self.heads)
        {
            opt.step(head, g);
        }
        Ok(())
    }
}
