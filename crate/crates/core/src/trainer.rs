//! Losses and the two-stage optimization schedule.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::FrameSample;
use crate::error::{ensure, Error, Result};
use crate::geometry::{UvPositionMap, Vec3};
use crate::metrics::{compare, Image, Metrics};
use crate::model::{AvatarModel, ModelGrads, ModelOptimizer};
use crate::splat::{GaussianGrads, GaussianSet, PreparedScene, RenderSettings};
use crate::uv_field::LodValue;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_parts: f64,
    pub lambda_lpips: f64,
    pub lambda_mu: f64,
    pub lambda_s: f64,
    pub huber_delta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_parts: 20.0,
            lambda_lpips: 0.05,
            lambda_mu: 0.001,
            lambda_s: 0.5,
            huber_delta: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_parts, self.lambda_lpips, self.lambda_mu, self.lambda_s];
        ensure!(
            all.iter().all(|w| *w >= 0.0 && w.is_finite()),
            Config,
            "loss weights must be non-negative"
        );
        ensure!(self.huber_delta > 0.0, Config, "huber_delta must be positive");
        Ok(())
    }

    /// Weight of the scale regularizer at LOD `l`.
    pub fn scale_weight(&self, l: LodValue) -> f64 {
        self.lambda_s * (1.0 - 0.5 * l.get())
    }
}

/// A perceptual image distance that also returns its gradient with respect
/// to the prediction.
pub trait PerceptualLoss: Send + Sync {
    fn evaluate(&self, target: &Image, prediction: &Image) -> Result<(f64, Vec<[f64; 3]>)>;
}

fn same_shape(a: &Image, b: &Image) -> Result<()> {
    ensure!(
        a.width == b.width && a.height == b.height,
        ShapeMismatch,
        "images are {}x{} and {}x{}",
        a.width,
        a.height,
        b.width,
        b.height
    );
    Ok(())
}

fn huber_term(d: f64, delta: f64) -> f64 {
    let a = d.abs();
    if a <= delta {
        0.5 * d * d
    } else {
        delta * (a - 0.5 * delta)
    }
}

/// Mean Huber penalty over every channel of every pixel.
pub fn huber(a: &Image, b: &Image, delta: f64) -> Result<f64> {
    same_shape(a, b)?;
    let n = (3 * a.pixels.len()).max(1) as f64;
    let sum: f64 = a
        .pixels
        .iter()
        .zip(&b.pixels)
        .flat_map(|(p, q)| (0..3).map(move |c| huber_term(q[c] - p[c], delta)))
        .sum();
    Ok(sum / n)
}

/// Adds `scale * d huber(target, pred) / d pred` into `grad`, with pixels
/// outside `mask` skipped when a mask is given.
fn huber_grad_into(target: &Image, pred: &Image, delta: f64, scale: f64, mask: Option<&[bool]>, grad: &mut [[f64; 3]]) {
    let n = (3 * target.pixels.len()).max(1) as f64;
    for (i, ((p, q), g)) in target.pixels.iter().zip(&pred.pixels).zip(grad.iter_mut()).enumerate() {
        if mask.is_some_and(|m| !m[i]) {
            continue;
        }
        for c in 0..3 {
            g[c] += scale * (q[c] - p[c]).clamp(-delta, delta) / n;
        }
    }
}

/// Full-image and part-masked Huber terms, before weighting.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RgbTerms {
    pub full: f64,
    pub parts: f64,
}

fn rgb_terms(target: &Image, pred: &Image, mask: &[bool], delta: f64) -> Result<RgbTerms> {
    same_shape(target, pred)?;
    ensure!(
        mask.len() == target.pixels.len(),
        ShapeMismatch,
        "mask has {} pixels, image has {}",
        mask.len(),
        target.pixels.len()
    );
    Ok(RgbTerms {
        full: huber(target, pred, delta)?,
        parts: huber(&target.masked(mask), &pred.masked(mask), delta)?,
    })
}

pub fn rgb_loss(target: &Image, pred: &Image, mask: &[bool], weights: &LossWeights) -> Result<f64> {
    let t = rgb_terms(target, pred, mask, weights.huber_delta)?;
    Ok(t.full + weights.lambda_parts * t.parts)
}

/// Every term of the training objective at one LOD.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub full: f64,
    pub parts: f64,
    pub lpips: f64,
    /// Mean norm of the position offsets.
    pub mu: f64,
    /// Mean norm of the scales.
    pub s: f64,
    pub rgb: f64,
    pub total: f64,
}

/// Offsets of decoded means from the surface points of the masked texels,
/// in decode order.
fn offsets(gauss: &GaussianSet, pmap: &UvPositionMap) -> Result<Vec<Vec3>> {
    let anchors: Vec<Vec3> = pmap
        .positions()
        .iter()
        .zip(pmap.mask())
        .filter_map(|(p, &m)| m.then_some(*p))
        .collect();
    ensure!(
        anchors.len() == gauss.len(),
        ShapeMismatch,
        "{} gaussians for {} covered texels",
        gauss.len(),
        anchors.len()
    );
    Ok(gauss.means.iter().zip(anchors).map(|(m, a)| m - a).collect())
}

fn mean_norm(v: &[Vec3]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().map(|x| x.norm()).sum::<f64>() / v.len() as f64
    }
}

#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    target: &Image,
    pred: &Image,
    mask: &[bool],
    gauss: &GaussianSet,
    pmap: &UvPositionMap,
    l: LodValue,
    weights: &LossWeights,
    lpips: Option<&dyn PerceptualLoss>,
) -> Result<LossTerms> {
    let rgb = rgb_terms(target, pred, mask, weights.huber_delta)?;
    let lp = match lpips {
        Some(f) => f.evaluate(target, pred)?.0,
        None => 0.0,
    };
    let mu = mean_norm(&offsets(gauss, pmap)?);
    let s = mean_norm(&gauss.scales);
    Ok(assemble_terms(rgb, lp, mu, s, l, weights))
}

fn assemble_terms(rgb: RgbTerms, lpips: f64, mu: f64, s: f64, l: LodValue, w: &LossWeights) -> LossTerms {
    let rgb_total = rgb.full + w.lambda_parts * rgb.parts;
    LossTerms {
        full: rgb.full,
        parts: rgb.parts,
        lpips,
        mu,
        s,
        rgb: rgb_total,
        total: rgb_total + w.lambda_lpips * lpips + w.lambda_mu * mu + w.scale_weight(l) * s,
    }
}

/// [`total_loss`] plus its gradient with respect to the rendered image and
/// the regularizer gradients with respect to the means and scales.
#[allow(clippy::too_many_arguments)]
pub fn total_loss_with_grad(
    target: &Image,
    pred: &Image,
    mask: &[bool],
    gauss: &GaussianSet,
    pmap: &UvPositionMap,
    l: LodValue,
    weights: &LossWeights,
    lpips: Option<&dyn PerceptualLoss>,
) -> Result<(LossTerms, Vec<[f64; 3]>, GaussianGrads)> {
    let rgb = rgb_terms(target, pred, mask, weights.huber_delta)?;
    let mut img_grad = vec![[0.0; 3]; pred.pixels.len()];
    huber_grad_into(target, pred, weights.huber_delta, 1.0, None, &mut img_grad);
    // masked pixels are zero in both images, so they contribute nothing
    huber_grad_into(target, pred, weights.huber_delta, weights.lambda_parts, Some(mask), &mut img_grad);
    let mut lp = 0.0;
    if let Some(f) = lpips {
        let (v, g) = f.evaluate(target, pred)?;
        ensure!(g.len() == img_grad.len(), ShapeMismatch, "perceptual gradient has wrong size");
        lp = v;
        for (a, b) in img_grad.iter_mut().zip(&g) {
            for c in 0..3 {
                a[c] += weights.lambda_lpips * b[c];
            }
        }
    }
    let offs = offsets(gauss, pmap)?;
    let mu = mean_norm(&offs);
    let s = mean_norm(&gauss.scales);
    let mut g = GaussianGrads::zeros(gauss);
    let n = gauss.len().max(1) as f64;
    let ws = weights.scale_weight(l);
    for i in 0..gauss.len() {
        let on = offs[i].norm();
        if on > 0.0 {
            g.means[i] = offs[i] * (weights.lambda_mu / (n * on));
        }
        let sn = gauss.scales[i].norm();
        if sn > 0.0 {
            g.scales[i] = gauss.scales[i] * (ws / (n * sn));
        }
    }
    Ok((assemble_terms(rgb, lp, mu, s, l, weights), img_grad, g))
}

/// How gradients from several LOD draws in one step are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Accumulate {
    #[default]
    Sum,
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub lods_per_step: usize,
    pub network_lr: f64,
    pub field_lr: f64,
    pub seed: u64,
    pub accumulate: Accumulate,
    pub weights: LossWeights,
    pub background: [f64; 3],
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage1_steps: 2000,
            stage2_steps: 3000,
            lods_per_step: 5,
            network_lr: 1e-3,
            field_lr: 5e-3,
            seed: 0,
            accumulate: Accumulate::Sum,
            weights: LossWeights::default(),
            background: [1.0; 3],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.lods_per_step >= 1, Config, "lods_per_step must be at least 1");
        ensure!(
            self.network_lr > 0.0 && self.field_lr > 0.0,
            Config,
            "learning rates must be positive"
        );
        self.weights.validate()
    }

    pub fn render_settings(&self) -> RenderSettings {
        RenderSettings {
            background: self.background,
            ..RenderSettings::default()
        }
    }
}

/// One row of the loss curve. Multi-LOD steps report sums over the draws.
#[derive(Clone, Debug, PartialEq)]
pub struct LossRecord {
    pub stage: u8,
    pub step: usize,
    pub frame: usize,
    pub terms: LossTerms,
    pub lods: Vec<f64>,
}

fn check_data(model: &AvatarModel, data: &[FrameSample]) -> Result<()> {
    ensure!(!data.is_empty(), Data, "training needs at least one frame");
    for (i, f) in data.iter().enumerate() {
        ensure!(
            f.expr.dim() == model.config.expr_dim,
            Data,
            "frame {i} has {} expression coefficients, model expects {}",
            f.expr.dim(),
            model.config.expr_dim
        );
    }
    Ok(())
}

/// Loss and summed parameter gradients for one frame over `lods`.
pub fn accumulate_gradients(
    model: &AvatarModel,
    frame: &FrameSample,
    lods: &[LodValue],
    cfg: &TrainConfig,
    train_mapper: bool,
    lpips: Option<&dyn PerceptualLoss>,
) -> Result<(ModelGrads, LossTerms)> {
    let settings = cfg.render_settings();
    let mut acc = model.zero_grads();
    let mut sum = LossTerms::default();
    for &lod in lods {
        let fwd = model.forward(&frame.expr, lod)?;
        let scene = PreparedScene::new(&fwd.gaussians, &frame.camera, &settings);
        let pred = Image::from(scene.render());
        let (terms, img_grad, mut g) = total_loss_with_grad(
            &frame.image,
            &pred,
            &frame.part_mask,
            &fwd.gaussians,
            &fwd.pmap,
            lod,
            &cfg.weights,
            lpips,
        )?;
        if !terms.total.is_finite() {
            return Err(Error::Divergence(format!("loss is {} at lod {}", terms.total, lod.get())));
        }
        let rg = scene.backward(&img_grad)?;
        for i in 0..g.means.len() {
            g.means[i] += rg.means[i];
            g.scales[i] += rg.scales[i];
        }
        g.rotations = rg.rotations;
        g.opacities = rg.opacities;
        g.sh = rg.sh;
        model.backward(&fwd, &g, &mut acc, train_mapper)?;
        sum.full += terms.full;
        sum.parts += terms.parts;
        sum.lpips += terms.lpips;
        sum.mu += terms.mu;
        sum.s += terms.s;
        sum.rgb += terms.rgb;
        sum.total += terms.total;
    }
    Ok((acc, sum))
}

fn scale_grads(g: &mut ModelGrads, factor: f64) {
    for m in &mut g.field {
        m.as_slice_mut().iter_mut().for_each(|v| *v *= factor);
    }
    g.mapper.scale(factor);
    for h in &mut g.heads.0 {
        h.scale(factor);
    }
}

/// Cycles through the frames in a fresh shuffled order every epoch.
struct FrameOrder {
    order: Vec<usize>,
    pos: usize,
}

impl FrameOrder {
    fn new(n: usize) -> Self {
        FrameOrder {
            order: (0..n).collect(),
            pos: n,
        }
    }

    fn next(&mut self, rng: &mut ChaCha8Rng) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

/// LOD draws for one stage-two step: both endpoints, then uniform draws.
pub fn sample_lods(rng: &mut impl Rng, count: usize) -> Vec<LodValue> {
    let mut out = Vec::with_capacity(count);
    if count >= 2 {
        out.push(LodValue::FINEST);
        out.push(LodValue::COARSEST);
    }
    while out.len() < count {
        out.push(LodValue::new(rng.gen_range(0.0..=1.0)).expect("in range"));
    }
    out
}

/// Jointly optimizes field, mapper and heads at the finest LOD.
pub fn train_stage1(model: &mut AvatarModel, data: &[FrameSample], cfg: &TrainConfig) -> Result<Vec<LossRecord>> {
    train_stage1_with(model, data, cfg, None, |_| {})
}

pub fn train_stage1_with(
    model: &mut AvatarModel,
    data: &[FrameSample],
    cfg: &TrainConfig,
    lpips: Option<&dyn PerceptualLoss>,
    mut on_step: impl FnMut(&LossRecord),
) -> Result<Vec<LossRecord>> {
    cfg.validate()?;
    check_data(model, data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = ModelOptimizer::new(model, cfg.network_lr, cfg.field_lr);
    let mut order = FrameOrder::new(data.len());
    let mut curve = Vec::with_capacity(cfg.stage1_steps);
    for step in 0..cfg.stage1_steps {
        let frame = order.next(&mut rng);
        let (grads, terms) =
            accumulate_gradients(model, &data[frame], &[LodValue::FINEST], cfg, true, lpips)?;
        opt.step(model, &grads, true)?;
        let rec = LossRecord {
            stage: 1,
            step,
            frame,
            terms,
            lods: vec![0.0],
        };
        on_step(&rec);
        curve.push(rec);
    }
    Ok(curve)
}

/// Optimizes field and heads over random LODs with the mapper frozen.
pub fn train_stage2(model: &mut AvatarModel, data: &[FrameSample], cfg: &TrainConfig) -> Result<Vec<LossRecord>> {
    train_stage2_with(model, data, cfg, None, |_| {})
}

pub fn train_stage2_with(
    model: &mut AvatarModel,
    data: &[FrameSample],
    cfg: &TrainConfig,
    lpips: Option<&dyn PerceptualLoss>,
    mut on_step: impl FnMut(&LossRecord),
) -> Result<Vec<LossRecord>> {
    cfg.validate()?;
    check_data(model, data)?;
    // a separate stream so stage two does not replay stage one's draws
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0002);
    let mut opt = ModelOptimizer::new(model, cfg.network_lr, cfg.field_lr);
    let mut order = FrameOrder::new(data.len());
    let mut curve = Vec::with_capacity(cfg.stage2_steps);
    for step in 0..cfg.stage2_steps {
        let frame = order.next(&mut rng);
        let lods = sample_lods(&mut rng, cfg.lods_per_step);
        let (mut grads, terms) = accumulate_gradients(model, &data[frame], &lods, cfg, false, lpips)?;
        if cfg.accumulate == Accumulate::Mean {
            scale_grads(&mut grads, 1.0 / lods.len() as f64);
        }
        opt.step(model, &grads, false)?;
        let rec = LossRecord {
            stage: 2,
            step,
            frame,
            terms,
            lods: lods.iter().map(|l| l.get()).collect(),
        };
        on_step(&rec);
        curve.push(rec);
    }
    Ok(curve)
}

/// Renders `frame` at `lod` and compares the clamped result with its target.
pub fn evaluate(model: &AvatarModel, frame: &FrameSample, lod: LodValue, settings: &RenderSettings) -> Result<Metrics> {
    let set = model.gaussians(&frame.expr, lod)?;
    let img = Image::from(crate::splat::render(&set, &frame.camera, settings)).clamped();
    compare(&frame.image, &img)
}

/// Mean metrics over `frames`.
pub fn evaluate_mean(
    model: &AvatarModel,
    frames: &[FrameSample],
    lod: LodValue,
    settings: &RenderSettings,
) -> Result<Metrics> {
    let mut m = Metrics {
        l1: 0.0,
        psnr: 0.0,
        ssim: 0.0,
    };
    for f in frames {
        let e = evaluate(model, f, lod, settings)?;
        m.l1 += e.l1;
        m.psnr += e.psnr;
        m.ssim += e.ssim;
    }
    let n = frames.len().max(1) as f64;
    Ok(Metrics {
        l1: m.l1 / n,
        psnr: m.psnr / n,
        ssim: m.ssim / n,
    })
}

/// Writes `stage,step,frame,total,rgb,parts,mu,s,lods` rows; LODs are
/// separated by `;`.
pub fn write_loss_csv(path: &Path, curve: &[LossRecord]) -> Result<()> {
    let mut out = String::from("stage,step,frame,total,rgb,parts,mu,s,lods\n");
    for r in curve {
        let lods: Vec<String> = r.lods.iter().map(|l| format!("{l}")).collect();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.stage,
            r.step,
            r.frame,
            r.terms.total,
            r.terms.rgb,
            r.terms.parts,
            r.terms.mu,
            r.terms.s,
            lods.join(";")
        ));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}
