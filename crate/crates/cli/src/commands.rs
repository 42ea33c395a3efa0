use std::path::Path;
use std::time::Instant;

use uvlod::bench::{default_sweep_lods, run_bench, run_sweep, strip, sweep_csv, BenchOptions, View};
use uvlod::checkpoint::{load_checkpoint, save_checkpoint};
use uvlod::config::RunConfig;
use uvlod::dataset::{default_camera, generate_synthetic_dataset, load_dataset, save_dataset, SyntheticConfig};
use uvlod::export::export_ply;
use uvlod::geometry::{desk_head, gaussian_count, orbit_camera, ExpressionVector, Mesh};
use uvlod::model::AvatarModel;
use uvlod::splat::RenderSettings;
use uvlod::trainer::{evaluate_mean, train_stage1_with, train_stage2_with, write_loss_csv, LossRecord, TrainConfig};
use uvlod::uv_field::LodValue;
use uvlod::{Error, Result};

use crate::{BenchArgs, ExportArgs, GenerateArgs, RenderArgs, SweepArgs};

const DESK_SEGMENTS: (usize, usize) = (48, 32);
// default camera distance in bounding radii when no dataset supplies cameras
const VIEW_DISTANCE: f64 = 4.5;
const VIEW_FOV: f64 = 0.75;

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

pub fn train(config: &Path, quiet: bool) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let mesh = match &cfg.mesh {
        Some(m) => Mesh::load(&m.obj, m.blendshapes.as_deref())?,
        None => desk_head(DESK_SEGMENTS.0, DESK_SEGMENTS.1),
    };
    let frames = match &cfg.data.generate {
        Some(g) => {
            let ds = generate_synthetic_dataset(&mesh, g)?;
            if let Some(dir) = &cfg.data.dir {
                save_dataset(dir, &ds.frames, Some(g))?;
            }
            ds.frames
        }
        None => load_dataset(cfg.data.dir.as_ref().expect("validated"))?,
    };
    let mut model = AvatarModel::new(cfg.model.clone(), mesh, cfg.train.seed)?;
    if !quiet {
        println!(
            "{} frames, {} parameters, S {}..{}",
            frames.len(),
            model.parameter_count(),
            cfg.model.s_min,
            cfg.model.s_max
        );
    }
    let every = |steps: usize| (steps / 10).max(1);
    let log = |rec: &LossRecord, steps: usize| {
        if !quiet && (rec.step % every(steps) == 0 || rec.step + 1 == steps) {
            println!("stage {} step {:>6} total {:.6} rgb {:.6}", rec.stage, rec.step, rec.terms.total, rec.terms.rgb);
        }
    };
    let t = Instant::now();
    let mut curve = train_stage1_with(&mut model, &frames, &cfg.train, None, |r| log(r, cfg.train.stage1_steps))?;
    curve.extend(train_stage2_with(&mut model, &frames, &cfg.train, None, |r| {
        log(r, cfg.train.stage2_steps)
    })?);
    let elapsed = t.elapsed();

    if let Some(path) = &cfg.loss_csv {
        write_loss_csv(path, &curve)?;
    }
    if let Some(parent) = cfg.output.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    save_checkpoint(&model, &cfg.output)?;

    summarize("stage 1", &curve, 1);
    summarize("stage 2", &curve, 2);
    let settings = cfg.train.render_settings();
    for l in [0.0, 1.0] {
        let m = evaluate_mean(&model, &frames, LodValue::new(l)?, &settings)?;
        println!("lod {l}: psnr {:.3} ssim {:.4} l1 {:.5}", m.psnr, m.ssim, m.l1);
    }
    println!("trained in {:.1} s, checkpoint {}", elapsed.as_secs_f64(), cfg.output.display());
    Ok(())
}

fn summarize(name: &str, curve: &[LossRecord], stage: u8) {
    let recs: Vec<_> = curve.iter().filter(|r| r.stage == stage).collect();
    if let (Some(first), Some(last)) = (recs.first(), recs.last()) {
        println!(
            "{name}: {} steps, total loss {:.6} -> {:.6}",
            recs.len(),
            first.terms.total,
            last.terms.total
        );
    }
}

/// Dataset frames as views, or a neutral front view.
fn views(model: &AvatarModel, data: Option<&Path>, size: usize) -> Result<Vec<View>> {
    match data {
        Some(dir) => Ok(load_dataset(dir)?
            .into_iter()
            .map(|f| View {
                expr: f.expr,
                camera: f.camera,
            })
            .collect()),
        None => {
            let (center, radius) = model.rest_sphere();
            Ok(vec![View {
                expr: ExpressionVector::zeros(model.config.expr_dim),
                camera: default_camera(center, VIEW_DISTANCE * radius, VIEW_FOV, size, size),
            }])
        }
    }
}

fn pick(views: Vec<View>, frame: usize) -> Result<View> {
    let n = views.len();
    views
        .into_iter()
        .nth(frame)
        .ok_or_else(|| Error::InvalidArgument(format!("frame {frame} out of range ({n} frames)")))
}

fn settings() -> RenderSettings {
    TrainConfig::default().render_settings()
}

pub fn render(a: &RenderArgs) -> Result<()> {
    let lod = LodValue::new(a.lod)?;
    let model = load_checkpoint(&a.checkpoint)?;
    let mut views = views(&model, a.data.as_deref(), a.size)?;
    if let Some(f) = a.frame {
        views = vec![pick(views, f)?];
    }
    let (center, _) = model.rest_sphere();
    let single = views.len() == 1;
    if !single {
        create_dir(&a.out)?;
    }
    for (i, v) in views.iter().enumerate() {
        let camera = orbit_camera(&v.camera, center, a.yaw, a.pitch);
        let set = model.gaussians(&v.expr, lod)?;
        let img = uvlod::metrics::Image::from(uvlod::splat::render(&set, &camera, &settings()));
        let path = if single {
            a.out.clone()
        } else {
            a.out.join(format!("render_{i:04}.png"))
        };
        img.save_png(&path)?;
        println!("{} lod {} resolution {} gaussians {}", path.display(), lod.get(), model.resolution_for(lod), set.len());
    }
    Ok(())
}

pub fn sweep(a: &SweepArgs) -> Result<()> {
    let lods = match &a.lods {
        Some(l) => l.iter().map(|&v| LodValue::new(v)).collect::<Result<Vec<_>>>()?,
        None => default_sweep_lods(),
    };
    let model = load_checkpoint(&a.checkpoint)?;
    let view = pick(views(&model, a.data.as_deref(), a.size)?, a.frame)?;
    let (rows, images) = run_sweep(&model, &view, &lods, &settings())?;
    create_dir(&a.out_dir)?;
    let csv = a.out_dir.join("sweep.csv");
    std::fs::write(&csv, sweep_csv(&rows)).map_err(|e| io_err(&csv, e))?;
    if !a.no_images {
        for (r, img) in rows.iter().zip(&images) {
            img.save_png(&a.out_dir.join(format!("lod_{:.2}.png", r.lod)))?;
        }
        strip(&images)?.save_png(&a.out_dir.join("strip.png"))?;
    }
    for r in &rows {
        println!("lod {:.2} gaussians {:>7} psnr {:.3}", r.lod, r.gaussian_count, r.quality.psnr);
    }
    Ok(())
}

pub fn bench(a: &BenchArgs) -> Result<()> {
    let lods = a.lods.iter().map(|&v| LodValue::new(v)).collect::<Result<Vec<_>>>()?;
    if a.frames == 0 {
        return Err(Error::InvalidArgument("frames must be at least 1".into()));
    }
    let model = load_checkpoint(&a.checkpoint)?;
    let views: Vec<View> = views(&model, a.data.as_deref(), a.size)?
        .into_iter()
        .cycle()
        .take(a.frames)
        .collect();
    let options = BenchOptions {
        warmup: a.warmup,
        iters: a.iters,
        serial: a.serial,
    };
    let report = run_bench(&model, &views, &lods, options, &settings())?;
    match &a.out {
        Some(p) => {
            report.write_csv(p)?;
            for r in &report.rows {
                println!("lod {:.2} gaussians {:>7} mean {:.2} ms fps {:.1}", r.lod, r.gaussian_count, r.mean_ms, r.fps);
            }
        }
        None => print!("{}", report.to_csv()),
    }
    Ok(())
}

pub fn export(a: &ExportArgs) -> Result<()> {
    let lod = LodValue::new(a.lod)?;
    let model = load_checkpoint(&a.checkpoint)?;
    let view = pick(views(&model, a.data.as_deref(), 1)?, a.frame)?;
    let pmap = model.position_map(&view.expr, lod)?;
    let set = model.gaussians(&view.expr, lod)?;
    debug_assert_eq!(set.len(), gaussian_count(&pmap));
    export_ply(&set, &a.out)?;
    println!("{} gaussians -> {}", set.len(), a.out.display());
    Ok(())
}

pub fn generate(a: &GenerateArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| io_err(p, e))?;
            toml::from_str::<SyntheticConfig>(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => SyntheticConfig::default(),
    };
    macro_rules! set {
        ($($f:ident),*) => { $(if let Some(v) = a.$f { cfg.$f = v; })* };
    }
    set!(seed, frames, width, height, resolution, expr_dim);
    let mesh = desk_head(DESK_SEGMENTS.0, DESK_SEGMENTS.1);
    let ds = generate_synthetic_dataset(&mesh, &cfg)?;
    save_dataset(&a.out, &ds.frames, Some(&cfg))?;
    println!("{} frames -> {}", ds.frames.len(), a.out.display());
    Ok(())
}
