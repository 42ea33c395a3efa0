//! LOD benchmark and LOD sweep reports.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use crate::error::{ensure, Error, Result};
use crate::geometry::{gaussian_count, Camera, ExpressionVector};
use crate::metrics::{compare, Image, Metrics};
use crate::model::AvatarModel;
use crate::splat::{render, RenderSettings};
use crate::uv_field::LodValue;

/// One view to render: an expression seen from a camera.
#[derive(Clone, Debug)]
pub struct View {
    pub expr: ExpressionVector,
    pub camera: Camera,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub lod: f64,
    pub resolution: usize,
    pub gaussian_count: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub fps: f64,
    /// Quality against the same views rendered at lod 0.
    pub quality: Metrics,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub environment: Vec<String>,
    pub rows: Vec<BenchRow>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchOptions {
    pub warmup: usize,
    pub iters: usize,
    /// Render on a single thread.
    pub serial: bool,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            warmup: 2,
            iters: 10,
            serial: false,
        }
    }
}

pub fn environment(serial: bool) -> Vec<String> {
    let threads = if serial { 1 } else { rayon::current_num_threads() };
    vec![
        format!("uvlod {}", env!("CARGO_PKG_VERSION")),
        format!("os {} / arch {}", std::env::consts::OS, std::env::consts::ARCH),
        format!(
            "available parallelism {}",
            std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
        ),
        format!("render threads {threads}"),
        format!("build {}", if cfg!(debug_assertions) { "debug" } else { "release" }),
    ]
}

/// Resample, decode and render one view; returns the image.
fn render_view(model: &AvatarModel, view: &View, lod: LodValue, settings: &RenderSettings) -> Result<Image> {
    let set = model.gaussians(&view.expr, lod)?;
    Ok(Image::from(render(&set, &view.camera, settings)).clamped())
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn mean_metrics(all: &[Metrics]) -> Metrics {
    let n = all.len().max(1) as f64;
    Metrics {
        l1: all.iter().map(|m| m.l1).sum::<f64>() / n,
        psnr: all.iter().map(|m| m.psnr).sum::<f64>() / n,
        ssim: all.iter().map(|m| m.ssim).sum::<f64>() / n,
    }
}

/// Times resample + decode + render for every LOD. Rows come back sorted by LOD.
pub fn run_bench(
    model: &AvatarModel,
    views: &[View],
    lods: &[LodValue],
    options: BenchOptions,
    settings: &RenderSettings,
) -> Result<BenchReport> {
    ensure!(options.iters >= 1, InvalidArgument, "iters must be at least 1");
    ensure!(!views.is_empty(), InvalidArgument, "bench needs at least one view");
    let mut lods = lods.to_vec();
    lods.sort_by(|a, b| a.get().total_cmp(&b.get()));
    lods.dedup();

    let work = || -> Result<Vec<BenchRow>> {
        let reference: Vec<Image> = views
            .iter()
            .map(|v| render_view(model, v, LodValue::FINEST, settings))
            .collect::<Result<_>>()?;
        let mut rows = Vec::with_capacity(lods.len());
        for &lod in &lods {
            for _ in 0..options.warmup {
                for v in views {
                    render_view(model, v, lod, settings)?;
                }
            }
            let mut times = Vec::with_capacity(options.iters * views.len());
            let mut quality = Vec::with_capacity(views.len());
            for it in 0..options.iters {
                for (v, r) in views.iter().zip(&reference) {
                    let t = Instant::now();
                    let img = render_view(model, v, lod, settings)?;
                    times.push(t.elapsed().as_secs_f64() * 1e3);
                    if it == 0 {
                        quality.push(compare(r, &img)?);
                    }
                }
            }
            let mean_ms = times.iter().sum::<f64>() / times.len() as f64;
            let pmap = model.position_map(&views[0].expr, lod)?;
            rows.push(BenchRow {
                lod: lod.get(),
                resolution: pmap.resolution(),
                gaussian_count: gaussian_count(&pmap),
                mean_ms,
                p50_ms: median(&mut times),
                fps: 1000.0 / mean_ms,
                quality: mean_metrics(&quality),
            });
        }
        Ok(rows)
    };
    let rows = if options.serial {
        rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?
            .install(work)?
    } else {
        work()?
    };
    Ok(BenchReport {
        environment: environment(options.serial),
        rows,
    })
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for line in &self.environment {
            let _ = writeln!(out, "# {line}");
        }
        out.push_str("lod,resolution,gaussian_count,mean_ms,p50_ms,fps,psnr,ssim,l1\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{:.4},{:.4},{:.3},{:.4},{:.6},{:.6}",
                r.lod, r.resolution, r.gaussian_count, r.mean_ms, r.p50_ms, r.fps, r.quality.psnr, r.quality.ssim, r.quality.l1
            );
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// `0.0, 0.05, .., 1.0`.
pub fn default_sweep_lods() -> Vec<LodValue> {
    (0..=20)
        .map(|i| LodValue::new(i as f64 / 20.0).expect("in range"))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub lod: f64,
    pub resolution: usize,
    pub gaussian_count: usize,
    /// Against the lod 0 render of the same view.
    pub quality: Metrics,
}

/// Renders `view` at every LOD and compares each image with the lod 0 render.
pub fn run_sweep(
    model: &AvatarModel,
    view: &View,
    lods: &[LodValue],
    settings: &RenderSettings,
) -> Result<(Vec<SweepRow>, Vec<Image>)> {
    ensure!(!lods.is_empty(), InvalidArgument, "sweep needs at least one lod");
    let reference = render_view(model, view, LodValue::FINEST, settings)?;
    let mut rows = Vec::with_capacity(lods.len());
    let mut images = Vec::with_capacity(lods.len());
    for &lod in lods {
        let set = model.gaussians(&view.expr, lod)?;
        let img = Image::from(render(&set, &view.camera, settings)).clamped();
        rows.push(SweepRow {
            lod: lod.get(),
            resolution: model.resolution_for(lod),
            gaussian_count: set.len(),
            quality: compare(&reference, &img)?,
        });
        images.push(img);
    }
    Ok((rows, images))
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("lod,resolution,gaussian_count,psnr,ssim,l1\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{:.4},{:.6},{:.6}",
            r.lod, r.resolution, r.gaussian_count, r.quality.psnr, r.quality.ssim, r.quality.l1
        );
    }
    out
}

/// Images side by side, left to right.
pub fn strip(images: &[Image]) -> Result<Image> {
    ensure!(!images.is_empty(), InvalidArgument, "no images for the strip");
    let (w, h) = (images[0].width, images[0].height);
    ensure!(
        images.iter().all(|i| i.width == w && i.height == h),
        ShapeMismatch,
        "strip images differ in size"
    );
    let n = images.len();
    let mut pixels = vec![[0.0; 3]; n * w * h];
    for (k, img) in images.iter().enumerate() {
        for y in 0..h {
            let dst = y * n * w + k * w;
            pixels[dst..dst + w].copy_from_slice(&img.pixels[y * w..(y + 1) * w]);
        }
    }
    Image::new(n * w, h, pixels)
}

/// Least-squares slope of `ys` against `xs`.
pub fn trend_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        0.0
    } else {
        sxy / sxx
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_default_has_21_steps() {
        let l = default_sweep_lods();
        assert_eq!(l.len(), 21);
        assert_eq!(l[0].get(), 0.0);
        assert_eq!(l[20].get(), 1.0);
        assert!((l[1].get() - 0.05).abs() < 1e-15);
    }

    #[test]
    fn median_and_slope() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!((trend_slope(&[0.0, 1.0, 2.0], &[1.0, 3.0, 5.0]) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn strip_places_images_left_to_right() {
        let a = Image::filled(2, 2, [1.0, 0.0, 0.0]);
        let b = Image::filled(2, 2, [0.0, 1.0, 0.0]);
        let s = strip(&[a, b]).unwrap();
        assert_eq!(s.width, 4);
        assert_eq!(s.pixel(1, 1), [1.0, 0.0, 0.0]);
        assert_eq!(s.pixel(2, 0), [0.0, 1.0, 0.0]);
    }
}
