//! RGB images and the quality metrics used to compare them.

use crate::error::{ensure, Result};
use crate::splat::RenderedImage;

/// Row-major linear RGB.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[f64; 3]>,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<[f64; 3]>) -> Result<Self> {
        ensure!(
            pixels.len() == width * height,
            ShapeMismatch,
            "{} pixels for a {width}x{height} image",
            pixels.len()
        );
        Ok(Image { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, color: [f64; 3]) -> Self {
        Image {
            width,
            height,
            pixels: vec![color; width * height],
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        self.pixels[y * self.width + x]
    }

    pub fn clamped(&self) -> Image {
        Image {
            width: self.width,
            height: self.height,
            pixels: self.pixels.iter().map(|c| c.map(|v| v.clamp(0.0, 1.0))).collect(),
        }
    }

    /// Pixels multiplied by a binary mask.
    pub fn masked(&self, mask: &[bool]) -> Image {
        Image {
            width: self.width,
            height: self.height,
            pixels: self
                .pixels
                .iter()
                .zip(mask)
                .map(|(c, &m)| if m { *c } else { [0.0; 3] })
                .collect(),
        }
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        Image {
            width: img.width() as usize,
            height: img.height() as usize,
            pixels: img.pixels().map(|p| p.0.map(|v| v as f64 / 255.0)).collect(),
        }
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let c = self.pixels[y as usize * self.width + x as usize];
            image::Rgb(c.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
        })
    }

    pub fn save_png(&self, path: &std::path::Path) -> Result<()> {
        self.to_rgb8().save(path)?;
        Ok(())
    }

    fn same_shape(&self, other: &Image) -> Result<()> {
        ensure!(
            self.width == other.width && self.height == other.height,
            ShapeMismatch,
            "images are {}x{} and {}x{}",
            self.width,
            self.height,
            other.width,
            other.height
        );
        Ok(())
    }
}

impl From<RenderedImage> for Image {
    fn from(r: RenderedImage) -> Self {
        Image {
            width: r.width,
            height: r.height,
            pixels: r.color,
        }
    }
}

pub fn l1(a: &Image, b: &Image) -> Result<f64> {
    a.same_shape(b)?;
    let sum: f64 = a
        .pixels
        .iter()
        .zip(&b.pixels)
        .flat_map(|(p, q)| (0..3).map(move |c| (p[c] - q[c]).abs()))
        .sum();
    Ok(sum / (3 * a.pixels.len()).max(1) as f64)
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    a.same_shape(b)?;
    let sum: f64 = a
        .pixels
        .iter()
        .zip(&b.pixels)
        .flat_map(|(p, q)| (0..3).map(move |c| (p[c] - q[c]).powi(2)))
        .sum();
    Ok(sum / (3 * a.pixels.len()).max(1) as f64)
}

pub const PSNR_CAP: f64 = 100.0;

/// Peak signal-to-noise ratio for a peak of 1, capped at 100 dB.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m < 1e-10 { PSNR_CAP } else { (-10.0 * m.log10()).min(PSNR_CAP) })
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size)
        .map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable filter over the positions where the whole window fits.
fn filter_valid(src: &[f64], w: usize, h: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (ow, oh) = (w + 1 - n, h + 1 - n);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..n).map(|i| k[i] * src[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    (out, ow, oh)
}

/// Mean structural similarity over the three channels, using an 11x11
/// Gaussian window with sigma 1.5 and no padding. Images smaller than the
/// window use the largest odd window that fits.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    a.same_shape(b)?;
    let (w, h) = (a.width, a.height);
    ensure!(w > 0 && h > 0, InvalidArgument, "empty image");
    let mut size = SSIM_WINDOW.min(w).min(h);
    if size % 2 == 0 {
        size -= 1;
    }
    let k = gaussian_window(size, SSIM_SIGMA);
    let mut total = 0.0;
    for c in 0..3 {
        let x: Vec<f64> = a.pixels.iter().map(|p| p[c]).collect();
        let y: Vec<f64> = b.pixels.iter().map(|p| p[c]).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let (mx, ow, oh) = filter_valid(&x, w, h, &k);
        let (my, _, _) = filter_valid(&y, w, h, &k);
        let (sxx, _, _) = filter_valid(&xx, w, h, &k);
        let (syy, _, _) = filter_valid(&yy, w, h, &k);
        let (sxy, _, _) = filter_valid(&xy, w, h, &k);
        let mut sum = 0.0;
        for i in 0..ow * oh {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            sum += ((2.0 * ux * uy + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2));
        }
        total += sum / (ow * oh) as f64;
    }
    Ok(total / 3.0)
}

/// The three metrics reported together.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub l1: f64,
    pub psnr: f64,
    pub ssim: f64,
}

pub fn compare(reference: &Image, test: &Image) -> Result<Metrics> {
    Ok(Metrics {
        l1: l1(reference, test)?,
        psnr: psnr(reference, test)?,
        ssim: ssim(reference, test)?,
    })
}
